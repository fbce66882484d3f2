//! Paired image+mask samples: procedural phantoms, file formats and
//! dataset manifests.

mod augment;
mod image_io;
mod manifest;
mod phantom;

pub use augment::{augment, dihedral};
pub use image_io::{
    decode_imgf, decode_pgm, encode_imgf, encode_pgm, read_image, read_mask, read_raw,
    value_histogram, write_image, ImageFormat, RawImage,
};
pub use manifest::{
    generate_dataset, ingest_external, load_dataset, DatasetManifest, ManifestRecord, Split,
    MANIFEST_HEADER,
};
pub use phantom::{generate_phantom, sample_seed, splitmix64, PhantomConfig, PHANTOM_KEYS};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// An image `[1,H,W]` in `[0,1]` with its binary tumor mask `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Tensor,
    pub mask: Tensor,
}

impl SamplePair {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Shape(format!("image must be [1,H,W], got {s:?}")));
        }
        if mask.shape() != s {
            return Err(Error::Shape(format!(
                "mask {:?} does not match image {s:?}",
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data("mask is not binary".into()));
        }
        Ok(SamplePair { image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Image and mask stacked as `[2,H,W]`.
    pub fn stacked(&self) -> Tensor {
        tensor::concat_axis0(&self.image, &self.mask).expect("shapes checked at construction")
    }
}
