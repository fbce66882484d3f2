//! Standard geometric augmentation: the eight symmetries of the square
//! (quarter-turn rotations and mirror images), applied jointly to image
//! and mask.

use rand::Rng;

use super::SamplePair;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `op` in `0..8`: bit 0 mirrors columns, bits 1-2 count quarter turns
/// (counter-clockwise), applied after the mirror.
pub fn dihedral(pair: &SamplePair, op: u8) -> Result<SamplePair> {
    if op >= 8 {
        return Err(Error::Config(format!("dihedral op must be below 8, got {op}")));
    }
    let (h, w) = (pair.height(), pair.width());
    let turns = op >> 1;
    if turns % 2 == 1 && h != w {
        return Err(Error::Shape(format!("quarter turns need a square image, got {h}x{w}")));
    }
    let apply = |t: &Tensor| -> Tensor {
        let src = t.data();
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            // Invert the rotation, then the mirror.
            let (sy, mut sx) = match turns {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            if op & 1 == 1 {
                sx = w - 1 - sx;
            }
            src[sy * w + sx]
        })
    };
    SamplePair::new(apply(&pair.image), apply(&pair.mask))
}

/// `copies` transformed versions of each pair, drawn from the non-identity
/// symmetries valid for the extent.
pub fn augment<R: Rng + ?Sized>(pairs: &[SamplePair], copies: usize, rng: &mut R) -> Result<Vec<SamplePair>> {
    let mut out = Vec::with_capacity(pairs.len() * copies);
    for p in pairs {
        let ops: &[u8] = if p.height() == p.width() {
            &[1, 2, 3, 4, 5, 6, 7]
        } else {
            &[1, 4, 5]
        };
        for _ in 0..copies {
            out.push(dihedral(p, ops[rng.random_range(0..ops.len())])?);
        }
    }
    Ok(out)
}
