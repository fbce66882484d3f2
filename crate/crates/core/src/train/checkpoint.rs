//! Binary checkpoints. Little-endian layout:
//!
//! ```text
//! "HVAE" | u32 version | u8 kind | u64 epoch
//! u32 len | config text (key=value lines)
//! u32 count | count × (u32 len | name | u32 rank | rank × u64 dim | f64 data)
//! [u8; 32] rng seed | u64 stream | u128 word position
//! u8 has_adam | [u64 t | moments m | moments v]   (tensors as above, unnamed)
//! [u8; 32] SHA-256 of everything before
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::adam::AdamState;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{InitSpec, LayerParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HVAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Vae,
    Hvae,
    UNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Hvae => "hvae",
            ModelKind::UNet => "unet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "hvae" => Ok(ModelKind::Hvae),
            "unet" => Ok(ModelKind::UNet),
            other => Err(Error::Config(format!("model kind must be vae, hvae or unet, got {other}"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            ModelKind::Vae => 0,
            ModelKind::Hvae => 1,
            ModelKind::UNet => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(ModelKind::Vae),
            1 => Ok(ModelKind::Hvae),
            2 => Ok(ModelKind::UNet),
            other => Err(Error::Checkpoint(format!("unknown model kind tag {other}"))),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::parse(s)
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    /// Epochs completed when written.
    pub epoch: u64,
    /// Echo of the training configuration.
    pub config: KeyValues,
    pub params: LayerParams,
    pub rng: RngState,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(out, t.rank())?;
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible tensor shape {shape:?}")))?;
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let text = self.config.render();
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.params.len())?;
        for e in self.params.entries() {
            put_u32(&mut out, e.name.len())?;
            out.extend_from_slice(e.name.as_bytes());
            put_tensor(&mut out, &e.value)?;
        }
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                if !a.matches(&self.params) {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                out.push(1);
                out.extend_from_slice(&a.t.to_le_bytes());
                for t in a.m.iter().chain(&a.v) {
                    put_tensor(&mut out, t)?;
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch; file is corrupt".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let kind = ModelKind::from_tag(r.u8()?)?;
        let epoch = r.u64()?;
        let config = KeyValues::parse(&r.string()?)?;
        let count = r.u32()?;
        let mut params = LayerParams::new();
        for _ in 0..count {
            let name = r.string()?;
            let t = r.tensor()?;
            params
                .insert(name, t, InitSpec::Loaded)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let a = AdamState { m, v, t };
                if !a.matches(&params) {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                Some(a)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
        }
        Ok(Checkpoint {
            kind,
            epoch,
            config,
            params,
            rng,
            adam,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
