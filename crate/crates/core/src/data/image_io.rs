//! Single-channel image files: binary PGM (`P5`) and `IMGF`, a raw
//! little-endian f64 format with a 16-byte header (`"IMGF"`, `u32` height,
//! `u32` width, four reserved bytes).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMGF_MAGIC: &[u8; 4] = b"IMGF";
const IMGF_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// 8-bit binary PGM, lossy to 1/255.
    Pgm,
    /// Raw f64, lossless.
    Imgf,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Pgm => "pgm",
            ImageFormat::Imgf => "imgf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ImageFormat::Pgm),
            "imgf" => Ok(ImageFormat::Imgf),
            other => Err(Error::Config(format!("image format must be pgm or imgf, got {other}"))),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        ImageFormat::parse(ext).map_err(|_| {
            Error::Data(format!("{}: unknown image extension", path.display()))
        })
    }
}

/// Pixel values as stored, before any rescaling.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// PGM maxval; `None` for raw f64 files.
    pub maxval: Option<u32>,
}

pub fn encode_pgm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(img)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn encode_imgf(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(img)?;
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::Data(format!("extent {n} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(IMGF_HEADER + 8 * h * w);
    out.extend_from_slice(IMGF_MAGIC);
    out.extend_from_slice(&dim(h)?.to_le_bytes());
    out.extend_from_slice(&dim(w)?.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn plane_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected a [1,H,W] or [H,W] image, got {s:?}"))),
    }
}

struct PgmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_pgm_header(bytes: &[u8]) -> Result<PgmHeader> {
    let bad = |msg: &str| Error::Data(format!("PGM header: {msg}"));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad("missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed number"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before pixel data"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("zero extent or maxval outside 1..=65535"));
    }
    Ok(PgmHeader {
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos + 1,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<RawImage> {
    let h = parse_pgm_header(bytes)?;
    let n = h.width * h.height;
    let data = &bytes[h.offset..];
    let values: Vec<f64> = if h.maxval < 256 {
        if data.len() < n {
            return Err(Error::Data(format!("PGM: expected {n} pixels, found {}", data.len())));
        }
        data[..n].iter().map(|&b| f64::from(b)).collect()
    } else {
        if data.len() < 2 * n {
            return Err(Error::Data(format!(
                "PGM: expected {n} 16-bit pixels, found {} bytes",
                data.len()
            )));
        }
        data.chunks_exact(2)
            .take(n)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    };
    Ok(RawImage {
        height: h.height,
        width: h.width,
        values,
        maxval: Some(h.maxval),
    })
}

pub fn decode_imgf(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < IMGF_HEADER || &bytes[..4] != IMGF_MAGIC {
        return Err(Error::Data("IMGF: missing magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (height, width) = (word(4), word(8));
    let n = height * width;
    let body = &bytes[IMGF_HEADER..];
    if height == 0 || width == 0 || body.len() != 8 * n {
        return Err(Error::Data(format!(
            "IMGF: {height}x{width} header does not match {} data bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(RawImage {
        height,
        width,
        values,
        maxval: None,
    })
}

pub fn read_raw(path: &Path) -> Result<RawImage> {
    let format = ImageFormat::from_path(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = match format {
        ImageFormat::Pgm => decode_pgm(&bytes),
        ImageFormat::Imgf => decode_imgf(&bytes),
    };
    decoded.map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads an image as `[1,H,W]`; 8/16-bit files are rescaled to `[0,1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let raw = read_raw(path)?;
    let scale = raw.maxval.map_or(1.0, f64::from);
    let t = Tensor::new(
        vec![1, raw.height, raw.width],
        raw.values.iter().map(|v| v / scale).collect(),
    )?;
    if !t.all_finite() {
        return Err(Error::Data(format!("{}: non-finite pixel", path.display())));
    }
    Ok(t)
}

/// Distinct stored values with their counts, rendered `value:count`.
pub fn value_histogram(values: &[f64]) -> String {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for &v in values {
        let key = if v == 0.0 { 0 } else { v.to_bits() };
        counts.entry(key).or_insert((v, 0)).1 += 1;
    }
    let mut items: Vec<(f64, usize)> = counts.into_values().collect();
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    items
        .iter()
        .map(|(v, c)| format!("{v}:{c}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Reads a mask as `[1,H,W]` in `{0,1}`. Stored values must be `{0,1}` or
/// `{0,maxval}`; anything else is rejected with a value histogram.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let raw = read_raw(path)?;
    let full = raw.maxval.map_or(1.0, f64::from);
    let unit = raw.values.iter().all(|&v| v == 0.0 || v == 1.0);
    let scaled = raw.values.iter().all(|&v| v == 0.0 || v == full);
    let scale = if unit {
        1.0
    } else if scaled {
        full
    } else {
        return Err(Error::Data(format!(
            "{}: mask is not binary; stored values {}",
            path.display(),
            value_histogram(&raw.values)
        )));
    };
    Tensor::new(
        vec![1, raw.height, raw.width],
        raw.values
            .iter()
            .map(|v| if v / scale >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
    )
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Pgm => encode_pgm(img)?,
        ImageFormat::Imgf => encode_imgf(img)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
