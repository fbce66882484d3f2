//! Dataset manifests (`id,image,mask,split` CSV plus a provenance sidecar),
//! phantom dataset generation, loading and ingestion of external pairs.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image_io::{read_image, read_mask, write_image, ImageFormat};
use super::phantom::{generate_phantom, PhantomConfig};
use super::SamplePair;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["id", "image", "mask", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("split must be train or test, got {other}"))),
        }
    }

    /// First phantom index of a split of size `n`: train uses `0..n`, test `n..2n`.
    pub fn index_offset(self, n: usize) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => n as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Phantom config hash, or `external`.
    pub provenance: String,
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".provenance");
    PathBuf::from(s)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {}", r.id)));
            }
        }
        Ok(())
    }

    /// Writes the CSV and its `.provenance` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.write_record([
                r.id.as_str(),
                &r.image.to_string_lossy(),
                &r.mask.to_string_lossy(),
                r.split.as_str(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, format!("provenance={}\n", self.provenance)).map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = rd.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Data(format!(
                "{}: manifest header must be {}",
                path.display(),
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            records.push(ManifestRecord {
                id: row[0].to_string(),
                image: PathBuf::from(&row[1]),
                mask: PathBuf::from(&row[2]),
                split: Split::parse(&row[3])?,
            });
        }
        let provenance = fs::read_to_string(sidecar_path(path))
            .ok()
            .and_then(|s| {
                s.lines()
                    .find_map(|l| l.strip_prefix("provenance=").map(str::to_string))
            })
            .unwrap_or_else(|| "unknown".into());
        let m = DatasetManifest {
            records,
            provenance,
        };
        m.validate()?;
        Ok(m)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `n` phantom pairs of one split under `dir` plus `dir/{split}.csv`,
/// and returns the manifest path.
pub fn generate_dataset(
    config: &PhantomConfig,
    n: usize,
    split: Split,
    dir: &Path,
    format: ImageFormat,
) -> Result<PathBuf> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let offset = split.index_offset(n);
    let ext = format.extension();
    let records: Vec<ManifestRecord> = (0..n as u64)
        .map(|k| {
            let id = format!("phantom-{:06}", offset + k);
            ManifestRecord {
                image: PathBuf::from(split.as_str()).join(format!("{id}_image.{ext}")),
                mask: PathBuf::from(split.as_str()).join(format!("{id}_mask.{ext}")),
                id,
                split,
            }
        })
        .collect();
    records
        .par_iter()
        .enumerate()
        .map(|(k, r)| {
            let pair = generate_phantom(config, offset + k as u64)?;
            write_image(&dir.join(&r.image), &pair.image)?;
            write_image(&dir.join(&r.mask), &pair.mask)
        })
        .collect::<Result<Vec<()>>>()?;
    let path = dir.join(format!("{}.csv", split.as_str()));
    DatasetManifest {
        records,
        provenance: config.hash(),
    }
    .write(&path)?;
    Ok(path)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_record(base: &Path, r: &ManifestRecord) -> Result<SamplePair> {
    let named = |e: Error| match e {
        Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
            Error::Data(format!("record {}: missing file {}", r.id, path.display()))
        }
        Error::Data(msg) | Error::Shape(msg) => Error::Data(format!("record {}: {msg}", r.id)),
        other => other,
    };
    let image = read_image(&resolve(base, &r.image)).map_err(named)?;
    let mask = read_mask(&resolve(base, &r.mask)).map_err(named)?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data(format!("record {}: image values outside [0,1]", r.id)));
    }
    SamplePair::new(image, mask).map_err(named)
}

/// Loads every record of a manifest, in order. Shapes must be uniform.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SamplePair>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let pairs = manifest
        .records
        .par_iter()
        .map(|r| load_record(base, r))
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = pairs.first() {
        for (r, p) in manifest.records.iter().zip(&pairs) {
            if p.image.shape() != first.image.shape() {
                return Err(Error::Data(format!(
                    "record {} has shape {:?}, expected {:?}",
                    r.id,
                    p.image.shape(),
                    first.image.shape()
                )));
            }
        }
    }
    Ok(pairs)
}

/// Pairs images in `image_dir` matching `pattern` with same-named masks in
/// `mask_dir`, validates every pair and returns a manifest with absolute paths.
pub fn ingest_external(
    image_dir: &Path,
    mask_dir: &Path,
    pattern: &str,
    split: Split,
) -> Result<DatasetManifest> {
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let full = dir.join(pattern);
        let pat = full.to_string_lossy();
        let entries =
            glob::glob(&pat).map_err(|e| Error::Config(format!("bad pattern {pattern}: {e}")))?;
        let mut out = BTreeMap::new();
        for entry in entries {
            let p = entry.map_err(|e| {
                let path = e.path().to_path_buf();
                Error::io(path, e.into())
            })?;
            if p.is_file() {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
                if let Some(name) = name {
                    out.insert(name, p);
                }
            }
        }
        Ok(out)
    };
    let images = list(image_dir)?;
    let masks = list(mask_dir)?;
    let lonely_images: Vec<&str> = images
        .keys()
        .filter(|k| !masks.contains_key(*k))
        .map(String::as_str)
        .collect();
    let lonely_masks: Vec<&str> = masks
        .keys()
        .filter(|k| !images.contains_key(*k))
        .map(String::as_str)
        .collect();
    if !lonely_images.is_empty() || !lonely_masks.is_empty() {
        return Err(Error::Data(format!(
            "unmatched files; images without mask: [{}]; masks without image: [{}]",
            lonely_images.join(", "),
            lonely_masks.join(", ")
        )));
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no files match {pattern} in {}",
            image_dir.display()
        )));
    }
    let absolute = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    let mut records = Vec::with_capacity(images.len());
    let mut shape: Option<Vec<usize>> = None;
    for (name, image_path) in &images {
        let stem = Path::new(name)
            .file_stem()
            .map_or_else(|| name.clone(), |s| s.to_string_lossy().into_owned());
        let r = ManifestRecord {
            id: stem,
            image: absolute(image_path)?,
            mask: absolute(&masks[name])?,
            split,
        };
        let pair = load_record(Path::new("/"), &r)?;
        match &shape {
            None => shape = Some(pair.image.shape().to_vec()),
            Some(s) if s.as_slice() != pair.image.shape() => {
                return Err(Error::Data(format!(
                    "{}: shape {:?} differs from {:?}",
                    r.id,
                    pair.image.shape(),
                    s
                )));
            }
            Some(_) => {}
        }
        records.push(r);
    }
    let m = DatasetManifest {
        records,
        provenance: "external".into(),
    };
    m.validate()?;
    Ok(m)
}
