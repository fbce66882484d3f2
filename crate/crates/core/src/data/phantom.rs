//! Procedural "tumor phantoms": smooth correlated background with one or
//! more bright ellipses and their exact masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::SamplePair;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BACKGROUND_RANGE: (f64, f64) = (0.2, 0.6);
/// Steepness of the intensity ramp at the ellipse boundary, in units of the
/// normalized radius.
const EDGE_SHARPNESS: f64 = 16.0;
/// Normalized radius where the ramp reaches half the contrast; slightly
/// outside the mask so boundary pixels of small tumors keep most of the lift.
const EDGE_CENTER: f64 = 1.2;

pub const PHANTOM_KEYS: [&str; 8] = [
    "height",
    "width",
    "tumor_count_range",
    "tumor_radius_range",
    "tumor_contrast",
    "background_smoothness",
    "noise_sigma",
    "seed",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of ellipses per image.
    pub tumor_count_range: (usize, usize),
    /// Semi-axis range as a fraction of `min(height, width)`.
    pub tumor_radius_range: (f64, f64),
    /// Mean intensity offset inside a tumor.
    pub tumor_contrast: f64,
    /// Box-blur radius (pixels) of the background noise field.
    pub background_smoothness: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 32,
            width: 32,
            tumor_count_range: (1, 2),
            tumor_radius_range: (0.08, 0.25),
            tumor_contrast: 0.35,
            background_smoothness: 2,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 4 {
            return bad(format!("phantom extent {}x{} is below 4x4", self.height, self.width));
        }
        let (c0, c1) = self.tumor_count_range;
        if c0 == 0 || c0 > c1 {
            return bad(format!("tumor count range [{c0}, {c1}] must satisfy 1 <= lo <= hi"));
        }
        let (r0, r1) = self.tumor_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.5) {
            return bad(format!("tumor radius range [{r0}, {r1}] must satisfy 0 < lo <= hi <= 0.5"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.tumor_contrast > 2.0 * self.noise_sigma && self.tumor_contrast <= 1.0) {
            return bad(format!(
                "tumor contrast {} must exceed twice the noise sigma ({}) and be at most 1",
                self.tumor_contrast, self.noise_sigma
            ));
        }
        Ok(())
    }

    /// Defaults at another extent; images of 16 pixels or less get a
    /// 1-pixel background blur so the field does not flatten into a ramp.
    pub fn with_extent(height: usize, width: usize) -> Self {
        PhantomConfig {
            height,
            width,
            background_smoothness: if height.min(width) <= 16 { 1 } else { 2 },
            ..PhantomConfig::default()
        }
    }

    /// Overrides the fields named in `kv` (keys as in [`Self::to_key_values`]).
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.reject_unknown(&PHANTOM_KEYS)?;
        kv.update("height", &mut self.height)?;
        kv.update("width", &mut self.width)?;
        if let Some(v) = kv.list::<usize>("tumor_count_range")? {
            self.tumor_count_range = two("tumor_count_range", &v)?;
        }
        if let Some(v) = kv.list::<f64>("tumor_radius_range")? {
            self.tumor_radius_range = two("tumor_radius_range", &v)?;
        }
        kv.update("tumor_contrast", &mut self.tumor_contrast)?;
        kv.update("background_smoothness", &mut self.background_smoothness)?;
        kv.update("noise_sigma", &mut self.noise_sigma)?;
        kv.update("seed", &mut self.seed)
    }

    /// Canonical `key=value` lines, one per field.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            (
                "tumor_count_range".into(),
                format!("{},{}", self.tumor_count_range.0, self.tumor_count_range.1),
            ),
            (
                "tumor_radius_range".into(),
                format!("{:e},{:e}", self.tumor_radius_range.0, self.tumor_radius_range.1),
            ),
            ("tumor_contrast".into(), format!("{:e}", self.tumor_contrast)),
            ("background_smoothness".into(), self.background_smoothness.to_string()),
            ("noise_sigma".into(), format!("{:e}", self.noise_sigma)),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// First 16 hex digits of the SHA-256 of the canonical description.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_key_values() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

fn two<T: Copy>(key: &str, v: &[T]) -> Result<(T, T)> {
    match v {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} needs exactly two values"))),
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the generator for sample `index`.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

fn box_blur(field: &mut [f64], h: usize, w: usize, r: usize) {
    if r == 0 {
        return;
    }
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let s: f64 = field[y * w + lo..=y * w + hi].iter().sum();
            tmp[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let s: f64 = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
            field[y * w + x] = s / (hi - lo + 1) as f64;
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: 1 on the boundary.
    fn radius_at(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        (u * u + v * v).sqrt()
    }
}

/// One image/mask pair; a pure function of `(config, index)`.
pub fn generate_phantom(config: &PhantomConfig, index: u64) -> Result<SamplePair> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index));

    let mut bg: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    box_blur(&mut bg, h, w, config.background_smoothness);
    box_blur(&mut bg, h, w, config.background_smoothness);
    let lo = bg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (b0, b1) = BACKGROUND_RANGE;
    for v in &mut bg {
        *v = if hi > lo {
            b0 + (*v - lo) / (hi - lo) * (b1 - b0)
        } else {
            0.5 * (b0 + b1)
        };
    }

    let extent = h.min(w) as f64;
    let (c0, c1) = config.tumor_count_range;
    let (r0, r1) = config.tumor_radius_range;
    let count = rng.random_range(c0..=c1);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let a = rng.random_range(r0..=r1) * extent;
            let b = rng.random_range(r0..=r1) * extent;
            let margin = (a.max(b).floor() as usize).min((h.min(w) - 1) / 2);
            // Centers sit on pixel centers, so every ellipse covers at least one pixel.
            let cy = rng.random_range(margin..=h - 1 - margin);
            let cx = rng.random_range(margin..=w - 1 - margin);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: cy as f64 + 0.5,
                cx: cx as f64 + 0.5,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect();

    let mut image = vec![0.0; h * w];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let r = ellipses
                .iter()
                .map(|e| e.radius_at(py, px))
                .fold(f64::INFINITY, f64::min);
            let i = y * w + x;
            if r <= 1.0 {
                mask[i] = 1.0;
            }
            let lift = config.tumor_contrast / (1.0 + (EDGE_SHARPNESS * (r - EDGE_CENTER)).exp());
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise_sigma;
            image[i] = (bg[i] + lift + noise).clamp(0.0, 1.0);
        }
    }
    SamplePair::new(
        Tensor::new(vec![1, h, w], image)?,
        Tensor::new(vec![1, h, w], mask)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_round_trip() {
        let mut c = PhantomConfig::with_extent(16, 16);
        assert_eq!(c.background_smoothness, 1);
        assert_eq!(PhantomConfig::with_extent(32, 32).background_smoothness, 2);
        c.tumor_radius_range = (0.1, 0.2);
        c.seed = 99;
        let mut kv = KeyValues::new();
        for (k, v) in c.to_key_values() {
            kv.set(&k, v);
        }
        let mut back = PhantomConfig::default();
        back.apply(&kv).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        kv.set("tumor_count_range", "1,2,3");
        assert!(back.apply(&kv).is_err());
        assert!(back.apply(&KeyValues::parse("colour=red").unwrap()).is_err());
    }

    fn region_means(p: &SamplePair) -> Option<(f64, f64)> {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
        for (&v, &m) in p.image.data().iter().zip(p.mask.data()) {
            if m == 1.0 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(splitmix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn phantoms_are_deterministic_and_index_dependent() {
        let cfg = PhantomConfig {
            seed: 42,
            ..PhantomConfig::default()
        };
        let a = generate_phantom(&cfg, 7).unwrap();
        let b = generate_phantom(&cfg, 7).unwrap();
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.mask, b.mask);
        assert_ne!(generate_phantom(&cfg, 8).unwrap().image, a.image);
    }

    #[test]
    fn masks_are_binary_with_bounded_area() {
        for (h, w) in [(32, 32), (16, 16), (24, 40)] {
            let cfg = PhantomConfig {
                height: h,
                width: w,
                seed: 3,
                ..PhantomConfig::default()
            };
            let m = h.min(w) as f64;
            let (r0, r1) = cfg.tumor_radius_range;
            let upper = 2.0 * std::f64::consts::PI * (r1 * m + 1.0).powi(2);
            let lower = (std::f64::consts::PI * (r0 * m - 1.0).max(0.0).powi(2)).max(1.0);
            for i in 0..1000 {
                let p = generate_phantom(&cfg, i).unwrap();
                assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let area: f64 = p.mask.data().iter().sum();
                assert!(area >= lower && area <= upper, "{h}x{w} #{i}: area {area}");
            }
        }
    }

    #[test]
    fn tumors_are_brighter_than_background() {
        // Small images use a narrower blur so the background stays local.
        for (extent, smoothness, seed) in [(32, 2, 11), (32, 2, 12), (16, 1, 11), (16, 1, 12)] {
            let cfg = PhantomConfig {
                height: extent,
                width: extent,
                background_smoothness: smoothness,
                seed,
                ..PhantomConfig::default()
            };
            let ok = (0..1000)
                .filter(|&i| {
                    let p = generate_phantom(&cfg, i).unwrap();
                    region_means(&p).is_some_and(|(inside, outside)| {
                        inside - outside >= cfg.tumor_contrast / 2.0
                    })
                })
                .count();
            assert!(ok >= 990, "{extent}x{extent} seed {seed}: {ok}/1000");
        }
    }

    #[test]
    fn validation() {
        let base = PhantomConfig::default();
        assert!(base.validate().is_ok());
        for bad in [
            PhantomConfig { tumor_count_range: (0, 2), ..base.clone() },
            PhantomConfig { tumor_count_range: (3, 2), ..base.clone() },
            PhantomConfig { tumor_radius_range: (0.3, 0.2), ..base.clone() },
            PhantomConfig { tumor_radius_range: (0.1, 0.7), ..base.clone() },
            PhantomConfig { tumor_contrast: 0.05, noise_sigma: 0.03, ..base.clone() },
            PhantomConfig { height: 2, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
            assert!(generate_phantom(&bad, 0).is_err());
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = PhantomConfig::default();
        let b = PhantomConfig { seed: 1, ..a.clone() };
        let c = PhantomConfig { noise_sigma: 0.031, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
