//! Sampling from a trained decoder and the evaluation metrics: Dice overlap,
//! PSNR and windowed SSIM, aggregated over independent runs.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::SamplePair;
use crate::error::{Error, Result};
use crate::nn::{GenerativeNet, LayerParams};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;

/// Draws `n` pairs by decoding `z ~ N(0, I)`: the image mean clamped to
/// `[0,1]` and the mask `σ(logit) > threshold`.
pub fn sample_pairs<R: Rng + ?Sized>(
    net: &GenerativeNet,
    params: &LayerParams,
    n: usize,
    threshold: f64,
    rng: &mut R,
) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let d = net.config().latent_dim;
    let latents: Vec<Tensor> = (0..n)
        .map(|_| Tensor::from_fn(&[d], |_| rng.sample(StandardNormal)))
        .collect();
    latents
        .par_iter()
        .map(|z| {
            let g = Graph::new();
            let p = params.bind(&g);
            let out = net.decode(&p, g.constant(z.clone()))?;
            let image = out.image_mean.value().map(|v| v.clamp(0.0, 1.0));
            let mask = out.mask_logits.value().map(|l| {
                let prob = if l >= 0.0 {
                    1.0 / (1.0 + (-l).exp())
                } else {
                    let e = l.exp();
                    e / (1.0 + e)
                };
                f64::from(prob > threshold)
            });
            SamplePair::new(image, mask)
        })
        .collect()
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)`; two empty masks score 1.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "dice")?;
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(a) || !binary(b) {
        return Err(Error::Data("dice needs binary masks".into()));
    }
    let (mut inter, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += x * y;
        sa += x;
        sb += y;
    }
    if sa + sb == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (sa + sb))
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(max_val² / MSE)` in dB; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("max_val must be positive, got {max_val}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::Shape(format!("expected a [1,H,W] image, got {s:?}"))),
    }
}

/// Mean SSIM over non-overlapping 8×8 windows with uniform weights,
/// `C1 = (0.01 max_val)²`, `C2 = (0.03 max_val)²`. Rows and columns past the
/// last full window are ignored.
pub fn ssim(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("max_val must be positive, got {max_val}")));
    }
    let (h, w) = plane(a)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("ssim needs at least {k}x{k} pixels, got {h}x{w}")));
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let (x, y) = (a.data(), b.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for wy in 0..h / k {
        for wx in 0..w / k {
            let idx = |i: usize, j: usize| (wy * k + i) * w + wx * k + j;
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    ma += x[idx(i, j)];
                    mb += y[idx(i, j)];
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (da, db) = (x[idx(i, j)] - ma, y[idx(i, j)] - mb);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Unbiased mean and standard deviation; one value gives std 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

/// Metrics of one run; `None` where a metric was not measured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub dsc: Option<f64>,
    /// Mean over pairs with finite PSNR.
    pub psnr_db: Option<f64>,
    /// Pairs whose PSNR is the `+∞` sentinel.
    pub psnr_inf: usize,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub runs: Vec<RunMetrics>,
    pub samples_per_run: usize,
}

impl MetricsReport {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| match metric {
                "dsc" => r.dsc,
                "psnr_db" => r.psnr_db,
                "psnr_inf" => r.ssim.map(|_| r.psnr_inf as f64),
                "ssim" => r.ssim,
                _ => None,
            })
            .collect()
    }

    pub fn summary(&self, metric: &str) -> Option<(f64, f64)> {
        mean_std(&self.values(metric))
    }

    /// `run,metric,value` rows, then `mean` and `std` rows per metric.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Data(format!("report csv: {e}"));
        w.write_record(["run", "metric", "value"]).map_err(err)?;
        let metrics = ["dsc", "psnr_db", "psnr_inf", "ssim"];
        let present: Vec<&str> = metrics
            .into_iter()
            .filter(|m| !self.values(m).is_empty())
            .collect();
        for (i, r) in self.runs.iter().enumerate() {
            for m in &present {
                let v = match *m {
                    "dsc" => r.dsc,
                    "psnr_db" => r.psnr_db,
                    "psnr_inf" => r.ssim.map(|_| r.psnr_inf as f64),
                    _ => r.ssim,
                };
                let cell = v.map_or_else(|| "na".to_string(), format_value);
                w.write_record([i.to_string(), m.to_string(), cell]).map_err(err)?;
            }
        }
        for m in &present {
            if let Some((mean, std)) = self.summary(m) {
                w.write_record(["mean", m, &format_value(mean)]).map_err(err)?;
                w.write_record(["std", m, &format_value(std)]).map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Data(format!("report csv: {e}")))
    }
}

/// Renders a metric, with `inf` for the PSNR sentinel.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Matches every generated image to its minimum-MSE reference image (ties
/// go to the higher SSIM) and averages PSNR and SSIM over the matches.
pub fn matched_fidelity(generated: &[SamplePair], reference: &[SamplePair]) -> Result<RunMetrics> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Data("generation metrics need non-empty sets".into()));
    }
    let matches = generated
        .par_iter()
        .map(|g| {
            let mut best: Option<(f64, f64, f64)> = None;
            for r in reference {
                let m = mse(&g.image, &r.image)?;
                if best.is_some_and(|(bm, _, _)| m > bm) {
                    continue;
                }
                let s = ssim(&g.image, &r.image, 1.0)?;
                let better = match best {
                    None => true,
                    Some((bm, _, bs)) => m < bm || s > bs,
                };
                if better {
                    best = Some((m, psnr(&g.image, &r.image, 1.0)?, s));
                }
            }
            Ok(best.expect("reference is non-empty"))
        })
        .collect::<Result<Vec<_>>>()?;
    let finite: Vec<f64> = matches.iter().map(|m| m.1).filter(|p| p.is_finite()).collect();
    let n = matches.len() as f64;
    Ok(RunMetrics {
        dsc: None,
        psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        psnr_inf: matches.len() - finite.len(),
        ssim: Some(matches.iter().map(|m| m.2).sum::<f64>() / n),
    })
}

/// PSNR/SSIM of `generated` against `reference` over `runs` runs. With one
/// run the full generated set is matched; with more, each run matches a
/// bootstrap resample of the generated set drawn from `rng`.
pub fn evaluate_generation<R: Rng + ?Sized>(
    generated: &[SamplePair],
    reference: &[SamplePair],
    runs: usize,
    rng: &mut R,
) -> Result<MetricsReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Data("generation metrics need non-empty sets".into()));
    }
    let n = generated.len();
    let mut out = Vec::with_capacity(runs);
    for _ in 0..runs {
        let run = if runs == 1 {
            matched_fidelity(generated, reference)?
        } else {
            let pick: Vec<SamplePair> = (0..n)
                .map(|_| generated[rng.random_range(0..n)].clone())
                .collect();
            matched_fidelity(&pick, reference)?
        };
        out.push(run);
    }
    Ok(MetricsReport {
        runs: out,
        samples_per_run: n,
    })
}

/// Fraction of pairs (with a mask that is neither empty nor full) whose
/// mean intensity inside the mask exceeds the mean outside. `None` when no
/// pair qualifies.
pub fn tumor_colocalization(pairs: &[SamplePair]) -> Option<f64> {
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for p in pairs {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in p.image.data().iter().zip(p.mask.data()) {
            if m == 1.0 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        if ni == 0 || no == 0 {
            continue;
        }
        eligible += 1;
        if si / ni as f64 > so / no as f64 {
            hits += 1;
        }
    }
    (eligible > 0).then(|| hits as f64 / eligible as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_phantom, PhantomConfig};
    use crate::nn::NetConfig;

    fn mask(bits: &[u8]) -> Tensor {
        Tensor::new(vec![1, 1, bits.len()], bits.iter().map(|&b| f64::from(b)).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask(&[1, 1, 1, 0, 0]);
        let b = mask(&[1, 1, 0, 1, 1]);
        assert!((dice(&a, &b).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&mask(&[0, 0]), &Tensor::vector(vec![0.5, 0.0]).reshape(&[1, 1, 2]).unwrap()).is_err());
        assert!(dice(&mask(&[0, 0]), &mask(&[0, 0, 0])).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 20.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let gain = psnr(&a, &b, 2.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 101) as f64 / 101.0);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let (c, d) = (0.3, 0.2);
        let ca = Tensor::full(&[1, 8, 8], c);
        let cb = Tensor::full(&[1, 8, 8], c + d);
        let c1 = 1e-4;
        let expect = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        assert!((ssim(&ca, &cb, 1.0).unwrap() - expect).abs() < 1e-12);
        let b = a.map(|v| (v * 3.1).sin());
        assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[1, 7, 9]), &Tensor::zeros(&[1, 7, 9]), 1.0).is_err());
    }

    #[test]
    fn mean_std_is_unbiased() {
        assert_eq!(mean_std(&[]), None);
        assert_eq!(mean_std(&[3.0]), Some((3.0, 0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    fn phantoms(n: u64, seed: u64) -> Vec<SamplePair> {
        let cfg = PhantomConfig {
            height: 16,
            width: 16,
            background_smoothness: 1,
            seed,
            ..PhantomConfig::default()
        };
        (0..n).map(|i| generate_phantom(&cfg, i).unwrap()).collect()
    }

    #[test]
    fn identical_sets_match_perfectly() {
        let set = phantoms(6, 1);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let report = evaluate_generation(&set, &set, 1, &mut r).unwrap();
        assert_eq!(report.runs[0].psnr_inf, 6);
        assert_eq!(report.runs[0].psnr_db, None);
        assert!((report.runs[0].ssim.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(report.summary("ssim").unwrap().1, 0.0);
    }

    #[test]
    fn matching_ignores_reference_order() {
        let generated = phantoms(5, 2);
        let reference = phantoms(9, 3);
        let mut shuffled = reference.clone();
        shuffled.reverse();
        shuffled.swap(1, 4);
        let a = evaluate_generation(&generated, &reference, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = evaluate_generation(&generated, &shuffled, 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(evaluate_generation(&generated, &[], 1, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn colocalization_examples() {
        let set = phantoms(200, 5);
        assert!(tumor_colocalization(&set).unwrap() >= 0.99);
        let inverted: Vec<SamplePair> = set
            .iter()
            .map(|p| SamplePair::new(p.image.map(|v| 1.0 - v), p.mask.clone()).unwrap())
            .collect();
        assert!(tumor_colocalization(&inverted).unwrap() <= 0.01);
        let empty: Vec<SamplePair> = set
            .iter()
            .map(|p| SamplePair::new(p.image.clone(), p.mask.map(|_| 0.0)).unwrap())
            .collect();
        assert_eq!(tumor_colocalization(&empty), None);
    }

    #[test]
    fn sampled_pairs_are_binary_and_seeded() {
        let net = GenerativeNet::new(NetConfig {
            height: 8,
            width: 8,
            widths: vec![4, 4],
            latent_dim: 4,
        })
        .unwrap();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = sample_pairs(&net, &params, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = sample_pairs(&net, &params, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(p.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let none = sample_pairs(&net, &params, 5, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(none.iter().all(|p| p.mask.data().iter().all(|&v| v == 0.0)));
        assert!(sample_pairs(&net, &params, 0, 0.5, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let report = MetricsReport {
            runs: vec![
                RunMetrics { dsc: Some(0.5), ..RunMetrics::default() },
                RunMetrics { dsc: Some(0.7), ..RunMetrics::default() },
            ],
            samples_per_run: 10,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,metric,value");
        assert!(lines.contains(&"0,dsc,0.500000"));
        assert!(lines.contains(&"mean,dsc,0.600000"));
        assert!(lines.iter().any(|l| l.starts_with("std,dsc,0.14142")));
        assert_eq!(lines.len(), 1 + 2 + 2);
    }
}
