//! Evaluation metrics: structural similarity between quantized images and
//! log-likelihood retrieval (recall@K).

use crate::decoder::log_likelihood;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::params::ModelParams;
use crate::rng::{rng_from_seed, subseed_ids};
use crate::sampler::sample_stochastic;
use crate::vocab::Caption;

/// Stabilization constants and dynamic range for SSIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    /// Dynamic range R of the pixel values.
    pub range: f64,
}

impl SsimParams {
    /// Conventional constants `c1 = (0.01 R)^2`, `c2 = (0.03 R)^2` with
    /// `R = Q - 1`, on the quantized integer levels.
    pub fn for_levels(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidArgument("levels must be at least 2".into()));
        }
        let range = (levels - 1) as f64;
        Ok(SsimParams { c1: (0.01 * range).powi(2), c2: (0.03 * range).powi(2), range })
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::InvalidArgument("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

struct Moments {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn moments(a: &[u8], b: &[u8]) -> Moments {
    let n = a.len() as f64;
    let mean_a = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mean_b = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x as f64 - mean_a;
        let dy = y as f64 - mean_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    Moments { mean_a, mean_b, var_a: var_a / n, var_b: var_b / n, cov: cov / n }
}

fn ssim_from_moments(m: &Moments, p: &SsimParams) -> f64 {
    let num = (2.0 * m.mean_a * m.mean_b + p.c1) * (2.0 * m.cov + p.c2);
    let den = (m.mean_a * m.mean_a + m.mean_b * m.mean_b + p.c1) * (m.var_a + m.var_b + p.c2);
    num / den
}

/// Structural similarity over whole-image statistics (population variance),
/// computed on the quantized integer levels.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "SSIM inputs differ in shape: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(ssim_from_moments(&moments(a.pixels(), b.pixels()), p))
}

/// Mean SSIM over all `window x window` patches (stride 1). Off by default;
/// the whole-image statistic above is the primary variant.
pub fn ssim_windowed(a: &ImageGrid, b: &ImageGrid, p: &SsimParams, window: usize) -> Result<f64> {
    p.validate()?;
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("SSIM inputs differ in shape".into()));
    }
    if window == 0 || window > a.height() || window > a.width() {
        return Err(Error::InvalidArgument(format!(
            "window {window} does not fit a {}x{} image",
            a.height(),
            a.width()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for top in 0..=(a.height() - window) {
        for left in 0..=(a.width() - window) {
            let mut pa = Vec::with_capacity(window * window);
            let mut pb = Vec::with_capacity(window * window);
            for r in top..top + window {
                for c in left..left + window {
                    pa.push(a.get(r, c));
                    pb.push(b.get(r, c));
                }
            }
            sum += ssim_from_moments(&moments(&pa, &pb), p);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Dataset-level structural similarity: mean and standard deviation over the
/// per-caption average SSIM of sampled images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsiStats {
    pub mean: f64,
    pub std: f64,
}

/// For each caption, draw `samples_per_caption` stochastic images, score each
/// against the ground truth, and average. Per-caption sample streams derive
/// from the caption content, so identical captions get identical statistics.
pub fn mean_ssi(
    captions: &[Caption],
    ground_truth: &[ImageGrid],
    params: &ModelParams,
    ssim_params: &SsimParams,
    samples_per_caption: usize,
    seed: u64,
) -> Result<SsiStats> {
    if captions.len() != ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} captions for {} ground-truth images",
            captions.len(),
            ground_truth.len()
        )));
    }
    if captions.is_empty() || samples_per_caption == 0 {
        return Err(Error::InvalidArgument(
            "mean SSI needs at least one caption and one sample per caption".into(),
        ));
    }
    use rand::Rng;
    let mut per_caption = Vec::with_capacity(captions.len());
    for (caption, truth) in captions.iter().zip(ground_truth) {
        let mut stream = rng_from_seed(subseed_ids(seed, "ssi", &caption.ids));
        let mut sum = 0.0;
        for _ in 0..samples_per_caption {
            let sample = sample_stochastic(caption, params, stream.gen::<u64>())?;
            sum += ssim(&sample, truth, ssim_params)?;
        }
        per_caption.push(sum / samples_per_caption as f64);
    }
    let n = per_caption.len() as f64;
    let mean = per_caption.iter().sum::<f64>() / n;
    let var = per_caption.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SsiStats { mean, std: var.sqrt() })
}

/// Retrieval quality of the conditional likelihood: where does each
/// caption's own image rank in the pool?
#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    /// 1-based rank of the ground-truth image for each caption.
    pub ranks: Vec<usize>,
    /// `(K, R@K)` pairs in the requested order.
    pub recall: Vec<(usize, f64)>,
}

impl RankingReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Score every pool image under every caption by exact log-likelihood and
/// rank descending. Ties break by image index, counting against the ground
/// truth (every lower-indexed tie ranks ahead of it).
pub fn recall_at_k(
    captions: &[Caption],
    images: &[ImageGrid],
    params: &ModelParams,
    ks: &[usize],
) -> Result<RankingReport> {
    let m = captions.len();
    if m != images.len() {
        return Err(Error::Shape(format!("{m} captions for {} images", images.len())));
    }
    if m == 0 || ks.is_empty() {
        return Err(Error::InvalidArgument("empty ranking pool or K list".into()));
    }
    let max_k = *ks.iter().max().expect("non-empty ks");
    if max_k > m || ks.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "ranking pool of {m} images cannot serve K up to {max_k}"
        )));
    }

    let mut ranks = Vec::with_capacity(m);
    for (i, caption) in captions.iter().enumerate() {
        let scores: Vec<f64> = images
            .iter()
            .map(|img| log_likelihood(img, caption, params))
            .collect::<Result<_>>()?;
        let own = scores[i];
        let ahead = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        ranks.push(ahead + 1);
    }

    let recall = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / m as f64)
        })
        .collect();
    Ok(RankingReport { ranks, recall })
}
