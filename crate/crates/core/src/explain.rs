//! Perturbation-based local explanations of the image score.
//!
//! The image is cut into a regular grid of segments. Random on/off patterns
//! switch segments to the image's mean color, the scorer is evaluated on each
//! perturbed image, and a weighted ridge regression of score on the on/off
//! bits gives one weight per segment.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{thread_pool, PairEmbeddings, PromptPair};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::imaging::{self, RawImage};

pub const DEFAULT_SEGMENTS: usize = 49;
pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_RIDGE: f64 = 1.0;

/// Segment id of every pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMask {
    pub width: u32,
    pub height: u32,
    pub rows: usize,
    pub cols: usize,
    pub n_segments: usize,
    pub grid: Vec<u32>,
}

impl SegmentMask {
    pub fn segment_at(&self, x: u32, y: u32) -> u32 {
        self.grid[y as usize * self.width as usize + x as usize]
    }

    pub fn pixel_count(&self, segment: u32) -> usize {
        self.grid.iter().filter(|&&s| s == segment).count()
    }
}

/// Regular grid of `ceil(sqrt(n))` cells per side, each `ceil(len / k)`
/// pixels wide; cells falling outside the image are dropped.
pub fn segment(img: &RawImage, n: usize) -> Result<SegmentMask> {
    if n == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let k = (n as f64).sqrt().ceil() as usize;
    let cell_w = w.div_ceil(k);
    let cell_h = h.div_ceil(k);
    let cols = w.div_ceil(cell_w);
    let rows = h.div_ceil(cell_h);
    let mut grid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            grid.push(((y / cell_h) * cols + x / cell_w) as u32);
        }
    }
    Ok(SegmentMask {
        width: img.width(),
        height: img.height(),
        rows,
        cols,
        n_segments: rows * cols,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainParams {
    pub n_samples: usize,
    pub seed: u64,
    /// Defaults to `0.25 * sqrt(n_segments)`.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub parallelism: usize,
}

impl Default for ExplainParams {
    fn default() -> Self {
        ExplainParams {
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            kernel_width: None,
            ridge: DEFAULT_RIDGE,
            parallelism: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Weighted R^2 of the surrogate, clamped to `[0, 1]`.
    pub fit_quality: f64,
    pub rows: usize,
    pub cols: usize,
    pub n_samples: usize,
    /// Seed that produced the accepted design (the requested one, or one more).
    pub seed: u64,
    pub kernel_width: f64,
}

fn draw_design(n_samples: usize, n_segments: usize, seed: u64) -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![vec![true; n_segments]];
    for _ in 1..n_samples {
        rows.push((0..n_segments).map(|_| rng.gen_bool(0.5)).collect());
    }
    rows
}

fn design_matrix(design: &[Vec<bool>]) -> DMatrix<f64> {
    let cols = design[0].len() + 1;
    DMatrix::from_fn(design.len(), cols, |i, j| {
        if j == 0 || design[i][j - 1] {
            1.0
        } else {
            0.0
        }
    })
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Replaces every switched-off segment with `fill`.
pub fn perturb(img: &RawImage, mask: &SegmentMask, on: &[bool], fill: [u8; 3]) -> RawImage {
    let mut out = img.clone();
    for (px, &seg) in out.pixels_mut().zip(&mask.grid) {
        if !on[seg as usize] {
            px.copy_from_slice(&fill);
        }
    }
    out
}

struct Fit {
    weights: Vec<f64>,
    intercept: f64,
    r2: f64,
}

/// Weighted ridge regression with an unpenalized intercept.
fn weighted_ridge(x: &DMatrix<f64>, y: &[f64], w: &[f64], ridge: f64) -> Result<Fit> {
    let p = x.ncols() - 1;
    let sw: f64 = w.iter().sum();
    let mean_x: Vec<f64> = (1..=p)
        .map(|j| (0..x.nrows()).map(|i| w[i] * x[(i, j)]).sum::<f64>() / sw)
        .collect();
    let mean_y = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;

    let xc = DMatrix::from_fn(x.nrows(), p, |i, j| (x[(i, j + 1)] - mean_x[j]) * w[i].sqrt());
    let yc = DVector::from_fn(x.nrows(), |i, _| (y[i] - mean_y) * w[i].sqrt());
    let gram = xc.transpose() * &xc + DMatrix::identity(p, p) * ridge;
    let rhs = xc.transpose() * &yc;
    let beta = gram
        .cholesky()
        .ok_or(Error::SingularFit { rank: 0, columns: p + 1 })?
        .solve(&rhs);
    let intercept = mean_y - beta.iter().zip(&mean_x).map(|(b, m)| b * m).sum::<f64>();

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for i in 0..x.nrows() {
        let pred = intercept + (0..p).map(|j| beta[j] * x[(i, j + 1)]).sum::<f64>();
        ss_res += w[i] * (y[i] - pred).powi(2);
        ss_tot += w[i] * (y[i] - mean_y).powi(2);
    }
    let r2 = if ss_tot <= f64::EPSILON * sw {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(Fit {
        weights: beta.iter().copied().collect(),
        intercept,
        r2,
    })
}

/// Explains an arbitrary image scorer.
pub fn explain_with<F>(img: &RawImage, mask: &SegmentMask, params: &ExplainParams, scorer: F) -> Result<SaliencyMap>
where
    F: Fn(&RawImage) -> Result<f64> + Sync,
{
    let n = mask.n_segments;
    if (mask.width, mask.height) != (img.width(), img.height()) {
        return Err(Error::InvalidArgument("segment mask does not match the image".into()));
    }
    if params.n_samples < n + 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {n} segments, got {}",
            n + 2,
            params.n_samples
        )));
    }
    if !(params.ridge >= 0.0 && params.ridge.is_finite()) {
        return Err(Error::InvalidArgument("ridge strength must be nonnegative".into()));
    }
    let kernel_width = params.kernel_width.unwrap_or(0.25 * (n as f64).sqrt());
    if !(kernel_width > 0.0 && kernel_width.is_finite()) {
        return Err(Error::InvalidArgument("kernel width must be positive".into()));
    }

    let mut seed = params.seed;
    let mut design = draw_design(params.n_samples, n, seed);
    let mut x = design_matrix(&design);
    let mut r = rank(&x);
    if r < n + 1 {
        seed = seed.wrapping_add(1);
        log::warn!("rank-deficient perturbation design, retrying with seed {seed}");
        design = draw_design(params.n_samples, n, seed);
        x = design_matrix(&design);
        r = rank(&x);
        if r < n + 1 {
            return Err(Error::SingularFit { rank: r, columns: n + 1 });
        }
    }

    let fill = img.mean_color();
    let pool = thread_pool(params.parallelism)?;
    let scores: Vec<f64> = pool.install(|| {
        design
            .par_iter()
            .map(|on| scorer(&perturb(img, mask, on, fill)))
            .collect::<Result<Vec<_>>>()
    })?;

    let kernel: Vec<f64> = design
        .iter()
        .map(|on| {
            let off = on.iter().filter(|b| !**b).count() as f64;
            (-off / (2.0 * kernel_width * kernel_width)).exp()
        })
        .collect();
    let fit = weighted_ridge(&x, &scores, &kernel, params.ridge)?;
    Ok(SaliencyMap {
        weights: fit.weights,
        intercept: fit.intercept,
        fit_quality: fit.r2,
        rows: mask.rows,
        cols: mask.cols,
        n_samples: params.n_samples,
        seed,
        kernel_width,
    })
}

/// Explains `p_morph` of one prompt pair.
pub fn explain<E: DualEncoder + ?Sized>(
    img: &RawImage,
    pair: &PromptPair,
    encoder: &E,
    mask: &SegmentMask,
    params: &ExplainParams,
) -> Result<SaliencyMap> {
    let texts = PairEmbeddings::encode(pair, encoder)?;
    let spec = encoder.preprocess_spec();
    let scale = encoder.logit_scale();
    explain_with(img, mask, params, |perturbed| {
        let e = encoder.encode_image(&imaging::preprocess(perturbed, spec))?;
        Ok(texts.score("", &e, scale).p_morph)
    })
}

/// Tints each segment red (raises the score) or blue (lowers it), with
/// opacity proportional to the weight's magnitude.
pub fn overlay(img: &RawImage, mask: &SegmentMask, saliency: &SaliencyMap) -> RawImage {
    let peak = saliency.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let mut out = img.clone();
    for (px, &seg) in out.pixels_mut().zip(&mask.grid) {
        let w = saliency.weights[seg as usize];
        if peak == 0.0 || w == 0.0 {
            continue;
        }
        let alpha = 0.6 * w.abs() / peak;
        let tint = if w > 0.0 { [255.0, 0.0, 0.0] } else { [0.0, 0.0, 255.0] };
        for c in 0..3 {
            px[c] = (px[c] as f64 * (1.0 - alpha) + tint[c] * alpha).round() as u8;
        }
    }
    out
}

/// Writes `saliency.json` and `overlay.png` into `dir`.
pub fn write_saliency(dir: &Path, img: &RawImage, mask: &SegmentMask, saliency: &SaliencyMap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut json = serde_json::to_vec_pretty(saliency)?;
    json.push(b'\n');
    let path = dir.join("saliency.json");
    std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    overlay(img, mask, saliency).save_png(&dir.join("overlay.png"))
}
