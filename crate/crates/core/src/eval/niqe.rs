//! Natural Image Quality Evaluator.
//!
//! Follows the reference MATLAB release as ported by BasicSR: Y channel of
//! BT.601 YCbCr rounded to integers, 96x96 blocks without overlap, MSCN
//! coefficients from a 7x7 Gaussian window, AGGD fits on the coefficients and
//! their four neighbour products, two scales with an antialiased bicubic
//! halving in between, and a Mahalanobis-style distance to a pristine model.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::media::Frame;

const PRISTINE_JSON: &str = include_str!("../../data/niqe_pristine.json");
const FEATURES: usize = 36;

#[derive(Deserialize)]
struct PristineFile {
    version: u32,
    block_size: usize,
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
    gaussian_window: Vec<Vec<f64>>,
}

/// Multivariate Gaussian fitted to features of pristine images.
#[derive(Debug, Clone)]
pub struct NiqeModel {
    pub version: u32,
    pub block_size: usize,
    mu: DVector<f64>,
    cov: DMatrix<f64>,
    window: [[f64; 7]; 7],
}

impl NiqeModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: PristineFile = serde_json::from_str(text)?;
        if p.mu.len() != FEATURES || p.cov.len() != FEATURES || p.cov.iter().any(|r| r.len() != FEATURES) {
            return Err(Error::Config(format!("pristine model must be {FEATURES}-dimensional")));
        }
        if p.gaussian_window.len() != 7 || p.gaussian_window.iter().any(|r| r.len() != 7) {
            return Err(Error::Config("pristine model window must be 7x7".into()));
        }
        let mut window = [[0.0; 7]; 7];
        for (dst, src) in window.iter_mut().zip(&p.gaussian_window) {
            dst.copy_from_slice(src);
        }
        Ok(Self {
            version: p.version,
            block_size: p.block_size,
            mu: DVector::from_vec(p.mu),
            cov: DMatrix::from_fn(FEATURES, FEATURES, |i, j| p.cov[i][j]),
            window,
        })
    }

    /// The model shipped with the crate.
    pub fn pristine() -> &'static NiqeModel {
        static MODEL: OnceLock<NiqeModel> = OnceLock::new();
        MODEL.get_or_init(|| NiqeModel::from_json(PRISTINE_JSON).expect("bundled NIQE model parses"))
    }
}

/// BT.601 luma on the `[16, 235]` studio range, rounded half to even, as the
/// reference does after 8-bit quantization.
pub fn y_channel(f: &Frame) -> Vec<f64> {
    let q = |v: f32| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32 as f64;
    let (r, g, b) = (f.plane(0), f.plane(1), f.plane(2));
    (0..r.len())
        .map(|i| (24.966 * q(b[i]) + 128.553 * q(g[i]) + 65.481 * q(r[i]) + 16.0).round_ties_even())
        .collect()
}

/// NIQE of an RGB frame against the bundled pristine model. Lower is better.
pub fn compute_niqe(f: &Frame) -> Result<f64> {
    let (h, w) = f.dims();
    niqe_gray(&y_channel(f), h, w, NiqeModel::pristine())
}

fn gaussian_filter(img: &[f64], h: usize, w: usize, k: &[[f64; 7]; 7]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (dy, row) in k.iter().enumerate() {
                let yy = (y + dy).saturating_sub(3).min(h - 1);
                for (dx, kv) in row.iter().enumerate() {
                    let xx = (x + dx).saturating_sub(3).min(w - 1);
                    s += kv * img[yy * w + xx];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn mscn(img: &[f64], h: usize, w: usize, k: &[[f64; 7]; 7]) -> Vec<f64> {
    let mu = gaussian_filter(img, h, w, k);
    let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
    let m2 = gaussian_filter(&sq, h, w, k);
    img.iter()
        .zip(mu.iter().zip(&m2))
        .map(|(v, (m, s))| (v - m) / ((s - m * m).abs().sqrt() + 1.0))
        .collect()
}

struct GammaTable {
    alphas: Vec<f64>,
    ratios: Vec<f64>,
}

fn gamma_table() -> &'static GammaTable {
    static TABLE: OnceLock<GammaTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let alphas: Vec<f64> = (0..9801).map(|i| 0.2 + 0.001 * i as f64).collect();
        let ratios = alphas
            .iter()
            .map(|a| {
                let r = 1.0 / a;
                gamma(2.0 * r).powi(2) / (gamma(r) * gamma(3.0 * r))
            })
            .collect();
        GammaTable { alphas, ratios }
    })
}

/// Asymmetric generalized Gaussian fit: `(alpha, beta_left, beta_right)`.
fn aggd(x: &[f64]) -> (f64, f64, f64) {
    let (mut ls, mut ln, mut rs, mut rn) = (0.0, 0usize, 0.0, 0usize);
    let (mut abs, mut sq) = (0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let n = x.len() as f64;
    // empty sides give NaN, which propagates exactly like the reference
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let g = left / right;
    let rhat = (abs / n).powi(2) / (sq / n);
    let rnorm = rhat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let t = gamma_table();
    let mut best = 0;
    if rnorm.is_finite() {
        let mut best_d = f64::INFINITY;
        for (i, r) in t.ratios.iter().enumerate() {
            let d = (r - rnorm).powi(2);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
    }
    let alpha = t.alphas[best];
    let k = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    (alpha, left * k, right * k)
}

fn block_features(block: &[f64], bh: usize, bw: usize, out: &mut Vec<f64>) {
    let (alpha, bl, br) = aggd(block);
    out.extend([alpha, (bl + br) / 2.0]);
    for (sy, sx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
        // product with the block rolled by (sy, sx), wrapping around
        let prod: Vec<f64> = (0..bh * bw)
            .map(|i| {
                let (y, x) = ((i / bw) as isize, (i % bw) as isize);
                let yy = (y - sy).rem_euclid(bh as isize) as usize;
                let xx = (x - sx).rem_euclid(bw as isize) as usize;
                block[i] * block[yy * bw + xx]
            })
            .collect();
        let (alpha, bl, br) = aggd(&prod);
        let mean = (br - bl) * (gamma(2.0 / alpha) / gamma(1.0 / alpha));
        out.extend([alpha, mean, bl, br]);
    }
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    let (a2, a3) = (a * a, a * a * a);
    if a <= 1.0 {
        1.5 * a3 - 2.5 * a2 + 1.0
    } else if a <= 2.0 {
        -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// MATLAB `imresize` bicubic taps with antialiasing and symmetric borders.
fn matlab_taps(input: usize, output: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let aa = scale < 1.0;
    let width = if aa { 4.0 / scale } else { 4.0 };
    let p = width.ceil() as i64 + 2;
    let n = input as i64;
    (1..=output)
        .map(|i| {
            let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as i64;
            let mut taps: Vec<(i64, f64)> = (0..p)
                .map(|j| {
                    let idx = left + j;
                    let d = u - idx as f64;
                    (idx, if aa { scale * cubic(d * scale) } else { cubic(d) })
                })
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps.into_iter()
                .map(|(idx, wgt)| {
                    // 1-based MATLAB index idx maps to 0-based idx - 1, mirrored at the ends
                    let mut k = idx - 1;
                    if k < 0 {
                        k = -k - 1;
                    }
                    if k >= n {
                        k = 2 * n - 1 - k;
                    }
                    (k.clamp(0, n - 1) as usize, wgt)
                })
                .collect()
        })
        .collect()
}

fn imresize_half(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let th = matlab_taps(h, oh, 0.5);
    let tw = matlab_taps(w, ow, 0.5);
    let mut rows = vec![0.0; oh * w];
    for (o, taps) in th.iter().enumerate() {
        for x in 0..w {
            rows[o * w + x] = taps.iter().map(|&(k, wt)| wt * img[k * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (o, taps) in tw.iter().enumerate() {
            out[y * ow + o] = taps.iter().map(|&(k, wt)| wt * rows[y * w + k]).sum();
        }
    }
    (out, oh, ow)
}

/// NIQE of a single-channel image with values on `[0, 255]`.
pub fn niqe_gray(img: &[f64], h: usize, w: usize, model: &NiqeModel) -> Result<f64> {
    let b = model.block_size;
    if h < b || w < b {
        return Err(Error::InvalidArgument(format!("NIQE needs at least {b}x{b} pixels, got {h}x{w}")));
    }
    let (nbh, nbw) = (h / b, w / b);
    let (ch, cw) = (nbh * b, nbw * b);
    let mut cur: Vec<f64> = (0..ch * cw).map(|i| img[(i / cw) * w + i % cw]).collect();
    let (mut hh, mut ww) = (ch, cw);
    let mut feats = vec![Vec::with_capacity(FEATURES); nbh * nbw];
    for scale in [1usize, 2] {
        let norm = mscn(&cur, hh, ww, &model.window);
        let (bh, bw) = (b / scale, b / scale);
        for bx in 0..nbw {
            for by in 0..nbh {
                let block: Vec<f64> = (0..bh * bw)
                    .map(|i| norm[(by * bh + i / bw) * ww + bx * bw + i % bw])
                    .collect();
                block_features(&block, bh, bw, &mut feats[bx * nbh + by]);
            }
        }
        if scale == 1 {
            let scaled: Vec<f64> = cur.iter().map(|v| v / 255.0).collect();
            let (half, nh, nw) = imresize_half(&scaled, hh, ww);
            cur = half.into_iter().map(|v| v * 255.0).collect();
            (hh, ww) = (nh, nw);
        }
    }

    let mean: Vec<f64> = (0..FEATURES)
        .map(|j| {
            let vals: Vec<f64> = feats.iter().map(|f| f[j]).filter(|v| !v.is_nan()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "frame has no usable texture for NIQE (flat or saturated)".into(),
        ));
    }
    let rows: Vec<&Vec<f64>> = feats.iter().filter(|f| f.iter().all(|v| !v.is_nan())).collect();
    // a single usable block has no spread; treat its covariance as zero
    let mut cov = DMatrix::<f64>::zeros(FEATURES, FEATURES);
    if rows.len() >= 2 {
        let m: Vec<f64> = (0..FEATURES)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
            .collect();
        for r in &rows {
            for i in 0..FEATURES {
                for j in 0..FEATURES {
                    cov[(i, j)] += (r[i] - m[i]) * (r[j] - m[j]);
                }
            }
        }
        cov /= (rows.len() - 1) as f64;
    }
    let pooled = (&model.cov + cov) / 2.0;
    let svd = pooled.svd(true, true);
    let cutoff = 1e-15 * svd.singular_values.max();
    let inv = svd
        .pseudo_inverse(cutoff)
        .map_err(|e| Error::InvalidArgument(format!("NIQE covariance: {e}")))?;
    let d = &model.mu - DVector::from_vec(mean);
    let q = (d.transpose() * inv * &d)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}
