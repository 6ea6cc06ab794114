use serde::{Deserialize, Serialize};

use super::{FeatureMap, Frame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Area,
    Bilinear,
    Bicubic,
}

impl ResizeMethod {
    pub const ALL: [ResizeMethod; 3] = [ResizeMethod::Area, ResizeMethod::Bilinear, ResizeMethod::Bicubic];

    pub fn name(self) -> &'static str {
        match self {
            ResizeMethod::Area => "area",
            ResizeMethod::Bilinear => "bilinear",
            ResizeMethod::Bicubic => "bicubic",
        }
    }
}

impl std::str::FromStr for ResizeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "area" => Ok(ResizeMethod::Area),
            "bilinear" => Ok(ResizeMethod::Bilinear),
            "bicubic" => Ok(ResizeMethod::Bicubic),
            other => Err(Error::InvalidArgument(format!("unknown resize method `{other}`"))),
        }
    }
}

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Per-output-sample source taps `(index, weight)` along one axis.
///
/// Sample centres follow the half-pixel convention (`src = (i + 0.5) * in/out - 0.5`);
/// bilinear and bicubic do not prefilter when shrinking, area integrates the exact
/// source footprint of each output sample.
pub fn interp_weights(input: usize, output: usize, method: ResizeMethod) -> Vec<Vec<(usize, f32)>> {
    let scale = input as f64 / output as f64;
    let last = input as i64 - 1;
    let clamp = |i: i64| i.clamp(0, last) as usize;
    (0..output)
        .map(|i| match method {
            ResizeMethod::Area => {
                let lo = i as f64 * scale;
                let hi = (i + 1) as f64 * scale;
                let mut taps = Vec::new();
                let mut k = lo.floor() as usize;
                while (k as f64) < hi && k < input {
                    let overlap = hi.min((k + 1) as f64) - lo.max(k as f64);
                    if overlap > 0.0 {
                        taps.push((k, (overlap / scale) as f32));
                    }
                    k += 1;
                }
                taps
            }
            ResizeMethod::Bilinear => {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = src.floor() as i64;
                let t = src - i0 as f64;
                let (a, b) = (clamp(i0), clamp(i0 + 1));
                if t == 0.0 || a == b {
                    vec![(a, 1.0)]
                } else {
                    vec![(a, (1.0 - t) as f32), (b, t as f32)]
                }
            }
            ResizeMethod::Bicubic => {
                let src = (i as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor() as i64;
                let t = src - i0 as f64;
                let mut taps: Vec<(usize, f32)> = Vec::with_capacity(4);
                for (k, d) in [(-1i64, t + 1.0), (0, t), (1, 1.0 - t), (2, 2.0 - t)] {
                    let w = cubic(d);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = clamp(i0 + k);
                    match taps.iter_mut().find(|(j, _)| *j == idx) {
                        Some(tap) => tap.1 += w as f32,
                        None => taps.push((idx, w as f32)),
                    }
                }
                taps
            }
        })
        .collect()
}

/// Resize every channel of a map to `out_h x out_w`. Values are not clamped.
pub fn resize_map_to(m: &FeatureMap, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("target size {out_h}x{out_w} is empty")));
    }
    let (c, h, w) = m.shape();
    if (out_h, out_w) == (h, w) && method != ResizeMethod::Bicubic {
        return Ok(m.clone());
    }
    let wx = interp_weights(w, out_w, method);
    let wy = interp_weights(h, out_h, method);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut tmp = vec![0.0f32; h * out_w];
    for ch in 0..c {
        let plane = m.plane(ch);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(k, wt)| row[k] * wt).sum();
            }
        }
        for taps in &wy {
            for x in 0..out_w {
                out.push(taps.iter().map(|&(k, wt)| tmp[k * out_w + x] * wt).sum());
            }
        }
    }
    FeatureMap::new(c, out_h, out_w, out)
}

/// Resize a frame to explicit dimensions, clamping to `[0, 1]`.
pub fn resize_to(f: &Frame, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<Frame> {
    Frame::from_map_clamped(resize_map_to(f.as_map(), out_h, out_w, method)?)
}

/// Resize by `factor`; output is `round(H * factor) x round(W * factor)`.
pub fn resize_frame(f: &Frame, factor: f64, method: ResizeMethod) -> Result<Frame> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidArgument(format!("resize factor must be positive, got {factor}")));
    }
    let out_h = (f.height() as f64 * factor).round() as usize;
    let out_w = (f.width() as f64 * factor).round() as usize;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "factor {factor} shrinks {}x{} to nothing",
            f.height(),
            f.width()
        )));
    }
    resize_to(f, out_h, out_w, method)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_frame(h: usize, w: usize) -> Frame {
        let mut s = 12345u64;
        Frame::from_fn(h, w, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f32 / (1u64 << 24) as f32
        })
    }

    #[test]
    fn unit_factor_identity() {
        let f = noise_frame(17, 23);
        for m in [ResizeMethod::Area, ResizeMethod::Bilinear] {
            assert_eq!(resize_frame(&f, 1.0, m).unwrap(), f);
        }
        let b = resize_frame(&f, 1.0, ResizeMethod::Bicubic).unwrap();
        assert!(b.max_abs_diff(&f) <= 1e-6);
    }

    #[test]
    fn constant_preserved() {
        let f = Frame::filled(20, 30, 0.5);
        for m in ResizeMethod::ALL {
            for factor in [0.25, 0.5, 0.7, 1.3, 2.0, 4.0] {
                let r = resize_frame(&f, factor, m).unwrap();
                assert!(r.data().iter().all(|v| (v - 0.5).abs() < 1e-6), "{m:?} {factor}");
            }
        }
    }

    #[test]
    fn area_half_is_block_mean() {
        let f = Frame::from_fn(64, 64, |c, y, x| ((x + 2 * y) as f32 / 200.0) * (c + 1) as f32 / 3.0);
        let r = resize_frame(&f, 0.5, ResizeMethod::Area).unwrap();
        assert_eq!(r.dims(), (32, 32));
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let mean = (f.get(c, 2 * y, 2 * x)
                        + f.get(c, 2 * y, 2 * x + 1)
                        + f.get(c, 2 * y + 1, 2 * x)
                        + f.get(c, 2 * y + 1, 2 * x + 1))
                        / 4.0;
                    assert!((r.get(c, y, x) - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn output_dims_round() {
        let f = Frame::filled(10, 15, 0.1);
        let r = resize_frame(&f, 0.3, ResizeMethod::Bicubic).unwrap();
        assert_eq!(r.dims(), (3, 5));
        assert!(matches!(resize_frame(&f, 0.0, ResizeMethod::Area), Err(Error::InvalidArgument(_))));
        assert!(matches!(resize_frame(&f, -1.0, ResizeMethod::Area), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn weights_are_partitions_of_unity() {
        for m in ResizeMethod::ALL {
            for (i, o) in [(10, 3), (8, 4), (7, 13), (5, 20)] {
                for taps in interp_weights(i, o, m) {
                    let s: f32 = taps.iter().map(|t| t.1).sum();
                    assert!((s - 1.0).abs() < 1e-6, "{m:?} {i}->{o}");
                }
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_rule() {
        // 2 -> 4 with half-pixel centres: samples at -0.25 (clamped), 0.25, 0.75, 1.25
        let w = interp_weights(2, 4, ResizeMethod::Bilinear);
        assert_eq!(w[0], vec![(0, 1.0)]);
        assert_eq!(w[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(w[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(w[3], vec![(1, 1.0)]);
    }
}
