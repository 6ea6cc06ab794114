use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::kernel::BlurKernel;
use crate::error::{Error, Result};
use crate::media::{resize_to, Clip, FeatureMap, Frame, ResizeMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Color,
    Gray,
}

/// Mirror index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn blur_plane(src: &[f32], h: usize, w: usize, k: &BlurKernel, out: &mut [f32]) {
    let n = k.size();
    let half = (n / 2) as isize;
    let taps: Vec<f32> = k.taps().iter().map(|t| *t as f32).collect();
    // reflect-padded copy so the inner loop is branch free
    let (ph, pw) = (h + 2 * half as usize, w + 2 * half as usize);
    let mut padded = vec![0.0f32; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize - half, h);
        for x in 0..pw {
            padded[y * pw + x] = src[sy * w + reflect(x as isize - half, w)];
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            // true convolution: out(p) = sum_q in(p - q) k(q)
            for i in 0..n {
                let row = &padded[(y + n - 1 - i) * pw + x..];
                let krow = &taps[i * n..(i + 1) * n];
                for (j, kv) in krow.iter().enumerate() {
                    acc += row[n - 1 - j] * kv;
                }
            }
            out[y * w + x] = acc;
        }
    }
}

pub fn blur_frame(f: &Frame, k: &BlurKernel) -> Result<Frame> {
    let (h, w) = f.dims();
    if k.size() > 2 * h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "kernel of {} taps too large for {h}x{w} frame",
            k.size()
        )));
    }
    let mut out = FeatureMap::zeros(3, h, w);
    for c in 0..3 {
        let src = f.plane(c);
        blur_plane(src, h, w, k, out.plane_mut(c));
    }
    Frame::from_map_clamped(out)
}

/// Convolves every channel of every frame with `k`, reflect padding.
pub fn apply_blur(c: &Clip, k: &BlurKernel) -> Result<Clip> {
    c.try_map(|_, f| blur_frame(f, k))
}

/// Adds Gaussian noise with standard deviation `sigma` (in `[0, 1]` units).
/// Each frame gets a fresh field; gray noise shares one field across channels.
pub fn apply_noise<R: Rng + ?Sized>(c: &Clip, kind: NoiseKind, sigma: f64, rng: &mut R) -> Result<Clip> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(c.clone());
    }
    let normal = Normal::new(0.0f64, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    c.try_map(|_, f| {
        let (h, w) = f.dims();
        let n = h * w;
        let mut m = f.as_map().clone();
        match kind {
            NoiseKind::Color => {
                for v in m.data_mut() {
                    *v += normal.sample(rng) as f32;
                }
            }
            NoiseKind::Gray => {
                let field: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
                for ch in 0..3 {
                    for (v, e) in m.plane_mut(ch).iter_mut().zip(&field) {
                        *v += e;
                    }
                }
            }
        }
        Frame::from_map_clamped(m)
    })
}

/// Halves both dimensions with one interpolation method for all frames.
pub fn downscale_clip(c: &Clip, method: ResizeMethod) -> Result<Clip> {
    let (h, w) = c.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("cannot halve odd dimensions {h}x{w}")));
    }
    c.try_map(|_, f| resize_to(f, h / 2, w / 2, method))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::kernel::{build_gaussian_kernel, BlurKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip_of(f: Frame, n: usize) -> Clip {
        Clip::new("t", 25.0, vec![f; n]).unwrap()
    }

    fn textured(h: usize, w: usize) -> Frame {
        Frame::from_fn(h, w, |c, y, x| (((c + 1) * (y * 13 + x * 7)) % 19) as f32 / 18.0)
    }

    #[test]
    fn reflect_indices() {
        let v: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(v, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let c = clip_of(textured(16, 20), 2);
        let out = apply_blur(&c, &BlurKernel::delta(21).unwrap()).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn constant_clip_unchanged() {
        let c = clip_of(Frame::filled(24, 24, 0.37), 2);
        let k = build_gaussian_kernel(BlurKind::Anisotropic, 2.5, 1.0, 0.4, 21).unwrap();
        let out = apply_blur(&c, &k).unwrap();
        assert!(out.frames()[1].max_abs_diff(&c.frames()[1]) < 1e-6);
    }

    #[test]
    fn impulse_response_equals_taps() {
        // deliberately asymmetric so a flipped (correlation) implementation fails
        let taps = vec![0.0, 0.1, 0.05, 0.2, 0.3, 0.0, 0.15, 0.1, 0.1];
        let k = BlurKernel::from_taps(3, taps.clone()).unwrap();
        let mut m = FeatureMap::zeros(3, 9, 9);
        for c in 0..3 {
            m.set(c, 4, 4, 1.0);
        }
        let f = Frame::from_map(m).unwrap();
        let out = blur_frame(&f, &k).unwrap();
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let got = out.get(c, 3 + i, 3 + j) as f64;
                    assert!((got - taps[i * 3 + j]).abs() < 1e-6, "({i},{j}) {got}");
                }
            }
            assert_eq!(out.get(c, 0, 0), 0.0);
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let c = clip_of(Frame::filled(8, 10, 0.2), 1);
        let k = build_gaussian_kernel(BlurKind::Isotropic, 1.0, 1.0, 0.0, 21).unwrap();
        assert!(matches!(apply_blur(&c, &k), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let c = clip_of(textured(16, 16), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_noise(&c, NoiseKind::Color, 0.0, &mut rng).unwrap(), c);
        assert!(apply_noise(&c, NoiseKind::Color, -0.1, &mut rng).is_err());
    }

    #[test]
    fn gray_noise_is_channel_shared() {
        let c = clip_of(Frame::filled(32, 32, 0.5), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = apply_noise(&c, NoiseKind::Gray, 8.0 / 255.0, &mut rng).unwrap();
        for f in out.frames() {
            assert_eq!(f.plane(0), f.plane(1));
            assert_eq!(f.plane(0), f.plane(2));
        }
        // fresh field per frame
        assert_ne!(out.frames()[0], out.frames()[1]);
    }

    #[test]
    fn color_noise_statistics() {
        let sigma = 5.0 / 255.0;
        let c = clip_of(Frame::filled(512, 512, 0.5), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = apply_noise(&c, NoiseKind::Color, sigma, &mut rng).unwrap();
        let f = &out.frames()[0];
        for ch in 0..3 {
            let r: Vec<f64> = f.plane(ch).iter().map(|v| *v as f64 - 0.5).collect();
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
            assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        }
        assert!(f.plane(0) != f.plane(1));
    }

    #[test]
    fn downscale_shapes_and_checkerboard() {
        let c = clip_of(textured(64, 64), 3);
        let d = downscale_clip(&c, ResizeMethod::Bicubic).unwrap();
        assert_eq!((d.len(), d.dims()), (3, (32, 32)));

        let k = clip_of(Frame::filled(20, 20, 0.8), 1);
        for m in ResizeMethod::ALL {
            let d = downscale_clip(&k, m).unwrap();
            assert!(d.frames()[0].data().iter().all(|v| (v - 0.8).abs() < 1e-6));
        }

        let board = clip_of(Frame::from_fn(16, 16, |_, y, x| ((x + y) % 2) as f32), 1);
        let d = downscale_clip(&board, ResizeMethod::Area).unwrap();
        assert!(d.frames()[0].data().iter().all(|v| (v - 0.5).abs() < 1e-6));

        let odd = clip_of(Frame::filled(15, 16, 0.1), 1);
        assert!(downscale_clip(&odd, ResizeMethod::Area).is_err());
    }
}
