use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurKind {
    Isotropic,
    Anisotropic,
}

/// A normalized, odd-sized 2-D Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub kind: BlurKind,
}

impl BlurKernel {
    /// Single centre tap of 1.
    pub fn delta(size: usize) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {size} must be odd")));
        }
        let mut taps = vec![0.0; size * size];
        taps[size * size / 2] = 1.0;
        Ok(Self {
            size,
            taps,
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            kind: BlurKind::Isotropic,
        })
    }

    /// Arbitrary taps (row-major), normalized to sum 1.
    pub fn from_taps(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || taps.len() != size * size {
            return Err(Error::InvalidArgument(format!(
                "{} taps do not form an odd {size}x{size} kernel",
                taps.len()
            )));
        }
        let sum: f64 = taps.iter().sum();
        if !(sum.is_finite() && sum.abs() > 1e-12) {
            return Err(Error::InvalidArgument("kernel taps sum to zero".into()));
        }
        Ok(Self {
            size,
            taps: taps.into_iter().map(|t| t / sum).collect(),
            sigma_x: 0.0,
            sigma_y: 0.0,
            theta: 0.0,
            kind: BlurKind::Anisotropic,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at row `i`, column `j`.
    pub fn tap(&self, i: usize, j: usize) -> f64 {
        self.taps[i * self.size + j]
    }
}

/// Gaussian with covariance `R(theta) diag(sx^2, sy^2) R(theta)^T` on a `size x size`
/// grid centred at the middle tap; `x` runs along columns, `y` along rows.
pub fn build_gaussian_kernel(kind: BlurKind, sigma_x: f64, sigma_y: f64, theta: f64, size: usize) -> Result<BlurKernel> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {size} must be odd")));
    }
    if !(sigma_x > 0.0 && sigma_y > 0.0) || !sigma_x.is_finite() || !sigma_y.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel sigmas must be positive, got ({sigma_x}, {sigma_y})")));
    }
    let (sx, sy, theta) = match kind {
        BlurKind::Isotropic => (sigma_x, sigma_x, 0.0),
        BlurKind::Anisotropic => (sigma_x, sigma_y, theta),
    };
    let (s, c) = theta.sin_cos();
    // inverse covariance = R diag(1/sx^2, 1/sy^2) R^T
    let (ix, iy) = (1.0 / (sx * sx), 1.0 / (sy * sy));
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let half = (size / 2) as f64;
    let mut taps = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = i as f64 - half;
        for j in 0..size {
            let x = j as f64 - half;
            taps.push((-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp());
        }
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(BlurKernel {
        size,
        taps,
        sigma_x: sx,
        sigma_y: sy,
        theta,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marginals(k: &BlurKernel) -> (f64, f64) {
        let n = k.size();
        let half = (n / 2) as f64;
        let mut var_x = 0.0;
        let mut var_y = 0.0;
        for i in 0..n {
            for j in 0..n {
                let t = k.tap(i, j);
                var_x += t * (j as f64 - half).powi(2);
                var_y += t * (i as f64 - half).powi(2);
            }
        }
        (var_x, var_y)
    }

    #[test]
    fn tiny_sigma_is_near_delta() {
        let k = build_gaussian_kernel(BlurKind::Isotropic, 0.2, 0.2, 0.0, 21).unwrap();
        // neighbours weigh exp(-12.5) relative to the centre
        let centre = k.tap(10, 10);
        let analytic = 1.0 / (1.0 + 4.0 * (-12.5f64).exp() + 4.0 * (-25.0f64).exp());
        assert!(centre > 0.99);
        assert!((centre - analytic).abs() < 1e-9);
    }

    #[test]
    fn isotropic_rotation_and_transpose_symmetry() {
        let k = build_gaussian_kernel(BlurKind::Isotropic, 2.3, 2.3, 1.0, 21).unwrap();
        let n = k.size();
        let mut max = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                max = max.max((k.tap(i, j) - k.tap(j, n - 1 - i)).abs());
                max = max.max((k.tap(i, j) - k.tap(j, i)).abs());
            }
        }
        assert!(max < 1e-10);
    }

    #[test]
    fn sums_to_one() {
        for (kind, sx, sy, th) in [
            (BlurKind::Isotropic, 0.2, 0.2, 0.0),
            (BlurKind::Isotropic, 4.0, 4.0, 0.0),
            (BlurKind::Anisotropic, 3.0, 0.8, 0.7),
            (BlurKind::Anisotropic, 0.8, 3.0, 2.9),
        ] {
            let k = build_gaussian_kernel(kind, sx, sy, th, 21).unwrap();
            assert!((k.taps().iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn anisotropic_spread_follows_axes() {
        let k = build_gaussian_kernel(BlurKind::Anisotropic, 3.0, 0.8, 0.0, 21).unwrap();
        let (vx, vy) = marginals(&k);
        assert!(vx > vy, "{vx} vs {vy}");
        // untruncated moments would be 9 and 0.64
        assert!((vx - 9.0).abs() < 0.2 && (vy - 0.64).abs() < 0.01);

        let r = build_gaussian_kernel(BlurKind::Anisotropic, 3.0, 0.8, std::f64::consts::FRAC_PI_2, 21).unwrap();
        let (rx, ry) = marginals(&r);
        assert!(ry > rx);
    }

    #[test]
    fn invalid_arguments() {
        assert!(build_gaussian_kernel(BlurKind::Isotropic, 1.0, 1.0, 0.0, 20).is_err());
        assert!(build_gaussian_kernel(BlurKind::Isotropic, 0.0, 1.0, 0.0, 21).is_err());
        assert!(build_gaussian_kernel(BlurKind::Anisotropic, 1.0, -1.0, 0.0, 21).is_err());
    }
}
