//! Three-scale patch discriminator with spectrally normalized convolutions.

use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor;

pub const DISC_SLOPE: f64 = 0.2;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 500;

/// Result of a power iteration on a `rows x cols` matrix.
#[derive(Debug, Clone)]
pub struct PowerEstimate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub sigma: f64,
    pub iterations: usize,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Top singular triplet of a row-major matrix, warm-started from `u0`.
pub fn power_iteration(m: &[f64], rows: usize, cols: usize, u0: &[f64]) -> PowerEstimate {
    let mut u = u0.to_vec();
    let mut v = vec![0.0; cols];
    let mut sigma = 0.0;
    let mut it = 0;
    while it < POWER_MAX_ITERS {
        it += 1;
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, ur) in u.iter().enumerate() {
            let row = &m[r * cols..(r + 1) * cols];
            for (vc, mv) in v.iter_mut().zip(row) {
                *vc += mv * ur;
            }
        }
        let nv = norm(&v);
        if nv < 1e-300 {
            return PowerEstimate {
                u,
                v,
                sigma: 0.0,
                iterations: it,
            };
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let mut mu: Vec<f64> = (0..rows)
            .map(|r| m[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let next = norm(&mu);
        mu.iter_mut().for_each(|x| *x /= next.max(1e-300));
        u = mu;
        let done = (next - sigma).abs() <= POWER_TOL * next;
        sigma = next;
        if done && it > 1 {
            break;
        }
    }
    PowerEstimate {
        u,
        v,
        sigma,
        iterations: it,
    }
}

struct SnConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    u: Mutex<Vec<f64>>,
}

impl SnConv {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints((cout, cin, 3, 3), "weight", Init::Const(0.0))?;
        let bias = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
        Ok(Self {
            weight,
            bias,
            stride,
            u: Mutex::new(Vec::new()),
        })
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[0], d[1] * d[2] * d[3])
    }

    fn matrix(&self) -> Result<Vec<f64>> {
        Ok(self.weight.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }

    /// Advances the persistent `u` to convergence on the current weights.
    fn estimate(&self) -> Result<PowerEstimate> {
        let (rows, cols) = self.dims();
        let m = self.matrix()?;
        let mut u = self.u.lock().expect("spectral state lock poisoned");
        let est = power_iteration(&m, rows, cols, &u);
        if est.sigma > 0.0 {
            *u = est.u.clone();
        }
        Ok(est)
    }

    fn normalized_weight(&self) -> Result<Tensor> {
        let est = self.estimate()?;
        if est.sigma < 1e-12 {
            return Ok(self.weight.clone());
        }
        let (rows, cols) = self.dims();
        let dt = self.weight.dtype();
        let dev = self.weight.device();
        let u = Tensor::from_vec(est.u, (1, rows), dev)?.to_dtype(dt)?;
        let v = Tensor::from_vec(est.v, (cols, 1), dev)?.to_dtype(dt)?;
        // sigma = u^T W v with u, v held constant
        let sigma = u.matmul(&self.weight.reshape((rows, cols))?)?.matmul(&v)?;
        Ok(self.weight.broadcast_div(&sigma.reshape((1, 1, 1, 1))?)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.normalized_weight()?;
        let y = x.conv2d(&w, 1, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

struct PatchNet {
    convs: Vec<SnConv>,
}

impl PatchNet {
    fn new(w: usize, vb: VarBuilder) -> Result<Self> {
        let spec = [(3, w, 1), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 4 * w, 2), (4 * w, 1, 1)];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, s))| SnConv::new(cin, cout, s, vb.pp(format!("c{i}"))))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.convs.len() - 1;
        let mut y = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(&y)?;
            if i < last {
                y = tensor::leaky_relu(&y, DISC_SLOPE)?;
            }
        }
        Ok(y)
    }
}

/// Patch discriminators applied to the input at x1, x0.5 and x0.25.
pub struct Discriminator {
    nets: Vec<PatchNet>,
    varmap: VarMap,
    base_width: usize,
}

impl std::fmt::Debug for Discriminator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Discriminator")
            .field("base_width", &self.base_width)
            .finish_non_exhaustive()
    }
}

impl Discriminator {
    fn build(base_width: usize, dtype: DType, device: &Device) -> Result<Self> {
        if base_width == 0 {
            return Err(Error::InvalidArgument("discriminator width must be positive".into()));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let nets = (0..3)
            .map(|s| PatchNet::new(base_width, vb.pp(format!("s{s}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            nets,
            varmap,
            base_width,
        })
    }

    fn seed_vectors(&self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_u64);
        for c in self.convs() {
            let (rows, _) = c.dims();
            let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = norm(&u).max(1e-12);
            u.iter_mut().for_each(|x| *x /= n);
            *c.u.lock().expect("spectral state lock poisoned") = u;
        }
    }

    pub fn seeded(base_width: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let d = Self::build(base_width, dtype, device)?;
        tensor::init_vars(&d.varmap, seed, &[])?;
        d.seed_vectors(seed);
        Ok(d)
    }

    pub fn zeros(base_width: usize, dtype: DType, device: &Device) -> Result<Self> {
        let d = Self::build(base_width, dtype, device)?;
        tensor::zero_vars(&d.varmap)?;
        d.seed_vectors(0);
        Ok(d)
    }

    fn convs(&self) -> impl Iterator<Item = &SnConv> {
        self.nets.iter().flat_map(|n| n.convs.iter())
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    pub fn count_parameters(&self) -> usize {
        tensor::count_vars(&self.varmap)
    }

    /// Logit maps at x1, x0.5 and x0.25 for `(N, 3, H, W)` input.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 4 != 0 || w % 4 != 0 || h < 16 || w < 16 {
            return Err(Error::InvalidShape(format!(
                "discriminator input {c}x{h}x{w} needs 3 channels and dims divisible by 4 (>= 16)"
            )));
        }
        let mut out = Vec::with_capacity(3);
        for (s, net) in self.nets.iter().enumerate() {
            let f = 1 << s;
            let xs = tensor::bilinear(x, h / f, w / f)?;
            out.push(net.forward(&xs)?);
        }
        Ok(out)
    }

    /// Runs the power iteration on every conv and returns the estimated
    /// spectral norms of the raw weights.
    pub fn refresh_spectral_norms(&self) -> Result<Vec<f64>> {
        self.convs().map(|c| c.estimate().map(|e| e.sigma)).collect()
    }

    /// Effective (normalized) weight matrices as `(rows, cols, row-major data)`.
    pub fn normalized_matrices(&self) -> Result<Vec<(usize, usize, Vec<f64>)>> {
        self.convs()
            .map(|c| {
                let (rows, cols) = c.dims();
                let w = c.normalized_weight()?;
                Ok((rows, cols, w.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let us: Vec<Vec<f64>> = self
            .convs()
            .map(|c| c.u.lock().expect("spectral state lock poisoned").clone())
            .collect();
        let meta = serde_json::json!({
            "kind": "discriminator",
            "base_width": self.base_width,
            "u": us,
        });
        tensor::save_safetensors(&self.varmap, &meta.to_string(), path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = tensor::read_safetensors(path, device)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "discriminator" {
            return Err(Error::Config(format!("{} is not a discriminator checkpoint", path.display())));
        }
        let width: usize = serde_json::from_value(meta["base_width"].clone())?;
        let us: Vec<Vec<f64>> = serde_json::from_value(meta["u"].clone())?;
        let d = Self::build(width, dtype, device)?;
        tensor::assign_vars(&d.varmap, &tensors)?;
        if us.len() != d.convs().count() {
            return Err(Error::Config("discriminator spectral state does not match layers".into()));
        }
        for (c, u) in d.convs().zip(us) {
            *c.u.lock().expect("spectral state lock poisoned") = u;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn top_singular(rows: usize, cols: usize, data: &[f64]) -> f64 {
        let m = DMatrix::from_row_slice(rows, cols, data);
        m.singular_values().max()
    }

    #[test]
    fn logit_maps_shrink_with_scale() {
        let d = Discriminator::seeded(8, 1, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 256, 256), &Device::Cpu).unwrap();
        let out = d.forward(&x).unwrap();
        let sizes: Vec<usize> = out.iter().map(|t| t.dims()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
        assert!(out.iter().all(|t| t.dims()[1] == 1));
        assert!(d.forward(&Tensor::zeros((1, 3, 30, 32), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let d = Discriminator::zeros(8, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 64, 64), &Device::Cpu).unwrap();
        for t in d.forward(&x).unwrap() {
            assert_eq!(tensor::scalar(&t.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        }
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r, c) = (12, 30);
        let m: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut u0 = vec![0.0; r];
        u0[0] = 1.0;
        let est = power_iteration(&m, r, c, &u0);
        let truth = top_singular(r, c, &m);
        assert!((est.sigma - truth).abs() < 1e-6 * truth, "{} vs {truth}", est.sigma);
    }

    #[test]
    fn normalized_weights_have_unit_spectral_norm() {
        let d = Discriminator::seeded(4, 3, DType::F64, &Device::Cpu).unwrap();
        // perturb like an optimizer update would, then re-estimate
        for (_, v) in tensor::sorted_vars(d.varmap()) {
            if v.dims().len() == 4 {
                let bumped = (v.as_tensor() * 1.7).unwrap();
                v.set(&bumped).unwrap();
            }
        }
        for (rows, cols, data) in d.normalized_matrices().unwrap() {
            let s = top_singular(rows, cols, &data);
            assert!(s <= 1.0 + 1e-3, "{s}");
            assert!(s > 0.99, "{s}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Discriminator::seeded(4, 9, DType::F32, &Device::Cpu).unwrap();
        d.refresh_spectral_norms().unwrap();
        let p = dir.path().join("d.safetensors");
        d.save(&p).unwrap();
        let back = Discriminator::load(&p, DType::F32, &Device::Cpu).unwrap();
        let p2 = dir.path().join("d2.safetensors");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
