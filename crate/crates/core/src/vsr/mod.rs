//! Unidirectional recurrent x4 generator with a sliding LR window and a
//! three-scale recurrent block.

mod stream;

pub use stream::{forward_sequence, stream_sequence, SequenceRunner};

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Frame;
use crate::tensor;

pub const SCALE: usize = 4;
pub const GEN_SLOPE: f64 = 0.1;
const WINDOW_CHANNELS: usize = 9;
const SR_PREV_CHANNELS: usize = 3 * SCALE * SCALE;

/// Width and residual-block allocation of a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub channels: usize,
    /// Residual blocks at x1, x0.5 and x0.25.
    pub blocks: [usize; 3],
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            channels: 64,
            blocks: [5, 3, 2],
        }
    }
}

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    /// 0 for untrained weights, otherwise the last completed training stage.
    pub stage: u8,
    pub iterations: u64,
    pub config_hash: String,
}

fn conv(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 3, cfg, vb)?)
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv1: conv(c, c, 1, vb.pp("conv1"))?,
            conv2: conv(c, c, 1, vb.pp("conv2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.relu()?;
        Ok((x + self.conv2.forward(&y)?)?)
    }
}

fn run_blocks(blocks: &[ResBlock], x: Tensor) -> Result<Tensor> {
    blocks.iter().try_fold(x, |x, b| b.forward(&x))
}

pub struct Generator {
    arch: GeneratorArch,
    fuse_in: Conv2d,
    s1: Vec<ResBlock>,
    down2: Conv2d,
    s2: Vec<ResBlock>,
    down4: Conv2d,
    s4: Vec<ResBlock>,
    fuse_a: Conv2d,
    fuse_b: Conv2d,
    out: Conv2d,
    varmap: VarMap,
    dtype: DType,
    device: Device,
    pub meta: GeneratorMeta,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator")
            .field("arch", &self.arch)
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}

impl Generator {
    fn build(arch: GeneratorArch, dtype: DType, device: &Device) -> Result<Self> {
        let c = arch.channels;
        if c == 0 {
            return Err(Error::InvalidArgument("generator needs at least one channel".into()));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let blocks = |n: usize, vb: VarBuilder| -> Result<Vec<ResBlock>> {
            (0..n).map(|i| ResBlock::new(c, vb.pp(i.to_string()))).collect()
        };
        let m = vb.pp("msrb");
        Ok(Self {
            arch,
            fuse_in: conv(WINDOW_CHANNELS + SR_PREV_CHANNELS + c, c, 1, vb.pp("fuse_in"))?,
            s1: blocks(arch.blocks[0], m.pp("s1"))?,
            down2: conv(c, c, 2, m.pp("down2"))?,
            s2: blocks(arch.blocks[1], m.pp("s2"))?,
            down4: conv(c, c, 2, m.pp("down4"))?,
            s4: blocks(arch.blocks[2], m.pp("s4"))?,
            fuse_a: conv(3 * c, 3 * c, 1, m.pp("fuse_a"))?,
            fuse_b: conv(3 * c, 2 * c, 1, m.pp("fuse_b"))?,
            out: conv(c, SR_PREV_CHANNELS, 1, vb.pp("out"))?,
            varmap,
            dtype,
            device: device.clone(),
            meta: GeneratorMeta::default(),
        })
    }

    /// Seeded random weights; the second conv of each residual block and the
    /// output conv start small so the untrained model stays near bilinear.
    pub fn seeded(arch: GeneratorArch, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let g = Self::build(arch, dtype, device)?;
        tensor::init_vars(&g.varmap, seed, &[".conv2.", "out."])?;
        Ok(g)
    }

    pub fn zeros(arch: GeneratorArch, dtype: DType, device: &Device) -> Result<Self> {
        let g = Self::build(arch, dtype, device)?;
        tensor::zero_vars(&g.varmap)?;
        Ok(g)
    }

    pub fn arch(&self) -> GeneratorArch {
        self.arch
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn count_parameters(&self) -> usize {
        tensor::count_vars(&self.varmap)
    }

    /// Zero recurrent state `(n, C, h, w)`.
    pub fn init_state(&self, n: usize, h: usize, w: usize) -> Result<Tensor> {
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape(format!("state {h}x{w} is below 2x2")));
        }
        Ok(Tensor::zeros((n, self.arch.channels, h, w), self.dtype, &self.device)?)
    }

    /// Returns `(features, new_state)`, both `(N, C, h, w)`.
    pub fn msrb_forward(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = fused.dims4()?;
        if c != self.arch.channels || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidShape(format!(
                "MSRB input {c}x{h}x{w} needs {} channels and dims divisible by 4",
                self.arch.channels
            )));
        }
        let x1 = run_blocks(&self.s1, fused.clone())?;
        let x2 = run_blocks(&self.s2, tensor::leaky_relu(&self.down2.forward(&x1)?, GEN_SLOPE)?)?;
        let x4 = run_blocks(&self.s4, tensor::leaky_relu(&self.down4.forward(&x2)?, GEN_SLOPE)?)?;
        let u2 = tensor::bilinear(&x2, h, w)?;
        let u4 = tensor::bilinear(&x4, h, w)?;
        let cat = tensor::cat_channels(&[&x1, &u2, &u4])?;
        let y = tensor::leaky_relu(&self.fuse_a.forward(&cat)?, GEN_SLOPE)?;
        let y = self.fuse_b.forward(&y)?;
        let c = self.arch.channels;
        Ok((y.narrow(1, 0, c)?, y.narrow(1, c, c)?))
    }

    /// One recurrent step on `(N, 3, h, w)` LR frames. Returns the unclamped
    /// `(N, 3, 4h, 4w)` output and the next state.
    pub fn step_tensor(
        &self,
        lr_prev: &Tensor,
        lr_cur: &Tensor,
        lr_next: &Tensor,
        sr_prev: &Tensor,
        state: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = lr_cur.dims4()?;
        if c != 3 || lr_prev.dims() != lr_cur.dims() || lr_next.dims() != lr_cur.dims() {
            return Err(Error::InvalidShape(format!(
                "LR window {:?} / {:?} / {:?} must be equal 3-channel frames",
                lr_prev.dims(),
                lr_cur.dims(),
                lr_next.dims()
            )));
        }
        if sr_prev.dims() != [n, 3, h * SCALE, w * SCALE] {
            return Err(Error::InvalidShape(format!(
                "previous SR {:?} must be x{SCALE} of LR {:?}",
                sr_prev.dims(),
                lr_cur.dims()
            )));
        }
        if state.dims() != [n, self.arch.channels, h, w] {
            return Err(Error::InvalidShape(format!(
                "state {:?} does not match LR {:?}",
                state.dims(),
                lr_cur.dims()
            )));
        }
        let sr_down = tensor::pixel_unshuffle(sr_prev, SCALE)?;
        let x = tensor::cat_channels(&[lr_prev, lr_cur, lr_next, &sr_down, state])?;
        let fused = tensor::leaky_relu(&self.fuse_in.forward(&x)?, GEN_SLOPE)?;
        let (feat, new_state) = self.msrb_forward(&fused)?;
        let res = self.out.forward(&tensor::leaky_relu(&feat, GEN_SLOPE)?)?;
        let base = tensor::bilinear(lr_cur, h * SCALE, w * SCALE)?;
        Ok(((tensor::pixel_shuffle(&res, SCALE)? + base)?, new_state))
    }

    /// Frame-level step; the output is clamped to `[0, 1]`.
    pub fn step(&self, input: &StepInput) -> Result<(Frame, Tensor)> {
        let t = |f: &Frame| tensor::frame_to_tensor(f, self.dtype, &self.device);
        let (sr, state) = self.step_tensor(
            &t(&input.lr_prev)?,
            &t(&input.lr_cur)?,
            &t(&input.lr_next)?,
            &t(&input.sr_prev)?,
            &input.state,
        )?;
        Ok((tensor::tensor_to_frame_clamped(&sr)?, state))
    }

    /// Unrolled forward over `(N, 3, h, w)` frames with the inference boundary
    /// policy and no detaching, for training through time.
    pub fn forward_train(&self, lr: &[Tensor]) -> Result<Vec<Tensor>> {
        let first = lr
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty LR sequence".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut state = self.init_state(n, h, w)?;
        let mut sr_prev = tensor::bilinear(first, h * SCALE, w * SCALE)?;
        let mut out = Vec::with_capacity(lr.len());
        for t in 0..lr.len() {
            let prev = &lr[t.saturating_sub(1)];
            let next = &lr[(t + 1).min(lr.len() - 1)];
            let (sr, s) = self.step_tensor(prev, &lr[t], next, &sr_prev, &state)?;
            state = s;
            sr_prev = sr.clone();
            out.push(sr);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "generator",
            "arch": self.arch,
            "meta": self.meta,
        });
        tensor::save_safetensors(&self.varmap, &meta.to_string(), path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = tensor::read_safetensors(path, device)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "generator" {
            return Err(Error::Config(format!("{} is not a generator checkpoint", path.display())));
        }
        let arch: GeneratorArch = serde_json::from_value(meta["arch"].clone())?;
        let mut g = Self::build(arch, dtype, device)?;
        tensor::assign_vars(&g.varmap, &tensors)?;
        g.meta = serde_json::from_value(meta["meta"].clone())?;
        Ok(g)
    }

    /// Copies every weight from `other`, which must share the architecture.
    pub fn copy_from(&self, other: &Generator) -> Result<()> {
        let tensors = tensor::sorted_vars(&other.varmap)
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        tensor::assign_vars(&self.varmap, &tensors)
    }
}

/// Inputs of one frame-level step.
pub struct StepInput {
    pub lr_prev: Frame,
    pub lr_cur: Frame,
    pub lr_next: Frame,
    /// Previous output at 4x the LR size.
    pub sr_prev: Frame,
    /// `(1, C, h, w)`.
    pub state: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{resize_to, ResizeMethod};

    fn small() -> GeneratorArch {
        GeneratorArch {
            channels: 8,
            blocks: [2, 1, 1],
        }
    }

    fn frame(h: usize, w: usize, k: usize) -> Frame {
        Frame::from_fn(h, w, |c, y, x| (((c + 1) * (y * 7 + x * 3 + k)) % 29) as f32 / 28.0)
    }

    #[test]
    fn parameter_count_is_golden() {
        let g = Generator::zeros(GeneratorArch::default(), DType::F32, &Device::Cpu).unwrap();
        let r = Generator::seeded(GeneratorArch::default(), 1, DType::F32, &Device::Cpu).unwrap();
        let block = 2 * (64 * 64 * 9 + 64);
        assert_eq!(block, 73_856);
        let expected = (121 * 64 * 9 + 64) + 10 * block + 2 * (64 * 64 * 9 + 64)
            + (192 * 192 * 9 + 192)
            + (192 * 128 * 9 + 128)
            + (64 * 48 * 9 + 48);
        assert_eq!(expected, 1_463_152);
        assert_eq!(g.count_parameters(), expected);
        assert_eq!(r.count_parameters(), expected);
    }

    #[test]
    fn init_state_is_zero() {
        let g = Generator::zeros(small(), DType::F32, &Device::Cpu).unwrap();
        let s = g.init_state(1, 32, 32).unwrap();
        assert_eq!(s.dims(), &[1, 8, 32, 32]);
        assert_eq!(tensor::scalar(&s.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        assert!(g.init_state(1, 1, 4).is_err());
    }

    #[test]
    fn msrb_shapes_and_zero_case() {
        let g = Generator::zeros(GeneratorArch::default(), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 64, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let (f, s) = g.msrb_forward(&x).unwrap();
        assert_eq!(f.dims(), &[1, 64, 32, 32]);
        assert_eq!(s.dims(), &[1, 64, 32, 32]);
        assert_eq!(tensor::scalar(&f.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        let bad = Tensor::zeros((1, 64, 30, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.msrb_forward(&bad), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn zero_weights_give_bilinear() {
        let g = Generator::zeros(small(), DType::F32, &Device::Cpu).unwrap();
        let cur = frame(16, 20, 1);
        let input = StepInput {
            lr_prev: frame(16, 20, 0),
            lr_cur: cur.clone(),
            lr_next: frame(16, 20, 2),
            sr_prev: frame(64, 80, 5),
            state: g.init_state(1, 16, 20).unwrap(),
        };
        let (sr, _) = g.step(&input).unwrap();
        let want = resize_to(&cur, 64, 80, ResizeMethod::Bilinear).unwrap();
        assert!(sr.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn step_is_deterministic_and_checks_shapes() {
        let g = Generator::seeded(small(), 3, DType::F32, &Device::Cpu).unwrap();
        let input = StepInput {
            lr_prev: frame(8, 8, 0),
            lr_cur: frame(8, 8, 1),
            lr_next: frame(8, 8, 2),
            sr_prev: frame(32, 32, 3),
            state: g.init_state(1, 8, 8).unwrap(),
        };
        let (a, sa) = g.step(&input).unwrap();
        let (b, sb) = g.step(&input).unwrap();
        assert_eq!(a, b);
        assert_eq!(tensor::tensor_to_map(&sa).unwrap(), tensor::tensor_to_map(&sb).unwrap());

        let bad = StepInput {
            sr_prev: frame(16, 16, 3),
            ..input
        };
        assert!(matches!(g.step(&bad), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = Generator::seeded(small(), 8, DType::F32, &Device::Cpu).unwrap();
        g.meta.stage = 1;
        g.meta.iterations = 42;
        let p = dir.path().join("g.safetensors");
        g.save(&p).unwrap();
        let back = Generator::load(&p, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(back.meta, g.meta);
        assert_eq!(back.arch(), small());
        let p2 = dir.path().join("g2.safetensors");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }
}
