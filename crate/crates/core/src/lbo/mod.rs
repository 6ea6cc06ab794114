//! Learnable basic operator: a three-layer convolutional map from a
//! pseudo-HR frame (`2h x 2w`) to its LR counterpart (`h x w`).

mod train;

pub use train::{train_lbo, LboTrainConfig, LboTrainOutcome, PairDataset, TrainPair};

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Frame;
use crate::tensor;

pub const LBO_HIDDEN: usize = 64;
pub const LBO_SLOPE: f64 = 0.2;
const UNSHUFFLE: usize = 2;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LboMeta {
    /// Video the pairs were curated from.
    pub source_video: String,
    /// Hash of the training configuration that produced the weights.
    pub config_hash: String,
    pub iterations: u64,
}

/// Weights of one learnable operator plus provenance.
pub struct LboWeights {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    varmap: VarMap,
    pub meta: LboMeta,
}

impl std::fmt::Debug for LboWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LboWeights").field("meta", &self.meta).finish_non_exhaustive()
    }
}

fn conv3x3(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 3, cfg, vb)?)
}

impl LboWeights {
    fn build(dtype: DType, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, device);
        let cin = 3 * UNSHUFFLE * UNSHUFFLE;
        Ok(Self {
            conv1: conv3x3(cin, LBO_HIDDEN, vb.pp("conv1"))?,
            conv2: conv3x3(LBO_HIDDEN, LBO_HIDDEN, vb.pp("conv2"))?,
            conv3: conv3x3(LBO_HIDDEN, 3, vb.pp("conv3"))?,
            varmap,
            meta: LboMeta::default(),
        })
    }

    /// Randomly initialized weights from a fixed seed.
    pub fn seeded(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let w = Self::build(dtype, device)?;
        tensor::init_vars(&w.varmap, seed, &[])?;
        Ok(w)
    }

    pub fn zeros(dtype: DType, device: &Device) -> Result<Self> {
        let w = Self::build(dtype, device)?;
        tensor::zero_vars(&w.varmap)?;
        Ok(w)
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.conv1.weight().dtype()
    }

    pub fn device(&self) -> &Device {
        self.conv1.weight().device()
    }

    pub fn count_parameters(&self) -> usize {
        tensor::count_vars(&self.varmap)
    }

    /// Overwrites one named tensor (`conv1.weight`, `conv3.bias`, ...).
    pub fn set_tensor(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = tensor::sorted_vars(&self.varmap);
        let (_, var) = vars
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no LBO tensor `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::InvalidShape(format!(
                "`{name}` is {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Unclamped forward pass on `(N, 3, 2h, 2w)`.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape(format!("LBO input {c}x{h}x{w} needs 3 channels and even dims")));
        }
        let x = tensor::pixel_unshuffle(x, UNSHUFFLE)?;
        let x = tensor::leaky_relu(&self.conv1.forward(&x)?, LBO_SLOPE)?;
        let x = tensor::leaky_relu(&self.conv2.forward(&x)?, LBO_SLOPE)?;
        Ok(self.conv3.forward(&x)?)
    }

    /// Applies the operator to one frame, clamping into `[0, 1]` as used in the pipeline.
    pub fn apply(&self, f: &Frame) -> Result<Frame> {
        let x = tensor::frame_to_tensor(f, self.dtype(), self.device())?;
        tensor::tensor_to_frame_clamped(&self.forward_tensor(&x)?.detach())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "lbo",
            "hidden": LBO_HIDDEN,
            "unshuffle": UNSHUFFLE,
            "meta": self.meta,
        });
        tensor::save_safetensors(&self.varmap, &meta.to_string(), path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (tensors, meta) = tensor::read_safetensors(path, device)?;
        let meta: serde_json::Value = serde_json::from_str(&meta)?;
        if meta["kind"] != "lbo" {
            return Err(Error::Config(format!("{} is not an LBO weight file", path.display())));
        }
        let mut w = Self::build(dtype, device)?;
        tensor::assign_vars(&w.varmap, &tensors)?;
        w.meta = serde_json::from_value(meta["meta"].clone())?;
        Ok(w)
    }
}

/// Unclamped forward on a single frame-shaped tensor, validating the input.
pub fn lbo_forward(w: &LboWeights, x: &Frame) -> Result<Tensor> {
    let t = tensor::frame_to_tensor(x, w.dtype(), w.device())?;
    w.forward_tensor(&t)
}

/// Ordered collection of trained operators.
#[derive(Debug, Default)]
pub struct LboPool {
    members: Vec<LboWeights>,
}

impl LboPool {
    pub fn new(members: Vec<LboWeights>) -> Self {
        Self { members }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(paths: &[impl AsRef<Path>], device: &Device) -> Result<Self> {
        let members = paths
            .iter()
            .map(|p| LboWeights::load(p.as_ref(), DType::F32, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&LboWeights> {
        self.members.get(i)
    }

    pub fn push(&mut self, w: LboWeights) {
        self.members.push(w);
    }
}

/// Uniform draw of a pool index.
pub fn choose_lbo<R: Rng + ?Sized>(pool_len: usize, rng: &mut R) -> Result<usize> {
    if pool_len == 0 {
        return Err(Error::InvalidArgument("cannot choose from an empty LBO pool".into()));
    }
    Ok(rng.random_range(0..pool_len))
}
