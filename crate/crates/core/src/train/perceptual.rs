//! Feature providers for the perceptual loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ExtractorKind, PerceptualConfig};
use crate::error::{Error, Result};
use crate::tensor;

/// A frozen network exposing intermediate activations.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// True when this is an offline stand-in rather than a pretrained network.
    fn is_substitute(&self) -> bool;

    /// `(layer weight, activation)` for every configured layer.
    fn features(&self, x: &Tensor) -> Result<Vec<(f64, Tensor)>>;
}

/// Weighted mean over layers of the L1 distance between activations.
pub fn perceptual_loss(ext: &dyn FeatureExtractor, sr: &Tensor, hr: &Tensor) -> Result<Tensor> {
    if sr.dims() != hr.dims() {
        return Err(Error::InvalidShape(format!("perceptual loss between {:?} and {:?}", sr.dims(), hr.dims())));
    }
    let fs = ext.features(sr)?;
    let fh = ext.features(&hr.detach())?;
    let total: f64 = fs.iter().map(|(w, _)| w).sum();
    if total <= 0.0 {
        return Err(Error::Config("perceptual layer weights sum to zero".into()));
    }
    let mut acc: Option<Tensor> = None;
    for ((w, a), (_, b)) in fs.iter().zip(&fh) {
        let term = (tensor::l1(a, b)? * (*w / total))?;
        acc = Some(match acc {
            Some(s) => (s + term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one layer"))
}

struct FixedConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl FixedConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Three seeded, never-trained conv stages (`stage1..stage3`). Deterministic
/// and offline; used when no pretrained weights are available.
pub struct RandomConvFeatures {
    stages: Vec<FixedConv>,
    weights: Vec<f64>,
}

impl RandomConvFeatures {
    pub const LAYERS: [&'static str; 3] = ["stage1", "stage2", "stage3"];

    pub fn new(seed: u64, layers: &BTreeMap<String, f64>, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3usize, 16usize, 1usize), (16, 32, 2), (32, 32, 2)];
        let mut stages = Vec::new();
        for (cin, cout, stride) in spec {
            let fan_in = (cin * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
            stages.push(FixedConv {
                weight: Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::zeros(cout, dtype, device)?,
                stride,
            });
        }
        for k in layers.keys() {
            if !Self::LAYERS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown random-feature layer `{k}`")));
            }
        }
        let weights = Self::LAYERS
            .iter()
            .map(|l| if layers.is_empty() { 1.0 } else { layers.get(*l).copied().unwrap_or(0.0) })
            .collect();
        Ok(Self { stages, weights })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn is_substitute(&self) -> bool {
        true
    }

    fn features(&self, x: &Tensor) -> Result<Vec<(f64, Tensor)>> {
        let mut out = Vec::new();
        let mut y = x.clone();
        for (s, w) in self.stages.iter().zip(&self.weights) {
            y = s.forward(&y)?.relu()?;
            if *w > 0.0 {
                out.push((*w, y.clone()));
            }
        }
        Ok(out)
    }
}

/// Channel widths of the VGG19 feature stack; 0 marks a max-pool.
const VGG19: [usize; 21] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0];

enum VggOp {
    Conv { name: String, conv: FixedConv },
    Relu { name: String },
    Pool,
}

/// Pretrained VGG19 `features` stack with ImageNet input normalization.
/// Layer names follow `convB_I` (pre-activation) and `reluB_I`.
pub struct Vgg19Features {
    ops: Vec<VggOp>,
    layers: Vec<(String, f64)>,
    mean: Tensor,
    std: Tensor,
}

impl Vgg19Features {
    pub fn default_layers() -> BTreeMap<String, f64> {
        [("conv1_2", 0.1), ("conv2_2", 0.1), ("conv3_4", 1.0), ("conv4_4", 1.0), ("conv5_4", 1.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Loads tensors named `features.<index>.weight|bias` (torchvision layout).
    pub fn load(path: &Path, layers: &BTreeMap<String, f64>, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Config(format!("loading VGG19 weights {}: {e}", path.display())))?;
        Self::from_tensors(&tensors, layers, dtype, device)
    }

    pub fn from_tensors(
        tensors: &HashMap<String, Tensor>,
        layers: &BTreeMap<String, f64>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let layers = if layers.is_empty() {
            Self::default_layers()
        } else {
            layers.clone()
        };
        let mut ops = Vec::new();
        let (mut block, mut idx, mut cin, mut index) = (1, 1, 3, 0);
        let mut known = Vec::new();
        for &c in VGG19.iter() {
            if c == 0 {
                ops.push(VggOp::Pool);
                block += 1;
                idx = 1;
                index += 1;
                continue;
            }
            let get = |kind: &str| -> Result<Tensor> {
                let key = format!("features.{index}.{kind}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("VGG19 weights lack `{key}`")))?;
                Ok(t.to_dtype(dtype)?)
            };
            let weight = get("weight")?;
            if weight.dims() != [c, cin, 3, 3] {
                return Err(Error::Config(format!(
                    "features.{index}.weight is {:?}, expected {:?}",
                    weight.dims(),
                    [c, cin, 3, 3]
                )));
            }
            let name = format!("conv{block}_{idx}");
            known.push(name.clone());
            known.push(format!("relu{block}_{idx}"));
            ops.push(VggOp::Conv {
                name,
                conv: FixedConv {
                    weight,
                    bias: get("bias")?,
                    stride: 1,
                },
            });
            ops.push(VggOp::Relu {
                name: format!("relu{block}_{idx}"),
            });
            cin = c;
            idx += 1;
            index += 2;
        }
        for k in layers.keys() {
            if !known.contains(k) {
                return Err(Error::Config(format!("unknown VGG19 layer `{k}`")));
            }
        }
        let mean = Tensor::new(&[0.485f32, 0.456, 0.406], device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&[0.229f32, 0.224, 0.225], device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            ops,
            layers: layers.into_iter().collect(),
            mean,
            std,
        })
    }
}

impl FeatureExtractor for Vgg19Features {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn is_substitute(&self) -> bool {
        false
    }

    fn features(&self, x: &Tensor) -> Result<Vec<(f64, Tensor)>> {
        let mut found: BTreeMap<&str, Tensor> = BTreeMap::new();
        let mut y = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for op in &self.ops {
            if found.len() == self.layers.len() {
                break;
            }
            let name = match op {
                VggOp::Conv { name, conv } => {
                    y = conv.forward(&y)?;
                    name.as_str()
                }
                VggOp::Relu { name } => {
                    y = y.relu()?;
                    name.as_str()
                }
                VggOp::Pool => {
                    y = y.max_pool2d(2)?;
                    continue;
                }
            };
            if self.layers.iter().any(|(l, _)| l == name) {
                found.insert(name, y.clone());
            }
        }
        Ok(self
            .layers
            .iter()
            .map(|(l, w)| (*w, found[l.as_str()].clone()))
            .collect())
    }
}

pub fn build_extractor(cfg: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
    match cfg.extractor {
        ExtractorKind::Random => {
            log::warn!("perceptual loss uses fixed random conv features (substitute for a pretrained network)");
            Ok(Box::new(RandomConvFeatures::new(cfg.seed, &cfg.layers, dtype, device)?))
        }
        ExtractorKind::Vgg19 => {
            let path = cfg
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("perceptual.weights is required for the vgg19 extractor".into()))?;
            Ok(Box::new(Vgg19Features::load(path, &cfg.layers, dtype, device)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_loss() {
        let ext = RandomConvFeatures::new(1, &BTreeMap::new(), DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let l = perceptual_loss(&ext, &x, &x).unwrap();
        assert_eq!(tensor::scalar(&l).unwrap(), 0.0);
        let y = (&x + 0.1).unwrap();
        assert!(tensor::scalar(&perceptual_loss(&ext, &y, &x).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn unknown_layers_are_rejected() {
        let mut layers = BTreeMap::new();
        layers.insert("stage9".to_string(), 1.0);
        assert!(RandomConvFeatures::new(1, &layers, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn vgg_layout_loads_from_torchvision_names() {
        let dev = Device::Cpu;
        let mut ts = HashMap::new();
        let (mut cin, mut index) = (3, 0);
        for &c in VGG19.iter() {
            if c == 0 {
                index += 1;
                continue;
            }
            ts.insert(format!("features.{index}.weight"), Tensor::zeros((c, cin, 3, 3), DType::F32, &dev).unwrap());
            ts.insert(format!("features.{index}.bias"), Tensor::ones(c, DType::F32, &dev).unwrap());
            cin = c;
            index += 2;
        }
        assert_eq!(index, 37);
        let v = Vgg19Features::from_tensors(&ts, &BTreeMap::new(), DType::F32, &dev).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &dev).unwrap();
        let f = v.features(&x).unwrap();
        let shapes: Vec<Vec<usize>> = f.iter().map(|(_, t)| t.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 32, 32],
                vec![1, 128, 16, 16],
                vec![1, 256, 8, 8],
                vec![1, 512, 4, 4],
                vec![1, 512, 2, 2]
            ]
        );
        ts.remove("features.34.weight");
        assert!(Vgg19Features::from_tensors(&ts, &BTreeMap::new(), DType::F32, &dev).is_err());
    }
}
