//! Glue between [`Frame`]s and candle tensors, plus the differentiable
//! building blocks shared by the generator, the learnable operators and the
//! discriminator.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::media::{interp_weights, FeatureMap, Frame, ResizeMethod};

/// `(1, 3, H, W)` tensor of the given dtype.
pub fn frame_to_tensor(f: &Frame, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = f.dims();
    let t = Tensor::from_slice(f.data(), (1, 3, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stacks frames into `(N, 3, H, W)`.
pub fn frames_to_tensor(frames: &[Frame], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = frames
        .iter()
        .map(|f| frame_to_tensor(f, dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Reads a `(1, C, H, W)` or `(C, H, W)` tensor back into a map.
pub fn tensor_to_map(t: &Tensor) -> Result<FeatureMap> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        3 => t.clone(),
        r => return Err(Error::InvalidShape(format!("expected rank 3 or 4 tensor, got {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    FeatureMap::new(c, h, w, data)
}

pub fn tensor_to_frame_clamped(t: &Tensor) -> Result<Frame> {
    Frame::from_map_clamped(tensor_to_map(t)?)
}

/// Depth-to-space on `(N, C*r*r, H, W)`; same layout as [`crate::media::pixel_shuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::InvalidShape(format!("pixel_shuffle: {c} channels, factor {r}")));
    }
    let oc = c / (r * r);
    Ok(x.reshape(vec![n, oc, r, r, h, w])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .contiguous()?
        .reshape((n, oc, h * r, w * r))?)
}

/// Space-to-depth on `(N, C, H*r, W*r)`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::InvalidShape(format!("pixel_unshuffle: {h}x{w} not divisible by {r}")));
    }
    let (oh, ow) = (h / r, w / r);
    Ok(x.reshape(vec![n, c, oh, r, ow, r])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .contiguous()?
        .reshape((n, c * r * r, oh, ow))?)
}

/// Dense `(out, in)` interpolation matrix for one axis.
fn interp_matrix(input: usize, output: usize, method: ResizeMethod, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut m = vec![0.0f32; output * input];
    for (i, taps) in interp_weights(input, output, method).into_iter().enumerate() {
        for (k, w) in taps {
            m[i * input + k] += w;
        }
    }
    Ok(Tensor::from_vec(m, (output, input), device)?.to_dtype(dtype)?)
}

/// Separable resize of `(N, C, H, W)` to `(N, C, out_h, out_w)` as two matrix
/// products, so gradients flow through it.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, method: ResizeMethod) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let mw = interp_matrix(w, out_w, method, dt, dev)?.t()?;
    let mh = interp_matrix(h, out_h, method, dt, dev)?;
    // rows: (N*C*H, W) x (W, out_w)
    let y = x.reshape((n * c * h, w))?.matmul(&mw)?;
    let y = y.reshape((n * c, h, out_w))?;
    let y = mh.broadcast_left(n * c)?.contiguous()?.matmul(&y.contiguous()?)?;
    Ok(y.reshape((n, c, out_h, out_w))?)
}

pub fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize(x, out_h, out_w, ResizeMethod::Bilinear)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mean absolute error, as a scalar tensor.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidShape(format!("l1 between {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Concatenate along channels.
pub fn cat_channels(ts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(ts, 1)?)
}

/// Sorted `(name, var)` pairs of a var map.
pub fn sorted_vars(vm: &VarMap) -> Vec<(String, Var)> {
    let data = vm.data().lock().expect("var map lock poisoned");
    let mut v: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// Re-initializes every variable from a seeded stream, in name order.
///
/// Weights are uniform in `±gain/sqrt(fan_in)`; biases start at zero. Names
/// matching one of `damped` get their weights scaled by 0.1.
pub fn init_vars(vm: &VarMap, seed: u64, damped: &[&str]) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in sorted_vars(vm) {
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let values: Vec<f32> = if name.ends_with("bias") || dims.len() < 2 {
            vec![0.0; n]
        } else {
            let fan_in: usize = dims[1..].iter().product();
            let mut bound = 1.0 / (fan_in as f32).sqrt();
            if damped.iter().any(|d| name.contains(d)) {
                bound *= 0.1;
            }
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

pub fn zero_vars(vm: &VarMap) -> Result<()> {
    for (_, var) in sorted_vars(vm) {
        var.set(&var.zeros_like()?)?;
    }
    Ok(())
}

/// Writes all variables (f32) with one JSON metadata entry.
pub fn save_safetensors(vm: &VarMap, meta_json: &str, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = sorted_vars(vm)
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().to_dtype(DType::F32)?)))
        .collect::<Result<_>>()?;
    let mut meta = std::collections::HashMap::new();
    meta.insert("celsr".to_string(), meta_json.to_string());
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads tensors and the metadata string written by [`save_safetensors`].
pub fn read_safetensors(path: &Path, device: &Device) -> Result<(BTreeMap<String, Tensor>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("celsr").cloned())
        .ok_or_else(|| Error::Config(format!("{} carries no celsr metadata", path.display())))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let t = candle_core::safetensors::Load::load(&view, device)?;
        out.insert(name, t);
    }
    Ok((out, meta))
}

/// Copies loaded tensors into a var map, requiring an exact name and shape match.
pub fn assign_vars(vm: &VarMap, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let vars = sorted_vars(vm);
    if vars.len() != tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            vars.len()
        )));
    }
    for (name, var) in vars {
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::Config(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Total element count over all variables.
pub fn count_vars(vm: &VarMap) -> usize {
    sorted_vars(vm).iter().map(|(_, v)| v.elem_count()).sum()
}

/// Mean over all but the batch axis, one value per sample.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media;

    #[test]
    fn tensor_shuffle_matches_plain_layout() {
        let m = FeatureMap::from_fn(8, 3, 5, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let t = Tensor::from_slice(m.data(), (1, 8, 3, 5), &Device::Cpu).unwrap();
        let s = tensor_to_map(&pixel_shuffle(&t, 2).unwrap()).unwrap();
        assert_eq!(s, media::pixel_shuffle(&m, 2).unwrap());
        let u = tensor_to_map(&pixel_unshuffle(&pixel_shuffle(&t, 2).unwrap(), 2).unwrap()).unwrap();
        assert_eq!(u, m);
    }

    #[test]
    fn tensor_resize_matches_frame_resize() {
        let f = Frame::from_fn(6, 10, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 7.0);
        let t = frame_to_tensor(&f, DType::F32, &Device::Cpu).unwrap();
        for method in ResizeMethod::ALL {
            let a = tensor_to_frame_clamped(&resize(&t, 24, 40, method).unwrap()).unwrap();
            let b = media::resize_to(&f, 24, 40, method).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6, "{method:?}");
        }
    }
}
