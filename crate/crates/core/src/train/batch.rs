use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::config::TrainConfig;
use crate::degrade::{run_pipeline, sample_degradation, PipelineConfig, SampledDegradation};
use crate::error::{Error, Result};
use crate::lbo::LboPool;
use crate::media::Clip;
use crate::tensor;
use crate::vsr::SCALE;

/// Where one batch element came from.
#[derive(Debug, Clone)]
pub struct BatchPick {
    pub clip: usize,
    pub start: usize,
    /// Top-left HR crop corner, multiples of 4.
    pub y: usize,
    pub x: usize,
    pub degradation: SampledDegradation,
}

/// `seq_len` tensors of `(N, 3, p/4, p/4)` LR and `(N, 3, p, p)` HR frames.
pub struct TrainingBatch {
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
    pub picks: Vec<BatchPick>,
}

/// Draws a random clip, temporal window and aligned crop per batch element,
/// and synthesizes the LR side through the degradation pipeline.
#[allow(clippy::too_many_arguments)]
pub fn sample_training_batch<R: Rng + ?Sized>(
    hr_pool: &[Clip],
    cfg: &TrainConfig,
    pipeline: &PipelineConfig,
    pool: &LboPool,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<TrainingBatch> {
    let p = cfg.patch_size;
    let eligible: Vec<usize> = hr_pool
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let (h, w) = c.dims();
            c.len() >= cfg.seq_len && h >= p && w >= p
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no HR clip has {} frames of at least {p}x{p}",
            cfg.seq_len
        )));
    }
    let mut lr_frames: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.seq_len];
    let mut hr_frames: Vec<Vec<Tensor>> = vec![Vec::new(); cfg.seq_len];
    let mut picks = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let ci = eligible[rng.random_range(0..eligible.len())];
        let clip = &hr_pool[ci];
        let (h, w) = clip.dims();
        let start = rng.random_range(0..=clip.len() - cfg.seq_len);
        let y = SCALE * rng.random_range(0..=(h - p) / SCALE);
        let x = SCALE * rng.random_range(0..=(w - p) / SCALE);
        let window = clip
            .slice(start, start + cfg.seq_len)?
            .try_map(|_, f| f.crop(y, x, p, p))?;
        let d = sample_degradation(pipeline, pool.len(), rng)?;
        let lr = run_pipeline(&window, &d, pool, &pipeline.backend)?;
        for t in 0..cfg.seq_len {
            hr_frames[t].push(tensor::frame_to_tensor(&window.frames()[t], dtype, device)?);
            lr_frames[t].push(tensor::frame_to_tensor(&lr.frames()[t], dtype, device)?);
        }
        picks.push(BatchPick {
            clip: ci,
            start,
            y,
            x,
            degradation: d,
        });
    }
    let cat = |v: Vec<Vec<Tensor>>| -> Result<Vec<Tensor>> { v.iter().map(|ts| Ok(Tensor::cat(ts, 0)?)).collect() };
    Ok(TrainingBatch {
        lr: cat(lr_frames)?,
        hr: cat(hr_frames)?,
        picks,
    })
}
