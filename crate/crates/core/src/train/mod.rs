//! Two-stage optimization of the generator: pixel loss first, then pixel +
//! perceptual + adversarial against a three-scale patch discriminator.

mod batch;
mod config;
mod disc;
mod loss;
mod perceptual;

pub use batch::{sample_training_batch, BatchPick, TrainingBatch};
pub use config::{DiscConfig, ExtractorKind, LossWeights, PerceptualConfig, TrainConfig};
pub use disc::{power_iteration, Discriminator, PowerEstimate, DISC_SLOPE};
pub use loss::{bce_with_logits, compute_discriminator_loss, compute_generator_loss, GeneratorLoss, LossReport};
pub use perceptual::{build_extractor, perceptual_loss, FeatureExtractor, RandomConvFeatures, Vgg19Features};

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::degrade::PipelineConfig;
use crate::error::{Error, Result};
use crate::lbo::LboPool;
use crate::media::Clip;
use crate::tensor;
use crate::vsr::Generator;

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iter,l1,perceptual,adv_g,adv_d,lr";
pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";

/// Adam with betas (0.9, 0.99) and no weight decay.
pub fn adam(vm: &VarMap, lr: f64) -> Result<AdamW> {
    let vars: Vec<Var> = tensor::sorted_vars(vm).into_iter().map(|(_, v)| v).collect();
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(vars, params)?)
}

/// Short hex digest of a serialized configuration.
pub fn config_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// HR material and the degradation model used to synthesize LR inputs.
pub struct TrainData {
    pub hr_clips: Vec<Clip>,
    pub pipeline: PipelineConfig,
    pub pool: LboPool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub report: LossReport,
    pub lr: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{}",
            self.iter, r.l1, r.perceptual, r.adversarial_g, r.adversarial_d, self.lr
        )
    }
}

/// Append-only CSV loss log.
pub struct CsvLog {
    file: File,
}

impl CsvLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        if fresh {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io("writing log header", e))?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &LogRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv()).map_err(|e| Error::io("appending to training log", e))
    }
}

#[derive(Debug)]
pub struct StageOutcome {
    pub log: Vec<LogRow>,
    /// Checkpoint directories in the order written.
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_dir(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{iter}"))
}

fn save_checkpoint(out_dir: &Path, iter: u64, gen: &Generator, disc: Option<&Discriminator>) -> Result<PathBuf> {
    let dir = checkpoint_dir(out_dir, iter);
    gen.save(&dir.join(GENERATOR_FILE))?;
    if let Some(d) = disc {
        d.save(&dir.join(DISCRIMINATOR_FILE))?;
    }
    Ok(dir)
}

/// Runs one training stage, writing `ckpt_<iter>/` directories and
/// `train_log.csv` under `out_dir`.
pub fn train_stage(
    gen: &mut Generator,
    disc: Option<&Discriminator>,
    data: &TrainData,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<StageOutcome> {
    cfg.validate()?;
    data.pipeline.validate()?;
    if cfg.stage >= 2 {
        if gen.meta.stage < 1 {
            return Err(Error::InvalidArgument(
                "stage 2 needs a generator checkpoint that completed stage 1".into(),
            ));
        }
        if disc.is_none() {
            return Err(Error::InvalidArgument("stage 2 needs a discriminator".into()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let cfg_text = cfg.to_toml();
    std::fs::write(out_dir.join("train_config.toml"), &cfg_text)
        .map_err(|e| Error::io("writing train_config.toml", e))?;
    gen.meta.config_hash = config_hash(&cfg_text);

    let extractor = if cfg.stage >= 2 && cfg.loss.perceptual > 0.0 {
        Some(build_extractor(&cfg.perceptual, gen.dtype(), gen.device())?)
    } else {
        None
    };
    let lr = cfg.lr();
    let mut opt_g = adam(gen.varmap(), lr)?;
    let mut opt_d = match (cfg.stage >= 2, disc) {
        (true, Some(d)) => Some(adam(d.varmap(), lr)?),
        _ => None,
    };
    let disc = if cfg.stage >= 2 { disc } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = CsvLog::open(&out_dir.join(LOG_FILE))?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let base_iters = gen.meta.iterations;

    for iter in 1..=cfg.iterations {
        let batch = sample_training_batch(
            &data.hr_clips,
            cfg,
            &data.pipeline,
            &data.pool,
            &mut rng,
            gen.dtype(),
            gen.device(),
        )?;
        let sr = gen.forward_train(&batch.lr)?;
        let loss = compute_generator_loss(&sr, &batch.hr, disc, extractor.as_deref(), cfg)?;
        let mut report = loss.report;
        if !report.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at iteration {iter}; last checkpoint: {}",
                checkpoints
                    .last()
                    .map(|p: &PathBuf| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            )));
        }
        opt_g.backward_step(&loss.total)?;
        if let (Some(d), Some(opt)) = (disc, opt_d.as_mut()) {
            let (dl, v) = compute_discriminator_loss(&sr, &batch.hr, d)?;
            if !v.is_finite() {
                return Err(Error::Training(format!("non-finite discriminator loss at iteration {iter}")));
            }
            opt.backward_step(&dl)?;
            d.refresh_spectral_norms()?;
            report.adversarial_d = v;
        }
        let row = LogRow { iter, report, lr };
        log.append(&row)?;
        rows.push(row);
        log::debug!("iter {iter}: {}", row.csv());

        let due = cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0;
        if due || iter == cfg.iterations {
            gen.meta.stage = cfg.stage;
            gen.meta.iterations = base_iters + iter;
            checkpoints.push(save_checkpoint(out_dir, iter, gen, disc)?);
        }
    }
    Ok(StageOutcome { log: rows, checkpoints })
}

/// Moving average of the L1 column over a window ending at `end` (exclusive).
pub fn l1_window_mean(log: &[LogRow], start: usize, end: usize) -> f64 {
    let s = &log[start..end];
    s.iter().map(|r| r.report.l1).sum::<f64>() / s.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Frame;
    use crate::vsr::GeneratorArch;
    use candle_core::{DType, Device};

    fn data() -> TrainData {
        let clips = (0..2)
            .map(|k| {
                let frames = (0..6)
                    .map(|t| Frame::from_fn(40, 40, |c, y, x| ((((y + t) / 3 + x / 5 + c + k) % 2) as f32) * 0.8 + 0.1))
                    .collect();
                Clip::new(format!("toy{k}"), 24.0, frames).unwrap()
            })
            .collect();
        TrainData {
            hr_clips: clips,
            pipeline: PipelineConfig::default(),
            pool: LboPool::empty(),
        }
    }

    fn tiny_cfg(stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            iterations: 3,
            batch_size: 1,
            seq_len: 3,
            patch_size: 32,
            checkpoint_every: 2,
            generator: GeneratorArch {
                channels: 8,
                blocks: [1, 1, 1],
            },
            discriminator: DiscConfig { base_width: 4 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage_one_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        let mut g = Generator::seeded(cfg.generator, 0, DType::F32, &Device::Cpu).unwrap();
        let out = train_stage(&mut g, None, &data(), &cfg, dir.path()).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.checkpoints, vec![checkpoint_dir(dir.path(), 2), checkpoint_dir(dir.path(), 3)]);
        let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(text.lines().next(), Some(LOG_HEADER));
        assert_eq!(text.lines().count(), 4);
        let back = Generator::load(&out.checkpoints[1].join(GENERATOR_FILE), DType::F32, &Device::Cpu).unwrap();
        assert_eq!((back.meta.stage, back.meta.iterations), (1, 3));
        for row in &out.log {
            assert_eq!(row.report.total_g, row.report.l1);
        }
    }

    #[test]
    fn stage_two_requires_stage_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        let mut g = Generator::seeded(cfg.generator, 0, DType::F32, &Device::Cpu).unwrap();
        let d = Discriminator::seeded(4, 0, DType::F32, &Device::Cpu).unwrap();
        let err = train_stage(&mut g, Some(&d), &data(), &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));

        g.meta.stage = 1;
        let out = train_stage(&mut g, Some(&d), &data(), &cfg, dir.path()).unwrap();
        assert!(out.log.iter().all(|r| r.report.adversarial_d.is_finite() && r.report.adversarial_d > 0.0));
        assert!(out.log.iter().all(|r| r.report.perceptual > 0.0));
        assert!(out.checkpoints[0].join(DISCRIMINATOR_FILE).exists());
        assert_eq!(g.meta.stage, 2);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(1);
        let mut g = Generator::seeded(cfg.generator, 0, DType::F32, &Device::Cpu).unwrap();
        let (_, v) = tensor::sorted_vars(g.varmap()).into_iter().find(|(n, _)| n == "out.bias").unwrap();
        v.set(&(v.as_tensor() + f64::NAN).unwrap()).unwrap();
        let err = train_stage(&mut g, None, &data(), &cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }
}
