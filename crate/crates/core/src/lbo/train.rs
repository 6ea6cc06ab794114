use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LboWeights;
use crate::error::{Error, Result};
use crate::media::Frame;
use crate::tensor;
use crate::train::{
    adam, build_extractor, compute_discriminator_loss, compute_generator_loss, config_hash, CsvLog, DiscConfig,
    Discriminator, LogRow, LossReport, LossWeights, PerceptualConfig, TrainConfig, LOG_FILE,
};

/// One pseudo-HR frame (`2h x 2w`) and its real LR frame (`h x w`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub hr: Frame,
    pub lr: Frame,
}

#[derive(Debug, Clone)]
pub struct PairDataset {
    pub video_id: String,
    /// Input-rescaling factor the pseudo-HR side was produced with.
    pub factor: f64,
    pairs: Vec<TrainPair>,
}

impl PairDataset {
    pub fn new(video_id: impl Into<String>, factor: f64, pairs: Vec<TrainPair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            let (lh, lw) = p.lr.dims();
            if p.hr.dims() != (2 * lh, 2 * lw) {
                return Err(Error::InvalidShape(format!(
                    "pair {i}: pseudo-HR {:?} is not twice LR {:?}",
                    p.hr.dims(),
                    p.lr.dims()
                )));
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            factor,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[TrainPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LboTrainConfig {
    /// Pixel-loss iterations.
    pub iterations: u64,
    /// Optional follow-up iterations with perceptual and adversarial terms.
    pub stage2_iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Pseudo-HR patch side (even); larger than a frame means the whole frame.
    pub patch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub perceptual: PerceptualConfig,
    pub discriminator: DiscConfig,
}

impl Default for LboTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            stage2_iterations: 0,
            learning_rate: 2e-4,
            batch_size: 16,
            patch_size: 256,
            seed: 0,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            discriminator: DiscConfig::default(),
        }
    }
}

impl LboTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 4 || self.patch_size % 2 != 0 {
            return Err(Error::Config(format!("LBO patch_size {} must be even and >= 4", self.patch_size)));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("LBO batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub struct LboTrainOutcome {
    pub weights: LboWeights,
    /// Total loss per iteration, both stages.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Draws `batch` aligned patch pairs as `(N, 3, p, p)` / `(N, 3, p/2, p/2)`.
fn sample_pairs<R: Rng + ?Sized>(ds: &PairDataset, p: (usize, usize), batch: usize, rng: &mut R, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let (ph, pw) = p;
    let mut hs = Vec::with_capacity(batch);
    let mut ls = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &ds.pairs[rng.random_range(0..ds.len())];
        let (lh, lw) = pair.lr.dims();
        let y = rng.random_range(0..=lh - ph / 2);
        let x = rng.random_range(0..=lw - pw / 2);
        hs.push(tensor::frame_to_tensor(&pair.hr.crop(2 * y, 2 * x, ph, pw)?, dtype, dev)?);
        ls.push(tensor::frame_to_tensor(&pair.lr.crop(y, x, ph / 2, pw / 2)?, dtype, dev)?);
    }
    Ok((Tensor::cat(&hs, 0)?, Tensor::cat(&ls, 0)?))
}

fn snapshot(w: &LboWeights) -> Result<Vec<(String, Tensor)>> {
    tensor::sorted_vars(w.varmap())
        .into_iter()
        .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
        .collect()
}

fn restore(w: &LboWeights, snap: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in snap {
        w.set_tensor(name, t)?;
    }
    Ok(())
}

/// Fits one learnable operator to a pair dataset. With `out_dir`, writes a
/// CSV loss log and checkpoints; on a non-finite loss the last good weights
/// are saved as `last_good.safetensors` before failing.
pub fn train_lbo(ds: &PairDataset, cfg: &LboTrainConfig, out_dir: Option<&Path>) -> Result<LboTrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("LBO pair dataset is empty".into()));
    }
    let dev = Device::Cpu;
    let dtype = DType::F32;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut w = LboWeights::seeded(cfg.seed, dtype, &dev)?;
    w.meta.source_video = ds.video_id.clone();
    w.meta.config_hash = config_hash(&cfg_text);

    // largest even patch that fits every pair
    let min_h = ds.pairs.iter().map(|p| p.hr.height()).min().unwrap_or(0);
    let min_w = ds.pairs.iter().map(|p| p.hr.width()).min().unwrap_or(0);
    let ph = cfg.patch_size.min(min_h) & !1;
    let pw = cfg.patch_size.min(min_w) & !1;

    let mut log = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
            std::fs::write(d.join("lbo_config.toml"), &cfg_text).map_err(|e| Error::io("writing lbo_config.toml", e))?;
            Some(CsvLog::open(&d.join(LOG_FILE))?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = adam(w.varmap(), cfg.learning_rate)?;
    let total_iters = cfg.iterations + cfg.stage2_iterations;
    let stage2 = TrainConfig {
        stage: 2,
        loss: cfg.loss.clone(),
        ..TrainConfig::default()
    };
    let (disc, extractor) = if cfg.stage2_iterations > 0 {
        (
            Some(Discriminator::seeded(cfg.discriminator.base_width, cfg.seed, dtype, &dev)?),
            Some(build_extractor(&cfg.perceptual, dtype, &dev)?),
        )
    } else {
        (None, None)
    };
    let mut opt_d = match &disc {
        Some(d) => Some(adam(d.varmap(), cfg.learning_rate)?),
        None => None,
    };

    let mut losses = Vec::with_capacity(total_iters as usize);
    let mut checkpoints = Vec::new();
    let mut good = snapshot(&w)?;
    for iter in 1..=total_iters {
        let (hr, lr) = sample_pairs(ds, (ph, pw), cfg.batch_size, &mut rng, dtype, &dev)?;
        let out = w.forward_tensor(&hr)?;
        let in_stage2 = iter > cfg.iterations;
        let (total, mut report) = if in_stage2 {
            let l = compute_generator_loss(
                std::slice::from_ref(&out),
                std::slice::from_ref(&lr),
                disc.as_ref(),
                extractor.as_deref(),
                &stage2,
            )?;
            (l.total, l.report)
        } else {
            let l1 = tensor::l1(&out, &lr)?;
            let v = tensor::scalar(&l1)?;
            let r = LossReport {
                l1: v,
                total_g: v,
                ..Default::default()
            };
            ((l1 * cfg.loss.l1)?, r)
        };
        if !report.is_finite() {
            restore(&w, &good)?;
            let kept = match out_dir {
                Some(d) => {
                    let p = d.join("last_good.safetensors");
                    w.save(&p)?;
                    p.display().to_string()
                }
                None => "not saved (no output directory)".into(),
            };
            return Err(Error::Training(format!(
                "LBO loss became non-finite at iteration {iter}; last good weights: {kept}"
            )));
        }
        opt.backward_step(&total)?;
        if let (true, Some(d), Some(od)) = (in_stage2, disc.as_ref(), opt_d.as_mut()) {
            let (dl, v) = compute_discriminator_loss(
                std::slice::from_ref(&out),
                std::slice::from_ref(&lr),
                d,
            )?;
            od.backward_step(&dl)?;
            d.refresh_spectral_norms()?;
            report.adversarial_d = v;
        }
        good = snapshot(&w)?;
        losses.push(report.total_g);
        if let Some(l) = log.as_mut() {
            l.append(&LogRow {
                iter,
                report,
                lr: cfg.learning_rate,
            })?;
        }
        let due = cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0;
        if let (Some(d), true) = (out_dir, due || iter == total_iters) {
            w.meta.iterations = iter;
            let p = d.join(format!("ckpt_{iter}")).join("lbo.safetensors");
            w.save(&p)?;
            checkpoints.push(p);
        }
    }
    w.meta.iterations = total_iters;
    Ok(LboTrainOutcome {
        weights: w,
        losses,
        checkpoints,
    })
}
