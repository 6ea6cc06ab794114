//! HR-to-LR degradation synthesis:
//! blur -> noise -> (down | LBO) -> (down | LBO) -> video codec.
//!
//! Hyperparameters are drawn once per clip ([`sample_degradation`]); only the
//! noise realization changes from frame to frame.

mod codec;
mod kernel;
mod ops;

pub use codec::{compress_clip, crf_scale, mock_compress, resolve_encoder, CodecBackend, Compressed, H264Profile, ENCODER_ENV};
pub use kernel::{build_gaussian_kernel, BlurKernel, BlurKind};
pub use ops::{apply_blur, apply_noise, blur_frame, downscale_clip, NoiseKind};

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbo::{choose_lbo, LboPool};
use crate::media::{Clip, ResizeMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurSpec {
    pub iso_prob: f64,
    pub iso_sigma: [f64; 2],
    pub aniso_sigma: [f64; 2],
    /// Rotation range for anisotropic kernels, radians, `[lo, hi)`.
    pub theta: [f64; 2],
    pub kernel_size: usize,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self {
            iso_prob: 0.7,
            iso_sigma: [0.2, 4.0],
            aniso_sigma: [0.8, 3.0],
            theta: [0.0, PI],
            kernel_size: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub color_prob: f64,
    /// Standard deviation range on the 0-255 scale.
    pub sigma: [f64; 2],
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            color_prob: 0.5,
            sigma: [0.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownSpec {
    pub methods: Vec<ResizeMethod>,
}

impl Default for DownSpec {
    fn default() -> Self {
        Self {
            methods: ResizeMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LboSpec {
    pub prob: f64,
}

impl Default for LboSpec {
    fn default() -> Self {
        Self { prob: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSpec {
    pub crf: [u8; 2],
    pub profiles: Vec<H264Profile>,
    pub profile_probs: Vec<f64>,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            crf: [18, 35],
            profiles: H264Profile::ALL.to_vec(),
            profile_probs: vec![0.1, 0.2, 0.7],
        }
    }
}

/// One basic operator and its parameter distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OperatorSpec {
    Blur(BlurSpec),
    Noise(NoiseSpec),
    Down(DownSpec),
    Lbo(LboSpec),
    Codec(CodecSpec),
}

impl OperatorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            OperatorSpec::Blur(_) => "blur",
            OperatorSpec::Noise(_) => "noise",
            OperatorSpec::Down(_) => "down",
            OperatorSpec::Lbo(_) => "lbo",
            OperatorSpec::Codec(_) => "codec",
        }
    }
}

const STAGE_ORDER: [&str; 7] = ["blur", "noise", "down", "lbo", "down", "lbo", "codec"];

/// Ordered operator list plus the compression backend used to execute it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(rename = "stage")]
    pub stages: Vec<OperatorSpec>,
    #[serde(default)]
    pub backend: CodecBackend,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: vec![
                OperatorSpec::Blur(BlurSpec::default()),
                OperatorSpec::Noise(NoiseSpec::default()),
                OperatorSpec::Down(DownSpec::default()),
                OperatorSpec::Lbo(LboSpec::default()),
                OperatorSpec::Down(DownSpec::default()),
                OperatorSpec::Lbo(LboSpec::default()),
                OperatorSpec::Codec(CodecSpec::default()),
            ],
            backend: CodecBackend::default(),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be a probability, got {p}")))
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} range {r:?} is invalid")))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let kinds: Vec<&str> = self.stages.iter().map(OperatorSpec::kind).collect();
        if kinds != STAGE_ORDER {
            return Err(Error::Config(format!(
                "stages must be ordered {STAGE_ORDER:?} so the net scale is x1/4, got {kinds:?}"
            )));
        }
        for s in &self.stages {
            match s {
                OperatorSpec::Blur(b) => {
                    check_prob("blur.iso_prob", b.iso_prob)?;
                    check_range("blur.iso_sigma", b.iso_sigma, 0.0)?;
                    check_range("blur.aniso_sigma", b.aniso_sigma, 0.0)?;
                    check_range("blur.theta", b.theta, f64::NEG_INFINITY)?;
                    if b.iso_sigma[0] <= 0.0 || b.aniso_sigma[0] <= 0.0 {
                        return Err(Error::Config("blur sigmas must be positive".into()));
                    }
                    if b.kernel_size % 2 == 0 {
                        return Err(Error::Config(format!("blur.kernel_size {} must be odd", b.kernel_size)));
                    }
                }
                OperatorSpec::Noise(n) => {
                    check_prob("noise.color_prob", n.color_prob)?;
                    check_range("noise.sigma", n.sigma, 0.0)?;
                }
                OperatorSpec::Down(d) => {
                    if d.methods.is_empty() {
                        return Err(Error::Config("down.methods is empty".into()));
                    }
                }
                OperatorSpec::Lbo(l) => check_prob("lbo.prob", l.prob)?,
                OperatorSpec::Codec(c) => {
                    if c.crf[0] > c.crf[1] || c.crf[1] > 51 {
                        return Err(Error::Config(format!("codec.crf range {:?} is invalid", c.crf)));
                    }
                    if c.profiles.is_empty() || c.profiles.len() != c.profile_probs.len() {
                        return Err(Error::Config("codec.profiles and codec.profile_probs must pair up".into()));
                    }
                    let sum: f64 = c.profile_probs.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 || c.profile_probs.iter().any(|p| *p < 0.0) {
                        return Err(Error::Config(format!("codec.profile_probs must sum to 1, got {sum}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn blur(&self) -> &BlurSpec {
        match &self.stages[0] {
            OperatorSpec::Blur(b) => b,
            _ => unreachable!("validated order"),
        }
    }

    fn noise(&self) -> &NoiseSpec {
        match &self.stages[1] {
            OperatorSpec::Noise(n) => n,
            _ => unreachable!("validated order"),
        }
    }

    fn down(&self, slot: usize) -> &DownSpec {
        match &self.stages[2 + 2 * slot] {
            OperatorSpec::Down(d) => d,
            _ => unreachable!("validated order"),
        }
    }

    fn lbo(&self, slot: usize) -> &LboSpec {
        match &self.stages[3 + 2 * slot] {
            OperatorSpec::Lbo(l) => l,
            _ => unreachable!("validated order"),
        }
    }

    fn codec(&self) -> &CodecSpec {
        match &self.stages[6] {
            OperatorSpec::Codec(c) => c,
            _ => unreachable!("validated order"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurDraw {
    pub kind: BlurKind,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub size: usize,
}

impl BlurDraw {
    pub fn kernel(&self) -> Result<BlurKernel> {
        build_gaussian_kernel(self.kind, self.sigma_x, self.sigma_y, self.theta, self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub kind: NoiseKind,
    /// In `[0, 1]` units.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownDraw {
    pub method: ResizeMethod,
    /// Replaced by the LBO in the following slot.
    pub skipped: bool,
}

/// One concrete draw of every pipeline hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDegradation {
    /// `None` means the identity (delta) kernel.
    pub blur: Option<BlurDraw>,
    pub noise: NoiseDraw,
    pub down: [DownDraw; 2],
    pub lbo: [bool; 2],
    /// Pool member shared by both active LBO slots.
    pub lbo_index: Option<usize>,
    pub crf: u8,
    pub profile: H264Profile,
    /// Seeds the per-frame noise fields.
    pub seed: u64,
}

impl SampledDegradation {
    /// Number of stages that halve the resolution.
    pub fn active_halvings(&self) -> usize {
        self.down.iter().filter(|d| !d.skipped).count() + self.lbo.iter().filter(|l| **l).count()
    }

    /// A draw with no blur, no noise, plain downscales and the given codec step.
    pub fn degenerate(method: ResizeMethod, crf: u8) -> Self {
        Self {
            blur: None,
            noise: NoiseDraw {
                kind: NoiseKind::Color,
                sigma: 0.0,
            },
            down: [DownDraw { method, skipped: false }; 2],
            lbo: [false; 2],
            lbo_index: None,
            crf,
            profile: H264Profile::High,
            seed: 0,
        }
    }
}

/// Draws one degradation. LBO slots stay off when `pool_len` is 0.
pub fn sample_degradation<R: Rng + ?Sized>(cfg: &PipelineConfig, pool_len: usize, rng: &mut R) -> Result<SampledDegradation> {
    cfg.validate()?;
    let b = cfg.blur();
    let blur = if rng.random_bool(b.iso_prob) {
        let s = rng.random_range(b.iso_sigma[0]..=b.iso_sigma[1]);
        BlurDraw {
            kind: BlurKind::Isotropic,
            sigma_x: s,
            sigma_y: s,
            theta: 0.0,
            size: b.kernel_size,
        }
    } else {
        let sx = rng.random_range(b.aniso_sigma[0]..=b.aniso_sigma[1]);
        let sy = rng.random_range(b.aniso_sigma[0]..=b.aniso_sigma[1]);
        let theta = if b.theta[1] > b.theta[0] {
            rng.random_range(b.theta[0]..b.theta[1])
        } else {
            b.theta[0]
        };
        BlurDraw {
            kind: BlurKind::Anisotropic,
            sigma_x: sx,
            sigma_y: sy,
            theta,
            size: b.kernel_size,
        }
    };

    let n = cfg.noise();
    let kind = if rng.random_bool(n.color_prob) {
        NoiseKind::Color
    } else {
        NoiseKind::Gray
    };
    let sigma = rng.random_range(n.sigma[0]..=n.sigma[1]) / 255.0;

    let mut down = [DownDraw {
        method: ResizeMethod::Area,
        skipped: false,
    }; 2];
    for (slot, d) in down.iter_mut().enumerate() {
        let methods = &cfg.down(slot).methods;
        d.method = methods[rng.random_range(0..methods.len())];
    }

    let mut lbo = [false; 2];
    for (slot, on) in lbo.iter_mut().enumerate() {
        let p = cfg.lbo(slot).prob;
        *on = pool_len > 0 && rng.random_bool(p);
        down[slot].skipped = *on;
    }
    let lbo_index = if lbo.iter().any(|x| *x) {
        Some(choose_lbo(pool_len, rng)?)
    } else {
        None
    };

    let c = cfg.codec();
    let crf = rng.random_range(c.crf[0]..=c.crf[1]);
    let wi = WeightedIndex::new(&c.profile_probs).map_err(|e| Error::Config(e.to_string()))?;
    let profile = c.profiles[wi.sample(rng)];
    let seed = rng.random::<u64>();

    Ok(SampledDegradation {
        blur: Some(blur),
        noise: NoiseDraw { kind, sigma },
        down,
        lbo,
        lbo_index,
        crf,
        profile,
        seed,
    })
}

fn stage<T>(index: usize, name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: index,
        name,
        source: Box::new(e),
    })
}

/// Applies a sampled degradation to an HR clip, yielding a x1/4 LR clip.
pub fn run_pipeline(hr: &Clip, d: &SampledDegradation, pool: &LboPool, backend: &CodecBackend) -> Result<Clip> {
    let (h, w) = hr.dims();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!("HR clip {h}x{w} must be divisible by 4")));
    }
    if d.active_halvings() != 2 {
        return Err(Error::InvalidArgument(format!(
            "degradation halves {} times, expected 2",
            d.active_halvings()
        )));
    }
    let lbo = match d.lbo_index {
        Some(i) if d.lbo.iter().any(|x| *x) => Some(pool.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("LBO index {i} outside pool of {}", pool.len()))
        })?),
        None if d.lbo.iter().any(|x| *x) => {
            return Err(Error::InvalidArgument("active LBO slot without a pool index".into()))
        }
        _ => None,
    };

    let mut x = match &d.blur {
        Some(b) => stage(0, "blur", b.kernel().and_then(|k| apply_blur(hr, &k)))?,
        None => hr.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    x = stage(1, "noise", apply_noise(&x, d.noise.kind, d.noise.sigma, &mut rng))?;
    for slot in 0..2 {
        if !d.down[slot].skipped {
            x = stage(2 + 2 * slot, "down", downscale_clip(&x, d.down[slot].method))?;
        }
        if d.lbo[slot] {
            let op = lbo.expect("checked above");
            x = stage(3 + 2 * slot, "lbo", x.try_map(|_, f| op.apply(f)))?;
        }
    }
    let out = stage(6, "codec", compress_clip(&x, d.crf, d.profile, backend))?;
    if out.mock {
        log::debug!("codec stage used the mock surrogate");
    }
    Ok(out.clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn textured_clip(n: usize, h: usize, w: usize) -> Clip {
        let frames = (0..n)
            .map(|t| {
                crate::media::Frame::from_fn(h, w, |c, y, x| ((y * 5 + x * 3 + c * 7 + t) % 23) as f32 / 22.0)
            })
            .collect();
        Clip::new("hr", 25.0, frames).unwrap()
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_order_and_unknown_keys() {
        let mut cfg = PipelineConfig::default();
        cfg.stages.swap(0, 1);
        assert!(cfg.validate().is_err());

        let text = PipelineConfig::default().to_toml().replace("iso_prob", "iso_probability");
        assert!(PipelineConfig::from_toml(&text).is_err());

        let mut cfg = PipelineConfig::default();
        if let OperatorSpec::Codec(c) = &mut cfg.stages[6] {
            c.profile_probs = vec![0.2, 0.2, 0.7];
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_draw_halves_twice() {
        let cfg = PipelineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let d = sample_degradation(&cfg, 3, &mut rng).unwrap();
            assert_eq!(d.active_halvings(), 2);
            assert!((0.0..=10.0 / 255.0).contains(&d.noise.sigma));
            assert!((18..=35).contains(&d.crf));
            for slot in 0..2 {
                assert_eq!(d.down[slot].skipped, d.lbo[slot]);
            }
            assert_eq!(d.lbo_index.is_some(), d.lbo.iter().any(|x| *x));
        }
        let d = sample_degradation(&cfg, 0, &mut rng).unwrap();
        assert_eq!(d.lbo, [false, false]);
    }

    #[test]
    fn degenerate_path_equals_two_downscales() {
        let hr = textured_clip(3, 32, 48);
        let d = SampledDegradation::degenerate(ResizeMethod::Bilinear, 30);
        let out = run_pipeline(&hr, &d, &LboPool::empty(), &CodecBackend::Mock { step: 0.0 }).unwrap();
        let want = downscale_clip(&downscale_clip(&hr, ResizeMethod::Bilinear).unwrap(), ResizeMethod::Bilinear).unwrap();
        assert_eq!(out.dims(), (8, 12));
        for (a, b) in out.frames().iter().zip(want.frames()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic_with_lbo() {
        let hr = textured_clip(4, 32, 32);
        let pool = LboPool::new(vec![
            crate::lbo::LboWeights::seeded(1, DType::F32, &Device::Cpu).unwrap(),
            crate::lbo::LboWeights::seeded(2, DType::F32, &Device::Cpu).unwrap(),
        ]);
        let cfg = PipelineConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut outs = Vec::new();
            for _ in 0..6 {
                let d = sample_degradation(&cfg, pool.len(), &mut rng).unwrap();
                outs.push(run_pipeline(&hr, &d, &pool, &cfg.backend).unwrap());
            }
            outs
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.dims(), (8, 8));
            let bits = |c: &Clip| -> Vec<u32> { c.frames().iter().flat_map(|f| f.data().iter().map(|v| v.to_bits())).collect() };
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn errors_carry_stage_index() {
        let hr = textured_clip(1, 36, 36);
        let mut d = SampledDegradation::degenerate(ResizeMethod::Area, 20);
        d.lbo = [true, false];
        d.down[0].skipped = true;
        d.lbo_index = Some(0);
        let err = run_pipeline(&hr, &d, &LboPool::empty(), &CodecBackend::default()).unwrap_err();
        assert!(err.to_string().contains("outside pool"), "{err}");

        let hr = textured_clip(1, 12, 12);
        let mut d = SampledDegradation::degenerate(ResizeMethod::Area, 20);
        d.blur = Some(BlurDraw {
            kind: BlurKind::Isotropic,
            sigma_x: 1.0,
            sigma_y: 1.0,
            theta: 0.0,
            size: 31,
        });
        let err = run_pipeline(&hr, &d, &LboPool::empty(), &CodecBackend::default()).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: 0, .. }), "{err}");
    }

    #[test]
    fn hr_dims_must_divide_by_four() {
        let hr = textured_clip(1, 34, 32);
        let d = SampledDegradation::degenerate(ResizeMethod::Area, 20);
        assert!(run_pipeline(&hr, &d, &LboPool::empty(), &CodecBackend::default()).is_err());
    }
}
