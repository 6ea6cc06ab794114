use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::disc::Discriminator;
use super::perceptual::{perceptual_loss, FeatureExtractor};
use crate::error::{Error, Result};
use crate::tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub total_g: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.perceptual, self.adversarial_g, self.adversarial_d, self.total_g]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean binary cross-entropy of logits against a constant label, in the
/// overflow-safe form `max(x, 0) - x*y + log(1 + exp(-|x|))`.
pub fn bce_with_logits(x: &Tensor, target: f64) -> Result<Tensor> {
    let softplus = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let t = ((x.relu()? - (x * target)?)? + softplus)?;
    Ok(t.mean_all()?)
}

fn stack(seq: &[Tensor]) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    Ok(Tensor::cat(seq, 0)?)
}

fn mean_over_scales(logits: &[Tensor], target: f64) -> Result<Tensor> {
    let n = logits.len() as f64;
    let mut acc = bce_with_logits(&logits[0], target)?;
    for l in &logits[1..] {
        acc = (acc + bce_with_logits(l, target)?)?;
    }
    Ok((acc / n)?)
}

pub struct GeneratorLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// Weighted generator objective. Stage 1 uses only the pixel term; stage 2
/// adds the perceptual term and the non-saturating adversarial term.
pub fn compute_generator_loss(
    sr_seq: &[Tensor],
    hr_seq: &[Tensor],
    disc: Option<&Discriminator>,
    extractor: Option<&dyn FeatureExtractor>,
    cfg: &TrainConfig,
) -> Result<GeneratorLoss> {
    let sr = stack(sr_seq)?;
    let hr = stack(hr_seq)?.detach();
    if sr.dims() != hr.dims() {
        return Err(Error::InvalidShape(format!("SR {:?} vs HR {:?}", sr.dims(), hr.dims())));
    }
    let w = &cfg.loss;
    let l1 = tensor::l1(&sr, &hr)?;
    let mut report = LossReport {
        l1: tensor::scalar(&l1)?,
        ..Default::default()
    };
    let mut total = (&l1 * w.l1)?;
    if cfg.stage >= 2 {
        if let Some(ext) = extractor {
            let p = perceptual_loss(ext, &sr, &hr)?;
            report.perceptual = tensor::scalar(&p)?;
            total = (total + (p * w.perceptual)?)?;
        }
        if let Some(d) = disc {
            let adv = mean_over_scales(&d.forward(&sr)?, 1.0)?;
            report.adversarial_g = tensor::scalar(&adv)?;
            total = (total + (adv * w.adversarial)?)?;
        }
    }
    report.total_g = tensor::scalar(&total)?;
    Ok(GeneratorLoss { total, report })
}

/// Discriminator objective on detached SR (fake) and HR (real) frames.
pub fn compute_discriminator_loss(sr_seq: &[Tensor], hr_seq: &[Tensor], disc: &Discriminator) -> Result<(Tensor, f64)> {
    let sr = stack(sr_seq)?.detach();
    let hr = stack(hr_seq)?.detach();
    let real = mean_over_scales(&disc.forward(&hr)?, 1.0)?;
    let fake = mean_over_scales(&disc.forward(&sr)?, 0.0)?;
    let loss = (real + fake)?;
    let v = tensor::scalar(&loss)?;
    Ok((loss, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn bce_matches_closed_form() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-30.0f64, -1.0, 0.0, 2.0, 40.0], &dev).unwrap();
        for y in [0.0, 1.0] {
            let got = tensor::scalar(&bce_with_logits(&x, y).unwrap()).unwrap();
            let want: f64 = [-30.0f64, -1.0, 0.0, 2.0, 40.0]
                .iter()
                // -log(sigmoid(v)) = log(1 + e^-v), -log(1 - sigmoid(v)) = log(1 + e^v)
                .map(|&v| y * (1.0 + (-v).exp()).ln() + (1.0 - y) * (1.0 + v.exp()).ln())
                .sum::<f64>()
                / 5.0;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn stage_one_total_is_pure_l1() {
        let dev = Device::Cpu;
        let zeros = vec![Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap(); 3];
        let ones = vec![Tensor::ones((1, 3, 16, 16), DType::F32, &dev).unwrap(); 3];
        let cfg = TrainConfig::default();
        let d = Discriminator::seeded(4, 1, DType::F32, &dev).unwrap();
        let out = compute_generator_loss(&zeros, &ones, Some(&d), None, &cfg).unwrap();
        assert_eq!(out.report.l1, 1.0);
        assert_eq!(out.report.total_g, out.report.l1);
        assert_eq!((out.report.perceptual, out.report.adversarial_g), (0.0, 0.0));

        let same = compute_generator_loss(&ones, &ones, None, None, &cfg).unwrap();
        assert_eq!(same.report.l1, 0.0);
        assert!(compute_generator_loss(&zeros[..2], &ones, None, None, &cfg).is_err());
    }

    #[test]
    fn stage_two_total_is_weighted_sum() {
        let dev = Device::Cpu;
        let sr = vec![Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &dev).unwrap(); 2];
        let hr = vec![Tensor::rand(0f32, 1f32, (1, 3, 32, 32), &dev).unwrap(); 2];
        let mut cfg = TrainConfig {
            stage: 2,
            ..TrainConfig::default()
        };
        cfg.loss.perceptual = 0.5;
        cfg.loss.adversarial = 0.1;
        let d = Discriminator::seeded(4, 1, DType::F32, &dev).unwrap();
        let ext = super::super::perceptual::RandomConvFeatures::new(0, &Default::default(), DType::F32, &dev).unwrap();
        let r = compute_generator_loss(&sr, &hr, Some(&d), Some(&ext), &cfg).unwrap().report;
        assert!(r.perceptual > 0.0 && r.adversarial_g > 0.0);
        let want = r.l1 + 0.5 * r.perceptual + 0.1 * r.adversarial_g;
        assert!((r.total_g - want).abs() < 1e-5);

        let same = compute_generator_loss(&hr, &hr, None, Some(&ext), &cfg).unwrap().report;
        assert_eq!((same.l1, same.perceptual), (0.0, 0.0));
        let (_, dl) = compute_discriminator_loss(&sr, &hr, &d).unwrap();
        assert!(dl.is_finite() && dl > 0.0);
    }
}
