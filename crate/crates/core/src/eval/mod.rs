//! No-reference evaluation of super-resolution models: NIQE, external scorer
//! plugins, parameter counts and per-frame latency, rendered as a comparison
//! table plus raw per-frame scores.

mod niqe;

pub use niqe::{compute_niqe, niqe_gray, y_channel, NiqeModel};

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curate::{CommandScorer, QualityScorer};
use crate::error::{Error, Result};
use crate::media::{resize_to, Clip, Frame, ResizeMethod};
use crate::tensor;
use crate::vsr::{forward_sequence, Generator, SCALE};

pub const REPORT_SCHEMA: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TABLE: &str = "report.txt";
pub const FRAME_CSV: &str = "per_frame.csv";

/// Anything that turns an LR clip into a x4 clip.
pub trait SrModel {
    fn id(&self) -> &str;
    fn params(&self) -> Option<usize>;
    fn super_resolve(&self, clip: &Clip) -> Result<Clip>;
}

pub struct GeneratorModel<'g> {
    pub id: String,
    pub gen: &'g Generator,
}

impl SrModel for GeneratorModel<'_> {
    fn id(&self) -> &str {
        &self.id
    }

    fn params(&self) -> Option<usize> {
        Some(self.gen.count_parameters())
    }

    fn super_resolve(&self, clip: &Clip) -> Result<Clip> {
        forward_sequence(clip, self.gen)
    }
}

/// Bilinear x4 upsampling, the reference row of every report.
pub struct BilinearBaseline;

impl SrModel for BilinearBaseline {
    fn id(&self) -> &str {
        "bilinear"
    }

    fn params(&self) -> Option<usize> {
        Some(0)
    }

    fn super_resolve(&self, clip: &Clip) -> Result<Clip> {
        let (h, w) = clip.dims();
        clip.try_map(|_, f| resize_to(f, SCALE * h, SCALE * w, ResizeMethod::Bilinear))
    }
}

/// Per-frame quality metric.
pub trait FrameScorer {
    fn id(&self) -> &str;
    /// Changes whenever the scorer could produce different numbers.
    fn version(&self) -> String;
    fn lower_is_better(&self) -> bool;
    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>>;
}

pub struct NiqeScorer;

impl FrameScorer for NiqeScorer {
    fn id(&self) -> &str {
        "niqe"
    }

    fn version(&self) -> String {
        format!("builtin-{}", NiqeModel::pristine().version)
    }

    fn lower_is_better(&self) -> bool {
        true
    }

    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        frames.iter().map(compute_niqe).collect()
    }
}

/// External scorer process (for example a learned IQA model), higher is better.
/// Uses the same stdin/stdout contract as the curation plugins.
pub struct PluginScorer {
    pub command: CommandScorer,
}

impl FrameScorer for PluginScorer {
    fn id(&self) -> &str {
        &self.command.id
    }

    fn version(&self) -> String {
        let mut h = Sha256::new();
        match std::fs::read(&self.command.program) {
            Ok(bytes) => h.update(&bytes),
            Err(_) => h.update(self.command.program.to_string_lossy().as_bytes()),
        }
        for a in &self.command.args {
            h.update(a.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    fn lower_is_better(&self) -> bool {
        false
    }

    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        QualityScorer::score_frames(&self.command, frames)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub frames: usize,
    /// Scorer id to mean over frames.
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub model: String,
    pub clip_id: String,
    pub frame: usize,
    pub scorer: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStat {
    pub median_ms: f64,
    pub height: usize,
    pub width: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub params: Option<usize>,
    pub runtime: Option<RuntimeStat>,
    pub clips: Vec<ClipScores>,
    /// Scorer id to mean over clips that produced a value.
    pub aggregate: BTreeMap<String, f64>,
    /// Human-readable notes on scorers or clips that failed.
    pub failures: Vec<String>,
    #[serde(skip)]
    pub per_frame: Vec<FrameScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub id: String,
    pub version: String,
    pub lower_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub schema_version: u32,
    pub hardware: String,
    pub scorers: Vec<ScorerInfo>,
    pub models: Vec<ModelReport>,
}

/// Short description of the machine the numbers came from.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|t| {
            t.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}, {threads} threads, {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Super-resolves every clip and scores every output frame. A failing
/// scorer is noted in `failures` and the rest of the report still fills in;
/// a failing model is an error.
pub fn evaluate_model(model: &dyn SrModel, clips: &[Clip], scorers: &[&dyn FrameScorer]) -> Result<ModelReport> {
    let mut report = ModelReport {
        model: model.id().to_string(),
        params: model.params(),
        runtime: None,
        clips: Vec::new(),
        aggregate: BTreeMap::new(),
        failures: Vec::new(),
        per_frame: Vec::new(),
    };
    for clip in clips {
        let sr = model.super_resolve(clip)?;
        let mut means = BTreeMap::new();
        for s in scorers {
            match s.score_frames(sr.frames()) {
                Ok(v) if v.len() == sr.len() => {
                    for (i, value) in v.iter().enumerate() {
                        report.per_frame.push(FrameScore {
                            model: report.model.clone(),
                            clip_id: clip.clip_id.clone(),
                            frame: i,
                            scorer: s.id().to_string(),
                            value: *value,
                        });
                    }
                    means.insert(s.id().to_string(), v.iter().sum::<f64>() / v.len() as f64);
                }
                Ok(v) => report.failures.push(format!(
                    "{} on {}: {} scores for {} frames",
                    s.id(),
                    clip.clip_id,
                    v.len(),
                    sr.len()
                )),
                Err(e) => report.failures.push(format!("{} on {}: {e}", s.id(), clip.clip_id)),
            }
        }
        report.clips.push(ClipScores {
            clip_id: clip.clip_id.clone(),
            frames: sr.len(),
            means,
        });
    }
    for s in scorers {
        let vals: Vec<f64> = report.clips.iter().filter_map(|c| c.means.get(s.id()).copied()).collect();
        if !vals.is_empty() {
            report.aggregate.insert(s.id().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(report)
}

/// Evaluates the bilinear baseline followed by each model.
pub fn evaluate(models: &[&dyn SrModel], clips: &[Clip], scorers: &[&dyn FrameScorer]) -> Result<QualityReport> {
    let mut rows = vec![evaluate_model(&BilinearBaseline, clips, scorers)?];
    for m in models {
        rows.push(evaluate_model(*m, clips, scorers)?);
    }
    Ok(QualityReport {
        schema_version: REPORT_SCHEMA,
        hardware: hardware_descriptor(),
        scorers: scorers
            .iter()
            .map(|s| ScorerInfo {
                id: s.id().to_string(),
                version: s.version(),
                lower_is_better: s.lower_is_better(),
            })
            .collect(),
        models: rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub median_ms: f64,
    pub params: usize,
    pub height: usize,
    pub width: usize,
    pub trials: usize,
    pub warmup: usize,
}

pub const BENCH_WARMUP: usize = 3;

/// Median latency of one recurrent step at an `h x w` LR input. Inputs are
/// prepared up front so only the step itself is timed.
pub fn benchmark_runtime(gen: &Generator, h: usize, w: usize, trials: usize) -> Result<BenchResult> {
    if trials < 5 {
        return Err(Error::InvalidArgument(format!("benchmark needs at least 5 trials, got {trials}")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::InvalidArgument(format!("benchmark size {h}x{w} must be divisible by 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frame = |rng: &mut ChaCha8Rng| Frame::from_fn(h, w, |_, _, _| rng.random::<f32>());
    let lr: Vec<Tensor> = (0..3)
        .map(|_| tensor::frame_to_tensor(&frame(&mut rng), gen.dtype(), gen.device()))
        .collect::<Result<_>>()?;
    let sr_prev = tensor::bilinear(&lr[1], SCALE * h, SCALE * w)?;
    let mut state = gen.init_state(1, h, w)?;
    let mut times = Vec::with_capacity(trials);
    for i in 0..BENCH_WARMUP + trials {
        let t0 = Instant::now();
        let (_, s) = gen.step_tensor(&lr[0], &lr[1], &lr[2], &sr_prev, &state)?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        state = s.detach();
        if i >= BENCH_WARMUP {
            times.push(elapsed);
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    Ok(BenchResult {
        median_ms: median,
        params: gen.count_parameters(),
        height: h,
        width: w,
        trials,
        warmup: BENCH_WARMUP,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

/// Plain-text comparison table: one row per model.
pub fn render_table(r: &QualityReport) -> String {
    let mut header = vec!["Model".to_string(), "Params (M)".into(), "Runtime (ms)".into()];
    for s in &r.scorers {
        let arrow = if s.lower_is_better { "lower" } else { "higher" };
        header.push(format!("{} ({arrow} better)", s.id.to_uppercase()));
    }
    let mut rows = vec![header];
    for m in &r.models {
        let mut row = vec![
            m.model.clone(),
            fmt_opt(m.params.map(|p| p as f64 / 1e6), 3),
            m.runtime
                .as_ref()
                .map(|t| format!("{:.1} @{}x{}", t.median_ms, t.height, t.width))
                .unwrap_or_else(|| "-".into()),
        ];
        for s in &r.scorers {
            row.push(fmt_opt(m.aggregate.get(&s.id).copied(), 4));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let line = |r: &Vec<String>| {
        r.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    let mut out = String::new();
    out.push_str(&line(&rows[0]));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for r in &rows[1..] {
        out.push_str(&line(r));
        out.push('\n');
    }
    out.push_str(&format!("hardware: {}\n", r.hardware));
    for m in &r.models {
        for f in &m.failures {
            out.push_str(&format!("failure [{}]: {f}\n", m.model));
        }
    }
    out
}

/// Writes `report.json`, `report.txt` and `per_frame.csv` into `dir`.
pub fn write_report(r: &QualityReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(format!("writing {}", p.display()), e))
    };
    write(REPORT_JSON, &serde_json::to_vec_pretty(r)?)?;
    write(REPORT_TABLE, render_table(r).as_bytes())?;
    let mut csv = String::from("model,clip,frame,scorer,value\n");
    for m in &r.models {
        for f in &m.per_frame {
            csv.push_str(&format!("{},{},{},{},{}\n", f.model, f.clip_id, f.frame, f.scorer, f.value));
        }
    }
    write(FRAME_CSV, csv.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vsr::GeneratorArch;
    use candle_core::{DType, Device};

    /// Cheap deterministic scorer: mean intensity times 100.
    struct MeanScorer;

    impl FrameScorer for MeanScorer {
        fn id(&self) -> &str {
            "mean"
        }
        fn version(&self) -> String {
            "1".into()
        }
        fn lower_is_better(&self) -> bool {
            false
        }
        fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>> {
            Ok(frames
                .iter()
                .map(|f| 100.0 * f.data().iter().map(|v| *v as f64).sum::<f64>() / f.data().len() as f64)
                .collect())
        }
    }

    fn clips() -> Vec<Clip> {
        (0..2)
            .map(|k| {
                let frames = (0..3)
                    .map(|t| Frame::from_fn(24, 28, |c, y, x| ((x * 7 + y * 3 + c + t + k) % 11) as f32 / 10.0))
                    .collect();
                Clip::new(format!("clip{k}"), 24.0, frames).unwrap()
            })
            .collect()
    }

    #[test]
    fn report_shape_baseline_and_determinism() {
        let g = Generator::seeded(
            GeneratorArch {
                channels: 4,
                blocks: [1, 1, 1],
            },
            0,
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        let m = GeneratorModel { id: "tiny".into(), gen: &g };
        let scorers: [&dyn FrameScorer; 2] = [&NiqeScorer, &MeanScorer];
        let a = evaluate(&[&m], &clips(), &scorers).unwrap();
        let b = evaluate(&[&m], &clips(), &scorers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.models.len(), 2);
        assert_eq!(a.models[0].model, "bilinear");
        let tiny = &a.models[1];
        assert_eq!(tiny.clips.len(), 2);
        assert_eq!(tiny.params, Some(g.count_parameters()));
        let mean_of_means = tiny.clips.iter().map(|c| c.means["niqe"]).sum::<f64>() / 2.0;
        assert!((tiny.aggregate["niqe"] - mean_of_means).abs() < 1e-9);
        assert_eq!(tiny.per_frame.len(), 2 * 3 * 2);

        let dir = tempfile::tempdir().unwrap();
        write_report(&a, dir.path()).unwrap();
        let table = std::fs::read_to_string(dir.path().join(REPORT_TABLE)).unwrap();
        assert!(table.contains("bilinear") && table.contains("NIQE (lower better)"));
        let csv = std::fs::read_to_string(dir.path().join(FRAME_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 12);
    }

    #[cfg(unix)]
    #[test]
    fn failing_plugin_gives_partial_report() {
        let broken = PluginScorer {
            command: CommandScorer {
                id: "maniqa".into(),
                program: "/nonexistent/maniqa".into(),
                args: vec![],
            },
        };
        let scorers: [&dyn FrameScorer; 2] = [&MeanScorer, &broken];
        let r = evaluate_model(&BilinearBaseline, &clips(), &scorers).unwrap();
        assert_eq!(r.failures.len(), 2);
        assert!(r.failures[0].contains("maniqa"));
        assert!(r.aggregate.contains_key("mean") && !r.aggregate.contains_key("maniqa"));
    }

    #[test]
    fn benchmark_counts_params_and_checks_trials() {
        let g = Generator::zeros(
            GeneratorArch {
                channels: 4,
                blocks: [1, 1, 1],
            },
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        assert!(benchmark_runtime(&g, 16, 16, 4).is_err());
        let b = benchmark_runtime(&g, 16, 16, 5).unwrap();
        assert_eq!(b.params, g.count_parameters());
        assert!(b.median_ms > 0.0);
    }
}
