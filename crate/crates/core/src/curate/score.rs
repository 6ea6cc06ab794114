use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{luma, save_frame_png, sobel_magnitude, Frame};

/// Per-frame quality, higher is better, on a 0-100 scale.
pub trait QualityScorer: Send + Sync {
    fn id(&self) -> &str;
    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>>;
}

/// Motion magnitude in pixels per frame for each consecutive pair.
pub trait MotionScorer: Send + Sync {
    fn id(&self) -> &str;
    fn score_pairs(&self, frames: &[Frame]) -> Result<Vec<f64>>;
}

/// Mean Sobel magnitude of luma mapped onto 0-100.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientSharpness;

impl GradientSharpness {
    const SCALE: f64 = 0.25;

    pub fn score(f: &Frame) -> f64 {
        let (h, w) = f.dims();
        let g = sobel_magnitude(&luma(f), h, w);
        let mean = g.iter().map(|v| *v as f64).sum::<f64>() / g.len() as f64;
        100.0 * (1.0 - (-mean / Self::SCALE).exp())
    }
}

impl QualityScorer for GradientSharpness {
    fn id(&self) -> &str {
        "builtin:gradient-sharpness"
    }

    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        Ok(frames.iter().map(Self::score).collect())
    }
}

/// Exhaustive block matching on luma.
#[derive(Debug, Clone, Copy)]
pub struct BlockMatchMotion {
    pub block: usize,
    pub radius: usize,
    /// Blocks with luma variance below this are skipped as textureless.
    pub min_variance: f64,
}

impl Default for BlockMatchMotion {
    fn default() -> Self {
        Self {
            block: 16,
            radius: 8,
            min_variance: 1e-4,
        }
    }
}

impl BlockMatchMotion {
    /// Mean displacement magnitude of textured blocks from `a` to `b`.
    pub fn pair_motion(&self, a: &Frame, b: &Frame) -> f64 {
        let (h, w) = a.dims();
        let (ya, yb) = (luma(a), luma(b));
        let n = self.block;
        let r = self.radius as isize;
        let mut total = 0.0;
        let mut count = 0usize;
        let rr = self.radius;
        // only blocks whose whole search window lies inside the frame
        for by in (rr..(h + 1).saturating_sub(n + rr)).step_by(n) {
            for bx in (rr..(w + 1).saturating_sub(n + rr)).step_by(n) {
                let mut mean = 0.0f64;
                let mut sq = 0.0f64;
                for y in by..by + n {
                    for v in &ya[y * w + bx..y * w + bx + n] {
                        mean += *v as f64;
                        sq += (*v as f64).powi(2);
                    }
                }
                let m = (n * n) as f64;
                if sq / m - (mean / m).powi(2) < self.min_variance {
                    continue;
                }
                let mut best = (f64::INFINITY, 0.0f64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (ty, tx) = ((by as isize + dy) as usize, (bx as isize + dx) as usize);
                        let mut sad = 0.0f64;
                        for y in 0..n {
                            let ra = &ya[(by + y) * w + bx..(by + y) * w + bx + n];
                            let rb = &yb[(ty + y) * w + tx..(ty + y) * w + tx + n];
                            sad += ra.iter().zip(rb).map(|(p, q)| (p - q).abs() as f64).sum::<f64>();
                        }
                        let mag = ((dx * dx + dy * dy) as f64).sqrt();
                        // ties go to the smaller displacement, so (0, 0) wins on flat matches
                        if sad < best.0 - 1e-9 || ((sad - best.0).abs() <= 1e-9 && mag < best.1) {
                            best = (sad, mag);
                        }
                    }
                }
                total += best.1;
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

impl MotionScorer for BlockMatchMotion {
    fn id(&self) -> &str {
        "builtin:block-match"
    }

    fn score_pairs(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        Ok(frames.windows(2).map(|p| self.pair_motion(&p[0], &p[1])).collect())
    }
}

/// External scorer invoked as a process. Frame paths go to stdin, one record
/// per line (`path` for quality, `path_a<TAB>path_b` for motion); stdout must
/// hold one number per record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandScorer {
    pub id: String,
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl CommandScorer {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Plugin {
            plugin: self.id.clone(),
            message: message.into(),
        }
    }

    fn run(&self, records: &[String]) -> Result<Vec<f64>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| self.fail(format!("cannot start {}: {e}", self.program.display())))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for r in records {
                writeln!(stdin, "{r}").map_err(|e| self.fail(format!("writing input: {e}")))?;
            }
        }
        let out = child
            .wait_with_output()
            .map_err(|e| self.fail(format!("waiting for process: {e}")))?;
        if !out.status.success() {
            return Err(self.fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let scores = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| self.fail(format!("unparsable score line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if scores.len() != records.len() {
            return Err(self.fail(format!("returned {} scores for {} records", scores.len(), records.len())));
        }
        Ok(scores)
    }

    fn dump(&self, frames: &[Frame], dir: &Path) -> Result<Vec<String>> {
        frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let p = dir.join(format!("frame_{i:06}.png"));
                save_frame_png(f, &p)?;
                Ok(p.display().to_string())
            })
            .collect()
    }
}

impl QualityScorer for CommandScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_frames(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("creating plugin scratch dir", e))?;
        let paths = self.dump(frames, dir.path())?;
        self.run(&paths)
    }
}

impl MotionScorer for CommandScorer {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_pairs(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io("creating plugin scratch dir", e))?;
        let paths = self.dump(frames, dir.path())?;
        let records: Vec<String> = paths.windows(2).map(|p| format!("{}\t{}", p[0], p[1])).collect();
        self.run(&records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{blur_frame, build_gaussian_kernel, BlurKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn texture(h: usize, w: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // smooth-ish random texture: blocky noise of 2x2 cells
        let cells: Vec<f32> = (0..(h / 2 + 1) * (w / 2 + 1)).map(|_| rng.random()).collect();
        (0..h * w).map(|i| cells[(i / w / 2) * (w / 2 + 1) + (i % w) / 2]).collect()
    }

    #[test]
    fn static_clip_has_no_motion() {
        let t = texture(64, 64, 1);
        let f = Frame::from_fn(64, 64, |_, y, x| t[y * 64 + x]);
        let m = BlockMatchMotion::default().score_pairs(&[f.clone(), f.clone(), f]).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn global_translation_is_measured() {
        let big = texture(96, 96, 2);
        let frames: Vec<Frame> = (0..4)
            .map(|t| Frame::from_fn(64, 64, |_, y, x| big[(y + 8) * 96 + x + 8 + 2 * t]))
            .collect();
        let m = BlockMatchMotion::default().score_pairs(&frames).unwrap();
        for v in m {
            assert!((v - 2.0).abs() <= 0.5, "{v}");
        }
    }

    #[test]
    fn blur_lowers_sharpness() {
        let t = texture(64, 64, 3);
        let sharp = Frame::from_fn(64, 64, |_, y, x| t[y * 64 + x]);
        let k = build_gaussian_kernel(BlurKind::Isotropic, 3.0, 3.0, 0.0, 21).unwrap();
        let soft = blur_frame(&sharp, &k).unwrap();
        assert!(GradientSharpness::score(&sharp) > GradientSharpness::score(&soft));
        assert_eq!(GradientSharpness::score(&Frame::filled(16, 16, 0.5)), 0.0);
    }

    #[cfg(unix)]
    fn script(dir: &Path, body: &str) -> PathBuf {
        use std::os::unix::fs::PermissionsExt;
        let p = dir.join("scorer.sh");
        std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
        p
    }

    #[cfg(unix)]
    #[test]
    fn command_plugin_contract() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Frame::filled(8, 8, 0.2); 3];
        let ok = CommandScorer {
            id: "count".into(),
            program: script(dir.path(), "while read -r line; do echo 42.5; done"),
            args: vec![],
        };
        assert_eq!(QualityScorer::score_frames(&ok, &frames).unwrap(), vec![42.5; 3]);
        assert_eq!(MotionScorer::score_pairs(&ok, &frames).unwrap(), vec![42.5; 2]);

        let bad = CommandScorer {
            id: "broken".into(),
            program: script(dir.path(), "cat > /dev/null; echo boom >&2; exit 4"),
            args: vec![],
        };
        let err = QualityScorer::score_frames(&bad, &frames).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("broken") && text.contains("boom"), "{text}");
    }
}
