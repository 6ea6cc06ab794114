//! Training-clip collection: split videos into scenes, score every candidate
//! window for quality and motion, keep the best clip per source video.

mod scenes;
mod score;

pub use scenes::{detect_cuts, frame_differences, split_scenes, SceneConfig};
pub use score::{BlockMatchMotion, CommandScorer, GradientSharpness, MotionScorer, QualityScorer};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{write_clip, Clip, Frame};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateClip {
    pub clip_id: String,
    pub video_id: String,
    /// First frame, inclusive.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    /// Mean per-frame quality on a 0-100 scale.
    pub quality: Option<f64>,
    /// Mean motion in pixels per frame.
    pub motion: Option<f64>,
    /// `[height, width]`.
    pub resolution: [usize; 2],
    /// Whether the window straddles a scene cut.
    #[serde(default)]
    pub transition: bool,
}

impl CandidateClip {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    fn scores(&self) -> Option<(f64, f64)> {
        Some((self.quality?, self.motion?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub quality_threshold: f64,
    /// Candidates moving less than this (px/frame) count as static.
    pub motion_threshold: f64,
    /// `[w_quality, w_motion]`, summing to one.
    pub weights: [f64; 2],
    pub scene: SceneConfig,
    pub quality_plugin: Option<CommandScorer>,
    pub motion_plugin: Option<CommandScorer>,
    /// Score with the built-in proxies when a plugin fails instead of aborting.
    pub fallback_to_builtin: bool,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            quality_threshold: 0.0,
            motion_threshold: 0.5,
            weights: [0.5, 0.5],
            scene: SceneConfig::default(),
            quality_plugin: None,
            motion_plugin: None,
            fallback_to_builtin: false,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.quality_threshold >= 0.0 && self.motion_threshold >= 0.0) {
            return bad("thresholds must be finite and >= 0".into());
        }
        let [wq, wm] = self.weights;
        if !(wq >= 0.0 && wm >= 0.0) || (wq + wm - 1.0).abs() > 1e-9 {
            return bad(format!("weights must be >= 0 and sum to 1, got [{wq}, {wm}]"));
        }
        if self.scene.clip_len == 0 {
            return bad("scene.clip_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.scene.transition_fraction) {
            return bad("scene.transition_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    fn quality_scorer(&self) -> Box<dyn QualityScorer> {
        match &self.quality_plugin {
            Some(p) => Box::new(p.clone()),
            None => Box::new(GradientSharpness),
        }
    }

    fn motion_scorer(&self) -> Box<dyn MotionScorer> {
        match &self.motion_plugin {
            Some(p) => Box::new(p.clone()),
            None => Box::new(BlockMatchMotion::default()),
        }
    }
}

fn mean_score(values: &[f64], plugin: &str) -> Result<f64> {
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Plugin {
            plugin: plugin.to_string(),
            message: format!("score {v} is not finite and non-negative"),
        });
    }
    Ok(if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    })
}

/// Fills the quality and motion means of `c` from its frames.
pub fn score_clip(
    c: &CandidateClip,
    frames: &[Frame],
    quality: &dyn QualityScorer,
    motion: &dyn MotionScorer,
) -> Result<CandidateClip> {
    if frames.len() != c.len() {
        return Err(Error::InvalidArgument(format!(
            "{} spans {} frames but {} were given",
            c.clip_id,
            c.len(),
            frames.len()
        )));
    }
    let q = mean_score(&quality.score_frames(frames)?, quality.id())?;
    let m = mean_score(&motion.score_pairs(frames)?, motion.id())?;
    Ok(CandidateClip {
        quality: Some(q),
        motion: Some(m),
        ..c.clone()
    })
}

fn score_with_fallback(c: &CandidateClip, frames: &[Frame], cfg: &CurationConfig) -> Result<CandidateClip> {
    let (q, m) = (cfg.quality_scorer(), cfg.motion_scorer());
    match score_clip(c, frames, q.as_ref(), m.as_ref()) {
        Err(e @ Error::Plugin { .. }) if cfg.fallback_to_builtin => {
            log::warn!("{e}; scoring {} with the built-in proxies", c.clip_id);
            score_clip(c, frames, &GradientSharpness, &BlockMatchMotion::default())
        }
        r => r,
    }
}

/// Drops candidates under either threshold, then keeps, per video, the one
/// maximizing `w_q * q' + w_m * m'` where `'` is min-max normalization over
/// the survivors. Ties keep the earlier candidate. Output is ordered by clip id.
pub fn select_clips(cands: &[CandidateClip], cfg: &CurationConfig) -> Vec<CandidateClip> {
    let survivors: Vec<(&CandidateClip, f64, f64)> = cands
        .iter()
        .filter_map(|c| c.scores().map(|(q, m)| (c, q, m)))
        .filter(|(_, q, m)| *q >= cfg.quality_threshold && *m >= cfg.motion_threshold)
        .collect();
    let range = |f: fn(&(&CandidateClip, f64, f64)) -> f64| {
        survivors
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let norm = |v: f64, (lo, hi): (f64, f64)| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let (qr, mr) = (range(|s| s.1), range(|s| s.2));
    let [wq, wm] = cfg.weights;

    let mut best: BTreeMap<&str, (f64, &CandidateClip)> = BTreeMap::new();
    for (c, q, m) in &survivors {
        let s = wq * norm(*q, qr) + wm * norm(*m, mr);
        match best.get(c.video_id.as_str()) {
            Some((b, _)) if *b >= s => {}
            _ => {
                best.insert(&c.video_id, (s, c));
            }
        }
    }
    let mut out: Vec<CandidateClip> = best.into_values().map(|(_, c)| c.clone()).collect();
    out.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    out
}

/// A source video handed to [`curate_videos`].
#[derive(Debug, Clone)]
pub struct SourceVideo {
    pub video_id: String,
    pub path: PathBuf,
    pub clip: Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    #[serde(flatten)]
    pub clip: CandidateClip,
    /// Clip directory relative to the manifest.
    pub dir: String,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub quality_scorer: String,
    pub motion_scorer: String,
    pub candidates_scored: usize,
    pub clips: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Full pipeline: split, score, select, then write each kept clip under
/// `out_dir/<clip_id>/` with a `dataset.json` listing them.
pub fn curate_videos(videos: &[SourceVideo], cfg: &CurationConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut scored = Vec::new();
    for v in videos {
        for cand in split_scenes(&v.clip, &v.video_id, &cfg.scene) {
            let frames = &v.clip.frames()[cand.start..cand.end];
            scored.push(score_with_fallback(&cand, frames, cfg)?);
        }
    }
    let selected = select_clips(&scored, cfg);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut entries = Vec::with_capacity(selected.len());
    for c in selected {
        let v = videos
            .iter()
            .find(|v| v.video_id == c.video_id)
            .expect("selected clip comes from an input video");
        let clip = v.clip.slice(c.start, c.end)?;
        let clip = Clip::new(c.clip_id.clone(), clip.fps, clip.into_frames())?;
        write_clip(&clip, out_dir.join(&c.clip_id))?;
        entries.push(DatasetEntry {
            dir: c.clip_id.clone(),
            source_path: v.path.display().to_string(),
            clip: c,
        });
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA,
        quality_scorer: cfg.quality_scorer().id().to_string(),
        motion_scorer: cfg.motion_scorer().id().to_string(),
        candidates_scored: scored.len(),
        clips: entries,
    };
    let path = out_dir.join(DATASET_MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(video: &str, start: usize, q: f64, m: f64) -> CandidateClip {
        CandidateClip {
            clip_id: format!("{video}_{start:06}"),
            video_id: video.into(),
            start,
            end: start + 100,
            quality: Some(q),
            motion: Some(m),
            resolution: [64, 64],
            transition: false,
        }
    }

    fn loose() -> CurationConfig {
        CurationConfig {
            motion_threshold: 0.0,
            ..CurationConfig::default()
        }
    }

    #[test]
    fn single_candidate_is_kept() {
        let c = cand("a", 0, 40.0, 3.0);
        assert_eq!(select_clips(&[c.clone()], &CurationConfig::default()), vec![c]);
        assert!(select_clips(&[], &CurationConfig::default()).is_empty());
    }

    #[test]
    fn motion_breaks_equal_quality() {
        let cfg = CurationConfig {
            weights: [0.9, 0.1],
            ..loose()
        };
        let picked = select_clips(&[cand("a", 0, 50.0, 1.0), cand("a", 100, 50.0, 5.0)], &cfg);
        assert_eq!(picked.len(), 1);
        assert_eq!(picked[0].start, 100);
    }

    #[test]
    fn thresholds_and_unscored_are_dropped() {
        let mut unscored = cand("c", 0, 0.0, 0.0);
        unscored.quality = None;
        let cfg = CurationConfig {
            quality_threshold: 30.0,
            motion_threshold: 1.0,
            ..CurationConfig::default()
        };
        let picked = select_clips(&[cand("a", 0, 20.0, 5.0), cand("b", 0, 60.0, 0.2), unscored], &cfg);
        assert!(picked.is_empty());
    }

    #[test]
    fn ties_keep_the_first() {
        let picked = select_clips(&[cand("a", 200, 10.0, 1.0), cand("a", 0, 10.0, 1.0)], &loose());
        assert_eq!(picked[0].start, 200);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let cfg = CurationConfig {
            weights: [0.7, 0.7],
            ..CurationConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(CurationConfig::default().validate().is_ok());
    }

    fn translating_video(n: usize) -> Clip {
        let frames = (0..n)
            .map(|t| Frame::from_fn(48, 48, |c, y, x| (((x + t) / 4 + y / 4 + c) % 2) as f32 * 0.7 + 0.1))
            .collect();
        Clip::new("src", 24.0, frames).unwrap()
    }

    #[test]
    fn plugin_failure_names_plugin_unless_fallback() {
        let video = translating_video(100);
        let cand = split_scenes(&video, "v", &SceneConfig::default()).remove(0);
        let broken = CommandScorer {
            id: "hyper".into(),
            program: "/nonexistent/scorer".into(),
            args: vec![],
        };
        let mut cfg = CurationConfig {
            quality_plugin: Some(broken),
            ..CurationConfig::default()
        };
        let err = score_with_fallback(&cand, video.frames(), &cfg).unwrap_err();
        assert!(err.to_string().contains("hyper"), "{err}");

        cfg.fallback_to_builtin = true;
        let scored = score_with_fallback(&cand, video.frames(), &cfg).unwrap();
        assert!(scored.quality.unwrap() > 0.0);
        assert!((scored.motion.unwrap() - 1.0).abs() <= 0.5);
    }

    #[test]
    fn curate_writes_one_clip_per_video() {
        let dir = tempfile::tempdir().unwrap();
        let mut still = translating_video(1);
        still = Clip::new("still", 24.0, vec![still.frames()[0].clone(); 120]).unwrap();
        let videos = vec![
            SourceVideo {
                video_id: "moving".into(),
                path: "moving".into(),
                clip: translating_video(130),
            },
            SourceVideo {
                video_id: "still".into(),
                path: "still".into(),
                clip: still,
            },
        ];
        let m = curate_videos(&videos, &CurationConfig::default(), dir.path()).unwrap();
        assert_eq!(m.candidates_scored, 2);
        assert_eq!(m.clips.len(), 1, "the static video falls under the motion threshold");
        assert_eq!(m.clips[0].clip.clip_id, "moving_000015");
        let back = DatasetManifest::load(&dir.path().join(DATASET_MANIFEST)).unwrap();
        assert_eq!(back, m);
        let clip = crate::media::read_clip(dir.path().join(&m.clips[0].dir)).unwrap();
        assert_eq!(clip.len(), 100);
    }

    fn cand_set() -> impl Strategy<Value = Vec<CandidateClip>> {
        prop::collection::vec((0usize..5, 0u32..100, 0u32..20), 0..30).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (vid, q, m))| cand(&format!("v{vid}"), i * 100, q as f64, m as f64 / 2.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn at_most_one_clip_per_video(cands in cand_set(), wq in 0.0f64..=1.0) {
            let cfg = CurationConfig { weights: [wq, 1.0 - wq], ..loose() };
            let picked = select_clips(&cands, &cfg);
            let mut videos: Vec<&str> = picked.iter().map(|c| c.video_id.as_str()).collect();
            let n = videos.len();
            videos.dedup();
            prop_assert_eq!(videos.len(), n);
            let distinct: std::collections::BTreeSet<&str> = cands.iter().map(|c| c.video_id.as_str()).collect();
            prop_assert_eq!(n, distinct.len());
        }

        #[test]
        fn rescaling_a_column_keeps_the_selection(
            cands in cand_set(),
            scale in prop::sample::select(vec![0.25f64, 0.5, 2.0, 8.0]),
            shift in 0u32..50,
            motion_column in any::<bool>(),
        ) {
            let cfg = loose();
            let moved: Vec<CandidateClip> = cands
                .iter()
                .map(|c| {
                    let mut c = c.clone();
                    let col = if motion_column { &mut c.motion } else { &mut c.quality };
                    *col = col.map(|v| v * scale + shift as f64);
                    c
                })
                .collect();
            let ids = |v: Vec<CandidateClip>| v.into_iter().map(|c| c.clip_id).collect::<Vec<_>>();
            prop_assert_eq!(ids(select_clips(&cands, &cfg)), ids(select_clips(&moved, &cfg)));
        }
    }
}
