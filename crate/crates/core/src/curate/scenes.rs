use serde::{Deserialize, Serialize};

use super::CandidateClip;
use crate::media::{luma, Clip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Frames per finalized clip.
    pub clip_len: usize,
    /// Cut threshold is `median + k * MAD` of the frame differences.
    pub mad_k: f64,
    /// Lower bound on the cut threshold (mean absolute luma change).
    pub min_threshold: f64,
    /// Share of cut-straddling windows kept as transition clips.
    pub transition_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            clip_len: 100,
            mad_k: 6.0,
            min_threshold: 0.05,
            transition_fraction: 0.05,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean absolute luma difference between each frame and its predecessor;
/// entry `i` belongs to the boundary before frame `i + 1`.
pub fn frame_differences(c: &Clip) -> Vec<f64> {
    let ys: Vec<Vec<f32>> = c.frames().iter().map(luma).collect();
    ys.windows(2)
        .map(|p| {
            let s: f64 = p[0].iter().zip(&p[1]).map(|(a, b)| (a - b).abs() as f64).sum();
            s / p[0].len() as f64
        })
        .collect()
}

/// Frame indices at which a new scene starts.
pub fn detect_cuts(c: &Clip, cfg: &SceneConfig) -> Vec<usize> {
    let d = frame_differences(c);
    let med = median(&mut d.clone());
    let mut dev: Vec<f64> = d.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&mut dev);
    let threshold = (med + cfg.mad_k * mad).max(cfg.min_threshold);
    d.iter()
        .enumerate()
        .filter(|(_, v)| **v > threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Splits a video into candidate clips: one centred `clip_len` window per
/// scene long enough to hold it, plus a fraction of windows that straddle a
/// cut. Ranges are disjoint and ordered; short videos yield nothing.
pub fn split_scenes(c: &Clip, video_id: &str, cfg: &SceneConfig) -> Vec<CandidateClip> {
    let n = c.len();
    let len = cfg.clip_len;
    if len == 0 || n < len {
        return Vec::new();
    }
    let cuts = detect_cuts(c, cfg);
    let mut bounds = vec![0];
    bounds.extend(&cuts);
    bounds.push(n);

    let mut ranges: Vec<(usize, usize, bool)> = Vec::new();
    for s in bounds.windows(2) {
        let (a, b) = (s[0], s[1]);
        if b - a >= len {
            let start = a + (b - a - len) / 2;
            ranges.push((start, start + len, false));
        }
    }
    let keep = (cuts.len() as f64 * cfg.transition_fraction).floor() as usize;
    let mut kept = 0;
    for &cut in &cuts {
        if kept >= keep {
            break;
        }
        let start = cut.saturating_sub(len / 2).min(n - len);
        let r = (start, start + len);
        if ranges.iter().all(|&(a, b, _)| r.1 <= a || r.0 >= b) {
            ranges.push((r.0, r.1, true));
            kept += 1;
        }
    }
    ranges.sort();
    let (h, w) = c.dims();
    ranges
        .into_iter()
        .map(|(a, b, transition)| CandidateClip {
            clip_id: format!("{video_id}_{a:06}"),
            video_id: video_id.to_string(),
            start: a,
            end: b,
            quality: None,
            motion: None,
            resolution: [h, w],
            transition,
        })
        .collect()
}
