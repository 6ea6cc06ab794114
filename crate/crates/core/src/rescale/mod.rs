//! Input rescaling for real low-quality video: super-resolve a downscaled copy
//! at several factors, let a reviewer pick the least artifacted one, and export
//! the chosen outputs as pseudo-HR training pairs for the learnable operators.

mod api;
mod store;

pub use api::{router, serve, ApiState, REVIEWER_HEADER, SCHEMA_VERSION};
pub use store::{SelectionRecord, SelectionStatus, SelectionStore, INDEX_FILE, JOURNAL_FILE};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbo::{PairDataset, TrainPair};
use crate::media::{
    load_frame, luma, resize_frame, resize_to, save_frame_png, sobel_magnitude, Clip, Frame, ResizeMethod,
};
use crate::vsr::{forward_sequence, stream_sequence, Generator};

pub const CANDIDATES_FILE: &str = "candidates.json";
pub const EXPORT_FILE: &str = "export.json";

/// Mean Sobel magnitude of luma. Ringing and blocking raise it; it only
/// orders candidates for the reviewer.
pub fn artifact_statistic(f: &Frame) -> f64 {
    let (h, w) = f.dims();
    let g = sobel_magnitude(&luma(f), h, w);
    g.iter().map(|v| *v as f64).sum::<f64>() / g.len() as f64
}

/// The factor grid `{1.0, 0.9, ..., 0.1}`.
pub fn default_factors() -> Vec<f64> {
    (1..=10).rev().map(|k| k as f64 / 10.0).collect()
}

/// Two-digit tag of a grid factor, `0.5 -> "05"`.
pub fn factor_tag(f: f64) -> String {
    format!("{:02}", (f * 10.0).round() as u32)
}

fn check_factors(factors: &[f64]) -> Result<()> {
    if factors.is_empty() {
        return Err(Error::InvalidArgument("no rescaling factors given".into()));
    }
    for (i, f) in factors.iter().enumerate() {
        let on_grid = ((f * 10.0).round() - f * 10.0).abs() < 1e-9;
        if !(*f > 0.0 && *f <= 1.0 && on_grid) {
            return Err(Error::InvalidArgument(format!("factor {f} is not on the 0.1 grid in (0, 1]")));
        }
        if factors[..i].iter().any(|g| (g - f).abs() < 1e-9) {
            return Err(Error::InvalidArgument(format!("factor {f} listed twice")));
        }
    }
    Ok(())
}

fn check_video_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::InvalidArgument(format!(
            "video id `{id}` must be non-empty ASCII letters, digits, `_` or `-`"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

/// Picks up to `k` square windows with the most Sobel energy, greedily
/// suppressing any that overlap an accepted window by more than a quarter.
pub fn pick_edge_patches(f: &Frame, size: usize, k: usize) -> Vec<PatchWindow> {
    let (h, w) = f.dims();
    let s = size.min(h).min(w);
    if s == 0 || k == 0 {
        return Vec::new();
    }
    let g = sobel_magnitude(&luma(f), h, w);
    // summed-area table with a zero border
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += g[y * w + x] as f64;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let energy = |y: usize, x: usize| {
        let at = |yy: usize, xx: usize| sat[yy * (w + 1) + xx];
        at(y + s, x + s) - at(y, x + s) - at(y + s, x) + at(y, x)
    };
    let stride = (s / 8).max(1);
    let positions = |n: usize| {
        let mut v: Vec<usize> = (0..=n - s).step_by(stride).collect();
        if *v.last().expect("at least one position") != n - s {
            v.push(n - s);
        }
        v
    };
    let mut windows: Vec<(f64, usize, usize)> = positions(h)
        .into_iter()
        .flat_map(|y| positions(w).into_iter().map(move |x| (y, x)))
        .map(|(y, x)| (energy(y, x), y, x))
        .collect();
    windows.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let floor = 1e-3 * (s * s) as f64;
    let mut picked: Vec<PatchWindow> = Vec::new();
    for (e, y, x) in windows {
        if picked.len() == k || e <= floor {
            break;
        }
        let overlaps = picked.iter().any(|p| {
            let oy = (p.y + s).min(y + s).saturating_sub(p.y.max(y));
            let ox = (p.x + s).min(x + s).saturating_sub(p.x.max(x));
            4 * oy * ox > s * s
        });
        if !overlaps {
            picked.push(PatchWindow { y, x, size: s });
        }
    }
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescaleConfig {
    pub factors: Vec<f64>,
    /// Patch side in LQ pixels.
    pub patch_size: usize,
    pub patches_per_video: usize,
    /// Fixed LQ patch origins `[y, x]`, bypassing the edge picker.
    pub manual_patches: Vec<[usize; 2]>,
    /// Frame the patches are cut from; defaults to the middle frame.
    pub reference_frame: Option<usize>,
}

impl Default for RescaleConfig {
    fn default() -> Self {
        Self {
            factors: default_factors(),
            patch_size: 128,
            patches_per_video: 6,
            manual_patches: Vec::new(),
            reference_frame: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePatch {
    pub patch_id: String,
    pub window: PatchWindow,
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleCandidate {
    pub video_id: String,
    pub factor: f64,
    /// Raw network output size, `4 * round(factor * [h, w])`.
    pub sr_dims: [usize; 2],
    pub patches: Vec<CandidatePatch>,
    /// Mean of the patch statistics.
    pub statistic: f64,
    /// 1 for the lowest statistic.
    pub rank: usize,
}

/// Everything generated for one video, persisted as `candidates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCandidates {
    pub video_id: String,
    /// Clip manifest of the LQ source, needed again at export time.
    pub source: Option<PathBuf>,
    pub lq_dims: [usize; 2],
    pub frames: usize,
    pub reference_frame: usize,
    /// LQ patches upscaled to the pseudo-HR grid, for side-by-side display.
    pub reference: Vec<CandidatePatch>,
    pub candidates: Vec<RescaleCandidate>,
}

impl VideoCandidates {
    pub fn factors(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.factor).collect()
    }

    /// Factors in default review order.
    pub fn ranking(&self) -> Vec<f64> {
        let mut c: Vec<&RescaleCandidate> = self.candidates.iter().collect();
        c.sort_by_key(|c| c.rank);
        c.into_iter().map(|c| c.factor).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs the model on `lq` downscaled by `factor` and brings the result onto
/// the `2h x 2w` pseudo-HR grid.
fn rescaled_sr(lq: &Clip, gen: &Generator, factor: f64) -> Result<(Clip, [usize; 2])> {
    let small = shrink(lq, factor)?;
    let sr = forward_sequence(&small, gen)?;
    let (sh, sw) = sr.dims();
    Ok((to_pseudo_hr(&sr, lq.dims())?, [sh, sw]))
}

fn shrink(lq: &Clip, factor: f64) -> Result<Clip> {
    if factor == 1.0 {
        return Ok(lq.clone());
    }
    lq.try_map(|_, f| resize_frame(f, factor, ResizeMethod::Area))
}

fn to_pseudo_hr(sr: &Clip, (h, w): (usize, usize)) -> Result<Clip> {
    if sr.dims() == (2 * h, 2 * w) {
        return Ok(sr.clone());
    }
    sr.try_map(|_, f| resize_to(f, 2 * h, 2 * w, ResizeMethod::Bicubic))
}

/// Layout of a rescale review workspace:
/// `videos/<id>/candidates.json`, `patches/<patch_id>.png`, `selections/`.
#[derive(Debug, Clone)]
pub struct RescaleWorkspace {
    root: PathBuf,
}

impl RescaleWorkspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn candidates_path(&self, video_id: &str) -> PathBuf {
        self.root.join("videos").join(video_id).join(CANDIDATES_FILE)
    }

    pub fn patch_path(&self, patch_id: &str) -> PathBuf {
        self.root.join("patches").join(format!("{patch_id}.png"))
    }

    pub fn selections_dir(&self) -> PathBuf {
        self.root.join("selections")
    }

    pub fn exports_dir(&self, video_id: &str) -> PathBuf {
        self.root.join("exports").join(video_id)
    }

    /// Video ids with a candidates file, sorted.
    pub fn video_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("videos");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::new();
        for e in std::fs::read_dir(&dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))? {
            let e = e.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
            let id = e.file_name().to_string_lossy().into_owned();
            if self.candidates_path(&id).is_file() {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_candidates(&self, video_id: &str) -> Result<VideoCandidates> {
        check_video_id(video_id)?;
        let p = self.candidates_path(video_id);
        if !p.is_file() {
            return Err(Error::NotFound(format!("video `{video_id}`")));
        }
        VideoCandidates::load(&p)
    }
}

/// Super-resolves `lq` at every configured factor and writes patch crops and
/// `candidates.json` into the workspace.
pub fn generate_candidates(
    lq: &Clip,
    video_id: &str,
    source: Option<&Path>,
    gen: &Generator,
    cfg: &RescaleConfig,
    ws: &RescaleWorkspace,
) -> Result<VideoCandidates> {
    check_video_id(video_id)?;
    check_factors(&cfg.factors)?;
    if gen.meta.stage < 1 {
        return Err(Error::InvalidArgument(
            "candidate generation needs a trained model (checkpoint stage >= 1)".into(),
        ));
    }
    let (h, w) = lq.dims();
    let t = cfg.reference_frame.unwrap_or(lq.len() / 2);
    if t >= lq.len() {
        return Err(Error::InvalidArgument(format!("reference frame {t} is past the clip end")));
    }
    let windows = if cfg.manual_patches.is_empty() {
        let w = pick_edge_patches(&lq.frames()[t], cfg.patch_size, cfg.patches_per_video);
        if w.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "video `{video_id}` has no textured region to compare; set manual_patches to [y, x] origins"
            )));
        }
        w
    } else {
        let s = cfg.patch_size.min(h).min(w);
        cfg.manual_patches
            .iter()
            .map(|&[y, x]| {
                if y + s > h || x + s > w {
                    Err(Error::InvalidArgument(format!("manual patch at [{y}, {x}] leaves the {h}x{w} frame")))
                } else {
                    Ok(PatchWindow { y, x, size: s })
                }
            })
            .collect::<Result<_>>()?
    };
    let patch_dir = ws.root.join("patches");
    std::fs::create_dir_all(&patch_dir).map_err(|e| Error::io(format!("creating {}", patch_dir.display()), e))?;

    let crop_all = |frame: &Frame, tag: &str| -> Result<Vec<CandidatePatch>> {
        windows
            .iter()
            .enumerate()
            .map(|(i, win)| {
                let crop = frame.crop(2 * win.y, 2 * win.x, 2 * win.size, 2 * win.size)?;
                let patch_id = format!("{video_id}-{tag}-{i}");
                save_frame_png(&crop, &ws.patch_path(&patch_id))?;
                Ok(CandidatePatch {
                    patch_id,
                    window: *win,
                    statistic: artifact_statistic(&crop),
                })
            })
            .collect()
    };

    let reference_hr = resize_to(&lq.frames()[t], 2 * h, 2 * w, ResizeMethod::Bicubic)?;
    let reference = crop_all(&reference_hr, "ref")?;
    let mut candidates = Vec::with_capacity(cfg.factors.len());
    for &factor in &cfg.factors {
        log::info!("{video_id}: super-resolving at x{factor}");
        let (hr, sr_dims) = rescaled_sr(lq, gen, factor)?;
        let patches = crop_all(&hr.frames()[t], &format!("x{}", factor_tag(factor)))?;
        let statistic = patches.iter().map(|p| p.statistic).sum::<f64>() / patches.len() as f64;
        candidates.push(RescaleCandidate {
            video_id: video_id.to_string(),
            factor,
            sr_dims,
            patches,
            statistic,
            rank: 0,
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&candidates[a], &candidates[b]);
        ca.statistic.total_cmp(&cb.statistic).then(cb.factor.total_cmp(&ca.factor))
    });
    for (r, i) in order.into_iter().enumerate() {
        candidates[i].rank = r + 1;
    }
    let vc = VideoCandidates {
        video_id: video_id.to_string(),
        source: source.map(Path::to_path_buf),
        lq_dims: [h, w],
        frames: lq.len(),
        reference_frame: t,
        reference,
        candidates,
    };
    let path = ws.candidates_path(video_id);
    std::fs::create_dir_all(path.parent().expect("candidates file has a parent"))
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    std::fs::write(&path, serde_json::to_vec_pretty(&vc)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(vc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    pub target_pairs: usize,
    /// With fewer source frames than the target, cycle through them again
    /// instead of stopping at what is available.
    pub repeat_to_target: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            target_pairs: 2000,
            repeat_to_target: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPair {
    pub frame_index: usize,
    /// Paths relative to the manifest directory.
    pub lr: String,
    pub hr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub schema_version: u32,
    pub video_id: String,
    pub factor: f64,
    pub selection_id: String,
    pub target_pairs: usize,
    pub lr_dims: [usize; 2],
    pub hr_dims: [usize; 2],
    pub pairs: Vec<ExportPair>,
}

impl ExportManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Frame indices to export: every frame when the clip is short, otherwise an
/// even spread over the whole clip so each scene contributes.
fn export_indices(n: usize, cfg: &ExportConfig) -> Vec<usize> {
    let target = cfg.target_pairs;
    if target >= n {
        if cfg.repeat_to_target {
            (0..target).map(|i| i % n).collect()
        } else {
            (0..n).collect()
        }
    } else {
        (0..target).map(|i| (i * n + n / 2) / target).collect()
    }
}

/// Writes `lr/` (original frames), `hr/` (pseudo-HR at exactly `2h x 2w`)
/// and `export.json` under `out_dir` for an approved selection.
pub fn export_pairs(
    rec: &SelectionRecord,
    lq: &Clip,
    gen: &Generator,
    cfg: &ExportConfig,
    out_dir: &Path,
) -> Result<ExportManifest> {
    if rec.status != SelectionStatus::Approved {
        return Err(Error::InvalidArgument(format!(
            "selection for `{}` is {:?}, export needs an approved record",
            rec.video_id, rec.status
        )));
    }
    check_factors(&[rec.factor])?;
    if lq.is_empty() || cfg.target_pairs == 0 {
        return Err(Error::InvalidArgument("nothing to export".into()));
    }
    let (h, w) = lq.dims();
    let indices = export_indices(lq.len(), cfg);
    let mut wanted = vec![false; lq.len()];
    for &i in &indices {
        wanted[i] = true;
    }
    for sub in ["lr", "hr"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let name = |i: usize| format!("frame_{i:06}.png");
    // stream so only the frames being written are held in memory
    let small = shrink(lq, rec.factor)?;
    stream_sequence(gen, small.frames().iter().cloned().map(Ok), |i, sr| {
        if !wanted[i] {
            return Ok(());
        }
        let hr = if sr.dims() == (2 * h, 2 * w) {
            sr
        } else {
            resize_to(&sr, 2 * h, 2 * w, ResizeMethod::Bicubic)?
        };
        save_frame_png(&lq.frames()[i], &out_dir.join("lr").join(name(i)))?;
        save_frame_png(&hr, &out_dir.join("hr").join(name(i)))
    })?;
    let manifest = ExportManifest {
        schema_version: api::SCHEMA_VERSION,
        video_id: rec.video_id.clone(),
        factor: rec.factor,
        selection_id: rec.id(),
        target_pairs: cfg.target_pairs,
        lr_dims: [h, w],
        hr_dims: [2 * h, 2 * w],
        pairs: indices
            .into_iter()
            .map(|i| ExportPair {
                frame_index: i,
                lr: format!("lr/{}", name(i)),
                hr: format!("hr/{}", name(i)),
            })
            .collect(),
    };
    let path = out_dir.join(EXPORT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Loads an exported pair set for operator training.
pub fn load_pair_dataset(manifest: &Path) -> Result<PairDataset> {
    let m = ExportManifest::load(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let pairs = m
        .pairs
        .iter()
        .map(|p| {
            Ok(TrainPair {
                lr: load_frame(&dir.join(&p.lr))?,
                hr: load_frame(&dir.join(&p.hr))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PairDataset::new(m.video_id, m.factor, pairs)
}
