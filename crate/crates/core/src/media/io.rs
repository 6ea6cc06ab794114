use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::{Clip, Frame};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    /// `[height, width]` of the frames.
    #[serde(default)]
    pub resolution: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_url: Option<String>,
}

/// Sidecar describing one clip directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: String,
    pub fps: f64,
    pub frames: Vec<String>,
    #[serde(default)]
    pub source: SourceInfo,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl ClipManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn decode_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    let n = h * w;
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let rgb = img.to_rgb16();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = p[c] as f32 / 65535.0;
                }
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = p[c] as f32 / 255.0;
                }
            }
        }
    }
    Frame::new(h, w, data)
}

/// Quantizes a frame to 8-bit interleaved RGB.
pub fn frame_to_rgb8(f: &Frame) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (h, w) = f.dims();
    let n = h * w;
    let d = f.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| (d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn save_frame_png(f: &Frame, path: &Path) -> Result<()> {
    frame_to_rgb8(f).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    decode_frame(path)
}

/// Loads a clip from a manifest file (or a directory containing `manifest.json`).
pub fn read_clip(manifest: impl AsRef<Path>) -> Result<Clip> {
    let mpath = manifest_path(manifest.as_ref());
    let m = ClipManifest::load(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    if m.frames.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no frames", mpath.display())));
    }
    let mut frames = Vec::with_capacity(m.frames.len());
    for name in &m.frames {
        let p = dir.join(name);
        if !p.is_file() {
            return Err(Error::io(
                format!("frame `{name}` listed in {}", mpath.display()),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing frame file"),
            ));
        }
        let f = decode_frame(&p)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if first.dims() != f.dims() {
                return Err(Error::InvalidShape(format!(
                    "frame `{name}` is {}x{}, expected {}x{}",
                    f.height(),
                    f.width(),
                    first.height(),
                    first.width()
                )));
            }
        }
        frames.push(f);
    }
    Clip::new(m.clip_id, m.fps, frames)
}

/// Writes `frame_%06d.png` files and `manifest.json` into `dir`.
pub fn write_clip(c: &Clip, dir: impl AsRef<Path>) -> Result<ClipManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut names = Vec::with_capacity(c.len());
    for (i, f) in c.frames().iter().enumerate() {
        let name = frame_file_name(i);
        save_frame_png(f, &dir.join(&name))?;
        names.push(name);
    }
    let (h, w) = c.dims();
    let m = ClipManifest {
        clip_id: c.clip_id.clone(),
        fps: c.fps,
        frames: names,
        source: SourceInfo {
            resolution: Some([h, w]),
            origin_url: None,
        },
        tags: Vec::new(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_clip(n: usize, h: usize, w: usize, seed: u64) -> Clip {
        let mut s = seed;
        let frames = (0..n)
            .map(|_| {
                Frame::from_fn(h, w, |_, _, _| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (s >> 40) as f32 / (1u64 << 24) as f32
                })
            })
            .collect();
        Clip::new("rand", 24.0, frames).unwrap()
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_clip(3, 12, 9, 7);
        let m = write_clip(&c, dir.path()).unwrap();
        assert_eq!(m.frames.len(), 3);
        let back = read_clip(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in c.frames().iter().zip(back.frames()) {
            assert!(a.max_abs_diff(b) <= 1.0 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn solid_black_clip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Clip::new("black", 30.0, vec![Frame::filled(8, 8, 0.0); 3]).unwrap();
        write_clip(&c, dir.path()).unwrap();
        let back = read_clip(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.frames().iter().all(|f| f.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn hundred_frames_sort_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let c = Clip::new("long", 24.0, vec![Frame::filled(8, 8, 0.2); 100]).unwrap();
        let m = write_clip(&c, dir.path()).unwrap();
        assert_eq!(m.frames.len(), 100);
        let mut sorted = m.frames.clone();
        sorted.sort();
        assert_eq!(sorted, m.frames);
        let on_disk = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
            .count();
        assert_eq!(on_disk, 100);
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let c = random_clip(2, 8, 8, 1);
        write_clip(&c, dir.path()).unwrap();
        fs::remove_file(dir.path().join("frame_000001.png")).unwrap();
        let err = read_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame_000001.png"), "{err}");
    }

    #[test]
    fn sixteen_bit_frames_scale_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(8, 8, |x, _| Rgb([65535, x as u16 * 1000, 0]));
        img.save(dir.path().join("a.png")).unwrap();
        let m = ClipManifest {
            clip_id: "deep".into(),
            fps: 25.0,
            frames: vec!["a.png".into()],
            source: SourceInfo::default(),
            tags: vec![],
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let c = read_clip(dir.path()).unwrap();
        let f = &c.frames()[0];
        assert_eq!(f.get(0, 0, 0), 1.0);
        assert!((f.get(1, 0, 3) - 3000.0 / 65535.0).abs() < 1e-7);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_frame_png(&Frame::filled(8, 8, 0.0), &dir.path().join("a.png")).unwrap();
        save_frame_png(&Frame::filled(8, 10, 0.0), &dir.path().join("b.png")).unwrap();
        let m = ClipManifest {
            clip_id: "x".into(),
            fps: 25.0,
            frames: vec!["a.png".into(), "b.png".into()],
            source: SourceInfo::default(),
            tags: vec![],
        };
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = read_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("b.png"), "{err}");
    }
}
