//! Video compression stage: a real H.264 round trip through an external
//! encoder, or a deterministic block-transform surrogate for offline runs.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{Clip, FeatureMap, Frame};

/// Environment variable naming the encoder binary.
pub const ENCODER_ENV: &str = "CELSR_FFMPEG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum H264Profile {
    Baseline,
    Main,
    High,
}

impl H264Profile {
    pub const ALL: [H264Profile; 3] = [H264Profile::Baseline, H264Profile::Main, H264Profile::High];

    pub fn name(self) -> &'static str {
        match self {
            H264Profile::Baseline => "baseline",
            H264Profile::Main => "main",
            H264Profile::High => "high",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum CodecBackend {
    /// External encoder at `binary` (falls back to `$CELSR_FFMPEG`, then `ffmpeg` on `PATH`).
    Ffmpeg {
        #[serde(default)]
        binary: Option<PathBuf>,
    },
    /// 8x8 DCT quantization; `step` scales the quantization table, 0 disables it.
    Mock {
        #[serde(default = "default_mock_step")]
        step: f64,
    },
}

fn default_mock_step() -> f64 {
    1.0
}

impl Default for CodecBackend {
    fn default() -> Self {
        CodecBackend::Mock { step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub clip: Clip,
    /// Set when the surrogate produced the result rather than a real encoder.
    pub mock: bool,
}

/// Encodes and decodes `c` at the given CRF and profile.
pub fn compress_clip(c: &Clip, crf: u8, profile: H264Profile, backend: &CodecBackend) -> Result<Compressed> {
    match backend {
        CodecBackend::Mock { step } => Ok(Compressed {
            clip: mock_compress(c, crf, *step)?,
            mock: true,
        }),
        CodecBackend::Ffmpeg { binary } => {
            let bin = resolve_encoder(binary.as_ref())?;
            Ok(Compressed {
                clip: ffmpeg_round_trip(c, crf, profile, &bin)?,
                mock: false,
            })
        }
    }
}

/// Locates the encoder binary, or reports an environment error.
pub fn resolve_encoder(explicit: Option<&PathBuf>) -> Result<PathBuf> {
    let candidate = explicit
        .cloned()
        .or_else(|| std::env::var_os(ENCODER_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("ffmpeg"));
    let found = if candidate.components().count() > 1 {
        candidate.is_file().then_some(candidate.clone())
    } else {
        std::env::var_os("PATH").and_then(|paths| {
            std::env::split_paths(&paths)
                .map(|d| d.join(&candidate))
                .find(|p| p.is_file())
        })
    };
    found.ok_or_else(|| {
        Error::Environment(format!(
            "H.264 encoder `{}` not found; install ffmpeg, set {ENCODER_ENV}, or use the mock codec",
            candidate.display()
        ))
    })
}

fn to_rgb24(f: &Frame) -> Vec<u8> {
    let (h, w) = f.dims();
    let n = h * w;
    let d = f.data();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push((d[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn run_tool(mut cmd: Command, input: Vec<u8>, tool: &str) -> Result<Vec<u8>> {
    let mut child = cmd
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Environment(format!("spawning {tool}: {e}")))?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        let r = stdin.write_all(&input);
        drop(stdin);
        r
    });
    let mut stdout = Vec::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_end(&mut stdout)
        .map_err(|e| Error::io(format!("reading {tool} output"), e))?;
    let mut stderr = String::new();
    if let Some(mut s) = child.stderr.take() {
        let _ = s.read_to_string(&mut stderr);
    }
    let status = child.wait().map_err(|e| Error::io(format!("waiting for {tool}"), e))?;
    let _ = writer.join();
    if !status.success() {
        return Err(Error::External {
            tool: tool.to_string(),
            message: format!("{status}: {}", stderr.trim()),
        });
    }
    Ok(stdout)
}

fn ffmpeg_round_trip(c: &Clip, crf: u8, profile: H264Profile, bin: &PathBuf) -> Result<Clip> {
    let (h, w) = c.dims();
    let tmp = tempfile::tempdir().map_err(|e| Error::io("creating codec temp dir", e))?;
    let encoded = tmp.path().join("encoded.mp4");
    let raw: Vec<u8> = c.frames().iter().flat_map(to_rgb24).collect();

    let mut enc = Command::new(bin);
    enc.args(["-y", "-loglevel", "error", "-f", "rawvideo", "-pix_fmt", "rgb24"])
        .args(["-s", &format!("{w}x{h}"), "-r", &format!("{}", c.fps), "-i", "-"])
        .args(["-c:v", "libx264", "-crf", &crf.to_string(), "-profile:v", profile.name()])
        .args(["-pix_fmt", "yuv420p"])
        .arg(&encoded);
    run_tool(enc, raw, "ffmpeg encode")?;

    let mut dec = Command::new(bin);
    dec.args(["-loglevel", "error", "-i"])
        .arg(&encoded)
        .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"]);
    let decoded = run_tool(dec, Vec::new(), "ffmpeg decode")?;

    let frame_bytes = 3 * h * w;
    if decoded.len() < frame_bytes * c.len() {
        return Err(Error::External {
            tool: "ffmpeg decode".into(),
            message: format!("expected {} frames, got {} bytes", c.len(), decoded.len()),
        });
    }
    let n = h * w;
    let frames = decoded
        .chunks_exact(frame_bytes)
        .take(c.len())
        .map(|chunk| {
            let mut data = vec![0.0f32; 3 * n];
            for i in 0..n {
                for ch in 0..3 {
                    data[ch * n + i] = chunk[3 * i + ch] as f32 / 255.0;
                }
            }
            Frame::new(h, w, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Clip::new(c.clip_id.clone(), c.fps, frames)
}

const QTABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113.,
    92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Quantization step multiplier at a CRF: doubles every 6 units, 1 at CRF 18.
pub fn crf_scale(crf: u8) -> f64 {
    2f64.powf((crf as f64 - 18.0) / 6.0)
}

fn mock_plane(plane: &[f32], h: usize, w: usize, steps: Option<&[f64; 64]>, basis: &[[f64; 8]; 8]) -> Vec<f32> {
    let (bh, bw) = (h.div_ceil(8), w.div_ceil(8));
    let mut out = vec![0.0f32; h * w];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in 0..bh {
        for bx in 0..bw {
            for (y, row) in block.iter_mut().enumerate() {
                let sy = (by * 8 + y).min(h - 1);
                for (x, v) in row.iter_mut().enumerate() {
                    let sx = (bx * 8 + x).min(w - 1);
                    *v = plane[sy * w + sx] as f64;
                }
            }
            // forward: C = B X B^T
            for u in 0..8 {
                for x in 0..8 {
                    tmp[u][x] = (0..8).map(|y| basis[u][y] * block[y][x]).sum();
                }
            }
            let mut coef = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    coef[u][v] = (0..8).map(|x| tmp[u][x] * basis[v][x]).sum();
                }
            }
            if let Some(steps) = steps {
                for u in 0..8 {
                    for v in 0..8 {
                        let q = steps[u * 8 + v];
                        coef[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
            }
            // inverse: X = B^T C B
            for y in 0..8 {
                for v in 0..8 {
                    tmp[y][v] = (0..8).map(|u| basis[u][y] * coef[u][v]).sum();
                }
            }
            for y in 0..8 {
                let oy = by * 8 + y;
                if oy >= h {
                    break;
                }
                for x in 0..8 {
                    let ox = bx * 8 + x;
                    if ox >= w {
                        break;
                    }
                    out[oy * w + ox] = (0..8).map(|v| tmp[y][v] * basis[v][x]).sum::<f64>() as f32;
                }
            }
        }
    }
    out
}

/// Block-transform surrogate: 8x8 DCT per channel, coefficients quantized with a
/// JPEG-style table scaled by `step * crf_scale(crf) / 255`.
pub fn mock_compress(c: &Clip, crf: u8, step: f64) -> Result<Clip> {
    if !(step >= 0.0) {
        return Err(Error::InvalidArgument(format!("mock codec step must be >= 0, got {step}")));
    }
    let basis = dct_basis();
    let steps = (step > 0.0).then(|| {
        let s = step * crf_scale(crf) / 255.0;
        QTABLE.map(|q| q * s)
    });
    c.try_map(|_, f| {
        let (h, w) = f.dims();
        let mut m = FeatureMap::zeros(3, h, w);
        for ch in 0..3 {
            let p = mock_plane(f.plane(ch), h, w, steps.as_ref(), &basis);
            m.plane_mut(ch).copy_from_slice(&p);
        }
        Frame::from_map_clamped(m)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn busy_clip(n: usize) -> Clip {
        let frames = (0..n)
            .map(|t| {
                Frame::from_fn(36, 44, |c, y, x| {
                    let v = ((y * 7 + x * 13 + c * 5 + t * 3) % 29) as f32 / 28.0;
                    if (x / 6 + y / 5) % 2 == 0 {
                        v
                    } else {
                        1.0 - v * 0.5
                    }
                })
            })
            .collect();
        Clip::new("busy", 25.0, frames).unwrap()
    }

    #[test]
    fn zero_step_round_trips() {
        let c = busy_clip(2);
        let out = compress_clip(&c, 30, H264Profile::High, &CodecBackend::Mock { step: 0.0 }).unwrap();
        assert!(out.mock);
        for (a, b) in c.frames().iter().zip(out.clip.frames()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn higher_crf_loses_more() {
        let c = busy_clip(2);
        let b = CodecBackend::Mock { step: 1.0 };
        let lo = compress_clip(&c, 18, H264Profile::Main, &b).unwrap().clip;
        let hi = compress_clip(&c, 35, H264Profile::Main, &b).unwrap().clip;
        let e = |x: &Clip| -> f64 { x.frames().iter().zip(c.frames()).map(|(a, b)| a.mean_abs_diff(b)).sum() };
        assert!(e(&hi) > e(&lo), "{} vs {}", e(&hi), e(&lo));
    }

    #[test]
    fn frame_count_preserved() {
        let c = Clip::new("long", 25.0, vec![Frame::filled(16, 16, 0.3); 100]).unwrap();
        let out = compress_clip(&c, 25, H264Profile::Baseline, &CodecBackend::default()).unwrap();
        assert_eq!(out.clip.len(), 100);
        assert_eq!(out.clip.dims(), (16, 16));
    }

    #[test]
    fn missing_encoder_is_environment_error() {
        let c = busy_clip(1);
        let b = CodecBackend::Ffmpeg {
            binary: Some(PathBuf::from("/nonexistent/dir/ffmpeg")),
        };
        assert!(matches!(
            compress_clip(&c, 20, H264Profile::High, &b),
            Err(Error::Environment(_))
        ));
    }

    #[test]
    fn failing_encoder_reports_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let fake = dir.path().join("fake-ffmpeg");
        std::fs::write(&fake, "#!/bin/sh\ncat > /dev/null\necho 'unsupported profile' >&2\nexit 1\n").unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&fake, std::fs::Permissions::from_mode(0o755)).unwrap();
            let err = compress_clip(&busy_clip(1), 20, H264Profile::High, &CodecBackend::Ffmpeg { binary: Some(fake) })
                .unwrap_err();
            assert!(err.to_string().contains("unsupported profile"), "{err}");
        }
    }

    /// Needs a real encoder; run with `cargo test -- --ignored` where ffmpeg exists.
    #[test]
    #[ignore = "requires an external H.264 encoder"]
    fn real_encoder_monotone_in_crf() {
        let c = busy_clip(4);
        let b = CodecBackend::Ffmpeg { binary: None };
        let lo = compress_clip(&c, 18, H264Profile::High, &b).unwrap();
        let hi = compress_clip(&c, 35, H264Profile::High, &b).unwrap();
        assert!(!lo.mock);
        assert_eq!(hi.clip.len(), 4);
        let e = |x: &Clip| -> f64 { x.frames().iter().zip(c.frames()).map(|(a, b)| a.mean_abs_diff(b)).sum() };
        assert!(e(&hi.clip) > e(&lo.clip));
    }
}
