//! C ABI over `celsr`.
//!
//! Every function returns a [`CelsrStatus`]; on failure a description is kept
//! per thread and can be read with [`celsr_last_error`]. Objects are opaque
//! handles created by `*_new` / `*_load` and released by the matching
//! `*_free`. Images cross the boundary as interleaved 8-bit RGB, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use candle_core::{DType, Device};
use celsr::degrade::{run_pipeline, sample_degradation, PipelineConfig};
use celsr::eval::compute_niqe;
use celsr::lbo::LboPool;
use celsr::media::{frame_to_rgb8, Clip, Frame};
use celsr::vsr::{Generator, SequenceRunner, SCALE};
use celsr::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CelsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidShape = 3,
    Io = 4,
    Config = 5,
    Environment = 6,
    Runtime = 7,
    /// A bug inside the library; the handle involved should be discarded.
    Panic = 8,
}

impl CelsrStatus {
    fn of(e: &Error) -> Self {
        match e.class() {
            "invalid-argument" => CelsrStatus::InvalidArgument,
            "invalid-shape" => CelsrStatus::InvalidShape,
            "io" | "json" | "checkpoint" => CelsrStatus::Io,
            "config" => CelsrStatus::Config,
            "environment" | "plugin" => CelsrStatus::Environment,
            _ => CelsrStatus::Runtime,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (CelsrStatus, String)>) -> CelsrStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CelsrStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CelsrStatus::Panic
        }
    }
}

fn fail(e: Error) -> (CelsrStatus, String) {
    (CelsrStatus::of(&e), e.to_string())
}

fn bad(msg: impl Into<String>) -> (CelsrStatus, String) {
    (CelsrStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> (CelsrStatus, String) {
    (CelsrStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CelsrStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad(format!("`{what}` is not UTF-8")))
}

unsafe fn frame_from_rgb8(rgb: *const u8, height: usize, width: usize) -> Result<Frame, (CelsrStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    if height == 0 || width == 0 {
        return Err((CelsrStatus::InvalidShape, format!("empty frame {height}x{width}")));
    }
    let px = std::slice::from_raw_parts(rgb, height * width * 3);
    Ok(Frame::from_fn(height, width, |c, y, x| px[(y * width + x) * 3 + c] as f32 / 255.0))
}

unsafe fn write_rgb8(f: &Frame, out: *mut u8, out_len: usize) -> Result<(), (CelsrStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let bytes = frame_to_rgb8(f).into_raw();
    if out_len < bytes.len() {
        return Err(bad(format!("output buffer holds {out_len} bytes, {} needed", bytes.len())));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn celsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the last failure on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn celsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Super-resolution generator weights.
pub struct CelsrGenerator(Generator);

/// Loads generator weights from a safetensors file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn celsr_generator_load(path: *const c_char, out: *mut *mut CelsrGenerator) -> CelsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let g = Generator::load(Path::new(path), DType::F32, &Device::Cpu).map_err(fail)?;
        *out = Box::into_raw(Box::new(CelsrGenerator(g)));
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
/// `gen` must come from [`celsr_generator_load`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn celsr_generator_param_count(gen: *const CelsrGenerator, out: *mut usize) -> CelsrStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = g.0.count_parameters();
        Ok(())
    })
}

/// # Safety
/// `gen` must be null or come from [`celsr_generator_load`]; streams created
/// from it must be freed first.
#[no_mangle]
pub unsafe extern "C" fn celsr_generator_free(gen: *mut CelsrGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Frame-by-frame super-resolution over one clip. Output lags the input by
/// one frame; [`celsr_stream_finish`] flushes the last one.
pub struct CelsrStream {
    // borrows the generator handle, which the caller keeps alive
    runner: SequenceRunner<'static>,
}

/// Starts a stream on `gen`, which must outlive the stream.
///
/// # Safety
/// `gen` must come from [`celsr_generator_load`] and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn celsr_stream_new(gen: *const CelsrGenerator, out: *mut *mut CelsrStream) -> CelsrStatus {
    guard(|| {
        let g: &'static CelsrGenerator = gen.as_ref().ok_or_else(|| null("gen"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(CelsrStream {
            runner: SequenceRunner::new(&g.0),
        }));
        Ok(())
    })
}

unsafe fn emit(step: celsr::Result<Option<Frame>>, out: *mut u8, out_len: usize, ready: *mut i32) -> Result<(), (CelsrStatus, String)> {
    if ready.is_null() {
        return Err(null("ready"));
    }
    *ready = 0;
    if let Some(f) = step.map_err(fail)? {
        write_rgb8(&f, out, out_len)?;
        *ready = 1;
    }
    Ok(())
}

/// Feeds one `height x width` frame. When an SR frame becomes available it
/// is written to `out` (`16 * height * width * 3` bytes) and `*ready` is 1.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes, `out` `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn celsr_stream_push(
    stream: *mut CelsrStream,
    rgb: *const u8,
    height: usize,
    width: usize,
    out: *mut u8,
    out_len: usize,
    ready: *mut i32,
) -> CelsrStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        let f = frame_from_rgb8(rgb, height, width)?;
        emit(s.runner.push(&f), out, out_len, ready)
    })
}

/// Flushes the final SR frame, if any.
///
/// # Safety
/// As for [`celsr_stream_push`].
#[no_mangle]
pub unsafe extern "C" fn celsr_stream_finish(stream: *mut CelsrStream, out: *mut u8, out_len: usize, ready: *mut i32) -> CelsrStatus {
    guard(|| {
        let s = stream.as_mut().ok_or_else(|| null("stream"))?;
        emit(s.runner.finish(), out, out_len, ready)
    })
}

/// # Safety
/// `stream` must be null or come from [`celsr_stream_new`].
#[no_mangle]
pub unsafe extern "C" fn celsr_stream_free(stream: *mut CelsrStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// NIQE of one frame (lower is better); frames must be at least 96 pixels
/// on each side.
///
/// # Safety
/// `rgb` must hold `height * width * 3` bytes and `score` be valid.
#[no_mangle]
pub unsafe extern "C" fn celsr_niqe(rgb: *const u8, height: usize, width: usize, score: *mut f64) -> CelsrStatus {
    guard(|| {
        if score.is_null() {
            return Err(null("score"));
        }
        let f = frame_from_rgb8(rgb, height, width)?;
        *score = compute_niqe(&f).map_err(fail)?;
        Ok(())
    })
}

/// A degradation pipeline with its own random stream.
pub struct CelsrDegrader {
    cfg: PipelineConfig,
    pool: LboPool,
    rng: ChaCha8Rng,
}

/// Builds a degrader from a TOML pipeline config (null for the default).
/// The same seed and call sequence reproduce the same outputs.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn celsr_degrader_new(config_toml: *const c_char, seed: u64, out: *mut *mut CelsrDegrader) -> CelsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::from_toml(c_str(config_toml, "config_toml")?).map_err(fail)?
        };
        *out = Box::into_raw(Box::new(CelsrDegrader {
            cfg,
            pool: LboPool::empty(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }));
        Ok(())
    })
}

/// Degrades `frames` consecutive `height x width` frames (both divisible
/// by 4) with a fresh draw, writing `frames * (height/4) * (width/4) * 3`
/// bytes to `out`.
///
/// # Safety
/// `rgb` must hold `frames * height * width * 3` bytes, `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn celsr_degrade(
    deg: *mut CelsrDegrader,
    rgb: *const u8,
    frames: usize,
    height: usize,
    width: usize,
    out: *mut u8,
    out_len: usize,
) -> CelsrStatus {
    guard(|| {
        let d = deg.as_mut().ok_or_else(|| null("deg"))?;
        if frames == 0 {
            return Err(bad("no frames"));
        }
        let plane = height * width * 3;
        let clip = (0..frames)
            .map(|i| frame_from_rgb8(rgb.wrapping_add(i * plane), height, width))
            .collect::<Result<Vec<_>, _>>()?;
        let clip = Clip::new("ffi", 24.0, clip).map_err(fail)?;
        let draw = sample_degradation(&d.cfg, d.pool.len(), &mut d.rng).map_err(fail)?;
        let lr = run_pipeline(&clip, &draw, &d.pool, &d.cfg.backend).map_err(fail)?;
        let (lh, lw) = lr.dims();
        debug_assert_eq!((lh * SCALE, lw * SCALE), (height, width));
        let step = lh * lw * 3;
        if out_len < step * frames {
            return Err(bad(format!("output buffer holds {out_len} bytes, {} needed", step * frames)));
        }
        for (i, f) in lr.frames().iter().enumerate() {
            write_rgb8(f, out.add(i * step), step)?;
        }
        Ok(())
    })
}

/// # Safety
/// `deg` must be null or come from [`celsr_degrader_new`].
#[no_mangle]
pub unsafe extern "C" fn celsr_degrader_free(deg: *mut CelsrDegrader) {
    if !deg.is_null() {
        drop(Box::from_raw(deg));
    }
}
