//! In-memory video representation shared by every stage.
//!
//! Frames are stored planar, channel-major (`c * h * w + y * w + x`), with
//! values in `[0, 1]`. Conversion to and from interleaved 8/16-bit rasters
//! happens only at the I/O edge.

mod gradient;
mod io;
mod resize;
mod shuffle;

pub use io::{
    frame_file_name, frame_to_rgb8, load_frame, read_clip, save_frame_png, write_clip, ClipManifest, SourceInfo, MANIFEST_FILE,
};
pub use gradient::{luma, sobel_magnitude};
pub use resize::{interp_weights, resize_frame, resize_map_to, resize_to, ResizeMethod};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};

use crate::error::{Error, Result};

/// Minimum edge length of a frame entering the degradation or training path.
pub const MIN_WORKING_SIZE: usize = 8;

/// A dense `C x H x W` map of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "empty feature map {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape(format!(
                "buffer of {} values does not fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy out the window `[y0, y0 + h) x [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidShape(format!(
                "crop {h}x{w} at ({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// One RGB video frame: a 3-channel [`FeatureMap`] with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(FeatureMap);

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_map(FeatureMap::new(3, height, width, data)?)
    }

    pub fn from_map(map: FeatureMap) -> Result<Self> {
        if map.channels != 3 {
            return Err(Error::InvalidShape(format!(
                "frame needs 3 channels, got {}",
                map.channels
            )));
        }
        if let Some(v) = map.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel value {v}")));
        }
        Ok(Self(map))
    }

    /// Builds a frame from values that may leave `[0, 1]`, clamping them.
    pub fn from_map_clamped(mut map: FeatureMap) -> Result<Self> {
        map.data
            .iter_mut()
            .for_each(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::from_map(map)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self(FeatureMap::filled(3, height, width, value.clamp(0.0, 1.0)))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        Self(FeatureMap::from_fn(3, height, width, |c, y, x| {
            f(c, y, x).clamp(0.0, 1.0)
        }))
    }

    pub fn as_map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn into_map(self) -> FeatureMap {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.height, self.0.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.0.get(c, y, x)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        self.0.plane(c)
    }

    /// Luma as the unweighted channel mean.
    pub fn gray(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| (r + g + b) / 3.0)
            .collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self(self.0.crop(y0, x0, h, w)?))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.0.max_abs_diff(&other.0)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims(), "shape mismatch in mean_abs_diff");
        let sum: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        sum / self.data().len() as f64
    }

    pub fn psnr(&self, other: &Self) -> f64 {
        assert_eq!(self.dims(), other.dims(), "shape mismatch in psnr");
        let mse: f64 = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data().len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (1.0 / mse).log10()
        }
    }
}

/// An ordered run of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub fps: f64,
    frames: Vec<Frame>,
}

impl Clip {
    pub fn new(clip_id: impl Into<String>, fps: f64, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("clip needs at least one frame".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        let dims = frames[0].dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::InvalidShape(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.height(),
                f.width(),
                dims.0,
                dims.1
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            fps,
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Frames `[start, end)` as a new clip with the same id and rate.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames.len() {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{end} outside clip of {}",
                self.frames.len()
            )));
        }
        Self::new(self.clip_id.clone(), self.fps, self.frames[start..end].to_vec())
    }

    /// Applies `f` to every frame, keeping id and rate.
    pub fn try_map(&self, mut f: impl FnMut(usize, &Frame) -> Result<Frame>) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, fr)| f(i, fr))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.clip_id.clone(), self.fps, frames)
    }
}
