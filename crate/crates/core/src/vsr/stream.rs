use candle_core::Tensor;

use super::{Generator, SCALE};
use crate::error::{Error, Result};
use crate::media::{Clip, Frame};
use crate::tensor;

/// Replicate-pads `(1, 3, h, w)` so both dims are multiples of 4.
fn pad_to_four(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.next_multiple_of(4), w.next_multiple_of(4));
    if (ph, pw) == (h, w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows: Vec<u32> = (0..ph).map(|i| i.min(h - 1) as u32).collect();
    let cols: Vec<u32> = (0..pw).map(|i| i.min(w - 1) as u32).collect();
    let x = x.index_select(&Tensor::new(rows.as_slice(), dev)?, 2)?;
    Ok(x.index_select(&Tensor::new(cols.as_slice(), dev)?, 3)?)
}

/// Frame-at-a-time inference. Each output is emitted once the following
/// frame has arrived (or on [`SequenceRunner::finish`]); memory stays
/// constant in the sequence length because state is detached every step.
pub struct SequenceRunner<'g> {
    gen: &'g Generator,
    dims: Option<(usize, usize)>,
    prev: Option<Tensor>,
    cur: Option<Tensor>,
    state: Option<Tensor>,
    sr_prev: Option<Tensor>,
    emitted: usize,
}

impl<'g> SequenceRunner<'g> {
    pub fn new(gen: &'g Generator) -> Self {
        Self {
            gen,
            dims: None,
            prev: None,
            cur: None,
            state: None,
            sr_prev: None,
            emitted: 0,
        }
    }

    /// Number of SR frames produced so far.
    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn push(&mut self, f: &Frame) -> Result<Option<Frame>> {
        let index = self.emitted + usize::from(self.cur.is_some());
        let dims = f.dims();
        match self.dims {
            None => self.dims = Some(dims),
            Some(d) if d != dims => {
                return Err(Error::AtFrame {
                    index,
                    source: Box::new(Error::InvalidShape(format!("{dims:?} differs from {d:?}"))),
                })
            }
            Some(_) => {}
        }
        let t = tensor::frame_to_tensor(f, self.gen.dtype(), self.gen.device())
            .and_then(|t| pad_to_four(&t))
            .map_err(|e| Error::AtFrame {
                index,
                source: Box::new(e),
            })?;
        let Some(cur) = self.cur.take() else {
            self.cur = Some(t);
            return Ok(None);
        };
        let out = self.run(&cur, &t)?;
        self.prev = Some(cur);
        self.cur = Some(t);
        Ok(Some(out))
    }

    /// Emits the last pending frame, with its next neighbour replicated.
    pub fn finish(&mut self) -> Result<Option<Frame>> {
        let Some(cur) = self.cur.take() else {
            return Ok(None);
        };
        let out = self.run(&cur, &cur)?;
        self.prev = None;
        Ok(Some(out))
    }

    fn run(&mut self, cur: &Tensor, next: &Tensor) -> Result<Frame> {
        let index = self.emitted;
        let at = |e: Error| Error::AtFrame {
            index,
            source: Box::new(e),
        };
        let (_, _, ph, pw) = cur.dims4()?;
        let prev = self.prev.as_ref().unwrap_or(cur);
        let state = match self.state.take() {
            Some(s) => s,
            None => self.gen.init_state(1, ph, pw).map_err(at)?,
        };
        let sr_prev = match self.sr_prev.take() {
            Some(s) => s,
            None => tensor::bilinear(cur, ph * SCALE, pw * SCALE).map_err(at)?,
        };
        let (sr, state) = self
            .gen
            .step_tensor(prev, cur, next, &sr_prev, &state)
            .map_err(at)?;
        let sr = sr.detach();
        self.state = Some(state.detach());
        self.sr_prev = Some(sr.clone());
        self.emitted += 1;
        let (h, w) = self.dims.expect("dims set on first push");
        let out = sr
            .narrow(2, 0, h * SCALE)
            .and_then(|t| t.narrow(3, 0, w * SCALE))
            .map_err(|e| at(e.into()))?;
        tensor::tensor_to_frame_clamped(&out).map_err(at)
    }
}

/// Streams frames through the generator, handing each SR frame to `sink`
/// as soon as it is ready. Returns the number of frames produced.
pub fn stream_sequence<I>(gen: &Generator, frames: I, mut sink: impl FnMut(usize, Frame) -> Result<()>) -> Result<usize>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut runner = SequenceRunner::new(gen);
    for f in frames {
        if let Some(out) = runner.push(&f?)? {
            sink(runner.emitted() - 1, out)?;
        }
    }
    if let Some(out) = runner.finish()? {
        sink(runner.emitted() - 1, out)?;
    }
    Ok(runner.emitted())
}

/// Super-resolves a whole clip x4.
pub fn forward_sequence(c: &Clip, gen: &Generator) -> Result<Clip> {
    let mut out = Vec::with_capacity(c.len());
    stream_sequence(gen, c.frames().iter().cloned().map(Ok), |_, f| {
        out.push(f);
        Ok(())
    })?;
    Clip::new(c.clip_id.clone(), c.fps, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{resize_to, ResizeMethod};
    use crate::vsr::GeneratorArch;
    use candle_core::{DType, Device};

    fn clip(n: usize, h: usize, w: usize) -> Clip {
        let frames = (0..n)
            .map(|t| Frame::from_fn(h, w, |c, y, x| (((c + 2) * (y * 5 + x * 3 + t)) % 31) as f32 / 30.0))
            .collect();
        Clip::new("c", 24.0, frames).unwrap()
    }

    fn small() -> GeneratorArch {
        GeneratorArch {
            channels: 8,
            blocks: [1, 1, 1],
        }
    }

    #[test]
    fn single_frame_clip() {
        let g = Generator::seeded(small(), 1, DType::F32, &Device::Cpu).unwrap();
        let out = forward_sequence(&clip(1, 8, 8), &g).unwrap();
        assert_eq!((out.len(), out.dims()), (1, (32, 32)));
    }

    #[test]
    fn shape_for_fifteen_frames() {
        let g = Generator::seeded(small(), 1, DType::F32, &Device::Cpu).unwrap();
        let out = forward_sequence(&clip(15, 64, 64), &g).unwrap();
        assert_eq!((out.len(), out.dims()), (15, (256, 256)));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let g = Generator::zeros(small(), DType::F32, &Device::Cpu).unwrap();
        let c = clip(3, 10, 13);
        let out = forward_sequence(&c, &g).unwrap();
        assert_eq!(out.dims(), (40, 52));
        // zero weights: bilinear of the padded frame, equal away from the padded edge
        let want = resize_to(&c.frames()[1], 40, 52, ResizeMethod::Bilinear).unwrap();
        let a = out.frames()[1].crop(0, 0, 32, 44).unwrap();
        let b = want.crop(0, 0, 32, 44).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn streaming_matches_unrolled_training_forward() {
        let g = Generator::seeded(small(), 4, DType::F32, &Device::Cpu).unwrap();
        let c = clip(5, 8, 12);
        let streamed = forward_sequence(&c, &g).unwrap();
        let lr: Vec<Tensor> = c
            .frames()
            .iter()
            .map(|f| tensor::frame_to_tensor(f, DType::F32, &Device::Cpu).unwrap())
            .collect();
        let unrolled = g.forward_train(&lr).unwrap();
        for (a, b) in streamed.frames().iter().zip(&unrolled) {
            let b = tensor::tensor_to_frame_clamped(b).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }

    #[test]
    fn mismatched_frame_is_named() {
        let g = Generator::zeros(small(), DType::F32, &Device::Cpu).unwrap();
        let mut r = SequenceRunner::new(&g);
        r.push(&Frame::filled(8, 8, 0.1)).unwrap();
        r.push(&Frame::filled(8, 8, 0.1)).unwrap();
        let err = r.push(&Frame::filled(12, 8, 0.1)).unwrap_err();
        assert!(matches!(err, Error::AtFrame { index: 2, .. }), "{err}");
    }
}
