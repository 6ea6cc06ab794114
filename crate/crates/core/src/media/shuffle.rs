use super::FeatureMap;
use crate::error::{Error, Result};

/// Depth-to-space: `C*r*r x H x W -> C x rH x rW`.
///
/// Input channel `c*r*r + i*r + j` lands at output `(c, y*r + i, x*r + j)`.
pub fn pixel_shuffle(t: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 {
        return Err(Error::InvalidArgument("shuffle factor must be >= 1".into()));
    }
    let (cin, h, w) = t.shape();
    if cin % (r * r) != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel_shuffle: {cin} channels not divisible by {}",
            r * r
        )));
    }
    let cout = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0f32; cin * h * w];
    let src = t.data();
    for c in 0..cout {
        for i in 0..r {
            for j in 0..r {
                let ic = c * r * r + i * r + j;
                for y in 0..h {
                    let srow = &src[(ic * h + y) * w..(ic * h + y + 1) * w];
                    let orow = (c * oh + y * r + i) * ow;
                    for (x, v) in srow.iter().enumerate() {
                        out[orow + x * r + j] = *v;
                    }
                }
            }
        }
    }
    FeatureMap::new(cout, oh, ow, out)
}

/// Space-to-depth, the exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(t: &FeatureMap, r: usize) -> Result<FeatureMap> {
    if r == 0 {
        return Err(Error::InvalidArgument("shuffle factor must be >= 1".into()));
    }
    let (c, h, w) = t.shape();
    if h % r != 0 || w % r != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel_unshuffle: {h}x{w} not divisible by {r}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![0.0f32; c * h * w];
    let src = t.data();
    for ci in 0..c {
        for i in 0..r {
            for j in 0..r {
                let oc = ci * r * r + i * r + j;
                for y in 0..oh {
                    let srow = (ci * h + y * r + i) * w;
                    let orow = (oc * oh + y) * ow;
                    for x in 0..ow {
                        out[orow + x] = src[srow + x * r + j];
                    }
                }
            }
        }
    }
    FeatureMap::new(c * r * r, oh, ow, out)
}
