use crate::error::Result;
use crate::geometry::BBox;
use crate::numeric::tape::Tap;
use crate::numeric::{Real, Tape, Tensor, Var};

/// Boxes thinner than this (in feature cells) after stride mapping are skipped.
pub const MIN_FEATURE_SIDE: f64 = 1e-3;

/// Bilinear taps for an `out x out` RoIAlign grid with one sample at the
/// centre of each bin. Feature cell `i` is centred at continuous coordinate
/// `i + 0.5`; samples outside the map are clamped to the border cells.
///
/// Returns `None` for boxes that collapse below [`MIN_FEATURE_SIDE`].
pub fn roi_taps<T: Real>(b: &BBox, out: usize, stride: f64, height: usize, width: usize) -> Option<Vec<[Tap<T>; 4]>> {
    let (fx1, fy1) = (b.x1 / stride, b.y1 / stride);
    let (fx2, fy2) = (b.x2 / stride, b.y2 / stride);
    if out == 0 || fx2 - fx1 < MIN_FEATURE_SIDE || fy2 - fy1 < MIN_FEATURE_SIDE || height == 0 || width == 0 {
        return None;
    }
    let bw = (fx2 - fx1) / out as f64;
    let bh = (fy2 - fy1) / out as f64;
    let mut taps = Vec::with_capacity(out * out);
    for i in 0..out {
        let v = (fy1 + (i as f64 + 0.5) * bh - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ay = v - y0 as f64;
        for j in 0..out {
            let u = (fx1 + (j as f64 + 0.5) * bw - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let ax = u - x0 as f64;
            taps.push([
                (y0 * width + x0, T::lit((1.0 - ay) * (1.0 - ax))),
                (y0 * width + x1, T::lit((1.0 - ay) * ax)),
                (y1 * width + x0, T::lit(ay * (1.0 - ax))),
                (y1 * width + x1, T::lit(ay * ax)),
            ]);
        }
    }
    Some(taps)
}

/// Differentiable RoIAlign on image `batch` of a level map. Yields a
/// `1 x C x out x out` node, or `None` when the box is degenerate at this
/// stride (the caller drops the RoI).
pub fn roi_align<T: Real>(
    tape: &mut Tape<T>,
    feature: Var,
    batch: usize,
    b: &BBox,
    out: usize,
    stride: usize,
) -> Result<Option<Var>> {
    let [_, _, h, w] = tape.value(feature).dims4()?;
    match roi_taps(b, out, stride as f64, h, w) {
        Some(taps) => Ok(Some(tape.bilinear_gather(feature, batch, taps, out, out)?)),
        None => Ok(None),
    }
}

/// RoIAlign on a plain tensor (no graph), e.g. detached teacher features.
pub fn roi_align_tensor<T: Real>(
    feature: &Tensor<T>,
    batch: usize,
    b: &BBox,
    out: usize,
    stride: usize,
) -> Result<Option<Tensor<T>>> {
    let [n, c, h, w] = feature.dims4()?;
    if batch >= n {
        return Err(crate::error::Error::config("roi_align_tensor: batch index out of range"));
    }
    let Some(taps) = roi_taps::<T>(b, out, stride as f64, h, w) else {
        return Ok(None);
    };
    let plane = h * w;
    let src = &feature.data()[batch * c * plane..(batch + 1) * c * plane];
    let mut data = Vec::with_capacity(c * taps.len());
    for ch in 0..c {
        let base = &src[ch * plane..(ch + 1) * plane];
        for t in &taps {
            data.push(t.iter().fold(T::zero(), |acc, &(off, wt)| acc + wt * base[off]));
        }
    }
    Ok(Some(Tensor::from_vec(vec![1, c, out, out], data)?))
}
