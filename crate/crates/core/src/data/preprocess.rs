//! Per-slice intensity normalization and resizing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max normalization to `[0, 1]`; a constant slice maps to zeros.
pub fn normalize_slice(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { name: "slice".into() });
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if values.is_empty() || hi == lo {
        return Ok(vec![0.0; values.len()]);
    }
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|&v| if v == hi { 1.0 } else { (v - lo) / span })
        .collect())
}

/// Normalizes every channel plane of a `[C, H, W]` image independently.
pub fn normalize_channels(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape(
            "normalize",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..*c {
        out.extend(normalize_slice(&image.data()[ch * plane..(ch + 1) * plane])?);
    }
    Tensor::new(image.shape(), out)
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

fn check_target(image: &Tensor, size: usize) -> Result<(usize, usize, usize)> {
    if size < 2 {
        return Err(Error::invalid("size", format!("{size} must be >= 2")));
    }
    match image.shape() {
        [c, h, w] if *h > 0 && *w > 0 => Ok((*c, *h, *w)),
        s => Err(Error::shape(
            "resize",
            format!("expected non-empty [C, H, W], got {s:?}"),
        )),
    }
}

/// Corner-aligned bilinear resize of `[C, H, W]` to `[C, size, size]`.
pub fn resize_bilinear(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = check_target(image, size)?;
    if (h, w) == (size, size) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..size {
            let sy = source_coord(y, h, size);
            let y0 = (sy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..size {
                let sx = source_coord(x, w, size);
                let x0 = (sx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, size, size], out)
}

/// Corner-aligned nearest-neighbour resize, used for masks.
pub fn resize_nearest(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = check_target(image, size)?;
    if (h, w) == (size, size) {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..size {
            let sy = (source_coord(y, h, size).round() as usize).min(h - 1);
            for x in 0..size {
                let sx = (source_coord(x, w, size).round() as usize).min(w - 1);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new([c, size, size], out)
}
