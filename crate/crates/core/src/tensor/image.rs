use super::{Array, Scalar};
use crate::error::{Error, Result};

/// Bilinear resampling of a `[C, H, W]` array with half-pixel centers
/// (align-corners = false). Source coordinates are clamped at the borders.
pub fn bilinear_resize<T: Scalar>(img: &Array<T>, out_h: usize, out_w: usize) -> Result<Array<T>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("bilinear_resize expects [C,H,W], got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!("bilinear_resize target {out_h}x{out_w} is empty")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    if h == 0 || w == 0 {
        return Err(Error::Invalid("bilinear_resize of an empty image".into()));
    }

    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);

    let data = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            let (fy, gy) = (T::from_f64(fy), T::from_f64(1.0 - fy));
            for &(x0, x1, fx) in &xs {
                let (fx, gx) = (T::from_f64(fx), T::from_f64(1.0 - fx));
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                out.push(top * gy + bottom * fy);
            }
        }
    }
    Array::new(&[c, out_h, out_w], out)
}
