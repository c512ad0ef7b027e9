//! Spatial resize plans shared by the tape primitives and plain-value paths.
//!
//! Both resizes use half-pixel source coordinates: output index `j` samples
//! source coordinate `(j + 0.5) * in / out - 0.5`, clamped to the valid range.

/// Per-output-index bilinear taps: (low index, high index, weight of high).
pub fn bilinear_plan(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Per-output-index nearest source index.
pub fn nearest_plan(in_len: usize, out_len: usize) -> Vec<usize> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|j| (((j as f64 + 0.5) * scale).floor() as usize).min(in_len - 1))
        .collect()
}

/// Bilinear resize of a row-major `[H, W, C]` buffer.
pub fn bilinear_hwc<T: super::Elem>(
    data: &[T],
    (h, w, c): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let rows = bilinear_plan(h, oh);
    let cols = bilinear_plan(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
        for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
            let w00 = T::of((1.0 - fy) * (1.0 - fx));
            let w01 = T::of((1.0 - fy) * fx);
            let w10 = T::of(fy * (1.0 - fx));
            let w11 = T::of(fy * fx);
            let o = (y * ow + x) * c;
            let i00 = (r0 * w + c0) * c;
            let i01 = (r0 * w + c1) * c;
            let i10 = (r1 * w + c0) * c;
            let i11 = (r1 * w + c1) * c;
            for ch in 0..c {
                out[o + ch] = data[i00 + ch] * w00
                    + data[i01 + ch] * w01
                    + data[i10 + ch] * w10
                    + data[i11 + ch] * w11;
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a row-major `[H, W, C]` buffer.
pub fn nearest_hwc<T: Copy>(
    data: &[T],
    (h, w, c): (usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    if h == oh && w == ow {
        return data.to_vec();
    }
    let rows = nearest_plan(h, oh);
    let cols = nearest_plan(w, ow);
    let mut out = Vec::with_capacity(oh * ow * c);
    for &sy in &rows {
        for &sx in &cols {
            let i = (sy * w + sx) * c;
            out.extend_from_slice(&data[i..i + c]);
        }
    }
    out
}
