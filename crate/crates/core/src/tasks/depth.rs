//! Depth maps: uniform binning for the cross-entropy head, dequantization to
//! bin centers, and RMSE over a validity mask.

use crate::error::{Error, Result};

/// Per-pixel depth in meters, within `[0, max_depth]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl DepthMap {
    pub fn new(values: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(crate::invalid_arg!("depth map must be {height}x{width}"));
        }
        Ok(Self {
            values,
            height,
            width,
        })
    }
}

/// Uniform binning of `[0, max_depth]` into `bins` buckets; the top edge is
/// closed so `max_depth` lands in the last bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthBins {
    pub max_depth: f64,
    pub bins: usize,
}

impl DepthBins {
    pub fn new(max_depth: f64, bins: usize) -> Result<Self> {
        if bins < 2 || max_depth <= 0.0 {
            return Err(crate::invalid_arg!(
                "depth bins need bins >= 2 and max_depth > 0"
            ));
        }
        Ok(Self { max_depth, bins })
    }

    pub fn bin_width(&self) -> f64 {
        self.max_depth / self.bins as f64
    }

    pub fn quantize_value(&self, v: f64) -> Result<usize> {
        if !(0.0..=self.max_depth).contains(&v) {
            return Err(crate::invalid_arg!(
                "depth {v} outside [0, {}]",
                self.max_depth
            ));
        }
        Ok(((v / self.bin_width()) as usize).min(self.bins - 1))
    }

    pub fn center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.bin_width()
    }
}

pub fn depth_quantize(depth: &DepthMap, bins: DepthBins) -> Result<Vec<usize>> {
    depth
        .values
        .iter()
        .map(|&v| bins.quantize_value(v as f64))
        .collect()
}

pub fn depth_dequantize(
    indices: &[usize],
    bins: DepthBins,
    height: usize,
    width: usize,
) -> Result<DepthMap> {
    if indices.iter().any(|&i| i >= bins.bins) {
        return Err(crate::invalid_arg!("bin index out of range"));
    }
    DepthMap::new(
        indices.iter().map(|&i| bins.center(i) as f32).collect(),
        height,
        width,
    )
}

/// Root mean squared error over pixels where `valid` is true.
pub fn rmse(pred: &DepthMap, gt: &DepthMap, valid: &[bool]) -> Result<f64> {
    if pred.values.len() != gt.values.len() || valid.len() != gt.values.len() {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ((&p, &g), &ok) in pred.values.iter().zip(&gt.values).zip(valid) {
        if ok {
            let d = p as f64 - g as f64;
            total += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(crate::invalid_arg!("rmse: empty valid mask"));
    }
    Ok((total / count as f64).sqrt())
}

/// Central-crop validity mask keeping the middle `fraction` of each side.
pub fn central_crop_mask(height: usize, width: usize, fraction: f64) -> Vec<bool> {
    let keep_h = ((height as f64 * fraction).round() as usize).clamp(1, height);
    let keep_w = ((width as f64 * fraction).round() as usize).clamp(1, width);
    let top = (height - keep_h) / 2;
    let left = (width - keep_w) / 2;
    let mut mask = vec![false; height * width];
    for r in top..top + keep_h {
        for c in left..left + keep_w {
            mask[r * width + c] = true;
        }
    }
    mask
}
