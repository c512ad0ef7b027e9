//! Rendering of labels and predictions to raster images, and the sample-grid
//! writer (rows: ground truth, input, greedy prediction, sampled
//! predictions).

use std::path::Path;

use crate::error::Result;
use crate::tasks::{PanopticMask, RgbImage, TaskLabel, TaskSpec};

/// Fixed palette for semantic classes (index 0 = void is dark gray).
const CLASS_COLORS: [[u8; 3]; 12] = [
    [40, 40, 40],
    [105, 105, 105],
    [70, 90, 120],
    [220, 70, 60],
    [60, 130, 220],
    [70, 190, 90],
    [235, 200, 60],
    [160, 80, 200],
    [240, 140, 50],
    [70, 200, 200],
    [200, 90, 140],
    [140, 110, 60],
];

/// RGB bytes of one rendered frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub rgb: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn frame_from_rgb(img: &RgbImage) -> Frame {
    Frame {
        rgb: img.data.iter().map(|&v| to_u8(v)).collect(),
        height: img.height,
        width: img.width,
    }
}

fn frame_from_panoptic(mask: &PanopticMask) -> Frame {
    let mut rgb = Vec::with_capacity(mask.num_pixels() * 3);
    for px in 0..mask.num_pixels() {
        let base = CLASS_COLORS[mask.semantic[px] as usize % CLASS_COLORS.len()];
        // Instance id modulates brightness so adjacent instances of one
        // class stay distinguishable.
        let inst = mask.instance[px];
        let f = if inst == 0 {
            1.0
        } else {
            0.55 + 0.45 * ((inst as f32 * 0.37).fract())
        };
        for ch in 0..3 {
            rgb.push((base[ch] as f32 * f).round().clamp(0.0, 255.0) as u8);
        }
    }
    Frame {
        rgb,
        height: mask.height,
        width: mask.width,
    }
}

pub fn frame_from_label(task: &TaskSpec, label: &TaskLabel) -> Frame {
    match label {
        TaskLabel::Panoptic(m) => frame_from_panoptic(m),
        TaskLabel::Color(c) => frame_from_rgb(c),
        TaskLabel::Depth(d) => {
            let rgb = d
                .values
                .iter()
                .flat_map(|&v| {
                    let g = ((v as f64 / task.max_depth).clamp(0.0, 1.0) * 255.0) as u8;
                    [g, g, g]
                })
                .collect();
            Frame {
                rgb,
                height: d.height,
                width: d.width,
            }
        }
    }
}

/// Compose frames into a grid with separators; every frame must share one
/// size. Rows are stacked top to bottom.
pub fn compose_grid(rows: &[Vec<Frame>]) -> Result<Frame> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| crate::invalid_arg!("empty grid"))?;
    let (h, w) = (first.height, first.width);
    let cols = rows.iter().map(|r| r.len()).max().unwrap();
    let pad = 2usize;
    let gh = rows.len() * (h + pad) - pad;
    let gw = cols * (w + pad) - pad;
    let mut rgb = vec![255u8; gh * gw * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            if (frame.height, frame.width) != (h, w) {
                return Err(crate::invalid_arg!("grid frames must share one size"));
            }
            let top = ri * (h + pad);
            let left = ci * (w + pad);
            for r in 0..h {
                let dst = ((top + r) * gw + left) * 3;
                let src = r * w * 3;
                rgb[dst..dst + w * 3].copy_from_slice(&frame.rgb[src..src + w * 3]);
            }
        }
    }
    Ok(Frame {
        rgb,
        height: gh,
        width: gw,
    })
}

pub fn save_png(frame: &Frame, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img = image::RgbImage::from_raw(frame.width as u32, frame.height as u32, frame.rgb.clone())
        .ok_or_else(|| crate::invalid_arg!("frame buffer does not match its size"))?;
    img.save(path)?;
    Ok(())
}

/// Save a single-channel u16 PNG (used for depth dumps).
pub fn save_gray16_png(values: &[u16], height: usize, width: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        values.to_vec(),
    )
    .ok_or_else(|| crate::invalid_arg!("buffer does not match size"))?;
    img.save(path)?;
    Ok(())
}

/// Save a single-channel u8 PNG (used for categorical label dumps).
pub fn save_gray8_png(values: &[u8], height: usize, width: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let img =
        image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| crate::invalid_arg!("buffer does not match size"))?;
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_composition_dimensions() {
        let f = Frame {
            rgb: vec![0; 4 * 4 * 3],
            height: 4,
            width: 4,
        };
        let grid = compose_grid(&[vec![f.clone(), f.clone()], vec![f.clone()]]).unwrap();
        assert_eq!(grid.height, 4 + 2 + 4);
        assert_eq!(grid.width, 4 + 2 + 4);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let frame = Frame {
            rgb: (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect(),
            height: 4,
            width: 3,
        };
        save_png(&frame, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.as_raw(), &frame.rgb);
    }
}
