//! Deterministic synthetic scene generator: (image, panoptic mask, depth map)
//! triples with occlusion, plus the training-time augmentations.
//!
//! Generation is pure per (seed, split, index), so dataset iteration is
//! reproducible and embarrassingly parallel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tasks::{
    canonicalize_instances, gray_to_rgb, to_grayscale, DepthMap, PanopticMask, RgbImage, TaskKind,
    TaskLabel, TaskSpec,
};
use crate::tensor::resize::{bilinear_hwc, nearest_hwc};
use crate::util::{derive_seed, seeded_rng};

pub const MAX_SHAPES: usize = 6;

/// First semantic class used for shapes; classes 1 and 2 are backgrounds,
/// class 0 is void.
pub const FIRST_SHAPE_CLASS: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub semantic_class: u32,
    pub color: [f32; 3],
    /// (row, col) center in pixels.
    pub center: (f64, f64),
    /// Primary half-extent in pixels.
    pub size: f64,
    /// Secondary extent as a multiple of `size` (rectangles, triangles).
    pub elongation: f64,
    /// Depth plane in (0, max_depth); smaller is nearer.
    pub depth: f64,
}

impl ShapeSpec {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (cr, cc) = self.center;
        let (dr, dc) = (r - cr, c - cc);
        match self.kind {
            ShapeKind::Circle => dr * dr + dc * dc <= self.size * self.size,
            ShapeKind::Rectangle => {
                dr.abs() <= self.size && dc.abs() <= self.size * self.elongation
            }
            ShapeKind::Triangle => {
                // Isosceles triangle pointing up: apex at (cr - size, cc),
                // base corners at (cr + size, cc +- size * elongation).
                if dr < -self.size || dr > self.size {
                    return false;
                }
                let half_width = (dr + self.size) / (2.0 * self.size) * self.size * self.elongation;
                dc.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub shapes: Vec<ShapeSpec>,
    pub background_class: u32,
    pub background_color: [f32; 3],
    pub background_depth: f64,
}

/// One rendered example: aligned image, panoptic mask, and depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: RgbImage,
    pub mask: PanopticMask,
    pub depth: DepthMap,
}

/// Per-class color variants with matched luminance, so colorization from a
/// grayscale input stays genuinely ambiguous.
fn class_palette(class: u32, variant: usize) -> [f32; 3] {
    // Base hues, then scaled to the class's target luminance in [0, 1].
    const HUES: [[f32; 3]; 4] = [
        [1.0, 0.35, 0.35],
        [0.35, 0.45, 1.0],
        [0.35, 1.0, 0.40],
        [0.95, 0.85, 0.30],
    ];
    let luma_targets = [0.0, 0.25, 0.75, 0.40, 0.52, 0.62, 0.33, 0.70];
    let target = luma_targets[(class as usize) % luma_targets.len()];
    let hue = HUES[variant % HUES.len()];
    let luma = 0.299 * hue[0] + 0.587 * hue[1] + 0.114 * hue[2];
    let scale = target / luma;
    let mut rgb = [0.0f32; 3];
    for i in 0..3 {
        // Values in [0, 1], then mapped to [-1, 1].
        rgb[i] = (hue[i] * scale).clamp(0.0, 1.0) * 2.0 - 1.0;
    }
    rgb
}

impl SceneSpec {
    /// Sample a random scene for the given task geometry. Resamples (with a
    /// derived seed) until every shape stays visible after occlusion.
    pub fn sample(seed: u64, image_size: usize, task: &TaskSpec) -> Self {
        for attempt in 0..64 {
            let spec = Self::sample_once(derive_seed(seed, "scene", attempt), image_size, task);
            let rendered = render_scene(&spec, image_size).expect("valid spec");
            let visible = rendered.mask.instance_ids().len();
            if visible == spec.shapes.len() {
                return spec;
            }
        }
        // Fall back to a single-shape scene, which is always fully visible.
        let mut spec = Self::sample_once(derive_seed(seed, "scene-fallback", 0), image_size, task);
        spec.shapes.truncate(1);
        spec
    }

    fn sample_once(seed: u64, image_size: usize, task: &TaskSpec) -> Self {
        let mut rng = seeded_rng(seed);
        let s = image_size as f64;
        let max_class = task.semantic_classes as u32;
        let n_shapes = rng.random_range(1..=MAX_SHAPES.min(task.instance_slots - 1));
        let background_class = rng.random_range(1..=2u32.min(max_class - 1));
        let bg_variant = rng.random_range(0..4);
        let max_depth = task.max_depth;

        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let class_span = max_class.saturating_sub(FIRST_SHAPE_CLASS).max(1);
            let semantic_class = FIRST_SHAPE_CLASS + rng.random_range(0..class_span);
            let variant = rng.random_range(0..4);
            let size = rng.random_range(s * 0.10..s * 0.22);
            let center = (
                rng.random_range(size..s - size),
                rng.random_range(size..s - size),
            );
            shapes.push(ShapeSpec {
                kind,
                semantic_class,
                color: class_palette(semantic_class, variant),
                center,
                size,
                elongation: rng.random_range(0.6..1.4),
                depth: rng.random_range(max_depth * 0.1..max_depth * 0.9),
            });
        }
        SceneSpec {
            seed,
            shapes,
            background_class,
            background_color: class_palette(background_class, bg_variant),
            background_depth: max_depth,
        }
    }
}

/// Rasterize a scene with occlusion by depth. The returned mask is
/// canonicalized; image values lie in [-1, 1].
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Example> {
    let n = size * size;
    let mut image = Vec::with_capacity(n * 3);
    for _ in 0..n {
        image.extend_from_slice(&spec.background_color);
    }
    let mut semantic = vec![spec.background_class; n];
    let mut instance = vec![0u32; n];
    let mut depth = vec![spec.background_depth as f32; n];

    // Back to front: nearer shapes (smaller depth) overwrite farther ones.
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    order.sort_by(|&a, &b| {
        spec.shapes[b]
            .depth
            .partial_cmp(&spec.shapes[a].depth)
            .unwrap()
            .then(a.cmp(&b))
    });
    for &si in &order {
        let shape = &spec.shapes[si];
        for r in 0..size {
            for c in 0..size {
                if shape.contains(r as f64 + 0.5, c as f64 + 0.5) {
                    let px = r * size + c;
                    semantic[px] = shape.semantic_class;
                    instance[px] = (si + 1) as u32;
                    depth[px] = shape.depth as f32;
                    image[px * 3..px * 3 + 3].copy_from_slice(&shape.color);
                }
            }
        }
    }
    let mask = canonicalize_instances(&PanopticMask::new(semantic, instance, size, size)?);
    Ok(Example {
        image: RgbImage::new(image, size, size)?,
        mask,
        depth: DepthMap::new(depth, size, size)?,
    })
}

/// Inception-style crop: area fraction uniform in [0.5, 1.0], aspect ratio
/// in [3/4, 4/3], ten attempts then full frame. The same crop and flip apply
/// to the image and every label channel; values resize bilinearly,
/// categorical channels by nearest neighbor.
pub fn inception_crop<R: Rng>(example: &Example, out_size: usize, rng: &mut R) -> Example {
    let (h, w) = (example.mask.height, example.mask.width);
    let mut crop = None;
    for _ in 0..10 {
        let area_frac = rng.random_range(0.5..=1.0);
        let aspect = rng.random_range(0.75..=4.0 / 3.0);
        let target = area_frac * (h * w) as f64;
        let ch = (target / aspect).sqrt().round() as usize;
        let cw = (target * aspect).sqrt().round() as usize;
        if ch == 0 || cw == 0 || ch > h || cw > w {
            continue;
        }
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        crop = Some((top, left, ch, cw));
        break;
    }
    let (top, left, ch, cw) = crop.unwrap_or((0, 0, h, w));
    let flip = rng.random_bool(0.5);
    apply_crop(example, top, left, ch, cw, flip, out_size)
}

/// Deterministic crop + optional horizontal flip + square resize.
pub fn apply_crop(
    example: &Example,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    flip: bool,
    out_size: usize,
) -> Example {
    let w = example.mask.width;
    let take = |src: &[f32], channels: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(ch * cw * channels);
        for r in top..top + ch {
            if flip {
                for c in (left..left + cw).rev() {
                    out.extend_from_slice(&src[(r * w + c) * channels..(r * w + c + 1) * channels]);
                }
            } else {
                let o = (r * w + left) * channels;
                out.extend_from_slice(&src[o..o + cw * channels]);
            }
        }
        out
    };
    let take_u32 = |src: &[u32]| -> Vec<u32> {
        let mut out = Vec::with_capacity(ch * cw);
        for r in top..top + ch {
            if flip {
                for c in (left..left + cw).rev() {
                    out.push(src[r * w + c]);
                }
            } else {
                out.extend_from_slice(&src[r * w + left..r * w + left + cw]);
            }
        }
        out
    };

    let image = bilinear_hwc(&take(&example.image.data, 3), (ch, cw, 3), (out_size, out_size));
    let depth = bilinear_hwc(&take(&example.depth.values, 1), (ch, cw, 1), (out_size, out_size));
    let semantic = nearest_hwc(&take_u32(&example.mask.semantic), (ch, cw, 1), (out_size, out_size));
    let instance = nearest_hwc(&take_u32(&example.mask.instance), (ch, cw, 1), (out_size, out_size));

    let mask = canonicalize_instances(
        &PanopticMask::new(semantic, instance, out_size, out_size).expect("sized"),
    );
    Example {
        image: RgbImage::new(
            image.iter().map(|&v| v.clamp(-1.0, 1.0)).collect(),
            out_size,
            out_size,
        )
        .expect("sized"),
        mask,
        depth: DepthMap::new(depth, out_size, out_size).expect("sized"),
    }
}

/// Which side of the train/eval split an example comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Deterministic stream of synthetic examples.
#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub seed: u64,
    pub image_size: usize,
    pub task: TaskSpec,
}

impl SceneDataset {
    pub fn new(seed: u64, image_size: usize, task: TaskSpec) -> Self {
        Self {
            seed,
            image_size,
            task,
        }
    }

    pub fn scene_spec(&self, split: Split, index: usize) -> SceneSpec {
        let seed = derive_seed(self.seed, split.tag(), index as u64);
        SceneSpec::sample(seed, self.image_size, &self.task)
    }

    /// The rendered example, before any augmentation.
    pub fn example(&self, split: Split, index: usize) -> Example {
        render_scene(&self.scene_spec(split, index), self.image_size).expect("sampled specs render")
    }

    /// Training example with crop/flip augmentation; pure in (epoch, index).
    pub fn augmented(&self, index: usize, epoch: u64) -> Example {
        let ex = self.example(Split::Train, index);
        let aug_seed = derive_seed(self.seed, "augment", epoch ^ ((index as u64) << 20));
        let mut rng = seeded_rng(aug_seed);
        inception_crop(&ex, self.image_size, &mut rng)
    }
}

/// The model-facing (input image, label) view of an example for a task.
pub fn task_io(task: &TaskSpec, example: &Example) -> (RgbImage, TaskLabel) {
    match task.kind {
        TaskKind::Panoptic => (example.image.clone(), TaskLabel::Panoptic(example.mask.clone())),
        TaskKind::Depth => (example.image.clone(), TaskLabel::Depth(example.depth.clone())),
        TaskKind::Colorization => (
            gray_to_rgb(&to_grayscale(&example.image)),
            TaskLabel::Color(example.image.clone()),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Panoptic,
            semantic_classes: 8,
            instance_slots: 8,
            depth_bins: 32,
            max_depth: 8.0,
            depth_eval_crop: 0.8,
        }
    }

    #[test]
    fn empty_shape_list_renders_uniform_background() {
        let spec = SceneSpec {
            seed: 0,
            shapes: vec![],
            background_class: 1,
            background_color: [0.1, 0.2, 0.3],
            background_depth: 8.0,
        };
        let ex = render_scene(&spec, 16).unwrap();
        assert!(ex.mask.instance_ids().is_empty());
        assert!(ex.mask.semantic.iter().all(|&c| c == 1));
        assert!(ex.depth.values.iter().all(|&d| d == 8.0));
        assert!(ex.image.data.chunks_exact(3).all(|px| px == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn same_seed_renders_bitwise_identical_triples() {
        let ds = SceneDataset::new(7, 32, task());
        let a = ds.example(Split::Train, 5);
        let b = ds.example(Split::Train, 5);
        assert_eq!(a, b);
        let c = ds.example(Split::Train, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn splits_do_not_collide() {
        let ds = SceneDataset::new(7, 32, task());
        assert_ne!(ds.example(Split::Train, 0), ds.example(Split::Eval, 0));
    }

    #[test]
    fn nearer_shape_wins_overlap_in_all_three_outputs() {
        let near = ShapeSpec {
            kind: ShapeKind::Rectangle,
            semantic_class: 3,
            color: [1.0, -1.0, -1.0],
            center: (8.0, 8.0),
            size: 4.0,
            elongation: 1.0,
            depth: 2.0,
        };
        let far = ShapeSpec {
            kind: ShapeKind::Rectangle,
            semantic_class: 4,
            color: [-1.0, 1.0, -1.0],
            center: (8.0, 10.0),
            size: 4.0,
            elongation: 1.0,
            depth: 6.0,
        };
        let spec = SceneSpec {
            seed: 0,
            shapes: vec![far.clone(), near.clone()],
            background_class: 1,
            background_color: [0.0, 0.0, 0.0],
            background_depth: 8.0,
        };
        let ex = render_scene(&spec, 16).unwrap();
        // Pixel (8, 8) is inside both; the nearer rectangle owns it.
        let px = 8 * 16 + 8;
        assert_eq!(ex.mask.semantic[px], 3);
        assert_eq!(ex.depth.values[px], 2.0);
        assert_eq!(&ex.image.data[px * 3..px * 3 + 3], &[1.0, -1.0, -1.0]);
        // Pixel (8, 13) only inside the far rectangle.
        let px = 8 * 16 + 13;
        assert_eq!(ex.mask.semantic[px], 4);
        assert_eq!(ex.depth.values[px], 6.0);
        // The two shapes map to distinct canonical instances.
        assert_eq!(ex.mask.instance_ids().len(), 2);
    }

    #[test]
    fn sampled_scenes_keep_every_shape_visible() {
        let ds = SceneDataset::new(99, 32, task());
        for i in 0..50 {
            let spec = ds.scene_spec(Split::Train, i);
            let ex = render_scene(&spec, 32).unwrap();
            assert_eq!(
                ex.mask.instance_ids().len(),
                spec.shapes.len(),
                "scene {i} lost a shape to occlusion"
            );
            ex.mask.check_canonical().unwrap();
        }
    }

    #[test]
    fn full_frame_crop_without_flip_is_identity_up_to_resize() {
        let ds = SceneDataset::new(3, 32, task());
        let ex = ds.example(Split::Train, 0);
        let out = apply_crop(&ex, 0, 0, 32, 32, false, 32);
        assert_eq!(out, ex);
    }

    #[test]
    fn flip_is_an_involution() {
        let ds = SceneDataset::new(3, 32, task());
        let ex = ds.example(Split::Train, 1);
        let once = apply_crop(&ex, 0, 0, 32, 32, true, 32);
        let twice = apply_crop(&once, 0, 0, 32, 32, true, 32);
        assert_eq!(twice, ex);
    }

    #[test]
    fn crop_keeps_labels_aligned_per_pixel() {
        let ds = SceneDataset::new(11, 32, task());
        for i in 0..20 {
            let ex = ds.example(Split::Train, i);
            // Joint semantic/instance pairs observed in the source.
            let mut pairs: std::collections::HashSet<(u32, u32)> = std::collections::HashSet::new();
            // Canonicalization relabels instances, so compare against the
            // set of (semantic, has-instance) pairs plus color-class links.
            for px in 0..ex.mask.num_pixels() {
                pairs.insert((ex.mask.semantic[px], (ex.mask.instance[px] > 0) as u32));
            }
            let aug = ds.augmented(i, 4);
            for px in 0..aug.mask.num_pixels() {
                let key = (aug.mask.semantic[px], (aug.mask.instance[px] > 0) as u32);
                assert!(
                    pairs.contains(&key),
                    "scene {i}: pixel {px} has pair {key:?} not present in source"
                );
                // Background never carries an instance; shapes always do.
                if aug.mask.semantic[px] >= FIRST_SHAPE_CLASS {
                    assert!(aug.mask.instance[px] > 0);
                } else {
                    assert_eq!(aug.mask.instance[px], 0);
                }
            }
            aug.mask.check_canonical().unwrap();
        }
    }

    #[test]
    fn augmented_stream_is_deterministic() {
        let ds = SceneDataset::new(5, 32, task());
        let a = ds.augmented(3, 2);
        let b = ds.augmented(3, 2);
        assert_eq!(a, b);
        let c = ds.augmented(3, 3);
        assert_ne!(a, c, "different epochs must see different augmentations");
    }

    #[test]
    fn colorization_io_uses_grayscale_input() {
        let spec = TaskSpec {
            kind: TaskKind::Colorization,
            ..task()
        };
        let ds = SceneDataset::new(5, 32, spec);
        let ex = ds.example(Split::Train, 0);
        let (input, label) = task_io(&spec, &ex);
        // Input is gray replicated: channels equal.
        for px in input.data.chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
        match label {
            TaskLabel::Color(c) => assert_eq!(c, ex.image),
            _ => panic!("wrong label kind"),
        }
    }
}
