//! Task-specific label encodings, reconstruction losses, post-processing,
//! and metrics for panoptic segmentation, colorization, and depth.

pub mod depth;
pub mod panoptic;

pub use depth::{central_crop_mask, depth_dequantize, depth_quantize, rmse, DepthBins, DepthMap};
pub use panoptic::{
    canonicalize_instances, panoptic_postprocess, panoptic_quality, pixel_accuracy,
    pixel_accuracy_in_region, PanopticMask, PqResult, VOID_CLASS,
};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Luminance weights for grayscale conversion.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// An RGB image with values in [-1, 1], stored `[H, W, 3]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl RgbImage {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(crate::invalid_arg!("rgb image must be {height}x{width}x3"));
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    pub fn check_range(&self) -> Result<()> {
        if self.data.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(crate::invalid_arg!("rgb values must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Single-channel image in [-1, 1], stored `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

/// Fixed-weight luminance projection; idempotent once the image is gray.
pub fn to_grayscale(rgb: &RgbImage) -> GrayImage {
    let data = rgb
        .data
        .chunks_exact(3)
        .map(|px| px[0] * LUMA_WEIGHTS[0] + px[1] * LUMA_WEIGHTS[1] + px[2] * LUMA_WEIGHTS[2])
        .collect();
    GrayImage {
        data,
        height: rgb.height,
        width: rgb.width,
    }
}

/// Replicate a gray channel back to RGB (for feeding the model input).
pub fn gray_to_rgb(gray: &GrayImage) -> RgbImage {
    let mut data = Vec::with_capacity(gray.data.len() * 3);
    for &v in &gray.data {
        data.extend_from_slice(&[v, v, v]);
    }
    RgbImage {
        data,
        height: gray.height,
        width: gray.width,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Panoptic,
    Colorization,
    Depth,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Panoptic => "panoptic",
            TaskKind::Colorization => "colorization",
            TaskKind::Depth => "depth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "panoptic" => Ok(TaskKind::Panoptic),
            "colorization" => Ok(TaskKind::Colorization),
            "depth" => Ok(TaskKind::Depth),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    /// The headline metric for this task, and whether higher is better.
    pub fn metric(self) -> (&'static str, bool) {
        match self {
            TaskKind::Panoptic => ("pq", true),
            TaskKind::Colorization => ("mse", false),
            TaskKind::Depth => ("rmse", false),
        }
    }
}

/// Task geometry: class counts, depth range, evaluation crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Semantic classes including void (panoptic).
    pub semantic_classes: usize,
    /// Instance slots including "no instance" (panoptic).
    pub instance_slots: usize,
    pub depth_bins: usize,
    pub max_depth: f64,
    /// Central-crop fraction for depth RMSE evaluation.
    pub depth_eval_crop: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TaskKind::Panoptic => {
                if self.semantic_classes < 2 || self.instance_slots < 2 {
                    return Err(Error::Config(
                        "panoptic needs at least 2 semantic classes and 2 instance slots".into(),
                    ));
                }
            }
            TaskKind::Depth => {
                DepthBins::new(self.max_depth, self.depth_bins)?;
                if !(0.0 < self.depth_eval_crop && self.depth_eval_crop <= 1.0) {
                    return Err(Error::Config("depth_eval_crop must be in (0, 1]".into()));
                }
            }
            TaskKind::Colorization => {}
        }
        Ok(())
    }

    pub fn depth_bins_spec(&self) -> Result<DepthBins> {
        DepthBins::new(self.max_depth, self.depth_bins)
    }

    /// Categorical label channels as (name, class count).
    pub fn categorical_channels(&self) -> Vec<(&'static str, usize)> {
        match self.kind {
            TaskKind::Panoptic => vec![
                ("semantics", self.semantic_classes),
                ("instances", self.instance_slots),
            ],
            TaskKind::Depth => vec![("depth", self.depth_bins)],
            TaskKind::Colorization => vec![],
        }
    }

    /// Continuous label channels (colorization predicts raw RGB).
    pub fn continuous_channels(&self) -> usize {
        match self.kind {
            TaskKind::Colorization => 3,
            _ => 0,
        }
    }

    /// Output-head width per pixel.
    pub fn logits_per_pixel(&self) -> usize {
        let cat: usize = self.categorical_channels().iter().map(|&(_, c)| c).sum();
        cat + self.continuous_channels()
    }

    /// Model-input channels of x (grayscale input is replicated to 3).
    pub fn image_channels(&self) -> usize {
        3
    }
}

/// A ground-truth or predicted label in its task-native form.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskLabel {
    Panoptic(PanopticMask),
    Color(RgbImage),
    Depth(DepthMap),
}

impl TaskLabel {
    pub fn spatial_size(&self) -> (usize, usize) {
        match self {
            TaskLabel::Panoptic(m) => (m.height, m.width),
            TaskLabel::Color(c) => (c.height, c.width),
            TaskLabel::Depth(d) => (d.height, d.width),
        }
    }
}

/// Canonical model-facing encoding of one label: per-pixel class indices per
/// categorical channel, plus raw values for continuous channels.
#[derive(Clone, Debug)]
pub struct EncodedLabel {
    /// One (class count, per-pixel indices) per categorical channel.
    pub categorical: Vec<(usize, Vec<usize>)>,
    /// `[H*W*C]` values for continuous channels.
    pub continuous: Option<(usize, Vec<f32>)>,
    pub height: usize,
    pub width: usize,
}

/// Canonically encode a label for the configured task. Rejects labels of the
/// wrong task or out-of-range values.
pub fn encode_label(spec: &TaskSpec, label: &TaskLabel) -> Result<EncodedLabel> {
    match (spec.kind, label) {
        (TaskKind::Panoptic, TaskLabel::Panoptic(m)) => {
            let bad_sem = m.semantic.iter().any(|&c| c as usize >= spec.semantic_classes);
            let bad_inst = m.instance.iter().any(|&i| i as usize >= spec.instance_slots);
            if bad_sem || bad_inst {
                return Err(crate::invalid_arg!(
                    "panoptic label exceeds configured class counts ({}, {})",
                    spec.semantic_classes,
                    spec.instance_slots
                ));
            }
            Ok(EncodedLabel {
                categorical: vec![
                    (
                        spec.semantic_classes,
                        m.semantic.iter().map(|&c| c as usize).collect(),
                    ),
                    (
                        spec.instance_slots,
                        m.instance.iter().map(|&i| i as usize).collect(),
                    ),
                ],
                continuous: None,
                height: m.height,
                width: m.width,
            })
        }
        (TaskKind::Depth, TaskLabel::Depth(d)) => {
            let bins = spec.depth_bins_spec()?;
            Ok(EncodedLabel {
                categorical: vec![(spec.depth_bins, depth_quantize(d, bins)?)],
                continuous: None,
                height: d.height,
                width: d.width,
            })
        }
        (TaskKind::Colorization, TaskLabel::Color(c)) => {
            c.check_range()?;
            Ok(EncodedLabel {
                categorical: vec![],
                continuous: Some((3, c.data.clone())),
                height: c.height,
                width: c.width,
            })
        }
        (kind, _) => Err(crate::invalid_arg!(
            "label does not match configured task '{}'",
            kind.name()
        )),
    }
}

/// Reconstruction loss between per-pixel logits `[B, H, W, C]` and encoded
/// labels: mean of per-channel cross-entropies for categorical tasks, mean
/// squared error for colorization.
pub fn task_reconstruction_loss<T: Elem>(
    tape: &mut Tape<T>,
    spec: &TaskSpec,
    logits: Var,
    labels: &[EncodedLabel],
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 || shape[3] != spec.logits_per_pixel() {
        return Err(Error::ShapeMismatch {
            op: "task_reconstruction_loss",
            lhs: shape,
            rhs: vec![labels.len(), 0, 0, spec.logits_per_pixel()],
        });
    }
    let (b, h, w) = (shape[0], shape[1], shape[2]);
    if labels.len() != b || labels.iter().any(|l| (l.height, l.width) != (h, w)) {
        return Err(crate::invalid_arg!(
            "labels do not match logits batch geometry {b}x{h}x{w}"
        ));
    }

    let channels = spec.categorical_channels();
    if channels.is_empty() {
        // Colorization: regression on raw values.
        let mut target = Vec::with_capacity(b * h * w * 3);
        for l in labels {
            let (_, values) = l
                .continuous
                .as_ref()
                .ok_or_else(|| crate::invalid_arg!("continuous label missing"))?;
            target.extend(values.iter().map(|&v| T::of(v as f64)));
        }
        let tgt = tape.constant(Tensor::from_vec(target, &[b, h, w, 3])?);
        return tape.mean_squared_error(logits, tgt);
    }

    let mut offset = 0usize;
    let mut per_channel = Vec::new();
    for (ci, &(_, classes)) in channels.iter().enumerate() {
        let ch_logits = tape.slice(logits, 3, offset..offset + classes)?;
        let mut targets = Vec::with_capacity(b * h * w);
        for l in labels {
            let (count, idx) = &l.categorical[ci];
            if *count != classes {
                return Err(crate::invalid_arg!(
                    "encoded label channel {ci} has {count} classes, expected {classes}"
                ));
            }
            targets.extend_from_slice(idx);
        }
        per_channel.push(tape.softmax_cross_entropy(ch_logits, &targets)?);
        offset += classes;
    }
    let mut total = per_channel[0];
    for &l in &per_channel[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / per_channel.len() as f64))
}

/// Decode per-pixel logits `[H, W, C]` into a task label, including task
/// post-processing: panoptic majority vote and tiny removal, depth
/// dequantization, colorization clamped to the valid range.
pub fn decode_logits<T: Elem>(spec: &TaskSpec, logits: &Tensor<T>) -> Result<TaskLabel> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[2] != spec.logits_per_pixel() {
        return Err(Error::ShapeMismatch {
            op: "decode_logits",
            lhs: shape.to_vec(),
            rhs: vec![0, 0, spec.logits_per_pixel()],
        });
    }
    let (h, w) = (shape[0], shape[1]);
    match spec.kind {
        TaskKind::Panoptic => {
            let s = spec.semantic_classes;
            let i = spec.instance_slots;
            let mut sem = Vec::with_capacity(h * w * s);
            let mut inst = Vec::with_capacity(h * w * i);
            for px in logits.data().chunks_exact(s + i) {
                sem.extend_from_slice(&px[..s]);
                inst.extend_from_slice(&px[s..]);
            }
            let sem_t = Tensor::from_vec(sem, &[h, w, s])?;
            let inst_t = Tensor::from_vec(inst, &[h, w, i])?;
            Ok(TaskLabel::Panoptic(panoptic_postprocess(&sem_t, &inst_t)?))
        }
        TaskKind::Depth => {
            let bins = spec.depth_bins_spec()?;
            let idx: Vec<usize> = logits
                .data()
                .chunks_exact(spec.depth_bins)
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                })
                .collect();
            Ok(TaskLabel::Depth(depth_dequantize(&idx, bins, h, w)?))
        }
        TaskKind::Colorization => {
            let data: Vec<f32> = logits
                .data()
                .iter()
                .map(|&v| (v.as_f64() as f32).clamp(-1.0, 1.0))
                .collect();
            Ok(TaskLabel::Color(RgbImage::new(data, h, w)?))
        }
    }
}

/// The task's headline metric between a prediction and the ground truth.
pub fn evaluate_metric(spec: &TaskSpec, pred: &TaskLabel, gt: &TaskLabel) -> Result<f64> {
    match (pred, gt) {
        (TaskLabel::Panoptic(p), TaskLabel::Panoptic(g)) => Ok(panoptic_quality(p, g)?.pq),
        (TaskLabel::Depth(p), TaskLabel::Depth(g)) => {
            let valid = central_crop_mask(g.height, g.width, spec.depth_eval_crop);
            rmse(p, g, &valid)
        }
        (TaskLabel::Color(p), TaskLabel::Color(g)) => {
            let n = g.data.len();
            let sum: f64 = p
                .data
                .iter()
                .zip(&g.data)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum();
            Ok(sum / n as f64)
        }
        _ => Err(crate::invalid_arg!("prediction and ground truth tasks differ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn panoptic_spec() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Panoptic,
            semantic_classes: 4,
            instance_slots: 3,
            depth_bins: 32,
            max_depth: 8.0,
            depth_eval_crop: 0.8,
        }
    }

    #[test]
    fn grayscale_weights_and_idempotence() {
        let rgb = RgbImage::new(vec![0.5, -0.25, 1.0], 1, 1).unwrap();
        let g = to_grayscale(&rgb);
        let expect = 0.5 * 0.299 + -0.25 * 0.587 + 1.0 * 0.114;
        assert!((g.data[0] - expect).abs() < 1e-6);
        let twice = to_grayscale(&gray_to_rgb(&g));
        for (a, b) in twice.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_label_rejects_wrong_task() {
        let spec = panoptic_spec();
        let depth = TaskLabel::Depth(DepthMap::new(vec![1.0; 4], 2, 2).unwrap());
        assert!(encode_label(&spec, &depth).is_err());
    }

    #[test]
    fn encode_label_rejects_out_of_range_classes() {
        let spec = panoptic_spec();
        let m = PanopticMask::new(vec![9, 0, 0, 0], vec![0; 4], 2, 2).unwrap();
        assert!(encode_label(&spec, &TaskLabel::Panoptic(m)).is_err());
    }

    #[test]
    fn panoptic_loss_vanishes_in_one_hot_limit() {
        let spec = panoptic_spec();
        let m = PanopticMask::new(vec![1, 2, 3, 1], vec![0, 1, 2, 0], 2, 2).unwrap();
        let enc = encode_label(&spec, &TaskLabel::Panoptic(m)).unwrap();
        let mut last = f64::INFINITY;
        for mag in [1.0f64, 10.0, 100.0] {
            let mut data = vec![0.0f64; 4 * 7];
            for px in 0..4 {
                data[px * 7 + enc.categorical[0].1[px]] = mag;
                data[px * 7 + 4 + enc.categorical[1].1[px]] = mag;
            }
            let mut tape = Tape::new();
            let logits = tape.constant(Tensor::from_vec(data, &[1, 2, 2, 7]).unwrap());
            let loss = task_reconstruction_loss(&mut tape, &spec, logits, &[enc.clone()]).unwrap();
            let v = tape.value(loss).scalar_value().unwrap();
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn colorization_loss_zero_at_target() {
        let spec = TaskSpec {
            kind: TaskKind::Colorization,
            ..panoptic_spec()
        };
        let img = RgbImage::new(vec![0.25; 2 * 2 * 3], 2, 2).unwrap();
        let enc = encode_label(&spec, &TaskLabel::Color(img.clone())).unwrap();
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_vec(
            img.data.iter().map(|&v| v as f64).collect(),
            &[1, 2, 2, 3],
        )
        .unwrap());
        let loss = task_reconstruction_loss(&mut tape, &spec, logits, &[enc]).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_matches_direct_formula_per_task() {
        let mut rng = seeded_rng(31);
        // Panoptic on a random 4x4: mean of the two channel cross-entropies.
        let spec = panoptic_spec();
        let sem: Vec<u32> = (0..16).map(|i| (i % 4) as u32).collect();
        let inst: Vec<u32> = (0..16).map(|i| (i % 3) as u32).collect();
        let m = PanopticMask::new(sem.clone(), inst.clone(), 4, 4).unwrap();
        let enc = encode_label(&spec, &TaskLabel::Panoptic(m)).unwrap();
        let logits = Tensor::<f64>::randn(&[1, 4, 4, 7], 1.0, &mut rng);

        let mut direct = 0.0f64;
        for px in 0..16 {
            let row = &logits.data()[px * 7..(px + 1) * 7];
            let (s, i) = (&row[..4], &row[4..]);
            let lse_s = s.iter().map(|x| x.exp()).sum::<f64>().ln();
            let lse_i = i.iter().map(|x| x.exp()).sum::<f64>().ln();
            direct += (lse_s - s[sem[px] as usize]) / 16.0 / 2.0;
            direct += (lse_i - i[inst[px] as usize]) / 16.0 / 2.0;
        }
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let loss = task_reconstruction_loss(&mut tape, &spec, lv, &[enc]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - direct).abs() < 1e-9, "{got} vs {direct}");

        // Depth on a random 4x4: plain cross-entropy over bins.
        let dspec = TaskSpec {
            kind: TaskKind::Depth,
            depth_bins: 5,
            ..panoptic_spec()
        };
        let dvals: Vec<f32> = (0..16).map(|i| (i as f32) * 0.5).collect();
        let dmap = DepthMap::new(dvals, 4, 4).unwrap();
        let denc = encode_label(&dspec, &TaskLabel::Depth(dmap)).unwrap();
        let dlogits = Tensor::<f64>::randn(&[1, 4, 4, 5], 1.0, &mut rng);
        let mut direct = 0.0f64;
        for px in 0..16 {
            let row = &dlogits.data()[px * 5..(px + 1) * 5];
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            direct += (lse - row[denc.categorical[0].1[px]]) / 16.0;
        }
        let mut tape = Tape::new();
        let lv = tape.constant(dlogits);
        let loss = task_reconstruction_loss(&mut tape, &dspec, lv, &[denc]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - direct).abs() < 1e-9);

        // Colorization on a random 4x4: mean squared error.
        let cspec = TaskSpec {
            kind: TaskKind::Colorization,
            ..panoptic_spec()
        };
        let img_data: Vec<f32> = (0..48).map(|i| ((i % 7) as f32 / 3.5) - 1.0).collect();
        let img = RgbImage::new(img_data.clone(), 4, 4).unwrap();
        let cenc = encode_label(&cspec, &TaskLabel::Color(img)).unwrap();
        let clogits = Tensor::<f64>::randn(&[1, 4, 4, 3], 1.0, &mut rng);
        let direct: f64 = clogits
            .data()
            .iter()
            .zip(&img_data)
            .map(|(&p, &t)| (p - t as f64).powi(2))
            .sum::<f64>()
            / 48.0;
        let mut tape = Tape::new();
        let lv = tape.constant(clogits);
        let loss = task_reconstruction_loss(&mut tape, &cspec, lv, &[cenc]).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - direct).abs() < 1e-9);
    }

    #[test]
    fn decode_logits_round_trips_bin_centers() {
        let spec = TaskSpec {
            kind: TaskKind::Depth,
            depth_bins: 4,
            max_depth: 8.0,
            ..panoptic_spec()
        };
        let mut data = vec![0.0f32; 4 * 4];
        for px in 0..4 {
            data[px * 4 + px] = 5.0;
        }
        let logits = Tensor::from_vec(data, &[2, 2, 4]).unwrap();
        match decode_logits(&spec, &logits).unwrap() {
            TaskLabel::Depth(d) => assert_eq!(d.values, vec![1.0, 3.0, 5.0, 7.0]),
            _ => panic!("wrong label kind"),
        }
    }

    #[test]
    fn decode_colorization_clamps() {
        let spec = TaskSpec {
            kind: TaskKind::Colorization,
            ..panoptic_spec()
        };
        let logits = Tensor::from_vec(vec![-3.0f32, 0.5, 3.0], &[1, 1, 3]).unwrap();
        match decode_logits(&spec, &logits).unwrap() {
            TaskLabel::Color(c) => assert_eq!(c.data, vec![-1.0, 0.5, 1.0]),
            _ => panic!("wrong label kind"),
        }
    }
}
