//! Panoptic label representation, canonical instance IDs, prediction
//! post-processing, and the panoptic quality metric.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Semantic class 0 is the void class throughout.
pub const VOID_CLASS: u32 = 0;

/// Fraction of all pixels below which an instance is erased at
/// post-processing time.
pub const TINY_OBJECT_FRACTION: f64 = 0.001;

/// A 2-channel mask: per-pixel semantic class and instance id (0 meaning
/// "no instance").
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMask {
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

impl PanopticMask {
    pub fn new(semantic: Vec<u32>, instance: Vec<u32>, height: usize, width: usize) -> Result<Self> {
        if semantic.len() != height * width || instance.len() != height * width {
            return Err(crate::invalid_arg!(
                "panoptic mask channels must be {}x{}",
                height,
                width
            ));
        }
        Ok(Self {
            semantic,
            instance,
            height,
            width,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Instance ids actually present (excluding 0).
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.instance.iter().copied().filter(|&i| i > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Structural invariants: ids form exactly {1..m} after canonicalization.
    pub fn check_canonical(&self) -> Result<()> {
        let ids = self.instance_ids();
        for (k, &id) in ids.iter().enumerate() {
            if id != (k + 1) as u32 {
                return Err(crate::invalid_arg!(
                    "instance ids not canonical: expected {}, found {id}",
                    k + 1
                ));
            }
        }
        Ok(())
    }
}

/// Mass centroid of each instance, in (row, col) pixel coordinates.
fn instance_centers(mask: &PanopticMask) -> HashMap<u32, (f64, f64)> {
    let mut acc: HashMap<u32, (f64, f64, f64)> = HashMap::new();
    for (i, &id) in mask.instance.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (r, c) = ((i / mask.width) as f64, (i % mask.width) as f64);
        let e = acc.entry(id).or_insert((0.0, 0.0, 0.0));
        e.0 += r;
        e.1 += c;
        e.2 += 1.0;
    }
    acc.into_iter()
        .map(|(id, (r, c, n))| (id, (r / n, c / n)))
        .collect()
}

/// Relabel instance ids 1, 2, ... in raster order of instance centers
/// (row-major; ties by smaller column, then original id). Semantics are
/// unchanged. Idempotent.
pub fn canonicalize_instances(mask: &PanopticMask) -> PanopticMask {
    let centers = instance_centers(mask);
    let mut order: Vec<(u32, (f64, f64))> = centers.into_iter().collect();
    order.sort_by(|a, b| {
        a.1 .0
            .partial_cmp(&b.1 .0)
            .unwrap()
            .then(a.1 .1.partial_cmp(&b.1 .1).unwrap())
            .then(a.0.cmp(&b.0))
    });
    let relabel: HashMap<u32, u32> = order
        .iter()
        .enumerate()
        .map(|(k, &(id, _))| (id, (k + 1) as u32))
        .collect();
    let instance = mask
        .instance
        .iter()
        .map(|&id| if id == 0 { 0 } else { relabel[&id] })
        .collect();
    PanopticMask {
        semantic: mask.semantic.clone(),
        instance,
        height: mask.height,
        width: mask.width,
    }
}

/// Turn per-pixel logits into a mask: instance channel by per-pixel argmax,
/// one semantic class per instance by majority vote (ties to the lower class
/// id), and instances covering less than 0.1% of all pixels erased (instance
/// 0, void semantics).
pub fn panoptic_postprocess<T: Elem>(
    semantic_logits: &Tensor<T>,
    instance_logits: &Tensor<T>,
) -> Result<PanopticMask> {
    let (h, w, s) = logits_dims(semantic_logits)?;
    let (h2, w2, i_slots) = logits_dims(instance_logits)?;
    if (h, w) != (h2, w2) {
        return Err(Error::ShapeMismatch {
            op: "panoptic_postprocess",
            lhs: semantic_logits.shape().to_vec(),
            rhs: instance_logits.shape().to_vec(),
        });
    }
    let semantic: Vec<u32> = argmax_rows(semantic_logits.data(), s);
    let instance: Vec<u32> = argmax_rows(instance_logits.data(), i_slots);

    let mut mask = PanopticMask::new(semantic, instance, h, w)?;

    // Majority vote per instance region.
    let mut votes: HashMap<u32, HashMap<u32, usize>> = HashMap::new();
    for (px, &id) in mask.instance.iter().enumerate() {
        if id > 0 {
            *votes.entry(id).or_default().entry(mask.semantic[px]).or_default() += 1;
        }
    }
    let winner: HashMap<u32, u32> = votes
        .iter()
        .map(|(&id, tally)| {
            let mut best_class = u32::MAX;
            let mut best_votes = 0usize;
            let mut classes: Vec<(&u32, &usize)> = tally.iter().collect();
            classes.sort_by_key(|(c, _)| **c);
            for (&class, &n) in classes {
                if n > best_votes {
                    best_votes = n;
                    best_class = class;
                }
            }
            (id, best_class)
        })
        .collect();
    for px in 0..mask.num_pixels() {
        let id = mask.instance[px];
        if id > 0 {
            mask.semantic[px] = winner[&id];
        }
    }

    // Tiny-object removal against the full pixel count.
    let threshold = (mask.num_pixels() as f64 * TINY_OBJECT_FRACTION).ceil() as usize;
    let mut sizes: HashMap<u32, usize> = HashMap::new();
    for &id in &mask.instance {
        if id > 0 {
            *sizes.entry(id).or_default() += 1;
        }
    }
    for px in 0..mask.num_pixels() {
        let id = mask.instance[px];
        if id > 0 && sizes[&id] < threshold {
            mask.instance[px] = 0;
            mask.semantic[px] = VOID_CLASS;
        }
    }
    Ok(mask)
}

fn logits_dims<T: Elem>(logits: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(crate::invalid_arg!("expected [H, W, C] logits, got {s:?}"));
    }
    Ok((s[0], s[1], s[2]))
}

fn argmax_rows<T: Elem>(data: &[T], classes: usize) -> Vec<u32> {
    data.chunks_exact(classes)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

/// One segment of a panoptic mask: a thing (instance id > 0) or a stuff
/// region (all instance-0 pixels of one non-void class).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SegmentKey {
    Thing(u32),
    Stuff(u32),
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub key: SegmentKey,
    pub class: u32,
    pub pixels: Vec<usize>,
}

/// Decompose a mask into segments, skipping void.
pub fn segments_of(mask: &PanopticMask) -> Vec<Segment> {
    let mut things: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut stuff: HashMap<u32, Vec<usize>> = HashMap::new();
    for px in 0..mask.num_pixels() {
        let id = mask.instance[px];
        if id > 0 {
            things.entry(id).or_default().push(px);
        } else if mask.semantic[px] != VOID_CLASS {
            stuff.entry(mask.semantic[px]).or_default().push(px);
        }
    }
    let mut out = Vec::new();
    let mut thing_ids: Vec<u32> = things.keys().copied().collect();
    thing_ids.sort_unstable();
    for id in thing_ids {
        let pixels = things.remove(&id).unwrap();
        // Majority class of the region (regions from postprocess are uniform).
        let mut tally: HashMap<u32, usize> = HashMap::new();
        for &px in &pixels {
            *tally.entry(mask.semantic[px]).or_default() += 1;
        }
        let mut entries: Vec<(u32, usize)> = tally.into_iter().collect();
        entries.sort_by_key(|&(c, _)| c);
        let class = entries
            .iter()
            .max_by_key(|&&(c, n)| (n, std::cmp::Reverse(c)))
            .map(|&(c, _)| c)
            .unwrap();
        out.push(Segment {
            key: SegmentKey::Thing(id),
            class,
            pixels,
        });
    }
    let mut stuff_classes: Vec<u32> = stuff.keys().copied().collect();
    stuff_classes.sort_unstable();
    for class in stuff_classes {
        out.push(Segment {
            key: SegmentKey::Stuff(class),
            class,
            pixels: stuff.remove(&class).unwrap(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Panoptic quality. Segments match iff same class and IoU > 0.5 (matches
/// are provably unique). Void pixels in the ground truth are excluded from
/// IoU denominators, and predicted segments that are mostly void are ignored
/// rather than counted as false positives.
pub fn panoptic_quality(pred: &PanopticMask, gt: &PanopticMask) -> Result<PqResult> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch {
            op: "panoptic_quality",
            lhs: vec![pred.height, pred.width],
            rhs: vec![gt.height, gt.width],
        });
    }
    let pred_segs = segments_of(pred);
    let gt_segs = segments_of(gt);

    // Ground-truth void region: void semantics and no instance.
    let gt_void: Vec<bool> = (0..gt.num_pixels())
        .map(|px| gt.instance[px] == 0 && gt.semantic[px] == VOID_CLASS)
        .collect();

    // Pixel -> gt segment index.
    let mut gt_of_pixel = vec![usize::MAX; gt.num_pixels()];
    for (si, seg) in gt_segs.iter().enumerate() {
        for &px in &seg.pixels {
            gt_of_pixel[px] = si;
        }
    }

    let mut iou_sum = 0.0f64;
    let mut tp = 0usize;
    let mut gt_matched = vec![false; gt_segs.len()];
    let mut fp = 0usize;

    for pseg in &pred_segs {
        let mut inter: HashMap<usize, usize> = HashMap::new();
        let mut void_overlap = 0usize;
        for &px in &pseg.pixels {
            if gt_void[px] {
                void_overlap += 1;
            }
            let gi = gt_of_pixel[px];
            if gi != usize::MAX {
                *inter.entry(gi).or_default() += 1;
            }
        }
        let mut matched = false;
        for (&gi, &i) in &inter {
            if gt_segs[gi].class != pseg.class {
                continue;
            }
            let union = pseg.pixels.len() + gt_segs[gi].pixels.len() - i - void_overlap;
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                iou_sum += iou;
                tp += 1;
                gt_matched[gi] = true;
                matched = true;
                break; // at most one match is possible above 0.5
            }
        }
        if !matched {
            // Mostly-void predictions are ignored, not penalized.
            if (void_overlap as f64) / (pseg.pixels.len() as f64) <= 0.5 {
                fp += 1;
            }
        }
    }
    let fn_count = gt_matched.iter().filter(|&&m| !m).count();

    if tp + fp + fn_count == 0 {
        // Vacuous agreement: no segments on either side.
        return Ok(PqResult {
            pq: 1.0,
            sq: 1.0,
            rq: 1.0,
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
        });
    }
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_count as f64;
    Ok(PqResult {
        pq: iou_sum / denom,
        sq: if tp > 0 { iou_sum / tp as f64 } else { 0.0 },
        rq: tp as f64 / denom,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
    })
}

/// Fraction of pixels whose semantic and instance values both match.
pub fn pixel_accuracy(pred: &PanopticMask, gt: &PanopticMask) -> f64 {
    pixel_accuracy_in_region(pred, gt, None)
}

/// Pixel accuracy restricted to a region mask (true = counted).
pub fn pixel_accuracy_in_region(
    pred: &PanopticMask,
    gt: &PanopticMask,
    region: Option<&[bool]>,
) -> f64 {
    let mut total = 0usize;
    let mut correct = 0usize;
    for px in 0..gt.num_pixels() {
        if let Some(r) = region {
            if !r[px] {
                continue;
            }
        }
        total += 1;
        if pred.semantic[px] == gt.semantic[px] && pred.instance[px] == gt.instance[px] {
            correct += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_8x8(f: impl Fn(usize, usize) -> (u32, u32)) -> PanopticMask {
        let mut sem = Vec::new();
        let mut inst = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                let (s, i) = f(r, c);
                sem.push(s);
                inst.push(i);
            }
        }
        PanopticMask::new(sem, inst, 8, 8).unwrap()
    }

    #[test]
    fn canonicalize_single_instance_gets_id_one() {
        let m = mask_8x8(|r, c| if r == 5 && c > 3 { (2, 9) } else { (1, 0) });
        let canon = canonicalize_instances(&m);
        assert_eq!(canon.instance_ids(), vec![1]);
        assert_eq!(canon.semantic, m.semantic);
        canon.check_canonical().unwrap();
    }

    #[test]
    fn canonicalize_orders_by_center_row_first() {
        // Instance A centered at (2,2); instance B centered at (1,7).
        let m = mask_8x8(|r, c| {
            if r == 2 && c == 2 {
                (3, 7)
            } else if r == 1 && c == 7 {
                (4, 5)
            } else {
                (1, 0)
            }
        });
        let canon = canonicalize_instances(&m);
        // The (1,7) instance is earlier in raster order of centers.
        assert_eq!(canon.instance[8 + 7], 1);
        assert_eq!(canon.instance[2 * 8 + 2], 2);
    }

    #[test]
    fn canonicalize_is_idempotent_and_permutation_invariant() {
        let m = mask_8x8(|r, c| {
            if r < 3 && c < 3 {
                (2, 4)
            } else if r > 5 {
                (3, 2)
            } else if c > 6 {
                (5, 11)
            } else {
                (1, 0)
            }
        });
        let canon = canonicalize_instances(&m);
        assert_eq!(canonicalize_instances(&canon), canon);

        // Apply a permutation to the input ids.
        let permuted = PanopticMask {
            semantic: m.semantic.clone(),
            instance: m
                .instance
                .iter()
                .map(|&i| match i {
                    4 => 2,
                    2 => 11,
                    11 => 4,
                    other => other,
                })
                .collect(),
            height: 8,
            width: 8,
        };
        assert_eq!(canonicalize_instances(&permuted), canon);
    }

    fn logits_from_labels(labels: &[u32], classes: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut data = vec![0.0f64; h * w * classes];
        for (px, &l) in labels.iter().enumerate() {
            data[px * classes + l as usize] = 10.0;
        }
        Tensor::from_vec(data, &[h, w, classes]).unwrap()
    }

    #[test]
    fn postprocess_majority_vote_wins() {
        // One instance covering 10 pixels: 6 vote class 2, 4 vote class 3.
        let mut sem = vec![1u32; 64];
        let mut inst = vec![0u32; 64];
        for px in 0..10 {
            inst[px] = 1;
            sem[px] = if px < 6 { 2 } else { 3 };
        }
        let sem_logits = logits_from_labels(&sem, 4, 8, 8);
        let inst_logits = logits_from_labels(&inst, 2, 8, 8);
        let mask = panoptic_postprocess(&sem_logits, &inst_logits).unwrap();
        for px in 0..10 {
            assert_eq!(mask.semantic[px], 2, "pixel {px}");
            assert_eq!(mask.instance[px], 1);
        }
        assert_eq!(mask.semantic[20], 1);
    }

    #[test]
    fn postprocess_removes_tiny_instances() {
        // 0.1% of 64x64 = 4.096 pixels; a 4-pixel instance must vanish and a
        // 5-pixel instance must survive.
        let n = 64 * 64;
        let mut sem = vec![1u32; n];
        let mut inst = vec![0u32; n];
        for px in 0..4 {
            inst[px] = 1;
            sem[px] = 2;
        }
        for px in 100..105 {
            inst[px] = 2;
            sem[px] = 3;
        }
        let sem_logits = logits_from_labels(&sem, 4, 64, 64);
        let inst_logits = logits_from_labels(&inst, 3, 64, 64);
        let mask = panoptic_postprocess(&sem_logits, &inst_logits).unwrap();
        for px in 0..4 {
            assert_eq!(mask.instance[px], 0);
            assert_eq!(mask.semantic[px], VOID_CLASS);
        }
        for px in 100..105 {
            assert_eq!(mask.instance[px], 2);
            assert_eq!(mask.semantic[px], 3);
        }
    }

    #[test]
    fn postprocess_hand_evaluated_8x8() {
        // Constructed logits: instance argmax paints a 2x8 band as id 1,
        // semantic votes split 10 to class 2 vs 6 to class 5.
        let mut sem = vec![1u32; 64];
        let mut inst = vec![0u32; 64];
        for px in 0..16 {
            inst[px] = 1;
            sem[px] = if px % 8 < 5 { 2 } else { 5 };
        }
        let mask = panoptic_postprocess(
            &logits_from_labels(&sem, 6, 8, 8),
            &logits_from_labels(&inst, 2, 8, 8),
        )
        .unwrap();
        // 10 votes for class 2, 6 for class 5: whole band labeled 2.
        for px in 0..16 {
            assert_eq!(mask.semantic[px], 2);
        }
        // Band is 16/64 = 25% of pixels: no tiny removal.
        assert_eq!(mask.instance_ids(), vec![1]);
    }

    #[test]
    fn pq_of_identical_masks_is_one() {
        let m = mask_8x8(|r, _| if r < 4 { (2, 1) } else { (1, 0) });
        let res = panoptic_quality(&m, &m).unwrap();
        assert_eq!(res.pq, 1.0);
        assert_eq!(res.sq, 1.0);
        assert_eq!(res.rq, 1.0);
    }

    #[test]
    fn pq_hand_case_iou_08_with_fp_and_fn() {
        // One matched pair at IoU 0.8, one unmatched predicted segment, one
        // unmatched ground-truth segment: PQ = 0.8 / (1 + 0.5 + 0.5) = 0.4.
        //
        // GT: thing class 2 on pixels 0..40, void on 40..56, thing class 3
        // on 56..64. Pred: thing class 2 on 8..48 (inter 32, void overlap 8,
        // union 40+40-32-8 = 40, IoU 0.8), thing class 4 on 56..60 (class
        // mismatch: FP), void elsewhere.
        let gt = mask_8x8(|r, c| {
            let px = r * 8 + c;
            if px < 40 {
                (2, 1)
            } else if px >= 56 {
                (3, 2)
            } else {
                (0, 0)
            }
        });
        let pred = mask_8x8(|r, c| {
            let px = r * 8 + c;
            if (8..48).contains(&px) {
                (2, 1)
            } else if (56..60).contains(&px) {
                (4, 2)
            } else {
                (0, 0)
            }
        });
        let res = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!(res.true_positives, 1);
        assert_eq!(res.false_positives, 1);
        assert_eq!(res.false_negatives, 1);
        assert!((res.pq - 0.4).abs() < 1e-12, "pq {}", res.pq);
        assert!((res.sq - 0.8).abs() < 1e-12);
        assert!((res.rq - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pq_mostly_void_prediction_is_ignored() {
        let gt = mask_8x8(|r, _| if r < 2 { (2, 1) } else { (0, 0) });
        // Prediction adds a segment lying 75% on gt void.
        let pred = mask_8x8(|r, c| {
            if r < 2 {
                (2, 1)
            } else if r == 4 && c < 4 {
                (3, 2) // 4 pixels, all on void
            } else {
                (0, 0)
            }
        });
        let res = panoptic_quality(&pred, &gt).unwrap();
        assert_eq!(res.false_positives, 0);
        assert_eq!(res.pq, 1.0);
    }

    #[test]
    fn pq_in_unit_interval_and_match_unique() {
        use rand::Rng;
        let mut rng = crate::util::seeded_rng(13);
        for _ in 0..100 {
            let gen = |rng: &mut rand_chacha::ChaCha8Rng| {
                let sem: Vec<u32> = (0..64).map(|_| rng.random_range(0..4)).collect();
                let inst: Vec<u32> = (0..64).map(|_| rng.random_range(0..3)).collect();
                PanopticMask::new(sem, inst, 8, 8).unwrap()
            };
            let pred = gen(&mut rng);
            let gt = gen(&mut rng);
            let res = panoptic_quality(&pred, &gt).unwrap();
            assert!((0.0..=1.0).contains(&res.pq), "pq {}", res.pq);
            assert_eq!(panoptic_quality(&gt, &gt).unwrap().pq, 1.0);

            // Matching uniqueness: for every gt segment, at most one pred
            // segment exceeds IoU 0.5 (exhaustive over all pairs).
            let pred_segs = segments_of(&pred);
            let gt_segs = segments_of(&gt);
            let gt_void: Vec<bool> = (0..64)
                .map(|px| gt.instance[px] == 0 && gt.semantic[px] == VOID_CLASS)
                .collect();
            for gseg in &gt_segs {
                let mut above = 0;
                for pseg in &pred_segs {
                    let inter = pseg
                        .pixels
                        .iter()
                        .filter(|px| gseg.pixels.contains(px))
                        .count();
                    let void_overlap = pseg.pixels.iter().filter(|&&px| gt_void[px]).count();
                    let union = pseg.pixels.len() + gseg.pixels.len() - inter - void_overlap;
                    if union > 0 && inter as f64 / union as f64 > 0.5 {
                        above += 1;
                    }
                }
                assert!(above <= 1, "non-unique match");
            }
        }
    }

    #[test]
    fn pq_rejects_shape_mismatch() {
        let a = mask_8x8(|_, _| (1, 0));
        let b = PanopticMask::new(vec![1; 16], vec![0; 16], 4, 4).unwrap();
        assert!(panoptic_quality(&a, &b).is_err());
    }
}
