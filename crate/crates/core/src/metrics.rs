//! COCO-style evaluation: greedy score-ordered matching, 101-point interpolated
//! AP, Recall@k, and seen/unseen/harmonic-mean aggregates for the four task modes.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::embed::CategorySplit;
use crate::error::{Error, Result};
use crate::infer::{top_k, Detection, Origin, TaskMode};
use crate::io::{read_detections, GroundTruthFile};
use crate::learn::GroundTruthInstance;
use crate::mask::MaskGrid;

/// IoU threshold for mAP.
pub const AP_IOU: f64 = 0.5;
/// IoU thresholds for Recall@k.
pub const RECALL_IOUS: [f64; 3] = [0.4, 0.5, 0.6];
pub const MAX_DETECTIONS: usize = 100;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// `|a ∧ b| / |a ∨ b|` on equally sized canvases; `None` when both are empty.
pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> Result<Option<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mask canvases {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Detections (by score) and ground truths of one category in one image,
/// with `overlaps[det][gt]`.
#[derive(Debug, Clone)]
pub struct ImageMatches {
    pub scores: Vec<f64>,
    pub overlaps: Array2<f64>,
}

impl ImageMatches {
    /// Indices of detections in descending score order, ties by index.
    fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Greedy assignment, best-scored detection first, each to the unmatched
    /// ground truth of highest overlap `>= threshold`. Returns `(score, is_tp)`
    /// in processing order, and the number of matched ground truths.
    pub fn greedy(&self, threshold: f64) -> (Vec<(f64, bool)>, usize) {
        let n_gt = self.overlaps.ncols();
        let mut taken = vec![false; n_gt];
        let mut out = Vec::with_capacity(self.scores.len());
        for d in self.order() {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..n_gt {
                let o = self.overlaps[[d, g]];
                if taken[g] || o < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            out.push((self.scores[d], best.is_some()));
        }
        (out, taken.iter().filter(|t| **t).count())
    }
}

/// 101-point interpolated AP from per-image matchings. `None` without ground truth.
pub fn interpolated_ap(images: &[ImageMatches], n_gt: usize, threshold: f64) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut all: Vec<(f64, bool)> = images.iter().flat_map(|im| im.greedy(threshold).0).collect();
    // stable: ties keep image order, then per-image rank
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(all.len());
    let mut tp_counts = Vec::with_capacity(all.len());
    let mut tp = 0usize;
    for (i, (_, is_tp)) in all.iter().enumerate() {
        tp += *is_tp as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        tp_counts.push(tp);
    }
    // precision envelope
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    let mut pos = 0;
    for r in 0..=100usize {
        // first rank whose recall tp/n_gt reaches r/100, compared in integers
        while pos < tp_counts.len() && tp_counts[pos] * 100 < r * n_gt {
            pos += 1;
        }
        if pos < precision.len() {
            sum += precision[pos];
        }
    }
    Some(sum / 101.0)
}

fn group_by_image<'a, T>(items: impl Iterator<Item = &'a T>, image: impl Fn(&T) -> u64) -> HashMap<u64, Vec<&'a T>>
where
    T: 'a,
{
    let mut map: HashMap<u64, Vec<&T>> = HashMap::new();
    for it in items {
        map.entry(image(it)).or_default().push(it);
    }
    map
}

fn box_matches(dets: &[Detection], gts: &[GroundTruthInstance]) -> (Vec<ImageMatches>, usize) {
    let det_by = group_by_image(dets.iter(), |d| d.image_id);
    let gt_by = group_by_image(gts.iter(), |g| g.image_id);
    let ids: BTreeSet<u64> = det_by.keys().chain(gt_by.keys()).copied().collect();
    let mut out = Vec::new();
    for id in ids {
        let ds = det_by.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        let gs = gt_by.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        out.push(ImageMatches {
            scores: ds.iter().map(|d| d.score).collect(),
            overlaps: Array2::from_shape_fn((ds.len(), gs.len()), |(i, j)| ds[i].bbox.iou(&gs[j].bbox)),
        });
    }
    (out, gts.len())
}

/// Box AP of one category at `iou_threshold`; `None` when there is no ground truth.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruthInstance], iou_threshold: f64) -> Option<f64> {
    let (images, n_gt) = box_matches(dets, gts);
    interpolated_ap(&images, n_gt, iou_threshold)
}

fn recall_from(images: &[ImageMatches], n_gt: usize, threshold: f64) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let matched: usize = images.iter().map(|im| im.greedy(threshold).1).sum();
    Some(matched as f64 / n_gt as f64)
}

/// Fraction of ground truths matched by the `k` best detections of each image.
pub fn recall_at_k(dets: &[Detection], gts: &[GroundTruthInstance], iou_threshold: f64, k: usize) -> Option<f64> {
    let kept = top_k(dets.to_vec(), k);
    let (images, n_gt) = box_matches(&kept, gts);
    recall_from(&images, n_gt, iou_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub origin: Origin,
    pub num_gt: usize,
    pub num_detections: usize,
    /// AP at [`AP_IOU`].
    pub ap: f64,
    /// Recall@k at each of [`RECALL_IOUS`].
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallSummary {
    pub iou: f64,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub hm: Option<f64>,
}

/// All values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TaskMode,
    pub ap_iou: f64,
    pub max_detections: usize,
    /// Categories with at least one ground truth instance.
    pub per_category: Vec<CategoryReport>,
    pub map_seen: Option<f64>,
    pub map_unseen: Option<f64>,
    pub hm_map: Option<f64>,
    pub recall: Vec<RecallSummary>,
    pub seen_detections: usize,
    pub unseen_detections: usize,
}

impl EvalReport {
    pub fn recall_at(&self, iou: f64) -> Option<&RecallSummary> {
        self.recall.iter().find(|r| (r.iou - iou).abs() < 1e-12)
    }

    pub fn hm_recall(&self) -> Option<f64> {
        self.recall_at(AP_IOU).and_then(|r| r.hm)
    }

    /// `mode,metric,iou,seen,unseen,hm` with values ×100; empty cells where not applicable.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{:.4}", 100.0 * x)).unwrap_or_default();
        let mut out = String::from("mode,metric,iou,seen,unseen,hm\n");
        let _ = writeln!(
            out,
            "{},mAP,{},{},{},{}",
            self.mode.name(),
            self.ap_iou,
            cell(self.map_seen),
            cell(self.map_unseen),
            cell(self.hm_map)
        );
        for r in &self.recall {
            let _ = writeln!(
                out,
                "{},Recall@{},{},{},{},{}",
                self.mode.name(),
                self.max_detections,
                r.iou,
                cell(r.seen),
                cell(r.unseen),
                cell(r.hm)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut n, mut s) = (0usize, 0.0);
    for v in values {
        n += 1;
        s += v;
    }
    (n > 0).then(|| s / n as f64)
}

struct MaskCanvas {
    canvas: Option<Array2<bool>>,
}

fn overlaps_for(
    dets: &[&Detection],
    det_masks: &[MaskCanvas],
    gts: &[&GroundTruthInstance],
    gt_masks: &[MaskCanvas],
    masks: bool,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((dets.len(), gts.len()));
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            out[[i, j]] = if !masks {
                d.bbox.iou(&g.bbox)
            } else if d.bbox.intersection(&g.bbox) <= 0.0 {
                0.0
            } else {
                match (&det_masks[i].canvas, &gt_masks[j].canvas) {
                    (Some(a), Some(b)) => mask_iou(a, b)?.unwrap_or(0.0),
                    _ => 0.0,
                }
            };
        }
    }
    Ok(out)
}

/// Scores `dets` against `gt` in the given mode. Seen detections are dropped in
/// the non-generalized modes; detections are capped at [`MAX_DETECTIONS`] per image.
pub fn evaluate(dets: &[Detection], gt: &GroundTruthFile, split: &CategorySplit, mode: TaskMode) -> Result<EvalReport> {
    let origin_of = |name: &str| {
        if split.is_seen(name) {
            Some(Origin::Seen)
        } else if split.is_unseen(name) {
            Some(Origin::Unseen)
        } else {
            None
        }
    };
    for d in dets {
        let origin = origin_of(&d.category).ok_or_else(|| Error::UnknownCategory(d.category.clone()))?;
        if origin != d.origin {
            return Err(Error::Format {
                what: "detections",
                msg: format!("`{}` flagged {:?} but split says {:?}", d.category, d.origin, origin),
            });
        }
        if mode.segmentation() && d.mask.is_none() {
            return Err(Error::Format {
                what: "detections",
                msg: "mask mode requires a mask on every detection".into(),
            });
        }
    }
    let scored: Vec<Detection> = dets
        .iter()
        .filter(|d| mode.generalized() || d.origin == Origin::Unseen)
        .cloned()
        .collect();
    let scored = top_k(scored, MAX_DETECTIONS);

    let mut categories: Vec<(String, Origin)> = Vec::new();
    if mode.generalized() {
        categories.extend(split.seen.iter().map(|c| (c.clone(), Origin::Seen)));
    }
    categories.extend(split.unseen.iter().map(|c| (c.clone(), Origin::Unseen)));

    let image_size: HashMap<u64, (usize, usize)> = gt.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let size_of = |id: u64| {
        image_size.get(&id).copied().ok_or_else(|| Error::Format {
            what: "detections",
            msg: format!("image {id} not in ground truth"),
        })
    };

    let mut per_category = Vec::new();
    for (name, origin) in categories {
        let cat_gts: Vec<&GroundTruthInstance> = gt.annotations.iter().filter(|a| a.category == name).collect();
        if cat_gts.is_empty() {
            continue;
        }
        let cat_dets: Vec<&Detection> = scored.iter().filter(|d| d.category == name).collect();
        let det_by = group_by_image(cat_dets.iter().copied(), |d| d.image_id);
        let gt_by = group_by_image(cat_gts.iter().copied(), |g| g.image_id);
        let ids: BTreeSet<u64> = det_by.keys().chain(gt_by.keys()).copied().collect();
        let mut images = Vec::new();
        for id in ids {
            let ds = det_by.get(&id).cloned().unwrap_or_default();
            let gs = gt_by.get(&id).cloned().unwrap_or_default();
            let (det_masks, gt_masks) = if mode.segmentation() {
                let (w, h) = size_of(id)?;
                let dm = ds
                    .iter()
                    .map(|d| {
                        let probs = d.mask.as_ref().expect("checked above");
                        let grid = MaskGrid::from_probabilities(probs, 0.5)?;
                        Ok(MaskCanvas {
                            canvas: Some(grid.rasterize(&d.bbox, w, h)),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gm = gs
                    .iter()
                    .map(|g| {
                        let grid = g.mask.as_ref().ok_or_else(|| Error::Format {
                            what: "ground truth",
                            msg: "mask mode requires masks on every annotation".into(),
                        })?;
                        Ok(MaskCanvas {
                            canvas: Some(grid.rasterize(&g.bbox, w, h)),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (dm, gm)
            } else {
                (Vec::new(), Vec::new())
            };
            images.push(ImageMatches {
                scores: ds.iter().map(|d| d.score).collect(),
                overlaps: overlaps_for(&ds, &det_masks, &gs, &gt_masks, mode.segmentation())?,
            });
        }
        let n_gt = cat_gts.len();
        per_category.push(CategoryReport {
            name,
            origin,
            num_gt: n_gt,
            num_detections: cat_dets.len(),
            ap: interpolated_ap(&images, n_gt, AP_IOU).expect("n_gt > 0"),
            recall: RECALL_IOUS
                .iter()
                .map(|&t| recall_from(&images, n_gt, t).expect("n_gt > 0"))
                .collect(),
        });
    }

    let agg = |origin: Origin, f: &dyn Fn(&CategoryReport) -> f64| {
        mean(per_category.iter().filter(|c| c.origin == origin).map(f))
    };
    let hm = |s: Option<f64>, u: Option<f64>| match (mode.generalized(), s, u) {
        (true, Some(s), Some(u)) => Some(harmonic_mean(s, u)),
        _ => None,
    };
    let map_seen = if mode.generalized() { agg(Origin::Seen, &|c| c.ap) } else { None };
    let map_unseen = agg(Origin::Unseen, &|c| c.ap);
    let recall = RECALL_IOUS
        .iter()
        .enumerate()
        .map(|(i, &iou)| {
            let seen = if mode.generalized() { agg(Origin::Seen, &|c| c.recall[i]) } else { None };
            let unseen = agg(Origin::Unseen, &|c| c.recall[i]);
            RecallSummary {
                iou,
                seen,
                unseen,
                hm: hm(seen, unseen),
            }
        })
        .collect();

    Ok(EvalReport {
        mode,
        ap_iou: AP_IOU,
        max_detections: MAX_DETECTIONS,
        hm_map: hm(map_seen, map_unseen),
        map_seen,
        map_unseen,
        recall,
        seen_detections: scored.iter().filter(|d| d.origin == Origin::Seen).count(),
        unseen_detections: scored.iter().filter(|d| d.origin == Origin::Unseen).count(),
        per_category,
    })
}

/// [`evaluate`] on a detections JSON-lines file and a ground-truth JSON file.
pub fn evaluate_files(
    detections: impl AsRef<Path>,
    ground_truth: impl AsRef<Path>,
    split: &CategorySplit,
    mode: TaskMode,
) -> Result<EvalReport> {
    let dets = read_detections(detections)?;
    let gt = GroundTruthFile::load(ground_truth)?;
    evaluate(&dets, &gt, split, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::ImageInfo;

    fn det(image_id: u64, cat: &str, origin: Origin, score: f64, b: [f64; 4]) -> Detection {
        Detection {
            image_id,
            category: cat.into(),
            origin,
            score,
            bbox: b.into(),
            mask: None,
        }
    }

    fn gt(image_id: u64, cat: &str, b: [f64; 4]) -> GroundTruthInstance {
        GroundTruthInstance {
            image_id,
            category: cat.into(),
            bbox: b.into(),
            mask: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert!((box_iou(&a, &BBox::new(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        let m = Array2::from_shape_fn((4, 4), |(r, _)| r < 2);
        let n = Array2::from_shape_fn((4, 4), |(r, _)| r >= 2);
        assert_eq!(mask_iou(&m, &m).unwrap(), Some(1.0));
        assert_eq!(mask_iou(&m, &n).unwrap(), Some(0.0));
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), None);
        assert!(mask_iou(&m, &Array2::from_elem((3, 3), false)).is_err());
    }

    #[test]
    fn ap_examples() {
        let g = vec![gt(1, "a", [0., 0., 10., 10.])];
        let tp = det(1, "a", Origin::Seen, 0.9, [0., 0., 10., 10.]);
        assert_eq!(average_precision(&[tp.clone()], &g, 0.5), Some(1.0));
        let fp = det(1, "a", Origin::Seen, 0.8, [50., 50., 60., 60.]);
        assert_eq!(average_precision(&[tp.clone(), fp.clone()], &g, 0.5), Some(1.0));
        assert_eq!(average_precision(&[fp.clone()], &g, 0.5), Some(0.0));
        assert_eq!(average_precision(&[fp], &[], 0.5), None);
        // FP ranked above the TP halves precision at every recall point
        let fp_hi = det(1, "a", Origin::Seen, 0.95, [50., 50., 60., 60.]);
        assert_eq!(average_precision(&[tp, fp_hi], &g, 0.5), Some(0.5));
    }

    #[test]
    fn recall_examples() {
        let g = vec![gt(1, "a", [0., 0., 10., 10.]), gt(1, "a", [20., 20., 30., 30.])];
        let d = vec![det(1, "a", Origin::Seen, 0.9, [1., 1., 11., 11.])];
        assert_eq!(recall_at_k(&d, &g, 0.5, 100), Some(0.5));
        let r4 = recall_at_k(&d, &g, 0.4, 100).unwrap();
        let r6 = recall_at_k(&d, &g, 0.6, 100).unwrap();
        let r7 = recall_at_k(&d, &g, 0.7, 100).unwrap();
        assert!(r7 <= r6 && r6 <= r4);
        assert_eq!(r7, 0.0);
        assert_eq!(recall_at_k(&d, &g, 0.5, 0), Some(0.0));
    }

    #[test]
    fn harmonic_mean_values() {
        assert!((harmonic_mean(47.3, 9.4) - 15.7).abs() <= 0.05);
        assert!((harmonic_mean(68.5, 55.1) - 61.1).abs() <= 0.05);
        assert_eq!(harmonic_mean(3.0, 3.0), 3.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    fn scene() -> (GroundTruthFile, CategorySplit) {
        let gt_file = GroundTruthFile {
            images: vec![ImageInfo { id: 1, width: 40, height: 40 }],
            categories: vec!["a".into(), "u".into()],
            annotations: vec![gt(1, "a", [0., 0., 10., 10.]), gt(1, "u", [20., 20., 30., 30.])],
        };
        (gt_file, CategorySplit::parse("seen: a\nunseen: u\n").unwrap())
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let (g, split) = scene();
        let perfect: Vec<Detection> = g
            .annotations
            .iter()
            .map(|a| {
                let origin = if a.category == "a" { Origin::Seen } else { Origin::Unseen };
                det(1, &a.category, origin, 0.9, a.bbox.to_array())
            })
            .collect();
        let r = evaluate(&perfect, &g, &split, TaskMode::Gzsd).unwrap();
        assert_eq!((r.map_seen, r.map_unseen, r.hm_map), (Some(1.0), Some(1.0), Some(1.0)));
        assert!(r.recall.iter().all(|x| x.hm == Some(1.0)));

        let z = evaluate(&perfect, &g, &split, TaskMode::Zsd).unwrap();
        assert_eq!(z.map_seen, None);
        assert_eq!(z.hm_map, None);
        assert!(z.per_category.iter().all(|c| c.origin == Origin::Unseen));
        assert_eq!(z.seen_detections, 0);

        let e = evaluate(&[], &g, &split, TaskMode::Gzsd).unwrap();
        assert_eq!((e.map_seen, e.map_unseen, e.hm_map), (Some(0.0), Some(0.0), Some(0.0)));
        assert!(e.to_csv().starts_with("mode,metric,iou,seen,unseen,hm\ngzsd,mAP,0.5,0.0000,0.0000,0.0000\n"));
    }

    #[test]
    fn unknown_category_is_rejected() {
        let (g, split) = scene();
        let bad = vec![det(1, "zebra", Origin::Unseen, 0.5, [0., 0., 1., 1.])];
        assert!(matches!(evaluate(&bad, &g, &split, TaskMode::Zsd), Err(Error::UnknownCategory(_))));
    }

    #[test]
    fn mask_mode_matches_on_masks() {
        let (mut g, split) = scene();
        for a in &mut g.annotations {
            a.mask = Some(MaskGrid::from_fn(4, |(r, _)| r < 2));
        }
        let top_half = Array2::from_shape_fn((4, 4), |(r, _)| if r < 2 { 0.9 } else { 0.1 });
        let bottom_half = Array2::from_shape_fn((4, 4), |(r, _)| if r >= 2 { 0.9 } else { 0.1 });
        let mut good = det(1, "u", Origin::Unseen, 0.9, [20., 20., 30., 30.]);
        good.mask = Some(top_half);
        let r = evaluate(&[good.clone()], &g, &split, TaskMode::Zsi).unwrap();
        assert_eq!(r.map_unseen, Some(1.0));
        // same box, wrong mask
        let mut bad = good.clone();
        bad.mask = Some(bottom_half);
        let r = evaluate(&[bad], &g, &split, TaskMode::Zsi).unwrap();
        assert_eq!(r.map_unseen, Some(0.0));
        // empty predicted mask never matches
        let mut empty = good;
        empty.mask = Some(Array2::zeros((4, 4)));
        assert_eq!(evaluate(&[empty], &g, &split, TaskMode::Zsi).unwrap().map_unseen, Some(0.0));
    }
}
