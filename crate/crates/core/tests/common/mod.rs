//! Shared oracles and property checks for the integration suites.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use zsdet::bbox::BBox;
use zsdet::heads::softmax;
use zsdet::infer::{decode_box, per_class_nms};
use zsdet::learn::{encode_box, GroundTruthInstance};
use zsdet::metrics::recall_at_k;
use zsdet::{Detection, Origin};

// ---------------------------------------------------------------------------
// brute-force evaluator

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// True-positive flags of `dets` (given in processing order) against `gts` of one image.
fn naive_match(dets: &[[f64; 4]], gts: &[[f64; 4]], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for d in dets {
        let mut pick: Option<usize> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || iou(d, gt) < thr {
                continue;
            }
            match pick {
                Some(p) if iou(d, &gts[p]) >= iou(d, gt) => {}
                _ => pick = Some(g),
            }
        }
        if let Some(g) = pick {
            used[g] = true;
        }
        flags.push(pick.is_some());
    }
    flags
}

/// Detections of one category as `(image, score, box)`.
pub type Dets = Vec<(u64, f64, [f64; 4])>;
pub type Gts = Vec<(u64, [f64; 4])>;

fn sorted(dets: &Dets) -> Dets {
    let mut d = dets.clone();
    d.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    d
}

/// 101-point interpolated AP, written directly from the definition:
/// p_interp(r) = max precision over ranks whose recall is at least r.
pub fn oracle_ap(dets: &Dets, gts: &Gts, thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let d = sorted(dets);
    let images: Vec<u64> = {
        let mut v: Vec<u64> = d.iter().map(|x| x.0).chain(gts.iter().map(|x| x.0)).collect();
        v.sort();
        v.dedup();
        v
    };
    let mut tp = vec![false; d.len()];
    for img in images {
        let idx: Vec<usize> = (0..d.len()).filter(|&i| d[i].0 == img).collect();
        let boxes: Vec<[f64; 4]> = idx.iter().map(|&i| d[i].2).collect();
        let g: Vec<[f64; 4]> = gts.iter().filter(|x| x.0 == img).map(|x| x.1).collect();
        for (k, flag) in naive_match(&boxes, &g, thr).into_iter().enumerate() {
            tp[idx[k]] = flag;
        }
    }
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut hits = 0.0;
    for (i, t) in tp.iter().enumerate() {
        if *t {
            hits += 1.0;
        }
        prec.push(hits / (i as f64 + 1.0));
        rec.push(hits / gts.len() as f64);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = (0..prec.len()).filter(|&j| rec[j] >= r).map(|j| prec[j]).fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub fn oracle_recall(dets: &Dets, gts: &Gts, thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let d = sorted(dets);
    let mut matched = 0;
    let mut images: Vec<u64> = gts.iter().map(|x| x.0).collect();
    images.sort();
    images.dedup();
    for img in images {
        let boxes: Vec<[f64; 4]> = d.iter().filter(|x| x.0 == img).map(|x| x.2).collect();
        let g: Vec<[f64; 4]> = gts.iter().filter(|x| x.0 == img).map(|x| x.1).collect();
        matched += naive_match(&boxes, &g, thr).iter().filter(|f| **f).count();
    }
    Some(matched as f64 / gts.len() as f64)
}

// ---------------------------------------------------------------------------
// strategies

pub fn coord_box() -> impl Strategy<Value = BBox> {
    (0.0..90.0f64, 0.0..90.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

/// Boxes with dyadic corners and power-of-two sides.
pub fn dyadic_box() -> impl Strategy<Value = BBox> {
    (0u32..512, 0u32..512, 0u32..8, 0u32..8).prop_map(|(x, y, lw, lh)| {
        let (x, y) = (x as f64 / 4.0, y as f64 / 4.0);
        BBox::new(x, y, x + (1u32 << lw) as f64, y + (1u32 << lh) as f64)
    })
}

pub fn detection() -> impl Strategy<Value = Detection> {
    (0u64..3, 0usize..3, 0.0..1.0f64, coord_box()).prop_map(|(image_id, c, score, bbox)| Detection {
        image_id,
        category: format!("k{c}"),
        origin: if c == 0 { Origin::Seen } else { Origin::Unseen },
        score,
        bbox,
        mask: None,
    })
}

pub fn ground_truth() -> impl Strategy<Value = GroundTruthInstance> {
    (0u64..3, coord_box()).prop_map(|(image_id, bbox)| GroundTruthInstance {
        image_id,
        category: "k0".into(),
        bbox,
        mask: None,
    })
}

// ---------------------------------------------------------------------------
// property bodies, shared by the proptest suite and the acceptance harness

pub fn prop_softmax(logits: &[f64]) -> Result<(), TestCaseError> {
    let p = softmax(logits).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let sum: f64 = p.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-9, "sum {}", sum);
    prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    let shifted: Vec<f64> = logits.iter().map(|v| v + 7.5).collect();
    let q = softmax(&shifted).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (a, b) in p.iter().zip(q.iter()) {
        prop_assert!((a - b).abs() <= 1e-9);
    }
    Ok(())
}

pub fn prop_row_normalization(rows: &[Vec<f64>]) -> Result<(), TestCaseError> {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let m = ndarray::Array2::from_shape_vec((rows.len(), d), flat).unwrap();
    let zero = rows.iter().any(|r| r.iter().all(|v| *v == 0.0));
    match zsdet::embed::normalize_rows(&m) {
        Ok(n) => {
            prop_assert!(!zero);
            for (i, row) in n.outer_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-9, "row {} norm {}", i, norm);
                // same direction as the input row
                let dot: f64 = row.iter().zip(&rows[i]).map(|(a, b)| a * b).sum();
                prop_assert!(dot > 0.0);
            }
        }
        Err(_) => prop_assert!(zero),
    }
    Ok(())
}

pub fn prop_nms(dets: Vec<Detection>, thr: f64) -> Result<(), TestCaseError> {
    let once = per_class_nms(dets.clone(), thr);
    let twice = per_class_nms(once.clone(), thr);
    prop_assert_eq!(&once, &twice);
    for (i, a) in once.iter().enumerate() {
        for b in &once[i + 1..] {
            if a.image_id == b.image_id && a.category == b.category {
                prop_assert!(a.bbox.iou(&b.bbox) <= thr);
            }
        }
    }
    // each suppressed detection is covered by a kept one of the same class that ranks at least as high
    for d in &dets {
        if once.contains(d) {
            continue;
        }
        prop_assert!(once.iter().any(|k| k.image_id == d.image_id
            && k.category == d.category
            && k.score >= d.score
            && k.bbox.iou(&d.bbox) > thr));
    }
    Ok(())
}

pub fn prop_recall_monotone(dets: &[Detection], gts: &[GroundTruthInstance], t1: f64, t2: f64) -> Result<(), TestCaseError> {
    let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
    let dets: Vec<Detection> = dets.iter().filter(|d| d.category == "k0").cloned().collect();
    let r_lo = recall_at_k(&dets, gts, lo, 100);
    let r_hi = recall_at_k(&dets, gts, hi, 100);
    match (r_lo, r_hi) {
        (Some(a), Some(b)) => prop_assert!(a >= b, "recall {} at {} < {} at {}", a, lo, b, hi),
        (None, None) => prop_assert!(gts.is_empty()),
        _ => prop_assert!(false, "inconsistent None"),
    }
    Ok(())
}

pub fn prop_roundtrip_exact(p: &BBox, g: &BBox) -> Result<(), TestCaseError> {
    let d = encode_box(p, g).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(decode_box(p, &d, None), *g);
    Ok(())
}

pub fn prop_roundtrip_general(p: &BBox, g: &BBox) -> Result<(), TestCaseError> {
    let d = encode_box(p, g).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let back = decode_box(p, &d, None);
    let scale = p.to_array().iter().chain(&g.to_array()).fold(1.0f64, |m, v| m.max(v.abs()));
    for (a, e) in back.to_array().iter().zip(g.to_array()) {
        prop_assert!((a - e).abs() <= 4.0 * f64::EPSILON * scale, "{} vs {}", a, e);
    }
    Ok(())
}
