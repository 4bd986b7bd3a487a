//! From head outputs to a ranked, per-image detection list:
//! candidate generation, seen-score floor (β), category-wise NMS, top-k.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::embed::CategorySpace;
use crate::error::{Error, Result};
use crate::heads::{
    class_probabilities, reg_deltas, seg_logits, sigmoid, unseen_reg_by_variant, unseen_seg_by_variant, HeadParams,
    ProposalRecord, TransferVariant,
};
use crate::io::ImageInfo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seen,
    Unseen,
}

/// Evaluation/inference setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Unseen categories only, boxes.
    #[default]
    Zsd,
    /// Seen and unseen, boxes.
    Gzsd,
    /// Unseen only, masks.
    Zsi,
    /// Seen and unseen, masks.
    Gzsi,
}

impl TaskMode {
    pub const ALL: [TaskMode; 4] = [TaskMode::Zsd, TaskMode::Gzsd, TaskMode::Zsi, TaskMode::Gzsi];

    pub fn generalized(&self) -> bool {
        matches!(self, TaskMode::Gzsd | TaskMode::Gzsi)
    }

    pub fn segmentation(&self) -> bool {
        matches!(self, TaskMode::Zsi | TaskMode::Gzsi)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskMode::Zsd => "zsd",
            TaskMode::Gzsd => "gzsd",
            TaskMode::Zsi => "zsi",
            TaskMode::Gzsi => "gzsi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category: String,
    pub origin: Origin,
    pub score: f64,
    pub bbox: BBox,
    /// `n x n` probabilities registered to `bbox`.
    pub mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Seen candidates scoring strictly below this are dropped. Values above 1 drop all seen.
    pub beta: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
    pub mask_threshold: f64,
    pub mode: TaskMode,
    pub reg_variant: TransferVariant,
    pub seg_variant: TransferVariant,
    /// Apply the β floor after NMS instead of before.
    pub beta_after_nms: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            beta: 0.05,
            nms_iou: 0.5,
            max_per_image: 100,
            mask_threshold: 0.5,
            mode: TaskMode::Zsd,
            reg_variant: TransferVariant::Learned,
            seg_variant: TransferVariant::Learned,
            beta_after_nms: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || self.beta.is_nan() {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms_iou must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("mask_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Inverse of the corner-delta encoding, followed by corner repair and optional clipping.
pub fn decode_box(proposal: &BBox, deltas: &[f64; 4], bounds: Option<(f64, f64)>) -> BBox {
    let (pw, ph) = (proposal.width(), proposal.height());
    let b = BBox::new(
        proposal.x1 + deltas[0] * pw,
        proposal.y1 + deltas[1] * ph,
        proposal.x2 + deltas[2] * pw,
        proposal.y2 + deltas[3] * ph,
    )
    .repaired();
    match bounds {
        Some((w, h)) => b.clipped(w, h),
        None => b,
    }
}

fn beta_keep(dets: &[Detection], idx: &[usize], beta: f64) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| !(dets[i].origin == Origin::Seen && dets[i].score < beta))
        .collect()
}

/// Descending score, ascending index on ties.
fn rank(dets: &[Detection], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
}

fn nms_keep(dets: &[Detection], idx: &[usize], iou: f64) -> Vec<usize> {
    let mut groups: BTreeMap<(u64, &str), Vec<usize>> = BTreeMap::new();
    for &i in idx {
        groups
            .entry((dets[i].image_id, dets[i].category.as_str()))
            .or_default()
            .push(i);
    }
    let mut kept = Vec::new();
    for (_, mut members) in groups {
        rank(dets, &mut members);
        let mut survivors: Vec<usize> = Vec::new();
        for i in members {
            if survivors.iter().all(|&k| dets[k].bbox.iou(&dets[i].bbox) <= iou) {
                survivors.push(i);
            }
        }
        kept.extend(survivors);
    }
    // back to input order
    let order: HashMap<usize, usize> = idx.iter().enumerate().map(|(pos, &i)| (i, pos)).collect();
    kept.sort_by_key(|i| order[i]);
    kept
}

fn top_k_keep(dets: &[Detection], idx: &[usize], k: usize) -> Vec<usize> {
    let mut images: Vec<u64> = Vec::new();
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for &i in idx {
        let id = dets[i].image_id;
        by_image
            .entry(id)
            .or_insert_with(|| {
                images.push(id);
                Vec::new()
            })
            .push(i);
    }
    let mut out = Vec::new();
    for id in images {
        let mut members = by_image.remove(&id).unwrap_or_default();
        rank(dets, &mut members);
        members.truncate(k);
        out.extend(members);
    }
    out
}

fn select(dets: Vec<Detection>, keep: &[usize]) -> Vec<Detection> {
    let mut slots: Vec<Option<Detection>> = dets.into_iter().map(Some).collect();
    keep.iter().map(|&i| slots[i].take().expect("index kept once")).collect()
}

/// Drops seen detections scoring strictly below `beta`; unseen ones and order are untouched.
pub fn beta_filter(dets: Vec<Detection>, beta: f64) -> Vec<Detection> {
    let idx: Vec<usize> = (0..dets.len()).collect();
    let keep = beta_keep(&dets, &idx, beta);
    select(dets, &keep)
}

/// Greedy NMS within each (image, category); survivors keep their input order.
pub fn per_class_nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let idx: Vec<usize> = (0..dets.len()).collect();
    let keep = nms_keep(&dets, &idx, iou_threshold);
    select(dets, &keep)
}

/// The `k` best detections of each image, best first; images in order of first appearance.
pub fn top_k(dets: Vec<Detection>, k: usize) -> Vec<Detection> {
    let idx: Vec<usize> = (0..dets.len()).collect();
    let keep = top_k_keep(&dets, &idx, k);
    select(dets, &keep)
}

/// What a candidate refers to, for computing its mask after selection.
#[derive(Clone, Copy)]
struct Source {
    proposal: usize,
    class: usize,
}

/// Detections for the proposals of one image.
pub fn predict_image(
    proposals: &[ProposalRecord],
    params: &HeadParams,
    space: &CategorySpace,
    config: &InferConfig,
    image_size: Option<(f64, f64)>,
) -> Result<Vec<Detection>> {
    config.validate()?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let seen_bg = space.seen_with_background(&params.background)?;
    let ns = space.num_seen();
    let mut cands = Vec::new();
    let mut sources = Vec::new();
    for (pi, prop) in proposals.iter().enumerate() {
        let probs = class_probabilities(prop.z.view(), params, &seen_bg, &space.unseen_norm)?;
        if config.mode.generalized() {
            let deltas = reg_deltas(prop.z.view(), params, &space.seen_norm)?;
            for c in 0..ns {
                let d = [deltas[[c, 0]], deltas[[c, 1]], deltas[[c, 2]], deltas[[c, 3]]];
                cands.push(Detection {
                    image_id: prop.image_id,
                    category: space.seen_names[c].clone(),
                    origin: Origin::Seen,
                    score: probs[c],
                    bbox: decode_box(&prop.pbox, &d, image_size),
                    mask: None,
                });
                sources.push(Source { proposal: pi, class: c });
            }
        }
        let deltas = unseen_reg_by_variant(
            prop.z.view(),
            params,
            &space.seen_norm,
            &space.unseen_norm,
            config.reg_variant,
        )?;
        for u in 0..space.num_unseen() {
            let d = [deltas[[u, 0]], deltas[[u, 1]], deltas[[u, 2]], deltas[[u, 3]]];
            cands.push(Detection {
                image_id: prop.image_id,
                category: space.unseen_names[u].clone(),
                origin: Origin::Unseen,
                score: probs[ns + 1 + u],
                bbox: decode_box(&prop.pbox, &d, image_size),
                mask: None,
            });
            sources.push(Source { proposal: pi, class: u });
        }
    }

    let all: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].score > 0.0).collect();
    let kept = if config.beta_after_nms {
        let after_nms = nms_keep(&cands, &all, config.nms_iou);
        beta_keep(&cands, &after_nms, config.beta)
    } else {
        let after_beta = beta_keep(&cands, &all, config.beta);
        nms_keep(&cands, &after_beta, config.nms_iou)
    };
    let kept = top_k_keep(&cands, &kept, config.max_per_image);

    let mut out = Vec::with_capacity(kept.len());
    for i in kept {
        let mut det = cands[i].clone();
        if config.mode.segmentation() {
            let src = sources[i];
            let zm = proposals[src.proposal]
                .zm
                .as_ref()
                .ok_or_else(|| Error::Shape("segmentation mode needs mask features (zm)".into()))?;
            let logits = match det.origin {
                Origin::Seen => seg_logits(zm, params, &space.seen_norm.slice(s![src.class..src.class + 1, ..]).to_owned())?,
                Origin::Unseen => {
                    let all = unseen_seg_by_variant(zm, params, &space.seen_norm, &space.unseen_norm, config.seg_variant)?;
                    all.slice(s![.., .., src.class..src.class + 1]).to_owned()
                }
            };
            det.mask = Some(logits.slice(s![.., .., 0]).mapv(sigmoid));
        }
        out.push(det);
    }
    Ok(out)
}

/// Runs [`predict_image`] over every image, in image order. Proposals for
/// images not listed are ignored.
pub fn predict_dataset(
    proposals: &[ProposalRecord],
    images: &[ImageInfo],
    params: &HeadParams,
    space: &CategorySpace,
    config: &InferConfig,
) -> Result<Vec<Detection>> {
    let mut by_image: HashMap<u64, Vec<ProposalRecord>> = HashMap::new();
    for p in proposals {
        by_image.entry(p.image_id).or_default().push(p.clone());
    }
    let mut out = Vec::new();
    for img in images {
        if let Some(props) = by_image.get(&img.id) {
            let size = Some((img.width as f64, img.height as f64));
            out.extend(predict_image(props, params, space, config, size)?);
        }
    }
    Ok(out)
}
