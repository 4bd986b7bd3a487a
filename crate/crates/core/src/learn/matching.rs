//! Assignment of proposals to ground truth and box-delta encoding.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::heads::ProposalRecord;
use crate::mask::MaskGrid;

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub image_id: u64,
    pub category: String,
    pub bbox: BBox,
    /// Binary grid registered to `bbox`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub gt: usize,
    /// Index into the seen category list.
    pub category: usize,
    pub iou: f64,
    pub deltas: [f64; 4],
    /// `n x n` 0/1 grid over the proposal box, when both a GT mask and `zm` exist.
    pub mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatchTarget {
    Background,
    Object(ObjectTarget),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    pub proposal: usize,
    pub target: MatchTarget,
}

impl MatchedSample {
    pub fn is_positive(&self) -> bool {
        matches!(self.target, MatchTarget::Object(_))
    }
}

/// Corner deltas normalized by the proposal size:
/// `((gx1-px1)/pw, (gy1-py1)/ph, (gx2-px2)/pw, (gy2-py2)/ph)`.
pub fn encode_box(proposal: &BBox, target: &BBox) -> Result<[f64; 4]> {
    let (pw, ph) = (proposal.width(), proposal.height());
    if !(pw > 0.0 && ph > 0.0) {
        return Err(Error::InvalidBox(proposal.to_array()));
    }
    Ok([
        (target.x1 - proposal.x1) / pw,
        (target.y1 - proposal.y1) / ph,
        (target.x2 - proposal.x2) / pw,
        (target.y2 - proposal.y2) / ph,
    ])
}

/// Assigns every proposal to its highest-IoU ground truth in the same image
/// (lowest index on ties) when that IoU reaches `iou_threshold`, otherwise to
/// background. `categories` maps GT category names to target indices.
pub fn match_proposals(
    proposals: &[ProposalRecord],
    gts: &[GroundTruthInstance],
    categories: &[String],
    iou_threshold: f64,
) -> Result<Vec<MatchedSample>> {
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, gt) in gts.iter().enumerate() {
        by_image.entry(gt.image_id).or_default().push(i);
    }
    let category_index: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    proposals
        .iter()
        .enumerate()
        .map(|(pi, prop)| {
            let mut best: Option<(usize, f64)> = None;
            for &gi in by_image.get(&prop.image_id).map(Vec::as_slice).unwrap_or(&[]) {
                let iou = prop.pbox.iou(&gts[gi].bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let target = match best {
                Some((gi, iou)) if iou >= iou_threshold => {
                    let gt = &gts[gi];
                    let category = *category_index
                        .get(gt.category.as_str())
                        .ok_or_else(|| Error::UnknownCategory(gt.category.clone()))?;
                    let mask = match (&gt.mask, &prop.zm) {
                        (Some(m), Some(zm)) => Some(m.resample(&gt.bbox, &prop.pbox, zm.dim().0)),
                        _ => None,
                    };
                    MatchTarget::Object(ObjectTarget {
                        gt: gi,
                        category,
                        iou,
                        deltas: encode_box(&prop.pbox, &gt.bbox)?,
                        mask,
                    })
                }
                _ => MatchTarget::Background,
            };
            Ok(MatchedSample {
                proposal: pi,
                target,
            })
        })
        .collect()
}
