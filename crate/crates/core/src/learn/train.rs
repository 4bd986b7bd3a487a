//! Second-stage fine-tuning of the head projections on frozen proposal features.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{BackgroundKind, CategorySpace, CategorySplit, EmbeddingTable};
use crate::error::{Error, Result};
use crate::heads::{HeadParams, ProposalRecord};

use super::loss::{
    accumulate, classifier_loss_grad, mask_loss_grad, regression_loss_grad, ClassifierLoss, HeadGrads,
};
use super::matching::{match_proposals, GroundTruthInstance, MatchTarget, MatchedSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Positives per mini-batch; the classifier also sees as many backgrounds.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: ClassifierLoss,
    pub background: BackgroundKind,
    pub iou_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            iterations: 3000,
            batch_size: 16,
            seed: 0,
            loss: ClassifierLoss::CrossEntropy,
            background: BackgroundKind::Learned,
            iou_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config("iou_threshold must be in (0, 1)".into()));
        }
        if let ClassifierLoss::MaxMargin { margin } = self.loss {
            if !(margin > 0.0 && margin.is_finite()) {
                return Err(Error::Config("max-margin margin must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Loss components of one mini-batch, each averaged over the samples it applies to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub classifier: f64,
    pub regression: f64,
    pub mask: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub log: Vec<LossRecord>,
    pub positives: usize,
    pub backgrounds: usize,
}

/// Cycles through a set of indices, reshuffling at each epoch boundary.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(items: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let mut order = items;
        order.shuffle(rng);
        EpochSampler { order, cursor: 0 }
    }

    fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Feature sizes `(p, optional (n, t))` shared by every proposal.
pub(crate) fn feature_dims(proposals: &[ProposalRecord]) -> Result<(usize, Option<(usize, usize)>)> {
    let first = proposals
        .first()
        .ok_or_else(|| Error::Config("empty dataset: no proposals".into()))?;
    let p = first.z.len();
    let mask = proposals.iter().find_map(|r| r.zm.as_ref()).map(|zm| {
        let (n, _, t) = zm.dim();
        (n, t)
    });
    for prop in proposals {
        prop.validate(p, mask)?;
    }
    Ok((p, mask))
}

/// Fine-tunes `W^cls`, `W^reg_r`, `W^seg` (and a learned background) with SGD
/// plus momentum. Proposal features and embeddings are read-only inputs.
///
/// Only seen categories and the background are scored during training; the
/// unseen rows never enter a loss.
pub fn train_heads(
    proposals: &[ProposalRecord],
    gts: &[GroundTruthInstance],
    table: &EmbeddingTable,
    split: &CategorySplit,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let space = CategorySpace::new(table, split)?;
    for gt in gts {
        if !split.is_seen(&gt.category) {
            return Err(Error::Split(format!(
                "training annotation uses non-seen category `{}`",
                gt.category
            )));
        }
        gt.bbox.validate()?;
    }
    if proposals.is_empty() && config.iterations > 0 {
        return Err(Error::Config("empty dataset with iterations > 0".into()));
    }
    let (p, mask_dims) = feature_dims(proposals)?;
    let t = mask_dims.map_or(1, |(_, t)| t);
    let d = space.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = HeadParams::init(d, p, t, config.background, &space.seen_raw, &mut rng);
    let matches = match_proposals(proposals, gts, &space.seen_names, config.iou_threshold)?;
    let (pos, bg): (Vec<usize>, Vec<usize>) = (0..matches.len()).partition(|&i| matches[i].is_positive());
    let (n_pos, n_bg) = (pos.len(), bg.len());
    let mut positives = EpochSampler::new(pos, &mut rng);
    let mut backgrounds = EpochSampler::new(bg, &mut rng);

    let mut velocity = vec![0.0; params.len()];
    let mut log = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let mut batch: Vec<&MatchedSample> = Vec::new();
        let n_pos_batch = if positives.is_empty() { 0 } else { config.batch_size };
        for _ in 0..n_pos_batch {
            batch.push(&matches[positives.next(&mut rng)]);
        }
        let n_bg_batch = if backgrounds.is_empty() {
            0
        } else if n_pos_batch == 0 {
            config.batch_size
        } else {
            n_pos_batch
        };
        for _ in 0..n_bg_batch {
            batch.push(&matches[backgrounds.next(&mut rng)]);
        }

        let (record, grads) = batch_loss_grad(&params, &space, proposals, &batch, config.loss)?;
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {iteration}")));
        }
        log.push(LossRecord { iteration, ..record });

        let mut theta = params.flat();
        for ((th, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grads.flat()) {
            *v = config.momentum * *v - config.learning_rate * g;
            *th += *v;
        }
        params.set_flat(&theta)?;
    }

    Ok(TrainOutcome {
        params,
        log,
        positives: n_pos,
        backgrounds: n_bg,
    })
}

/// Mini-batch objective: mean classifier loss + mean smooth-L1 over positives +
/// mean mask BCE over positives with mask targets.
pub fn batch_loss_grad(
    params: &HeadParams,
    space: &CategorySpace,
    proposals: &[ProposalRecord],
    batch: &[&MatchedSample],
    loss: ClassifierLoss,
) -> Result<(LossRecord, HeadGrads)> {
    let seen_bg = space.seen_with_background(&params.background)?;
    let bg_index = space.num_seen();

    let mut cls_terms: Vec<(usize, usize)> = Vec::new();
    let mut reg_terms = Vec::new();
    let mut mask_terms = Vec::new();
    for sample in batch {
        match &sample.target {
            MatchTarget::Background => {
                // no natural target embedding for the L2 objective
                if !matches!(loss, ClassifierLoss::L2Error) {
                    cls_terms.push((sample.proposal, bg_index));
                }
            }
            MatchTarget::Object(o) => {
                cls_terms.push((sample.proposal, o.category));
                reg_terms.push((sample.proposal, o));
                if let (Some(target), Some(_)) = (&o.mask, &proposals[sample.proposal].zm) {
                    mask_terms.push((sample.proposal, o.category, target));
                }
            }
        }
    }

    let mut grads = HeadGrads::zeros_like(params);
    let mut record = LossRecord {
        iteration: 0,
        total: 0.0,
        classifier: 0.0,
        regression: 0.0,
        mask: 0.0,
    };
    let scale = |n: usize| 1.0 / n.max(1) as f64;

    if matches!(loss, ClassifierLoss::MaxMargin { .. }) {
        // cosines are undefined for a zero projection; such a sample (e.g. an
        // all-zero feature) carries no gradient for W^cls either way
        cls_terms.retain(|&(pi, _)| params.w_cls.dot(&proposals[pi].z).iter().any(|v| *v != 0.0));
    }
    let w = scale(cls_terms.len());
    for &(pi, target) in &cls_terms {
        let (l, g) = classifier_loss_grad(loss, proposals[pi].z.view(), params, &seen_bg, target)?;
        record.classifier += w * l;
        accumulate(&mut grads, &g, w);
    }
    let w = scale(reg_terms.len());
    for &(pi, o) in &reg_terms {
        let (l, g, _) = regression_loss_grad(proposals[pi].z.view(), params, space.seen_norm.row(o.category), &o.deltas)?;
        record.regression += w * l;
        accumulate(&mut grads, &g, w);
    }
    let w = scale(mask_terms.len());
    for &(pi, c, target) in &mask_terms {
        let zm = proposals[pi].zm.as_ref().expect("checked above");
        let (l, g) = mask_loss_grad(zm, params, space.seen_norm.row(c), target)?;
        record.mask += w * l;
        accumulate(&mut grads, &g, w);
    }
    record.total = record.classifier + record.regression + record.mask;
    Ok((record, grads))
}

/// Mean classifier cross-entropy over all matched proposals, for sanity checks.
pub fn dataset_ce_loss(
    params: &HeadParams,
    space: &CategorySpace,
    proposals: &[ProposalRecord],
    matches: &[MatchedSample],
) -> Result<f64> {
    let seen_bg: Array2<f64> = space.seen_with_background(&params.background)?;
    let mut total = 0.0;
    for m in matches {
        let target = match &m.target {
            MatchTarget::Background => space.num_seen(),
            MatchTarget::Object(o) => o.category,
        };
        let (l, _) = super::loss::ce_head_loss_grad(proposals[m.proposal].z.view(), params, &seen_bg, target)?;
        total += l;
    }
    Ok(total / matches.len().max(1) as f64)
}
