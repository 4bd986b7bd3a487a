//! Losses, proposal matching, head fine-tuning and gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod train;

pub use gradcheck::{finite_diff_check, gradient_suite, GradCheck, SuiteLoss, SuiteResult};
pub use loss::{
    bce_mask_grad, ce_loss_grad, l2error_loss_grad, maxmargin_loss_grad, smooth_l1_grad, ClassifierLoss,
    HeadGrads,
};
pub use matching::{encode_box, match_proposals, GroundTruthInstance, MatchTarget, MatchedSample, ObjectTarget};
pub use train::{train_heads, LossRecord, TrainConfig, TrainOutcome};
