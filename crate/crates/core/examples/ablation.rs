//! Reproduce the component ablations on synthetic data: every row shares the
//! dataset and seeds and changes exactly one component.

use zsdet::bench::{ablation, AblationAxis, Dataset, RunConfig};
use zsdet::{generate, TaskMode};

fn main() -> zsdet::Result<()> {
    let mut config = RunConfig::default();
    config.synth.images = 100;
    config.train.iterations = 1500;
    config.train.iou_threshold = 0.3;
    let ds: Dataset = generate(&config.synth)?.into();

    for (axis, mode) in [
        (AblationAxis::Background, TaskMode::Gzsd),
        (AblationAxis::ClassifierLoss, TaskMode::Gzsd),
        (AblationAxis::RegressorTransfer, TaskMode::Zsd),
        (AblationAxis::SegmentorTransfer, TaskMode::Zsi),
    ] {
        config.infer.mode = mode;
        println!("== {} ({})", axis.name(), mode.name());
        for e in ablation(&ds, &config, axis)? {
            let r = &e.row;
            let pct = |v: Option<f64>| v.map_or_else(|| "    -".to_string(), |x| format!("{:5.1}", 100.0 * x));
            println!(
                "{:<20} mAP seen {} unseen {} HM {}   recall seen {} unseen {} HM {}",
                r.variant,
                pct(r.map_seen),
                pct(r.map_unseen),
                pct(r.hm_map),
                pct(r.recall_seen),
                pct(r.recall_unseen),
                pct(r.hm_recall)
            );
        }
    }
    Ok(())
}
