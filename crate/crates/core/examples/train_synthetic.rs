//! Generate a synthetic dataset, fine-tune the heads on seen categories and
//! score zero-shot detection and segmentation on the held-out images.
//!
//!     cargo run --release --example train_synthetic -- [sigma] [iterations] [seed]

use std::time::Instant;

use zsdet::bench::Dataset;
use zsdet::heads::cls_logits_unseen;
use zsdet::{generate, CategorySpace, InferConfig, SynthConfig, TaskMode, TrainConfig, TransferVariant};

fn main() -> zsdet::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).map_or(0.0, |s| s.parse().expect("sigma"));
    let iterations: usize = args.get(2).map_or(3000, |s| s.parse().expect("iterations"));
    let seed: u64 = args.get(3).map_or(1, |s| s.parse().expect("seed"));

    let synth = generate(&SynthConfig {
        seed,
        sigma,
        ..SynthConfig::default()
    })?;
    let labels = synth.hidden.test_labels.clone();
    let ds: Dataset = synth.into();

    let train = TrainConfig {
        iterations,
        iou_threshold: 0.3,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = ds.train(&train)?;
    if let (Some(first), Some(last)) = (out.log.first(), out.log.last()) {
        println!(
            "{iterations} iterations in {:.1?}: loss {:.4} -> {:.4} (classifier {:.4}, regression {:.4}, mask {:.4})",
            start.elapsed(),
            first.total,
            last.total,
            last.classifier,
            last.regression,
            last.mask
        );
    }

    let space = CategorySpace::new(&ds.table, &ds.split)?;
    let (mut hits, mut total) = (0, 0);
    for (p, label) in ds.test_proposals.iter().zip(&labels) {
        let Some(c) = label.as_ref().filter(|c| ds.split.is_unseen(c)) else { continue };
        let logits = cls_logits_unseen(p.z.view(), &out.params, &space.unseen_norm)?;
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        hits += usize::from(space.unseen_names[best] == *c);
        total += 1;
    }
    println!("unseen top-1 accuracy {:.3} over {total} object proposals", hits as f64 / total as f64);

    for mode in TaskMode::ALL {
        for variant in TransferVariant::ALL {
            let cfg = InferConfig {
                mode,
                reg_variant: variant,
                seg_variant: variant,
                ..InferConfig::default()
            };
            let (_, r) = ds.evaluate(&out.params, &cfg)?;
            let pct = |v: Option<f64>| v.map_or_else(|| "   -".to_string(), |x| format!("{:5.1}", 100.0 * x));
            println!(
                "{:<5} {:<18} mAP seen {} unseen {} HM {}",
                mode.name(),
                variant.name(),
                pct(r.map_seen),
                pct(r.map_unseen),
                pct(r.hm_map)
            );
        }
    }
    Ok(())
}
