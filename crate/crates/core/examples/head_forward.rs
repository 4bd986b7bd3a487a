//! Forward pass of the embedding-aware heads for a single proposal: joint
//! class probabilities, box deltas and mask logits for seen and unseen
//! categories under every transfer variant.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsdet::embed::{BackgroundKind, BackgroundMode, CategorySpace, CategorySplit, EmbeddingTable};
use zsdet::heads::{
    class_probabilities, mask_probabilities, reg_deltas, unseen_reg_by_variant, unseen_seg_by_variant,
    HeadParams, TransferVariant,
};

fn main() -> zsdet::Result<()> {
    let table = EmbeddingTable::parse("4 3\na 1 0 0\nb 0 1 0\nc 0 0 1\nu 0.6 0.8 0\n")?;
    let split = CategorySplit::parse("seen: a, b, c\nunseen: u\n")?;
    let space = CategorySpace::new(&table, &split)?;

    let (d, p, t, n) = (3, 6, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = HeadParams::init(d, p, t, BackgroundKind::Learned, &space.seen_raw, &mut rng);
    let z = Array1::from_shape_simple_fn(p, || rng.random_range(-1.0..1.0));
    let zm = Array3::from_shape_simple_fn((n, n, t), || rng.random_range(-1.0..1.0));

    let seen_bg = space.seen_with_background(&params.background)?;
    let probs = class_probabilities(z.view(), &params, &seen_bg, &space.unseen_norm)?;
    let labels: Vec<String> = space
        .seen_names
        .iter()
        .cloned()
        .chain(["<background>".to_string()])
        .chain(space.unseen_names.iter().cloned())
        .collect();
    for (name, p) in labels.iter().zip(probs.iter()) {
        println!("P({name}) = {p:.4}");
    }
    assert!(matches!(params.background, BackgroundMode::Learned(_)));

    println!("seen deltas:\n{:.4}", reg_deltas(z.view(), &params, &space.seen_norm)?);
    for v in TransferVariant::ALL {
        let deltas = unseen_reg_by_variant(z.view(), &params, &space.seen_norm, &space.unseen_norm, v)?;
        let logits = unseen_seg_by_variant(&zm, &params, &space.seen_norm, &space.unseen_norm, v)?;
        let mask = mask_probabilities(&logits, 0);
        let on = mask.iter().filter(|&&q| q > 0.5).count();
        println!("{:<18} deltas {:.4}  mask pixels on: {on}/{}", v.name(), deltas.row(0), n * n);
    }
    Ok(())
}
