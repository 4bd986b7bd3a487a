//! Score a handful of hand-written detections in each task mode.

use zsdet::io::{GroundTruthFile, ImageInfo};
use zsdet::learn::GroundTruthInstance;
use zsdet::metrics::{evaluate, harmonic_mean};
use zsdet::{BBox, CategorySplit, Detection, Origin, TaskMode};

fn gt(image_id: u64, category: &str, b: [f64; 4]) -> GroundTruthInstance {
    GroundTruthInstance {
        image_id,
        category: category.into(),
        bbox: b.into(),
        mask: None,
    }
}

fn det(image_id: u64, category: &str, origin: Origin, score: f64, b: [f64; 4]) -> Detection {
    Detection {
        image_id,
        category: category.into(),
        origin,
        score,
        bbox: BBox::from(b),
        mask: None,
    }
}

fn main() -> zsdet::Result<()> {
    let split = CategorySplit::parse("seen: person, car\nunseen: zebra\n")?;
    let truth = GroundTruthFile {
        images: vec![ImageInfo { id: 0, width: 200, height: 200 }, ImageInfo { id: 1, width: 200, height: 200 }],
        categories: vec!["person".into(), "car".into(), "zebra".into()],
        annotations: vec![
            gt(0, "person", [10., 10., 50., 90.]),
            gt(0, "zebra", [100., 100., 180., 160.]),
            gt(1, "car", [20., 120., 120., 190.]),
            gt(1, "zebra", [130., 10., 190., 70.]),
        ],
    };
    let dets = vec![
        det(0, "person", Origin::Seen, 0.92, [12., 8., 52., 88.]),
        det(0, "zebra", Origin::Unseen, 0.61, [104., 98., 176., 162.]),
        det(0, "zebra", Origin::Unseen, 0.40, [10., 10., 50., 90.]),
        det(1, "car", Origin::Seen, 0.85, [25., 125., 125., 185.]),
        det(1, "zebra", Origin::Unseen, 0.33, [150., 40., 199., 99.]),
    ];
    for mode in [TaskMode::Zsd, TaskMode::Gzsd] {
        let r = evaluate(&dets, &truth, &split, mode)?;
        for c in &r.per_category {
            println!("{:<5} {:<7} AP {:.3} recall {:?}", mode.name(), c.name, c.ap, c.recall);
        }
        print!("{}", r.to_csv());
    }
    println!("HM(47.3, 9.4) = {:.2}", harmonic_mean(47.3, 9.4));
    Ok(())
}
