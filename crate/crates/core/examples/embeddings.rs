//! Parse an embedding table and a seen/unseen split, then look at the
//! normalized category matrix under each background choice.

use zsdet::embed::{BackgroundKind, BackgroundMode, CategorySpace, CategorySplit, EmbeddingTable};

const TABLE: &str = "\
5 3
cat    0.9 0.1 0.0
dog    0.8 0.3 0.1
car    0.0 0.2 1.1
truck  0.1 0.1 0.9
zebra  0.7 0.0 0.4
";

fn main() -> zsdet::Result<()> {
    let table = EmbeddingTable::parse(TABLE)?;
    let split = CategorySplit::parse("seen: cat, dog, car, truck\nunseen: zebra\n")?;
    split.validate(&table)?;
    let space = CategorySpace::new(&table, &split)?;
    println!("{} seen, {} unseen, d = {}", space.num_seen(), space.num_unseen(), space.dim());

    let cos = space.unseen_norm.dot(&space.seen_norm.t());
    for (u, name) in space.unseen_names.iter().enumerate() {
        for (s, seen) in space.seen_names.iter().enumerate() {
            println!("cos({name}, {seen}) = {:+.3}", cos[[u, s]]);
        }
    }

    for kind in BackgroundKind::ALL {
        let mode = match kind {
            BackgroundKind::Fixed => BackgroundMode::Fixed,
            BackgroundKind::Mean => BackgroundMode::Mean,
            // a learned row starts wherever training put it; any non-zero vector works here
            BackgroundKind::Learned => BackgroundMode::Learned(ndarray::arr1(&[0.2, -1.0, 0.3])),
        };
        let rows = space.seen_with_background(&mode)?;
        let b = rows.row(rows.nrows() - 1);
        println!("{:<8} background row {:.3}", kind.name(), b);
    }
    Ok(())
}
