//! Compare every analytic loss gradient against central finite differences.

use zsdet::learn::{finite_diff_check, gradient_suite};

fn main() -> zsdet::Result<()> {
    // the checker on its own: f(θ) = Σ θ³ with a correct gradient
    let err = finite_diff_check(
        |th: &[f64]| Ok((th.iter().map(|x| x.powi(3)).sum(), th.iter().map(|x| 3.0 * x * x).collect())),
        &[0.5, -1.25, 2.0],
        1e-5,
    )?;
    println!("cubic: max relative error {err:.2e}");

    for r in gradient_suite(100, 2024, 1e-5)? {
        let verdict = if r.max_rel_error <= 1e-4 { "ok" } else { "MISMATCH" };
        println!("{:<14} {} points, max relative error {:.2e}  {verdict}", r.loss.name(), r.points, r.max_rel_error);
    }
    Ok(())
}
