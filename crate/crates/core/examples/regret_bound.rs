//! Projected online SGD with quantized gradients on a convex problem, and
//! the three-term average-regret bound.
//!
//! Run: `cargo run --release --example regret_bound`

use int8_train::diagnostics::regret::{run_online, solve_optimum, verify_bound, GradQuant, HarnessConfig, Problem, StepSize};

fn main() -> int8_train::Result<()> {
    let problem = Problem::logistic(500, 50, 1e-3, 0);
    let w_star = solve_optimum(&problem, 1.0, 1e-10, 1_000_000)?;
    println!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}  holds", "gradients", "avg regret", "term1", "term2", "term3", "bound");
    for (name, quant) in [
        ("exact", GradQuant::None),
        ("int8, max clip", GradQuant::Ratio(1.0)),
        ("int8, 0.1 max", GradQuant::Ratio(0.1)),
        ("int8, fixed 1e-3", GradQuant::Fixed(1e-3)),
    ] {
        let cfg = HarnessConfig { rounds: 2000, radius: 1.0, step: StepSize::InvSqrt(0.5), quant, seed: 0, project: true };
        let trace = run_online(&problem, &w_star, &cfg)?;
        for t in [500, 2000] {
            let r = verify_bound(&trace, t)?;
            println!(
                "{:<16} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}  {} (T={t})",
                name, r.avg_regret, r.terms.term1, r.terms.term2, r.terms.term3, r.bound, r.holds
            );
        }
    }
    Ok(())
}
