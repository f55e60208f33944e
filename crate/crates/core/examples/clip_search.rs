//! Choosing a gradient clip by minimizing the cosine distance between a
//! gradient and its quantized version.
//!
//! Run: `cargo run --release --example clip_search`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

use int8_train::clip::{distance_at_clip, search_clip, ClipSearchConfig, ClipState};
use int8_train::Tensor;

fn main() -> int8_train::Result<()> {
    // Heavy-tailed bulk plus a few large outliers.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = StudentT::new(4.0).expect("valid");
    let mut g: Vec<f32> = (0..200_000).map(|_| 1e-3 * t.sample(&mut rng) as f32).collect();
    g[0] = 0.3;
    g[1] = -0.2;
    let g = Tensor::from_vec(&[g.len()], g)?;
    let m = g.max_abs();
    println!("max |g| = {m:.4e}");

    println!("{:>10} {:>12}", "clip/max", "distance");
    for frac in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005] {
        println!("{frac:>10} {:>12.6}", distance_at_clip(g.data(), m * frac)?);
    }

    let cfg = ClipSearchConfig::default();
    let best = search_clip(&g, &cfg)?.expect("nonzero gradient");
    println!(
        "search: clip {:.4e} ({:.4} of max), distance {:.6}, {} evaluations",
        best.clip,
        best.clip / m,
        best.distance,
        best.evaluations
    );

    // Periodic refresh: the search runs only when the period elapses.
    let mut state = ClipState::new(0, 100);
    let mut searches = 0;
    for iter in 0..350 {
        if state.is_due(iter) {
            searches += 1;
        }
        state.maybe_update(&g, iter, &cfg)?;
    }
    println!("350 iterations with period 100: {searches} searches, clip {:.4e}", state.clip);
    Ok(())
}
