//! Learning-rate scale factors as a function of the gradient deviation.
//!
//! Run: `cargo run --example lr_scaling`

use std::collections::BTreeMap;

use int8_train::lr_scale::{effective_lr, LrScaleConfig, ScaleForm};

fn main() {
    let forms = [ScaleForm::Exponential, ScaleForm::Linear, ScaleForm::Quadratic];
    println!("alpha 20, beta 0.1");
    print!("{:>8}", "d");
    for f in forms {
        print!(" {:>12}", format!("{f:?}"));
    }
    println!();
    for d in [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2] {
        print!("{d:>8}");
        for form in forms {
            let cfg = LrScaleConfig { form, ..LrScaleConfig::default() };
            print!(" {:>12.4}", cfg.scale_factor(d));
        }
        println!();
    }

    let dc: BTreeMap<usize, f64> = [(0, 0.001), (1, 0.03), (2, 0.2)].into_iter().collect();
    let lrs = effective_lr(0.1, &dc, &LrScaleConfig::default());
    for (layer, lr) in lrs {
        println!("layer {layer}: d = {:.3}, lr = {lr:.5}", dc[&layer]);
    }
}
