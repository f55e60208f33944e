//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 1-4 and 11 are correctness properties and fail the process when
//! they fail. Criteria 5-10 are desk-scale reproductions of training
//! behaviour; their lines are reported, and they only fail the process when
//! `INT8TRAIN_ACCEPTANCE_STRICT=1`. `INT8TRAIN_ACCEPTANCE_ONLY=5,7` runs a
//! subset. With `INT8TRAIN_CIFAR10_DIR` pointing at the CIFAR-10 binary
//! files the training criteria use CIFAR-10 instead of the synthetic task.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use int8_train::cli::{depthwise_layers, ks_table, SnapshotSet};
use int8_train::clip::ClipSearchConfig;
use int8_train::data::{load_cifar10, synthetic_blobs, BlobSpec, Split};
use int8_train::diagnostics::histogram::Snapshot;
use int8_train::diagnostics::regret::{run_online, solve_optimum, verify_bound, GradQuant, HarnessConfig, Problem, StepSize};
use int8_train::diagnostics::{Family, TraceWriter};
use int8_train::kernels::gemm::{gemm_i8, Int8Matrix};
use int8_train::kernels::{conv2d_q, ConvGeometry};
use int8_train::lr_scale::{LrScaleConfig, ScaleForm};
use int8_train::nn::{zoo, GradClip, Mode, ModelKind};
use int8_train::quant::{quantize, LcgStream, QuantParams, QuantizedTensor, RoundingMode};
use int8_train::train::{RunSummary, TrainConfig, Trainer};
use int8_train::Tensor;

const WIDTH: usize = 8;
/// Accuracy differences are multiples of 1/test-size; this only absorbs f64
/// representation error in point comparisons.
const PT_EPS: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- data

fn cifar_dir() -> Option<PathBuf> {
    std::env::var_os("INT8TRAIN_CIFAR10_DIR").map(PathBuf::from)
}

/// The five-epoch MobileNet task: a 5000-image training set.
fn small_task(seed: u64) -> Split {
    match cifar_dir() {
        Some(dir) => load_cifar10(&dir, Some(5000), Some(2000)).expect("CIFAR-10 files"),
        None => synthetic_blobs(&BlobSpec { classes: 10, dim: 192, train: 5000, test: 2000, seed, noise: 1.5 }).unwrap(),
    }
}

/// The thirty-epoch task of the accuracy-gap criterion.
fn long_task(seed: u64) -> Split {
    match cifar_dir() {
        Some(dir) => load_cifar10(&dir, None, None).expect("CIFAR-10 files"),
        None => synthetic_blobs(&BlobSpec { classes: 10, dim: 192, train: 5000, test: 2000, seed, noise: 3.0 }).unwrap(),
    }
}

fn task_name() -> &'static str {
    if cifar_dir().is_some() {
        "CIFAR-10"
    } else {
        "synthetic stand-in"
    }
}

// ------------------------------------------------------------- training

struct Run {
    summary: RunSummary,
    trace: Vec<u8>,
    snapshots: SnapshotSet,
}

fn train(kind: ModelKind, split: &Split, cfg: TrainConfig) -> Run {
    let [c, h, w] = split.train.dims();
    let model = zoo::build(kind, [c, h, w], split.train.classes(), WIDTH, cfg.seed).unwrap();
    let depthwise = depthwise_layers(&model);
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let mut trace = TraceWriter::new(Vec::new(), kind.name()).unwrap();
    let mut snapshots = SnapshotSet { depthwise, ..Default::default() };
    let summary = trainer
        .run(split, &mut |r| {
            for cap in &r.captures {
                snapshots.grads.push(Snapshot { iter: r.iter, layer: cap.layer, values: cap.gz.data().to_vec() });
                snapshots.weights.push(Snapshot { iter: r.iter, layer: cap.layer, values: cap.weight.data().to_vec() });
            }
            trace.write_step(r)
        })
        .unwrap();
    Run { summary, trace: trace.into_inner().unwrap(), snapshots }
}

fn base(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { seed, epochs, base_lr: 0.1, momentum: 0.0, ..TrainConfig::default() }
}

fn no_techniques(seed: u64) -> TrainConfig {
    TrainConfig { grad_clip: GradClip::MaxAbs, lr_scale: None, ..base(seed, 5) }
}

fn both_techniques(seed: u64) -> TrainConfig {
    TrainConfig {
        grad_clip: GradClip::Search(ClipSearchConfig::default()),
        lr_scale: Some(LrScaleConfig::default()),
        period: 100,
        ..base(seed, 5)
    }
}

fn describe(s: &RunSummary) -> String {
    match s.crash {
        Some((it, kind)) => format!("{:.2}% crashed@{it}({kind:?})", 100.0 * s.final_accuracy),
        None => format!("{:.2}%", 100.0 * s.final_accuracy),
    }
}

// ------------------------------------------------------------ criteria

fn c1_unbiased_rounding() -> Outcome {
    const N: usize = 100_000;
    let clip = 1.0f32;
    let params = QuantParams::new(clip).unwrap();
    let s = params.scale() as f64;
    let tol = 4.0 * s / (12.0 * N as f64).sqrt();
    let mut stream = LcgStream::new(2024);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..50 {
        let x = clip * (-1.0 + 2.0 * i as f32 / 49.0);
        let t = Tensor::full(&[N], x).unwrap();
        let q = quantize(&t, params, RoundingMode::Stochastic, Some(&mut stream)).unwrap();
        let mean = q.values().iter().map(|&v| v as f64).sum::<f64>() * s / N as f64;
        let err = (mean - x as f64).abs();
        worst = worst.max(err / tol);
        if err > tol {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("50 values x 1e5 draws, worst |mean - x| = {worst:.3} x tolerance, {failures} outside"))
}

fn direct_conv_i64(x: &[i8], w: &[i8], g: &ConvGeometry) -> Vec<i64> {
    let [n, c, h, wd] = g.input_dims();
    let [o, cpg, kh, kw] = g.weight_dims();
    let (oh, ow) = (g.out_h(), g.out_w());
    let opg = o / (c / cpg);
    let mut y = vec![0i64; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            let grp = oc / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for ci in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + grp * cpg + ci) * h + iy as usize) * wd + ix as usize] as i64;
                                acc += xv * w[((oc * cpg + ci) * kh + ky) * kw + kx] as i64;
                            }
                        }
                    }
                    y[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn c2_kernel_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut gemm_bad = 0;
    for _ in 0..1000 {
        let (m, k, n) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        let a: Vec<i8> = (0..m * k).map(|_| rng.random_range(-127..=127)).collect();
        let b: Vec<i8> = (0..k * n).map(|_| rng.random_range(-127..=127)).collect();
        let c = gemm_i8(&Int8Matrix::new(m, k, a.clone()).unwrap(), &Int8Matrix::new(k, n, b.clone()).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0i64;
                for p in 0..k {
                    acc += a[i * k + p] as i64 * b[p * n + j] as i64;
                }
                if acc != c.get(i, j) as i64 {
                    gemm_bad += 1;
                }
            }
        }
    }
    let unit = QuantParams::new(127.0).unwrap();
    let mut conv_bad = 0;
    let mut geometries = 0;
    while geometries < 200 {
        let groups = [1, 1, 2, 3][rng.random_range(0..4)];
        let c = groups * rng.random_range(1..=4);
        let o = groups * rng.random_range(1..=4);
        let (kh, kw) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        let Ok(g) = ConvGeometry::new([rng.random_range(1..=3), c, h, w], o, [kh, kw], stride, pad, groups) else {
            continue;
        };
        geometries += 1;
        let xs: Vec<i8> = (0..g.input_dims().iter().product()).map(|_| rng.random_range(-127..=127)).collect();
        let ws: Vec<i8> = (0..g.weight_dims().iter().product()).map(|_| rng.random_range(-127..=127)).collect();
        let qx = QuantizedTensor::from_parts(&g.input_dims(), xs.clone(), unit).unwrap();
        let qw = QuantizedTensor::from_parts(&g.weight_dims(), ws.clone(), unit).unwrap();
        let y = conv2d_q(&qx, &qw, &g).unwrap();
        let want = direct_conv_i64(&xs, &ws, &g);
        if y.data().iter().zip(&want).any(|(&a, &b)| a as f64 != b as f64) {
            conv_bad += 1;
        }
    }
    outcome(
        gemm_bad == 0 && conv_bad == 0,
        format!("1000 GEMMs: {gemm_bad} mismatched entries; 200 convolutions: {conv_bad} mismatched"),
    )
}

fn c3_gradient_check() -> Outcome {
    let model = zoo::tiny_cnn([3, 6, 6], 4, 3, 2).unwrap();
    let mut s = LcgStream::new(9);
    let x = Tensor::from_vec(&[4, 3, 6, 6], (0..432).map(|_| s.next_f32() * 4.0 - 2.0).collect()).unwrap();
    let labels: Vec<usize> = (0..4).map(|_| s.next_u32() as usize % 4).collect();
    let (err, count) = common::finite_difference_check(&model, &x, &labels, 1e-3);
    outcome(err < 1e-3, format!("TinyCNN with {count} parameters, max relative error {err:.2e}"))
}

fn c4_bound_soundness() -> Outcome {
    let settings = [
        ("unclipped", GradQuant::Ratio(1.0)),
        ("clip 0.5 max", GradQuant::Ratio(0.5)),
        ("clip 0.1 max", GradQuant::Ratio(0.1)),
        ("fixed clip 1e-3", GradQuant::Fixed(1e-3)),
    ];
    let mut violations = 0;
    let mut l1_violations = 0;
    let mut min_slack = f64::INFINITY;
    let mut runs = 0;
    for seed in 0..20u64 {
        let problem = Problem::logistic(500, 50, 1e-3, seed);
        let w_star = solve_optimum(&problem, 1.0, 1e-10, 1_000_000).unwrap();
        for (_, quant) in settings {
            let cfg = HarnessConfig { rounds: 1000, radius: 1.0, step: StepSize::InvSqrt(0.5), quant, seed, project: true };
            let trace = run_online(&problem, &w_star, &cfg).unwrap();
            let r = verify_bound(&trace, 1000).unwrap();
            runs += 1;
            if !r.holds {
                violations += 1;
            }
            if r.avg_regret > r.terms.term1 + r.term2_l1 + r.terms.term3 {
                l1_violations += 1;
            }
            min_slack = min_slack.min(r.bound - r.avg_regret);
        }
    }
    outcome(
        violations == 0,
        format!("{runs} runs (20 seeds x 4 clips), {violations} violations, smallest bound - regret = {min_slack:.3e}; L1 variant violations {l1_violations}"),
    )
}

fn c5_crash_reproduction(runs: &mut BTreeMap<String, Run>) -> Outcome {
    let mut crashed = 0;
    let mut survived = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let split = small_task(seed);
        let none = train(ModelKind::TinyMobilenet, &split, no_techniques(seed));
        let mut cfg = both_techniques(seed);
        if seed == 0 {
            cfg.capture_iters = vec![390];
        }
        let both = train(ModelKind::TinyMobilenet, &split, cfg);
        if none.summary.crashed() {
            crashed += 1;
        }
        if !both.summary.crashed() {
            survived += 1;
        }
        parts.push(format!("seed {seed}: none {} / both {}", describe(&none.summary), describe(&both.summary)));
        runs.insert(format!("none{seed}"), none);
        runs.insert(format!("both{seed}"), both);
    }
    outcome(
        crashed >= 2 && survived == 3,
        format!("no techniques crashed {crashed}/3 (need >= 2), both survived {survived}/3; {}", parts.join("; ")),
    )
}

fn c6_accuracy_gap() -> Outcome {
    let split = long_task(0);
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [ModelKind::TinyCnn, ModelKind::TinyResnet] {
        let fp = train(kind, &split, TrainConfig { mode: Mode::Fp32, ..both_techniques(0) }.with_epochs(30));
        let q = train(kind, &split, both_techniques(0).with_epochs(30));
        let gap = 100.0 * (fp.summary.final_accuracy - q.summary.final_accuracy);
        ok &= gap.abs() <= 2.0 + PT_EPS && !q.summary.crashed();
        parts.push(format!("{}: fp32 {} int8 {} gap {gap:+.2} pt", kind.name(), describe(&fp.summary), describe(&q.summary)));
    }
    outcome(ok, format!("30 epochs on the {}; {}", task_name(), parts.join("; ")))
}

trait WithEpochs {
    fn with_epochs(self, epochs: usize) -> Self;
}

impl WithEpochs for TrainConfig {
    fn with_epochs(self, epochs: usize) -> Self {
        TrainConfig { epochs, ..self }
    }
}

fn c7_periodic_update() -> Outcome {
    let split = small_task(0);
    let mut rows = Vec::new();
    for period in [1u64, 10, 100, 1000] {
        let run = train(ModelKind::TinyMobilenet, &split, TrainConfig { period, ..both_techniques(0) });
        let s = &run.summary;
        let it = s.iterations.max(1) as f64;
        rows.push((period, s.clip_seconds / it, s.train_seconds / it, s.final_accuracy, s.crashed()));
    }
    let o: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let decreasing = o[0] > o[1] && o[1] > o[2];
    // Timing noise on a shared CPU: differences below 5% of a step at period 100.
    let noise = 0.05 * rows[2].2;
    let flat = (o[2] - o[3]).abs() <= noise;
    let accs: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let spread = 100.0 * (accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min));
    let crashed = rows.iter().any(|r| r.4);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("P={} {:.1} us/iter {:.2}%", r.0, 1e6 * r.1, 100.0 * r.3))
        .collect();
    outcome(
        decreasing && flat && spread <= 1.0 + PT_EPS && !crashed,
        format!(
            "{}; 1>10>100 {decreasing}, |100-1000| {:.1} us vs noise {:.1} us, accuracy spread {spread:.2} pt",
            table.join(", "),
            1e6 * (o[2] - o[3]).abs(),
            1e6 * noise
        ),
    )
}

fn c8_ablation_ordering() -> Outcome {
    let split = small_task(0);
    let mut acc = BTreeMap::new();
    let mut parts = Vec::new();
    let mut bad_other = false;
    for form in [ScaleForm::Exponential, ScaleForm::Linear, ScaleForm::Quadratic] {
        let cfg = TrainConfig { lr_scale: Some(LrScaleConfig { form, ..LrScaleConfig::default() }), ..no_techniques(0) };
        let run = train(ModelKind::TinyMobilenet, &split, cfg);
        parts.push(format!("{form:?} {}", describe(&run.summary)));
        acc.insert(format!("{form:?}"), run.summary.final_accuracy);
        if form != ScaleForm::Exponential {
            bad_other |= run.summary.crashed();
        }
    }
    let e = acc["Exponential"];
    let (l, q) = (acc["Linear"], acc["Quadratic"]);
    let ordered = e >= l && e >= q;
    let deficit = 100.0 * (e - l.min(q)) >= 3.0;
    outcome(
        ordered && (bad_other || deficit),
        format!(
            "no clipping; {}; exponential >= others {ordered}, other form diverged {bad_other}, deficit >= 3 pt {deficit}",
            parts.join(", ")
        ),
    )
}

fn c9_hyperparameters() -> Outcome {
    let split = small_task(0);
    let mut accs = Vec::new();
    let mut parts = Vec::new();
    let mut crashed = false;
    for alpha in [10.0, 20.0] {
        for beta in [0.1, 0.2] {
            let cfg = TrainConfig {
                lr_scale: Some(LrScaleConfig { alpha, beta, form: ScaleForm::Exponential }),
                ..both_techniques(0)
            };
            let run = train(ModelKind::TinyMobilenet, &split, cfg);
            crashed |= run.summary.crashed();
            accs.push(run.summary.final_accuracy);
            parts.push(format!("({alpha},{beta}) {}", describe(&run.summary)));
        }
    }
    let spread = 100.0 * (accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min));
    outcome(spread <= 1.0 + PT_EPS && !crashed, format!("{}; spread {spread:.2} pt", parts.join(", ")))
}

fn c10_ks_rejection(runs: &BTreeMap<String, Run>) -> Outcome {
    let Some(run) = runs.get("both0") else {
        return outcome(false, "needs the criterion 5 run");
    };
    if run.snapshots.grads.is_empty() {
        return outcome(false, "no mid-training snapshot was captured");
    }
    let rows = ks_table(&run.snapshots, 20_000);
    let mut grad: BTreeMap<usize, usize> = BTreeMap::new();
    let mut weight: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &rows {
        let m = if r.tensor == "grad" { &mut grad } else { &mut weight };
        *m.entry(r.layer).or_default() += r.rejects() as usize;
    }
    let all_three: Vec<usize> = grad.iter().filter(|(_, &n)| n == Family::ALL.len()).map(|(&l, _)| l).collect();
    let grad_rej: usize = all_three.iter().map(|l| grad[l]).sum();
    let weight_rej: usize = all_three.iter().map(|l| weight.get(l).copied().unwrap_or(0)).sum();
    outcome(
        all_three.len() >= 2 && weight_rej < grad_rej,
        format!(
            "iteration 390: gradients of {} layers {:?} reject all three families; weights of those layers reject {weight_rej} of {grad_rej} fits",
            all_three.len(),
            all_three
        ),
    )
}

fn c11_determinism(runs: &BTreeMap<String, Run>) -> Outcome {
    let split = small_task(0);
    let mut cfg = both_techniques(0);
    cfg.capture_iters = vec![390];
    let again = train(ModelKind::TinyMobilenet, &split, cfg);
    let none = train(ModelKind::TinyMobilenet, &split, no_techniques(0));
    let same = |key: &str, run: &Run| runs.get(key).is_some_and(|r| r.trace == run.trace);
    let a = same("both0", &again);
    let b = same("none0", &none);
    outcome(
        a && b && !again.trace.is_empty(),
        format!("repeated criterion 5 seed-0 runs: with techniques identical {a}, without identical {b} ({} bytes)", again.trace.len()),
    )
}

fn main() {
    let only: Option<Vec<u8>> =
        std::env::var("INT8TRAIN_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let strict = std::env::var("INT8TRAIN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |id: u8| only.as_ref().is_none_or(|o| o.contains(&id) || (id == 5 && (o.contains(&10) || o.contains(&11))));

    let mut runs = BTreeMap::new();
    let criteria: Vec<(u8, &str, bool)> = vec![
        (1, "stochastic rounding is unbiased", true),
        (2, "integer kernels are exact", true),
        (3, "FP32 gradients match finite differences", true),
        (4, "average-regret bound holds", true),
        (5, "crash without clipping and scaling, none with both", false),
        (6, "INT8 accuracy within 2 pt of FP32", false),
        (7, "periodic update amortizes clip search", false),
        (8, "exponential scaling beats linear and quadratic", false),
        (9, "alpha and beta robustness", false),
        (10, "gradients reject common distributions", false),
        (11, "repeated runs give identical traces", true),
    ];
    let mut hard_failure = false;
    let mut failures = 0;
    println!("acceptance ({})", task_name());
    for (id, name, asserted) in criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let o = match id {
            1 => c1_unbiased_rounding(),
            2 => c2_kernel_exactness(),
            3 => c3_gradient_check(),
            4 => c4_bound_soundness(),
            5 => c5_crash_reproduction(&mut runs),
            6 => c6_accuracy_gap(),
            7 => c7_periodic_update(),
            8 => c8_ablation_ordering(),
            9 => c9_hyperparameters(),
            10 => c10_ks_rejection(&runs),
            _ => c11_determinism(&runs),
        };
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict}: {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failures += 1;
            hard_failure |= asserted || strict;
        }
    }
    println!("acceptance: {failures} failing criteria");
    if hard_failure {
        std::process::exit(1);
    }
}
