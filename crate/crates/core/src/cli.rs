//! Subcommand implementations behind the `int8train` binary. Each command
//! writes plot-ready CSV into an output directory and returns an exit code.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{BenchSection, ExperimentConfig};
use crate::diagnostics::histogram::{gradient_snapshot, Snapshot};
use crate::diagnostics::regret::{run_online, solve_optimum, verify_bound, BoundReport, HarnessConfig, Problem};
use crate::diagnostics::trace::{csv_line, fmt_float, parse_trace, TraceWriter};
use crate::diagnostics::{ks_test, Family};
use crate::error::{Error, Result};
use crate::kernels::gemm::{gemm_i8_nt, gemm_quantize_fused_nt, Int8Matrix};
use crate::kernels::{conv2d_f32, conv2d_q};
use crate::nn::{Mode, Model, Node};
use crate::quant::{quantize, LcgStream, QuantParams, RoundingMode};
use crate::tensor::Tensor;
use crate::train::{CrashKind, RunSummary, Trainer};

pub const TRACE_FILE: &str = "trace.csv";
pub const SNAPSHOT_FILE: &str = "snapshots.i8ft";
pub const CHECKPOINT_FILE: &str = "checkpoint.i8ft";

/// Process exit code for an error: 2 configuration, 3 dataset, 4 corrupt
/// input file, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Dataset(_) => 3,
        Error::Format(_) => 4,
        _ => 1,
    }
}

struct Csv {
    out: BufWriter<File>,
}

impl Csv {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(header.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(Csv { out })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        Ok(self.out.write_all(csv_line(fields).as_bytes())?)
    }

    fn finish(mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// Qids of depthwise convolutions.
pub fn depthwise_layers(model: &Model) -> Vec<usize> {
    model
        .quantized_nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| matches!(n, Node::Conv(c) if c.is_depthwise()))
        .map(|(i, _)| i)
        .collect()
}

/// Captured gradients and weights of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SnapshotSet {
    pub grads: Vec<Snapshot>,
    pub weights: Vec<Snapshot>,
    pub depthwise: Vec<usize>,
}

impl SnapshotSet {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        let mut push = |prefix: &str, s: &Snapshot| -> Result<()> {
            tensors.push((format!("{prefix}.{}.{}", s.iter, s.layer), Tensor::from_vec(&[s.values.len()], s.values.clone())?));
            Ok(())
        };
        for s in &self.grads {
            push("grad", s)?;
        }
        for s in &self.weights {
            push("weight", s)?;
        }
        if !self.depthwise.is_empty() {
            let v = self.depthwise.iter().map(|&l| l as f32).collect();
            tensors.push(("meta.depthwise".into(), Tensor::from_vec(&[self.depthwise.len()], v)?));
        }
        Ok(Checkpoint { tensors, clips: Vec::new() })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut set = SnapshotSet::default();
        for (name, t) in &ck.tensors {
            if name == "meta.depthwise" {
                set.depthwise = t.data().iter().map(|&v| v as usize).collect();
                continue;
            }
            let parts: Vec<&str> = name.split('.').collect();
            let parsed = match parts.as_slice() {
                [kind, it, l] => it.parse::<u64>().ok().zip(l.parse::<usize>().ok()).map(|(it, l)| (*kind, it, l)),
                _ => None,
            };
            let Some((kind, iter, layer)) = parsed else {
                return Err(Error::Format(format!("unexpected snapshot tensor {name:?}")));
            };
            let snap = Snapshot { iter, layer, values: t.data().to_vec() };
            match kind {
                "grad" => set.grads.push(snap),
                "weight" => set.weights.push(snap),
                _ => return Err(Error::Format(format!("unexpected snapshot tensor {name:?}"))),
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub out_dir: PathBuf,
    pub snapshots: SnapshotSet,
}

pub fn summary_line(name: &str, mode: Mode, s: &RunSummary) -> String {
    let crash = match s.crash {
        Some((it, CrashKind::NonFinite)) => format!("true (non-finite at iteration {it})"),
        Some((it, CrashKind::AccuracyCollapse)) => format!("true (accuracy collapse by iteration {it})"),
        None => "false".into(),
    };
    format!(
        "run {name} [{}]: {} iterations, {} epochs, initial accuracy {:.4}, final test accuracy {:.4}, crashed {crash}",
        match mode {
            Mode::Fp32 => "fp32",
            Mode::Int8 => "int8",
        },
        s.iterations,
        s.epochs_completed,
        s.initial_accuracy,
        s.final_accuracy,
    )
}

/// Trains as configured and writes `trace.csv`, `summary.csv`,
/// `epochs.csv`, the final checkpoint and, when iterations are captured,
/// the snapshot file. A training crash is a result, not an error.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = cfg.load_dataset().map_err(|e| match e {
        Error::Config(_) | Error::Dataset(_) => e,
        other => Error::Dataset(other.to_string()),
    })?;
    let model = cfg.build_model()?;
    let depthwise = depthwise_layers(&model);
    let mut trainer = Trainer::new(model, cfg.train_config())?;
    fs::create_dir_all(out_dir)?;
    let name = &cfg.experiment.name;
    let mut trace = TraceWriter::new(BufWriter::new(File::create(out_dir.join(TRACE_FILE))?), name)?;
    let mut snapshots = SnapshotSet { depthwise, ..Default::default() };
    let summary = trainer.run(&split, &mut |r| {
        for c in &r.captures {
            snapshots.grads.push(Snapshot { iter: r.iter, layer: c.layer, values: c.gz.data().to_vec() });
            snapshots.weights.push(Snapshot { iter: r.iter, layer: c.layer, values: c.weight.data().to_vec() });
        }
        trace.write_step(r)
    })?;
    trace.into_inner()?.flush()?;

    Checkpoint::capture(&trainer.model, &trainer.states).save(&out_dir.join(CHECKPOINT_FILE))?;
    if !snapshots.grads.is_empty() {
        snapshots.to_checkpoint()?.save(&out_dir.join(SNAPSHOT_FILE))?;
    }

    let mut csv = Csv::create(
        &out_dir.join("summary.csv"),
        "run_id,model,mode,seed,iterations,epochs_completed,initial_accuracy,final_accuracy,crashed,crash_iter,crash_kind,clip_searches",
    )?;
    let (crash_iter, crash_kind) = match summary.crash {
        Some((it, CrashKind::NonFinite)) => (it.to_string(), "non_finite"),
        Some((it, CrashKind::AccuracyCollapse)) => (it.to_string(), "accuracy_collapse"),
        None => (String::new(), ""),
    };
    csv.row(&[
        name.clone(),
        cfg.experiment.model.name().into(),
        format!("{:?}", cfg.experiment.mode).to_lowercase(),
        cfg.experiment.seed.to_string(),
        summary.iterations.to_string(),
        summary.epochs_completed.to_string(),
        fmt_float(summary.initial_accuracy),
        fmt_float(summary.final_accuracy),
        summary.crashed().to_string(),
        crash_iter,
        crash_kind.into(),
        summary.clip_searches.to_string(),
    ])?;
    csv.finish()?;
    let mut csv = Csv::create(&out_dir.join("epochs.csv"), "run_id,epoch,accuracy")?;
    for (e, a) in summary.epoch_accuracy.iter().enumerate() {
        csv.row(&[name.clone(), (e + 1).to_string(), fmt_float(*a)])?;
    }
    csv.finish()?;
    Ok(TrainOutcome { summary, out_dir: out_dir.to_path_buf(), snapshots })
}

/// Evenly strided subsample of at most `max` values.
pub fn subsample(values: &[f32], max: usize) -> Vec<f64> {
    let stride = values.len().div_ceil(max.max(1)).max(1);
    values.iter().step_by(stride).map(|&v| v as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsRow {
    pub iter: u64,
    pub layer: usize,
    pub tensor: &'static str,
    pub family: Family,
    pub n: usize,
    pub ks: f64,
    pub critical: f64,
}

impl KsRow {
    pub fn rejects(&self) -> bool {
        self.ks > self.critical
    }
}

/// KS rows for every snapshot and family. Snapshots too small or constant
/// to fit are skipped.
pub fn ks_table(set: &SnapshotSet, max_samples: usize) -> Vec<KsRow> {
    let mut rows = Vec::new();
    for (tensor, snaps) in [("grad", &set.grads), ("weight", &set.weights)] {
        for s in snaps {
            let x = subsample(&s.values, max_samples);
            for family in Family::ALL {
                if let Ok(f) = ks_test(&x, family) {
                    rows.push(KsRow { iter: s.iter, layer: s.layer, tensor, family, n: f.n, ks: f.ks, critical: f.critical });
                }
            }
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutcome {
    pub ks: Vec<KsRow>,
    /// `(check, key, value)` rows of the characteristic flags.
    pub flags: Vec<(String, String, bool)>,
    /// Per layer: time-averaged cosine distance from the trace.
    pub mean_dc: BTreeMap<usize, f64>,
}

/// Reads a trace and an optional snapshot file and writes `layers.csv`,
/// `ks.csv`, `histograms.csv`, `stats.csv` and `flags.csv`.
pub fn cmd_analyze(
    trace_path: &Path,
    snapshot_path: Option<&Path>,
    bins: usize,
    max_samples: usize,
    out_dir: &Path,
) -> Result<AnalyzeOutcome> {
    let text = fs::read_to_string(trace_path)
        .map_err(|e| Error::Format(format!("cannot read trace {}: {e}", trace_path.display())))?;
    let rows = parse_trace(&text)?;
    fs::create_dir_all(out_dir)?;

    let mut acc: BTreeMap<(String, usize), (usize, f64, f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.dc.is_finite()) {
        let e = acc.entry((r.run_id.clone(), r.layer)).or_insert((0, 0.0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r.dc;
        e.2 = e.2.max(r.dc);
        e.3 += r.clip;
    }
    let mut mean_dc = BTreeMap::new();
    let mut csv = Csv::create(&out_dir.join("layers.csv"), "run_id,layer,iterations,mean_dc,max_dc,mean_clip")?;
    for ((run, layer), (n, sum, max, clip)) in &acc {
        let n_f = *n as f64;
        mean_dc.insert(*layer, sum / n_f);
        csv.row(&[run.clone(), layer.to_string(), n.to_string(), fmt_float(sum / n_f), fmt_float(*max), fmt_float(clip / n_f)])?;
    }
    csv.finish()?;

    let set = match snapshot_path {
        Some(p) => SnapshotSet::from_checkpoint(&Checkpoint::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Format(format!("cannot read snapshots {}: {io}", p.display())),
            other => other,
        })?)?,
        None => SnapshotSet::default(),
    };
    let ks = ks_table(&set, max_samples);
    let mut csv = Csv::create(&out_dir.join("ks.csv"), "iter,layer,tensor,family,n,statistic,critical,reject")?;
    for r in &ks {
        csv.row(&[
            r.iter.to_string(),
            r.layer.to_string(),
            r.tensor.into(),
            r.family.name().into(),
            r.n.to_string(),
            fmt_float(r.ks),
            fmt_float(r.critical),
            r.rejects().to_string(),
        ])?;
    }
    csv.finish()?;

    let report = gradient_snapshot(&set.grads, bins, &set.depthwise)?;
    let mut csv = Csv::create(&out_dir.join("histograms.csv"), "iter,layer,bin,lo,hi,count")?;
    for h in &report.histograms {
        let edges = h.edges();
        for (b, c) in h.counts.iter().enumerate() {
            csv.row(&[h.iter.to_string(), h.layer.to_string(), b.to_string(), fmt_float(edges[b]), fmt_float(edges[b + 1]), c.to_string()])?;
        }
    }
    csv.finish()?;
    let mut csv = Csv::create(&out_dir.join("stats.csv"), "iter,layer,count,range,excess_kurtosis")?;
    for s in &report.stats {
        csv.row(&[s.iter.to_string(), s.layer.to_string(), s.count.to_string(), fmt_float(s.range as f64), fmt_float(s.kurtosis)])?;
    }
    csv.finish()?;

    let mut flags = Vec::new();
    for s in &report.stats {
        flags.push(("c1_heavy_tailed".to_string(), format!("iter{}_layer{}", s.iter, s.layer), s.kurtosis > 0.0));
    }
    for (l, b) in &report.c2 {
        flags.push(("c2_narrows".into(), format!("layer{l}"), *b));
    }
    for (it, b) in &report.c3 {
        flags.push(("c3_shallow_wider".into(), format!("iter{it}"), *b));
    }
    for ((l, it), b) in &report.c4 {
        flags.push(("c4_depthwise_wider".into(), format!("iter{it}_layer{l}"), *b));
    }
    let mut csv = Csv::create(&out_dir.join("flags.csv"), "check,key,value")?;
    for (c, k, v) in &flags {
        csv.row(&[c.clone(), k.clone(), v.to_string()])?;
    }
    csv.finish()?;
    Ok(AnalyzeOutcome { ks, flags, mean_dc })
}

/// Projected online SGD on the logistic harness; writes `bound.csv` and
/// `regret.csv`. Only the convex model is accepted.
pub fn cmd_verify_bound(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BoundReport> {
    if !cfg.experiment.model.is_convex() {
        return Err(Error::Config(format!(
            "experiment.model: verify-bound needs a convex model, got {}",
            cfg.experiment.model.name()
        )));
    }
    let b = &cfg.bound;
    let seed = cfg.experiment.seed;
    let problem = Problem::logistic(b.samples, b.dim, b.lambda, seed);
    let w_star = solve_optimum(&problem, b.radius, 1e-10, 1_000_000)?;
    let hc = HarnessConfig { rounds: b.rounds, radius: b.radius, step: b.step_size(), quant: b.grad_quant(), seed, project: true };
    let trace = run_online(&problem, &w_star, &hc)?;
    let report = verify_bound(&trace, b.rounds)?;

    fs::create_dir_all(out_dir)?;
    let mut csv = Csv::create(&out_dir.join("regret.csv"), "t,loss,loss_star,eps_norm,eta,ghat_sqnorm")?;
    for (t, e) in trace.entries.iter().enumerate() {
        csv.row(&[t.to_string(), fmt_float(e.loss), fmt_float(e.loss_star), fmt_float(e.eps_norm), fmt_float(e.eta), fmt_float(e.ghat_sqnorm)])?;
    }
    csv.finish()?;
    let mut csv = Csv::create(&out_dir.join("bound.csv"), "run_id,seed,t,avg_regret,term1,term2,term3,bound,holds,term2_l1")?;
    csv.row(&[
        cfg.experiment.name.clone(),
        seed.to_string(),
        report.t.to_string(),
        fmt_float(report.avg_regret),
        fmt_float(report.terms.term1),
        fmt_float(report.terms.term2),
        fmt_float(report.terms.term3),
        fmt_float(report.bound),
        report.holds.to_string(),
        fmt_float(report.term2_l1),
    ])?;
    csv.finish()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub geometry: String,
    /// FP32 time for convolutions, unfused time for the GEMM rows.
    pub baseline: f64,
    pub int8: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.baseline / self.int8
    }
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn bench_tensor(dims: &[usize], stream: &mut LcgStream) -> Result<Tensor> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| stream.next_f32() * 2.0 - 1.0).collect())
}

/// Median wall time of FP32 and INT8 convolutions (the INT8 side includes
/// quantizing both operands), and of fused against unfused quantize-GEMM.
/// Writes `bench.csv` and `fused.csv`.
pub fn cmd_bench(bench: &BenchSection, seed: u64, out_dir: &Path) -> Result<(Vec<BenchRow>, Vec<BenchRow>)> {
    if bench.reps < 5 {
        return Err(Error::Config(format!("bench.reps: at least 5 repetitions are required, got {}", bench.reps)));
    }
    let mut stream = LcgStream::from_seed(seed);
    let mut conv_rows = Vec::new();
    for c in &bench.conv {
        let geom = c.geometry()?;
        let x = bench_tensor(&geom.input_dims(), &mut stream)?;
        let w = bench_tensor(&geom.weight_dims(), &mut stream)?;
        let fp32 = time_median(bench.reps, || conv2d_f32(&x, &w, &geom).map(|_| ()))?;
        let int8 = time_median(bench.reps, || {
            let qa = quantize(&x, QuantParams::from_max_abs(x.max_abs())?, RoundingMode::Nearest, None)?;
            let qw = quantize(&w, QuantParams::from_max_abs(w.max_abs())?, RoundingMode::Nearest, None)?;
            conv2d_q(&qa, &qw, &geom).map(|_| ())
        })?;
        conv_rows.push(BenchRow { geometry: c.label(), baseline: fp32, int8 });
    }
    let mut gemm_rows = Vec::new();
    for &[m, k, n] in &bench.gemm {
        let a = bench_tensor(&[m, k], &mut stream)?;
        let bq = (0..n * k).map(|_| (stream.next_u32() % 255) as i32 - 127).map(|v| v as i8).collect();
        let bt = Int8Matrix::new(n, k, bq)?;
        let params = QuantParams::from_max_abs(a.max_abs())?;
        let unfused = time_median(bench.reps, || {
            let q = quantize(&a, params, RoundingMode::Nearest, None)?;
            gemm_i8_nt(&Int8Matrix::new(m, k, q.values().to_vec())?, &bt).map(|_| ())
        })?;
        let fused = time_median(bench.reps, || {
            gemm_quantize_fused_nt(a.data(), m, params, RoundingMode::Nearest, None, &bt).map(|_| ())
        })?;
        gemm_rows.push(BenchRow { geometry: format!("m{m}k{k}n{n}"), baseline: unfused, int8: fused });
    }

    fs::create_dir_all(out_dir)?;
    let mut csv = Csv::create(&out_dir.join("bench.csv"), "geometry,fp32_seconds,int8_seconds,ratio")?;
    for r in &conv_rows {
        csv.row(&[r.geometry.clone(), fmt_float(r.baseline), fmt_float(r.int8), fmt_float(r.ratio())])?;
    }
    csv.finish()?;
    let mut csv = Csv::create(&out_dir.join("fused.csv"), "geometry,unfused_seconds,fused_seconds,ratio")?;
    for r in &gemm_rows {
        csv.row(&[r.geometry.clone(), fmt_float(r.baseline), fmt_float(r.int8), fmt_float(r.ratio())])?;
    }
    csv.finish()?;
    Ok((conv_rows, gemm_rows))
}
