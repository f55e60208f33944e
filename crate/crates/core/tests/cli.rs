use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_int8train")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn synthetic(model: &str, epochs: usize, extra: &str) -> String {
    format!(
        r#"[experiment]
name = "t"
model = "{model}"
width = 4

[dataset]
kind = "synthetic_blobs"
classes = 4
dim = 48
train = 128
test = 64
noise = 1.0

[optim]
epochs = {epochs}
batch_size = 16

[clip]
period = 3
{extra}"#
    )
}

#[test]
fn same_config_and_seed_give_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", &synthetic("tiny_mobilenet", 2, "[analysis]\ncapture_iters = [0, 9]\n"));
    let mut traces = Vec::new();
    for run in ["r1", "r2"] {
        let out = dir.path().join(run);
        let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.contains("final test accuracy") && stdout.contains("crashed"), "{stdout}");
        traces.push(fs::read(out.join("trace.csv")).unwrap());
        assert!(out.join("checkpoint.i8ft").exists());
        assert!(out.join("snapshots.i8ft").exists());
    }
    assert_eq!(traces[0], traces[1]);
    let text = String::from_utf8(traces[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 16 * 12);

    let other = dir.path().join("r3");
    assert_eq!(code(&bin(&["train", "--config", &cfg, "--out", other.to_str().unwrap(), "--seed", "5"])), 0);
    assert_ne!(fs::read(other.join("trace.csv")).unwrap(), traces[0]);

    let analysis = dir.path().join("an");
    let o = bin(&["analyze", dir.path().join("r1/trace.csv").to_str().unwrap(), "--out", analysis.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ks.csv", "flags.csv", "histograms.csv", "stats.csv", "layers.csv"] {
        assert!(analysis.join(f).exists(), "{f}");
    }
    let ks = fs::read_to_string(analysis.join("ks.csv")).unwrap();
    assert!(ks.lines().count() > 1);
}

#[test]
fn zero_epochs_reports_initial_accuracy_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "z", &synthetic("tiny_cnn", 0, ""));
    let out = dir.path().join("out");
    let o = bin(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "0");
    assert_eq!(row[6], row[7]);
    assert_eq!(row[8], "false");
    assert_eq!(fs::read_to_string(out.join("trace.csv")).unwrap().lines().count(), 1);
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "bad", "[experiment]\nname = \n");
    let o = bin(&["train", "--config", &bad]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let unknown = config(dir.path(), "unknown", &synthetic("tiny_cnn", 1, "bogus = 1\n"));
    assert_eq!(code(&bin(&["train", "--config", &unknown])), 2);

    let missing = config(
        dir.path(),
        "missing",
        "[experiment]\nname = \"m\"\nmodel = \"tiny_cnn\"\n[dataset]\nkind = \"cifar10\"\npath = \"/nonexistent/cifar\"\n",
    );
    let o = bin(&["train", "--config", &missing, "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let trace = dir.path().join("trace.csv");
    fs::write(&trace, "run_id,iter,layer,loss,dc,clip,lr_scale,eps_norm,ghat_sqnorm\nx,1,2\n").unwrap();
    assert_eq!(code(&bin(&["analyze", trace.to_str().unwrap(), "--out", dir.path().join("a").to_str().unwrap()])), 4);
    assert_eq!(code(&bin(&["analyze", dir.path().join("absent.csv").to_str().unwrap()])), 4);

    let cnn = config(dir.path(), "cnn", &synthetic("tiny_cnn", 1, ""));
    assert_eq!(code(&bin(&["verify-bound", "--config", &cnn])), 2);
}

#[test]
fn verify_bound_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "convex",
        &(synthetic("convex_logistic", 1, "")
            + "[bound]\nsamples = 200\ndim = 20\nrounds = 300\nquant = \"ratio\"\nclip = 0.25\n"
            + "[bench]\nreps = 5\ngemm = [[8, 1024, 4]]\nconv = [{ batch = 1, channels = 1, size = 1, out = 1, kernel = 1 }]\n"),
    );
    let out = dir.path().join("vb");
    let o = bin(&["verify-bound", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    let bound = fs::read_to_string(out.join("bound.csv")).unwrap();
    assert!(bound.lines().nth(1).unwrap().contains(",true,"));
    assert_eq!(fs::read_to_string(out.join("regret.csv")).unwrap().lines().count(), 301);

    let bench = dir.path().join("bench");
    let o = bin(&["bench", "--config", &cfg, "--out", bench.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(bench.join("bench.csv")).unwrap().lines().count(), 2);
    assert_eq!(fs::read_to_string(bench.join("fused.csv")).unwrap().lines().count(), 2);
}
