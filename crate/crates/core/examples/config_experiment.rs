//! Runs a training experiment described in TOML, as the `train` subcommand
//! does, and prints the files it writes.
//!
//! Run: `cargo run --release --example config_experiment`

use int8_train::cli::cmd_train;
use int8_train::config::ExperimentConfig;

const CONFIG: &str = r#"
[experiment]
name = "example"
model = "tiny_cnn"
width = 4
mode = "int8"
seed = 3

[dataset]
kind = "synthetic_blobs"
classes = 5
dim = 48
train = 600
test = 300
noise = 1.0

[optim]
lr = 0.1
epochs = 2
batch_size = 32

[clip]
policy = "search"
period = 20

[lr_scale]
alpha = 20.0
beta = 0.1
form = "exponential"

[analysis]
capture_iters = [10, 30]
"#;

fn main() -> int8_train::Result<()> {
    let cfg = ExperimentConfig::from_toml(CONFIG)?;
    cfg.validate()?;
    let out = std::env::temp_dir().join("int8train-config-example");
    let o = cmd_train(&cfg, &out)?;
    println!("final accuracy {:.2}% after {} iterations", 100.0 * o.summary.final_accuracy, o.summary.iterations);
    let mut files: Vec<_> = std::fs::read_dir(&out)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    files.sort();
    for f in files {
        println!("  {}", f.display());
    }
    let trace = std::fs::read_to_string(out.join("trace.csv"))?;
    for line in trace.lines().take(4) {
        println!("{line}");
    }
    Ok(())
}
