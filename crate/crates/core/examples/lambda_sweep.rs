//! Exact match across fusion weights, written as CSV.

use tcopilot::config::RunConfig;
use tcopilot::inference::{lambda_sweep, write_sweep_csv, FusionConfig};
use tcopilot::tasks::generate_dataset;
use tcopilot::training::train_joint;

fn main() -> tcopilot::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.training.rounds = 500;
    cfg.training.warmup_steps = 25;
    let (train, heldout) = generate_dataset(&cfg.task)?;
    let run = train_joint::<f32>(&cfg.pilot, &cfg.copilot, &cfg.training, &train, None)?;
    let fusion = FusionConfig { max_new_tokens: 4, ..FusionConfig::default() };
    let rows = lambda_sweep(&run.pilot, run.copilot.as_ref().expect("joint"), &heldout[..200], &[0.1, 0.3, 0.5, 0.8, 1.0, 2.0], &fusion)?;
    let path = std::env::temp_dir().join("tcopilot_sweep.csv");
    write_sweep_csv(&path, &rows)?;
    print!("{}", std::fs::read_to_string(&path).expect("just written"));
    Ok(())
}
