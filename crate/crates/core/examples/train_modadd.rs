//! Joint pilot/copilot training on modular addition, written to a run directory.
//!
//! `cargo run --release --example train_modadd -- [rounds] [out_dir]`

use std::path::PathBuf;

use tcopilot::config::RunConfig;
use tcopilot::inference::evaluate;
use tcopilot::tasks::generate_dataset;
use tcopilot::training::{train_joint, RunOutput};

fn main() -> tcopilot::Result<()> {
    let mut args = std::env::args().skip(1);
    let rounds: usize = args.next().map_or(600, |s| s.parse().expect("rounds"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("tcopilot_modadd"), PathBuf::from);

    let mut cfg = RunConfig::default();
    cfg.training.rounds = rounds;
    cfg.training.warmup_steps = rounds / 20;
    cfg.training.checkpoint_every = rounds / 2;
    cfg.fusion.max_new_tokens = 4;
    let (train, heldout) = generate_dataset(&cfg.task)?;
    let kv = cfg.to_kv();
    let run = train_joint::<f32>(&cfg.pilot, &cfg.copilot, &cfg.training, &train, Some(RunOutput { dir: &out, config: &kv }))?;

    for m in run.metrics.iter().step_by((rounds / 6).max(1)) {
        println!(
            "round {:>5}  pilot CE/token {:.4}  copilot RMSE/token {:.4}",
            m.step,
            m.pilot_loss_per_token,
            m.copilot_loss_per_token.unwrap_or(f64::NAN)
        );
    }
    let copilot = run.copilot.as_ref().expect("joint run");
    let pilot_only = evaluate(&run.pilot, None, &heldout, &cfg.fusion)?;
    let fused = evaluate(&run.pilot, Some(copilot), &heldout, &cfg.fusion)?;
    println!("pilot only: exact match {:.3}, token accuracy {:.3}", pilot_only.exact_match, pilot_only.token_accuracy);
    println!("fused:      exact match {:.3}, token accuracy {:.3}", fused.exact_match, fused.token_accuracy);
    if let Some(m) = &run.manifest {
        println!("manifest: {}", m.path.display());
    }
    Ok(())
}
