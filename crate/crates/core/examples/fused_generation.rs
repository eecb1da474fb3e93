//! Greedy and beam decoding with and without the copilot, keeping per-step records.

use tcopilot::config::RunConfig;
use tcopilot::inference::{generate_fused, Decoding, FusionConfig};
use tcopilot::tasks::{generate_dataset, modadd_prompt};
use tcopilot::training::train_joint;

fn main() -> tcopilot::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.training.rounds = 400;
    cfg.training.warmup_steps = 20;
    let (train, _) = generate_dataset(&cfg.task)?;
    let run = train_joint::<f32>(&cfg.pilot, &cfg.copilot, &cfg.training, &train, None)?;
    let copilot = run.copilot.as_ref().expect("joint run");

    let prompt = modadd_prompt(45, 67);
    for (name, fusion) in [
        ("pilot only", FusionConfig { lambda: 0.0, ..FusionConfig::default() }),
        ("greedy, lambda 1", FusionConfig::default()),
        ("beam 4, lambda 1", FusionConfig { decoding: Decoding::Beam, ..FusionConfig::default() }),
    ] {
        let fusion = FusionConfig { keep_records: true, max_new_tokens: 4, ..fusion };
        let r = generate_fused(&run.pilot, Some(copilot), &prompt, &fusion)?;
        println!("{name:>18}: [{}] ({})", r.tokens, r.termination);
        if let Some(first) = r.records.first() {
            let shift: f64 = first.fused.iter().zip(&first.p_hat).map(|(a, b)| (a - b).abs()).sum();
            println!("{:>18}  step 0 total |p_tilde - p_hat| = {shift:.4}", "");
        }
    }
    Ok(())
}
