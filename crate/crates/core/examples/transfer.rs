//! A copilot trained with one pilot, evaluated alongside a pilot from another seed.

use tcopilot::config::RunConfig;
use tcopilot::inference::{transfer_eval, FusionConfig};
use tcopilot::tasks::generate_dataset;
use tcopilot::training::{train_joint, TrainingConfig};

fn main() -> tcopilot::Result<()> {
    let cfg = RunConfig::default();
    let (train, heldout) = generate_dataset(&cfg.task)?;
    let short = |seed| TrainingConfig { rounds: 500, warmup_steps: 25, seed, ..cfg.training.clone() };
    let a = train_joint::<f32>(&cfg.pilot, &cfg.copilot, &short(1), &train, None)?;
    let b = train_joint::<f32>(&cfg.pilot, &cfg.copilot, &short(2), &train, None)?;
    let fusion = FusionConfig { max_new_tokens: 4, ..FusionConfig::default() };
    let data = &heldout[..200];
    let own = transfer_eval(a.copilot.as_ref().expect("joint"), &a.pilot, data, &fusion)?;
    let cross = transfer_eval(a.copilot.as_ref().expect("joint"), &b.pilot, data, &fusion)?;
    println!("copilot A + pilot A: pilot {:.3} fused {:.3}", own.pilot_only.exact_match, own.fused.exact_match);
    println!("copilot A + pilot B: pilot {:.3} fused {:.3}", cross.pilot_only.exact_match, cross.fused.exact_match);
    Ok(())
}
