//! Per-layer token preferences of a briefly trained pilot.

use tcopilot::numerics::softmax;
use tcopilot::pilot::PilotConfig;
use tcopilot::tasks::{generate_dataset, modadd_example, SyntheticTaskSpec};
use tcopilot::training::{train_pilot_only, TrainingConfig};

fn main() -> tcopilot::Result<()> {
    let spec = SyntheticTaskSpec::default();
    let (train, _) = generate_dataset(&spec)?;
    let cfg = TrainingConfig { rounds: 600, warmup_steps: 30, ..TrainingConfig::default() };
    let run = train_pilot_only::<f32>(&PilotConfig::default(), &cfg, &train, None)?;

    let ex = modadd_example(58, 71, spec.modulus);
    let trace = run.pilot.forward(ex.input.ids(), &ex.target.ids()[..ex.target.len() - 1])?;
    let lens = run.pilot.logit_lens(&trace)?;
    let (layers, rows, v) = (lens.shape()[0], lens.shape()[1], lens.shape()[2]);
    println!("prompt [{}] target [{}]", ex.input, ex.target);
    for l in 0..layers {
        let mut line = format!("layer {l}:");
        for i in 0..rows {
            let p = softmax(&lens.data()[(l * rows + i) * v..(l * rows + i + 1) * v])?;
            let gold = ex.target.ids()[i] as usize;
            line.push_str(&format!("  row {i} p(gold)={:.3}", p[gold]));
        }
        println!("{line}");
    }
    Ok(())
}
