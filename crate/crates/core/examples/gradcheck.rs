//! Finite-difference check of a composite expression and of a full pilot loss.

use tcopilot::numerics::{grad_check, Bound, Mask, Tape, Tensor, Var};
use tcopilot::pilot::{batch_loss, forward_tape, Pilot, PilotConfig, PilotInput};
use tcopilot::tasks::TokenSequence;

fn main() -> tcopilot::Result<()> {
    // attention-shaped expression: softmax(q k^T) v, summed
    let q = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let k = Tensor::new(vec![1, 3, 4], (0..12).map(|i| (i as f64 * 0.11).cos()).collect())?;
    let v = Tensor::new(vec![1, 3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())?;
    let report = grad_check(
        |t: &mut Tape<f64>, x: &[Var]| {
            let s = t.bmm(x[0], x[1], true);
            let a = t.masked_softmax(s, &Mask::causal(3));
            let o = t.bmm(a, x[2], false);
            t.sum_all(o)
        },
        &[q, k, v],
        1e-5,
    )?;
    println!("attention: max relative error {:.2e} over {} elements", report.max_rel_error, report.elements_checked);

    let cfg = PilotConfig {
        vocab_size: 16,
        max_seq_len: 8,
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        ..PilotConfig::default()
    };
    let pilot = Pilot::<f64>::new(cfg.clone(), 3)?;
    let names: Vec<String> = pilot.params().names().map(str::to_string).collect();
    let tensors: Vec<Tensor<f64>> = pilot.params().iter().map(|(_, t)| t.clone()).collect();
    let prompt: TokenSequence = "4 13 5 14".parse()?;
    let target: TokenSequence = "12 2".parse()?;
    let report = grad_check(
        |t: &mut Tape<f64>, x: &[Var]| {
            let p = Bound::from_pairs(names.iter().cloned().zip(x.iter().copied()));
            let fwd = forward_tape(&cfg, t, &p, &[PilotInput::teacher_forced(&prompt, &target)]).unwrap();
            batch_loss(t, &fwd, &[&target]).unwrap()
        },
        &tensors,
        1e-5,
    )?;
    println!("pilot loss: max relative error {:.2e} over {} parameters", report.max_rel_error, report.elements_checked);
    Ok(())
}
