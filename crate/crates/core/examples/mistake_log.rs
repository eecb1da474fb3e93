//! Bounded FIFO of training rounds: eviction, sampling and spilling to disk.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcopilot::mistake_log::{make_entry, HiddenStorage, MistakeLogBuffer};
use tcopilot::nn::PoolMode;
use tcopilot::pilot::{Pilot, PilotConfig};
use tcopilot::tasks::modadd_example;

fn main() -> tcopilot::Result<()> {
    let pilot = Pilot::<f32>::new(PilotConfig::default(), 0)?;
    let mut log = MistakeLogBuffer::new(Some(4))?;
    for round in 0..10u32 {
        let ex = modadd_example(round, 2 * round, 97);
        let trace = pilot.forward(ex.input.ids(), &ex.target.ids()[..ex.target.len() - 1])?;
        log.record(make_entry(round as u64, &[trace], &[&ex.target], HiddenStorage::Pooled, PoolMode::Mean)?)?;
    }
    let rounds: Vec<u64> = log.entries().map(|e| e.round).collect();
    println!("capacity 4 after 10 rounds keeps {rounds:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let drawn: Vec<u64> = (0..8).map(|_| log.sample(&mut rng).map(|e| e.round)).collect::<Result<_, _>>()?;
    println!("uniform draws: {drawn:?}");
    let newest = log.newest().expect("non-empty");
    println!("newest entry hash {:016x}", newest.content_hash());
    let path = std::env::temp_dir().join("tcopilot_log.ckpt");
    log.spill(&path)?;
    println!("spilled to {}", path.display());
    Ok(())
}
