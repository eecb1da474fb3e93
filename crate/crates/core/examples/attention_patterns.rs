//! Where each insertion pattern places cross-attention, and which pilot layers it pools.

use tcopilot::copilot::{AttentionPattern, Copilot, CopilotConfig};
use tcopilot::pilot::{Architecture, PilotConfig};

fn main() -> tcopilot::Result<()> {
    let pilot = PilotConfig { num_layers: 4, ..PilotConfig::default() };
    for pattern in [
        AttentionPattern::Pattern1,
        AttentionPattern::Pattern2,
        AttentionPattern::Pattern3,
        AttentionPattern::Pattern4,
    ] {
        let mut cfg = CopilotConfig::for_pilot(&pilot, 4, 32, 4);
        cfg.attention_pattern = pattern;
        let s = Copilot::<f32>::new(cfg.clone(), 0)?.structure();
        println!(
            "{pattern}: self layers {:?}, cross layers {:?}, pilot layers pooled {:?}",
            s.self_layers,
            s.cross_layers,
            cfg.pooled_layers()
        );
    }
    let ed = PilotConfig { architecture: Architecture::EncoderDecoder, ..PilotConfig::default() };
    let s = Copilot::<f32>::new(CopilotConfig::for_pilot(&ed, 2, 32, 4), 0)?.structure();
    println!("encoder-decoder: self layers {:?}, cross layers {:?}", s.self_layers, s.cross_layers);
    let one = Copilot::<f32>::new(CopilotConfig::for_pilot(&pilot, 1, 32, 4), 0)?;
    println!(
        "one-layer pattern1 copilot uses pilot context: {}",
        one.config().uses_context()
    );
    Ok(())
}
