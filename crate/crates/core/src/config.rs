//! Flat `key=value` run configuration shared by every subcommand.
//!
//! | key | default |
//! |---|---|
//! | `task` | `modadd` |
//! | `modulus` | 97 |
//! | `min_len`, `max_len` | 3, 6 (copy and reverse only) |
//! | `train_size`, `heldout_size` | 6000, 500 |
//! | `data_seed` | 0 |
//! | `architecture` | `decoder_only` |
//! | `vocab_size`, `max_seq_len` | 16, 16 |
//! | `pilot_layers`, `pilot_hidden_dim`, `pilot_heads`, `pilot_ffn_dim` | 2, 64, 4, 256 |
//! | `copilot_layers`, `copilot_hidden_dim`, `copilot_heads`, `copilot_ffn_dim` | 1, 32, 4, 128 |
//! | `attention_pattern` | `pattern1` |
//! | `pool_mode` | `mean` |
//! | `rounds` | 4000 |
//! | `batch_size`, `micro_batch_size` | 32, 32 |
//! | `lr_pilot`, `lr_copilot` | 2e-3, 2e-3 |
//! | `warmup_steps` | 200 |
//! | `weight_decay`, `grad_clip` | 0.01, 1.0 |
//! | `seed` | 0 |
//! | `log_capacity` | 128 (`none` disables eviction) |
//! | `copilot_steps_per_round`, `copilot_sampling` | 1, `fresh` |
//! | `hidden_storage` | `pooled` |
//! | `checkpoint_every` | 1000 |
//! | `lambda` | 1.0 |
//! | `decoding`, `beam_width` | `greedy`, 4 |
//! | `max_new_tokens` | 8 |
//! | `temperature`, `top_k`, `top_p` | 1.0, 0, 1.0 |
//! | `renormalize` | false |

use std::path::Path;

use crate::copilot::{AttentionPattern, CopilotConfig};
use crate::error::{Error, Result};
use crate::inference::{Decoding, FusionConfig};
use crate::kv::KvMap;
use crate::mistake_log::HiddenStorage;
use crate::nn::PoolMode;
use crate::pilot::{Architecture, PilotConfig};
use crate::tasks::{SyntheticTaskSpec, TaskKind};
use crate::training::{CopilotSampling, TrainingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: SyntheticTaskSpec,
    pub pilot: PilotConfig,
    pub copilot: CopilotConfig,
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pilot = PilotConfig::default();
        Self {
            task: SyntheticTaskSpec::default(),
            copilot: CopilotConfig::for_pilot(&pilot, 1, 32, 4),
            pilot,
            training: TrainingConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

fn capacity_str(c: Option<usize>) -> String {
    c.map_or("none".into(), |v| v.to_string())
}

impl RunConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let t = &self.task;
        m.insert("task", t.task);
        m.insert("modulus", t.modulus);
        m.insert("min_len", t.min_len);
        m.insert("max_len", t.max_len);
        m.insert("train_size", t.train_size);
        m.insert("heldout_size", t.heldout_size);
        m.insert("data_seed", t.seed);
        let p = &self.pilot;
        m.insert("architecture", p.architecture);
        m.insert("vocab_size", p.vocab_size);
        m.insert("max_seq_len", p.max_seq_len);
        m.insert("pilot_layers", p.num_layers);
        m.insert("pilot_hidden_dim", p.hidden_dim);
        m.insert("pilot_heads", p.num_heads);
        m.insert("pilot_ffn_dim", p.ffn_dim);
        let c = &self.copilot;
        m.insert("copilot_layers", c.num_layers);
        m.insert("copilot_hidden_dim", c.hidden_dim);
        m.insert("copilot_heads", c.num_heads);
        m.insert("copilot_ffn_dim", c.ffn_dim);
        m.insert("attention_pattern", c.attention_pattern);
        m.insert("pool_mode", c.pool_mode);
        let r = &self.training;
        m.insert("rounds", r.rounds);
        m.insert("batch_size", r.batch_size);
        m.insert("micro_batch_size", r.micro_batch_size);
        m.insert("lr_pilot", r.lr_pilot);
        m.insert("lr_copilot", r.lr_copilot);
        m.insert("warmup_steps", r.warmup_steps);
        m.insert("weight_decay", r.weight_decay);
        m.insert("grad_clip", r.grad_clip);
        m.insert("seed", r.seed);
        m.insert("log_capacity", capacity_str(r.log_capacity));
        m.insert("copilot_steps_per_round", r.copilot_steps_per_round);
        m.insert("copilot_sampling", r.copilot_sampling);
        m.insert("hidden_storage", r.hidden_storage);
        m.insert("checkpoint_every", r.checkpoint_every);
        let f = &self.fusion;
        m.insert("lambda", f.lambda);
        m.insert("decoding", f.decoding);
        m.insert("beam_width", f.beam_width);
        m.insert("max_new_tokens", f.max_new_tokens);
        m.insert("temperature", f.temperature);
        m.insert("top_k", f.top_k);
        m.insert("top_p", f.top_p);
        m.insert("renormalize", f.renormalize);
        m
    }

    /// Consumes every key of `m`; leftovers are unknown keys and rejected.
    pub fn from_kv(mut m: KvMap) -> Result<Self> {
        let d = Self::default();
        let task = SyntheticTaskSpec {
            task: m.take_or::<TaskKind>("task", d.task.task)?,
            modulus: m.take_or("modulus", d.task.modulus)?,
            min_len: m.take_or("min_len", d.task.min_len)?,
            max_len: m.take_or("max_len", d.task.max_len)?,
            train_size: m.take_or("train_size", d.task.train_size)?,
            heldout_size: m.take_or("heldout_size", d.task.heldout_size)?,
            seed: m.take_or("data_seed", d.task.seed)?,
            vocab_size: 0,
        };
        let pilot = PilotConfig {
            architecture: m.take_or::<Architecture>("architecture", d.pilot.architecture)?,
            vocab_size: m.take_or("vocab_size", d.pilot.vocab_size)?,
            max_seq_len: m.take_or("max_seq_len", d.pilot.max_seq_len)?,
            num_layers: m.take_or("pilot_layers", d.pilot.num_layers)?,
            hidden_dim: m.take_or("pilot_hidden_dim", d.pilot.hidden_dim)?,
            num_heads: m.take_or("pilot_heads", d.pilot.num_heads)?,
            ffn_dim: m.take_or("pilot_ffn_dim", d.pilot.ffn_dim)?,
        };
        pilot.validate()?;
        let task = SyntheticTaskSpec {
            vocab_size: pilot.vocab_size,
            ..task
        };
        let c_layers = m.take_or("copilot_layers", d.copilot.num_layers)?;
        let c_hidden = m.take_or("copilot_hidden_dim", d.copilot.hidden_dim)?;
        let c_heads = m.take_or("copilot_heads", d.copilot.num_heads)?;
        let mut copilot = CopilotConfig::for_pilot(&pilot, c_layers, c_hidden, c_heads);
        copilot.ffn_dim = m.take_or("copilot_ffn_dim", 4 * c_hidden)?;
        copilot.attention_pattern = m.take_or::<AttentionPattern>("attention_pattern", d.copilot.attention_pattern)?;
        copilot.pool_mode = m.take_or::<PoolMode>("pool_mode", d.copilot.pool_mode)?;
        copilot.validate()?;
        let log_capacity = match m.take::<String>("log_capacity")? {
            None => d.training.log_capacity,
            Some(s) if s == "none" => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config(format!("key \"log_capacity\": cannot parse {s:?}")))?,
            ),
        };
        let training = TrainingConfig {
            rounds: m.take_or("rounds", d.training.rounds)?,
            batch_size: m.take_or("batch_size", d.training.batch_size)?,
            micro_batch_size: m.take_or("micro_batch_size", d.training.micro_batch_size)?,
            lr_pilot: m.take_or("lr_pilot", d.training.lr_pilot)?,
            lr_copilot: m.take_or("lr_copilot", d.training.lr_copilot)?,
            warmup_steps: m.take_or("warmup_steps", d.training.warmup_steps)?,
            weight_decay: m.take_or("weight_decay", d.training.weight_decay)?,
            grad_clip: m.take_or("grad_clip", d.training.grad_clip)?,
            seed: m.take_or("seed", d.training.seed)?,
            log_capacity,
            copilot_steps_per_round: m.take_or("copilot_steps_per_round", d.training.copilot_steps_per_round)?,
            copilot_sampling: m.take_or::<CopilotSampling>("copilot_sampling", d.training.copilot_sampling)?,
            hidden_storage: m.take_or::<HiddenStorage>("hidden_storage", d.training.hidden_storage)?,
            checkpoint_every: m.take_or("checkpoint_every", d.training.checkpoint_every)?,
        };
        training.validate()?;
        let fusion = FusionConfig {
            lambda: m.take_or("lambda", d.fusion.lambda)?,
            decoding: m.take_or::<Decoding>("decoding", d.fusion.decoding)?,
            beam_width: m.take_or("beam_width", d.fusion.beam_width)?,
            max_new_tokens: m.take_or("max_new_tokens", d.fusion.max_new_tokens)?,
            temperature: m.take_or("temperature", d.fusion.temperature)?,
            top_k: m.take_or("top_k", d.fusion.top_k)?,
            top_p: m.take_or("top_p", d.fusion.top_p)?,
            renormalize: m.take_or("renormalize", d.fusion.renormalize)?,
            keep_records: false,
        };
        fusion.validate()?;
        m.finish()?;
        Ok(Self {
            task,
            pilot,
            copilot,
            training,
            fusion,
        })
    }

    /// Reads `path` (if any) and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &KvMap) -> Result<Self> {
        let mut m = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        m.merge(overrides);
        Self::from_kv(m)
    }

    /// Rebuilds the configuration echoed into a run manifest, skipping the
    /// keys the training loop appends (metrics path, checkpoints, timing).
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = KvMap::new();
        for (k, v) in KvMap::parse(&text)?.iter() {
            if !is_manifest_bookkeeping(k) {
                m.insert(k, v);
            }
        }
        Self::from_kv(m)
    }
}

fn is_manifest_bookkeeping(key: &str) -> bool {
    matches!(key, "metrics" | "wall_ms" | "kind") || key.starts_with("checkpoint.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_kv(KvMap::parse("").unwrap()).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.fusion.lambda, 1.0);
        assert_eq!(c.training.log_capacity, Some(128));
        assert_eq!(c.fusion.beam_width, 4);
        assert_eq!(c.copilot.attention_pattern, AttentionPattern::Pattern1);
        assert_eq!(c.copilot.pool_mode, PoolMode::Mean);
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# test\nlambda=0.5\nrounds = 10\n").unwrap();
        let mut o = KvMap::new();
        o.insert("lambda", 0.8);
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!(c.fusion.lambda, 0.8);
        assert_eq!(c.training.rounds, 10);
    }

    #[test]
    fn rejects_bad_values_and_keys() {
        assert!(RunConfig::from_kv(KvMap::parse("lambda=abc").unwrap()).is_err());
        assert!(RunConfig::from_kv(KvMap::parse("lambada=1").unwrap()).is_err());
        assert!(RunConfig::from_kv(KvMap::parse("attention_pattern=pattern9").unwrap()).is_err());
        assert!(RunConfig::from_kv(KvMap::parse("lambda=-1").unwrap()).is_err());
    }

    #[test]
    fn round_trip_and_unbounded_log() {
        let mut c = RunConfig::default();
        c.training.log_capacity = None;
        c.copilot.attention_pattern = AttentionPattern::Pattern3;
        c.fusion.decoding = Decoding::Beam;
        assert_eq!(RunConfig::from_kv(c.to_kv()).unwrap(), c);
    }
}
