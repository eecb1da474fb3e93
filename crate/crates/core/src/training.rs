//! Joint training: each round runs a pilot step, records the round's errors
//! in the mistake log, then trains the Copilot on log entries.
//!
//! Data order, pilot init, copilot init and log sampling use separate seeded
//! streams, so the pilot trajectory does not depend on whether a Copilot is
//! trained alongside it.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::copilot::{self, build_cross_context, Copilot, CopilotConfig, CopilotInput, CrossContext};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::mistake_log::{make_entry, HiddenStorage, MistakeLogBuffer, MistakeLogEntry};
use crate::numerics::{adamw_step, clip_grad_norm, cosine_lr, Gradients, OptimizerState, Scalar, Tape, Tensor};
use crate::pilot::{self, Pilot, PilotConfig, PilotInput, PilotTrace};
use crate::tasks::{Example, TokenSequence};

const DATA_STREAM: u64 = 1;
const LOG_STREAM: u64 = 2;
const COPILOT_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// How the Copilot picks log entries after the first step of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CopilotSampling {
    /// Every copilot step of round `t` trains on round `t`'s entry.
    #[default]
    Fresh,
    /// The first step uses the fresh entry, further steps draw uniformly.
    Uniform,
}

impl FromStr for CopilotSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown copilot sampling {other:?}"))),
        }
    }
}

impl std::fmt::Display for CopilotSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fresh => "fresh",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub batch_size: usize,
    /// Gradient-accumulation chunk; equal to `batch_size` disables accumulation.
    pub micro_batch_size: usize,
    pub lr_pilot: f64,
    pub lr_copilot: f64,
    /// Clamped to `rounds`.
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// `None` keeps every round.
    pub log_capacity: Option<usize>,
    pub copilot_steps_per_round: usize,
    pub copilot_sampling: CopilotSampling,
    pub hidden_storage: HiddenStorage,
    /// Periodic checkpoint cadence in rounds; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 4000,
            batch_size: 32,
            micro_batch_size: 32,
            lr_pilot: 2e-3,
            lr_copilot: 2e-3,
            warmup_steps: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            log_capacity: Some(crate::mistake_log::DEFAULT_CAPACITY),
            copilot_steps_per_round: 1,
            copilot_sampling: CopilotSampling::Fresh,
            hidden_storage: HiddenStorage::Pooled,
            checkpoint_every: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.copilot_steps_per_round == 0 {
            return Err(Error::Config("copilot_steps_per_round must be positive".into()));
        }
        if self.log_capacity == Some(0) {
            return Err(Error::Config("log capacity must be positive".into()));
        }
        for (name, v) in [
            ("lr_pilot", self.lr_pilot),
            ("lr_copilot", self.lr_copilot),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    fn lr(&self, round: usize, max_lr: f64) -> Result<f64> {
        let warmup = self.warmup_steps.min(self.rounds);
        cosine_lr(round + 1, warmup, self.rounds, max_lr)
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Batch mean of per-sequence summed cross-entropy.
    pub pilot_loss: f64,
    /// Batch mean of per-sequence RMSE; `None` without a Copilot.
    pub copilot_loss: Option<f64>,
    #[serde(rename = "lr_P")]
    pub lr_pilot: f64,
    #[serde(rename = "lr_C")]
    pub lr_copilot: f64,
    pub wall_ms: u64,
    pub pilot_loss_per_token: f64,
    pub copilot_loss_per_token: Option<f64>,
}

/// Files of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub seed: u64,
    pub wall_ms: u64,
}

/// Where a run writes its files, and the resolved configuration echoed into
/// its manifest.
#[derive(Debug, Clone, Copy)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub config: &'a KvMap,
}

pub struct TrainOutcome<S: Scalar> {
    pub pilot: Pilot<S>,
    pub copilot: Option<Copilot<S>>,
    pub metrics: Vec<StepMetrics>,
    pub log: MistakeLogBuffer<S>,
    pub manifest: Option<RunManifest>,
}

pub struct PilotRound<S: Scalar> {
    pub loss: f64,
    /// Traces from the parameters before this round's update.
    pub traces: Vec<PilotTrace<S>>,
    pub grad_norm: f64,
}

fn add_grads<S: Scalar>(acc: &mut Gradients<S>, g: Gradients<S>) {
    for (k, t) in g {
        match acc.get_mut(&k) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x = *x + *y;
                }
            }
            None => {
                acc.insert(k, t);
            }
        }
    }
}

/// Cross-entropy step on one batch. Gradients are accumulated over chunks
/// of `micro_batch` examples.
pub fn pilot_round<S: Scalar>(
    pilot: &mut Pilot<S>,
    opt: &mut OptimizerState<S>,
    batch: &[&Example],
    lr: f64,
    grad_clip: f64,
    micro_batch: usize,
) -> Result<PilotRound<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let scale = S::from_f64(1.0 / batch.len() as f64);
    let mut grads = Gradients::new();
    let mut traces = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for chunk in batch.chunks(micro_batch.max(1)) {
        let inputs: Vec<PilotInput> = chunk
            .iter()
            .map(|e| PilotInput::teacher_forced(&e.input, &e.target))
            .collect();
        let targets: Vec<&TokenSequence> = chunk.iter().map(|e| &e.target).collect();
        let mut tape = Tape::new();
        let bound = pilot.params().attach(&mut tape);
        let fwd = pilot::forward_tape(pilot.config(), &mut tape, &bound, &inputs)?;
        let total = tape.shape(fwd.logits)[0];
        let mut tgt = vec![None; total];
        for (rows, t) in fwd.rows.iter().zip(&targets) {
            for (&r, &id) in rows.iter().zip(t.ids()) {
                tgt[r] = Some(id as usize);
            }
        }
        let sum = pilot::ce_loss_tape(&mut tape, fwd.logits, &tgt)?;
        let l = tape.scale(sum, scale);
        loss += tape.value(l).item().as_f64();
        add_grads(&mut grads, tape.backward(l)?);
        traces.extend(fwd.traces);
    }
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: pilot.params().step as usize,
            what: format!("pilot loss {loss}"),
        });
    }
    let grad_norm = clip_grad_norm(&mut grads, grad_clip);
    adamw_step(pilot.params_mut(), &grads, opt, lr)?;
    Ok(PilotRound {
        loss,
        traces,
        grad_norm,
    })
}

fn contexts<S: Scalar>(config: &CopilotConfig, entry: &MistakeLogEntry<S>) -> Result<Vec<CrossContext<S>>> {
    entry
        .examples
        .iter()
        .map(|ex| {
            if config.uses_context() {
                build_cross_context(&ex.input_repr, &ex.hidden, config)
            } else {
                Ok(CrossContext {
                    rows: Tensor::zeros(&[0, config.pilot_dim]),
                    x_len: 0,
                    h_len: 0,
                })
            }
        })
        .collect()
}

/// Teacher-forced RMSE step on one log entry. Returns the loss before the update.
pub fn copilot_round<S: Scalar>(
    copilot: &mut Copilot<S>,
    opt: &mut OptimizerState<S>,
    entry: &MistakeLogEntry<S>,
    lr: f64,
    grad_clip: f64,
) -> Result<f64> {
    if entry.examples.is_empty() {
        return Err(Error::MistakeLog(format!("entry of round {} is empty", entry.round)));
    }
    let ctxs = contexts(copilot.config(), entry)?;
    let inputs: Vec<CopilotInput<S>> = entry
        .examples
        .iter()
        .zip(&ctxs)
        .map(|(ex, c)| CopilotInput {
            context: c,
            prefix: &ex.discrepancies,
            rows: ex.discrepancies.shape()[0],
        })
        .collect();
    let targets: Vec<&Tensor<S>> = entry.examples.iter().map(|e| &e.discrepancies).collect();
    let mut tape = Tape::new();
    let bound = copilot.params().attach(&mut tape);
    let out = copilot::forward_tape(copilot.config(), &mut tape, &bound, &inputs)?;
    let loss = copilot::batch_rmse(&mut tape, out, &targets)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::Diverged {
            step: copilot.params().step as usize,
            what: format!("copilot loss {value}"),
        });
    }
    let mut grads = tape.backward(loss)?;
    clip_grad_norm(&mut grads, grad_clip);
    adamw_step(copilot.params_mut(), &grads, opt, lr)?;
    Ok(value)
}

struct RunFiles {
    dir: PathBuf,
    manifest: PathBuf,
    metrics_path: PathBuf,
    metrics: File,
    checkpoints: Vec<PathBuf>,
}

impl RunFiles {
    fn create(out: RunOutput<'_>, seed: u64) -> Result<Self> {
        let dir = out.dir.to_path_buf();
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(&dir, e))?;
        let manifest = dir.join("manifest.txt");
        let metrics_path = dir.join("metrics.jsonl");
        let mut m = KvMap::new();
        m.merge(out.config);
        m.insert("seed", seed);
        m.insert("metrics", "metrics.jsonl");
        fs::write(&manifest, m.render()).map_err(|e| Error::io(&manifest, e))?;
        let metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(Self {
            dir,
            manifest,
            metrics_path,
            metrics,
            checkpoints: Vec::new(),
        })
    }

    fn append_manifest(&self, key: &str, value: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.manifest)
            .map_err(|e| Error::io(&self.manifest, e))?;
        writeln!(f, "{key}={value}").map_err(|e| Error::io(&self.manifest, e))
    }

    fn checkpoint<S: Scalar>(&mut self, tag: &str, pilot: &Pilot<S>, copilot: Option<&Copilot<S>>) -> Result<()> {
        let rel = |name: &str| -> PathBuf {
            if tag == "final" {
                PathBuf::from(format!("{name}.ckpt"))
            } else {
                PathBuf::from("checkpoints").join(format!("{name}_{tag}.ckpt"))
            }
        };
        let p = rel("pilot");
        pilot.save(&self.dir.join(&p))?;
        self.append_manifest(&format!("checkpoint.pilot.{tag}"), &p.display().to_string())?;
        self.checkpoints.push(self.dir.join(&p));
        if let Some(c) = copilot {
            let p = rel("copilot");
            c.save(&self.dir.join(&p))?;
            self.append_manifest(&format!("checkpoint.copilot.{tag}"), &p.display().to_string())?;
            self.checkpoints.push(self.dir.join(&p));
        }
        Ok(())
    }
}

fn train<S: Scalar>(
    pilot_cfg: &PilotConfig,
    copilot_cfg: Option<&CopilotConfig>,
    cfg: &TrainingConfig,
    data: &[Example],
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut pilot = Pilot::<S>::new(pilot_cfg.clone(), cfg.seed)?;
    let mut copilot = match copilot_cfg {
        Some(c) => {
            c.check_pilot(pilot_cfg)?;
            if cfg.hidden_storage == HiddenStorage::Pooled && c.uses_context() && c.pooled_layers() != (0..c.pilot_layers) {
                return Err(Error::Config(format!(
                    "{} pools a subset of pilot layers; set hidden_storage=raw",
                    c.attention_pattern
                )));
            }
            Some(Copilot::<S>::new(c.clone(), cfg.seed.wrapping_add(COPILOT_SEED_OFFSET))?)
        }
        None => None,
    };
    let pool_mode = copilot_cfg.map(|c| c.pool_mode).unwrap_or_default();
    let mut opt_p = OptimizerState::new(cfg.weight_decay);
    let mut opt_c = OptimizerState::new(cfg.weight_decay);
    let mut log = MistakeLogBuffer::new(cfg.log_capacity)?;

    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(DATA_STREAM);
    let mut log_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    log_rng.set_stream(LOG_STREAM);

    let mut files = match out {
        Some(o) => Some(RunFiles::create(o, cfg.seed)?),
        None => None,
    };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(data.len());
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        if cursor + bs > order.len() {
            order.shuffle(&mut data_rng);
            cursor = 0;
        }
        let batch: Vec<&Example> = order[cursor..cursor + bs].iter().map(|&i| &data[i]).collect();
        cursor += bs;
        let tokens: usize = batch.iter().map(|e| e.target.len()).sum();
        let mean_len = tokens as f64 / bs as f64;

        let lr_p = cfg.lr(round, cfg.lr_pilot)?;
        let pr = pilot_round(&mut pilot, &mut opt_p, &batch, lr_p, cfg.grad_clip, cfg.micro_batch_size)?;

        let mut lr_c = 0.0;
        let mut copilot_loss = None;
        if let Some(c) = copilot.as_mut() {
            let targets: Vec<&TokenSequence> = batch.iter().map(|e| &e.target).collect();
            let entry = make_entry(round as u64 + 1, &pr.traces, &targets, cfg.hidden_storage, pool_mode)?;
            log.record(entry)?;
            lr_c = cfg.lr(round, cfg.lr_copilot)?;
            let mut first = None;
            for k in 0..cfg.copilot_steps_per_round {
                let entry = if k == 0 || cfg.copilot_sampling == CopilotSampling::Fresh {
                    log.newest().expect("just recorded")
                } else {
                    log.sample(&mut log_rng)?
                };
                let l = copilot_round(c, &mut opt_c, entry, lr_c, cfg.grad_clip)?;
                first.get_or_insert(l);
            }
            copilot_loss = first;
        }

        let m = StepMetrics {
            step: round + 1,
            pilot_loss: pr.loss,
            copilot_loss,
            lr_pilot: lr_p,
            lr_copilot: lr_c,
            wall_ms: start.elapsed().as_millis() as u64,
            pilot_loss_per_token: pr.loss / mean_len,
            copilot_loss_per_token: copilot_loss.map(|l| l / mean_len),
        };
        if let Some(f) = files.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(f.metrics, "{line}").map_err(|e| Error::io(&f.metrics_path, e))?;
            if cfg.checkpoint_every > 0 && (round + 1) % cfg.checkpoint_every == 0 {
                f.checkpoint(&format!("step{:06}", round + 1), &pilot, copilot.as_ref())?;
            }
        }
        metrics.push(m);
    }

    let manifest = match files.as_mut() {
        Some(f) => {
            f.checkpoint("final", &pilot, copilot.as_ref())?;
            let wall_ms = start.elapsed().as_millis() as u64;
            f.append_manifest("wall_ms", &wall_ms.to_string())?;
            Some(RunManifest {
                path: f.manifest.clone(),
                metrics_path: f.metrics_path.clone(),
                checkpoints: f.checkpoints.clone(),
                seed: cfg.seed,
                wall_ms,
            })
        }
        None => None,
    };
    Ok(TrainOutcome {
        pilot,
        copilot,
        metrics,
        log,
        manifest,
    })
}

/// Trains a Pilot and a Copilot together.
pub fn train_joint<S: Scalar>(
    pilot_cfg: &PilotConfig,
    copilot_cfg: &CopilotConfig,
    cfg: &TrainingConfig,
    data: &[Example],
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome<S>> {
    train(pilot_cfg, Some(copilot_cfg), cfg, data, out)
}

/// The same loop without a Copilot or mistake log.
pub fn train_pilot_only<S: Scalar>(
    pilot_cfg: &PilotConfig,
    cfg: &TrainingConfig,
    data: &[Example],
    out: Option<RunOutput<'_>>,
) -> Result<TrainOutcome<S>> {
    train(pilot_cfg, None, cfg, data, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, SyntheticTaskSpec, TaskKind};

    fn small() -> (PilotConfig, CopilotConfig, TrainingConfig, Vec<Example>) {
        let spec = SyntheticTaskSpec {
            task: TaskKind::Copy,
            min_len: 2,
            max_len: 3,
            vocab_size: 8,
            train_size: 40,
            heldout_size: 5,
            ..SyntheticTaskSpec::default()
        };
        let (train, _) = generate_dataset(&spec).unwrap();
        let p = PilotConfig {
            vocab_size: 8,
            max_seq_len: 10,
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            ..PilotConfig::default()
        };
        let mut c = CopilotConfig::for_pilot(&p, 2, 8, 2);
        c.ffn_dim = 16;
        let t = TrainingConfig {
            rounds: 6,
            batch_size: 8,
            micro_batch_size: 8,
            warmup_steps: 2,
            ..TrainingConfig::default()
        };
        (p, c, t, train)
    }

    #[test]
    fn zero_copilot_lr_freezes_copilot() {
        let (p, c, mut t, data) = small();
        t.lr_copilot = 0.0;
        let out = train_joint::<f32>(&p, &c, &t, &data, None).unwrap();
        let init = Copilot::<f32>::new(c, t.seed.wrapping_add(COPILOT_SEED_OFFSET)).unwrap();
        for ((_, a), (_, b)) in out.copilot.unwrap().params().iter().zip(init.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(out.pilot.params(), Pilot::<f32>::new(p, t.seed).unwrap().params());
    }

    #[test]
    fn zero_rounds_changes_nothing() {
        let (p, c, mut t, data) = small();
        t.rounds = 0;
        let out = train_joint::<f32>(&p, &c, &t, &data, None).unwrap();
        assert_eq!(out.pilot, Pilot::new(p, t.seed).unwrap());
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn pilot_unaffected_by_copilot() {
        let (p, c, t, data) = small();
        let joint = train_joint::<f32>(&p, &c, &t, &data, None).unwrap();
        let alone = train_pilot_only::<f32>(&p, &t, &data, None).unwrap();
        assert_eq!(joint.pilot, alone.pilot);
        assert_eq!(joint.log.len(), 6);
    }

    #[test]
    fn capture_precedes_update() {
        let (p, _, _, data) = small();
        let mut pilot = Pilot::<f64>::new(p, 1).unwrap();
        let frozen = pilot.clone();
        let batch: Vec<&Example> = data.iter().take(4).collect();
        let mut opt = OptimizerState::new(0.0);
        let round = pilot_round(&mut pilot, &mut opt, &batch, 1e-2, 1.0, 4).unwrap();
        for (e, tr) in batch.iter().zip(&round.traces) {
            let before = frozen
                .forward(e.input.ids(), &e.target.ids()[..e.target.len() - 1])
                .unwrap();
            assert_eq!(before.content_hash(), tr.content_hash());
        }
    }

    #[test]
    fn micro_batches_match_full_batch() {
        let (p, _, _, data) = small();
        let batch: Vec<&Example> = data.iter().take(6).collect();
        let mut a = Pilot::<f64>::new(p.clone(), 2).unwrap();
        let mut b = a.clone();
        let la = pilot_round(&mut a, &mut OptimizerState::new(0.0), &batch, 1e-2, 1e9, 6).unwrap();
        let lb = pilot_round(&mut b, &mut OptimizerState::new(0.0), &batch, 1e-2, 1e9, 2).unwrap();
        assert!((la.loss - lb.loss).abs() < 1e-12);
        for ((_, x), (_, y)) in a.params().iter().zip(b.params().iter()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn run_directory_contents() {
        let (p, c, mut t, data) = small();
        t.checkpoint_every = 3;
        let dir = tempfile::tempdir().unwrap();
        let snapshot = KvMap::parse("rounds=6").unwrap();
        let out = train_joint::<f32>(
            &p,
            &c,
            &t,
            &data,
            Some(RunOutput {
                dir: dir.path(),
                config: &snapshot,
            }),
        )
        .unwrap();
        let man = out.manifest.unwrap();
        assert_eq!(man.checkpoints.len(), 6);
        let lines = fs::read_to_string(&man.metrics_path).unwrap();
        assert_eq!(lines.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        for key in ["step", "pilot_loss", "copilot_loss", "lr_P", "lr_C", "wall_ms"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        let kv = KvMap::parse(&fs::read_to_string(&man.path).unwrap()).unwrap();
        assert_eq!(kv.raw("checkpoint.pilot.final"), Some("pilot.ckpt"));
        let loaded = Pilot::<f32>::load(&dir.path().join("pilot.ckpt")).unwrap();
        assert_eq!(loaded, out.pilot);
    }
}
