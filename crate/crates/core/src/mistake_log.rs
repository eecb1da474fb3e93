//! Per-round records of the Pilot's input representation, hidden states and
//! token-level errors, held in a bounded FIFO buffer.

use std::collections::VecDeque;
use std::hash::Hasher;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{pool_layers, PoolMode};
use crate::numerics::{softmax, ParameterSet, Scalar, Tensor};
use crate::pilot::{hash_tensor, PilotTrace};
use crate::tasks::TokenSequence;

pub const DEFAULT_CAPACITY: usize = 128;

/// `p - p_hat` for one position.
pub fn discrepancy<S: Scalar>(p: &[S], p_hat: &[S]) -> Result<Vec<S>> {
    if p.len() != p_hat.len() {
        return Err(Error::Shape(format!(
            "discrepancy of {} and {} entries",
            p.len(),
            p_hat.len()
        )));
    }
    Ok(p.iter().zip(p_hat).map(|(&a, &b)| a - b).collect())
}

/// Row-wise `onehot(target) - softmax(logits)`: `[n, V]`.
pub fn discrepancy_rows<S: Scalar>(logits: &Tensor<S>, targets: &[u32]) -> Result<Tensor<S>> {
    let (n, v) = (logits.rows(), logits.last_dim());
    if logits.rank() != 2 || targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * v);
    for (r, &t) in targets.iter().enumerate() {
        if t as usize >= v {
            return Err(Error::OutOfVocabulary { id: t, vocab: v });
        }
        let p_hat = softmax(logits.row(r))?;
        out.extend(p_hat.iter().enumerate().map(|(j, &q)| {
            let p = if j == t as usize { S::one() } else { S::zero() };
            p - q
        }));
    }
    Tensor::new(vec![n, v], out)
}

/// How hidden states are kept in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HiddenStorage {
    /// Pooled over all pilot layers: `[n, d]`.
    #[default]
    Pooled,
    /// Full per-layer stack: `[L, n, d]`.
    Raw,
}

impl FromStr for HiddenStorage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(HiddenStorage::Pooled),
            "raw" => Ok(HiddenStorage::Raw),
            other => Err(Error::Config(format!("unknown hidden storage {other:?}"))),
        }
    }
}

impl std::fmt::Display for HiddenStorage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HiddenStorage::Pooled => "pooled",
            HiddenStorage::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenRepr<S: Scalar> {
    Pooled { mode: PoolMode, states: Tensor<S> },
    Raw(Tensor<S>),
}

impl<S: Scalar> HiddenRepr<S> {
    pub fn num_rows(&self) -> usize {
        match self {
            HiddenRepr::Pooled { states, .. } => states.shape()[0],
            HiddenRepr::Raw(t) => t.shape()[1],
        }
    }
}

/// One example's record within a round.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedExample<S: Scalar> {
    pub input_repr: Tensor<S>,
    pub hidden: HiddenRepr<S>,
    /// `[n, V]`; every row belongs to a real target token.
    pub discrepancies: Tensor<S>,
}

/// All records of one training round.
#[derive(Debug, Clone, PartialEq)]
pub struct MistakeLogEntry<S: Scalar> {
    pub round: u64,
    pub examples: Vec<LoggedExample<S>>,
}

impl<S: Scalar> MistakeLogEntry<S> {
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        h.write_u64(self.round);
        for ex in &self.examples {
            hash_tensor(&ex.input_repr, &mut h);
            match &ex.hidden {
                HiddenRepr::Pooled { mode, states } => {
                    h.write_u8(*mode as u8);
                    hash_tensor(states, &mut h);
                }
                HiddenRepr::Raw(t) => {
                    h.write_u8(255);
                    hash_tensor(t, &mut h);
                }
            }
            hash_tensor(&ex.discrepancies, &mut h);
        }
        h.finish()
    }
}

/// Builds one example's record from a trace of the pre-update pilot.
pub fn make_example<S: Scalar>(
    trace: &PilotTrace<S>,
    target: &TokenSequence,
    storage: HiddenStorage,
    pool: PoolMode,
) -> Result<LoggedExample<S>> {
    if trace.num_rows() != target.len() {
        return Err(Error::Shape(format!(
            "trace has {} rows, target has {} tokens",
            trace.num_rows(),
            target.len()
        )));
    }
    let layers = trace.hidden_stack.shape()[0];
    let hidden = match storage {
        HiddenStorage::Pooled => HiddenRepr::Pooled {
            mode: pool,
            states: pool_layers(&trace.hidden_stack, 0..layers, pool)?,
        },
        HiddenStorage::Raw => HiddenRepr::Raw(trace.hidden_stack.clone()),
    };
    Ok(LoggedExample {
        input_repr: trace.input_repr.clone(),
        hidden,
        discrepancies: discrepancy_rows(&trace.logits, target.ids())?,
    })
}

pub fn make_entry<S: Scalar>(
    round: u64,
    traces: &[PilotTrace<S>],
    targets: &[&TokenSequence],
    storage: HiddenStorage,
    pool: PoolMode,
) -> Result<MistakeLogEntry<S>> {
    if traces.len() != targets.len() || traces.is_empty() {
        return Err(Error::Shape(format!(
            "{} traces for {} targets",
            traces.len(),
            targets.len()
        )));
    }
    let examples = traces
        .iter()
        .zip(targets)
        .map(|(t, y)| make_example(t, y, storage, pool))
        .collect::<Result<_>>()?;
    Ok(MistakeLogEntry { round, examples })
}

/// Bounded FIFO of log entries. `capacity == None` keeps every round.
#[derive(Debug, Clone)]
pub struct MistakeLogBuffer<S: Scalar> {
    capacity: Option<usize>,
    entries: VecDeque<MistakeLogEntry<S>>,
    last_round: Option<u64>,
}

impl<S: Scalar> Default for MistakeLogBuffer<S> {
    fn default() -> Self {
        Self::new(Some(DEFAULT_CAPACITY)).expect("positive capacity")
    }
}

impl<S: Scalar> MistakeLogBuffer<S> {
    pub fn new(capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return Err(Error::Config("mistake log capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::new(),
            last_round: None,
        })
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MistakeLogEntry<S>> {
        self.entries.iter()
    }

    pub fn newest(&self) -> Option<&MistakeLogEntry<S>> {
        self.entries.back()
    }

    /// Appends `entry`, evicting the oldest entry when full.
    pub fn record(&mut self, entry: MistakeLogEntry<S>) -> Result<()> {
        if let Some(last) = self.last_round {
            if entry.round <= last {
                return Err(Error::MistakeLog(format!(
                    "round {} recorded after round {last}",
                    entry.round
                )));
            }
        }
        self.last_round = Some(entry.round);
        self.entries.push_back(entry);
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// Uniform draw over the current entries.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<&MistakeLogEntry<S>> {
        if self.entries.is_empty() {
            return Err(Error::MistakeLog("sample from an empty mistake log".into()));
        }
        let i = rng.random_range(0..self.entries.len());
        Ok(&self.entries[i])
    }

    /// Writes every entry with the checkpoint record layout; paths are
    /// `r{round}.e{example}.{input_repr|hidden|discrepancies}`.
    pub fn spill(&self, path: &Path) -> Result<()> {
        let mut set = ParameterSet::<S>::new();
        for e in &self.entries {
            for (i, ex) in e.examples.iter().enumerate() {
                let pre = format!("r{:08}.e{:04}", e.round, i);
                set.insert(format!("{pre}.input_repr"), ex.input_repr.clone())?;
                let hidden = match &ex.hidden {
                    HiddenRepr::Pooled { states, .. } => states.clone(),
                    HiddenRepr::Raw(t) => t.clone(),
                };
                set.insert(format!("{pre}.hidden"), hidden)?;
                set.insert(format!("{pre}.discrepancies"), ex.discrepancies.clone())?;
            }
        }
        let mut meta = crate::kv::KvMap::new();
        meta.insert("kind", "mistake_log");
        meta.insert(
            "capacity",
            self.capacity.map_or("unbounded".to_string(), |c| c.to_string()),
        );
        meta.insert("entries", self.entries.len());
        crate::checkpoint::save(path, &meta, &set)
    }
}
