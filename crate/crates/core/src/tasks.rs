//! Synthetic sequence tasks, the toy token layout and evaluation metrics.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id available to task content.
pub const FIRST_CONTENT: u32 = 3;

/// Token ids of the arithmetic task: digits `0..=9`, then `+` and `=`.
pub const DIGIT_ZERO: u32 = FIRST_CONTENT;
pub const PLUS: u32 = DIGIT_ZERO + 10;
pub const EQUALS: u32 = PLUS + 1;

/// Validated token sequence: no interior padding, EOS only at the end.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(i) = ids.iter().position(|&t| t == PAD) {
            return Err(Error::InvalidArgument(format!("PAD at position {i}")));
        }
        if let Some(i) = ids.iter().position(|&t| t == EOS) {
            if i + 1 != ids.len() {
                return Err(Error::InvalidArgument(format!(
                    "EOS at position {i} is not terminal"
                )));
            }
        }
        Ok(Self(ids))
    }

    /// Model output, which may contain any id; truncated after the first EOS.
    pub fn from_generated(ids: &[u32]) -> Self {
        match ids.iter().position(|&t| t == EOS) {
            Some(i) => Self(ids[..=i].to_vec()),
            None => Self(ids.to_vec()),
        }
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&EOS)
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(Error::OutOfVocabulary { id, vocab }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for TokenSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ids = s
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad token id {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids)
    }
}

/// One `(X, Y)` training pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub input: TokenSequence,
    pub target: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    ModAdd,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "modadd" => Ok(TaskKind::ModAdd),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModAdd => "modadd",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    /// Content length range for copy/reverse (inclusive).
    pub min_len: usize,
    pub max_len: usize,
    /// Modulus for modadd; operands are drawn from `0..modulus`.
    pub modulus: u32,
    pub vocab_size: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::ModAdd,
            min_len: 3,
            max_len: 6,
            modulus: 97,
            vocab_size: 16,
            train_size: 6000,
            heldout_size: 500,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    /// Longest prompt and target this spec can produce.
    pub fn max_lengths(&self) -> (usize, usize) {
        match self.task {
            TaskKind::Copy | TaskKind::Reverse => (self.max_len, self.max_len + 1),
            TaskKind::ModAdd => {
                let d = digits(self.modulus.saturating_sub(1)).len();
                (2 * d + 2, d + 1)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::ModAdd => {
                if self.vocab_size <= EQUALS as usize {
                    return Err(Error::Config(format!(
                        "modadd needs vocab_size > {EQUALS}, got {}",
                        self.vocab_size
                    )));
                }
                if self.modulus < 2 {
                    return Err(Error::Config("modulus must be at least 2".into()));
                }
                let pairs = self.modulus as usize * self.modulus as usize;
                if self.train_size + self.heldout_size > pairs {
                    return Err(Error::Config(format!(
                        "modadd m={} has only {pairs} distinct pairs",
                        self.modulus
                    )));
                }
            }
            TaskKind::Copy | TaskKind::Reverse => {
                if self.vocab_size <= FIRST_CONTENT as usize {
                    return Err(Error::Config(format!(
                        "vocab_size {} leaves no content symbols",
                        self.vocab_size
                    )));
                }
                if self.min_len == 0 || self.min_len > self.max_len {
                    return Err(Error::Config(format!(
                        "bad length range {}..={}",
                        self.min_len, self.max_len
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Decimal digits of `n`, most significant first.
pub fn digits(n: u32) -> Vec<u32> {
    n.to_string().bytes().map(|b| (b - b'0') as u32).collect()
}

fn digit_tokens(n: u32) -> Vec<u32> {
    digits(n).into_iter().map(|d| DIGIT_ZERO + d).collect()
}

/// Prompt `a + b =` in token form.
pub fn modadd_prompt(a: u32, b: u32) -> TokenSequence {
    let mut ids = digit_tokens(a);
    ids.push(PLUS);
    ids.extend(digit_tokens(b));
    ids.push(EQUALS);
    TokenSequence(ids)
}

pub fn modadd_example(a: u32, b: u32, modulus: u32) -> Example {
    let mut target = digit_tokens((a + b) % modulus);
    target.push(EOS);
    Example {
        input: modadd_prompt(a, b),
        target: TokenSequence(target),
    }
}

/// Deterministic `(train, heldout)` split; the two never share an input.
pub fn generate_dataset(spec: &SyntheticTaskSpec) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.task {
        TaskKind::ModAdd => {
            let m = spec.modulus;
            let mut pairs: Vec<(u32, u32)> = (0..m).flat_map(|a| (0..m).map(move |b| (a, b))).collect();
            pairs.shuffle(&mut rng);
            let heldout = pairs[..spec.heldout_size]
                .iter()
                .map(|&(a, b)| modadd_example(a, b, m))
                .collect();
            let train = pairs[spec.heldout_size..spec.heldout_size + spec.train_size]
                .iter()
                .map(|&(a, b)| modadd_example(a, b, m))
                .collect();
            Ok((train, heldout))
        }
        TaskKind::Copy | TaskKind::Reverse => {
            let symbols = spec.vocab_size as u32 - FIRST_CONTENT;
            let mut seen = HashSet::new();
            let mut draw = |count: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Example>> {
                let mut out = Vec::with_capacity(count);
                let mut attempts = 0usize;
                while out.len() < count {
                    attempts += 1;
                    if attempts > 100 * count + 1000 {
                        return Err(Error::Config(format!(
                            "could not draw {count} distinct sequences; widen length range or vocabulary"
                        )));
                    }
                    let len = rng.random_range(spec.min_len..=spec.max_len);
                    let x: Vec<u32> = (0..len)
                        .map(|_| FIRST_CONTENT + rng.random_range(0..symbols))
                        .collect();
                    if !seen.insert(x.clone()) {
                        continue;
                    }
                    let mut y = x.clone();
                    if spec.task == TaskKind::Reverse {
                        y.reverse();
                    }
                    y.push(EOS);
                    out.push(Example {
                        input: TokenSequence(x),
                        target: TokenSequence(y),
                    });
                }
                Ok(out)
            };
            let heldout = draw(spec.heldout_size, &mut rng)?;
            let train = draw(spec.train_size, &mut rng)?;
            Ok((train, heldout))
        }
    }
}

/// Equality up to and including the first EOS of each sequence.
pub fn exact_match(pred: &TokenSequence, gold: &TokenSequence) -> bool {
    TokenSequence::from_generated(pred.ids()) == TokenSequence::from_generated(gold.ids())
}

/// Fraction of gold positions that the prediction reproduces.
pub fn token_accuracy(pred: &TokenSequence, gold: &TokenSequence) -> f64 {
    if gold.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let hits = gold
        .ids()
        .iter()
        .enumerate()
        .filter(|(i, &g)| pred.ids().get(*i) == Some(&g))
        .count();
    hits as f64 / gold.len() as f64
}

/// Mean exact-match and token accuracy over aligned prediction/gold lists.
pub fn batch_metrics(preds: &[TokenSequence], golds: &[TokenSequence]) -> (f64, f64) {
    assert_eq!(preds.len(), golds.len());
    if preds.is_empty() {
        return (0.0, 0.0);
    }
    let n = preds.len() as f64;
    let em = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| exact_match(p, g))
        .count() as f64
        / n;
    let acc = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| token_accuracy(p, g))
        .sum::<f64>()
        / n;
    (em, acc)
}

/// Writes one `input<TAB>target` line per example.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        writeln!(f, "{}\t{}", ex.input, ex.target).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (x, y) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidArgument(format!("{}:{}: missing tab", path.display(), lineno + 1))
        })?;
        out.push(Example {
            input: x.parse()?,
            target: y.parse()?,
        });
    }
    Ok(out)
}
