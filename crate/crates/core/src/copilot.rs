//! The Copilot: a small transformer that reads the Pilot's error sequence
//! and its cross context `[X̃ ; pooled h]`, and regresses the next token-level
//! error. Its output is an unnormalized vocabulary-sized correction.
//!
//! The input sequence is the error prefix shifted right by one, with a zero
//! vector at position 0. There is no positional embedding and no softmax.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::mistake_log::HiddenRepr;
use crate::nn::{self, pool_layers, PoolMode};
use crate::numerics::{Bound, Mask, ParameterSet, Scalar, Tape, Tensor, Var};
use crate::pilot::{Architecture, PilotConfig};

pub const RMSE_EPS: f64 = 1e-12;

/// Where pilot hidden states enter the Copilot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttentionPattern {
    /// Odd layers self-attention, even layers cross-attention; all pilot layers pooled.
    #[default]
    Pattern1,
    /// Cross-attention in every layer, no self-attention.
    Pattern2,
    /// As pattern 1, pooling only the first half of the pilot layers.
    Pattern3,
    /// As pattern 1, pooling only the second half of the pilot layers.
    Pattern4,
}

impl FromStr for AttentionPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern1" => Ok(Self::Pattern1),
            "pattern2" => Ok(Self::Pattern2),
            "pattern3" => Ok(Self::Pattern3),
            "pattern4" => Ok(Self::Pattern4),
            other => Err(Error::Config(format!("unknown attention pattern {other:?}"))),
        }
    }
}

impl fmt::Display for AttentionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pattern1 => "pattern1",
            Self::Pattern2 => "pattern2",
            Self::Pattern3 => "pattern3",
            Self::Pattern4 => "pattern4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    SelfAttention,
    CrossAttention,
    SelfAndCross,
}

impl LayerKind {
    pub fn has_self(self) -> bool {
        matches!(self, Self::SelfAttention | Self::SelfAndCross)
    }

    pub fn has_cross(self) -> bool {
        matches!(self, Self::CrossAttention | Self::SelfAndCross)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CopilotConfig {
    /// Mirrors the pilot: encoder-decoder pilots get self+cross in every layer.
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub attention_pattern: AttentionPattern,
    pub pool_mode: PoolMode,
    pub pilot_layers: usize,
    pub pilot_dim: usize,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        Self::for_pilot(&PilotConfig::default(), 1, 32, 4)
    }
}

impl CopilotConfig {
    pub fn for_pilot(pilot: &PilotConfig, layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            architecture: pilot.architecture,
            vocab_size: pilot.vocab_size,
            num_layers: layers,
            hidden_dim: hidden,
            num_heads: heads,
            ffn_dim: 4 * hidden,
            attention_pattern: AttentionPattern::Pattern1,
            pool_mode: PoolMode::Mean,
            pilot_layers: pilot.num_layers,
            pilot_dim: pilot.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("pilot_layers", self.pilot_layers),
            ("pilot_dim", self.pilot_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("copilot {name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "copilot hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Checks that this copilot can read the given pilot's outputs.
    pub fn check_pilot(&self, pilot: &PilotConfig) -> Result<()> {
        if pilot.vocab_size != self.vocab_size {
            return Err(Error::Incompatible(format!(
                "vocabulary size {} (pilot) vs {} (copilot)",
                pilot.vocab_size, self.vocab_size
            )));
        }
        if pilot.num_layers != self.pilot_layers || pilot.hidden_dim != self.pilot_dim {
            return Err(Error::Incompatible(format!(
                "copilot expects pilot with {} layers of width {}, got {} of width {}",
                self.pilot_layers, self.pilot_dim, pilot.num_layers, pilot.hidden_dim
            )));
        }
        if pilot.architecture != self.architecture {
            return Err(Error::Incompatible(format!(
                "copilot built for {} pilots, got {}",
                self.architecture, pilot.architecture
            )));
        }
        Ok(())
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.num_layers)
            .map(|l| {
                if self.architecture == Architecture::EncoderDecoder {
                    LayerKind::SelfAndCross
                } else if self.attention_pattern == AttentionPattern::Pattern2 {
                    LayerKind::CrossAttention
                } else if l % 2 == 0 {
                    // 1-based odd layer
                    LayerKind::SelfAttention
                } else {
                    LayerKind::CrossAttention
                }
            })
            .collect()
    }

    pub fn uses_context(&self) -> bool {
        self.layer_kinds().iter().any(|k| k.has_cross())
    }

    /// Pilot layers pooled into the cross context.
    pub fn pooled_layers(&self) -> Range<usize> {
        let l = self.pilot_layers;
        let half = l / 2;
        match self.attention_pattern {
            AttentionPattern::Pattern1 | AttentionPattern::Pattern2 => 0..l,
            AttentionPattern::Pattern3 => 0..half.max(1),
            AttentionPattern::Pattern4 => half..l,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("architecture", self.architecture);
        m.insert("vocab_size", self.vocab_size);
        m.insert("num_layers", self.num_layers);
        m.insert("hidden_dim", self.hidden_dim);
        m.insert("num_heads", self.num_heads);
        m.insert("ffn_dim", self.ffn_dim);
        m.insert("attention_pattern", self.attention_pattern);
        m.insert("pool_mode", self.pool_mode);
        m.insert("pilot_layers", self.pilot_layers);
        m.insert("pilot_dim", self.pilot_dim);
        m
    }

    pub fn from_kv(m: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            architecture: m.take_or("architecture", d.architecture)?,
            vocab_size: m.take_or("vocab_size", d.vocab_size)?,
            num_layers: m.take_or("num_layers", d.num_layers)?,
            hidden_dim: m.take_or("hidden_dim", d.hidden_dim)?,
            num_heads: m.take_or("num_heads", d.num_heads)?,
            ffn_dim: m.take_or("ffn_dim", d.ffn_dim)?,
            attention_pattern: m.take_or("attention_pattern", d.attention_pattern)?,
            pool_mode: m.take_or("pool_mode", d.pool_mode)?,
            pilot_layers: m.take_or("pilot_layers", d.pilot_layers)?,
            pilot_dim: m.take_or("pilot_dim", d.pilot_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Key/value source of the modified cross-attention for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossContext<S: Scalar> {
    /// `[x_len + h_len, d_P]`.
    pub rows: Tensor<S>,
    pub x_len: usize,
    pub h_len: usize,
}

impl<S: Scalar> CrossContext<S> {
    pub fn len(&self) -> usize {
        self.x_len + self.h_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether context row `key` is visible to copilot row `query`: prompt
    /// rows always, hidden-state rows only for earlier target positions.
    pub fn visible(&self, query: usize, key: usize) -> bool {
        key < self.x_len || (key < self.len() && key - self.x_len < query)
    }
}

/// Concatenates `X̃` with the pooled hidden states selected by the pattern.
pub fn build_cross_context<S: Scalar>(
    input_repr: &Tensor<S>,
    hidden: &HiddenRepr<S>,
    config: &CopilotConfig,
) -> Result<CrossContext<S>> {
    let pooled = match hidden {
        HiddenRepr::Raw(stack) => {
            if stack.shape()[0] != config.pilot_layers {
                return Err(Error::Shape(format!(
                    "hidden stack has {} layers, copilot expects {}",
                    stack.shape()[0],
                    config.pilot_layers
                )));
            }
            pool_layers(stack, config.pooled_layers(), config.pool_mode)?
        }
        HiddenRepr::Pooled { mode, states } => {
            if config.pooled_layers() != (0..config.pilot_layers) {
                return Err(Error::Config(format!(
                    "{} needs per-layer hidden states, but the log holds pooled ones",
                    config.attention_pattern
                )));
            }
            if *mode != config.pool_mode {
                return Err(Error::Config(format!(
                    "log pooled with {mode}, copilot expects {}",
                    config.pool_mode
                )));
            }
            states.clone()
        }
    };
    if input_repr.rank() != 2 || input_repr.last_dim() != pooled.last_dim() {
        return Err(Error::Shape(format!(
            "input representation {:?} vs hidden states {:?}",
            input_repr.shape(),
            pooled.shape()
        )));
    }
    let x_len = input_repr.shape()[0];
    let h_len = pooled.shape()[0];
    Ok(CrossContext {
        rows: Tensor::concat_leading(&[input_repr, &pooled])?,
        x_len,
        h_len,
    })
}

/// Shifts an error sequence right by one: row 0 is zero, row `r` is `errors[r - 1]`.
/// Produces `rows` rows from the first `rows - 1` of `errors`.
pub fn shifted_errors<S: Scalar>(errors: &Tensor<S>, rows: usize) -> Result<Tensor<S>> {
    let v = errors.last_dim();
    if errors.rank() != 2 || rows == 0 || errors.shape()[0] + 1 < rows {
        return Err(Error::Shape(format!(
            "cannot build {rows} input rows from errors {:?}",
            errors.shape()
        )));
    }
    let mut data = vec![S::zero(); v];
    data.extend_from_slice(&errors.data()[..(rows - 1) * v]);
    Tensor::new(vec![rows, v], data)
}

/// One example of a batched copilot pass.
#[derive(Debug, Clone, Copy)]
pub struct CopilotInput<'a, S: Scalar> {
    pub context: &'a CrossContext<S>,
    /// Error rows consumed as inputs (teacher-forced `ℓ` or previous outputs).
    pub prefix: &'a Tensor<S>,
    /// Output rows to produce; at most `prefix` rows + 1.
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Copilot<S: Scalar> {
    config: CopilotConfig,
    params: ParameterSet<S>,
}

/// Parameter layout audit of a copilot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureReport {
    /// 1-based layer numbers holding self-attention weights.
    pub self_layers: Vec<usize>,
    /// 1-based layer numbers holding cross-attention weights.
    pub cross_layers: Vec<usize>,
    /// Parameter paths that look like positional embeddings.
    pub positional_paths: Vec<String>,
}

impl<S: Scalar> Copilot<S> {
    /// Fresh model; the output head starts at zero so initial corrections vanish.
    pub fn new(config: CopilotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: CopilotConfig, params: ParameterSet<S>) -> Result<Self> {
        config.validate()?;
        init_params::<S>(&config, 0)?
            .check_same_layout(&params)
            .map_err(|e| Error::Incompatible(format!("copilot parameters do not match config: {e}")))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CopilotConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<S> {
        &mut self.params
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut kv = self.config.to_kv();
        kv.insert("kind", "copilot");
        crate::checkpoint::save(path, &kv, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut kv, params) = crate::checkpoint::load(path)?;
        let kind: String = kv.take_required("kind")?;
        if kind != "copilot" {
            return Err(Error::Incompatible(format!(
                "{} holds a {kind} checkpoint, not a copilot",
                path.display()
            )));
        }
        let config = CopilotConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Self::from_params(config, params)
    }

    /// Linear projection of error rows into the model width: `[i, V] -> [i, d_C]`.
    pub fn project_errors(&self, errors: &Tensor<S>) -> Result<Tensor<S>> {
        if errors.rank() != 2 || errors.last_dim() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "error rows {:?}, expected trailing dimension {}",
                errors.shape(),
                self.config.vocab_size
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.attach_frozen(&mut tape);
        let e = tape.constant(errors.clone());
        let y = nn::linear(&mut tape, &p, "err_proj", e);
        Ok(tape.value(y).clone())
    }

    /// Frozen forward over one example: `[rows, V]` corrections.
    pub fn predict(&self, input: CopilotInput<'_, S>) -> Result<Tensor<S>> {
        let mut out = self.predict_batch(&[input])?;
        Ok(out.pop().expect("one output"))
    }

    pub fn predict_batch(&self, inputs: &[CopilotInput<'_, S>]) -> Result<Vec<Tensor<S>>> {
        let mut tape = Tape::new();
        let p = self.params.attach_frozen(&mut tape);
        let out = forward_tape(&self.config, &mut tape, &p, inputs)?;
        split_rows(tape.value(out), inputs)
    }

    pub fn structure(&self) -> StructureReport {
        structure_of(&self.params)
    }
}

fn structure_of<S: Scalar>(params: &ParameterSet<S>) -> StructureReport {
    let mut self_layers = Vec::new();
    let mut cross_layers = Vec::new();
    let mut positional_paths = Vec::new();
    for name in params.names() {
        let lower = name.to_ascii_lowercase();
        if lower.contains("pos") {
            positional_paths.push(name.to_string());
        }
        let parts: Vec<&str> = name.split('.').collect();
        if parts.len() >= 3 && parts[0] == "layers" {
            if let Ok(l) = parts[1].parse::<usize>() {
                let list = match parts[2] {
                    "self_attn" => &mut self_layers,
                    "cross_attn" => &mut cross_layers,
                    _ => continue,
                };
                if !list.contains(&(l + 1)) {
                    list.push(l + 1);
                }
            }
        }
    }
    self_layers.sort_unstable();
    cross_layers.sort_unstable();
    StructureReport {
        self_layers,
        cross_layers,
        positional_paths,
    }
}

fn init_params<S: Scalar>(c: &CopilotConfig, seed: u64) -> Result<ParameterSet<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    let d = c.hidden_dim;
    nn::init_linear(&mut p, &mut rng, "err_proj", c.vocab_size, d)?;
    if c.uses_context() {
        if c.pilot_dim != d {
            nn::init_linear(&mut p, &mut rng, "adapter", c.pilot_dim, d)?;
        }
        nn::init_layer_norm(&mut p, "ctx_ln", d)?;
    }
    for (l, kind) in c.layer_kinds().into_iter().enumerate() {
        let pre = format!("layers.{l}");
        if kind.has_self() {
            nn::init_layer_norm(&mut p, &format!("{pre}.ln_self"), d)?;
            nn::init_attention(&mut p, &mut rng, &format!("{pre}.self_attn"), d, d)?;
        }
        if kind.has_cross() {
            nn::init_layer_norm(&mut p, &format!("{pre}.ln_cross"), d)?;
            nn::init_attention(&mut p, &mut rng, &format!("{pre}.cross_attn"), d, d)?;
        }
        nn::init_layer_norm(&mut p, &format!("{pre}.ln_ffn"), d)?;
        nn::init_ffn(&mut p, &mut rng, &format!("{pre}.ffn"), d, c.ffn_dim)?;
    }
    nn::init_layer_norm(&mut p, "ln_f", d)?;
    nn::init_zero_linear(&mut p, "head", d, c.vocab_size)?;
    Ok(p)
}

/// Batched copilot forward on an existing tape. Returns `[B, n_max, V]`,
/// where example `b` owns rows `0..inputs[b].rows`.
pub fn forward_tape<S: Scalar>(
    config: &CopilotConfig,
    tape: &mut Tape<S>,
    p: &Bound,
    inputs: &[CopilotInput<'_, S>],
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty copilot batch".into()));
    }
    let (d, v, heads) = (config.hidden_dim, config.vocab_size, config.num_heads);
    let nb = inputs.len();
    let uses_ctx = config.uses_context();
    let n_max = inputs.iter().map(|i| i.rows).max().unwrap_or(0);
    if n_max == 0 {
        return Err(Error::InvalidArgument("copilot pass with zero rows".into()));
    }

    let mut err_in = Vec::with_capacity(nb * n_max * v);
    for inp in inputs {
        if inp.prefix.rank() != 2 || inp.prefix.last_dim() != v {
            return Err(Error::Shape(format!(
                "error prefix {:?}, expected trailing dimension {v}",
                inp.prefix.shape()
            )));
        }
        if uses_ctx {
            if inp.context.rows.last_dim() != config.pilot_dim {
                return Err(Error::Shape(format!(
                    "cross context width {} vs pilot width {}",
                    inp.context.rows.last_dim(),
                    config.pilot_dim
                )));
            }
            if inp.rows > inp.context.h_len {
                return Err(Error::InvalidArgument(format!(
                    "{} copilot rows but only {} pilot hidden rows",
                    inp.rows, inp.context.h_len
                )));
            }
        }
        let shifted = shifted_errors(inp.prefix, inp.rows)?;
        err_in.extend_from_slice(shifted.data());
        err_in.resize(err_in.len() + (n_max - inp.rows) * v, S::zero());
    }
    let e = tape.constant(Tensor::new(vec![nb, n_max, v], err_in)?);
    let mut x = nn::linear(tape, p, "err_proj", e);

    let mut ctx: Option<(Var, Mask)> = None;
    if uses_ctx {
        let s_max = inputs.iter().map(|i| i.context.len()).max().unwrap_or(0).max(1);
        let dp = config.pilot_dim;
        let mut rows = Vec::with_capacity(nb * s_max * dp);
        let mut vis = Vec::with_capacity(nb * n_max * s_max);
        for inp in inputs {
            let c = inp.context;
            rows.extend_from_slice(c.rows.data());
            rows.resize(rows.len() + (s_max - c.len()) * dp, S::zero());
            for q in 0..n_max {
                vis.extend((0..s_max).map(|k| q < inp.rows && c.visible(q, k)));
            }
        }
        let mut c = tape.constant(Tensor::new(vec![nb, s_max, dp], rows)?);
        if dp != d {
            c = nn::linear(tape, p, "adapter", c);
        }
        let c = nn::layer_norm(tape, p, "ctx_ln", c);
        ctx = Some((c, Mask::new(nb, n_max, s_max, vis)?));
    }

    let causal = Mask::causal(n_max);
    for (l, kind) in config.layer_kinds().into_iter().enumerate() {
        let pre = format!("layers.{l}");
        if kind.has_self() {
            let a = nn::layer_norm(tape, p, &format!("{pre}.ln_self"), x);
            let a = nn::attention(tape, p, &format!("{pre}.self_attn"), a, a, heads, &causal);
            x = tape.add(x, a);
        }
        if kind.has_cross() {
            let (c, mask) = ctx.as_ref().expect("context built when any layer has cross-attention");
            let a = nn::layer_norm(tape, p, &format!("{pre}.ln_cross"), x);
            let a = nn::attention(tape, p, &format!("{pre}.cross_attn"), a, *c, heads, mask);
            x = tape.add(x, a);
        }
        let f = nn::layer_norm(tape, p, &format!("{pre}.ln_ffn"), x);
        let f = nn::ffn(tape, p, &format!("{pre}.ffn"), f);
        x = tape.add(x, f);
    }
    let x = nn::layer_norm(tape, p, "ln_f", x);
    Ok(nn::linear(tape, p, "head", x))
}

fn split_rows<S: Scalar>(out: &Tensor<S>, inputs: &[CopilotInput<'_, S>]) -> Result<Vec<Tensor<S>>> {
    let (n_max, v) = (out.shape()[1], out.shape()[2]);
    inputs
        .iter()
        .enumerate()
        .map(|(b, inp)| {
            let base = b * n_max * v;
            Tensor::new(vec![inp.rows, v], out.data()[base..base + inp.rows * v].to_vec())
        })
        .collect()
}

/// Mean over examples of `sqrt(sum of squared errors + eps)` on `[B, n_max, V]`
/// predictions. `targets[b]` is `[rows_b, V]`.
pub fn batch_rmse<S: Scalar>(tape: &mut Tape<S>, preds: Var, targets: &[&Tensor<S>]) -> Result<Var> {
    let sh = tape.shape(preds).to_vec();
    let (nb, n_max, v) = (sh[0], sh[1], sh[2]);
    if targets.len() != nb {
        return Err(Error::Shape(format!("{} targets for {nb} examples", targets.len())));
    }
    let mut tgt = Vec::with_capacity(nb * n_max * v);
    let mut mask = Vec::with_capacity(nb * n_max * v);
    for t in targets {
        let rows = t.shape()[0];
        if t.rank() != 2 || t.last_dim() != v || rows > n_max {
            return Err(Error::Shape(format!("target {:?} for predictions {sh:?}", t.shape())));
        }
        tgt.extend_from_slice(t.data());
        tgt.resize(tgt.len() + (n_max - rows) * v, S::zero());
        mask.resize(mask.len() + rows * v, S::one());
        mask.resize(mask.len() + (n_max - rows) * v, S::zero());
    }
    if targets.iter().all(|t| t.shape()[0] == 0) {
        return Err(Error::InvalidArgument("RMSE over a fully masked batch".into()));
    }
    let t = tape.constant(Tensor::new(sh.clone(), tgt)?);
    let diff = tape.sub(preds, t);
    let diff = tape.mul_const(diff, mask);
    let sq = tape.mul(diff, diff);
    let sq = tape.reshape(sq, &[nb, n_max * v]);
    let per = tape.sum_last(sq);
    let per = tape.add_scalar(per, S::from_f64(RMSE_EPS));
    let per = tape.sqrt(per);
    let total = tape.sum_all(per);
    Ok(tape.scale(total, S::from_f64(1.0 / nb as f64)))
}

/// `sqrt(sum over unmasked rows of ||pred - target||^2 + eps)`.
pub fn rmse_loss<S: Scalar>(preds: &Tensor<S>, targets: &Tensor<S>, mask: &[bool]) -> Result<S> {
    if preds.shape() != targets.shape() || preds.rank() != 2 || mask.len() != preds.shape()[0] {
        return Err(Error::Shape(format!(
            "rmse_loss: preds {:?}, targets {:?}, {} mask entries",
            preds.shape(),
            targets.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("RMSE over a fully masked sequence".into()));
    }
    let v = preds.last_dim();
    let mut sum = S::zero();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for j in 0..v {
                let e = preds.data()[r * v + j] - targets.data()[r * v + j];
                sum = sum + e * e;
            }
        }
    }
    Ok((sum + S::from_f64(RMSE_EPS)).sqrt())
}
