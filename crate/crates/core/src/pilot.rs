//! The Pilot transformer: embeddings, a pre-norm decoder stack (optionally
//! preceded by a bidirectional encoder) and the output head.
//!
//! The decoder input is `[BOS] + prompt + target prefix`. Target row `i` is
//! read at the position that has seen the prompt and `y[..i]`.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{self, INIT_STD};
use crate::numerics::{Bound, Mask, ParameterSet, Scalar, Tape, Tensor, Var};
use crate::tasks::{TokenSequence, BOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Architecture {
    #[default]
    DecoderOnly,
    EncoderDecoder,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder_only" => Ok(Architecture::DecoderOnly),
            "encoder_decoder" => Ok(Architecture::EncoderDecoder),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::DecoderOnly => "decoder_only",
            Architecture::EncoderDecoder => "encoder_decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PilotConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    /// Longest decoder (and encoder) sequence, BOS included.
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::DecoderOnly,
            vocab_size: 16,
            max_seq_len: 16,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
        }
    }
}

impl PilotConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("pilot {name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "pilot hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("architecture", self.architecture);
        m.insert("vocab_size", self.vocab_size);
        m.insert("max_seq_len", self.max_seq_len);
        m.insert("num_layers", self.num_layers);
        m.insert("hidden_dim", self.hidden_dim);
        m.insert("num_heads", self.num_heads);
        m.insert("ffn_dim", self.ffn_dim);
        m
    }

    /// Reads every field from `m`, consuming the keys; missing keys keep defaults.
    pub fn from_kv(m: &mut KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            architecture: m.take_or("architecture", d.architecture)?,
            vocab_size: m.take_or("vocab_size", d.vocab_size)?,
            max_seq_len: m.take_or("max_seq_len", d.max_seq_len)?,
            num_layers: m.take_or("num_layers", d.num_layers)?,
            hidden_dim: m.take_or("hidden_dim", d.hidden_dim)?,
            num_heads: m.take_or("num_heads", d.num_heads)?,
            ffn_dim: m.take_or("ffn_dim", d.ffn_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Detached values from one example's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotTrace<S: Scalar> {
    /// `[|X|, d]`: prompt embeddings, or the encoder output.
    pub input_repr: Tensor<S>,
    /// `[L, n, d]`: residual stream after each block at the `n` target rows.
    pub hidden_stack: Tensor<S>,
    /// `[n, V]`.
    pub logits: Tensor<S>,
}

impl<S: Scalar> PilotTrace<S> {
    pub fn num_rows(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Bitwise content hash, for capture-order and immutability checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in [&self.input_repr, &self.hidden_stack, &self.logits] {
            hash_tensor(t, &mut h);
        }
        h.finish()
    }
}

pub(crate) fn hash_tensor<S: Scalar, H: Hasher>(t: &Tensor<S>, h: &mut H) {
    t.shape().hash(h);
    for v in t.data() {
        v.as_f64().to_bits().hash(h);
    }
}

/// One example of a batched forward: the prompt and the target prefix fed to
/// the decoder. The pass produces `prefix.len() + 1` target rows.
#[derive(Debug, Clone, Copy)]
pub struct PilotInput<'a> {
    pub prompt: &'a [u32],
    pub prefix: &'a [u32],
}

impl<'a> PilotInput<'a> {
    /// Teacher-forced input predicting every token of `target`.
    pub fn teacher_forced(prompt: &'a TokenSequence, target: &'a TokenSequence) -> Self {
        let t = target.ids();
        Self {
            prompt: prompt.ids(),
            prefix: &t[..t.len().saturating_sub(1)],
        }
    }
}

/// Result of [`forward_tape`].
pub struct PilotForward<S: Scalar> {
    /// `[B * T, V]` logits over every decoder position.
    pub logits: Var,
    /// For each example, its target rows within `logits`.
    pub rows: Vec<Vec<usize>>,
    pub traces: Vec<PilotTrace<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pilot<S: Scalar> {
    config: PilotConfig,
    params: ParameterSet<S>,
}

impl<S: Scalar> Pilot<S> {
    /// Fresh model with normal(0, 0.02) weights and zero biases.
    pub fn new(config: PilotConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking them against the config.
    pub fn from_params(config: PilotConfig, params: ParameterSet<S>) -> Result<Self> {
        config.validate()?;
        init_params::<S>(&config, 0)?
            .check_same_layout(&params)
            .map_err(|e| Error::Incompatible(format!("pilot parameters do not match config: {e}")))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PilotConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet<S> {
        self.params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut kv = self.config.to_kv();
        kv.insert("kind", "pilot");
        crate::checkpoint::save(path, &kv, &self.params)
    }

    /// Loads a pilot checkpoint; its config block defines the model.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (mut kv, params) = crate::checkpoint::load(path)?;
        let kind: String = kv.take_required("kind")?;
        if kind != "pilot" {
            return Err(Error::Incompatible(format!(
                "{} holds a {kind} checkpoint, not a pilot",
                path.display()
            )));
        }
        let config = PilotConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Self::from_params(config, params)
    }

    /// Loads a checkpoint and rejects it unless it was saved with `expected`.
    pub fn load_expecting(path: &std::path::Path, expected: &PilotConfig) -> Result<Self> {
        let m = Self::load(path)?;
        if &m.config != expected {
            return Err(Error::Incompatible(format!(
                "{} was saved with pilot config {:?}, expected {:?}",
                path.display(),
                m.config,
                expected
            )));
        }
        Ok(m)
    }

    /// Input representation of a prompt.
    pub fn embed_input(&self, prompt: &TokenSequence) -> Result<Tensor<S>> {
        let mut trace = self.forward_batch(&[PilotInput {
            prompt: prompt.ids(),
            prefix: &[],
        }])?;
        Ok(trace.pop().expect("one trace").input_repr)
    }

    /// Frozen forward pass over one example.
    pub fn forward(&self, prompt: &[u32], prefix: &[u32]) -> Result<PilotTrace<S>> {
        let mut t = self.forward_batch(&[PilotInput { prompt, prefix }])?;
        Ok(t.pop().expect("one trace"))
    }

    /// Frozen forward pass over a right-padded batch.
    pub fn forward_batch(&self, inputs: &[PilotInput<'_>]) -> Result<Vec<PilotTrace<S>>> {
        let mut tape = Tape::new();
        let bound = self.params.attach_frozen(&mut tape);
        Ok(forward_tape(&self.config, &mut tape, &bound, inputs)?.traces)
    }

    /// Projects every layer of `trace.hidden_stack` through the final norm and
    /// output head: `[L, n, V]`.
    pub fn logit_lens(&self, trace: &PilotTrace<S>) -> Result<Tensor<S>> {
        let sh = trace.hidden_stack.shape().to_vec();
        if sh.len() != 3 || sh[0] != self.config.num_layers || sh[2] != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "hidden stack {sh:?} does not match the pilot config"
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.attach_frozen(&mut tape);
        let rows = sh[0] * sh[1];
        let h = tape.constant(trace.hidden_stack.clone().reshape(vec![rows, sh[2]])?);
        let h = nn::layer_norm(&mut tape, &p, "ln_f", h);
        let z = nn::linear(&mut tape, &p, "head", h);
        tape.value(z)
            .clone()
            .reshape(vec![sh[0], sh[1], self.config.vocab_size])
    }
}

fn init_params<S: Scalar>(c: &PilotConfig, seed: u64) -> Result<ParameterSet<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    let (d, f) = (c.hidden_dim, c.ffn_dim);
    p.insert("tok_emb", nn::normal(&mut rng, &[c.vocab_size, d], INIT_STD))?;
    p.insert("pos_emb", nn::normal(&mut rng, &[c.max_seq_len, d], INIT_STD))?;
    if c.architecture == Architecture::EncoderDecoder {
        p.insert("enc_pos_emb", nn::normal(&mut rng, &[c.max_seq_len, d], INIT_STD))?;
        for l in 0..c.num_layers {
            let pre = format!("encoder.{l}");
            nn::init_layer_norm(&mut p, &format!("{pre}.ln1"), d)?;
            nn::init_attention(&mut p, &mut rng, &format!("{pre}.attn"), d, d)?;
            nn::init_layer_norm(&mut p, &format!("{pre}.ln2"), d)?;
            nn::init_ffn(&mut p, &mut rng, &format!("{pre}.ffn"), d, f)?;
        }
        nn::init_layer_norm(&mut p, "encoder.ln_f", d)?;
    }
    for l in 0..c.num_layers {
        let pre = format!("blocks.{l}");
        nn::init_layer_norm(&mut p, &format!("{pre}.ln1"), d)?;
        nn::init_attention(&mut p, &mut rng, &format!("{pre}.attn"), d, d)?;
        if c.architecture == Architecture::EncoderDecoder {
            nn::init_layer_norm(&mut p, &format!("{pre}.ln_cross"), d)?;
            nn::init_attention(&mut p, &mut rng, &format!("{pre}.cross"), d, d)?;
        }
        nn::init_layer_norm(&mut p, &format!("{pre}.ln2"), d)?;
        nn::init_ffn(&mut p, &mut rng, &format!("{pre}.ffn"), d, f)?;
    }
    nn::init_layer_norm(&mut p, "ln_f", d)?;
    nn::init_linear(&mut p, &mut rng, "head", d, c.vocab_size)?;
    Ok(p)
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&id) => Err(Error::OutOfVocabulary { id, vocab }),
        None => Ok(()),
    }
}

/// Token plus positional embeddings of right-padded rows: `[B, T, d]`.
fn embed_rows<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    pos_table: &str,
    seqs: &[Vec<u32>],
    t: usize,
    d: usize,
) -> Var {
    let b = seqs.len();
    let mut ids = Vec::with_capacity(b * t);
    let mut pos = Vec::with_capacity(b * t);
    for s in seqs {
        for j in 0..t {
            ids.push(s.get(j).copied().unwrap_or(PAD) as usize);
            pos.push(j);
        }
    }
    let tok = tape.embedding(p.get("tok_emb"), &ids);
    let pe = tape.embedding(p.get(pos_table), &pos);
    let x = tape.add(tok, pe);
    tape.reshape(x, &[b, t, d])
}

/// Copies rows `[start, start + len)` of example `b` out of a `[B, T, d]` value.
fn rows_of<S: Scalar>(v: &Tensor<S>, b: usize, start: usize, len: usize) -> Vec<S> {
    let (t, d) = (v.shape()[1], v.shape()[2]);
    let base = (b * t + start) * d;
    v.data()[base..base + len * d].to_vec()
}

/// Key-padding mask `[B, rows, cols]`: column `j` visible iff `j < lens[b]`.
fn key_padding_mask(lens: &[usize], rows: usize, cols: usize) -> Mask {
    let mut vis = Vec::with_capacity(lens.len() * rows * cols);
    for &len in lens {
        for _ in 0..rows {
            vis.extend((0..cols).map(|j| j < len));
        }
    }
    Mask::new(lens.len(), rows, cols, vis).expect("mask size")
}

fn block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &Bound,
    pre: &str,
    heads: usize,
    x: Var,
    self_mask: &Mask,
    cross: Option<(Var, &Mask)>,
) -> Var {
    let a = nn::layer_norm(tape, p, &format!("{pre}.ln1"), x);
    let a = nn::attention(tape, p, &format!("{pre}.attn"), a, a, heads, self_mask);
    let mut x = tape.add(x, a);
    if let Some((mem, mask)) = cross {
        let c = nn::layer_norm(tape, p, &format!("{pre}.ln_cross"), x);
        let c = nn::attention(tape, p, &format!("{pre}.cross"), c, mem, heads, mask);
        x = tape.add(x, c);
    }
    let f = nn::layer_norm(tape, p, &format!("{pre}.ln2"), x);
    let f = nn::ffn(tape, p, &format!("{pre}.ffn"), f);
    tape.add(x, f)
}

/// Batched pilot forward on an existing tape, with parameters bound by path.
pub fn forward_tape<S: Scalar>(
    config: &PilotConfig,
    tape: &mut Tape<S>,
    p: &Bound,
    inputs: &[PilotInput<'_>],
) -> Result<PilotForward<S>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("empty pilot batch".into()));
    }
    let (d, heads, v) = (config.hidden_dim, config.num_heads, config.vocab_size);
    let nb = inputs.len();
    let enc_dec = config.architecture == Architecture::EncoderDecoder;
    for inp in inputs {
        check_ids(inp.prompt, v)?;
        check_ids(inp.prefix, v)?;
        let len = if enc_dec {
            inp.prompt.len().max(1 + inp.prefix.len())
        } else {
            1 + inp.prompt.len() + inp.prefix.len()
        };
        if len > config.max_seq_len {
            return Err(Error::TooLong {
                len,
                max: config.max_seq_len,
            });
        }
    }

    // Encoder memory and X̃ for each example.
    let mut memory: Option<(Var, Mask)> = None;
    let mut input_reprs: Vec<Tensor<S>> = Vec::with_capacity(nb);
    let dec_seqs: Vec<Vec<u32>> = inputs
        .iter()
        .map(|inp| {
            let mut s = vec![BOS];
            if !enc_dec {
                s.extend_from_slice(inp.prompt);
            }
            s.extend_from_slice(inp.prefix);
            s
        })
        .collect();

    if enc_dec {
        let lens: Vec<usize> = inputs.iter().map(|i| i.prompt.len()).collect();
        let s_len = lens.iter().copied().max().unwrap_or(0).max(1);
        let seqs: Vec<Vec<u32>> = inputs.iter().map(|i| i.prompt.to_vec()).collect();
        let mut e = embed_rows(tape, p, "enc_pos_emb", &seqs, s_len, d);
        let enc_mask = key_padding_mask(&lens, s_len, s_len);
        for l in 0..config.num_layers {
            e = block(tape, p, &format!("encoder.{l}"), heads, e, &enc_mask, None);
        }
        let e = nn::layer_norm(tape, p, "encoder.ln_f", e);
        for (b, &len) in lens.iter().enumerate() {
            let rows = rows_of(tape.value(e), b, 0, len);
            input_reprs.push(Tensor::new(vec![len, d], rows)?);
        }
        let t_dec = dec_seqs.iter().map(Vec::len).max().unwrap_or(1);
        memory = Some((e, key_padding_mask(&lens, t_dec, s_len)));
    }

    let t = dec_seqs.iter().map(Vec::len).max().unwrap_or(1);
    let mut x = embed_rows(tape, p, "pos_emb", &dec_seqs, t, d);
    if !enc_dec {
        for (b, inp) in inputs.iter().enumerate() {
            let rows = rows_of(tape.value(x), b, 1, inp.prompt.len());
            input_reprs.push(Tensor::new(vec![inp.prompt.len(), d], rows)?);
        }
    }

    // Target row i of example b sits at decoder position start_b + i.
    let starts: Vec<usize> = inputs
        .iter()
        .map(|inp| if enc_dec { 0 } else { inp.prompt.len() })
        .collect();
    let counts: Vec<usize> = inputs.iter().map(|inp| inp.prefix.len() + 1).collect();

    let causal = Mask::causal(t);
    let mut hidden: Vec<Vec<S>> = vec![Vec::new(); nb];
    for l in 0..config.num_layers {
        let cross = memory.as_ref().map(|(m, mask)| (*m, mask));
        x = block(tape, p, &format!("blocks.{l}"), heads, x, &causal, cross);
        for b in 0..nb {
            let rows = rows_of(tape.value(x), b, starts[b], counts[b]);
            hidden[b].extend_from_slice(&rows);
        }
    }
    let h = nn::layer_norm(tape, p, "ln_f", x);
    let h = tape.reshape(h, &[nb * t, d]);
    let logits = nn::linear(tape, p, "head", h);

    let lv = tape.value(logits);
    let mut traces = Vec::with_capacity(nb);
    let mut all_rows = Vec::with_capacity(nb);
    for (b, (hid, repr)) in hidden.into_iter().zip(input_reprs).enumerate() {
        let n = counts[b];
        let first = b * t + starts[b];
        let rows: Vec<usize> = (first..first + n).collect();
        let lg = lv.data()[first * v..(first + n) * v].to_vec();
        traces.push(PilotTrace {
            input_repr: repr,
            hidden_stack: Tensor::new(vec![config.num_layers, n, d], hid)?,
            logits: Tensor::new(vec![n, v], lg)?,
        });
        all_rows.push(rows);
    }
    Ok(PilotForward {
        logits,
        rows: all_rows,
        traces,
    })
}

/// Summed negative log-likelihood over rows with a target; errors when every
/// row is masked.
pub fn ce_loss_tape<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    if targets.iter().all(Option::is_none) {
        return Err(Error::InvalidArgument(
            "cross-entropy over a fully masked sequence".into(),
        ));
    }
    let nll = tape.cross_entropy(logits, targets);
    Ok(tape.sum_all(nll))
}

/// Summed negative log-likelihood of `targets` under `[n, V]` logits.
/// `mask[i] == false` excludes row `i`.
pub fn ce_loss<S: Scalar>(logits: &Tensor<S>, targets: &[u32], mask: &[bool]) -> Result<S> {
    let n = logits.rows();
    if logits.rank() != 2 || targets.len() != n || mask.len() != n {
        return Err(Error::Shape(format!(
            "ce_loss: logits {:?}, {} targets, {} mask entries",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    logits.ensure_finite("logits")?;
    let v = logits.last_dim();
    let mut tgt = Vec::with_capacity(n);
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t as usize >= v {
            return Err(Error::OutOfVocabulary { id: t, vocab: v });
        }
        tgt.push(m.then_some(t as usize));
    }
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let loss = ce_loss_tape(&mut tape, z, &tgt)?;
    Ok(tape.value(loss).item())
}

/// Training objective for a batch: the mean over examples of each example's
/// summed cross-entropy.
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &PilotForward<S>,
    targets: &[&TokenSequence],
) -> Result<Var> {
    if targets.len() != fwd.rows.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} examples",
            targets.len(),
            fwd.rows.len()
        )));
    }
    let total = tape.shape(fwd.logits)[0];
    let mut tgt = vec![None; total];
    for (rows, target) in fwd.rows.iter().zip(targets) {
        if rows.len() != target.len() {
            return Err(Error::Shape(format!(
                "{} logit rows for a target of length {}",
                rows.len(),
                target.len()
            )));
        }
        for (&r, &id) in rows.iter().zip(target.ids()) {
            tgt[r] = Some(id as usize);
        }
    }
    let sum = ce_loss_tape(tape, fwd.logits, &tgt)?;
    Ok(tape.scale(sum, S::from_f64(1.0 / targets.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture) -> PilotConfig {
        PilotConfig {
            architecture: arch,
            vocab_size: 12,
            max_seq_len: 10,
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Architecture::DecoderOnly);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 0;
        assert!(c.validate().is_err());
        let c = tiny(Architecture::EncoderDecoder);
        let mut kv = c.to_kv();
        assert_eq!(PilotConfig::from_kv(&mut kv).unwrap(), c);
        kv.finish().unwrap();
    }

    #[test]
    fn empty_prompt_embeds_to_zero_rows() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Pilot::<f64>::new(tiny(arch), 1).unwrap();
            let x = m.embed_input(&TokenSequence::empty()).unwrap();
            assert_eq!(x.shape(), &[0, 8]);
        }
    }

    #[test]
    fn positions_matter() {
        let m = Pilot::<f32>::new(tiny(Architecture::DecoderOnly), 3).unwrap();
        let a = m.embed_input(&TokenSequence::new(vec![4, 5]).unwrap()).unwrap();
        let b = m.embed_input(&TokenSequence::new(vec![5, 4]).unwrap()).unwrap();
        assert_ne!(a.row(0), b.row(1));
        assert_ne!(a.row(1), b.row(0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Pilot::<f32>::new(tiny(Architecture::DecoderOnly), 0).unwrap();
        assert!(matches!(
            m.forward(&[3, 12], &[]),
            Err(Error::OutOfVocabulary { id: 12, .. })
        ));
        assert!(matches!(
            m.forward(&[3; 6], &[4; 4]),
            Err(Error::TooLong { len: 11, max: 10 })
        ));
    }

    #[test]
    fn trace_shapes() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Pilot::<f32>::new(tiny(arch), 0).unwrap();
            let t = m.forward(&[3, 4, 5], &[6, 7]).unwrap();
            assert_eq!(t.hidden_stack.shape(), &[2, 3, 8]);
            assert_eq!(t.logits.shape(), &[3, 12]);
            assert_eq!(t.input_repr.shape(), &[3, 8]);
        }
    }

    #[test]
    fn batch_matches_single() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Pilot::<f64>::new(tiny(arch), 5).unwrap();
            let a = PilotInput { prompt: &[3, 4, 5, 6], prefix: &[7] };
            let b = PilotInput { prompt: &[8], prefix: &[9, 10, 3] };
            let batch = m.forward_batch(&[a, b]).unwrap();
            for (inp, tr) in [a, b].iter().zip(&batch) {
                let single = m.forward(inp.prompt, inp.prefix).unwrap();
                for (x, y) in single.logits.data().iter().zip(tr.logits.data()) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_in_targets() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Pilot::<f32>::new(tiny(arch), 9).unwrap();
            let base = m.forward(&[3, 4], &[5, 6, 7]).unwrap();
            let pert = m.forward(&[3, 4], &[5, 11, 7]).unwrap();
            // prefix position 1 feeds target rows 2 and later
            for r in 0..2 {
                assert_eq!(base.logits.row(r), pert.logits.row(r));
            }
            assert_ne!(base.logits.row(2), pert.logits.row(2));
        }
    }

    #[test]
    fn encoder_output_ignores_targets() {
        let m = Pilot::<f32>::new(tiny(Architecture::EncoderDecoder), 2).unwrap();
        let a = m.forward(&[3, 4, 5], &[6]).unwrap();
        let b = m.forward(&[3, 4, 5], &[9, 10, 11]).unwrap();
        assert_eq!(a.input_repr, b.input_repr);
    }

    #[test]
    fn lens_last_layer_is_logits() {
        for arch in [Architecture::DecoderOnly, Architecture::EncoderDecoder] {
            let m = Pilot::<f32>::new(tiny(arch), 4).unwrap();
            let t = m.forward(&[3, 4, 5], &[6, 7]).unwrap();
            let lens = m.logit_lens(&t).unwrap();
            assert_eq!(lens.shape(), &[2, 3, 12]);
            assert_eq!(lens.slice_leading(1, 2).data(), t.logits.data());
        }
    }

    #[test]
    fn deterministic() {
        let a = Pilot::<f32>::new(tiny(Architecture::DecoderOnly), 17).unwrap();
        let b = Pilot::<f32>::new(tiny(Architecture::DecoderOnly), 17).unwrap();
        let ta = a.forward(&[3, 4], &[5]).unwrap();
        let tb = b.forward(&[3, 4], &[5]).unwrap();
        assert_eq!(ta.content_hash(), tb.content_hash());
    }

    #[test]
    fn ce_uniform_and_one_hot() {
        let z = Tensor::<f64>::zeros(&[3, 4]);
        let l = ce_loss(&z, &[0, 1, 2], &[true; 3]).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
        let l = ce_loss(&z, &[0, 1, 2], &[true, false, true]).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        let mut hot = Tensor::<f64>::filled(&[2, 4], -1e4);
        hot.data_mut()[1] = 0.0;
        hot.data_mut()[4 + 3] = 0.0;
        assert_eq!(ce_loss(&hot, &[1, 3], &[true; 2]).unwrap(), 0.0);
        assert!(ce_loss(&z, &[0, 1, 2], &[false; 3]).is_err());
    }

    #[test]
    fn ce_matches_naive_sum() {
        let vals: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.37).collect();
        let z = Tensor::new(vec![3, 5], vals.clone()).unwrap();
        let tg = [4u32, 0, 2];
        let mut oracle = 0.0;
        for (r, &t) in tg.iter().enumerate() {
            let row = &vals[r * 5..r * 5 + 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[t as usize].exp() / denom).ln();
        }
        let l = ce_loss(&z, &tg, &[true; 3]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }
}
