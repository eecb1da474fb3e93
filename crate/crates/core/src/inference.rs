//! Fused generation: at every step the Pilot's distribution is shifted by
//! `lambda` times the Copilot's correction and the result is decoded.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::copilot::{build_cross_context, Copilot, CopilotInput, CrossContext};
use crate::error::{Error, Result};
use crate::mistake_log::HiddenRepr;
use crate::numerics::{softmax, Scalar, Tensor};
use crate::pilot::Pilot;
use crate::tasks::{batch_metrics, Example, TokenSequence, EOS};

/// Floor applied before taking logs of fused scores in beam search.
pub const BEAM_SCORE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decoding {
    #[default]
    Greedy,
    Beam,
}

impl FromStr for Decoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            other => Err(Error::Config(format!("unknown decoding {other:?}"))),
        }
    }
}

impl fmt::Display for Decoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub lambda: f64,
    pub decoding: Decoding,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Applied to pilot logits before the softmax.
    pub temperature: f64,
    /// Keep only the `top_k` largest pilot logits; 0 disables.
    pub top_k: usize,
    /// Nucleus mass for the pilot distribution; 1 disables.
    pub top_p: f64,
    /// Divide fused scores by their sum before decoding.
    pub renormalize: bool,
    /// Retain per-step `(p_hat, f, p_tilde)` records.
    pub keep_records: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            decoding: Decoding::Greedy,
            beam_width: 4,
            max_new_tokens: 8,
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            renormalize: false,
            keep_records: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// `p_hat + lambda * f`.
pub fn rectify<S: Scalar>(p_hat: &[S], f: &[S], lambda: f64) -> Result<Vec<S>> {
    if p_hat.len() != f.len() {
        return Err(Error::Shape(format!(
            "rectify: {} probabilities vs {} corrections",
            p_hat.len(),
            f.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let l = S::from_f64(lambda);
    Ok(p_hat.iter().zip(f).map(|(&p, &c)| p + l * c).collect())
}

/// Index of the largest finite score; ties go to the lowest index.
pub fn greedy_pick<S: Scalar>(scores: &[S]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::NonFinite("no finite score to decode".into()))
}

/// Pilot distribution after temperature, top-k and top-p.
pub fn pilot_distribution<S: Scalar>(logits: &[S], cfg: &FusionConfig) -> Result<Vec<S>> {
    let t = S::from_f64(cfg.temperature);
    let mut z: Vec<S> = logits.iter().map(|&v| v / t).collect();
    if cfg.top_k > 0 && cfg.top_k < z.len() {
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        for &i in &idx[cfg.top_k..] {
            z[i] = S::neg_infinity();
        }
    }
    let finite: Vec<S> = z.iter().map(|&v| if v.is_finite() { v } else { S::zero() }).collect();
    let mut p = softmax(&finite)?;
    for (pi, zi) in p.iter_mut().zip(&z) {
        if !zi.is_finite() {
            *pi = S::zero();
        }
    }
    if cfg.top_p < 1.0 {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut keep = vec![false; p.len()];
        for &i in &idx {
            keep[i] = true;
            mass += p[i].as_f64();
            if mass >= cfg.top_p {
                break;
            }
        }
        for (pi, k) in p.iter_mut().zip(&keep) {
            if !k {
                *pi = S::zero();
            }
        }
    }
    let sum: S = p.iter().copied().sum();
    if cfg.top_k > 0 || cfg.top_p < 1.0 {
        for v in &mut p {
            *v = *v / sum;
        }
    }
    Ok(p)
}

/// Per-step values retained for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub p_hat: Vec<f64>,
    pub correction: Vec<f64>,
    pub fused: Vec<f64>,
    pub token: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Eos => "eos",
            Self::MaxLen => "max_len",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: TokenSequence,
    pub termination: Termination,
    pub records: Vec<StepRecord>,
    /// Summed floored log-scores of the chosen path (beam search only).
    pub score: Option<f64>,
}

/// One decoding hypothesis.
#[derive(Debug, Clone)]
struct Hypothesis<S: Scalar> {
    tokens: Vec<u32>,
    /// Copilot outputs fed back as the next inputs.
    corrections: Vec<Vec<S>>,
    records: Vec<StepRecord>,
    score: f64,
    done: bool,
}

/// Fused scores for the next position of one hypothesis.
fn step_scores<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    prompt: &[u32],
    tokens: &[u32],
    corrections: &[Vec<S>],
    cfg: &FusionConfig,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let trace = pilot.forward(prompt, tokens)?;
    let i = tokens.len();
    let p_hat = pilot_distribution(trace.logits.row(i), cfg)?;
    let v = p_hat.len();
    let Some(c) = copilot else {
        return Ok((p_hat.clone(), vec![S::zero(); v], p_hat));
    };
    let ctx = if c.config().uses_context() {
        build_cross_context(&trace.input_repr, &HiddenRepr::Raw(trace.hidden_stack), c.config())?
    } else {
        CrossContext {
            rows: Tensor::zeros(&[0, c.config().pilot_dim]),
            x_len: 0,
            h_len: 0,
        }
    };
    let flat: Vec<S> = corrections.iter().flatten().copied().collect();
    let prefix = Tensor::new(vec![i, v], flat)?;
    let out = c.predict(CopilotInput {
        context: &ctx,
        prefix: &prefix,
        rows: i + 1,
    })?;
    let f = out.row(i).to_vec();
    let mut fused = rectify(&p_hat, &f, cfg.lambda)?;
    if cfg.renormalize {
        let sum: S = fused.iter().copied().sum();
        if sum.is_finite() && sum != S::zero() {
            for x in &mut fused {
                *x = *x / sum;
            }
        }
    }
    Ok((p_hat, f, fused))
}

fn record<S: Scalar>(p_hat: &[S], f: &[S], fused: &[S], token: u32) -> StepRecord {
    let cv = |x: &[S]| x.iter().map(|v| v.as_f64()).collect();
    StepRecord {
        p_hat: cv(p_hat),
        correction: cv(f),
        fused: cv(fused),
        token,
    }
}

/// Generates a continuation of `prompt`. Without a Copilot this is
/// pilot-only decoding with the same configuration.
pub fn generate_fused<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    prompt: &TokenSequence,
    cfg: &FusionConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if let Some(c) = copilot {
        c.config().check_pilot(pilot.config())?;
    }
    match cfg.decoding {
        Decoding::Greedy => greedy(pilot, copilot, prompt.ids(), cfg),
        Decoding::Beam => beam(pilot, copilot, prompt.ids(), cfg),
    }
}

fn greedy<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    prompt: &[u32],
    cfg: &FusionConfig,
) -> Result<GenerationResult> {
    let mut tokens = Vec::new();
    let mut corrections = Vec::new();
    let mut records = Vec::new();
    while tokens.len() < cfg.max_new_tokens {
        let (p_hat, f, fused) = step_scores(pilot, copilot, prompt, &tokens, &corrections, cfg)?;
        let tok = greedy_pick(&fused)? as u32;
        if cfg.keep_records {
            records.push(record(&p_hat, &f, &fused, tok));
        }
        tokens.push(tok);
        corrections.push(f);
        if tok == EOS {
            return Ok(GenerationResult {
                tokens: TokenSequence::from_generated(&tokens),
                termination: Termination::Eos,
                records,
                score: None,
            });
        }
    }
    Ok(GenerationResult {
        tokens: TokenSequence::from_generated(&tokens),
        termination: Termination::MaxLen,
        records,
        score: None,
    })
}

/// Candidate ordering: floored log-score, then raw fused score, then
/// lower beam index, then lower token id.
#[derive(Debug, Clone, Copy)]
pub struct BeamCandidate {
    pub beam: usize,
    pub token: usize,
    pub score: f64,
    pub raw: f64,
}

/// Keeps the best `width` continuations of the live beams.
///
/// `scores[b]` are the fused scores of beam `b`, `totals[b]` its cumulative
/// log-score. Finished beams are carried over unchanged by the caller.
pub fn beam_candidates<S: Scalar>(totals: &[f64], scores: &[Vec<S>], width: usize) -> Result<Vec<BeamCandidate>> {
    let mut all = Vec::new();
    for (b, (row, &base)) in scores.iter().zip(totals).enumerate() {
        for (t, &s) in row.iter().enumerate() {
            let raw = s.as_f64();
            if !raw.is_finite() {
                continue;
            }
            all.push(BeamCandidate {
                beam: b,
                token: t,
                score: base + raw.max(BEAM_SCORE_FLOOR).ln(),
                raw,
            });
        }
    }
    if all.is_empty() && !scores.is_empty() {
        return Err(Error::NonFinite("no finite score to decode".into()));
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.raw.total_cmp(&a.raw))
            .then(a.beam.cmp(&b.beam))
            .then(a.token.cmp(&b.token))
    });
    all.truncate(width);
    Ok(all)
}

fn beam<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    prompt: &[u32],
    cfg: &FusionConfig,
) -> Result<GenerationResult> {
    let mut beams = vec![Hypothesis::<S> {
        tokens: Vec::new(),
        corrections: Vec::new(),
        records: Vec::new(),
        score: 0.0,
        done: false,
    }];
    for _ in 0..cfg.max_new_tokens {
        if beams.iter().all(|h| h.done) {
            break;
        }
        let live: Vec<&Hypothesis<S>> = beams.iter().filter(|h| !h.done).collect();
        let mut steps = Vec::with_capacity(live.len());
        for h in &live {
            steps.push(step_scores(pilot, copilot, prompt, &h.tokens, &h.corrections, cfg)?);
        }
        let totals: Vec<f64> = live.iter().map(|h| h.score).collect();
        let fused: Vec<Vec<S>> = steps.iter().map(|s| s.2.clone()).collect();
        let cands = beam_candidates(&totals, &fused, cfg.beam_width)?;
        let mut next: Vec<Hypothesis<S>> = beams.iter().filter(|h| h.done).cloned().collect();
        for c in cands {
            let parent = live[c.beam];
            let (p_hat, f, fz) = &steps[c.beam];
            let mut h = parent.clone();
            h.tokens.push(c.token as u32);
            h.corrections.push(f.clone());
            if cfg.keep_records {
                h.records.push(record(p_hat, f, fz, c.token as u32));
            }
            h.score = c.score;
            h.done = c.token as u32 == EOS;
            next.push(h);
        }
        // finished hypotheses compete with live ones for the beam
        next.sort_by(|a, b| b.score.total_cmp(&a.score));
        next.truncate(cfg.beam_width);
        beams = next;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| a.score.total_cmp(&b.score).then(b.done.cmp(&a.done).reverse()))
        .expect("beam never empty");
    let termination = if best.done { Termination::Eos } else { Termination::MaxLen };
    Ok(GenerationResult {
        tokens: TokenSequence::from_generated(&best.tokens),
        termination,
        records: best.records,
        score: Some(best.score),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub examples: usize,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// Generates for every example and scores against the targets.
pub fn evaluate<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    data: &[Example],
    cfg: &FusionConfig,
) -> Result<EvalReport> {
    let (preds, _) = generate_all(pilot, copilot, data, cfg)?;
    let golds: Vec<TokenSequence> = data.iter().map(|e| e.target.clone()).collect();
    let (exact_match, token_accuracy) = batch_metrics(&preds, &golds);
    Ok(EvalReport {
        examples: data.len(),
        exact_match,
        token_accuracy,
    })
}

/// Outputs and termination reasons for every example.
pub fn generate_all<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: Option<&Copilot<S>>,
    data: &[Example],
    cfg: &FusionConfig,
) -> Result<(Vec<TokenSequence>, Vec<Termination>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut ends = Vec::with_capacity(data.len());
    for e in data {
        let r = generate_fused(pilot, copilot, &e.input, cfg)?;
        preds.push(r.tokens);
        ends.push(r.termination);
    }
    Ok((preds, ends))
}

/// One row of a lambda sweep; `lambda == 0` is the pilot-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// Evaluates `lambda = 0` followed by every grid value.
pub fn lambda_sweep<S: Scalar>(
    pilot: &Pilot<S>,
    copilot: &Copilot<S>,
    data: &[Example],
    grid: &[f64],
    base: &FusionConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.len() + 1);
    for &lambda in std::iter::once(&0.0).chain(grid) {
        let cfg = FusionConfig { lambda, ..base.clone() };
        let r = evaluate(pilot, Some(copilot), data, &cfg)?;
        rows.push(SweepRow {
            lambda,
            exact_match: r.exact_match,
            token_accuracy: r.token_accuracy,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("lambda,exact_match,token_accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.lambda, r.exact_match, r.token_accuracy));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransferReport {
    pub pilot_only: EvalReport,
    pub fused: EvalReport,
    pub lambda: f64,
}

/// Pairs a Copilot with a Pilot it was not trained with.
pub fn transfer_eval<S: Scalar>(
    copilot: &Copilot<S>,
    pilot: &Pilot<S>,
    data: &[Example],
    cfg: &FusionConfig,
) -> Result<TransferReport> {
    copilot.config().check_pilot(pilot.config())?;
    let pilot_only = evaluate(pilot, None, data, cfg)?;
    let fused = evaluate(pilot, Some(copilot), data, cfg)?;
    Ok(TransferReport {
        pilot_only,
        fused,
        lambda: cfg.lambda,
    })
}

pub fn write_transfer_csv(path: &Path, report: &TransferReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let body = format!(
        "setting,lambda,examples,exact_match,token_accuracy\npilot_only,0,{},{:.6},{:.6}\nfused,{},{},{:.6},{:.6}\n",
        report.pilot_only.examples,
        report.pilot_only.exact_match,
        report.pilot_only.token_accuracy,
        report.lambda,
        report.fused.examples,
        report.fused.exact_match,
        report.fused.token_accuracy
    );
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectify_examples() {
        let p = [0.7f64, 0.3];
        assert_eq!(rectify(&p, &[-0.2, 0.2], 0.0).unwrap(), p.to_vec());
        let r = rectify(&p, &[-0.2, 0.2], 1.0).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15 && (r[1] - 0.5).abs() < 1e-15);
        assert!(rectify(&p, &[0.1], 1.0).is_err());
        assert!(rectify(&p, &[0.1, 0.1], -1.0).is_err());
    }

    #[test]
    fn greedy_ties_and_non_finite() {
        assert_eq!(greedy_pick(&[0.1f64, 0.9, 0.9]).unwrap(), 1);
        assert_eq!(greedy_pick(&[f64::NAN, -3.0, f64::INFINITY]).unwrap(), 1);
        assert!(greedy_pick(&[f64::NAN, f64::INFINITY]).is_err());
        assert_eq!(greedy_pick(&[0.0f32, 0.0, 1.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn one_hot_under_beam() {
        let c = beam_candidates(&[0.0], &[vec![0.0f64, 0.0, 1.0]], 1).unwrap();
        assert_eq!(c[0].token, 2);
    }

    /// Beam search over a table where scores depend on the previous token,
    /// against enumeration of every path.
    #[test]
    fn beam_matches_enumeration() {
        // table[step][prev][tok]
        let table = [
            [[0.6, 0.4], [0.6, 0.4]],
            [[0.45, 0.55], [0.9, 0.1]],
            [[0.5, 0.5], [0.2, 0.8]],
        ];
        let lg = |x: f64| x.max(BEAM_SCORE_FLOOR).ln();
        let mut paths: Vec<(Vec<usize>, f64)> = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let s = lg(table[0][0][a]) + lg(table[1][a][b]) + lg(table[2][b][c]);
                    paths.push((vec![a, b, c], s));
                }
            }
        }
        paths.sort_by(|x, y| y.1.total_cmp(&x.1));

        let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
        for step in 0..3 {
            let totals: Vec<f64> = beams.iter().map(|b| b.1).collect();
            let scores: Vec<Vec<f64>> = beams
                .iter()
                .map(|b| table[step][*b.0.last().unwrap_or(&0)].to_vec())
                .collect();
            let cands = beam_candidates(&totals, &scores, 4).unwrap();
            beams = cands
                .iter()
                .map(|c| {
                    let mut t = beams[c.beam].0.clone();
                    t.push(c.token);
                    (t, c.score)
                })
                .collect();
        }
        for (b, p) in beams.iter().zip(&paths) {
            assert_eq!(b.0, p.0);
            assert!((b.1 - p.1).abs() < 1e-12);
        }
    }

    #[test]
    fn pilot_distribution_transforms() {
        let z = [1.0f64, 2.0, 3.0, 0.5];
        let base = pilot_distribution(&z, &FusionConfig::default()).unwrap();
        assert_eq!(base, softmax(&z).unwrap());
        let k2 = pilot_distribution(&z, &FusionConfig { top_k: 2, ..Default::default() }).unwrap();
        assert_eq!(k2[0], 0.0);
        assert_eq!(k2[3], 0.0);
        assert!((k2.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = pilot_distribution(&z, &FusionConfig { top_p: 0.5, ..Default::default() }).unwrap();
        assert_eq!(p.iter().filter(|&&x| x > 0.0).count(), 1);
        let hot = pilot_distribution(&z, &FusionConfig { temperature: 0.1, ..Default::default() }).unwrap();
        assert!(hot[2] > base[2]);
    }
}
