//! Monte Carlo check of the rectification bound on a scalar synthetic
//! ensemble, plus summaries of recorded decode-time shifts.
//!
//! The pilot draws `p_hat = p + b_P + N(0, v_P)`. The copilot draws
//! `f = (p - p_hat) + b_C + N(0, v_C)`, so its residual `p - p_hat - f` has
//! mean `-b_C` and variance `v_C`.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal as NormalCdf};

use crate::error::{Error, Result};
use crate::inference::StepRecord;
use crate::kv::KvMap;

pub const BOOTSTRAP_RESAMPLES: usize = 200;
pub const MIN_SAMPLES: usize = 1000;
/// Largest tolerated fraction of clipped pilot draws.
pub const MAX_CLIP_RATE: f64 = 1e-3;
/// A grid point passes when the MSE reduction exceeds this many standard errors.
pub const PASS_SIGMAS: f64 = 3.0;

/// Outcome of evaluating the bound.
#[derive(Debug, Clone, PartialEq)]
pub enum Lambda0 {
    Bound(f64),
    PreconditionsUnmet(String),
}

impl Lambda0 {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Bound(v) => Some(*v),
            Self::PreconditionsUnmet(_) => None,
        }
    }
}

impl fmt::Display for Lambda0 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bound(v) => write!(f, "{v}"),
            Self::PreconditionsUnmet(why) => write!(f, "preconditions unmet: {why}"),
        }
    }
}

/// `min{1, 2s(s - eps_c) / ((s - eps_c)^2 + sigma_c^2)}` with `s = sqrt(eps_p^2 + sigma_p^2)`.
pub fn lambda0(eps_p: f64, sigma_p: f64, eps_c: f64, sigma_c: f64) -> Lambda0 {
    let args = [eps_p, sigma_p, eps_c, sigma_c];
    if args.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Lambda0::PreconditionsUnmet(format!("moments must be finite and >= 0, got {args:?}"));
    }
    if eps_p <= 0.0 {
        return Lambda0::PreconditionsUnmet("pilot bias is zero".into());
    }
    let s = eps_p.hypot(sigma_p);
    let gap = s - eps_c;
    if gap <= 0.0 {
        return Lambda0::PreconditionsUnmet(format!(
            "copilot bias {eps_c} is not below the pilot's total error {s}"
        ));
    }
    let ratio = 2.0 * s * gap / (gap * gap + sigma_c * sigma_c);
    Lambda0::Bound(ratio.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticEnsembleSpec {
    pub p: f64,
    pub bias_pilot: f64,
    pub var_pilot: f64,
    pub bias_copilot: f64,
    pub var_copilot: f64,
    pub samples: usize,
    pub seed: u64,
    /// Clip pilot draws into `[0, 1]`.
    pub clip: bool,
}

impl Default for SyntheticEnsembleSpec {
    fn default() -> Self {
        Self {
            p: 0.5,
            bias_pilot: 0.3,
            var_pilot: 0.16,
            bias_copilot: 0.2,
            var_copilot: 0.01,
            samples: 100_000,
            seed: 0,
            clip: false,
        }
    }
}

impl SyntheticEnsembleSpec {
    /// Expected fraction of pilot draws outside `[0, 1]`.
    pub fn clip_rate(&self) -> f64 {
        if self.var_pilot == 0.0 {
            let m = self.p + self.bias_pilot;
            return if (0.0..=1.0).contains(&m) { 0.0 } else { 1.0 };
        }
        let n = NormalCdf::new(self.p + self.bias_pilot, self.var_pilot.sqrt()).expect("positive std");
        n.cdf(0.0) + (1.0 - n.cdf(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        for (name, v) in [("var_pilot", self.var_pilot), ("var_copilot", self.var_copilot)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.bias_pilot.is_finite() && self.bias_copilot.is_finite()) {
            return Err(Error::Config("biases must be finite".into()));
        }
        if self.samples < MIN_SAMPLES {
            return Err(Error::Config(format!(
                "need at least {MIN_SAMPLES} samples, got {}",
                self.samples
            )));
        }
        if self.clip && self.clip_rate() > MAX_CLIP_RATE {
            return Err(Error::Config(format!(
                "clipping would touch {:.3}% of pilot draws (limit {}%); lower var_pilot or bias_pilot, or set clip=false",
                100.0 * self.clip_rate(),
                100.0 * MAX_CLIP_RATE
            )));
        }
        Ok(())
    }

    /// Spec whose analytic moments are the given ones.
    pub fn from_moments(eps_p: f64, sigma_p: f64, eps_c: f64, sigma_c: f64) -> Self {
        Self {
            bias_pilot: eps_p,
            var_pilot: sigma_p * sigma_p,
            bias_copilot: eps_c,
            var_copilot: sigma_c * sigma_c,
            ..Self::default()
        }
    }

    /// `(eps_p, sigma_p, eps_c, sigma_c)` implied by the parameters, ignoring clipping.
    pub fn analytic_moments(&self) -> [f64; 4] {
        [
            self.bias_pilot.abs(),
            self.var_pilot.sqrt(),
            self.bias_copilot.abs(),
            self.var_copilot.sqrt(),
        ]
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("p", self.p);
        m.insert("bias_pilot", self.bias_pilot);
        m.insert("var_pilot", self.var_pilot);
        m.insert("bias_copilot", self.bias_copilot);
        m.insert("var_copilot", self.var_copilot);
        m.insert("samples", self.samples);
        m.insert("seed", self.seed);
        m.insert("clip", self.clip);
        m
    }

    /// Missing keys take their defaults; unknown keys are rejected.
    pub fn from_kv(mut m: KvMap) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            p: m.take_or("p", d.p)?,
            bias_pilot: m.take_or("bias_pilot", d.bias_pilot)?,
            var_pilot: m.take_or("var_pilot", d.var_pilot)?,
            bias_copilot: m.take_or("bias_copilot", d.bias_copilot)?,
            var_copilot: m.take_or("var_copilot", d.var_copilot)?,
            samples: m.take_or("samples", d.samples)?,
            seed: m.take_or("seed", d.seed)?,
            clip: m.take_or("clip", d.clip)?,
        };
        m.finish()?;
        s.validate()?;
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(KvMap::parse(&text)?)
    }
}

/// Paired draws of one ensemble: `(p_hat, f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSample {
    pub p: f64,
    pub p_hat: Vec<f64>,
    pub f: Vec<f64>,
    pub clipped: usize,
}

pub fn draw_ensemble(spec: &SyntheticEnsembleSpec, seed: u64) -> Result<EnsembleSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pilot = Normal::new(spec.p + spec.bias_pilot, spec.var_pilot.sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(spec.bias_copilot, spec.var_copilot.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let mut p_hat = Vec::with_capacity(spec.samples);
    let mut f = Vec::with_capacity(spec.samples);
    let mut clipped = 0;
    for _ in 0..spec.samples {
        let mut ph: f64 = pilot.sample(&mut rng);
        if spec.clip && !(0.0..=1.0).contains(&ph) {
            ph = ph.clamp(0.0, 1.0);
            clipped += 1;
        }
        p_hat.push(ph);
        f.push(spec.p - ph + noise.sample(&mut rng));
    }
    Ok(EnsembleSample {
        p: spec.p,
        p_hat,
        f,
        clipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEstimates {
    pub eps_p2: f64,
    pub sigma_p2: f64,
    pub eps_c2: f64,
    pub sigma_c2: f64,
    /// Bootstrap standard errors in the same order.
    pub stderr: [f64; 4],
    /// `E[(p - p_hat)^2]` and its standard error.
    pub pilot_mse: f64,
    pub pilot_mse_se: f64,
    /// `E[(p - p_hat - f)^2]` and its standard error.
    pub residual_mse: f64,
    pub residual_mse_se: f64,
    pub samples: usize,
    pub clip_rate: f64,
}

impl MomentEstimates {
    pub fn lambda0(&self) -> Lambda0 {
        lambda0(
            self.eps_p2.sqrt(),
            self.sigma_p2.sqrt(),
            self.eps_c2.sqrt(),
            self.sigma_c2.sqrt(),
        )
    }
}

/// Squared mean, biased variance and mean square of `x` at the given indices.
fn stats(x: &[f64], idx: Option<&[usize]>) -> (f64, f64, f64) {
    let n = idx.map_or(x.len(), |i| i.len()) as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    let mut acc = |v: f64| {
        s += v;
        s2 += v * v;
    };
    match idx {
        Some(ix) => ix.iter().for_each(|&i| acc(x[i])),
        None => x.iter().for_each(|&v| acc(v)),
    }
    let mean = s / n;
    let ms = s2 / n;
    (mean * mean, (ms - mean * mean).max(0.0), ms)
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn bootstrap_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Plug-in moments from arbitrary paired draws, with bootstrap errors.
pub fn moments_from_samples(p: &[f64], p_hat: &[f64], f: &[f64], seed: u64) -> Result<MomentEstimates> {
    let n = p_hat.len();
    if n < 2 || p.len() != n || f.len() != n {
        return Err(Error::InvalidArgument(format!(
            "need matching non-trivial samples, got {}, {}, {}",
            p.len(),
            n,
            f.len()
        )));
    }
    let r: Vec<f64> = p.iter().zip(p_hat).map(|(a, b)| a - b).collect();
    let e: Vec<f64> = r.iter().zip(f).map(|(a, b)| a - b).collect();
    let (ep, sp, mp) = stats(&r, None);
    let (ec, sc, mc) = stats(&e, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut boot: Vec<[f64; 6]> = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let idx = bootstrap_indices(n, &mut rng);
        let (a, b, c) = stats(&r, Some(&idx));
        let (d, e2, g) = stats(&e, Some(&idx));
        boot.push([a, b, d, e2, c, g]);
    }
    let se = |k: usize| std_dev(&boot.iter().map(|b| b[k]).collect::<Vec<_>>());
    Ok(MomentEstimates {
        eps_p2: ep,
        sigma_p2: sp,
        eps_c2: ec,
        sigma_c2: sc,
        stderr: [se(0), se(1), se(2), se(3)],
        pilot_mse: mp,
        pilot_mse_se: se(4),
        residual_mse: mc,
        residual_mse_se: se(5),
        samples: n,
        clip_rate: 0.0,
    })
}

pub fn estimate_moments(spec: &SyntheticEnsembleSpec) -> Result<MomentEstimates> {
    let s = draw_ensemble(spec, spec.seed)?;
    let p = vec![s.p; s.p_hat.len()];
    let mut m = moments_from_samples(&p, &s.p_hat, &s.f, spec.seed)?;
    m.clip_rate = s.clipped as f64 / spec.samples as f64;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyRow {
    pub lambda: f64,
    pub mse_fused: f64,
    pub mse_pilot: f64,
    /// `mse_pilot - mse_fused`; positive means rectification helped.
    pub delta: f64,
    pub stderr: f64,
    pub pass: bool,
    /// Whether `lambda` lies in `(0, lambda0)`, where the bound applies.
    pub covered: bool,
    pub clip_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub moments: MomentEstimates,
    pub lambda0: Lambda0,
    pub rows: Vec<VerifyRow>,
}

impl TheoremReport {
    /// Every covered grid point passed. Points outside the bound are reported only.
    pub fn holds(&self) -> bool {
        self.lambda0.value().is_some() && self.rows.iter().filter(|r| r.covered).all(|r| r.pass)
    }
}

fn verify_point(spec: &SyntheticEnsembleSpec, lambda: f64, seed: u64, bound: Option<f64>) -> Result<VerifyRow> {
    let s = draw_ensemble(spec, seed)?;
    let n = s.p_hat.len();
    // per-sample reduction in squared error
    let gain: Vec<f64> = s
        .p_hat
        .iter()
        .zip(&s.f)
        .map(|(&ph, &f)| {
            let fused = ph + lambda * f;
            (s.p - ph).powi(2) - (s.p - fused).powi(2)
        })
        .collect();
    let mse_pilot = s.p_hat.iter().map(|&ph| (s.p - ph).powi(2)).sum::<f64>() / n as f64;
    let mse_fused = s
        .p_hat
        .iter()
        .zip(&s.f)
        .map(|(&ph, &f)| (s.p - (ph + lambda * f)).powi(2))
        .sum::<f64>()
        / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx = bootstrap_indices(n, &mut rng);
            idx.iter().map(|&i| gain[i]).sum::<f64>() / n as f64
        })
        .collect();
    let stderr = std_dev(&means);
    let delta = mse_pilot - mse_fused;
    Ok(VerifyRow {
        lambda,
        mse_fused,
        mse_pilot,
        delta,
        stderr,
        pass: delta > PASS_SIGMAS * stderr,
        covered: bound.is_some_and(|b| lambda > 0.0 && lambda < b),
        clip_rate: s.clipped as f64 / n as f64,
    })
}

/// Runs every grid point on its own draw (seed = spec seed + index).
pub fn verify_theorem(spec: &SyntheticEnsembleSpec, grid: &[f64]) -> Result<TheoremReport> {
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::InvalidArgument(format!("lambda grid value {bad} is not >= 0")));
    }
    let moments = estimate_moments(spec)?;
    let l0 = moments.lambda0();
    let bound = l0.value();
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &l)| verify_point(spec, l, spec.seed.wrapping_add(i as u64), bound))
        .collect::<Result<Vec<_>>>()?;
    Ok(TheoremReport {
        moments,
        lambda0: l0,
        rows,
    })
}

pub fn report_csv(report: &TheoremReport) -> String {
    let l0 = report.lambda0.value().map_or("unmet".to_string(), |v| v.to_string());
    let mut out = String::from("lambda,mse_fused,mse_pilot,delta,stderr,pass,covered,lambda0,clip_rate\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{},{},{},{}\n",
            r.lambda, r.mse_fused, r.mse_pilot, r.delta, r.stderr, r.pass, r.covered, l0, r.clip_rate
        ));
    }
    out
}

/// Distribution of `|p_tilde - p_hat|` over recorded decode steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftStats {
    /// Rows per step index: `(step, count, mean, p50, p90, p99, max)`.
    pub per_step: Vec<StepShift>,
    pub overall: StepShift,
    /// `(lower edge, count)` for equal-width bins over `[0, max]`.
    pub histogram: Vec<(f64, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepShift {
    pub step: Option<usize>,
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

/// Nearest-rank percentile of sorted data: the smallest value with at least
/// `q` of the mass at or below it.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn summarize(step: Option<usize>, mut v: Vec<f64>) -> StepShift {
    v.sort_by(f64::total_cmp);
    StepShift {
        step,
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: percentile(&v, 0.5),
        p90: percentile(&v, 0.9),
        p99: percentile(&v, 0.99),
        max: *v.last().expect("non-empty"),
    }
}

/// `records[g]` holds the steps of generation `g`.
pub fn logits_shift_stats(records: &[Vec<StepRecord>], bins: usize) -> Result<ShiftStats> {
    let mut by_step: Vec<Vec<f64>> = Vec::new();
    for gen in records {
        for (i, r) in gen.iter().enumerate() {
            if by_step.len() <= i {
                by_step.push(Vec::new());
            }
            by_step[i].extend(r.fused.iter().zip(&r.p_hat).map(|(a, b)| (a - b).abs()));
        }
    }
    let all: Vec<f64> = by_step.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::InvalidArgument("no generation records to summarize".into()));
    }
    let bins = bins.max(1);
    let overall = summarize(None, all.clone());
    let width = if overall.max > 0.0 { overall.max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in &all {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    Ok(ShiftStats {
        per_step: by_step
            .into_iter()
            .enumerate()
            .map(|(i, v)| summarize(Some(i), v))
            .collect(),
        overall,
        histogram: counts.into_iter().enumerate().map(|(i, c)| (i as f64 * width, c)).collect(),
    })
}

pub fn shift_percentiles_csv(s: &ShiftStats) -> String {
    let mut out = String::from("step,count,mean,p50,p90,p99,max\n");
    for r in s.per_step.iter().chain(std::iter::once(&s.overall)) {
        let step = r.step.map_or("all".to_string(), |i| i.to_string());
        out.push_str(&format!(
            "{step},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.count, r.mean, r.p50, r.p90, r.p99, r.max
        ));
    }
    out
}

pub fn shift_histogram_csv(s: &ShiftStats) -> String {
    let mut out = String::from("bin_start,count\n");
    for (edge, c) in &s.histogram {
        out.push_str(&format!("{edge:.9},{c}\n"));
    }
    out
}
