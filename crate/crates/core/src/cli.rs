//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::copilot::Copilot;
use crate::error::{Error, Result};
use crate::inference::{
    evaluate, generate_fused, lambda_sweep, transfer_eval, write_sweep_csv, write_transfer_csv,
    FusionConfig, StepRecord,
};
use crate::kv::{parse_list, KvMap};
use crate::numerics::{softmax, Tensor};
use crate::pilot::Pilot;
use crate::tasks::{generate_dataset, read_dataset, write_dataset, TokenSequence};
use crate::theorem_lab::{
    logits_shift_stats, report_csv, shift_histogram_csv, shift_percentiles_csv, verify_theorem,
    SyntheticEnsembleSpec,
};
use crate::training::{train_joint, RunOutput};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Grid used by `eval` when no `--lambda-grid` is given.
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.1, 0.3, 0.5, 0.8, 1.0];

#[derive(Parser, Debug)]
#[command(name = "tcopilot", version, about = "Pilot/Copilot training, fused decoding and the rectification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Jointly train a pilot and copilot into a run directory.
    Train(TrainArgs),
    /// Fused generation for every prompt in a file, as JSON lines.
    Generate(GenerateArgs),
    /// Exact match and token accuracy, optionally over a lambda grid.
    Eval(EvalArgs),
    /// Pair a copilot with an independently trained pilot.
    Transfer(TransferArgs),
    /// Monte Carlo check of the rectification bound on a synthetic ensemble.
    VerifyTheorem(VerifyArgs),
    /// Logit-lens projections and correction-shift statistics.
    Inspect(InspectArgs),
    /// Summarise a spilled mistake log.
    InspectLog(InspectLogArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Rebuild the configuration from an earlier run's manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Training pairs (tab-separated); generated from the task keys if absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct FusionArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = ["greedy", "beam"])]
    decode: Option<String>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    pilot: PathBuf,
    /// Omit for pilot-only generation.
    #[arg(long)]
    copilot: Option<PathBuf>,
    /// One prompt per line, as space-separated token ids.
    #[arg(long)]
    prompt_file: PathBuf,
    /// Output JSON lines; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-step (p_hat, f, p_tilde) records as JSON lines.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    pilot: PathBuf,
    #[arg(long)]
    copilot: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated lambdas; writes `sweep.csv` including lambda=0.
    #[arg(long, num_args = 0..=1, default_missing_value = "0.1,0.3,0.5,0.8,1.0")]
    lambda_grid: Option<String>,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    /// Independently trained pilot.
    #[arg(long)]
    pilot: PathBuf,
    #[arg(long)]
    copilot: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "runs/transfer")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Ensemble spec (key=value); defaults if absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "0.1,0.3,0.5,0.8")]
    lambdas: String,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV output; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    pilot: PathBuf,
    #[arg(long)]
    copilot: Option<PathBuf>,
    #[arg(long)]
    prompt_file: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value = "runs/inspect")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectLogArgs {
    /// File written by `train` as `mistake_log.ckpt`.
    #[arg(long)]
    log: PathBuf,
    /// CSV output; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Transfer(a) => transfer(a),
        Command::VerifyTheorem(a) => verify(a),
        Command::Inspect(a) => inspect(a),
        Command::InspectLog(a) => inspect_log(a),
    }
}

fn overrides(c: &ConfigArgs) -> Result<KvMap> {
    let mut m = KvMap::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        m.insert(k.trim(), v.trim());
    }
    Ok(m)
}

fn fusion_overrides(m: &mut KvMap, f: &FusionArgs) {
    if let Some(v) = f.lambda {
        m.insert("lambda", v);
    }
    if let Some(v) = &f.decode {
        m.insert("decoding", v);
    }
    if let Some(v) = f.beam_width {
        m.insert("beam_width", v);
    }
    if let Some(v) = f.max_new_tokens {
        m.insert("max_new_tokens", v);
    }
    if let Some(v) = f.temperature {
        m.insert("temperature", v);
    }
}

fn load_config(c: &ConfigArgs, f: Option<&FusionArgs>) -> Result<RunConfig> {
    let mut m = overrides(c)?;
    if let Some(f) = f {
        fusion_overrides(&mut m, f);
    }
    RunConfig::load(c.config.as_deref(), &m)
}

fn load_models(pilot: &Path, copilot: Option<&Path>) -> Result<(Pilot<f32>, Option<Copilot<f32>>)> {
    let p = Pilot::<f32>::load(pilot)?;
    let c = match copilot {
        Some(path) => {
            let c = Copilot::<f32>::load(path)?;
            c.config().check_pilot(p.config())?;
            Some(c)
        }
        None => None,
    };
    Ok((p, c))
}

fn read_prompts(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.parse::<TokenSequence>())
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        if !d.as_os_str().is_empty() {
            create_dir(d)?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| Error::io(Path::new("<stdout>"), e))
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut m = overrides(&a.cfg)?;
    if let Some(s) = a.seed {
        m.insert("seed", s);
    }
    if let Some(r) = a.rounds {
        m.insert("rounds", r);
    }
    let cfg = match &a.manifest {
        Some(path) => {
            let mut base = RunConfig::from_manifest(path)?.to_kv();
            base.merge(&m);
            RunConfig::from_kv(base)?
        }
        None => RunConfig::load(a.cfg.config.as_deref(), &m)?,
    };
    create_dir(&a.out)?;
    let (train_set, heldout) = match &a.dataset {
        Some(p) => (read_dataset(p)?, Vec::new()),
        None => generate_dataset(&cfg.task)?,
    };
    write_dataset(&a.out.join("train.tsv"), &train_set)?;
    if !heldout.is_empty() {
        write_dataset(&a.out.join("heldout.tsv"), &heldout)?;
    }
    let kv = cfg.to_kv();
    let outcome = train_joint::<f32>(
        &cfg.pilot,
        &cfg.copilot,
        &cfg.training,
        &train_set,
        Some(RunOutput { dir: &a.out, config: &kv }),
    )?;
    outcome.log.spill(&a.out.join("mistake_log.ckpt"))?;
    let last = outcome.metrics.last();
    println!(
        "trained {} rounds into {} (final pilot loss {})",
        cfg.training.rounds,
        a.out.display(),
        last.map_or("n/a".to_string(), |m| format!("{:.4}", m.pilot_loss))
    );
    Ok(())
}

#[derive(Serialize)]
struct GenerationLine {
    prompt: String,
    output: String,
    termination: String,
    steps: usize,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Some(&a.fusion))?;
    let (pilot, copilot) = load_models(&a.pilot, a.copilot.as_deref())?;
    let fusion = FusionConfig {
        keep_records: a.records.is_some(),
        ..cfg.fusion
    };
    let mut lines = String::new();
    let mut recs = String::new();
    for prompt in read_prompts(&a.prompt_file)? {
        let r = generate_fused(&pilot, copilot.as_ref(), &prompt, &fusion)?;
        let line = GenerationLine {
            prompt: prompt.to_string(),
            output: r.tokens.to_string(),
            termination: r.termination.to_string(),
            steps: r.tokens.len(),
        };
        lines.push_str(&serde_json::to_string(&line).expect("serialize"));
        lines.push('\n');
        if a.records.is_some() {
            recs.push_str(&serde_json::to_string(&r.records).expect("serialize"));
            recs.push('\n');
        }
    }
    if let Some(p) = &a.records {
        write_file(p, &recs)?;
    }
    emit(a.out.as_deref(), &lines)
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Some(&a.fusion))?;
    let (pilot, copilot) = load_models(&a.pilot, a.copilot.as_deref())?;
    let data = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    match &a.lambda_grid {
        Some(grid) => {
            let copilot = copilot.ok_or_else(|| Error::Config("--lambda-grid needs --copilot".into()))?;
            let grid: Vec<f64> = parse_list(grid)?;
            let rows = lambda_sweep(&pilot, &copilot, &data, &grid, &cfg.fusion)?;
            let path = a.out.join("sweep.csv");
            write_sweep_csv(&path, &rows)?;
            for r in &rows {
                println!("lambda {} exact_match {:.4} token_accuracy {:.4}", r.lambda, r.exact_match, r.token_accuracy);
            }
        }
        None => {
            let r = evaluate(&pilot, copilot.as_ref(), &data, &cfg.fusion)?;
            let path = a.out.join("eval.json");
            write_file(&path, &serde_json::to_string_pretty(&r).expect("serialize"))?;
            println!("exact_match {:.4} token_accuracy {:.4}", r.exact_match, r.token_accuracy);
        }
    }
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Some(&a.fusion))?;
    let pilot = Pilot::<f32>::load(&a.pilot)?;
    let copilot = Copilot::<f32>::load(&a.copilot)?;
    let data = read_dataset(&a.dataset)?;
    let r = transfer_eval(&copilot, &pilot, &data, &cfg.fusion)?;
    create_dir(&a.out)?;
    write_transfer_csv(&a.out.join("transfer.csv"), &r)?;
    println!(
        "pilot-only exact_match {:.4}, fused exact_match {:.4} (lambda {})",
        r.pilot_only.exact_match, r.fused.exact_match, r.lambda
    );
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticEnsembleSpec::read(p)?,
        None => SyntheticEnsembleSpec::default(),
    };
    if let Some(n) = a.samples {
        spec.samples = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let grid: Vec<f64> = parse_list(&a.lambdas)?;
    let report = verify_theorem(&spec, &grid)?;
    emit(a.out.as_deref(), &report_csv(&report))?;
    eprintln!("lambda0 {}", report.lambda0);
    Ok(())
}

/// Long-format logit-lens table: one row per (prompt, layer, position, token).
fn lens_csv(rows: &mut String, prompt: usize, lens: &Tensor<f32>) -> Result<()> {
    let (layers, n, v) = (lens.shape()[0], lens.shape()[1], lens.shape()[2]);
    for l in 0..layers {
        for i in 0..n {
            let z = &lens.data()[(l * n + i) * v..(l * n + i + 1) * v];
            let p = softmax(z)?;
            for t in 0..v {
                rows.push_str(&format!("{prompt},{l},{i},{t},{},{}\n", z[t], p[t]));
            }
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let cfg = load_config(&a.cfg, Some(&a.fusion))?;
    let (pilot, copilot) = load_models(&a.pilot, a.copilot.as_deref())?;
    let fusion = FusionConfig {
        keep_records: true,
        ..cfg.fusion
    };
    create_dir(&a.out)?;
    let mut lens = String::from("prompt,layer,position,token,logit,prob\n");
    let mut records: Vec<Vec<StepRecord>> = Vec::new();
    for (k, prompt) in read_prompts(&a.prompt_file)?.iter().enumerate() {
        let r = generate_fused(&pilot, copilot.as_ref(), prompt, &fusion)?;
        let trace = pilot.forward(prompt.ids(), &r.tokens.ids()[..r.tokens.len().saturating_sub(1)])?;
        lens_csv(&mut lens, k, &pilot.logit_lens(&trace)?)?;
        records.push(r.records);
    }
    write_file(&a.out.join("logit_lens.csv"), &lens)?;
    if copilot.is_some() {
        let stats = logits_shift_stats(&records, a.bins)?;
        write_file(&a.out.join("shift_percentiles.csv"), &shift_percentiles_csv(&stats))?;
        write_file(&a.out.join("shift_histogram.csv"), &shift_histogram_csv(&stats))?;
        println!(
            "mean |p_tilde - p_hat| {:.6}, p99 {:.6}",
            stats.overall.mean, stats.overall.p99
        );
    }
    Ok(())
}

fn inspect_log(a: InspectLogArgs) -> Result<()> {
    let (meta, set) = checkpoint::load::<f32>(&a.log)?;
    if meta.raw("kind") != Some("mistake_log") {
        return Err(Error::Config(format!("{} is not a mistake log", a.log.display())));
    }
    let mut rows: Vec<(String, usize, usize, f64, f64)> = Vec::new();
    for (path, t) in set.iter() {
        let Some(prefix) = path.strip_suffix(".discrepancies") else {
            continue;
        };
        let round = prefix.split('.').next().unwrap_or(prefix).trim_start_matches('r').to_string();
        let abs: f64 = t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / t.len().max(1) as f64;
        let sq: f64 = t.data().iter().map(|v| (*v as f64).powi(2)).sum();
        match rows.last_mut() {
            Some(r) if r.0 == round => {
                r.1 += 1;
                r.2 += t.rows();
                r.3 += abs;
                r.4 += sq;
            }
            _ => rows.push((round, 1, t.rows(), abs, sq)),
        }
    }
    let mut out = String::from("round,examples,tokens,mean_abs_discrepancy,mean_sq_norm_per_token\n");
    for (round, ex, tok, abs, sq) in &rows {
        out.push_str(&format!(
            "{},{ex},{tok},{:.6},{:.6}\n",
            round.parse::<u64>().unwrap_or(0),
            abs / *ex as f64,
            sq / *tok as f64
        ));
    }
    emit(a.out.as_deref(), &out)?;
    eprintln!(
        "{} entries, capacity {}",
        rows.len(),
        meta.raw("capacity").unwrap_or("unknown")
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["tcopilot", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run(["tcopilot", "train", "--no-such-flag"]), EXIT_CONFIG);
        assert_eq!(run(["tcopilot", "--help"]), EXIT_OK);
    }

    #[test]
    fn bad_config_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, "lambda=abc\n").unwrap();
        let out = dir.path().join("run");
        let code = run([
            "tcopilot",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn missing_checkpoint_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let prompts = dir.path().join("p.txt");
        fs::write(&prompts, "4 13 5 14\n").unwrap();
        let code = run([
            "tcopilot",
            "generate",
            "--pilot",
            dir.path().join("nope.ckpt").to_str().unwrap(),
            "--prompt-file",
            prompts.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }
}
