//! Experiment configuration, multi-seed execution, regret accounting, CSV
//! output and the `linpo` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    cfpo_run, depo_run, derive_hyperparams, hyperparams_theory, optimal_run, po_ablation_run,
    repo_run, uniform_baseline_run, Hyperparams, RunContext, RunOptions, RunRecord, Variant,
};
use crate::error::{Error, Result};
use crate::mdpcore::{
    gen_mixture, gen_tabular_onehot, optimal_policy_dp, policy_value, LinearMdp, LossNoise,
    PolicyTable,
};
use crate::rng::{stream, Purpose, RunSeed};
use crate::verify;

pub const CSV_HEADER: [&str; 11] = [
    "seed",
    "k",
    "value",
    "inst_regret",
    "cum_regret",
    "epoch",
    "e1",
    "e2",
    "max_abs_q",
    "rerr",
    "derr",
];

/// How the environment is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Mixture {
        d: usize,
        #[serde(rename = "H")]
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        seed: u64,
        #[serde(default)]
        loss_noise: LossNoise,
    },
    Tabular {
        #[serde(rename = "H")]
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        seed: u64,
        #[serde(default)]
        loss_noise: LossNoise,
    },
    File {
        path: PathBuf,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<LinearMdp> {
        match self {
            EnvSpec::Mixture {
                d,
                horizon,
                num_states,
                num_actions,
                seed,
                loss_noise,
            } => {
                let mut rng = stream(*seed, 0, Purpose::Environment);
                Ok(gen_mixture(*d, *num_states, *num_actions, *horizon, &mut rng)?
                    .with_loss_noise(*loss_noise))
            }
            EnvSpec::Tabular {
                horizon,
                num_states,
                num_actions,
                seed,
                loss_noise,
            } => {
                let mut rng = stream(*seed, 0, Purpose::Environment);
                Ok(gen_tabular_onehot(*num_states, *num_actions, *horizon, &mut rng)?
                    .with_loss_noise(*loss_noise))
            }
            EnvSpec::File { path } => LinearMdp::load(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunVariant {
    Cfpo,
    Repo,
    Depo,
    /// Single policy, indicator contraction, no bonus.
    PoAblation,
    Uniform,
    /// Plays the optimal policy (debugging).
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Bandit,
    Full,
    Aggregate,
}

/// Grid for the `sweep` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub variant: RunVariant,
    #[serde(rename = "K")]
    pub k: usize,
    pub delta: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Defaults to `aggregate` for depo and `bandit` otherwise.
    #[serde(default)]
    pub feedback: Option<Feedback>,
    /// Ensemble size override for repo.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub disable_perturbation: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

fn default_scale() -> f64 {
    1.0
}

fn default_num_seeds() -> usize {
    1
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn feedback(&self) -> Feedback {
        self.feedback.unwrap_or(match self.variant {
            RunVariant::Depo => Feedback::Aggregate,
            _ => Feedback::Bandit,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.num_seeds == 0 {
            return bad("num_seeds must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} must lie in (0, 1)", self.delta));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale = {} must be positive", self.scale));
        }
        if self.m == Some(0) {
            return bad("m must be at least 1".into());
        }
        let fb = self.feedback();
        match (self.variant, fb) {
            (RunVariant::Depo, Feedback::Aggregate) => {}
            (RunVariant::Depo, _) => return bad("depo requires aggregate feedback".into()),
            (_, Feedback::Aggregate) => {
                return bad("aggregate feedback is only supported by depo".into())
            }
            _ => {}
        }
        if let Some(grid) = &self.sweep {
            if grid.k.is_empty() || grid.scale.is_empty() {
                return bad("sweep grid must be non-empty".into());
            }
            if grid.k.contains(&0) || grid.scale.iter().any(|s| !(*s > 0.0)) {
                return bad("sweep K and scale values must be positive".into());
            }
        }
        Ok(())
    }

    /// Hyperparameters for this config on `mdp` (`None` for fixed-policy variants).
    pub fn hyperparams(&self, mdp: &LinearMdp) -> Result<Option<Hyperparams>> {
        let variant = match self.variant {
            RunVariant::Cfpo => Variant::Cfpo,
            RunVariant::Repo | RunVariant::PoAblation => Variant::Repo,
            RunVariant::Depo => Variant::Depo,
            RunVariant::Uniform | RunVariant::Optimal => return Ok(None),
        };
        let (d, hz, na) = (mdp.d(), mdp.horizon(), mdp.num_actions());
        let mut hp = hyperparams_theory(d, hz, self.k, na, self.delta, variant, self.scale)?;
        if self.feedback() == Feedback::Full {
            hp = derive_hyperparams(
                d, hz, self.k, na, self.delta, variant, self.scale, 0.0, hp.beta_p,
            )?;
        }
        if let Some(m) = self.m {
            let kf = self.k as f64;
            hp.m = m;
            let common = 3.0 * (d * hz) as f64 * (2.0 * kf).ln() / (kf * hp.beta_q * hp.beta_q);
            hp.eta_x = (common * (m as f64).ln()).sqrt();
        }
        hp.disable_perturbation = self.disable_perturbation;
        hp.validate()?;
        Ok(Some(hp))
    }
}

/// Per-seed records plus aggregate statistics.
#[derive(Debug, Clone)]
pub struct Report {
    pub config: ExperimentConfig,
    pub hyperparams: Option<Hyperparams>,
    pub v_star: f64,
    pub v_uniform: f64,
    pub records: Vec<RunRecord>,
}

impl Report {
    pub fn final_regrets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total_regret()).collect()
    }

    /// Mean and standard error of the final cumulative regret.
    pub fn regret_mean_stderr(&self) -> (f64, f64) {
        mean_stderr(&self.final_regrets())
    }

    pub fn mean_epochs(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().map(|r| r.epoch_count() as f64).sum::<f64>() / n
    }

    pub fn good_event_fraction(&self) -> f64 {
        let n = self.records.len().max(1) as f64;
        self.records.iter().filter(|r| r.good_event_always()).count() as f64 / n
    }
}

pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Builds the environment once, solves it, and runs every seed in parallel.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    run_experiment_with(config, RunOptions::default())
}

pub fn run_experiment_with(config: &ExperimentConfig, mut options: RunOptions) -> Result<Report> {
    config.validate()?;
    let mdp = config.env.build()?;
    let violations = mdp.validate();
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Error::Model(format!(
            "environment violates {} assumption(s): {}",
            violations.len(),
            list.join("; ")
        )));
    }
    let (pi_star, v_star) = optimal_policy_dp(&mdp)?;
    let v_uniform = policy_value(&mdp, &PolicyTable::uniform_for(&mdp))?;
    let hp = config.hyperparams(&mdp)?;
    options.full_information = config.feedback() == Feedback::Full;

    let records = (0..config.num_seeds as u64)
        .into_par_iter()
        .map(|i| {
            let ctx = RunContext {
                seed: RunSeed::new(config.base_seed, i),
                pi_star: &pi_star,
                v_star,
                options,
            };
            run_one(&mdp, config, hp.as_ref(), &ctx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        config: config.clone(),
        hyperparams: hp,
        v_star,
        v_uniform,
        records,
    })
}

fn run_one(
    mdp: &LinearMdp,
    config: &ExperimentConfig,
    hp: Option<&Hyperparams>,
    ctx: &RunContext,
) -> Result<RunRecord> {
    let k = config.k;
    let need = || hp.ok_or_else(|| Error::Config("missing hyperparameters".into()));
    match config.variant {
        RunVariant::Cfpo => cfpo_run(mdp, need()?, k, ctx),
        RunVariant::Repo => repo_run(mdp, need()?, k, ctx),
        RunVariant::Depo => depo_run(mdp, need()?, k, ctx),
        RunVariant::PoAblation => po_ablation_run(mdp, need()?, k, ctx),
        RunVariant::Uniform => uniform_baseline_run(mdp, k, ctx),
        RunVariant::Optimal => optimal_run(mdp, k, ctx),
    }
}

/// Prefix sums of the per-episode regrets `V^{π^k}(x1) − V*`.
pub fn cumulative_regret(record: &RunRecord) -> Vec<f64> {
    let mut acc = 0.0;
    record
        .rows
        .iter()
        .map(|r| {
            acc += r.inst_regret;
            acc
        })
        .collect()
}

/// Fixed 17-significant-digit rendering.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_csv_to<W: Write>(report: &Report, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for rec in &report.records {
        let seed = rec.seed_index.to_string();
        for r in &rec.rows {
            w.write_record([
                seed.as_str(),
                &r.k.to_string(),
                &fmt_real(r.value),
                &fmt_real(r.inst_regret),
                &fmt_real(r.cum_regret),
                &r.epoch.to_string(),
                fmt_bool(r.e1),
                fmt_bool(r.e2),
                &fmt_real(r.max_abs_q),
                &fmt_real(r.rerr),
                &fmt_real(r.derr),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}

pub fn write_csv(report: &Report, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(report, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// One row of `sweep` output.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub k: usize,
    pub scale: f64,
    pub mean_regret: f64,
    pub stderr_regret: f64,
    pub mean_epochs: f64,
    pub num_seeds: usize,
}

pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let grid = config.sweep.clone().unwrap_or(SweepGrid {
        k: vec![config.k],
        scale: vec![config.scale],
    });
    let mut cells = Vec::new();
    for &k in &grid.k {
        for &scale in &grid.scale {
            let cell_cfg = ExperimentConfig {
                k,
                scale,
                sweep: None,
                ..config.clone()
            };
            let report = run_experiment(&cell_cfg)?;
            let (mean, se) = report.regret_mean_stderr();
            cells.push(SweepCell {
                k,
                scale,
                mean_regret: mean,
                stderr_regret: se,
                mean_epochs: report.mean_epochs(),
                num_seeds: config.num_seeds,
            });
        }
    }
    Ok(cells)
}

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K", "scale", "mean_regret", "stderr_regret", "mean_epochs", "num_seeds"])?;
    for c in cells {
        w.write_record([
            c.k.to_string(),
            fmt_real(c.scale),
            fmt_real(c.mean_regret),
            fmt_real(c.stderr_regret),
            fmt_real(c.mean_epochs),
            c.num_seeds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
    Ok(())
}

#[derive(Parser, Debug)]
#[command(name = "linpo", about = "Policy optimization for finite linear MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment and write the per-episode CSV.
    Run {
        config: PathBuf,
        /// Output path (overrides the config; stdout if neither is set).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid over K and scale and write one summary row per cell.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical check suites.
    Verify {
        /// One of: all, deterministic, statistical, runtime, or a single check name.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Where to write the JSON report.
        #[arg(long, default_value = "verify_report.json")]
        report: PathBuf,
    },
    /// Print the environment described by a config as JSON.
    DumpEnv {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Entry point of the `linpo` binary; returns the process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn with_output<F>(path: Option<&Path>, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match path {
        Some(p) => {
            let file = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = std::io::BufWriter::new(file);
            f(&mut w)?;
            w.flush().map_err(|e| Error::io(p, e))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            let target = out.or_else(|| cfg.output.clone());
            with_output(target.as_deref(), |w| write_csv_to(&report, w))?;
            let (mean, se) = report.regret_mean_stderr();
            eprintln!(
                "seeds={} K={} V*={} mean_regret={} stderr={} mean_epochs={}",
                report.records.len(),
                cfg.k,
                fmt_real(report.v_star),
                fmt_real(mean),
                fmt_real(se),
                report.mean_epochs()
            );
            Ok(EXIT_OK)
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let cells = run_sweep(&cfg)?;
            let target = out.or_else(|| cfg.output.clone());
            with_output(target.as_deref(), |w| write_sweep_csv(&cells, w))?;
            Ok(EXIT_OK)
        }
        Command::Verify { suite, report } => {
            let results = verify::run_suite(&suite)?;
            verify::write_report(&results, &report)?;
            // A closed stdout (e.g. piped into `head`) must not change the exit code.
            let mut out = std::io::stdout().lock();
            for r in &results {
                let _ = writeln!(out, "{}", r.line());
            }
            let ok = results.iter().all(|r| r.passed);
            let _ = writeln!(
                out,
                "{} of {} checks passed; report written to {}",
                results.iter().filter(|r| r.passed).count(),
                results.len(),
                report.display()
            );
            Ok(if ok { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::DumpEnv { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mdp = cfg.env.build()?;
            let text = mdp.to_json()?;
            with_output(out.as_deref(), |w| {
                writeln!(w, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
            })?;
            Ok(EXIT_OK)
        }
    }
}
