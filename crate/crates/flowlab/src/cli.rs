//! Configuration, orchestration, seeding, and artifact persistence.
//!
//! One TOML file drives every subcommand; each subcommand reads the sections
//! it needs and ignores the rest. The key tree:
//!
//! ```text
//! seed = 7                      master seed, required (no entropy default)
//! out = "artifacts"             output directory (flag --out overrides)
//!
//! [mc]                          Monte Carlo layout
//! paths = 512                   default path budget M (>= 2)
//! reduction = "fixed-order"     or "parallel" (bit-identity only when fixed)
//! threads = 0                   0 = library default; --threads and the
//!                               FLOWLAB_THREADS env var override
//!
//! [model]                       single model (check, bel, oracle fallback)
//! kind = "ou"                   ou | gbm | langevin-tanh | mean-field
//! lambda = 1.0 ...              the variant's parameters
//!
//! [pair]                        coupled pair (decompose, moments, semigroup,
//! base = { kind = "ou", ... }   invariant); both on the same state space
//! perturbed = { kind = "ou", ... }
//!
//! [domain]
//! s = 0.0                       start time (default 0)
//! t = 2.0                       end time
//! x0 = [1.0]                    start state
//!
//! [mesh]
//! h = 0.03125                   fine integrator step
//! H = 0.25                      estimator block width; integer multiple of h
//!
//! [check]      n, scan_samples
//! [moments]    n, steps (fine steps when [mesh] is absent)
//! [bel]        mode = "gradient" | "hessian" | "hessian-split",
//!              observable, steps, paths, restart, phi, eig_floor
//! [semigroup]  observable, outer_paths, inner_paths, steps, quad_nodes,
//!              lhs_paths, phi, eig_floor
//! [invariant]  observable, horizon, time_nodes, outer_samples, inner_paths,
//!              steps_per_unit, burn_in, lambda_samples, phi, eig_floor
//! [decompose]  h_values (defaults to [mesh.H]), variance, variance_steps,
//!              variance_stride, quad_nodes, cross_nodes
//! [oracle]     model, n
//!
//! [experiment]                  run subcommand
//! name = "decay-rates"          discretization-bound | decay-rates |
//!                               uniform-difference | mean-field | perturbation
//! ...                           the named experiment's config fields; any
//!                               subset, the rest take documented defaults
//! ```
//!
//! Observables are named `coord:i`, `square:i`, `cos:i`, `norm2`, `const:c`.
//! The top-level seed is authoritative: it overwrites the seed field of every
//! study and experiment config. Exit codes: 0 on success, 2 when an
//! experiment verdict fails, 1 on configuration or runtime errors.
//! Experiment JSON artifacts are canonical: the wall-time field is written as
//! zero so repeated runs with one seed produce byte-identical files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::estimators::{
    bel_gradient, bel_hessian, bel_hessian_split, builtin_observable, flow_difference_moments,
    invariant_shift, semigroup_difference, BelStudy, InvariantStudy, PhiSpec, SemigroupStudy,
};
use crate::experiments::{
    run_decay_rates, run_discretization_bound, run_meanfield, run_perturbation,
    run_uniform_difference, DecayConfig, DiscretizationConfig, ExperimentResult, MeanFieldConfig,
    PerturbationConfig, UniformDifferenceConfig,
};
use crate::interpolation::{
    residual_convergence, skorohod_variance_1d, telescoping_decomposition, write_convergence_csv,
    ConvergenceRow, ConvergenceStudy, DecompositionReport, VarianceReport, VarianceStudy,
};
use crate::mc::{ExecCtx, Reduction};
use crate::model::{ModelPair, ModelSpec, CATALOG_NAMES};
use crate::paths::sample_brownian;
use crate::regularity::{condition_report, growth_params_for};
use crate::variance_oracle::{ou_skorohod_diagonal, LinearOracle};
use crate::{Error, Result};

/// Write one stdout line, ignoring a closed pipe (e.g. `flowlab ... | head`).
macro_rules! emitln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = out.write_fmt(format_args!($($arg)*)).and_then(|_| out.write_all(b"\n"));
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "flowlab",
    version,
    about = "Coupled diffusion flows, their variational processes, and the \
             forward-backward decomposition of flow differences, verified by Monte Carlo"
)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH", global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override (config key `seed`).
    #[arg(long, value_name = "N", global = true)]
    pub seed: Option<u64>,
    /// Output directory override (config key `out`).
    #[arg(long, value_name = "DIR", global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread override; the FLOWLAB_THREADS env var is the fallback.
    #[arg(long, value_name = "N", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Run the experiment named in [experiment]; write verdict JSON + CSV.
    Run,
    /// Emit the regularity condition report for [model].
    Check,
    /// Decompose the pair difference into T + S with residual convergence.
    Decompose,
    /// Coupled flow-difference moment for [pair] at [domain].
    Moments,
    /// Bismut-Elworthy-Li semigroup gradient or Hessian for [model].
    Bel,
    /// Both sides of the semigroup interpolation identity for [pair].
    Semigroup,
    /// Invariant-measure shift estimate for an ergodic [pair].
    Invariant,
    /// Closed-form linear-model oracle values for debugging.
    Oracle,
    /// List catalog models, schemes, experiments, and estimators.
    List,
}

/// Process entry point: parse, dispatch, and map outcomes to exit codes.
pub fn main() -> i32 {
    run_cli(std::env::args_os())
}

/// Testable entry point over an explicit argv.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

/// Run one subcommand; Ok(false) means an experiment verdict failed.
pub fn dispatch(cli: &Cli) -> Result<bool> {
    if matches!(cli.command, Command::List) {
        emitln!("{}", catalog_text().trim_end());
        return Ok(true);
    }
    let cfg = load_config(cli)?;
    let ctx = cfg.exec_ctx();
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;
    match cli.command {
        Command::Run => cmd_run(&cfg, ctx, &out_dir),
        Command::Check => cmd_check(&cfg, &out_dir).map(|_| true),
        Command::Decompose => cmd_decompose(&cfg, ctx, &out_dir).map(|_| true),
        Command::Moments => cmd_moments(&cfg, ctx, &out_dir).map(|_| true),
        Command::Bel => cmd_bel(&cfg, ctx, &out_dir).map(|_| true),
        Command::Semigroup => cmd_semigroup(&cfg, ctx, &out_dir).map(|_| true),
        Command::Invariant => cmd_invariant(&cfg, ctx, &out_dir).map(|_| true),
        Command::Oracle => cmd_oracle(&cfg, &out_dir).map(|_| true),
        Command::List => unreachable!("handled above"),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("config", "this subcommand needs --config PATH"))?;
    let text = std::fs::read_to_string(path)?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(threads) = resolve_threads(cli)? {
        cfg.mc.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_threads(cli: &Cli) -> Result<Option<usize>> {
    if let Some(t) = cli.threads {
        return Ok(Some(t));
    }
    match std::env::var("FLOWLAB_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::config("threads", format!("FLOWLAB_THREADS must be a thread count, got {v:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// The validated content of a run configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Required: a missing seed is a validation error, never an
    /// entropy default, because silent nondeterminism would invalidate every
    /// reproducibility guarantee downstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<CheckSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bel: Option<BelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semigroup: Option<SemigroupSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invariant: Option<InvariantSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompose: Option<DecomposeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentSpec>,
}

impl RunConfig {
    /// Enforce the cross-section invariants; errors carry the field path.
    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(Error::config(
                "seed",
                "a master seed is required; there is no entropy default",
            ));
        }
        if self.mc.paths < 2 {
            return Err(Error::config(
                "mc.paths",
                format!("need at least two paths, got {}", self.mc.paths),
            ));
        }
        if let Some(mesh) = &self.mesh {
            mesh.fine_factor()?;
        }
        if let Some(domain) = &self.domain {
            domain.validate()?;
        }
        if let Some(pair) = &self.pair {
            if pair.base.dim() != pair.perturbed.dim() {
                return Err(Error::config(
                    "pair.perturbed",
                    format!(
                        "pair dims differ: base {} vs perturbed {}",
                        pair.base.dim(),
                        pair.perturbed.dim()
                    ),
                ));
            }
            if let Some(domain) = &self.domain {
                if domain.x0.len() != pair.base.dim() {
                    return Err(Error::config(
                        "domain.x0",
                        format!("{} entries for a pair of dim {}", domain.x0.len(), pair.base.dim()),
                    ));
                }
            }
        }
        if let (Some(model), Some(domain)) = (&self.model, &self.domain) {
            if domain.x0.len() != model.dim() {
                return Err(Error::config(
                    "domain.x0",
                    format!("{} entries for a model of dim {}", domain.x0.len(), model.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("seed", "a master seed is required"))
    }

    pub fn exec_ctx(&self) -> ExecCtx {
        ExecCtx { threads: self.mc.threads, reduction: self.mc.reduction }
    }

    fn domain(&self) -> Result<&DomainSection> {
        self.domain
            .as_ref()
            .ok_or_else(|| Error::config("domain", "this subcommand needs a [domain] table"))
    }

    fn pair_specs(&self) -> Result<&PairSection> {
        self.pair
            .as_ref()
            .ok_or_else(|| Error::config("pair", "this subcommand needs a [pair] table"))
    }

    fn model_spec(&self) -> Result<&ModelSpec> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config("model", "this subcommand needs a [model] table"))
    }

    /// Fine step count on [s, t]: from [mesh] when present, else `fallback`.
    fn steps_for(&self, s: f64, t: f64, fallback: usize) -> Result<usize> {
        let Some(mesh) = &self.mesh else { return Ok(fallback) };
        let n = ((t - s) / mesh.h).round() as usize;
        if n == 0 || ((t - s) / n as f64 - mesh.h).abs() > 1e-9 * mesh.h {
            return Err(Error::config(
                "mesh.h",
                format!("horizon {} is not an integer multiple of h = {}", t - s, mesh.h),
            ));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    /// Default Monte Carlo path budget M.
    pub paths: usize,
    pub reduction: Reduction,
    /// Worker threads; 0 keeps the library default.
    pub threads: usize,
}

impl Default for McSection {
    fn default() -> Self {
        McSection { paths: 512, reduction: Reduction::FixedOrder, threads: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSection {
    pub base: ModelSpec,
    pub perturbed: ModelSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    #[serde(default)]
    pub s: f64,
    pub t: f64,
    pub x0: Vec<f64>,
}

impl DomainSection {
    fn validate(&self) -> Result<()> {
        if !(self.t > self.s) || !self.t.is_finite() || !self.s.is_finite() {
            return Err(Error::config(
                "domain.t",
                format!("need s < t, got s = {}, t = {}", self.s, self.t),
            ));
        }
        if self.x0.is_empty() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("domain.x0", "need a nonempty finite start state"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    /// Fine integrator step.
    pub h: f64,
    /// Estimator block width.
    #[serde(rename = "H")]
    pub big_h: f64,
}

impl MeshSection {
    /// H / h as an integer, or the `mesh.H` validation error.
    pub fn fine_factor(&self) -> Result<usize> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::config("mesh.h", format!("step must be positive, got {}", self.h)));
        }
        let ratio = self.big_h / self.h;
        let f = ratio.round();
        if f < 1.0 || (ratio - f).abs() > 1e-9 * ratio {
            return Err(Error::config(
                "mesh.H",
                format!("H = {} is not an integer multiple of h = {}", self.big_h, self.h),
            ));
        }
        Ok(f as usize)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    /// Moment order n of the report.
    pub n: u32,
    /// State-space samples of the contraction-rate scan.
    pub scan_samples: usize,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { n: 2, scan_samples: 256 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsSection {
    pub n: u32,
    /// Fine steps on [s, t] when no [mesh] table is given.
    pub steps: usize,
}

impl Default for MomentsSection {
    fn default() -> Self {
        MomentsSection { n: 2, steps: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BelMode {
    #[default]
    Gradient,
    Hessian,
    /// Second-order weight restarted at an interior time ([bel].restart).
    HessianSplit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BelSection {
    pub mode: BelMode,
    pub observable: String,
    /// Interior restart time for hessian-split mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restart: Option<f64>,
    pub steps: usize,
    /// Path budget; defaults to [mc].paths.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    pub phi: PhiSpec,
    pub eig_floor: f64,
}

impl Default for BelSection {
    fn default() -> Self {
        BelSection {
            mode: BelMode::Gradient,
            observable: "coord:0".into(),
            restart: None,
            steps: 256,
            paths: None,
            phi: PhiSpec::Linear,
            eig_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemigroupSection {
    pub observable: String,
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub steps: usize,
    pub quad_nodes: usize,
    pub lhs_paths: usize,
    pub phi: PhiSpec,
    pub eig_floor: f64,
}

impl Default for SemigroupSection {
    fn default() -> Self {
        let d = SemigroupStudy::default();
        SemigroupSection {
            observable: "square:0".into(),
            outer_paths: d.outer_paths,
            inner_paths: d.inner_paths,
            steps: d.steps,
            quad_nodes: d.quad_nodes,
            lhs_paths: d.lhs_paths,
            phi: d.phi,
            eig_floor: d.eig_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantSection {
    pub observable: String,
    pub horizon: f64,
    pub time_nodes: usize,
    pub outer_samples: usize,
    pub inner_paths: usize,
    pub steps_per_unit: usize,
    pub burn_in: f64,
    pub lambda_samples: usize,
    pub phi: PhiSpec,
    pub eig_floor: f64,
}

impl Default for InvariantSection {
    fn default() -> Self {
        let d = InvariantStudy::default();
        InvariantSection {
            observable: "coord:0".into(),
            horizon: d.horizon,
            time_nodes: d.time_nodes,
            outer_samples: d.outer_samples,
            inner_paths: d.inner_paths,
            steps_per_unit: d.steps_per_unit,
            burn_in: d.burn_in,
            lambda_samples: d.lambda_samples,
            phi: d.phi,
            eig_floor: d.eig_floor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeSection {
    /// Estimator widths of the convergence study; empty means [mesh.H] only.
    pub h_values: Vec<f64>,
    /// Also run the 1D Skorohod variance study (d = r = 1 pairs).
    pub variance: bool,
    pub variance_steps: usize,
    pub variance_stride: usize,
    pub quad_nodes: usize,
    pub cross_nodes: usize,
}

impl Default for DecomposeSection {
    fn default() -> Self {
        let v = VarianceStudy::default();
        DecomposeSection {
            h_values: Vec::new(),
            variance: false,
            variance_steps: v.fine_steps,
            variance_stride: v.stride,
            quad_nodes: v.quad_nodes,
            cross_nodes: v.cross_nodes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub model: ModelSpec,
    #[serde(default = "default_oracle_order")]
    pub n: u32,
}

fn default_oracle_order() -> u32 {
    2
}

/// The experiment table: `name` picks the study, the remaining keys fill its
/// config (any subset; defaults documented on each config type).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    DiscretizationBound(DiscretizationConfig),
    DecayRates(DecayConfig),
    UniformDifference(UniformDifferenceConfig),
    MeanField(MeanFieldConfig),
    Perturbation(PerturbationConfig),
}

impl ExperimentSpec {
    /// The top-level seed overwrites every experiment's own seed field.
    pub fn apply_seed(&mut self, seed: u64) {
        match self {
            ExperimentSpec::DiscretizationBound(c) => c.seed = seed,
            ExperimentSpec::DecayRates(c) => c.seed = seed,
            ExperimentSpec::UniformDifference(c) => c.seed = seed,
            ExperimentSpec::MeanField(c) => c.seed = seed,
            ExperimentSpec::Perturbation(c) => c.seed = seed,
        }
    }

    pub fn run(&self, ctx: ExecCtx) -> Result<ExperimentResult> {
        match self {
            ExperimentSpec::DiscretizationBound(c) => run_discretization_bound(c, ctx),
            ExperimentSpec::DecayRates(c) => run_decay_rates(c, ctx),
            ExperimentSpec::UniformDifference(c) => run_uniform_difference(c, ctx),
            ExperimentSpec::MeanField(c) => run_meanfield(c, ctx),
            ExperimentSpec::Perturbation(c) => run_perturbation(c, ctx),
        }
    }
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_artifact(dir, name, &text)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    emitln!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<bool> {
    let spec = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| Error::config("experiment", "the run subcommand needs an [experiment] table"))?;
    let mut spec = spec.clone();
    spec.apply_seed(cfg.master_seed()?);
    let result = spec.run(ctx)?;
    for v in &result.verdicts {
        emitln!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.criterion, v.detail);
    }
    let mut canonical = result.clone();
    canonical.wall_time_secs = 0.0;
    let json_path = write_json(out, &format!("{}.json", result.name), &canonical)?;
    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    let csv_text = String::from_utf8(csv).expect("csv output is utf-8");
    let csv_path = write_artifact(out, &format!("{}.csv", result.name), &csv_text)?;
    emitln!(
        "{}: {} in {:.1}s; wrote {} and {}",
        result.name,
        if result.passed { "pass" } else { "FAIL" },
        result.wall_time_secs,
        json_path.display(),
        csv_path.display()
    );
    Ok(result.passed)
}

fn cmd_check(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = cfg.model_spec()?.build();
    let section = cfg.check.unwrap_or_default();
    let report = condition_report(
        model.as_ref(),
        section.n,
        growth_params_for(model.as_ref()),
        section.scan_samples,
        cfg.master_seed()?,
    )?;
    print_json(&report)?;
    write_json(out, "check.json", &report)?;
    Ok(())
}

fn cmd_moments(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<()> {
    let specs = cfg.pair_specs()?;
    let domain = cfg.domain()?;
    let section = cfg.moments.unwrap_or_default();
    let base = specs.base.build();
    let perturbed = specs.perturbed.build();
    let pair = ModelPair::new(base.as_ref(), perturbed.as_ref())?;
    let steps = cfg.steps_for(domain.s, domain.t, section.steps)?;
    let estimate = flow_difference_moments(
        &pair,
        domain.s,
        domain.t,
        &domain.x0,
        section.n,
        steps,
        cfg.mc.paths,
        cfg.master_seed()?,
        ctx,
    )?;
    print_json(&estimate)?;
    write_json(out, "moments.json", &estimate)?;
    Ok(())
}

fn cmd_bel(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<()> {
    let model = cfg.model_spec()?.build();
    let domain = cfg.domain()?;
    let section = cfg.bel.clone().unwrap_or_default();
    section.phi.validate()?;
    let f = builtin_observable(&section.observable)?;
    let study = BelStudy {
        phi: section.phi,
        steps: section.steps,
        paths: section.paths.unwrap_or(cfg.mc.paths),
        eig_floor: section.eig_floor,
        seed: cfg.master_seed()?,
    };
    let (s, t, x) = (domain.s, domain.t, domain.x0.as_slice());
    let value = match section.mode {
        BelMode::Gradient => {
            let est = bel_gradient(model.as_ref(), f.as_ref(), s, t, x, &study, ctx)?;
            serde_json::json!({ "mode": "gradient", "estimate": est })
        }
        BelMode::Hessian => {
            let est = bel_hessian(model.as_ref(), f.as_ref(), s, t, x, &study, ctx)?;
            serde_json::json!({ "mode": "hessian", "estimate": est })
        }
        BelMode::HessianSplit => {
            let u = section.restart.ok_or_else(|| {
                Error::config("bel.restart", "hessian-split mode needs an interior restart time")
            })?;
            let est = bel_hessian_split(model.as_ref(), f.as_ref(), s, t, x, u, &study, ctx)?;
            serde_json::json!({ "mode": "hessian-split", "estimate": est })
        }
    };
    print_json(&value)?;
    write_json(out, "bel.json", &value)?;
    Ok(())
}

fn cmd_semigroup(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<()> {
    let specs = cfg.pair_specs()?;
    let domain = cfg.domain()?;
    let section = cfg.semigroup.clone().unwrap_or_default();
    section.phi.validate()?;
    let f = builtin_observable(&section.observable)?;
    let base = specs.base.build();
    let perturbed = specs.perturbed.build();
    let pair = ModelPair::new(base.as_ref(), perturbed.as_ref())?;
    let study = SemigroupStudy {
        outer_paths: section.outer_paths,
        inner_paths: section.inner_paths,
        steps: section.steps,
        quad_nodes: section.quad_nodes,
        lhs_paths: section.lhs_paths,
        phi: section.phi,
        eig_floor: section.eig_floor,
        seed: cfg.master_seed()?,
    };
    let report =
        semigroup_difference(&pair, f.as_ref(), domain.s, domain.t, &domain.x0, &study, ctx)?;
    print_json(&report)?;
    write_json(out, "semigroup.json", &report)?;
    Ok(())
}

fn cmd_invariant(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<()> {
    let specs = cfg.pair_specs()?;
    let section = cfg.invariant.clone().unwrap_or_default();
    section.phi.validate()?;
    let f = builtin_observable(&section.observable)?;
    let base = specs.base.build();
    let perturbed = specs.perturbed.build();
    let pair = ModelPair::new(base.as_ref(), perturbed.as_ref())?;
    let study = InvariantStudy {
        horizon: section.horizon,
        time_nodes: section.time_nodes,
        outer_samples: section.outer_samples,
        inner_paths: section.inner_paths,
        steps_per_unit: section.steps_per_unit,
        burn_in: section.burn_in,
        lambda_samples: section.lambda_samples,
        phi: section.phi,
        eig_floor: section.eig_floor,
        seed: cfg.master_seed()?,
    };
    let report = invariant_shift(&pair, f.as_ref(), &study, ctx)?;
    print_json(&report)?;
    write_json(out, "invariant.json", &report)?;
    Ok(())
}

/// JSON artifact of the decompose subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct DecomposeArtifact {
    pub convergence: Vec<ConvergenceRow>,
    /// Full decomposition of the path with index 0 on the [mesh] grid.
    pub sample_path: DecompositionReport,
    pub variance: Option<VarianceReport>,
}

fn cmd_decompose(cfg: &RunConfig, ctx: ExecCtx, out: &Path) -> Result<()> {
    let specs = cfg.pair_specs()?;
    let domain = cfg.domain()?;
    let mesh = cfg
        .mesh
        .as_ref()
        .ok_or_else(|| Error::config("mesh", "the decompose subcommand needs a [mesh] table"))?;
    let section = cfg.decompose.clone().unwrap_or_default();
    let fine_factor = mesh.fine_factor()?;
    let seed = cfg.master_seed()?;
    let base = specs.base.build();
    let perturbed = specs.perturbed.build();
    let pair = ModelPair::new(base.as_ref(), perturbed.as_ref())?;

    let h_values =
        if section.h_values.is_empty() { vec![mesh.big_h] } else { section.h_values.clone() };
    let study = ConvergenceStudy { h_values, fine_factor, paths: cfg.mc.paths, seed };
    let rows = residual_convergence(&pair, &domain.x0, domain.s, domain.t, &study, ctx)?;
    for row in &rows {
        emitln!(
            "H = {:<10} mean residual {:.6e} (stderr {:.2e}, diverged {})",
            row.big_h, row.mean_residual, row.stderr, row.diverged_paths
        );
    }

    let steps = cfg.steps_for(domain.s, domain.t, 0)?;
    let grid = sample_brownian(seed, 0, domain.s, domain.t, steps, pair.noise_dim())?;
    let sample_path = telescoping_decomposition(&pair, &grid, &domain.x0, fine_factor)?;

    let variance = if section.variance {
        let vstudy = VarianceStudy {
            paths: cfg.mc.paths,
            fine_steps: section.variance_steps,
            stride: section.variance_stride,
            quad_nodes: section.quad_nodes,
            cross_nodes: section.cross_nodes,
            seed,
        };
        let report =
            skorohod_variance_1d(&pair, &vstudy, domain.s, domain.t, domain.x0[0], ctx)?;
        emitln!(
            "skorohod variance: empirical {:.6e} vs formula {:.6e} (mc stderr {:.2e})",
            report.empirical_variance, report.total, report.mc_stderr
        );
        Some(report)
    } else {
        None
    };

    let artifact = DecomposeArtifact { convergence: rows, sample_path, variance };
    write_json(out, "decompose.json", &artifact)?;
    let mut csv = Vec::new();
    write_convergence_csv(&mut csv, &artifact.convergence)?;
    let csv_text = String::from_utf8(csv).expect("csv output is utf-8");
    write_artifact(out, "decompose.csv", &csv_text)?;
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig, out: &Path) -> Result<()> {
    let section = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| Error::config("oracle", "the oracle subcommand needs an [oracle] table"))?;
    let domain = cfg.domain()?;
    let oracle = match section.model {
        ModelSpec::Ou { lambda, sigma, d } => LinearOracle::Ou { lambda, sigma, d },
        ModelSpec::Gbm { beta, alpha } => LinearOracle::Gbm { beta, alpha },
        ref other => {
            return Err(Error::UnsupportedOracle(format!(
                "closed forms exist for ou and gbm only, not {other:?}"
            )))
        }
    };
    if domain.x0.len() != oracle.dim() {
        return Err(Error::config(
            "domain.x0",
            format!("{} entries for an oracle of dim {}", domain.x0.len(), oracle.dim()),
        ));
    }
    let duration = domain.t - domain.s;
    let flow_moment = oracle.flow_moment(section.n, duration, &domain.x0)?;
    let tangent_moment = oracle.tangent_moment(section.n, duration)?;
    // When the config also carries an equal-rate constant-diffusion OU pair,
    // report the closed-form Skorohod variance diagonal for it.
    let skorohod_diagonal = match &cfg.pair {
        Some(PairSection {
            base: ModelSpec::Ou { lambda, sigma, d },
            perturbed: ModelSpec::Ou { lambda: lb, sigma: sb, d: db },
        }) if lambda == lb && d == db => {
            Some(ou_skorohod_diagonal(*lambda, sigma - sb, *d, domain.s, domain.t))
        }
        _ => None,
    };
    let value = serde_json::json!({
        "model": section.model,
        "n": section.n,
        "duration": duration,
        "flow_moment": flow_moment,
        "tangent_moment": tangent_moment,
        "skorohod_diagonal": skorohod_diagonal,
    });
    print_json(&value)?;
    write_json(out, "oracle.json", &value)?;
    Ok(())
}

/// The list subcommand's output: catalog entries in a fixed, stable order.
pub fn catalog_text() -> String {
    let mut s = String::new();
    s.push_str("catalog:\n");
    for name in CATALOG_NAMES {
        let line = match name {
            "ou" => "  ou             model   lambda, sigma, d       drift -lambda x, diffusion sigma I",
            "gbm" => "  gbm            model   beta, alpha            scalar dX = beta X dt + alpha X dW",
            "langevin-tanh" => "  langevin-tanh  model   d, sigma, tanh_weight  drift -(x + w tanh x), diffusion sigma I",
            "frozen-drift" => "  frozen-drift   scheme  H                      drift held at block starts over any model",
            other => unreachable!("unlisted catalog entry {other}"),
        };
        s.push_str(line);
        s.push('\n');
    }
    s.push_str("  mean-field     model   n, theta, gamma, sigma n particles coupled through their mean\n");
    s.push_str("experiments ([experiment] name = ...):\n");
    for name in
        ["decay-rates", "discretization-bound", "mean-field", "perturbation", "uniform-difference"]
    {
        s.push_str("  ");
        s.push_str(name);
        s.push('\n');
    }
    s.push_str("estimator subcommands: check, decompose, moments, bel, semigroup, invariant, oracle\n");
    s.push_str("observables: coord:i, square:i, cos:i, norm2, const:c\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
        seed = 9
        out = "artifacts"

        [mc]
        paths = 64
        reduction = "fixed-order"
        threads = 2

        [model]
        kind = "langevin-tanh"
        d = 1
        sigma = 0.5
        tanh_weight = 1.0

        [pair]
        base = { kind = "ou", lambda = 1.0, sigma = 1.0, d = 1 }
        perturbed = { kind = "ou", lambda = 1.0, sigma = 0.5, d = 1 }

        [domain]
        s = 0.0
        t = 2.0
        x0 = [1.0]

        [mesh]
        h = 0.03125
        H = 0.25

        [check]
        n = 2
        scan_samples = 32

        [moments]
        n = 2
        steps = 64

        [bel]
        mode = "hessian"
        observable = "square:0"
        steps = 64
        phi = { kind = "cosine", epsilon = 0.5 }

        [semigroup]
        observable = "square:0"
        outer_paths = 16
        inner_paths = 16
        steps = 16
        quad_nodes = 4
        lhs_paths = 64

        [invariant]
        observable = "coord:0"
        outer_samples = 8
        inner_paths = 8

        [decompose]
        h_values = [0.25, 0.125]
        variance = true

        [oracle]
        model = { kind = "ou", lambda = 1.0, sigma = 1.0, d = 1 }
        n = 2

        [experiment]
        name = "decay-rates"
        n = 2
        times = [1.0, 2.0]
        paths = 16
        model = { kind = "ou", lambda = 1.0, sigma = 1.0, d = 2 }
        x0 = [0.5, 0.5]
    "#;

    #[test]
    fn round_trip_is_identity_on_the_validated_subset() {
        let cfg: RunConfig = toml::from_str(FULL).unwrap();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let again: RunConfig = toml::from_str(&text).unwrap();
        again.validate().unwrap();
        assert_eq!(
            serde_json::to_value(&cfg).unwrap(),
            serde_json::to_value(&again).unwrap()
        );
    }

    #[test]
    fn missing_seed_is_a_validation_error() {
        let cfg: RunConfig = toml::from_str("[mc]\npaths = 16").unwrap();
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "seed"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mesh_violation_names_the_field() {
        let cfg: RunConfig =
            toml::from_str("seed = 1\n[mesh]\nh = 0.03\nH = 0.1").unwrap();
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "mesh.H"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn path_floor_names_the_field() {
        let cfg: RunConfig = toml::from_str("seed = 1\n[mc]\npaths = 1").unwrap();
        match cfg.validate().unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "mc.paths"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn experiment_tag_picks_the_variant_and_seed_is_injected() {
        let cfg: RunConfig = toml::from_str(
            "seed = 123\n[experiment]\nname = \"perturbation\"\ndeltas = [0.1]",
        )
        .unwrap();
        cfg.validate().unwrap();
        let mut spec = cfg.experiment.unwrap();
        spec.apply_seed(cfg.seed.unwrap());
        match spec {
            ExperimentSpec::Perturbation(c) => {
                assert_eq!(c.seed, 123);
                assert_eq!(c.deltas, vec![0.1]);
                // untouched fields keep their documented defaults
                assert_eq!(c.base_weight, PerturbationConfig::default().base_weight);
            }
            other => panic!("wrong variant {other:?}"),
        }
    }

    #[test]
    fn unknown_experiment_name_fails_to_parse() {
        let err =
            toml::from_str::<RunConfig>("seed = 1\n[experiment]\nname = \"nope\"").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let err = toml::from_str::<RunConfig>("seed = 1\nsede = 2").unwrap_err();
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn catalog_order_is_stable_and_complete() {
        let text = catalog_text();
        let order = ["ou", "gbm", "langevin-tanh", "frozen-drift", "mean-field"];
        let mut last = 0;
        for name in order {
            let at = text[last..].find(name).map(|i| i + last).unwrap();
            assert!(at >= last, "{name} out of order");
            last = at;
        }
        for exp in ["decay-rates", "uniform-difference", "perturbation"] {
            assert!(text.contains(exp));
        }
    }

    #[test]
    fn cli_flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\n[mc]\npaths = 16\nthreads = 7").unwrap();
        let cli = Cli::try_parse_from([
            "flowlab",
            "check",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "42",
            "--threads",
            "3",
        ])
        .unwrap();
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.seed, Some(42));
        assert_eq!(cfg.mc.threads, 3);
    }

    #[test]
    fn help_exits_zero_and_bad_flag_exits_one() {
        assert_eq!(run_cli(["flowlab", "--help"]), 0);
        assert_eq!(run_cli(["flowlab", "--no-such-flag"]), 1);
    }
}
