//! Configuration-driven experiment runner: a TOML file names one experiment and its
//! parameters; the runner writes CSV outputs plus a manifest echoing the resolved config.

pub mod presets;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bdsde::{
    drift_ladder, noise_dimension_ladder, representation_sequence, solve_bdsde_lsmc, SolverConfig, TerminalZ,
};
use crate::error::{Error, Result};
use crate::forward::{euler_maruyama_flow, PathStarts};
use crate::grid::SpatialGrid;
use crate::malliavin::{
    bump_oracle, compactness_diagnostics, relative_disagreement, solve_malliavin_linearized, CompactnessConfig,
    DEFAULT_EPSILONS,
};
use crate::model::coefficients::{CoefficientSet, InlineCoefficients};
use crate::model::conditions::{check_conditions, SampleSpec};
use crate::model::weights::RhoWeight;
use crate::noise::{derive_seed, reverse_time, sample_qwiener, NoisePath, TimeGrid, TwoSidedPath, WienerEnsemble};
use crate::regression::RegressionBasis;
use crate::spde::{
    correspondence_error, solve_backward_spde_fd, weak_form_residual, write_fields_csv, write_residual_csv,
    SpdeConfig, TestFunctionBattery,
};
use crate::stationary::{
    convolution_variance, default_horizons, pullback_experiment, pullback_rms, snap_horizons, solve_infinite_horizon,
    stationarity_test, write_series_csv,
};

use presets::{build_preset, preset_sample_spec, Preset, PresetParams};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BDSDE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "bdsde-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    CheckConditions,
    SimulateForward,
    SolveBdsde,
    DriftLadder,
    NoiseLadder,
    SolveSpde,
    Correspondence,
    InfiniteHorizon,
    Stationarity,
    Pullback,
    Malliavin,
    Compactness,
}

pub const ALL_EXPERIMENTS: [ExperimentKind; 12] = [
    ExperimentKind::CheckConditions,
    ExperimentKind::SimulateForward,
    ExperimentKind::SolveBdsde,
    ExperimentKind::DriftLadder,
    ExperimentKind::NoiseLadder,
    ExperimentKind::SolveSpde,
    ExperimentKind::Correspondence,
    ExperimentKind::InfiniteHorizon,
    ExperimentKind::Stationarity,
    ExperimentKind::Pullback,
    ExperimentKind::Malliavin,
    ExperimentKind::Compactness,
];

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CheckConditions => "check-conditions",
            ExperimentKind::SimulateForward => "simulate-forward",
            ExperimentKind::SolveBdsde => "solve-bdsde",
            ExperimentKind::DriftLadder => "drift-ladder",
            ExperimentKind::NoiseLadder => "noise-ladder",
            ExperimentKind::SolveSpde => "solve-spde",
            ExperimentKind::Correspondence => "correspondence",
            ExperimentKind::InfiniteHorizon => "infinite-horizon",
            ExperimentKind::Stationarity => "stationarity",
            ExperimentKind::Pullback => "pullback",
            ExperimentKind::Malliavin => "malliavin",
            ExperimentKind::Compactness => "compactness",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_EXPERIMENTS
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

/// Coefficients: a named preset (with optional parameters) or an inline specification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "PresetParams::is_empty")]
    pub params: PresetParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineCoefficients>,
    /// Drift truncation level `n` applied to `f`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
}

impl CoefficientConfig {
    pub fn build(&self) -> Result<CoefficientSet> {
        let base = match (&self.preset, &self.inline) {
            (Some(p), None) => build_preset(*p, &self.params)?,
            (None, Some(inline)) => {
                if !self.params.is_empty() {
                    return Err(Error::Config("params apply to presets only".into()));
                }
                inline.build()?
            }
            (Some(_), Some(_)) => return Err(Error::Config("give either a preset or inline coefficients, not both".into())),
            (None, None) => return Err(Error::Config("coefficients need a preset or an inline specification".into())),
        };
        match self.truncation {
            Some(n) => base.with_drift_truncation(n),
            None => Ok(base),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t_start: 0.0, t_end: 1.0, dt: 1e-2 }
    }
}

impl TimeConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_step(self.t_start, self.t_end, self.dt)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Eigenvalues `λ_j` of the backward noise covariance; defaults to 1 per component.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub starts: PathStarts,
    pub basis: RegressionBasis,
    /// Two fixed-point iterations on the drift term when set.
    pub implicit: bool,
    pub terminal_z: TerminalZ,
    pub blowup: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::new(PathStarts::Stratified { radius: 4.0, paths: 2000 }, RegressionBasis::polynomial(3), 0);
        Self { starts: d.starts, basis: d.basis, implicit: false, terminal_z: d.terminal_z, blowup: d.blowup }
    }
}

impl SolverSection {
    pub fn config(&self, seed: u64) -> SolverConfig {
        let mut c = SolverConfig::new(self.starts.clone(), self.basis.clone(), seed);
        c.implicit_iterations = if self.implicit { 2 } else { 0 };
        c.terminal_z = self.terminal_z;
        c.blowup = self.blowup;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub dim: usize,
    pub radius: f64,
    pub step: f64,
}

fn one() -> usize {
    1
}

impl GridConfig {
    pub fn build(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.dim, self.radius, self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Every `stride`-th time step is written for path-level outputs.
    pub stride: usize,
    /// Also write binary panels.
    pub binary: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { stride: 10, binary: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftLadderConfig {
    pub levels: Vec<f64>,
    pub tol: f64,
}

impl Default for DriftLadderConfig {
    fn default() -> Self {
        Self { levels: vec![1.0, 1.5, 2.0, 3.0, 4.0], tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseLadderConfig {
    pub dims: Vec<usize>,
    pub realizations: usize,
}

impl Default for NoiseLadderConfig {
    fn default() -> Self {
        Self { dims: vec![1, 2, 4, 8], realizations: 24 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceConfig {
    /// Grid of the BDSDE read-out; must equal the SPDE grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagonal_grid: Option<GridConfig>,
    /// Compare every `stride`-th step.
    pub stride: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfiniteHorizonConfig {
    pub t: f64,
    /// Defaults to `{2, 4, 8, 16}/μ`.
    pub horizons: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationarityConfig {
    pub r: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub masters: usize,
}

impl Default for StationarityConfig {
    fn default() -> Self {
        Self { r: 1.0, horizon: 8.0, x0: vec![0.0], masters: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PullbackConfig {
    /// Defaults to `{2, 4, 8, 16}/μ`.
    pub horizons: Vec<f64>,
    pub masters: usize,
    /// Compare the longest pull-back with the regression infinite-horizon candidate.
    pub candidate: bool,
}

impl Default for PullbackConfig {
    fn default() -> Self {
        Self { horizons: Vec::new(), masters: 1, candidate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalliavinConfig {
    /// Defaults to the quarter points of the window.
    pub thetas: Vec<f64>,
    pub component: usize,
    pub epsilons: Vec<f64>,
}

impl Default for MalliavinConfig {
    fn default() -> Self {
        Self { thetas: Vec::new(), component: 0, epsilons: DEFAULT_EPSILONS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    /// Exponent `q` of the weight `ρ(x) = (1 + |x|)^q`.
    #[serde(default = "default_q")]
    pub weight_q: f64,
    #[serde(default)]
    pub spde: SpdeConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<SampleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_ladder: Option<DriftLadderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_ladder: Option<NoiseLadderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<CorrespondenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infinite_horizon: Option<InfiniteHorizonConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationarity: Option<StationarityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pullback: Option<PullbackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malliavin: Option<MalliavinConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compactness: Option<CompactnessConfig>,
}

fn default_q() -> f64 {
    2.0
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Fill the section of the selected experiment with its defaults and validate the
    /// cross-field constraints that can be checked without solving.
    pub fn resolve(mut self) -> Result<Self> {
        use ExperimentKind::*;
        let sections = [
            (self.drift_ladder.is_some(), DriftLadder, "drift_ladder"),
            (self.noise_ladder.is_some(), NoiseLadder, "noise_ladder"),
            (self.correspondence.is_some(), Correspondence, "correspondence"),
            (self.infinite_horizon.is_some(), InfiniteHorizon, "infinite_horizon"),
            (self.stationarity.is_some(), Stationarity, "stationarity"),
            (self.pullback.is_some(), Pullback, "pullback"),
            (self.malliavin.is_some(), Malliavin, "malliavin"),
            (self.compactness.is_some(), Compactness, "compactness"),
            (self.conditions.is_some(), CheckConditions, "conditions"),
        ];
        for (present, owner, key) in sections {
            if present && owner != self.experiment {
                return Err(Error::Config(format!(
                    "section [{key}] does not apply to experiment '{}'",
                    self.experiment.name()
                )));
            }
        }
        let coeffs = self.coefficients.build()?;
        self.time.grid()?;
        if !(self.weight_q >= 0.0 && self.weight_q.is_finite()) {
            return Err(Error::Config("weight_q must be finite and nonnegative".into()));
        }
        if self.noise.lambdas.is_empty() {
            self.noise.lambdas = vec![1.0; coeffs.g.len().max(1)];
        }
        if self.noise.lambdas.len() < coeffs.g.len() {
            return Err(Error::Config(format!(
                "coefficients use {} noise components but only {} eigenvalues are given",
                coeffs.g.len(),
                self.noise.lambdas.len()
            )));
        }
        let mu = -coeffs.constants.monotonicity;
        let needs_grid = matches!(self.experiment, SolveSpde | Correspondence | Pullback | Compactness);
        if needs_grid && self.grid.is_none() {
            return Err(Error::Config(format!("experiment '{}' needs a [grid] section", self.experiment.name())));
        }
        match self.experiment {
            CheckConditions => {
                self.conditions.get_or_insert_with(SampleSpec::default);
            }
            DriftLadder => {
                self.drift_ladder.get_or_insert_with(DriftLadderConfig::default);
            }
            NoiseLadder => {
                self.noise_ladder.get_or_insert_with(NoiseLadderConfig::default);
            }
            Correspondence => {
                let c = self.correspondence.get_or_insert_with(CorrespondenceConfig::default);
                c.stride = c.stride.max(1);
                let grid = self.grid.expect("checked").build()?;
                if let Some(diag) = c.diagonal_grid {
                    grid.ensure_same(&diag.build()?)?;
                }
            }
            InfiniteHorizon => {
                let c = self.infinite_horizon.get_or_insert_with(InfiniteHorizonConfig::default);
                if c.horizons.is_empty() {
                    c.horizons = snap_horizons(&default_horizons(mu.max(f64::MIN_POSITIVE)), self.time.dt);
                }
                if c.tol == 0.0 {
                    c.tol = 1e-3;
                }
            }
            Stationarity => {
                self.stationarity.get_or_insert_with(StationarityConfig::default);
            }
            Pullback => {
                let c = self.pullback.get_or_insert_with(PullbackConfig::default);
                if c.horizons.is_empty() {
                    c.horizons = snap_horizons(&default_horizons(mu.max(f64::MIN_POSITIVE)), self.time.dt);
                }
                c.masters = c.masters.max(1);
            }
            Malliavin => {
                let c = self.malliavin.get_or_insert_with(MalliavinConfig::default);
                if c.thetas.is_empty() {
                    let g = self.time.grid()?;
                    let n = g.n_steps();
                    c.thetas = [n / 4, n / 2, 3 * n / 4].iter().map(|k| g.time((*k).max(1))).collect();
                }
            }
            Compactness => {
                self.compactness.get_or_insert_with(CompactnessConfig::default);
            }
            SimulateForward | SolveBdsde | SolveSpde => {}
        }
        Ok(self)
    }
}

/// Overrides given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Files written and scalar results of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    pub results: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
}

/// Single writer per output file; every file is recorded in the manifest.
struct Outputs {
    dir: PathBuf,
    summary: RunSummary,
}

impl Outputs {
    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.summary.files.push(name.to_string());
        Ok(())
    }

    fn result(&mut self, key: &str, v: f64) {
        self.summary.results.insert(key.to_string(), v);
    }

    fn flag(&mut self, key: &str, v: bool) {
        self.summary.flags.insert(key.to_string(), v);
    }
}

/// Output directory: `--out`, then the config, then the environment, then `bdsde-out`.
pub fn output_dir(config: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    overrides
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Machine-readable failure record written next to the outputs.
pub fn error_record(err: &Error) -> String {
    serde_json::json!({
        "kind": err.kind(),
        "exit_code": err.exit_code(),
        "message": err.to_string(),
    })
    .to_string()
}

/// Run one experiment. On failure an `error.json` is written to the output directory when
/// it can be created.
pub fn run(config: ExperimentConfig, overrides: &Overrides) -> Result<RunSummary> {
    let dir = output_dir(&config, overrides);
    let result = run_inner(config, overrides, &dir);
    if let Err(e) = &result {
        if fs::create_dir_all(&dir).is_ok() {
            let _ = fs::write(dir.join("error.json"), error_record(e) + "\n");
        }
    }
    result
}

fn run_inner(config: ExperimentConfig, overrides: &Overrides, dir: &Path) -> Result<RunSummary> {
    let mut config = config.resolve()?;
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    config.output_dir = Some(dir.to_path_buf());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stale = dir.join("error.json");
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
    }
    let mut out = Outputs {
        dir: dir.to_path_buf(),
        summary: RunSummary {
            experiment: config.experiment.name().to_string(),
            output_dir: dir.to_path_buf(),
            ..RunSummary::default()
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&config, &mut out))?;
    write_manifest(&config, &mut out)?;
    Ok(out.summary)
}

fn write_manifest(config: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        experiment: &'a str,
        version: &'a str,
        seed: u64,
        files: Vec<String>,
        results: &'a BTreeMap<String, f64>,
        flags: &'a BTreeMap<String, bool>,
        config: &'a ExperimentConfig,
    }
    let mut files = out.summary.files.clone();
    files.push("manifest.toml".into());
    let m = Manifest {
        experiment: config.experiment.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        files,
        results: &out.summary.results,
        flags: &out.summary.flags,
        config,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
    out.write("manifest.toml", |w| w.write_all(text.as_bytes()))
}

const NOISE_STREAM: u64 = 0;
const FORWARD_STREAM: u64 = 1;
const ENSEMBLE_STREAM: u64 = 2;

fn weight(config: &ExperimentConfig, dim: usize) -> Result<RhoWeight> {
    RhoWeight::new(config.weight_q, dim)
}

fn shared_noise(config: &ExperimentConfig, coeffs: &CoefficientSet, grid: TimeGrid) -> Result<Arc<NoisePath>> {
    Ok(Arc::new(sample_qwiener(
        &config.noise.lambdas,
        coeffs.g.len(),
        grid,
        0,
        derive_seed(config.seed, NOISE_STREAM),
    )?))
}

fn dispatch(config: &ExperimentConfig, out: &mut Outputs) -> Result<()> {
    let coeffs = config.coefficients.build()?;
    let solver = config.solver.config(derive_seed(config.seed, FORWARD_STREAM));
    let time = config.time.grid()?;
    let window = (time.t_start(), time.t_end());
    let rho = weight(config, coeffs.dim)?;
    match config.experiment {
        ExperimentKind::CheckConditions => {
            let mut spec = config.conditions.expect("resolved");
            spec.seed = derive_seed(config.seed, ENSEMBLE_STREAM);
            if let Some(p) = config.coefficients.preset {
                spec = preset_sample_spec(&coeffs, p.declared_conditions(), spec);
            }
            let report = check_conditions(&coeffs, &spec)?;
            out.write("conditions.txt", |w| w.write_all(report.to_text().as_bytes()))?;
            out.write("conditions.json", |w| w.write_all(report.to_json().as_bytes()))?;
            out.write("conditions.csv", |w| {
                writeln!(w, "condition,status,margin,samples")?;
                for e in &report.entries {
                    writeln!(w, "{},{},{},{}", e.name, e.status.as_str(), e.margin, e.samples)?;
                }
                Ok(())
            })?;
            out.flag("all_ok", report.all_ok());
            if let Some(p) = config.coefficients.preset {
                out.flag("declared_ok", report.passes(p.declared_conditions()));
            }
        }
        ExperimentKind::SimulateForward => {
            let (_, weights) = config.solver.starts.layout(coeffs.dim)?;
            let wiener = Arc::new(WienerEnsemble::sample(time, coeffs.dim, weights.len(), solver.seed));
            let flow = euler_maruyama_flow(&coeffs, &config.solver.starts, window, wiener, solver.blowup)?;
            out.write("flow.csv", |w| flow.write_csv(w))?;
            if config.output.binary {
                out.write("flow.bin", |w| flow.write_binary(w))?;
            }
            out.result("invalid_paths", flow.invalid_count() as f64);
        }
        ExperimentKind::SolveBdsde => {
            let noise = shared_noise(config, &coeffs, time)?;
            let panel = solve_bdsde_lsmc(&coeffs, noise.clone(), window, &solver)?;
            out.write("solution.csv", |w| panel.write_csv(w, config.output.stride))?;
            out.write("noise.csv", |w| noise.write_csv(w))?;
            if config.output.binary {
                out.write("noise.bin", |w| noise.write_binary(w))?;
                out.write("flow.bin", |w| panel.flow().write_binary(w))?;
            }
            if let Some(g) = config.grid {
                let fields = representation_sequence(&panel, &g.build()?, Some(&rho), config.output.stride)?;
                out.write("fields.csv", |w| write_fields_csv(&fields, w))?;
            }
            out.result("sup_abs_y", panel.sup_abs_y());
            out.result("max_condition", panel.meta.max_condition);
            out.result("invalid_paths", panel.meta.invalid_paths as f64);
        }
        ExperimentKind::DriftLadder => {
            let c = config.drift_ladder.as_ref().expect("resolved");
            let noise = shared_noise(config, &coeffs, time)?;
            let (report, _) = drift_ladder(&coeffs, &c.levels, noise, window, &solver, Some(&rho), c.tol)?;
            out.write("ladder.csv", |w| report.write_csv(w))?;
            out.flag("cauchy", report.cauchy);
            for (k, v) in &report.stats {
                out.result(k, *v);
            }
            out.result("final_diff", *report.diff_m.last().expect("two rungs"));
        }
        ExperimentKind::NoiseLadder => {
            let c = config.noise_ladder.as_ref().expect("resolved");
            let l = noise_dimension_ladder(
                &coeffs,
                &config.noise.lambdas,
                &c.dims,
                time,
                &solver,
                Some(&rho),
                c.realizations,
                derive_seed(config.seed, NOISE_STREAM),
            )?;
            out.write("ladder.csv", |w| l.report.write_csv(w))?;
            out.write("tail_sums.csv", |w| {
                writeln!(w, "N,N_next,tail_sum,squared_diff")?;
                for (i, win) in c.dims.windows(2).enumerate() {
                    writeln!(w, "{},{},{},{}", win[0], win[1], l.tail_sums[i], l.squared_diffs[i])?;
                }
                Ok(())
            })?;
            out.result("proportionality", l.report.fitted_rate);
        }
        ExperimentKind::SolveSpde => {
            let grid = config.grid.expect("resolved").build()?;
            let noise = shared_noise(config, &coeffs, time)?;
            let u = solve_backward_spde_fd(&coeffs, &noise, window, &grid, &config.spde)?;
            let strided: Vec<_> = u.iter().step_by(config.output.stride.max(1)).cloned().collect();
            out.write("fields.csv", |w| write_fields_csv(&strided, w))?;
            let battery = TestFunctionBattery::default_for(&grid);
            battery.validate(&grid)?;
            let res = weak_form_residual(&u, &battery, &coeffs, &noise)?;
            out.write("residual.csv", |w| write_residual_csv(&res, w))?;
            out.result("max_abs_residual", res.iter().map(|r| r.residual.abs()).fold(0.0, f64::max));
        }
        ExperimentKind::Correspondence => {
            let c = config.correspondence.as_ref().expect("resolved");
            let grid = config.grid.expect("resolved").build()?;
            let noise = shared_noise(config, &coeffs, time)?;
            let u = solve_backward_spde_fd(&coeffs, &noise, window, &grid, &config.spde)?;
            let panel = solve_bdsde_lsmc(&coeffs, noise, window, &solver)?;
            let diagonal = representation_sequence(&panel, &grid, Some(&rho), c.stride)?;
            let r = correspondence_error(&u, &diagonal, &rho)?;
            out.write("correspondence.csv", |w| {
                writeln!(w, "t,error,reference,relative")?;
                for s in &r.slices {
                    writeln!(w, "{},{},{},{}", s.t, s.error, s.reference, s.relative)?;
                }
                Ok(())
            })?;
            out.result("max_relative", r.max_relative);
            out.result("max_error", r.max_error);
        }
        ExperimentKind::InfiniteHorizon => {
            let c = config.infinite_horizon.as_ref().expect("resolved");
            let top = c.t + c.horizons.last().copied().unwrap_or(0.0);
            let grid = TimeGrid::with_step(c.t, top, config.time.dt)?;
            let noise = shared_noise(config, &coeffs, grid)?;
            let r = solve_infinite_horizon(&coeffs, c.t, &c.horizons, c.discount, noise, &solver, Some(&rho), c.tol)?;
            out.write("ladder.csv", |w| r.report.write_csv(w))?;
            out.write("candidate.csv", |w| {
                writeln!(w, "x,Y")?;
                for i in 0..r.candidate.paths() {
                    writeln!(w, "{},{}", r.candidate.flow().start(i)[0], r.candidate.y(0, i))?;
                }
                Ok(())
            })?;
            out.result("discount", r.discount);
            out.result("fitted_rate", r.report.fitted_rate);
            out.result("candidate_sup_abs_y0", (0..r.candidate.paths()).map(|i| r.candidate.y(0, i).abs()).fold(0.0, f64::max));
            out.flag("cauchy", r.report.cauchy);
        }
        ExperimentKind::Stationarity => {
            let c = config.stationarity.as_ref().expect("resolved");
            let r = stationarity_test(
                &coeffs,
                &config.noise.lambdas,
                config.time.dt,
                c.r,
                c.horizon,
                &c.x0,
                &solver,
                Some(&rho),
                c.masters,
                derive_seed(config.seed, ENSEMBLE_STREAM),
            )?;
            out.write("samples.csv", |w| {
                writeln!(w, "master,y_start,y_shifted")?;
                for (i, (a, b)) in r.samples_start.iter().zip(&r.samples_shifted).enumerate() {
                    writeln!(w, "{i},{a},{b}")?;
                }
                Ok(())
            })?;
            out.result("pathwise_deviation", r.pathwise_deviation);
            out.result("variance_start", r.variance_start);
            out.result("variance_shifted", r.variance_shifted);
            if let Some(ks) = r.ks {
                out.result("ks_statistic", ks.statistic);
                out.result("ks_p_value", ks.p_value);
            }
            if config.coefficients.preset == Some(Preset::LinearMu) {
                let p = &config.coefficients.params;
                let v = convolution_variance(p.gamma.unwrap_or(0.0), config.noise.lambdas[0], p.mu.unwrap_or(1.0));
                out.result("exact_variance", v);
            }
        }
        ExperimentKind::Pullback => {
            let c = config.pullback.as_ref().expect("resolved");
            let grid = config.grid.expect("resolved").build()?;
            let top = *c.horizons.last().ok_or_else(|| Error::Config("no pull-back horizons".into()))?;
            let seed = derive_seed(config.seed, ENSEMBLE_STREAM);
            let master = TwoSidedPath::sample(&config.noise.lambdas, coeffs.g.len(), config.time.dt, top, config.time.dt, derive_seed(seed, 0))?;
            let candidate = if c.candidate {
                let window = master.window(-top, 0.0)?;
                let bhat = Arc::new(reverse_time(&window, window.grid().t_end())?);
                let ih = solve_infinite_horizon(&coeffs, 0.0, &c.horizons, None, bhat, &solver, Some(&rho), f64::INFINITY)?;
                Some(crate::bdsde::representation_field(&ih.candidate, 0, &grid, Some(&rho))?)
            } else {
                None
            };
            let s = pullback_experiment(&coeffs, &c.horizons, &master, &grid, &config.spde, &rho, candidate.as_ref())?;
            out.write("series.csv", |w| write_series_csv(&s.horizons, &s.diffs, s.fitted_factor, s.candidate_distance, w))?;
            out.write("fields.csv", |w| {
                writeln!(w, "T,x1{},v", if grid.dim() == 2 { ",x2" } else { "" })?;
                for (h, f) in s.horizons.iter().zip(&s.fields) {
                    for node in 0..grid.len() {
                        let x: Vec<String> = grid.node(node).iter().map(|v| v.to_string()).collect();
                        writeln!(w, "{},{},{}", h, x.join(","), f.values[node])?;
                    }
                }
                Ok(())
            })?;
            out.result("fitted_factor", s.fitted_factor);
            if let Some(d) = s.candidate_distance {
                out.result("candidate_distance", d);
            }
            if let Some(d) = s.candidate_relative {
                out.result("candidate_relative", d);
            }
            if c.masters > 1 {
                let (rms, factor) = pullback_rms(&coeffs, &c.horizons, &config.noise.lambdas, config.time.dt, &grid, &config.spde, &rho, c.masters, seed)?;
                out.write("series_rms.csv", |w| write_series_csv(&c.horizons, &rms, factor, None, w))?;
                out.result("rms_fitted_factor", factor);
            }
        }
        ExperimentKind::Malliavin => {
            let c = config.malliavin.as_ref().expect("resolved");
            let noise = shared_noise(config, &coeffs, time)?;
            let base = solve_bdsde_lsmc(&coeffs, noise.clone(), window, &solver)?;
            let times = base.grid().times();
            let mut rows = Vec::new();
            let mut worst: f64 = 0.0;
            for (idx, &theta) in c.thetas.iter().enumerate() {
                let lin = solve_malliavin_linearized(&base, theta, c.component)?;
                let bump = bump_oracle(&coeffs, noise.clone(), window, &solver, &base, theta, c.component, &c.epsilons)?;
                let rel = relative_disagreement(&lin, &bump)?;
                worst = worst.max(rel);
                out.result(&format!("disagreement_theta{idx}"), rel);
                if config.output.binary {
                    out.write(&format!("malliavin_theta{idx}.bin"), |w| lin.write_binary(w))?;
                }
                rows.push((lin, bump));
            }
            out.write("malliavin.csv", |w| {
                writeln!(w, "theta,t,path,DY_linearized,DY_bump")?;
                let stride = config.output.stride.max(1);
                for (lin, bump) in &rows {
                    for k in (0..=lin.theta_step).step_by(stride) {
                        for i in 0..base.paths() {
                            writeln!(w, "{},{},{},{},{}", lin.theta, times[k], i, lin.dy(k, i), bump.dy(k, i))?;
                        }
                    }
                }
                Ok(())
            })?;
            out.result("max_disagreement", worst);
        }
        ExperimentKind::Compactness => {
            let mut c = config.compactness.clone().expect("resolved");
            c.seed = derive_seed(config.seed, NOISE_STREAM);
            let grid = config.grid.expect("resolved").build()?;
            let battery = TestFunctionBattery::default_for(&grid);
            battery.validate(&grid)?;
            let r = compactness_diagnostics(&coeffs, &config.noise.lambdas, time, &solver, &grid, &battery.functions, &c)?;
            out.write("compactness.csv", |w| r.write_csv(w))?;
            out.write("compactness.txt", |w| w.write_all(r.summary().as_bytes()))?;
            if let Some(f) = r.time_exponent {
                out.result("time_exponent", f.slope);
                out.result("time_exponent_half_width", f.half_width);
            }
            if let Some(f) = r.malliavin_exponent {
                out.result("malliavin_exponent", f.slope);
                out.result("malliavin_exponent_half_width", f.half_width);
            }
            out.result("h1_trend_p", r.h1_trend_p);
            out.result("d12_trend_p", r.d12_trend_p);
        }
    }
    Ok(())
}
