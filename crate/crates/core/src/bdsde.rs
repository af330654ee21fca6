//! Backward regression scheme for BDSDEs with a common backward-noise realization,
//! the field read-out `u(t,x) = Y_t^{t,x}` and the two approximation ladders.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::{cloud_flow, euler_maruyama_flow, FlowPanel, PathStarts, PointCloud, DEFAULT_BLOWUP};
use crate::grid::{FieldSnapshot, SpatialGrid};
use crate::model::coefficients::CoefficientSet;
use crate::model::norms::{discounted_path_norm, DiscountedNormSpec, Horizon, PanelView};
use crate::model::weights::RhoWeight;
use crate::noise::{derive_seed, sample_qwiener, NoisePath, TimeGrid, WienerEnsemble};
use crate::regression::{Fit, RegressionBasis};
use crate::stats::linear_fit;

/// Terminal value of `Z`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalZ {
    /// `σ^T ∇h` at `X_T` by central differences.
    #[default]
    Gradient,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub starts: PathStarts,
    pub basis: RegressionBasis,
    /// Fixed-point iterations on the drift term per step (0 = explicit).
    #[serde(default)]
    pub implicit_iterations: usize,
    #[serde(default)]
    pub terminal_z: TerminalZ,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
    /// Seed of the forward Brownian ensemble.
    #[serde(default)]
    pub seed: u64,
}

fn default_blowup() -> f64 {
    DEFAULT_BLOWUP
}

impl SolverConfig {
    pub fn new(starts: PathStarts, basis: RegressionBasis, seed: u64) -> Self {
        Self {
            starts,
            basis,
            implicit_iterations: 0,
            terminal_z: TerminalZ::Gradient,
            blowup: DEFAULT_BLOWUP,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMeta {
    pub truncation: Option<f64>,
    pub noise_dimension: usize,
    pub basis: RegressionBasis,
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub paths: usize,
    pub invalid_paths: usize,
    pub max_condition: f64,
}

/// Per-step regressions: `y` has columns `[E(Y_{k+1}), E(Y_{k+1} - gΔB̂), E(f Δt)]`,
/// `z` has one column per Brownian dimension.
#[derive(Debug, Clone)]
pub struct StepFit {
    pub y: Fit,
    pub z: Fit,
}

#[derive(Debug, Clone)]
pub struct SolutionPanel {
    flow: FlowPanel,
    noise: Arc<NoisePath>,
    noise_offset: usize,
    coeffs: CoefficientSet,
    y: Vec<f64>,
    z: Vec<f64>,
    fits: Vec<StepFit>,
    implicit_iterations: usize,
    pub meta: PanelMeta,
}

impl SolutionPanel {
    pub fn flow(&self) -> &FlowPanel {
        &self.flow
    }
    pub fn noise(&self) -> &Arc<NoisePath> {
        &self.noise
    }
    /// Index of the window start inside the noise grid.
    pub fn noise_offset(&self) -> usize {
        self.noise_offset
    }
    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }
    pub fn grid(&self) -> &TimeGrid {
        self.flow.grid()
    }
    pub fn steps(&self) -> usize {
        self.flow.grid().n_steps()
    }
    pub fn paths(&self) -> usize {
        self.flow.paths()
    }
    pub fn y(&self, k: usize, i: usize) -> f64 {
        self.y[k * self.paths() + i]
    }
    pub fn y_step(&self, k: usize) -> &[f64] {
        let m = self.paths();
        &self.y[k * m..(k + 1) * m]
    }
    pub fn z(&self, k: usize, i: usize) -> &[f64] {
        let d = self.flow.dim();
        let off = (k * self.paths() + i) * d;
        &self.z[off..off + d]
    }
    pub fn y_values(&self) -> &[f64] {
        &self.y
    }
    pub fn z_values(&self) -> &[f64] {
        &self.z
    }
    /// Fixed-point iterations used on the drift term (0 = explicit).
    pub fn implicit_iterations(&self) -> usize {
        self.implicit_iterations
    }
    pub fn fits(&self) -> &[StepFit] {
        &self.fits
    }

    /// `ΔB̂_j` over window step `k`.
    pub fn db(&self, k: usize, j: usize) -> f64 {
        self.noise.db(self.noise_offset + k, j)
    }

    /// `u(t_k, x)` read from the step-`k` regression (the terminal step uses `h`).
    pub fn y_at(&self, k: usize, x: &[f64]) -> f64 {
        if k == self.steps() {
            return (self.coeffs.h)(x);
        }
        let fit = &self.fits[k].y;
        let mut c = [0.0; 3];
        fit.eval_all(x, &mut c);
        let mut y = c[1] + c[2];
        if self.implicit_iterations > 0 {
            let t = self.grid().time(k);
            let dt = self.grid().dt();
            for _ in 0..self.implicit_iterations {
                y = c[1] + (self.coeffs.f)(t, x, y) * dt;
            }
        }
        y
    }

    /// Estimated `Z(t_k, x)`.
    pub fn z_at(&self, k: usize, x: &[f64], out: &mut [f64]) {
        let k = k.min(self.steps() - 1);
        self.fits[k].z.eval_all(x, out);
    }

    /// Norm view of `Y` over the panel's start points.
    pub fn y_view(&self) -> (Vec<f64>, PanelView<'_>) {
        let times = self.grid().times();
        (times, self.view_of(&self.y, 1))
    }

    pub(crate) fn view_of<'a>(&'a self, values: &'a [f64], comps: usize) -> PanelView<'a> {
        PanelView {
            times: &[],
            values,
            paths: self.paths(),
            comps,
            starts: self.flow.starts(),
            dim: self.flow.dim(),
            weights: self.flow.weights(),
            valid: self.flow.valid(),
        }
    }

    pub fn sup_abs_y(&self) -> f64 {
        let m = self.paths();
        let valid = self.flow.valid();
        self.y
            .iter()
            .enumerate()
            .filter(|(idx, _)| valid[idx % m])
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max)
    }

    /// Long-format CSV `t,path,x1..xd,Y,Z1..Zd` at every `stride`-th step.
    pub fn write_csv<W: Write>(&self, mut out: W, stride: usize) -> std::io::Result<()> {
        let d = self.flow.dim();
        let mut header = vec!["t".to_string(), "path".to_string()];
        header.extend((1..=d).map(|l| format!("x{l}")));
        header.push("Y".into());
        header.extend((1..=d).map(|l| format!("Z{l}")));
        writeln!(out, "{}", header.join(","))?;
        let stride = stride.max(1);
        for k in (0..=self.steps()).step_by(stride) {
            for i in 0..self.paths() {
                let mut row = vec![self.grid().time(k).to_string(), i.to_string()];
                row.extend(self.flow.state(k, i).iter().map(|v| v.to_string()));
                row.push(self.y(k, i).to_string());
                row.extend(self.z(k, i).iter().map(|v| v.to_string()));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Locate the window `[t, T]` on the noise grid.
pub(crate) fn window_on(noise: &NoisePath, window: (f64, f64)) -> Result<(usize, usize)> {
    let k0 = noise.grid().index_of(window.0)?;
    let k1 = noise.grid().index_of(window.1)?;
    if k1 <= k0 {
        return Err(invalid(format!("empty window [{}, {}]", window.0, window.1)));
    }
    Ok((k0, k1))
}

/// Solve on `[t, T]` with the backward noise `noise` shared by all paths and an i.i.d.
/// forward Brownian ensemble drawn from `config.seed` on the window grid.
pub fn solve_bdsde_lsmc(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    window: (f64, f64),
    config: &SolverConfig,
) -> Result<SolutionPanel> {
    config.basis.validate(coeffs.dim)?;
    let (k0, k1) = window_on(&noise, window)?;
    let grid = noise.grid().sub(k0, k1)?;
    let (_, weights) = config.starts.layout(coeffs.dim)?;
    let wiener = Arc::new(WienerEnsemble::sample(grid, coeffs.dim, weights.len(), config.seed));
    let flow = euler_maruyama_flow(
        coeffs,
        &config.starts,
        (grid.t_start(), grid.t_end()),
        wiener,
        config.blowup,
    )?;
    solve_on_flow(coeffs, noise, flow, config)
}

/// Backward recursion on a simulated flow. The flow grid must be a window of the noise grid.
pub fn solve_on_flow(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    flow: FlowPanel,
    config: &SolverConfig,
) -> Result<SolutionPanel> {
    let d = coeffs.dim;
    let n_noise = coeffs.g.len();
    if noise.components() < n_noise {
        return Err(invalid(format!(
            "coefficients use {n_noise} noise components but the path carries {}",
            noise.components()
        )));
    }
    let grid = *flow.grid();
    let (k0, k1) = window_on(&noise, (grid.t_start(), grid.t_end()))?;
    if k1 - k0 != grid.n_steps() {
        return Err(Error::Shape(format!(
            "flow has {} steps but the noise window has {}",
            grid.n_steps(),
            k1 - k0
        )));
    }
    let steps = grid.n_steps();
    let dt = grid.dt();
    let m = flow.paths();
    let valid = flow.valid().to_vec();
    let mut y = vec![0.0; (steps + 1) * m];
    let mut z = vec![0.0; (steps + 1) * m * d];

    // terminal values
    {
        let xt = flow.step(steps);
        let mut sv = vec![0.0; d * d];
        for i in 0..m {
            let x = &xt[i * d..(i + 1) * d];
            y[steps * m + i] = (coeffs.h)(x);
            if config.terminal_z == TerminalZ::Gradient {
                let mut grad = vec![0.0; d];
                let mut xp = x.to_vec();
                for l in 0..d {
                    let eps = 1e-6 * (1.0 + x[l].abs());
                    xp[l] = x[l] + eps;
                    let up = (coeffs.h)(&xp);
                    xp[l] = x[l] - eps;
                    let dn = (coeffs.h)(&xp);
                    xp[l] = x[l];
                    grad[l] = (up - dn) / (2.0 * eps);
                }
                (coeffs.sigma)(x, &mut sv);
                for l in 0..d {
                    z[(steps * m + i) * d + l] = (0..d).map(|r| sv[r * d + l] * grad[r]).sum();
                }
            }
        }
    }

    let mut fits: Vec<Option<StepFit>> = vec![None; steps];
    let mut max_condition: f64 = 0.0;
    let mut targets = vec![0.0; m * 3];
    let mut ztargets = vec![0.0; m * d];
    for k in (0..steps).rev() {
        let tk = grid.time(k);
        let tk1 = grid.time(k + 1);
        let db: Vec<f64> = (0..n_noise).map(|j| noise.db(k0 + k, j)).collect();
        let xk = flow.step(k);
        let xk1 = flow.step(k + 1);
        let (y_done, _) = y.split_at(((k + 2) * m).min(y.len()));
        let ynext = &y_done[(k + 1) * m..(k + 2) * m];
        targets
            .par_chunks_mut(3)
            .enumerate()
            .for_each(|(i, t)| {
                if !valid[i] {
                    t.fill(0.0);
                    return;
                }
                let yn = ynext[i];
                let x1 = &xk1[i * d..(i + 1) * d];
                let noise_term: f64 = coeffs
                    .g
                    .iter()
                    .zip(&db)
                    .map(|(gj, b)| (gj.g)(tk1, x1, yn) * b)
                    .sum();
                t[0] = yn;
                t[1] = yn - noise_term;
                t[2] = (coeffs.f)(tk, &xk[i * d..(i + 1) * d], yn) * dt;
            });
        if let Some(i) = (0..m).find(|&i| valid[i] && !targets[i * 3..i * 3 + 3].iter().all(|v| v.is_finite())) {
            return Err(non_finite(k, i));
        }
        let fit = Fit::new(&config.basis, xk, d, &valid, &targets, 3, k)?;
        max_condition = max_condition.max(fit.condition());
        // Z from the centred increment covariance
        ztargets
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, zt)| {
                if !valid[i] {
                    zt.fill(0.0);
                    return;
                }
                let centred = ynext[i] - fit.eval(&xk[i * d..(i + 1) * d], 0);
                let dw = flow.dw(k, i);
                for l in 0..d {
                    zt[l] = centred * dw[l] / dt;
                }
            });
        let zfit = fit.refit(xk, d, &valid, &ztargets, d);
        let iters = config.implicit_iterations;
        let (y_head, _) = y.split_at_mut((k + 1) * m);
        let ycur = &mut y_head[k * m..];
        let (z_head, _) = z.split_at_mut((k + 1) * m * d);
        let zcur = &mut z_head[k * m * d..];
        ycur.par_iter_mut()
            .zip(zcur.par_chunks_mut(d))
            .enumerate()
            .for_each(|(i, (yv, zv))| {
                let x = &xk[i * d..(i + 1) * d];
                let mut c = [0.0; 3];
                fit.eval_all(x, &mut c);
                let mut v = c[1] + c[2];
                for _ in 0..iters {
                    v = c[1] + (coeffs.f)(tk, x, v) * dt;
                }
                *yv = v;
                zfit.eval_all(x, zv);
            });
        if let Some(i) = (0..m).find(|&i| valid[i] && !y[k * m + i].is_finite()) {
            return Err(non_finite(k, i));
        }
        fits[k] = Some(StepFit { y: fit, z: zfit });
    }
    let invalid_paths = flow.invalid_count();
    Ok(SolutionPanel {
        meta: PanelMeta {
            truncation: coeffs.truncation,
            noise_dimension: n_noise,
            basis: config.basis.clone(),
            dt,
            t_start: grid.t_start(),
            t_end: grid.t_end(),
            paths: m,
            invalid_paths,
            max_condition,
        },
        flow,
        noise,
        noise_offset: k0,
        coeffs: coeffs.clone(),
        y,
        z,
        fits: fits.into_iter().map(|f| f.expect("every step fitted")).collect(),
        implicit_iterations: config.implicit_iterations,
    })
}

fn non_finite(step: usize, path: usize) -> Error {
    Error::NonFinite {
        step,
        path,
        hint: "Y diverged; the polynomial drift needs truncation (set a drift truncation level)".into(),
    }
}

/// Share of the `ρ^{-1}`-weighted grid mass that lies outside the region explored by the
/// flow at step `k` (with a two-node margin).
fn uncovered_mass(panel: &SolutionPanel, k: usize, grid: &SpatialGrid, weight: Option<&RhoWeight>) -> f64 {
    let d = panel.flow.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..panel.paths() {
        if !panel.flow.valid()[i] {
            continue;
        }
        for (l, v) in panel.flow.state(k, i).iter().enumerate() {
            lo[l] = lo[l].min(*v);
            hi[l] = hi[l].max(*v);
        }
    }
    let margin = 2.0 * grid.step();
    let mut x = vec![0.0; d];
    let (mut out, mut total) = (0.0, 0.0);
    for node in 0..grid.len() {
        grid.node_into(node, &mut x);
        let w = weight.map_or(1.0, |w| w.inv_rho(&x)) * grid.trapezoid_weight(node);
        total += w;
        if (0..d).any(|l| x[l] < lo[l] - margin || x[l] > hi[l] + margin) {
            out += w;
        }
    }
    out / total
}

/// Share of uncovered weighted mass tolerated by the read-out.
pub const COVERAGE_TOLERANCE: f64 = 1e-6;

/// `u(t_k, ·)` on `grid` from the step-`k` regression. Fails when the flow did not
/// explore the weighted bulk of the grid.
pub fn representation_field(
    panel: &SolutionPanel,
    k: usize,
    grid: &SpatialGrid,
    weight: Option<&RhoWeight>,
) -> Result<FieldSnapshot> {
    if grid.dim() != panel.flow.dim() {
        return Err(Error::Shape("grid dimension differs from the state dimension".into()));
    }
    if k > panel.steps() {
        return Err(invalid(format!("step {k} outside the panel")));
    }
    let share = uncovered_mass(panel, k, grid, weight);
    if share > COVERAGE_TOLERANCE {
        return Err(Error::Coverage(format!(
            "paths at t={} leave {:.3e} of the weighted grid mass unexplored; widen the starts",
            panel.grid().time(k),
            share
        )));
    }
    Ok(FieldSnapshot::from_fn(panel.grid().time(k), *grid, |x| panel.y_at(k, x)))
}

/// `u(t_k, ·)` for every `stride`-th step.
pub fn representation_sequence(
    panel: &SolutionPanel,
    grid: &SpatialGrid,
    weight: Option<&RhoWeight>,
    stride: usize,
) -> Result<Vec<FieldSnapshot>> {
    (0..=panel.steps())
        .step_by(stride.max(1))
        .map(|k| representation_field(panel, k, grid, weight))
        .collect()
}

/// Cauchy-difference series over an approximation parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub parameter: String,
    pub values: Vec<f64>,
    /// `diff_m[i]` compares rung `i` with rung `i + 1` in the time-integrated norm.
    pub diff_m: Vec<f64>,
    /// Same pair in the sup-in-time norm.
    pub diff_s: Vec<f64>,
    pub fitted_rate: f64,
    pub cauchy: bool,
    /// Extra named statistics (for instance `sup_abs_y`).
    pub stats: Vec<(String, f64)>,
}

impl LadderReport {
    pub fn stat(&self, name: &str) -> Option<f64> {
        self.stats.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "param,diff_M_norm,diff_S_norm,fitted_rate")?;
        for i in 0..self.diff_m.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.values[i + 1],
                self.diff_m[i],
                self.diff_s[i],
                self.fitted_rate
            )?;
        }
        Ok(())
    }
}

/// Discrete `(M^{2,0}, S^{2,0})` norms of `Y^a - Y^b` over panels sharing their flow.
pub fn panel_difference_norms(
    a: &SolutionPanel,
    b: &SolutionPanel,
    weight: Option<&RhoWeight>,
) -> Result<(f64, f64)> {
    if a.paths() != b.paths() || a.steps() != b.steps() {
        return Err(Error::Shape("panels differ in paths or steps".into()));
    }
    let diff: Vec<f64> = a.y.iter().zip(&b.y).map(|(u, v)| u - v).collect();
    let times = a.grid().times();
    let mut view = a.view_of(&diff, 1);
    view.times = &times;
    let spec = DiscountedNormSpec::new(0.0, 2.0, Horizon::Finite { t_end: a.grid().t_end() })?;
    let (s, m) = discounted_path_norm(&view, &spec, weight)?;
    Ok((m.sqrt(), s.sqrt()))
}

/// Successive-difference flag: nonincreasing after the first rung and final entry below `tol`.
pub fn is_cauchy(diffs: &[f64], tol: f64) -> bool {
    diffs.windows(2).skip(1).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-300)
        && diffs.last().is_some_and(|d| *d <= tol)
}

/// Solve with `f_n` for each `n` (shared noise, paths and basis) and compare rungs.
pub fn drift_ladder(
    coeffs: &CoefficientSet,
    levels: &[f64],
    noise: Arc<NoisePath>,
    window: (f64, f64),
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
    tol: f64,
) -> Result<(LadderReport, Vec<SolutionPanel>)> {
    if levels.len() < 2 || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("truncation levels must be increasing with at least two rungs"));
    }
    let panels: Vec<SolutionPanel> = levels
        .iter()
        .map(|&n| solve_bdsde_lsmc(&coeffs.with_drift_truncation(n)?, noise.clone(), window, config))
        .collect::<Result<_>>()?;
    let mut diff_m = Vec::new();
    let mut diff_s = Vec::new();
    for w in panels.windows(2) {
        let (m, s) = panel_difference_norms(&w[1], &w[0], weight)?;
        diff_m.push(m);
        diff_s.push(s);
    }
    let pts: Vec<(f64, f64)> = levels[1..]
        .iter()
        .zip(&diff_m)
        .filter(|(_, d)| **d > 0.0)
        .map(|(n, d)| (n.ln(), d.ln()))
        .collect();
    let fitted_rate = if pts.len() >= 2 {
        linear_fit(&pts).map(|f| f.slope).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let sup = panels.last().map(|p| p.sup_abs_y()).unwrap_or(0.0);
    Ok((
        LadderReport {
            parameter: "n".into(),
            values: levels.to_vec(),
            cauchy: is_cauchy(&diff_m, tol),
            diff_m,
            diff_s,
            fitted_rate,
            stats: vec![("sup_abs_y".into(), sup)],
        },
        panels,
    ))
}

/// Noise-dimension ladder averaged over independent backward-noise realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLadder {
    pub report: LadderReport,
    /// `Σ_{N<j<=N'} L_j²` per rung pair.
    pub tail_sums: Vec<f64>,
    /// Mean squared `M`-norm differences per rung pair.
    pub squared_diffs: Vec<f64>,
}

/// Solve with the first `N` components of `g` and `B̂` for each `N`. The backward noise
/// is redrawn `realizations` times (seeds derived from `seed`); every realization feeds all
/// rungs. Squared differences are regressed through the origin on the Lipschitz tail sums.
#[allow(clippy::too_many_arguments)]
pub fn noise_dimension_ladder(
    coeffs: &CoefficientSet,
    lambdas: &[f64],
    dims: &[usize],
    grid: TimeGrid,
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
    realizations: usize,
    seed: u64,
) -> Result<NoiseLadder> {
    if dims.len() < 2 || dims.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("noise dimensions must be increasing with at least two rungs"));
    }
    let nmax = *dims.last().expect("nonempty");
    if nmax > coeffs.g.len() || nmax > lambdas.len() {
        return Err(invalid(format!(
            "largest rung N={nmax} exceeds the available components"
        )));
    }
    if realizations == 0 {
        return Err(invalid("need at least one noise realization"));
    }
    let rungs: Vec<CoefficientSet> = dims
        .iter()
        .map(|&n| coeffs.with_noise_dimension(n))
        .collect::<Result<_>>()?;
    let pairs = dims.len() - 1;
    let mut sq = vec![0.0; pairs];
    let mut sup2 = vec![0.0; pairs];
    for r in 0..realizations {
        let noise = Arc::new(sample_qwiener(lambdas, nmax, grid, 0, derive_seed(seed, r as u64))?);
        let panels: Vec<SolutionPanel> = rungs
            .iter()
            .map(|c| solve_bdsde_lsmc(c, noise.clone(), (grid.t_start(), grid.t_end()), config))
            .collect::<Result<_>>()?;
        for i in 0..pairs {
            let (m, s) = panel_difference_norms(&panels[i + 1], &panels[i], weight)?;
            sq[i] += m * m / realizations as f64;
            sup2[i] += s * s / realizations as f64;
        }
    }
    let tail_sums: Vec<f64> = dims
        .windows(2)
        .map(|w| coeffs.g[w[0]..w[1]].iter().map(|g| g.lipschitz * g.lipschitz).sum())
        .collect();
    let num: f64 = sq.iter().zip(&tail_sums).map(|(a, b)| a * b).sum();
    let den: f64 = tail_sums.iter().map(|b| b * b).sum();
    let fitted_rate = if den > 0.0 { num / den } else { 0.0 };
    Ok(NoiseLadder {
        report: LadderReport {
            parameter: "N".into(),
            values: dims.iter().map(|&n| n as f64).collect(),
            diff_m: sq.iter().map(|v| v.sqrt()).collect(),
            diff_s: sup2.iter().map(|v| v.sqrt()).collect(),
            fitted_rate,
            cauchy: is_cauchy(&sq, f64::INFINITY),
            stats: vec![("realizations".into(), realizations as f64)],
        },
        tail_sums,
        squared_diffs: sq,
    })
}

/// Result of comparing `Y_s^{t,x}` with the restarted `Y_s^{s, X_s^{t,x}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowIdentity {
    pub deviation: f64,
    pub reference_norm: f64,
    pub relative: f64,
}

/// Solve on `[t, T]`, then restart at `s` from `X_s^{t,x}` on a grid `coarsen` times
/// coarser (sub-sampled noise, summed Brownian increments) and compare at `s` in `L²_ρ`.
pub fn flow_identity_check(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    window: (f64, f64),
    restart: f64,
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
    coarsen: usize,
) -> Result<FlowIdentity> {
    let full = solve_bdsde_lsmc(coeffs, noise.clone(), window, config)?;
    let ks = full.grid().index_of(restart)?;
    if ks == 0 || ks >= full.steps() {
        return Err(invalid("restart time must lie strictly inside the window"));
    }
    let points = PointCloud(full.flow().step(ks).to_vec());
    let (k0, _) = window_on(&noise, window)?;
    let ens = full.flow().wiener().window(ks, full.steps())?;
    let (coarse_noise, ens) = if coarsen > 1 {
        let sub_start = k0 + ks;
        if !sub_start.is_multiple_of(coarsen) || !noise.grid().n_steps().is_multiple_of(coarsen) {
            return Err(invalid("restart time does not lie on the coarse grid"));
        }
        (Arc::new(noise.coarsened(coarsen)?), ens.coarsened(coarsen)?)
    } else {
        (noise.clone(), ens)
    };
    let restarted_flow = cloud_flow(coeffs, &points, (restart, window.1), Arc::new(ens))?;
    let restarted = solve_on_flow(coeffs, coarse_noise, restarted_flow, config)?;
    let m = full.paths();
    let (mut dev, mut refn) = (0.0, 0.0);
    for i in 0..m {
        if !full.flow().valid()[i] {
            continue;
        }
        let x = full.flow().start(i);
        let w = full.flow().weights()[i] * weight.map_or(1.0, |w| w.inv_rho(x));
        let a = full.y(ks, i);
        let b = restarted.y(0, i);
        dev += w * (a - b) * (a - b);
        refn += w * a * a;
    }
    let (deviation, reference_norm) = (dev.sqrt(), refn.sqrt());
    Ok(FlowIdentity {
        deviation,
        reference_norm,
        relative: if reference_norm > 0.0 { deviation / reference_norm } else { deviation },
    })
}

/// Ceiling for `sup|Y|` when `f` is monotone with constant `μ` and `g = 0`:
/// `e^{μ⁺ T}(sup|h| + T sup|f(·,·,0)|)`.
pub fn monotone_sup_bound(sup_h: f64, sup_f_at_zero: f64, mu: f64, horizon: f64) -> f64 {
    (mu.max(0.0) * horizon).exp() * (sup_h + horizon * sup_f_at_zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::coefficients::NoiseCoefficient;

    fn noise(n: usize, comps: usize, seed: u64) -> Arc<NoisePath> {
        let lambdas = vec![1.0; comps];
        Arc::new(sample_qwiener(&lambdas, comps, TimeGrid::new(0.0, 1.0, n).unwrap(), 0, seed).unwrap())
    }

    fn config(paths: usize, degree: u32) -> SolverConfig {
        SolverConfig::new(
            PathStarts::Stratified { radius: 2.0, paths },
            RegressionBasis::polynomial(degree),
            7,
        )
    }

    #[test]
    fn deterministic_constant_problem() {
        let c = CoefficientSet::zero(1).with_terminal(|x| x[0]);
        let p = solve_bdsde_lsmc(&c, noise(20, 1, 1), (0.0, 1.0), &config(50, 2)).unwrap();
        for k in 0..=20 {
            for i in 0..50 {
                let e = (p.y(k, i) - p.flow().start(i)[0]).abs();
                // the 1e-8 ridge shrinks each step's fit by about that much
                assert!(e < 20.0 * 1e-7, "k={k} i={i} err={e}");
                assert!(p.z(k, i)[0].abs() < 1e-4);
            }
        }
    }

    #[test]
    fn scalar_linear_ode() {
        let c = CoefficientSet::zero(1).with_driver(|y| -y, |_| -1.0).with_terminal(|_| 1.0);
        let p = solve_bdsde_lsmc(&c, noise(1000, 1, 1), (0.0, 1.0), &config(20, 1)).unwrap();
        for k in [0, 500] {
            let s = p.grid().time(k);
            assert!((p.y(k, 3) - (-(1.0 - s)).exp()).abs() < 1e-3);
        }
    }

    #[test]
    fn terminal_condition_is_exact() {
        let c = CoefficientSet::zero(1)
            .with_scalar_diffusion(1.0)
            .with_terminal(|x| (x[0]).sin());
        let p = solve_bdsde_lsmc(&c, noise(10, 1, 1), (0.0, 1.0), &config(100, 3)).unwrap();
        for i in 0..100 {
            assert_eq!(p.y(10, i), p.flow().state(10, i)[0].sin());
        }
    }

    #[test]
    fn gamma_constant_linear_solution() {
        let gamma = 0.5;
        let c = CoefficientSet::zero(1)
            .with_scalar_diffusion(1.0)
            .with_noise(vec![NoiseCoefficient::constant(gamma)])
            .with_terminal(|x| x[0]);
        let nz = noise(100, 1, 3);
        let p = solve_bdsde_lsmc(&c, nz.clone(), (0.0, 1.0), &config(4000, 3)).unwrap();
        for k in [0, 50, 99] {
            for i in (0..4000).step_by(97) {
                let exact = p.flow().state(k, i)[0] - gamma * (nz.b(100, 0) - nz.b(k, 0));
                // regression noise accumulates like sqrt(T / M) per coefficient
                assert!((p.y(k, i) - exact).abs() < 5e-2, "k={k} {} vs {exact}", p.y(k, i));
            }
        }
        let zmean: f64 = (0..4000).map(|i| p.z(50, i)[0]).sum::<f64>() / 4000.0;
        assert!((zmean - 1.0).abs() < 5e-2);
    }

    #[test]
    fn too_few_paths_is_an_error() {
        let c = CoefficientSet::zero(1).with_terminal(|x| x[0]);
        let r = solve_bdsde_lsmc(&c, noise(4, 1, 1), (0.0, 1.0), &config(3, 5));
        assert!(matches!(r, Err(Error::TooFewPaths { .. })));
    }

    #[test]
    fn untruncated_blowup_is_reported() {
        let c = CoefficientSet::zero(1)
            .with_driver(|y| y * y * y, |y| 3.0 * y * y)
            .with_terminal(|_| 5.0);
        let r = solve_bdsde_lsmc(&c, noise(20, 1, 1), (0.0, 1.0), &config(20, 1));
        assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
    }

    #[test]
    fn scaling_equivariance() {
        let c = CoefficientSet::zero(1)
            .with_scalar_diffusion(1.0)
            .with_driver(|y| -0.5 * y, |_| -0.5)
            .with_noise(vec![NoiseCoefficient::constant(0.3)])
            .with_terminal(|x| x[0].tanh());
        let nz = noise(50, 1, 5);
        let a = solve_bdsde_lsmc(&c, nz.clone(), (0.0, 1.0), &config(500, 3)).unwrap();
        let b = solve_bdsde_lsmc(&c.scaled(2.0).unwrap(), nz, (0.0, 1.0), &config(500, 3)).unwrap();
        for k in [0, 25] {
            for i in (0..500).step_by(37) {
                assert!((b.y(k, i) - 2.0 * a.y(k, i)).abs() < 1e-10);
                assert!((b.z(k, i)[0] - 2.0 * a.z(k, i)[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_ladder_flat_without_noise() {
        let c = CoefficientSet::zero(1)
            .with_scalar_diffusion(1.0)
            .with_noise(vec![NoiseCoefficient::constant(0.0); 4])
            .with_terminal(|x| x[0]);
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let l = noise_dimension_ladder(&c, &[1.0; 4], &[1, 2, 4], grid, &config(40, 1), None, 2, 1).unwrap();
        assert!(l.squared_diffs.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn ladder_csv_has_documented_columns() {
        let r = LadderReport {
            parameter: "n".into(),
            values: vec![1.0, 2.0],
            diff_m: vec![0.5],
            diff_s: vec![0.25],
            fitted_rate: 1.0,
            cauchy: true,
            stats: vec![],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "param,diff_M_norm,diff_S_norm,fitted_rate\n2,0.5,0.25,1\n");
    }
}
