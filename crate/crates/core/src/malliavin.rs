//! Malliavin derivatives with respect to the backward noise: the linearized backward
//! equation, a bump-and-resolve oracle, and the Wiener-Sobolev compactness moduli.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsde::{representation_field, solve_bdsde_lsmc, window_on, SolutionPanel, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::model::coefficients::CoefficientSet;
use crate::noise::{derive_seed, sample_qwiener, NoisePath, TimeGrid};
use crate::regression::Fit;
use crate::spde::{solve_backward_spde_fd, SpdeConfig, TestFunction};
use crate::stats::{increasing_trend_p_value, linear_fit, richardson, LineFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Linearized,
    Bump { epsilons: usize },
}

/// `D_θ Y` and `D_θ Z` along a solved panel for one `θ` and one noise component.
#[derive(Debug, Clone)]
pub struct MalliavinPanel {
    pub theta: f64,
    /// Index of `θ` on the panel grid.
    pub theta_step: usize,
    pub component: usize,
    pub provenance: Provenance,
    paths: usize,
    dim: usize,
    dy: Vec<f64>,
    dz: Vec<f64>,
    fits: Vec<Option<Fit>>,
}

impl MalliavinPanel {
    pub fn dy(&self, k: usize, i: usize) -> f64 {
        self.dy[k * self.paths + i]
    }
    pub fn dz(&self, k: usize, i: usize) -> &[f64] {
        let off = (k * self.paths + i) * self.dim;
        &self.dz[off..off + self.dim]
    }
    pub fn dy_values(&self) -> &[f64] {
        &self.dy
    }

    /// `D_θ u(t_k, x)`: the step regression for `t_k < θ`, the source at `θ`, zero after.
    pub fn field_at(&self, base: &SolutionPanel, k: usize, x: &[f64]) -> f64 {
        if k > self.theta_step {
            return 0.0;
        }
        if k == self.theta_step {
            let y = base.y_at(k, x);
            return (base.coefficients().g[self.component].g)(self.theta, x, y);
        }
        self.fits[k].as_ref().map_or(0.0, |f| f.eval(x, 0))
    }

    /// Versioned little-endian layout: magic, version, `θ`, component, steps, paths, dim,
    /// then the time-major `D_θY` and `D_θZ` arrays.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        use byteorder::{LittleEndian, WriteBytesExt};
        out.write_all(b"BDSDMP\0\0")?;
        out.write_u32::<LittleEndian>(1)?;
        out.write_f64::<LittleEndian>(self.theta)?;
        out.write_u32::<LittleEndian>(self.component as u32)?;
        out.write_u64::<LittleEndian>((self.dy.len() / self.paths - 1) as u64)?;
        out.write_u64::<LittleEndian>(self.paths as u64)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        for v in self.dy.iter().chain(&self.dz) {
            out.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W, times: &[f64]) -> std::io::Result<()> {
        writeln!(out, "theta,t,path,DY")?;
        for (k, t) in times.iter().enumerate().take(self.theta_step + 1) {
            for i in 0..self.paths {
                writeln!(out, "{},{},{},{}", self.theta, t, i, self.dy(k, i))?;
            }
        }
        Ok(())
    }
}

fn theta_index(base: &SolutionPanel, theta: f64, component: usize) -> Result<usize> {
    if component >= base.coefficients().g.len() {
        return Err(invalid(format!("noise component {component} is not active")));
    }
    base.grid().index_of(theta)
}

/// Linear backward recursion for `D_θ Y` with source `g_j(θ, X_θ, Y_θ)`, the drift slope
/// `∂_y f` and noise slope `∂_y g` frozen along the base solution. Each step reuses the
/// base regression factorization, so this is the exact derivative of the discrete scheme
/// with respect to the increment of `B̂_j` ending at `θ`.
pub fn solve_malliavin_linearized(base: &SolutionPanel, theta: f64, component: usize) -> Result<MalliavinPanel> {
    let kt = theta_index(base, theta, component)?;
    if base.implicit_iterations() > 0 {
        return Err(invalid("the linearized equation follows the explicit scheme; solve the base panel with implicit_iterations = 0"));
    }
    let c = base.coefficients();
    let m = base.paths();
    let d = c.dim;
    let dt = base.grid().dt();
    let flow = base.flow();
    let valid = flow.valid();
    let mut dy = vec![0.0; (base.steps() + 1) * m];
    let mut dz = vec![0.0; (base.steps() + 1) * m * d];
    let mut fits: Vec<Option<Fit>> = vec![None; base.steps()];
    let gj = &c.g[component];
    for i in 0..m {
        dy[kt * m + i] = (gj.g)(theta, flow.state(kt, i), base.y(kt, i));
    }
    let mut targets = vec![0.0; m];
    let mut zt = vec![0.0; m * d];
    for k in (0..kt).rev() {
        let tk = base.grid().time(k);
        let tk1 = base.grid().time(k + 1);
        let db: Vec<f64> = (0..c.g.len()).map(|l| base.db(k, l)).collect();
        for i in 0..m {
            let next = dy[(k + 1) * m + i];
            targets[i] = if !valid[i] {
                0.0
            } else if k + 1 == kt {
                next
            } else {
                let x1 = flow.state(k + 1, i);
                let y1 = base.y(k + 1, i);
                let slope_g: f64 = c.g.iter().zip(&db).map(|(g, b)| (g.dg_dy)(tk1, x1, y1) * b).sum();
                let slope_f = (c.df_dy)(tk, flow.state(k, i), y1) * dt;
                next * (1.0 - slope_g + slope_f)
            };
        }
        let xk = flow.step(k);
        let fit = base.fits()[k].y.refit(xk, d, valid, &targets, 1);
        // Z from the centred covariance with the forward increments
        let cond = base.fits()[k].y.refit(xk, d, valid, &dy[(k + 1) * m..(k + 2) * m], 1);
        for i in 0..m {
            let x = &xk[i * d..(i + 1) * d];
            dy[k * m + i] = fit.eval(x, 0);
            let centred = dy[(k + 1) * m + i] - cond.eval(x, 0);
            let dw = flow.dw(k, i);
            for l in 0..d {
                zt[i * d + l] = if valid[i] { centred * dw[l] / dt } else { 0.0 };
            }
        }
        let zfit = base.fits()[k].y.refit(xk, d, valid, &zt, d);
        for i in 0..m {
            zfit.eval_all(&xk[i * d..(i + 1) * d], &mut dz[(k * m + i) * d..(k * m + i + 1) * d]);
        }
        fits[k] = Some(fit);
    }
    if let Some(idx) = dy.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: idx / m,
            path: idx % m,
            hint: "linearized equation diverged".into(),
        });
    }
    Ok(MalliavinPanel {
        theta,
        theta_step: kt,
        component,
        provenance: Provenance::Linearized,
        paths: m,
        dim: d,
        dy,
        dz,
        fits,
    })
}

/// Default bump sizes.
pub const DEFAULT_EPSILONS: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Re-solve with `B̂_j + ε 1_{[0,θ)}` for each `ε` and extrapolate `(Y^ε - Y)/ε` to
/// `ε → 0`. The base panel must come from `solve_bdsde_lsmc(coeffs, noise, window, config)`.
#[allow(clippy::too_many_arguments)]
pub fn bump_oracle(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    window: (f64, f64),
    config: &SolverConfig,
    base: &SolutionPanel,
    theta: f64,
    component: usize,
    epsilons: &[f64],
) -> Result<MalliavinPanel> {
    let kt = theta_index(base, theta, component)?;
    if epsilons.is_empty() || epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(invalid("bump sizes must be positive"));
    }
    let m = base.paths();
    let mut dy = vec![0.0; (base.steps() + 1) * m];
    if kt == 0 {
        return Ok(MalliavinPanel {
            theta,
            theta_step: 0,
            component,
            provenance: Provenance::Bump { epsilons: epsilons.len() },
            paths: m,
            dim: coeffs.dim,
            dy,
            dz: vec![0.0; (base.steps() + 1) * m * coeffs.dim],
            fits: vec![None; base.steps()],
        });
    }
    let (k0, _) = window_on(&noise, window)?;
    let scale = base.sup_abs_y().max(1e-300);
    let quotients: Vec<Vec<f64>> = epsilons
        .par_iter()
        .map(|&eps| -> Result<Vec<f64>> {
            let bumped = Arc::new(noise.with_bumped_increment(k0 + kt - 1, component, -eps)?);
            let p = solve_bdsde_lsmc(coeffs, bumped, window, config)?;
            let diffs: Vec<f64> = p.y_values().iter().zip(base.y_values()).map(|(a, b)| a - b).collect();
            let biggest = diffs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if biggest > 0.0 && biggest < 1e3 * f64::EPSILON * scale {
                return Err(Error::Numerical(format!(
                    "bump eps={eps} changes Y by {biggest:.3e}, below round-off; use a larger bump"
                )));
            }
            Ok(diffs.iter().map(|v| v / eps).collect())
        })
        .collect::<Result<_>>()?;
    for idx in 0..kt * m {
        let vals: Vec<f64> = quotients.iter().map(|q| q[idx]).collect();
        dy[idx] = if vals.len() == 1 { vals[0] } else { richardson(epsilons, &vals)? };
    }
    let c = base.coefficients();
    for i in 0..m {
        dy[kt * m + i] = (c.g[component].g)(theta, base.flow().state(kt, i), base.y(kt, i));
    }
    Ok(MalliavinPanel {
        theta,
        theta_step: kt,
        component,
        provenance: Provenance::Bump { epsilons: epsilons.len() },
        paths: m,
        dim: coeffs.dim,
        dy,
        dz: vec![0.0; (base.steps() + 1) * m * coeffs.dim],
        fits: vec![None; base.steps()],
    })
}

/// Largest `|a - b|` over steps `k < θ` divided by the largest `|b|` there.
pub fn relative_disagreement(a: &MalliavinPanel, b: &MalliavinPanel) -> Result<f64> {
    if a.theta_step != b.theta_step || a.paths != b.paths {
        return Err(Error::Shape("Malliavin panels differ in theta or paths".into()));
    }
    let n = a.theta_step * a.paths;
    let num = (0..n).map(|i| (a.dy[i] - b.dy[i]).abs()).fold(0.0, f64::max);
    let den = (0..n).map(|i| b.dy[i].abs()).fold(0.0, f64::max);
    Ok(if den > 0.0 { num / den } else { num })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulusFit {
    pub slope: f64,
    /// 95% interval half-width of the slope.
    pub half_width: f64,
}

impl ModulusFit {
    fn from_points(xs: &[f64], ys: &[f64]) -> Option<Self> {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
            .map(|(x, y)| (x.ln(), y.ln()))
            .collect();
        let fit: LineFit = linear_fit(&pts).ok()?;
        let half_width = if fit.slope_se.is_finite() && fit.points > 2 {
            use statrs::distribution::{ContinuousCDF, StudentsT};
            let t = StudentsT::new(0.0, 1.0, (fit.points - 2) as f64).ok()?;
            t.inverse_cdf(0.975) * fit.slope_se
        } else {
            f64::NAN
        };
        Some(Self { slope: fit.slope, half_width })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompactnessConfig {
    /// Drift truncation levels; empty means the untruncated drift only.
    pub levels: Vec<f64>,
    /// Backward-noise realizations used for expectations.
    pub realizations: usize,
    /// Spacing of the `θ` grid in time steps.
    pub theta_stride: usize,
    /// Time shifts `h` in steps for the time modulus.
    pub shifts: Vec<usize>,
    /// Shifts in units of `theta_stride` for the Malliavin modulus.
    pub malliavin_shifts: Vec<usize>,
    pub seed: u64,
    pub source: FieldSource,
    pub spde: SpdeConfig,
}

impl Default for CompactnessConfig {
    fn default() -> Self {
        Self {
            levels: Vec::new(),
            realizations: 8,
            theta_stride: 10,
            shifts: vec![2, 4, 8, 16],
            malliavin_shifts: vec![1, 2, 4],
            seed: 0,
            source: FieldSource::FiniteDifference,
            spde: SpdeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStatistics {
    pub level: Option<f64>,
    /// `E ∫ ‖u(s)‖²_{H¹} ds` over the grid box.
    pub h1: f64,
    /// `∫ ‖u^φ(s)‖²_{D^{1,2}} ds`, the largest over the battery.
    pub d12: f64,
    /// `(∫ |E u^φ(s+h) - E u^φ(s)|² ds)^{1/2}` per time shift.
    pub time_modulus: Vec<f64>,
    /// `(E ∫∫ |D_{θ+h} u^φ(s+h') - D_θ u^φ(s)|²)^{1/2}` per `(h, h')` pair.
    pub malliavin_modulus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    pub levels: Vec<LevelStatistics>,
    pub shifts: Vec<f64>,
    /// `(h, h')` shift pairs in time units.
    pub malliavin_pairs: Vec<(f64, f64)>,
    /// Log-log slope of the time modulus in `h` (largest level).
    pub time_exponent: Option<ModulusFit>,
    /// Log-log slope of the Malliavin modulus in `|h| + |h'|` (largest level).
    pub malliavin_exponent: Option<ModulusFit>,
    /// One-sided p-values of an increasing trend of the H¹ and D^{1,2} statistics across levels.
    pub h1_trend_p: f64,
    pub d12_trend_p: f64,
}

impl CompactnessReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,statistic,h,h_prime,value")?;
        for l in &self.levels {
            let lv = l.level.map_or("inf".to_string(), |v| v.to_string());
            writeln!(out, "{lv},h1,,,{}", l.h1)?;
            writeln!(out, "{lv},d12,,,{}", l.d12)?;
            for (h, v) in self.shifts.iter().zip(&l.time_modulus) {
                writeln!(out, "{lv},time_modulus,{h},,{v}")?;
            }
            for ((h, hp), v) in self.malliavin_pairs.iter().zip(&l.malliavin_modulus) {
                writeln!(out, "{lv},malliavin_modulus,{h},{hp},{v}")?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let fmt = |f: &Option<ModulusFit>| {
            f.map_or("n/a".to_string(), |f| format!("{:.3} ± {:.3}", f.slope, f.half_width))
        };
        format!(
            "levels: {}\ntime-modulus exponent: {}\nmalliavin-modulus exponent: {}\nH1 trend p-value: {:.4}\nD12 trend p-value: {:.4}\n",
            self.levels.len(),
            fmt(&self.time_exponent),
            fmt(&self.malliavin_exponent),
            self.h1_trend_p,
            self.d12_trend_p
        )
    }
}

/// Trend p-value that treats numerically flat series as trend-free.
fn trend_p(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 1.0;
    }
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if values.iter().all(|v| (v - values[0]).abs() <= 1e-10 * scale.max(1e-300)) {
        return 1.0;
    }
    let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect();
    linear_fit(&pts).map(|f| increasing_trend_p_value(&f)).unwrap_or(1.0)
}

/// Where the compactness diagnostics read `u` and `D_θ u` from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// Finite-difference solve on the grid; `D_θ u` by bumping the noise increment.
    #[default]
    FiniteDifference,
    /// Per-step regressions of the solved panel; `D_θ u` from the linearized equation.
    Regression,
}

/// Per-realization quantities for one level.
struct Sample {
    h1: f64,
    /// `u^φ(t_k)` per battery entry.
    u_phi: Vec<Vec<f64>>,
    /// `D_θ u^φ(t_k)` per battery entry, `θ` slice and step.
    d_phi: Vec<Vec<Vec<f64>>>,
}

/// Nodal values of `u(t_k)` and of `D_θ u(t_k)` for each `θ` slice.
type Fields = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>);

fn regression_fields(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    window: (f64, f64),
    solver: &SolverConfig,
    grid: &SpatialGrid,
    thetas: &[usize],
) -> Result<Fields> {
    let panel = solve_bdsde_lsmc(coeffs, noise, window, solver)?;
    let nodes = grid.nodes();
    let fields = (0..=panel.steps())
        .map(|k| representation_field(&panel, k, grid, None).map(|f| f.values))
        .collect::<Result<_>>()?;
    let mut dfields = Vec::with_capacity(thetas.len());
    for &kt in thetas {
        let mp = solve_malliavin_linearized(&panel, panel.grid().time(kt), 0)?;
        dfields.push(
            (0..=panel.steps())
                .map(|k| nodes.iter().map(|x| mp.field_at(&panel, k, x)).collect())
                .collect(),
        );
    }
    Ok((fields, dfields))
}

fn finite_difference_fields(
    coeffs: &CoefficientSet,
    noise: Arc<NoisePath>,
    window: (f64, f64),
    spde: &SpdeConfig,
    grid: &SpatialGrid,
    thetas: &[usize],
) -> Result<Fields> {
    let base = solve_backward_spde_fd(coeffs, &noise, window, grid, spde)?;
    let (k0, _) = window_on(&noise, window)?;
    let nodes = grid.nodes();
    let fields: Vec<Vec<f64>> = base.iter().map(|f| f.values.clone()).collect();
    let scale = fields.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let dfields = thetas
        .par_iter()
        .map(|&kt| -> Result<Vec<Vec<f64>>> {
            let mut quotients = Vec::with_capacity(DEFAULT_EPSILONS.len());
            for eps in DEFAULT_EPSILONS {
                let bumped = noise.with_bumped_increment(k0 + kt - 1, 0, -eps)?;
                let u = solve_backward_spde_fd(coeffs, &bumped, window, grid, spde)?;
                let q: Vec<Vec<f64>> = u
                    .iter()
                    .zip(&fields)
                    .map(|(a, b)| a.values.iter().zip(b).map(|(x, y)| (x - y) / eps).collect())
                    .collect();
                let biggest = q.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())) * eps;
                if biggest > 0.0 && biggest < 1e3 * f64::EPSILON * scale {
                    return Err(Error::Numerical(format!(
                        "bump eps={eps} changes u by {biggest:.3e}, below round-off"
                    )));
                }
                quotients.push(q);
            }
            let mut out = vec![vec![0.0; grid.len()]; fields.len()];
            for (k, row) in out.iter_mut().enumerate() {
                if k > kt {
                    break;
                }
                if k == kt {
                    let t = base[kt].time;
                    for (node, v) in row.iter_mut().enumerate() {
                        *v = (coeffs.g[0].g)(t, &nodes[node], fields[kt][node]);
                    }
                    break;
                }
                for (node, v) in row.iter_mut().enumerate() {
                    let vals: Vec<f64> = quotients.iter().map(|q| q[k][node]).collect();
                    *v = richardson(&DEFAULT_EPSILONS, &vals)?;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((fields, dfields))
}

fn h1_norm_sq(values: &[f64], grid: &SpatialGrid, w: &[f64]) -> f64 {
    let n = grid.per_dim();
    let d = grid.dim();
    let h = grid.step();
    let mut acc = 0.0;
    for node in 0..grid.len() {
        if grid.is_boundary(node) {
            continue;
        }
        let mut g2 = 0.0;
        for l in 0..d {
            let stride = if d == 1 || l == 1 { 1 } else { n };
            let g = (values[node + stride] - values[node - stride]) / (2.0 * h);
            g2 += g * g;
        }
        acc += (values[node] * values[node] + g2) * w[node];
    }
    acc
}

fn summarize(fields: &Fields, grid: &SpatialGrid, phis: &[Vec<f64>], dt: f64) -> Sample {
    let w: Vec<f64> = (0..grid.len()).map(|i| grid.trapezoid_weight(i)).collect();
    let (u, du) = fields;
    let h1_path: Vec<f64> = u.iter().map(|v| h1_norm_sq(v, grid, &w)).collect();
    let integrate = |vals: &[f64], phi: &[f64]| -> f64 { vals.iter().zip(phi).zip(&w).map(|((u, p), w)| u * p * w).sum() };
    let u_phi = phis.iter().map(|phi| u.iter().map(|f| integrate(f, phi)).collect()).collect();
    let d_phi = phis
        .iter()
        .map(|phi| du.iter().map(|slice| slice.iter().map(|f| integrate(f, phi)).collect()).collect())
        .collect();
    Sample { h1: trapezoid(&h1_path, dt), u_phi, d_phi }
}

fn trapezoid(v: &[f64], dt: f64) -> f64 {
    v.windows(2).map(|w| 0.5 * dt * (w[0] + w[1])).sum()
}

/// Estimates the four compactness statistics over the drift family. Expectations are
/// averages over `realizations` backward-noise paths sharing the forward ensemble seed.
pub fn compactness_diagnostics(
    coeffs: &CoefficientSet,
    lambdas: &[f64],
    time: TimeGrid,
    solver: &SolverConfig,
    grid: &SpatialGrid,
    battery: &[TestFunction],
    config: &CompactnessConfig,
) -> Result<CompactnessReport> {
    if config.realizations == 0 || config.theta_stride == 0 || battery.is_empty() {
        return Err(invalid("need realizations, a theta stride and at least one test function"));
    }
    let steps = time.n_steps();
    if config.shifts.iter().any(|h| *h == 0 || *h >= steps) {
        return Err(invalid("time shifts must lie in 1..steps"));
    }
    if config.levels.len() == 1 {
        log::warn!("a single level makes the supremum over the family degenerate");
    }
    let dt = time.dt();
    let thetas: Vec<usize> = if coeffs.g.is_empty() {
        Vec::new()
    } else {
        (1..=steps / config.theta_stride).map(|i| i * config.theta_stride).collect()
    };
    let dtheta = config.theta_stride as f64 * dt;
    let window = (time.t_start(), time.t_end());
    let level_list: Vec<Option<f64>> = if config.levels.is_empty() {
        vec![None]
    } else {
        config.levels.iter().map(|l| Some(*l)).collect()
    };
    let pairs: Vec<(usize, usize)> = config
        .malliavin_shifts
        .iter()
        .flat_map(|&s| [(s, 0), (0, s), (s, s)])
        .collect();
    let n_noise = coeffs.g.len();
    let phis: Vec<Vec<f64>> = battery.iter().map(|p| grid.nodes().iter().map(|x| p.value(x)).collect()).collect();
    let mut levels = Vec::new();
    for level in &level_list {
        let c = match level {
            Some(n) => coeffs.with_drift_truncation(*n)?,
            None => coeffs.clone(),
        };
        let samples: Vec<Sample> = (0..config.realizations)
            .into_par_iter()
            .map(|r| -> Result<Sample> {
                let noise = Arc::new(sample_qwiener(lambdas, n_noise, time, 0, derive_seed(config.seed, r as u64))?);
                let fields = match config.source {
                    FieldSource::FiniteDifference => finite_difference_fields(&c, noise, window, &config.spde, grid, &thetas)?,
                    FieldSource::Regression => regression_fields(&c, noise, window, solver, grid, &thetas)?,
                };
                Ok(summarize(&fields, grid, &phis, dt))
            })
            .collect::<Result<_>>()?;
        let rn = samples.len() as f64;
        let h1 = samples.iter().map(|s| s.h1).sum::<f64>() / rn;
        let mut d12: f64 = 0.0;
        let mut time_modulus = vec![0.0; config.shifts.len()];
        let mut malliavin_modulus = vec![0.0; pairs.len()];
        for b in 0..battery.len() {
            // ∫ (E|u^φ|² + E ∫ |D_θ u^φ|² dθ) ds
            let per_step: Vec<f64> = (0..=steps)
                .map(|k| {
                    samples
                        .iter()
                        .map(|s| {
                            let dsum: f64 = s.d_phi[b].iter().map(|dv| dv[k] * dv[k]).sum::<f64>() * dtheta;
                            s.u_phi[b][k] * s.u_phi[b][k] + dsum
                        })
                        .sum::<f64>()
                        / rn
                })
                .collect();
            d12 = d12.max(trapezoid(&per_step, dt));
            let mean_u: Vec<f64> = (0..=steps)
                .map(|k| samples.iter().map(|s| s.u_phi[b][k]).sum::<f64>() / rn)
                .collect();
            for (slot, &h) in time_modulus.iter_mut().zip(&config.shifts) {
                let v: f64 = (0..=steps - h).map(|k| (mean_u[k + h] - mean_u[k]).powi(2)).sum::<f64>() * dt;
                *slot = f64::max(*slot, v.sqrt());
            }
            for (slot, &(hs, hp)) in malliavin_modulus.iter_mut().zip(&pairs) {
                let mut acc = 0.0;
                let lag = hp * config.theta_stride;
                if lag > steps {
                    continue;
                }
                for s in &samples {
                    for th in 0..thetas.len().saturating_sub(hs) {
                        for k in 0..=steps.saturating_sub(lag) {
                            let diff = s.d_phi[b][th + hs][k + lag] - s.d_phi[b][th][k];
                            acc += diff * diff * dt * dtheta;
                        }
                    }
                }
                *slot = f64::max(*slot, (acc / rn).sqrt());
            }
        }
        levels.push(LevelStatistics { level: *level, h1, d12, time_modulus, malliavin_modulus });
    }
    let shifts: Vec<f64> = config.shifts.iter().map(|h| *h as f64 * dt).collect();
    let malliavin_pairs: Vec<(f64, f64)> = pairs
        .iter()
        .map(|(a, b)| (*a as f64 * dtheta, *b as f64 * dtheta))
        .collect();
    let last = levels.last().expect("at least one level");
    let time_exponent = ModulusFit::from_points(&shifts, &last.time_modulus);
    let sums: Vec<f64> = malliavin_pairs.iter().map(|(a, b)| a + b).collect();
    let malliavin_exponent = ModulusFit::from_points(&sums, &last.malliavin_modulus);
    let h1_trend_p = trend_p(&levels.iter().map(|l| l.h1).collect::<Vec<_>>());
    let d12_trend_p = trend_p(&levels.iter().map(|l| l.d12).collect::<Vec<_>>());
    Ok(CompactnessReport {
        levels,
        shifts,
        malliavin_pairs,
        time_exponent,
        malliavin_exponent,
        h1_trend_p,
        d12_trend_p,
    })
}
