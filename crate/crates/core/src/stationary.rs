//! Infinite-horizon BDSDEs by horizon truncation, the stationarity shift test and the
//! pull-back construction of the stationary SPDE solution.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsde::{is_cauchy, solve_bdsde_lsmc, LadderReport, SolutionPanel, SolverConfig};
use crate::error::{invalid, Error, Result};
use crate::grid::{FieldSnapshot, SpatialGrid};
use crate::model::coefficients::CoefficientSet;
use crate::model::norms::{discounted_path_norm, weighted_power_sum, DiscountedNormSpec, Horizon};
use crate::model::weights::RhoWeight;
use crate::noise::{apply_shift, derive_seed, reverse_time, sample_qwiener, NoisePath, ShiftMode, TimeGrid, TwoSidedPath};
use crate::spde::{solve_backward_spde_fd, SpdeConfig};
use crate::stats::{ks_two_sample, linear_fit, mean, variance, KsResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountCheck {
    pub pass: bool,
    /// `2μ - K - p(2p-1) Σ L_j`.
    pub margin: f64,
}

/// Exact evaluation of `2μ - K - p(2p-1) Σ_j L_j > 0`.
pub fn check_discount_condition(mu: f64, k: f64, p: f64, lipschitz_sum: f64) -> Result<DiscountCheck> {
    if !(mu > 0.0 && k > 0.0) {
        return Err(invalid(format!("need mu > 0 and K > 0, got mu={mu}, K={k}")));
    }
    if !(lipschitz_sum >= 0.0 && p >= 1.0) {
        return Err(invalid("Lipschitz sum must be nonnegative and p >= 1"));
    }
    let margin = 2.0 * mu - k - p * (2.0 * p - 1.0) * lipschitz_sum;
    Ok(DiscountCheck { pass: margin > 0.0, margin })
}

/// Discount that keeps 10% of the admissible room: `0.9 (2μ - p(2p-1) Σ L_j)`.
pub fn default_discount(mu: f64, p: f64, lipschitz_sum: f64) -> Result<f64> {
    let room = 2.0 * mu - p * (2.0 * p - 1.0) * lipschitz_sum;
    if !(room > 0.0) {
        return Err(invalid(format!(
            "no positive discount satisfies the condition (2mu - p(2p-1)sum L = {room})"
        )));
    }
    Ok(0.9 * room)
}

/// `{2, 4, 8, 16} / μ`.
pub fn default_horizons(mu: f64) -> Vec<f64> {
    [2.0, 4.0, 8.0, 16.0].iter().map(|h| h / mu).collect()
}

/// Horizons rounded to the nearest multiple of `dt`.
pub fn snap_horizons(horizons: &[f64], dt: f64) -> Vec<f64> {
    horizons.iter().map(|h| (h / dt).round().max(1.0) * dt).collect()
}

pub struct InfiniteHorizon {
    /// Largest-horizon panel: the limit candidate.
    pub candidate: SolutionPanel,
    pub rungs: Vec<SolutionPanel>,
    pub report: LadderReport,
    pub discount: f64,
    pub check: DiscountCheck,
}

fn monotonicity_mu(coeffs: &CoefficientSet) -> f64 {
    -coeffs.constants.monotonicity
}

/// Solve with `h = 0` on `[t, t + T_i]` for each horizon and compare consecutive rungs on
/// their common window in the discounted `S^{2p}` and `M^{2p}` norms. `noise` must cover
/// `[t, t + max T_i]`.
#[allow(clippy::too_many_arguments)]
pub fn solve_infinite_horizon(
    coeffs: &CoefficientSet,
    t: f64,
    horizons: &[f64],
    discount: Option<f64>,
    noise: Arc<NoisePath>,
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
    tol: f64,
) -> Result<InfiniteHorizon> {
    if horizons.len() < 2 || horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(invalid("horizons must be positive, increasing, with at least two rungs"));
    }
    let mu = monotonicity_mu(coeffs);
    let p = coeffs.constants.order as f64;
    let lsum = coeffs.lipschitz_sum();
    let k = match discount {
        Some(k) => k,
        None => default_discount(mu, p, lsum)?,
    };
    let check = check_discount_condition(mu, k, p, lsum)?;
    if !check.pass {
        return Err(invalid(format!(
            "discount condition fails: 2mu - K - p(2p-1)sum L = {}",
            check.margin
        )));
    }
    let zero_terminal = coeffs.clone().with_terminal(|_| 0.0);
    let rungs: Vec<SolutionPanel> = horizons
        .par_iter()
        .map(|h| solve_bdsde_lsmc(&zero_terminal, noise.clone(), (t, t + h), config))
        .collect::<Result<_>>()?;
    let mut diff_m = Vec::new();
    let mut diff_s = Vec::new();
    let mut start_diffs = Vec::new();
    for w in rungs.windows(2) {
        let (short, long) = (&w[0], &w[1]);
        let steps = short.steps();
        let m = short.paths();
        let diff: Vec<f64> = (0..(steps + 1) * m)
            .map(|idx| long.y_values()[idx] - short.y_values()[idx])
            .collect();
        let times: Vec<f64> = short.grid().times().iter().map(|s| s - t).collect();
        let mut view = short.view_of(&diff, 1);
        view.times = &times;
        let spec = DiscountedNormSpec::new(
            k,
            2.0 * p,
            Horizon::TruncatedInfinite { t_end: times[steps] },
        )?;
        let (sup, integral) = discounted_path_norm(&view, &spec, weight)?;
        diff_s.push(sup.powf(0.5 / p));
        diff_m.push(integral.powf(0.5 / p));
        start_diffs.push(view.slice_power(0, 2.0, weight).sqrt());
    }
    // decay of the rung differences at the start time against the shorter horizon
    let pts: Vec<(f64, f64)> = horizons
        .iter()
        .zip(&start_diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(h, d)| (*h, d.ln()))
        .collect();
    let fitted_rate = if pts.len() >= 2 { -linear_fit(&pts)?.slope } else { f64::NAN };
    let mut stats = vec![("discount".into(), k), ("discount_margin".into(), check.margin)];
    stats.extend(start_diffs.iter().enumerate().map(|(i, d)| (format!("start_diff_{i}"), *d)));
    let report = LadderReport {
        parameter: "T".into(),
        values: horizons.to_vec(),
        cauchy: is_cauchy(&diff_s, tol),
        diff_m,
        diff_s,
        fitted_rate,
        stats,
    };
    if !report.cauchy {
        log::warn!("horizon ladder is not Cauchy within {tol} at the largest horizon");
    }
    let mut rungs = rungs;
    let candidate = rungs.pop().expect("at least two rungs");
    rungs.push(candidate.clone());
    Ok(InfiniteHorizon { candidate, rungs, report, discount: k, check })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// `‖θ'_r ∘ Y_t^{t,·} - Y_{t+r}^{t+r,·}‖_{L²_ρ}` relative to `‖Y_{t+r}^{t+r,·}‖`.
    pub pathwise_deviation: f64,
    pub pathwise_absolute: f64,
    pub samples_start: Vec<f64>,
    pub samples_shifted: Vec<f64>,
    pub ks: Option<KsResult>,
    pub variance_start: f64,
    pub variance_shifted: f64,
}

/// Pathwise half of the stationarity test on one master path covering `[0, t + r + H]`.
pub fn pathwise_shift_deviation(
    coeffs: &CoefficientSet,
    master: &NoisePath,
    t: f64,
    r: f64,
    horizon: f64,
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
) -> Result<(f64, f64)> {
    let zero_terminal = coeffs.clone().with_terminal(|_| 0.0);
    let shifted = Arc::new(apply_shift(master, r, ShiftMode::ThetaPrime)?.materialize()?);
    let a = solve_bdsde_lsmc(&zero_terminal, shifted, (t, t + horizon), config)?;
    let b = solve_bdsde_lsmc(&zero_terminal, Arc::new(master.clone()), (t + r, t + r + horizon), config)?;
    let (mut dev, mut norm) = (0.0, 0.0);
    for i in 0..a.paths() {
        if !(a.flow().valid()[i] && b.flow().valid()[i]) {
            continue;
        }
        let w = a.flow().weights()[i] * weight.map_or(1.0, |w| w.inv_rho(a.flow().start(i)));
        let (ya, yb) = (a.y(0, i), b.y(0, i));
        dev += w * (ya - yb) * (ya - yb);
        norm += w * yb * yb;
    }
    let (dev, norm) = (dev.sqrt(), norm.sqrt());
    Ok((if norm > 0.0 { dev / norm } else { dev }, dev))
}

/// Both halves of the stationarity test: the pathwise identity on master `seed`, and a
/// two-sample comparison of `Y_0^{0,x0}` and `Y_r^{r,x0}` over `masters` independent paths.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_test(
    coeffs: &CoefficientSet,
    lambdas: &[f64],
    dt: f64,
    r: f64,
    horizon: f64,
    x0: &[f64],
    config: &SolverConfig,
    weight: Option<&RhoWeight>,
    masters: usize,
    seed: u64,
) -> Result<StationarityReport> {
    if x0.len() != coeffs.dim {
        return Err(Error::Shape("x0 dimension differs from the state dimension".into()));
    }
    let n = coeffs.g.len();
    let grid = TimeGrid::with_step(0.0, r + horizon, dt)?;
    let first = sample_qwiener(lambdas, n, grid, 0, derive_seed(seed, 0))?;
    let (pathwise_deviation, pathwise_absolute) =
        pathwise_shift_deviation(coeffs, &first, 0.0, r, horizon, config, weight)?;
    let zero_terminal = coeffs.clone().with_terminal(|_| 0.0);
    let pairs: Vec<(f64, f64)> = (0..masters)
        .into_par_iter()
        .map(|m| -> Result<(f64, f64)> {
            let noise = Arc::new(sample_qwiener(lambdas, n, grid, 0, derive_seed(seed, m as u64))?);
            let a = solve_bdsde_lsmc(&zero_terminal, noise.clone(), (0.0, horizon), config)?;
            let b = solve_bdsde_lsmc(&zero_terminal, noise, (r, r + horizon), config)?;
            Ok((a.y_at(0, x0), b.y_at(0, x0)))
        })
        .collect::<Result<_>>()?;
    let samples_start: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let samples_shifted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ks = if masters >= 2 { Some(ks_two_sample(&samples_start, &samples_shifted)?) } else { None };
    let var = |v: &[f64]| if v.len() >= 2 { variance(v) } else { f64::NAN };
    Ok(StationarityReport {
        pathwise_deviation,
        pathwise_absolute,
        variance_start: var(&samples_start),
        variance_shifted: var(&samples_shifted),
        samples_start,
        samples_shifted,
        ks,
    })
}

/// Exact stationary variance `γ² λ₁ / (2μ)` of `f = -μy (+c)`, `g = γ`.
pub fn convolution_variance(gamma: f64, lambda: f64, mu: f64) -> f64 {
    gamma * gamma * lambda / (2.0 * mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullbackSeries {
    pub horizons: Vec<f64>,
    /// `v(T, h, θ_{-T}ω)` at the reference time 0 for each horizon.
    pub fields: Vec<FieldSnapshot>,
    /// `‖v(T_{i+1}) - v(T_i)‖_{L²_ρ}`.
    pub diffs: Vec<f64>,
    /// `exp(slope)` of `log diff` against `T`: the per-unit-time contraction factor.
    pub fitted_factor: f64,
    pub candidate_distance: Option<f64>,
    pub candidate_relative: Option<f64>,
}

/// Fitted per-unit-time factor of a difference series indexed by the shorter horizon.
pub fn geometric_factor(horizons: &[f64], diffs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = horizons
        .iter()
        .zip(diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(h, d)| (*h, d.ln()))
        .collect();
    linear_fit(&pts).map(|f| f.slope.exp()).unwrap_or(f64::NAN)
}

/// Forward field at time 0 started from `h` at `-T`: the backward SPDE on `[0, T]` driven
/// by the reversal of the window `[-T, 0]`, read at its start.
pub fn pullback_field(
    coeffs: &CoefficientSet,
    noise: &TwoSidedPath,
    horizon: f64,
    grid: &SpatialGrid,
    spde: &SpdeConfig,
) -> Result<FieldSnapshot> {
    let window = noise.window(-horizon, 0.0)?;
    let t_end = window.grid().t_end();
    let bhat = reverse_time(&window, t_end)?;
    let u = solve_backward_spde_fd(coeffs, &bhat, (0.0, t_end), grid, spde)?;
    let mut v = u.into_iter().next().expect("nonempty sequence");
    v.time = 0.0;
    Ok(v)
}

/// Pull-back series on one master two-sided path, optionally compared with a limit
/// candidate field at time 0.
pub fn pullback_experiment(
    coeffs: &CoefficientSet,
    horizons: &[f64],
    noise: &TwoSidedPath,
    grid: &SpatialGrid,
    spde: &SpdeConfig,
    weight: &RhoWeight,
    candidate: Option<&FieldSnapshot>,
) -> Result<PullbackSeries> {
    if horizons.len() < 2 || horizons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("horizons must be increasing with at least two entries"));
    }
    let fields: Vec<FieldSnapshot> = horizons
        .par_iter()
        .map(|h| pullback_field(coeffs, noise, *h, grid, spde))
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = fields
        .windows(2)
        .map(|w| w[1].difference(&w[0]).map(|d| weighted_power_sum(&d, 2.0, weight).sqrt()))
        .collect::<Result<_>>()?;
    let fitted_factor = geometric_factor(&horizons[..horizons.len() - 1], &diffs);
    let (candidate_distance, candidate_relative) = match candidate {
        Some(c) => {
            let last = fields.last().expect("nonempty");
            let d = weighted_power_sum(&last.difference(c)?, 2.0, weight).sqrt();
            let n = weighted_power_sum(c, 2.0, weight).sqrt();
            (Some(d), Some(if n > 0.0 { d / n } else { d }))
        }
        None => (None, None),
    };
    Ok(PullbackSeries {
        horizons: horizons.to_vec(),
        fields,
        diffs,
        fitted_factor,
        candidate_distance,
        candidate_relative,
    })
}

/// Root-mean-square pull-back differences over independent master paths.
#[allow(clippy::too_many_arguments)]
pub fn pullback_rms(
    coeffs: &CoefficientSet,
    horizons: &[f64],
    lambdas: &[f64],
    dt: f64,
    grid: &SpatialGrid,
    spde: &SpdeConfig,
    weight: &RhoWeight,
    masters: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    let top = *horizons.last().ok_or_else(|| invalid("no horizons"))?;
    let series: Vec<Vec<f64>> = (0..masters)
        .into_par_iter()
        .map(|m| -> Result<Vec<f64>> {
            let noise = TwoSidedPath::sample(lambdas, coeffs.g.len(), dt, top, dt, derive_seed(seed, m as u64))?;
            Ok(pullback_experiment(coeffs, horizons, &noise, grid, spde, weight, None)?.diffs)
        })
        .collect::<Result<_>>()?;
    let rms: Vec<f64> = (0..horizons.len() - 1)
        .map(|i| mean(&series.iter().map(|s| s[i] * s[i]).collect::<Vec<_>>()).sqrt())
        .collect();
    let factor = geometric_factor(&horizons[..horizons.len() - 1], &rms);
    Ok((rms, factor))
}

/// CSV with columns `T,diff_norm,fitted_rate,candidate_distance`; the difference in row
/// `i` compares horizon `i` with horizon `i + 1`.
pub fn write_series_csv<W: Write>(
    horizons: &[f64],
    diffs: &[f64],
    fitted_rate: f64,
    candidate_distance: Option<f64>,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "T,diff_norm,fitted_rate,candidate_distance")?;
    for (i, d) in diffs.iter().enumerate() {
        let c = if i + 1 == diffs.len() { candidate_distance.map_or(String::new(), |c| c.to_string()) } else { String::new() };
        writeln!(out, "{},{},{},{}", horizons[i], d, fitted_rate, c)?;
    }
    Ok(())
}
