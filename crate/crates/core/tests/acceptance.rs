use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use bdsde::bdsde::{
    drift_ladder, flow_identity_check, noise_dimension_ladder, panel_difference_norms, representation_sequence,
    solve_bdsde_lsmc, SolverConfig,
};
use bdsde::experiment::presets::{cubic_monotone, gamma_constant_g, heat, DriftKind, LinearMu};
use bdsde::experiment::{run, ExperimentConfig, Overrides, ALL_EXPERIMENTS};
use bdsde::forward::PathStarts;
use bdsde::grid::SpatialGrid;
use bdsde::malliavin::{
    bump_oracle, compactness_diagnostics, relative_disagreement, solve_malliavin_linearized, CompactnessConfig,
    DEFAULT_EPSILONS,
};
use bdsde::model::coefficients::{CoefficientSet, NoiseCoefficient, TerminalSpec};
use bdsde::model::weights::RhoWeight;
use bdsde::noise::{
    backward_ito_integral, derive_seed, reflected_forward_integral, reverse_time, sample_qwiener, TimeGrid,
    TwoSidedPath,
};
use bdsde::regression::RegressionBasis;
use bdsde::spde::{correspondence_error, solve_backward_spde_fd, SpdeConfig, TestFunctionBattery};
use bdsde::stationary::{
    convolution_variance, pullback_experiment, pullback_rms, solve_infinite_horizon, stationarity_test,
};
use bdsde::stats::{ks_two_sample, linear_fit};
use bdsde::bdsde::representation_field;

type Outcome = bdsde::Result<(bool, String)>;
type Criterion = (&'static str, fn() -> Outcome);

fn rho() -> RhoWeight {
    RhoWeight::new(2.0, 1).unwrap()
}

fn linear_mu(gamma: f64, drift: DriftKind, terminal: TerminalSpec) -> CoefficientSet {
    LinearMu { gamma, drift, terminal, ..LinearMu::default() }.build().unwrap()
}

fn stratified(radius: f64, paths: usize, degree: u32, seed: u64) -> SolverConfig {
    SolverConfig::new(PathStarts::Stratified { radius, paths }, RegressionBasis::polynomial(degree), seed)
}

fn linear_exactness() -> Outcome {
    let start = Instant::now();
    let gamma = 0.5;
    let coeffs = gamma_constant_g();
    let grid = TimeGrid::with_step(0.0, 1.0, 1e-3)?;
    let noise = Arc::new(sample_qwiener(&[1.0], 1, grid, 0, derive_seed(1, 0))?);
    let panel = solve_bdsde_lsmc(&coeffs, noise.clone(), (0.0, 1.0), &stratified(6.0, 20_000, 3, derive_seed(1, 1)))?;
    let w = rho();
    let n = panel.steps();
    let (mut worst, mut z_err, mut z_ref) = (0.0_f64, 0.0, 0.0);
    for k in 0..=n {
        let (mut e, mut r) = (0.0, 0.0);
        for i in 0..panel.paths() {
            let wi = panel.flow().weights()[i] * w.inv_rho(panel.flow().start(i));
            let exact = panel.flow().state(k, i)[0] - gamma * (noise.b(n, 0) - noise.b(k, 0));
            let y = panel.y(k, i);
            e += wi * (y - exact).powi(2);
            r += wi * y * y;
            if k < n {
                z_err += wi * (panel.z(k, i)[0] - 1.0).powi(2);
                z_ref += wi;
            }
        }
        worst = worst.max((e / r).sqrt());
    }
    let z_rel = (z_err / z_ref).sqrt();
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-2 && z_rel <= 5e-2 && secs <= 60.0,
        format!("rel L2 error {worst:.2e}, Z error {z_rel:.2e}, {secs:.1} s of 60 s allowed"),
    ))
}

fn correspondence() -> Outcome {
    let start = Instant::now();
    let coeffs = cubic_monotone().with_drift_truncation(4.0)?;
    let time = TimeGrid::with_step(0.0, 1.0, 2e-3)?;
    let noise = Arc::new(sample_qwiener(&[1.0, 0.25], 2, time, 0, derive_seed(2, 0))?);
    let grid = SpatialGrid::new(1, 6.0, 0.05)?;
    let u = solve_backward_spde_fd(&coeffs, &noise, (0.0, 1.0), &grid, &SpdeConfig::default())?;
    let config = SolverConfig::new(
        PathStarts::Stratified { radius: 8.0, paths: 8000 },
        RegressionBasis::hat(-10.0, 10.0, 80),
        derive_seed(2, 1),
    );
    let panel = solve_bdsde_lsmc(&coeffs, noise, (0.0, 1.0), &config)?;
    let diagonal = representation_sequence(&panel, &grid, Some(&rho()), 50)?;
    let r = correspondence_error(&u, &diagonal, &rho())?;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        r.max_relative <= 5e-2 && secs <= 300.0,
        format!("max relative error {:.2e}, {secs:.1} s of 300 s allowed", r.max_relative),
    ))
}

fn drift_cauchy() -> Outcome {
    let coeffs = cubic_monotone();
    let time = TimeGrid::with_step(0.0, 1.0, 1e-2)?;
    let noise = Arc::new(sample_qwiener(&[1.0, 0.25], 2, time, 0, derive_seed(3, 0))?);
    let config = SolverConfig::new(
        PathStarts::Stratified { radius: 6.0, paths: 2000 },
        RegressionBasis::hat(-8.0, 8.0, 32),
        derive_seed(3, 1),
    );
    let w = rho();
    let levels = [1.0, 1.5, 2.0, 3.0, 4.0];
    let (report, panels) = drift_ladder(&coeffs, &levels, noise.clone(), (0.0, 1.0), &config, Some(&w), 1e-3)?;
    let d = &report.diff_m;
    // strictly decreasing while positive; rungs past the saturation level must vanish
    let decreasing = d.windows(2).all(|p| p[1] < p[0] || p[1] == 0.0);
    let last = *d.last().unwrap();
    let sup = panels.last().unwrap().sup_abs_y();
    let saturated_pairs = levels
        .windows(2)
        .zip(d)
        .filter(|(w, _)| w[0] >= sup + 1.0)
        .all(|(_, v)| *v <= 1e-12);
    let top = solve_bdsde_lsmc(&coeffs.with_drift_truncation(8.0)?, noise, (0.0, 1.0), &config)?;
    let (beyond, _) = panel_difference_norms(panels.last().unwrap(), &top, Some(&w))?;
    let applies = 4.0 >= sup + 1.0;
    let diffs: Vec<String> = d.iter().map(|v| format!("{v:.2e}")).collect();
    Ok((
        decreasing && last <= 1e-3 && applies && saturated_pairs && beyond <= 1e-12,
        format!("diffs [{}], sup|Y| {sup:.3}, n=4 vs n=8 {beyond:.1e}", diffs.join(", ")),
    ))
}

fn noise_dimension() -> Outcome {
    let g: Vec<NoiseCoefficient> = (1..=8).map(|j| NoiseCoefficient::constant(0.5_f64.powi(j))).collect();
    let coeffs = CoefficientSet::zero(1)
        .with_scalar_diffusion(1.0)
        .with_driver(|y| -y, |_| -1.0)
        .with_noise(g)
        .with_terminal(|x| x[0].tanh());
    let dims = [1, 2, 4, 8];
    let time = TimeGrid::with_step(0.0, 1.0, 2e-2)?;
    let config = stratified(6.0, 10_000, 3, derive_seed(4, 1));
    let l = noise_dimension_ladder(&coeffs, &[1.0; 8], &dims, time, &config, Some(&rho()), 24, derive_seed(4, 0))?;
    // |g_j|² sums between consecutive rungs
    let tails: Vec<f64> = dims
        .windows(2)
        .map(|w| (w[0] + 1..=w[1]).map(|j| 0.25_f64.powi(j as i32)).sum())
        .collect();
    let num: f64 = l.squared_diffs.iter().zip(&tails).map(|(a, b)| a * b).sum();
    let den: f64 = tails.iter().map(|b| b * b).sum();
    let c = num / den;
    let ratios: Vec<f64> = l.squared_diffs.iter().zip(&tails).map(|(a, b)| a / (c * b)).collect();
    let ok = c > 0.0 && ratios.iter().all(|r| (0.5..=2.0).contains(r));
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    Ok((ok, format!("ratios to the proportional fit [{}]", shown.join(", "))))
}

fn flow_identity() -> Outcome {
    let coeffs = linear_mu(0.5, DriftKind::Ou, TerminalSpec::Tanh);
    let w = rho();
    let mut devs = Vec::new();
    let dts = [2.5e-2, 1.25e-2, 6.25e-3];
    for (i, dt) in dts.iter().enumerate() {
        let time = TimeGrid::with_step(0.0, 1.0, *dt)?;
        let noise = Arc::new(sample_qwiener(&[1.0], 1, time, 0, derive_seed(5, i as u64))?);
        let config = stratified(6.0, 4000, 5, derive_seed(5, 100 + i as u64));
        devs.push(flow_identity_check(&coeffs, noise, (0.0, 1.0), 0.5, &config, Some(&w), 2)?.relative);
    }
    let pts: Vec<(f64, f64)> = dts.iter().zip(&devs).map(|(h, d)| (h.ln(), d.ln())).collect();
    let order = linear_fit(&pts)?.slope;
    let finest = *devs.last().unwrap();
    let shown: Vec<String> = devs.iter().map(|d| format!("{d:.2e}")).collect();
    Ok((finest <= 2e-2 && order >= 0.7, format!("deviations [{}], order {order:.2}", shown.join(", "))))
}

fn infinite_horizon() -> Outcome {
    let coeffs = LinearMu { c: 2.0, ..LinearMu::default() }.build()?;
    let horizons = [2.0, 4.0, 8.0, 16.0];
    let time = TimeGrid::with_step(0.0, 16.0, 1e-2)?;
    let noise = Arc::new(sample_qwiener(&[], 0, time, 0, derive_seed(6, 0))?);
    let config = stratified(6.0, 200, 2, derive_seed(6, 1));
    let r = solve_infinite_horizon(&coeffs, 0.0, &horizons, None, noise, &config, Some(&rho()), f64::INFINITY)?;
    let grid = SpatialGrid::new(1, 4.0, 0.1)?;
    let field = representation_field(&r.candidate, 0, &grid, Some(&rho()))?;
    let sup = field.values.iter().map(|v| (v - 2.0).abs()).fold(0.0, f64::max);
    let rate = r.report.fitted_rate;
    Ok((
        sup <= 1e-3 && (rate - 1.0).abs() <= 0.15,
        format!("sup |Y - 2| {sup:.2e}, fitted rate {rate:.3}"),
    ))
}

fn stationarity() -> Outcome {
    let (gamma, mu, lambda) = (0.5, 1.0, 1.0);
    let coeffs = linear_mu(gamma, DriftKind::Zero, TerminalSpec::Zero);
    let config = SolverConfig::new(
        PathStarts::Point { x: vec![0.0], paths: 50 },
        RegressionBasis::polynomial(1),
        derive_seed(7, 1),
    );
    let r = stationarity_test(&coeffs, &[lambda], 1e-2, 1.0, 8.0, &[0.0], &config, Some(&rho()), 2000, derive_seed(7, 2))?;
    // distributional test on the first 500 masters; the variance uses all 2000 (3% sampling error)
    let p = ks_two_sample(&r.samples_start[..500], &r.samples_shifted[..500])?.p_value;
    let exact = convolution_variance(gamma, lambda, mu);
    let var_err = ((r.variance_start - exact) / exact).abs().max(((r.variance_shifted - exact) / exact).abs());
    Ok((
        r.pathwise_deviation <= 2e-2 && p > 0.01 && var_err <= 0.1,
        format!(
            "pathwise {:.2e}, KS p {p:.3}, variances {:.4}/{:.4} vs {exact:.4}",
            r.pathwise_deviation, r.variance_start, r.variance_shifted
        ),
    ))
}

fn pullback() -> Outcome {
    let coeffs = linear_mu(0.5, DriftKind::Ou, TerminalSpec::Tanh);
    let horizons = [2.0, 4.0, 8.0, 16.0];
    let dt = 1e-2;
    let grid = SpatialGrid::new(1, 4.0, 0.1)?;
    let w = rho();
    let spde = SpdeConfig::default();
    let seed = derive_seed(8, 2);
    let (rms, factor) = pullback_rms(&coeffs, &horizons, &[1.0], dt, &grid, &spde, &w, 16, seed)?;
    let master = TwoSidedPath::sample(&[1.0], 1, dt, 16.0, dt, derive_seed(seed, 0))?;
    let window = master.window(-16.0, 0.0)?;
    let bhat = Arc::new(reverse_time(&window, window.grid().t_end())?);
    let config = stratified(8.0, 2000, 3, derive_seed(8, 1));
    let ih = solve_infinite_horizon(&coeffs, 0.0, &horizons, None, bhat, &config, Some(&w), f64::INFINITY)?;
    let candidate = representation_field(&ih.candidate, 0, &grid, Some(&w))?;
    let s = pullback_experiment(&coeffs, &horizons, &master, &grid, &spde, &w, Some(&candidate))?;
    let decreasing = rms.windows(2).all(|p| p[1] < p[0]);
    let target = (-1.0_f64).exp();
    let dist = s.candidate_distance.unwrap_or(f64::INFINITY);
    let shown: Vec<String> = rms.iter().map(|d| format!("{d:.2e}")).collect();
    Ok((
        decreasing && (factor / target - 1.0).abs() <= 0.25 && dist <= 5e-2,
        format!("rms diffs [{}], factor {factor:.3} vs {target:.3}, candidate distance {dist:.2e}", shown.join(", ")),
    ))
}

fn malliavin() -> Outcome {
    let (gamma, mu) = (0.5, 1.0);
    let coeffs = linear_mu(gamma, DriftKind::Zero, TerminalSpec::Tanh);
    let time = TimeGrid::with_step(0.0, 1.0, 1e-2)?;
    let noise = Arc::new(sample_qwiener(&[1.0], 1, time, 0, derive_seed(9, 0))?);
    let config = stratified(6.0, 1000, 3, derive_seed(9, 1));
    let base = solve_bdsde_lsmc(&coeffs, noise.clone(), (0.0, 1.0), &config)?;
    let (mut oracle, mut closed) = (0.0_f64, 0.0_f64);
    for theta in [0.2, 0.4, 0.5, 0.7, 0.9] {
        let lin = solve_malliavin_linearized(&base, theta, 0)?;
        let bump = bump_oracle(&coeffs, noise.clone(), (0.0, 1.0), &config, &base, theta, 0, &DEFAULT_EPSILONS)?;
        oracle = oracle.max(relative_disagreement(&lin, &bump)?);
        for k in 0..=lin.theta_step {
            let s = base.grid().time(k);
            let exact = gamma * (-mu * (theta - s)).exp();
            for i in 0..base.paths() {
                closed = closed.max((lin.dy(k, i) - exact).abs() / gamma);
            }
        }
    }
    Ok((
        oracle <= 5e-2 && closed <= 5e-2,
        format!("linearized vs bump {oracle:.2e}, closed form {closed:.2e}"),
    ))
}

fn compactness() -> Outcome {
    let time = TimeGrid::with_step(0.0, 1.0, 1e-2)?;
    let grid = SpatialGrid::new(1, 4.0, 0.05)?;
    let battery = TestFunctionBattery::default_for(&grid);
    let solver = stratified(6.0, 1000, 3, 1);
    let heat_cfg = CompactnessConfig { realizations: 1, seed: derive_seed(10, 0), ..CompactnessConfig::default() };
    let h = compactness_diagnostics(&heat(), &[], time, &solver, &grid, &battery.functions, &heat_cfg)?;
    let slope = h.time_exponent.map_or(f64::NAN, |f| f.slope);
    let cubic_cfg = CompactnessConfig {
        levels: vec![1.0, 2.0, 4.0, 8.0],
        realizations: 8,
        seed: derive_seed(10, 1),
        ..CompactnessConfig::default()
    };
    let c = compactness_diagnostics(&cubic_monotone(), &[1.0, 0.25], time, &solver, &grid, &battery.functions, &cubic_cfg)?;
    Ok((
        (0.8..=1.2).contains(&slope) && c.h1_trend_p > 0.05 && c.d12_trend_p > 0.05,
        format!("heat slope {slope:.3}, trend p-values H1 {:.3} D12 {:.3}", c.h1_trend_p, c.d12_trend_p),
    ))
}

fn backward_integral_identity() -> Outcome {
    let mut worst = 0.0_f64;
    for p in 0..100u64 {
        let time = TimeGrid::new(0.0, 1.0, 200)?;
        let path = sample_qwiener(&[1.0, 0.5], 2, time, 0, derive_seed(11, p))?;
        let integrand: Vec<f64> = (0..=200)
            .flat_map(|k| {
                let t = k as f64 / 200.0;
                [(3.0 * t + p as f64).sin(), t * t - 0.3]
            })
            .collect();
        let (k0, k1) = (20 + (p as usize % 50), 200);
        let back = backward_ito_integral(&integrand, &path, k0, k1)?;
        // already carries the minus sign of the reflection
        let negated_forward = reflected_forward_integral(&integrand, &path, k0, k1, 1.0)?;
        // relative to the sum of absolute terms, the scale of the rounding error
        let scale: f64 = (k0..k1)
            .map(|k| (0..2).map(|j| (integrand[(k + 1) * 2 + j] * path.db(k, j)).abs()).sum::<f64>())
            .sum();
        worst = worst.max((back - negated_forward).abs() / scale);
    }
    Ok((worst <= 1e-12, format!("worst relative mismatch {worst:.1e} over 100 paths")))
}

fn determinism_config(experiment: &str) -> String {
    let body = match experiment {
        "check-conditions" => "[coefficients]\npreset = \"cubic-monotone\"\n[conditions]\nsamples = 500\nterminal_paths = 50\n",
        "simulate-forward" => "[coefficients]\npreset = \"ou-flow\"\n[time]\ndt = 0.05\n",
        "solve-bdsde" => "[coefficients]\npreset = \"gamma-constant-g\"\n[time]\ndt = 0.02\n[grid]\nradius = 2.0\nstep = 0.1\n",
        "drift-ladder" => "[coefficients]\npreset = \"cubic-monotone\"\n[noise]\nlambdas = [1.0, 0.25]\n[time]\ndt = 0.02\n[drift_ladder]\nlevels = [1.0, 2.0, 4.0]\n",
        "noise-ladder" => "[coefficients]\ninline = { f_poly = [0.0, -1.0], g = [{ a = 0.5 }, { a = 0.25 }, { a = 0.125 }], terminal = { kind = \"tanh\" } }\n[time]\ndt = 0.05\n[noise_ladder]\ndims = [1, 2, 3]\nrealizations = 2\n",
        "solve-spde" => "[coefficients]\npreset = \"cubic-monotone\"\n[time]\ndt = 0.02\n[grid]\nradius = 4.0\nstep = 0.1\n",
        "correspondence" => "[coefficients]\npreset = \"heat\"\n[time]\ndt = 0.02\n[grid]\nradius = 2.0\nstep = 0.1\n",
        "infinite-horizon" => "[coefficients]\npreset = \"linear-mu\"\nparams = { c = 2.0, gamma = 0.2 }\n[time]\ndt = 0.05\n[infinite_horizon]\nhorizons = [1.0, 2.0, 4.0]\n",
        "stationarity" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5 }\n[time]\ndt = 0.05\n[stationarity]\nr = 0.5\nhorizon = 2.0\nmasters = 4\n",
        "pullback" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5, drift = \"ou\", terminal = { kind = \"tanh\" } }\n[time]\ndt = 0.05\n[grid]\nradius = 2.0\nstep = 0.25\n[pullback]\nhorizons = [1.0, 2.0, 4.0]\nmasters = 2\n",
        "malliavin" => "[coefficients]\npreset = \"linear-mu\"\nparams = { gamma = 0.5, terminal = { kind = \"tanh\" } }\n[time]\ndt = 0.05\n[malliavin]\nthetas = [0.3, 0.6]\n",
        "compactness" => "[coefficients]\npreset = \"cubic-monotone\"\n[noise]\nlambdas = [1.0, 0.25]\n[time]\ndt = 0.02\n[grid]\nradius = 3.0\nstep = 0.1\n[compactness]\nrealizations = 2\nlevels = [1.0, 2.0]\n",
        other => panic!("no config for {other}"),
    };
    format!(
        "experiment = \"{experiment}\"\nseed = 12\n{body}\n[solver]\nstarts = {{ kind = \"stratified\", radius = 3.0, paths = 200 }}\nbasis = {{ family = \"polynomial\", degree = 2 }}\n"
    )
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for kind in ALL_EXPERIMENTS {
        let text = determinism_config(kind.name());
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run(ExperimentConfig::from_toml(&text)?, &Overrides { seed: None, out: Some(d.path().to_path_buf()) })?;
        }
        let (a, b) = (csv_files(dirs[0].path()), csv_files(dirs[1].path()));
        compared += a.len();
        if a.is_empty() || a != b {
            mismatched.push(kind.name());
        }
    }
    Ok((
        mismatched.is_empty(),
        format!("{compared} CSVs across {} experiments, mismatched: [{}]", ALL_EXPERIMENTS.len(), mismatched.join(", ")),
    ))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("linear exactness", linear_exactness),
        ("representation correspondence", correspondence),
        ("drift ladder Cauchy", drift_cauchy),
        ("noise-dimension ladder", noise_dimension),
        ("flow identity", flow_identity),
        ("infinite-horizon fixed point", infinite_horizon),
        ("stationarity", stationarity),
        ("pull-back convergence", pullback),
        ("Malliavin agreement", malliavin),
        ("compactness moduli", compactness),
        ("backward-integral identity", backward_integral_identity),
        ("determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name}: {detail} [{:.1} s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
