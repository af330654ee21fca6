//! Sampled verification of the structural conditions on the coefficients.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::coefficients::CoefficientSet;
use crate::model::weights::RhoWeight;
use crate::noise::rng_for;

/// Relative slack granted to sampled inequalities to absorb floating-point rounding.
const ROUNDING_SLACK: f64 = 1e-10;
const MAX_WITNESSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    /// Verified exactly from declared constants.
    Pass,
    Fail,
    /// No violation among the sampled points; a statistical guarantee only.
    SampledPass,
}

impl Status {
    pub fn is_ok(self) -> bool {
        self != Status::Fail
    }
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::SampledPass => "sampled-pass",
        }
    }
}

/// A sample point at which an inequality failed (or could not be evaluated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub s: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub name: String,
    pub status: Status,
    pub witnesses: Vec<Witness>,
    /// Worst-case `rhs - lhs` over the samples (negative on failure).
    pub margin: f64,
    pub samples: usize,
    pub note: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    pub fn get(&self, name: &str) -> Option<&ConditionEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn status(&self, name: &str) -> Option<Status> {
        self.get(name).map(|e| e.status)
    }

    /// `true` when every listed condition is `pass` or `sampled-pass`.
    pub fn passes(&self, names: &[&str]) -> bool {
        names
            .iter()
            .all(|n| self.status(n).is_some_and(Status::is_ok))
    }

    pub fn all_ok(&self) -> bool {
        self.entries.iter().all(|e| e.status.is_ok())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<6} {:<13} margin={:<12.6e} samples={:<6} {}",
                e.name,
                e.status.as_str(),
                e.margin,
                e.samples,
                e.note
            );
            for w in &e.witnesses {
                let _ = writeln!(
                    out,
                    "         witness s={} x={:?} y={:?} lhs={} rhs={}",
                    w.s, w.x, w.y, w.lhs, w.rhs
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub(crate) fn push(&mut self, entry: ConditionEntry) {
        self.entries.push(entry);
    }
}

/// Sampling configuration for the inequality checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    /// Points (or pairs) per condition.
    pub samples: usize,
    pub seed: u64,
    /// Time range `[0, horizon]`.
    pub horizon: f64,
    /// Spatial box `[-x_range, x_range]^d`.
    pub x_range: f64,
    /// `y` range `[-y_range, y_range]`.
    pub y_range: f64,
    /// Time range used for the infinite-horizon variants.
    pub long_horizon: f64,
    /// Discount rate entering the last condition.
    pub discount: f64,
    /// Paths per start point in the terminal-regularity check.
    pub terminal_paths: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            horizon: 1.0,
            x_range: 5.0,
            y_range: 10.0,
            long_horizon: 100.0,
            discount: 0.0,
            terminal_paths: 200,
        }
    }
}

impl SampleSpec {
    fn validate(&self) -> Result<()> {
        let finite = [
            self.horizon,
            self.x_range,
            self.y_range,
            self.long_horizon,
            self.discount,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.horizon <= 0.0 || self.x_range <= 0.0 || self.y_range <= 0.0 {
            return Err(invalid("sampler ranges must be finite and positive"));
        }
        if self.samples == 0 {
            return Err(invalid("sampler needs at least one sample"));
        }
        Ok(())
    }
}

const BATCH: usize = 1000;

/// One sampled inequality `lhs <= rhs`. The closure draws its own point from the
/// provided generator and returns `(witness point, lhs, rhs)`.
pub(crate) fn sampled_inequality<F>(
    name: &str,
    samples: usize,
    seed: u64,
    stream: u64,
    note: &str,
    draw: F,
) -> ConditionEntry
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> Witness + Sync,
{
    let batches = samples.div_ceil(BATCH);
    let results: Vec<(f64, Vec<Witness>)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed ^ stream.wrapping_mul(0x9E37_79B9), b as u64);
            let count = BATCH.min(samples - b * BATCH);
            let mut margin = f64::INFINITY;
            let mut wit = Vec::new();
            for _ in 0..count {
                let w = draw(&mut rng);
                let slack = w.rhs - w.lhs;
                let tol = ROUNDING_SLACK * (w.rhs.abs() + w.lhs.abs()).max(1e-300);
                if !(w.lhs.is_finite() && w.rhs.is_finite()) {
                    margin = f64::NEG_INFINITY;
                    if wit.len() < MAX_WITNESSES {
                        wit.push(w);
                    }
                    continue;
                }
                margin = margin.min(slack);
                if slack < -tol && wit.len() < MAX_WITNESSES {
                    wit.push(w);
                }
            }
            (margin, wit)
        })
        .collect();
    let mut margin = f64::INFINITY;
    let mut witnesses = Vec::new();
    for (m, w) in results {
        margin = margin.min(m);
        for x in w {
            if witnesses.len() < MAX_WITNESSES {
                witnesses.push(x);
            }
        }
    }
    ConditionEntry {
        name: name.to_string(),
        status: if witnesses.is_empty() {
            Status::SampledPass
        } else {
            Status::Fail
        },
        witnesses,
        margin,
        samples,
        note: note.to_string(),
    }
}

fn slack(w: &Witness) -> f64 {
    let v = w.rhs - w.lhs;
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

/// The witness with the smaller slack (non-finite evaluations first).
fn tighter(a: Witness, b: Witness) -> Witness {
    if slack(&a) <= slack(&b) {
        a
    } else {
        b
    }
}

fn uniform(rng: &mut impl Rng, r: f64) -> f64 {
    rng.random_range(-r..=r)
}

fn point(rng: &mut impl Rng, d: usize, r: f64) -> Vec<f64> {
    (0..d).map(|_| uniform(rng, r)).collect()
}

/// Exact evaluation of the discount inequality `2μ - K - p(2p-1) Σ L_j > 0`, where `μ` is
/// the dissipativity rate (the negated monotonicity constant).
pub(crate) fn discount_entry(mu: f64, k: f64, p: u32, lipschitz_sum: f64) -> ConditionEntry {
    let pf = p as f64;
    let margin = 2.0 * mu - k - pf * (2.0 * pf - 1.0) * lipschitz_sum;
    let ok = mu > 0.0 && margin > 0.0;
    ConditionEntry {
        name: "H.9".into(),
        status: if ok { Status::Pass } else { Status::Fail },
        witnesses: if ok {
            Vec::new()
        } else {
            vec![Witness {
                s: 0.0,
                x: vec![],
                y: vec![mu, k, pf, lipschitz_sum],
                lhs: 0.0,
                rhs: margin,
            }]
        },
        margin,
        samples: 0,
        note: format!("2*{mu} - {k} - {pf}*(2*{pf}-1)*{lipschitz_sum}"),
    }
}

/// Evaluate every condition at sampled points.
pub fn check_conditions(coeffs: &CoefficientSet, spec: &SampleSpec) -> Result<ConditionReport> {
    spec.validate()?;
    let d = coeffs.dim;
    let c = coeffs.constants;
    let (l, p) = (c.growth, c.order as f64);
    let n = spec.samples;
    let seed = spec.seed;
    let mut report = ConditionReport::default();

    let growth = |horizon: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let s = rng.random_range(0.0..=horizon);
        let x = point(rng, d, spec.x_range);
        let y = uniform(rng, spec.y_range);
        let fv = (coeffs.f)(s, &x, y);
        let dv = (coeffs.df_dy)(s, &x, y);
        let f0 = (coeffs.f0)(s, &x).abs();
        let r1 = l * (f0 + y.abs().powf(p));
        let r2 = l * (1.0 + y.abs().powf(p - 1.0));
        tighter(
            Witness { s, x: x.clone(), y: vec![y], lhs: fv.abs(), rhs: r1 },
            Witness { s, x, y: vec![y], lhs: dv.abs(), rhs: r2 },
        )
    };
    report.push(sampled_inequality(
        "H.1",
        n,
        seed,
        1,
        "|f| <= L(|f0|+|y|^p), |f_y| <= L(1+|y|^(p-1))",
        |rng| growth(spec.horizon, rng),
    ));

    let lip = |horizon: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let kind = rng.random_range(0..3 + coeffs.g.len());
        let s = rng.random_range(0.0..=horizon);
        let x1 = point(rng, d, spec.x_range);
        let x2 = point(rng, d, spec.x_range);
        let y1 = uniform(rng, spec.y_range);
        let y2 = uniform(rng, spec.y_range);
        let dx = crate::model::weights::euclid_diff(&x1, &x2);
        match kind {
            0 => {
                let lhs = ((coeffs.f)(s, &x1, y1) - (coeffs.f)(s, &x2, y1)).abs();
                Witness { s, x: [x1, x2].concat(), y: vec![y1], lhs, rhs: l * (1.0 + y1.abs().powf(p)) * dx }
            }
            1 => {
                let lhs = ((coeffs.df_dy)(s, &x1, y1) - (coeffs.df_dy)(s, &x2, y1)).abs();
                Witness { s, x: [x1, x2].concat(), y: vec![y1], lhs, rhs: l * (1.0 + y1.abs().powf(p - 1.0)) * dx }
            }
            2 => {
                let lhs = ((coeffs.df_dy)(s, &x1, y1) - (coeffs.df_dy)(s, &x1, y2)).abs();
                let rhs = l * (1.0 + y1.abs().powf(p - 2.0) + y2.abs().powf(p - 2.0)) * (y1 - y2).abs();
                Witness { s, x: x1, y: vec![y1, y2], lhs, rhs }
            }
            k => {
                let gj = &coeffs.g[k - 3];
                let s2 = rng.random_range(0.0..=horizon);
                let lhs = ((gj.g)(s, &x1, y1) - (gj.g)(s2, &x2, y2)).abs();
                let rhs = gj.lipschitz * ((s - s2).abs() + dx + (y1 - y2).abs());
                let dlhs = (gj.dg_dy)(s, &x1, y1).abs();
                tighter(
                    Witness { s, x: [x1.clone(), x2].concat(), y: vec![y1, y2], lhs, rhs },
                    Witness { s, x: x1, y: vec![y1], lhs: dlhs, rhs: gj.lipschitz },
                )
            }
        }
    };
    let mut h2 = sampled_inequality(
        "H.2",
        n,
        seed,
        2,
        "Lipschitz bounds on f, f_y and g_j with constants L, L_j",
        |rng| lip(spec.horizon, rng),
    );
    let l2 = coeffs.lipschitz_square_sum();
    if !l2.is_finite() {
        h2.status = Status::Fail;
        h2.witnesses.push(Witness { s: 0.0, x: vec![], y: vec![], lhs: l2, rhs: f64::MAX });
    }
    h2.note.push_str(&format!("; sum L_j^2 = {l2}"));
    report.push(h2);

    let mono = |rng: &mut rand_chacha::ChaCha8Rng| {
        let s = rng.random_range(0.0..=spec.horizon);
        let x = point(rng, d, spec.x_range);
        let y1 = uniform(rng, spec.y_range);
        let y2 = uniform(rng, spec.y_range);
        let lhs = (y1 - y2) * ((coeffs.f)(s, &x, y1) - (coeffs.f)(s, &x, y2));
        Witness { s, x, y: vec![y1, y2], lhs, rhs: c.monotonicity * (y1 - y2) * (y1 - y2) }
    };
    let mut h3 = sampled_inequality("H.3", n, seed, 3, "", mono);
    h3.note = format!("(y1-y2)(f(y1)-f(y2)) <= {}|y1-y2|^2", c.monotonicity);
    report.push(h3);

    report.push(terminal_condition(coeffs, spec)?);
    report.push(smoothness_condition(coeffs, spec));
    report.push(ellipticity_condition(coeffs, spec));

    let mut h7 = sampled_inequality("H.7", n, seed, 7, "H.1 on [0, long_horizon]", |rng| {
        growth(spec.long_horizon, rng)
    });
    h7.name = "H.7".into();
    report.push(h7);
    report.push(sampled_inequality(
        "H.8",
        n,
        seed,
        8,
        "H.2 on [0, long_horizon]",
        |rng| lip(spec.long_horizon, rng),
    ));
    report.push(discount_entry(
        -c.monotonicity,
        spec.discount,
        c.order,
        coeffs.lipschitz_sum(),
    ));
    Ok(report)
}

/// Integrability of `|h|^{8p} ρ^{-1}` by quadrature and the Hölder-in-time bound on
/// `h(X_T^{t,·})`, whose exponent is fitted from two start-time offsets.
fn terminal_condition(coeffs: &CoefficientSet, spec: &SampleSpec) -> Result<ConditionEntry> {
    let d = coeffs.dim;
    let p = coeffs.constants.order as f64;
    let weight = RhoWeight::new(d as f64 + 8.0 * p + 1.0, d)?;
    let radius = weight.radius_for_tail(1e-8).min(200.0);
    let grid = crate::grid::SpatialGrid::new(d, radius, 2.0 * radius / if d == 1 { 800.0 } else { 100.0 })?;
    let mut integral = 0.0;
    let mut x = vec![0.0; d];
    for i in 0..grid.len() {
        grid.node_into(i, &mut x);
        integral += (coeffs.h)(&x).abs().powf(8.0 * p) * weight.inv_rho(&x) * grid.trapezoid_weight(i);
    }
    // E ∫ |h(X_T^{t',x}) - h(X_T^{t,x})|^2 ρ^{-1} dx for t' - t = δ.
    let t_end = spec.horizon;
    let steps = 64usize;
    let dt = t_end / steps as f64;
    let starts: Vec<Vec<f64>> = (0..21)
        .map(|i| vec![-spec.x_range + i as f64 * spec.x_range / 10.0; d])
        .collect();
    let moment = |offset: usize| -> f64 {
        let mut total = 0.0;
        for (si, x0) in starts.iter().enumerate() {
            let mut acc = 0.0;
            for m in 0..spec.terminal_paths {
                let mut rng = rng_for(spec.seed ^ 0x4844, (si * spec.terminal_paths + m) as u64);
                let inc: Vec<f64> = (0..steps * d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * dt.sqrt()
                    })
                    .collect();
                let run = |k0: usize| {
                    let mut xs = x0.clone();
                    let mut bv = vec![0.0; d];
                    let mut sv = vec![0.0; d * d];
                    for k in k0..steps {
                        (coeffs.b)(&xs, &mut bv);
                        (coeffs.sigma)(&xs, &mut sv);
                        let prev = xs.clone();
                        for i in 0..d {
                            xs[i] = prev[i]
                                + bv[i] * dt
                                + (0..d).map(|j| sv[i * d + j] * inc[k * d + j]).sum::<f64>();
                        }
                    }
                    (coeffs.h)(&xs)
                };
                let diff = run(offset) - run(0);
                acc += diff * diff;
            }
            total += acc / spec.terminal_paths as f64 * weight.inv_rho(x0);
        }
        total
    };
    let (e1, e2) = (moment(16), moment(4));
    let floor = 1e-14;
    let slope = if e1 < floor && e2 < floor {
        f64::INFINITY
    } else {
        (e1 / e2).ln() / 4f64.ln()
    };
    let lhs = 0.8 - slope.min(10.0);
    let ok = integral.is_finite() && slope >= 0.8;
    Ok(ConditionEntry {
        name: "H.4".into(),
        status: if ok { Status::SampledPass } else { Status::Fail },
        witnesses: if ok {
            Vec::new()
        } else {
            vec![Witness { s: 0.0, x: vec![], y: vec![integral, slope], lhs, rhs: 0.0 }]
        },
        margin: -lhs,
        samples: starts.len() * spec.terminal_paths,
        note: format!("int |h|^(8p)/rho = {integral:.6e}; fitted time exponent {slope:.3}"),
    })
}

/// Boundedness of finite-difference derivatives of `b` (orders 1-2) and `σ` (orders 1-3).
fn smoothness_condition(coeffs: &CoefficientSet, spec: &SampleSpec) -> ConditionEntry {
    let d = coeffs.dim;
    const BOUND: f64 = 1e8;
    let eps = 1e-3;
    let eval = |x: &[f64], out: &mut Vec<f64>| {
        let mut bv = vec![0.0; d];
        let mut sv = vec![0.0; d * d];
        (coeffs.b)(x, &mut bv);
        (coeffs.sigma)(x, &mut sv);
        out.clear();
        out.extend(bv);
        out.extend(sv);
    };
    sampled_inequality(
        "H.5",
        spec.samples.min(2000),
        spec.seed,
        5,
        "finite-difference derivatives of b and sigma bounded",
        |rng| {
            let x = point(rng, d, spec.x_range);
            let dir = rng.random_range(0..d);
            let mut vals = Vec::new();
            let mut sample = |k: f64| {
                let mut xs = x.clone();
                xs[dir] += k * eps;
                eval(&xs, &mut vals);
                vals.clone()
            };
            let (m2, m1, z, p1, p2) = (sample(-2.0), sample(-1.0), sample(0.0), sample(1.0), sample(2.0));
            let mut worst: f64 = 0.0;
            for i in 0..z.len() {
                let d1 = (p1[i] - m1[i]) / (2.0 * eps);
                let d2 = (p1[i] - 2.0 * z[i] + m1[i]) / (eps * eps);
                let mut cand = d1.abs().max(d2.abs());
                if i >= d {
                    let d3 = (p2[i] - 2.0 * p1[i] + 2.0 * m1[i] - m2[i]) / (2.0 * eps * eps * eps);
                    cand = cand.max(d3.abs());
                }
                worst = worst.max(if cand.is_finite() { cand } else { f64::INFINITY });
            }
            Witness { s: 0.0, x, y: vec![], lhs: worst, rhs: BOUND }
        },
    )
}

/// Smallest eigenvalue of `σσ*` over sampled points must stay above a positive floor.
fn ellipticity_condition(coeffs: &CoefficientSet, spec: &SampleSpec) -> ConditionEntry {
    let d = coeffs.dim;
    const FLOOR: f64 = 1e-12;
    let mut entry = sampled_inequality("H.6", spec.samples, spec.seed, 6, "", |rng| {
        let x = point(rng, d, spec.x_range);
        let mut a = vec![0.0; d * d];
        coeffs.diffusion_matrix(&x, &mut a);
        let lam = nalgebra::DMatrix::from_row_slice(d, d, &a)
            .symmetric_eigenvalues()
            .min();
        Witness { s: 0.0, x, y: vec![], lhs: FLOOR, rhs: lam }
    });
    if entry.margin <= 0.0 && entry.witnesses.is_empty() {
        entry.status = Status::Fail;
    }
    entry.note = format!("min eigenvalue of sigma sigma^T = {:.6e}", entry.margin + FLOOR);
    entry
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::coefficients::{Constants, NoiseCoefficient};

    fn cubic(sign: f64, l: f64) -> CoefficientSet {
        CoefficientSet::zero(1)
            .with_driver(move |y| sign * y * y * y, move |y| sign * 3.0 * y * y)
            .with_f0(1.0)
            .with_scalar_diffusion(1.0)
            .with_constants(Constants {
                growth: l,
                monotonicity: 0.0,
                order: 3,
                lipschitz_tail: 0.0,
            })
    }

    fn quick() -> SampleSpec {
        SampleSpec {
            samples: 2000,
            terminal_paths: 20,
            ..SampleSpec::default()
        }
    }

    #[test]
    fn cubic_monotone_passes_growth_and_monotonicity() {
        let r = check_conditions(&cubic(-1.0, 3.0), &quick()).unwrap();
        assert_eq!(r.status("H.1"), Some(Status::SampledPass));
        assert_eq!(r.status("H.3"), Some(Status::SampledPass));
        assert_eq!(r.status("H.6"), Some(Status::SampledPass));
    }

    #[test]
    fn growth_value_bound_alone_holds_with_unit_constant() {
        // |−y³| <= 1 + |y|³ holds with L = 1; the derivative bound needs L = 3
        let r = check_conditions(&cubic(-1.0, 1.0), &quick()).unwrap();
        let e = r.get("H.1").unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(e.witnesses.iter().all(|w| w.rhs == 1.0 + w.y[0].abs().powi(2)));
    }

    #[test]
    fn increasing_cubic_fails_monotonicity_with_witness() {
        let r = check_conditions(&cubic(1.0, 3.0), &quick()).unwrap();
        let e = r.get("H.3").unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(!e.witnesses.is_empty());
        assert!(e.margin < 0.0);
    }

    #[test]
    fn discount_condition_from_constants() {
        let e = discount_entry(2.0, 1.0, 2, 0.1);
        assert_eq!(e.status, Status::Pass);
        assert!((e.margin - 2.4).abs() < 1e-12);
        let f = discount_entry(0.5, 1.0, 2, 0.0);
        assert_eq!(f.status, Status::Fail);
        assert!(!f.witnesses.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let c = cubic(-1.0, 3.0).with_noise(vec![NoiseCoefficient::affine(0.0, 0.3)]);
        let a = check_conditions(&c, &quick()).unwrap();
        let b = check_conditions(&c, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn degenerate_diffusion_fails_ellipticity() {
        let c = cubic(-1.0, 3.0).with_scalar_diffusion(0.0);
        let r = check_conditions(&c, &quick()).unwrap();
        assert_eq!(r.status("H.6"), Some(Status::Fail));
    }

    #[test]
    fn non_finite_values_become_witnesses() {
        let c = cubic(-1.0, 3.0).with_driver(|y| 1.0 / (y - y), |_| 0.0);
        let r = check_conditions(&c, &quick()).unwrap();
        let e = r.get("H.1").unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(!e.witnesses[0].lhs.is_finite());
    }

    #[test]
    fn rejects_degenerate_ranges() {
        let spec = SampleSpec {
            x_range: f64::INFINITY,
            ..quick()
        };
        assert!(check_conditions(&cubic(-1.0, 3.0), &spec).is_err());
    }
}
