//! The C¹ truncation `f_n` of a polynomial drift: clamp `y` to `[-n, n]` and extend
//! linearly with the boundary slope.


use rand::Rng;

use crate::error::{invalid, Result};
use crate::model::coefficients::{CoefficientSet, Driver};
use crate::model::conditions::{sampled_inequality, ConditionReport, SampleSpec, Witness};

/// `Π_n(y) = min(n, |y|) y / |y|`, with `Π_n(0) = 0`.
pub fn project_pi(y: f64, n: f64) -> f64 {
    y.clamp(-n, n)
}

/// `f_n(s,x,y) = f(s,x,Π_n y) + ∂_y f(s,x,Π_n y)(y - Π_n y)` for `|y| > n`, and `f` itself
/// inside the band (bitwise).
pub(crate) fn truncated_driver(
    f: Driver,
    df: Driver,
    n: f64,
) -> impl Fn(f64, &[f64], f64) -> f64 + Send + Sync {
    move |s, x, y| {
        if y.abs() <= n {
            f(s, x, y)
        } else {
            let edge = n.copysign(y);
            f(s, x, edge) + df(s, x, edge) * (y - edge)
        }
    }
}

/// A drift `f` together with its truncation level.
#[derive(Clone)]
pub struct TruncatedDrift {
    base: CoefficientSet,
    n: f64,
}

impl TruncatedDrift {
    pub fn new(base: &CoefficientSet, n: f64) -> Result<Self> {
        if !(n > 0.0 && n.is_finite()) {
            return Err(invalid(format!("truncation level must be positive and finite, got {n}")));
        }
        Ok(Self {
            base: base.clone(),
            n,
        })
    }

    pub fn level(&self) -> f64 {
        self.n
    }

    pub fn eval(&self, s: f64, x: &[f64], y: f64) -> f64 {
        truncate_drift_eval(self, s, x, y)
    }

    /// `∂_y f_n(s,x,y) = ∂_y f(s,x,Π_n y)`.
    pub fn derivative(&self, s: f64, x: &[f64], y: f64) -> f64 {
        (self.base.df_dy)(s, x, project_pi(y, self.n))
    }

    /// The coefficient set with `f` replaced by `f_n`.
    pub fn coefficients(&self) -> CoefficientSet {
        self.base
            .with_drift_truncation(self.n)
            .expect("level validated at construction")
    }
}

pub fn truncate_drift_eval(td: &TruncatedDrift, s: f64, x: &[f64], y: f64) -> f64 {
    let n = td.n;
    if y.abs() <= n {
        (td.base.f)(s, x, y)
    } else {
        let edge = n.copysign(y);
        (td.base.f)(s, x, edge) + (td.base.df_dy)(s, x, edge) * (y - edge)
    }
}

/// Sampled checks of the linear-growth, regularity and monotonicity properties inherited by
/// `f_n`. Monotonicity pairs are drawn so that half of them straddle the clamp boundary.
pub fn verify_truncation_conditions(td: &TruncatedDrift, spec: &SampleSpec) -> Result<ConditionReport> {
    if !(spec.x_range.is_finite() && spec.y_range.is_finite() && spec.samples > 0) {
        return Err(invalid("sampler ranges must be finite"));
    }
    let c = &td.base;
    let d = c.dim;
    let (l, p, n) = (c.constants.growth, c.constants.order as f64, td.n);
    let point = |rng: &mut rand_chacha::ChaCha8Rng| -> (f64, Vec<f64>) {
        let s = rng.random_range(0.0..=spec.horizon);
        let x = (0..d).map(|_| rng.random_range(-spec.x_range..=spec.x_range)).collect();
        (s, x)
    };
    let y_range = spec.y_range.max(2.0 * n);
    let mut report = ConditionReport::default();

    report.push(sampled_inequality(
        "H.1'",
        spec.samples,
        spec.seed,
        11,
        "|f_n| <= L(|f0| + (2 (n^|y|)^(p-1) + 1)|y|), |f_n'| <= L(1+|y|^(p-1))",
        |rng| {
            let (s, x) = point(rng);
            let y = rng.random_range(-y_range..=y_range);
            let v = td.eval(s, &x, y).abs();
            let dv = td.derivative(s, &x, y).abs();
            let f0 = (c.f0)(s, &x).abs();
            let r1 = l * (f0 + (2.0 * n.min(y.abs()).powf(p - 1.0) + 1.0) * y.abs());
            let r2 = l * (1.0 + y.abs().powf(p - 1.0));
            if r1 - v <= r2 - dv || !(v.is_finite() && dv.is_finite()) {
                Witness { s, x, y: vec![y], lhs: v, rhs: r1 }
            } else {
                Witness { s, x, y: vec![y], lhs: dv, rhs: r2 }
            }
        },
    ));

    report.push(sampled_inequality(
        "H.2'",
        spec.samples,
        spec.seed,
        12,
        "|f_n(x1)-f_n(x2)| <= 3L(1+|y|^p)|x1-x2|, f_n' local Lipschitz in y",
        |rng| {
            let (s, x1) = point(rng);
            let (_, x2) = point(rng);
            let y1 = rng.random_range(-y_range..=y_range);
            let y2 = rng.random_range(-y_range..=y_range);
            let dx = crate::model::weights::euclid_diff(&x1, &x2);
            let a = (td.eval(s, &x1, y1) - td.eval(s, &x2, y1)).abs();
            let ra = 3.0 * l * (1.0 + y1.abs().powf(p)) * dx;
            let b = (td.derivative(s, &x1, y1) - td.derivative(s, &x1, y2)).abs();
            let rb = l * (1.0 + y1.abs().powf(p - 2.0) + y2.abs().powf(p - 2.0)) * (y1 - y2).abs();
            if ra - a <= rb - b {
                Witness { s, x: [x1, x2].concat(), y: vec![y1], lhs: a, rhs: ra }
            } else {
                Witness { s, x: x1, y: vec![y1, y2], lhs: b, rhs: rb }
            }
        },
    ));

    report.push(sampled_inequality(
        "H.3'",
        spec.samples,
        spec.seed,
        13,
        "(y1-y2)(f_n(y1)-f_n(y2)) <= 0",
        |rng| {
            let (s, x) = point(rng);
            let (y1, y2) = if rng.random_bool(0.5) {
                // one point inside the band, one outside
                let inside = rng.random_range(-n..=n);
                let mag = rng.random_range(n..=y_range);
                (inside, if rng.random_bool(0.5) { mag } else { -mag })
            } else {
                (
                    rng.random_range(-y_range..=y_range),
                    rng.random_range(-y_range..=y_range),
                )
            };
            let lhs = (y1 - y2) * (td.eval(s, &x, y1) - td.eval(s, &x, y2));
            Witness { s, x, y: vec![y1, y2], lhs, rhs: 0.0 }
        },
    ));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::coefficients::Constants;
    use crate::model::conditions::Status;
    use proptest::prelude::*;

    fn cubic(extra: f64, l: f64) -> CoefficientSet {
        CoefficientSet::zero(1)
            .with_driver(move |y| -y * y * y + extra * y, move |y| -3.0 * y * y + extra)
            .with_f0(1.0)
            .with_constants(Constants {
                growth: l,
                monotonicity: 0.0,
                order: 3,
                lipschitz_tail: 0.0,
            })
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(project_pi(3.0, 2.0), 2.0);
        assert_eq!(project_pi(-3.0, 2.0), -2.0);
        assert_eq!(project_pi(1.5, 5.0), 1.5);
        assert_eq!(project_pi(0.0, 1.0), 0.0);
    }

    #[test]
    fn cubic_extension_values() {
        let td = TruncatedDrift::new(&cubic(0.0, 3.0), 2.0).unwrap();
        assert_eq!(td.eval(0.0, &[0.0], 3.0), -20.0);
        assert_eq!(td.eval(0.0, &[0.0], 1.0), -1.0);
        assert_eq!(td.eval(0.0, &[0.0], 2.0), -8.0);
        let e = 1e-7;
        let left = td.eval(0.0, &[0.0], 2.0 - e);
        let right = td.eval(0.0, &[0.0], 2.0 + e);
        assert!((left + 8.0).abs() < 1e-5 && (right + 8.0).abs() < 1e-5);
        assert!(((right - td.eval(0.0, &[0.0], 2.0)) / e + 12.0).abs() < 1e-6);
        assert!(((td.eval(0.0, &[0.0], 2.0) - left) / e + 12.0).abs() < 1e-5);
        assert!(TruncatedDrift::new(&cubic(0.0, 3.0), 0.0).is_err());
    }

    #[test]
    fn cubic_truncation_passes_inherited_conditions() {
        let td = TruncatedDrift::new(&cubic(0.0, 3.0), 2.0).unwrap();
        let spec = SampleSpec { samples: 4000, ..SampleSpec::default() };
        let r = verify_truncation_conditions(&td, &spec).unwrap();
        assert!(r.entries.iter().all(|e| e.status == Status::SampledPass), "{}", r.to_text());
    }

    #[test]
    fn dense_pair_enumeration_agrees_with_sampling() {
        // brute-force oracle over a dense grid of pairs
        let td = TruncatedDrift::new(&cubic(0.0, 3.0), 2.0).unwrap();
        let ys: Vec<f64> = (0..=400).map(|i| -10.0 + 0.05 * i as f64).collect();
        for &a in &ys {
            for &b in ys.iter().step_by(7) {
                let v = (a - b) * (td.eval(0.0, &[0.0], a) - td.eval(0.0, &[0.0], b));
                assert!(v <= 1e-12);
            }
        }
    }

    #[test]
    fn linear_growth_needs_constant_three() {
        // f_2(y) = 16 - 12y beyond the band, so L = 1 fails past y = 17/3 while L = 3 holds
        let td = TruncatedDrift::new(&cubic(0.0, 1.0), 2.0).unwrap();
        assert!(td.eval(0.0, &[0.0], 6.0).abs() > 1.0 + 9.0 * 6.0);
        for i in 0..=2000 {
            let y = -20.0 + 0.02 * i as f64;
            assert!(td.eval(0.0, &[0.0], y).abs() <= 3.0 * (1.0 + 9.0 * y.abs()) + 1e-9);
        }
    }

    #[test]
    fn non_monotone_drift_fails() {
        let td = TruncatedDrift::new(&cubic(10.0, 30.0), 2.0).unwrap();
        let spec = SampleSpec { samples: 4000, ..SampleSpec::default() };
        let r = verify_truncation_conditions(&td, &spec).unwrap();
        let e = r.get("H.3'").unwrap();
        assert_eq!(e.status, Status::Fail);
        assert!(!e.witnesses.is_empty());
    }

    proptest! {
        #[test]
        fn truncation_is_inactive_inside_band(y in -50.0f64..50.0, n in 0.1f64..60.0) {
            let td = TruncatedDrift::new(&cubic(0.0, 3.0), n.max(y.abs())).unwrap();
            prop_assert_eq!(td.eval(0.0, &[0.0], y), -y * y * y);
        }

        #[test]
        fn truncated_slope_is_bounded(y1 in -40.0f64..40.0, y2 in -40.0f64..40.0, n in 0.5f64..5.0) {
            let td = TruncatedDrift::new(&cubic(0.0, 3.0), n).unwrap();
            prop_assume!((y1 - y2).abs() > 1e-9);
            let slope = (td.eval(0.0, &[0.0], y1) - td.eval(0.0, &[0.0], y2)) / (y1 - y2);
            prop_assert!(slope.abs() <= 3.0 * (1.0 + n.powi(2)) + 1e-6);
            prop_assert!(slope <= 1e-9);
        }

        #[test]
        fn clamp_is_odd_and_bounded(y in -1e6f64..1e6, n in 1e-3f64..1e3) {
            prop_assert_eq!(project_pi(-y, n), -project_pi(y, n));
            prop_assert!(project_pi(y, n).abs() <= n);
        }
    }
}
