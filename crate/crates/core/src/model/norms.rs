//! Weighted spatial norms, discounted path-space norms and the empirical
//! equivalence-of-norm ratio.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::FlowPanel;
use crate::grid::FieldSnapshot;
use crate::model::weights::RhoWeight;

/// `(Σ_grid |l(x)|^k ρ^{-1}(x) w(x))^{1/k}` with product-trapezoid weights `w`.
pub fn weighted_lp_norm(field: &FieldSnapshot, k: f64, weight: &RhoWeight) -> Result<f64> {
    if !(k >= 1.0) {
        return Err(invalid(format!("norm exponent must be >= 1, got {k}")));
    }
    if field.grid.dim() != weight.dim() {
        return Err(Error::Shape(format!(
            "field lives in d={} but the weight is for d={}",
            field.grid.dim(),
            weight.dim()
        )));
    }
    Ok(weighted_power_sum(field, k, weight).powf(1.0 / k))
}

/// `Σ_grid |l(x)|^k ρ^{-1}(x) w(x)` without the final root.
pub(crate) fn weighted_power_sum(field: &FieldSnapshot, k: f64, weight: &RhoWeight) -> f64 {
    let g = &field.grid;
    let mut x = vec![0.0; g.dim()];
    let mut acc = 0.0;
    for (i, v) in field.values.iter().enumerate() {
        g.node_into(i, &mut x);
        acc += v.abs().powf(k) * weight.inv_rho(&x) * g.trapezoid_weight(i);
    }
    acc
}

/// Time range of a discounted norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Horizon {
    Finite { t_end: f64 },
    /// `[t, ∞)` truncated at `t_end`.
    TruncatedInfinite { t_end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscountedNormSpec {
    pub discount: f64,
    pub exponent: f64,
    pub horizon: Horizon,
}

impl DiscountedNormSpec {
    pub fn new(discount: f64, exponent: f64, horizon: Horizon) -> Result<Self> {
        if !(exponent >= 1.0) || !discount.is_finite() || discount < 0.0 {
            return Err(invalid("norm exponent must be >= 1 and the discount nonnegative"));
        }
        if matches!(horizon, Horizon::TruncatedInfinite { .. }) && discount <= 0.0 {
            return Err(invalid("infinite horizons need a positive discount K"));
        }
        Ok(Self {
            discount,
            exponent,
            horizon,
        })
    }

    fn t_end(&self) -> f64 {
        match self.horizon {
            Horizon::Finite { t_end } | Horizon::TruncatedInfinite { t_end } => t_end,
        }
    }
}

/// Read-only view of a `(time step, path)` panel with per-path start points and
/// quadrature weights; entries may be vectors (`comps > 1`).
#[derive(Debug, Clone, Copy)]
pub struct PanelView<'a> {
    pub times: &'a [f64],
    /// `values[(k * paths + i) * comps + c]`.
    pub values: &'a [f64],
    pub paths: usize,
    pub comps: usize,
    /// Start points, `paths × d`.
    pub starts: &'a [f64],
    pub dim: usize,
    pub weights: &'a [f64],
    pub valid: &'a [bool],
}

impl PanelView<'_> {
    /// `Σ_i w_i ρ^{-1}(x_i) |v_{k,i}|^q` over valid paths.
    pub fn slice_power(&self, k: usize, q: f64, weight: Option<&RhoWeight>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.paths {
            if !self.valid[i] {
                continue;
            }
            let off = (k * self.paths + i) * self.comps;
            let v = &self.values[off..off + self.comps];
            let n2: f64 = v.iter().map(|a| a * a).sum();
            let rho = weight.map_or(1.0, |w| w.inv_rho(&self.starts[i * self.dim..(i + 1) * self.dim]));
            acc += self.weights[i] * rho * n2.powf(0.5 * q);
        }
        acc
    }
}

/// Discrete `(sup_s e^{-Ks} ‖φ(s)‖^q, ∫ e^{-Ks} ‖φ(s)‖^q ds)` where `‖·‖^q` is the
/// quadrature/Monte Carlo estimate over the panel's paths. `weight = None` means `ρ ≡ 1`.
pub fn discounted_path_norm(
    panel: &PanelView<'_>,
    spec: &DiscountedNormSpec,
    weight: Option<&RhoWeight>,
) -> Result<(f64, f64)> {
    if panel.paths == 0 || panel.times.is_empty() || panel.valid.iter().all(|v| !v) {
        return Err(invalid("empty panel"));
    }
    let last = *panel.times.last().expect("nonempty");
    if last > spec.t_end() + 1e-9 {
        return Err(invalid(format!(
            "panel extends to {last}, beyond the norm horizon {}",
            spec.t_end()
        )));
    }
    let vals: Vec<f64> = (0..panel.times.len())
        .map(|k| (-spec.discount * panel.times[k]).exp() * panel.slice_power(k, spec.exponent, weight))
        .collect();
    let sup = vals.iter().copied().fold(0.0, f64::max);
    let integral = panel
        .times
        .windows(2)
        .zip(vals.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum();
    Ok((sup, integral))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRatioSample {
    pub phi: usize,
    pub time: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRatio {
    pub ratio_low: f64,
    pub ratio_high: f64,
    pub samples: Vec<NormRatioSample>,
}

/// `E[∫|φ(X_s^{t,x})| ρ^{-1}(x) dx] / ∫|φ(x)| ρ^{-1}(x) dx` for each test field and each
/// requested step. The flow must have been started from the nodes of the field grid.
pub fn equivalence_of_norm_ratio(
    battery: &[FieldSnapshot],
    flow: &FlowPanel,
    weight: &RhoWeight,
    steps: &[usize],
) -> Result<NormRatio> {
    if battery.is_empty() {
        return Err(invalid("empty test-function battery"));
    }
    let mut samples = Vec::new();
    for (pi, phi) in battery.iter().enumerate() {
        let g = &phi.grid;
        if !flow.paths().is_multiple_of(g.len()) {
            return Err(Error::Shape(
                "flow was not started from the nodes of the field grid".into(),
            ));
        }
        let per = flow.paths() / g.len();
        let denom = weighted_power_sum(phi, 1.0, weight);
        if denom == 0.0 {
            return Err(invalid(format!("test field {pi} is identically zero")));
        }
        for &k in steps {
            if k > flow.grid().n_steps() {
                return Err(invalid(format!("step {k} outside the flow window")));
            }
            let mut num = 0.0;
            let mut x = vec![0.0; g.dim()];
            for node in 0..g.len() {
                g.node_into(node, &mut x);
                if flow.start((node * per).min(flow.paths() - 1)) != x.as_slice() {
                    return Err(Error::Shape(
                        "flow start points do not match the field grid nodes".into(),
                    ));
                }
                let mut acc = 0.0;
                let mut count = 0usize;
                for m in 0..per {
                    let i = node * per + m;
                    if flow.valid()[i] {
                        acc += g.interpolate(&phi.values, flow.state(k, i)).abs();
                        count += 1;
                    }
                }
                if count > 0 {
                    num += acc / count as f64 * weight.inv_rho(&x) * g.trapezoid_weight(node);
                }
            }
            samples.push(NormRatioSample {
                phi: pi,
                time: flow.grid().time(k),
                ratio: num / denom,
            });
        }
    }
    let ratio_low = samples.iter().map(|s| s.ratio).fold(f64::INFINITY, f64::min);
    let ratio_high = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    Ok(NormRatio {
        ratio_low,
        ratio_high,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;

    #[test]
    fn zero_and_constant_fields() {
        let w = RhoWeight::new(2.0, 1).unwrap();
        let g = SpatialGrid::new(1, 2000.0, 0.05).unwrap();
        assert_eq!(weighted_lp_norm(&FieldSnapshot::constant(0.0, g, 0.0), 2.0, &w).unwrap(), 0.0);
        // ∫(1+|x|)^{-2} = 2 on R; truncation at R loses 2/(1+R); the kink at 0 adds
        // the trapezoid defect h²/12 (f'(R) - f'(0)) on each half-line
        let n = weighted_lp_norm(&FieldSnapshot::constant(0.0, g, 3.0), 2.0, &w).unwrap();
        let h = 0.05f64;
        let defect = 2.0 * h * h / 12.0 * (2.0 - 2.0 / 2001.0f64.powi(3));
        let expect = 3.0 * (2.0 - 2.0 / 2001.0 + defect).sqrt();
        assert!((n - expect).abs() / expect < 1e-5, "{n} {expect}");
    }

    #[test]
    fn indicator_norm() {
        let w = RhoWeight::new(2.0, 1).unwrap();
        let g = SpatialGrid::new(1, 4.0, 0.001).unwrap();
        // |f|^2 = 1/2 at the jump points makes the trapezoid rule consistent for the indicator
        let f = FieldSnapshot::from_fn(0.0, g, |x| {
            if (-1e-9..=1.0 + 1e-9).contains(&x[0]) {
                if x[0].abs() < 1e-9 || (x[0] - 1.0).abs() < 1e-9 { 0.5f64.sqrt() } else { 1.0 }
            } else {
                0.0
            }
        });
        let n = weighted_lp_norm(&f, 2.0, &w).unwrap();
        assert!((n - 0.5f64.sqrt()).abs() < 1e-6, "{n}");
    }

    #[test]
    fn weight_dimension_mismatch() {
        let w = RhoWeight::new(3.0, 2).unwrap();
        let g = SpatialGrid::new(1, 1.0, 0.5).unwrap();
        assert!(weighted_lp_norm(&FieldSnapshot::constant(0.0, g, 1.0), 2.0, &w).is_err());
    }

    fn view<'a>(times: &'a [f64], values: &'a [f64], starts: &'a [f64], weights: &'a [f64], valid: &'a [bool]) -> PanelView<'a> {
        PanelView { times, values, paths: weights.len(), comps: 1, starts, dim: 1, weights, valid }
    }

    #[test]
    fn discounted_constant_panels() {
        let times: Vec<f64> = (0..=1000).map(|k| k as f64 * 1e-3).collect();
        let values = vec![1.0; 1001 * 2];
        let starts = [0.0, 1.0];
        let weights = [0.5, 0.5];
        let valid = [true, true];
        let v = view(&times, &values, &starts, &weights, &valid);
        let spec = DiscountedNormSpec::new(0.0, 2.0, Horizon::Finite { t_end: 1.0 }).unwrap();
        let (s, i) = discounted_path_norm(&v, &spec, None).unwrap();
        assert!((s - 1.0).abs() < 1e-14 && (i - 1.0).abs() < 1e-12);
        let spec = DiscountedNormSpec::new(1.0, 2.0, Horizon::TruncatedInfinite { t_end: 1.0 }).unwrap();
        let (_, i) = discounted_path_norm(&v, &spec, None).unwrap();
        assert!((i - (1.0 - (-1.0f64).exp())).abs() < 1e-6);
        assert!(DiscountedNormSpec::new(0.0, 2.0, Horizon::TruncatedInfinite { t_end: 1.0 }).is_err());
    }

    #[test]
    fn discounted_exponential_panel() {
        let times: Vec<f64> = (0..=4000).map(|k| k as f64 * 1e-3).collect();
        let values: Vec<f64> = times.iter().map(|t| (t / 2.0).exp()).collect();
        let v = view(&times, &values, &[0.0], &[1.0], &[true]);
        let spec = DiscountedNormSpec::new(2.0, 2.0, Horizon::TruncatedInfinite { t_end: 4.0 }).unwrap();
        let (s, i) = discounted_path_norm(&v, &spec, None).unwrap();
        assert!((i - (1.0 - (-4.0f64).exp())).abs() < 1e-6);
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_panel_rejected() {
        let spec = DiscountedNormSpec::new(0.0, 2.0, Horizon::Finite { t_end: 1.0 }).unwrap();
        let v = view(&[0.0], &[], &[], &[], &[]);
        assert!(discounted_path_norm(&v, &spec, None).is_err());
    }
}
