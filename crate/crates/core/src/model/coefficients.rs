//! Problem data for the forward-backward system: `b`, `σ`, `f`, `g_j`, `h` and the
//! structural constants `L`, `L_j`, `μ`, `p`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::truncation::project_pi;

/// `x ↦ b(x)` written into `out` (length `d`).
pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `x ↦ σ(x)` written row-major into `out` (length `d*d`).
pub type MatrixField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(s, x, y) ↦ value`.
pub type Driver = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// `(s, x) ↦ value`.
pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `x ↦ value`.
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One component `g_j` of the backward-noise coefficient.
#[derive(Clone)]
pub struct NoiseCoefficient {
    pub g: Driver,
    pub dg_dy: Driver,
    /// Lipschitz constant `L_j`.
    pub lipschitz: f64,
}

impl NoiseCoefficient {
    pub fn constant(gamma: f64) -> Self {
        Self::affine(gamma, 0.0)
    }

    /// `g(y) = a + b y`.
    pub fn affine(a: f64, b: f64) -> Self {
        Self {
            g: Arc::new(move |_, _, y| a + b * y),
            dg_dy: Arc::new(move |_, _, _| b),
            lipschitz: b.abs(),
        }
    }
}

/// Structural constants shared by the condition checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Growth constant `L`.
    pub growth: f64,
    /// One-sided Lipschitz constant of `f` in `y`: `(y1-y2)(f(y1)-f(y2)) <= μ|y1-y2|²`.
    pub monotonicity: f64,
    /// Polynomial growth order `p >= 2`.
    pub order: u32,
    /// Declared bound on `Σ_{j>N} L_j` for the components not stored.
    pub lipschitz_tail: f64,
}

#[derive(Clone)]
pub struct CoefficientSet {
    pub name: String,
    pub dim: usize,
    pub b: VectorField,
    pub sigma: MatrixField,
    pub f: Driver,
    pub df_dy: Driver,
    pub f0: SpaceTimeFn,
    pub g: Vec<NoiseCoefficient>,
    pub h: ScalarField,
    pub constants: Constants,
    /// Drift truncation level applied to `f`, if any.
    pub truncation: Option<f64>,
}

impl fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_components", &self.g.len())
            .field("constants", &self.constants)
            .field("truncation", &self.truncation)
            .finish()
    }
}

impl CoefficientSet {
    /// All-zero data on `R^d`: `b = 0`, `σ = 0`, `f = 0`, no noise, `h = 0`.
    pub fn zero(dim: usize) -> Self {
        Self {
            name: "zero".into(),
            dim,
            b: Arc::new(|_, out| out.fill(0.0)),
            sigma: Arc::new(|_, out| out.fill(0.0)),
            f: Arc::new(|_, _, _| 0.0),
            df_dy: Arc::new(|_, _, _| 0.0),
            f0: Arc::new(|_, _| 0.0),
            g: Vec::new(),
            h: Arc::new(|_| 0.0),
            constants: Constants {
                growth: 1.0,
                monotonicity: 0.0,
                order: 2,
                lipschitz_tail: 0.0,
            },
            truncation: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Constant drift vector.
    pub fn with_constant_drift(mut self, drift: Vec<f64>) -> Self {
        self.b = Arc::new(move |_, out| out.copy_from_slice(&drift));
        self
    }

    /// `b(x) = a + c x` componentwise.
    pub fn with_affine_drift(mut self, a: f64, c: f64) -> Self {
        self.b = Arc::new(move |x, out| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = a + c * xi;
            }
        });
        self
    }

    /// `σ = s I`.
    pub fn with_scalar_diffusion(mut self, s: f64) -> Self {
        let d = self.dim;
        self.sigma = Arc::new(move |_, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = s;
            }
        });
        self
    }

    /// Autonomous driver `f(y)` with derivative `f'(y)`.
    pub fn with_driver(
        mut self,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.f = Arc::new(move |_, _, y| f(y));
        self.df_dy = Arc::new(move |_, _, y| df(y));
        self
    }

    pub fn with_f0(mut self, c: f64) -> Self {
        self.f0 = Arc::new(move |_, _| c);
        self
    }

    pub fn with_noise(mut self, g: Vec<NoiseCoefficient>) -> Self {
        self.g = g;
        self
    }

    pub fn with_terminal(mut self, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.h = Arc::new(h);
        self
    }

    pub fn with_constants(mut self, constants: Constants) -> Self {
        self.constants = constants;
        self
    }

    pub fn noise_dimension(&self) -> usize {
        self.g.len()
    }

    pub fn lipschitz_sum(&self) -> f64 {
        self.g.iter().map(|g| g.lipschitz).sum::<f64>() + self.constants.lipschitz_tail
    }

    /// `Σ_j L_j²` over stored components plus the bound implied by the declared tail.
    pub fn lipschitz_square_sum(&self) -> f64 {
        let t = self.constants.lipschitz_tail;
        self.g.iter().map(|g| g.lipschitz * g.lipschitz).sum::<f64>() + t * t
    }

    /// Keep only the first `n` noise components.
    pub fn with_noise_dimension(&self, n: usize) -> Result<Self> {
        if n > self.g.len() {
            return Err(invalid(format!(
                "requested {n} noise components but only {} are defined",
                self.g.len()
            )));
        }
        let mut out = self.clone();
        let dropped: f64 = self.g[n..].iter().map(|g| g.lipschitz).sum();
        out.g.truncate(n);
        out.constants.lipschitz_tail += dropped;
        Ok(out)
    }

    /// Replace `f` by its truncation `f_n` (and `∂_y f` by `∂_y f_n = ∂_y f ∘ Π_n`).
    pub fn with_drift_truncation(&self, n: f64) -> Result<Self> {
        if !(n > 0.0) {
            return Err(invalid(format!("truncation level must be positive, got {n}")));
        }
        let mut out = self.clone();
        let f = self.f.clone();
        let df = self.df_dy.clone();
        out.f = Arc::new(crate::truncation::truncated_driver(f, df.clone(), n));
        out.df_dy = Arc::new(move |s, x, y| df(s, x, project_pi(y, n)));
        out.truncation = Some(match self.truncation {
            Some(m) => m.min(n),
            None => n,
        });
        Ok(out)
    }

    /// Data for `c Y`: `h → c h`, `f(y) → c f(y/c)`, `g(y) → c g(y/c)`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if c == 0.0 || !c.is_finite() {
            return Err(invalid("scaling factor must be finite and nonzero"));
        }
        let mut out = self.clone();
        let (f, df, h) = (self.f.clone(), self.df_dy.clone(), self.h.clone());
        out.f = Arc::new(move |s, x, y| c * f(s, x, y / c));
        out.df_dy = Arc::new(move |s, x, y| df(s, x, y / c));
        out.h = Arc::new(move |x| c * h(x));
        out.g = self
            .g
            .iter()
            .map(|gj| {
                let (g, dg) = (gj.g.clone(), gj.dg_dy.clone());
                NoiseCoefficient {
                    g: Arc::new(move |s, x, y| c * g(s, x, y / c)),
                    dg_dy: Arc::new(move |s, x, y| dg(s, x, y / c)),
                    lipschitz: gj.lipschitz,
                }
            })
            .collect();
        Ok(out)
    }

    /// Data for `Ỹ_s = e^{μ s} Y_s`: `f̃(r,x,y) = e^{μr} f(r,x,e^{-μr}y) - μy`,
    /// `g̃(r,x,y) = e^{μr} g(r,x,e^{-μr}y)`, `h̃ = e^{μT} h`. The transformed driver is
    /// monotone with constant 0 when `μ` is the monotonicity constant of `f`.
    pub fn exponential_transform(&self, mu: f64, terminal_time: f64) -> Self {
        let mut out = self.clone();
        let (f, df, h) = (self.f.clone(), self.df_dy.clone(), self.h.clone());
        out.f = Arc::new(move |r, x, y| (mu * r).exp() * f(r, x, (-mu * r).exp() * y) - mu * y);
        out.df_dy = Arc::new(move |r, x, y| df(r, x, (-mu * r).exp() * y) - mu);
        let scale = (mu * terminal_time).exp();
        out.h = Arc::new(move |x| scale * h(x));
        out.g = self
            .g
            .iter()
            .map(|gj| {
                let (g, dg) = (gj.g.clone(), gj.dg_dy.clone());
                NoiseCoefficient {
                    g: Arc::new(move |r, x, y| (mu * r).exp() * g(r, x, (-mu * r).exp() * y)),
                    dg_dy: Arc::new(move |r, x, y| dg(r, x, (-mu * r).exp() * y)),
                    lipschitz: gj.lipschitz,
                }
            })
            .collect();
        out.constants.monotonicity = self.constants.monotonicity - mu;
        out.name = format!("{}-exp-transformed", self.name);
        out
    }

    /// `a = σσ*` at `x`, row-major.
    pub fn diffusion_matrix(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut s = vec![0.0; d * d];
        (self.sigma)(x, &mut s);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
            }
        }
    }
}

/// Terminal conditions expressible in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    Zero,
    Constant { value: f64 },
    /// `h(x) = x_1`.
    Identity,
    /// `h(x) = tanh(x_1)`.
    Tanh,
    /// `amplitude * exp(-|x - center|² / (2 width²))`.
    Gaussian {
        amplitude: f64,
        #[serde(default)]
        center: f64,
        width: f64,
    },
}

impl TerminalSpec {
    pub fn build(&self) -> ScalarField {
        match *self {
            TerminalSpec::Zero => Arc::new(|_| 0.0),
            TerminalSpec::Constant { value } => Arc::new(move |_| value),
            TerminalSpec::Identity => Arc::new(|x| x[0]),
            TerminalSpec::Tanh => Arc::new(|x| x[0].tanh()),
            TerminalSpec::Gaussian {
                amplitude,
                center,
                width,
            } => Arc::new(move |x| {
                let r2: f64 = x.iter().map(|v| (v - center) * (v - center)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }),
        }
    }
}

/// `g_j(y) = a + b y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineNoiseSpec {
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

/// Coefficients given in a configuration file: polynomial `f`, affine `g_j`, affine
/// drift and constant scalar diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCoefficients {
    #[serde(default = "one")]
    pub dim: usize,
    /// `f(y) = Σ_k c_k y^k`.
    #[serde(default)]
    pub f_poly: Vec<f64>,
    #[serde(default)]
    pub g: Vec<AffineNoiseSpec>,
    /// `b(x) = drift_a + drift_b x`.
    #[serde(default)]
    pub drift_a: f64,
    #[serde(default)]
    pub drift_b: f64,
    #[serde(default = "one_f")]
    pub sigma: f64,
    pub terminal: TerminalSpec,
    /// Growth order `p`; defaults to `max(2, deg f)`.
    #[serde(default)]
    pub order: Option<u32>,
    /// Growth constant `L`; defaults to the smallest value compatible with the sampled bounds.
    #[serde(default)]
    pub growth: Option<f64>,
    /// Monotonicity constant; defaults to `sup f'` over a sampled band.
    #[serde(default)]
    pub monotonicity: Option<f64>,
    #[serde(default)]
    pub lipschitz_tail: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}

fn poly_eval(c: &[f64], y: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, ck| acc * y + ck)
}

fn poly_derivative(c: &[f64]) -> Vec<f64> {
    c.iter()
        .enumerate()
        .skip(1)
        .map(|(k, ck)| k as f64 * ck)
        .collect()
}

impl InlineCoefficients {
    pub fn build(&self) -> Result<CoefficientSet> {
        if !(1..=2).contains(&self.dim) {
            return Err(invalid(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        if !(self.sigma.is_finite() && self.sigma != 0.0) {
            return Err(invalid("sigma must be finite and nonzero"));
        }
        let coeffs: Vec<f64> = self.f_poly.clone();
        let degree = coeffs.iter().rposition(|c| *c != 0.0).unwrap_or(0) as u32;
        let order = self.order.unwrap_or(degree.max(2));
        if order < 2 {
            return Err(invalid("growth order p must be >= 2"));
        }
        let dcoeffs = poly_derivative(&coeffs);
        let f0 = coeffs.first().copied().unwrap_or(0.0).abs() + 1.0;
        let pf = order as f64;
        let band: Vec<f64> = (0..=4000).map(|i| -20.0 + i as f64 * 0.01).collect();
        let growth = match self.growth {
            Some(l) => l,
            None => band
                .iter()
                .map(|&y| {
                    let a = poly_eval(&coeffs, y).abs() / (f0 + y.abs().powf(pf));
                    let b = poly_eval(&dcoeffs, y).abs() / (1.0 + y.abs().powf(pf - 1.0));
                    a.max(b)
                })
                .fold(1.0_f64, f64::max)
                .ceil(),
        };
        let monotonicity = match self.monotonicity {
            Some(m) => m,
            None => {
                let s = band
                    .iter()
                    .map(|&y| poly_eval(&dcoeffs, y))
                    .fold(f64::NEG_INFINITY, f64::max);
                if s.abs() < 1e-12 {
                    0.0
                } else {
                    s
                }
            }
        };
        let (c1, d1) = (coeffs.clone(), dcoeffs.clone());
        let set = CoefficientSet::zero(self.dim)
            .named("inline")
            .with_affine_drift(self.drift_a, self.drift_b)
            .with_scalar_diffusion(self.sigma)
            .with_driver(move |y| poly_eval(&c1, y), move |y| poly_eval(&d1, y))
            .with_f0(f0)
            .with_noise(
                self.g
                    .iter()
                    .map(|s| NoiseCoefficient::affine(s.a, s.b))
                    .collect(),
            )
            .with_constants(Constants {
                growth,
                monotonicity,
                order,
                lipschitz_tail: self.lipschitz_tail,
            });
        let h = self.terminal.build();
        Ok(CoefficientSet { h, ..set })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_noise_lipschitz() {
        let g = NoiseCoefficient::affine(0.5, -0.3);
        assert_eq!((g.g)(0.0, &[0.0], 2.0), 0.5 - 0.6);
        assert_eq!(g.lipschitz, 0.3);
    }

    #[test]
    fn scaled_problem_scales_data() {
        let c = CoefficientSet::zero(1)
            .with_driver(|y| -y * y * y, |y| -3.0 * y * y)
            .with_noise(vec![NoiseCoefficient::affine(0.1, 0.2)])
            .with_terminal(|x| x[0]);
        let s = c.scaled(2.0).unwrap();
        assert_eq!((s.h)(&[1.5]), 3.0);
        assert_eq!((s.f)(0.0, &[0.0], 2.0), -2.0);
        assert!(((s.g[0].g)(0.0, &[0.0], 2.0) - 2.0 * (0.1 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn exponential_transform_removes_monotonicity() {
        let c = CoefficientSet::zero(1)
            .with_driver(|y| 0.7 * y, |_| 0.7)
            .with_constants(Constants {
                growth: 1.0,
                monotonicity: 0.7,
                order: 2,
                lipschitz_tail: 0.0,
            });
        let t = c.exponential_transform(0.7, 1.0);
        assert!(((t.f)(0.3, &[0.0], 1.0) - 0.0).abs() < 1e-14);
        assert!((t.constants.monotonicity).abs() < 1e-15);
    }

    #[test]
    fn inline_polynomial_build() {
        let spec: InlineCoefficients = toml::from_str(
            r#"
            f_poly = [0.0, 0.0, 0.0, -1.0]
            g = [{ a = 0.0, b = 0.3 }]
            terminal = { kind = "tanh" }
            "#,
        )
        .unwrap();
        let c = spec.build().unwrap();
        assert_eq!(c.constants.order, 3);
        assert_eq!(c.constants.growth, 3.0);
        assert_eq!(c.constants.monotonicity, 0.0);
        assert_eq!((c.f)(0.0, &[0.0], 2.0), -8.0);
        assert_eq!((c.df_dy)(0.0, &[0.0], 2.0), -12.0);
        assert!((c.h)(&[0.5]) - 0.5f64.tanh() == 0.0);
    }

    #[test]
    fn inline_rejects_unknown_keys() {
        let r: std::result::Result<InlineCoefficients, _> =
            toml::from_str("terminal = { kind = \"zero\" }\nbogus = 1\n");
        assert!(r.is_err());
    }

    #[test]
    fn noise_dimension_moves_lipschitz_to_tail() {
        let c = CoefficientSet::zero(1).with_noise(vec![
            NoiseCoefficient::affine(0.0, 0.5),
            NoiseCoefficient::affine(0.0, 0.25),
        ]);
        let d = c.with_noise_dimension(1).unwrap();
        assert_eq!(d.noise_dimension(), 1);
        assert_eq!(d.constants.lipschitz_tail, 0.25);
        assert_eq!(d.lipschitz_sum(), c.lipschitz_sum());
        assert!(c.with_noise_dimension(3).is_err());
    }
}
