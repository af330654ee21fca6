//! Built-in coefficient presets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::coefficients::{CoefficientSet, Constants, NoiseCoefficient, TerminalSpec};
use crate::model::conditions::{check_conditions, ConditionReport, SampleSpec};
use crate::stationary::default_discount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    CubicMonotone,
    LinearMu,
    GammaConstantG,
    Heat,
    OuFlow,
}

pub const ALL_PRESETS: [Preset; 5] = [
    Preset::CubicMonotone,
    Preset::LinearMu,
    Preset::GammaConstantG,
    Preset::Heat,
    Preset::OuFlow,
];

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::CubicMonotone => "cubic-monotone",
            Preset::LinearMu => "linear-mu",
            Preset::GammaConstantG => "gamma-constant-g",
            Preset::Heat => "heat",
            Preset::OuFlow => "ou-flow",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::CubicMonotone => "f = -y^3 (p = 3, L = 3, monotone with mu = 0), g = (0.5, 0.25), sigma = 1, h = 2 tanh(x)",
            Preset::LinearMu => "f = -mu y + c, g = gamma, b = 0 or -x, sigma = 1, h = 0 (parameters mu, c, gamma, drift, sigma, terminal)",
            Preset::GammaConstantG => "f = 0, g = gamma = 0.5, b = 0, sigma = 1, h = x",
            Preset::Heat => "f = 0, g = 0, b = 0, sigma = sqrt(2), h = exp(-x^2 / 2)",
            Preset::OuFlow => "b = -x, sigma = 0.5, f = -y, g = 0.2 + 0.1 y, h = tanh(x)",
        }
    }

    /// Condition labels the preset is declared to satisfy.
    pub fn declared_conditions(self) -> &'static [&'static str] {
        match self {
            Preset::LinearMu => &["H.1", "H.2", "H.3", "H.4", "H.5", "H.6", "H.7", "H.8", "H.9"],
            _ => &["H.1", "H.2", "H.3", "H.4", "H.5", "H.6"],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_PRESETS
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}'; see list-presets")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    #[default]
    Zero,
    /// `b(x) = -x`.
    Ou,
}

/// Overrides for the parameterized presets. Fields a preset does not use are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalSpec>,
}

impl PresetParams {
    pub(crate) fn is_empty(&self) -> bool {
        *self == PresetParams::default()
    }
}

/// Parameters of `linear-mu` after defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMu {
    pub mu: f64,
    pub c: f64,
    pub gamma: f64,
    pub drift: DriftKind,
    pub sigma: f64,
    pub terminal: TerminalSpec,
}

impl Default for LinearMu {
    fn default() -> Self {
        Self { mu: 1.0, c: 0.0, gamma: 0.0, drift: DriftKind::Zero, sigma: 1.0, terminal: TerminalSpec::Zero }
    }
}

impl LinearMu {
    pub fn build(&self) -> Result<CoefficientSet> {
        let (mu, c) = (self.mu, self.c);
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(invalid(format!("linear-mu needs mu > 0, got {mu}")));
        }
        let mut set = CoefficientSet::zero(1)
            .named(Preset::LinearMu.name())
            .with_scalar_diffusion(self.sigma)
            .with_driver(move |y| -mu * y + c, move |_| -mu)
            .with_f0(1.0)
            .with_noise(if self.gamma != 0.0 { vec![NoiseCoefficient::constant(self.gamma)] } else { Vec::new() })
            .with_constants(Constants { growth: mu.max(1.0) + c.abs(), monotonicity: -mu, order: 2, lipschitz_tail: 0.0 });
        set.h = self.terminal.build();
        if self.drift == DriftKind::Ou {
            set = set.with_affine_drift(0.0, -1.0);
        }
        Ok(set)
    }
}

fn reject_params(preset: Preset, params: &PresetParams) -> Result<()> {
    if params.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("preset '{preset}' takes no parameters")))
    }
}

pub fn build_preset(preset: Preset, params: &PresetParams) -> Result<CoefficientSet> {
    match preset {
        Preset::CubicMonotone => {
            reject_params(preset, params)?;
            Ok(cubic_monotone())
        }
        Preset::LinearMu => {
            let d = LinearMu::default();
            LinearMu {
                mu: params.mu.unwrap_or(d.mu),
                c: params.c.unwrap_or(d.c),
                gamma: params.gamma.unwrap_or(d.gamma),
                drift: params.drift.unwrap_or(d.drift),
                sigma: params.sigma.unwrap_or(d.sigma),
                terminal: params.terminal.clone().unwrap_or(d.terminal),
            }
            .build()
        }
        Preset::GammaConstantG => {
            reject_params(preset, params)?;
            Ok(gamma_constant_g())
        }
        Preset::Heat => {
            reject_params(preset, params)?;
            Ok(heat())
        }
        Preset::OuFlow => {
            reject_params(preset, params)?;
            Ok(ou_flow())
        }
    }
}

pub fn cubic_monotone() -> CoefficientSet {
    CoefficientSet::zero(1)
        .named(Preset::CubicMonotone.name())
        .with_scalar_diffusion(1.0)
        .with_driver(|y| -y * y * y, |y| -3.0 * y * y)
        .with_noise(vec![NoiseCoefficient::constant(0.5), NoiseCoefficient::constant(0.25)])
        .with_terminal(|x| 2.0 * x[0].tanh())
        .with_constants(Constants { growth: 3.0, monotonicity: 0.0, order: 3, lipschitz_tail: 0.0 })
}

pub fn gamma_constant_g() -> CoefficientSet {
    CoefficientSet::zero(1)
        .named(Preset::GammaConstantG.name())
        .with_scalar_diffusion(1.0)
        .with_noise(vec![NoiseCoefficient::constant(0.5)])
        .with_terminal(|x| x[0])
}

pub fn heat() -> CoefficientSet {
    CoefficientSet::zero(1)
        .named(Preset::Heat.name())
        .with_scalar_diffusion(std::f64::consts::SQRT_2)
        .with_terminal(|x| (-0.5 * x[0] * x[0]).exp())
}

pub fn ou_flow() -> CoefficientSet {
    CoefficientSet::zero(1)
        .named(Preset::OuFlow.name())
        .with_affine_drift(0.0, -1.0)
        .with_scalar_diffusion(0.5)
        .with_driver(|y| -y, |_| -1.0)
        .with_f0(1.0)
        .with_noise(vec![NoiseCoefficient::affine(0.2, 0.1)])
        .with_terminal(|x| x[0].tanh())
        .with_constants(Constants { growth: 1.0, monotonicity: -1.0, order: 2, lipschitz_tail: 0.0 })
}

/// Sampling used when checking a preset: discount set for presets declaring the
/// infinite-horizon conditions.
pub fn preset_sample_spec(coeffs: &CoefficientSet, declared: &[&str], base: SampleSpec) -> SampleSpec {
    let mut spec = base;
    if declared.contains(&"H.9") && spec.discount == 0.0 {
        let c = coeffs.constants;
        if let Ok(k) = default_discount(-c.monotonicity, c.order as f64, coeffs.lipschitz_sum()) {
            spec.discount = k;
        }
    }
    spec
}

/// Check a preset against its declared conditions.
pub fn check_preset(preset: Preset, params: &PresetParams, base: SampleSpec) -> Result<(ConditionReport, bool)> {
    let coeffs = build_preset(preset, params)?;
    let declared = preset.declared_conditions();
    let report = check_conditions(&coeffs, &preset_sample_spec(&coeffs, declared, base))?;
    let ok = report.passes(declared);
    Ok((report, ok))
}

/// One line per preset with its declared-condition status.
pub fn preset_table(spec: SampleSpec) -> Result<String> {
    let width = ALL_PRESETS.iter().map(|p| p.declared_conditions().join(",").len()).max().unwrap_or(0);
    let mut out = format!("{:<17} {:<7} {:<width$} description\n", "preset", "status", "conditions");
    for p in ALL_PRESETS {
        let (_, ok) = check_preset(p, &PresetParams::default(), spec)?;
        out.push_str(&format!(
            "{:<17} {:<7} {:<width$} {}\n",
            p.name(),
            if ok { "pass" } else { "FAIL" },
            p.declared_conditions().join(","),
            p.description()
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SampleSpec {
        SampleSpec { samples: 2000, terminal_paths: 100, ..SampleSpec::default() }
    }

    #[test]
    fn every_preset_passes_its_declared_conditions() {
        for p in ALL_PRESETS {
            let (report, ok) = check_preset(p, &PresetParams::default(), spec()).unwrap();
            assert!(ok, "{p}: {}", report.to_text());
        }
    }

    #[test]
    fn cubic_reports_order_three_and_zero_monotonicity() {
        let c = cubic_monotone();
        assert_eq!(c.constants.order, 3);
        assert_eq!(c.constants.monotonicity, 0.0);
    }

    #[test]
    fn names_round_trip() {
        for p in ALL_PRESETS {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("cubic".parse::<Preset>().is_err());
    }

    #[test]
    fn fixed_presets_reject_parameters() {
        let params = PresetParams { mu: Some(2.0), ..PresetParams::default() };
        assert!(build_preset(Preset::Heat, &params).is_err());
        assert!(build_preset(Preset::LinearMu, &params).is_ok());
        let bad = PresetParams { mu: Some(-1.0), ..PresetParams::default() };
        assert!(build_preset(Preset::LinearMu, &bad).is_err());
    }
}
