//! Problem data, the weight `ρ`, norms and condition checks.

pub mod coefficients;
pub mod conditions;
pub mod norms;
pub mod weights;

pub use coefficients::{CoefficientSet, Constants, NoiseCoefficient, TerminalSpec};
pub use conditions::{check_conditions, ConditionReport, SampleSpec, Status};
pub use norms::{discounted_path_norm, equivalence_of_norm_ratio, weighted_lp_norm, DiscountedNormSpec, Horizon};
pub use weights::{rho_weight, RhoWeight, WeightSpec};
