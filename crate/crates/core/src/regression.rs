//! Least-squares estimation of conditional expectations on basis functions of the state.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisFamily {
    /// Monomials of total degree `<= degree` in the standardized state.
    Polynomial { degree: u32 },
    /// Tensor-product piecewise-linear hat functions on `[lo, hi]^d` with `cells` cells per
    /// axis; states outside the box are clamped onto it.
    Hat { lo: f64, hi: f64, cells: usize },
}

/// Unknown keys are rejected by the flattened family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    #[serde(flatten)]
    pub family: BasisFamily,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

impl RegressionBasis {
    pub fn polynomial(degree: u32) -> Self {
        Self {
            family: BasisFamily::Polynomial { degree },
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn hat(lo: f64, hi: f64, cells: usize) -> Self {
        Self {
            family: BasisFamily::Hat { lo, hi, cells },
            ridge: DEFAULT_RIDGE,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(invalid("ridge must be finite and nonnegative"));
        }
        match self.family {
            BasisFamily::Polynomial { degree } if degree > 12 => {
                Err(invalid(format!("polynomial degree {degree} is too large (max 12)")))
            }
            BasisFamily::Hat { lo, hi, cells } if !(hi > lo) || cells == 0 => {
                Err(invalid("hat basis needs hi > lo and at least one cell"))
            }
            _ if !(1..=2).contains(&dim) && matches!(self.family, BasisFamily::Hat { .. }) => {
                Err(invalid("hat basis supports d = 1 or 2"))
            }
            _ => Ok(()),
        }
    }

    /// Number of basis functions in dimension `d`.
    pub fn size(&self, dim: usize) -> usize {
        match self.family {
            BasisFamily::Polynomial { degree } => exponents(dim, degree).len(),
            BasisFamily::Hat { cells, .. } => (cells + 1).pow(dim as u32),
        }
    }
}

fn exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; dim]];
    for total in 1..=degree {
        let mut acc = Vec::new();
        gen_exponents(dim, total, &mut vec![0; dim], 0, &mut acc);
        out.extend(acc);
    }
    out
}

fn gen_exponents(dim: usize, left: u32, cur: &mut Vec<u32>, axis: usize, out: &mut Vec<Vec<u32>>) {
    if axis + 1 == dim {
        cur[axis] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[axis] = e;
        gen_exponents(dim, left - e, cur, axis + 1, out);
    }
}

/// Basis functions with any data-dependent normalization frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    Polynomial {
        exponents: Vec<Vec<u32>>,
        mean: Vec<f64>,
        scale: Vec<f64>,
    },
    Hat {
        lo: f64,
        hi: f64,
        cells: usize,
        dim: usize,
    },
}

impl Features {
    fn build(basis: &RegressionBasis, xs: &[f64], dim: usize, valid: &[bool]) -> Self {
        match basis.family {
            BasisFamily::Polynomial { degree } => {
                let n = valid.iter().filter(|v| **v).count().max(1) as f64;
                let mut mean = vec![0.0; dim];
                let mut sq = vec![0.0; dim];
                for (i, ok) in valid.iter().enumerate() {
                    if *ok {
                        for l in 0..dim {
                            mean[l] += xs[i * dim + l];
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for (i, ok) in valid.iter().enumerate() {
                    if *ok {
                        for l in 0..dim {
                            let c = xs[i * dim + l] - mean[l];
                            sq[l] += c * c;
                        }
                    }
                }
                let scale = sq
                    .iter()
                    .map(|s| {
                        let sd = (s / n).sqrt();
                        if sd > 1e-12 {
                            sd
                        } else {
                            1.0
                        }
                    })
                    .collect();
                Features::Polynomial {
                    exponents: exponents(dim, degree),
                    mean,
                    scale,
                }
            }
            BasisFamily::Hat { lo, hi, cells } => Features::Hat { lo, hi, cells, dim },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Polynomial { exponents, .. } => exponents.len(),
            Features::Hat { cells, dim, .. } => (cells + 1).pow(*dim as u32),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Call `f(index, value)` for every basis function that may be nonzero at `x`.
    pub fn for_each(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        match self {
            Features::Polynomial {
                exponents,
                mean,
                scale,
            } => {
                let mut z = [0.0f64; 2];
                for l in 0..x.len() {
                    z[l] = (x[l] - mean[l]) / scale[l];
                }
                for (j, e) in exponents.iter().enumerate() {
                    let mut v = 1.0;
                    for (l, p) in e.iter().enumerate() {
                        v *= z[l].powi(*p as i32);
                    }
                    f(j, v);
                }
            }
            Features::Hat { lo, hi, cells, dim } => {
                let h = (hi - lo) / *cells as f64;
                let locate = |v: f64| {
                    let s = ((v.clamp(*lo, *hi) - lo) / h).min(*cells as f64);
                    let i = (s.floor() as usize).min(cells - 1);
                    (i, s - i as f64)
                };
                if *dim == 1 {
                    let (i, t) = locate(x[0]);
                    f(i, 1.0 - t);
                    f(i + 1, t);
                } else {
                    let n = cells + 1;
                    let (i, s) = locate(x[0]);
                    let (j, t) = locate(x[1]);
                    f(i * n + j, (1.0 - s) * (1.0 - t));
                    f((i + 1) * n + j, s * (1.0 - t));
                    f(i * n + j + 1, (1.0 - s) * t);
                    f((i + 1) * n + j + 1, s * t);
                }
            }
        }
    }
}

/// A fitted regression: coefficients for `nrhs` right-hand sides plus the factorized Gram
/// matrix, so further right-hand sides on the same design can be solved cheaply.
#[derive(Clone)]
pub struct Fit {
    features: Features,
    coef: Vec<f64>,
    nrhs: usize,
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl std::fmt::Debug for Fit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fit")
            .field("features", &self.features)
            .field("nrhs", &self.nrhs)
            .field("condition", &self.condition)
            .finish()
    }
}

/// Design statistics accumulated over fixed-size chunks, reduced in chunk order so the
/// result does not depend on the thread count.
const CHUNK: usize = 4096;

fn accumulate(
    features: &Features,
    xs: &[f64],
    dim: usize,
    valid: &[bool],
    targets: &[f64],
    nrhs: usize,
    with_gram: bool,
) -> (Vec<f64>, Vec<f64>) {
    let m = features.len();
    let paths = valid.len();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = if with_gram { vec![0.0; m * m] } else { Vec::new() };
            let mut r = vec![0.0; m * nrhs];
            let mut idx = Vec::with_capacity(m);
            let mut val = Vec::with_capacity(m);
            for i in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                if !valid[i] {
                    continue;
                }
                idx.clear();
                val.clear();
                features.for_each(&xs[i * dim..(i + 1) * dim], |j, v| {
                    idx.push(j);
                    val.push(v);
                });
                let t = &targets[i * nrhs..(i + 1) * nrhs];
                for (a, &ja) in idx.iter().enumerate() {
                    let va = val[a];
                    if with_gram {
                        for (b, &jb) in idx.iter().enumerate() {
                            g[ja * m + jb] += va * val[b];
                        }
                    }
                    for (c2, tv) in t.iter().enumerate() {
                        r[ja * nrhs + c2] += va * tv;
                    }
                }
            }
            (g, r)
        })
        .collect();
    let mut g = if with_gram { vec![0.0; m * m] } else { Vec::new() };
    let mut r = vec![0.0; m * nrhs];
    for (pg, pr) in parts {
        for (a, b) in g.iter_mut().zip(pg) {
            *a += b;
        }
        for (a, b) in r.iter_mut().zip(pr) {
            *a += b;
        }
    }
    (g, r)
}

impl Fit {
    /// Regress `targets` (row-major `paths × nrhs`) on the basis evaluated at `xs`
    /// (row-major `paths × d`), skipping invalid paths. `step` labels diagnostics.
    pub fn new(
        basis: &RegressionBasis,
        xs: &[f64],
        dim: usize,
        valid: &[bool],
        targets: &[f64],
        nrhs: usize,
        step: usize,
    ) -> Result<Fit> {
        let features = Features::build(basis, xs, dim, valid);
        let m = features.len();
        let n = valid.iter().filter(|v| **v).count();
        if n < m {
            return Err(Error::TooFewPaths { paths: n, basis: m });
        }
        let (g, r) = accumulate(&features, xs, dim, valid, targets, nrhs, true);
        let scale = 1.0 / n as f64;
        let mut gram = DMatrix::from_row_slice(m, m, &g) * scale;
        for j in 0..m {
            gram[(j, j)] += basis.ridge;
        }
        let chol = Cholesky::new(gram).ok_or(Error::RankDeficient { step, pivot: 0.0 })?;
        let diag: Vec<f64> = (0..m).map(|j| chol.l_dirty()[(j, j)]).collect();
        let dmin = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let dmax = diag.iter().copied().fold(0.0, f64::max);
        if !(dmin > 0.0) || !dmin.is_finite() {
            return Err(Error::RankDeficient { step, pivot: dmin });
        }
        let rhs = DMatrix::from_row_slice(m, nrhs, &r) * scale;
        let sol = chol.solve(&rhs);
        let coef = (0..m)
            .flat_map(|j| (0..nrhs).map(move |c| (j, c)))
            .map(|(j, c)| sol[(j, c)])
            .collect();
        Ok(Fit {
            features,
            coef,
            nrhs,
            chol,
            condition: (dmax / dmin).powi(2),
        })
    }

    /// Solve new right-hand sides on the same design.
    pub fn refit(&self, xs: &[f64], dim: usize, valid: &[bool], targets: &[f64], nrhs: usize) -> Fit {
        let m = self.features.len();
        let n = valid.iter().filter(|v| **v).count().max(1);
        let (_, r) = accumulate(&self.features, xs, dim, valid, targets, nrhs, false);
        let rhs = DMatrix::from_row_slice(m, nrhs, &r) * (1.0 / n as f64);
        let sol = self.chol.solve(&rhs);
        Fit {
            features: self.features.clone(),
            coef: (0..m)
                .flat_map(|j| (0..nrhs).map(move |c| (j, c)))
                .map(|(j, c)| sol[(j, c)])
                .collect(),
            nrhs,
            chol: self.chol.clone(),
            condition: self.condition,
        }
    }

    pub fn nrhs(&self) -> usize {
        self.nrhs
    }

    /// Estimated condition number of the regularized Gram matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    /// Fitted value of right-hand side `c` at `x`.
    pub fn eval(&self, x: &[f64], c: usize) -> f64 {
        let mut acc = 0.0;
        self.features
            .for_each(x, |j, v| acc += v * self.coef[j * self.nrhs + c]);
        acc
    }

    /// All right-hand sides at `x`.
    pub fn eval_all(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.features.for_each(x, |j, v| {
            for (c, o) in out.iter_mut().enumerate() {
                *o += v * self.coef[j * self.nrhs + c];
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_counts() {
        assert_eq!(exponents(1, 3).len(), 4);
        assert_eq!(exponents(2, 2).len(), 6);
        assert_eq!(RegressionBasis::hat(-1.0, 1.0, 4).size(2), 25);
    }

    #[test]
    fn polynomial_fit_recovers_cubic() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + i as f64 * 0.02).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x * x).collect();
        let valid = vec![true; xs.len()];
        let fit = Fit::new(&RegressionBasis::polynomial(3), &xs, 1, &valid, &ys, 1, 0).unwrap();
        for &x in &[-1.5, 0.0, 0.7] {
            assert!((fit.eval(&[x], 0) - (1.0 - 2.0 * x + 0.5 * x * x * x)).abs() < 1e-6);
        }
        assert!(fit.condition() >= 1.0);
    }

    #[test]
    fn hat_fit_reproduces_linear_functions() {
        let xs: Vec<f64> = (0..500).map(|i| -3.0 + i as f64 * 0.012).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let valid = vec![true; xs.len()];
        let fit = Fit::new(&RegressionBasis::hat(-3.0, 3.0, 12), &xs, 1, &valid, &ys, 1, 0).unwrap();
        assert!((fit.eval(&[0.33], 0) - 1.66).abs() < 1e-6);
    }

    #[test]
    fn two_dimensional_hat_partition_of_unity() {
        let f = Features::Hat { lo: -1.0, hi: 1.0, cells: 3, dim: 2 };
        let mut s = 0.0;
        f.for_each(&[0.2, -0.7], |_, v| s += v);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn too_few_paths() {
        let xs = vec![0.0, 1.0];
        let r = Fit::new(&RegressionBasis::polynomial(3), &xs, 1, &[true, true], &[1.0, 2.0], 1, 5);
        assert!(matches!(r, Err(Error::TooFewPaths { paths: 2, basis: 4 })));
    }

    #[test]
    fn zero_ridge_degenerate_design_is_rank_deficient() {
        let xs = vec![0.5; 20];
        let basis = RegressionBasis { family: BasisFamily::Hat { lo: -1.0, hi: 1.0, cells: 4 }, ridge: 0.0 };
        let r = Fit::new(&basis, &xs, 1, &[true; 20], &[1.0; 20], 1, 3);
        assert!(matches!(r, Err(Error::RankDeficient { step: 3, .. })));
    }

    #[test]
    fn refit_matches_fresh_fit() {
        let xs: Vec<f64> = (0..300).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let y1: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let y2: Vec<f64> = xs.iter().map(|x| x.cos()).collect();
        let valid = vec![true; 300];
        let b = RegressionBasis::polynomial(4);
        let f1 = Fit::new(&b, &xs, 1, &valid, &y1, 1, 0).unwrap();
        let f2 = f1.refit(&xs, 1, &valid, &y2, 1);
        let fresh = Fit::new(&b, &xs, 1, &valid, &y2, 1, 0).unwrap();
        assert!((f2.eval(&[0.4], 0) - fresh.eval(&[0.4], 0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_paths_are_ignored() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| 3.0 * x).collect();
        let mut valid = vec![true; 100];
        ys[10] = 1e9;
        valid[10] = false;
        let fit = Fit::new(&RegressionBasis::polynomial(1), &xs, 1, &valid, &ys, 1, 0).unwrap();
        assert!((fit.eval(&[0.5], 0) - 1.5).abs() < 1e-6);
    }
}
