//! Seeded Brownian paths: KL-truncated Q-Wiener noise, time reversal, backward Itô sums
//! and the metric-dynamical-system shifts.
//!
//! Paths are stored by their increments on the finest grid; values are cumulative sums
//! from zero. Shifts and reversals act on the increment arrays, so shift composition,
//! zero shifts and double reversal are exact on stored values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

const GRID_TOL: f64 = 1e-9;

/// Mix a master seed with a stream index (splitmix64 finalizer on both).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// Uniform time grid `t_start = t_0 < ... < t_n = t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    /// Kept from the parent grid by `sub` so windows step exactly like the full grid.
    dt: f64,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite() && t_end > t_start) {
            return Err(invalid(format!("time grid needs t_end > t_start, got [{t_start}, {t_end}]")));
        }
        if n_steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self {
            t_start,
            t_end,
            n_steps,
            dt: (t_end - t_start) / n_steps as f64,
        })
    }

    /// Grid on `[t_start, t_end]` with step as close as possible to `dt` (rounded count).
    pub fn with_step(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        let n = ((t_end - t_start) / dt).round().max(1.0) as usize;
        Self::new(t_start, t_end, n)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            self.t_start + k as f64 * self.dt
        }
    }
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    /// Index of a time that must lie on the grid.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let s = (t - self.t_start) / self.dt();
        let k = s.round();
        if (s - k).abs() > GRID_TOL * s.abs().max(1.0) || k < 0.0 || k > self.n_steps as f64 {
            return Err(invalid(format!(
                "time {t} is not a point of the grid [{}, {}] with dt={}",
                self.t_start,
                self.t_end,
                self.dt()
            )));
        }
        Ok(k as usize)
    }

    pub fn steps_for(&self, duration: f64) -> Result<usize> {
        let s = duration / self.dt();
        let k = s.round();
        if (s - k).abs() > GRID_TOL * s.abs().max(1.0) || k < 0.0 {
            return Err(invalid(format!(
                "duration {duration} is not a multiple of dt={}",
                self.dt()
            )));
        }
        Ok(k as usize)
    }

    pub fn sub(&self, k0: usize, k1: usize) -> Result<TimeGrid> {
        if k0 >= k1 || k1 > self.n_steps {
            return Err(invalid(format!("bad sub-window [{k0}, {k1}] of {} steps", self.n_steps)));
        }
        Ok(TimeGrid {
            t_start: self.time(k0),
            t_end: self.time(k1),
            n_steps: k1 - k0,
            dt: self.dt,
        })
    }

    pub fn coarsen(&self, factor: usize) -> Result<TimeGrid> {
        if factor == 0 || !self.n_steps.is_multiple_of(factor) {
            return Err(invalid(format!(
                "cannot coarsen {} steps by a factor {factor}",
                self.n_steps
            )));
        }
        Ok(TimeGrid {
            n_steps: self.n_steps / factor,
            dt: self.dt * factor as f64,
            ..*self
        })
    }
}

/// One realization of the backward noise (columns `sqrt(λ_j) β_j`) together with a
/// `d`-dimensional Brownian path `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    grid: TimeGrid,
    lambdas: Vec<f64>,
    b_inc: Vec<f64>,
    w_dim: usize,
    w_inc: Vec<f64>,
    seed: u64,
    reversal_anchor: Option<f64>,
    b_vals: Vec<f64>,
    w_vals: Vec<f64>,
}

fn cumulate(inc: &[f64], cols: usize, n_steps: usize) -> Vec<f64> {
    let mut vals = vec![0.0; (n_steps + 1) * cols];
    for k in 0..n_steps {
        for j in 0..cols {
            vals[(k + 1) * cols + j] = vals[k * cols + j] + inc[k * cols + j];
        }
    }
    vals
}

impl NoisePath {
    pub fn from_increments(
        grid: TimeGrid,
        lambdas: Vec<f64>,
        b_inc: Vec<f64>,
        w_dim: usize,
        w_inc: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let n = grid.n_steps();
        if b_inc.len() != n * lambdas.len() || w_inc.len() != n * w_dim {
            return Err(Error::Shape(format!(
                "increment arrays ({} and {}) do not match {n} steps x ({} + {w_dim}) columns",
                b_inc.len(),
                w_inc.len(),
                lambdas.len()
            )));
        }
        let b_vals = cumulate(&b_inc, lambdas.len(), n);
        let w_vals = cumulate(&w_inc, w_dim, n);
        Ok(Self {
            grid,
            lambdas,
            b_inc,
            w_dim,
            w_inc,
            seed,
            reversal_anchor: None,
            b_vals,
            w_vals,
        })
    }

    /// Build a path from prescribed `B̂` values (row-major, `n_steps + 1` rows, first row
    /// must be zero). `W` is identically zero.
    pub fn from_b_values(grid: TimeGrid, lambdas: Vec<f64>, values: &[f64]) -> Result<Self> {
        let cols = lambdas.len();
        let n = grid.n_steps();
        if values.len() != (n + 1) * cols {
            return Err(Error::Shape("value array does not match the grid".into()));
        }
        if values[..cols].iter().any(|v| *v != 0.0) {
            return Err(invalid("injected paths must start at zero"));
        }
        let inc = (0..n * cols)
            .map(|i| values[i + cols] - values[i])
            .collect();
        Self::from_increments(grid, lambdas, inc, 0, Vec::new(), 0)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }
    pub fn components(&self) -> usize {
        self.lambdas.len()
    }
    pub fn w_dim(&self) -> usize {
        self.w_dim
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn reversal_anchor(&self) -> Option<f64> {
        self.reversal_anchor
    }

    /// `B̂_j` at grid index `k`.
    pub fn b(&self, k: usize, j: usize) -> f64 {
        self.b_vals[k * self.components() + j]
    }
    /// `B̂_j(t_{k+1}) - B̂_j(t_k)`.
    pub fn db(&self, k: usize, j: usize) -> f64 {
        self.b_inc[k * self.components() + j]
    }
    pub fn db_row(&self, k: usize) -> &[f64] {
        let n = self.components();
        &self.b_inc[k * n..(k + 1) * n]
    }
    pub fn w(&self, k: usize, l: usize) -> f64 {
        self.w_vals[k * self.w_dim + l]
    }
    pub fn dw(&self, k: usize, l: usize) -> f64 {
        self.w_inc[k * self.w_dim + l]
    }
    pub fn b_increments(&self) -> &[f64] {
        &self.b_inc
    }
    pub fn w_increments(&self) -> &[f64] {
        &self.w_inc
    }
    pub fn b_values(&self) -> &[f64] {
        &self.b_vals
    }

    /// The first `n` noise components (nested: component `j` is sampled from its own stream).
    pub fn truncated(&self, n: usize) -> Result<NoisePath> {
        if n > self.components() {
            return Err(invalid(format!(
                "truncation N={n} exceeds the {} stored components",
                self.components()
            )));
        }
        let cols = self.components();
        let inc = (0..self.grid.n_steps())
            .flat_map(|k| self.b_inc[k * cols..k * cols + n].iter().copied())
            .collect();
        let mut p = NoisePath::from_increments(
            self.grid,
            self.lambdas[..n].to_vec(),
            inc,
            self.w_dim,
            self.w_inc.clone(),
            self.seed,
        )?;
        p.reversal_anchor = self.reversal_anchor;
        Ok(p)
    }

    /// Sum consecutive increments (the noise seen by a coarser grid).
    pub fn coarsened(&self, factor: usize) -> Result<NoisePath> {
        let grid = self.grid.coarsen(factor)?;
        let agg = |inc: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; grid.n_steps() * cols];
            for k in 0..grid.n_steps() {
                for m in 0..factor {
                    for j in 0..cols {
                        out[k * cols + j] += inc[(k * factor + m) * cols + j];
                    }
                }
            }
            out
        };
        let mut p = NoisePath::from_increments(
            grid,
            self.lambdas.clone(),
            agg(&self.b_inc, self.components()),
            self.w_dim,
            agg(&self.w_inc, self.w_dim),
            self.seed,
        )?;
        p.reversal_anchor = self.reversal_anchor;
        Ok(p)
    }

    /// Same path with the increment of component `j` over step `k` changed by `delta`.
    pub fn with_bumped_increment(&self, k: usize, j: usize, delta: f64) -> Result<NoisePath> {
        if k >= self.grid.n_steps() || j >= self.components() {
            return Err(invalid("bump location outside the path"));
        }
        let mut inc = self.b_inc.clone();
        inc[k * self.components() + j] += delta;
        let mut p = NoisePath::from_increments(
            self.grid,
            self.lambdas.clone(),
            inc,
            self.w_dim,
            self.w_inc.clone(),
            self.seed,
        )?;
        p.reversal_anchor = self.reversal_anchor;
        Ok(p)
    }
}

/// Validate an eigenvalue list: positive, finite and nonincreasing.
pub fn validate_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(invalid("eigenvalues must be positive"));
    }
    if lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(invalid("eigenvalues must be nonincreasing"));
    }
    Ok(())
}

/// Sample the first `n` KL components of a Q-Wiener process (column `j` is `sqrt(λ_j)` times
/// a standard Brownian motion) plus an independent `w_dim`-dimensional `W`.
pub fn sample_qwiener(
    lambdas: &[f64],
    n: usize,
    grid: TimeGrid,
    w_dim: usize,
    seed: u64,
) -> Result<NoisePath> {
    if n > lambdas.len() {
        return Err(invalid(format!(
            "truncation N={n} exceeds the eigenvalue list of length {}",
            lambdas.len()
        )));
    }
    validate_lambdas(&lambdas[..n])?;
    let steps = grid.n_steps();
    let sdt = grid.dt().sqrt();
    let mut b_inc = vec![0.0; steps * n];
    for (j, lambda) in lambdas[..n].iter().enumerate() {
        let mut rng = rng_for(seed, j as u64);
        let scale = lambda.sqrt() * sdt;
        for k in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            b_inc[k * n + j] = scale * z;
        }
    }
    let mut w_inc = vec![0.0; steps * w_dim];
    for l in 0..w_dim {
        let mut rng = rng_for(seed, (1u64 << 32) + l as u64);
        for k in 0..steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            w_inc[k * w_dim + l] = sdt * z;
        }
    }
    NoisePath::from_increments(grid, lambdas[..n].to_vec(), b_inc, w_dim, w_inc, seed)
}

/// `B̂_s = B_{T'-s} - B_{T'}` on `[0, T']`. Requires the path to start at time zero.
/// `W` is restricted to `[0, T']` unchanged.
pub fn reverse_time(path: &NoisePath, t_prime: f64) -> Result<NoisePath> {
    if path.grid.t_start() != 0.0 {
        return Err(invalid("time reversal requires a path starting at t = 0"));
    }
    let kp = path.grid.index_of(t_prime)?;
    if kp == 0 {
        return Err(invalid("reversal anchor must be after the path origin"));
    }
    let cols = path.components();
    let mut b_inc = vec![0.0; kp * cols];
    for k in 0..kp {
        for j in 0..cols {
            b_inc[k * cols + j] = -path.b_inc[(kp - 1 - k) * cols + j];
        }
    }
    let w_inc = path.w_inc[..kp * path.w_dim].to_vec();
    let grid = TimeGrid::new(0.0, path.grid.time(kp), kp)?;
    let mut out = NoisePath::from_increments(
        grid,
        path.lambdas.clone(),
        b_inc,
        path.w_dim,
        w_inc,
        path.seed,
    )?;
    out.reversal_anchor = match path.reversal_anchor {
        Some(a) if a == t_prime => None,
        _ => Some(t_prime),
    };
    Ok(out)
}

/// Backward Itô sum `Σ_k Σ_j g_j(t_{k+1}) (B̂_j(t_{k+1}) - B̂_j(t_k))` over the steps
/// `[k0, k1)`. `integrand` holds one row per grid point, one column per component.
pub fn backward_ito_integral(
    integrand: &[f64],
    path: &NoisePath,
    k0: usize,
    k1: usize,
) -> Result<f64> {
    check_integrand(integrand, path, k0, k1)?;
    let cols = path.components();
    let mut s = 0.0;
    for k in k0..k1 {
        for j in 0..cols {
            s += integrand[(k + 1) * cols + j] * path.db(k, j);
        }
    }
    Ok(s)
}

/// Forward Itô sum with left-endpoint evaluation.
pub fn forward_ito_integral(
    integrand: &[f64],
    path: &NoisePath,
    k0: usize,
    k1: usize,
) -> Result<f64> {
    check_integrand(integrand, path, k0, k1)?;
    let cols = path.components();
    let mut s = 0.0;
    for k in k0..k1 {
        for j in 0..cols {
            s += integrand[k * cols + j] * path.db(k, j);
        }
    }
    Ok(s)
}

fn check_integrand(integrand: &[f64], path: &NoisePath, k0: usize, k1: usize) -> Result<()> {
    let n = path.grid.n_steps();
    if integrand.len() != (n + 1) * path.components() {
        return Err(Error::Shape(format!(
            "integrand has {} entries, expected {} grid points x {} components",
            integrand.len(),
            n + 1,
            path.components()
        )));
    }
    if k0 > k1 || k1 > n {
        return Err(invalid(format!("window [{k0}, {k1}] outside the {n}-step grid")));
    }
    Ok(())
}

/// `-∫_{T'-T}^{T'-t} g(T'-s) dB_s` where `B` is the reversal of `path` at `T'`: the
/// forward-integral route to the backward integral of `integrand` over `[t, T]`.
pub fn reflected_forward_integral(
    integrand: &[f64],
    path: &NoisePath,
    k0: usize,
    k1: usize,
    t_prime: f64,
) -> Result<f64> {
    check_integrand(integrand, path, k0, k1)?;
    let kp = path.grid.index_of(t_prime)?;
    if k1 > kp {
        return Err(invalid("integration window extends past the reversal anchor"));
    }
    let forward = reverse_time(path, t_prime)?;
    let cols = path.components();
    // reflected integrand: row m of the forward grid is time T' - s_m = row kp - m
    let mut reflected = vec![0.0; (kp + 1) * cols];
    for m in 0..=kp {
        reflected[m * cols..(m + 1) * cols]
            .copy_from_slice(&integrand[(kp - m) * cols..(kp - m + 1) * cols]);
    }
    Ok(-forward_ito_integral(&reflected, &forward, kp - k1, kp - k0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Shift `B̂` only.
    ThetaPrime,
    /// Shift `W` only.
    ThetaDoublePrime,
    /// Shift both.
    ThetaHat,
}

/// A shifted view of a [`NoisePath`]; shifts are whole grid steps.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedPath<'a> {
    base: &'a NoisePath,
    shift_steps: usize,
    mode: ShiftMode,
}

impl<'a> ShiftedPath<'a> {
    pub fn shift_steps(&self) -> usize {
        self.shift_steps
    }
    pub fn mode(&self) -> ShiftMode {
        self.mode
    }
    pub fn base(&self) -> &'a NoisePath {
        self.base
    }
    fn b_offset(&self) -> usize {
        match self.mode {
            ShiftMode::ThetaDoublePrime => 0,
            _ => self.shift_steps,
        }
    }
    fn w_offset(&self) -> usize {
        match self.mode {
            ShiftMode::ThetaPrime => 0,
            _ => self.shift_steps,
        }
    }
    pub fn n_steps(&self) -> usize {
        self.base.grid.n_steps() - self.shift_steps
    }

    /// Materialize on `[t_start, t_end - r]`; values restart from zero at the origin.
    pub fn materialize(&self) -> Result<NoisePath> {
        let base = self.base;
        let n = self.n_steps();
        let cols = base.components();
        let bo = self.b_offset();
        let wo = self.w_offset();
        let b_inc = base.b_inc[bo * cols..(bo + n) * cols].to_vec();
        let w_inc = base.w_inc[wo * base.w_dim..(wo + n) * base.w_dim].to_vec();
        let grid = TimeGrid::new(base.grid.t_start(), base.grid.time(n), n)?;
        let mut p = NoisePath::from_increments(
            grid,
            base.lambdas.clone(),
            b_inc,
            base.w_dim,
            w_inc,
            base.seed,
        )?;
        p.reversal_anchor = base.reversal_anchor;
        Ok(p)
    }
}

/// Shift by `r >= 0`, which must be a whole number of grid steps.
pub fn apply_shift(path: &NoisePath, r: f64, mode: ShiftMode) -> Result<ShiftedPath<'_>> {
    if r < 0.0 {
        return Err(invalid("one-sided shifts need r >= 0"));
    }
    let steps = path.grid.steps_for(r)?;
    if steps >= path.grid.n_steps() {
        return Err(invalid(format!(
            "shift r={r} leaves no room in the stored horizon [{}, {}]",
            path.grid.t_start(),
            path.grid.t_end()
        )));
    }
    Ok(ShiftedPath {
        base: path,
        shift_steps: steps,
        mode,
    })
}

/// Two-sided Brownian motion `B` on `[-A, A']`: two independent one-sided paths glued at 0.
#[derive(Debug, Clone)]
pub struct TwoSidedPath {
    /// `B_s`, `s >= 0`.
    positive: NoisePath,
    /// `B_{-s}`, `s >= 0`.
    negative: NoisePath,
}

impl TwoSidedPath {
    pub fn sample(
        lambdas: &[f64],
        n: usize,
        dt: f64,
        negative_horizon: f64,
        positive_horizon: f64,
        seed: u64,
    ) -> Result<Self> {
        let neg = TimeGrid::with_step(0.0, negative_horizon, dt)?;
        let pos = TimeGrid::with_step(0.0, positive_horizon, dt)?;
        if (neg.dt() - pos.dt()).abs() > 1e-12 * dt {
            return Err(invalid("both horizons must be multiples of dt"));
        }
        Ok(Self {
            positive: sample_qwiener(lambdas, n, pos, 0, derive_seed(seed, 0))?,
            negative: sample_qwiener(lambdas, n, neg, 0, derive_seed(seed, 1))?,
        })
    }

    pub fn dt(&self) -> f64 {
        self.positive.grid.dt()
    }
    pub fn negative_horizon(&self) -> f64 {
        self.negative.grid.t_end()
    }
    pub fn positive_horizon(&self) -> f64 {
        self.positive.grid.t_end()
    }
    pub fn components(&self) -> usize {
        self.positive.components()
    }

    /// `B` at the signed time `t` (must be on the grid).
    pub fn value(&self, t: f64, j: usize) -> Result<f64> {
        if t >= 0.0 {
            Ok(self.positive.b(self.positive.grid.index_of(t)?, j))
        } else {
            Ok(self.negative.b(self.negative.grid.index_of(-t)?, j))
        }
    }

    /// `(θ_a B)_τ = B_{a+τ} - B_a` for `τ ∈ [0, b - a]`, as a one-sided path.
    pub fn window(&self, a: f64, b: f64) -> Result<NoisePath> {
        if a < -self.negative_horizon() - GRID_TOL || b > self.positive_horizon() + GRID_TOL {
            return Err(invalid(format!(
                "window [{a}, {b}] exits the stored two-sided path [-{}, {}]",
                self.negative_horizon(),
                self.positive_horizon()
            )));
        }
        let dt = self.dt();
        let grid = TimeGrid::with_step(0.0, b - a, dt)?;
        let steps = grid.n_steps();
        let start = (a / dt).round() as i64;
        let cols = self.components();
        let mut inc = vec![0.0; steps * cols];
        for k in 0..steps {
            let m = start + k as i64;
            for j in 0..cols {
                inc[k * cols + j] = if m >= 0 {
                    self.positive.db(m as usize, j)
                } else {
                    // increment over [m, m+1] of B seen from the negative side
                    -self.negative.db((-m - 1) as usize, j)
                };
            }
        }
        NoisePath::from_increments(
            grid,
            self.positive.lambdas.clone(),
            inc,
            0,
            Vec::new(),
            self.positive.seed,
        )
    }

    pub fn negative_side(&self) -> &NoisePath {
        &self.negative
    }
    pub fn positive_side(&self) -> &NoisePath {
        &self.positive
    }
}

/// A bundle of independent `W` paths (or one path broadcast to every member).
#[derive(Debug, Clone)]
pub struct WienerEnsemble {
    grid: TimeGrid,
    dim: usize,
    members: usize,
    broadcast: bool,
    inc: Vec<f64>,
}

impl WienerEnsemble {
    /// Member `i` is drawn from stream `derive_seed(seed, i)`, so per-member values do
    /// not depend on the ensemble size.
    pub fn sample(grid: TimeGrid, dim: usize, members: usize, seed: u64) -> Self {
        let steps = grid.n_steps();
        let sdt = grid.dt().sqrt();
        let mut inc = vec![0.0; members * steps * dim];
        for (i, chunk) in inc.chunks_mut(steps * dim.max(1)).enumerate().take(members) {
            let mut rng = rng_for(seed, i as u64);
            for v in chunk.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sdt * z;
            }
        }
        Self {
            grid,
            dim,
            members,
            broadcast: false,
            inc,
        }
    }

    /// Every member shares the `W` of a single noise path.
    pub fn broadcast(path: &NoisePath, members: usize) -> Self {
        Self {
            grid: *path.grid(),
            dim: path.w_dim(),
            members,
            broadcast: true,
            inc: path.w_increments().to_vec(),
        }
    }

    pub fn from_increments(grid: TimeGrid, dim: usize, members: usize, inc: Vec<f64>) -> Result<Self> {
        if inc.len() != members * grid.n_steps() * dim {
            return Err(Error::Shape("ensemble increments have the wrong length".into()));
        }
        Ok(Self {
            grid,
            dim,
            members,
            broadcast: false,
            inc,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn members(&self) -> usize {
        self.members
    }

    /// Increment vector of member `i` over step `k`.
    pub fn dw(&self, i: usize, k: usize) -> &[f64] {
        let steps = self.grid.n_steps();
        let m = if self.broadcast { 0 } else { i };
        let off = (m * steps + k) * self.dim;
        &self.inc[off..off + self.dim]
    }

    /// Sum groups of `factor` increments.
    pub fn coarsened(&self, factor: usize) -> Result<WienerEnsemble> {
        let grid = self.grid.coarsen(factor)?;
        let steps = self.grid.n_steps();
        let stored = if self.broadcast { 1 } else { self.members };
        let mut inc = vec![0.0; stored * grid.n_steps() * self.dim];
        for m in 0..stored {
            for k in 0..grid.n_steps() {
                for f in 0..factor {
                    for l in 0..self.dim {
                        inc[(m * grid.n_steps() + k) * self.dim + l] +=
                            self.inc[(m * steps + k * factor + f) * self.dim + l];
                    }
                }
            }
        }
        Ok(Self {
            grid,
            dim: self.dim,
            members: self.members,
            broadcast: self.broadcast,
            inc,
        })
    }

    /// Members restricted to steps `[k0, k1)`.
    pub fn window(&self, k0: usize, k1: usize) -> Result<WienerEnsemble> {
        let grid = self.grid.sub(k0, k1)?;
        let steps = self.grid.n_steps();
        let stored = if self.broadcast { 1 } else { self.members };
        let mut inc = Vec::with_capacity(stored * (k1 - k0) * self.dim);
        for m in 0..stored {
            inc.extend_from_slice(&self.inc[(m * steps + k0) * self.dim..(m * steps + k1) * self.dim]);
        }
        Ok(Self {
            grid,
            dim: self.dim,
            members: self.members,
            broadcast: self.broadcast,
            inc,
        })
    }
}

const NOISE_MAGIC: &[u8; 8] = b"BDSDNP\0\0";
pub const NOISE_FORMAT_VERSION: u32 = 1;

impl NoisePath {
    /// Versioned little-endian layout: magic, version, seed, grid, component count, `W`
    /// dimension, reversal anchor, `λ` list, then row-major `B̂` and `W` increments.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(NOISE_MAGIC)?;
        out.write_u32::<LittleEndian>(NOISE_FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(self.seed)?;
        out.write_f64::<LittleEndian>(self.grid.t_start())?;
        out.write_f64::<LittleEndian>(self.grid.t_end())?;
        out.write_u64::<LittleEndian>(self.grid.n_steps() as u64)?;
        out.write_u32::<LittleEndian>(self.components() as u32)?;
        out.write_u32::<LittleEndian>(self.w_dim as u32)?;
        out.write_u8(self.reversal_anchor.is_some() as u8)?;
        out.write_f64::<LittleEndian>(self.reversal_anchor.unwrap_or(0.0))?;
        for l in &self.lambdas {
            out.write_f64::<LittleEndian>(*l)?;
        }
        for v in self.b_inc.iter().chain(&self.w_inc) {
            out.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<NoisePath> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated noise file: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(fmt)?;
        if &magic != NOISE_MAGIC {
            return Err(Error::Format("not a noise path file".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(fmt)?;
        if version != NOISE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported noise format version {version}")));
        }
        let seed = input.read_u64::<LittleEndian>().map_err(fmt)?;
        let t0 = input.read_f64::<LittleEndian>().map_err(fmt)?;
        let t1 = input.read_f64::<LittleEndian>().map_err(fmt)?;
        let n = input.read_u64::<LittleEndian>().map_err(fmt)? as usize;
        let cols = input.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let w_dim = input.read_u32::<LittleEndian>().map_err(fmt)? as usize;
        let has_anchor = input.read_u8().map_err(fmt)? != 0;
        let anchor = input.read_f64::<LittleEndian>().map_err(fmt)?;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            (0..len)
                .map(|_| input.read_f64::<LittleEndian>().map_err(fmt))
                .collect()
        };
        let lambdas = read_vec(cols)?;
        let b_inc = read_vec(n * cols)?;
        let w_inc = read_vec(n * w_dim)?;
        let grid = TimeGrid::new(t0, t1, n)?;
        let mut p = NoisePath::from_increments(grid, lambdas, b_inc, w_dim, w_inc, seed)?;
        p.reversal_anchor = has_anchor.then_some(anchor);
        Ok(p)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: &Path) -> Result<NoisePath> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(std::io::BufReader::new(file))
    }

    /// CSV with columns `t,B1..BN,W1..Wd` (path values, not increments).
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.components()).map(|j| format!("B{j}")));
        header.extend((1..=self.w_dim).map(|l| format!("W{l}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.grid.n_steps() {
            let mut row = vec![self.grid.time(k).to_string()];
            row.extend((0..self.components()).map(|j| self.b(k, j).to_string()));
            row.extend((0..self.w_dim).map(|l| self.w(k, l).to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn paths_start_at_zero_and_are_seed_deterministic() {
        let a = sample_qwiener(&[1.0, 0.5], 2, grid(50), 1, 7).unwrap();
        let b = sample_qwiener(&[1.0, 0.5], 2, grid(50), 1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.b(0, 0), 0.0);
        assert_eq!(a.w(0, 0), 0.0);
        let c = sample_qwiener(&[1.0, 0.5], 2, grid(50), 1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_eigenvalues() {
        assert!(sample_qwiener(&[1.0], 2, grid(4), 1, 0).is_err());
        assert!(sample_qwiener(&[1.0, -0.1], 2, grid(4), 1, 0).is_err());
        assert!(sample_qwiener(&[0.5, 1.0], 2, grid(4), 1, 0).is_err());
    }

    #[test]
    fn truncation_is_nested() {
        let full = sample_qwiener(&[1.0, 0.5, 0.25], 3, grid(20), 0, 3).unwrap();
        let two = sample_qwiener(&[1.0, 0.5, 0.25], 2, grid(20), 0, 3).unwrap();
        assert_eq!(full.truncated(2).unwrap().b_increments(), two.b_increments());
    }

    #[test]
    fn reversal_of_linear_path() {
        let g = grid(10);
        let vals: Vec<f64> = g.times();
        let p = NoisePath::from_b_values(g, vec![1.0], &vals).unwrap();
        let r = reverse_time(&p, 1.0).unwrap();
        assert_eq!(r.b(0, 0), 0.0);
        for k in 0..=10 {
            assert!((r.b(k, 0) + g.time(k)).abs() < 1e-12);
        }
        assert_eq!(r.reversal_anchor(), Some(1.0));
    }

    #[test]
    fn double_reversal_is_identity() {
        let p = sample_qwiener(&[1.0, 0.3], 2, grid(64), 2, 11).unwrap();
        let back = reverse_time(&reverse_time(&p, 1.0).unwrap(), 1.0).unwrap();
        assert_eq!(back.b_values(), p.b_values());
        assert_eq!(back.reversal_anchor(), None);
        assert!(reverse_time(&p, 1.3).is_err());
    }

    #[test]
    fn backward_integral_of_constant_telescopes() {
        let p = sample_qwiener(&[1.0], 1, grid(40), 0, 5).unwrap();
        let g = vec![0.7; 41];
        let v = backward_ito_integral(&g, &p, 10, 40).unwrap();
        assert!((v - 0.7 * (p.b(40, 0) - p.b(10, 0))).abs() < 1e-14);
        let z = vec![0.0; 41];
        assert_eq!(backward_ito_integral(&z, &p, 0, 40).unwrap(), 0.0);
        assert!(backward_ito_integral(&z[..40], &p, 0, 40).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let p = sample_qwiener(&[1.0], 1, grid(16), 1, 2).unwrap();
        let s = apply_shift(&p, 0.0, ShiftMode::ThetaHat).unwrap().materialize().unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn shifts_compose() {
        let p = sample_qwiener(&[1.0, 0.5], 2, grid(64), 1, 9).unwrap();
        let dt = p.grid().dt();
        for mode in [ShiftMode::ThetaPrime, ShiftMode::ThetaDoublePrime, ShiftMode::ThetaHat] {
            let once = apply_shift(&p, 5.0 * dt, mode).unwrap().materialize().unwrap();
            let twice = apply_shift(&once, 7.0 * dt, mode).unwrap().materialize().unwrap();
            let direct = apply_shift(&p, 12.0 * dt, mode).unwrap().materialize().unwrap();
            assert_eq!(twice.b_values(), direct.b_values());
            assert_eq!(twice.w_increments(), direct.w_increments());
        }
        assert!(apply_shift(&p, 0.5 * dt, ShiftMode::ThetaHat).is_err());
        assert!(apply_shift(&p, 1.0, ShiftMode::ThetaHat).is_err());
    }

    #[test]
    fn theta_prime_leaves_w_alone() {
        let p = sample_qwiener(&[1.0], 1, grid(10), 1, 1).unwrap();
        let s = apply_shift(&p, 0.3, ShiftMode::ThetaPrime).unwrap().materialize().unwrap();
        assert_eq!(s.w_increments(), &p.w_increments()[..7]);
        assert_eq!(s.db(0, 0), p.db(3, 0));
    }

    #[test]
    fn two_sided_window_matches_values() {
        let tp = TwoSidedPath::sample(&[1.0], 1, 0.1, 2.0, 1.0, 4).unwrap();
        let w = tp.window(-1.5, 0.5).unwrap();
        for k in 0..=20 {
            let t = -1.5 + k as f64 * 0.1;
            let t = (t * 10.0).round() / 10.0;
            let expect = tp.value(t, 0).unwrap() - tp.value(-1.5, 0).unwrap();
            assert!((w.b(k, 0) - expect).abs() < 1e-12);
        }
        assert!(tp.window(-2.5, 0.0).is_err());
    }

    #[test]
    fn pullback_reversal_reads_the_negative_side() {
        let tp = TwoSidedPath::sample(&[1.0], 1, 0.25, 4.0, 1.0, 6).unwrap();
        let w = tp.window(-3.0, 0.0).unwrap();
        let hat = reverse_time(&w, 3.0).unwrap();
        assert_eq!(hat.b_increments(), &tp.negative_side().b_increments()[..12]);
    }

    #[test]
    fn binary_round_trip() {
        let p = reverse_time(&sample_qwiener(&[2.0, 1.0], 2, grid(12), 1, 3).unwrap(), 0.5).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        let q = NoisePath::read_binary(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert!(NoisePath::read_binary(&buf[..20]).is_err());
    }

    #[test]
    fn ensemble_members_do_not_depend_on_size() {
        let g = grid(8);
        let a = WienerEnsemble::sample(g, 2, 3, 17);
        let b = WienerEnsemble::sample(g, 2, 10, 17);
        for i in 0..3 {
            for k in 0..8 {
                assert_eq!(a.dw(i, k), b.dw(i, k));
            }
        }
    }

    #[test]
    fn coarsening_sums_increments() {
        let p = sample_qwiener(&[1.0], 1, grid(8), 1, 21).unwrap();
        let c = p.coarsened(2).unwrap();
        assert_eq!(c.grid().n_steps(), 4);
        assert!((c.b(4, 0) - p.b(8, 0)).abs() < 1e-15);
        assert_eq!(c.db(1, 0), p.db(2, 0) + p.db(3, 0));
    }
}
