//! Finite-difference solver for the backward SPDE driven by a fixed backward-noise path,
//! the forward field by time reversal, the weak-form residual and the comparison with
//! the BDSDE read-out.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsde::window_on;
use crate::error::{invalid, Error, Result};
use crate::grid::{FieldSnapshot, SpatialGrid};
use crate::model::coefficients::CoefficientSet;
use crate::model::norms::weighted_power_sum;
use crate::model::weights::RhoWeight;
use crate::noise::NoisePath;

/// Treatment of the outermost grid nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Boundary nodes follow the reaction and noise terms without diffusion.
    #[default]
    Reaction,
    /// Boundary nodes are held at `h`.
    FrozenDirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeConfig {
    #[serde(default)]
    pub boundary: BoundaryMode,
    /// Largest admissible `sup |∂_u f| Δt` for the explicit reaction step.
    #[serde(default = "default_stiffness")]
    pub max_stiffness: f64,
}

fn default_stiffness() -> f64 {
    1.0
}

impl Default for SpdeConfig {
    fn default() -> Self {
        Self {
            boundary: BoundaryMode::Reaction,
            max_stiffness: default_stiffness(),
        }
    }
}

/// Solve the tridiagonal system `l_i u_{i-1} + d_i u_i + r_i u_{i+1} = rhs_i` in place.
pub(crate) fn thomas(l: &[f64], d: &[f64], r: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = d.len();
    let mut beta = d[0];
    if beta.abs() < 1e-300 {
        return Err(Error::LinearSolve("zero pivot in tridiagonal solve".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = r[i - 1] / beta;
        beta = d[i] - l[i] * scratch[i];
        if beta.abs() < 1e-300 || !beta.is_finite() {
            return Err(Error::LinearSolve(format!("zero pivot at row {i}")));
        }
        rhs[i] = (rhs[i] - l[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// Nodal coefficients of `𝓛 = ½ a : ∇² + b·∇`.
struct Operator {
    /// `a` per node, `d×d` row-major.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Operator {
    fn new(coeffs: &CoefficientSet, grid: &SpatialGrid) -> Self {
        let d = grid.dim();
        let mut a = vec![0.0; grid.len() * d * d];
        let mut b = vec![0.0; grid.len() * d];
        let mut x = vec![0.0; d];
        for node in 0..grid.len() {
            grid.node_into(node, &mut x);
            coeffs.diffusion_matrix(&x, &mut a[node * d * d..(node + 1) * d * d]);
            (coeffs.b)(&x, &mut b[node * d..(node + 1) * d]);
        }
        Self { a, b }
    }

    /// Stencil `(lower, centre, upper)` of the axis-`l` part at `node`.
    fn axis_stencil(&self, grid: &SpatialGrid, node: usize, l: usize) -> (f64, f64, f64) {
        let d = grid.dim();
        let h = grid.step();
        let a = self.a[node * d * d + l * d + l];
        let b = self.b[node * d + l];
        let diff = 0.5 * a / (h * h);
        let adv = b / (2.0 * h);
        (diff - adv, -2.0 * diff, diff + adv)
    }

    /// Cross-derivative term `a_{01} ∂_0∂_1 u` at an interior 2D node.
    fn mixed(&self, grid: &SpatialGrid, u: &[f64], node: usize) -> f64 {
        let n = grid.per_dim();
        let a01 = self.a[node * 4 + 1];
        if a01 == 0.0 {
            return 0.0;
        }
        let h = grid.step();
        let (i, j) = (node / n, node % n);
        let v = |a: usize, b: usize| u[a * n + b];
        a01 * (v(i + 1, j + 1) - v(i + 1, j - 1) - v(i - 1, j + 1) + v(i - 1, j - 1)) / (4.0 * h * h)
    }

    /// `𝓛u` at interior nodes (zero on the boundary).
    fn apply(&self, grid: &SpatialGrid, u: &[f64], out: &mut [f64]) {
        let n = grid.per_dim();
        out.par_iter_mut().enumerate().for_each(|(node, o)| {
            if grid.is_boundary(node) {
                *o = 0.0;
                return;
            }
            let mut acc = 0.0;
            for l in 0..grid.dim() {
                let stride = if grid.dim() == 1 || l == 1 { 1 } else { n };
                let (lo, c, hi) = self.axis_stencil(grid, node, l);
                acc += lo * u[node - stride] + c * u[node] + hi * u[node + stride];
            }
            if grid.dim() == 2 {
                acc += self.mixed(grid, u, node);
            }
            *o = acc;
        });
    }

    fn axis_apply(&self, grid: &SpatialGrid, u: &[f64], l: usize, node: usize) -> f64 {
        let stride = if grid.dim() == 1 || l == 1 { 1 } else { grid.per_dim() };
        let (lo, c, hi) = self.axis_stencil(grid, node, l);
        lo * u[node - stride] + c * u[node] + hi * u[node + stride]
    }
}

/// Nodes of line `line` along axis `l` of a 2D grid.
fn line_nodes(n: usize, l: usize, line: usize) -> impl Iterator<Item = usize> {
    (0..n).map(move |m| if l == 0 { m * n + line } else { line * n + m })
}

/// Backward stepping from `u(T) = h`: the generator implicitly (a Douglas splitting in
/// 2D), the drift explicitly at the later value and `g ΔB̂` at the right endpoint.
/// Returns one snapshot per time step of the window, ordered by increasing time.
pub fn solve_backward_spde_fd(
    coeffs: &CoefficientSet,
    noise: &NoisePath,
    window: (f64, f64),
    grid: &SpatialGrid,
    config: &SpdeConfig,
) -> Result<Vec<FieldSnapshot>> {
    if grid.dim() != coeffs.dim {
        return Err(Error::Shape(format!(
            "grid dimension {} differs from the state dimension {}",
            grid.dim(),
            coeffs.dim
        )));
    }
    if noise.components() < coeffs.g.len() {
        return Err(invalid("noise path has fewer components than the coefficients"));
    }
    let (k0, k1) = window_on(noise, window)?;
    let times = noise.grid().times();
    let dt = noise.grid().dt();
    let op = Operator::new(coeffs, grid);
    let nodes: Vec<Vec<f64>> = grid.nodes();
    let n = grid.per_dim();
    let d = grid.dim();

    let mut u = FieldSnapshot::from_fn(times[k1], *grid, |x| (coeffs.h)(x)).values;
    let h_vals = u.clone();
    let mut out = vec![FieldSnapshot::new(times[k1], *grid, u.clone())?];
    let mut lu = vec![0.0; grid.len()];
    for k in (k0..k1).rev() {
        let (tk, tk1) = (times[k], times[k + 1]);
        let db: Vec<f64> = (0..coeffs.g.len()).map(|j| noise.db(k, j)).collect();
        // explicit part
        let source: Vec<f64> = nodes
            .par_iter()
            .zip(u.par_iter())
            .map(|(x, &v)| {
                let noise_term: f64 = coeffs.g.iter().zip(&db).map(|(g, b)| (g.g)(tk1, x, v) * b).sum();
                (coeffs.f)(tk, x, v) * dt - noise_term
            })
            .collect();
        let stiff = nodes
            .iter()
            .zip(&u)
            .map(|(x, &v)| (coeffs.df_dy)(tk, x, v).abs())
            .fold(0.0, f64::max)
            * dt;
        if !(stiff <= config.max_stiffness) {
            return Err(Error::Unstable {
                time: tk,
                factor: stiff,
            });
        }
        let boundary_value = |node: usize| match config.boundary {
            BoundaryMode::Reaction => u[node] + source[node],
            BoundaryMode::FrozenDirichlet => h_vals[node],
        };
        let mut next = vec![0.0; grid.len()];
        if d == 1 {
            let mut l = vec![0.0; n];
            let mut c = vec![1.0; n];
            let mut r = vec![0.0; n];
            for i in 0..n {
                if grid.is_boundary(i) {
                    next[i] = boundary_value(i);
                } else {
                    let (lo, ce, hi) = op.axis_stencil(grid, i, 0);
                    l[i] = -dt * lo;
                    c[i] = 1.0 - dt * ce;
                    r[i] = -dt * hi;
                    next[i] = u[i] + source[i];
                }
            }
            let mut scratch = vec![0.0; n];
            thomas(&l, &c, &r, &mut next, &mut scratch)?;
        } else {
            // Douglas: v0 = u + dt 𝓛u + s, then (I - dt 𝓛_l) v_l = v_{l-1} - dt 𝓛_l u
            op.apply(grid, &u, &mut lu);
            let mut v: Vec<f64> = (0..grid.len())
                .map(|i| if grid.is_boundary(i) { boundary_value(i) } else { u[i] + dt * lu[i] + source[i] })
                .collect();
            for axis in 0..2 {
                let lines: Vec<Vec<f64>> = (1..n - 1)
                    .into_par_iter()
                    .map(|line| -> Result<Vec<f64>> {
                        let idx: Vec<usize> = line_nodes(n, axis, line).collect();
                        let mut lo = vec![0.0; n];
                        let mut ce = vec![1.0; n];
                        let mut hi = vec![0.0; n];
                        let mut rhs = vec![0.0; n];
                        for (m, &node) in idx.iter().enumerate() {
                            if grid.is_boundary(node) {
                                rhs[m] = v[node];
                            } else {
                                let (a, b, c) = op.axis_stencil(grid, node, axis);
                                lo[m] = -dt * a;
                                ce[m] = 1.0 - dt * b;
                                hi[m] = -dt * c;
                                rhs[m] = v[node] - dt * op.axis_apply(grid, &u, axis, node);
                            }
                        }
                        let mut scratch = vec![0.0; n];
                        thomas(&lo, &ce, &hi, &mut rhs, &mut scratch)?;
                        Ok(rhs)
                    })
                    .collect::<Result<_>>()?;
                for (li, vals) in lines.into_iter().enumerate() {
                    for (m, node) in line_nodes(n, axis, li + 1).enumerate() {
                        v[node] = vals[m];
                    }
                }
            }
            next = v;
        }
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k - k0,
                path: i,
                hint: "finite-difference field diverged; refine the time step or truncate the drift".into(),
            });
        }
        u = next;
        out.push(FieldSnapshot::new(tk, *grid, u.clone())?);
    }
    out.reverse();
    Ok(out)
}

/// `v(t) = u(T - t)`: the same stored values in reversed order.
pub fn forward_from_backward(u: &[FieldSnapshot], t_end: f64) -> Vec<FieldSnapshot> {
    u.iter()
        .rev()
        .map(|s| FieldSnapshot {
            time: t_end - s.time,
            grid: s.grid,
            values: s.values.clone(),
        })
        .collect()
}

/// Smooth bump `(1 + tilt·(x - c)_1) exp(1 - 1/(1 - |x-c|²/r²))` supported in the ball `B(c, r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub center: Vec<f64>,
    pub radius: f64,
    #[serde(default)]
    pub tilt: f64,
}

impl TestFunction {
    pub fn value(&self, x: &[f64]) -> f64 {
        let s = self.scaled_sq(x);
        if s >= 1.0 {
            return 0.0;
        }
        (1.0 + self.tilt * (x[0] - self.center[0])) * (1.0 - 1.0 / (1.0 - s)).exp()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let s = self.scaled_sq(x);
        out.fill(0.0);
        if s >= 1.0 {
            return;
        }
        let bump = (1.0 - 1.0 / (1.0 - s)).exp();
        let poly = 1.0 + self.tilt * (x[0] - self.center[0]);
        // ∂s/∂x_l = 2 (x_l - c_l) / r², d bump / ds = -bump / (1 - s)²
        let db = -bump / ((1.0 - s) * (1.0 - s));
        for (l, o) in out.iter_mut().enumerate() {
            *o = poly * db * 2.0 * (x[l] - self.center[l]) / (self.radius * self.radius);
        }
        out[0] += self.tilt * bump;
    }

    fn scaled_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (self.radius * self.radius)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunctionBattery {
    pub functions: Vec<TestFunction>,
}

impl TestFunctionBattery {
    /// Five bumps with distinct centres and radii inside the central half of the grid.
    pub fn default_for(grid: &SpatialGrid) -> Self {
        let r = grid.radius();
        let functions = (0..5)
            .map(|i| {
                let f = i as f64 / 4.0 - 0.5;
                let c0 = f * r;
                let center = if grid.dim() == 1 { vec![c0] } else { vec![c0, -0.5 * c0] };
                TestFunction {
                    center,
                    radius: (0.15 + 0.05 * i as f64) * r,
                    tilt: 0.2 * (i as f64 - 2.0) / r,
                }
            })
            .collect();
        Self { functions }
    }

    pub fn validate(&self, grid: &SpatialGrid) -> Result<()> {
        for (i, phi) in self.functions.iter().enumerate() {
            if phi.center.len() != grid.dim() || !(phi.radius > 0.0) {
                return Err(invalid(format!("test function {i} has the wrong dimension or radius")));
            }
            let reach = phi.center.iter().map(|c| c.abs()).fold(0.0, f64::max) + phi.radius;
            if reach >= grid.radius() - grid.step() {
                return Err(invalid(format!(
                    "support of test function {i} reaches {reach}, outside the grid interior (R={})",
                    grid.radius()
                )));
            }
        }
        Ok(())
    }
}

/// Terms of the weak identity for one `(φ, t)` pair; the residual is their signed sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    pub phi: usize,
    pub t: f64,
    pub residual: f64,
    /// `∫u(t)φ`.
    pub field: f64,
    /// `-∫hφ`.
    pub terminal: f64,
    /// `½∫∫(σ*∇u)(σ*∇φ)`.
    pub diffusion: f64,
    /// `∫∫u div((b-Ã)φ)`.
    pub transport: f64,
    /// `-∫∫f(u)φ`.
    pub drift: f64,
    /// `∫(∫g(u)φ) d†B̂`.
    pub noise: f64,
}

/// `Ã_j = ½ Σ_i ∂_i a_ij` by central differences.
fn a_tilde(coeffs: &CoefficientSet, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    let eps = 1e-5;
    let mut xp = x.to_vec();
    let mut ap = vec![0.0; d * d];
    let mut am = vec![0.0; d * d];
    out.fill(0.0);
    for i in 0..d {
        xp[i] = x[i] + eps;
        coeffs.diffusion_matrix(&xp, &mut ap);
        xp[i] = x[i] - eps;
        coeffs.diffusion_matrix(&xp, &mut am);
        xp[i] = x[i];
        for j in 0..d {
            out[j] += 0.5 * (ap[i * d + j] - am[i * d + j]) / (2.0 * eps);
        }
    }
}

/// Residual of the weak formulation for each test function at every stored time.
/// Time integrals use the rules of the scheme (generator at the earlier time, drift at
/// the later field value, `g` at the right endpoint); spatial integrals use the grid's
/// trapezoid rule with central differences of `u` and the exact gradient of `φ`.
pub fn weak_form_residual(
    u: &[FieldSnapshot],
    battery: &TestFunctionBattery,
    coeffs: &CoefficientSet,
    noise: &NoisePath,
) -> Result<Vec<WeakResidual>> {
    let first = u.first().ok_or_else(|| invalid("empty field sequence"))?;
    let grid = first.grid;
    for s in u {
        grid.ensure_same(&s.grid)?;
    }
    battery.validate(&grid)?;
    let (k0, k1) = window_on(noise, (first.time, u.last().expect("nonempty").time))?;
    if k1 - k0 + 1 != u.len() {
        return Err(Error::Shape("field sequence does not match the noise grid".into()));
    }
    let d = grid.dim();
    let n = grid.per_dim();
    let h = grid.step();
    let dt = noise.grid().dt();
    let nodes = grid.nodes();
    let wts: Vec<f64> = (0..grid.len()).map(|i| grid.trapezoid_weight(i)).collect();
    let t_end = u.last().expect("nonempty").time;

    let rows: Vec<Vec<WeakResidual>> = battery
        .functions
        .par_iter()
        .enumerate()
        .map(|(pi, phi)| {
            let support: Vec<usize> = (0..grid.len()).filter(|&i| phi.value(&nodes[i]) != 0.0).collect();
            let phis: Vec<f64> = support.iter().map(|&i| phi.value(&nodes[i])).collect();
            // a∇φ and div((b - Ã)φ) at the support nodes
            let mut a_grad = vec![0.0; support.len() * d];
            let mut div = vec![0.0; support.len()];
            let mut a = vec![0.0; d * d];
            let mut g = vec![0.0; d];
            let mut bb = vec![0.0; d];
            let mut at = vec![0.0; d];
            let eps = 1e-4;
            for (m, &node) in support.iter().enumerate() {
                let x = &nodes[node];
                coeffs.diffusion_matrix(x, &mut a);
                phi.gradient(x, &mut g);
                for r in 0..d {
                    a_grad[m * d + r] = (0..d).map(|c| a[r * d + c] * g[c]).sum();
                }
                let mut xp = x.clone();
                let mut acc = 0.0;
                for j in 0..d {
                    let mut comp = |y: &[f64]| {
                        (coeffs.b)(y, &mut bb);
                        a_tilde(coeffs, y, &mut at);
                        (bb[j] - at[j]) * phi.value(y)
                    };
                    xp[j] = x[j] + eps;
                    let up = comp(&xp);
                    xp[j] = x[j] - eps;
                    let dn = comp(&xp);
                    xp[j] = x[j];
                    acc += (up - dn) / (2.0 * eps);
                }
                div[m] = acc;
            }
            let grad_u = |vals: &[f64], node: usize, l: usize| {
                let stride = if d == 1 || l == 1 { 1 } else { n };
                (vals[node + stride] - vals[node - stride]) / (2.0 * h)
            };
            let integral = |vals: &[f64], fun: &dyn Fn(usize, usize, f64) -> f64| -> f64 {
                support.iter().enumerate().map(|(m, &node)| fun(m, node, vals[node]) * wts[node]).sum()
            };
            // per-interval contributions, k indexing [t_k, t_{k+1}] of the sequence
            let steps = u.len() - 1;
            let mut diff_k = vec![0.0; steps];
            let mut trans_k = vec![0.0; steps];
            let mut drift_k = vec![0.0; steps];
            let mut noise_k = vec![0.0; steps];
            for k in 0..steps {
                let (tk, tk1) = (u[k].time, u[k + 1].time);
                let now = &u[k].values;
                let later = &u[k + 1].values;
                diff_k[k] = 0.5
                    * dt
                    * integral(now, &|m, node, _| (0..d).map(|l| grad_u(now, node, l) * a_grad[m * d + l]).sum());
                trans_k[k] = dt * integral(now, &|m, _, v| v * div[m]);
                drift_k[k] = -dt * integral(later, &|m, node, v| (coeffs.f)(tk, &nodes[node], v) * phis[m]);
                noise_k[k] = coeffs
                    .g
                    .iter()
                    .enumerate()
                    .map(|(j, gj)| {
                        noise.db(k0 + k, j) * integral(later, &|m, node, v| (gj.g)(tk1, &nodes[node], v) * phis[m])
                    })
                    .sum();
            }
            let terminal = -integral(&u[steps].values, &|m, _, v| v * phis[m]);
            let mut out = Vec::with_capacity(u.len());
            let (mut sd, mut st, mut sf, mut sn) = (0.0, 0.0, 0.0, 0.0);
            for k in (0..=steps).rev() {
                if k < steps {
                    sd += diff_k[k];
                    st += trans_k[k];
                    sf += drift_k[k];
                    sn += noise_k[k];
                }
                let field = integral(&u[k].values, &|m, _, v| v * phis[m]);
                let residual = field + terminal + sd + st + sf + sn;
                out.push(WeakResidual {
                    phi: pi,
                    t: if k == steps { t_end } else { u[k].time },
                    residual,
                    field,
                    terminal,
                    diffusion: sd,
                    transport: st,
                    drift: sf,
                    noise: sn,
                });
            }
            out.reverse();
            out
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_residual_csv<W: Write>(rows: &[WeakResidual], mut out: W) -> std::io::Result<()> {
    writeln!(out, "phi_id,t,residual,field,terminal,diffusion,transport,drift,noise")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.phi, r.t, r.residual, r.field, r.terminal, r.diffusion, r.transport, r.drift, r.noise
        )?;
    }
    Ok(())
}

/// Long-format field table `t,x1[,x2],u`.
pub fn write_fields_csv<W: Write>(fields: &[FieldSnapshot], mut out: W) -> std::io::Result<()> {
    let d = fields.first().map_or(1, |f| f.grid.dim());
    let coords: Vec<String> = (1..=d).map(|l| format!("x{l}")).collect();
    writeln!(out, "t,{},u", coords.join(","))?;
    for f in fields {
        let mut x = vec![0.0; d];
        for (i, v) in f.values.iter().enumerate() {
            f.grid.node_into(i, &mut x);
            let xs: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{},{},{}", f.time, xs.join(","), v)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSlice {
    pub t: f64,
    pub error: f64,
    pub reference: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub slices: Vec<CorrespondenceSlice>,
    pub max_error: f64,
    pub max_relative: f64,
}

/// `‖u(t) - Y_t^{t,·}‖_{L²_ρ}` per common time slice; the relative error divides by the
/// largest `‖u(t)‖` so slices where the field is small are not amplified.
pub fn correspondence_error(
    u: &[FieldSnapshot],
    diagonal: &[FieldSnapshot],
    weight: &RhoWeight,
) -> Result<Correspondence> {
    if u.is_empty() || diagonal.is_empty() {
        return Err(invalid("empty field sequence"));
    }
    let mut slices = Vec::new();
    let mut scale: f64 = 0.0;
    for y in diagonal {
        let s = u
            .iter()
            .find(|s| (s.time - y.time).abs() <= 1e-9 * (1.0 + y.time.abs()))
            .ok_or_else(|| Error::Shape(format!("no field slice at t={}", y.time)))?;
        s.grid.ensure_same(&y.grid)?;
        let diff = s.difference(y)?;
        let error = weighted_power_sum(&diff, 2.0, weight).sqrt();
        let reference = weighted_power_sum(s, 2.0, weight).sqrt();
        scale = scale.max(reference);
        slices.push(CorrespondenceSlice { t: y.time, error, reference, relative: 0.0 });
    }
    for s in &mut slices {
        s.relative = if scale > 0.0 { s.error / scale } else { s.error };
    }
    let max_error = slices.iter().map(|s| s.error).fold(0.0, f64::max);
    let max_relative = slices.iter().map(|s| s.relative).fold(0.0, f64::max);
    Ok(Correspondence { slices, max_error, max_relative })
}
