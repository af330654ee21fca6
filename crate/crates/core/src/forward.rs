//! Euler-Maruyama simulation of the forward flow `X_s^{t,x}`.

use std::io::Write;
use std::sync::Arc;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::SpatialGrid;
use crate::model::coefficients::CoefficientSet;
use crate::noise::{TimeGrid, WienerEnsemble};

pub const DEFAULT_BLOWUP: f64 = 1e6;

/// How start points are laid out. Every start carries a quadrature weight so that
/// path sums approximate `∫ · dx` (or an expectation for point starts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathStarts {
    /// All paths start at `x`; weights `1/paths`.
    Point { x: Vec<f64>, paths: usize },
    /// `paths_per_node` paths at every node of a spatial grid; trapezoid weights.
    Grid {
        grid: SpatialGrid,
        paths_per_node: usize,
    },
    /// Cell midpoints of a uniform partition of `[-radius, radius]^d` (`paths^(1/d)` cells
    /// per axis); weights are the cell volumes.
    Stratified { radius: f64, paths: usize },
}

impl PathStarts {
    /// Start points (row-major `paths × d`) and their weights.
    pub fn layout(&self, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            PathStarts::Point { x, paths } => {
                if x.len() != dim || *paths == 0 {
                    return Err(invalid("point start needs a d-vector and at least one path"));
                }
                let starts = (0..*paths).flat_map(|_| x.iter().copied()).collect();
                Ok((starts, vec![1.0 / *paths as f64; *paths]))
            }
            PathStarts::Grid {
                grid,
                paths_per_node,
            } => {
                if grid.dim() != dim || *paths_per_node == 0 {
                    return Err(invalid("grid start dimension mismatch or zero paths per node"));
                }
                let mut starts = Vec::with_capacity(grid.len() * paths_per_node * dim);
                let mut weights = Vec::with_capacity(grid.len() * paths_per_node);
                for node in 0..grid.len() {
                    let x = grid.node(node);
                    let w = grid.trapezoid_weight(node) / *paths_per_node as f64;
                    for _ in 0..*paths_per_node {
                        starts.extend_from_slice(&x);
                        weights.push(w);
                    }
                }
                Ok((starts, weights))
            }
            PathStarts::Stratified { radius, paths } => {
                if !(*radius > 0.0) || *paths == 0 {
                    return Err(invalid("stratified starts need a positive radius and paths"));
                }
                let per = match dim {
                    1 => *paths,
                    2 => (*paths as f64).sqrt().round().max(1.0) as usize,
                    _ => return Err(invalid("stratified starts support d = 1 or 2")),
                };
                let width = 2.0 * radius / per as f64;
                let centre = |i: usize| -radius + (i as f64 + 0.5) * width;
                let (starts, n) = if dim == 1 {
                    ((0..per).map(centre).collect::<Vec<_>>(), per)
                } else {
                    (
                        (0..per * per)
                            .flat_map(|i| [centre(i / per), centre(i % per)])
                            .collect(),
                        per * per,
                    )
                };
                Ok((starts, vec![width.powi(dim as i32); n]))
            }
        }
    }

    pub fn grid(&self) -> Option<(&SpatialGrid, usize)> {
        match self {
            PathStarts::Grid {
                grid,
                paths_per_node,
            } => Some((grid, *paths_per_node)),
            _ => None,
        }
    }
}

/// Simulated flow on a time window, stored time-major: `values[(k * paths + i) * d + l]`.
#[derive(Debug, Clone)]
pub struct FlowPanel {
    grid: TimeGrid,
    dim: usize,
    paths: usize,
    starts: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
    valid: Vec<bool>,
    wiener: Arc<WienerEnsemble>,
    /// Offset of the window inside the ensemble grid.
    wiener_offset: usize,
}

impl FlowPanel {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn start_time(&self) -> f64 {
        self.grid.t_start()
    }
    pub fn start(&self, i: usize) -> &[f64] {
        &self.starts[i * self.dim..(i + 1) * self.dim]
    }
    pub fn starts(&self) -> &[f64] {
        &self.starts
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
    pub fn wiener(&self) -> &Arc<WienerEnsemble> {
        &self.wiener
    }
    pub fn wiener_offset(&self) -> usize {
        self.wiener_offset
    }

    /// `X_{t_k}` of path `i`.
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        let off = (k * self.paths + i) * self.dim;
        &self.values[off..off + self.dim]
    }

    /// All states at step `k` (`paths × d`).
    pub fn step(&self, k: usize) -> &[f64] {
        let n = self.paths * self.dim;
        &self.values[k * n..(k + 1) * n]
    }

    /// `ΔW` of path `i` over window step `k`.
    pub fn dw(&self, k: usize, i: usize) -> &[f64] {
        self.wiener.dw(i, self.wiener_offset + k)
    }

    /// State at an absolute time `s`; before the start time the flow is frozen at `x`.
    pub fn state_at(&self, s: f64, i: usize) -> Result<&[f64]> {
        if s < self.grid.t_start() {
            return Ok(self.start(i));
        }
        Ok(self.state(self.grid.index_of(s)?, i))
    }

    /// Versioned little-endian layout: magic, version, grid, paths, dim, then the
    /// time-major state array.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(b"BDSDFP\0\0")?;
        out.write_u32::<LittleEndian>(1)?;
        out.write_f64::<LittleEndian>(self.grid.t_start())?;
        out.write_f64::<LittleEndian>(self.grid.t_end())?;
        out.write_u64::<LittleEndian>(self.grid.n_steps() as u64)?;
        out.write_u64::<LittleEndian>(self.paths as u64)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        for v in &self.values {
            out.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    /// Long-format CSV: `t,path,x1..xd`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string(), "path".to_string()];
        header.extend((1..=self.dim).map(|l| format!("x{l}")));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..=self.grid.n_steps() {
            for i in 0..self.paths {
                let mut row = vec![self.grid.time(k).to_string(), i.to_string()];
                row.extend(self.state(k, i).iter().map(|v| v.to_string()));
                writeln!(out, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// `X_{k+1} = X_k + b(X_k) Δt + σ(X_k) ΔW_k` on the window `[t, T]` of the ensemble grid.
/// Paths whose norm exceeds `blowup` are frozen and marked invalid.
pub fn euler_maruyama_flow(
    coeffs: &CoefficientSet,
    starts: &PathStarts,
    window: (f64, f64),
    wiener: Arc<WienerEnsemble>,
    blowup: f64,
) -> Result<FlowPanel> {
    let (starts_v, weights) = starts.layout(coeffs.dim)?;
    simulate(coeffs, starts_v, weights, window, wiener, blowup)
}

fn simulate(
    coeffs: &CoefficientSet,
    starts_v: Vec<f64>,
    weights: Vec<f64>,
    window: (f64, f64),
    wiener: Arc<WienerEnsemble>,
    blowup: f64,
) -> Result<FlowPanel> {
    let d = coeffs.dim;
    if wiener.dim() != d {
        return Err(Error::Shape(format!(
            "Brownian dimension {} does not match state dimension {d}",
            wiener.dim()
        )));
    }
    let paths = weights.len();
    if wiener.members() < paths {
        return Err(invalid(format!(
            "ensemble has {} members but {paths} paths were requested",
            wiener.members()
        )));
    }
    let wgrid = *wiener.grid();
    let k0 = wgrid.index_of(window.0)?;
    let k1 = wgrid.index_of(window.1)?;
    let grid = wgrid.sub(k0, k1)?;
    let steps = grid.n_steps();
    let dt = grid.dt();
    let mut values = vec![0.0; (steps + 1) * paths * d];
    values[..paths * d].copy_from_slice(&starts_v);
    let mut valid = vec![true; paths];
    let row = paths * d;
    for k in 0..steps {
        let (done, rest) = values.split_at_mut((k + 1) * row);
        let cur = &done[k * row..];
        let next = &mut rest[..row];
        let failures: Vec<Option<usize>> = next
            .par_chunks_mut(d)
            .zip(valid.par_iter_mut())
            .enumerate()
            .map_init(
                || (vec![0.0; d], vec![0.0; d * d]),
                |(bv, sv), (i, (out, ok))| {
                    let x = &cur[i * d..(i + 1) * d];
                    if !*ok {
                        out.copy_from_slice(x);
                        return None;
                    }
                    (coeffs.b)(x, bv);
                    (coeffs.sigma)(x, sv);
                    let dw = wiener.dw(i, k0 + k);
                    let mut norm2 = 0.0;
                    for l in 0..d {
                        let diff: f64 = (0..d).map(|m| sv[l * d + m] * dw[m]).sum();
                        out[l] = x[l] + bv[l] * dt + diff;
                        norm2 += out[l] * out[l];
                    }
                    if !norm2.is_finite() {
                        if norm2.is_nan() {
                            return Some(i);
                        }
                        *ok = false;
                        out.copy_from_slice(x);
                    } else if norm2.sqrt() > blowup {
                        *ok = false;
                    }
                    None
                },
            )
            .collect();
        if let Some(i) = failures.into_iter().flatten().next() {
            return Err(Error::NonFinite {
                step: k + 1,
                path: i,
                hint: "forward state is NaN; check b and sigma".into(),
            });
        }
    }
    let panel = FlowPanel {
        grid,
        dim: d,
        paths,
        starts: starts_v,
        weights,
        values,
        valid,
        wiener,
        wiener_offset: k0,
    };
    if panel.invalid_count() > 0 {
        log::warn!(
            "{} of {} forward paths exceeded the blow-up bound {blowup} and were excluded",
            panel.invalid_count(),
            paths
        );
    }
    Ok(panel)
}

/// Deviation between `X_r^{t,x}` and the restarted `X_r^{s, X_s^{t,x}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionDeviation {
    pub max: f64,
    pub mean: f64,
}

/// Restart the flow at `s` from `X_s^{t,x}` and compare at `r`. With `coarsen = 1` both
/// legs share the recursion and the deviation is exactly zero; with `coarsen = 2` the
/// restarted leg runs on a grid twice as coarse driven by the summed increments.
pub fn flow_composition_check(
    coeffs: &CoefficientSet,
    times: (f64, f64, f64),
    starts: &PathStarts,
    wiener: Arc<WienerEnsemble>,
    coarsen: usize,
) -> Result<CompositionDeviation> {
    let (t, s, r) = times;
    if !(t < s && s < r) {
        return Err(invalid(format!("need t < s < r, got {t}, {s}, {r}")));
    }
    let full = euler_maruyama_flow(coeffs, starts, (t, r), wiener.clone(), f64::INFINITY)?;
    let ks = full.grid().index_of(s)?;
    let points: Vec<f64> = full.step(ks).to_vec();
    let restart_starts = PointCloud(points);
    let second_wiener = if coarsen == 1 {
        wiener
    } else {
        Arc::new(wiener.coarsened(coarsen).map_err(|_| {
            Error::InvalidInput("restart grid misaligned with the fine grid".into())
        })?)
    };
    let restarted = cloud_flow(coeffs, &restart_starts, (s, r), second_wiener)?;
    let kr_full = full.grid().n_steps();
    let kr_rest = restarted.grid().n_steps();
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for i in 0..full.paths() {
        let a = full.state(kr_full, i);
        let b = restarted.state(kr_rest, i);
        let dev = crate::model::weights::euclid_diff(a, b);
        max = max.max(dev);
        sum += dev;
    }
    Ok(CompositionDeviation {
        max,
        mean: sum / full.paths() as f64,
    })
}

/// Explicit start points, one path each (weights `1/paths`).
#[derive(Debug, Clone)]
pub struct PointCloud(pub Vec<f64>);

/// Flow from an explicit point cloud; path `i` uses ensemble member `i`.
pub fn cloud_flow(
    coeffs: &CoefficientSet,
    cloud: &PointCloud,
    window: (f64, f64),
    wiener: Arc<WienerEnsemble>,
) -> Result<FlowPanel> {
    let d = coeffs.dim;
    if !cloud.0.len().is_multiple_of(d) {
        return Err(Error::Shape("point cloud length is not a multiple of d".into()));
    }
    let paths = cloud.0.len() / d;
    simulate(
        coeffs,
        cloud.0.clone(),
        vec![1.0 / paths as f64; paths],
        window,
        wiener,
        f64::INFINITY,
    )
}
