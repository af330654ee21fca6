//! Uniform spatial grids on `[-R, R]^d` and fields sampled on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    radius: f64,
    step: f64,
    per_dim: usize,
}

impl SpatialGrid {
    pub fn new(dim: usize, radius: f64, step: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(invalid(format!("grids support d = 1 or 2, got {dim}")));
        }
        if !(radius > 0.0 && step > 0.0 && radius.is_finite() && step.is_finite()) {
            return Err(invalid("grid radius and step must be positive"));
        }
        let cells = 2.0 * radius / step;
        let rounded = cells.round();
        if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 2.0 {
            return Err(invalid(format!(
                "2R/h = {cells} must be an integer >= 2 (R={radius}, h={step})"
            )));
        }
        Ok(Self {
            dim,
            radius,
            step,
            per_dim: rounded as usize + 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn per_dim(&self) -> usize {
        self.per_dim
    }
    pub fn len(&self) -> usize {
        self.per_dim.pow(self.dim as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.radius + i as f64 * self.step
    }

    /// Coordinates of node `idx` (row-major, last axis fastest).
    pub fn node(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.node_into(idx, &mut out);
        out
    }

    pub fn node_into(&self, idx: usize, out: &mut [f64]) {
        match self.dim {
            1 => out[0] = self.coord(idx),
            _ => {
                out[0] = self.coord(idx / self.per_dim);
                out[1] = self.coord(idx % self.per_dim);
            }
        }
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Product trapezoidal weights.
    pub fn trapezoid_weight(&self, idx: usize) -> f64 {
        let w1 = |i: usize| {
            if i == 0 || i + 1 == self.per_dim {
                0.5 * self.step
            } else {
                self.step
            }
        };
        match self.dim {
            1 => w1(idx),
            _ => w1(idx / self.per_dim) * w1(idx % self.per_dim),
        }
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        let edge = |i: usize| i == 0 || i + 1 == self.per_dim;
        match self.dim {
            1 => edge(idx),
            _ => edge(idx / self.per_dim) || edge(idx % self.per_dim),
        }
    }

    pub fn same_as(&self, other: &SpatialGrid) -> bool {
        self.dim == other.dim
            && self.per_dim == other.per_dim
            && (self.radius - other.radius).abs() <= 1e-12 * self.radius
            && (self.step - other.step).abs() <= 1e-12 * self.step
    }

    pub fn ensure_same(&self, other: &SpatialGrid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "grid mismatch: (d={}, R={}, h={}) vs (d={}, R={}, h={})",
                self.dim, self.radius, self.step, other.dim, other.radius, other.step
            )))
        }
    }

    /// Linear interpolation of nodal values at an arbitrary point (clamped to the box).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let locate = |v: f64| {
            let s = ((v + self.radius) / self.step).clamp(0.0, (self.per_dim - 1) as f64);
            let i = (s.floor() as usize).min(self.per_dim - 2);
            (i, s - i as f64)
        };
        match self.dim {
            1 => {
                let (i, t) = locate(x[0]);
                values[i] * (1.0 - t) + values[i + 1] * t
            }
            _ => {
                let (i, s) = locate(x[0]);
                let (j, t) = locate(x[1]);
                let n = self.per_dim;
                let v = |a: usize, b: usize| values[a * n + b];
                v(i, j) * (1.0 - s) * (1.0 - t)
                    + v(i + 1, j) * s * (1.0 - t)
                    + v(i, j + 1) * (1.0 - s) * t
                    + v(i + 1, j + 1) * s * t
            }
        }
    }
}

/// A field `u(t, ·)` sampled at the nodes of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub time: f64,
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl FieldSnapshot {
    pub fn new(time: f64, grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values but the grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { time, grid, values })
    }

    pub fn from_fn(time: f64, grid: SpatialGrid, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.node_into(i, &mut x);
                f(&x)
            })
            .collect();
        Self { time, grid, values }
    }

    pub fn constant(time: f64, grid: SpatialGrid, c: f64) -> Self {
        Self {
            time,
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            time: self.time,
            grid: self.grid,
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn difference(&self, other: &FieldSnapshot) -> Result<FieldSnapshot> {
        self.grid.ensure_same(&other.grid)?;
        Ok(FieldSnapshot {
            time: self.time,
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_matches_formula() {
        let g = SpatialGrid::new(1, 6.0, 0.05).unwrap();
        assert_eq!(g.len(), 241);
        let g2 = SpatialGrid::new(2, 1.0, 0.25).unwrap();
        assert_eq!(g2.len(), 81);
        assert_eq!(g2.node(80), vec![1.0, 1.0]);
    }

    #[test]
    fn rejects_incommensurate_step() {
        assert!(SpatialGrid::new(1, 1.0, 0.3).is_err());
        assert!(SpatialGrid::new(3, 1.0, 0.5).is_err());
    }

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = SpatialGrid::new(1, 2.0, 0.1).unwrap();
        let s: f64 = (0..g.len())
            .map(|i| g.trapezoid_weight(i) * (3.0 + g.coord(i)))
            .sum();
        assert!((s - 12.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_reproduces_bilinear() {
        let g = SpatialGrid::new(2, 1.0, 0.5).unwrap();
        let f = FieldSnapshot::from_fn(0.0, g, |x| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]);
        let v = g.interpolate(&f.values, &[0.3, -0.7]);
        assert!((v - (1.0 + 0.6 + 0.7 - 0.105)).abs() < 1e-12);
    }
}
