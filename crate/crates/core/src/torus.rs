//! The flat torus `[−π, π]²`, whose Laplace–Beltrami eigenfunctions are the
//! plane waves `e^{i(k₁x₁ + k₂x₂)}` with eigenvalue `k₁² + k₂²`.

use std::collections::HashMap;

use crate::butterfly::ColumnBandProvider;
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, C64};
use crate::parallel::{map_range, Execution};
use crate::tree::PointCloud;

/// The `m` lowest torus modes ordered by eigenvalue, then `(k₁, k₂)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusBasis {
    modes: Vec<(i64, i64)>,
    eigenvalues: Vec<f64>,
}

impl TorusBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[(i64, i64)] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// The `m` modes of smallest `k₁² + k₂²`.
///
/// Candidates are drawn from a square `[−K, K]²` that is widened until it
/// contains the disk `|k|² ≤ λ_m`, so the selection is exact for every `m`.
pub fn torus_basis(m: usize) -> TorusBasis {
    let mut half = ((m as f64 / std::f64::consts::PI).sqrt().ceil() as i64) + 2;
    loop {
        let mut cand: Vec<(i64, i64, i64)> = Vec::with_capacity(((2 * half + 1) as usize).pow(2));
        for k1 in -half..=half {
            for k2 in -half..=half {
                cand.push((k1 * k1 + k2 * k2, k1, k2));
            }
        }
        cand.sort_unstable();
        if m <= cand.len() && (m == 0 || cand[m - 1].0 <= half * half) {
            cand.truncate(m);
            return TorusBasis {
                modes: cand.iter().map(|&(_, a, b)| (a, b)).collect(),
                eigenvalues: cand.iter().map(|&(l, _, _)| l as f64).collect(),
            };
        }
        half *= 2;
    }
}

/// Phase `k·x` evaluated directly.
#[inline]
fn plane_wave(mode: (i64, i64), p: &[f64]) -> C64 {
    let (s, c) = (mode.0 as f64 * p[0] + mode.1 as f64 * p[1]).sin_cos();
    C64::new(c, s)
}

/// Column source for `Φ_jk = e^{i k·x_j}` that never forms the full matrix.
///
/// Each band is built from per-axis tables `e^{i k₁ u}` over the distinct
/// first and second coordinates, so a grid with side `N` costs `2N` sines
/// per column instead of `N²`.
pub struct TorusProvider {
    basis: TorusBasis,
    n: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    ix: Vec<u32>,
    iy: Vec<u32>,
    execution: Execution,
}

fn distinct(values: impl Iterator<Item = f64>) -> (Vec<f64>, Vec<u32>) {
    let mut table = HashMap::new();
    let mut uniq = Vec::new();
    let idx = values
        .map(|v| {
            *table.entry(v.to_bits()).or_insert_with(|| {
                uniq.push(v);
                (uniq.len() - 1) as u32
            })
        })
        .collect();
    (uniq, idx)
}

pub fn torus_provider(basis: &TorusBasis, points: &PointCloud) -> Result<TorusProvider> {
    if points.dim() != 2 {
        return Err(Error::InvalidInput("torus points must be 2D".into()));
    }
    let (xs, ix) = distinct((0..points.len()).map(|j| points.point(j)[0]));
    let (ys, iy) = distinct((0..points.len()).map(|j| points.point(j)[1]));
    Ok(TorusProvider {
        basis: basis.clone(),
        n: points.len(),
        xs,
        ys,
        ix,
        iy,
        execution: Execution::default(),
    })
}

impl TorusProvider {
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.execution = exec;
        self
    }

    pub fn basis(&self) -> &TorusBasis {
        &self.basis
    }

    fn column(&self, mode: (i64, i64)) -> Vec<C64> {
        let ex: Vec<C64> = self
            .xs
            .iter()
            .map(|&x| {
                let (s, c) = (mode.0 as f64 * x).sin_cos();
                C64::new(c, s)
            })
            .collect();
        let ey: Vec<C64> = self
            .ys
            .iter()
            .map(|&y| {
                let (s, c) = (mode.1 as f64 * y).sin_cos();
                C64::new(c, s)
            })
            .collect();
        self.ix
            .iter()
            .zip(&self.iy)
            .map(|(&a, &b)| ex[a as usize] * ey[b as usize])
            .collect()
    }
}

impl ColumnBandProvider for TorusProvider {
    fn rows(&self) -> usize {
        self.n
    }

    fn cols(&self) -> usize {
        self.basis.len()
    }

    fn band(&mut self, columns: &[usize]) -> Result<DenseMatrix> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.basis.len()) {
            return Err(Error::Stream(format!(
                "column {c} requested from a basis of {} modes",
                self.basis.len()
            )));
        }
        let cols = map_range(self.execution, columns.len(), |k| {
            self.column(self.basis.modes[columns[k]])
        });
        Ok(DenseMatrix::from_raw(self.n, columns.len(), cols.concat()))
    }
}

/// Brute-force `f(x_j) = Σ_k c_k e^{i k·x_j}` at the points `rows`.
pub fn direct_mht(
    basis: &TorusBasis,
    points: &PointCloud,
    rows: &[usize],
    c: &[C64],
    exec: Execution,
) -> Result<Vec<C64>> {
    if c.len() != basis.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} modes",
            c.len(),
            basis.len()
        )));
    }
    if points.dim() != 2 {
        return Err(Error::InvalidInput("torus points must be 2D".into()));
    }
    if let Some(&j) = rows.iter().find(|&&j| j >= points.len()) {
        return Err(Error::Index {
            index: j,
            len: points.len(),
        });
    }
    Ok(map_range(exec, rows.len(), |r| {
        let p = points.point(rows[r]);
        basis
            .modes
            .iter()
            .zip(c)
            .map(|(&mode, &ck)| ck * plane_wave(mode, p))
            .sum()
    }))
}

/// Dense `Φ` evaluated entry by entry; for small oracles only.
pub fn dense_torus_matrix(basis: &TorusBasis, points: &PointCloud) -> DenseMatrix {
    DenseMatrix::from_fn(points.len(), basis.len(), |j, k| {
        plane_wave(basis.modes[k], points.point(j))
    })
}
