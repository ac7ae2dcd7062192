//! Sparse symmetric matrices, heat-kernel graphs and a Lanczos eigensolver.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::butterfly::ColumnBandProvider;
use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, C64};
use crate::parallel::{fill_chunks, map_range, Execution};
use crate::tree::PointCloud;

/// Symmetric matrix in compressed sparse row form with both triangles stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymmetricMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymmetricMatrix {
    /// Builds from `(i, j, v)` triplets; each off-diagonal triplet sets both
    /// `(i, j)` and `(j, i)`. Duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::Index {
                    index: i.max(j),
                    len: n,
                });
            }
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("entry ({i}, {j}) is not finite")));
            }
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        Ok(Self::from_rows(rows))
    }

    fn from_rows(mut rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let (c, mut v) = row[k];
                k += 1;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Rows given as already sorted, duplicate-free column lists.
    fn from_sorted_rows(rows: Vec<(Vec<usize>, Vec<f64>)>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(|r| r.0.len()).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for (c, v) in rows {
            cols.extend(c);
            vals.extend(v);
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|k| v[k]).unwrap_or(0.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Largest absolute row sum, an upper bound on the spectral norm.
    pub fn norm_bound(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest `|a_ij − a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                worst = worst.max((a - self.get(j, i)).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(Execution::Sequential, x, &mut y);
        y
    }

    pub fn matvec_into(&self, exec: Execution, x: &[f64], y: &mut [f64]) {
        fill_chunks(exec, y, 1024, |start, piece| {
            for (k, yi) in piece.iter_mut().enumerate() {
                let (c, v) = self.row(start + k);
                *yi = c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum();
            }
        });
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[j * self.n + i] = a;
            }
        }
        d
    }

    /// Induced submatrix on the sorted vertex list `vertices`.
    pub fn restrict(&self, vertices: &[usize]) -> Result<SparseSymmetricMatrix> {
        let mut local = vec![usize::MAX; self.n];
        for (k, &v) in vertices.iter().enumerate() {
            if v >= self.n {
                return Err(Error::Index {
                    index: v,
                    len: self.n,
                });
            }
            local[v] = k;
        }
        let rows = vertices
            .iter()
            .map(|&v| {
                let (c, val) = self.row(v);
                let mut rc = Vec::new();
                let mut rv = Vec::new();
                for (&j, &a) in c.iter().zip(val) {
                    if local[j] != usize::MAX {
                        rc.push(local[j]);
                        rv.push(a);
                    }
                }
                (rc, rv)
            })
            .collect::<Vec<_>>();
        let sorted = vertices.windows(2).all(|w| w[0] < w[1]);
        if sorted {
            Ok(Self::from_sorted_rows(rows))
        } else {
            Ok(Self::from_rows(
                rows.into_iter()
                    .map(|(c, v)| c.into_iter().zip(v).collect())
                    .collect(),
            ))
        }
    }

    /// Graph Laplacian `D − W` of this matrix read as a weighted adjacency;
    /// diagonal entries (self loops) do not contribute.
    pub fn laplacian(&self) -> SparseSymmetricMatrix {
        let rows = (0..self.n)
            .map(|i| {
                let (c, v) = self.row(i);
                let degree: f64 = c
                    .iter()
                    .zip(v)
                    .filter(|(&j, _)| j != i)
                    .map(|(_, &a)| a)
                    .sum();
                let mut rc = Vec::with_capacity(c.len() + 1);
                let mut rv = Vec::with_capacity(c.len() + 1);
                let mut placed = false;
                for (&j, &a) in c.iter().zip(v) {
                    if !placed && j >= i {
                        rc.push(i);
                        rv.push(degree);
                        placed = true;
                    }
                    if j != i {
                        rc.push(j);
                        rv.push(-a);
                    }
                }
                if !placed {
                    rc.push(i);
                    rv.push(degree);
                }
                (rc, rv)
            })
            .collect();
        Self::from_sorted_rows(rows)
    }

    /// Connected components over nonzero off-diagonal entries, each sorted,
    /// ordered by smallest vertex.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut label = vec![usize::MAX; self.n];
        let mut comps = Vec::new();
        for s in 0..self.n {
            if label[s] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut stack = vec![s];
            let mut members = Vec::new();
            label[s] = id;
            while let Some(u) = stack.pop() {
                members.push(u);
                let (c, v) = self.row(u);
                for (&w, &a) in c.iter().zip(v) {
                    if a != 0.0 && label[w] == usize::MAX {
                        label[w] = id;
                        stack.push(w);
                    }
                }
            }
            members.sort_unstable();
            comps.push(members);
        }
        comps
    }

    /// Matrix Market coordinate format, `real symmetric`, lower triangle.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> Result<()> {
        let lower: usize = (0..self.n)
            .map(|i| self.row(i).0.iter().filter(|&&j| j <= i).count())
            .sum();
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", self.n, self.n, lower)?;
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if j <= i {
                    writeln!(w, "{} {} {:.17e}", i + 1, j + 1, a)?;
                }
            }
        }
        Ok(())
    }

    /// Reads `symmetric` (lower or upper triangle) or `general` coordinate
    /// files; general files must be numerically symmetric.
    pub fn read_matrix_market<R: BufRead>(r: R) -> Result<SparseSymmetricMatrix> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty Matrix Market file".into()))??;
        let h = header.to_ascii_lowercase();
        if !h.starts_with("%%matrixmarket matrix coordinate") {
            return Err(Error::Format(format!("unsupported header {header:?}")));
        }
        let symmetric = h.contains("symmetric");
        if !symmetric && !h.contains("general") {
            return Err(Error::Format(format!("unsupported symmetry in {header:?}")));
        }
        if h.contains("complex") || h.contains("hermitian") {
            return Err(Error::Format("only real matrices are supported".into()));
        }
        let pattern = h.contains("pattern");
        let mut size = None;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            let bad = || Error::Format(format!("bad line {t:?}"));
            if size.is_none() {
                if f.len() != 3 {
                    return Err(bad());
                }
                let r: usize = f[0].parse().map_err(|_| bad())?;
                let c: usize = f[1].parse().map_err(|_| bad())?;
                if r != c {
                    return Err(Error::Shape(format!("matrix is {r}x{c}, not square")));
                }
                size = Some(r);
                continue;
            }
            if f.len() < 2 + usize::from(!pattern) {
                return Err(bad());
            }
            let i: usize = f[0].parse().map_err(|_| bad())?;
            let j: usize = f[1].parse().map_err(|_| bad())?;
            let v: f64 = if pattern { 1.0 } else { f[2].parse().map_err(|_| bad())? };
            if i == 0 || j == 0 {
                return Err(Error::Format("Matrix Market indices are 1-based".into()));
            }
            entries.push((i - 1, j - 1, v));
        }
        let n = size.ok_or_else(|| Error::Format("missing size line".into()))?;
        if symmetric {
            return Self::from_triplets(n, &entries);
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, j, v) in entries {
            if i >= n || j >= n {
                return Err(Error::Index {
                    index: i.max(j),
                    len: n,
                });
            }
            rows[i].push((j, v));
        }
        let m = Self::from_rows(rows);
        if m.asymmetry() > 1e-14 {
            return Err(Error::InvalidInput("general matrix is not symmetric".into()));
        }
        Ok(m)
    }
}

/// Unit-weight path graph on `n` vertices.
pub fn path_graph(n: usize) -> SparseSymmetricMatrix {
    let t: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
    SparseSymmetricMatrix::from_triplets(n, &t).expect("valid path graph")
}

/// Unit-weight cycle on `n ≥ 3` vertices.
pub fn cycle_graph(n: usize) -> SparseSymmetricMatrix {
    let t: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    SparseSymmetricMatrix::from_triplets(n, &t).expect("valid cycle graph")
}

/// Unit-weight complete graph without self loops.
pub fn complete_graph(n: usize) -> SparseSymmetricMatrix {
    let mut t = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            t.push((i, j, 1.0));
        }
    }
    SparseSymmetricMatrix::from_triplets(n, &t).expect("valid complete graph")
}

/// Periodic 4-neighbour grid graph matching [`PointCloud::torus_grid`] ordering.
pub fn torus_grid_graph(side: usize) -> SparseSymmetricMatrix {
    let id = |i: usize, j: usize| j * side + i;
    let mut t = Vec::with_capacity(2 * side * side);
    for j in 0..side {
        for i in 0..side {
            if side > 1 {
                t.push((id(i, j), id((i + 1) % side, j), 1.0));
                t.push((id(i, j), id(i, (j + 1) % side), 1.0));
            }
        }
    }
    SparseSymmetricMatrix::from_triplets(side * side, &t).expect("valid grid graph")
}

/// Quasi-uniform points on a sphere (Fibonacci lattice) with isotropic
/// Gaussian noise of standard deviation `sigma` added to every coordinate.
pub fn noisy_sphere(n: usize, radius: f64, sigma: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut coords = Vec::with_capacity(3 * n);
    for j in 0..n {
        let z = 1.0 - (2.0 * j as f64 + 1.0) / n as f64;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let (s, c) = (golden * j as f64).sin_cos();
        for x in [rho * c, rho * s, z] {
            coords.push(radius * x + sigma * standard_normal(&mut rng));
        }
    }
    PointCloud::new(3, coords).expect("finite sphere points")
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            let v: f64 = rng.random();
            return (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos();
        }
    }
}

fn check_heat_params(t: f64, threshold: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("heat scale must be positive, got {t}")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(())
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Thresholded heat kernel `K_jk = exp(−‖x_j − x_k‖²/t)`, keeping entries
/// above `threshold` (the diagonal is always 1). Neighbours are found by
/// binning points into cells slightly wider than the cutoff radius.
pub fn heat_kernel_graph(
    points: &PointCloud,
    t: f64,
    threshold: f64,
    exec: Execution,
) -> Result<SparseSymmetricMatrix> {
    check_heat_params(t, threshold)?;
    let n = points.len();
    let dim = points.dim();
    let cell = 1.01 * (t * (1.0 / threshold).ln()).sqrt();
    let key = |p: &[f64]| -> [i64; 3] {
        let mut k = [0i64; 3];
        for (d, &x) in p.iter().enumerate() {
            k[d] = (x / cell).floor() as i64;
        }
        k
    };
    let mut bins: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for j in 0..n {
        bins.entry(key(points.point(j))).or_default().push(j);
    }
    let offsets: Vec<[i64; 3]> = {
        let r: Vec<i64> = vec![-1, 0, 1];
        let mut out = Vec::new();
        for &a in &r {
            for &b in &r {
                if dim == 2 {
                    out.push([a, b, 0]);
                } else {
                    for &c in &r {
                        out.push([a, b, c]);
                    }
                }
            }
        }
        out
    };
    let rows = map_range(exec, n, |j| {
        let p = points.point(j);
        let k = key(p);
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for o in &offsets {
            let nb = [k[0] + o[0], k[1] + o[1], k[2] + o[2]];
            if let Some(list) = bins.get(&nb) {
                for &i in list {
                    let v = (-dist2(p, points.point(i)) / t).exp();
                    if v > threshold {
                        entries.push((i, v));
                    }
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        entries.into_iter().unzip::<usize, f64, Vec<_>, Vec<_>>()
    });
    Ok(SparseSymmetricMatrix::from_sorted_rows(rows))
}

/// All-pairs reference for [`heat_kernel_graph`].
pub fn heat_kernel_graph_brute_force(
    points: &PointCloud,
    t: f64,
    threshold: f64,
) -> Result<SparseSymmetricMatrix> {
    check_heat_params(t, threshold)?;
    let n = points.len();
    let rows = (0..n)
        .map(|j| {
            let mut c = Vec::new();
            let mut v = Vec::new();
            for i in 0..n {
                let val = (-dist2(points.point(j), points.point(i)) / t).exp();
                if val > threshold {
                    c.push(i);
                    v.push(val);
                }
            }
            (c, v)
        })
        .collect();
    Ok(SparseSymmetricMatrix::from_sorted_rows(rows))
}

/// Median nearest-neighbour distance, estimated from at most 2000 evenly
/// spaced query points.
pub fn median_nn_distance(points: &PointCloud) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let q = n.min(2000);
    let mut d: Vec<f64> = (0..q)
        .map(|s| {
            let j = s * n / q;
            let p = points.point(j);
            (0..n)
                .filter(|&i| i != j)
                .map(|i| dist2(p, points.point(i)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[q / 2]
}

/// Multiple of the squared median neighbour spacing used for the heat scale.
pub const HEAT_SCALE_FACTOR: f64 = 4.0;

/// Heat scale `t = c·n^{−1/4}` with `c = 4 h² n^{1/4}` for the median
/// nearest-neighbour distance `h`, so the kernel width tracks the sampling
/// density of this cloud. Returns `(t, c)`.
pub fn calibrate_heat_scale(points: &PointCloud) -> (f64, f64) {
    let n = points.len().max(1) as f64;
    let h = median_nn_distance(points);
    let c = HEAT_SCALE_FACTOR * h * h * n.powf(0.25);
    (c * n.powf(-0.25), c)
}

/// `I − D^{−1/2} K D^{−1/2}` together with the degrees `D_jj = Σ_k K_jk`.
pub fn eigenmaps_operator(k: &SparseSymmetricMatrix) -> Result<(SparseSymmetricMatrix, Vec<f64>)> {
    let degree = k.row_sums();
    if let Some(v) = degree.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::IsolatedVertex { vertex: v });
    }
    let s: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let rows = (0..k.dim())
        .map(|j| {
            let (c, v) = k.row(j);
            let mut rc = Vec::with_capacity(c.len() + 1);
            let mut rv = Vec::with_capacity(c.len() + 1);
            let mut placed = false;
            for (&i, &a) in c.iter().zip(v) {
                if !placed && i >= j {
                    rc.push(j);
                    rv.push(1.0 - if i == j { a / degree[j] } else { 0.0 });
                    placed = true;
                }
                if i != j {
                    rc.push(i);
                    rv.push(-a * (s[j] * s[i]));
                }
            }
            if !placed {
                rc.push(j);
                rv.push(1.0);
            }
            (rc, rv)
        })
        .collect();
    Ok((SparseSymmetricMatrix::from_sorted_rows(rows), degree))
}

/// Weyl estimate `area·λ/(4π)` of the eigenvalue count below `λ` on a surface.
pub fn weyl_count(area: f64, lambda: f64) -> f64 {
    area * lambda / (4.0 * std::f64::consts::PI)
}

/// Eigenpairs with eigenvalues ascending; column `j` of `vectors` (stored
/// column-major, `n` rows) belongs to `eigenvalues[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenBand {
    pub n: usize,
    pub eigenvalues: Vec<f64>,
    pub vectors: Vec<f64>,
    /// `‖A v − λ v‖` per pair.
    pub residuals: Vec<f64>,
}

impl EigenBand {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.n..(j + 1) * self.n]
    }

    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::from_raw(
            self.n,
            self.len(),
            self.vectors.iter().map(|&x| C64::new(x, 0.0)).collect(),
        )
    }

    /// `max |VᵀV − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.len();
        let mut worst = 0.0f64;
        for a in 0..k {
            for b in a..k {
                let dot: f64 = self.vector(a).iter().zip(self.vector(b)).map(|(x, y)| x * y).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Binary dump: `n` and band size as little-endian u64, then the
    /// eigenvalues, then the column-major vectors, all as f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in self.eigenvalues.iter().chain(&self.vectors) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<EigenBand> {
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let n = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let k = u64::from_le_bytes(u) as usize;
        let total = k
            .checked_mul(n)
            .and_then(|x| x.checked_add(k))
            .ok_or_else(|| Error::Format("band dimensions overflow".into()))?;
        let mut vals = Vec::with_capacity(total.min(1 << 28));
        for _ in 0..total {
            r.read_exact(&mut u)?;
            vals.push(f64::from_le_bytes(u));
        }
        let vectors = vals.split_off(k);
        Ok(EigenBand {
            n,
            eigenvalues: vals,
            vectors,
            residuals: vec![f64::NAN; k],
        })
    }
}

#[derive(Clone, Debug)]
pub struct LanczosOptions {
    /// Converged when `‖A y − θ y‖ ≤ tol·‖A‖` for every wanted pair.
    pub tol: f64,
    /// Cap on the Krylov dimension; `None` picks `max(300, 30k)`.
    pub max_iter: Option<usize>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: None,
            seed: 0x5eed,
            execution: Execution::default(),
        }
    }
}

/// Implicit QL on a symmetric tridiagonal matrix with diagonal `d` and
/// off-diagonal `e` (`e[i]` couples `i` and `i+1`). `z` holds rows of the
/// eigenvector matrix to update, row-major with `d.len()` columns; pass the
/// last row of the identity to get only last components, or the identity
/// for full vectors. Eigenvalues are left unsorted in `d`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut [f64]) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    let nz = z.len() / n;
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Linalg("tridiagonal QL did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in 0..nz {
                    let zr = &mut z[row * n..(row + 1) * n];
                    let f = zr[i + 1];
                    zr[i + 1] = s * zr[i] + c * f;
                    zr[i] = c * zr[i] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric tridiagonal matrix, ascending, with the
/// matching last components of the normalized eigenvectors.
fn tridiagonal_last_components(alpha: &[f64], beta: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = alpha.len();
    let mut d = alpha.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&beta[..n - 1]);
    let mut z = vec![0.0; n];
    z[n - 1] = 1.0;
    tridiagonal_ql(&mut d, &mut e, &mut z)?;
    let mut pairs: Vec<(f64, f64)> = d.into_iter().zip(z).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs)
}

/// Full eigendecomposition of a symmetric tridiagonal matrix; returns
/// ascending eigenvalues and row-major `n × n` eigenvectors (column `j` of
/// the result is eigenvector `j`).
fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = alpha.len();
    let mut d = alpha.to_vec();
    let mut e = vec![0.0; n];
    e[..n - 1].copy_from_slice(&beta[..n - 1]);
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    tridiagonal_ql(&mut d, &mut e, &mut z)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    let vals = order.iter().map(|&j| d[j]).collect();
    let mut vecs = vec![0.0; n * n];
    for row in 0..n {
        for (newj, &j) in order.iter().enumerate() {
            vecs[row * n + newj] = z[row * n + j];
        }
    }
    Ok((vals, vecs))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two passes of classical Gram–Schmidt against `basis` and `deflate`.
fn reorthogonalize(w: &mut [f64], basis: &[Vec<f64>], deflate: &[&[f64]]) {
    for _ in 0..2 {
        for q in deflate {
            let h = dot(q, w);
            axpy(-h, q, w);
        }
        let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, w)).collect();
        for (q, h) in basis.iter().zip(coeffs) {
            axpy(-h, q, w);
        }
    }
}

fn random_unit_vector(
    rng: &mut ChaCha8Rng,
    n: usize,
    basis: &[Vec<f64>],
    deflate: &[&[f64]],
) -> Option<Vec<f64>> {
    for _ in 0..5 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let before = norm(&v);
        reorthogonalize(&mut v, basis, deflate);
        let after = norm(&v);
        if after > 1e-8 * before {
            v.iter_mut().for_each(|x| *x /= after);
            return Some(v);
        }
    }
    None
}

/// The `k` algebraically smallest eigenpairs of `op`.
pub fn lanczos_smallest(op: &SparseSymmetricMatrix, k: usize, opts: &LanczosOptions) -> Result<EigenBand> {
    lanczos_smallest_deflated(op, k, &[], opts)
}

/// The `k` smallest eigenpairs of `op` restricted to the orthogonal
/// complement of the orthonormal vectors `deflate`.
///
/// Lanczos with full (twice repeated) reorthogonalization. On breakdown the
/// recursion restarts from a fresh random vector orthogonal to everything
/// found so far, so repeated eigenvalues are recovered as well.
pub fn lanczos_smallest_deflated(
    op: &SparseSymmetricMatrix,
    k: usize,
    deflate: &[&[f64]],
    opts: &LanczosOptions,
) -> Result<EigenBand> {
    let n = op.dim();
    let space = n.saturating_sub(deflate.len());
    if k > space {
        return Err(Error::InvalidInput(format!(
            "asked for {k} eigenpairs in a space of dimension {space}"
        )));
    }
    if k == 0 {
        return Ok(EigenBand {
            n,
            eigenvalues: Vec::new(),
            vectors: Vec::new(),
            residuals: Vec::new(),
        });
    }
    let anorm = op.norm_bound().max(f64::MIN_POSITIVE);
    let max_iter = opts.max_iter.unwrap_or(300.max(30 * k)).max(k).min(space);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_iter.min(4096));
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut q = random_unit_vector(&mut rng, n, &[], deflate)
        .ok_or_else(|| Error::Linalg("could not draw a start vector".into()))?;
    let mut w = vec![0.0; n];
    let mut next_check = k.max(10);
    let mut residuals = vec![f64::INFINITY; k];
    loop {
        op.matvec_into(opts.execution, &q, &mut w);
        let a = dot(&q, &w);
        axpy(-a, &q, &mut w);
        if let (Some(prev), Some(&b)) = (basis.last(), beta.last()) {
            axpy(-b, prev, &mut w);
        }
        basis.push(std::mem::take(&mut q));
        alpha.push(a);
        reorthogonalize(&mut w, &basis, deflate);
        let b = norm(&w);
        let j = basis.len();
        let exhausted = j >= space;
        let broke = b <= 1e-10 * anorm;
        beta.push(if broke { 0.0 } else { b });
        // A breakdown closes an invariant subspace whose Ritz pairs are all
        // exact; keep going so eigenvalues outside it are not missed.
        let must_check = exhausted || j >= max_iter;
        if j >= k && (must_check || (!broke && j >= next_check)) {
            let pairs = tridiagonal_last_components(&alpha, &beta)?;
            let bj = *beta.last().unwrap();
            for (r, &(_, s)) in residuals.iter_mut().zip(&pairs) {
                *r = (bj * s).abs();
            }
            if exhausted || residuals.iter().all(|&r| r <= opts.tol * anorm) {
                break;
            }
            if j >= max_iter {
                return Err(Error::NoConvergence {
                    node: None,
                    residuals: residuals.iter().map(|r| r / anorm).collect(),
                });
            }
            next_check = j + 10.max(j / 10);
        }
        if exhausted {
            break;
        }
        q = if broke {
            match random_unit_vector(&mut rng, n, &basis, deflate) {
                Some(v) => v,
                None => break,
            }
        } else {
            w.iter().map(|x| x / b).collect()
        };
    }
    let j = basis.len();
    let (vals, s) = tridiagonal_eigen(&alpha, &beta)?;
    let k = k.min(j);
    let mut vectors = vec![0.0; n * k];
    for (i, qi) in basis.iter().enumerate() {
        for c in 0..k {
            axpy(s[i * j + c], qi, &mut vectors[c * n..(c + 1) * n]);
        }
    }
    let mut true_res = Vec::with_capacity(k);
    let mut av = vec![0.0; n];
    for c in 0..k {
        let v = &vectors[c * n..(c + 1) * n];
        op.matvec_into(opts.execution, v, &mut av);
        axpy(-vals[c], v, &mut av);
        true_res.push(norm(&av));
    }
    Ok(EigenBand {
        n,
        eigenvalues: vals[..k].to_vec(),
        vectors,
        residuals: true_res,
    })
}

/// Unit-norm eigenvector for the second-smallest eigenvalue of a connected
/// graph Laplacian, sign fixed so its first nonzero entry is positive.
pub fn fiedler_vector(laplacian: &SparseSymmetricMatrix, opts: &LanczosOptions) -> Result<Vec<f64>> {
    let n = laplacian.dim();
    if n < 2 {
        return Err(Error::InvalidInput("a Fiedler vector needs at least two vertices".into()));
    }
    if laplacian.connected_components().len() > 1 {
        return Err(Error::Domain("graph is disconnected".into()));
    }
    let ones = vec![1.0 / (n as f64).sqrt(); n];
    let band = lanczos_smallest_deflated(laplacian, 1, &[&ones], opts)?;
    let mut v = band.vector(0).to_vec();
    let nv = norm(&v);
    let big = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-10 * big) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v.iter_mut().for_each(|x| *x /= nv);
    Ok(v)
}

/// Eigenpairs computed band by band, each band deflated against all
/// earlier ones, exposed as a column source for the butterfly.
pub struct BandedEigenProvider {
    pub eigen: EigenBand,
    /// Per-band `(start, len)` in the global eigenvalue ordering.
    pub bands: Vec<(usize, usize)>,
    /// Near-degenerate band boundaries (resolved by global index).
    pub warnings: Vec<String>,
    row_scale: Option<Vec<f64>>,
}

impl BandedEigenProvider {
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigen.eigenvalues
    }

    /// Multiply row `j` of every provided column by `scale[j]`, e.g.
    /// `D^{−1/2}` to turn standard eigenvectors into eigenmaps functions.
    pub fn with_row_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.eigen.n {
            return Err(Error::Shape("row scale length differs from vector length".into()));
        }
        self.row_scale = Some(scale);
        Ok(self)
    }

    /// The full `n × m` matrix the provider streams.
    pub fn materialize(&mut self) -> Result<DenseMatrix> {
        let m = self.eigen.len();
        self.band(&(0..m).collect::<Vec<_>>())
    }
}

impl ColumnBandProvider for BandedEigenProvider {
    fn rows(&self) -> usize {
        self.eigen.n
    }

    fn cols(&self) -> usize {
        self.eigen.len()
    }

    fn band(&mut self, columns: &[usize]) -> Result<DenseMatrix> {
        let n = self.eigen.n;
        let mut data = Vec::with_capacity(n * columns.len());
        for &c in columns {
            if c >= self.eigen.len() {
                return Err(Error::Stream(format!(
                    "column {c} requested from a provider with {} columns",
                    self.eigen.len()
                )));
            }
            let v = self.eigen.vector(c);
            match &self.row_scale {
                Some(s) => data.extend(v.iter().zip(s).map(|(x, s)| C64::new(x * s, 0.0))),
                None => data.extend(v.iter().map(|&x| C64::new(x, 0.0))),
            }
        }
        Ok(DenseMatrix::from_raw(n, columns.len(), data))
    }
}

/// Computes the `m` smallest eigenpairs of `op` in consecutive bands of at
/// most `band_size`, deflating each band solve against the vectors already
/// accepted. Bands therefore never overlap; eigenvalues straddling a band
/// boundary within `1e−8` relative are accepted by global index and noted.
pub fn banded_eigen_provider(
    op: &SparseSymmetricMatrix,
    m: usize,
    band_size: usize,
    opts: &LanczosOptions,
) -> Result<BandedEigenProvider> {
    let n = op.dim();
    if m > n {
        return Err(Error::InvalidInput(format!("{m} eigenpairs requested for n = {n}")));
    }
    let band_size = band_size.max(1);
    let mut eigen = EigenBand {
        n,
        eigenvalues: Vec::with_capacity(m),
        vectors: Vec::with_capacity(n * m),
        residuals: Vec::with_capacity(m),
    };
    let mut bands = Vec::new();
    let mut warnings = Vec::new();
    let scale = op.norm_bound().max(f64::MIN_POSITIVE);
    while eigen.len() < m {
        let start = eigen.len();
        let len = band_size.min(m - start);
        let deflate: Vec<&[f64]> = (0..start).map(|j| eigen.vector(j)).collect();
        let mut bopts = opts.clone();
        bopts.seed = opts.seed.wrapping_add(start as u64);
        let band = lanczos_smallest_deflated(op, len, &deflate, &bopts)?;
        drop(deflate);
        if let (Some(&prev), Some(&first)) = (eigen.eigenvalues.last(), band.eigenvalues.first()) {
            if (first - prev).abs() <= 1e-8 * scale {
                warnings.push(format!(
                    "eigenvalues {} and {} at a band boundary differ by {:.3e}",
                    start - 1,
                    start,
                    first - prev
                ));
            }
        }
        eigen.eigenvalues.extend_from_slice(&band.eigenvalues);
        eigen.vectors.extend_from_slice(&band.vectors);
        eigen.residuals.extend_from_slice(&band.residuals);
        bands.push((start, len));
    }
    // Deflated solves are only ordered within a band; restore global order.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]).then(a.cmp(&b)));
    if order.iter().enumerate().any(|(i, &j)| i != j) {
        warnings.push("band solves returned out-of-order eigenvalues; reordered globally".into());
        let ev = order.iter().map(|&j| eigen.eigenvalues[j]).collect();
        let res = order.iter().map(|&j| eigen.residuals[j]).collect();
        let mut vecs = Vec::with_capacity(n * m);
        for &j in &order {
            vecs.extend_from_slice(eigen.vector(j));
        }
        eigen.eigenvalues = ev;
        eigen.residuals = res;
        eigen.vectors = vecs;
    }
    Ok(BandedEigenProvider {
        eigen,
        bands,
        warnings,
        row_scale: None,
    })
}

/// Dense symmetric eigendecomposition of a small sparse matrix, for tests
/// and small oracles. Eigenvalues ascending.
pub fn dense_symmetric_eigen(op: &SparseSymmetricMatrix) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::parallel::init_dense_kernels();
    let n = op.dim();
    let d = op.to_dense();
    let m = faer::MatRef::from_column_major_slice(&d, n, n);
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Linalg(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let u = evd.U();
    let vals = (0..n).map(|i| s[i]).collect();
    let mut vecs = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            vecs.push(u[(i, j)]);
        }
    }
    Ok((vals, vecs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn dirichlet_laplacian(n: usize) -> SparseSymmetricMatrix {
        let mut t: Vec<_> = (0..n).map(|i| (i, i, 2.0)).collect();
        t.extend((1..n).map(|i| (i - 1, i, -1.0)));
        SparseSymmetricMatrix::from_triplets(n, &t).unwrap()
    }

    fn random_cloud(n: usize, dim: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(dim, (0..n * dim).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn heat_kernel_trivial_cases() {
        let pc = PointCloud::from_points(&[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let k = heat_kernel_graph(&pc, 1.0, 0.5, Execution::Sequential).unwrap();
        assert_eq!(k.get(0, 1), 1.0);
        assert_eq!(k.get(0, 0), 1.0);
        let far = PointCloud::from_points(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let k = heat_kernel_graph(&far, 0.1, (-10.0f64).exp(), Execution::Sequential).unwrap();
        assert_eq!(k.nnz(), 2);
        assert!(heat_kernel_graph(&far, 0.0, 0.5, Execution::Sequential).is_err());
    }

    #[test]
    fn heat_kernel_matches_brute_force() {
        for (dim, seed) in [(2, 1), (3, 2)] {
            let pc = random_cloud(1000, dim, seed);
            let (t, _) = calibrate_heat_scale(&pc);
            let fast = heat_kernel_graph(&pc, t, 1e-4, Execution::Parallel).unwrap();
            let slow = heat_kernel_graph_brute_force(&pc, t, 1e-4).unwrap();
            assert_eq!(fast, slow);
            assert_eq!(fast.asymmetry(), 0.0);
        }
    }

    #[test]
    fn eigenmaps_operator_cases() {
        let (op, d) = eigenmaps_operator(&complete_graph(4)).unwrap();
        assert_eq!(d, vec![3.0; 4]);
        let (vals, vecs) = dense_symmetric_eigen(&op).unwrap();
        assert!(vals[0].abs() < 1e-14);
        for v in &vals[1..] {
            assert!((v - 4.0 / 3.0).abs() < 1e-14);
        }
        // D^{1/2}1 is constant here
        let v0: Vec<f64> = vecs[..4].to_vec();
        assert!(v0.iter().all(|x| (x.abs() - 0.5).abs() < 1e-12));

        let diag = SparseSymmetricMatrix::from_triplets(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)])
            .unwrap();
        let (op, _) = eigenmaps_operator(&diag).unwrap();
        assert!(op.vals.iter().all(|&v| v == 0.0));

        let isolated = SparseSymmetricMatrix::from_triplets(3, &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(
            eigenmaps_operator(&isolated),
            Err(Error::IsolatedVertex { vertex: 2 })
        ));

        let pc = random_cloud(300, 3, 5);
        let k = heat_kernel_graph(&pc, 0.01, 1e-4, Execution::Sequential).unwrap();
        let (op, _) = eigenmaps_operator(&k).unwrap();
        assert!(op.asymmetry() <= 1e-14);
    }

    #[test]
    fn laplacian_row_sums_vanish() {
        let pc = random_cloud(500, 2, 7);
        let k = heat_kernel_graph(&pc, 0.005, 1e-5, Execution::Sequential).unwrap();
        let l = k.laplacian();
        let sums = l.row_sums();
        let diag = l.diagonal();
        for (s, d) in sums.iter().zip(diag) {
            assert!(s.abs() <= 1e-12 * d.max(1.0));
        }
    }

    #[test]
    fn lanczos_dirichlet_closed_form() {
        let band = lanczos_smallest(&dirichlet_laplacian(32), 3, &LanczosOptions::default()).unwrap();
        for (j, &l) in band.eigenvalues.iter().enumerate() {
            let exact = 4.0 * ((j + 1) as f64 * std::f64::consts::PI / 66.0).sin().powi(2);
            assert!((l - exact).abs() < 1e-10, "{l} vs {exact}");
        }
        assert!(band.orthonormality_error() < 1e-12);
    }

    #[test]
    fn lanczos_full_spectrum_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Vec::new();
        for i in 0..8 {
            for j in i..8 {
                if i == j || rng.random::<f64>() < 0.4 {
                    t.push((i, j, rng.random::<f64>() - 0.5));
                }
            }
        }
        let a = SparseSymmetricMatrix::from_triplets(8, &t).unwrap();
        let band = lanczos_smallest(&a, 8, &LanczosOptions::default()).unwrap();
        let (vals, _) = dense_symmetric_eigen(&a).unwrap();
        for (x, y) in band.eigenvalues.iter().zip(&vals) {
            assert!((x - y).abs() < 1e-12);
        }
        let zero = lanczos_smallest(&SparseSymmetricMatrix::zeros(6), 6, &LanczosOptions::default())
            .unwrap();
        assert!(zero.eigenvalues.iter().all(|&v| v == 0.0));
        assert!(zero.orthonormality_error() < 1e-12);
    }

    #[test]
    fn lanczos_recovers_repeated_eigenvalues() {
        // cycle spectrum 2 − 2cos(2πj/n) has double eigenvalues
        let band = lanczos_smallest(&cycle_graph(12).laplacian(), 5, &LanczosOptions::default()).unwrap();
        let (vals, _) = dense_symmetric_eigen(&cycle_graph(12).laplacian()).unwrap();
        for (x, y) in band.eigenvalues.iter().zip(&vals) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn lanczos_reports_non_convergence() {
        let opts = LanczosOptions {
            max_iter: Some(12),
            tol: 1e-14,
            ..Default::default()
        };
        let err = lanczos_smallest(&dirichlet_laplacian(400), 3, &opts).unwrap_err();
        match err {
            Error::NoConvergence { residuals, .. } => assert_eq!(residuals.len(), 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tridiagonal_ql_matches_dense() {
        let alpha = [1.0, -2.0, 3.5, 0.25, 4.0];
        let beta = [0.5, 1.5, -0.7, 2.0, 0.0];
        let (vals, vecs) = tridiagonal_eigen(&alpha, &beta).unwrap();
        let mut t = Vec::new();
        for i in 0..5 {
            t.push((i, i, alpha[i]));
            if i < 4 {
                t.push((i, i + 1, beta[i]));
            }
        }
        let (dense, _) = dense_symmetric_eigen(&SparseSymmetricMatrix::from_triplets(5, &t).unwrap())
            .unwrap();
        for (a, b) in vals.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-13);
        }
        let last = tridiagonal_last_components(&alpha, &beta).unwrap();
        for j in 0..5 {
            assert!((last[j].1.abs() - vecs[4 * 5 + j].abs()).abs() < 1e-13);
        }
    }

    #[test]
    fn fiedler_vector_cases() {
        let v = fiedler_vector(&path_graph(4).laplacian(), &LanczosOptions::default()).unwrap();
        let signs: Vec<bool> = v.iter().map(|&x| x > 0.0).collect();
        assert_eq!(signs, vec![true, true, false, false]);

        let v = fiedler_vector(&path_graph(2).laplacian(), &LanczosOptions::default()).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((v[0] - h).abs() < 1e-14 && (v[1] + h).abs() < 1e-14);

        let v = fiedler_vector(&cycle_graph(4).laplacian(), &LanczosOptions::default()).unwrap();
        assert!(v.iter().sum::<f64>().abs() < 1e-12);
        assert!((norm(&v) - 1.0).abs() < 1e-12);

        let split = SparseSymmetricMatrix::from_triplets(4, &[(0, 1, 1.0), (2, 3, 1.0)]).unwrap();
        assert!(fiedler_vector(&split.laplacian(), &LanczosOptions::default()).is_err());
    }

    #[test]
    fn fiedler_vector_of_path_is_monotone_like_dense() {
        let lap = path_graph(8).laplacian();
        let v = fiedler_vector(&lap, &LanczosOptions::default()).unwrap();
        let (_, vecs) = dense_symmetric_eigen(&lap).unwrap();
        let dense = &vecs[8..16];
        let s = dot(&v, dense).signum();
        for (a, b) in v.iter().zip(dense) {
            assert!((a - s * b).abs() < 1e-9);
        }
        assert!(v.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn banded_provider_matches_single_solve() {
        let pc = random_cloud(400, 2, 11);
        let k = heat_kernel_graph(&pc, 0.004, 1e-6, Execution::Sequential).unwrap();
        let (op, _) = eigenmaps_operator(&k).unwrap();
        let single = lanczos_smallest(&op, 30, &LanczosOptions::default()).unwrap();
        let banded = banded_eigen_provider(&op, 30, 8, &LanczosOptions::default()).unwrap();
        assert_eq!(banded.bands.len(), 4);
        for (a, b) in banded.eigenvalues().iter().zip(&single.eigenvalues) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(banded.eigen.orthonormality_error() < 1e-8);
        let mut start = 0;
        for &(s, l) in &banded.bands {
            assert_eq!(s, start);
            start += l;
        }
        assert!(banded.eigenvalues().windows(2).all(|w| w[0] <= w[1]));

        let whole = banded_eigen_provider(&op, 30, 30, &LanczosOptions::default()).unwrap();
        assert_eq!(whole.eigen.eigenvalues, single.eigenvalues);
    }

    #[test]
    fn matrix_market_round_trip() {
        let g = torus_grid_graph(4).laplacian();
        let mut buf = Vec::new();
        g.write_matrix_market(&mut buf).unwrap();
        let back = SparseSymmetricMatrix::read_matrix_market(&buf[..]).unwrap();
        assert_eq!(g, back);
        let general = "%%MatrixMarket matrix coordinate real general\n2 2 2\n1 2 1.0\n2 1 2.0\n";
        assert!(SparseSymmetricMatrix::read_matrix_market(general.as_bytes()).is_err());
    }

    #[test]
    fn eigen_band_binary_round_trip() {
        let band = lanczos_smallest(&dirichlet_laplacian(10), 3, &LanczosOptions::default()).unwrap();
        let mut buf = Vec::new();
        band.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * (3 + 30));
        let back = EigenBand::read_binary(&buf[..]).unwrap();
        assert_eq!(back.eigenvalues, band.eigenvalues);
        assert_eq!(back.vectors, band.vectors);
    }

    #[test]
    fn torus_grid_graph_is_four_regular() {
        let g = torus_grid_graph(5);
        assert!(g.row_sums().iter().all(|&s| s == 4.0));
        assert_eq!(g.connected_components().len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn heat_kernel_equals_brute_force(n in 2usize..200, seed in any::<u64>(), t in 0.001f64..0.1) {
            let pc = random_cloud(n, 2, seed);
            let fast = heat_kernel_graph(&pc, t, 1e-3, Execution::Sequential).unwrap();
            let slow = heat_kernel_graph_brute_force(&pc, t, 1e-3).unwrap();
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn lanczos_band_invariants(n in 10usize..80, seed in any::<u64>(), k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Vec::new();
            for i in 0..n {
                t.push((i, i, rng.random::<f64>()));
                for _ in 0..3 {
                    let j = rng.random_range(0..n);
                    t.push((i, j, rng.random::<f64>() - 0.5));
                }
            }
            let a = SparseSymmetricMatrix::from_triplets(n, &t).unwrap();
            let band = lanczos_smallest(&a, k, &LanczosOptions::default()).unwrap();
            prop_assert!(band.orthonormality_error() <= 1e-8);
            let anorm = a.norm_bound();
            for r in &band.residuals {
                prop_assert!(*r <= 1e-8 * anorm);
            }
            prop_assert!(band.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
