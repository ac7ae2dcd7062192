//! Index trees over matrix rows (space) and columns (frequency).
//!
//! Trees are complete: level `d` holds exactly `arity^d` nodes in positional
//! order and the children of position `k` sit at `arity·k .. arity·k + arity`.
//! Every node stores a sorted list of indices. Empty nodes are kept so that
//! positions stay meaningful, and all leaves share the same depth.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{fiedler_vector, LanczosOptions, SparseSymmetricMatrix};
use crate::parallel::{join, Execution};

/// Finite points in two or three dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return Err(Error::InvalidInput(format!("points must be 2D or 3D, got {dim}")));
        }
        if coords.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not form {dim}-dimensional points",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "point {} has a non-finite coordinate",
                i / dim
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points<const D: usize>(points: &[[f64; D]]) -> Result<Self> {
        Self::new(D, points.iter().flatten().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn subset(&self, idx: &[usize]) -> Result<PointCloud> {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        for &j in idx {
            if j >= self.len() {
                return Err(Error::Index {
                    index: j,
                    len: self.len(),
                });
            }
            coords.extend_from_slice(self.point(j));
        }
        Ok(Self {
            dim: self.dim,
            coords,
        })
    }

    /// `N × N` grid `x = −π + 2π·(i, j)/N`, row-major with the first
    /// coordinate varying fastest.
    pub fn torus_grid(side: usize) -> PointCloud {
        let h = 2.0 * std::f64::consts::PI / side as f64;
        let mut coords = Vec::with_capacity(2 * side * side);
        for j in 0..side {
            for i in 0..side {
                coords.push(-std::f64::consts::PI + h * i as f64);
                coords.push(-std::f64::consts::PI + h * j as f64);
            }
        }
        PointCloud { dim: 2, coords }
    }

    /// One point per line, two or three whitespace- or comma-separated
    /// values. Blank lines and lines starting with `#` are skipped.
    pub fn read_text<R: BufRead>(r: R) -> Result<PointCloud> {
        let mut dim = None;
        let mut coords = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|e| {
                        Error::Format(format!("line {}: bad coordinate {s:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match dim {
                None => dim = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(Error::Format(format!(
                        "line {}: expected {d} coordinates, found {}",
                        lineno + 1,
                        vals.len()
                    )))
                }
                _ => {}
            }
            coords.extend(vals);
        }
        PointCloud::new(dim.unwrap_or(2), coords)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        for j in 0..self.len() {
            let p = self.point(j);
            let line: Vec<String> = p.iter().map(|c| format!("{c:.17e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Complete k-ary tree of sorted index sets.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexTree {
    arity: usize,
    size: usize,
    levels: Vec<Vec<Vec<usize>>>,
    eigenvalues: Option<Vec<f64>>,
}

fn pow(arity: usize, d: usize) -> usize {
    arity.pow(d as u32)
}

impl IndexTree {
    /// Builds a tree from per-level node index sets and checks the
    /// partition and ordering invariants.
    pub fn from_levels(arity: usize, levels: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        if !(arity == 2 || arity == 4) {
            return Err(Error::Config(format!("tree arity must be 2 or 4, got {arity}")));
        }
        let Some(root) = levels.first() else {
            return Err(Error::Config("tree has no levels".into()));
        };
        if root.len() != 1 {
            return Err(Error::Config("level 0 must hold exactly one node".into()));
        }
        let size = root[0].len();
        let tree = Self {
            arity,
            size,
            levels,
            eigenvalues: None,
        };
        tree.validate()?;
        Ok(tree)
    }

    /// A depth-0 tree over `0..n`.
    pub fn single(arity: usize, n: usize) -> Result<Self> {
        Self::from_levels(arity, vec![vec![(0..n).collect()]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels[0][0] != (0..self.size).collect::<Vec<_>>() {
            return Err(Error::Config("root must hold every index in order".into()));
        }
        for d in 1..self.levels.len() {
            if self.levels[d].len() != pow(self.arity, d) {
                return Err(Error::Config(format!(
                    "level {d} has {} nodes, expected {}",
                    self.levels[d].len(),
                    pow(self.arity, d)
                )));
            }
            for (k, parent) in self.levels[d - 1].iter().enumerate() {
                let mut merged: Vec<usize> = Vec::with_capacity(parent.len());
                for c in 0..self.arity {
                    let child = &self.levels[d][self.arity * k + c];
                    if child.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Config(format!(
                            "node ({d}, {}) indices are not strictly increasing",
                            self.arity * k + c
                        )));
                    }
                    merged.extend_from_slice(child);
                }
                merged.sort_unstable();
                if &merged != parent {
                    return Err(Error::Config(format!(
                        "children of node ({}, {k}) do not partition it",
                        d - 1
                    )));
                }
            }
        }
        if let Some(ev) = &self.eigenvalues {
            if ev.len() != self.size {
                return Err(Error::Config("eigenvalue count does not match tree size".into()));
            }
        }
        Ok(())
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// Number of indices at the root.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn level_len(&self, d: usize) -> usize {
        self.levels[d].len()
    }

    pub fn indices(&self, d: usize, pos: usize) -> &[usize] {
        &self.levels[d][pos]
    }

    pub fn level(&self, d: usize) -> &[Vec<usize>] {
        &self.levels[d]
    }

    pub fn leaves(&self) -> &[Vec<usize>] {
        &self.levels[self.depth()]
    }

    pub fn children(&self, pos: usize) -> std::ops::Range<usize> {
        self.arity * pos..self.arity * pos + self.arity
    }

    pub fn parent(&self, pos: usize) -> usize {
        pos / self.arity
    }

    /// Global node id of position `pos` on level `d` (breadth-first).
    pub fn node_id(&self, d: usize, pos: usize) -> usize {
        (pow(self.arity, d) - 1) / (self.arity - 1) + pos
    }

    /// Inverse of [`IndexTree::node_id`].
    pub fn node_position(&self, id: usize) -> Option<(usize, usize)> {
        let mut offset = 0;
        for d in 0..=self.depth() {
            let len = pow(self.arity, d);
            if id < offset + len {
                return Some((d, id - offset));
            }
            offset += len;
        }
        None
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Where the indices of node `(d, pos)` sit inside its parent's list.
    pub fn positions_in_parent(&self, d: usize, pos: usize) -> Vec<usize> {
        assert!(d > 0, "the root has no parent");
        let parent = &self.levels[d - 1][self.parent(pos)];
        let mut out = Vec::with_capacity(self.levels[d][pos].len());
        let mut j = 0;
        for &i in &self.levels[d][pos] {
            while parent[j] != i {
                j += 1;
            }
            out.push(j);
        }
        out
    }

    /// Eigenvalues the tree was built from, if it is a frequency tree.
    pub fn eigenvalues(&self) -> Option<&[f64]> {
        self.eigenvalues.as_deref()
    }

    pub fn with_eigenvalues(mut self, eigenvalues: Vec<f64>) -> Result<Self> {
        self.eigenvalues = Some(eigenvalues);
        self.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut nodes = Vec::with_capacity(self.node_count());
        for d in 0..=self.depth() {
            for (pos, idx) in self.levels[d].iter().enumerate() {
                let contiguous = idx.windows(2).all(|w| w[1] == w[0] + 1);
                let (range, indices) = if contiguous {
                    let start = idx.first().copied().unwrap_or(0);
                    (Some([start, start + idx.len()]), None)
                } else {
                    (None, Some(idx.clone()))
                };
                nodes.push(NodeJson {
                    id: self.node_id(d, pos),
                    parent: (d > 0).then(|| self.node_id(d - 1, self.parent(pos))),
                    children: if d < self.depth() {
                        self.children(pos).map(|c| self.node_id(d + 1, c)).collect()
                    } else {
                        Vec::new()
                    },
                    range,
                    indices,
                });
            }
        }
        Ok(serde_json::to_string(&TreeJson {
            arity: self.arity,
            depth: self.depth(),
            nodes,
            eigenvalues: self.eigenvalues.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: TreeJson = serde_json::from_str(s)?;
        if !(j.arity == 2 || j.arity == 4) {
            return Err(Error::Format(format!("bad arity {}", j.arity)));
        }
        let mut levels: Vec<Vec<Vec<usize>>> =
            (0..=j.depth).map(|d| vec![Vec::new(); pow(j.arity, d)]).collect();
        let total: usize = levels.iter().map(Vec::len).sum();
        if j.nodes.len() != total {
            return Err(Error::Format(format!(
                "expected {total} nodes, found {}",
                j.nodes.len()
            )));
        }
        let probe = Self {
            arity: j.arity,
            size: 0,
            levels: levels.clone(),
            eigenvalues: None,
        };
        for node in j.nodes {
            let (d, pos) = probe
                .node_position(node.id)
                .ok_or_else(|| Error::Format(format!("node id {} out of range", node.id)))?;
            let expected_parent = (d > 0).then(|| probe.node_id(d - 1, probe.parent(pos)));
            if node.parent != expected_parent {
                return Err(Error::Format(format!("node {} has the wrong parent", node.id)));
            }
            levels[d][pos] = match (node.range, node.indices) {
                (Some([a, b]), None) if a <= b => (a..b).collect(),
                (None, Some(v)) => v,
                _ => {
                    return Err(Error::Format(format!(
                        "node {} needs exactly one of range or indices",
                        node.id
                    )))
                }
            };
        }
        let tree = Self::from_levels(j.arity, levels)?;
        match j.eigenvalues {
            Some(ev) => tree.with_eigenvalues(ev),
            None => Ok(tree),
        }
        .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    arity: usize,
    depth: usize,
    nodes: Vec<NodeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: usize,
    parent: Option<usize>,
    children: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    indices: Option<Vec<usize>>,
}

/// Tree over eigenvalue indices; level `d` splits `[0, λ_max]` into
/// `arity^d` equal intervals, the last one closed.
pub fn build_frequency_tree(eigenvalues: &[f64], arity: usize, depth: usize) -> Result<IndexTree> {
    if eigenvalues.is_empty() {
        return Err(Error::InvalidInput("no eigenvalues".into()));
    }
    if eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidInput("eigenvalues must be finite and nonnegative".into()));
    }
    if eigenvalues.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("eigenvalues must be sorted ascending".into()));
    }
    if !(arity == 2 || arity == 4) {
        return Err(Error::Config(format!("tree arity must be 2 or 4, got {arity}")));
    }
    let lmax = *eigenvalues.last().unwrap();
    let nleaf = pow(arity, depth);
    let bucket: Vec<usize> = eigenvalues
        .iter()
        .map(|&l| {
            if lmax > 0.0 {
                ((l / lmax * nleaf as f64).floor() as usize).min(nleaf - 1)
            } else {
                0
            }
        })
        .collect();
    let levels = (0..=depth)
        .map(|d| {
            let div = pow(arity, depth - d);
            let mut nodes = vec![Vec::new(); pow(arity, d)];
            for (i, &b) in bucket.iter().enumerate() {
                nodes[b / div].push(i);
            }
            nodes
        })
        .collect();
    IndexTree::from_levels(arity, levels)?.with_eigenvalues(eigenvalues.to_vec())
}

const QUADTREE_SLACK: f64 = 1e-12;

/// Midpoint quadtree on `[−π, π]²`. Child order within a box is
/// (low x, low y), (high x, low y), (low x, high y), (high x, high y).
pub fn build_quadtree(points: &PointCloud, depth: usize) -> Result<IndexTree> {
    use std::f64::consts::PI;
    if points.dim() != 2 {
        return Err(Error::InvalidInput("a quadtree needs 2D points".into()));
    }
    if depth > 30 {
        return Err(Error::Config(format!("quadtree depth {depth} is too large")));
    }
    let side = 1usize << depth;
    let cell = |x: f64| -> usize {
        let t = (x + PI) / (2.0 * PI) * side as f64;
        let snapped = if (t - t.round()).abs() < 1e-9 { t.round() } else { t.floor() };
        (snapped.max(0.0) as usize).min(side - 1)
    };
    let mut codes = Vec::with_capacity(points.len());
    for j in 0..points.len() {
        let p = points.point(j);
        if p.iter().any(|&x| x < -PI - QUADTREE_SLACK || x > PI + QUADTREE_SLACK) {
            return Err(Error::InvalidInput(format!(
                "point {j} = ({}, {}) lies outside [-pi, pi]^2",
                p[0], p[1]
            )));
        }
        let (ix, iy) = (cell(p[0]), cell(p[1]));
        let mut code = 0usize;
        for b in (0..depth).rev() {
            code = 4 * code + 2 * ((iy >> b) & 1) + ((ix >> b) & 1);
        }
        codes.push(code);
    }
    let levels = (0..=depth)
        .map(|d| {
            let shift = 2 * (depth - d);
            let mut nodes = vec![Vec::new(); pow(4, d)];
            for (j, &c) in codes.iter().enumerate() {
                nodes[c >> shift].push(j);
            }
            nodes
        })
        .collect();
    IndexTree::from_levels(4, levels)
}

/// How one Fiedler-tree node was split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMethod {
    /// Sign of the Fiedler vector.
    Fiedler,
    /// The node's subgraph was disconnected; components were balanced greedily.
    Components,
    /// The sign split left one side empty; split at the median value instead.
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub depth: usize,
    pub position: usize,
    pub size: usize,
    pub child_sizes: [usize; 2],
    pub fractions: [f64; 2],
    pub method: SplitMethod,
}

/// Build report for a Fiedler tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiedlerReport {
    pub depth: usize,
    pub max_leaf_size: usize,
    /// Child-fraction window a split must fall in to count as balanced.
    pub balance_window: [f64; 2],
    pub splits: Vec<SplitRecord>,
}

impl FiedlerReport {
    pub fn unbalanced(&self) -> Vec<&SplitRecord> {
        let [lo, hi] = self.balance_window;
        self.splits
            .iter()
            .filter(|s| s.fractions.iter().any(|&f| f < lo || f > hi))
            .collect()
    }

    pub fn flagged(&self) -> Vec<&SplitRecord> {
        self.splits
            .iter()
            .filter(|s| s.method != SplitMethod::Fiedler)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct FiedlerTreeOptions {
    pub max_leaf_size: usize,
    pub lanczos: LanczosOptions,
    pub execution: Execution,
    pub balance_window: [f64; 2],
}

impl Default for FiedlerTreeOptions {
    fn default() -> Self {
        Self {
            max_leaf_size: 256,
            lanczos: LanczosOptions::default(),
            execution: Execution::default(),
            balance_window: [0.35, 0.65],
        }
    }
}

enum Split {
    Leaf(Vec<usize>),
    Node {
        vertices: Vec<usize>,
        method: SplitMethod,
        children: Box<[Split; 2]>,
    },
}

impl Split {
    fn height(&self) -> usize {
        match self {
            Split::Leaf(_) => 0,
            Split::Node { children, .. } => 1 + children[0].height().max(children[1].height()),
        }
    }
}

fn vertex_seed(base: u64, vertices: &[usize]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15 ^ (vertices.len() as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    for &v in vertices.iter().take(8) {
        h = (h ^ v as u64).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn split_node(
    adjacency: &SparseSymmetricMatrix,
    vertices: Vec<usize>,
    opts: &FiedlerTreeOptions,
) -> Result<Split> {
    if vertices.len() <= opts.max_leaf_size.max(1) {
        return Ok(Split::Leaf(vertices));
    }
    let sub = adjacency.restrict(&vertices)?;
    let components = sub.connected_components();
    let (first, second, method) = if components.len() > 1 {
        let mut comps = components;
        comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for c in comps {
            if a.len() <= b.len() {
                a.extend(c);
            } else {
                b.extend(c);
            }
        }
        (a, b, SplitMethod::Components)
    } else {
        let lap = sub.laplacian();
        let mut lopts = opts.lanczos.clone();
        lopts.seed = vertex_seed(opts.lanczos.seed, &vertices);
        let phi = fiedler_vector(&lap, &lopts)?;
        let (a, b): (Vec<usize>, Vec<usize>) = (0..phi.len()).partition(|&i| phi[i] >= 0.0);
        if a.is_empty() || b.is_empty() {
            let mut order: Vec<usize> = (0..phi.len()).collect();
            order.sort_by(|&i, &j| phi[j].total_cmp(&phi[i]).then(i.cmp(&j)));
            let half = order.len().div_ceil(2);
            let (a, b) = order.split_at(half);
            (a.to_vec(), b.to_vec(), SplitMethod::Median)
        } else {
            (a, b, SplitMethod::Fiedler)
        }
    };
    let global = |local: &[usize]| {
        let mut g: Vec<usize> = local.iter().map(|&i| vertices[i]).collect();
        g.sort_unstable();
        g
    };
    let (ga, gb) = (global(&first), global(&second));
    let (left, right) = join(
        opts.execution,
        || split_node(adjacency, ga, opts),
        || split_node(adjacency, gb, opts),
    );
    Ok(Split::Node {
        vertices,
        method,
        children: Box::new([left?, right?]),
    })
}

/// Recursive spectral bisection of a graph given by its weighted adjacency
/// matrix (diagonal entries are ignored).
///
/// Each node with more than `max_leaf_size` vertices is split by the sign of
/// the Fiedler vector of its induced-subgraph Laplacian; nonnegative entries
/// form the first child. Shallow leaves are then padded with
/// `(same set, empty)` children so all leaves share one depth.
pub fn build_fiedler_tree(
    adjacency: &SparseSymmetricMatrix,
    opts: &FiedlerTreeOptions,
) -> Result<(IndexTree, FiedlerReport)> {
    let n = adjacency.dim();
    if n == 0 {
        return Err(Error::InvalidInput("graph has no vertices".into()));
    }
    let root = split_node(adjacency, (0..n).collect(), opts)?;
    let depth = root.height();
    let mut report = FiedlerReport {
        depth,
        max_leaf_size: opts.max_leaf_size,
        balance_window: opts.balance_window,
        splits: Vec::new(),
    };
    let mut levels: Vec<Vec<Vec<usize>>> = Vec::with_capacity(depth + 1);
    let mut current: Vec<Option<&Split>> = vec![Some(&root)];
    for d in 0..=depth {
        let mut sets = Vec::with_capacity(current.len());
        let mut next = Vec::with_capacity(2 * current.len());
        for (pos, node) in current.iter().enumerate() {
            match node {
                Some(Split::Leaf(v)) => {
                    sets.push(v.clone());
                    next.push(*node);
                    next.push(None);
                }
                Some(Split::Node {
                    vertices,
                    method,
                    children,
                }) => {
                    sets.push(vertices.clone());
                    let sizes = [children_len(&children[0]), children_len(&children[1])];
                    let total = vertices.len() as f64;
                    report.splits.push(SplitRecord {
                        depth: d,
                        position: pos,
                        size: vertices.len(),
                        child_sizes: sizes,
                        fractions: [sizes[0] as f64 / total, sizes[1] as f64 / total],
                        method: *method,
                    });
                    next.push(Some(&children[0]));
                    next.push(Some(&children[1]));
                }
                None => {
                    sets.push(Vec::new());
                    next.push(None);
                    next.push(None);
                }
            }
        }
        levels.push(sets);
        current = next;
    }
    Ok((IndexTree::from_levels(2, levels)?, report))
}

fn children_len(s: &Split) -> usize {
    match s {
        Split::Leaf(v) => v.len(),
        Split::Node { vertices, .. } => vertices.len(),
    }
}

/// Smallest `L` such that `count / arity^L ≤ leaf_size`.
pub fn depth_for(count: usize, arity: usize, leaf_size: usize) -> usize {
    let leaf_size = leaf_size.max(1);
    let mut d = 0;
    while count.div_ceil(pow(arity, d)) > leaf_size {
        d += 1;
    }
    d
}

pub const DEFAULT_SPACE_LEAF: usize = 256;
pub const DEFAULT_FREQ_LEAF: usize = 64;

/// Default shared depth for a space tree over `n` rows and a frequency tree
/// over `m` columns.
pub fn default_depth(n: usize, space_arity: usize, m: usize, freq_arity: usize) -> usize {
    depth_for(n, space_arity, DEFAULT_SPACE_LEAF).max(depth_for(m, freq_arity, DEFAULT_FREQ_LEAF))
}
