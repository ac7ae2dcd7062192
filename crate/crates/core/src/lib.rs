//! Butterfly-compressed manifold harmonic transforms.
//!
//! A manifold harmonic transform evaluates `f(x_j) = Σ_k c_k φ_k(x_j)` for
//! Laplace–Beltrami eigenfunctions `φ_k` sampled at points `x_j`. The matrix
//! `Φ = [φ_k(x_j)]` is oscillatory but has the complementary low-rank
//! property, so a butterfly factorization over a space tree and a frequency
//! tree stores and applies it in far less than `n·m` work.
//!
//! Module map:
//!
//! * [`matrix`]: dense complex matrices and truncated-SVD factors.
//! * [`tree`]: index trees (frequency intervals, quadtrees, Fiedler trees).
//! * [`graph`]: sparse symmetric matrices, heat-kernel graphs, Lanczos.
//! * [`butterfly`]: standard and streaming factorization, fast apply.
//! * [`torus`]: the closed-form flat-torus basis and a direct oracle.
//! * [`rank`]: Bessel functions, rank bounds and empirical ε-ranks.
//! * [`apps`]: LSQR inversion, spectral filters, Gaussian random fields.

pub mod apps;
pub mod butterfly;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod parallel;
pub mod rank;
pub mod torus;
pub mod tree;

pub use butterfly::{
    bf_apply, bf_apply_adjoint, butterfly_factor, butterfly_factor_streaming, ButterflyFactor,
    ColumnBandProvider, DenseProvider, MemoryReport,
};
pub use error::{Error, Result};
pub use matrix::{low_rank_factor, restrict_rows, stack_columns, DenseMatrix, LowRankFactor, C64};
pub use parallel::Execution;
pub use tree::{IndexTree, PointCloud};
