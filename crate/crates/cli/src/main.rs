use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use bfmht::apps::{filter_geometry, grf_samples, lsqr_solve, GrfModel, LsqrOptions, SpectralDensity};
use bfmht::butterfly::{
    bf_apply_adjoint_with, bf_apply_with, butterfly_factor_streaming_with, memory_report, ButterflyOptions,
};
use bfmht::graph::{
    banded_eigen_provider, calibrate_heat_scale, eigenmaps_operator, heat_kernel_graph, noisy_sphere,
    LanczosOptions, SparseSymmetricMatrix,
};
use bfmht::rank::{complexity_sweep, m_ratio, rank_bound_report, sweep_slope, write_sweep_csv, BoundKind};
use bfmht::torus::{direct_mht, torus_basis, torus_provider};
use bfmht::tree::{build_fiedler_tree, build_frequency_tree, build_quadtree, default_depth, FiedlerTreeOptions};
use bfmht::{ButterflyFactor, Execution, PointCloud, C64};

#[derive(Parser)]
#[command(name = "bfmht", version, about = "Butterfly-compressed manifold harmonic transforms")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "BFMHT_THREADS")]
    threads: Option<usize>,

    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress the torus harmonic matrix and write a .bfc file plus a JSON report.
    Factorize(FactorizeArgs),
    /// Apply a stored factor (or its adjoint) to a coefficient vector.
    Apply(ApplyArgs),
    /// Evaluate the transform directly on selected rows.
    Direct(DirectArgs),
    /// Least-squares inverse transform, or spectral filtering of coordinates.
    Invert(InvertArgs),
    /// Compare rank bounds with empirical ε-ranks over parameter grids.
    RankStudy(RankStudyArgs),
    /// Draw Gaussian random fields from a stored factor.
    GrfSample(GrfArgs),
    /// Laplacian eigenmaps basis of a point cloud or graph, then compress it.
    Eigenmaps(EigenmapsArgs),
    /// Memory-scaling sweep over torus grids.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct Geometry {
    /// Uniform side×side grid on the torus [−π, π)².
    #[arg(long, conflicts_with = "points")]
    grid: Option<usize>,

    /// Point cloud file, 2 coordinates per line in [−π, π).
    #[arg(long)]
    points: Option<PathBuf>,

    /// Number of modes.
    #[arg(long, conflicts_with = "m_ratio")]
    m: Option<usize>,

    /// Modes as ⌈n / ratio⌉.
    #[arg(long)]
    m_ratio: Option<usize>,
}

#[derive(Args)]
struct FactorizeArgs {
    #[command(flatten)]
    geometry: Geometry,

    #[arg(long, default_value_t = 1e-3)]
    eps: f64,

    /// Tree depth; defaults to the level at which leaves hold about m entries.
    #[arg(long)]
    depth: Option<usize>,

    /// Park pending factors in temporary files to cap memory.
    #[arg(long)]
    spill: bool,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    factor: PathBuf,

    /// CSV with `re,im` per line (a lone column is read as real).
    #[arg(long)]
    coeffs: PathBuf,

    /// Apply the adjoint instead.
    #[arg(long)]
    adjoint: bool,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DirectArgs {
    #[command(flatten)]
    geometry: Geometry,

    #[arg(long)]
    coeffs: PathBuf,

    /// Number of random rows (seeded); all rows when omitted.
    #[arg(long)]
    rows: Option<usize>,

    /// Output CSV `row,re,im`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    factor: PathBuf,

    /// Sample values `re,im` per line; writes recovered coefficients.
    #[arg(long, conflicts_with_all = ["coords", "filter"])]
    values: Option<PathBuf>,

    /// 3D coordinates, one point per row of the factor; writes filtered coordinates.
    #[arg(long, requires = "filter")]
    coords: Option<PathBuf>,

    /// Spectral filter, e.g. `lowpass:cut=40` or `bump:l0=5500,eta=200,amp=1,offset=1`.
    #[arg(long)]
    filter: Option<String>,

    #[arg(long, default_value_t = 1e-10)]
    tol: f64,

    #[arg(long, default_value_t = 200)]
    max_iter: usize,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RankStudyArgs {
    /// disk, annulus or bessel.
    #[arg(long)]
    kernel: String,

    /// Bessel orders.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    order: Vec<usize>,

    #[arg(long, value_delimiter = ',', default_value = "1e-3")]
    eps: Vec<f64>,

    /// Inner frequency radii (ignored for disk).
    #[arg(long, value_delimiter = ',', default_value = "0")]
    a: Vec<f64>,

    /// Outer frequency radii.
    #[arg(long, value_delimiter = ',')]
    b: Vec<f64>,

    /// Space radii.
    #[arg(long = "R", value_delimiter = ',', default_value = "1")]
    radius: Vec<f64>,

    #[arg(long, default_value_t = bfmht::rank::DEFAULT_RESOLUTION)]
    resolution: usize,

    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GrfArgs {
    #[arg(long)]
    factor: PathBuf,

    /// `matern:nu=1,ell=0.1,var=1`, `bump:l0=..,eta=..`, `lowpass:cut=..` or `const:value=..`.
    #[arg(long)]
    density: String,

    #[arg(long, default_value_t = 1)]
    samples: usize,

    /// Keep imaginary parts (`re,im` interleaved).
    #[arg(long)]
    complex: bool,

    /// Raw little-endian f64 instead of CSV.
    #[arg(long)]
    binary: bool,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EigenmapsArgs {
    /// Sample a noisy unit sphere with this many points.
    #[arg(long, conflicts_with_all = ["points", "graph"])]
    sphere: Option<usize>,

    /// Radial noise of the sphere, relative to the radius.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,

    /// 3D point cloud file.
    #[arg(long, conflicts_with = "graph")]
    points: Option<PathBuf>,

    /// Symmetric affinity matrix in Matrix Market format.
    #[arg(long)]
    graph: Option<PathBuf>,

    /// Heat kernel entries below this are dropped.
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,

    #[arg(long, default_value_t = 200)]
    m: usize,

    /// Eigenpairs per Lanczos band.
    #[arg(long, default_value_t = 40)]
    band_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    eps: f64,

    /// Scale eigenvectors by D^{-1/2}.
    #[arg(long)]
    degree_scaled: bool,

    /// Park pending factors in temporary files to cap memory.
    #[arg(long)]
    spill: bool,

    /// Output prefix: writes PREFIX.eig, PREFIX.bfc and PREFIX.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "4096,16384,65536")]
    sizes: Vec<usize>,

    #[arg(long, default_value_t = 25)]
    m_ratio: usize,

    #[arg(long, default_value_t = 1e-3)]
    eps: f64,

    /// Sweep CSV; a JSON sidecar is written next to it.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

/// Bad configuration detected before any compute.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(usage(format!("--eps must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn read_points(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    PointCloud::read_text(BufReader::new(file)).with_context(|| format!("tree: reading {}", path.display()))
}

fn write_points(path: &Path, points: &PointCloud) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    points.write_text(&mut w)?;
    w.flush()?;
    Ok(())
}

/// One complex number per line as `re,im` or a single real column. A
/// leading line that does not parse is taken as a header.
fn read_complex(path: &Path) -> Result<Vec<C64>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == 1 => out.push(C64::new(v[0], 0.0)),
            Ok(v) if v.len() == 2 => out.push(C64::new(v[0], v[1])),
            Err(_) if out.is_empty() && i == 0 => continue,
            _ => return Err(usage(format!("{}:{}: expected `re,im`", path.display(), i + 1))),
        }
    }
    Ok(out)
}

fn write_complex(path: &Path, values: &[C64]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "re,im")?;
    for z in values {
        writeln!(w, "{:.17e},{:.17e}", z.re, z.im)?;
    }
    w.flush()?;
    Ok(())
}

fn read_factor(path: &Path) -> Result<ButterflyFactor> {
    check_input(path)?;
    let file = File::open(path)?;
    ButterflyFactor::read_bfc(BufReader::new(file)).with_context(|| format!("butterfly: reading {}", path.display()))
}

fn write_factor(path: &Path, bf: &ButterflyFactor) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    bf.write_bfc(&mut w)?;
    w.flush()?;
    Ok(())
}

fn factor_eigenvalues(bf: &ButterflyFactor) -> Result<Vec<f64>> {
    bf.freq_tree()
        .eigenvalues()
        .map(|e| e.to_vec())
        .ok_or_else(|| usage("factor has no eigenvalues attached to its frequency tree"))
}

impl Geometry {
    fn validate(&self) -> Result<()> {
        match (self.grid, &self.points) {
            (None, None) => return Err(usage("one of --grid or --points is required")),
            (Some(0), _) => return Err(usage("--grid must be positive")),
            (_, Some(p)) => check_input(p)?,
            _ => {}
        }
        match (self.m, self.m_ratio) {
            (Some(0), _) | (_, Some(0)) => Err(usage("--m and --m-ratio must be positive")),
            _ => Ok(()),
        }
    }

    fn load(&self) -> Result<(PointCloud, usize)> {
        let points = match (self.grid, &self.points) {
            (Some(side), _) => PointCloud::torus_grid(side),
            (None, Some(p)) => read_points(p)?,
            _ => unreachable!(),
        };
        if points.dim() != 2 {
            return Err(usage("torus points need 2 coordinates"));
        }
        let m = self.m.unwrap_or_else(|| m_ratio(points.len(), self.m_ratio.unwrap_or(25)));
        Ok((points, m))
    }
}

fn factorize(a: FactorizeArgs, exec: Execution) -> Result<()> {
    a.geometry.validate()?;
    check_eps(a.eps)?;
    let (points, m) = a.geometry.load()?;
    let n = points.len();
    let depth = a.depth.unwrap_or_else(|| default_depth(n, 4, m, 4));
    let basis = torus_basis(m);
    let space = build_quadtree(&points, depth).context("tree: space quadtree")?;
    let freq = build_frequency_tree(basis.eigenvalues(), 4, depth).context("tree: frequency tree")?;
    let mut provider = torus_provider(&basis, &points).context("torus")?.with_execution(exec);
    let start = Instant::now();
    let opts = ButterflyOptions::new(a.eps).with_execution(exec).with_spill(a.spill);
    let (bf, stats) =
        butterfly_factor_streaming_with(&mut provider, &space, &freq, &opts).context("butterfly: factorization")?;
    let seconds = start.elapsed().as_secs_f64();
    write_factor(&a.out, &bf)?;
    let report = memory_report(&bf);
    eprintln!(
        "n={n} m={m} depth={depth}: {} stored entries, compression {:.2}x, {seconds:.2}s",
        report.stored_entries, report.compression_factor
    );
    write_json(
        &sidecar(&a.out),
        &json!({ "memory_report": report, "build": stats, "seconds": seconds, "eps": a.eps, "seed": 0 }),
    )
}

fn apply(a: ApplyArgs, exec: Execution) -> Result<()> {
    check_input(&a.coeffs)?;
    let bf = read_factor(&a.factor)?;
    let c = read_complex(&a.coeffs)?;
    let want = if a.adjoint { bf.rows() } else { bf.cols() };
    if c.len() != want {
        return Err(usage(format!("{} values in {}, factor needs {want}", c.len(), a.coeffs.display())));
    }
    let start = Instant::now();
    let y = if a.adjoint { bf_apply_adjoint_with(&bf, &c, exec) } else { bf_apply_with(&bf, &c, exec) }
        .context("butterfly: apply")?;
    eprintln!("applied in {:.3}s", start.elapsed().as_secs_f64());
    write_complex(&a.out, &y)
}

fn direct(a: DirectArgs, seed: u64, exec: Execution) -> Result<()> {
    a.geometry.validate()?;
    check_input(&a.coeffs)?;
    let (points, m) = a.geometry.load()?;
    let c = read_complex(&a.coeffs)?;
    if c.len() != m {
        return Err(usage(format!("{} coefficients for m = {m}", c.len())));
    }
    let n = points.len();
    let rows: Vec<usize> = match a.rows {
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k).map(|_| rng.random_range(0..n)).collect()
        }
        None => (0..n).collect(),
    };
    let basis = torus_basis(m);
    let y = direct_mht(&basis, &points, &rows, &c, exec).context("torus: direct transform")?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "row,re,im")?;
    for (j, z) in rows.iter().zip(&y) {
        writeln!(w, "{j},{:.17e},{:.17e}", z.re, z.im)?;
    }
    w.flush()?;
    Ok(())
}

fn invert(a: InvertArgs, seed: u64, exec: Execution) -> Result<()> {
    if !(a.tol > 0.0) || a.max_iter == 0 {
        return Err(usage("--tol and --max-iter must be positive"));
    }
    let opts = LsqrOptions { tol: a.tol, max_iter: a.max_iter, execution: exec, seed };
    match (&a.values, &a.coords, &a.filter) {
        (Some(values), None, None) => {
            check_input(values)?;
            let bf = read_factor(&a.factor)?;
            let f = read_complex(values)?;
            if f.len() != bf.rows() {
                return Err(usage(format!("{} values for {} rows", f.len(), bf.rows())));
            }
            let sol = lsqr_solve(&bf, &f, &opts).context("applications: LSQR")?;
            eprintln!("{} iterations, stop {:?}", sol.report.iterations, sol.report.stop);
            write_complex(&a.out, &sol.coefficients)?;
            write_json(&sidecar(&a.out), &json!({ "lsqr": sol.report }))
        }
        (None, Some(coords), Some(spec)) => {
            check_input(coords)?;
            let filter: SpectralDensity = spec.parse().map_err(|e| usage(format!("--filter: {e}")))?;
            let bf = read_factor(&a.factor)?;
            let ev = factor_eigenvalues(&bf)?;
            let points = read_points(coords)?;
            if points.dim() != 3 || points.len() != bf.rows() {
                return Err(usage(format!("--coords needs {} points with 3 coordinates", bf.rows())));
            }
            let (filtered, reports) =
                filter_geometry(&bf, &points, &ev, &filter, &opts).context("applications: geometry filter")?;
            write_points(&a.out, &filtered)?;
            write_json(&sidecar(&a.out), &json!({ "lsqr": reports }))
        }
        _ => Err(usage("give either --values, or --coords with --filter")),
    }
}

fn rank_study(a: RankStudyArgs) -> Result<()> {
    for &e in &a.eps {
        check_eps(e)?;
    }
    if a.b.is_empty() {
        return Err(usage("--b is required"));
    }
    let kinds: Vec<BoundKind> = match a.kernel.as_str() {
        "disk" => vec![BoundKind::Disk],
        "annulus" => vec![BoundKind::Annulus],
        "bessel" => a.order.iter().map(|&order| BoundKind::Bessel { order }).collect(),
        other => return Err(usage(format!("unknown kernel {other:?}; expected disk, annulus or bessel"))),
    };
    let inner = if kinds == [BoundKind::Disk] { vec![0.0] } else { a.a.clone() };
    let mut points = Vec::new();
    for &kind in &kinds {
        for &eps in &a.eps {
            for &lo in &inner {
                for &hi in &a.b {
                    for &r in &a.radius {
                        if lo <= hi {
                            points.push((kind, lo, hi, r, eps));
                        }
                    }
                }
            }
        }
    }
    if points.is_empty() {
        return Err(usage("no parameter point has a ≤ b"));
    }
    let res = a.resolution;
    let reports = points
        .par_iter()
        .map(|&(kind, lo, hi, r, eps)| rank_bound_report(kind, lo, hi, r, eps, res))
        .collect::<std::result::Result<Vec<_>, _>>()
        .context("rank-analysis")?;
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    };
    writeln!(w, "kernel,a,b,R,eps,xi,bound,rank,coarse_rank,singular_values_above,converged,pass")?;
    for rep in &reports {
        writeln!(
            w,
            "{},{},{},{},{:e},{},{},{},{},{},{},{}",
            rep.kernel,
            rep.a,
            rep.b,
            rep.radius,
            rep.eps,
            rep.xi.map(|x| format!("{x:.6}")).unwrap_or_default(),
            rep.bound,
            rep.empirical.rank,
            rep.empirical.coarse_rank,
            rep.empirical.singular_values_above,
            rep.empirical.converged,
            rep.pass
        )?;
    }
    w.flush()?;
    let violations = reports.iter().filter(|r| !r.pass).count();
    eprintln!("{} points, {violations} bound violations", reports.len());
    if let Some(p) = &a.out {
        write_json(&sidecar(p), &json!({ "reports": reports, "violations": violations }))?;
    }
    Ok(())
}

fn grf_sample(a: GrfArgs, seed: u64, exec: Execution) -> Result<()> {
    let density: SpectralDensity = a.density.parse().map_err(|e| usage(format!("--density: {e}")))?;
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    let bf = read_factor(&a.factor)?;
    let ev = factor_eigenvalues(&bf)?;
    let model = GrfModel::new(&bf, &ev, density).context("applications: random field model")?.with_execution(exec);
    let fields = grf_samples(&model, seed, a.samples).context("applications: sampling")?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    for field in &fields {
        let vals: Vec<f64> = if a.complex { field.iter().flat_map(|z| [z.re, z.im]).collect() } else { field.iter().map(|z| z.re).collect() };
        if a.binary {
            for v in vals {
                w.write_all(&v.to_le_bytes())?;
            }
        } else {
            let line: Vec<String> = vals.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
    }
    w.flush()?;
    write_json(
        &sidecar(&a.out),
        &json!({
            "samples": a.samples,
            "points": bf.rows(),
            "seed": seed,
            "complex": a.complex,
            "density": model.density(),
            "variance_sum": model.weights().iter().sum::<f64>(),
        }),
    )
}

fn eigenmaps(a: EigenmapsArgs, seed: u64, exec: Execution) -> Result<()> {
    check_eps(a.eps)?;
    if a.m == 0 || a.band_size == 0 {
        return Err(usage("--m and --band-size must be positive"));
    }
    let (graph, t): (SparseSymmetricMatrix, Option<f64>) = match (a.sphere, &a.points, &a.graph) {
        (Some(n), None, None) => {
            let cloud = noisy_sphere(n, 1.0, a.sigma, seed);
            let (t, _) = calibrate_heat_scale(&cloud);
            (heat_kernel_graph(&cloud, t, a.threshold, exec).context("spectral-graph: heat kernel")?, Some(t))
        }
        (None, Some(p), None) => {
            check_input(p)?;
            let cloud = read_points(p)?;
            let (t, _) = calibrate_heat_scale(&cloud);
            (heat_kernel_graph(&cloud, t, a.threshold, exec).context("spectral-graph: heat kernel")?, Some(t))
        }
        (None, None, Some(p)) => {
            check_input(p)?;
            let file = File::open(p)?;
            let g = SparseSymmetricMatrix::read_matrix_market(BufReader::new(file))
                .with_context(|| format!("spectral-graph: reading {}", p.display()))?;
            (g, None)
        }
        _ => return Err(usage("one of --sphere, --points or --graph is required")),
    };
    let n = graph.dim();
    if a.m > n {
        return Err(usage(format!("--m {} exceeds {n} vertices", a.m)));
    }
    let start = Instant::now();
    let (op, degree) = eigenmaps_operator(&graph).context("spectral-graph: normalized operator")?;
    let lanczos = LanczosOptions { seed, execution: exec, ..Default::default() };
    let mut provider = banded_eigen_provider(&op, a.m, a.band_size, &lanczos).context("spectral-graph: Lanczos")?;
    let eig_seconds = start.elapsed().as_secs_f64();
    let ortho = provider.eigen.orthonormality_error();
    let out_eig = a.out.with_extension("eig");
    provider.eigen.write_binary(BufWriter::new(File::create(&out_eig)?))?;
    if a.degree_scaled {
        provider = provider.with_row_scale(degree.iter().map(|d| 1.0 / d.sqrt()).collect())?;
    }
    let tree_opts = FiedlerTreeOptions { lanczos: lanczos.clone(), execution: exec, ..Default::default() };
    let (space, fiedler) = build_fiedler_tree(&graph, &tree_opts).context("tree: Fiedler tree")?;
    let ev: Vec<f64> = provider.eigenvalues().iter().map(|l| l.max(0.0)).collect();
    let freq = build_frequency_tree(&ev, space.arity(), space.depth()).context("tree: frequency tree")?;
    let opts = ButterflyOptions::new(a.eps).with_execution(exec).with_spill(a.spill);
    let (bf, stats) =
        butterfly_factor_streaming_with(&mut provider, &space, &freq, &opts).context("butterfly: factorization")?;
    write_factor(&a.out.with_extension("bfc"), &bf)?;
    eprintln!("n={n} m={}: orthonormality {ortho:.2e}, {} stored entries", a.m, bf.stored_entries());
    write_json(
        &a.out.with_extension("json"),
        &json!({
            "n": n,
            "m": a.m,
            "heat_scale": t,
            "orthonormality_error": ortho,
            "eigen_seconds": eig_seconds,
            "band_warnings": provider.warnings,
            "unbalanced_splits": fiedler.unbalanced().len(),
            "memory_report": memory_report(&bf),
            "build": stats,
        }),
    )
}

fn bench(a: BenchArgs, exec: Execution) -> Result<()> {
    check_eps(a.eps)?;
    if a.m_ratio == 0 || a.sizes.len() < 2 {
        return Err(usage("--m-ratio must be positive and --sizes needs at least two entries"));
    }
    for &n in &a.sizes {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(usage(format!("size {n} is not a perfect square")));
        }
    }
    if a.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--sizes must be strictly ascending"));
    }
    let ratio = a.m_ratio;
    let rows = complexity_sweep(&a.sizes, |n| m_ratio(n, ratio), a.eps, exec).context("rank-analysis: sweep")?;
    let slope = sweep_slope(&rows).context("rank-analysis: slope fit")?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    println!("slope {slope:.4}");
    write_json(&sidecar(&a.out), &json!({ "slope": slope, "rows": rows, "eps": a.eps, "m_ratio": ratio }))
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(usage("--threads must be positive"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    let exec = if threads == 1 { Execution::Sequential } else { Execution::Parallel };
    let seed = cli.seed;
    match cli.command {
        Command::Factorize(a) => factorize(a, exec),
        Command::Apply(a) => apply(a, exec),
        Command::Direct(a) => direct(a, seed, exec),
        Command::Invert(a) => invert(a, seed, exec),
        Command::RankStudy(a) => rank_study(a),
        Command::GrfSample(a) => grf_sample(a, seed, exec),
        Command::Eigenmaps(a) => eigenmaps(a, seed, exec),
        Command::Bench(a) => bench(a, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
