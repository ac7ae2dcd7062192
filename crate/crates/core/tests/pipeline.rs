use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bfmht::apps::{filter_geometry, grf_samples, lsqr_solve, GrfModel, LsqrOptions, SpectralDensity};
use bfmht::butterfly::{butterfly_factor_streaming_with, ButterflyOptions};
use bfmht::rank::loglog_slope;
use bfmht::torus::{dense_torus_matrix, direct_mht, torus_basis, torus_provider, TorusBasis};
use bfmht::tree::{build_frequency_tree, build_quadtree, default_depth};
use bfmht::{bf_apply, butterfly_factor, ButterflyFactor, Execution, PointCloud, C64};

fn torus(side: usize, m: usize, eps: f64) -> (TorusBasis, PointCloud, ButterflyFactor) {
    let grid = PointCloud::torus_grid(side);
    let basis = torus_basis(m);
    let depth = default_depth(grid.len(), 4, m, 4);
    let space = build_quadtree(&grid, depth).unwrap();
    let freq = build_frequency_tree(basis.eigenvalues(), 4, depth).unwrap();
    let mut provider = torus_provider(&basis, &grid).unwrap();
    let (bf, _) = butterfly_factor_streaming_with(&mut provider, &space, &freq, &ButterflyOptions::new(eps)).unwrap();
    (basis, grid, bf)
}

fn random_vec(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect()
}

fn rel(a: &[C64], b: &[C64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let n: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (d / n).sqrt()
}

#[test]
fn bfc_file_round_trip_applies_bitwise() {
    let (_, _, bf) = torus(32, 100, 1e-4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bfc");
    bf.write_bfc(std::fs::File::create(&path).unwrap()).unwrap();
    let back = ButterflyFactor::read_bfc(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, bf);
    let c = random_vec(100, 1);
    assert_eq!(bf_apply(&back, &c).unwrap(), bf_apply(&bf, &c).unwrap());
}

#[test]
fn error_tracks_tolerance() {
    let side = 64;
    let m = side * side / 25;
    let mut prev = f64::INFINITY;
    for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
        let (basis, grid, bf) = torus(side, m, eps);
        let c = random_vec(m, 2);
        let rows: Vec<usize> = (0..grid.len()).step_by(7).collect();
        let direct = direct_mht(&basis, &grid, &rows, &c, Execution::Parallel).unwrap();
        let y = bf_apply(&bf, &c).unwrap();
        let got: Vec<C64> = rows.iter().map(|&j| y[j]).collect();
        let err = rel(&got, &direct);
        assert!(err <= 10.0 * eps, "eps {eps}: {err}");
        assert!(err < prev);
        prev = err;
    }
}

#[test]
fn streaming_and_dense_builds_agree() {
    let side = 32;
    let m = 80;
    let (basis, grid, streamed) = torus(side, m, 1e-8);
    let phi = dense_torus_matrix(&basis, &grid);
    let dense = butterfly_factor(&phi, streamed.space_tree(), streamed.freq_tree(), 1e-8).unwrap();
    let c = random_vec(m, 3);
    let want = phi.matvec(&c).unwrap();
    assert!(rel(&bf_apply(&streamed, &c).unwrap(), &bf_apply(&dense, &c).unwrap()) <= 1e-7);
    assert!(rel(&bf_apply(&dense, &c).unwrap(), &want) <= 1e-7);
}

#[test]
fn lowpass_filter_keeps_smooth_geometry() {
    let side = 16;
    let m = 64;
    let (basis, grid, bf) = torus(side, m, 1e-10);
    // A smooth embedding: one low mode per coordinate.
    let pts: Vec<[f64; 3]> = (0..grid.len())
        .map(|j| {
            let p = grid.point(j);
            [p[0].cos(), p[1].sin(), (p[0] + p[1]).cos()]
        })
        .collect();
    let coords = PointCloud::from_points(&pts).unwrap();
    let filter: SpectralDensity = "lowpass:cut=3".parse().unwrap();
    let (out, reports) =
        filter_geometry(&bf, &coords, basis.eigenvalues(), &filter, &LsqrOptions::default()).unwrap();
    assert!(reports.iter().all(|r| r.converged));
    let worst = out.coords().iter().zip(coords.coords()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn lsqr_inverts_noisy_samples_to_noise_level() {
    let (basis, grid, bf) = torus(32, 120, 1e-8);
    let c_star = random_vec(120, 4);
    let all: Vec<usize> = (0..grid.len()).collect();
    let mut f = direct_mht(&basis, &grid, &all, &c_star, Execution::Parallel).unwrap();
    let noise = random_vec(f.len(), 5);
    for (v, e) in f.iter_mut().zip(&noise) {
        *v += e * 1e-6;
    }
    let sol = lsqr_solve(&bf, &f, &LsqrOptions::default()).unwrap();
    assert!(rel(&sol.coefficients, &c_star) < 1e-5);
}

/// Monte-Carlo covariance error should fall like N^{-1/2}.
#[test]
fn covariance_error_decays_at_monte_carlo_rate() {
    let side = 8;
    let m = 16;
    let (basis, grid, bf) = torus(side, m, 1e-12);
    let phi = dense_torus_matrix(&basis, &grid);
    let density: SpectralDensity = "matern:nu=1,ell=0.5,var=1".parse().unwrap();
    let model = GrfModel::new(&bf, basis.eigenvalues(), density).unwrap();
    let n = grid.len();
    let oracle = |i: usize, j: usize| -> C64 {
        (0..m).map(|k| phi.get(i, k) * model.weights()[k] * phi.get(j, k).conj()).sum()
    };
    let samples = grf_samples(&model, 17, 20_000).unwrap();
    let mut pts = Vec::new();
    for count in [1000usize, 10_000, 20_000] {
        // Average over disjoint windows and all entries to damp noise in the fit.
        let windows = 20_000 / count;
        let mut err = 0.0;
        for w in 0..windows {
            let chunk = &samples[w * count..(w + 1) * count];
            let mut sq = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let est: C64 = chunk.iter().map(|y| y[i] * y[j].conj()).sum::<C64>() / count as f64;
                    sq += (est - oracle(i, j)).norm_sqr();
                }
            }
            err += sq.sqrt();
        }
        pts.push((count as f64, err / windows as f64));
    }
    let slope = loglog_slope(&pts).unwrap();
    assert!((-0.7..=-0.3).contains(&slope), "slope {slope}, {pts:?}");
}
