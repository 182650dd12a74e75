use fbdsde::analytics::benchmark_problem;
use fbdsde::backward::{backward_scheme, SchemeOptions};
use fbdsde::condexp::BasisSpec;
use fbdsde::forward::euler_forward;
use fbdsde::paths::{sample_bundle, SeedSpec};
use fbdsde::problem::{make_uniform_grid, BenchmarkId};
use fbdsde::{Bundle32, Problem32};

#[test]
fn brownian_increments_have_the_right_law() {
    let (samples, steps) = (100_000usize, 10usize);
    let grid = make_uniform_grid(1.0, steps).unwrap();
    let h = grid.step();
    let b = sample_bundle(SeedSpec::new(31, 0), &grid, samples, 1, 1).unwrap();
    let count = (samples * steps) as f64;
    let mean = b.dw.iter().sum::<f64>() / count;
    let var = b.dw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
    assert!(mean.abs() <= 4.0 * (h / 1e6).sqrt(), "mean {mean}");
    assert!((var - h).abs() <= 0.05 * h, "variance {var}");
}

#[test]
fn w_and_b_increments_are_uncorrelated() {
    let draws = 100_000u64;
    let grid = make_uniform_grid(1.0, 10).unwrap();
    let (mut w0, mut b0, mut b9) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..draws {
        let b = sample_bundle(SeedSpec::new(32, p), &grid, 1, 1, 1).unwrap();
        w0.push(b.dw_at(0, 0)[0]);
        b0.push(b.db_at(0)[0]);
        b9.push(b.db_at(9)[0]);
    }
    let corr = |a: &[f64], c: &[f64]| {
        let n = a.len() as f64;
        let (ma, mc) = (a.iter().sum::<f64>() / n, c.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(c).map(|(x, y)| (x - ma) * (y - mc)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vc: f64 = c.iter().map(|y| (y - mc).powi(2)).sum();
        cov / (va * vc).sqrt()
    };
    assert!(corr(&w0, &b0).abs() < 0.01);
    assert!(corr(&w0, &b9).abs() < 0.01);
}

#[test]
fn forward_supremum_has_bounded_second_moment() {
    let x0: f64 = 1.0;
    for id in BenchmarkId::ALL {
        let p = benchmark_problem(id, 0.5, x0, 1.0).unwrap();
        let b = sample_bundle(SeedSpec::new(33, 0), &make_uniform_grid(1.0, 32).unwrap(), 10_000, 1, 1).unwrap();
        let fw = euler_forward(&p, &b).unwrap();
        let moment = (0..b.samples)
            .map(|m| (0..=32).map(|n| fw.x_at(m, n)[0].powi(2)).fold(0.0, f64::max))
            .sum::<f64>()
            / b.samples as f64;
        assert!(moment < 100.0 * (1.0 + x0 * x0), "{id}: {moment}");
    }
}

#[test]
fn nested_oracle_keeps_the_martingale_identity() {
    let p = benchmark_problem(BenchmarkId::Trivial, 0.0f64, 0.5, 1.0).unwrap();
    let b = sample_bundle(SeedSpec::new(34, 0), &make_uniform_grid(1.0, 3).unwrap(), 200, 1, 1).unwrap();
    let fw = euler_forward(&p, &b).unwrap();
    let out = backward_scheme(&p, &b, &fw, &SchemeOptions::nested(2000, BasisSpec::polynomial(2))).unwrap();
    let se = out.y_stderr.as_ref().unwrap();
    for n in 0..2 {
        // Y_{n+1} is affine in X_{n+1}, so its conditional mean is the fitted map at X_n.
        let fit = &out.fits[n + 1].y;
        let (mut gap, mut var) = (0.0, 0.0);
        for m in 0..b.samples {
            let mut next = [0.0];
            fit.predict(fw.x_at(m, n), &mut next);
            gap += (next[0] - out.y_at(m, n)[0]).powi(2);
            var += se[m * 4 + n].powi(2) + se[m * 4 + n + 1].powi(2);
        }
        assert!(gap <= 16.0 * var, "node {n}: {gap} vs {var}");
    }
}

#[test]
fn single_precision_scheme_tracks_double_precision() {
    let p64 = benchmark_problem(BenchmarkId::LinearZ, 0.5, 1.0, 1.0).unwrap();
    let p32: Problem32 = benchmark_problem(BenchmarkId::LinearZ, 0.5f32, 1.0, 1.0).unwrap();
    let seed = SeedSpec::new(35, 0);
    let b64 = sample_bundle(seed, &make_uniform_grid(1.0, 8).unwrap(), 4096, 1, 1).unwrap();
    let b32: Bundle32 = sample_bundle(seed, &make_uniform_grid(1.0f32, 8).unwrap(), 4096, 1, 1).unwrap();
    let y0_64 = {
        let fw = euler_forward(&p64, &b64).unwrap();
        backward_scheme(&p64, &b64, &fw, &SchemeOptions::regression(BasisSpec::polynomial(3)))
            .unwrap()
            .y_at(0, 0)[0]
    };
    let y0_32 = {
        let fw = euler_forward(&p32, &b32).unwrap();
        backward_scheme(&p32, &b32, &fw, &SchemeOptions::regression(BasisSpec::polynomial(3)))
            .unwrap()
            .y_at(0, 0)[0]
    };
    assert!((y0_64 - y0_32 as f64).abs() < 1e-3, "{y0_64} vs {y0_32}");
}
