//! The acceptance criteria of the library as runnable checks. Each check
//! returns whether it passed together with a one-line summary of the
//! measured values.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::sync::Arc;
use std::time::Duration;

use fbdsde::analytics::{
    benchmark_problem, combine, compute_zbar, convergence_slope, error_n_stat, l2_regularity_stat, y_increment_cells,
    z_moment_cells, BundleCells,
};
use fbdsde::backward::{backward_scheme, SchemeOptions};
use fbdsde::condexp::{nested_mc_condexp, BasisSpec, NestedSeed, NestedSpec};
use fbdsde::config::ExperimentConfig;
use fbdsde::experiment::{compute_study, ExperimentKind};
use fbdsde::forward::{euler_forward, malliavin_derivative_x, malliavin_derivative_x_direct, variational_flow};
use fbdsde::paths::{sample_bundle, PathBundle, SeedSpec};
use fbdsde::problem::{make_uniform_grid, BenchmarkId, CoefficientSet, FbdsdeProblem, GradSet, TimeGrid};

const SEED: u64 = 20261015;

pub type Check = Result<(bool, String), Box<dyn std::error::Error>>;

fn bundle(seed: u64, index: u64, steps: usize, samples: usize) -> PathBundle<f64> {
    sample_bundle(
        SeedSpec::new(seed, index),
        &make_uniform_grid(1.0, steps).unwrap(),
        samples,
        1,
        1,
    )
    .unwrap()
}

fn config(benchmark: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "benchmark = {benchmark}\nparam = 0.5\nx0 = 1.0\nseed = {SEED}\n"
    ))
    .unwrap()
}

pub fn study(kind: ExperimentKind, benchmarks: &[&str]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in benchmarks {
        let (report, assertions) = compute_study(kind, &config(name))?;
        let values: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("N={}: {:.3e}", r.steps, r.value))
            .collect();
        let failed: Vec<&str> = assertions
            .iter()
            .filter(|a| !a.passed)
            .map(|a| a.name.as_str())
            .collect();
        ok &= failed.is_empty();
        let verdicts: Vec<String> = assertions.iter().map(|a| a.detail.clone()).collect();
        parts.push(format!("{name} [{}] {}", values.join(", "), verdicts.join("; ")));
    }
    Ok((ok, parts.join(" | ")))
}

pub fn exact_scheme_identity() -> Check {
    let (steps, samples) = (4, 4096);
    let p = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0)?;
    let b = bundle(SEED, 1, steps, samples);
    let fw = euler_forward(&p, &b)?;
    let out = backward_scheme(&p, &b, &fw, &SchemeOptions::nested(8192, BasisSpec::polynomial(3)))?;
    let (yse, zse) = (out.y_stderr.as_ref().unwrap(), out.z_stderr.as_ref().unwrap());
    let nodes = steps + 1;
    let mut ok = true;
    let (mut worst_y, mut worst_z) = (0.0f64, 0.0f64);
    for n in 0..steps {
        let (mut ey, mut ez, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
        for m in 0..samples {
            ey += (out.y_at(m, n)[0] - fw.x_at(m, n)[0]).powi(2) / samples as f64;
            ez += (out.z_at(m, n)[0] - 1.0).powi(2) / samples as f64;
            sy += yse[m * nodes + n].powi(2) / samples as f64;
            sz += zse[m * nodes + n].powi(2) / samples as f64;
        }
        ok &= ey <= 16.0 * sy && ez <= 16.0 * sz;
        worst_y = worst_y.max((ey / sy).sqrt());
        worst_z = worst_z.max((ez / sz).sqrt());
    }
    Ok((
        ok,
        format!("max RMS error / RMS oracle stderr: Y {worst_y:.3}, Z {worst_z:.3} (bound 4)"),
    ))
}

pub fn representation() -> Check {
    study(ExperimentKind::Representation, &["linear_y"])
}

fn linear_problem(mu: f64, nu: f64, x0: f64) -> FbdsdeProblem<f64> {
    let zero = || -> fbdsde::problem::FieldMap<f64> { Arc::new(|_, _, _, _, o| o.fill(0.0)) };
    let coeffs = CoefficientSet::new(
        Arc::new(move |x, o| o[0] = mu * x[0]),
        Arc::new(move |x, o| o[0] = nu * x[0]),
        zero(),
        zero(),
        Arc::new(|x, o| o[0] = x[0]),
        mu.abs().max(nu.abs()),
        0.0,
    )
    .unwrap()
    .with_gradients(GradSet {
        b: Some(Arc::new(move |_, o| o[0] = mu)),
        sigma: Some(Arc::new(move |_, o| o[0] = nu)),
        phi: Some(Arc::new(|_, o| o[0] = 1.0)),
        f_x: Some(zero()),
        f_y: Some(zero()),
        f_z: Some(zero()),
        h_x: Some(zero()),
        h_y: Some(zero()),
        h_z: Some(zero()),
    });
    FbdsdeProblem::new(1, 1, 1, 1.0, vec![x0], coeffs).unwrap()
}

pub fn malliavin_factorization() -> Check {
    let p = linear_problem(0.3, 0.4, 1.0);
    let mut rms = Vec::new();
    for steps in [8usize, 16, 32] {
        let b = bundle(SEED, 5, steps, 10_000);
        let fw = variational_flow(&p, &b)?;
        let theta = steps / 2;
        let factor = malliavin_derivative_x(&fw, theta, &p)?;
        let direct = malliavin_derivative_x_direct(&p, &b, &fw, theta)?;
        rms.push(factor.rms_difference(&direct));
    }
    let ratios: Vec<f64> = rms.windows(2).map(|w| w[1] / w[0]).collect();
    let ok = ratios.iter().all(|r| (0.35..=0.65).contains(r));
    Ok((
        ok,
        format!(
            "RMS differences {:?}, ratios {ratios:.3?} (band [0.35, 0.65])",
            rms.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    ))
}

pub fn estimator_equivalence() -> Check {
    let (steps, samples, inner) = (2, 4096, 4096);
    let p = benchmark_problem(BenchmarkId::LinearZ, 0.5, 1.0, 1.0)?;
    let b = bundle(SEED, 6, steps, samples);
    let fw = euler_forward(&p, &b)?;
    let options = SchemeOptions::regression(BasisSpec::polynomial(3)).with_control_variates(false);
    let out = backward_scheme(&p, &b, &fw, &options)?;
    let node = 1;
    let fits = &out.fits[node];
    let h = b.grid.step();
    let t_next = b.grid.time(node + 1);
    let spread = b.grid.time(node).sqrt();
    let mut worst = 0.0f64;
    for i in 0..20 {
        let x = [1.0 + spread * (-2.0 + 4.0 * i as f64 / 19.0)];
        let nested = nested_mc_condexp(
            &p,
            &b,
            node,
            &x,
            NestedSpec {
                inner_samples: inner,
                steps: 1,
            },
            NestedSeed { lane: 99, stream: i },
            2,
            |c, o| {
                let x1 = c.x_at(1);
                let mut phi = [0.0];
                let mut hv = [0.0];
                p.phi(x1, &mut phi);
                p.h(t_next, x1, &phi, &[0.0], &mut hv);
                let r = phi[0] + hv[0] * c.db_at(0)[0];
                o[0] = r;
                o[1] = r * c.dw_at(0)[0] / h;
            },
        )?;
        let (mut y, mut z, mut ys, mut zs) = ([0.0], [0.0], [0.0], [0.0]);
        fits.y.predict(&x, &mut y);
        fits.z.predict(&x, &mut z);
        fits.y.prediction_stderr(&x, &mut ys);
        fits.z.prediction_stderr(&x, &mut zs);
        let gap_y = (y[0] - nested.mean[0]).abs() / (ys[0].powi(2) + nested.stderr[0].powi(2)).sqrt();
        let gap_z = (z[0] - nested.mean[1]).abs() / (zs[0].powi(2) + nested.stderr[1].powi(2)).sqrt();
        worst = worst.max(gap_y).max(gap_z);
    }
    Ok((
        worst <= 4.0,
        format!("largest gap {worst:.3} combined standard errors over 20 probe states (bound 4)"),
    ))
}

fn stream(g: &TimeGrid<f64>, value: impl Fn(f64) -> f64) -> Vec<f64> {
    g.nodes().iter().map(|&t| value(t)).collect()
}

pub fn deterministic_functionals() -> Check {
    let tol = 1e-10;
    let mut failures = Vec::new();
    let mut other: Vec<String> = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !((got - want).abs() <= tol) {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    let poly = BasisSpec::polynomial(0);

    // Constant and linear Z averages.
    let coarse = make_uniform_grid(1.0, 4)?;
    let fine = coarse.refine(64)?;
    let feats = vec![0.0; 5];
    let zbar = compute_zbar(&stream(&fine, |_| 1.7), 1, &fine, &coarse, &feats, 1, &poly)?;
    for n in 0..4 {
        check("zbar constant", zbar[n], 1.7);
    }
    check("zbar terminal", zbar[4], 0.0);
    let zbar = compute_zbar(&stream(&fine, |t| t), 1, &fine, &coarse, &feats, 1, &poly)?;
    let (h, delta) = (0.25, 0.25 / 64.0);
    for n in 0..4 {
        let left_sum = n as f64 * h + (h - delta) / 2.0;
        check("zbar linear", zbar[n], left_sum);
        if (zbar[n] - (n as f64 * h + h / 2.0)).abs() > delta {
            other.push(format!("zbar linear bias at node {n}"));
        }
    }

    // Terminal term of a constant Z.
    let coarse = make_uniform_grid(1.0, 8)?;
    let fine = coarse.refine(16)?;
    let c = 1.3;
    let z = stream(&fine, |_| c);
    let zbar = compute_zbar(&z, 1, &fine, &coarse, &[0.0; 9], 1, &poly)?;
    let stat = l2_regularity_stat(&stream(&fine, |_| 0.4), 1, &z, 1, &zbar, &fine, &coarse)?;
    check("regularity constant Z", stat.value, 0.125 * c * c);
    check("regularity constant Y part", stat.y_part, 0.0);

    // Interval contributions of Z_s = s.
    let coarse = make_uniform_grid(1.0, 10)?;
    let fine = coarse.refine(8192)?;
    let h: f64 = 0.1;
    let z = stream(&fine, |t| t);
    let zbar = compute_zbar(&z, 1, &fine, &coarse, &[0.0; 11], 1, &poly)?;
    let stat = l2_regularity_stat(&stream(&fine, |_| 0.0), 1, &z, 1, &zbar, &fine, &coarse)?;
    for &(left, right) in &stat.intervals[..9] {
        check("interval vs left average", left, h.powi(3) / 12.0);
        check("interval vs right average", right, 13.0 * h.powi(3) / 12.0);
    }

    // Error functional.
    let coarse = make_uniform_grid(1.0, 5)?;
    let fine = coarse.refine(4)?;
    let y_ref = stream(&coarse, |t| t * t);
    let z_coarse = stream(&coarse, |t| 1.0 + t);
    let z_fine: Vec<f64> = (0..=20).map(|i| 1.0 + (i / 4) as f64 * 0.2).collect();
    let e = error_n_stat(&y_ref, &z_fine, &y_ref, &z_coarse, 1, 1, &fine, &coarse)?;
    check("error exact", e.value, 0.0);
    let d = 0.3;
    let shifted: Vec<f64> = y_ref.iter().map(|v| v + d).collect();
    let e = error_n_stat(&y_ref, &z_fine, &shifted, &z_coarse, 1, 1, &fine, &coarse)?;
    check("error Y offset", e.value, d * d);
    let shifted: Vec<f64> = z_coarse.iter().map(|v| v + d).collect();
    let e = error_n_stat(&y_ref, &z_fine, &y_ref, &shifted, 1, 1, &fine, &coarse)?;
    check("error Z offset", e.value, 1.0 * d * d);

    // Slopes.
    let pts = |power: i32| -> Vec<(usize, f64)> {
        [8usize, 16, 32, 64]
            .iter()
            .map(|&n| (n, 3.7 / (n as f64).powi(power)))
            .collect()
    };
    check("slope 1", convergence_slope(&pts(1))?.slope, 1.0);
    check("slope 2", convergence_slope(&pts(2))?.slope, 2.0);
    if convergence_slope(&[(8, 1.0)]).is_ok() {
        other.push("single point accepted".into());
    }

    failures.extend(other);
    let ok = failures.is_empty();
    let detail = if ok {
        format!("all closed forms within {tol:e}")
    } else {
        failures.join("; ")
    };
    Ok((ok, detail))
}

pub fn moment_bounds() -> Check {
    let x0: f64 = 1.0;
    let (samples, bundles) = (1 << 14, 4);
    let z_bound = 10.0 * (1.0 + x0.abs());
    let mut ok = true;
    let mut parts = Vec::new();
    for (id, param) in [
        (BenchmarkId::Trivial, 0.0),
        (BenchmarkId::LinearZ, 0.5),
        (BenchmarkId::LinearY, 0.5),
    ] {
        let p = benchmark_problem(id, param, x0, 1.0)?;
        let mut c = Vec::new();
        let mut z_rms = 0.0;
        for steps in [16usize, 32, 64] {
            let mut z_cells: Vec<BundleCells> = Vec::new();
            let mut y_cells: Vec<BundleCells> = Vec::new();
            for index in 0..bundles {
                let b = bundle(SEED + 8, index, steps, samples);
                let fw = euler_forward(&p, &b)?;
                let out = backward_scheme(&p, &b, &fw, &SchemeOptions::regression(BasisSpec::polynomial(3)))?;
                z_cells.push(z_moment_cells(&out));
                y_cells.push(y_increment_cells(&out));
            }
            let h = 1.0 / steps as f64;
            c.push(combine(&y_cells)?.value / (h * (1.0 + x0 * x0)));
            if steps == 32 {
                z_rms = combine(&z_cells)?.value.sqrt();
            }
        }
        let stable = [c[0], c[2]].iter().all(|&v| (v - c[1]).abs() <= 0.5 * c[1]);
        ok &= stable && z_rms <= z_bound;
        parts.push(format!(
            "{id}: max Z rms {z_rms:.3} (bound {z_bound}), c at N=16,32,64 {c:.3?}"
        ));
    }
    Ok((ok, parts.join(" | ")))
}

pub struct Criterion {
    pub name: &'static str,
    /// Wall-clock budget; a slower run counts as a failure.
    pub limit: Duration,
    pub run: Box<dyn Fn() -> Check>,
}

fn criterion(name: &'static str, limit_secs: u64, run: impl Fn() -> Check + 'static) -> Criterion {
    Criterion {
        name,
        limit: Duration::from_secs(limit_secs),
        run: Box::new(run),
    }
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        criterion("1 exact scheme identity", 60, exact_scheme_identity),
        criterion("2 rate reproduction", 15 * 60, || {
            study(ExperimentKind::Convergence, &["linear_z", "linear_y"])
        }),
        criterion("3 L2 regularity rate", 20 * 60, || {
            study(ExperimentKind::Regularity, &["linear_z", "linear_y"])
        }),
        criterion("4 representation of Z", 10 * 60, representation),
        criterion("5 Malliavin factorization", 60, malliavin_factorization),
        criterion("6 estimator equivalence", 120, estimator_equivalence),
        criterion("7 deterministic functionals", 1, deterministic_functionals),
        criterion("8 moment bounds", 10 * 60, moment_bounds),
    ]
}
