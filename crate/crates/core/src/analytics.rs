//! Closed-form benchmarks, error and regularity statistics, and rate fits.
//!
//! Statistics are assembled per bundle as cell means (one cell per node or
//! fine-grid point) and combined across bundles with [`combine`]. A
//! statistic has the form `max_i E[a_i] + sum_j E[b_j]`, where the `b_j`
//! already carry their quadrature weights.

use std::sync::Arc;

use rayon::prelude::*;

use crate::backward::{SchemeOutput, VariationalOutput};
use crate::condexp::{fit_predict, BasisSpec};
use crate::error::{ensure_len, Error, Result};
use crate::forward::ForwardPaths;
use crate::linalg::matmul;
use crate::paths::PathBundle;
use crate::problem::{BenchmarkId, CoefficientSet, FbdsdeProblem, FieldMap, GradSet, StateMap, TimeGrid};
use crate::scalar::Scalar;

/// Builds the benchmark problem `b = 0`, `sigma = 1`, `phi(x) = x`, `f = 0`
/// with `h = 0`, `h = param * z` or `h = param * y` in one dimension.
pub fn benchmark_problem<S: Scalar>(id: BenchmarkId, param: S, x0: S, horizon: S) -> Result<FbdsdeProblem<S>> {
    let zero_state = || -> StateMap<S> { Arc::new(|_, o| o.fill(S::zero())) };
    let zero_field = || -> FieldMap<S> { Arc::new(|_, _, _, _, o| o.fill(S::zero())) };
    let constant_field = |c: S| -> FieldMap<S> { Arc::new(move |_, _, _, _, o| o.fill(c)) };
    let (h, h_y, h_z, lipschitz, alpha) = match id {
        BenchmarkId::Trivial => (zero_field(), zero_field(), zero_field(), S::one(), S::zero()),
        BenchmarkId::LinearZ => {
            if !(param.abs() < S::one()) {
                return Err(Error::Validation(format!("linear_z needs |alpha| < 1, got {param}")));
            }
            let h: FieldMap<S> = Arc::new(move |_, _, _, z, o| o[0] = param * z[0]);
            (h, zero_field(), constant_field(param), S::one(), param.abs())
        }
        BenchmarkId::LinearY => {
            let h: FieldMap<S> = Arc::new(move |_, _, y, _, o| o[0] = param * y[0]);
            (
                h,
                constant_field(param),
                zero_field(),
                S::one().max(param * param),
                S::zero(),
            )
        }
    };
    let coeffs = CoefficientSet::new(
        zero_state(),
        Arc::new(|_, o| o.fill(S::one())),
        zero_field(),
        h,
        Arc::new(|x, o| o[0] = x[0]),
        lipschitz,
        alpha,
    )?
    .with_gradients(GradSet {
        b: Some(zero_state()),
        sigma: Some(zero_state()),
        phi: Some(Arc::new(|_, o| o.fill(S::one()))),
        f_x: Some(zero_field()),
        f_y: Some(zero_field()),
        f_z: Some(zero_field()),
        h_x: Some(zero_field()),
        h_y: Some(h_y),
        h_z: Some(h_z),
    });
    Ok(FbdsdeProblem::new(1, 1, 1, horizon, vec![x0], coeffs)?.with_benchmark(id))
}

/// Exact solution of a benchmark problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSolution<S> {
    pub id: BenchmarkId,
    pub param: S,
    pub x0: S,
    pub horizon: S,
}

impl<S: Scalar> BenchmarkSolution<S> {
    pub fn new(id: BenchmarkId, param: S, x0: S, horizon: S) -> Self {
        Self { id, param, x0, horizon }
    }

    /// `exp(gamma (B_T - B_t) - gamma^2 (T - t) / 2)`.
    fn exponential(&self, t: S, b_tail: S) -> S {
        let g = self.param;
        (g * b_tail - g * g * (self.horizon - t) / S::lit(2.0)).exp()
    }

    /// `Y_t` given `W_t` and `B_T - B_t`.
    pub fn y_ref(&self, t: S, w: S, b_tail: S) -> S {
        match self.id {
            BenchmarkId::Trivial => self.x0 + w,
            BenchmarkId::LinearZ => self.x0 + w + self.param * b_tail,
            BenchmarkId::LinearY => (self.x0 + w) * self.exponential(t, b_tail),
        }
    }

    /// `Z_t` given `B_T - B_t`.
    pub fn z_ref(&self, t: S, b_tail: S) -> S {
        match self.id {
            BenchmarkId::Trivial | BenchmarkId::LinearZ => S::one(),
            BenchmarkId::LinearY => self.exponential(t, b_tail),
        }
    }
}

/// Node-wise exact `(Y, Z)` on the bundle's grid, each `[M x (N+1)]`.
pub fn analytic_solution<S: Scalar>(
    solution: &BenchmarkSolution<S>,
    bundle: &PathBundle<S>,
) -> Result<(Vec<S>, Vec<S>)> {
    if bundle.d != 1 || bundle.l != 1 {
        return Err(Error::Validation(format!(
            "benchmark {} is one-dimensional, bundle has d={}, l={}",
            solution.id, bundle.d, bundle.l
        )));
    }
    let n_steps = bundle.steps();
    let nodes = n_steps + 1;
    let tail = bundle.b_tail();
    let z_node: Vec<S> = (0..nodes)
        .map(|n| solution.z_ref(bundle.grid.time(n), tail[n]))
        .collect();
    let mut y = vec![S::zero(); bundle.samples * nodes];
    let mut z = vec![S::zero(); bundle.samples * nodes];
    y.par_chunks_mut(nodes)
        .zip(z.par_chunks_mut(nodes))
        .enumerate()
        .for_each(|(m, (yr, zr))| {
            let mut w = S::zero();
            for n in 0..nodes {
                yr[n] = solution.y_ref(bundle.grid.time(n), w, tail[n]);
                zr[n] = z_node[n];
                if n < n_steps {
                    w += bundle.dw_at(m, n)[0];
                }
            }
        });
    Ok((y, z))
}

/// Cell means of one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleCells {
    pub samples: usize,
    /// Means of the cells entering the maximum.
    pub max_mean: Vec<f64>,
    /// Within-bundle variances of the same cells.
    pub max_var: Vec<f64>,
    /// Weighted means of the cells entering the sum.
    pub sum_mean: Vec<f64>,
    /// Within-bundle variance of the per-sample total of the sum part.
    pub sum_total_var: f64,
}

/// Combined estimate of a `max + sum` statistic over bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct StatEstimate {
    pub value: f64,
    /// Standard error: spread of the bundle values when there are at least
    /// two bundles, the within-bundle variance otherwise.
    pub stderr: f64,
    pub max_part: f64,
    pub sum_part: f64,
    /// Index of the maximizing cell.
    pub argmax: usize,
    /// Bundle-averaged cells of the max part.
    pub max_cells: Vec<f64>,
    /// Bundle-averaged cells of the sum part.
    pub sum_cells: Vec<f64>,
    pub bundles: usize,
    pub samples: usize,
}

/// Averages cell means over bundles and evaluates the statistic.
pub fn combine(bundles: &[BundleCells]) -> Result<StatEstimate> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Validation("no bundles to combine".into()))?;
    for b in bundles {
        ensure_len("max cells", first.max_mean.len(), b.max_mean.len())?;
        ensure_len("sum cells", first.sum_mean.len(), b.sum_mean.len())?;
    }
    let p = bundles.len() as f64;
    let average = |pick: &dyn Fn(&BundleCells) -> &Vec<f64>, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| bundles.iter().map(|b| pick(b)[i]).sum::<f64>() / p)
            .collect()
    };
    let max_cells = average(&|b| &b.max_mean, first.max_mean.len());
    let sum_cells = average(&|b| &b.sum_mean, first.sum_mean.len());
    let mut argmax = 0;
    for (i, &v) in max_cells.iter().enumerate() {
        if v > max_cells[argmax] {
            argmax = i;
        }
    }
    let max_part = max_cells.get(argmax).copied().unwrap_or(0.0);
    let sum_part: f64 = sum_cells.iter().sum();
    let samples: usize = bundles.iter().map(|b| b.samples).sum();
    let stderr = if bundles.len() >= 2 {
        let g: Vec<f64> = bundles
            .iter()
            .map(|b| b.max_mean.get(argmax).copied().unwrap_or(0.0) + b.sum_mean.iter().sum::<f64>())
            .collect();
        let mean = g.iter().sum::<f64>() / p;
        let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (p - 1.0);
        (var / p).sqrt()
    } else {
        let var = first.max_var.get(argmax).copied().unwrap_or(0.0) + first.sum_total_var;
        (var / first.samples.max(1) as f64).sqrt()
    };
    Ok(StatEstimate {
        value: max_part + sum_part,
        stderr,
        max_part,
        sum_part,
        argmax,
        max_cells,
        sum_cells,
        bundles: bundles.len(),
        samples,
    })
}

/// Mean and variance over samples of `value(m)`.
fn moments(samples: usize, value: impl Fn(usize) -> f64) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for m in 0..samples {
        let v = value(m);
        let delta = v - mean;
        mean += delta / (m + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
    (mean, var)
}

fn max_cells(samples: usize, cells: usize, value: impl Fn(usize, usize) -> f64 + Sync) -> (Vec<f64>, Vec<f64>) {
    let pairs: Vec<(f64, f64)> = (0..cells)
        .into_par_iter()
        .map(|c| moments(samples, |m| value(c, m)))
        .collect();
    pairs.into_iter().unzip()
}

/// Weighted sum cells plus the variance of the per-sample total.
fn sum_cells(samples: usize, cells: usize, value: impl Fn(usize, usize) -> f64 + Sync) -> (Vec<f64>, f64) {
    let means: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|c| moments(samples, |m| value(c, m)).0)
        .collect();
    let totals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|m| (0..cells).map(|c| value(c, m)).sum())
        .collect();
    let (_, var) = moments(samples, |m| totals[m]);
    (means, var)
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

fn sq_norm<S: Scalar>(a: &[S]) -> f64 {
    a.iter().map(|x| x.as_f64().powi(2)).sum()
}

fn refinement<S: Scalar>(fine: &TimeGrid<S>, coarse: &TimeGrid<S>) -> Result<usize> {
    coarse.refinement_factor(fine).map_err(|_| {
        Error::Validation(format!(
            "fine grid with {} steps does not refine the coarse grid with {} steps",
            fine.steps(),
            coarse.steps()
        ))
    })
}

/// `Zbar_{t_n} = E_{t_n}[ int_{t_n}^{t_{n+1}} Z_s ds ] / h` with a left
/// Riemann sum on the fine grid and a regression on the coarse-node
/// features, `[M x (N+1) x q]` with `Zbar_{t_N} = 0`.
///
/// `z_fine` is `[M x (N_f+1) x q]`, `features` is `[M x (N+1) x d]`.
#[allow(clippy::too_many_arguments)]
pub fn compute_zbar<S: Scalar>(
    z_fine: &[S],
    q: usize,
    fine: &TimeGrid<S>,
    coarse: &TimeGrid<S>,
    features: &[S],
    d: usize,
    basis: &BasisSpec<S>,
) -> Result<Vec<S>> {
    let r = refinement(fine, coarse)?;
    let n_steps = coarse.steps();
    let fine_nodes = fine.steps() + 1;
    let samples = z_fine.len() / (fine_nodes * q).max(1);
    ensure_len("fine Z stream", samples * fine_nodes * q, z_fine.len())?;
    ensure_len("coarse features", samples * (n_steps + 1) * d, features.len())?;
    let delta = fine.step();
    let h = coarse.step();
    let mut out = vec![S::zero(); samples * (n_steps + 1) * q];
    for n in 0..n_steps {
        let mut responses = vec![S::zero(); samples * q];
        responses.par_chunks_mut(q).enumerate().for_each(|(m, o)| {
            for j in 0..r {
                let base = (m * fine_nodes + n * r + j) * q;
                for c in 0..q {
                    o[c] += delta * z_fine[base + c];
                }
            }
            for v in o.iter_mut() {
                *v /= h;
            }
        });
        let mut x = Vec::with_capacity(samples * d);
        for m in 0..samples {
            let base = (m * (n_steps + 1) + n) * d;
            x.extend_from_slice(&features[base..base + d]);
        }
        let (_, pred) = fit_predict(&x, d, &responses, q, basis)?;
        for m in 0..samples {
            let base = (m * (n_steps + 1) + n) * q;
            out[base..base + q].copy_from_slice(&pred[m * q..(m + 1) * q]);
        }
    }
    Ok(out)
}

/// The regularity statistic of one bundle with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularityStat {
    pub value: f64,
    pub stderr: f64,
    pub y_part: f64,
    pub z_part: f64,
    /// Per coarse interval: `int E|Z_s - Zbar_{t_n}|^2 ds` and
    /// `int E|Z_s - Zbar_{t_{n+1}}|^2 ds`.
    pub intervals: Vec<(f64, f64)>,
    pub cells: BundleCells,
}

/// `max_n sup_s E[|Y_s - Y_{t_n}|^2 + |Y_s - Y_{t_{n+1}}|^2]` plus
/// `sum_n int E[|Z_s - Zbar_{t_n}|^2 + |Z_s - Zbar_{t_{n+1}}|^2] ds`, with the supremum and integrals taken over fine-grid nodes.
///
/// `y_fine` is `[M x (N_f+1) x k]`, `z_fine` is `[M x (N_f+1) x q]` and
/// `zbar` is `[M x (N+1) x q]`.
#[allow(clippy::too_many_arguments)]
pub fn l2_regularity_stat<S: Scalar>(
    y_fine: &[S],
    k: usize,
    z_fine: &[S],
    q: usize,
    zbar: &[S],
    fine: &TimeGrid<S>,
    coarse: &TimeGrid<S>,
) -> Result<RegularityStat> {
    let r = refinement(fine, coarse)?;
    let n_steps = coarse.steps();
    let fine_nodes = fine.steps() + 1;
    let samples = y_fine.len() / (fine_nodes * k).max(1);
    ensure_len("fine Y stream", samples * fine_nodes * k, y_fine.len())?;
    ensure_len("fine Z stream", samples * fine_nodes * q, z_fine.len())?;
    ensure_len("Zbar", samples * (n_steps + 1) * q, zbar.len())?;
    let delta = fine.step().as_f64();
    let y = |m: usize, i: usize| &y_fine[(m * fine_nodes + i) * k..(m * fine_nodes + i + 1) * k];
    let z = |m: usize, i: usize| &z_fine[(m * fine_nodes + i) * q..(m * fine_nodes + i + 1) * q];
    let zb = |m: usize, n: usize| &zbar[(m * (n_steps + 1) + n) * q..(m * (n_steps + 1) + n + 1) * q];

    let y_width = r + 1;
    let (max_mean, max_var) = max_cells(samples, n_steps * y_width, |c, m| {
        let (n, j) = (c / y_width, c % y_width);
        let s = y(m, n * r + j);
        sq_dist(s, y(m, n * r)) + sq_dist(s, y(m, (n + 1) * r))
    });
    let (left, _) = sum_cells(samples, n_steps * r, |c, m| {
        let n = c / r;
        delta * sq_dist(z(m, c), zb(m, n))
    });
    let (right, _) = sum_cells(samples, n_steps * r, |c, m| {
        let n = c / r;
        delta * sq_dist(z(m, c), zb(m, n + 1))
    });
    let (sum_mean, sum_total_var) = sum_cells(samples, n_steps * r, |c, m| {
        let n = c / r;
        delta * (sq_dist(z(m, c), zb(m, n)) + sq_dist(z(m, c), zb(m, n + 1)))
    });
    let intervals = (0..n_steps)
        .map(|n| {
            (
                left[n * r..(n + 1) * r].iter().sum(),
                right[n * r..(n + 1) * r].iter().sum(),
            )
        })
        .collect();
    let cells = BundleCells {
        samples,
        max_mean,
        max_var,
        sum_mean,
        sum_total_var,
    };
    let est = combine(std::slice::from_ref(&cells))?;
    Ok(RegularityStat {
        value: est.value,
        stderr: est.stderr,
        y_part: est.max_part,
        z_part: est.sum_part,
        intervals,
        cells,
    })
}

/// The time-discretization error of one bundle with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStat {
    pub value: f64,
    pub stderr: f64,
    pub y_part: f64,
    pub z_part: f64,
    pub cells: BundleCells,
}

/// `max_n E|Y_{t_n} - Y^N_{t_n}|^2 + sum_n int_{t_n}^{t_{n+1}} E|Z_s - Z^N_{t_n}|^2 ds`
/// with the reference `Z` on a fine grid (left Riemann sum).
///
/// `y_ref` and `y` are `[M x (N+1) x k]`, `z_ref_fine` is
/// `[M x (N_f+1) x q]` and `z` is `[M x (N+1) x q]`.
#[allow(clippy::too_many_arguments)]
pub fn error_n_stat<S: Scalar>(
    y_ref: &[S],
    z_ref_fine: &[S],
    y: &[S],
    z: &[S],
    k: usize,
    q: usize,
    fine: &TimeGrid<S>,
    coarse: &TimeGrid<S>,
) -> Result<ErrorStat> {
    let r = refinement(fine, coarse)?;
    let n_steps = coarse.steps();
    let nodes = n_steps + 1;
    let fine_nodes = fine.steps() + 1;
    let samples = y.len() / (nodes * k).max(1);
    ensure_len("reference Y", samples * nodes * k, y_ref.len())?;
    ensure_len("scheme Y", samples * nodes * k, y.len())?;
    ensure_len("reference Z", samples * fine_nodes * q, z_ref_fine.len())?;
    ensure_len("scheme Z", samples * nodes * q, z.len())?;
    let delta = fine.step().as_f64();
    let (max_mean, max_var) = max_cells(samples, nodes, |n, m| {
        let base = (m * nodes + n) * k;
        sq_dist(&y_ref[base..base + k], &y[base..base + k])
    });
    let (sum_mean, sum_total_var) = sum_cells(samples, n_steps * r, |c, m| {
        let n = c / r;
        let fb = (m * fine_nodes + c) * q;
        let cb = (m * nodes + n) * q;
        delta * sq_dist(&z_ref_fine[fb..fb + q], &z[cb..cb + q])
    });
    let cells = BundleCells {
        samples,
        max_mean,
        max_var,
        sum_mean,
        sum_total_var,
    };
    let est = combine(std::slice::from_ref(&cells))?;
    Ok(ErrorStat {
        value: est.value,
        stderr: est.stderr,
        y_part: est.max_part,
        z_part: est.sum_part,
        cells,
    })
}

/// `E|Z_n - grad Y_n [grad X_n]^{-1} sigma(X_n)|^2` for every node `n < N`
/// as max cells. Samples with a degenerate flow are skipped.
pub fn representation_residual<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    forward: &ForwardPaths<S>,
    scheme: &SchemeOutput<S>,
    variational: &VariationalOutput<S>,
) -> Result<BundleCells> {
    if !forward.has_flow() {
        return Err(Error::Validation("representation needs the variational flow".into()));
    }
    ensure_len("scheme samples", forward.samples, scheme.samples)?;
    ensure_len("linearized samples", forward.samples, variational.samples)?;
    let (k, d) = (problem.k, problem.d);
    let n_steps = scheme.steps;
    let kept: Vec<usize> = (0..forward.samples).filter(|&m| !forward.degenerate[m]).collect();
    let (max_mean, max_var) = max_cells(kept.len(), n_steps, |n, i| {
        let m = kept[i];
        let mut tmp = vec![S::zero(); k * d];
        let mut sig = vec![S::zero(); d * d];
        let mut rep = vec![S::zero(); k * d];
        matmul(
            variational.grad_y_at(m, n),
            forward.grad_inv_at(m, n),
            k,
            d,
            d,
            &mut tmp,
        );
        problem.sigma(forward.x_at(m, n), &mut sig);
        matmul(&tmp, &sig, k, d, d, &mut rep);
        sq_dist(scheme.z_at(m, n), &rep)
    });
    Ok(BundleCells {
        samples: kept.len(),
        max_mean,
        max_var,
        sum_mean: Vec::new(),
        sum_total_var: 0.0,
    })
}

/// `E|Z_n|^2` for every node `n < N` as max cells.
pub fn z_moment_cells<S: Scalar>(scheme: &SchemeOutput<S>) -> BundleCells {
    let (max_mean, max_var) = max_cells(scheme.samples, scheme.steps, |n, m| sq_norm(scheme.z_at(m, n)));
    BundleCells {
        samples: scheme.samples,
        max_mean,
        max_var,
        sum_mean: Vec::new(),
        sum_total_var: 0.0,
    }
}

/// `E|Y_{n+1} - Y_n|^2` for every `n < N` as max cells.
pub fn y_increment_cells<S: Scalar>(scheme: &SchemeOutput<S>) -> BundleCells {
    let (max_mean, max_var) = max_cells(scheme.samples, scheme.steps, |n, m| {
        sq_dist(scheme.y_at(m, n + 1), scheme.y_at(m, n))
    });
    BundleCells {
        samples: scheme.samples,
        max_mean,
        max_var,
        sum_mean: Vec::new(),
        sum_total_var: 0.0,
    }
}

/// Least-squares line through `(log(1/N), log(statistic))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root mean square of the fit residuals in log space.
    pub residual: f64,
}

pub fn convergence_slope(points: &[(usize, f64)]) -> Result<SlopeFit> {
    if points.len() < 2 {
        return Err(Error::Validation(format!(
            "a slope needs at least two points, got {}",
            points.len()
        )));
    }
    if let Some(&(n, v)) = points.iter().find(|&&(n, v)| n == 0 || !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!(
            "slope points need N > 0 and a positive statistic, got ({n}, {v})"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| -(n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, v)| v.ln()).collect();
    let count = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / count;
    let my = ys.iter().sum::<f64>() / count;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Validation("slope points need at least two distinct N".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / count)
        .sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        residual,
    })
}

/// One row of a convergence or regularity report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub steps: usize,
    pub samples: usize,
    pub bundles: usize,
    pub value: f64,
    pub stderr: f64,
    /// Slope fitted on this and all previous rows (`None` for the first).
    pub slope_so_far: Option<f64>,
}

/// Per-`N` values of a statistic with the fitted rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub benchmark: BenchmarkId,
    pub rows: Vec<ReportRow>,
    pub fit: Option<SlopeFit>,
}

pub type ErrorReport = RateReport;
pub type RegularityReport = RateReport;

impl RateReport {
    pub fn new(benchmark: BenchmarkId) -> Self {
        Self {
            benchmark,
            rows: Vec::new(),
            fit: None,
        }
    }

    /// Appends the estimate for `steps` and refits the slope.
    pub fn push(&mut self, steps: usize, samples: usize, estimate: &StatEstimate) {
        self.rows.push(ReportRow {
            steps,
            samples,
            bundles: estimate.bundles,
            value: estimate.value,
            stderr: estimate.stderr,
            slope_so_far: None,
        });
        let points: Vec<(usize, f64)> = self.rows.iter().map(|r| (r.steps, r.value)).collect();
        self.fit = convergence_slope(&points).ok();
        if let Some(last) = self.rows.last_mut() {
            last.slope_so_far = self.fit.map(|f| f.slope);
        }
    }
}
