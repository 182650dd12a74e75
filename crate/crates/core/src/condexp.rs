//! Conditional expectation estimators.
//!
//! Within a bundle the `B`-path is frozen, so `E_{t_n}[.]` reduces to a
//! conditional expectation given the forward state `X_{t_n}`. Two estimators
//! are provided: least-squares projection on a function basis of the state,
//! and brute-force nested simulation from a fixed state.

use rayon::prelude::*;

use crate::error::{ensure_len, Error, Result};
use crate::linalg::{cholesky, cholesky_solve, matvec, symmetric_eigenvalues};
use crate::paths::{substream, Domain, PathBundle};
use crate::problem::{FbdsdeProblem, TimeGrid};
use crate::scalar::Scalar;

/// Ridge damping relative to the trace of the Gram matrix.
pub const RIDGE_RELATIVE: f64 = 1e-10;

/// Iterative-refinement sweeps against the undamped Gram matrix after the
/// damped solve. Well-resolved directions lose the ridge bias; directions
/// with eigenvalues below the ridge stay damped.
pub const REFINEMENT_STEPS: usize = 2;

/// Default truncation box half-width, in sample standard deviations.
pub const DEFAULT_BOX_SD: f64 = 5.0;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Tensor Legendre polynomials of total degree at most `degree`.
    Polynomial { degree: usize },
    /// Indicators of a uniform partition of the box.
    Partition { cells_per_axis: usize },
}

/// Function basis for the regression estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec<S> {
    pub kind: BasisKind,
    /// Per-axis `(lo, hi)` truncation bounds. When absent, the box is the
    /// sample mean plus or minus five sample standard deviations.
    pub bounds: Option<Vec<(S, S)>>,
}

impl<S: Scalar> Default for BasisSpec<S> {
    fn default() -> Self {
        Self::polynomial(3)
    }
}

impl<S: Scalar> BasisSpec<S> {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            kind: BasisKind::Polynomial { degree },
            bounds: None,
        }
    }

    pub fn partition(cells_per_axis: usize) -> Self {
        Self {
            kind: BasisKind::Partition { cells_per_axis },
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(S, S)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let BasisKind::Partition { cells_per_axis: 0 } = self.kind {
            return Err(Error::Validation("partition needs at least one cell per axis".into()));
        }
        if let Some(b) = &self.bounds {
            ensure_len("basis bounds", d, b.len())?;
            if b.iter().any(|&(lo, hi)| !(hi > lo)) {
                return Err(Error::Validation("basis box must have positive volume".into()));
            }
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `poly3` or `part8`.
    pub fn label(&self) -> String {
        match self.kind {
            BasisKind::Polynomial { degree } => format!("poly{degree}"),
            BasisKind::Partition { cells_per_axis } => format!("part{cells_per_axis}"),
        }
    }

    /// Fixes the box (and frozen axes) from a feature sample.
    pub fn resolve(&self, features: &[S], d: usize) -> Result<ResolvedBasis<S>> {
        self.validate(d)?;
        let m = features.len() / d;
        let mut lo = vec![S::zero(); d];
        let mut hi = vec![S::zero(); d];
        let mut active = vec![true; d];
        for a in 0..d {
            let (mut mn, mut mx) = (S::infinity(), S::neg_infinity());
            let mut sum = S::zero();
            for i in 0..m {
                let v = features[i * d + a];
                mn = mn.min(v);
                mx = mx.max(v);
                sum += v;
            }
            // A constant feature carries no information: the axis only
            // supports constant functions.
            if m == 0 || !(mx > mn) {
                active[a] = false;
                lo[a] = mn - S::one();
                hi[a] = mn + S::one();
                continue;
            }
            match &self.bounds {
                Some(b) => {
                    lo[a] = b[a].0;
                    hi[a] = b[a].1;
                }
                None => {
                    let mean = sum / S::from_count(m);
                    let var = (0..m)
                        .map(|i| {
                            let c = features[i * d + a] - mean;
                            c * c
                        })
                        .sum::<S>()
                        / S::from_count(m);
                    let half = S::lit(DEFAULT_BOX_SD) * var.sqrt();
                    lo[a] = mean - half;
                    hi[a] = mean + half;
                }
            }
        }
        let exponents = match self.kind {
            BasisKind::Polynomial { degree } => total_degree_exponents(&active, degree),
            BasisKind::Partition { .. } => Vec::new(),
        };
        Ok(ResolvedBasis {
            kind: self.kind,
            d,
            lo,
            hi,
            active,
            exponents,
        })
    }
}

fn total_degree_exponents(active: &[bool], degree: usize) -> Vec<Vec<usize>> {
    let d = active.len();
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0usize; d];
        enumerate_exponents(active, 0, total, &mut current, &mut out);
    }
    out
}

fn enumerate_exponents(
    active: &[bool],
    axis: usize,
    remaining: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if axis == active.len() {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    if !active[axis] {
        current[axis] = 0;
        enumerate_exponents(active, axis + 1, remaining, current, out);
        return;
    }
    for e in (0..=remaining).rev() {
        current[axis] = e;
        enumerate_exponents(active, axis + 1, remaining - e, current, out);
    }
    current[axis] = 0;
}

/// Basis with a fixed box.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedBasis<S> {
    pub kind: BasisKind,
    pub d: usize,
    pub lo: Vec<S>,
    pub hi: Vec<S>,
    pub active: Vec<bool>,
    exponents: Vec<Vec<usize>>,
}

impl<S: Scalar> ResolvedBasis<S> {
    pub fn size(&self) -> usize {
        match self.kind {
            BasisKind::Polynomial { .. } => self.exponents.len(),
            BasisKind::Partition { cells_per_axis } => {
                let active = self.active.iter().filter(|&&a| a).count();
                cells_per_axis.pow(active as u32)
            }
        }
    }

    /// Feature clipped to the box and mapped to `[-1, 1]` per axis.
    fn scaled(&self, x: &[S], out: &mut [S]) {
        let two = S::lit(2.0);
        for a in 0..self.d {
            let v = x[a].max(self.lo[a]).min(self.hi[a]);
            out[a] = two * (v - self.lo[a]) / (self.hi[a] - self.lo[a]) - S::one();
        }
    }

    /// Evaluates every basis function at `x`.
    pub fn eval(&self, x: &[S], out: &mut [S]) {
        let mut u = vec![S::zero(); self.d];
        self.scaled(x, &mut u);
        match self.kind {
            BasisKind::Polynomial { degree } => {
                let mut legendre = vec![S::zero(); self.d * (degree + 1)];
                for a in 0..self.d {
                    let row = &mut legendre[a * (degree + 1)..(a + 1) * (degree + 1)];
                    row[0] = S::one();
                    if degree >= 1 {
                        row[1] = u[a];
                    }
                    for n in 1..degree {
                        let nn = S::from_count(n);
                        row[n + 1] = ((nn + nn + S::one()) * u[a] * row[n] - nn * row[n - 1]) / (nn + S::one());
                    }
                }
                for (j, exps) in self.exponents.iter().enumerate() {
                    let mut v = S::one();
                    for (a, &e) in exps.iter().enumerate() {
                        if e > 0 {
                            v *= legendre[a * (degree + 1) + e];
                        }
                    }
                    out[j] = v;
                }
            }
            BasisKind::Partition { cells_per_axis } => {
                out.fill(S::zero());
                let cells = S::from_count(cells_per_axis);
                let mut index = 0usize;
                for a in 0..self.d {
                    if !self.active[a] {
                        continue;
                    }
                    let pos = ((u[a] + S::one()) / S::lit(2.0) * cells)
                        .floor()
                        .to_usize()
                        .unwrap_or(0)
                        .min(cells_per_axis - 1);
                    index = index * cells_per_axis + pos;
                }
                out[index] = S::one();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    /// Euclidean norm of all training residuals.
    pub residual_norm: f64,
    pub samples: usize,
    pub basis_size: usize,
    /// Condition number of the damped normal equations.
    pub condition: f64,
    /// Damping added to the diagonal.
    pub ridge: f64,
}

/// Fitted projection of `q` response components onto a basis.
#[derive(Debug, Clone)]
pub struct CondExpFit<S> {
    pub basis: ResolvedBasis<S>,
    /// `[q x basis_size]`
    pub coefficients: Vec<S>,
    pub responses: usize,
    pub diagnostics: FitDiagnostics,
    /// Per-component residual variance.
    residual_variance: Vec<S>,
    /// Lower Cholesky factor of the damped Gram matrix (empty for partitions).
    gram_factor: Vec<S>,
    /// Per-cell sample counts (partitions only).
    cell_counts: Vec<usize>,
}

impl<S: Scalar> CondExpFit<S> {
    pub fn predict(&self, x: &[S], out: &mut [S]) {
        let p = self.basis.size();
        let mut phi = vec![S::zero(); p];
        self.basis.eval(x, &mut phi);
        self.combine(&phi, out);
    }

    fn combine(&self, phi: &[S], out: &mut [S]) {
        let p = phi.len();
        for (c, o) in out.iter_mut().enumerate().take(self.responses) {
            let coef = &self.coefficients[c * p..(c + 1) * p];
            *o = coef.iter().zip(phi).map(|(&a, &b)| a * b).sum();
        }
    }

    /// Predictions for a whole `[M x d]` feature matrix, `[M x q]` out.
    pub fn predict_many(&self, features: &[S]) -> Vec<S> {
        let d = self.basis.d;
        let q = self.responses;
        let m = features.len() / d;
        let mut out = vec![S::zero(); m * q];
        let p = self.basis.size();
        out.par_chunks_mut(q.max(1)).zip(features.par_chunks(d)).for_each_init(
            || vec![S::zero(); p],
            |phi, (o, x)| {
                self.basis.eval(x, phi);
                self.combine(phi, o);
            },
        );
        out
    }

    /// Standard error of the prediction at `x`, from the residual variance
    /// and the (damped) inverse Gram matrix.
    pub fn prediction_stderr(&self, x: &[S], out: &mut [S]) {
        let p = self.basis.size();
        let mut phi = vec![S::zero(); p];
        self.basis.eval(x, &mut phi);
        let leverage = if self.gram_factor.is_empty() {
            let cell = phi.iter().position(|&v| v > S::zero()).unwrap_or(0);
            match self.cell_counts.get(cell) {
                Some(&c) if c > 0 => S::one() / S::from_count(c),
                _ => S::infinity(),
            }
        } else {
            let mut solved = phi.clone();
            cholesky_solve(&self.gram_factor, p, &mut solved);
            phi.iter().zip(&solved).map(|(&a, &b)| a * b).sum()
        };
        for (o, &v) in out.iter_mut().zip(&self.residual_variance) {
            *o = (v * leverage).sqrt();
        }
    }
}

fn accumulate<S: Scalar>(basis: &ResolvedBasis<S>, features: &[S], responses: &[S], q: usize) -> (Vec<S>, Vec<S>) {
    let d = basis.d;
    let p = basis.size();
    let m = features.len() / d;
    // Fixed chunking and in-order reduction keep the sums independent of the
    // worker count.
    let partials: Vec<(Vec<S>, Vec<S>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut gram = vec![S::zero(); p * p];
            let mut rhs = vec![S::zero(); p * q];
            let mut phi = vec![S::zero(); p];
            for i in (c * CHUNK)..((c + 1) * CHUNK).min(m) {
                basis.eval(&features[i * d..(i + 1) * d], &mut phi);
                for a in 0..p {
                    if phi[a] == S::zero() {
                        continue;
                    }
                    for b in a..p {
                        gram[a * p + b] += phi[a] * phi[b];
                    }
                    for r in 0..q {
                        rhs[a * q + r] += phi[a] * responses[i * q + r];
                    }
                }
            }
            (gram, rhs)
        })
        .collect();
    let mut gram = vec![S::zero(); p * p];
    let mut rhs = vec![S::zero(); p * q];
    for (g, r) in partials {
        for (a, b) in gram.iter_mut().zip(g) {
            *a += b;
        }
        for (a, b) in rhs.iter_mut().zip(r) {
            *a += b;
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[a * p + b] = gram[b * p + a];
        }
    }
    (gram, rhs)
}

/// Least-squares projection of `[M x q]` responses on the basis evaluated at
/// `[M x d]` features. Returns the fit and the in-sample predictions.
pub fn fit_predict<S: Scalar>(
    features: &[S],
    d: usize,
    responses: &[S],
    q: usize,
    basis: &BasisSpec<S>,
) -> Result<(CondExpFit<S>, Vec<S>)> {
    if d == 0 || q == 0 {
        return Err(Error::Validation(
            "regression needs positive feature and response dimensions".into(),
        ));
    }
    let m = features.len() / d;
    ensure_len("regression features", m * d, features.len())?;
    ensure_len("regression responses", m * q, responses.len())?;
    let resolved = basis.resolve(features, d)?;
    let p = resolved.size();
    if m < p {
        return Err(Error::Estimator {
            reason: "fewer samples than basis functions".into(),
            samples: m,
            basis_size: p,
            condition: f64::INFINITY,
        });
    }
    let (gram, rhs) = accumulate(&resolved, features, responses, q);
    let trace: S = (0..p).map(|a| gram[a * p + a]).sum();
    let ridge = S::lit(RIDGE_RELATIVE) * trace;

    let mut coefficients = vec![S::zero(); q * p];
    let mut gram_factor = Vec::new();
    let mut cell_counts = Vec::new();
    let condition;
    match resolved.kind {
        BasisKind::Partition { .. } => {
            // Diagonal normal equations: cell means. Empty cells fall back to
            // the global mean so the fit stays defined everywhere.
            let global: Vec<S> = (0..q)
                .map(|r| (0..m).map(|i| responses[i * q + r]).sum::<S>() / S::from_count(m))
                .collect();
            let (mut dmin, mut dmax) = (S::infinity(), S::zero());
            for a in 0..p {
                let count = gram[a * p + a];
                cell_counts.push(count.to_usize().unwrap_or(0));
                if count > S::zero() {
                    dmin = dmin.min(count);
                    dmax = dmax.max(count);
                }
                for r in 0..q {
                    coefficients[r * p + a] = if count > S::zero() {
                        let target = rhs[a * q + r];
                        let mut c = target / (count + ridge);
                        for _ in 0..REFINEMENT_STEPS {
                            c += (target - count * c) / (count + ridge);
                        }
                        c
                    } else {
                        global[r]
                    };
                }
            }
            condition = (dmax + ridge) / (dmin + ridge);
        }
        BasisKind::Polynomial { .. } => {
            let eig = symmetric_eigenvalues(&gram, p);
            let emin = eig.iter().copied().fold(S::infinity(), S::min);
            let emax = eig.iter().copied().fold(S::zero(), S::max);
            condition = (emax + ridge) / (emin.max(S::zero()) + ridge);
            if !(emin > ridge) {
                return Err(Error::Estimator {
                    reason: "design matrix is rank deficient below the damping floor".into(),
                    samples: m,
                    basis_size: p,
                    condition: condition.as_f64(),
                });
            }
            let mut damped = gram.clone();
            for a in 0..p {
                damped[a * p + a] += ridge;
            }
            let l = cholesky(&damped, p).map_err(|_| Error::Estimator {
                reason: "normal equations are not positive definite".into(),
                samples: m,
                basis_size: p,
                condition: condition.as_f64(),
            })?;
            let mut col = vec![S::zero(); p];
            for r in 0..q {
                for a in 0..p {
                    col[a] = rhs[a * q + r];
                }
                let target = col.clone();
                cholesky_solve(&l, p, &mut col);
                let mut defect = vec![S::zero(); p];
                for _ in 0..REFINEMENT_STEPS {
                    matvec(&gram, &col, p, p, &mut defect);
                    for a in 0..p {
                        defect[a] = target[a] - defect[a];
                    }
                    cholesky_solve(&l, p, &mut defect);
                    for a in 0..p {
                        col[a] += defect[a];
                    }
                }
                coefficients[r * p..(r + 1) * p].copy_from_slice(&col);
            }
            gram_factor = l;
        }
    }

    let mut fit = CondExpFit {
        basis: resolved,
        coefficients,
        responses: q,
        diagnostics: FitDiagnostics {
            residual_norm: 0.0,
            samples: m,
            basis_size: p,
            condition: condition.as_f64(),
            ridge: ridge.as_f64(),
        },
        residual_variance: vec![S::zero(); q],
        gram_factor,
        cell_counts,
    };
    let predictions = fit.predict_many(features);
    let mut rss = vec![S::zero(); q];
    for i in 0..m {
        for r in 0..q {
            let e = responses[i * q + r] - predictions[i * q + r];
            rss[r] += e * e;
        }
    }
    let dof = S::from_count((m - p).max(1));
    fit.diagnostics.residual_norm = rss.iter().copied().sum::<S>().sqrt().as_f64();
    fit.residual_variance = rss.iter().map(|&v| v / dof).collect();
    Ok((fit, predictions))
}

/// Inner sample size and continuation length for the nested estimator.
#[derive(Debug, Clone, Copy)]
pub struct NestedSpec {
    pub inner_samples: usize,
    /// Number of forward steps simulated after the conditioning node.
    pub steps: usize,
}

/// One re-simulated continuation from a fixed state at node `node`.
pub struct Continuation<'a, S> {
    pub grid: &'a TimeGrid<S>,
    pub node: usize,
    pub d: usize,
    pub l: usize,
    /// States at nodes `node ..= node + steps`, `[(steps+1) x d]`.
    pub x: &'a [S],
    /// Fresh `W`-increments, `[steps x d]`.
    pub dw: &'a [S],
    /// Frozen `B`-increments from the bundle, `[steps x l]`.
    pub db: &'a [S],
}

impl<S: Scalar> Continuation<'_, S> {
    /// State `j` steps after the conditioning node.
    pub fn x_at(&self, j: usize) -> &[S] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn dw_at(&self, j: usize) -> &[S] {
        &self.dw[j * self.d..(j + 1) * self.d]
    }

    pub fn db_at(&self, j: usize) -> &[S] {
        &self.db[j * self.l..(j + 1) * self.l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedEstimate<S> {
    pub mean: Vec<S>,
    pub stderr: Vec<S>,
}

/// Address of the inner random stream: lane and stream within the nested
/// domain of the bundle's seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NestedSeed {
    pub lane: u64,
    pub stream: u64,
}

/// Brute-force `E_{t_n}[payoff]` from `state`: simulates fresh `W`
/// continuations with the bundle's frozen `B`-increments and averages the
/// `out_dim`-dimensional payoff.
#[allow(clippy::too_many_arguments)]
pub fn nested_mc_condexp<S, F>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    node: usize,
    state: &[S],
    spec: NestedSpec,
    seed: NestedSeed,
    out_dim: usize,
    mut payoff: F,
) -> Result<NestedEstimate<S>>
where
    S: Scalar,
    F: FnMut(&Continuation<'_, S>, &mut [S]),
{
    let n_steps = bundle.steps();
    if node >= n_steps {
        return Err(Error::Validation(format!(
            "nested estimator needs node < N, got {node} with N = {n_steps}"
        )));
    }
    if spec.inner_samples < 100 {
        return Err(Error::Validation(format!(
            "nested estimator needs at least 100 inner samples, got {}",
            spec.inner_samples
        )));
    }
    if spec.steps == 0 || node + spec.steps > n_steps {
        return Err(Error::Validation(format!(
            "continuation of {} steps from node {node} leaves the grid",
            spec.steps
        )));
    }
    let d = problem.d;
    ensure_len("nested state", d, state.len())?;
    let h = bundle.grid.step();
    let sqrt_h = h.sqrt();
    let mut rng = substream(
        bundle.seed.master_seed,
        bundle.seed.bundle_index,
        Domain::Nested,
        seed.lane,
        seed.stream,
    );
    let db = &bundle.db[node * bundle.l..(node + spec.steps) * bundle.l];
    let mut x = vec![S::zero(); (spec.steps + 1) * d];
    let mut dw = vec![S::zero(); spec.steps * d];
    let mut drift = vec![S::zero(); d];
    let mut diff = vec![S::zero(); d * d];
    let mut value = vec![S::zero(); out_dim];
    let mut mean = vec![S::zero(); out_dim];
    let mut m2 = vec![S::zero(); out_dim];
    for i in 0..spec.inner_samples {
        x[..d].copy_from_slice(state);
        for j in 0..spec.steps {
            for v in dw[j * d..(j + 1) * d].iter_mut() {
                *v = sqrt_h * S::standard_normal(&mut rng);
            }
            let (head, tail) = x.split_at_mut((j + 1) * d);
            let cur = &head[j * d..];
            problem.b(cur, &mut drift);
            problem.sigma(cur, &mut diff);
            for a in 0..d {
                let mut v = cur[a] + h * drift[a];
                for c in 0..d {
                    v += diff[a * d + c] * dw[j * d + c];
                }
                tail[a] = v;
            }
            if tail[..d].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "nested forward state",
                    node: node + j + 1,
                    sample: i,
                    point: cur.iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
        let cont = Continuation {
            grid: &bundle.grid,
            node,
            d,
            l: bundle.l,
            x: &x,
            dw: &dw,
            db,
        };
        payoff(&cont, &mut value);
        let count = S::from_count(i + 1);
        for c in 0..out_dim {
            let delta = value[c] - mean[c];
            mean[c] += delta / count;
            m2[c] += delta * (value[c] - mean[c]);
        }
    }
    let n = S::from_count(spec.inner_samples);
    let stderr = m2.iter().map(|&v| (v / (n - S::one()) / n).sqrt()).collect();
    Ok(NestedEstimate { mean, stderr })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::paths::{sample_bundle, SeedSpec};
    use crate::problem::{make_uniform_grid, CoefficientSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(m: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m * d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
    }

    #[test]
    fn constants_give_sample_mean() {
        let x = cloud(200, 2, 1);
        let y: Vec<f64> = (0..200).map(|i| (i as f64).sin()).collect();
        let (fit, pred) = fit_predict(&x, 2, &y, 1, &BasisSpec::polynomial(0)).unwrap();
        let mean = y.iter().sum::<f64>() / 200.0;
        assert_eq!(fit.basis.size(), 1);
        for p in pred {
            assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_responses_are_reproduced() {
        let x = cloud(300, 2, 2);
        let y: Vec<f64> = x
            .chunks(2)
            .flat_map(|r| [1.0 + 2.0 * r[0] - 0.5 * r[1], -3.0 + r[1]])
            .collect();
        for degree in [1, 2, 3] {
            let (_, pred) = fit_predict(&x, 2, &y, 2, &BasisSpec::polynomial(degree)).unwrap();
            for (p, t) in pred.iter().zip(&y) {
                assert!((p - t).abs() < 1e-10, "degree {degree}: {p} vs {t}");
            }
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_basis() {
        let x = cloud(500, 1, 3);
        let y: Vec<f64> = x.iter().map(|v| (3.0 * v).sin() + 0.1 * v * v * v * v).collect();
        let (fit, pred) = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(3)).unwrap();
        let p = fit.basis.size();
        let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut phi = vec![0.0; p];
        let mut sums = vec![0.0; p];
        for i in 0..500 {
            fit.basis.eval(&x[i..i + 1], &mut phi);
            for j in 0..p {
                sums[j] += (y[i] - pred[i]) * phi[j];
            }
        }
        for s in sums {
            assert!(s.abs() <= 1e-8 * 500.0 * scale, "{s}");
        }
    }

    #[test]
    fn constant_features_reduce_to_mean() {
        let x = vec![0.7; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let (fit, pred) = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(3)).unwrap();
        assert_eq!(fit.basis.size(), 1);
        assert!((pred[0] - 24.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_is_an_estimator_error() {
        let x = cloud(3, 1, 4);
        let err = fit_predict(&x, 1, &[1.0, 2.0, 3.0], 1, &BasisSpec::polynomial(3)).unwrap_err();
        assert!(matches!(err, Error::Estimator { basis_size: 4, .. }));
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        // Two distinct feature values cannot support a cubic.
        let x: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let y = vec![1.0; 100];
        let err = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(3)).unwrap_err();
        match err {
            Error::Estimator {
                samples, basis_size, ..
            } => {
                assert_eq!(samples, 100);
                assert_eq!(basis_size, 4);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn invalid_basis_is_rejected() {
        let x = cloud(10, 1, 5);
        assert!(fit_predict(&x, 1, &x, 1, &BasisSpec::partition(0)).is_err());
        let bad = BasisSpec::polynomial(1).with_bounds(vec![(1.0, 1.0)]);
        assert!(fit_predict(&x, 1, &x, 1, &bad).is_err());
    }

    #[test]
    fn partition_gives_cell_means() {
        let x: Vec<f64> = vec![-0.9, -0.8, 0.1, 0.2, 0.3];
        let y = vec![1.0, 3.0, 10.0, 20.0, 30.0];
        let basis = BasisSpec::partition(2).with_bounds(vec![(-1.0, 1.0)]);
        let (_, pred) = fit_predict(&x, 1, &y, 1, &basis).unwrap();
        assert!((pred[0] - 2.0).abs() < 1e-9 && (pred[1] - 2.0).abs() < 1e-9);
        for p in &pred[2..] {
            assert!((p - 20.0).abs() < 1e-8);
        }
    }

    #[test]
    fn prediction_stderr_shrinks_with_samples() {
        let se_at = |m: usize| {
            let x = cloud(m, 1, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random::<f64>() - 0.5).collect();
            let (fit, _) = fit_predict(&x, 1, &y, 1, &BasisSpec::polynomial(1)).unwrap();
            let mut se = [0.0];
            fit.prediction_stderr(&[0.0], &mut se);
            se[0]
        };
        let small = se_at(100);
        let large = se_at(10_000);
        // Uniform noise has variance 1/12; at the centre the leverage is ~1/M.
        assert!((large - (1.0f64 / 12.0 / 10_000.0).sqrt()).abs() < 2e-4);
        assert!(small > 5.0 * large);
    }

    fn unit_problem() -> FbdsdeProblem<f64> {
        let c = CoefficientSet::new(
            Arc::new(|_, o: &mut [f64]| o[0] = 0.0),
            Arc::new(|_, o: &mut [f64]| o[0] = 1.0),
            Arc::new(|_, _, _, _, o: &mut [f64]| o[0] = 0.0),
            Arc::new(|_, _, _, _, o: &mut [f64]| o[0] = 0.0),
            Arc::new(|x, o| o[0] = x[0]),
            1.0,
            0.0,
        )
        .unwrap();
        FbdsdeProblem::new(1, 1, 1, 1.0, vec![0.0], c).unwrap()
    }

    #[test]
    fn nested_martingale_increment_has_zero_mean() {
        let p = unit_problem();
        let b = sample_bundle(SeedSpec::new(1, 0), &make_uniform_grid(1.0, 4).unwrap(), 1, 1, 1).unwrap();
        let spec = NestedSpec {
            inner_samples: 4000,
            steps: 1,
        };
        let est = nested_mc_condexp(&p, &b, 1, &[0.3], spec, NestedSeed { lane: 0, stream: 0 }, 1, |c, o| {
            o[0] = c.dw_at(0)[0]
        })
        .unwrap();
        assert!(est.mean[0].abs() <= 4.0 * est.stderr[0]);
        assert!((est.stderr[0] - (0.25f64 / 4000.0).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn nested_driftless_mean_is_state() {
        let p = unit_problem();
        let b = sample_bundle(SeedSpec::new(2, 0), &make_uniform_grid(1.0, 4).unwrap(), 1, 1, 1).unwrap();
        let spec = NestedSpec {
            inner_samples: 4000,
            steps: 2,
        };
        let est = nested_mc_condexp(&p, &b, 2, &[1.7], spec, NestedSeed { lane: 0, stream: 1 }, 1, |c, o| {
            o[0] = c.x_at(1)[0]
        })
        .unwrap();
        assert!((est.mean[0] - 1.7).abs() <= 4.0 * est.stderr[0]);
    }

    #[test]
    fn nested_uses_frozen_b_path() {
        let p = unit_problem();
        let b = sample_bundle(SeedSpec::new(3, 0), &make_uniform_grid(1.0, 4).unwrap(), 1, 1, 1).unwrap();
        let spec = NestedSpec {
            inner_samples: 100,
            steps: 3,
        };
        let est = nested_mc_condexp(&p, &b, 1, &[0.0], spec, NestedSeed { lane: 0, stream: 0 }, 1, |c, o| {
            o[0] = c.db_at(0)[0] + c.db_at(2)[0]
        })
        .unwrap();
        assert_eq!(est.mean[0], b.db[1] + b.db[3]);
        assert_eq!(est.stderr[0], 0.0);
    }

    #[test]
    fn nested_preconditions() {
        let p = unit_problem();
        let b = sample_bundle(SeedSpec::new(3, 0), &make_uniform_grid(1.0, 4).unwrap(), 1, 1, 1).unwrap();
        let seed = NestedSeed { lane: 0, stream: 0 };
        let f = |_: &Continuation<'_, f64>, o: &mut [f64]| o[0] = 0.0;
        assert!(nested_mc_condexp(
            &p,
            &b,
            4,
            &[0.0],
            NestedSpec {
                inner_samples: 100,
                steps: 1
            },
            seed,
            1,
            f
        )
        .is_err());
        assert!(nested_mc_condexp(
            &p,
            &b,
            0,
            &[0.0],
            NestedSpec {
                inner_samples: 99,
                steps: 1
            },
            seed,
            1,
            f
        )
        .is_err());
        assert!(nested_mc_condexp(
            &p,
            &b,
            2,
            &[0.0],
            NestedSpec {
                inner_samples: 100,
                steps: 3
            },
            seed,
            1,
            f
        )
        .is_err());
    }
}
