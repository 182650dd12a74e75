//! Forward Euler scheme for `X`, its first variation `grad X`, and the
//! Malliavin derivative `D_theta X` through the flow factorization.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{identity, invert, matmul};
use crate::paths::PathBundle;
use crate::problem::{FbdsdeProblem, TimeGrid};
use crate::scalar::Scalar;

/// Samples whose flow matrix has a condition number above this are flagged
/// degenerate and excluded from statistics.
pub const DEGENERATE_CONDITION: f64 = 1e12;

/// Discrete forward trajectories.
#[derive(Debug, Clone)]
pub struct ForwardPaths<S> {
    pub grid: TimeGrid<S>,
    pub samples: usize,
    pub d: usize,
    /// `[M x (N+1) x d]`
    pub x: Vec<S>,
    /// `[M x (N+1) x d x d]`, empty until the variational flow is computed.
    pub grad_x: Vec<S>,
    /// Per-node inverse of `grad_x`; `NaN` where the flow is degenerate.
    pub grad_x_inv: Vec<S>,
    /// One flag per sample.
    pub degenerate: Vec<bool>,
}

impl<S: Scalar> ForwardPaths<S> {
    pub fn x_at(&self, m: usize, n: usize) -> &[S] {
        let base = (m * (self.grid.steps() + 1) + n) * self.d;
        &self.x[base..base + self.d]
    }

    pub fn has_flow(&self) -> bool {
        !self.grad_x.is_empty()
    }

    pub fn grad_at(&self, m: usize, n: usize) -> &[S] {
        let dd = self.d * self.d;
        let base = (m * (self.grid.steps() + 1) + n) * dd;
        &self.grad_x[base..base + dd]
    }

    pub fn grad_inv_at(&self, m: usize, n: usize) -> &[S] {
        let dd = self.d * self.d;
        let base = (m * (self.grid.steps() + 1) + n) * dd;
        &self.grad_x_inv[base..base + dd]
    }

    /// States at node `n` as an `[M x d]` feature matrix.
    pub fn states_at(&self, n: usize) -> Vec<S> {
        let mut out = Vec::with_capacity(self.samples * self.d);
        for m in 0..self.samples {
            out.extend_from_slice(self.x_at(m, n));
        }
        out
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&f| f).count()
    }
}

fn check_dims<S: Scalar>(problem: &FbdsdeProblem<S>, bundle: &PathBundle<S>) -> Result<()> {
    if bundle.d != problem.d {
        return Err(Error::Shape {
            context: "W dimension of bundle",
            expected: problem.d,
            actual: bundle.d,
        });
    }
    if bundle.l != problem.l {
        return Err(Error::Shape {
            context: "B dimension of bundle",
            expected: problem.l,
            actual: bundle.l,
        });
    }
    Ok(())
}

fn non_finite<S: Scalar>(what: &'static str, node: usize, sample: usize, point: &[S]) -> Error {
    Error::NonFinite {
        what,
        node,
        sample,
        point: point.iter().map(|v| v.as_f64()).collect(),
    }
}

/// `X_{n+1} = X_n + h b(X_n) + sigma(X_n) Delta W_n` for every sample.
pub fn euler_forward<S: Scalar>(problem: &FbdsdeProblem<S>, bundle: &PathBundle<S>) -> Result<ForwardPaths<S>> {
    check_dims(problem, bundle)?;
    let d = problem.d;
    let n_steps = bundle.steps();
    let h = bundle.grid.step();
    let row = (n_steps + 1) * d;
    let mut x = vec![S::zero(); bundle.samples * row];
    x.par_chunks_mut(row)
        .enumerate()
        .try_for_each(|(m, path)| -> Result<()> {
            let mut drift = vec![S::zero(); d];
            let mut diff = vec![S::zero(); d * d];
            path[..d].copy_from_slice(&problem.x0);
            for n in 0..n_steps {
                let (head, tail) = path.split_at_mut((n + 1) * d);
                let cur = &head[n * d..];
                problem.b(cur, &mut drift);
                problem.sigma(cur, &mut diff);
                let dw = bundle.dw_at(m, n);
                let next = &mut tail[..d];
                for i in 0..d {
                    let mut v = cur[i] + h * drift[i];
                    for j in 0..d {
                        v += diff[i * d + j] * dw[j];
                    }
                    next[i] = v;
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(non_finite("forward state", n + 1, m, cur));
                }
            }
            Ok(())
        })?;
    Ok(ForwardPaths {
        grid: bundle.grid.clone(),
        samples: bundle.samples,
        d,
        x,
        grad_x: Vec::new(),
        grad_x_inv: Vec::new(),
        degenerate: vec![false; bundle.samples],
    })
}

/// One-step linear propagator `I + h grad b(x) + sum_i grad sigma^i(x) dW^i`.
fn step_matrix<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    x: &[S],
    dw: &[S],
    h: S,
    jb: &mut [S],
    js: &mut [S],
    out: &mut [S],
) {
    let d = problem.d;
    problem.jac_b(x, jb);
    problem.jac_sigma(x, js);
    for a in 0..d {
        for m in 0..d {
            let mut v = if a == m { S::one() } else { S::zero() };
            v += h * jb[a * d + m];
            for i in 0..d {
                v += js[(a * d + i) * d + m] * dw[i];
            }
            out[a * d + m] = v;
        }
    }
}

/// Euler scheme for `X` together with the first variation `grad X` and its
/// per-node inverse.
pub fn variational_flow<S: Scalar>(problem: &FbdsdeProblem<S>, bundle: &PathBundle<S>) -> Result<ForwardPaths<S>> {
    let mut paths = euler_forward(problem, bundle)?;
    let d = problem.d;
    let dd = d * d;
    let n_steps = bundle.steps();
    let h = bundle.grid.step();
    let row = (n_steps + 1) * dd;
    let mut grad = vec![S::zero(); bundle.samples * row];
    let mut grad_inv = vec![S::zero(); bundle.samples * row];
    let threshold = S::lit(DEGENERATE_CONDITION);
    let x = &paths.x;
    let degenerate: Vec<bool> = grad
        .par_chunks_mut(row)
        .zip(grad_inv.par_chunks_mut(row))
        .enumerate()
        .map(|(m, (g, gi))| {
            let mut jb = vec![S::zero(); dd];
            let mut js = vec![S::zero(); dd * d];
            let mut a = vec![S::zero(); dd];
            let eye = identity::<S>(d);
            g[..dd].copy_from_slice(&eye);
            let mut flagged = false;
            for n in 0..n_steps {
                let xn = &x[(m * (n_steps + 1) + n) * d..][..d];
                step_matrix(problem, xn, bundle.dw_at(m, n), h, &mut jb, &mut js, &mut a);
                let (head, tail) = g.split_at_mut((n + 1) * dd);
                matmul(&a, &head[n * dd..], d, d, d, &mut tail[..dd]);
            }
            for n in 0..=n_steps {
                let slot = &mut gi[n * dd..(n + 1) * dd];
                match invert(&g[n * dd..(n + 1) * dd], d) {
                    Some((inv, cond)) if cond.is_finite() && cond <= threshold => slot.copy_from_slice(&inv),
                    _ => {
                        flagged = true;
                        slot.fill(S::nan());
                    }
                }
            }
            flagged
        })
        .collect();
    paths.grad_x = grad;
    paths.grad_x_inv = grad_inv;
    paths.degenerate = degenerate;
    Ok(paths)
}

/// Malliavin derivative `D_theta X_s` for every sample and node, stored as
/// `[M x (N+1) x d x d]` with column `l` the derivative in the direction of
/// `W^l`.
#[derive(Debug, Clone)]
pub struct MalliavinDerivative<S> {
    pub theta: usize,
    pub d: usize,
    pub steps: usize,
    pub values: Vec<S>,
    pub degenerate: Vec<bool>,
}

impl<S: Scalar> MalliavinDerivative<S> {
    pub fn at(&self, m: usize, n: usize) -> &[S] {
        let dd = self.d * self.d;
        let base = (m * (self.steps + 1) + n) * dd;
        &self.values[base..base + dd]
    }

    /// Root mean square entrywise difference over non-degenerate samples
    /// and all nodes.
    pub fn rms_difference(&self, other: &MalliavinDerivative<S>) -> S {
        let dd = self.d * self.d;
        let row = (self.steps + 1) * dd;
        let mut acc = S::zero();
        let mut count = 0usize;
        for (m, (a, b)) in self.values.chunks(row).zip(other.values.chunks(row)).enumerate() {
            if self.degenerate[m] || other.degenerate[m] {
                continue;
            }
            acc += a.iter().zip(b).map(|(&u, &v)| (u - v) * (u - v)).sum::<S>();
            count += row;
        }
        if count == 0 {
            S::zero()
        } else {
            (acc / S::from_count(count)).sqrt()
        }
    }
}

/// `D_theta X_s = grad X_s [grad X_theta]^{-1} sigma(X_theta)` for
/// `s >= theta`, zero before `theta`.
pub fn malliavin_derivative_x<S: Scalar>(
    paths: &ForwardPaths<S>,
    theta: usize,
    problem: &FbdsdeProblem<S>,
) -> Result<MalliavinDerivative<S>> {
    if !paths.has_flow() {
        return Err(Error::Validation(
            "flow factorization needs the variational flow".into(),
        ));
    }
    let n_steps = paths.grid.steps();
    if theta > n_steps {
        return Err(Error::Validation(format!(
            "theta index {theta} outside grid with {n_steps} steps"
        )));
    }
    let d = paths.d;
    let dd = d * d;
    let row = (n_steps + 1) * dd;
    let mut values = vec![S::zero(); paths.samples * row];
    values.par_chunks_mut(row).enumerate().for_each(|(m, out)| {
        let mut sig = vec![S::zero(); dd];
        let mut tmp = vec![S::zero(); dd];
        problem.sigma(paths.x_at(m, theta), &mut sig);
        let inv_theta = paths.grad_inv_at(m, theta);
        for n in theta..=n_steps {
            matmul(paths.grad_at(m, n), inv_theta, d, d, d, &mut tmp);
            matmul(&tmp, &sig, d, d, d, &mut out[n * dd..(n + 1) * dd]);
        }
    });
    Ok(MalliavinDerivative {
        theta,
        d,
        steps: n_steps,
        values,
        degenerate: paths.degenerate.clone(),
    })
}

/// Propagates `init(m)` (a `d x d` matrix at node `theta`) forward with the
/// Euler scheme of the linear derivative equation.
fn propagate_linear<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    paths: &ForwardPaths<S>,
    theta: usize,
    init: impl Fn(usize, &mut [S]) + Sync,
) -> Result<Vec<S>> {
    check_dims(problem, bundle)?;
    let n_steps = bundle.steps();
    if theta > n_steps {
        return Err(Error::Validation(format!(
            "theta index {theta} outside grid with {n_steps} steps"
        )));
    }
    let d = problem.d;
    let dd = d * d;
    let h = bundle.grid.step();
    let row = (n_steps + 1) * dd;
    let mut values = vec![S::zero(); bundle.samples * row];
    values
        .par_chunks_mut(row)
        .enumerate()
        .try_for_each(|(m, out)| -> Result<()> {
            let mut jb = vec![S::zero(); dd];
            let mut js = vec![S::zero(); dd * d];
            let mut a = vec![S::zero(); dd];
            init(m, &mut out[theta * dd..(theta + 1) * dd]);
            for n in theta..n_steps {
                step_matrix(
                    problem,
                    paths.x_at(m, n),
                    bundle.dw_at(m, n),
                    h,
                    &mut jb,
                    &mut js,
                    &mut a,
                );
                let (head, tail) = out.split_at_mut((n + 1) * dd);
                matmul(&a, &head[n * dd..], d, d, d, &mut tail[..dd]);
                if tail[..dd].iter().any(|v| !v.is_finite()) {
                    return Err(non_finite("derivative flow", n + 1, m, paths.x_at(m, n)));
                }
            }
            Ok(())
        })?;
    Ok(values)
}

/// Direct Euler discretization of the linear equation satisfied by
/// `D_theta X`, started from `sigma(X_theta)`.
pub fn malliavin_derivative_x_direct<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    paths: &ForwardPaths<S>,
    theta: usize,
) -> Result<MalliavinDerivative<S>> {
    let values = propagate_linear(problem, bundle, paths, theta, |m, out| {
        problem.sigma(paths.x_at(m, theta), out)
    })?;
    Ok(MalliavinDerivative {
        theta,
        d: problem.d,
        steps: bundle.steps(),
        values,
        degenerate: vec![false; bundle.samples],
    })
}

/// Variational flow restarted from the identity at node `theta`.
pub fn restarted_flow<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    paths: &ForwardPaths<S>,
    theta: usize,
) -> Result<Vec<S>> {
    let d = problem.d;
    propagate_linear(problem, bundle, paths, theta, |_, out| {
        out.copy_from_slice(&identity::<S>(d))
    })
}
