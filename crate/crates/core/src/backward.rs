//! Backward scheme for `(Y, Z)` and the linearized scheme for `grad Y`.
//!
//! Each step regresses on the forward state at the current node. With
//! control variates enabled the responses are shifted by mean-zero terms
//! built from the previous node's `Z` fit, which leaves the conditional
//! expectations unchanged and removes the `1/h` noise amplification of the
//! `Z` regression.

use std::io::Write;

use rayon::prelude::*;

use crate::condexp::{fit_predict, nested_mc_condexp, BasisSpec, CondExpFit, FitDiagnostics, NestedSeed, NestedSpec};
use crate::error::{ensure_len, Error, Result};
use crate::forward::ForwardPaths;
use crate::paths::PathBundle;
use crate::problem::{Arg, FbdsdeProblem};
use crate::scalar::Scalar;

pub const PICARD_TOL: f64 = 1e-12;
pub const PICARD_MAX_ITER: usize = 50;

/// Conditional expectation estimator used by the backward scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator<S> {
    /// Least-squares regression on the forward state.
    Regression(BasisSpec<S>),
    /// Pointwise nested simulation at every outer state; `fit_basis` builds
    /// the node maps that the next step evaluates at inner states.
    Nested {
        inner_samples: usize,
        fit_basis: BasisSpec<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeOptions<S> {
    pub estimator: Estimator<S>,
    pub control_variates: bool,
    pub picard_tol: S,
    pub picard_max_iter: usize,
}

impl<S: Scalar> SchemeOptions<S> {
    pub fn regression(basis: BasisSpec<S>) -> Self {
        Self {
            estimator: Estimator::Regression(basis),
            control_variates: true,
            picard_tol: S::lit(PICARD_TOL),
            picard_max_iter: PICARD_MAX_ITER,
        }
    }

    pub fn nested(inner_samples: usize, fit_basis: BasisSpec<S>) -> Self {
        Self {
            estimator: Estimator::Nested {
                inner_samples,
                fit_basis,
            },
            control_variates: false,
            picard_tol: S::lit(PICARD_TOL),
            picard_max_iter: PICARD_MAX_ITER,
        }
    }

    pub fn with_control_variates(mut self, on: bool) -> Self {
        self.control_variates = on;
        self
    }
}

impl<S: Scalar> Default for SchemeOptions<S> {
    fn default() -> Self {
        Self::regression(BasisSpec::default())
    }
}

/// Estimator diagnostics and Picard counts at one node `n < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagnostics {
    pub node: usize,
    pub y_fit: FitDiagnostics,
    pub z_fit: FitDiagnostics,
    pub picard_max: usize,
    pub picard_mean: f64,
}

/// Fitted maps `x -> Y_n` (or the continuation value) and `x -> Z_n`.
#[derive(Debug, Clone)]
pub struct NodeFits<S> {
    pub y: CondExpFit<S>,
    pub z: CondExpFit<S>,
}

#[derive(Debug, Clone)]
pub struct SchemeOutput<S> {
    pub samples: usize,
    pub steps: usize,
    pub k: usize,
    pub d: usize,
    /// `[M x (N+1) x k]`
    pub y: Vec<S>,
    /// `[M x (N+1) x k x d]`
    pub z: Vec<S>,
    /// One entry per node `0..N`.
    pub diagnostics: Vec<NodeDiagnostics>,
    /// Per-sample oracle standard errors (nested estimator only), same
    /// layouts as `y` and `z`; zero at the terminal node.
    pub y_stderr: Option<Vec<S>>,
    pub z_stderr: Option<Vec<S>>,
    /// Node maps for `0..N`.
    pub fits: Vec<NodeFits<S>>,
}

impl<S: Scalar> SchemeOutput<S> {
    pub fn y_at(&self, m: usize, n: usize) -> &[S] {
        let base = (m * (self.steps + 1) + n) * self.k;
        &self.y[base..base + self.k]
    }

    pub fn z_at(&self, m: usize, n: usize) -> &[S] {
        let kd = self.k * self.d;
        let base = (m * (self.steps + 1) + n) * kd;
        &self.z[base..base + kd]
    }

    pub fn picard_iterations(&self) -> Vec<usize> {
        self.diagnostics.iter().map(|d| d.picard_max).collect()
    }

    /// Per-node sample statistics and fit diagnostics as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "node,mean_y,mean_sq_y,mean_sq_z,picard_max,picard_mean,y_residual_norm,y_condition,z_residual_norm,z_condition,basis_size"
        )?;
        let m = self.samples.max(1) as f64;
        for n in 0..=self.steps {
            let (mut sy, mut syy, mut szz) = (0.0, 0.0, 0.0);
            for s in 0..self.samples {
                let y = self.y_at(s, n);
                sy += y.iter().map(|v| v.as_f64()).sum::<f64>();
                syy += y.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
                szz += self.z_at(s, n).iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
            write!(w, "{n},{:e},{:e},{:e}", sy / m, syy / m, szz / m)?;
            match self.diagnostics.get(n) {
                Some(d) => writeln!(
                    w,
                    ",{},{},{:e},{:e},{:e},{:e},{}",
                    d.picard_max,
                    d.picard_mean,
                    d.y_fit.residual_norm,
                    d.y_fit.condition,
                    d.z_fit.residual_norm,
                    d.z_fit.condition,
                    d.y_fit.basis_size
                )?,
                None => writeln!(w, ",0,0,0,0,0,0,0")?,
            }
        }
        Ok(())
    }
}

/// Fixed point of `y = rhs + h f(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardSolution<S> {
    pub y: Vec<S>,
    /// Number of updates that moved the iterate by more than the tolerance.
    pub iterations: usize,
}

/// Picard iteration for `y = rhs + h f(y)` started from `rhs`. Stops once an
/// update moves the iterate by at most `tol * max(1, |y|)`.
pub fn picard_implicit_step<S, F>(rhs: &[S], h: S, tol: S, max_iter: usize, mut f: F) -> Result<PicardSolution<S>>
where
    S: Scalar,
    F: FnMut(&[S], &mut [S]),
{
    let k = rhs.len();
    let mut y = rhs.to_vec();
    let mut fy = vec![S::zero(); k];
    let mut residual = S::zero();
    for iterations in 0..=max_iter {
        f(&y, &mut fy);
        let mut change = S::zero();
        let mut size = S::zero();
        for i in 0..k {
            let next = rhs[i] + h * fy[i];
            let delta = next - y[i];
            change += delta * delta;
            size += next * next;
            y[i] = next;
        }
        if !change.is_finite() {
            break;
        }
        residual = change.sqrt();
        if residual <= tol * size.sqrt().max(S::one()) {
            return Ok(PicardSolution { y, iterations });
        }
    }
    Err(Error::PicardDivergence {
        node: 0,
        iterations: max_iter,
        residual: residual.as_f64(),
    })
}

fn check_inputs<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    forward: &ForwardPaths<S>,
) -> Result<()> {
    ensure_len("forward paths sample count", bundle.samples, forward.samples)?;
    ensure_len("forward paths steps", bundle.steps(), forward.grid.steps())?;
    ensure_len("forward paths dimension", problem.d, forward.d)?;
    ensure_len("W dimension of bundle", problem.d, bundle.d)?;
    ensure_len("B dimension of bundle", problem.l, bundle.l)?;
    let hk = bundle.grid.step() * problem.coeffs.lipschitz();
    if !(hk < S::one()) {
        return Err(Error::PicardPrecondition(hk.as_f64()));
    }
    Ok(())
}

/// Regression estimates of `E_n[R]` and `E_n[R dW^T] / h` for a `q`-vector
/// response, with optional mean-zero controls `c`:
/// `E_n[R - c dW]` and `E_n[((R - cont) dW^T - c (dW dW^T - h I)) / h]`.
struct RegressionStep<S> {
    cont: Vec<S>,
    z: Vec<S>,
    fits: NodeFits<S>,
}

#[allow(clippy::too_many_arguments)]
fn regression_step<S: Scalar>(
    features: &[S],
    d: usize,
    dw: &[S],
    h: S,
    responses: &[S],
    q: usize,
    control: Option<&[S]>,
    exclude: Option<&[bool]>,
    basis: &BasisSpec<S>,
) -> Result<RegressionStep<S>> {
    let m = features.len() / d;
    let qd = q * d;
    let mut y_resp = responses.to_vec();
    if let Some(c) = control {
        y_resp.par_chunks_mut(q).enumerate().for_each(|(i, r)| {
            let w = &dw[i * d..(i + 1) * d];
            let ci = &c[i * qd..(i + 1) * qd];
            for a in 0..q {
                r[a] -= (0..d).map(|j| ci[a * d + j] * w[j]).sum::<S>();
            }
        });
    }
    let (y_fit, cont) = fit_masked(features, d, &y_resp, q, exclude, basis)?;
    let mut z_resp = vec![S::zero(); m * qd];
    z_resp.par_chunks_mut(qd).enumerate().for_each(|(i, out)| {
        let w = &dw[i * d..(i + 1) * d];
        for a in 0..q {
            let dev = responses[i * q + a] - cont[i * q + a];
            for j in 0..d {
                let mut v = dev * w[j];
                if let Some(c) = control {
                    let ci = &c[i * qd..(i + 1) * qd];
                    for e in 0..d {
                        let mut ww = w[e] * w[j];
                        if e == j {
                            ww -= h;
                        }
                        v -= ci[a * d + e] * ww;
                    }
                }
                out[a * d + j] = v / h;
            }
        }
    });
    let (z_fit, z) = fit_masked(features, d, &z_resp, qd, exclude, basis)?;
    Ok(RegressionStep {
        cont,
        z,
        fits: NodeFits { y: y_fit, z: z_fit },
    })
}

/// Fits on the rows not excluded and predicts on every row.
fn fit_masked<S: Scalar>(
    features: &[S],
    d: usize,
    responses: &[S],
    q: usize,
    exclude: Option<&[bool]>,
    basis: &BasisSpec<S>,
) -> Result<(CondExpFit<S>, Vec<S>)> {
    match exclude {
        Some(mask) if mask.iter().any(|&e| e) => {
            let mut xf = Vec::new();
            let mut rf = Vec::new();
            for (i, &skip) in mask.iter().enumerate() {
                if !skip {
                    xf.extend_from_slice(&features[i * d..(i + 1) * d]);
                    rf.extend_from_slice(&responses[i * q..(i + 1) * q]);
                }
            }
            let (fit, _) = fit_predict(&xf, d, &rf, q, basis)?;
            let pred = fit.predict_many(features);
            Ok((fit, pred))
        }
        _ => fit_predict(features, d, responses, q, basis),
    }
}

/// `R = Y + h(t, x, Y, Z) dB` for one sample.
#[allow(clippy::too_many_arguments)]
fn response<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    t: S,
    x: &[S],
    y: &[S],
    z: &[S],
    db: &[S],
    hbuf: &mut [S],
    out: &mut [S],
) {
    let (k, l) = (problem.k, problem.l);
    problem.h(t, x, y, z, hbuf);
    for a in 0..k {
        out[a] = y[a] + (0..l).map(|c| hbuf[a * l + c] * db[c]).sum::<S>();
    }
}

fn picard_stats(iterations: &[usize]) -> (usize, f64) {
    let max = iterations.iter().copied().max().unwrap_or(0);
    let mean = if iterations.is_empty() {
        0.0
    } else {
        iterations.iter().sum::<usize>() as f64 / iterations.len() as f64
    };
    (max, mean)
}

/// Implicit `Y`-step for every sample at node `n`.
#[allow(clippy::too_many_arguments)]
fn implicit_y<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    forward: &ForwardPaths<S>,
    node: usize,
    cont: &[S],
    z: &[S],
    options: &SchemeOptions<S>,
    y_out: &mut [S],
) -> Result<Vec<usize>> {
    let (k, d) = (problem.k, problem.d);
    let h = forward.grid.step();
    let t = forward.grid.time(node);
    y_out
        .par_chunks_mut(k)
        .enumerate()
        .map(|(m, out)| {
            let x = forward.x_at(m, node);
            let zm = &z[m * k * d..(m + 1) * k * d];
            let sol = picard_implicit_step(
                &cont[m * k..(m + 1) * k],
                h,
                options.picard_tol,
                options.picard_max_iter,
                |y, o| problem.f(t, x, y, zm, o),
            )
            .map_err(|e| match e {
                Error::PicardDivergence {
                    iterations, residual, ..
                } => Error::PicardDivergence {
                    node,
                    iterations,
                    residual,
                },
                other => other,
            })?;
            if sol.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "backward value",
                    node,
                    sample: m,
                    point: x.iter().map(|v| v.as_f64()).collect(),
                });
            }
            out.copy_from_slice(&sol.y);
            Ok(sol.iterations)
        })
        .collect()
}

/// Runs the backward scheme from `Y_N = Phi(X_N)`, `Z_N = 0` down to node 0.
pub fn backward_scheme<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    forward: &ForwardPaths<S>,
    options: &SchemeOptions<S>,
) -> Result<SchemeOutput<S>> {
    check_inputs(problem, bundle, forward)?;
    match &options.estimator {
        Estimator::Regression(basis) => regression_scheme(problem, bundle, forward, options, basis),
        Estimator::Nested {
            inner_samples,
            fit_basis,
        } => nested_scheme(problem, bundle, forward, options, *inner_samples, fit_basis),
    }
}

fn terminal<S: Scalar>(problem: &FbdsdeProblem<S>, forward: &ForwardPaths<S>) -> Result<(Vec<S>, Vec<S>)> {
    let (k, d) = (problem.k, problem.d);
    let n_steps = forward.grid.steps();
    let m_count = forward.samples;
    let mut y = vec![S::zero(); m_count * (n_steps + 1) * k];
    let z = vec![S::zero(); m_count * (n_steps + 1) * k * d];
    let row = (n_steps + 1) * k;
    for m in 0..m_count {
        let out = &mut y[m * row + n_steps * k..m * row + (n_steps + 1) * k];
        let x = forward.x_at(m, n_steps);
        problem.phi(x, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "terminal condition",
                node: n_steps,
                sample: m,
                point: x.iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    Ok((y, z))
}

fn node_slice<S: Copy>(data: &[S], samples: usize, nodes: usize, width: usize, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(samples * width);
    for m in 0..samples {
        let base = (m * nodes + n) * width;
        out.extend_from_slice(&data[base..base + width]);
    }
    out
}

fn scatter<S: Copy>(data: &mut [S], values: &[S], nodes: usize, width: usize, n: usize) {
    for (m, v) in values.chunks(width).enumerate() {
        let base = (m * nodes + n) * width;
        data[base..base + width].copy_from_slice(v);
    }
}

/// Representation value `grad Phi(x) sigma(x)` used as the control for the
/// last step.
fn terminal_control<S: Scalar>(problem: &FbdsdeProblem<S>, features: &[S]) -> Vec<S> {
    let (k, d) = (problem.k, problem.d);
    let m = features.len() / d;
    let mut out = vec![S::zero(); m * k * d];
    out.par_chunks_mut(k * d).zip(features.par_chunks(d)).for_each_init(
        || (vec![S::zero(); k * d], vec![S::zero(); d * d]),
        |(jp, sg), (o, x)| {
            problem.jac_phi(x, jp);
            problem.sigma(x, sg);
            crate::linalg::matmul(jp, sg, k, d, d, o);
        },
    );
    out
}

fn regression_scheme<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    forward: &ForwardPaths<S>,
    options: &SchemeOptions<S>,
    basis: &BasisSpec<S>,
) -> Result<SchemeOutput<S>> {
    let (k, d, l) = (problem.k, problem.d, problem.l);
    let kd = k * d;
    let n_steps = bundle.steps();
    let nodes = n_steps + 1;
    let m_count = bundle.samples;
    let h = bundle.grid.step();
    let (mut y, mut z) = terminal(problem, forward)?;
    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut fits: Vec<Option<NodeFits<S>>> = vec![None; n_steps];
    let mut next_z_fit: Option<CondExpFit<S>> = None;

    for n in (0..n_steps).rev() {
        let features = forward.states_at(n);
        let t_next = bundle.grid.time(n + 1);
        let db = bundle.db_at(n);
        let mut responses = vec![S::zero(); m_count * k];
        responses.par_chunks_mut(k).enumerate().for_each_init(
            || vec![S::zero(); k * l],
            |hbuf, (m, out)| {
                let x1 = forward.x_at(m, n + 1);
                let base = m * nodes + n + 1;
                let y1 = &y[base * k..(base + 1) * k];
                let z1 = &z[base * kd..(base + 1) * kd];
                response(problem, t_next, x1, y1, z1, db, hbuf, out);
            },
        );
        let dw = node_slice(&bundle.dw, m_count, n_steps, d, n);
        let control = if options.control_variates {
            Some(match &next_z_fit {
                None => terminal_control(problem, &features),
                Some(fit) => fit.predict_many(&features),
            })
        } else {
            None
        };
        let step = regression_step(&features, d, &dw, h, &responses, k, control.as_deref(), None, basis)?;
        scatter(&mut z, &step.z, nodes, kd, n);
        let mut y_node = vec![S::zero(); m_count * k];
        let iterations = implicit_y(problem, forward, n, &step.cont, &step.z, options, &mut y_node)?;
        scatter(&mut y, &y_node, nodes, k, n);
        let (picard_max, picard_mean) = picard_stats(&iterations);
        diagnostics.push(NodeDiagnostics {
            node: n,
            y_fit: step.fits.y.diagnostics.clone(),
            z_fit: step.fits.z.diagnostics.clone(),
            picard_max,
            picard_mean,
        });
        next_z_fit = Some(step.fits.z.clone());
        fits[n] = Some(step.fits);
    }
    diagnostics.reverse();
    Ok(SchemeOutput {
        samples: m_count,
        steps: n_steps,
        k,
        d,
        y,
        z,
        diagnostics,
        y_stderr: None,
        z_stderr: None,
        fits: fits.into_iter().map(|f| f.expect("every node fitted")).collect(),
    })
}

fn nested_scheme<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    forward: &ForwardPaths<S>,
    options: &SchemeOptions<S>,
    inner_samples: usize,
    fit_basis: &BasisSpec<S>,
) -> Result<SchemeOutput<S>> {
    let (k, d, l) = (problem.k, problem.d, problem.l);
    let kd = k * d;
    let width = k + kd;
    let n_steps = bundle.steps();
    let nodes = n_steps + 1;
    let m_count = bundle.samples;
    let h = bundle.grid.step();
    let (mut y, mut z) = terminal(problem, forward)?;
    let mut y_se = vec![S::zero(); y.len()];
    let mut z_se = vec![S::zero(); z.len()];
    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut fits: Vec<Option<NodeFits<S>>> = vec![None; n_steps];
    let spec = NestedSpec {
        inner_samples,
        steps: 1,
    };

    for n in (0..n_steps).rev() {
        let next_maps = if n + 1 < n_steps { fits[n + 1].as_ref() } else { None };
        let t_next = bundle.grid.time(n + 1);
        let estimates: Vec<_> = (0..m_count)
            .into_par_iter()
            .map(|m| {
                let mut y1 = vec![S::zero(); k];
                let mut z1 = vec![S::zero(); kd];
                let mut r = vec![S::zero(); k];
                let mut hbuf = vec![S::zero(); k * l];
                nested_mc_condexp(
                    problem,
                    bundle,
                    n,
                    forward.x_at(m, n),
                    spec,
                    NestedSeed {
                        lane: n as u64,
                        stream: m as u64,
                    },
                    width,
                    |cont, out| {
                        let x1 = cont.x_at(1);
                        match next_maps {
                            Some(maps) => {
                                maps.y.predict(x1, &mut y1);
                                maps.z.predict(x1, &mut z1);
                            }
                            None => {
                                problem.phi(x1, &mut y1);
                                z1.fill(S::zero());
                            }
                        }
                        response(problem, t_next, x1, &y1, &z1, cont.db_at(0), &mut hbuf, &mut r);
                        let w = cont.dw_at(0);
                        out[..k].copy_from_slice(&r);
                        for a in 0..k {
                            for j in 0..d {
                                out[k + a * d + j] = r[a] * w[j] / h;
                            }
                        }
                    },
                )
            })
            .collect::<Result<_>>()?;
        let mut cont = vec![S::zero(); m_count * k];
        let mut z_node = vec![S::zero(); m_count * kd];
        for (m, est) in estimates.iter().enumerate() {
            cont[m * k..(m + 1) * k].copy_from_slice(&est.mean[..k]);
            z_node[m * kd..(m + 1) * kd].copy_from_slice(&est.mean[k..]);
            let base = m * nodes + n;
            y_se[base * k..(base + 1) * k].copy_from_slice(&est.stderr[..k]);
            z_se[base * kd..(base + 1) * kd].copy_from_slice(&est.stderr[k..]);
        }
        scatter(&mut z, &z_node, nodes, kd, n);
        let mut y_node = vec![S::zero(); m_count * k];
        let iterations = implicit_y(problem, forward, n, &cont, &z_node, options, &mut y_node)?;
        scatter(&mut y, &y_node, nodes, k, n);
        let features = forward.states_at(n);
        let (y_fit, _) = fit_predict(&features, d, &y_node, k, fit_basis)?;
        let (z_fit, _) = fit_predict(&features, d, &z_node, kd, fit_basis)?;
        let (picard_max, picard_mean) = picard_stats(&iterations);
        diagnostics.push(NodeDiagnostics {
            node: n,
            y_fit: y_fit.diagnostics.clone(),
            z_fit: z_fit.diagnostics.clone(),
            picard_max,
            picard_mean,
        });
        fits[n] = Some(NodeFits { y: y_fit, z: z_fit });
    }
    diagnostics.reverse();
    Ok(SchemeOutput {
        samples: m_count,
        steps: n_steps,
        k,
        d,
        y,
        z,
        diagnostics,
        y_stderr: Some(y_se),
        z_stderr: Some(z_se),
        fits: fits.into_iter().map(|f| f.expect("every node fitted")).collect(),
    })
}

/// Solution of the linearized scheme. `grad_y` is `[M x (N+1) x k x d]`
/// and `grad_z` is `[M x (N+1) x (k*d) x d]`, with row `a*d + j` of
/// `grad_z` the `Z`-part for component `a` of `grad Y` in direction `x_j`.
#[derive(Debug, Clone)]
pub struct VariationalOutput<S> {
    pub samples: usize,
    pub steps: usize,
    pub k: usize,
    pub d: usize,
    pub grad_y: Vec<S>,
    pub grad_z: Vec<S>,
    pub diagnostics: Vec<NodeDiagnostics>,
}

impl<S: Scalar> VariationalOutput<S> {
    pub fn grad_y_at(&self, m: usize, n: usize) -> &[S] {
        let kd = self.k * self.d;
        let base = (m * (self.steps + 1) + n) * kd;
        &self.grad_y[base..base + kd]
    }

    pub fn grad_z_at(&self, m: usize, n: usize) -> &[S] {
        let w = self.k * self.d * self.d;
        let base = (m * (self.steps + 1) + n) * w;
        &self.grad_z[base..base + w]
    }
}

/// `out[a, j] = sum_c v[a, c] g[c, j]` for `v` of shape `rows x d`.
fn right_mul<S: Scalar>(v: &[S], g: &[S], rows: usize, d: usize, out: &mut [S]) {
    crate::linalg::matmul(v, g, rows, d, d, out);
}

/// Applies the same backward template to the linear system satisfied by
/// `grad Y`, with coefficients linearized along the scheme output.
///
/// The regressions run in the coordinates `grad Y [grad X_n]^{-1}`, which
/// are functions of the forward state; samples with a degenerate flow are
/// left out of the fits.
pub fn solve_variational_bdsde<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    bundle: &PathBundle<S>,
    forward: &ForwardPaths<S>,
    scheme: &SchemeOutput<S>,
    basis: &BasisSpec<S>,
    options: &SchemeOptions<S>,
) -> Result<VariationalOutput<S>> {
    check_inputs(problem, bundle, forward)?;
    if !forward.has_flow() {
        return Err(Error::Validation(
            "the linearized scheme needs the variational flow".into(),
        ));
    }
    ensure_len("scheme steps", bundle.steps(), scheme.steps)?;
    ensure_len("scheme samples", bundle.samples, scheme.samples)?;
    let (k, d, l) = (problem.k, problem.d, problem.l);
    let kd = k * d;
    let kdd = kd * d;
    let n_steps = bundle.steps();
    let nodes = n_steps + 1;
    let m_count = bundle.samples;
    let h = bundle.grid.step();

    let mut grad_y = vec![S::zero(); m_count * nodes * kd];
    let mut grad_z = vec![S::zero(); m_count * nodes * kdd];
    grad_y.par_chunks_mut(nodes * kd).enumerate().for_each_init(
        || vec![S::zero(); kd],
        |jp, (m, row)| {
            let x = forward.x_at(m, n_steps);
            problem.jac_phi(x, jp);
            crate::linalg::matmul(jp, forward.grad_at(m, n_steps), k, d, d, &mut row[n_steps * kd..]);
        },
    );

    let mut diagnostics = Vec::with_capacity(n_steps);
    let mut next_z_fit: Option<CondExpFit<S>> = None;
    for n in (0..n_steps).rev() {
        let features = forward.states_at(n);
        let t_next = bundle.grid.time(n + 1);
        let db = bundle.db_at(n);
        // Responses G_{n+1} + (dh . Theta') dB in the coordinates of node n.
        let mut responses = vec![S::zero(); m_count * kd];
        responses.par_chunks_mut(kd).enumerate().for_each_init(
            || Workspace::new(k, d, l),
            |ws, (m, out)| {
                let base = m * nodes + n + 1;
                let g1 = &grad_y[base * kd..(base + 1) * kd];
                let gz1 = &grad_z[base * kdd..(base + 1) * kdd];
                let x1 = forward.x_at(m, n + 1);
                let y1 = scheme.y_at(m, n + 1);
                let z1 = scheme.z_at(m, n + 1);
                problem.jac_h(Arg::X, t_next, x1, y1, z1, &mut ws.hx);
                problem.jac_h(Arg::Y, t_next, x1, y1, z1, &mut ws.hy);
                problem.jac_h(Arg::Z, t_next, x1, y1, z1, &mut ws.hz);
                let gx1 = forward.grad_at(m, n + 1);
                for j in 0..d {
                    for c in 0..k * l {
                        let mut v = S::zero();
                        for e in 0..d {
                            v += ws.hx[c * d + e] * gx1[e * d + j];
                        }
                        for e in 0..k {
                            v += ws.hy[c * k + e] * g1[e * d + j];
                        }
                        for e in 0..kd {
                            v += ws.hz[c * kd + e] * gz1[((e / d) * d + j) * d + e % d];
                        }
                        ws.hcol[c] = v;
                    }
                    for a in 0..k {
                        ws.full[a * d + j] = g1[a * d + j] + (0..l).map(|c| ws.hcol[a * l + c] * db[c]).sum::<S>();
                    }
                }
                right_mul(&ws.full, forward.grad_inv_at(m, n), k, d, out);
            },
        );
        let dw = node_slice(&bundle.dw, m_count, n_steps, d, n);
        let control = match (&next_z_fit, options.control_variates) {
            (Some(fit), true) => Some(fit.predict_many(&features)),
            _ => None,
        };
        let step = regression_step(
            &features,
            d,
            &dw,
            h,
            &responses,
            kd,
            control.as_deref(),
            Some(&forward.degenerate),
            basis,
        )?;

        // Back to the original coordinates, then the implicit driver step.
        let t = bundle.grid.time(n);
        let results: Vec<(Vec<S>, Vec<S>, usize)> = (0..m_count)
            .into_par_iter()
            .map_init(
                || Workspace::new(k, d, l),
                |ws, m| {
                    let gx = forward.grad_at(m, n);
                    let mut cont = vec![S::zero(); kd];
                    right_mul(&step.cont[m * kd..(m + 1) * kd], gx, k, d, &mut cont);
                    let mut gz = vec![S::zero(); kdd];
                    let zt = &step.z[m * kdd..(m + 1) * kdd];
                    for a in 0..k {
                        for j in 0..d {
                            for i in 0..d {
                                gz[(a * d + j) * d + i] = (0..d).map(|c| zt[(a * d + c) * d + i] * gx[c * d + j]).sum();
                            }
                        }
                    }
                    let x = forward.x_at(m, n);
                    let y = scheme.y_at(m, n);
                    let z = scheme.z_at(m, n);
                    problem.jac_f(Arg::X, t, x, y, z, &mut ws.fx);
                    problem.jac_f(Arg::Y, t, x, y, z, &mut ws.fy);
                    problem.jac_f(Arg::Z, t, x, y, z, &mut ws.fz);
                    // Constant part of the linear driver per direction j.
                    let mut drive = vec![S::zero(); kd];
                    for a in 0..k {
                        for j in 0..d {
                            let mut v = S::zero();
                            for e in 0..d {
                                v += ws.fx[a * d + e] * gx[e * d + j];
                            }
                            for e in 0..kd {
                                v += ws.fz[a * kd + e] * gz[((e / d) * d + j) * d + e % d];
                            }
                            drive[a * d + j] = v;
                        }
                    }
                    let fy = &ws.fy;
                    let sol = picard_implicit_step(&cont, h, options.picard_tol, options.picard_max_iter, |g, o| {
                        for a in 0..k {
                            for j in 0..d {
                                o[a * d + j] =
                                    drive[a * d + j] + (0..k).map(|e| fy[a * k + e] * g[e * d + j]).sum::<S>();
                            }
                        }
                    })
                    .map_err(|e| match e {
                        Error::PicardDivergence {
                            iterations, residual, ..
                        } => Error::PicardDivergence {
                            node: n,
                            iterations,
                            residual,
                        },
                        other => other,
                    })?;
                    Ok((sol.y, gz, sol.iterations))
                },
            )
            .collect::<Result<_>>()?;
        let mut iterations = Vec::with_capacity(m_count);
        for (m, (g, gz, it)) in results.into_iter().enumerate() {
            let base = m * nodes + n;
            grad_y[base * kd..(base + 1) * kd].copy_from_slice(&g);
            grad_z[base * kdd..(base + 1) * kdd].copy_from_slice(&gz);
            iterations.push(it);
        }
        let (picard_max, picard_mean) = picard_stats(&iterations);
        diagnostics.push(NodeDiagnostics {
            node: n,
            y_fit: step.fits.y.diagnostics.clone(),
            z_fit: step.fits.z.diagnostics.clone(),
            picard_max,
            picard_mean,
        });
        next_z_fit = Some(step.fits.z);
    }
    diagnostics.reverse();
    Ok(VariationalOutput {
        samples: m_count,
        steps: n_steps,
        k,
        d,
        grad_y,
        grad_z,
        diagnostics,
    })
}

struct Workspace<S> {
    hx: Vec<S>,
    hy: Vec<S>,
    hz: Vec<S>,
    hcol: Vec<S>,
    full: Vec<S>,
    fx: Vec<S>,
    fy: Vec<S>,
    fz: Vec<S>,
}

impl<S: Scalar> Workspace<S> {
    fn new(k: usize, d: usize, l: usize) -> Self {
        let kd = k * d;
        Self {
            hx: vec![S::zero(); k * l * d],
            hy: vec![S::zero(); k * l * k],
            hz: vec![S::zero(); k * l * kd],
            hcol: vec![S::zero(); k * l],
            full: vec![S::zero(); kd],
            fx: vec![S::zero(); k * d],
            fy: vec![S::zero(); k * k],
            fz: vec![S::zero(); k * kd],
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::analytics::{benchmark_problem, representation_residual};
    use crate::forward::{euler_forward, variational_flow};
    use crate::paths::{sample_bundle, SeedSpec};
    use crate::problem::{make_uniform_grid, BenchmarkId, CoefficientSet};

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

    fn regression() -> SchemeOptions<f64> {
        SchemeOptions::regression(BasisSpec::polynomial(3))
    }

    #[test]
    fn picard_with_y_free_driver_takes_one_iteration() {
        let sol = picard_implicit_step(&[1.0f64, 2.0], 0.1, 1e-12, 50, |_, o| {
            o[0] = 3.0;
            o[1] = -1.0;
        })
        .unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.y[0] - 1.3).abs() < 1e-15 && (sol.y[1] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn picard_linear_fixed_point() {
        let (rhs, h, lambda): (f64, f64, f64) = (2.0, 0.1, 4.0);
        let sol = picard_implicit_step(&[rhs], h, 1e-12, 50, |y, o| o[0] = lambda * y[0]).unwrap();
        assert!((sol.y[0] - rhs / (1.0 - h * lambda)).abs() < 1e-11);
        assert!(sol.iterations > 1);
    }

    #[test]
    fn picard_reports_non_convergence() {
        let err = picard_implicit_step(&[1.0], 0.1, 1e-12, 5, |y, o| o[0] = 9.9 * y[0]).unwrap_err();
        assert!(matches!(err, Error::PicardDivergence { iterations: 5, .. }));
    }

    #[test]
    fn scheme_rejects_large_step_times_lipschitz() {
        let p = benchmark_problem(BenchmarkId::LinearY, 3.0, 1.0, 1.0).unwrap();
        let b = bundle(1, 0, 4, 64);
        let fw = euler_forward(&p, &b).unwrap();
        let err = backward_scheme(&p, &b, &fw, &regression()).unwrap_err();
        assert!(matches!(err, Error::PicardPrecondition(v) if (v - 2.25).abs() < 1e-12));
    }

    #[test]
    fn scheme_divergence_names_the_node() {
        // Claimed Lipschitz constant too small for the actual driver.
        let base = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0).unwrap();
        let mut coeffs = CoefficientSet::new(
            base.coeffs.b.clone(),
            base.coeffs.sigma.clone(),
            Arc::new(|_, _, y, _, o: &mut [f64]| o[0] = 3.96 * y[0]),
            base.coeffs.h.clone(),
            base.coeffs.phi.clone(),
            0.5,
            0.0,
        )
        .unwrap();
        coeffs.grads = base.coeffs.grads.clone();
        let p = FbdsdeProblem::new(1, 1, 1, 1.0, vec![1.0], coeffs).unwrap();
        let b = bundle(2, 0, 4, 64);
        let fw = euler_forward(&p, &b).unwrap();
        let err = backward_scheme(&p, &b, &fw, &regression()).unwrap_err();
        assert!(matches!(err, Error::PicardDivergence { node: 3, .. }), "{err}");
    }

    #[test]
    fn terminal_node_is_exact() {
        let p = benchmark_problem(BenchmarkId::LinearY, 0.5, 1.0, 1.0).unwrap();
        let b = bundle(3, 0, 8, 256);
        let fw = euler_forward(&p, &b).unwrap();
        let out = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        for m in 0..256 {
            assert_eq!(out.y_at(m, 8)[0], fw.x_at(m, 8)[0]);
            assert_eq!(out.z_at(m, 8)[0], 0.0);
        }
        assert_eq!(out.diagnostics.len(), 8);
        assert_eq!(out.fits.len(), 8);
    }

    #[test]
    fn trivial_regression_is_exact() {
        let p = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0).unwrap();
        let b = bundle(4, 0, 8, 2048);
        let fw = euler_forward(&p, &b).unwrap();
        let out = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        for m in 0..2048 {
            for n in 0..=8 {
                assert!((out.y_at(m, n)[0] - fw.x_at(m, n)[0]).abs() < 1e-10);
                if n < 8 {
                    assert!((out.z_at(m, n)[0] - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn trivial_nested_oracle_matches_within_stderr() {
        let p = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0).unwrap();
        let b = bundle(5, 0, 2, 256);
        let fw = euler_forward(&p, &b).unwrap();
        let out = backward_scheme(&p, &b, &fw, &SchemeOptions::nested(1024, BasisSpec::polynomial(3))).unwrap();
        let (yse, zse) = (out.y_stderr.as_ref().unwrap(), out.z_stderr.as_ref().unwrap());
        for n in 0..2 {
            let (mut ey, mut ez, mut sy, mut sz) = (0.0, 0.0, 0.0, 0.0);
            for m in 0..256 {
                ey += (out.y_at(m, n)[0] - fw.x_at(m, n)[0]).powi(2);
                ez += (out.z_at(m, n)[0] - 1.0).powi(2);
                sy += yse[m * 3 + n].powi(2);
                sz += zse[m * 3 + n].powi(2);
            }
            assert!(ey <= 16.0 * sy, "node {n}: {ey} vs {sy}");
            assert!(ez <= 16.0 * sz, "node {n}: {ez} vs {sz}");
        }
    }

    #[test]
    fn linear_z_initial_value_is_close() {
        let (alpha, x0) = (0.5, 1.0);
        let p = benchmark_problem(BenchmarkId::LinearZ, alpha, x0, 1.0).unwrap();
        let mut avg = 0.0;
        for index in 0..32 {
            let b = bundle(6, index, 32, 1 << 14);
            let fw = euler_forward(&p, &b).unwrap();
            let out = backward_scheme(&p, &b, &fw, &regression()).unwrap();
            let b_t: f64 = b.db.iter().sum();
            let exact = x0 + alpha * b_t;
            let mut e = 0.0;
            for m in 0..b.samples {
                e += (out.y_at(m, 0)[0] - exact).powi(2);
            }
            avg += e / b.samples as f64 / 32.0;
        }
        assert!(avg <= 0.05 * (1.0 + x0 * x0), "{avg}");
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let p = benchmark_problem(BenchmarkId::LinearZ, 0.5, 1.0, 1.0).unwrap();
        let b = bundle(7, 0, 4, 128);
        let fw = euler_forward(&p, &b).unwrap();
        let out = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        let mut buf = Vec::new();
        out.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("node,"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
        assert_eq!(lines[5].split(',').count(), lines[0].split(',').count());
    }

    #[test]
    fn variational_trivial_is_one() {
        let p = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0).unwrap();
        let b = bundle(8, 0, 8, 1024);
        let fw = variational_flow(&p, &b).unwrap();
        let s = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        let v = solve_variational_bdsde(&p, &b, &fw, &s, &BasisSpec::polynomial(3), &regression()).unwrap();
        for m in 0..1024 {
            for n in 0..=8 {
                assert!((v.grad_y_at(m, n)[0] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn variational_terminal_is_grad_phi_times_flow() {
        let p = benchmark_problem(BenchmarkId::LinearY, 0.5, 1.0, 1.0).unwrap();
        let b = bundle(9, 0, 4, 128);
        let fw = variational_flow(&p, &b).unwrap();
        let s = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        let v = solve_variational_bdsde(&p, &b, &fw, &s, &BasisSpec::polynomial(3), &regression()).unwrap();
        for m in 0..128 {
            assert_eq!(v.grad_y_at(m, 4)[0], fw.grad_at(m, 4)[0]);
        }
    }

    #[test]
    fn variational_needs_the_flow() {
        let p = benchmark_problem(BenchmarkId::Trivial, 0.0, 1.0, 1.0).unwrap();
        let b = bundle(10, 0, 4, 128);
        let fw = euler_forward(&p, &b).unwrap();
        let s = backward_scheme(&p, &b, &fw, &regression()).unwrap();
        assert!(solve_variational_bdsde(&p, &b, &fw, &s, &BasisSpec::polynomial(3), &regression()).is_err());
    }

    /// Bundle-averaged `|grad Y_n - E_n|` and representation residual on
    /// LinearY, coarse and fine grids sharing their paths.
    fn linear_y_errors(fine_steps: usize, coarse_steps: usize, bundles: u64) -> [(f64, f64); 2] {
        let gamma = 0.5;
        let p = benchmark_problem(BenchmarkId::LinearY, gamma, 1.0, 1.0).unwrap();
        let mut acc = [(0.0, 0.0); 2];
        for index in 0..bundles {
            let fine = bundle(11, index, fine_steps, 2048);
            for (slot, steps) in [coarse_steps, fine_steps].into_iter().enumerate() {
                let b = fine.coarsen(fine_steps / steps).unwrap();
                let fw = variational_flow(&p, &b).unwrap();
                let s = backward_scheme(&p, &b, &fw, &regression()).unwrap();
                let v = solve_variational_bdsde(&p, &b, &fw, &s, &BasisSpec::polynomial(3), &regression()).unwrap();
                let tail = b.b_tail();
                let mut dev = 0.0;
                for n in 0..=steps {
                    let t = b.grid.time(n);
                    let e = (gamma * tail[n] - gamma * gamma * (1.0 - t) / 2.0).exp();
                    for m in 0..b.samples {
                        dev += (v.grad_y_at(m, n)[0] - e).abs() / (b.samples * (steps + 1)) as f64;
                    }
                }
                let rep = representation_residual(&p, &fw, &s, &v).unwrap();
                let worst = rep.max_mean.iter().copied().fold(0.0, f64::max);
                acc[slot].0 += dev / bundles as f64;
                acc[slot].1 += worst / bundles as f64;
            }
        }
        acc
    }

    #[test]
    fn linear_y_gradient_and_representation_improve_with_n() {
        let [coarse, fine] = linear_y_errors(32, 8, 16);
        assert!(fine.0 < coarse.0, "gradient deviation {coarse:?} -> {fine:?}");
        assert!(fine.1 < coarse.1, "representation residual {coarse:?} -> {fine:?}");
    }

    fn permuted(b: &PathBundle<f64>, perm: &[usize]) -> PathBundle<f64> {
        let n = b.steps();
        let mut out = b.clone();
        for (new, &old) in perm.iter().enumerate() {
            out.dw[new * n..(new + 1) * n].copy_from_slice(&b.dw[old * n..(old + 1) * n]);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn predictions_ignore_sample_order(seed in 0u64..1000, shift in 1usize..511) {
            let p = benchmark_problem(BenchmarkId::LinearY, 0.5, 1.0, 1.0).unwrap();
            let b = bundle(seed, 0, 4, 512);
            let perm: Vec<usize> = (0..512).map(|i| (i * 7 + shift) % 512).collect();
            let pb = permuted(&b, &perm);
            let fw = euler_forward(&p, &b).unwrap();
            let pfw = euler_forward(&p, &pb).unwrap();
            let a = backward_scheme(&p, &b, &fw, &regression()).unwrap();
            let c = backward_scheme(&p, &pb, &pfw, &regression()).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for n in 0..=4 {
                    let (u, v) = (a.y_at(old, n)[0], c.y_at(new, n)[0]);
                    prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
                    let (u, v) = (a.z_at(old, n)[0], c.z_at(new, n)[0]);
                    prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
                }
            }
        }

        #[test]
        fn equal_states_get_equal_values(seed in 0u64..1000) {
            let p = benchmark_problem(BenchmarkId::LinearZ, 0.5, 1.0, 1.0).unwrap();
            let mut b = bundle(seed, 0, 4, 256);
            // Samples 0 and 1 share their first two increments.
            for n in 0..2 {
                b.dw[4 + n] = b.dw[n];
            }
            let fw = euler_forward(&p, &b).unwrap();
            let out = backward_scheme(&p, &b, &fw, &regression()).unwrap();
            for n in 0..=2 {
                prop_assert_eq!(fw.x_at(0, n)[0], fw.x_at(1, n)[0]);
                prop_assert_eq!(out.y_at(0, n)[0], out.y_at(1, n)[0]);
                prop_assert_eq!(out.z_at(0, n)[0], out.z_at(1, n)[0]);
            }
        }
    }
}
