//! Problem instances: coefficients, dimensions, time grids, and a sampling
//! probe of the Lipschitz hypotheses.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::paths::{substream, Domain};
use crate::scalar::{norm, Scalar};

/// `x -> out`, used for `b`, `sigma`, `phi` and their Jacobians.
pub type StateMap<S> = Arc<dyn Fn(&[S], &mut [S]) + Send + Sync>;

/// `(t, x, y, z) -> out`, used for `f`, `h` and their partial Jacobians.
/// `z` is a row-major `k x d` matrix.
pub type FieldMap<S> = Arc<dyn Fn(S, &[S], &[S], &[S], &mut [S]) + Send + Sync>;

/// Optional analytic Jacobians. Every missing entry falls back to central
/// finite differences.
///
/// Layout: a Jacobian of an output of length `p` with respect to an input of
/// length `q` is a row-major `p x q` matrix. Matrix-valued maps (`sigma`,
/// `h`, the `z` argument) are flattened row-major first, so for instance
/// `sigma_x[(i * d + j) * d + m] = d sigma_ij / d x_m`.
#[derive(Clone, Default)]
pub struct GradSet<S> {
    pub b: Option<StateMap<S>>,
    pub sigma: Option<StateMap<S>>,
    pub phi: Option<StateMap<S>>,
    pub f_x: Option<FieldMap<S>>,
    pub f_y: Option<FieldMap<S>>,
    pub f_z: Option<FieldMap<S>>,
    pub h_x: Option<FieldMap<S>>,
    pub h_y: Option<FieldMap<S>>,
    pub h_z: Option<FieldMap<S>>,
}

/// The five coefficients together with their claimed regularity constants.
#[derive(Clone)]
pub struct CoefficientSet<S> {
    pub b: StateMap<S>,
    pub sigma: StateMap<S>,
    pub f: FieldMap<S>,
    pub h: FieldMap<S>,
    pub phi: StateMap<S>,
    pub grads: GradSet<S>,
    lipschitz: S,
    alpha: S,
}

impl<S: Scalar> CoefficientSet<S> {
    /// `lipschitz` is the claimed constant `K`, `alpha` the claimed
    /// `z`-Lipschitz constant of `h`, which must lie in `[0, 1)`.
    pub fn new(
        b: StateMap<S>,
        sigma: StateMap<S>,
        f: FieldMap<S>,
        h: FieldMap<S>,
        phi: StateMap<S>,
        lipschitz: S,
        alpha: S,
    ) -> Result<Self> {
        if !(lipschitz >= S::zero()) || !lipschitz.is_finite() {
            return Err(Error::Validation(format!(
                "Lipschitz constant must be finite and nonnegative, got {lipschitz}"
            )));
        }
        if !(alpha >= S::zero() && alpha < S::one()) {
            return Err(Error::Validation(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(Self {
            b,
            sigma,
            f,
            h,
            phi,
            grads: GradSet::default(),
            lipschitz,
            alpha,
        })
    }

    pub fn with_gradients(mut self, grads: GradSet<S>) -> Self {
        self.grads = grads;
        self
    }

    pub fn lipschitz(&self) -> S {
        self.lipschitz
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }
}

impl<S> fmt::Debug for CoefficientSet<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet").finish_non_exhaustive()
    }
}

/// Closed-form benchmark families with known solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchmarkId {
    /// `f = h = 0`, `phi(x) = x`, `b = 0`, `sigma = 1`.
    Trivial,
    /// As `Trivial` but `h = alpha z`.
    LinearZ,
    /// As `Trivial` but `h = gamma y`.
    LinearY,
}

impl BenchmarkId {
    pub fn name(self) -> &'static str {
        match self {
            BenchmarkId::Trivial => "trivial",
            BenchmarkId::LinearZ => "linear_z",
            BenchmarkId::LinearY => "linear_y",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "trivial" => Some(BenchmarkId::Trivial),
            "linear_z" | "linearz" => Some(BenchmarkId::LinearZ),
            "linear_y" | "lineary" => Some(BenchmarkId::LinearY),
            _ => None,
        }
    }

    pub const ALL: [BenchmarkId; 3] = [BenchmarkId::Trivial, BenchmarkId::LinearZ, BenchmarkId::LinearY];
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A decoupled forward-backward doubly stochastic problem on `[0, T]`.
#[derive(Clone, Debug)]
pub struct FbdsdeProblem<S> {
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub horizon: S,
    pub x0: Vec<S>,
    pub coeffs: CoefficientSet<S>,
    pub benchmark: Option<BenchmarkId>,
}

const FD_STEP: f64 = 1e-5;

fn central_difference<S: Scalar>(arg: &[S], out_len: usize, jac: &mut [S], mut eval: impl FnMut(&[S], &mut [S])) {
    let q = arg.len();
    debug_assert_eq!(jac.len(), out_len * q);
    let mut shifted = arg.to_vec();
    let mut plus = vec![S::zero(); out_len];
    let mut minus = vec![S::zero(); out_len];
    for i in 0..q {
        let step = S::lit(FD_STEP) * (S::one() + arg[i].abs());
        shifted[i] = arg[i] + step;
        eval(&shifted, &mut plus);
        shifted[i] = arg[i] - step;
        eval(&shifted, &mut minus);
        shifted[i] = arg[i];
        let denom = S::lit(2.0) * step;
        for p in 0..out_len {
            jac[p * q + i] = (plus[p] - minus[p]) / denom;
        }
    }
}

impl<S: Scalar> FbdsdeProblem<S> {
    pub fn new(d: usize, k: usize, l: usize, horizon: S, x0: Vec<S>, coeffs: CoefficientSet<S>) -> Result<Self> {
        if d == 0 || k == 0 || l == 0 {
            return Err(Error::Validation(format!(
                "dimensions must be positive, got d={d}, k={k}, l={l}"
            )));
        }
        if !(horizon > S::zero()) || !horizon.is_finite() {
            return Err(Error::Validation(format!("horizon must be positive, got {horizon}")));
        }
        if x0.len() != d {
            return Err(Error::Shape {
                context: "initial state",
                expected: d,
                actual: x0.len(),
            });
        }
        Ok(Self {
            d,
            k,
            l,
            horizon,
            x0,
            coeffs,
            benchmark: None,
        })
    }

    pub fn with_benchmark(mut self, id: BenchmarkId) -> Self {
        self.benchmark = Some(id);
        self
    }

    pub fn b(&self, x: &[S], out: &mut [S]) {
        (self.coeffs.b)(x, out)
    }

    pub fn sigma(&self, x: &[S], out: &mut [S]) {
        (self.coeffs.sigma)(x, out)
    }

    pub fn phi(&self, x: &[S], out: &mut [S]) {
        (self.coeffs.phi)(x, out)
    }

    pub fn f(&self, t: S, x: &[S], y: &[S], z: &[S], out: &mut [S]) {
        (self.coeffs.f)(t, x, y, z, out)
    }

    pub fn h(&self, t: S, x: &[S], y: &[S], z: &[S], out: &mut [S]) {
        (self.coeffs.h)(t, x, y, z, out)
    }

    /// `d x d` Jacobian of the drift.
    pub fn jac_b(&self, x: &[S], out: &mut [S]) {
        match &self.coeffs.grads.b {
            Some(g) => g(x, out),
            None => central_difference(x, self.d, out, |a, o| self.b(a, o)),
        }
    }

    /// `(d*d) x d` Jacobian of the flattened diffusion matrix.
    pub fn jac_sigma(&self, x: &[S], out: &mut [S]) {
        match &self.coeffs.grads.sigma {
            Some(g) => g(x, out),
            None => central_difference(x, self.d * self.d, out, |a, o| self.sigma(a, o)),
        }
    }

    /// `k x d` Jacobian of the terminal condition.
    pub fn jac_phi(&self, x: &[S], out: &mut [S]) {
        match &self.coeffs.grads.phi {
            Some(g) => g(x, out),
            None => central_difference(x, self.k, out, |a, o| self.phi(a, o)),
        }
    }

    /// Jacobian of `f` (length `k`) with respect to `arg`.
    pub fn jac_f(&self, arg: Arg, t: S, x: &[S], y: &[S], z: &[S], out: &mut [S]) {
        let analytic = match arg {
            Arg::X => &self.coeffs.grads.f_x,
            Arg::Y => &self.coeffs.grads.f_y,
            Arg::Z => &self.coeffs.grads.f_z,
        };
        if let Some(g) = analytic {
            return g(t, x, y, z, out);
        }
        let k = self.k;
        match arg {
            Arg::X => central_difference(x, k, out, |a, o| self.f(t, a, y, z, o)),
            Arg::Y => central_difference(y, k, out, |a, o| self.f(t, x, a, z, o)),
            Arg::Z => central_difference(z, k, out, |a, o| self.f(t, x, y, a, o)),
        }
    }

    /// Jacobian of the flattened `h` (length `k * l`) with respect to `arg`.
    pub fn jac_h(&self, arg: Arg, t: S, x: &[S], y: &[S], z: &[S], out: &mut [S]) {
        let analytic = match arg {
            Arg::X => &self.coeffs.grads.h_x,
            Arg::Y => &self.coeffs.grads.h_y,
            Arg::Z => &self.coeffs.grads.h_z,
        };
        if let Some(g) = analytic {
            return g(t, x, y, z, out);
        }
        let kl = self.k * self.l;
        match arg {
            Arg::X => central_difference(x, kl, out, |a, o| self.h(t, a, y, z, o)),
            Arg::Y => central_difference(y, kl, out, |a, o| self.h(t, x, a, z, o)),
            Arg::Z => central_difference(z, kl, out, |a, o| self.h(t, x, y, a, o)),
        }
    }
}

/// Spatial argument of the driver coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arg {
    X,
    Y,
    Z,
}

/// Uniform partition of `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<S> {
    steps: usize,
    step: S,
    nodes: Vec<S>,
}

/// `N` uniform steps on `[0, T]`.
pub fn make_uniform_grid<S: Scalar>(horizon: S, steps: usize) -> Result<TimeGrid<S>> {
    if steps == 0 {
        return Err(Error::Validation("grid needs at least one step".into()));
    }
    if !(horizon > S::zero()) || !horizon.is_finite() {
        return Err(Error::Validation(format!(
            "grid horizon must be positive, got {horizon}"
        )));
    }
    let n = S::from_count(steps);
    let mut nodes: Vec<S> = (0..=steps).map(|i| horizon * S::from_count(i) / n).collect();
    nodes[steps] = horizon;
    Ok(TimeGrid {
        steps,
        step: horizon / n,
        nodes,
    })
}

impl<S: Scalar> TimeGrid<S> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&self) -> S {
        self.step
    }

    pub fn nodes(&self) -> &[S] {
        &self.nodes
    }

    pub fn time(&self, n: usize) -> S {
        self.nodes[n]
    }

    pub fn horizon(&self) -> S {
        self.nodes[self.steps]
    }

    /// Grid with `factor` times as many steps on the same horizon.
    pub fn refine(&self, factor: usize) -> Result<TimeGrid<S>> {
        make_uniform_grid(self.horizon(), self.steps * factor)
    }

    /// Ratio of step counts if `fine` refines `self`.
    pub fn refinement_factor(&self, fine: &TimeGrid<S>) -> Result<usize> {
        if !fine.steps.is_multiple_of(self.steps) || fine.horizon() != self.horizon() {
            return Err(Error::Validation(format!(
                "grid with {} steps does not refine grid with {} steps",
                fine.steps, self.steps
            )));
        }
        Ok(fine.steps / self.steps)
    }
}

/// Sampling region for the assumption probe.
#[derive(Debug, Clone, Copy)]
pub struct ProbeCloud<S> {
    pub points: usize,
    pub radius: S,
}

/// One difference-quotient check of the probe.
#[derive(Debug, Clone)]
pub struct ProbeCheck {
    pub coefficient: &'static str,
    pub argument: &'static str,
    pub max_quotient: f64,
    pub bound: f64,
    pub exceeded: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub checks: Vec<ProbeCheck>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !c.exceeded)
    }

    pub fn check(&self, coefficient: &str, argument: &str) -> Option<&ProbeCheck> {
        self.checks
            .iter()
            .find(|c| c.coefficient == coefficient && c.argument == argument)
    }
}

// Quotients are compared with a small relative slack so exactly linear
// coefficients sitting on their bound are not flagged by rounding.
const PROBE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy)]
enum Varied {
    T,
    X,
    Y,
    Z,
}

/// Falsification probe of the Lipschitz and growth hypotheses.
///
/// For every coefficient and argument, random pairs of points that differ
/// only in that argument are drawn from the cloud, and the largest
/// difference quotient is compared with the claimed constant (`K`, `sqrt(K)`
/// for the squared `h` condition, `alpha` for the `z`-dependence of `h`).
/// Each check draws from its own substream, so enlarging the cloud only
/// appends pairs.
pub fn probe_assumptions<S: Scalar>(
    problem: &FbdsdeProblem<S>,
    cloud: ProbeCloud<S>,
    seed: u64,
) -> Result<ProbeReport> {
    let (d, k, l) = (problem.d, problem.k, problem.l);
    let kd = k * d;
    let kl = k * l;
    let big_k = problem.coeffs.lipschitz().as_f64();
    let alpha = problem.coeffs.alpha().as_f64();
    let horizon = problem.horizon;
    let r = cloud.radius;

    let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<S> {
        (0..n)
            .map(|_| r * (S::lit(2.0) * S::lit(rng.random::<f64>()) - S::one()))
            .collect()
    };
    let draw_t = |rng: &mut rand_chacha::ChaCha8Rng| horizon * S::lit(rng.random::<f64>());

    let non_finite = |what: &'static str, point: Vec<S>| Error::NonFinite {
        what,
        node: 0,
        sample: 0,
        point: point.iter().map(|v| v.as_f64()).collect(),
    };
    let check_finite = |what: &'static str, out: &[S], point: &[&[S]]| -> Result<()> {
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(non_finite(what, point.concat()))
        }
    };

    let mut checks = Vec::new();
    let mut lane = 0u64;
    let mut next_rng = || {
        lane += 1;
        substream(seed, 0, Domain::Probe, lane, 0)
    };

    // (b, sigma) jointly in x.
    {
        let mut rng = next_rng();
        let mut max_q = 0.0f64;
        let (mut b1, mut b2) = (vec![S::zero(); d], vec![S::zero(); d]);
        let (mut s1, mut s2) = (vec![S::zero(); d * d], vec![S::zero(); d * d]);
        for _ in 0..cloud.points {
            let x1 = draw(&mut rng, d);
            let x2 = draw(&mut rng, d);
            problem.b(&x1, &mut b1);
            problem.b(&x2, &mut b2);
            problem.sigma(&x1, &mut s1);
            problem.sigma(&x2, &mut s2);
            check_finite("b", &b1, &[&x1])?;
            check_finite("sigma", &s1, &[&x1])?;
            let dx = norm(&diff(&x1, &x2)).as_f64();
            if dx > 0.0 {
                let num = norm(&diff(&b1, &b2)) + norm(&diff(&s1, &s2));
                max_q = max_q.max(num.as_f64() / dx);
            }
        }
        checks.push(make_check("b+sigma", "x", max_q, big_k));
    }

    // phi in x.
    {
        let mut rng = next_rng();
        let mut max_q = 0.0f64;
        let (mut p1, mut p2) = (vec![S::zero(); k], vec![S::zero(); k]);
        for _ in 0..cloud.points {
            let x1 = draw(&mut rng, d);
            let x2 = draw(&mut rng, d);
            problem.phi(&x1, &mut p1);
            problem.phi(&x2, &mut p2);
            check_finite("phi", &p1, &[&x1])?;
            check_finite("phi", &p2, &[&x2])?;
            let dx = norm(&diff(&x1, &x2)).as_f64();
            if dx > 0.0 {
                max_q = max_q.max(norm(&diff(&p1, &p2)).as_f64() / dx);
            }
        }
        checks.push(make_check("phi", "x", max_q, big_k));
    }

    // f and h, one argument at a time.
    for (name, is_h) in [("f", false), ("h", true)] {
        let out_len = if is_h { kl } else { k };
        for (arg_name, varied) in [("t", Varied::T), ("x", Varied::X), ("y", Varied::Y), ("z", Varied::Z)] {
            let mut rng = next_rng();
            let mut max_q = 0.0f64;
            let (mut o1, mut o2) = (vec![S::zero(); out_len], vec![S::zero(); out_len]);
            for _ in 0..cloud.points {
                let t1 = draw_t(&mut rng);
                let x1 = draw(&mut rng, d);
                let y1 = draw(&mut rng, k);
                let z1 = draw(&mut rng, kd);
                let (mut t2, mut x2, mut y2, mut z2) = (t1, x1.clone(), y1.clone(), z1.clone());
                let dist = match varied {
                    Varied::T => {
                        t2 = draw_t(&mut rng);
                        (t1 - t2).abs().sqrt()
                    }
                    Varied::X => {
                        x2 = draw(&mut rng, d);
                        norm(&diff(&x1, &x2))
                    }
                    Varied::Y => {
                        y2 = draw(&mut rng, k);
                        norm(&diff(&y1, &y2))
                    }
                    Varied::Z => {
                        z2 = draw(&mut rng, kd);
                        norm(&diff(&z1, &z2))
                    }
                };
                if is_h {
                    problem.h(t1, &x1, &y1, &z1, &mut o1);
                    problem.h(t2, &x2, &y2, &z2, &mut o2);
                } else {
                    problem.f(t1, &x1, &y1, &z1, &mut o1);
                    problem.f(t2, &x2, &y2, &z2, &mut o2);
                }
                let what = if is_h { "h" } else { "f" };
                check_finite(what, &o1, &[&[t1], &x1, &y1, &z1])?;
                check_finite(what, &o2, &[&[t2], &x2, &y2, &z2])?;
                let dist = dist.as_f64();
                if dist > 0.0 {
                    max_q = max_q.max(norm(&diff(&o1, &o2)).as_f64() / dist);
                }
            }
            let bound = match (is_h, varied) {
                (false, _) => big_k,
                (true, Varied::Z) => alpha,
                (true, _) => big_k.sqrt(),
            };
            checks.push(make_check(name, arg_name, max_q, bound));
        }
    }

    // Growth at the origin: |f(t,0,0,0)| + |h(t,0,0,0)| <= K.
    {
        let mut rng = next_rng();
        let mut max_q = 0.0f64;
        let zx = vec![S::zero(); d];
        let zy = vec![S::zero(); k];
        let zz = vec![S::zero(); kd];
        let mut fo = vec![S::zero(); k];
        let mut ho = vec![S::zero(); kl];
        for _ in 0..cloud.points {
            let t = draw_t(&mut rng);
            problem.f(t, &zx, &zy, &zz, &mut fo);
            problem.h(t, &zx, &zy, &zz, &mut ho);
            check_finite("f", &fo, &[&[t]])?;
            check_finite("h", &ho, &[&[t]])?;
            max_q = max_q.max((norm(&fo) + norm(&ho)).as_f64());
        }
        checks.push(make_check("f+h", "origin", max_q, big_k));
    }

    Ok(ProbeReport { checks })
}

fn diff<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

fn make_check(coefficient: &'static str, argument: &'static str, max_quotient: f64, bound: f64) -> ProbeCheck {
    ProbeCheck {
        coefficient,
        argument,
        max_quotient,
        bound,
        exceeded: max_quotient > bound * (1.0 + PROBE_SLACK) + PROBE_SLACK,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_state(n: usize) -> StateMap<f64> {
        Arc::new(move |_x, out| out[..n].fill(0.0))
    }

    fn scalar_problem(f: FieldMap<f64>, h: FieldMap<f64>, k_claim: f64, alpha: f64) -> FbdsdeProblem<f64> {
        let coeffs = CoefficientSet::new(
            zero_state(1),
            Arc::new(|_x, out| out[0] = 1.0),
            f,
            h,
            Arc::new(|x, out| out[0] = x[0]),
            k_claim,
            alpha,
        )
        .unwrap();
        FbdsdeProblem::new(1, 1, 1, 1.0, vec![0.0], coeffs).unwrap()
    }

    fn zero_field() -> FieldMap<f64> {
        Arc::new(|_, _, _, _, out| out.fill(0.0))
    }

    #[test]
    fn grid_examples() {
        let g = make_uniform_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.step(), 0.25);

        let g = make_uniform_grid(1.0, 1).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.step(), 1.0);

        let g = make_uniform_grid(0.5f64, 5).unwrap();
        assert!((g.step() - 0.1).abs() <= f64::EPSILON);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_uniform_grid(1.0, 0).is_err());
        assert!(make_uniform_grid(0.0, 4).is_err());
        assert!(make_uniform_grid(-1.0, 4).is_err());
    }

    #[test]
    fn alpha_at_or_above_one_is_rejected() {
        let build = |alpha| {
            CoefficientSet::<f64>::new(
                zero_state(1),
                zero_state(1),
                zero_field(),
                zero_field(),
                zero_state(1),
                1.0,
                alpha,
            )
        };
        assert!(build(1.0).is_err());
        assert!(build(1.5).is_err());
        assert!(build(0.99).is_ok());
    }

    #[test]
    fn probe_accepts_contracting_h() {
        let p = scalar_problem(zero_field(), Arc::new(|_, _, _, z, out| out[0] = 0.5 * z[0]), 1.0, 0.5);
        let report = probe_assumptions(
            &p,
            ProbeCloud {
                points: 500,
                radius: 3.0,
            },
            7,
        )
        .unwrap();
        let zq = report.check("h", "z").unwrap();
        assert!(!zq.exceeded, "{zq:?}");
        assert!(zq.max_quotient <= 0.5 + 1e-12);
        assert!(report.passed());
    }

    #[test]
    fn probe_flags_h_with_unit_z_slope() {
        let p = scalar_problem(zero_field(), Arc::new(|_, _, _, z, out| out[0] = z[0]), 1.0, 0.99);
        let report = probe_assumptions(
            &p,
            ProbeCloud {
                points: 200,
                radius: 3.0,
            },
            7,
        )
        .unwrap();
        assert!(report.check("h", "z").unwrap().exceeded);
        assert!(!report.passed());
    }

    #[test]
    fn probe_flags_quadratic_driver() {
        let p = scalar_problem(Arc::new(|_, _, y, _, out| out[0] = y[0] * y[0]), zero_field(), 1.0, 0.0);
        let report = probe_assumptions(
            &p,
            ProbeCloud {
                points: 200,
                radius: 10.0,
            },
            3,
        )
        .unwrap();
        assert!(report.check("f", "y").unwrap().exceeded);
        assert!(!report.check("f", "x").unwrap().exceeded);
    }

    #[test]
    fn probe_reports_non_finite_point() {
        let p = scalar_problem(
            Arc::new(|_, _, y, _, out| out[0] = 1.0 / (y[0] - y[0])),
            zero_field(),
            1.0,
            0.0,
        );
        let err = probe_assumptions(&p, ProbeCloud { points: 5, radius: 1.0 }, 1).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "f", .. }));
    }

    #[test]
    fn finite_difference_jacobian_matches_analytic() {
        let coeffs = CoefficientSet::<f64>::new(
            Arc::new(|x, out| {
                out[0] = x[0].sin() + x[1];
                out[1] = x[0] * x[1];
            }),
            Arc::new(|x, out| {
                out[0] = x[0].cos();
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = 1.0 + 0.1 * x[1] * x[1];
            }),
            zero_field(),
            zero_field(),
            Arc::new(|x, out| out[0] = x[0] * x[0] + x[1]),
            1.0,
            0.0,
        )
        .unwrap();
        let p = FbdsdeProblem::new(2, 1, 1, 1.0, vec![0.3, -0.7], coeffs).unwrap();
        let x = [0.3, -0.7];
        let mut jb = [0.0; 4];
        p.jac_b(&x, &mut jb);
        let expected = [0.3f64.cos(), 1.0, -0.7, 0.3];
        for (a, e) in jb.iter().zip(expected) {
            assert!((a - e).abs() < 1e-8);
        }
        let mut js = [0.0; 8];
        p.jac_sigma(&x, &mut js);
        assert!((js[0] + 0.3f64.sin()).abs() < 1e-8);
        assert!((js[7] - 0.2 * -0.7).abs() < 1e-8);
        let mut jp = [0.0; 2];
        p.jac_phi(&x, &mut jp);
        assert!((jp[0] - 0.6).abs() < 1e-8 && (jp[1] - 1.0).abs() < 1e-8);
    }
}
