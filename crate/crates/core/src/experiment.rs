//! Config-driven studies behind the `fbdsde run` command.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analytics::{
    analytic_solution, benchmark_problem, combine, compute_zbar, error_n_stat, l2_regularity_stat,
    representation_residual, BenchmarkSolution, BundleCells, RateReport,
};
use crate::backward::{backward_scheme, solve_variational_bdsde, SchemeOptions};
use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::Result;
use crate::forward::{euler_forward, variational_flow};
use crate::paths::{sample_bundle, PathBundle, SeedSpec};
use crate::problem::{make_uniform_grid, FbdsdeProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Convergence,
    Regularity,
    Representation,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "convergence" => Some(Self::Convergence),
            "regularity" => Some(Self::Regularity),
            "representation" => Some(Self::Representation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::Regularity => "regularity",
            Self::Representation => "representation",
        }
    }

    /// Name of the reported statistic.
    pub fn statistic(self) -> &'static str {
        match self {
            Self::Convergence => "error_n",
            Self::Regularity => "l2_regularity",
            Self::Representation => "representation_residual",
        }
    }

    fn needs_fine_grid(self) -> bool {
        !matches!(self, Self::Representation)
    }
}

/// One configured check on the study results.
#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub report: RateReport,
    pub assertions: Vec<Assertion>,
    pub output_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

fn scheme_options(config: &ExperimentConfig) -> SchemeOptions<f64> {
    match config.estimator {
        EstimatorKind::Regression => {
            SchemeOptions::regression(config.basis.clone()).with_control_variates(config.control_variates)
        }
        EstimatorKind::Nested => SchemeOptions::nested(config.inner_samples, config.basis.clone())
            .with_control_variates(config.control_variates),
    }
}

/// The bundle for each configured `N` at `N * factor` steps. When every
/// `N` divides the largest one, all grids are aggregated from a single
/// draw so that the paths are shared across `N`.
fn bundles_for_grids(config: &ExperimentConfig, index: u64, factor: usize) -> Result<Vec<PathBundle<f64>>> {
    let seed = SeedSpec::new(config.seed, index);
    let n_max = *config.grids.iter().max().expect("validated grid list");
    let draw = |n: usize| -> Result<PathBundle<f64>> {
        let grid = make_uniform_grid(config.horizon, n * factor)?;
        sample_bundle(seed, &grid, config.samples, 1, 1)
    };
    if config.grids.iter().all(|&n| n_max.is_multiple_of(n)) {
        let finest = draw(n_max)?;
        config
            .grids
            .iter()
            .map(|&n| {
                if n == n_max {
                    Ok(finest.clone())
                } else {
                    finest.coarsen(n_max / n)
                }
            })
            .collect()
    } else {
        config.grids.iter().map(|&n| draw(n)).collect()
    }
}

fn bundle_cells(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    problem: &FbdsdeProblem<f64>,
    solution: &BenchmarkSolution<f64>,
    index: u64,
) -> Result<Vec<BundleCells>> {
    let factor = if kind.needs_fine_grid() { config.fine_factor } else { 1 };
    let options = scheme_options(config);
    bundles_for_grids(config, index, factor)?
        .into_iter()
        .map(|fine| {
            let coarse = fine.coarsen(factor)?;
            match kind {
                ExperimentKind::Convergence => {
                    let fw = euler_forward(problem, &coarse)?;
                    let scheme = backward_scheme(problem, &coarse, &fw, &options)?;
                    let (y_ref, _) = analytic_solution(solution, &coarse)?;
                    let (_, z_fine) = analytic_solution(solution, &fine)?;
                    Ok(error_n_stat(&y_ref, &z_fine, &scheme.y, &scheme.z, 1, 1, &fine.grid, &coarse.grid)?.cells)
                }
                ExperimentKind::Regularity => {
                    let fw = euler_forward(problem, &coarse)?;
                    let (y_fine, z_fine) = analytic_solution(solution, &fine)?;
                    let zbar = compute_zbar(&z_fine, 1, &fine.grid, &coarse.grid, &fw.x, 1, &config.basis)?;
                    Ok(l2_regularity_stat(&y_fine, 1, &z_fine, 1, &zbar, &fine.grid, &coarse.grid)?.cells)
                }
                ExperimentKind::Representation => {
                    let fw = variational_flow(problem, &coarse)?;
                    let scheme = backward_scheme(problem, &coarse, &fw, &options)?;
                    let var = solve_variational_bdsde(problem, &coarse, &fw, &scheme, &config.basis, &options)?;
                    representation_residual(problem, &fw, &scheme, &var)
                }
            }
        })
        .collect()
}

/// Runs the study and evaluates its assertions without writing files.
pub fn compute_study(kind: ExperimentKind, config: &ExperimentConfig) -> Result<(RateReport, Vec<Assertion>)> {
    let problem = benchmark_problem(config.benchmark, config.param, config.x0, config.horizon)?;
    let solution = BenchmarkSolution::new(config.benchmark, config.param, config.x0, config.horizon);
    let run = |p: usize| bundle_cells(kind, config, &problem, &solution, p as u64);
    let per_bundle: Vec<Vec<BundleCells>> = if config.deterministic {
        (0..config.bundles).map(run).collect::<Result<_>>()?
    } else {
        (0..config.bundles).into_par_iter().map(run).collect::<Result<_>>()?
    };
    let mut report = RateReport::new(config.benchmark);
    for (g, &n) in config.grids.iter().enumerate() {
        let cells: Vec<BundleCells> = per_bundle.iter().map(|b| b[g].clone()).collect();
        let estimate = combine(&cells)?;
        report.push(n, config.samples, &estimate);
    }
    let assertions = assertions(kind, config, &report);
    Ok((report, assertions))
}

fn assertions(kind: ExperimentKind, config: &ExperimentConfig, report: &RateReport) -> Vec<Assertion> {
    let mut out = Vec::new();
    let by_n = |pick: fn(usize, usize) -> bool| {
        report
            .rows
            .iter()
            .fold(None, |best: Option<&crate::analytics::ReportRow>, r| match best {
                Some(b) if !pick(r.steps, b.steps) => Some(b),
                _ => Some(r),
            })
            .expect("at least two rows")
    };
    let smallest = by_n(|a, b| a < b);
    let largest = by_n(|a, b| a > b);
    if matches!(kind, ExperimentKind::Convergence | ExperimentKind::Regularity) {
        let slope = report.fit.map(|f| f.slope).unwrap_or(f64::NAN);
        out.push(Assertion {
            name: format!("{} slope", kind.statistic()),
            passed: slope >= config.slope_min && slope <= config.slope_max,
            detail: format!("slope {slope:.4} vs band [{}, {}]", config.slope_min, config.slope_max),
        });
    }
    match kind {
        ExperimentKind::Convergence => out.push(Assertion {
            name: format!("{} decreases", kind.statistic()),
            passed: largest.value < smallest.value,
            detail: format!(
                "N={}: {:e} vs N={}: {:e}",
                largest.steps, largest.value, smallest.steps, smallest.value
            ),
        }),
        ExperimentKind::Representation => {
            let ratio = largest.value / smallest.value;
            out.push(Assertion {
                name: format!("{} ratio", kind.statistic()),
                passed: ratio <= config.representation_ratio,
                detail: format!(
                    "N={} over N={}: {ratio:.4} vs bound {}",
                    largest.steps, smallest.steps, config.representation_ratio
                ),
            });
        }
        ExperimentKind::Regularity => {}
    }
    out
}

/// Runs the study and writes `report.csv`, `report_loglog.csv`,
/// `report.md` and `manifest.txt` into `output_dir`.
pub fn run_experiment(kind: ExperimentKind, config: &ExperimentConfig, output_dir: &Path) -> Result<ExperimentOutcome> {
    let (report, assertions) = compute_study(kind, config)?;
    fs::create_dir_all(output_dir)?;
    fs::write(output_dir.join("report.csv"), report_csv(kind, config, &report))?;
    fs::write(output_dir.join("report_loglog.csv"), loglog_csv(config, &report))?;
    fs::write(
        output_dir.join("report.md"),
        report_markdown(kind, config, &report, &assertions),
    )?;
    fs::write(output_dir.join("manifest.txt"), manifest(kind, config))?;
    Ok(ExperimentOutcome {
        kind,
        report,
        assertions,
        output_dir: output_dir.to_path_buf(),
    })
}

fn fmt_slope(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.6}")).unwrap_or_default()
}

pub fn report_csv(kind: ExperimentKind, config: &ExperimentConfig, report: &RateReport) -> String {
    let mut s = String::from("kind,benchmark,param,N,M,P,basis,seed,statistic,stderr,slope_so_far\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.12e},{:.6e},{}",
            kind.name(),
            report.benchmark,
            config.param,
            r.steps,
            r.samples,
            r.bundles,
            config.basis.label(),
            config.seed,
            r.value,
            r.stderr,
            fmt_slope(r.slope_so_far)
        );
    }
    s
}

fn loglog_csv(config: &ExperimentConfig, report: &RateReport) -> String {
    let mut s = String::from("N,h,log_h,statistic,log_statistic,stderr\n");
    for r in &report.rows {
        let h = config.horizon / r.steps as f64;
        let _ = writeln!(
            s,
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.6e}",
            r.steps,
            h,
            h.ln(),
            r.value,
            r.value.ln(),
            r.stderr
        );
    }
    s
}

fn report_markdown(
    kind: ExperimentKind,
    config: &ExperimentConfig,
    report: &RateReport,
    assertions: &[Assertion],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {} study: {}\n", kind.name(), report.benchmark);
    let _ = writeln!(
        s,
        "param = {}, x0 = {}, T = {}, M = {}, P = {}, basis = {}, seed = {}\n",
        config.param,
        config.x0,
        config.horizon,
        config.samples,
        config.bundles,
        config.basis.label(),
        config.seed
    );
    let _ = writeln!(s, "| N | h | {} | stderr | slope so far |", kind.statistic());
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "| {} | {:.6} | {:.6e} | {:.3e} | {} |",
            r.steps,
            config.horizon / r.steps as f64,
            r.value,
            r.stderr,
            fmt_slope(r.slope_so_far)
        );
    }
    let _ = writeln!(s);
    match report.fit {
        Some(f) => {
            let _ = writeln!(
                s,
                "Fitted log-log slope against h: {:.4} (intercept {:.4}, residual {:.4}).",
                f.slope, f.intercept, f.residual
            );
        }
        None => {
            let _ = writeln!(s, "No slope could be fitted.");
        }
    }
    let claim = match kind {
        ExperimentKind::Convergence => "squared error proportional to h, i.e. slope 1",
        ExperimentKind::Regularity => "regularity statistic proportional to h, i.e. slope 1",
        ExperimentKind::Representation => "representation residual tending to 0 as h decreases",
    };
    let _ = writeln!(s, "Theoretical rate: {claim}.\n");
    for a in assertions {
        let _ = writeln!(
            s,
            "- {}: **{}** ({})",
            a.name,
            if a.passed { "PASS" } else { "FAIL" },
            a.detail
        );
    }
    s
}

fn manifest(kind: ExperimentKind, config: &ExperimentConfig) -> String {
    let mut s = format!("kind = {}\n", kind.name());
    s.push_str(&config.manifest());
    let _ = writeln!(s, "crate_version = {}", env!("CARGO_PKG_VERSION"));
    for p in 0..config.bundles {
        let _ = writeln!(s, "bundle_seed = {}:{}", config.seed, p);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "benchmark = {kind}\nseed = 5\ngrids = 4, 8\nsamples = 256\nbundles = 2\nfine_factor = 4\n"
        ))
        .unwrap()
    }

    #[test]
    fn kinds_parse() {
        for k in [
            ExperimentKind::Convergence,
            ExperimentKind::Regularity,
            ExperimentKind::Representation,
        ] {
            assert_eq!(ExperimentKind::parse(k.name()), Some(k));
        }
        assert_eq!(ExperimentKind::parse("other"), None);
    }

    #[test]
    fn writes_all_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(ExperimentKind::Convergence, &small("linear_z"), dir.path()).unwrap();
        for f in ["report.csv", "report_loglog.csv", "report.md", "manifest.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("convergence,linear_z,0.5,4,256,2,poly3,5,"));
        assert_eq!(out.report.rows.len(), 2);
        assert_eq!(out.assertions.len(), 2);
    }

    #[test]
    fn parallel_and_sequential_bundles_agree() {
        let mut c = small("linear_y");
        let (a, _) = compute_study(ExperimentKind::Regularity, &c).unwrap();
        c.deterministic = false;
        let (b, _) = compute_study(ExperimentKind::Regularity, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uncoupled_grids_are_supported() {
        let mut c = small("trivial");
        c.grids = vec![4, 6];
        let (r, _) = compute_study(ExperimentKind::Representation, &c).unwrap();
        assert_eq!(r.rows.len(), 2);
    }
}
