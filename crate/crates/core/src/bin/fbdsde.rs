use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use fbdsde::config::ExperimentConfig;
use fbdsde::experiment::{run_experiment, ExperimentKind};

const USAGE: &str = "usage: fbdsde run <convergence|regularity|representation> --config <path>";

/// Environment variable that overrides `output_dir` from the config.
const OUTPUT_ENV: &str = "FBDSDE_OUTPUT_DIR";

struct Invocation {
    kind: ExperimentKind,
    config: PathBuf,
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut it = args.iter();
    match it.next().map(String::as_str) {
        Some("run") => {}
        Some(other) => return Err(format!("unknown command '{other}'")),
        None => return Err("missing command".into()),
    }
    let kind_name = it.next().ok_or("missing study kind")?;
    let kind = ExperimentKind::parse(kind_name).ok_or_else(|| format!("unknown study kind '{kind_name}'"))?;
    let mut config = None;
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => config = Some(PathBuf::from(it.next().ok_or("--config needs a path")?)),
            other => match other.strip_prefix("--config=") {
                Some(path) => config = Some(PathBuf::from(path)),
                None => return Err(format!("unexpected argument '{other}'")),
            },
        }
    }
    Ok(Invocation {
        kind,
        config: config.ok_or("missing --config <path>")?,
    })
}

fn run(inv: &Invocation, config: &ExperimentConfig) -> anyhow::Result<bool> {
    let dir = std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.output_dir.clone());
    let outcome = run_experiment(inv.kind, config, &dir)
        .with_context(|| format!("{} study on {}", inv.kind.name(), config.benchmark))?;
    for row in &outcome.report.rows {
        println!(
            "N={:<5} {}={:.6e} stderr={:.3e}",
            row.steps,
            inv.kind.statistic(),
            row.value,
            row.stderr
        );
    }
    if let Some(fit) = outcome.report.fit {
        println!("slope={:.4}", fit.slope);
    }
    for a in &outcome.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    println!("reports written to {}", outcome.output_dir.display());
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let inv = match parse_args(&args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("error: {msg}\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    let config = match ExperimentConfig::from_file(&inv.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: invalid config {}: {e}", inv.config.display());
            return ExitCode::from(2);
        }
    };
    match run(&inv, &config) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: assertion failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
