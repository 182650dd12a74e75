//! Acceptance run. Prints one PASS/FAIL line per criterion and exits with
//! status 1 if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use fbdsde_acceptance::criteria;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for c in criteria() {
            println!("criterion {}: test", c.name);
        }
        return ExitCode::SUCCESS;
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut all = true;
    for c in criteria() {
        if !filters.is_empty()
            && !filters
                .iter()
                .any(|f| c.name.contains(f.as_str()) || "acceptance".contains(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (passed, detail) = match result {
            Ok((passed, detail)) => (passed && elapsed <= c.limit, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        all &= passed;
        println!(
            "{} criterion {}: {detail} [{:.1} s, limit {} s]",
            if passed { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
