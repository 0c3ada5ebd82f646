//! Re-check a JSON report: `vardecomp-validate report.json` (or `-` for stdin).

use std::io::Read;
use std::process::ExitCode;

use vardecomp::{validate_report, Report};

fn main() -> ExitCode {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: vardecomp-validate <report.json | ->");
        return ExitCode::from(1);
    };
    let text = if path == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map(|_| s)
    } else {
        std::fs::read_to_string(&path)
    };
    let text = match text {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {path}: {e}");
            return ExitCode::from(1);
        }
    };
    let report = match Report::from_json(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {path}: {e}");
            return ExitCode::from(1);
        }
    };
    let checks = validate_report(&report);
    let mut ok = true;
    for c in &checks {
        let status = if c.passed() { "ok  " } else { "FAIL" };
        ok &= c.passed();
        println!("{status} {:<40} deviation {:.3e} (tolerance {:.0e})", c.name, c.deviation, c.tolerance);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
