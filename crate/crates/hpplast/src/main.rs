use std::path::PathBuf;
use std::process::ExitCode;

use hpplast::cli::{
    cmd_check, cmd_solve, cmd_study, ProblemConfig, EXIT_CHECK_FAILED, EXIT_CONFIG,
    EXIT_NONCONVERGENCE, EXIT_OK,
};
use hpplast::Error;

const USAGE: &str = "\
usage: hpplast <command> <config> [options]

commands:
  solve <config>   assemble and solve, write VTK/log/report artifacts
  study <config>   run a uniform-refinement convergence study, write CSV
  check <config>   run the verification suite, one PASS/FAIL line per group

options:
  --out <dir>      override the output directory
  --group=<name>   restrict `check` to one group
  --verbose        per-iteration solver output

configuration is flat `key = value` text with [section] headers; any key
can be overridden with HPPLAST_<SECTION>_<KEY> environment variables.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    ExitCode::from(run(&args) as u8)
}

fn run(args: &[String]) -> i32 {
    let mut command = None;
    let mut config_path = None;
    let mut out_dir: Option<PathBuf> = None;
    let mut group: Option<String> = None;
    let mut verbose = false;

    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "--help" | "-h" => {
                println!("{USAGE}");
                return EXIT_OK;
            }
            "--verbose" => verbose = true,
            "--out" => match iter.next() {
                Some(dir) => out_dir = Some(PathBuf::from(dir)),
                None => {
                    eprintln!("error: --out needs a directory");
                    return EXIT_CONFIG;
                }
            },
            other if other.starts_with("--group=") => {
                group = Some(other["--group=".len()..].to_string());
            }
            other if command.is_none() => command = Some(other.to_string()),
            other if config_path.is_none() => config_path = Some(PathBuf::from(other)),
            other => {
                eprintln!("error: unexpected argument '{other}'");
                return EXIT_CONFIG;
            }
        }
    }

    let Some(command) = command else {
        eprintln!("{USAGE}");
        return EXIT_CONFIG;
    };
    let Some(config_path) = config_path else {
        eprintln!("error: missing config path\n{USAGE}");
        return EXIT_CONFIG;
    };

    let mut config = match ProblemConfig::from_file(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(dir) = out_dir {
        config.out_dir = dir;
    }
    config.solver.verbose |= verbose;

    match command.as_str() {
        "solve" => match cmd_solve(&config) {
            Ok(artifacts) => {
                if let Some(p) = &artifacts.vtk {
                    println!("solution: {}", p.display());
                }
                if let Some(p) = &artifacts.csv {
                    println!("complementarity: {}", p.display());
                }
                if let Some(p) = &artifacts.log {
                    println!("iterations: {}", p.display());
                }
                EXIT_OK
            }
            Err(e @ Error::NonConvergence { .. }) => {
                eprintln!("error: {e}");
                EXIT_NONCONVERGENCE
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        "study" => match cmd_study(&config) {
            Ok(artifacts) => {
                if let Some(p) = &artifacts.csv {
                    println!("study: {}", p.display());
                }
                EXIT_OK
            }
            Err(e @ Error::NonConvergence { .. }) => {
                eprintln!("error: {e}");
                EXIT_NONCONVERGENCE
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        "check" => match cmd_check(&config, group.as_deref()) {
            Ok((results, _)) => {
                let mut all_ok = true;
                for r in &results {
                    println!("{}: {} ({})", r.group, if r.passed { "PASS" } else { "FAIL" }, r.detail);
                    all_ok &= r.passed;
                }
                if all_ok {
                    EXIT_OK
                } else {
                    EXIT_CHECK_FAILED
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_CONFIG
            }
        },
        other => {
            eprintln!("error: unknown command '{other}'\n{USAGE}");
            EXIT_CONFIG
        }
    }
}
