// Licensed under the Apache License, Version 2.0 <LICENSE-APACHE or
// http://www.apache.org/licenses/LICENSE-2.0> or the MIT license
// <LICENSE-MIT or http://opensource.org/licenses/MIT>, at your
// option. This file may not be copied, modified, or distributed
// except according to those terms.

//! `mcquic-sim`: runs scenarios on the simulated network and audits traces.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcquic::report::RunReport;
use mcquic::scenario::{self, Scenario};
use mcquic::sim::{self, SimOptions};
use mcquic::trace::read_trace;
use mcquic::verify::verify_lines;

const EXIT_INVARIANT: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "mcquic-sim", version, about = "Multicast QUIC scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, given as a bundled name or a TOML file.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the JSON report instead of the summary.
        #[arg(long)]
        json: bool,
    },
    /// Check the invariants of a recorded trace.
    Verify {
        trace: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Bundled scenarios.
    Scenarios {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// List bundled scenario names.
    List,
    /// Print a bundled scenario.
    Show { name: String },
}

fn load(arg: &str) -> Result<Scenario, String> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{arg}: {e}"))?;
        return Scenario::parse(&text).map_err(|e| format!("{arg}: {e}"));
    }
    scenario::bundled(arg).map_err(|e| e.to_string())
}

fn run(
    scenario: &str,
    seed: Option<u64>,
    report: Option<PathBuf>,
    trace: Option<PathBuf>,
    json: bool,
) -> ExitCode {
    let s = match load(scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let sink: Option<Box<dyn Write>> = match &trace {
        Some(p) => match File::create(p) {
            Ok(f) => Some(Box::new(BufWriter::new(f))),
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => None,
    };
    let options = SimOptions {
        seed,
        trace: sink,
        ..SimOptions::default()
    };
    let outcome = match sim::run(&s, options) {
        Ok(o) => o,
        Err(e @ sim::SimError::Io(_)) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_INVARIANT);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let r = RunReport::new(&outcome);
    if let Some(p) = report {
        if let Err(e) = std::fs::write(&p, r.to_json()) {
            eprintln!("error: {}: {e}", p.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    if json {
        println!("{}", r.to_json());
    } else {
        print!("{}", r.summary());
    }
    if r.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_INVARIANT)
    }
}

fn verify(path: &Path, json: bool) -> ExitCode {
    let lines = match File::open(path)
        .map_err(|e| e.to_string())
        .and_then(|f| read_trace(BufReader::new(f)).map_err(|e| e.to_string()))
    {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let r = verify_lines(&lines);
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&r).expect("report serialises")
        );
    } else {
        println!("{} lines", r.lines);
        for c in &r.checks {
            let status = if c.passed() { "ok" } else { "FAIL" };
            println!(
                "check {:<20} {status} ({} violations)",
                c.name, c.violations
            );
            for e in &c.examples {
                println!("    {e}");
            }
        }
        for w in &r.warnings {
            println!("warning: {w}");
        }
    }
    if r.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_INVARIANT)
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            scenario,
            seed,
            report,
            trace,
            json,
        } => run(&scenario, seed, report, trace, json),
        Command::Verify { trace, json } => verify(&trace, json),
        Command::Scenarios { command } => match command {
            ScenarioCommand::List => {
                for (name, _) in scenario::BUNDLED {
                    println!("{name}");
                }
                ExitCode::SUCCESS
            }
            ScenarioCommand::Show { name } => {
                match scenario::BUNDLED.iter().find(|(n, _)| *n == name) {
                    Some((_, text)) => {
                        print!("{text}");
                        ExitCode::SUCCESS
                    }
                    None => {
                        eprintln!("error: unknown bundled scenario {name:?}");
                        ExitCode::from(EXIT_CONFIG)
                    }
                }
            }
        },
    }
}
