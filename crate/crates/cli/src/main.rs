use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgMatches, Args, Command, FromArgMatches};
use strmlab::acceptance::{run_acceptance, CriterionOutcome};
use strmlab::connectivity::AdjacencyMode;
use strmlab::experiments::{run_experiment, write_outputs, Experiment, ExperimentConfig, RunSummary, THREADS_ENV};
use strmlab::Error;

const EXIT_IO: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RESOURCE: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;
const EXIT_UNKNOWN: u8 = 5;

/// Flags shared by every experiment; they override the config file.
#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicates: Option<u64>,
    /// Levels, generations or horizon, depending on the experiment.
    #[arg(long)]
    levels: Option<u32>,
    /// Output directory [default: out/<experiment>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    threads: Option<usize>,
    #[arg(long, value_parser = parse_adjacency)]
    adjacency: Option<AdjacencyMode>,
}

#[derive(Debug, Args)]
struct AcceptanceArgs {
    /// Also write the outcomes as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_adjacency(s: &str) -> Result<AdjacencyMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn cli() -> Command {
    let mut cmd = Command::new("strmlab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Simulation lab for B-ary super-tree random measures and fractal percolation")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for e in Experiment::ALL {
        cmd = cmd.subcommand(RunArgs::augment_args(Command::new(e.name()).about(format!("run the {e} suite"))));
    }
    cmd.subcommand(AcceptanceArgs::augment_args(
        Command::new("acceptance").about("run the acceptance criteria on 1 and 4 threads"),
    ))
    .subcommand(Command::new("list").about("list experiment names"))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Resource { .. } => EXIT_RESOURCE,
        Error::UnknownExperiment(_) => EXIT_UNKNOWN,
        Error::Io(_) => EXIT_IO,
        Error::Domain(_) | Error::InvalidLaw(_) | Error::Regime(_) | Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
    }
}

fn build_config(exp: Experiment, args: &RunArgs) -> strmlab::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::new(exp),
    };
    if cfg.kind()? != exp {
        return Err(Error::Config(format!("config is for `{}`, not `{exp}`", cfg.experiment)));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(l) = args.levels {
        cfg.levels = Some(l);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(a) = args.adjacency {
        cfg.adjacency = a;
    }
    Ok(cfg)
}

fn print_summary(s: &RunSummary) {
    println!("{} seed={} replicates={} config={}", s.experiment, s.seed, s.replicates, &s.config_hash[..16]);
    for p in &s.points {
        let mut parts = Vec::new();
        for (k, f) in &p.frequencies {
            parts.push(format!("{k}={:.4} [{:.4}, {:.4}]", f.estimate, f.lo, f.hi));
        }
        for (k, m) in &p.means {
            parts.push(format!("{k}={:.6} [{:.6}, {:.6}]", m.mean, m.lo, m.hi));
        }
        for (k, v) in &p.p_values {
            parts.push(format!("p({k})={v:.4}"));
        }
        for (k, v) in &p.exact {
            parts.push(format!("{k}={v:.6}"));
        }
        println!("  {}: {}", p.label, parts.join(", "));
    }
    for n in &s.notes {
        println!("  note: {n}");
    }
}

fn run(exp: Experiment, m: &ArgMatches) -> Result<(), Error> {
    let args = RunArgs::from_arg_matches(m).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = build_config(exp, &args)?;
    let out = run_experiment(&cfg)?;
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out").join(exp.name()));
    write_outputs(&out, &dir)?;
    print_summary(&out.summary);
    println!("wrote {} ({:.1}s on {} threads)", dir.display(), out.wall_seconds, out.threads);
    Ok(())
}

fn acceptance(m: &ArgMatches) -> Result<bool, Error> {
    let args = AcceptanceArgs::from_arg_matches(m).map_err(|e| Error::Config(e.to_string()))?;
    let outcomes: Vec<CriterionOutcome> = run_acceptance(|o| println!("{}", o.line()))?;
    if let Some(path) = args.json {
        std::fs::write(path, serde_json::to_vec_pretty(&outcomes)?)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand => EXIT_UNKNOWN,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "list" => {
            for e in Experiment::ALL {
                println!("{e}");
            }
            Ok(true)
        }
        "acceptance" => acceptance(sub),
        _ => name.parse::<Experiment>().and_then(|exp| run(exp, sub)).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_ACCEPTANCE),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
