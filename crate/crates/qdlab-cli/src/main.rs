//! Experiment runner CLI: `run` executes a JSON config and persists results,
//! `list` prints the built-in catalog, `check` runs assumption checks only.
//!
//! Exit codes: 0 success, 2 config/schema violation, 3 assumption-check
//! failure (with witness), 4 runtime abort.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qdlab::builtins;
use qdlab::config::{ConfigFile, ExperimentEntry, ExperimentKind, ExperimentSpec};
use qdlab::runner::{run_config, RunError, RunOutput};

#[derive(Parser)]
#[command(
    name = "qdlab",
    version,
    about = "Monte Carlo laboratory for stochastic optimal control of degenerate diffusions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute the experiments in a config file and write results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (QDLAB_THREADS as fallback); never affects output.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "qdlab-out")]
        out: PathBuf,
    },
    /// Print built-in problems, domains and experiment presets.
    List,
    /// Run assumption checks for every experiment's problem and domain.
    Check {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn threads_from_env() -> Option<usize> {
    std::env::var("QDLAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_config(path: &PathBuf) -> Result<(ConfigFile, String), RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunError::Schema(format!("{}: {e}", path.display())))?;
    let cfg = ConfigFile::parse(&text).map_err(RunError::Schema)?;
    Ok((cfg, text))
}

fn write_outputs(
    out_dir: &PathBuf,
    output: &RunOutput,
    config_text: &str,
    seed: u64,
) -> Result<(), RunError> {
    let io_err = |e: std::io::Error| RunError::Runtime(e.to_string());
    fs::create_dir_all(out_dir).map_err(io_err)?;
    let tables_dir = out_dir.join("tables");
    fs::create_dir_all(&tables_dir).map_err(io_err)?;
    let results = serde_json::to_string_pretty(&output.results)
        .map_err(|e| RunError::Runtime(e.to_string()))?;
    fs::write(out_dir.join("results.json"), results + "\n").map_err(io_err)?;
    for (name, body) in &output.tables {
        fs::write(tables_dir.join(name), body).map_err(io_err)?;
    }
    let manifest = serde_json::json!({
        "config_hash": sha256_hex(config_text.as_bytes()),
        "seed": seed,
        "versions": {
            "qdlab": qdlab::VERSION,
            "qdlab-cli": env!("CARGO_PKG_VERSION"),
        },
    });
    let manifest_text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| RunError::Runtime(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), manifest_text + "\n").map_err(io_err)?;
    Ok(())
}

fn cmd_run(
    config: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
    out: PathBuf,
) -> Result<(), RunError> {
    let (cfg, text) = load_config(&config)?;
    let threads = threads.or_else(threads_from_env);
    let effective_seed = seed.or(cfg.seed).unwrap_or(0);
    let output = run_config(&cfg, seed, threads)?;
    write_outputs(&out, &output, &text, effective_seed)?;
    let n = output.results["experiments"]
        .as_array()
        .map(|a| a.len())
        .unwrap_or(0);
    println!(
        "wrote {} experiment result(s) and {} table(s) to {}",
        n,
        output.tables.len(),
        out.display()
    );
    Ok(())
}

fn cmd_list() {
    println!("problems:");
    for p in builtins::problem_catalog() {
        println!("  {:<20} {}", p.name, p.description);
    }
    println!("domains:");
    println!("  {:<20} {}", "ball", "ball of given center and radius");
    println!("  {:<20} {}", "ellipsoid", "ellipsoid with per-axis semi-axes");
    println!(
        "  {:<20} {}",
        "box", "smoothed box (quartic superellipsoid) with half-widths"
    );
    println!("experiments:");
    for (name, desc) in builtins::experiment_catalog() {
        println!("  {:<20} {}", name, desc);
    }
}

fn cmd_check(
    config: PathBuf,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<(), RunError> {
    let (cfg, _) = load_config(&config)?;
    let threads = threads.or_else(threads_from_env);
    // Rewrite every experiment into an assumption check on its problem and
    // domain, de-duplicated by problem name.
    let mut seen = std::collections::BTreeSet::new();
    let mut checks = Vec::new();
    for entry in &cfg.experiments {
        let spec: ExperimentSpec = match entry {
            ExperimentEntry::Preset { preset, .. } => match qdlab::runner::preset_spec(preset) {
                Some(s) => s,
                None => continue,
            },
            ExperimentEntry::Custom(s) => s.as_ref().clone(),
        };
        let problem = spec.resolve_problem().map_err(RunError::Schema)?;
        if !seen.insert(problem.name.clone()) {
            continue;
        }
        let mut check = spec.clone();
        check.kind = ExperimentKind::AssumptionCheck;
        check.name = format!("check-{}", problem.name);
        checks.push(ExperimentEntry::Custom(Box::new(check)));
    }
    let check_cfg = ConfigFile {
        version: cfg.version,
        seed: cfg.seed,
        threads: cfg.threads,
        experiments: checks,
    };
    let output = run_config(&check_cfg, seed, threads)?;
    let empty = vec![];
    for exp in output.results["experiments"].as_array().unwrap_or(&empty) {
        let name = exp["name"].as_str().unwrap_or("?");
        for v in exp["verdicts"].as_array().unwrap_or(&empty) {
            println!(
                "{}: {} -> {}",
                name,
                v["check"].as_str().unwrap_or("?"),
                if v["pass"].as_bool().unwrap_or(false) {
                    "ok"
                } else {
                    "FAIL"
                }
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run {
            config,
            seed,
            threads,
            out,
        } => cmd_run(config, seed, threads, out),
        Cmd::List => {
            cmd_list();
            Ok(())
        }
        Cmd::Check {
            config,
            seed,
            threads,
        } => cmd_check(config, seed, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
