//! Command-line entry point for the style-dynamics pipeline.
//!
//! Any `--dotted.key=value` argument overrides the matching config key.
//! Progress goes to stderr; results go only to files in the output
//! directory.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stylotrace::pipeline::{Pipeline, PipelineConfig, PipelineError, Stage, ERROR_FILE};

const CONFIG_ENV: &str = "STYLOTRACE_CONFIG";

#[derive(Parser, Debug)]
#[command(
    name = "stylotrace",
    version,
    about = "Estimate writing-style trajectories of scholars from co-authored corpora",
    after_help = "Any config key can be overridden with --section.key=value, e.g. --dynamics.k_max=6."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Parse the bibliography, link texts and profiles, filter scholars.
    Ingest,
    /// Turn manuscript texts into weighted style components.
    Embed,
    /// Assign components to co-authors and propagate style estimates.
    Attribute,
    /// Change series, convergence sweep and trajectory clustering.
    AnalyzeDynamics,
    /// Advisor detection, emergence curve and projections.
    AnalyzeEmergence,
    /// Collaboration events, regression importance and factor tests.
    AnalyzeCollab,
    /// Write a synthetic corpus with ground truth into the input directory.
    Simulate,
    /// Every stage from ingest to analyze-collab.
    All,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        match self {
            Command::Ingest => vec![Stage::Ingest],
            Command::Embed => vec![Stage::Embed],
            Command::Attribute => vec![Stage::Attribute],
            Command::AnalyzeDynamics => vec![Stage::AnalyzeDynamics],
            Command::AnalyzeEmergence => vec![Stage::AnalyzeEmergence],
            Command::AnalyzeCollab => vec![Stage::AnalyzeCollab],
            Command::Simulate => vec![Stage::Simulate],
            Command::All => Stage::PIPELINE.to_vec(),
        }
    }
}

const FLAGS: &[&str] = &["config", "seed", "threads", "output", "force", "quiet", "help", "version"];

/// Splits `--key=value` overrides for config keys from clap's arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((key, value)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if !FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn build_config(cli: &Cli, mut overrides: Vec<(String, String)>) -> Result<PipelineConfig, PipelineError> {
    let document = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|source| PipelineError::Io {
            path: p.clone(),
            source,
        })?),
        None => None,
    };
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = cli.threads {
        overrides.push(("threads".into(), t.to_string()));
    }
    if let Some(o) = &cli.output {
        overrides.push(("output".into(), format!("{:?}", o.display().to_string())));
    }
    PipelineConfig::load(document.as_deref(), &overrides)
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config { .. } => 2,
        PipelineError::MissingStage { .. } => 3,
        PipelineError::Locked(_) => 4,
        _ => 1,
    }
}

fn report(e: &PipelineError, output: Option<&PathBuf>) -> ExitCode {
    let body = e.to_json();
    eprintln!("{body}");
    if let Some(dir) = output.filter(|d| d.is_dir()) {
        let _ = fs::write(dir.join(ERROR_FILE), format!("{body:#}\n"));
    }
    ExitCode::from(exit_code(e))
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    env_logger::Builder::new()
        .filter_level(if cli.quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();

    let config = match build_config(&cli, overrides) {
        Ok(c) => c,
        Err(e) => return report(&e, cli.output.as_ref()),
    };
    let output = config.output.clone();
    if config.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let error_path = output.join(ERROR_FILE);
    let mut pipeline = Pipeline::new(config, cli.force);
    match pipeline.run(&cli.command.stages()) {
        Ok(manifest) => {
            let _ = fs::remove_file(&error_path);
            log::info!("finished in {:.2}s", manifest.wall_seconds);
            ExitCode::SUCCESS
        }
        Err(e) => report(&e, Some(&output)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["bin", "all", "--dynamics.k_max=6", "--seed=3", "--output", "x", "--foo=bar"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (rest, o) = split_overrides(args);
        assert_eq!(rest, vec!["bin", "all", "--seed=3", "--output", "x"]);
        assert_eq!(
            o,
            vec![("dynamics.k_max".to_string(), "6".to_string()), ("foo".to_string(), "bar".to_string())]
        );
    }
}
