use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tilt_core::latent_store::{self, Format, SyntheticShiftSpec};
use tilt_core::report;
use tilt_core::validate::{self, Budget};
use tilt_core::{EmbeddingSet, EpisodeSpec, Error, Mode, RunConfig, RunResult, ScoreKind, Strength};

#[derive(Parser, Debug)]
#[command(name = "tilt", version, about = "Test-time adaptation by exponential tilting of latent embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled embedding dataset.
    Synth(SynthArgs),
    /// Run the episodic benchmark for one configuration.
    Bench(BenchArgs),
    /// Sweep the tilting strength over a grid with paired episodes.
    Ablate(AblateArgs),
    /// Run the randomized theory checks.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// binary or jsonl; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, default_value_t = 3.0)]
    class_mean_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    within_class_std: f64,
    #[arg(long, default_value_t = 0.0)]
    mean_shift: f64,
    /// Fraction of labels reassigned to a different class.
    #[arg(long, default_value_t = 0.0)]
    corrupt_fraction: f64,
    /// Comma-separated class prior (one weight per class).
    #[arg(long, value_delimiter = ',')]
    prior_shift: Option<Vec<f64>>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, default_value = "frozen")]
    mode: Mode,
    #[arg(long, default_value = "conf")]
    score: ScoreKind,
    #[arg(long, default_value_t = 10.0)]
    tau: f64,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    knn_k: usize,
    /// CSV report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report path, including per-episode accuracies.
    #[arg(long)]
    json_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fixed tilting strength.
    #[arg(long, conflicts_with = "c")]
    lambda: Option<f64>,
    /// Target mean score; the strength is solved per episode.
    #[arg(long)]
    c: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// start:end:step
    #[arg(long, default_value = "0.25:2.0:0.25")]
    lambda_grid: String,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smaller instance counts for a fast sanity pass.
    #[arg(long)]
    quick: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult = Result<(), Failure>;

fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let [start, end, step] = parts.as_slice() else {
        return Err(format!("lambda grid `{text}` must look like start:end:step"));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("lambda grid `{text}`: `{s}` is not a number"))
    };
    let (start, end, step) = (num(start)?, num(end)?, num(step)?);
    if step <= 0.0 {
        return Err(format!("lambda grid `{text}`: step must be positive"));
    }
    if end < start {
        return Err(format!("lambda grid `{text}`: end is below start"));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    let spec = SyntheticShiftSpec {
        num_classes: a.classes,
        dim: a.dim,
        per_class: a.per_class,
        class_mean_scale: a.class_mean_scale,
        within_class_std: a.within_class_std,
        prior_shift: a.prior_shift.clone(),
        mean_shift_magnitude: a.mean_shift,
        corrupt_fraction: a.corrupt_fraction,
        seed: a.seed,
    };
    spec.validate()?;
    let set = latent_store::generate_synthetic(&spec)?;
    let format = a.format.unwrap_or_else(|| Format::from_path(&a.out));
    latent_store::save_dataset(&set, &a.out, format)?;
    println!(
        "wrote {}: n={} d={} C={}",
        a.out.display(),
        set.len(),
        set.dim(),
        set.num_classes()
    );
    Ok(())
}

fn load(run: &RunArgs) -> Result<EmbeddingSet, Failure> {
    let format = run.format.unwrap_or_else(|| Format::from_path(&run.data));
    Ok(latent_store::load_dataset(&run.data, format)?)
}

fn episode_spec(run: &RunArgs) -> EpisodeSpec {
    EpisodeSpec {
        ways: run.ways,
        shots: run.shots,
        queries_per_class: run.queries,
        seed: run.seed,
    }
}

fn run_config(run: &RunArgs, strength: Strength) -> RunConfig {
    RunConfig {
        mode: run.mode,
        score: run.score,
        strength,
        tau: run.tau,
        knn_k: run.knn_k,
        episodes: run.episodes,
        ..RunConfig::default()
    }
}

fn header(command: &str, run: &RunArgs, spec: &EpisodeSpec, cfg: &RunConfig, extra: Value) -> Value {
    json!({
        "command": command,
        "data": run.data.display().to_string(),
        "spec": spec,
        "config": cfg,
        "extra": extra,
    })
}

fn emit(run: &RunArgs, header: &Value, results: &[RunResult]) -> CliResult {
    let data = run.data.display().to_string();
    let io = |e: Error| Failure::Runtime(e.to_string());
    if let Some(path) = &run.out {
        let mut w = create(path)?;
        report::write_csv(&mut w, header, results, &data).map_err(io)?;
        w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if let Some(path) = &run.json_out {
        let mut w = create(path)?;
        report::write_json(&mut w, header, results, &data).map_err(io)?;
        w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn summary(r: &RunResult) -> String {
    format!(
        "{} {} {}: {:.2} ± {:.2} over {} episodes ({:.2}s)",
        r.config.mode,
        r.config.score,
        match r.config.strength {
            Strength::Lambda(l) => format!("lambda={l}"),
            Strength::Target(c) => format!("c={c}"),
        },
        100.0 * r.mean,
        100.0 * r.std,
        r.accuracies.len(),
        r.seconds
    )
}

fn cmd_bench(a: &BenchArgs) -> CliResult {
    let strength = match (a.lambda, a.c) {
        (_, Some(c)) => Strength::Target(c),
        (Some(l), None) => Strength::Lambda(l),
        (None, None) => Strength::Lambda(1.0),
    };
    let spec = episode_spec(&a.run);
    let cfg = run_config(&a.run, strength);
    cfg.validate()?;
    let data = load(&a.run)?;
    let result = tilt_core::episodes::run_benchmark(&data, &spec, &cfg, a.run.workers)?;
    println!("{}", summary(&result));
    let header = header("bench", &a.run, &spec, &cfg, Value::Null);
    emit(&a.run, &header, std::slice::from_ref(&result))
}

fn cmd_ablate(a: &AblateArgs) -> CliResult {
    let grid = parse_grid(&a.lambda_grid).map_err(Failure::Usage)?;
    let spec = episode_spec(&a.run);
    let cfg = run_config(&a.run, Strength::Lambda(grid[0]));
    cfg.validate()?;
    let data = load(&a.run)?;
    let results = tilt_core::episodes::ablate_lambda(&data, &spec, &cfg, &grid, a.run.workers)?;
    for r in &results {
        println!("{}", summary(r));
    }
    let header = header("ablate", &a.run, &spec, &cfg, json!({ "lambda_grid": grid }));
    emit(&a.run, &header, &results)
}

fn cmd_validate(a: &ValidateArgs) -> CliResult {
    let budget = if a.quick { Budget::quick() } else { Budget::full() };
    let outcomes = validate::run_all(a.seed, budget);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed (seed {})", outcomes.len(), a.seed);
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn grid_row_counts() {
        assert_eq!(parse_grid("0:0:1").unwrap(), vec![0.0]);
        assert_eq!(parse_grid("0.25:2.0:0.25").unwrap().len(), 8);
        assert_eq!(parse_grid("0:1:0.3").unwrap().len(), 4);
        assert_eq!(parse_grid("0:1:0.1").unwrap().len(), 11);
    }

    #[test]
    fn malformed_grids() {
        for bad in ["", "1:2", "a:1:1", "0:1:0", "0:1:-1", "2:1:0.5", "0:1:1:1", "0:inf:1"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
