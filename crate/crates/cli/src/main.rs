mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use isloss::bench::{self, PairGenConfig};
use isloss::loss::{empirical_kl, is_weights, log_is_weights, LossVector, Temperature};
use isloss::oracle::{
    closed_form_solution, solve_inner_max_ascent, solve_inner_max_grid, KlBudget, OracleSolution,
};
use isloss::train::{self, ModelParams};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Importance-sampling robust losses: weight inspection, minimax oracles,
/// desk-scale training, and cross-population evaluation.
#[derive(Parser)]
#[command(name = "isloss", version, about)]
struct Cli {
    /// Override the experiment seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print importance-sampling weights and their empirical KL as CSV.
    Weights(WeightsArgs),
    /// Solve the KL-constrained inner maximization and compare against the
    /// closed form.
    Oracle(OracleArgs),
    /// Train a model from a JSON experiment config; writes trace CSVs and the
    /// model file.
    Train(RunArgs),
    /// Evaluate a trained model across the configured populations; writes the
    /// verification report and hard-pair CSVs.
    Eval(EvalArgs),
}

#[derive(Args)]
struct WeightsArgs {
    /// Comma-separated per-sample losses.
    #[arg(long)]
    losses: String,
    /// Temperature T > 0.
    #[arg(long)]
    temp: f64,
    /// Weight family: `is` (softmax of L/T) or `logis` (normalized L^(1/T)).
    #[arg(long, default_value = "is")]
    kind: String,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated per-sample losses.
    #[arg(long)]
    losses: String,
    /// KL budget C ≥ 0 (nats).
    #[arg(long)]
    budget: f64,
    /// Solver: `grid`, `ascent`, or `both`.
    #[arg(long, default_value = "both")]
    method: String,
    /// Simplex grid spacing is 1/resolution (grid method, N ≤ 4).
    #[arg(long, default_value_t = 400)]
    resolution: usize,
    /// Initial ascent step.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Ascent iterations.
    #[arg(long, default_value_t = 5000)]
    iters: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Path to a model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Weights(args) => cmd_weights(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Train(args) => cmd_train(args, &cli),
        Command::Eval(args) => cmd_eval(args, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // exit 2 for input validation problems, 1 for everything else
            if err.is::<ValidationError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Marker for operand validation failures (exit code 2).
#[derive(Debug)]
struct ValidationError(String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ValidationError(msg.into()))
}

fn parse_losses(text: &str) -> Result<LossVector> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| validation(format!("cannot parse loss value {s:?}")))
        })
        .collect::<Result<_>>()?;
    LossVector::new(values).map_err(|e| validation(e.to_string()))
}

fn parse_temperature(t: f64) -> Result<Temperature> {
    Temperature::new(t).map_err(|_| validation("temperature must be positive"))
}

fn fmt4(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn cmd_weights(args: &WeightsArgs) -> Result<()> {
    let losses = parse_losses(&args.losses)?;
    let temp = parse_temperature(args.temp)?;
    let weights = match args.kind.as_str() {
        "is" => is_weights(&losses, temp),
        "logis" => log_is_weights(&losses, temp).map_err(|e| validation(e.to_string()))?,
        other => bail!(validation(format!("unknown weight kind {other:?}"))),
    };
    println!("{}", fmt4(weights.as_slice()));
    println!("kl,{:.4}", empirical_kl(&weights));
    Ok(())
}

fn print_solution(tag: &str, sol: &OracleSolution) {
    println!(
        "{tag},objective,{},kl,{}",
        sol.objective, sol.kl
    );
    println!("{tag},weights,{}", fmt4(sol.weights.as_slice()));
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let losses = parse_losses(&args.losses)?;
    let budget = KlBudget::new(args.budget).map_err(|e| validation(e.to_string()))?;
    let closed = closed_form_solution(&losses, budget)
        .map_err(|e| validation(e.to_string()))?;

    let mut solutions = Vec::new();
    match args.method.as_str() {
        "grid" => solutions.push((
            "grid",
            solve_inner_max_grid(&losses, budget, args.resolution)?,
        )),
        "ascent" => solutions.push((
            "ascent",
            solve_inner_max_ascent(&losses, budget, args.step, args.iters)?,
        )),
        "both" => {
            if losses.len() <= 4 {
                solutions.push((
                    "grid",
                    solve_inner_max_grid(&losses, budget, args.resolution)?,
                ));
            }
            solutions.push((
                "ascent",
                solve_inner_max_ascent(&losses, budget, args.step, args.iters)?,
            ));
        }
        other => bail!(validation(format!("unknown oracle method {other:?}"))),
    }

    for (tag, sol) in &solutions {
        print_solution(tag, sol);
    }
    println!(
        "closed-form,temperature,{},regime,{}",
        closed_kind_temp(&losses, budget)?,
        closed_kind_regime(&losses, budget)?
    );
    print_solution("closed-form", &closed);
    for (tag, sol) in &solutions {
        println!(
            "delta,{tag},{}",
            (closed.objective - sol.objective).abs()
        );
    }
    Ok(())
}

fn closed_kind_temp(losses: &LossVector, budget: KlBudget) -> Result<f64> {
    Ok(isloss::oracle::temperature_for_budget(losses, budget)
        .map_err(|e| validation(e.to_string()))?
        .temp
        .get())
}

fn closed_kind_regime(losses: &LossVector, budget: KlBudget) -> Result<&'static str> {
    use isloss::oracle::BudgetRegime;
    Ok(
        match isloss::oracle::temperature_for_budget(losses, budget)
            .map_err(|e| validation(e.to_string()))?
            .regime
        {
            BudgetRegime::Interior => "interior",
            BudgetRegime::Uniform => "uniform",
            BudgetRegime::PointMass => "point-mass",
        },
    )
}

/// Write every artifact or none: contents are assembled in memory first, and
/// any partially written file is removed on failure.
fn write_artifacts(files: &[(PathBuf, &str)]) -> Result<()> {
    let mut written: Vec<&Path> = Vec::new();
    for (path, contents) in files {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        if let Err(err) = fs::write(path, contents) {
            for w in written {
                let _ = fs::remove_file(w);
            }
            let _ = fs::remove_file(path);
            return Err(err).with_context(|| format!("writing {}", path.display()));
        }
        written.push(path);
    }
    Ok(())
}

fn cmd_train(args: &RunArgs, cli: &Cli) -> Result<()> {
    let experiment = config::load(&args.config, cli.seed.as_ref(), cli.out_dir.as_ref())?;
    let data = experiment.train_population_data()?;
    let (model, traces) =
        train::train(&data, &experiment.train).context("training failed")?;

    let out = &experiment.out_dir;
    write_artifacts(&[
        (out.join("trace.csv"), &train::trace_csv(&traces)),
        (out.join("top_weights.csv"), &train::top_weights_csv(&traces)),
        (out.join("model.txt"), &model.to_text()),
    ])?;
    println!(
        "trained {} epochs; artifacts in {}",
        traces.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs, cli: &Cli) -> Result<()> {
    let experiment = config::load(&args.config, cli.seed.as_ref(), cli.out_dir.as_ref())?;
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading model {}", args.model.display()))?;
    let model = ModelParams::from_text(&text).context("parsing model file")?;

    let pair_cfg = PairGenConfig {
        positives_per_class: experiment.pairs.positives_per_class,
        negatives_total: experiment.pairs.negatives_total,
        seed: experiment.pairs.seed,
    };
    let evals = bench::cross_population_eval(
        &model,
        &experiment.populations,
        &pair_cfg,
        &experiment.far_levels,
    )?;

    // hard pairs for the training population at the configured k
    let train_pop = bench::generate_population(experiment.train_population_spec()?)?;
    let pairs = bench::build_pairs(
        &train_pop.data,
        pair_cfg.positives_per_class,
        pair_cfg.negatives_total,
        pair_cfg.seed,
    )?;
    let embeddings = model.embed(train_pop.data.features());
    let (hard_pos, hard_neg) =
        bench::hard_pairs(&embeddings, &pairs, experiment.hard_pair_count)?;

    let out = &experiment.out_dir;
    write_artifacts(&[
        (out.join("report.csv"), &bench::report_csv(&evals)),
        (
            out.join("hard_pairs.csv"),
            &bench::hard_pairs_csv(&hard_pos, &hard_neg),
        ),
        (out.join("pairs.txt"), &bench::pairs_to_string(&pairs)),
    ])?;
    println!(
        "evaluated {} populations; artifacts in {}",
        evals.len(),
        out.display()
    );
    Ok(())
}
