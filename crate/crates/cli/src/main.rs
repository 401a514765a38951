use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use introplan::backends::synthetic::{default_mix, synth_dataset};
use introplan::domain::{save_dataset, OptionLabel, Scenario};
use introplan::harness::{
    self, cmd_build_kb, cmd_calibrate, cmd_evaluate, cmd_plan, cmd_sweep, cmd_sweep_kb_sizes, cmd_verify_coverage,
    BackendKind, RunConfig, VerifyCoverageOptions, EXIT_NEEDS_CLARIFICATION,
};
use introplan::planner::{resolve_help, HelpResolution, RunRecord};

#[derive(Parser)]
#[command(name = "introplan", version, about = "Calibrated LLM task planning that asks when unsure")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured backend (synthetic, openai, replay).
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Refuse network backends.
    #[arg(long, global = true)]
    offline: bool,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the knowledge base from the training set.
    BuildKb,
    /// Compute q̂ on the calibration set and write the artifact.
    Calibrate,
    /// Run the test set and write the run log and metrics.
    Evaluate,
    /// Metrics across target success levels (or knowledge-base sizes).
    Sweep {
        /// Sweep knowledge-base sizes at the first target instead.
        #[arg(long)]
        kb_sizes: bool,
    },
    /// Monte Carlo check of the coverage guarantee on synthetic data.
    VerifyCoverage(VerifyArgs),
    /// Plan a single scenario.
    Plan(PlanArgs),
    /// Write synthetic train/calibration/test datasets.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Calibration set size per trial.
    #[arg(long, default_value_t = 400)]
    n: usize,
    /// Miscoverage level ε̂.
    #[arg(long, default_value_t = 0.15)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, default_value_t = 2000)]
    tests_per_trial: usize,
    /// Quantile of per-trial coverage to check against the bound.
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    /// Score label sets instead of single options.
    #[arg(long)]
    multi_label: bool,
    #[arg(long, default_value_t = 4)]
    options: usize,
    /// Worker threads (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with_all = ["scene", "task"])]
    scenario: Option<PathBuf>,
    /// Scene description, used with --task.
    #[arg(long, requires = "task")]
    scene: Option<String>,
    #[arg(long, requires = "scene")]
    task: Option<String>,
    /// Exit with status 2 instead of prompting when clarification is needed.
    #[arg(long)]
    non_interactive: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 400)]
    train: usize,
    #[arg(long, default_value_t = 400)]
    calibration: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(b) = &cli.backend {
        cfg.backend = b.parse::<BackendKind>()?;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.offline |= cli.offline;
    cfg.validate()?;
    Ok(cfg)
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn gen_data(args: &GenDataArgs, seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mix = default_mix();
    // distinct seeds keep ids (and confidence draws) disjoint across splits
    for (i, (name, n)) in [("train", args.train), ("calibration", args.calibration), ("test", args.test)]
        .into_iter()
        .enumerate()
    {
        let data = synth_dataset(n, &mix, seed.wrapping_add(i as u64))?;
        let path = args.out_dir.join(format!("{name}.jsonl"));
        save_dataset(&path, &data)?;
        info!("wrote {n} scenarios to {}", path.display());
    }
    Ok(())
}

fn read_scenario(args: &PlanArgs) -> anyhow::Result<Scenario> {
    if let Some(p) = &args.scenario {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()));
    }
    match (&args.scene, &args.task) {
        (Some(scene), Some(task)) => Ok(serde_json::from_value(serde_json::json!({
            "id": "cli",
            "scene": scene,
            "instruction": task,
            "kind": "unambiguous",
        }))?),
        _ => bail!("pass --scenario or both --scene and --task"),
    }
}

fn option_text(record: &RunRecord, label: OptionLabel) -> &str {
    record
        .introspection
        .options
        .iter()
        .find(|o| o.label == label)
        .map_or("", |o| o.text.as_str())
}

fn print_question(record: &RunRecord) -> anyhow::Result<()> {
    let mut text = String::from("Which of these did you mean?");
    for (label, option) in harness::clarification_options(record) {
        text.push_str(&format!("\n  {label}) {option}"));
    }
    emit(&text)
}

fn read_choice() -> anyhow::Result<Option<OptionLabel>> {
    print!("Choose a letter (empty if none fits): ");
    std::io::stdout().flush()?;
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    match line.trim().chars().next() {
        None => Ok(None),
        Some(c) => Ok(Some(OptionLabel::new(c.to_ascii_uppercase())?)),
    }
}

fn plan(cfg: &RunConfig, args: &PlanArgs) -> anyhow::Result<u8> {
    let scenario = read_scenario(args)?;
    let record = cmd_plan(cfg, &scenario)?;
    print_json(&record)?;
    if !record.outcome.asked_for_help {
        let label = *record.outcome.label_union().iter().next().expect("certain outcomes hold one label");
        emit(&format!("executing {label}) {}", option_text(&record, label)))?;
        return Ok(0);
    }
    print_question(&record)?;
    if args.non_interactive {
        return Ok(EXIT_NEEDS_CLARIFICATION);
    }
    let Some(label) = read_choice()? else {
        return Ok(EXIT_NEEDS_CLARIFICATION);
    };
    match resolve_help(&record.outcome, label)? {
        HelpResolution::Resolved(l) => {
            emit(&format!("executing {l}) {}", option_text(&record, l)))?;
            Ok(0)
        }
        HelpResolution::CannotResolve => {
            emit(&format!("{label} was not among the offered options"))?;
            Ok(EXIT_NEEDS_CLARIFICATION)
        }
    }
}

fn write_report<T: serde::Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(p) = out {
        std::fs::write(p, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    print_json(value)
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    if let Command::GenData(args) = &cli.command {
        gen_data(args, cli.seed.unwrap_or(0))?;
        return Ok(0);
    }
    if let Command::VerifyCoverage(a) = &cli.command {
        let defaults = VerifyCoverageOptions::default();
        let opts = VerifyCoverageOptions {
            n: a.n,
            epsilon_hat: a.epsilon,
            trials: a.trials,
            tests_per_trial: a.tests_per_trial,
            delta: a.delta,
            seed: cli.seed.unwrap_or(0),
            multi_label: a.multi_label,
            options: a.options,
            workers: a.workers.unwrap_or(defaults.workers),
        };
        let report = cmd_verify_coverage(&opts)?;
        write_report(&report, a.out.as_deref())?;
        return Ok(if report.passed() { 0 } else { 1 });
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::BuildKb => print_json(&cmd_build_kb(&cfg)?)?,
        Command::Calibrate => print_json(&cmd_calibrate(&cfg)?)?,
        Command::Evaluate => {
            let report = cmd_evaluate(&cfg)?;
            emit(&report.metrics.to_string())?;
        }
        Command::Sweep { kb_sizes } => {
            let rows = if *kb_sizes { cmd_sweep_kb_sizes(&cfg)? } else { cmd_sweep(&cfg)? };
            for r in &rows {
                emit(&format!(
                    "kb={:<4} target={:.2} ε̂={:.4} q̂={:.4} SR={} HR={} avg|P|={:.3}",
                    r.kb_size, r.target_success, r.epsilon_hat, r.q_hat, r.metrics.sr, r.metrics.hr, r.average_set_size
                ))?;
            }
        }
        Command::Plan(args) => return plan(&cfg, args),
        Command::GenData(_) | Command::VerifyCoverage(_) => unreachable!("handled above"),
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<introplan::Error>().map_or(1, harness::exit_code);
            ExitCode::from(code)
        }
    }
}
