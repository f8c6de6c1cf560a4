use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feedback_opf::config::ExperimentConfig;
use feedback_opf::runner::{self, Stage, StageError, StageExt, StageResult};
use feedback_opf::scenario::{generate_profile, write_scenario};
use feedback_opf::{trainer, Error, PolicyParams};

#[derive(Parser)]
#[command(name = "feedback-opf", version, about = "Learned feedback controllers for distribution-feeder OPF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Override a configuration value, e.g. `--set trainer.beta=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the feeder, print its summary and write per-unit data and sensitivities.
    BuildFeeder(Common),
    /// Generate the training and test scenarios.
    GenScenario(Common),
    /// Train a policy and write the checkpoint and training log.
    Train(Common),
    /// Run the full pipeline.
    Run(Common),
    /// Recompute the report from the trajectories in an artifact directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Artifact directory; defaults to the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Check the stability conditions for the initial (or configured) policy.
    CheckConditions(Common),
    /// Train and evaluate one policy per beta and seed.
    SweepBeta(Common),
}

fn load(common: &Common) -> StageResult<ExperimentConfig> {
    ExperimentConfig::load(&common.config, &common.overrides).stage(Stage::Config)
}

fn mkdir(dir: &Path) -> StageResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage(Stage::Io)
}

fn write(path: &Path, text: &str) -> StageResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e)).stage(Stage::Io)
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn build_feeder(cfg: &ExperimentConfig) -> StageResult<()> {
    let (graph, model) = runner::load_graph(cfg)?;
    let dir = &cfg.output.dir;
    mkdir(dir)?;
    write(&dir.join("feeder_pu.feeder"), &graph.to_text())?;
    write(&dir.join("sensitivity_r.csv"), &matrix_csv(&model.r))?;
    write(&dir.join("sensitivity_x.csv"), &matrix_csv(&model.x))?;
    println!("buses={}", graph.n());
    println!("depth={}", graph.depth());
    println!("a_norm={}", model.a_norm);
    Ok(())
}

fn gen_scenario(cfg: &ExperimentConfig) -> StageResult<()> {
    let (graph, _) = runner::load_graph(cfg)?;
    let dir = &cfg.output.dir;
    mkdir(dir)?;
    let gen = &cfg.scenario.generator;
    for (k, &seed) in cfg.scenario.train_seeds.iter().enumerate() {
        let s = generate_profile(&graph, gen, seed).stage(Stage::Scenario)?;
        write_scenario(&s, &dir.join(format!("train_{k}.csv"))).stage(Stage::Io)?;
    }
    let test = generate_profile(&graph, gen, cfg.scenario.test_seed).stage(Stage::Scenario)?;
    write_scenario(&test, &dir.join("test.csv")).stage(Stage::Io)?;
    println!("wrote {} training scenarios and one test scenario to {}", cfg.scenario.train_seeds.len(), dir.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> StageResult<()> {
    let prep = runner::prepare(cfg)?;
    let dir = &cfg.output.dir;
    mkdir(dir)?;
    let (state, log) = runner::train_policy(&prep, &cfg.trainer)?;
    trainer::write_log(&log, &dir.join("training_log.csv")).stage(Stage::Io)?;
    state.policy.save(&dir.join("policy.txt")).stage(Stage::Io)?;
    println!("policy written to {}", dir.join("policy.txt").display());
    Ok(())
}

fn check_conditions(cfg: &ExperimentConfig) -> StageResult<()> {
    let prep = runner::prepare(cfg)?;
    let policy = match &cfg.evaluate.policy {
        Some(p) => PolicyParams::load(p).stage(Stage::Config)?,
        None => trainer::initial_policy(&prep.train, &cfg.trainer, &prep.model).stage(Stage::Train)?,
    };
    let report = prep.stability(&policy, cfg.trainer.alpha);
    print!("{}", runner::stability_text(&report));
    if report.all_pass() {
        Ok(())
    } else {
        Err(Error::Unstable("stability conditions violated".into())).stage(Stage::Stability)
    }
}

fn dispatch(cmd: Command) -> StageResult<()> {
    match cmd {
        Command::BuildFeeder(c) => build_feeder(&load(&c)?),
        Command::GenScenario(c) => gen_scenario(&load(&c)?),
        Command::Train(c) => train(&load(&c)?),
        Command::Run(c) => {
            let dir = runner::run_experiment(&load(&c)?)?;
            let report = std::fs::read_to_string(dir.join("report.csv")).map_err(|e| Error::io(&dir, e)).stage(Stage::Io)?;
            print!("{report}");
            Ok(())
        }
        Command::Evaluate { common, dir } => {
            let cfg = load(&common)?;
            let dir = dir.unwrap_or(cfg.output.dir);
            let report = runner::evaluate_dir(&dir)?;
            write(&dir.join("report.csv"), &report)?;
            print!("{report}");
            Ok(())
        }
        Command::CheckConditions(c) => check_conditions(&load(&c)?),
        Command::SweepBeta(c) => {
            let dir = runner::sweep_beta(&load(&c)?)?;
            println!("sweep written to {}", dir.join("sweep.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageError { stage, source }) => {
            eprintln!("error: {stage} stage failed: {source}");
            ExitCode::from(stage.code() as u8)
        }
    }
}
