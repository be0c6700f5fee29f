//! `keyaug` command line: generate, evaluate, replay, report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 gateway failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use keyaug::annotation::scripted_annotate;
use keyaug::campaign::{
    evaluate_policy, read_dataset, replay_audit, run_campaign, CampaignConfig, CampaignError, CampaignReport,
    Checkpoint, EvalPolicy, Mode, TeleportPlan,
};
use keyaug::ensemble::EnsembleParams;
use keyaug::gateway::GatewayClient;
use keyaug::simworld::{expert_demo, TaskKind, TaskSpec};

#[derive(Parser)]
#[command(name = "keyaug", version, about = "Keypose-driven demonstration augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a data-generation campaign from a TOML config.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a policy on seeded resets.
    Evaluate {
        #[arg(long, default_value = "pick_place")]
        task: TaskKind,
        #[arg(long, value_enum, default_value = "feedforward")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reset seed of the source demonstration to annotate.
        #[arg(long, default_value_t = 1000)]
        source_seed: u64,
        /// Teleport this object once per trial.
        #[arg(long)]
        teleport_object: Option<String>,
        #[arg(long, default_value_t = 15)]
        teleport_step: usize,
        #[arg(long, default_value_t = 0.03)]
        teleport_min: f64,
        #[arg(long, default_value_t = 0.06)]
        teleport_max: f64,
    },
    /// Re-execute every demonstration in a dataset from its recorded seed.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        /// Task parameters as TOML, when the dataset was produced with overrides.
        #[arg(long)]
        task_spec: Option<PathBuf>,
    },
    /// Render a campaign report (JSON) or checkpoint as a table.
    Report {
        #[arg(long, conflicts_with = "checkpoint")]
        report: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Expert,
    Feedforward,
    Ensemble,
}

enum Failure {
    Runtime(String),
    Config(String),
    Gateway(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Gateway(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Config(m) | Failure::Gateway(m) => m,
        }
    }
}

impl From<CampaignError> for Failure {
    fn from(e: CampaignError) -> Self {
        match e {
            CampaignError::Config(_) => Failure::Config(e.to_string()),
            CampaignError::Gateway { .. } => Failure::Gateway(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load_config(path: &Path) -> Result<CampaignConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let cfg: CampaignConfig = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(Failure::from)?;
    Ok(cfg)
}

fn generate(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let needs_gateway = cfg.annotator.mode == Mode::Llm || cfg.retargeter.mode == Mode::Llm;
    let gateway = if needs_gateway {
        Some(GatewayClient::from_config(&cfg.gateway).map_err(|e| Failure::Config(format!("audit log: {e}")))?)
    } else {
        None
    };
    let report = run_campaign(&cfg, gateway.as_ref())?;
    print!("{}", report.render_table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    task: TaskKind,
    policy: PolicyArg,
    trials: usize,
    seed: u64,
    source_seed: u64,
    teleport: Option<TeleportPlan>,
) -> Result<(), Failure> {
    if trials == 0 {
        return Err(Failure::Config("trials must be at least 1".into()));
    }
    let spec = TaskSpec::new(task);
    let source = expert_demo(&spec, source_seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    let annotation = scripted_annotate(&source, task);
    let policy = match policy {
        PolicyArg::Expert => EvalPolicy::Expert,
        PolicyArg::Feedforward => EvalPolicy::Feedforward { annotation: &annotation, source: &source },
        PolicyArg::Ensemble => {
            EvalPolicy::Ensemble { annotation: &annotation, source: &source, params: EnsembleParams::default() }
        }
    };
    let result = evaluate_policy(&policy, &spec, trials, seed, teleport.as_ref());
    println!(
        "success {}/{} = {:.3}  (95% Wilson [{:.3}, {:.3}])",
        result.successes, result.trials, result.rate, result.ci_low, result.ci_high
    );
    Ok(())
}

fn replay(dataset: &Path, task_spec: Option<&Path>) -> Result<bool, Failure> {
    let override_spec: Option<TaskSpec> = match task_spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Some(toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let demos = read_dataset(dataset).map_err(|e| Failure::Runtime(format!("{}: {e}", dataset.display())))?;
    let audit = replay_audit(&demos, |d| match &override_spec {
        Some(s) if s.kind == d.task => s.clone(),
        _ => TaskSpec::new(d.task),
    });
    println!("replayed {}: {} passed, {} failed", audit.total, audit.passed, audit.failures.len());
    for f in &audit.failures {
        println!("  {} (seed {}): success={} trace_matches={}", f.id, f.seed, f.success, f.trace_matches);
    }
    Ok(audit.all_passed())
}

fn report(report: Option<&Path>, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let rendered = match (report, checkpoint) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            let r: CampaignReport =
                serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            r.render_table()
        }
        (None, Some(p)) => {
            let cp = Checkpoint::load(p).map_err(Failure::from)?;
            let campaign = keyaug::campaign::Campaign::resume(cp, None).map_err(Failure::from)?;
            campaign.report().render_table()
        }
        (None, None) => return Err(Failure::Config("pass --report or --checkpoint".into())),
    };
    print!("{rendered}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config } => generate(&config),
        Command::Evaluate {
            task,
            policy,
            trials,
            seed,
            source_seed,
            teleport_object,
            teleport_step,
            teleport_min,
            teleport_max,
        } => {
            let teleport = teleport_object.map(|object_id| TeleportPlan {
                object_id,
                at_step: teleport_step,
                min_distance: teleport_min,
                max_distance: teleport_max,
            });
            evaluate(task, policy, trials, seed, source_seed, teleport)
        }
        Command::Replay { dataset, task_spec } => match replay(&dataset, task_spec.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Failure::Runtime("replay audit failed".into())),
            Err(e) => Err(e),
        },
        Command::Report { report: r, checkpoint } => report(r.as_deref(), checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
