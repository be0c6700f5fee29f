//! End-to-end data generation: choose an annotation (or mint one), retarget
//! it to a fresh scene, warp, roll out, and keep the successes.
//!
//! Every random choice of rollout `i` comes from `derive_seed(seed, &[stream, i])`,
//! so a campaign is a pure function of its config and can be resumed from
//! any checkpoint with an identical result. Strategies that share a seed see
//! the same scene sequence.

pub mod dataset;
pub mod evaluate;
pub mod pipeline;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotateOptions, Annotation};
use crate::bandit::{decide_new_arm, estimate_horizon, fit_arm_prior, thompson_select, BanditError, BanditState};
use crate::demo::{Demonstration, Provenance};
use crate::gateway::{GatewayClient, GatewayConfig, GatewayError};
use crate::retargeting::RetargetOptions;
use crate::seed::derive_seed;
use crate::simworld::{bundled_demos, reset, rollout, SimError, TaskKind, TaskSpec};

pub use dataset::{read_dataset, replay_audit, replay_demo, write_dataset, DatasetError, ReplayAudit, ReplayResult};
pub use evaluate::{evaluate_policy, wilson_interval, EvalPolicy, EvalResult, TeleportPlan};
pub use pipeline::{build_trajectory, create_annotation, Mode, PipelineError};

const STREAM_SCENE: u64 = 1;
const STREAM_DECIDE: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_SOURCE: u64 = 5;
const STREAM_NOISE_LEVEL: u64 = 6;
const STREAM_RETARGET: u64 = 7;
const STREAM_ANNOTATE: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Thompson sampling with value-of-information arm creation.
    #[default]
    Bandit,
    /// A new annotation for every rollout.
    FreshEveryRollout,
    /// The first annotation created is reused for every rollout.
    FirstAnnotationOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    /// Probability sets per value estimate.
    pub k: usize,
    /// Posterior samples per arm in the prior fit.
    pub m: usize,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig { k: 1000, m: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub mode: Mode,
    #[serde(flatten)]
    pub options: AnnotateOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargeterConfig {
    pub mode: Mode,
    /// Candidate per-axis noise levels (millimeters) for the scripted
    /// retargeter. Each new annotation draws one uniformly and keeps it.
    /// Empty means noise-free.
    pub noise_choices_mm: Vec<f64>,
    #[serde(flatten)]
    pub options: RetargetOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub task: TaskKind,
    /// Overrides for the task parameters; defaults follow `task`.
    pub task_spec: Option<TaskSpec>,
    pub goal_successes: u64,
    pub seed: u64,
    pub strategy: Strategy,
    /// Bundled source demonstrations to annotate.
    pub source_demos: usize,
    /// Hard stop on total rollouts.
    pub max_rollouts: u64,
    /// Also run the fresh-annotation strategy on the same seed and report
    /// its success rate.
    pub report_baseline: bool,
    pub bandit: BanditConfig,
    pub annotator: AnnotatorConfig,
    pub retargeter: RetargeterConfig,
    pub gateway: GatewayConfig,
    pub output: OutputConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            task: TaskKind::PickPlace,
            task_spec: None,
            goal_successes: 20,
            seed: 0,
            strategy: Strategy::Bandit,
            source_demos: 3,
            max_rollouts: 10_000,
            report_baseline: false,
            bandit: BanditConfig::default(),
            annotator: AnnotatorConfig::default(),
            retargeter: RetargeterConfig::default(),
            gateway: GatewayConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn spec(&self) -> TaskSpec {
        self.task_spec.clone().unwrap_or_else(|| TaskSpec::new(self.task))
    }

    pub fn validate(&self) -> Result<(), CampaignError> {
        let bad = |m: &str| Err(CampaignError::Config(m.to_string()));
        if self.goal_successes < 1 {
            return bad("goal_successes must be at least 1");
        }
        if self.source_demos < 1 {
            return bad("source_demos must be at least 1");
        }
        if self.bandit.k < 1 || self.bandit.m < 1 {
            return bad("bandit k and m must be at least 1");
        }
        if self.retargeter.noise_choices_mm.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return bad("noise levels must be finite and non-negative");
        }
        if let Some(spec) = &self.task_spec {
            if spec.kind != self.task {
                return bad("task_spec.kind disagrees with task");
            }
            spec.validate().map_err(|e| CampaignError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("config error: {0}")]
    Config(String),
    #[error("gateway failure at rollout {rollout}: {source}")]
    Gateway { rollout: u64, source: GatewayError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One annotation known to the campaign, kept even after its arm is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub annotation: Annotation,
    pub source_index: usize,
    /// Per-axis retargeting noise, meters.
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutKind {
    NewArm,
    ExistingArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: u64,
    pub scene_seed: u64,
    pub kind: RolloutKind,
    pub annotation_id: Option<String>,
    pub success: bool,
    /// Set when annotation, retargeting or warping failed before execution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
}

/// Everything needed to continue a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: CampaignConfig,
    pub bandit: BanditState,
    pub library: Vec<LibraryEntry>,
    pub rollouts: Vec<RolloutRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CampaignError> {
        let tmp = path.with_extension("tmp");
        let text = serde_json::to_string(self).map_err(|e| CampaignError::Checkpoint(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| CampaignError::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| CampaignError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CampaignError> {
        let text = std::fs::read_to_string(path).map_err(|e| CampaignError::Checkpoint(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| CampaignError::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTally {
    pub annotation_id: String,
    pub n_suc: u64,
    pub n_fail: u64,
    pub noise_std_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub task: TaskKind,
    pub strategy: Strategy,
    pub seed: u64,
    pub goal_successes: u64,
    pub goal_reached: bool,
    pub total_rollouts: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub arms: Vec<ArmTally>,
    pub new_arm_attempts: u64,
    pub new_arm_successes: u64,
    /// New-arm attempts whose first rollout failed; their arm was dropped.
    pub discarded_new_arms: u64,
    /// Rollouts lost to annotation, retargeting or warping errors.
    pub pipeline_failures: u64,
    /// Empirical success rate of the arm with the highest posterior mean.
    pub best_arm_success_rate: Option<f64>,
    /// Success rate of the fresh-annotation strategy on the same seed.
    pub baseline_success_rate: Option<f64>,
    pub wall_time_s: f64,
}

impl CampaignReport {
    /// The report with timing removed, for determinism comparisons.
    pub fn untimed(&self) -> Self {
        CampaignReport { wall_time_s: 0.0, ..self.clone() }
    }

    /// Plain-text table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let pct = |x: f64| format!("{:.1}%", 100.0 * x);
        let _ = writeln!(s, "task              {}", self.task);
        let _ = writeln!(s, "strategy          {:?}", self.strategy);
        let _ = writeln!(s, "seed              {}", self.seed);
        let _ = writeln!(
            s,
            "goal              {} ({})",
            self.goal_successes,
            if self.goal_reached { "reached" } else { "not reached" }
        );
        let _ = writeln!(s, "rollouts          {}", self.total_rollouts);
        let _ = writeln!(s, "successes         {}", self.successes);
        let _ = writeln!(s, "total rate        {}", pct(self.success_rate));
        if let Some(b) = self.best_arm_success_rate {
            let _ = writeln!(s, "best annotation   {}", pct(b));
        }
        if let Some(b) = self.baseline_success_rate {
            let _ = writeln!(s, "fresh baseline    {}", pct(b));
        }
        let _ = writeln!(s, "new arms          {}/{} kept", self.new_arm_successes, self.new_arm_attempts);
        let _ = writeln!(s, "pipeline failures {}", self.pipeline_failures);
        let _ = writeln!(s, "wall time         {:.2}s", self.wall_time_s);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<32} {:>6} {:>6} {:>8} {:>9}", "annotation", "suc", "fail", "rate", "noise_mm");
        for a in &self.arms {
            let n = a.n_suc + a.n_fail;
            let rate = if n > 0 { pct(a.n_suc as f64 / n as f64) } else { "-".into() };
            let _ = writeln!(
                s,
                "{:<32} {:>6} {:>6} {:>8} {:>9.1}",
                a.annotation_id, a.n_suc, a.n_fail, rate, a.noise_std_mm
            );
        }
        s
    }
}

/// A campaign in progress.
pub struct Campaign<'g> {
    cfg: CampaignConfig,
    spec: TaskSpec,
    sources: Vec<Demonstration>,
    gateway: Option<&'g GatewayClient>,
    state: Checkpoint,
    /// Generated demonstrations of this process's run, in order.
    pub generated: Vec<Demonstration>,
    elapsed: f64,
}

impl<'g> Campaign<'g> {
    pub fn new(cfg: CampaignConfig, gateway: Option<&'g GatewayClient>) -> Result<Self, CampaignError> {
        cfg.validate()?;
        let spec = cfg.spec();
        let sources = bundled_demos(&spec, cfg.source_demos)?;
        let state = Checkpoint {
            bandit: BanditState::new(cfg.goal_successes, cfg.seed),
            library: Vec::new(),
            rollouts: Vec::new(),
            config: cfg.clone(),
        };
        Ok(Campaign { cfg, spec, sources, gateway, state, generated: Vec::new(), elapsed: 0.0 })
    }

    /// Continues from a checkpoint. The checkpoint's config must match.
    pub fn resume(checkpoint: Checkpoint, gateway: Option<&'g GatewayClient>) -> Result<Self, CampaignError> {
        let mut c = Campaign::new(checkpoint.config.clone(), gateway)?;
        c.state = checkpoint;
        Ok(c)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn sources(&self) -> &[Demonstration] {
        &self.sources
    }

    pub fn is_done(&self) -> bool {
        self.state.bandit.current_successes >= self.cfg.goal_successes
            || self.state.rollouts.len() as u64 >= self.cfg.max_rollouts
    }

    fn stream(&self, stream: u64, i: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[stream, i]))
    }

    fn library_index(&self, annotation_id: &str) -> usize {
        self.state
            .library
            .iter()
            .position(|e| e.annotation.id == annotation_id)
            .expect("arm refers to a known annotation")
    }

    /// Decides whether rollout `i` mints a new annotation.
    fn wants_new_arm(&self, i: u64) -> (bool, Option<u64>) {
        let bandit = &self.state.bandit;
        match self.cfg.strategy {
            Strategy::FreshEveryRollout => (true, None),
            Strategy::FirstAnnotationOnly => (self.state.library.is_empty(), None),
            Strategy::Bandit => {
                if bandit.arms.is_empty() {
                    return (true, None);
                }
                let horizon = match estimate_horizon(bandit) {
                    Ok(t) => t,
                    Err(BanditError::GoalReached | BanditError::NoArms | BanditError::BadIndex(_)) => {
                        return (false, None)
                    }
                };
                let mut prior_rng = self.stream(STREAM_PRIOR, i);
                let prior = fit_arm_prior(&bandit.arms, self.cfg.bandit.m, &mut prior_rng).expect("arms present");
                let seed = derive_seed(self.cfg.seed, &[STREAM_DECIDE, i]);
                (decide_new_arm(bandit, horizon, &prior, self.cfg.bandit.k, seed), Some(horizon))
            }
        }
    }

    fn mint_annotation(&mut self, i: u64) -> Result<usize, PipelineError> {
        let source_index = self.stream(STREAM_SOURCE, i).random_range(0..self.sources.len());
        let noise_std = match self.cfg.retargeter.noise_choices_mm.as_slice() {
            [] => 0.0,
            levels => levels[self.stream(STREAM_NOISE_LEVEL, i).random_range(0..levels.len())] / 1000.0,
        };
        let mut opts = self.cfg.annotator.options.clone();
        opts.summary.seed = derive_seed(self.cfg.seed, &[STREAM_ANNOTATE, i]);
        let id = format!("{}-ann{i}", self.sources[source_index].id);
        let annotation = create_annotation(
            self.cfg.annotator.mode,
            &self.sources[source_index],
            self.cfg.task,
            self.gateway,
            &opts,
            &id,
        )?;
        self.state.library.push(LibraryEntry { annotation, source_index, noise_std });
        Ok(self.state.library.len() - 1)
    }

    /// Executes one rollout and checkpoints.
    pub fn step(&mut self) -> Result<RolloutRecord, CampaignError> {
        let started = Instant::now();
        let i = self.state.rollouts.len() as u64;
        let scene_seed = derive_seed(self.cfg.seed, &[STREAM_SCENE, i]);
        let (world, scene) = reset(&self.spec, scene_seed);
        let (new_arm, horizon) = self.wants_new_arm(i);

        let mut arm_index = None;
        let lib = if new_arm {
            self.mint_annotation(i)
        } else {
            let arm = match self.cfg.strategy {
                Strategy::Bandit => {
                    thompson_select(&self.state.bandit, &mut self.stream(STREAM_SELECT, i)).expect("arms present")
                }
                _ => 0,
            };
            arm_index = Some(arm);
            Ok(self.library_index(&self.state.bandit.arms[arm].annotation_id))
        };
        let lib_index = lib.as_ref().ok().copied();

        let result = lib.and_then(|l| {
            let entry = &self.state.library[l];
            build_trajectory(
                self.cfg.retargeter.mode,
                &entry.annotation,
                &self.sources[entry.source_index],
                &scene,
                entry.noise_std,
                &mut self.stream(STREAM_RETARGET, i),
                self.gateway,
                &self.cfg.retargeter.options,
            )
        });
        let (outcome, error) = match result {
            Ok(traj) => (Some(rollout(&world, &traj)), None),
            Err(e) => {
                if let Some(g) = e.gateway() {
                    let failure = CampaignError::Gateway { rollout: i, source: g.clone() };
                    if let (true, Some(l)) = (new_arm, lib_index) {
                        self.state.library.truncate(l);
                    }
                    if let Some(path) = &self.cfg.output.checkpoint {
                        self.state.save(path)?;
                    }
                    return Err(failure);
                }
                (None, Some(e.to_string()))
            }
        };
        let success = outcome.as_ref().is_some_and(|o| o.success);
        let annotation_id = lib_index.map(|l| self.state.library[l].annotation.id.clone());

        if new_arm {
            let id = annotation_id.clone().unwrap_or_else(|| format!("failed-ann{i}"));
            match self.cfg.strategy {
                Strategy::FirstAnnotationOnly if lib_index.is_some() => {
                    self.state.bandit.new_arm_attempts += 1;
                    self.state.bandit.arms.push(crate::bandit::Arm::new(id));
                    if success {
                        self.state.bandit.new_arm_successes += 1;
                    }
                    self.state.bandit.record_outcome(0, success).expect("arm just inserted");
                }
                _ => {
                    self.state.bandit.record_new_arm(id, success);
                }
            }
        } else if let Some(a) = arm_index {
            self.state.bandit.record_outcome(a, success).expect("selected arm exists");
        }

        if let (true, Some(out), Some(aid)) = (success, outcome, annotation_id.clone()) {
            let demo = out.into_demonstration(
                format!("{}-gen{i}", self.cfg.task),
                scene,
                Provenance::Generated { annotation_id: aid, seed: scene_seed },
            );
            if let Some(path) = &self.cfg.output.dataset {
                dataset::append_demo(path, &demo)?;
            }
            self.generated.push(demo);
        }

        let record = RolloutRecord {
            index: i,
            scene_seed,
            kind: if new_arm { RolloutKind::NewArm } else { RolloutKind::ExistingArm },
            annotation_id,
            success,
            error,
            horizon,
        };
        self.state.rollouts.push(record.clone());
        if let Some(path) = &self.cfg.output.checkpoint {
            self.state.save(path)?;
        }
        self.elapsed += started.elapsed().as_secs_f64();
        Ok(record)
    }

    pub fn run(&mut self) -> Result<CampaignReport, CampaignError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> CampaignReport {
        let b = &self.state.bandit;
        let total = self.state.rollouts.len() as u64;
        let arms: Vec<ArmTally> = b
            .arms
            .iter()
            .map(|a| ArmTally {
                annotation_id: a.annotation_id.clone(),
                n_suc: a.n_suc,
                n_fail: a.n_fail,
                noise_std_mm: self
                    .state
                    .library
                    .iter()
                    .find(|e| e.annotation.id == a.annotation_id)
                    .map_or(0.0, |e| e.noise_std * 1000.0),
            })
            .collect();
        let best = b
            .arms
            .iter()
            .filter(|a| a.pulls() > 0)
            .max_by(|x, y| x.posterior_mean().total_cmp(&y.posterior_mean()))
            .map(|a| a.n_suc as f64 / a.pulls() as f64);
        let in_arms: u64 = b.arms.iter().map(|a| a.pulls()).sum();
        CampaignReport {
            task: self.cfg.task,
            strategy: self.cfg.strategy,
            seed: self.cfg.seed,
            goal_successes: self.cfg.goal_successes,
            goal_reached: b.current_successes >= self.cfg.goal_successes,
            total_rollouts: total,
            successes: b.current_successes,
            success_rate: if total > 0 { b.current_successes as f64 / total as f64 } else { 0.0 },
            arms,
            new_arm_attempts: b.new_arm_attempts,
            new_arm_successes: b.new_arm_successes,
            discarded_new_arms: total - in_arms,
            pipeline_failures: self.state.rollouts.iter().filter(|r| r.error.is_some()).count() as u64,
            best_arm_success_rate: best,
            baseline_success_rate: None,
            wall_time_s: self.elapsed,
        }
    }
}

/// Runs a campaign to completion, resuming from the configured checkpoint
/// when it exists. Writes the report to `output.report` if set.
pub fn run_campaign(cfg: &CampaignConfig, gateway: Option<&GatewayClient>) -> Result<CampaignReport, CampaignError> {
    cfg.validate()?;
    let mut campaign = match &cfg.output.checkpoint {
        Some(path) if path.exists() => {
            let cp = Checkpoint::load(path)?;
            if cp.config != *cfg {
                return Err(CampaignError::Config(format!(
                    "checkpoint {} was written by a different config",
                    path.display()
                )));
            }
            if let Some(d) = &cfg.output.dataset {
                dataset::truncate_dataset(d, cp.bandit.current_successes as usize)?;
            }
            Campaign::resume(cp, gateway)?
        }
        _ => {
            if let Some(d) = &cfg.output.dataset {
                if d.exists() {
                    std::fs::remove_file(d).map_err(DatasetError::from)?;
                }
            }
            Campaign::new(cfg.clone(), gateway)?
        }
    };
    let mut report = campaign.run()?;
    if cfg.report_baseline {
        let base_cfg = CampaignConfig {
            strategy: Strategy::FreshEveryRollout,
            report_baseline: false,
            output: OutputConfig::default(),
            ..cfg.clone()
        };
        report.baseline_success_rate = Some(Campaign::new(base_cfg, gateway)?.run()?.success_rate);
    }
    if let Some(path) = &cfg.output.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CampaignError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(DatasetError::from)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
