//! Seeded policy evaluation with Wilson confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::demo::Demonstration;
use crate::ensemble::{run_ensemble, run_feedforward, ActionStats, EnsembleParams};
use crate::retargeting::RetargetOptions;
use crate::seed::derive_seed;
use crate::simworld::{reset, Disturbance, Executor, ScriptedExpert, TaskSpec};
use crate::Vec3;

use super::pipeline::{build_trajectory, Mode};

/// Step budget for a single evaluation rollout.
pub const MAX_EVAL_STEPS: usize = 3000;

#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    /// The scripted closed-loop expert alone.
    Expert,
    /// Noise-free retarget of `annotation`, warped and executed open loop.
    Feedforward { annotation: &'a Annotation, source: &'a Demonstration },
    /// The same trajectory ensembled with the scripted expert.
    Ensemble { annotation: &'a Annotation, source: &'a Demonstration, params: EnsembleParams },
}

/// Teleports an object once per trial, in a random horizontal direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeleportPlan {
    pub object_id: String,
    pub at_step: usize,
    pub min_distance: f64,
    pub max_distance: f64,
}

impl TeleportPlan {
    pub fn disturbance(&self, rng: &mut impl Rng) -> Disturbance {
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(self.min_distance..=self.max_distance);
        Disturbance {
            at_step: self.at_step,
            object_id: self.object_id.clone(),
            delta: Vec3::new(dist * heading.cos(), dist * heading.sin(), 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub outcomes: Vec<bool>,
}

/// Wilson score interval at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Trial `j` resets to `derive_seed(seed, &[j])`; its teleport direction
/// comes from `derive_seed(seed, &[j, 1])`. Policies evaluated with the same
/// seed therefore face identical scenes and disturbances.
pub fn evaluate_policy(
    policy: &EvalPolicy<'_>,
    spec: &TaskSpec,
    n_trials: usize,
    seed: u64,
    teleport: Option<&TeleportPlan>,
) -> EvalResult {
    let outcomes: Vec<bool> = (0..n_trials as u64)
        .map(|j| {
            let (world, scene) = reset(spec, derive_seed(seed, &[j]));
            let disturbances: Vec<Disturbance> = teleport
                .map(|t| t.disturbance(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[j, 1]))))
                .into_iter()
                .collect();
            let trajectory = |annotation: &Annotation, source: &Demonstration| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                build_trajectory(
                    Mode::Scripted,
                    annotation,
                    source,
                    &scene,
                    0.0,
                    &mut rng,
                    None,
                    &RetargetOptions::default(),
                )
                .ok()
            };
            match policy {
                EvalPolicy::Expert => {
                    let expert = ScriptedExpert::default();
                    let mut exec = Executor::new(world).with_disturbances(disturbances);
                    while exec.steps() < MAX_EVAL_STEPS {
                        exec.apply_due_disturbances();
                        match expert.act(&exec.state) {
                            Some(a) => exec.step(a),
                            None => break,
                        }
                    }
                    exec.finish().success
                }
                EvalPolicy::Feedforward { annotation, source } => trajectory(annotation, source)
                    .is_some_and(|traj| run_feedforward(world, &traj, disturbances, MAX_EVAL_STEPS).success),
                EvalPolicy::Ensemble { annotation, source, params } => {
                    trajectory(annotation, source).is_some_and(|traj| {
                        let stats = ActionStats::from_demos([*source]);
                        let mut expert = ScriptedExpert::default();
                        run_ensemble(world, &traj, &mut expert, &stats, params, disturbances, MAX_EVAL_STEPS)
                            .rollout
                            .success
                    })
                }
            }
        })
        .collect();
    let successes = outcomes.iter().filter(|o| **o).count();
    let (ci_low, ci_high) = wilson_interval(successes, n_trials, 1.959_963_984_540_054);
    EvalResult {
        trials: n_trials,
        successes,
        rate: if n_trials > 0 { successes as f64 / n_trials as f64 } else { 0.0 },
        ci_low,
        ci_high,
        outcomes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::scripted_annotate;
    use crate::simworld::{expert_demo, TaskKind, PICK_PLACE_BLOCK};

    #[test]
    fn wilson_examples() {
        // n = 10, 5 successes: 0.5 -/+ 0.2634 (closed form)
        let (lo, hi) = wilson_interval(5, 10, 1.959_963_984_540_054);
        assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5, "{lo} {hi}");
        let (lo, hi) = wilson_interval(10, 10, 1.96);
        assert!(hi > 1.0 - 1e-12 && lo > 0.69 && lo < 0.73);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
    }

    #[test]
    fn expert_policy_is_perfect() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let r = evaluate_policy(&EvalPolicy::Expert, &spec, 10, 3, None);
        assert_eq!(r.rate, 1.0);
        assert!(r.ci_low < 1.0 && r.ci_high > 1.0 - 1e-12);
    }

    #[test]
    fn ensemble_dominates_feedforward_under_teleport() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let source = expert_demo(&spec, 1000).unwrap();
        let ann = scripted_annotate(&source, TaskKind::PickPlace);
        let plan =
            TeleportPlan { object_id: PICK_PLACE_BLOCK.into(), at_step: 15, min_distance: 0.03, max_distance: 0.06 };
        let ff =
            evaluate_policy(&EvalPolicy::Feedforward { annotation: &ann, source: &source }, &spec, 10, 5, Some(&plan));
        let ens = evaluate_policy(
            &EvalPolicy::Ensemble { annotation: &ann, source: &source, params: EnsembleParams::default() },
            &spec,
            10,
            5,
            Some(&plan),
        );
        let clean = evaluate_policy(&EvalPolicy::Feedforward { annotation: &ann, source: &source }, &spec, 10, 5, None);
        assert_eq!(clean.rate, 1.0);
        assert!(ens.successes > ff.successes, "{} vs {}", ens.successes, ff.successes);
        for (e, f) in ens.outcomes.iter().zip(&ff.outcomes) {
            assert!(*e || !*f);
        }
    }
}
