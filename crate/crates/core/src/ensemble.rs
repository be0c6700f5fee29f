//! Similarity-gated switching between an open-loop warped trajectory and a
//! closed-loop feedback policy, with reattachment to the trajectory once the
//! two agree again.
//!
//! Actions are compared as normalized deltas from the current end-effector
//! state: translation (3), body-frame rotation vector (3) and the change in
//! gripper level (1).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::demo::{Action, Demonstration, Gripper};
use crate::geometry;
use crate::scalar::Real;
use crate::simworld::{Disturbance, Executor, FeedbackPolicy, RolloutOutcome, WorldState};
use crate::warping::TrajectorySegment;
use crate::Pose;

pub const ACTION_DIM: usize = 7;
pub const STD_FLOOR: f64 = 1e-6;

/// Magnitude-aware cosine similarity.
///
/// The cosine of the angle between `a` and `b`, scaled by
/// `2 min(|a|_1, |b|_1) / (|a|_1 + |b|_1)`. Two zero vectors score 1, a zero
/// against a nonzero vector scores 0.
pub fn similarity<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "similarity of vectors with different lengths");
    let zero = T::zero();
    let l1 = |v: &[T]| v.iter().fold(zero, |acc, x| acc + x.abs());
    let (na1, nb1) = (l1(a), l1(b));
    match (na1 == zero, nb1 == zero) {
        (true, true) => return T::one(),
        (true, false) | (false, true) => return zero,
        _ => {}
    }
    let dot = a.iter().zip(b).fold(zero, |acc, (x, y)| acc + *x * *y);
    let l2 = |v: &[T]| v.iter().fold(zero, |acc, x| acc + *x * *x).sqrt();
    let cosine = dot / (l2(a) * l2(b));
    let magnitude = T::lit(2.0) * na1.min(nb1) / (na1 + nb1);
    (magnitude * cosine).max(-T::one()).min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct NormalizedAction<T = f64> {
    pub vector: [T; ACTION_DIM],
}

impl<T: Real> NormalizedAction<T> {
    pub fn zeros() -> Self {
        NormalizedAction { vector: [T::zero(); ACTION_DIM] }
    }

    pub fn similarity(&self, other: &Self) -> T {
        similarity(&self.vector, &other.vector)
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|x| x.is_finite())
    }
}

/// Per-dimension scale of raw action deltas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionStats {
    pub std: [f64; ACTION_DIM],
}

impl Default for ActionStats {
    fn default() -> Self {
        ActionStats { std: [1.0; ACTION_DIM] }
    }
}

impl ActionStats {
    /// Population standard deviation of each dimension, floored.
    pub fn from_deltas(deltas: &[[f64; ACTION_DIM]]) -> Self {
        let mut std = [1.0; ACTION_DIM];
        if !deltas.is_empty() {
            let n = deltas.len() as f64;
            for (d, s) in std.iter_mut().enumerate() {
                let mean = deltas.iter().map(|v| v[d]).sum::<f64>() / n;
                let var = deltas.iter().map(|v| (v[d] - mean).powi(2)).sum::<f64>() / n;
                *s = var.sqrt().max(STD_FLOOR);
            }
        }
        ActionStats { std }
    }

    /// Statistics of the recorded actions of a set of demonstrations, each
    /// taken relative to the state the action was issued from.
    pub fn from_demos<'a>(demos: impl IntoIterator<Item = &'a Demonstration>) -> Self {
        let mut deltas = Vec::new();
        for demo in demos {
            for (t, action) in demo.actions.iter().enumerate().skip(1) {
                let prev = &demo.observations[t - 1];
                deltas.push(action_delta(&prev.robot, prev.gripper, action));
            }
        }
        Self::from_deltas(&deltas)
    }

    /// Statistics of consecutive pose differences along a trajectory.
    pub fn from_trajectory(traj: &TrajectorySegment) -> Self {
        let deltas: Vec<_> = (0..traj.len().saturating_sub(1)).map(|t| recorded_delta(traj, t)).collect();
        Self::from_deltas(&deltas)
    }

    pub fn normalize(&self, raw: &[f64; ACTION_DIM]) -> NormalizedAction {
        let mut vector = [0.0; ACTION_DIM];
        for (d, v) in vector.iter_mut().enumerate() {
            *v = raw[d] / self.std[d].max(STD_FLOOR);
        }
        NormalizedAction { vector }
    }
}

pub fn normalize(raw: &[f64; ACTION_DIM], stats: &ActionStats) -> NormalizedAction {
    stats.normalize(raw)
}

/// Raw delta that moves the end effector from `(from, gripper)` to `goal`.
pub fn pose_delta(from: &Pose, gripper: Gripper, goal: &Pose, goal_gripper: Gripper) -> [f64; ACTION_DIM] {
    let dp = goal.position - from.position;
    let dr = from.rotation.inverse().compose(&goal.rotation).rotation_vector();
    [dp.x(), dp.y(), dp.z(), dr.x(), dr.y(), dr.z(), goal_gripper.level() - gripper.level()]
}

pub fn action_delta(from: &Pose, gripper: Gripper, action: &Action) -> [f64; ACTION_DIM] {
    pose_delta(from, gripper, &action.goal, action.gripper)
}

/// Recorded action at `t`: the step from trajectory point `t` to `t + 1`.
pub fn recorded_delta(traj: &TrajectorySegment, t: usize) -> [f64; ACTION_DIM] {
    pose_delta(&traj.poses[t], traj.gripper[t], &traj.poses[t + 1], traj.gripper[t + 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reattach {
    pub t: usize,
    pub attach_similarity: f64,
    pub recorded_similarity: f64,
}

/// Best trajectory index after `t_now` to rejoin, if any.
///
/// A candidate `t` is feasible when both the action that would carry the
/// agent to point `t` and the recorded action at `t` agree with `a_il` above
/// `tau`. Among feasible candidates the highest attach similarity wins,
/// earliest index on ties. `window` limits how far ahead candidates are
/// scanned.
#[allow(clippy::too_many_arguments)]
pub fn select_reattach(
    traj: &TrajectorySegment,
    current: &Pose,
    gripper: Gripper,
    t_now: usize,
    a_il: &NormalizedAction,
    tau: f64,
    stats: &ActionStats,
    window: Option<usize>,
) -> Option<Reattach> {
    let last_candidate = traj.len().checked_sub(2)?;
    let end = window.map_or(last_candidate, |w| last_candidate.min(t_now.saturating_add(w)));
    let mut best: Option<Reattach> = None;
    for t in t_now + 1..=end {
        let rec = stats.normalize(&recorded_delta(traj, t)).similarity(a_il);
        if rec <= tau {
            continue;
        }
        let att = stats.normalize(&pose_delta(current, gripper, &traj.poses[t], traj.gripper[t])).similarity(a_il);
        if att <= tau {
            continue;
        }
        if best.is_none_or(|b| att > b.attach_similarity) {
            best = Some(Reattach { t, attach_similarity: att, recorded_similarity: rec });
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Feedforward,
    Feedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleParams {
    /// Similarity below which a step counts as disagreement.
    pub tau_switch: f64,
    /// Consecutive disagreeing steps that trigger the switch to feedback.
    pub window: usize,
    pub cooldown: usize,
    /// Threshold for both reattach constraints.
    pub tau: f64,
    /// Forward scan limit for reattach candidates; `None` scans to the end.
    pub reattach_window: Option<usize>,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams { tau_switch: 0.5, window: 3, cooldown: 5, tau: 0.5, reattach_window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleState {
    pub mode: Mode,
    pub cooldown_remaining: usize,
    pub ff_trajectory: TrajectorySegment,
    /// Trajectory point currently being driven to.
    pub ff_cursor: usize,
    /// Steps already spent driving to the current point.
    pub ff_dwell: usize,
    pub disagreement_streak: usize,
}

impl EnsembleState {
    pub fn new(ff_trajectory: TrajectorySegment) -> Self {
        EnsembleState {
            mode: Mode::Feedforward,
            cooldown_remaining: 0,
            ff_trajectory,
            ff_cursor: 0,
            ff_dwell: 0,
            disagreement_streak: 0,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.ff_cursor >= self.ff_trajectory.len()
    }

    /// Action the feedforward policy issues in `world`, following the same
    /// per-point convergence rule as trajectory rollouts. The flag is true
    /// when this step completes the current point.
    pub fn feedforward_action(&self, world: &WorldState) -> Option<(Action, bool)> {
        if self.exhausted() {
            return None;
        }
        let goal = self.ff_trajectory.poses[self.ff_cursor];
        let last = world.reaches_in_one_step(&goal) || self.ff_dwell + 1 >= world.spec.convergence_cap;
        let gripper = if last { self.ff_trajectory.gripper[self.ff_cursor] } else { world.gripper };
        Some((Action { goal, gripper }, last))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("feedforward trajectory exhausted at cursor {0}")]
    TrajectoryExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub from: Mode,
    pub to: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reattach: Option<Reattach>,
}

/// One row of an ensemble trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Mode the executed action came from.
    pub mode: Mode,
    pub cursor: usize,
    /// Feedforward vs feedback similarity, when both were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    pub streak: usize,
    pub cooldown: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch: Option<SwitchEvent>,
}

/// Advances the switching logic by one environment step.
///
/// Feedforward mode executes the trajectory unless the feedback action has
/// disagreed for `window` consecutive steps with the cooldown expired, in
/// which case the feedback action runs and the mode flips. Feedback mode
/// executes the feedback action and looks for a reattach point each step.
/// Every mode change restarts the cooldown; the cooldown ticks down on steps
/// without a change.
pub fn ensemble_step(
    state: &EnsembleState,
    feedback_action: &Action,
    world: &WorldState,
    stats: &ActionStats,
    params: &EnsembleParams,
) -> Result<(Action, EnsembleState, StepRecord), EnsembleError> {
    let mut next = state.clone();
    let a_il = stats.normalize(&action_delta(&world.robot, world.gripper, feedback_action));
    let mut similarity_value = None;
    let mut switch = None;
    let (action, mode) = match state.mode {
        Mode::Feedforward => {
            let (ff, completes) =
                state.feedforward_action(world).ok_or(EnsembleError::TrajectoryExhausted(state.ff_cursor))?;
            let a_ff = stats.normalize(&action_delta(&world.robot, world.gripper, &ff));
            let sim = a_ff.similarity(&a_il);
            similarity_value = Some(sim);
            next.disagreement_streak = if sim < params.tau_switch { state.disagreement_streak + 1 } else { 0 };
            if next.disagreement_streak >= params.window && state.cooldown_remaining == 0 {
                next.mode = Mode::Feedback;
                next.disagreement_streak = 0;
                switch = Some(SwitchEvent { from: Mode::Feedforward, to: Mode::Feedback, reattach: None });
                (feedback_action.clone(), Mode::Feedback)
            } else {
                if completes {
                    next.ff_cursor += 1;
                    next.ff_dwell = 0;
                } else {
                    next.ff_dwell += 1;
                }
                (ff, Mode::Feedforward)
            }
        }
        Mode::Feedback => {
            if state.cooldown_remaining == 0 {
                let found = select_reattach(
                    &state.ff_trajectory,
                    &world.robot,
                    world.gripper,
                    state.ff_cursor,
                    &a_il,
                    params.tau,
                    stats,
                    params.reattach_window,
                );
                if let Some(r) = found {
                    next.mode = Mode::Feedforward;
                    next.ff_cursor = r.t;
                    next.ff_dwell = 0;
                    next.disagreement_streak = 0;
                    switch = Some(SwitchEvent { from: Mode::Feedback, to: Mode::Feedforward, reattach: Some(r) });
                }
            }
            (feedback_action.clone(), Mode::Feedback)
        }
    };
    if switch.is_some() {
        next.cooldown_remaining = params.cooldown;
    } else {
        next.cooldown_remaining = state.cooldown_remaining.saturating_sub(1);
    }
    let record = StepRecord {
        t: world.t,
        mode,
        cursor: state.ff_cursor,
        similarity: similarity_value,
        streak: next.disagreement_streak,
        cooldown: next.cooldown_remaining,
        switch,
    };
    Ok((action, next, record))
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub rollout: RolloutOutcome,
    pub records: Vec<StepRecord>,
}

impl EnsembleOutcome {
    pub fn switches(&self) -> impl Iterator<Item = (usize, &SwitchEvent)> {
        self.records.iter().enumerate().filter_map(|(i, r)| r.switch.as_ref().map(|s| (i, s)))
    }
}

/// Runs the ensemble from `world` until the feedforward trajectory is used up
/// (in feedforward mode), the feedback policy reports the task finished (in
/// feedback mode), or `max_steps` is hit.
pub fn run_ensemble(
    world: WorldState,
    traj: &TrajectorySegment,
    feedback: &mut dyn FeedbackPolicy,
    stats: &ActionStats,
    params: &EnsembleParams,
    disturbances: Vec<Disturbance>,
    max_steps: usize,
) -> EnsembleOutcome {
    let mut exec = Executor::new(world).with_disturbances(disturbances);
    let mut state = EnsembleState::new(traj.clone());
    let mut records = Vec::new();
    while exec.steps() < max_steps {
        exec.apply_due_disturbances();
        match state.mode {
            Mode::Feedforward if state.exhausted() => break,
            Mode::Feedback if feedback.done(&exec.state) => break,
            _ => {}
        }
        let fb = feedback.act(&exec.state);
        let Ok((action, next, record)) = ensemble_step(&state, &fb, &exec.state, stats, params) else { break };
        exec.step(action);
        state = next;
        records.push(record);
    }
    EnsembleOutcome { rollout: exec.finish(), records }
}

/// Open-loop baseline with the same stopping rule and step budget.
pub fn run_feedforward(
    world: WorldState,
    traj: &TrajectorySegment,
    disturbances: Vec<Disturbance>,
    max_steps: usize,
) -> RolloutOutcome {
    let mut exec = Executor::new(world).with_disturbances(disturbances);
    let mut state = EnsembleState::new(traj.clone());
    while exec.steps() < max_steps {
        let Some((action, completes)) = state.feedforward_action(&exec.state) else { break };
        exec.step(action);
        if completes {
            state.ff_cursor += 1;
            state.ff_dwell = 0;
        } else {
            state.ff_dwell += 1;
        }
    }
    exec.finish()
}

/// Writes one JSON object per ensemble step.
pub fn write_ensemble_trace<W: Write>(records: &[StepRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Index pairs of consecutive mode switches closer than `cooldown + 1` steps.
pub fn cooldown_violations(records: &[StepRecord], cooldown: usize) -> Vec<(usize, usize)> {
    let idx: Vec<usize> = records.iter().enumerate().filter(|(_, r)| r.switch.is_some()).map(|(i, _)| i).collect();
    idx.windows(2).filter(|w| w[1] - w[0] <= cooldown).map(|w| (w[0], w[1])).collect()
}

/// Builds a normalized action from a translation-only delta.
pub fn translation_action(d: geometry::Vec3<f64>, stats: &ActionStats) -> NormalizedAction {
    stats.normalize(&[d.x(), d.y(), d.z(), 0.0, 0.0, 0.0, 0.0])
}
