//! Deterministic desk-scale kinematic manipulation world.
//!
//! No dynamics and no collisions: the end-effector moves toward goal poses
//! under per-step caps, closing the gripper near an object attaches it
//! rigidly, and opening leaves the object where it was released.

mod expert;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demo::{Action, Demonstration, Gripper, Observation, Provenance};
use crate::retargeting::SceneObservation;
use crate::seed::derive_seed;
use crate::warping::TrajectorySegment;
use crate::{geometry, Pose, Rotation, Vec3};

pub use expert::{FeedbackPolicy, ScriptedExpert};

/// Cube edge length (meters).
pub const BLOCK_SIZE: f64 = 0.04;
pub const HOME_POSITION: [f64; 3] = [0.30, 0.0, 0.30];
pub const PICK_PLACE_GOAL: [f64; 3] = [0.25, 0.25, BLOCK_SIZE / 2.0];
pub const STACK_GOAL: [f64; 3] = [0.25, -0.25, BLOCK_SIZE / 2.0];
pub const DRAWER_HANDLE_CLOSED: [f64; 3] = [0.20, 0.25, 0.06];
/// Handle motion direction when the drawer opens.
pub const DRAWER_AXIS: [f64; 3] = [0.0, -1.0, 0.0];
pub const DRAWER_MAX_OPENING: f64 = 0.15;
pub const DRAWER_OPEN_TARGET: f64 = 0.12;
pub const DRAWER_CLOSED_TOLERANCE: f64 = 0.01;
/// Interior drop point relative to the handle.
pub const DRAWER_INTERIOR_OFFSET: [f64; 3] = [0.0, 0.10, -0.03];

pub const PICK_PLACE_BLOCK: &str = "green_block";
pub const BLUE_BLOCK: &str = "blue_block";
pub const GREEN_BLOCK: &str = "green_block";
pub const MUG: &str = "mug";
pub const DRAWER_HANDLE: &str = "drawer_handle";
pub const DRAWER_INTERIOR: &str = "drawer_interior";
pub const PICK_PLACE_GOAL_ID: &str = "blue_region";
pub const STACK_GOAL_ID: &str = "stack_region";

/// End-effector rest orientation: tool z-axis pointing down.
pub fn home_rotation() -> Rotation {
    Rotation::rx(std::f64::consts::PI)
}

pub fn home_pose() -> Pose {
    Pose::new(geometry::Vec3(HOME_POSITION), home_rotation())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PickPlace,
    Stack,
    StackFlipped,
    StackWalking,
    DrawerMug,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::PickPlace, TaskKind::Stack, TaskKind::StackFlipped, TaskKind::StackWalking, TaskKind::DrawerMug];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick_place",
            TaskKind::Stack => "stack",
            TaskKind::StackFlipped => "stack_flipped",
            TaskKind::StackWalking => "stack_walking",
            TaskKind::DrawerMug => "drawer_mug",
        }
    }

    pub fn is_stack(self) -> bool {
        matches!(self, TaskKind::Stack | TaskKind::StackFlipped | TaskKind::StackWalking)
    }

    /// One-sentence task description handed to annotators.
    pub fn description(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "Pick up the green block and place it in the blue highlighted region.",
            TaskKind::Stack | TaskKind::StackWalking => {
                "Place the two blocks in the highlighted region, stacking the green block on top of the blue block."
            }
            TaskKind::StackFlipped => {
                "Place the two blocks in the highlighted region, stacking them on top of each other."
            }
            TaskKind::DrawerMug => "Open the drawer, pick up the mug, place it in the drawer, then close the drawer.",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

/// Task parameters. Tolerances are configuration, not calibrated claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Center of the object randomization rectangle (x, y).
    pub region_center: [f64; 2],
    /// Full extents of the randomization rectangle (x, y), meters.
    pub region_extent: [f64; 2],
    pub yaw_range_deg: f64,
    /// Placement tolerance on the object center.
    pub position_tolerance: f64,
    pub stack_xy_tolerance: f64,
    pub stack_z_tolerance: f64,
    /// Random-walk step for `stack_walking`, meters per timestep.
    pub walk_step: f64,
    pub max_step: f64,
    pub max_angular_step: f64,
    pub grasp_tolerance: f64,
    /// Block yaw alignment needed to grasp, modulo a quarter turn (radians).
    pub grasp_yaw_tolerance: f64,
    /// Steps allowed to converge onto one trajectory point.
    pub convergence_cap: usize,
    pub min_object_separation: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::new(TaskKind::PickPlace)
    }
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            region_center: [0.45, 0.0],
            region_extent: [0.20, 0.30],
            yaw_range_deg: 45.0,
            position_tolerance: 0.02,
            stack_xy_tolerance: 0.006,
            stack_z_tolerance: 0.01,
            walk_step: 4e-4,
            max_step: 0.02,
            max_angular_step: 0.1,
            grasp_tolerance: 0.01,
            grasp_yaw_tolerance: 0.2,
            convergence_cap: 50,
            min_object_separation: 0.08,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("position_tolerance", self.position_tolerance),
            ("stack_xy_tolerance", self.stack_xy_tolerance),
            ("stack_z_tolerance", self.stack_z_tolerance),
            ("max_step", self.max_step),
            ("max_angular_step", self.max_angular_step),
            ("grasp_tolerance", self.grasp_tolerance),
            ("grasp_yaw_tolerance", self.grasp_yaw_tolerance),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(SimError::InvalidSpec(format!("{name} must be > 0 (got {v})")));
            }
        }
        if self.convergence_cap == 0 {
            return Err(SimError::InvalidSpec("convergence_cap must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("object `{0}` is attached to the gripper")]
    ObjectAttached(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("scripted expert failed to solve {kind} (seed {seed})")]
    ExpertFailed { kind: TaskKind, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub pose: Pose,
    /// Picked objects stop random-walking for good.
    pub picked: bool,
    /// Grasp requires yaw alignment modulo a quarter turn.
    pub yaw_keyed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: Vec3,
    pub extents: [f64; 2],
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drawer {
    pub opening: f64,
    pub peak_opening: f64,
    /// Opening and end-effector position at the moment the handle was grabbed.
    grab: Option<(f64, Vec3)>,
    /// Object resting inside the drawer and its offset from the interior point.
    pub contents: Option<(String, Vec3)>,
}

impl Drawer {
    fn handle_position(&self) -> Vec3 {
        geometry::Vec3(DRAWER_HANDLE_CLOSED) + geometry::Vec3(DRAWER_AXIS).scale(self.opening)
    }

    pub fn interior_position(&self) -> Vec3 {
        self.handle_position() + geometry::Vec3(DRAWER_INTERIOR_OFFSET)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grasp {
    pub object_id: String,
    /// Object pose in the end-effector frame at grasp time.
    pub offset: Pose,
}

/// Full world state. Cloning forks the world, including its random stream.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub spec: TaskSpec,
    pub robot: Pose,
    pub gripper: Gripper,
    pub attached: Option<Grasp>,
    pub objects: BTreeMap<String, SimObject>,
    pub goal_regions: BTreeMap<String, GoalRegion>,
    pub drawer: Option<Drawer>,
    pub metadata: BTreeMap<String, String>,
    pub t: usize,
    pub seed: u64,
    walk_rng: ChaCha8Rng,
}

impl PartialEq for WorldState {
    fn eq(&self, o: &Self) -> bool {
        self.spec == o.spec
            && self.robot == o.robot
            && self.gripper == o.gripper
            && self.attached == o.attached
            && self.objects == o.objects
            && self.goal_regions == o.goal_regions
            && self.drawer == o.drawer
            && self.metadata == o.metadata
            && self.t == o.t
            && self.seed == o.seed
            && self.walk_rng == o.walk_rng
    }
}

fn block(xy: [f64; 2], yaw: f64) -> SimObject {
    SimObject {
        pose: Pose::new(Vec3::new(xy[0], xy[1], BLOCK_SIZE / 2.0), Rotation::rz(yaw)),
        picked: false,
        yaw_keyed: true,
    }
}

impl WorldState {
    pub fn attached_id(&self) -> Option<&str> {
        self.attached.as_ref().map(|g| g.object_id.as_str())
    }

    pub fn object_pose(&self, id: &str) -> Option<&Pose> {
        self.objects.get(id).map(|o| &o.pose)
    }

    /// Block that must end at the bottom of the stack (stack variants).
    pub fn stack_order(&self) -> (String, String) {
        let color = |k: &str, d: &str| self.metadata.get(k).cloned().unwrap_or_else(|| d.to_string());
        (
            format!("{}_block", color("goal_lower_color", "blue")),
            format!("{}_block", color("goal_upper_color", "green")),
        )
    }

    /// Scene entities visible to annotators: objects plus static markers.
    pub fn entity_poses(&self) -> BTreeMap<String, Pose> {
        let mut out: BTreeMap<String, Pose> = self.objects.iter().map(|(k, o)| (k.clone(), o.pose)).collect();
        for (id, region) in &self.goal_regions {
            out.insert(id.clone(), Pose::from_position(region.center));
        }
        if let Some(d) = &self.drawer {
            out.insert(DRAWER_INTERIOR.to_string(), Pose::from_position(d.interior_position()));
        }
        out
    }

    pub fn observe(&self) -> Observation {
        Observation {
            robot: self.robot,
            gripper: self.gripper,
            attached: self.attached.as_ref().map(|g| g.object_id.clone()),
            objects: self.entity_poses(),
        }
    }

    pub fn scene_observation(&self) -> SceneObservation {
        SceneObservation {
            robot_pose: self.robot,
            objects: self.entity_poses(),
            image_refs: Vec::new(),
            task_metadata: self.metadata.clone(),
        }
    }

    /// Whether a single step toward `goal` lands on it.
    pub fn reaches_in_one_step(&self, goal: &Pose) -> bool {
        let slack = 1.0 + 1e-9;
        self.robot.position.distance(&goal.position) <= self.spec.max_step * slack
            && self.robot.rotation.inverse().compose(&goal.rotation).angle() <= self.spec.max_angular_step * slack
    }
}

/// Samples a fresh scene. Layout draws do not depend on the stack variant,
/// so paired seeds give identical initial layouts across variants.
pub fn reset(spec: &TaskSpec, seed: u64) -> (WorldState, SceneObservation) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5ce0]));
    let [cx, cy] = spec.region_center;
    let [ex, ey] = spec.region_extent;
    let yaw_max = spec.yaw_range_deg.to_radians();
    let sample = |rng: &mut ChaCha8Rng| -> ([f64; 2], f64) {
        let x = cx + rng.random_range(-0.5..=0.5) * ex;
        let y = cy + rng.random_range(-0.5..=0.5) * ey;
        let yaw = if yaw_max > 0.0 { rng.random_range(-yaw_max..=yaw_max) } else { 0.0 };
        ([x, y], yaw)
    };

    let mut objects = BTreeMap::new();
    let mut goal_regions = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    let mut drawer = None;

    match spec.kind {
        TaskKind::PickPlace => {
            let (xy, yaw) = sample(&mut rng);
            objects.insert(PICK_PLACE_BLOCK.to_string(), block(xy, yaw));
            goal_regions.insert(
                PICK_PLACE_GOAL_ID.to_string(),
                GoalRegion { center: geometry::Vec3(PICK_PLACE_GOAL), extents: [0.06, 0.06], color: "blue".into() },
            );
        }
        TaskKind::Stack | TaskKind::StackFlipped | TaskKind::StackWalking => {
            let (a, yaw_a) = sample(&mut rng);
            let (b, yaw_b) = loop {
                let (b, yaw) = sample(&mut rng);
                if (a[0] - b[0]).hypot(a[1] - b[1]) >= spec.min_object_separation {
                    break (b, yaw);
                }
            };
            objects.insert(BLUE_BLOCK.to_string(), block(a, yaw_a));
            objects.insert(GREEN_BLOCK.to_string(), block(b, yaw_b));
            let flip = rng.random_bool(0.5) && spec.kind == TaskKind::StackFlipped;
            let (lower, upper) = if flip { ("green", "blue") } else { ("blue", "green") };
            metadata.insert("goal_lower_color".to_string(), lower.to_string());
            metadata.insert("goal_upper_color".to_string(), upper.to_string());
            goal_regions.insert(
                STACK_GOAL_ID.to_string(),
                GoalRegion {
                    center: geometry::Vec3(STACK_GOAL),
                    extents: [0.06, 0.06],
                    color: format!("{lower}/{upper}"),
                },
            );
        }
        TaskKind::DrawerMug => {
            let (xy, yaw) = sample(&mut rng);
            let mut mug = block(xy, yaw);
            mug.pose.position = Vec3::new(xy[0], xy[1], 0.05);
            mug.yaw_keyed = false;
            objects.insert(MUG.to_string(), mug);
            objects.insert(
                DRAWER_HANDLE.to_string(),
                SimObject {
                    pose: Pose::from_position(geometry::Vec3(DRAWER_HANDLE_CLOSED)),
                    picked: false,
                    yaw_keyed: true,
                },
            );
            drawer = Some(Drawer { opening: 0.0, peak_opening: 0.0, grab: None, contents: None });
        }
    }

    let state = WorldState {
        spec: spec.clone(),
        robot: home_pose(),
        gripper: Gripper::Open,
        attached: None,
        objects,
        goal_regions,
        drawer,
        metadata,
        t: 0,
        seed,
        walk_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x3a1c])),
    };
    let obs = state.scene_observation();
    (state, obs)
}

/// Quarter-turn-periodic yaw difference in `[-pi/4, pi/4]`.
pub fn quarter_turn_error(a: f64, b: f64) -> f64 {
    let q = std::f64::consts::FRAC_PI_2;
    let d = (a - b).rem_euclid(q);
    if d > q / 2.0 {
        d - q
    } else {
        d
    }
}

fn move_toward(state: &WorldState, goal: &Pose) -> Pose {
    if state.reaches_in_one_step(goal) {
        return *goal;
    }
    let spec = &state.spec;
    let delta = goal.position - state.robot.position;
    let dist = delta.norm();
    let position = if dist <= spec.max_step * (1.0 + 1e-9) {
        goal.position
    } else {
        state.robot.position + delta.scale(spec.max_step / dist)
    };
    let angle = state.robot.rotation.inverse().compose(&goal.rotation).angle();
    let rotation = if angle <= spec.max_angular_step * (1.0 + 1e-9) {
        goal.rotation
    } else {
        state.robot.rotation.slerp(&goal.rotation, spec.max_angular_step / angle)
    };
    Pose::new(position, rotation)
}

fn try_grasp(state: &mut WorldState) {
    let spec = &state.spec;
    let ee = state.robot;
    let ee_yaw = ee.rotation.yaw();
    let mut best: Option<(f64, String)> = None;
    for (id, obj) in &state.objects {
        let d = obj.pose.position.distance(&ee.position);
        if d > spec.grasp_tolerance {
            continue;
        }
        if obj.yaw_keyed && quarter_turn_error(ee_yaw, obj.pose.rotation.yaw()).abs() > spec.grasp_yaw_tolerance {
            continue;
        }
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, id.clone()));
        }
    }
    let Some((_, id)) = best else { return };
    if id == DRAWER_HANDLE {
        if let Some(d) = state.drawer.as_mut() {
            d.grab = Some((d.opening, ee.position));
        }
    } else if let Some(d) = state.drawer.as_mut() {
        if d.contents.as_ref().is_some_and(|(c, _)| *c == id) {
            d.contents = None;
        }
    }
    let obj = state.objects.get_mut(&id).expect("candidate exists");
    obj.picked = true;
    let offset = ee.inverse().compose(&obj.pose);
    obj.pose = ee.compose(&offset);
    state.attached = Some(Grasp { object_id: id, offset });
}

fn release(state: &mut WorldState) {
    let Some(grasp) = state.attached.take() else { return };
    if grasp.object_id == DRAWER_HANDLE {
        if let Some(d) = state.drawer.as_mut() {
            d.grab = None;
        }
        return;
    }
    if let Some(d) = state.drawer.as_mut() {
        let interior = d.interior_position();
        let p = state.objects[&grasp.object_id].pose.position;
        let rel = p - interior;
        if d.opening >= DRAWER_OPEN_TARGET - 0.02 && rel.x().hypot(rel.y()) <= 0.04 && rel.z().abs() <= 0.03 {
            d.contents = Some((grasp.object_id.clone(), rel));
        }
    }
}

fn follow_attachment(state: &mut WorldState) {
    let Some(grasp) = &state.attached else { return };
    if grasp.object_id == DRAWER_HANDLE {
        let ee = state.robot.position;
        if let Some(d) = state.drawer.as_mut() {
            if let Some((open0, ee0)) = d.grab {
                let along = (ee - ee0).dot(&geometry::Vec3(DRAWER_AXIS));
                d.opening = (open0 + along).clamp(0.0, DRAWER_MAX_OPENING);
                d.peak_opening = d.peak_opening.max(d.opening);
            }
        }
    } else {
        let pose = state.robot.compose(&grasp.offset);
        if let Some(obj) = state.objects.get_mut(&grasp.object_id) {
            obj.pose = pose;
        }
    }
    sync_drawer(state);
}

fn sync_drawer(state: &mut WorldState) {
    let Some(d) = state.drawer.clone() else { return };
    if let Some(h) = state.objects.get_mut(DRAWER_HANDLE) {
        h.pose.position = d.handle_position();
    }
    if let Some((id, rel)) = &d.contents {
        if let Some(obj) = state.objects.get_mut(id) {
            obj.pose.position = d.interior_position() + *rel;
        }
    }
}

fn random_walk(state: &mut WorldState) {
    if state.spec.kind != TaskKind::StackWalking {
        return;
    }
    let step = state.spec.walk_step;
    for obj in state.objects.values_mut() {
        // every object consumes a draw so the stream stays aligned
        let theta = state.walk_rng.random_range(0.0..std::f64::consts::TAU);
        if !obj.picked {
            obj.pose.position += Vec3::new(theta.cos() * step, theta.sin() * step, 0.0);
        }
    }
}

/// Advances the world by one timestep. Motion happens first, then the
/// gripper command is applied at the new pose.
pub fn step(state: &WorldState, action: &Action) -> WorldState {
    let mut next = state.clone();
    step_in_place(&mut next, action);
    next
}

pub fn step_in_place(state: &mut WorldState, action: &Action) {
    state.robot = move_toward(state, &action.goal);
    follow_attachment(state);
    if action.gripper != state.gripper {
        match action.gripper {
            Gripper::Closed => try_grasp(state),
            Gripper::Open => release(state),
        }
        state.gripper = action.gripper;
    }
    random_walk(state);
    state.t += 1;
}

/// Translates an unattached object.
pub fn inject_disturbance(state: &WorldState, object_id: &str, delta: Vec3) -> Result<WorldState, SimError> {
    if !state.objects.contains_key(object_id) {
        return Err(SimError::UnknownObject(object_id.to_string()));
    }
    if state.attached_id() == Some(object_id) {
        return Err(SimError::ObjectAttached(object_id.to_string()));
    }
    let mut next = state.clone();
    next.objects.get_mut(object_id).expect("checked").pose.position += delta;
    Ok(next)
}

/// Per-stage progress of the drawer task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DrawerStages {
    pub drawer_opened: bool,
    pub mug_grasped: bool,
    pub mug_in_drawer: bool,
    pub drawer_closed: bool,
}

pub fn drawer_stages(state: &WorldState) -> DrawerStages {
    let Some(d) = &state.drawer else { return DrawerStages::default() };
    let in_drawer = d.contents.as_ref().is_some_and(|(id, _)| id == MUG);
    DrawerStages {
        drawer_opened: d.peak_opening >= DRAWER_OPEN_TARGET - 0.02,
        mug_grasped: state.objects.get(MUG).is_some_and(|m| m.picked),
        mug_in_drawer: in_drawer,
        drawer_closed: in_drawer && d.opening <= DRAWER_CLOSED_TOLERANCE,
    }
}

/// Task success predicate; a pure function of the world state.
pub fn is_success(state: &WorldState) -> bool {
    let spec = &state.spec;
    if state.attached.is_some() || state.gripper != Gripper::Open {
        return false;
    }
    match spec.kind {
        TaskKind::PickPlace => {
            let (Some(block), Some(goal)) =
                (state.objects.get(PICK_PLACE_BLOCK), state.goal_regions.get(PICK_PLACE_GOAL_ID))
            else {
                return false;
            };
            block.pose.position.distance(&goal.center) <= spec.position_tolerance
        }
        TaskKind::Stack | TaskKind::StackFlipped | TaskKind::StackWalking => {
            let (lower_id, upper_id) = state.stack_order();
            let (Some(lower), Some(upper), Some(goal)) =
                (state.objects.get(&lower_id), state.objects.get(&upper_id), state.goal_regions.get(STACK_GOAL_ID))
            else {
                return false;
            };
            let (l, u) = (lower.pose.position, upper.pose.position);
            l.distance(&goal.center) <= spec.position_tolerance
                && (u.x() - l.x()).hypot(u.y() - l.y()) <= spec.stack_xy_tolerance
                && (u.z() - l.z() - BLOCK_SIZE).abs() <= spec.stack_z_tolerance
        }
        TaskKind::DrawerMug => {
            let s = drawer_stages(state);
            s.drawer_opened && s.mug_grasped && s.mug_in_drawer && s.drawer_closed
        }
    }
}

/// Object translation applied just before a given environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub at_step: usize,
    pub object_id: String,
    pub delta: Vec3,
}

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub success: bool,
    pub steps: usize,
    pub final_state: WorldState,
    /// Action issued at each environment step.
    pub actions: Vec<Action>,
    /// Observation after each environment step.
    pub trace: Vec<Observation>,
}

impl RolloutOutcome {
    pub fn into_demonstration(self, id: String, scene: SceneObservation, provenance: Provenance) -> Demonstration {
        Demonstration {
            id,
            task: self.final_state.spec.kind,
            scene,
            observations: self.trace,
            actions: self.actions,
            provenance,
        }
    }
}

/// Steps the world and records the result. Shared by trajectory rollouts and
/// the closed-loop controllers.
#[derive(Debug, Clone)]
pub struct Executor {
    pub state: WorldState,
    pub actions: Vec<Action>,
    pub trace: Vec<Observation>,
    disturbances: Vec<Disturbance>,
}

impl Executor {
    pub fn new(state: WorldState) -> Self {
        Executor { state, actions: Vec::new(), trace: Vec::new(), disturbances: Vec::new() }
    }

    pub fn with_disturbances(mut self, mut disturbances: Vec<Disturbance>) -> Self {
        disturbances.sort_by_key(|d| d.at_step);
        self.disturbances = disturbances;
        self
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn apply_due_disturbances(&mut self) {
        let now = self.actions.len();
        while let Some(d) = self.disturbances.first() {
            if d.at_step > now {
                break;
            }
            let d = self.disturbances.remove(0);
            // attached objects are immune; the disturbance is dropped
            if let Ok(next) = inject_disturbance(&self.state, &d.object_id, d.delta) {
                self.state = next;
            }
        }
    }

    /// One raw environment step.
    pub fn step(&mut self, action: Action) {
        self.apply_due_disturbances();
        step_in_place(&mut self.state, &action);
        self.actions.push(action);
        self.trace.push(self.state.observe());
    }

    /// Drives toward `goal` until reached or the convergence cap is hit. The
    /// gripper command is issued on the final step only.
    pub fn drive(&mut self, goal: &Pose, gripper: Gripper) {
        let cap = self.state.spec.convergence_cap;
        for k in 0..cap {
            let reaches = self.state.reaches_in_one_step(goal);
            let last = reaches || k + 1 == cap;
            let g = if last { gripper } else { self.state.gripper };
            self.step(Action { goal: *goal, gripper: g });
            if last {
                break;
            }
        }
    }

    pub fn finish(self) -> RolloutOutcome {
        RolloutOutcome {
            success: is_success(&self.state),
            steps: self.actions.len(),
            final_state: self.state,
            actions: self.actions,
            trace: self.trace,
        }
    }
}

/// Executes every trajectory point as a goal action, in order.
pub fn rollout(state: &WorldState, traj: &TrajectorySegment) -> RolloutOutcome {
    rollout_with(state, traj, Vec::new())
}

pub fn rollout_with(state: &WorldState, traj: &TrajectorySegment, disturbances: Vec<Disturbance>) -> RolloutOutcome {
    let mut exec = Executor::new(state.clone()).with_disturbances(disturbances);
    for (pose, g) in traj.poses.iter().zip(&traj.gripper) {
        exec.drive(pose, *g);
    }
    exec.finish()
}

/// Writes one JSON object per recorded step.
pub fn write_trace_jsonl<W: Write>(trace: &[Observation], mut out: W) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        t: usize,
        #[serde(flatten)]
        obs: &'a Observation,
    }
    for (t, obs) in trace.iter().enumerate() {
        serde_json::to_writer(&mut out, &Row { t, obs })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Solves a freshly reset scene with the scripted expert and records it.
pub fn expert_demo(spec: &TaskSpec, seed: u64) -> Result<Demonstration, SimError> {
    let (state, scene) = reset(spec, seed);
    let expert = ScriptedExpert::default();
    let mut exec = Executor::new(state);
    // settle step so the first recorded pose is the home pose
    let home = exec.state.robot;
    exec.step(Action { goal: home, gripper: Gripper::Open });
    for _ in 0..1500 {
        match expert.act(&exec.state) {
            Some(a) => exec.step(a),
            None => break,
        }
    }
    let outcome = exec.finish();
    if !outcome.success {
        return Err(SimError::ExpertFailed { kind: spec.kind, seed });
    }
    let id = format!("{}-src-{seed}", spec.kind);
    Ok(outcome.into_demonstration(id, scene, Provenance::HumanScripted { seed }))
}

/// Source demonstrations bundled for every task (the stand-in for recorded
/// human demos). Deterministic.
pub fn bundled_demos(spec: &TaskSpec, count: usize) -> Result<Vec<Demonstration>, SimError> {
    (0..count as u64).map(|i| expert_demo(spec, 1000 + i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stay(state: &WorldState) -> Action {
        Action { goal: state.robot, gripper: state.gripper }
    }

    #[test]
    fn reset_is_deterministic() {
        let spec = TaskSpec::new(TaskKind::StackWalking);
        let (a, oa) = reset(&spec, 7);
        let (b, ob) = reset(&spec, 7);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let (c, _) = reset(&spec, 8);
        assert_ne!(a.objects, c.objects);
    }

    #[test]
    fn pick_place_resets_stay_in_region() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        for seed in 0..1000 {
            let (s, _) = reset(&spec, seed);
            let p = s.objects[PICK_PLACE_BLOCK].pose;
            assert!((p.position.x() - 0.45).abs() <= 0.10 + 1e-12);
            assert!(p.position.y().abs() <= 0.15 + 1e-12);
            assert!(p.rotation.yaw().abs() <= 45f64.to_radians() + 1e-9);
        }
    }

    #[test]
    fn stack_flipped_fraction() {
        let spec = TaskSpec::new(TaskKind::StackFlipped);
        let flipped = (0..1000).filter(|&s| reset(&spec, s).1.task_metadata["goal_lower_color"] == "green").count();
        assert!((460..=540).contains(&flipped), "{flipped}");
        let plain = TaskSpec::new(TaskKind::Stack);
        assert!((0..200).all(|s| reset(&plain, s).1.task_metadata["goal_lower_color"] == "blue"));
    }

    #[test]
    fn stack_variants_share_layouts() {
        for seed in 0..20 {
            let a = reset(&TaskSpec::new(TaskKind::Stack), seed).0;
            let b = reset(&TaskSpec::new(TaskKind::StackWalking), seed).0;
            assert_eq!(a.objects, b.objects);
        }
    }

    #[test]
    fn stay_action_only_advances_time() {
        let (s, _) = reset(&TaskSpec::new(TaskKind::PickPlace), 3);
        let n = step(&s, &stay(&s));
        assert_eq!(n.t, 1);
        assert_eq!(n.robot, s.robot);
        assert_eq!(n.objects, s.objects);
    }

    #[test]
    fn step_is_capped() {
        let (s, _) = reset(&TaskSpec::new(TaskKind::PickPlace), 3);
        let goal = Pose::new(s.robot.position + Vec3::new(1.0, 0.0, 0.0), s.robot.rotation);
        let n = step(&s, &Action { goal, gripper: Gripper::Open });
        let moved = n.robot.position - s.robot.position;
        assert!((moved.norm() - 0.02).abs() < 1e-12);
        assert!(moved.y().abs() < 1e-15 && moved.z().abs() < 1e-15);
    }

    #[test]
    fn walking_blocks_take_fixed_steps_until_picked() {
        let (mut s, _) = reset(&TaskSpec::new(TaskKind::StackWalking), 11);
        let start = s.objects[BLUE_BLOCK].pose.position;
        for _ in 0..100 {
            let before = s.objects[BLUE_BLOCK].pose.position;
            s = step(&s, &stay(&s));
            let d = s.objects[BLUE_BLOCK].pose.position.distance(&before);
            assert!((d - 4e-4).abs() < 1e-12, "{d}");
        }
        assert!(s.objects[BLUE_BLOCK].pose.position.distance(&start) <= 0.04 + 1e-12);

        // grab it: it stops walking for good
        let target = s.objects[BLUE_BLOCK].pose;
        let grasp_rot = Rotation::rz(target.rotation.yaw()).compose(&home_rotation());
        let mut exec = Executor::new(s);
        exec.drive(&Pose::new(target.position, grasp_rot), Gripper::Open);
        let mut s = exec.state;
        s.objects.get_mut(BLUE_BLOCK).unwrap().pose = target;
        let s = step(&s, &Action { goal: s.robot, gripper: Gripper::Closed });
        assert_eq!(s.attached_id(), Some(BLUE_BLOCK));
        let s = step(&s, &Action { goal: s.robot, gripper: Gripper::Open });
        let rest = s.objects[BLUE_BLOCK].pose.position;
        let s = (0..10).fold(s, |s, _| step(&s, &stay(&s)));
        assert_eq!(s.objects[BLUE_BLOCK].pose.position, rest);
    }

    #[test]
    fn attachment_is_rigid() {
        let demo = expert_demo(&TaskSpec::new(TaskKind::PickPlace), 5).unwrap();
        let (state, _) = reset(&TaskSpec::new(TaskKind::PickPlace), 5);
        let mut exec = Executor::new(state);
        for a in &demo.actions {
            exec.step(a.clone());
            if let Some(g) = &exec.state.attached {
                let expect = exec.state.robot.compose(&g.offset);
                assert_eq!(exec.state.objects[&g.object_id].pose, expect);
            }
        }
    }

    #[test]
    fn disturbance_rules() {
        let (s, _) = reset(&TaskSpec::new(TaskKind::PickPlace), 2);
        assert_eq!(inject_disturbance(&s, PICK_PLACE_BLOCK, Vec3::zeros()).unwrap(), s);
        assert!(matches!(inject_disturbance(&s, "nope", Vec3::zeros()), Err(SimError::UnknownObject(_))));
        let mut held = s.clone();
        held.attached = Some(Grasp { object_id: PICK_PLACE_BLOCK.into(), offset: Pose::identity() });
        assert!(matches!(
            inject_disturbance(&held, PICK_PLACE_BLOCK, Vec3::new(0.1, 0.0, 0.0)),
            Err(SimError::ObjectAttached(_))
        ));
    }

    #[test]
    fn pick_place_predicate_on_constructed_state() {
        let (mut s, _) = reset(&TaskSpec::new(TaskKind::PickPlace), 2);
        assert!(!is_success(&s));
        s.objects.get_mut(PICK_PLACE_BLOCK).unwrap().pose.position =
            geometry::Vec3(PICK_PLACE_GOAL) + Vec3::new(0.01, 0.0, 0.0);
        assert!(is_success(&s));
        s.gripper = Gripper::Closed;
        assert!(!is_success(&s));
    }

    #[test]
    fn expert_demos_replay_on_their_scenes() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            for seed in 0..3 {
                let demo = expert_demo(&spec, seed).unwrap_or_else(|e| panic!("{e}"));
                demo.validate().unwrap();
                let (state, _) = reset(&spec, seed);
                let out = rollout(&state, &demo.trajectory());
                assert!(out.success, "{kind} seed {seed}");
                // one step per point, identical trace
                assert_eq!(out.trace, demo.observations, "{kind} seed {seed}");
            }
        }
    }

    #[test]
    fn empty_motion_fails() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let (state, _) = reset(&spec, 4);
        let traj = TrajectorySegment { poses: vec![state.robot; 5], gripper: vec![Gripper::Open; 5] };
        assert!(!rollout(&state, &traj).success);
    }

    #[test]
    fn disturbance_off_path_breaks_replay() {
        let spec = TaskSpec::new(TaskKind::PickPlace);
        let demo = expert_demo(&spec, 9).unwrap();
        let (state, _) = reset(&spec, 9);
        let grasp_t = demo.gripper_transitions()[0];
        let d =
            Disturbance { at_step: grasp_t / 2, object_id: PICK_PLACE_BLOCK.into(), delta: Vec3::new(0.0, 0.05, 0.0) };
        assert!(!rollout_with(&state, &demo.trajectory(), vec![d]).success);
    }

    #[test]
    fn drawer_stage_chain() {
        let spec = TaskSpec::new(TaskKind::DrawerMug);
        let demo = expert_demo(&spec, 1).unwrap();
        let (state, _) = reset(&spec, 1);
        let mut exec = Executor::new(state);
        let mut seen = Vec::new();
        for a in &demo.actions {
            exec.step(a.clone());
            let s = drawer_stages(&exec.state);
            let n = [s.drawer_opened, s.mug_grasped, s.mug_in_drawer, s.drawer_closed].iter().filter(|b| **b).count();
            if seen.last() != Some(&n) {
                seen.push(n);
            }
        }
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn trace_jsonl_has_one_line_per_step() {
        let demo = expert_demo(&TaskSpec::new(TaskKind::PickPlace), 0).unwrap();
        let mut buf = Vec::new();
        write_trace_jsonl(&demo.observations, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), demo.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["t"], 0);
    }
}
