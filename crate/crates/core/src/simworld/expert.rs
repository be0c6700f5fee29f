//! Reactive scripted controller that solves every bundled task from any
//! reachable world state. It produces the source demonstrations and serves
//! as the feedback policy for ensembling.

use crate::demo::{Action, Gripper};
use crate::{geometry, Pose, Rotation, Vec3};

use super::{
    drawer_stages, home_rotation, is_success, quarter_turn_error, TaskKind, WorldState, BLOCK_SIZE, DRAWER_AXIS,
    DRAWER_HANDLE, DRAWER_OPEN_TARGET, MUG, PICK_PLACE_BLOCK, PICK_PLACE_GOAL_ID, STACK_GOAL_ID,
};

/// Closed-loop policy queried once per environment step.
pub trait FeedbackPolicy {
    fn act(&mut self, state: &WorldState) -> Action;

    /// True once the policy considers the task finished.
    fn done(&self, state: &WorldState) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedExpert {
    /// Translation per step, meters.
    pub speed: f64,
    /// Rotation per step, radians.
    pub angular_speed: f64,
    /// Height above a target at which lateral travel happens.
    pub approach_height: f64,
    /// Lateral error below which the descent starts.
    pub align_xy: f64,
    pub arrive_tolerance: f64,
    pub retreat_height: f64,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        ScriptedExpert {
            speed: 0.01,
            angular_speed: 0.05,
            approach_height: 0.08,
            align_xy: 0.003,
            arrive_tolerance: 1e-3,
            retreat_height: 0.20,
        }
    }
}

enum Goal {
    Grasp(Pose),
    Place(Vec3),
    Slide(Vec3),
    Retreat,
}

impl ScriptedExpert {
    /// Next action, or `None` when the task is solved and the arm has
    /// retreated.
    pub fn act(&self, state: &WorldState) -> Option<Action> {
        if state.gripper == Gripper::Closed && state.attached.is_none() {
            return Some(Action { goal: state.robot, gripper: Gripper::Open });
        }
        match self.goal(state) {
            Goal::Grasp(target) => Some(self.reach(state, &target, Gripper::Closed, true)),
            Goal::Place(object_target) => {
                let grasp = state.attached.as_ref().expect("placing requires a held object");
                let rot = state.robot.rotation;
                let ee = object_target - rot.rotate(&grasp.offset.position);
                Some(self.reach(state, &Pose::new(ee, rot), Gripper::Open, true))
            }
            Goal::Slide(ee) => Some(self.reach(state, &Pose::new(ee, state.robot.rotation), Gripper::Open, false)),
            Goal::Retreat => {
                if state.robot.position.z() >= self.retreat_height - 1e-9 {
                    return None;
                }
                let mut p = state.robot.position;
                p.0[2] = self.retreat_height;
                Some(self.reach(state, &Pose::new(p, state.robot.rotation), state.gripper, false))
            }
        }
    }

    fn grasp_pose(&self, state: &WorldState, id: &str) -> Pose {
        let obj = &state.objects[id];
        let rotation = if obj.yaw_keyed {
            let ee_yaw = state.robot.rotation.yaw();
            let yaw = ee_yaw - quarter_turn_error(ee_yaw, obj.pose.rotation.yaw());
            Rotation::rz(yaw).compose(&home_rotation())
        } else {
            state.robot.rotation
        };
        Pose::new(obj.pose.position, rotation)
    }

    fn goal(&self, state: &WorldState) -> Goal {
        let held = state.attached_id();
        match state.spec.kind {
            TaskKind::PickPlace => match held {
                Some(_) => Goal::Place(state.goal_regions[PICK_PLACE_GOAL_ID].center),
                None if is_success(state) => Goal::Retreat,
                None => Goal::Grasp(self.grasp_pose(state, PICK_PLACE_BLOCK)),
            },
            TaskKind::Stack | TaskKind::StackFlipped | TaskKind::StackWalking => {
                let (lower, upper) = state.stack_order();
                let goal = state.goal_regions[STACK_GOAL_ID].center;
                let lower_pos = state.objects[&lower].pose.position;
                let on_top = lower_pos + Vec3::new(0.0, 0.0, BLOCK_SIZE);
                match held {
                    Some(id) if id == lower => Goal::Place(goal),
                    Some(_) => Goal::Place(on_top),
                    None => {
                        let upper_pos = state.objects[&upper].pose.position;
                        if lower_pos.distance(&goal) > 0.005 {
                            Goal::Grasp(self.grasp_pose(state, &lower))
                        } else if upper_pos.distance(&on_top) > 0.003 {
                            Goal::Grasp(self.grasp_pose(state, &upper))
                        } else {
                            Goal::Retreat
                        }
                    }
                }
            }
            TaskKind::DrawerMug => {
                let drawer = state.drawer.as_ref().expect("drawer task has a drawer");
                let stages = drawer_stages(state);
                let axis = geometry::Vec3(DRAWER_AXIS);
                match held {
                    Some(DRAWER_HANDLE) => {
                        let target = if stages.mug_in_drawer { 0.0 } else { DRAWER_OPEN_TARGET };
                        Goal::Slide(state.robot.position + axis.scale(target - drawer.opening))
                    }
                    Some(_) => Goal::Place(drawer.interior_position()),
                    None if stages.mug_in_drawer && stages.drawer_closed => Goal::Retreat,
                    None if stages.mug_in_drawer => Goal::Grasp(self.grasp_pose(state, DRAWER_HANDLE)),
                    None if drawer.opening < DRAWER_OPEN_TARGET - 0.02 => {
                        Goal::Grasp(self.grasp_pose(state, DRAWER_HANDLE))
                    }
                    None => Goal::Grasp(self.grasp_pose(state, MUG)),
                }
            }
        }
    }

    /// Moves toward `target` (lifting to the approach height first when
    /// `via_above`), and issues `on_arrival` once there.
    fn reach(&self, state: &WorldState, target: &Pose, on_arrival: Gripper, via_above: bool) -> Action {
        let cur = state.robot;
        let arrived = cur.position.distance(&target.position) <= self.arrive_tolerance
            && cur.rotation.distance(&target.rotation) <= 1e-3;
        if arrived {
            return Action { goal: *target, gripper: on_arrival };
        }
        let waypoint = if via_above {
            let safe_z = target.position.z() + self.approach_height;
            let d = target.position - cur.position;
            if d.x().hypot(d.y()) > self.align_xy {
                if cur.position.z() < safe_z - 1e-6 {
                    Pose::new(Vec3::new(cur.position.x(), cur.position.y(), safe_z), cur.rotation)
                } else {
                    Pose::new(Vec3::new(target.position.x(), target.position.y(), safe_z), target.rotation)
                }
            } else {
                *target
            }
        } else {
            *target
        };
        let delta = waypoint.position - cur.position;
        let dist = delta.norm();
        let position =
            if dist <= self.speed { waypoint.position } else { cur.position + delta.scale(self.speed / dist) };
        let angle = cur.rotation.inverse().compose(&waypoint.rotation).angle();
        let rotation = if angle <= self.angular_speed {
            waypoint.rotation
        } else {
            cur.rotation.slerp(&waypoint.rotation, self.angular_speed / angle)
        };
        Action { goal: Pose::new(position, rotation), gripper: state.gripper }
    }
}

impl FeedbackPolicy for ScriptedExpert {
    fn act(&mut self, state: &WorldState) -> Action {
        ScriptedExpert::act(self, state).unwrap_or(Action { goal: state.robot, gripper: state.gripper })
    }

    fn done(&self, state: &WorldState) -> bool {
        ScriptedExpert::act(self, state).is_none()
    }
}
