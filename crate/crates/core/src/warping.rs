//! Keypose-driven trajectory warping.
//!
//! A segment between two keyposes is mapped through the similarity transform
//! that sends its old endpoints onto the new ones. The rotation about the
//! chord is the one free degree of freedom; it is chosen to keep the warped
//! z-axis as close to world up as possible. End-effector orientations are
//! corrected separately by interpolating the endpoint delta rotations.

use serde::{Deserialize, Serialize};

use crate::demo::{Demonstration, Gripper};
use crate::geometry::{Pose, RigidTransform, Rotation, Vec3};
use crate::scalar::Real;

/// Chord length below which a segment is treated as a single point (meters).
pub const CHORD_EPS: f64 = 1e-6;

/// Poses with gripper commands aligned 1:1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TrajectorySegment<T = f64> {
    pub poses: Vec<Pose<T>>,
    pub gripper: Vec<Gripper>,
}

impl<T: Real> TrajectorySegment<T> {
    pub fn new(poses: Vec<Pose<T>>, gripper: Vec<Gripper>) -> Result<Self, WarpError> {
        let seg = TrajectorySegment { poses, gripper };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<(), WarpError> {
        if self.poses.len() < 2 || self.poses.len() != self.gripper.len() {
            return Err(WarpError::BadSegment { poses: self.poses.len(), gripper: self.gripper.len() });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Inclusive sub-range `[from, to]`.
    pub fn slice(&self, from: usize, to: usize) -> Self {
        TrajectorySegment { poses: self.poses[from..=to].to_vec(), gripper: self.gripper[from..=to].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WarpError {
    #[error("old chord is degenerate ({old:.3e} m) but the new chord is {new:.3e} m")]
    DegenerateChord { old: f64, new: f64 },
    #[error("keypose lists are inconsistent: {0}")]
    KeyposeMismatch(String),
    #[error("segment needs >= 2 poses with matching gripper commands (got {poses} poses, {gripper} commands)")]
    BadSegment { poses: usize, gripper: usize },
}

/// Smallest rotation taking unit vector `from` onto unit vector `to`.
fn minimal_rotation<T: Real>(from: &Vec3<T>, to: &Vec3<T>) -> Rotation<T> {
    let axis = from.cross(to);
    let sin = axis.norm();
    let cos = from.dot(to);
    if sin > T::lit(1e-12) {
        return Rotation::from_axis_angle(&axis, sin.atan2(cos));
    }
    if cos > T::zero() {
        return Rotation::identity();
    }
    // antiparallel: any perpendicular axis works, the free angle is re-solved later
    let helper = if from.z().abs() < T::lit(0.9) { Vec3::unit_z() } else { Vec3::unit_x() };
    Rotation::from_axis_angle(&from.cross(&helper), T::PI())
}

/// Coefficients `(a, b)` of `f(phi) = a cos(phi) + b sin(phi) + c` where
/// `f(phi) = e^T Rot(axis, phi) w` (Rodrigues expanded).
fn harmonic_coeffs<T: Real>(axis: &Vec3<T>, w: &Vec3<T>, e: &Vec3<T>) -> (T, T) {
    let along = axis.dot(w);
    let a = e.dot(w) - along * axis.dot(e);
    let b = e.dot(&axis.cross(w));
    (a, b)
}

/// Endpoint-aligning warp transform.
///
/// Maps `old_start -> new_start` and `old_end -> new_end` (positions only)
/// with uniform scale `|new chord| / |old chord|`, and picks the rotation
/// about the new chord that maximizes `z^T R z`. When the chord is vertical
/// the objective is flat and the smallest total rotation is taken instead.
///
/// Degenerate inputs: both chords shorter than [`CHORD_EPS`] give a pure
/// translation aligning the starts; a collapsed new chord gives identity
/// rotation with the scale floored at machine epsilon.
pub fn compute_warp<T: Real>(
    old_start: &Pose<T>,
    old_end: &Pose<T>,
    new_start: &Pose<T>,
    new_end: &Pose<T>,
) -> Result<RigidTransform<T>, WarpError> {
    let eps = T::lit(CHORD_EPS);
    let u = old_end.position - old_start.position;
    let v = new_end.position - new_start.position;
    let (lu, lv) = (u.norm(), v.norm());

    if lu <= eps {
        if lv <= eps {
            return Ok(RigidTransform::translation(new_start.position - old_start.position));
        }
        return Err(WarpError::DegenerateChord { old: lu.to_f64_lossy(), new: lv.to_f64_lossy() });
    }
    if lv <= eps {
        let scale = (lv / lu).max(T::epsilon());
        return Ok(RigidTransform {
            rotation: Rotation::identity(),
            translation: new_start.position - old_start.position.scale(scale),
            scale,
        });
    }

    let (u_hat, v_hat) = (u.scale(T::one() / lu), v.scale(T::one() / lv));
    let base = minimal_rotation(&u_hat, &v_hat);
    let z = Vec3::unit_z();

    let (a, b) = harmonic_coeffs(&v_hat, &base.rotate(&z), &z);
    let flat = T::lit(1e-12);
    let phi = if (a * a + b * b).sqrt() > flat {
        b.atan2(a)
    } else {
        // maximize trace(Rot(v, phi) * base), i.e. minimize the rotation angle
        let (mut ta, mut tb) = (T::zero(), T::zero());
        for e in [Vec3::unit_x(), Vec3::unit_y(), Vec3::unit_z()] {
            let (ai, bi) = harmonic_coeffs(&v_hat, &base.rotate(&e), &e);
            ta = ta + ai;
            tb = tb + bi;
        }
        if (ta * ta + tb * tb).sqrt() > flat {
            tb.atan2(ta)
        } else {
            T::zero()
        }
    };

    let rotation = Rotation::from_axis_angle(&v_hat, phi).compose(&base);
    let scale = lv / lu;
    let translation = new_start.position - rotation.rotate(&old_start.position).scale(scale);
    Ok(RigidTransform { rotation, translation, scale })
}

/// Maps every position through `t`; rotations and gripper commands are kept.
pub fn warp_positions<T: Real>(seg: &TrajectorySegment<T>, t: &RigidTransform<T>) -> TrajectorySegment<T> {
    TrajectorySegment {
        poses: seg.poses.iter().map(|p| Pose::new(t.apply_point(&p.position), p.rotation)).collect(),
        gripper: seg.gripper.clone(),
    }
}

/// Re-orients a segment so its endpoint rotations become `new_start_rot` and
/// `new_end_rot`. The per-step correction is the slerp between the two
/// endpoint delta rotations, applied on the left of the recorded rotation.
pub fn warp_rotations<T: Real>(
    seg: &TrajectorySegment<T>,
    new_start_rot: &Rotation<T>,
    new_end_rot: &Rotation<T>,
) -> TrajectorySegment<T> {
    let n = seg.poses.len();
    let mut out = seg.clone();
    if n == 0 {
        return out;
    }
    let delta_start = new_start_rot.compose(&seg.poses[0].rotation.inverse());
    let delta_end = new_end_rot.compose(&seg.poses[n - 1].rotation.inverse());
    let span = T::from_usize(n.saturating_sub(1).max(1)).unwrap();
    for (i, pose) in out.poses.iter_mut().enumerate() {
        let s = T::from_usize(i).unwrap() / span;
        let delta = delta_start.slerp(&delta_end, s);
        pose.rotation = delta.compose(&pose.rotation);
    }
    out.poses[0].rotation = *new_start_rot;
    if n > 1 {
        out.poses[n - 1].rotation = *new_end_rot;
    }
    out
}

/// Warps one segment onto new endpoint poses (positions and rotations).
/// Endpoints of the result are exactly `new_start` and `new_end`.
pub fn warp_segment<T: Real>(
    seg: &TrajectorySegment<T>,
    new_start: &Pose<T>,
    new_end: &Pose<T>,
) -> Result<TrajectorySegment<T>, WarpError> {
    seg.validate()?;
    let last = seg.poses.len() - 1;
    let t = compute_warp(&seg.poses[0], &seg.poses[last], new_start, new_end)?;
    let mut out = warp_rotations(&warp_positions(seg, &t), &new_start.rotation, &new_end.rotation);
    out.poses[0] = *new_start;
    out.poses[last] = *new_end;
    Ok(out)
}

/// Piecewise warp of a whole demonstration through matched keypose lists.
///
/// Each span between consecutive keyposes is warped independently; shared
/// keypose timesteps take the new keypose exactly, so neighbouring segments
/// agree bit for bit. The output has one pose per demo timestep.
pub fn warp_trajectory_by_keyposes(
    demo: &Demonstration,
    old_keyposes: &[(usize, Pose<f64>)],
    new_keyposes: &[(usize, Pose<f64>)],
) -> Result<TrajectorySegment<f64>, WarpError> {
    let mismatch = |m: String| Err(WarpError::KeyposeMismatch(m));
    if old_keyposes.len() != new_keyposes.len() {
        return mismatch(format!("{} old vs {} new keyposes", old_keyposes.len(), new_keyposes.len()));
    }
    if old_keyposes.len() < 2 {
        return mismatch("need at least two keyposes".into());
    }
    let last_t = demo.last_timestep();
    for (i, ((to, _), (tn, _))) in old_keyposes.iter().zip(new_keyposes).enumerate() {
        if to != tn {
            return mismatch(format!("keypose {i}: old timestep {to} != new timestep {tn}"));
        }
        if *to > last_t {
            return mismatch(format!("keypose {i}: timestep {to} beyond demo end {last_t}"));
        }
        if i > 0 && old_keyposes[i - 1].0 >= *to {
            return mismatch(format!("timesteps not strictly increasing at keypose {i}"));
        }
    }
    if old_keyposes[0].0 != 0 || old_keyposes[old_keyposes.len() - 1].0 != last_t {
        return mismatch(format!("keyposes must start at 0 and end at {last_t}"));
    }

    let full = demo.trajectory();
    full.validate()?;
    let mut out = full.clone();
    for (olds, news) in old_keyposes.windows(2).zip(new_keyposes.windows(2)) {
        let (t0, t1) = (olds[0].0, olds[1].0);
        let mut seg = full.slice(t0, t1);
        // warp relative to the keypose poses as listed
        seg.poses[0] = olds[0].1;
        let last = seg.poses.len() - 1;
        seg.poses[last] = olds[1].1;
        let warped = warp_segment(&seg, &news[0].1, &news[1].1)?;
        out.poses[t0..=t1].copy_from_slice(&warped.poses);
    }
    Ok(out)
}
