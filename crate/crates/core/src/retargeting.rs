//! Adapting an annotation's keyposes to a new scene from its initial
//! observation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{extract_json_object, pose_from_text_fields, Annotation, Keypose, TaskDescription};
use crate::gateway::{GatewayClient, GatewayError, RETARGET_TEMPERATURE};
use crate::geometry::format_pose;
use crate::{prompts, Pose, Rotation, Vec3};

/// Initial observation of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub robot_pose: Pose,
    pub objects: BTreeMap<String, Pose>,
    #[serde(default)]
    pub image_refs: Vec<String>,
    #[serde(default)]
    pub task_metadata: BTreeMap<String, String>,
}

impl SceneObservation {
    /// Text block for prompts; robot rotation relative to `home`.
    pub fn render(&self, home: &Rotation) -> String {
        let mut lines = vec![format!("robot {}", format_pose(&self.robot_pose, Some(home)))];
        for (id, p) in &self.objects {
            lines.push(format!("{id} {}", format_pose(p, None)));
        }
        for (k, v) in &self.task_metadata {
            lines.push(format!("{k}: {v}"));
        }
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetargetError {
    #[error("object `{0}` missing from an observation")]
    UnknownObject(String),
    #[error("malformed retarget response: {0}")]
    MalformedResponse(String),
    #[error("retargeting failed after {attempts} attempts: {last}")]
    RetargetFailed { attempts: u32, last: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetRequest {
    pub description_text: String,
    pub task: TaskDescription,
    pub observation: SceneObservation,
    pub keyposes: Vec<Keypose>,
    pub home_rotation: Rotation,
}

pub fn build_request(ann: &Annotation, task: &TaskDescription, obs: &SceneObservation) -> RetargetRequest {
    RetargetRequest {
        description_text: ann.description_text.clone(),
        task: task.clone(),
        observation: obs.clone(),
        keyposes: ann.keyposes.clone(),
        home_rotation: ann.home_rotation,
    }
}

impl RetargetRequest {
    pub fn keyposes_text(&self) -> String {
        self.keyposes
            .iter()
            .map(|k| {
                let gripper = match k.gripper {
                    crate::demo::Gripper::Open => "open",
                    crate::demo::Gripper::Closed => "closed",
                };
                format!(
                    "t={}: {} gripper={} objects=[{}] note: {}",
                    k.t,
                    format_pose(&k.pose, Some(&self.home_rotation)),
                    gripper,
                    k.relevant_objects.join(", "),
                    k.relation_note
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Canonical prompt body.
    pub fn render(&self) -> String {
        prompts::RETARGET.render(&[
            ("task", self.task.text()),
            ("description", &self.description_text),
            ("keyposes", &self.keyposes_text()),
            ("observation", &self.observation.render(&self.home_rotation)),
        ])
    }
}

#[derive(Debug, Deserialize)]
struct ReplyKeypose {
    t: i64,
    pos_mm: [f64; 3],
    euler_deg: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct Reply {
    keyposes: Vec<ReplyKeypose>,
}

/// Parses a retarget reply. Count and timesteps must match the request.
pub fn parse_retarget_response(text: &str, req: &RetargetRequest) -> Result<Vec<Keypose>, RetargetError> {
    let json = extract_json_object(text).ok_or_else(|| RetargetError::MalformedResponse("no JSON object".into()))?;
    let reply: Reply =
        serde_json::from_str(json).map_err(|e| RetargetError::MalformedResponse(format!("bad JSON: {e}")))?;
    if reply.keyposes.len() != req.keyposes.len() {
        return Err(RetargetError::MalformedResponse(format!(
            "expected {} keyposes, got {}",
            req.keyposes.len(),
            reply.keyposes.len()
        )));
    }
    req.keyposes
        .iter()
        .zip(reply.keyposes)
        .map(|(orig, r)| {
            if r.t != orig.t as i64 {
                return Err(RetargetError::MalformedResponse(format!("timestep {} where {} expected", r.t, orig.t)));
            }
            if !r.pos_mm.iter().chain(&r.euler_deg).all(|v| v.is_finite()) {
                return Err(RetargetError::MalformedResponse(format!("non-finite pose at t={}", r.t)));
            }
            Ok(Keypose { pose: pose_from_text_fields(r.pos_mm, r.euler_deg, &req.home_rotation), ..orig.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetargetOptions {
    pub max_attempts: u32,
    pub temperature: f64,
}

impl Default for RetargetOptions {
    fn default() -> Self {
        RetargetOptions { max_attempts: 3, temperature: RETARGET_TEMPERATURE }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetOutcome {
    pub keyposes: Vec<Keypose>,
    pub retries: u32,
}

/// Asks the model for new keyposes, each attempt in a fresh session.
pub fn retarget(
    gateway: &GatewayClient,
    req: &RetargetRequest,
    opts: &RetargetOptions,
) -> Result<RetargetOutcome, RetargetError> {
    let prompt = req.render();
    let mut last = String::new();
    for attempt in 0..opts.max_attempts {
        let reply = gateway.fresh_session().ask(&prompt, opts.temperature)?;
        match parse_retarget_response(&reply.text, req) {
            Ok(keyposes) => return Ok(RetargetOutcome { keyposes, retries: attempt }),
            Err(RetargetError::MalformedResponse(m)) => last = m,
            Err(e) => return Err(e),
        }
    }
    Err(RetargetError::RetargetFailed { attempts: opts.max_attempts, last })
}

/// Deterministic stand-in for the model. Each anchored keypose follows its
/// object: the offset from the object is rotated by the object's yaw change
/// and re-attached at the object's new position. Gaussian noise with
/// per-axis standard deviation `noise_std` (meters) is added to anchored
/// keyposes; unanchored keyposes are returned unchanged.
pub fn scripted_retarget(
    ann: &Annotation,
    obs: &SceneObservation,
    old_obs: &SceneObservation,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Keypose>, RetargetError> {
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("positive std"));
    ann.keyposes
        .iter()
        .map(|k| {
            let Some(id) = k.relevant_objects.first() else { return Ok(k.clone()) };
            let lookup = |o: &SceneObservation| {
                o.objects.get(id).copied().ok_or_else(|| RetargetError::UnknownObject(id.clone()))
            };
            let (new, old) = (lookup(obs)?, lookup(old_obs)?);
            let turn = Rotation::rz(new.rotation.yaw() - old.rotation.yaw());
            let mut position = new.position + turn.rotate(&(k.pose.position - old.position));
            if let Some(n) = &noise {
                position += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
            Ok(Keypose { pose: Pose::new(position, turn.compose(&k.pose.rotation)), ..k.clone() })
        })
        .collect()
}
