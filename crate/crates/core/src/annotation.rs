//! Turning a demonstration plus a short task description into a reusable
//! annotation: keyposes, the objects each keypose relates to, and a processed
//! text description of the demo.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::demo::{Demonstration, Gripper};
use crate::gateway::{GatewayClient, GatewayError, ANNOTATION_TEMPERATURE};
use crate::geometry::format_pose;
use crate::simworld::TaskKind;
use crate::{prompts, Pose, Rotation, Vec3};

/// Keypose anchoring radius: an entity must be this close to the
/// end-effector, and this close to where it started, to anchor a keypose.
pub const ANCHOR_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("demonstration has no timesteps")]
    EmptyDemo,
    #[error("task description is empty")]
    EmptyTask,
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("annotation failed after {attempts} attempts: {last}")]
    AnnotationFailed { attempts: u32, last: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskDescription(String);

impl TaskDescription {
    pub fn new(text: impl Into<String>) -> Result<Self, AnnotationError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(AnnotationError::EmptyTask);
        }
        Ok(TaskDescription(text))
    }

    pub fn for_task(kind: TaskKind) -> Self {
        TaskDescription(kind.description().to_string())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledRow {
    pub t: usize,
    pub robot: String,
    pub gripper: Gripper,
    pub objects: Vec<(String, String)>,
}

impl SampledRow {
    pub fn render(&self) -> String {
        let gripper = match self.gripper {
            Gripper::Open => "open",
            Gripper::Closed => "closed",
        };
        let mut s = format!("t={}: robot {} gripper={}", self.t, self.robot, gripper);
        for (id, pose) in &self.objects {
            s.push_str(&format!("; {id} {pose}"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub rows: Vec<SampledRow>,
    pub first_image_ref: Option<String>,
    pub final_image_ref: Option<String>,
    pub home_rotation: Rotation,
    pub last_timestep: usize,
}

impl DemoSummary {
    pub fn timesteps(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn render(&self) -> String {
        self.rows.iter().map(SampledRow::render).collect::<Vec<_>>().join("\n")
    }
}

fn sample_row(demo: &Demonstration, t: usize, home: &Rotation) -> SampledRow {
    let obs = &demo.observations[t];
    SampledRow {
        t,
        robot: format_pose(&obs.robot, Some(home)),
        gripper: demo.gripper_command(t),
        objects: obs.objects.iter().map(|(k, p)| (k.clone(), format_pose(p, None))).collect(),
    }
}

/// Whether `rest` splits into gaps that all lie in `[lo, hi]`.
pub fn band_reachable(rest: usize, lo: usize, hi: usize) -> bool {
    rest == 0 || rest.div_ceil(hi) <= rest / lo
}

/// Sampling schedule: starts at 0, ends at `last`, with gaps in
/// `[cadence - jitter, cadence + jitter]`. Gaps are drawn uniformly among
/// those that keep the remainder reachable; when no split exists the final
/// gap falls outside the band.
pub fn sample_timesteps(last: usize, cadence: usize, jitter: usize, rng: &mut impl Rng) -> Vec<usize> {
    let lo = cadence.saturating_sub(jitter).max(1);
    let hi = cadence + jitter;
    let mut out = vec![0];
    let mut t = 0;
    while t < last {
        let rest = last - t;
        let ok: Vec<usize> = (lo..=hi.min(rest)).filter(|&g| band_reachable(rest - g, lo, hi)).collect();
        let gap = if ok.is_empty() { rest } else { ok[rng.random_range(0..ok.len())] };
        t += gap;
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    pub cadence: usize,
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions { cadence: 5, jitter: 2, seed: 0 }
    }
}

/// Downsamples a demo into text rows. Robot rotations are reported relative
/// to `home`.
pub fn summarize_demo(
    demo: &Demonstration,
    opts: &SummaryOptions,
    home: &Rotation,
) -> Result<DemoSummary, AnnotationError> {
    if demo.is_empty() {
        return Err(AnnotationError::EmptyDemo);
    }
    assert!(opts.cadence >= 1 && opts.jitter < opts.cadence, "need cadence >= 1 and jitter < cadence");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let last = demo.last_timestep();
    let rows = sample_timesteps(last, opts.cadence, opts.jitter, &mut rng)
        .into_iter()
        .map(|t| sample_row(demo, t, home))
        .collect();
    Ok(DemoSummary { rows, first_image_ref: None, final_image_ref: None, home_rotation: *home, last_timestep: last })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypose {
    pub t: usize,
    pub pose: Pose,
    pub gripper: Gripper,
    pub relevant_objects: Vec<String>,
    pub relation_note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CreatedBy {
    Scripted,
    Llm { model: String },
}

/// Serialized keypose. Millimeter/degree fields are for readers; `pose`
/// carries the exact value and wins on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KeyposeRecord {
    t: usize,
    pos_mm: [f64; 3],
    euler_deg: [f64; 3],
    gripper: Gripper,
    #[serde(default)]
    objects: Vec<String>,
    #[serde(default)]
    note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    source_demo_id: String,
    created_by: CreatedBy,
    description_text: String,
    home_rotation: Rotation,
    keyposes: Vec<KeyposeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "AnnotationRecord", from = "AnnotationRecord")]
pub struct Annotation {
    pub id: String,
    pub source_demo_id: String,
    pub created_by: CreatedBy,
    pub description_text: String,
    /// Reference for the relative rotations in the text fields.
    pub home_rotation: Rotation,
    pub keyposes: Vec<Keypose>,
}

/// Millimeters and home-relative degrees.
pub fn pose_to_text_fields(pose: &Pose, home: &Rotation) -> ([f64; 3], [f64; 3]) {
    let rel = crate::geometry::relative_rotation_from_home(&pose.rotation, home);
    (pose.position.0.map(|v| v * 1000.0), rel.euler_deg())
}

pub fn pose_from_text_fields(pos_mm: [f64; 3], euler_deg: [f64; 3], home: &Rotation) -> Pose {
    Pose::new(crate::geometry::Vec3(pos_mm.map(|v| v / 1000.0)), home.compose(&Rotation::from_euler_deg(euler_deg)))
}

impl From<Annotation> for AnnotationRecord {
    fn from(a: Annotation) -> Self {
        let home = a.home_rotation;
        AnnotationRecord {
            id: a.id,
            source_demo_id: a.source_demo_id,
            created_by: a.created_by,
            description_text: a.description_text,
            home_rotation: home,
            keyposes: a
                .keyposes
                .into_iter()
                .map(|k| {
                    let (pos_mm, euler_deg) = pose_to_text_fields(&k.pose, &home);
                    KeyposeRecord {
                        t: k.t,
                        pos_mm,
                        euler_deg,
                        gripper: k.gripper,
                        objects: k.relevant_objects,
                        note: k.relation_note,
                        pose: Some(k.pose),
                    }
                })
                .collect(),
        }
    }
}

impl From<AnnotationRecord> for Annotation {
    fn from(r: AnnotationRecord) -> Self {
        let home = r.home_rotation;
        Annotation {
            id: r.id,
            source_demo_id: r.source_demo_id,
            created_by: r.created_by,
            description_text: r.description_text,
            home_rotation: home,
            keyposes: r
                .keyposes
                .into_iter()
                .map(|k| Keypose {
                    t: k.t,
                    pose: k.pose.unwrap_or_else(|| pose_from_text_fields(k.pos_mm, k.euler_deg, &home)),
                    gripper: k.gripper,
                    relevant_objects: k.objects,
                    relation_note: k.note,
                })
                .collect(),
        }
    }
}

impl Annotation {
    pub fn timesteps(&self) -> Vec<usize> {
        self.keyposes.iter().map(|k| k.t).collect()
    }

    /// `(t, pose)` pairs for warping.
    pub fn keypose_pairs(&self) -> Vec<(usize, Pose)> {
        self.keyposes.iter().map(|k| (k.t, k.pose)).collect()
    }

    /// Sorted, strictly increasing, starting at 0 and ending at `last`.
    pub fn check_invariants(&self, last: usize) -> Result<(), String> {
        let ts = self.timesteps();
        if ts.first() != Some(&0) || ts.last() != Some(&last) {
            return Err(format!("keyposes must span 0..={last}, got {ts:?}"));
        }
        if ts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("keypose timesteps not strictly increasing: {ts:?}"));
        }
        Ok(())
    }
}

static KP_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<kp t=(\d+)[^>]*>").expect("valid regex"));

pub fn keypose_marker(t: usize, pose: &Pose, home: &Rotation) -> String {
    format!("<kp t={t} {}>", format_pose(pose, Some(home)))
}

/// Overwrites every keypose with the recorded robot pose, in both the list
/// and the description text, and inserts the endpoints when missing.
pub fn repair_annotation(raw: &Annotation, demo: &Demonstration) -> Annotation {
    let last = demo.last_timestep();
    let home = raw.home_rotation;
    let mut kps: Vec<Keypose> = raw.keyposes.iter().filter(|k| k.t <= last).cloned().collect();
    kps.sort_by_key(|k| k.t);
    kps.dedup_by_key(|k| k.t);

    let mut appended = Vec::new();
    for (t, note) in [(0, "initial pose"), (last, "final pose")] {
        if !kps.iter().any(|k| k.t == t) {
            kps.push(Keypose {
                t,
                pose: *demo.robot_pose(t),
                gripper: demo.gripper_command(t),
                relevant_objects: Vec::new(),
                relation_note: note.to_string(),
            });
            appended.push((t, note));
        }
    }
    kps.sort_by_key(|k| k.t);
    for k in &mut kps {
        k.pose = *demo.robot_pose(k.t);
        k.gripper = demo.gripper_command(k.t);
    }

    let mut text = KP_MARKER
        .replace_all(&raw.description_text, |caps: &regex::Captures<'_>| match caps[1].parse::<usize>() {
            Ok(t) if t <= last => keypose_marker(t, demo.robot_pose(t), &home),
            _ => caps[0].to_string(),
        })
        .into_owned();
    for (t, note) in appended {
        text.push_str(&format!("\nThe {note} is {}.", keypose_marker(t, demo.robot_pose(t), &home)));
    }

    Annotation { keyposes: kps, description_text: text, ..raw.clone() }
}

/// Entity anchoring a keypose: the closest entity to the end-effector that is
/// not the object carried into the keypose and has not been moved far from
/// where it started.
fn anchor_entity(demo: &Demonstration, t: usize) -> Option<(String, Vec3)> {
    let obs = &demo.observations[t];
    let held_before = if t == 0 { None } else { demo.observations[t - 1].attached.as_deref() };
    let ee = obs.robot.position;
    obs.objects
        .iter()
        .filter(|(id, _)| Some(id.as_str()) != held_before)
        .filter(|(id, p)| {
            demo.scene.objects.get(*id).is_some_and(|p0| p0.position.distance(&p.position) <= ANCHOR_RADIUS)
        })
        .map(|(id, p)| (id, p.position, p.position.distance(&ee)))
        .filter(|(_, _, d)| *d <= ANCHOR_RADIUS)
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .map(|(id, p, _)| (id.clone(), ee - p))
}

/// Deterministic stand-in for the model: keyposes at the endpoints and at
/// every gripper transition, each anchored to a nearby unmoved entity.
pub fn scripted_annotate(demo: &Demonstration, kind: TaskKind) -> Annotation {
    let last = demo.last_timestep();
    let home = demo.robot_pose(0).rotation;
    let mut ts: BTreeSet<usize> = demo.gripper_transitions().into_iter().collect();
    ts.insert(0);
    ts.insert(last);

    let mut lines = vec![format!("Task: {}", kind.description())];
    let keyposes: Vec<Keypose> = ts
        .into_iter()
        .map(|t| {
            let pose = *demo.robot_pose(t);
            let gripper = demo.gripper_command(t);
            let (objects, note) = match anchor_entity(demo, t) {
                Some((id, off)) => {
                    let off_mm = off.0.map(|v| v * 1000.0);
                    let note = format!("offset_mm=[{:.3}, {:.3}, {:.3}] from {id}", off_mm[0], off_mm[1], off_mm[2]);
                    (vec![id], note)
                }
                None => (Vec::new(), "no nearby object; keep this pose".to_string()),
            };
            let action = match (t, gripper) {
                (0, _) => "start".to_string(),
                (t, _) if t == last => "finish".to_string(),
                (_, Gripper::Closed) => "close the gripper".to_string(),
                (_, Gripper::Open) => "open the gripper".to_string(),
            };
            lines.push(format!("At {} {action} ({note}).", keypose_marker(t, &pose, &home)));
            Keypose { t, pose, gripper, relevant_objects: objects, relation_note: note }
        })
        .collect();

    Annotation {
        id: format!("{}-scripted", demo.id),
        source_demo_id: demo.id.clone(),
        created_by: CreatedBy::Scripted,
        description_text: lines.join("\n"),
        home_rotation: home,
        keyposes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateOptions {
    pub summary: SummaryOptions,
    pub max_frames: usize,
    /// Total attempts, each in a fresh session.
    pub max_attempts: u32,
    pub temperature: f64,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            summary: SummaryOptions::default(),
            max_frames: 8,
            max_attempts: 3,
            temperature: ANNOTATION_TEMPERATURE,
        }
    }
}

static TIMESTEPS_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?mi)^\s*TIMESTEPS\s*:(.*)$").expect("valid regex"));
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(\.\d+)?").expect("valid regex"));

/// Parses a view-frame answer: a `TIMESTEPS:` line if present, else every
/// integer in the text.
pub fn parse_viewframes(text: &str, last: usize, cap: usize) -> Result<Vec<usize>, AnnotationError> {
    let body = TIMESTEPS_LINE.captures(text).map(|c| c.get(1).expect("group").as_str()).unwrap_or(text);
    let mut ts = BTreeSet::new();
    for m in INTEGER.find_iter(body) {
        let v: i64 = m
            .as_str()
            .parse()
            .map_err(|_| AnnotationError::MalformedResponse(format!("non-integer timestep `{}`", m.as_str())))?;
        if v < 0 || v as u64 > last as u64 {
            return Err(AnnotationError::MalformedResponse(format!("timestep {v} outside 0..={last}")));
        }
        ts.insert(v as usize);
    }
    if ts.is_empty() {
        return Err(AnnotationError::MalformedResponse("no timesteps found".into()));
    }
    Ok(ts.into_iter().take(cap).collect())
}

fn retry<T>(attempts: u32, mut f: impl FnMut() -> Result<T, AnnotationError>) -> Result<(T, u32), AnnotationError> {
    let mut last = String::new();
    for i in 0..attempts {
        match f() {
            Ok(v) => return Ok((v, i)),
            Err(AnnotationError::MalformedResponse(m)) => last = m,
            Err(e) => return Err(e),
        }
    }
    Err(AnnotationError::AnnotationFailed { attempts, last })
}

fn viewframes_prompt(summary: &DemoSummary, task: &TaskDescription, opts: &AnnotateOptions) -> String {
    prompts::VIEWFRAMES.render(&[
        ("task", task.text()),
        ("cadence", &opts.summary.cadence.to_string()),
        ("last_t", &summary.last_timestep.to_string()),
        ("summary", &summary.render()),
        ("max_frames", &opts.max_frames.to_string()),
    ])
}

fn try_select_viewframes(
    gateway: &GatewayClient,
    summary: &DemoSummary,
    task: &TaskDescription,
    opts: &AnnotateOptions,
) -> Result<Vec<usize>, AnnotationError> {
    let reply = gateway.fresh_session().ask(&viewframes_prompt(summary, task, opts), opts.temperature)?;
    parse_viewframes(&reply.text, summary.last_timestep, opts.max_frames)
}

/// Asks the model which timesteps deserve a detailed look.
pub fn select_viewframes(
    gateway: &GatewayClient,
    summary: &DemoSummary,
    task: &TaskDescription,
    opts: &AnnotateOptions,
) -> Result<Vec<usize>, AnnotationError> {
    if summary.rows.is_empty() {
        return Err(AnnotationError::EmptyDemo);
    }
    retry(opts.max_attempts, || try_select_viewframes(gateway, summary, task, opts)).map(|(v, _)| v)
}

#[derive(Debug, Deserialize)]
struct LlmKeypose {
    t: i64,
    pos_mm: [f64; 3],
    euler_deg: [f64; 3],
    #[serde(default)]
    objects: Vec<String>,
    #[serde(default)]
    note: String,
}

#[derive(Debug, Deserialize)]
struct LlmAnnotation {
    description: String,
    keyposes: Vec<LlmKeypose>,
}

/// The outermost `{...}` span, tolerating code fences and chatter.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Parses an annotation reply into an unrepaired annotation.
pub fn parse_annotation_response(
    text: &str,
    demo: &Demonstration,
    home: &Rotation,
    id: &str,
    model: &str,
) -> Result<Annotation, AnnotationError> {
    let json = extract_json_object(text).ok_or_else(|| AnnotationError::MalformedResponse("no JSON object".into()))?;
    let parsed: LlmAnnotation = serde_json::from_str(json)
        .map_err(|e| AnnotationError::MalformedResponse(format!("bad annotation JSON: {e}")))?;
    let last = demo.last_timestep();
    let mut keyposes = Vec::with_capacity(parsed.keyposes.len());
    for k in parsed.keyposes {
        if k.t < 0 || k.t as u64 > last as u64 {
            return Err(AnnotationError::MalformedResponse(format!("keypose timestep {} outside 0..={last}", k.t)));
        }
        if !k.pos_mm.iter().chain(&k.euler_deg).all(|v| v.is_finite()) {
            return Err(AnnotationError::MalformedResponse(format!("non-finite pose at t={}", k.t)));
        }
        let t = k.t as usize;
        keyposes.push(Keypose {
            t,
            pose: pose_from_text_fields(k.pos_mm, k.euler_deg, home),
            gripper: demo.gripper_command(t),
            relevant_objects: k.objects,
            relation_note: k.note,
        });
    }
    Ok(Annotation {
        id: id.to_string(),
        source_demo_id: demo.id.clone(),
        created_by: CreatedBy::Llm { model: model.to_string() },
        description_text: parsed.description,
        home_rotation: *home,
        keyposes,
    })
}

fn frames_text(demo: &Demonstration, frames: &[usize], home: &Rotation) -> String {
    frames.iter().map(|&t| sample_row(demo, t, home).render()).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotateOutcome {
    pub annotation: Annotation,
    /// Failed attempts before the accepted one.
    pub retries: u32,
}

fn try_annotate(
    gateway: &GatewayClient,
    demo: &Demonstration,
    summary: &DemoSummary,
    frames: &[usize],
    task: &TaskDescription,
    opts: &AnnotateOptions,
    id: &str,
) -> Result<Annotation, AnnotationError> {
    let home = summary.home_rotation;
    let prompt = prompts::ANNOTATE.render(&[
        ("task", task.text()),
        ("last_t", &summary.last_timestep.to_string()),
        ("summary", &summary.render()),
        ("frames", &frames_text(demo, frames, &home)),
    ]);
    let reply = gateway.fresh_session().ask(&prompt, opts.temperature)?;
    let raw = parse_annotation_response(&reply.text, demo, &home, id, &gateway.defaults.model)?;
    Ok(repair_annotation(&raw, demo))
}

/// Requests an annotation for the given view frames, restarting in a fresh
/// session whenever the reply cannot be parsed or is out of range.
pub fn annotate(
    gateway: &GatewayClient,
    demo: &Demonstration,
    summary: &DemoSummary,
    frames: &[usize],
    task: &TaskDescription,
    opts: &AnnotateOptions,
    id: &str,
) -> Result<AnnotateOutcome, AnnotationError> {
    let last = demo.last_timestep();
    if let Some(&bad) = frames.iter().find(|&&t| t > last) {
        return Err(AnnotationError::MalformedResponse(format!("frame {bad} outside 0..={last}")));
    }
    retry(opts.max_attempts, || try_annotate(gateway, demo, summary, frames, task, opts, id))
        .map(|(annotation, retries)| AnnotateOutcome { annotation, retries })
}

/// Full pipeline: summary, view-frame selection, annotation. A malformed
/// reply at either stage discards the attempt and restarts from scratch.
pub fn annotate_demo(
    gateway: &GatewayClient,
    demo: &Demonstration,
    home: &Rotation,
    task: &TaskDescription,
    opts: &AnnotateOptions,
    id: &str,
) -> Result<AnnotateOutcome, AnnotationError> {
    let summary = summarize_demo(demo, &opts.summary, home)?;
    retry(opts.max_attempts, || {
        let frames = try_select_viewframes(gateway, &summary, task, opts)?;
        try_annotate(gateway, demo, &summary, &frames, task, opts, id)
    })
    .map(|(annotation, retries)| AnnotateOutcome { annotation, retries })
}

/// Renders an annotation as the JSON reply a well-behaved model would give.
pub fn annotation_reply_json(ann: &Annotation) -> String {
    let kps: Vec<serde_json::Value> = ann
        .keyposes
        .iter()
        .map(|k| {
            let (pos_mm, euler_deg) = pose_to_text_fields(&k.pose, &ann.home_rotation);
            serde_json::json!({"t": k.t, "pos_mm": pos_mm, "euler_deg": euler_deg, "objects": k.relevant_objects, "note": k.relation_note})
        })
        .collect();
    serde_json::json!({"description": ann.description_text, "keyposes": kps}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedTransport, TransportError};
    use crate::simworld::{expert_demo, TaskSpec};
    use proptest::prelude::*;

    fn demo(kind: TaskKind) -> Demonstration {
        expert_demo(&TaskSpec::new(kind), 0).unwrap()
    }

    fn truncated(mut d: Demonstration, len: usize) -> Demonstration {
        d.observations.truncate(len);
        d.actions.truncate(len);
        d
    }

    #[test]
    fn fixed_cadence_sampling() {
        let d = truncated(demo(TaskKind::Stack), 101);
        let home = d.robot_pose(0).rotation;
        let s = summarize_demo(&d, &SummaryOptions { cadence: 5, jitter: 0, seed: 1 }, &home).unwrap();
        assert_eq!(s.timesteps(), (0..=100).step_by(5).collect::<Vec<_>>());
        assert!(s.rows[0].robot.ends_with("euler_deg=[0.00, 0.00, 0.00]"), "{}", s.rows[0].robot);
    }

    #[test]
    fn jittered_gaps_stay_in_band() {
        let d = truncated(demo(TaskKind::Stack), 101);
        let home = d.robot_pose(0).rotation;
        for seed in 0..200 {
            let ts = summarize_demo(&d, &SummaryOptions { cadence: 5, jitter: 2, seed }, &home).unwrap().timesteps();
            assert_eq!((ts[0], *ts.last().unwrap()), (0, 100));
            assert!(ts.windows(2).all(|w| (3..=7).contains(&(w[1] - w[0]))), "{ts:?}");
        }
    }

    #[test]
    fn summary_is_reproducible() {
        let d = demo(TaskKind::Stack);
        let home = d.robot_pose(0).rotation;
        let o = SummaryOptions { seed: 42, ..Default::default() };
        assert_eq!(summarize_demo(&d, &o, &home).unwrap(), summarize_demo(&d, &o, &home).unwrap());
    }

    proptest! {
        #[test]
        fn schedule_band_when_feasible(last in 10usize..400, cadence in 2usize..10, jit in 0usize..9, seed: u64) {
            let jitter = jit % cadence;
            let ts = sample_timesteps(last, cadence, jitter, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(ts[0], 0);
            prop_assert_eq!(*ts.last().unwrap(), last);
            let lo = cadence - jitter;
            let feasible = band_reachable(last, lo.max(1), cadence + jitter);
            if feasible {
                for w in ts.windows(2) {
                    let g = w[1] - w[0];
                    prop_assert!(g >= lo.max(1) && g <= cadence + jitter, "{:?}", ts);
                }
            }
        }
    }

    #[test]
    fn viewframe_parsing() {
        assert_eq!(parse_viewframes("0, 50, 100", 100, 8).unwrap(), vec![0, 50, 100]);
        assert_eq!(parse_viewframes("10,10,20", 100, 8).unwrap(), vec![10, 20]);
        assert_eq!(parse_viewframes("Sure.\nTIMESTEPS: 3, 1\n", 100, 8).unwrap(), vec![1, 3]);
        assert!(matches!(parse_viewframes("0, 50, 9999", 100, 8), Err(AnnotationError::MalformedResponse(_))));
        assert!(matches!(parse_viewframes("none", 100, 8), Err(AnnotationError::MalformedResponse(_))));
        assert!(matches!(parse_viewframes("-3", 100, 8), Err(AnnotationError::MalformedResponse(_))));
        assert!(matches!(parse_viewframes("2.5", 100, 8), Err(AnnotationError::MalformedResponse(_))));
        assert_eq!(parse_viewframes("1 2 3 4 5 6 7 8 9 10", 100, 8).unwrap().len(), 8);
    }

    #[test]
    fn scripted_keypose_counts() {
        let pp = demo(TaskKind::PickPlace);
        assert_eq!(pp.gripper_transitions().len(), 2);
        assert_eq!(scripted_annotate(&pp, TaskKind::PickPlace).keyposes.len(), 4);
        let st = demo(TaskKind::Stack);
        assert_eq!(st.gripper_transitions().len(), 4);
        assert_eq!(scripted_annotate(&st, TaskKind::Stack).keyposes.len(), 6);
        let mut still = truncated(pp.clone(), 10);
        still.validate().unwrap();
        assert!(still.gripper_transitions().is_empty());
        still.id = "still".into();
        assert_eq!(scripted_annotate(&still, TaskKind::PickPlace).keyposes.len(), 2);
    }

    #[test]
    fn scripted_anchors() {
        let pp = demo(TaskKind::PickPlace);
        let ann = scripted_annotate(&pp, TaskKind::PickPlace);
        let anchors: Vec<Vec<String>> = ann.keyposes.iter().map(|k| k.relevant_objects.clone()).collect();
        assert_eq!(anchors, vec![vec![], vec!["green_block".to_string()], vec!["blue_region".to_string()], vec![]]);
        assert_eq!(ann.check_invariants(pp.last_timestep()), Ok(()));
        let st = scripted_annotate(&demo(TaskKind::Stack), TaskKind::Stack);
        let anchors: Vec<Vec<String>> = st.keyposes.iter().map(|k| k.relevant_objects.clone()).collect();
        assert_eq!(anchors[1], vec!["blue_block".to_string()]);
        assert_eq!(anchors[2], vec!["stack_region".to_string()]);
        assert_eq!(anchors[3], vec!["green_block".to_string()]);
        assert_eq!(anchors[4], vec!["stack_region".to_string()]);
    }

    #[test]
    fn repair_replaces_and_inserts() {
        let d = demo(TaskKind::PickPlace);
        let home = d.robot_pose(0).rotation;
        let t = 40;
        let mut off = *d.robot_pose(t);
        off.position += Vec3::new(0.005, 0.0, 0.0);
        let raw = Annotation {
            id: "a".into(),
            source_demo_id: d.id.clone(),
            created_by: CreatedBy::Scripted,
            description_text: format!("go {} then stop", keypose_marker(t, &off, &home)),
            home_rotation: home,
            keyposes: vec![Keypose {
                t,
                pose: off,
                gripper: Gripper::Open,
                relevant_objects: vec![],
                relation_note: String::new(),
            }],
        };
        let rep = repair_annotation(&raw, &d);
        assert_eq!(rep.timesteps(), vec![0, t, d.last_timestep()]);
        assert_eq!(rep.keyposes[1].pose, *d.robot_pose(t));
        assert!(rep.description_text.contains(&keypose_marker(t, d.robot_pose(t), &home)));
        assert!(!rep.description_text.contains(&keypose_marker(t, &off, &home)));
        assert!(rep.description_text.contains(&keypose_marker(
            d.last_timestep(),
            d.robot_pose(d.last_timestep()),
            &home
        )));
        assert_eq!(repair_annotation(&rep, &d), rep);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn repair_is_idempotent_and_valid(
            ts in proptest::collection::vec(0usize..400, 0..8),
            jitter in proptest::collection::vec(-0.01f64..0.01, 8),
            markers in proptest::collection::vec(0usize..500, 0..4),
        ) {
            let d = demo(TaskKind::PickPlace);
            let last = d.last_timestep();
            let home = d.robot_pose(0).rotation;
            let kps = ts.iter().filter(|&&t| t <= last).enumerate().map(|(i, &t)| {
                let mut p = *d.robot_pose(t);
                p.position += Vec3::new(jitter[i % 8], 0.0, 0.0);
                Keypose { t, pose: p, gripper: Gripper::Closed, relevant_objects: vec![], relation_note: "n".into() }
            }).collect();
            let text = markers.iter().map(|t| format!("<kp t={t} pos_mm=[1, 2, 3]>")).collect::<Vec<_>>().join(" ");
            let raw = Annotation { id: "p".into(), source_demo_id: d.id.clone(), created_by: CreatedBy::Scripted,
                description_text: text, home_rotation: home, keyposes: kps };
            let once = repair_annotation(&raw, &d);
            prop_assert_eq!(once.check_invariants(last), Ok(()));
            for k in &once.keyposes {
                prop_assert_eq!(k.pose, *d.robot_pose(k.t));
            }
            prop_assert_eq!(repair_annotation(&once, &d), once);
        }
    }

    #[test]
    fn annotation_json_round_trip() {
        let ann = scripted_annotate(&demo(TaskKind::Stack), TaskKind::Stack);
        let json = serde_json::to_string(&ann).unwrap();
        let back: Annotation = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ann);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let k0 = &v["keyposes"][0];
        assert_eq!(k0["euler_deg"].as_array().unwrap().len(), 3);
        assert!((k0["pos_mm"][0].as_f64().unwrap() - 300.0).abs() < 1e-9);
        assert_eq!(k0["objects"], serde_json::json!([]));
    }

    fn llm_client(replies: Vec<Result<String, TransportError>>) -> GatewayClient {
        GatewayClient::new(ScriptedTransport::queue(replies))
    }

    #[test]
    fn annotate_happy_path_and_retries() {
        let d = demo(TaskKind::PickPlace);
        let home = d.robot_pose(0).rotation;
        let summary = summarize_demo(&d, &SummaryOptions::default(), &home).unwrap();
        let good = annotation_reply_json(&scripted_annotate(&d, TaskKind::PickPlace));
        let task = TaskDescription::for_task(TaskKind::PickPlace);
        let opts = AnnotateOptions::default();

        let gw = llm_client(vec![Ok(good.clone())]);
        let out = annotate(&gw, &d, &summary, &[0, 10], &task, &opts, "x").unwrap();
        assert_eq!(out.retries, 0);
        assert_eq!(out.annotation.keyposes.len(), 4);
        assert_eq!(out.annotation.keyposes[1].relevant_objects, vec!["green_block".to_string()]);

        let gw = llm_client(vec![Ok("nope".into()), Ok("{\"broken\": ".into()), Ok(format!("```json\n{good}\n```"))]);
        let out = annotate(&gw, &d, &summary, &[0], &task, &opts, "x").unwrap();
        assert_eq!(out.retries, 2);
        let sessions: BTreeSet<u64> = gw.audit().entries().iter().map(|e| e.session).collect();
        assert_eq!(sessions.len(), 3);

        let gw = GatewayClient::new(ScriptedTransport::always("garbage"));
        let err = annotate(&gw, &d, &summary, &[0], &task, &opts, "x").unwrap_err();
        assert!(matches!(err, AnnotationError::AnnotationFailed { attempts: 3, .. }));
        assert_eq!(gw.audit().entries().len(), 3);
    }

    #[test]
    fn out_of_range_keypose_is_malformed() {
        let d = demo(TaskKind::PickPlace);
        let home = d.robot_pose(0).rotation;
        let reply = r#"{"description": "x", "keyposes": [{"t": 99999, "pos_mm": [0,0,0], "euler_deg": [0,0,0]}]}"#;
        assert!(matches!(
            parse_annotation_response(reply, &d, &home, "a", "m"),
            Err(AnnotationError::MalformedResponse(_))
        ));
    }

    #[test]
    fn pipeline_uses_distinct_sessions() {
        let d = demo(TaskKind::PickPlace);
        let home = d.robot_pose(0).rotation;
        let good = annotation_reply_json(&scripted_annotate(&d, TaskKind::PickPlace));
        let gw = llm_client(vec![Ok("TIMESTEPS: 0, 9999".into()), Ok("TIMESTEPS: 0, 20".into()), Ok(good)]);
        let task = TaskDescription::for_task(TaskKind::PickPlace);
        let out = annotate_demo(&gw, &d, &home, &task, &AnnotateOptions::default(), "z").unwrap();
        assert_eq!(out.retries, 1);
        let log = gw.audit().entries();
        assert_eq!(log.len(), 3);
        assert!(log[1].session != log[2].session);
        assert!(log[1].request.contains("TIMESTEPS"));
        assert!(log[2].request.contains("Detailed frames"));
    }

    #[test]
    fn gateway_errors_propagate() {
        let d = demo(TaskKind::PickPlace);
        let home = d.robot_pose(0).rotation;
        let gw = GatewayClient::new(ScriptedTransport::responder(|_| Err(TransportError::Auth("no key".into()))));
        let task = TaskDescription::for_task(TaskKind::PickPlace);
        let err = annotate_demo(&gw, &d, &home, &task, &AnnotateOptions::default(), "z").unwrap_err();
        assert!(matches!(err, AnnotationError::Gateway(GatewayError::Auth(_))));
    }

    #[test]
    fn empty_task_rejected() {
        assert_eq!(TaskDescription::new("  "), Err(AnnotationError::EmptyTask));
    }
}
