//! Annotation, retargeting and warping glued into one call per rollout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    annotate_demo, scripted_annotate, AnnotateOptions, Annotation, AnnotationError, TaskDescription,
};
use crate::demo::Demonstration;
use crate::gateway::{GatewayClient, GatewayError};
use crate::retargeting::{
    build_request, retarget, scripted_retarget, RetargetError, RetargetOptions, SceneObservation,
};
use crate::simworld::{home_rotation, TaskKind};
use crate::warping::{warp_trajectory_by_keyposes, TrajectorySegment, WarpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Scripted,
    Llm,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("llm mode selected but no gateway is configured")]
    NoGateway,
}

impl PipelineError {
    /// The gateway gave up; the campaign must stop rather than count a
    /// failed rollout.
    pub fn gateway(&self) -> Option<&GatewayError> {
        match self {
            PipelineError::Annotation(AnnotationError::Gateway(e))
            | PipelineError::Retarget(RetargetError::Gateway(e)) => Some(e),
            _ => None,
        }
    }
}

/// Produces an annotation of `demo` with the given id.
pub fn create_annotation(
    mode: Mode,
    demo: &Demonstration,
    kind: TaskKind,
    gateway: Option<&GatewayClient>,
    opts: &AnnotateOptions,
    id: &str,
) -> Result<Annotation, PipelineError> {
    match mode {
        Mode::Scripted => Ok(Annotation { id: id.to_string(), ..scripted_annotate(demo, kind) }),
        Mode::Llm => {
            let gw = gateway.ok_or(PipelineError::NoGateway)?;
            let task = TaskDescription::for_task(kind);
            Ok(annotate_demo(gw, demo, &home_rotation(), &task, opts, id)?.annotation)
        }
    }
}

/// Retargets `ann` (recorded on `source`) to `scene` and warps the source
/// trajectory through the new keyposes.
#[allow(clippy::too_many_arguments)]
pub fn build_trajectory(
    mode: Mode,
    ann: &Annotation,
    source: &Demonstration,
    scene: &SceneObservation,
    noise_std: f64,
    rng: &mut impl Rng,
    gateway: Option<&GatewayClient>,
    opts: &RetargetOptions,
) -> Result<TrajectorySegment, PipelineError> {
    let keyposes = match mode {
        Mode::Scripted => scripted_retarget(ann, scene, &source.scene, noise_std, rng)?,
        Mode::Llm => {
            let gw = gateway.ok_or(PipelineError::NoGateway)?;
            let req = build_request(ann, &TaskDescription::for_task(source.task), scene);
            retarget(gw, &req, opts)?.keyposes
        }
    };
    let new: Vec<_> = keyposes.iter().map(|k| (k.t, k.pose)).collect();
    Ok(warp_trajectory_by_keyposes(source, &ann.keypose_pairs(), &new)?)
}
