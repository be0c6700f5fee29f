//! Demonstration augmentation: keypose annotation and retargeting, piecewise
//! trajectory warping, a Thompson-sampling bandit over annotations, a
//! kinematic task world, and a feedforward/feedback ensembling controller.

pub mod annotation;
pub mod bandit;
pub mod campaign;
pub mod demo;
pub mod ensemble;
pub mod gateway;
pub mod geometry;
pub mod prompts;
pub mod retargeting;
pub mod scalar;
pub mod seed;
pub mod simworld;
pub mod warping;

pub use scalar::Real;

pub type Vec3 = geometry::Vec3<f64>;
pub type Rotation = geometry::Rotation<f64>;
pub type Pose = geometry::Pose<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
