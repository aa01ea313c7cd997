//! Contracting and Lipschitz-bounded robust recurrent deep networks.
//!
//! The crate maps unconstrained parameter vectors to recurrent models that
//! are contracting (or γ-Lipschitz) by construction, together with a REN
//! baseline, empirical verification tools, a small training loop and a
//! timing harness.

pub mod activation;
pub mod arch;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod lipschitz_net;
pub mod lti_param;
pub mod model;
pub mod params;
pub mod r2dn;
pub mod ren;
pub mod scalar;
pub mod train;
pub mod verify;

pub use activation::Activation;
pub use arch::{AnyModel, ModelConfig};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use lipschitz_net::{LipschitzNet, Nonlinearity, PhiConfig, SandwichLayer};
pub use lti_param::{ExplicitLti, LmiKind, LmiSpec, LtiDims};
pub use model::StateSpaceModel;
pub use params::{DirectParams, ParamLayout, TensorSpec};
pub use r2dn::{ExplicitR2dn, R2dnConfig};
pub use ren::{ExplicitRen, RenConfig};
pub use scalar::Scalar;
pub use train::{FitResult, LossHistory, TrainSchedule};

pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type DirectParamsF64 = DirectParams<f64>;
pub type DirectParamsF32 = DirectParams<f32>;
pub type R2dnF64 = ExplicitR2dn<f64>;
pub type R2dnF32 = ExplicitR2dn<f32>;
pub type RenF64 = ExplicitRen<f64>;
pub type RenF32 = ExplicitRen<f32>;
pub type LipschitzNetF64 = LipschitzNet<f64>;
pub type LipschitzNetF32 = LipschitzNet<f32>;
