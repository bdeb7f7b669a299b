//! Dense matrix arithmetic with reverse-mode gradients and a
//! finite-difference verification oracle.

pub mod gradcheck;
pub mod mask;
pub mod matrix;
pub mod mlp;
pub mod params;
pub mod scalar;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::AttentionMask;
pub use matrix::Matrix;
pub use mlp::{mlp_forward, Activation, Mlp, MlpLayer};
pub use params::{Init, ParamId, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tape::{Session, Tape, ValueId, LAYER_NORM_EPS};
