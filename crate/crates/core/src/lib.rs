//! Zero-shot grid detector with a fused semantic confidence head.

pub mod anchors;
pub mod assign;
pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod projection;
pub mod prototypes;
pub mod scene;
pub mod semantics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
