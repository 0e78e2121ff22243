//! Ball sparse attention for unordered point sets.
//!
//! Points are ordered by a ball tree so that every leaf ("ball") is a
//! contiguous range of the sequence. Three attention branches then run over
//! that ordering and are fused with per-head sigmoid gates:
//!
//! * ball attention: dense attention inside each ball,
//! * compression: attention against block-pooled coarse keys/values,
//! * selection: attention against the top-k key blocks, chosen per query
//!   group from coarse similarity scores.
//!
//! Every differentiable operation ships with an exact vector-Jacobian
//! product so small models can be trained on CPU, and the [`oracle`] module
//! carries independent reference implementations used to check them.

pub mod attn;
pub mod branches;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
mod error;
pub mod geom;
pub mod layer;
pub mod model;
pub mod oracle;
pub mod real;
pub mod suite;
pub mod train;

pub use config::{BranchSet, BsaConfig, PhiKind, Variant};
pub use cost::{flops_bsa, flops_full, CostReport};
pub use error::{BsaError, Result};
pub use geom::{build_ball_tree, permute_features, unpermute_features, BallTree, PointCloud};
pub use layer::{AttentionWorkspace, GateParams, LayerParams};
pub use model::{model_forward, Model, ModelConfig, ModelParams};
pub use real::{Precision, Real};
