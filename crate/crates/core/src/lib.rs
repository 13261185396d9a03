//! Desk-scale continual segmentation lab.
//!
//! A small frozen vision transformer stands in for a large promptable
//! segmentation backbone. On top of it this crate implements:
//!
//! - [`autograd`]: dense f64 tensors on a tape, reverse-mode gradients, Adam;
//! - [`model`]: patch embedding, encoder with token/adapter hooks, per-patch
//!   mask decoder, and the pretraining loop that produces the frozen weights;
//! - [`losses`]: Dice + pixel cross-entropy mask loss, distillation and
//!   quadratic weight penalties;
//! - [`moda`]: the mixture-of-domain-adapters method — a pool of per-task
//!   bottleneck adapters routed by cosine matching against a learned global
//!   query token;
//! - [`baselines`]: naive sequential tuning, LwF, EWC, ER, and the prompt-pool
//!   methods (L2P, DualPrompt, CodaPrompt) adapted to segmentation;
//! - [`metrics`]: IoU / boundary IoU, the task-by-time metric matrix and its
//!   last/average/forgetting aggregates, query accuracy, silhouette diagnostic;
//! - [`taskgen`]: a deterministic 8-domain procedural benchmark plus the
//!   pretraining mixture that doubles as an out-of-distribution probe.
//!
//! Everything is deterministic given seeds; parallelism only ever spans
//! independent computations (per-sample graphs, disjoint evaluations) and all
//! reductions run in a fixed order.

pub mod autograd;
pub mod baselines;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod moda;
pub mod model;
pub mod rng;
pub mod taskgen;

pub use error::{Error, Result};
