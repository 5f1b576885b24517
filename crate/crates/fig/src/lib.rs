//! Fine-grained graph rationalization.
//!
//! Splits each input graph's node representations into a rationale block and
//! an environment block, then trains the split adversarially: a
//! Transformer-style intervener tries to let the environment change the
//! prediction, while the encoder/augmenter/predictor side learns rationales
//! that keep the prediction stable under such interventions. Two granularity
//! variants are provided: node-level selection (`fig_n`) and virtual-node
//! aggregation (`fig_vn`).
//!
//! Start with the runnable examples, one per capability:
//!
//! ```text
//! cargo run --release -p fig --example gen_dataset
//! cargo run --release -p fig --example grad_check
//! cargo run --release -p fig --example train_fig_n
//! cargo run --release -p fig --example train_fig_vn
//! cargo run --release -p fig --example rationale_recovery
//! cargo run --release -p fig --example export_attention
//! cargo run --release -p fig --example reg_effect
//! ```
//!
//! The same functionality is scriptable through the `fig` binary
//! (`gen-data`, `train`, `eval`, `export-attention`, `grad-check`,
//! `reg-effect`).

pub mod augmenter;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod intervener;
pub mod metrics;
pub mod objective;
pub mod param;
pub mod tensor;
pub mod trainer;

pub use error::{FigError, Result};
