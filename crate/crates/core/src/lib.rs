//! Desk-scale pretraining objective study: a small transformer trained with
//! causal (CLM) or masked (MLM) language modelling, biphasic CLM→MLM runs,
//! continued pretraining, and a fine-tuning/evaluation harness for
//! classification, tagging, extractive QA and retrieval.
//!
//! All arithmetic is `f64` and every run is a deterministic function of its
//! configuration and seeds.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod runner;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{forward, init_params, AttentionMode, ModelConfig, Parameters};
pub use objectives::{LmBatch, MaskingConfig, MaskingPlan, Objective};
pub use optim::{AdamWConfig, AdamWState, WsdSchedule};
pub use tape::{grad_check, grad_check_detailed, grad_check_many, GradCheck, Tape, Var, IGNORE_INDEX};
pub use tasks::{Task, TaskExample, TaskSplits};
pub use tensor::Tensor;
