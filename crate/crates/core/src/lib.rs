//! Differentiable programming toolkit: computation graphs with forward and
//! reverse mode, checkpointing, second-order products, smoothed operators,
//! soft control flow, chain models, implicit differentiation, Monte-Carlo
//! gradient estimators, ODE adjoints and optimizers.

pub mod autodiff;
pub mod chain;
pub mod checkpoint;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod implicit;
pub mod linalg;
pub mod linear_map;
pub mod numcheck;
pub mod ode;
pub mod optim;
pub mod scalar;
pub mod second_order;
pub mod smooth;
pub mod softprog;
pub mod tape;

pub use error::{Error, Result};
pub use estimators::EstimatorReport;
pub use graph::{Graph, GraphBuilder, Tensor};
