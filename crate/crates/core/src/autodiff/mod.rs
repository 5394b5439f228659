//! Minimal reverse-mode differentiation substrate: tape, parameters, Adam,
//! checkpoints.

pub mod checkpoint;
mod graph;
mod params;

pub use graph::{log_sigmoid, log_softmax_rows, sigmoid, softmax_rows, CustomOp, Graph, Var};
pub use params::{normal, xavier_uniform, AdamConfig, Bound, Param, ParamId, ParamStore};

#[cfg(test)]
mod tests;
