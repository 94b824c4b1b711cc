//! Minimal reverse-mode autodiff and the layers, optimizer and checkpoint
//! format shared by the diarizer and the acoustic models. Everything runs on
//! f64 matrices so finite-difference gradient checks are meaningful.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;

pub use graph::{bce_mean_value, Gradients, Graph, Mat, NodeId};
pub use layers::{
    BlstmStack, BoundParams, Linear, Lstm, ParamBank, ParamIdx, SelfAttentionBlock, Tdnn,
};
pub use optim::{collect_grads, Adam};
