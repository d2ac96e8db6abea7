//! Minimal reverse-mode automatic differentiation for volumetric networks.

pub mod conv;
mod graph;
pub mod resize;

pub use graph::{Gradients, Graph, Var};
