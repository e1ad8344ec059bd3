//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! The op set is the closure needed by the hierarchical-attention reader:
//! elementwise add/mul (with scalar broadcast), matmul, relu, log, exp,
//! masked softmax, embedding row gather, sum/mean reduction, concat and row
//! stacking, and transpose. Everything is deterministic: no op consumes
//! randomness, and identical graphs produce bit-identical values and
//! adjoints.

pub mod array;
pub mod graph;
pub mod optim;

pub use array::{masked_softmax, DenseArray, LOG_FLOOR, MASK_NEG};
pub use graph::{Graph, NodeId};
pub use optim::AdamState;
