//! DAG neural networks as graphs with functions on arcs.
//!
//! The crate covers the graph IR ([`graph`]), rewrite passes into the
//! addition-node level form ([`passes`]), the function-matrix algebra
//! ([`algebra`]), lower-triangular lifting factorization ([`lifting`]),
//! lifted evaluation ([`engine`]) and a small training and structural
//! pruning harness ([`train`], [`prune`]).

pub mod algebra;
pub mod cpwl;
pub mod dot;
pub mod engine;
pub mod function;
pub mod graph;
pub mod lifting;
pub mod linalg;
pub mod passes;
pub mod prune;
pub mod synth;
pub mod train;
pub mod transform;

pub use function::{Activation, ArcFunction};
pub use graph::{Edge, Graph, GraphError, Node, NodeId, NodeKind};
pub use linalg::Matrix;
