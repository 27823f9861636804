//! Lipschitz upper bounds for feedforward networks from a banded-multiplier
//! semidefinite program, decomposed over the chordal sparsity of its
//! constraint matrix and solved by ADMM.

pub mod admm;
pub mod chordal;
pub mod error;
pub mod estimate;
pub mod network;
pub mod sdp;
pub mod sparse;
pub mod verify;

pub use admm::{solve, verify_solution, BoundReport, Method, SolveOptions, SolveOutput};
pub use chordal::{maximal_cliques, predicted_edge_set, Clique, CliqueSet, EdgeSet};
pub use error::{Error, Result};
pub use estimate::{estimate, Estimate, EstimateOptions};
pub use network::{naive_lip, random_network, Activation, ActivationKind, Network};
pub use sdp::{DimsProfile, SdpProblem};
