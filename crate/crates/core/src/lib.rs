//! Supervised feature dictionaries, sparse autoencoders, and a task-grounded
//! evaluation toolkit for feature dictionaries over labeled activations.

pub mod dictionary;
pub mod edit;
pub mod eval;
pub mod interp;
pub mod mech;
pub mod sae;
pub mod store;
pub mod synth;
pub mod toy;
