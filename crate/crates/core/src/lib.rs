//! Trojan detection from static CNN weights: weight bundles are turned into
//! graphs and classified by a GraphConv network.

pub mod bundle;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
