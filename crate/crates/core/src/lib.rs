//! Federated evolutionary architecture search for graph convolutional
//! networks: private graph shards, a weight-sharing SuperNet, secure
//! aggregation of losses and gradients, and a federated evolutionary
//! optimizer that merges client and controller elites.

pub mod tensor;
pub mod graph;
pub mod arch;
pub mod supernet;
pub mod fedproto;
pub mod feo;
pub mod federation;
pub mod run;
