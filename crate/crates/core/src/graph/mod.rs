//! Graph datasets: the canonical bundle format, adjacency normalisation,
//! partitioning into client shards, and synthetic generators.

mod io;
mod partition;
mod shard;
pub mod synthetic;

pub use io::{load_bundle, write_bundle, write_shards};
pub use partition::{partition_edgecut, partition_random, Partition};
pub use shard::{induce_shards, GraphShard};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{CsrMatrix, Tensor};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing bundle file {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("feature file has {got} bytes, expected 4*N*F = {expected}")]
    FeatureLength { got: usize, expected: usize },
    #[error("splits overlap at node {0}")]
    OverlappingSplits(usize),
    #[error("invalid partition request: {0}")]
    InvalidPartition(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &v in self.train.iter().chain(&self.val).chain(&self.test) {
            if v >= num_nodes {
                return Err(GraphError::OutOfRange {
                    what: "split node",
                    index: v,
                    bound: num_nodes,
                });
            }
            if !seen.insert(v) {
                return Err(GraphError::OverlappingSplits(v));
            }
        }
        Ok(())
    }
}

/// A node-classification dataset: undirected graph, node features,
/// labels and train/val/test node sets.
///
/// Edges are kept as a sorted list of `(u, v)` with `u < v`; no
/// self-loops, no duplicates. Features are stored as `f32`, which is the
/// precision of the on-disk format.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<f32>,
    labels: Vec<u16>,
    splits: Splits,
}

impl GraphBundle {
    /// Validates and canonicalises a dataset. Edge direction, duplicates
    /// and self-loops in `edges` are normalised away.
    pub fn new(
        num_nodes: usize,
        num_features: usize,
        num_classes: usize,
        edges: &[(usize, usize)],
        features: Vec<f32>,
        labels: Vec<u16>,
        splits: Splits,
    ) -> Result<Self> {
        if features.len() != num_nodes * num_features {
            return Err(GraphError::FeatureLength {
                got: features.len() * 4,
                expected: num_nodes * num_features * 4,
            });
        }
        if labels.len() != num_nodes {
            return Err(GraphError::Malformed {
                file: "labels".into(),
                reason: format!("{} labels for {num_nodes} nodes", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(GraphError::OutOfRange {
                what: "label",
                index: bad as usize,
                bound: num_classes,
            });
        }
        let mut canonical = BTreeSet::new();
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= num_nodes {
                    return Err(GraphError::OutOfRange {
                        what: "edge endpoint",
                        index: x,
                        bound: num_nodes,
                    });
                }
            }
            if u != v {
                canonical.insert((u.min(v), u.max(v)));
            }
        }
        splits.validate(num_nodes)?;
        Ok(Self {
            num_nodes,
            num_features,
            num_classes,
            edges: canonical.into_iter().collect(),
            features,
            labels,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Undirected edges, each listed once with the smaller id first.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn feature_row(&self, node: usize) -> &[f32] {
        &self.features[node * self.num_features..(node + 1) * self.num_features]
    }

    pub fn feature_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.num_nodes, self.num_features],
            self.features.iter().map(|&v| v as f64).collect(),
        )
        .expect("feature length validated at construction")
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Symmetric 0/1 adjacency without self-loops.
    pub fn adjacency(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.edges.len() * 2);
        for &(u, v) in &self.edges {
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        CsrMatrix::from_triplets(self.num_nodes, self.num_nodes, &triplets).expect("validated edges")
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(g: &GraphBundle) -> CsrMatrix {
    let deg: Vec<f64> = g.degrees().iter().map(|&d| (d + 1) as f64).collect();
    let mut triplets = Vec::with_capacity(g.edges().len() * 2 + g.num_nodes());
    for (i, &d) in deg.iter().enumerate() {
        triplets.push((i, i, 1.0 / d));
    }
    for &(u, v) in g.edges() {
        let w = 1.0 / (deg[u] * deg[v]).sqrt();
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    CsrMatrix::from_triplets(g.num_nodes(), g.num_nodes(), &triplets).expect("validated edges")
}

/// `D^{-1} A`: mean over neighbours, zero rows for isolated nodes.
pub fn mean_adjacency(g: &GraphBundle) -> CsrMatrix {
    let deg = g.degrees();
    let mut triplets = Vec::with_capacity(g.edges().len() * 2);
    for &(u, v) in g.edges() {
        triplets.push((u, v, 1.0 / deg[u] as f64));
        triplets.push((v, u, 1.0 / deg[v] as f64));
    }
    CsrMatrix::from_triplets(g.num_nodes(), g.num_nodes(), &triplets).expect("validated edges")
}

/// Number of edges whose endpoints land in different parts.
pub fn edge_cut(g: &GraphBundle, assignment: &[usize]) -> usize {
    g.edges()
        .iter()
        .filter(|&&(u, v)| assignment[u] != assignment[v])
        .count()
}
