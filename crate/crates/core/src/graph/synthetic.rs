//! Seeded synthetic graphs: Erdős–Rényi, stochastic block models, and the
//! multi-client block-model task used to compare search strategies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GraphBundle, Partition, Splits};

/// Stochastic block model with class-dependent Gaussian features.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub nodes_per_class: usize,
    pub num_classes: usize,
    pub num_features: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Distance between class feature means, in units of the noise scale.
    pub feature_signal: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl SbmSpec {
    pub fn small(num_classes: usize) -> Self {
        Self {
            nodes_per_class: 20,
            num_classes,
            num_features: 8,
            p_in: 0.3,
            p_out: 0.02,
            feature_signal: 1.0,
            train_fraction: 0.3,
            val_fraction: 0.3,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_per_class * self.num_classes
    }
}

fn random_splits(n: usize, train: f64, val: f64, rng: &mut ChaCha8Rng) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = ((n as f64) * train).round().max(1.0) as usize;
    let n_val = ((n as f64) * val).round().max(1.0) as usize;
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut val: Vec<usize> = order[n_train..n_train + n_val].to_vec();
    let mut test: Vec<usize> = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

/// G(n, p) with two classes assigned alternately and one constant feature.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> GraphBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|i| (i % 2) as u16).collect();
    let splits = random_splits(n, 0.3, 0.3, &mut rng);
    GraphBundle::new(n, 1, 2, &edges, vec![1.0; n], labels, splits).expect("valid random graph")
}

/// Block-model edges and labels for `spec`, with nodes of class c at ids
/// `c*nodes_per_class..`.
fn sbm_edges(spec: &SbmSpec, rng: &mut ChaCha8Rng) -> (Vec<(usize, usize)>, Vec<u16>) {
    let n = spec.num_nodes();
    let labels: Vec<u16> = (0..n).map(|i| (i / spec.nodes_per_class) as u16).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    (edges, labels)
}

/// Class-mean features: class c has mean `signal/2` on its own block of
/// feature dims and `-signal/2` elsewhere, plus unit Gaussian noise.
/// Values are rounded to f32, the on-disk precision.
fn class_features(labels: &[u16], spec: &SbmSpec, signal: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let f = spec.num_features;
    let block = (f / spec.num_classes).max(1);
    let mut out = Vec::with_capacity(labels.len() * f);
    for &l in labels {
        for d in 0..f {
            let own = (d / block) % spec.num_classes == l as usize;
            let mean = if own { signal / 2.0 } else { -signal / 2.0 } / (block as f64).sqrt();
            out.push((mean + noise.sample(rng)) as f32);
        }
    }
    out
}

pub fn sbm_bundle(spec: &SbmSpec, seed: u64) -> GraphBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (edges, labels) = sbm_edges(spec, &mut rng);
    let features = class_features(&labels, spec, spec.feature_signal, &mut rng);
    let splits = random_splits(spec.num_nodes(), spec.train_fraction, spec.val_fraction, &mut rng);
    GraphBundle::new(
        spec.num_nodes(),
        spec.num_features,
        spec.num_classes,
        &edges,
        features,
        labels,
        splits,
    )
    .expect("valid block model")
}

/// A multi-client task: `specs.len()` disconnected block-model components,
/// one per client, each with its own block structure and feature signal.
/// Returns the union graph and the partition that maps component i to
/// client i (zero edge cut).
pub fn federated_sbm_task(specs: &[SbmSpec], seed: u64) -> (GraphBundle, Partition) {
    assert!(!specs.is_empty());
    let num_classes = specs[0].num_classes;
    let num_features = specs[0].num_features;
    assert!(specs
        .iter()
        .all(|s| s.num_classes == num_classes && s.num_features == num_features));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut splits = Splits::default();
    let mut assignment = Vec::new();
    for (client, spec) in specs.iter().enumerate() {
        let offset = labels.len();
        let (e, l) = sbm_edges(spec, &mut rng);
        let f = class_features(&l, spec, spec.feature_signal, &mut rng);
        let s = random_splits(spec.num_nodes(), spec.train_fraction, spec.val_fraction, &mut rng);
        edges.extend(e.into_iter().map(|(u, v)| (u + offset, v + offset)));
        features.extend(f);
        labels.extend(l);
        splits.train.extend(s.train.iter().map(|v| v + offset));
        splits.val.extend(s.val.iter().map(|v| v + offset));
        splits.test.extend(s.test.iter().map(|v| v + offset));
        assignment.extend(std::iter::repeat_n(client, spec.num_nodes()));
    }
    let n = labels.len();
    let g = GraphBundle::new(n, num_features, num_classes, &edges, features, labels, splits).expect("valid task");
    let p = Partition::new(assignment, specs.len()).expect("every component nonempty");
    (g, p)
}
