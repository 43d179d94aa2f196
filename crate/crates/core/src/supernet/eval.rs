use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_layer, Propagation, Result, SuperNetError, SuperNetWeights, TensorSpec, Unit};
use crate::arch::ArchCode;
use crate::graph::{mean_adjacency, normalize_adjacency, GraphBundle, Splits};
use crate::tensor::{Activation, CsrMatrix, Graph, Tensor, Var};

/// Per-shard inputs, prepared once: features, propagation operators,
/// labels and splits.
#[derive(Debug, Clone)]
pub struct ShardData {
    features: Arc<Tensor>,
    prop: Propagation,
    labels: Vec<usize>,
    splits: Splits,
    num_classes: usize,
}

impl ShardData {
    pub fn new(g: &GraphBundle) -> Self {
        let adjacency = g.adjacency();
        let mut loops: Vec<(usize, usize, f64)> = (0..g.num_nodes()).map(|i| (i, i, 1.0)).collect();
        for &(u, v) in g.edges() {
            loops.push((u, v, 1.0));
            loops.push((v, u, 1.0));
        }
        let attention = CsrMatrix::from_triplets(g.num_nodes(), g.num_nodes(), &loops).expect("valid pattern");
        Self {
            features: Arc::new(g.feature_tensor()),
            prop: Propagation {
                sym_norm: Arc::new(normalize_adjacency(g)),
                mean: Arc::new(mean_adjacency(g)),
                adjacency: Arc::new(adjacency),
                attention: Arc::new(attention),
            },
            labels: g.labels().iter().map(|&l| l as usize).collect(),
            splits: g.splits().clone(),
            num_classes: g.num_classes(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }
}

/// Optional regularisers; both default to off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    /// Dropout rate on hidden representations during training.
    pub dropout: f64,
    /// L2 coefficient added to the gradient of every selected parameter.
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn nodes(self, s: &Splits) -> &[usize] {
        match self {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

struct Built {
    graph: Graph,
    logits: Var,
    leaves: Vec<(TensorSpec, Var)>,
}

fn check(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData) -> Result<()> {
    code.validate(w.cfg())?;
    if shard.num_features() != w.num_features() {
        return Err(SuperNetError::FeatureMismatch {
            expected: w.num_features(),
            got: shard.num_features(),
        });
    }
    if shard.num_classes != w.num_classes() {
        return Err(SuperNetError::ClassMismatch {
            expected: w.num_classes(),
            got: shard.num_classes,
        });
    }
    Ok(())
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..g.value(x).len())
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(&shape, mask)?);
    Ok(g.mul(x, m)?)
}

fn build(
    w: &SuperNetWeights,
    code: &ArchCode,
    shard: &ShardData,
    drop: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Built> {
    check(w, code, shard)?;
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let layout = w.layout();
    let mut params = |g: &mut Graph, unit: Unit| -> Vec<Var> {
        layout
            .block(unit)
            .tensors
            .iter()
            .map(|spec| {
                let v = g.param(w.tensor(spec));
                leaves.push((spec.clone(), v));
                v
            })
            .collect()
    };
    let mut drop = drop.filter(|(rate, _)| *rate > 0.0);

    let x = g.constant((*shard.features).clone());
    let p = params(&mut g, Unit::Input(code.input as usize));
    let z = g.matmul(x, p[0])?;
    let z = g.add_bias(z, p[1])?;
    let mut stage1 = g.activation(z, Activation::ALL[code.input as usize])?;
    if let Some((rate, rng)) = drop.as_mut() {
        stage1 = dropout(&mut g, stage1, *rate, rng)?;
    }

    let live = code.valid_slots();
    let mut outs = vec![stage1];
    for slot in 0..live {
        let kind_index = code.layer_types[slot] as usize;
        let kind = w.registry().get(kind_index);
        let input = outs[code.preds[slot].expect("live slot has a predecessor") as usize];
        let p = params(&mut g, Unit::Layer { slot, kind: kind_index });
        let mut h = apply_layer(kind, &mut g, &shard.prop, input, &p)?;
        if let Some((rate, rng)) = drop.as_mut() {
            h = dropout(&mut g, h, *rate, rng)?;
        }
        outs.push(h);
    }
    let stage2 = if live == 0 { outs[0] } else { g.mean_stack(&outs[1..])? };

    let p = params(&mut g, Unit::Output(code.output as usize));
    let z = g.matmul(stage2, p[0])?;
    let z = g.add_bias(z, p[1])?;
    let logits = g.activation(z, Activation::ALL[code.output as usize])?;
    Ok(Built {
        graph: g,
        logits,
        leaves,
    })
}

/// Full-graph logits (n × C) of `code` under the shared weights.
pub fn forward(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData) -> Result<Tensor> {
    let b = build(w, code, shard, None)?;
    Ok(b.graph.value(b.logits).clone())
}

/// Mean cross-entropy of `code` over one split.
pub fn split_loss(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData, split: Split) -> Result<f64> {
    let nodes = split.nodes(&shard.splits);
    if nodes.is_empty() {
        return Err(SuperNetError::EmptySplit(split.name()));
    }
    let mut b = build(w, code, shard, None)?;
    let loss = b.graph.masked_cross_entropy(b.logits, &shard.labels, nodes)?;
    Ok(b.graph.value(loss).data()[0])
}

/// The client's fitness term for `code`: cross-entropy over val nodes.
pub fn local_val_loss(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData) -> Result<f64> {
    split_loss(w, code, shard, Split::Val)
}

/// Gradient of the train loss w.r.t. the full flat vector; entries outside
/// the code's blocks are exactly zero.
pub fn local_grad(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData) -> Result<Vec<f64>> {
    let mut out = vec![0.0; w.len()];
    accumulate_grad(w, code, shard, Regularization::default(), 0, &mut out)?;
    Ok(out)
}

/// [`local_grad`] with regularisers; `seed` drives dropout masks.
pub fn local_grad_with(
    w: &SuperNetWeights,
    code: &ArchCode,
    shard: &ShardData,
    reg: Regularization,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; w.len()];
    accumulate_grad(w, code, shard, reg, seed, &mut out)?;
    Ok(out)
}

/// Adds the train-loss gradient of `code` into `out`; returns the loss.
pub fn accumulate_grad(
    w: &SuperNetWeights,
    code: &ArchCode,
    shard: &ShardData,
    reg: Regularization,
    seed: u64,
    out: &mut [f64],
) -> Result<f64> {
    let nodes = &shard.splits.train;
    if nodes.is_empty() {
        return Err(SuperNetError::EmptySplit("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = build(w, code, shard, Some((reg.dropout, &mut rng)))?;
    let loss = b.graph.masked_cross_entropy(b.logits, &shard.labels, nodes)?;
    let mut grads = b.graph.backward(loss)?;
    for (spec, var) in &b.leaves {
        let g = grads.take(*var);
        let range = spec.range();
        let params = &w.values()[range.clone()];
        for ((o, gv), p) in out[range].iter_mut().zip(g.data()).zip(params) {
            *o += gv + reg.weight_decay * p;
        }
    }
    Ok(b.graph.value(loss).data()[0])
}

/// Sum of [`local_grad`] over a population (no 1/|P| factor).
pub fn population_grad(w: &SuperNetWeights, population: &[ArchCode], shard: &ShardData) -> Result<Vec<f64>> {
    population_grad_with(w, population, shard, Regularization::default(), 0)
}

pub fn population_grad_with(
    w: &SuperNetWeights,
    population: &[ArchCode],
    shard: &ShardData,
    reg: Regularization,
    seed: u64,
) -> Result<Vec<f64>> {
    if population.is_empty() {
        return Err(SuperNetError::EmptyPopulation);
    }
    let mut out = vec![0.0; w.len()];
    for (i, code) in population.iter().enumerate() {
        accumulate_grad(w, code, shard, reg, seed.wrapping_add(i as u64), &mut out)?;
    }
    Ok(out)
}

/// Fraction of nodes in `split` whose arg-max logit (lowest index on ties)
/// equals the label. Returns `(accuracy, count)`.
pub fn accuracy(w: &SuperNetWeights, code: &ArchCode, shard: &ShardData, split: Split) -> Result<(f64, usize)> {
    let nodes = split.nodes(&shard.splits);
    if nodes.is_empty() {
        return Ok((0.0, 0));
    }
    let logits = forward(w, code, shard)?;
    let correct = nodes
        .iter()
        .filter(|&&v| argmax(logits.row(v)) == shard.labels[v])
        .count();
    Ok((correct as f64 / nodes.len() as f64, nodes.len()))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
