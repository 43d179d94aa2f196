//! Weight-sharing SuperNet.
//!
//! One flat parameter vector holds a block set for every option of the
//! search space: five input blocks (F→64 affine), one block set per
//! (slot, layer type), and five output blocks (64→C affine). An
//! architecture code selects a subset of these blocks; gradients of a
//! code are exactly zero outside that subset.
//!
//! Flattening order: input blocks 0..5, then slot 1 types 0..K, slot 2
//! types 0..K, …, slot L, then output blocks 0..5. Inside a block set the
//! tensors follow [`LayerKind::param_shapes`] (affine blocks: weight then
//! bias), each row-major.

mod eval;
mod layers;

pub use eval::{
    accumulate_grad, accuracy, forward, local_grad, local_grad_with, local_val_loss, population_grad,
    population_grad_with, split_loss, Regularization, ShardData, Split,
};
pub use layers::{apply_layer, LayerKind, LayerRegistry, Propagation, APPNP_ALPHA, APPNP_STEPS, GAT_SLOPE};

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::{ArchCode, ArchError, SpaceConfig, IO_OPTIONS};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SuperNetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("registry has {registry} types but the space expects {space}")]
    RegistryMismatch { registry: usize, space: usize },
    #[error("shard has {got} features, SuperNet expects {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("shard has {got} classes, SuperNet expects {expected}")]
    ClassMismatch { expected: usize, got: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("empty population")]
    EmptyPopulation,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, SuperNetError>;

/// A group of parameter tensors selected together by one gene value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Input(usize),
    Layer { slot: usize, kind: usize },
    Output(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSet {
    pub unit: Unit,
    pub tensors: Vec<TensorSpec>,
}

impl BlockSet {
    pub fn range(&self) -> std::ops::Range<usize> {
        let start = self.tensors.first().map_or(0, |t| t.offset);
        let end = self.tensors.last().map_or(0, |t| t.offset + t.len());
        start..end
    }
}

/// Block layout of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: usize,
    pub layer_types: Vec<LayerKind>,
    pub num_features: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub blocks: Vec<BlockSet>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &SpaceConfig, registry: &LayerRegistry, num_features: usize, num_classes: usize) -> Result<Self> {
        if registry.len() != cfg.layer_types {
            return Err(SuperNetError::RegistryMismatch {
                registry: registry.len(),
                space: cfg.layer_types,
            });
        }
        let h = cfg.hidden;
        let mut offset = 0;
        let mut blocks = Vec::new();
        let mut push = |unit: Unit, shapes: Vec<(&str, Vec<usize>)>| {
            let tensors = shapes
                .into_iter()
                .map(|(name, shape)| {
                    let spec = TensorSpec {
                        name: name.to_string(),
                        shape,
                        offset,
                    };
                    offset += spec.len();
                    spec
                })
                .collect();
            blocks.push(BlockSet { unit, tensors });
        };
        for i in 0..IO_OPTIONS {
            push(Unit::Input(i), vec![("weight", vec![num_features, h]), ("bias", vec![h])]);
        }
        for slot in 0..cfg.layers {
            for (kind_index, kind) in registry.kinds().iter().enumerate() {
                push(
                    Unit::Layer {
                        slot,
                        kind: kind_index,
                    },
                    kind.param_shapes(h),
                );
            }
        }
        for i in 0..IO_OPTIONS {
            push(Unit::Output(i), vec![("weight", vec![h, num_classes]), ("bias", vec![num_classes])]);
        }
        Ok(Self {
            layers: cfg.layers,
            layer_types: registry.kinds().to_vec(),
            num_features,
            num_classes,
            hidden: h,
            blocks,
            total: offset,
        })
    }

    pub fn block(&self, unit: Unit) -> &BlockSet {
        let k = self.layer_types.len();
        let index = match unit {
            Unit::Input(i) => i,
            Unit::Layer { slot, kind } => IO_OPTIONS + slot * k + kind,
            Unit::Output(i) => IO_OPTIONS + self.layers * k + i,
        };
        &self.blocks[index]
    }

    /// Hex SHA-256 of the canonical JSON layout; parties compare it before
    /// exchanging flat vectors.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// The units a code reads: its input block, one block set per live
    /// slot, and its output block.
    pub fn units_of(&self, code: &ArchCode) -> Vec<Unit> {
        let mut units = vec![Unit::Input(code.input as usize)];
        for slot in 0..code.valid_slots() {
            units.push(Unit::Layer {
                slot,
                kind: code.layer_types[slot] as usize,
            });
        }
        units.push(Unit::Output(code.output as usize));
        units
    }

    /// Number of parameters in the masked view of `code`.
    pub fn param_count(&self, code: &ArchCode) -> usize {
        self.units_of(code).into_iter().map(|u| self.block(u).range().len()).sum()
    }

    /// 0/1 mask over the flat vector for `code`.
    pub fn mask(&self, code: &ArchCode) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for u in self.units_of(code) {
            m[self.block(u).range()].iter_mut().for_each(|x| *x = true);
        }
        m
    }
}

/// The SuperNet parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetWeights {
    cfg: SpaceConfig,
    registry: LayerRegistry,
    layout: Layout,
    values: Vec<f64>,
}

impl SuperNetWeights {
    /// Allocates every block. Matrices get Glorot-uniform values, biases
    /// start at zero, GIN's ε starts at zero.
    pub fn build(
        cfg: &SpaceConfig,
        registry: &LayerRegistry,
        num_features: usize,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let layout = Layout::new(cfg, registry, num_features, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        for block in &layout.blocks {
            for t in &block.tensors {
                if t.shape.len() == 2 {
                    let init = Tensor::glorot(&t.shape, t.shape[0], t.shape[1], &mut rng);
                    values[t.range()].copy_from_slice(init.data());
                }
            }
        }
        Ok(Self {
            cfg: *cfg,
            registry: registry.clone(),
            layout,
            values,
        })
    }

    pub fn zeros(cfg: &SpaceConfig, registry: &LayerRegistry, num_features: usize, num_classes: usize) -> Result<Self> {
        let layout = Layout::new(cfg, registry, num_features, num_classes)?;
        Ok(Self {
            cfg: *cfg,
            registry: registry.clone(),
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn cfg(&self) -> &SpaceConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &LayerRegistry {
        &self.registry
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.layout.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    pub fn param_count(&self, code: &ArchCode) -> usize {
        self.layout.param_count(code)
    }

    pub fn block_values(&self, unit: Unit) -> &[f64] {
        &self.values[self.layout.block(unit).range()]
    }

    pub fn block_values_mut(&mut self, unit: Unit) -> &mut [f64] {
        let r = self.layout.block(unit).range();
        &mut self.values[r]
    }

    pub(crate) fn tensor(&self, spec: &TensorSpec) -> Tensor {
        Tensor::new(&spec.shape, self.values[spec.range()].to_vec()).expect("layout shapes match")
    }

    /// Writes the checkpoint: `u32` LE header length, JSON header (the
    /// layout plus its hash), then every value as LE `f64` in flattening
    /// order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            layout_hash: self.layout.hash(),
            layout: self.layout.clone(),
        })
        .expect("header serialises");
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.values.len() * 8 + 4096);
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| SuperNetError::Checkpoint(e.to_string()))
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let bad = |m: String| SuperNetError::Checkpoint(m);
        let mut len = [0u8; 4];
        input.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut header).map_err(|e| bad(e.to_string()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
        if header.layout.hash() != header.layout_hash {
            return Err(bad("layout hash does not match layout".into()));
        }
        let mut raw = Vec::new();
        input.read_to_end(&mut raw).map_err(|e| bad(e.to_string()))?;
        if raw.len() != header.layout.total * 8 {
            return Err(bad(format!("{} value bytes, expected {}", raw.len(), header.layout.total * 8)));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let registry = LayerRegistry::from_names(&header.layout.layer_types.iter().map(|k| k.name()).collect::<Vec<_>>())
            .map_err(bad)?;
        let cfg = SpaceConfig::new(header.layout.layers, registry.len())?;
        Ok(Self {
            cfg,
            registry,
            layout: header.layout,
            values,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SuperNetError::Checkpoint(e.to_string()))?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    layout_hash: String,
    layout: Layout,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(input: u8, types: &[u8], preds: &[Option<u8>], output: u8) -> ArchCode {
        ArchCode {
            input,
            layer_types: types.to_vec(),
            preds: preds.to_vec(),
            output,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = SpaceConfig::new(2, 6).unwrap();
        let reg = LayerRegistry::default();
        let a = SuperNetWeights::build(&cfg, &reg, 10, 3, 5).unwrap();
        let b = SuperNetWeights::build(&cfg, &reg, 10, 3, 5).unwrap();
        assert_eq!(a.values(), b.values());
        let c = SuperNetWeights::build(&cfg, &reg, 10, 3, 6).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn five_input_and_five_output_blocks() {
        let cfg = SpaceConfig::new(3, 6).unwrap();
        let layout = Layout::new(&cfg, &LayerRegistry::default(), 7, 4).unwrap();
        let inputs = layout.blocks.iter().filter(|b| matches!(b.unit, Unit::Input(_))).count();
        let outputs = layout.blocks.iter().filter(|b| matches!(b.unit, Unit::Output(_))).count();
        assert_eq!((inputs, outputs), (5, 5));
        assert_eq!(layout.blocks.len(), 10 + 3 * 6);
    }

    #[test]
    fn toy_layout_length_is_sum_of_block_sizes() {
        let cfg = SpaceConfig::new(2, 2).unwrap();
        let reg = LayerRegistry::from_names(&["gcn", "gin"]).unwrap();
        let (f, c, h) = (10usize, 3usize, 64usize);
        let layout = Layout::new(&cfg, &reg, f, c).unwrap();
        let input = 5 * (f * h + h);
        let gcn = h * h + h;
        let gin = 2 * (h * h + h) + 1;
        let output = 5 * (h * c + c);
        assert_eq!(layout.total, input + 2 * (gcn + gin) + output);
        let w = SuperNetWeights::build(&cfg, &reg, f, c, 0).unwrap();
        assert_eq!(w.len(), layout.total);
        // blocks tile the vector contiguously
        let mut expected = 0;
        for b in &layout.blocks {
            assert_eq!(b.range().start, expected);
            expected = b.range().end;
        }
        assert_eq!(expected, layout.total);
    }

    #[test]
    fn registry_must_match_space() {
        let cfg = SpaceConfig::new(2, 3).unwrap();
        assert!(Layout::new(&cfg, &LayerRegistry::default(), 4, 2).is_err());
        assert!(LayerRegistry::from_names(&["gcn", "gcn"]).is_err());
        assert!(LayerRegistry::from_names(&["conv"]).is_err());
    }

    #[test]
    fn param_count_of_an_input_output_only_code() {
        let cfg = SpaceConfig::new(6, 6).unwrap();
        let layout = Layout::new(&cfg, &LayerRegistry::default(), 1433, 7).unwrap();
        let c = code(0, &[0; 6], &[None; 6], 3);
        assert_eq!(layout.param_count(&c), 92_231);
    }

    #[test]
    fn param_count_is_monotone_and_ignores_dead_genes() {
        let cfg = SpaceConfig::new(3, 6).unwrap();
        let layout = Layout::new(&cfg, &LayerRegistry::default(), 20, 4).unwrap();
        let one = code(1, &[0, 0, 0], &[Some(0), None, None], 2);
        let two = code(1, &[0, 5, 0], &[Some(0), Some(1), None], 2);
        assert!(layout.param_count(&two) >= layout.param_count(&one));
        let dead_variant = code(1, &[0, 3, 4], &[Some(0), None, Some(2)], 2);
        assert_eq!(layout.param_count(&one), layout.param_count(&dead_variant));
    }

    #[test]
    fn checkpoint_round_trips() {
        let cfg = SpaceConfig::new(2, 3).unwrap();
        let reg = LayerRegistry::from_names(&["gat", "sage", "appnp"]).unwrap();
        let w = SuperNetWeights::build(&cfg, &reg, 5, 2, 9).unwrap();
        let back = SuperNetWeights::read_checkpoint(w.checkpoint_bytes().as_slice()).unwrap();
        assert_eq!(back, w);
        let mut corrupt = w.checkpoint_bytes();
        corrupt.pop();
        assert!(SuperNetWeights::read_checkpoint(corrupt.as_slice()).is_err());
    }

    #[test]
    fn layout_hash_depends_on_shape() {
        let cfg = SpaceConfig::new(2, 6).unwrap();
        let reg = LayerRegistry::default();
        let a = Layout::new(&cfg, &reg, 5, 2).unwrap().hash();
        let b = Layout::new(&cfg, &reg, 5, 3).unwrap().hash();
        assert_ne!(a, b);
        assert_eq!(a, Layout::new(&cfg, &reg, 5, 2).unwrap().hash());
    }
}
