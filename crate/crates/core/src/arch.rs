//! Architecture codes: one input-structure gene, a (type, predecessor)
//! gene pair per layer slot, and one output-structure gene.
//!
//! Slot `i` (1-based) reads from predecessor `0` (the input stage) or
//! from an earlier slot `j < i`. A `None` predecessor switches off that
//! slot and every later one; genes past it are don't-care and are kept at
//! a fixed filler (`type 0`, `None`) in canonical form.

use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Options for the input- and output-structure genes.
pub const IO_OPTIONS: usize = 5;
/// Width of every hidden representation.
pub const HIDDEN_WIDTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("invalid space: layers={layers}, types={types}")]
    InvalidSpace { layers: usize, types: usize },
    #[error("code has {got} layer slots, space expects {expected}")]
    SlotCount { expected: usize, got: usize },
    #[error("gene {gene} = {value} outside its option set (size {options})")]
    GeneOutOfRange {
        gene: String,
        value: usize,
        options: usize,
    },
    #[error("cannot parse architecture: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceConfig {
    pub layers: usize,
    pub layer_types: usize,
    pub hidden: usize,
}

impl SpaceConfig {
    pub fn new(layers: usize, layer_types: usize) -> Result<Self, ArchError> {
        if layers == 0 || layer_types == 0 {
            return Err(ArchError::InvalidSpace {
                layers,
                types: layer_types,
            });
        }
        Ok(Self {
            layers,
            layer_types,
            hidden: HIDDEN_WIDTH,
        })
    }

    pub fn gene_count(&self) -> usize {
        2 * self.layers + 2
    }

    /// Number of raw codes, `25 · K^L · (L+1)!`.
    pub fn space_size(&self) -> BigUint {
        let mut total = BigUint::from((IO_OPTIONS * IO_OPTIONS) as u64);
        for slot in 1..=self.layers {
            total *= BigUint::from((self.layer_types * (slot + 1)) as u64);
        }
        total
    }

    /// Number of distinct canonical codes (don't-care tails collapsed).
    pub fn distinct_architectures(&self) -> BigUint {
        let io = BigUint::from((IO_OPTIONS * IO_OPTIONS) as u64);
        let mut prefix = BigUint::from(1u32);
        let mut total = BigUint::from(0u32);
        for slot in 1..=self.layers {
            // first None at `slot`, all earlier slots live
            total += &prefix;
            prefix *= BigUint::from((self.layer_types * slot) as u64);
        }
        total += prefix;
        total * io
    }
}

/// One architecture. Genes are small indices; see the module docs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchCode {
    pub input: u8,
    pub layer_types: Vec<u8>,
    pub preds: Vec<Option<u8>>,
    pub output: u8,
}

/// Identifies one gene of a code, for variation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Gene {
    Input,
    Type(usize),
    Pred(usize),
    Output,
}

fn genes(layers: usize) -> impl Iterator<Item = Gene> {
    std::iter::once(Gene::Input)
        .chain((0..layers).map(Gene::Type))
        .chain((0..layers).map(Gene::Pred))
        .chain(std::iter::once(Gene::Output))
}

impl ArchCode {
    pub fn layers(&self) -> usize {
        self.layer_types.len()
    }

    /// Number of live layer slots (those before the first `None`).
    pub fn valid_slots(&self) -> usize {
        self.preds.iter().position(Option::is_none).unwrap_or(self.preds.len())
    }

    pub fn validate(&self, cfg: &SpaceConfig) -> Result<(), ArchError> {
        if self.layer_types.len() != cfg.layers || self.preds.len() != cfg.layers {
            return Err(ArchError::SlotCount {
                expected: cfg.layers,
                got: self.layer_types.len().max(self.preds.len()),
            });
        }
        let out_of_range = |gene: String, value: usize, options: usize| ArchError::GeneOutOfRange {
            gene,
            value,
            options,
        };
        if self.input as usize >= IO_OPTIONS {
            return Err(out_of_range("input".into(), self.input as usize, IO_OPTIONS));
        }
        if self.output as usize >= IO_OPTIONS {
            return Err(out_of_range("output".into(), self.output as usize, IO_OPTIONS));
        }
        for i in 0..cfg.layers {
            if self.layer_types[i] as usize >= cfg.layer_types {
                return Err(out_of_range(
                    format!("type[{}]", i + 1),
                    self.layer_types[i] as usize,
                    cfg.layer_types,
                ));
            }
            if let Some(p) = self.preds[i] {
                if p as usize > i {
                    return Err(out_of_range(format!("pred[{}]", i + 1), p as usize, i + 1));
                }
            }
        }
        Ok(())
    }

    /// Resets every gene at and after the first `None` predecessor to the
    /// filler (`type 0`, `None`). Idempotent.
    pub fn canonicalize(&self) -> ArchCode {
        let mut out = self.clone();
        let first = out.valid_slots();
        for i in first..out.layers() {
            out.layer_types[i] = 0;
            out.preds[i] = None;
        }
        out
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    fn options(&self, gene: Gene, cfg: &SpaceConfig) -> usize {
        match gene {
            Gene::Input | Gene::Output => IO_OPTIONS,
            Gene::Type(_) => cfg.layer_types,
            // None plus predecessors 0..=i
            Gene::Pred(i) => i + 2,
        }
    }

    fn get(&self, gene: Gene) -> usize {
        match gene {
            Gene::Input => self.input as usize,
            Gene::Output => self.output as usize,
            Gene::Type(i) => self.layer_types[i] as usize,
            Gene::Pred(i) => self.preds[i].map_or(0, |p| p as usize + 1),
        }
    }

    fn set(&mut self, gene: Gene, value: usize) {
        match gene {
            Gene::Input => self.input = value as u8,
            Gene::Output => self.output = value as u8,
            Gene::Type(i) => self.layer_types[i] = value as u8,
            Gene::Pred(i) => self.preds[i] = value.checked_sub(1).map(|p| p as u8),
        }
    }

    /// Genes as indices into their option sets, in the order
    /// input, types 1..L, predecessors 1..L (0 = None, p+1 = p), output.
    pub fn gene_indices(&self) -> Vec<usize> {
        genes(self.layers()).map(|g| self.get(g)).collect()
    }

    /// Every gene drawn uniformly from its option set, then canonicalised.
    pub fn sample<R: Rng + ?Sized>(cfg: &SpaceConfig, rng: &mut R) -> ArchCode {
        let mut code = ArchCode {
            input: 0,
            layer_types: vec![0; cfg.layers],
            preds: vec![None; cfg.layers],
            output: 0,
        };
        for g in genes(cfg.layers) {
            let v = rng.gen_range(0..code.options(g, cfg));
            code.set(g, v);
        }
        code.canonicalize()
    }

    /// Per-gene mutation before canonicalisation: each gene, with
    /// probability `rate`, moves to a uniformly chosen *different* option.
    pub fn mutate_raw<R: Rng + ?Sized>(&self, cfg: &SpaceConfig, rate: f64, rng: &mut R) -> ArchCode {
        let mut out = self.clone();
        for g in genes(cfg.layers) {
            let options = self.options(g, cfg);
            if options < 2 || !rng.gen_bool(rate.clamp(0.0, 1.0)) {
                continue;
            }
            let current = self.get(g);
            let mut v = rng.gen_range(0..options - 1);
            if v >= current {
                v += 1;
            }
            out.set(g, v);
        }
        out
    }

    pub fn mutate<R: Rng + ?Sized>(&self, cfg: &SpaceConfig, rate: f64, rng: &mut R) -> ArchCode {
        self.mutate_raw(cfg, rate, rng).canonicalize()
    }

    /// Uniform crossover: each gene taken from `self` or `other` with equal
    /// probability, then canonicalised.
    pub fn crossover<R: Rng + ?Sized>(&self, other: &ArchCode, rng: &mut R) -> Result<ArchCode, ArchError> {
        if self.layers() != other.layers() {
            return Err(ArchError::SlotCount {
                expected: self.layers(),
                got: other.layers(),
            });
        }
        let mut child = self.clone();
        for g in genes(self.layers()) {
            if rng.gen_bool(0.5) {
                child.set(g, other.get(g));
            }
        }
        Ok(child.canonicalize())
    }

    /// Renders `IS3 | L1:gcn<-0 L2:appnp<-1 L3:None | OS4` using the given
    /// layer-type names. Slots after the first `None` are omitted.
    pub fn display_with(&self, type_names: &[&str]) -> String {
        let mut s = format!("IS{} |", self.input);
        for i in 0..self.layers() {
            match self.preds[i] {
                Some(p) => {
                    let t = self.layer_types[i] as usize;
                    let name = type_names.get(t).map_or_else(|| format!("t{t}"), |n| n.to_string());
                    s.push_str(&format!(" L{}:{}<-{}", i + 1, name, p));
                }
                None => {
                    s.push_str(&format!(" L{}:None", i + 1));
                    break;
                }
            }
        }
        s.push_str(&format!(" | OS{}", self.output));
        s
    }

    /// Inverse of [`ArchCode::display_with`] for a space with `layers` slots.
    pub fn parse_with(text: &str, type_names: &[&str], layers: usize) -> Result<ArchCode, ArchError> {
        let err = |m: &str| ArchError::Parse(format!("{m} in {text:?}"));
        let parts: Vec<&str> = text.split('|').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(err("expected three '|'-separated stages"));
        }
        let io = |p: &str, prefix: &str| -> Result<u8, ArchError> {
            p.strip_prefix(prefix)
                .and_then(|v| v.parse::<u8>().ok())
                .filter(|&v| (v as usize) < IO_OPTIONS)
                .ok_or_else(|| err(&format!("bad {prefix} stage")))
        };
        let mut code = ArchCode {
            input: io(parts[0], "IS")?,
            layer_types: vec![0; layers],
            preds: vec![None; layers],
            output: io(parts[2], "OS")?,
        };
        let slots: Vec<&str> = parts[1].split_whitespace().collect();
        if slots.len() > layers {
            return Err(err("too many layer slots"));
        }
        let mut terminated = false;
        for (i, slot) in slots.iter().enumerate() {
            let body = slot
                .strip_prefix(&format!("L{}:", i + 1))
                .ok_or_else(|| err("slot label out of order"))?;
            if body == "None" {
                terminated = true;
                if i + 1 != slots.len() {
                    return Err(err("slots listed after None"));
                }
                break;
            }
            let (name, pred) = body.split_once("<-").ok_or_else(|| err("missing '<-'"))?;
            let t = type_names
                .iter()
                .position(|n| *n == name)
                .or_else(|| name.strip_prefix('t').and_then(|v| v.parse().ok()))
                .ok_or_else(|| err(&format!("unknown layer type {name}")))?;
            let p: u8 = pred.parse().map_err(|_| err("bad predecessor"))?;
            code.layer_types[i] = t as u8;
            code.preds[i] = Some(p);
        }
        if !terminated && slots.len() != layers {
            return Err(err("missing layer slots"));
        }
        Ok(code)
    }

    /// JSON array form: `[IS, type_1..type_L, pred_1..pred_L, OS]` with
    /// `null` for a `None` predecessor.
    pub fn to_genes(&self) -> Vec<Option<u32>> {
        let mut out = vec![Some(self.input as u32)];
        out.extend(self.layer_types.iter().map(|&t| Some(t as u32)));
        out.extend(self.preds.iter().map(|p| p.map(u32::from)));
        out.push(Some(self.output as u32));
        out
    }

    pub fn from_genes(genes: &[Option<u32>]) -> Result<ArchCode, ArchError> {
        if genes.len() < 4 || !genes.len().is_multiple_of(2) {
            return Err(ArchError::Parse(format!("{} genes is not 2L+2", genes.len())));
        }
        let layers = (genes.len() - 2) / 2;
        let required = |g: Option<u32>, what: &str| -> Result<u8, ArchError> {
            g.and_then(|v| u8::try_from(v).ok())
                .ok_or_else(|| ArchError::Parse(format!("{what} gene must be a small integer")))
        };
        Ok(ArchCode {
            input: required(genes[0], "input")?,
            layer_types: genes[1..=layers]
                .iter()
                .map(|&g| required(g, "type"))
                .collect::<Result<_, _>>()?,
            preds: genes[layers + 1..=2 * layers]
                .iter()
                .map(|&g| g.map(|v| u8::try_from(v).map_err(|_| ArchError::Parse("pred gene too large".into()))).transpose())
                .collect::<Result<_, _>>()?,
            output: required(genes[2 * layers + 1], "output")?,
        })
    }
}

impl fmt::Display for ArchCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_with(&[]))
    }
}

impl Serialize for ArchCode {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_genes().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ArchCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let genes = Vec::<Option<u32>>::deserialize(d)?;
        ArchCode::from_genes(&genes).map_err(serde::de::Error::custom)
    }
}

/// Every raw code of the space (no canonicalisation), in gene order.
pub fn enumerate_codes(cfg: &SpaceConfig) -> impl Iterator<Item = ArchCode> + '_ {
    let template = ArchCode {
        input: 0,
        layer_types: vec![0; cfg.layers],
        preds: vec![None; cfg.layers],
        output: 0,
    };
    let gene_list: Vec<Gene> = genes(cfg.layers).collect();
    let radices: Vec<usize> = gene_list.iter().map(|&g| template.options(g, cfg)).collect();
    let mut digits = vec![0usize; gene_list.len()];
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let mut code = template.clone();
        for (g, &d) in gene_list.iter().zip(&digits) {
            code.set(*g, d);
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                done = true;
                break;
            }
            digits[pos] += 1;
            if digits[pos] < radices[pos] {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
        Some(code)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn cfg(l: usize, k: usize) -> SpaceConfig {
        SpaceConfig::new(l, k).unwrap()
    }

    fn full_code(l: usize) -> ArchCode {
        ArchCode {
            input: 2,
            layer_types: (0..l).map(|i| (i % 3) as u8).collect(),
            preds: (0..l).map(|i| Some(i as u8)).collect(),
            output: 4,
        }
    }

    #[test]
    fn space_size_small_cases_match_enumeration() {
        for (l, k) in [(1, 12), (1, 6), (2, 6), (2, 3), (1, 1)] {
            let c = cfg(l, k);
            let raw: Vec<ArchCode> = enumerate_codes(&c).collect();
            assert_eq!(BigUint::from(raw.len()), c.space_size());
            let distinct: HashSet<ArchCode> = raw.iter().map(ArchCode::canonicalize).collect();
            assert_eq!(BigUint::from(distinct.len()), c.distinct_architectures());
            assert!(raw.iter().all(|code| code.validate(&c).is_ok()));
        }
        assert_eq!(cfg(1, 12).space_size(), BigUint::from(600u32));
        assert_eq!(cfg(1, 6).space_size(), BigUint::from(300u32));
    }

    #[test]
    fn space_size_of_the_default_space() {
        let expected = 25u64 * 12u64.pow(6) * 5040;
        assert_eq!(expected, 376_233_984_000);
        assert_eq!(cfg(6, 12).space_size(), BigUint::from(expected));
    }

    #[test]
    fn invalid_space_is_rejected() {
        assert!(SpaceConfig::new(0, 3).is_err());
        assert!(SpaceConfig::new(2, 0).is_err());
    }

    #[test]
    fn sampling_reaches_every_raw_code_of_a_tiny_space() {
        // every sampled code is canonical, and the set of canonical codes
        // reached equals the set of canonical forms of all 600 raw codes
        let c = cfg(1, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reached: HashSet<ArchCode> = (0..20_000).map(|_| ArchCode::sample(&c, &mut rng)).collect();
        let all: HashSet<ArchCode> = enumerate_codes(&c).map(|x| x.canonicalize()).collect();
        assert_eq!(reached, all);
    }

    #[test]
    fn sampling_is_deterministic() {
        let c = cfg(6, 6);
        let a = ArchCode::sample(&c, &mut ChaCha8Rng::seed_from_u64(17));
        let b = ArchCode::sample(&c, &mut ChaCha8Rng::seed_from_u64(17));
        assert_eq!(a, b);
    }

    #[test]
    fn canonicalize_cases() {
        let code = full_code(4);
        assert_eq!(code.canonicalize(), code);
        let mut a = full_code(4);
        a.preds[1] = None;
        let mut b = a.clone();
        b.layer_types[2] = 2;
        b.preds[3] = Some(1);
        b.layer_types[1] = 1;
        assert_ne!(a, b);
        assert_eq!(a.canonicalize(), b.canonicalize());
        assert_eq!(a.canonicalize().canonicalize(), a.canonicalize());
        assert_eq!(a.canonicalize().valid_slots(), 1);
    }

    #[test]
    fn mutation_rate_zero_is_identity() {
        let c = cfg(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let code = ArchCode::sample(&c, &mut rng);
        assert_eq!(code.mutate(&c, 0.0, &mut rng), code);
    }

    #[test]
    fn mutation_changes_expected_number_of_genes() {
        let c = cfg(6, 6);
        let rate = 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = full_code(6);
        let mut changed = 0usize;
        for _ in 0..1000 {
            let m = base.mutate_raw(&c, rate, &mut rng);
            changed += base
                .gene_indices()
                .iter()
                .zip(m.gene_indices())
                .filter(|(a, b)| **a != *b)
                .count();
        }
        let mean = changed as f64 / 1000.0;
        let expected = rate * c.gene_count() as f64;
        assert!((mean - expected).abs() / expected < 0.1, "mean {mean} vs {expected}");
    }

    #[test]
    fn crossover_with_itself_is_identity() {
        let c = cfg(6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ArchCode::sample(&c, &mut rng);
        assert_eq!(a.crossover(&a, &mut rng).unwrap(), a);
    }

    #[test]
    fn crossover_rejects_mismatched_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(full_code(3).crossover(&full_code(4), &mut rng).is_err());
    }

    #[test]
    fn crossover_gene_origin_is_balanced() {
        let a = full_code(6);
        let b = ArchCode {
            input: 0,
            layer_types: vec![5; 6],
            preds: vec![Some(0); 6],
            output: 1,
        };
        let diff: Vec<usize> = a
            .gene_indices()
            .iter()
            .zip(b.gene_indices())
            .enumerate()
            .filter(|(_, (x, y))| **x != *y)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut from_a = 0usize;
        for _ in 0..1000 {
            let child = a.crossover(&b, &mut rng).unwrap().gene_indices();
            let ga = a.gene_indices();
            from_a += diff.iter().filter(|&&i| child[i] == ga[i]).count();
        }
        let frac = from_a as f64 / (1000 * diff.len()) as f64;
        assert!((frac - 0.5).abs() < 0.05, "fraction {frac}");
    }

    #[test]
    fn text_form_round_trips() {
        let names = ["gcn", "sage", "sgc", "appnp", "gin", "gat"];
        let code = ArchCode {
            input: 3,
            layer_types: vec![0, 3, 0],
            preds: vec![Some(0), Some(1), None],
            output: 4,
        };
        let text = code.display_with(&names);
        assert_eq!(text, "IS3 | L1:gcn<-0 L2:appnp<-1 L3:None | OS4");
        assert_eq!(ArchCode::parse_with(&text, &names, 3).unwrap(), code);
        assert!(ArchCode::parse_with("IS3 | L1:foo<-0 | OS4", &names, 1).is_err());
        assert!(ArchCode::parse_with("IS9 | L1:gcn<-0 | OS4", &names, 1).is_err());
    }

    #[test]
    fn json_form_round_trips() {
        let mut code = full_code(3);
        code.preds[2] = None;
        let json = serde_json::to_string(&code).unwrap();
        assert_eq!(json, "[2,0,1,2,0,1,null,4]");
        let back: ArchCode = serde_json::from_str(&json).unwrap();
        assert_eq!(back, code);
    }

    fn arb_code(l: usize, k: usize) -> impl Strategy<Value = ArchCode> {
        let preds = (0..l)
            .map(|i| prop::option::of(0..=(i as u8)))
            .collect::<Vec<_>>();
        (0u8..5, prop::collection::vec(0..(k as u8), l), preds, 0u8..5).prop_map(|(input, layer_types, preds, output)| {
            ArchCode {
                input,
                layer_types,
                preds,
                output,
            }
        })
    }

    proptest! {
        #[test]
        fn variation_is_closed(a in arb_code(6, 6), b in arb_code(6, 6), seed in any::<u64>(), rate in 0.0f64..1.0) {
            let c = cfg(6, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (a.canonicalize(), b.canonicalize());
            let child = a.crossover(&b, &mut rng).unwrap();
            prop_assert!(child.validate(&c).is_ok());
            prop_assert!(child.is_canonical());
            let ca = a.gene_indices();
            let cb = b.gene_indices();
            for (i, g) in child.gene_indices().into_iter().enumerate() {
                prop_assert!(g == ca[i] || g == cb[i]);
            }
            let m = a.mutate(&c, rate, &mut rng);
            prop_assert!(m.validate(&c).is_ok());
            prop_assert!(m.is_canonical());
            let full = a.mutate(&c, 1.0, &mut rng);
            prop_assert!(full.validate(&c).is_ok());
        }

        #[test]
        fn canonical_codes_round_trip_through_both_encodings(a in arb_code(4, 6)) {
            let names = ["gcn", "sage", "sgc", "appnp", "gin", "gat"];
            let a = a.canonicalize();
            prop_assert_eq!(ArchCode::parse_with(&a.display_with(&names), &names, 4).unwrap(), a.clone());
            prop_assert_eq!(ArchCode::from_genes(&a.to_genes()).unwrap(), a.clone());
            prop_assert_eq!(a.canonicalize(), a);
        }
    }
}
