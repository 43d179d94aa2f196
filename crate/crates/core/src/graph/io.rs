//! Canonical bundle directory:
//!
//! | file          | content                                                   |
//! |---------------|-----------------------------------------------------------|
//! | `meta.json`   | `{"num_nodes", "num_features", "num_classes"}`            |
//! | `edges.tsv`   | `u<TAB>v` per line, 0-based, undirected, listed once      |
//! | `features.f32`| row-major little-endian `f32`, N·F values                 |
//! | `labels.u16`  | little-endian `u16`, N values                             |
//! | `splits.json` | `{"train": [...], "val": [...], "test": [...]}`           |
//!
//! Shard output adds `idmap.json` (array: local id → global id).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphBundle, GraphError, GraphShard, Result, Splits};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(GraphError::MissingFile(path.display().to_string()));
    }
    fs::read(&path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(file: &str, reason: impl ToString) -> GraphError {
    GraphError::Malformed {
        file: file.into(),
        reason: reason.to_string(),
    }
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_slice(&read(dir, "meta.json")?).map_err(|e| malformed("meta.json", e))?;

    let edge_text = String::from_utf8(read(dir, "edges.tsv")?).map_err(|e| malformed("edges.tsv", e))?;
    let mut edges = Vec::new();
    for (lineno, line) in edge_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let mut next = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| malformed("edges.tsv", format!("line {} has fewer than two ids", lineno + 1)))?
                .trim()
                .parse()
                .map_err(|e| malformed("edges.tsv", format!("line {}: {e}", lineno + 1)))
        };
        let (u, v) = (next()?, next()?);
        edges.push((u, v));
    }

    let feature_bytes = read(dir, "features.f32")?;
    let expected = 4 * meta.num_nodes * meta.num_features;
    if feature_bytes.len() != expected {
        return Err(GraphError::FeatureLength {
            got: feature_bytes.len(),
            expected,
        });
    }
    let features = feature_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let label_bytes = read(dir, "labels.u16")?;
    if label_bytes.len() != 2 * meta.num_nodes {
        return Err(malformed(
            "labels.u16",
            format!("{} bytes for {} nodes", label_bytes.len(), meta.num_nodes),
        ));
    }
    let labels = label_bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let splits: Splits = serde_json::from_slice(&read(dir, "splits.json")?).map_err(|e| malformed("splits.json", e))?;

    GraphBundle::new(
        meta.num_nodes,
        meta.num_features,
        meta.num_classes,
        &edges,
        features,
        labels,
        splits,
    )
}

pub fn write_bundle(g: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: g.num_classes(),
    };
    write(dir, "meta.json", &serde_json::to_vec(&meta).expect("meta serialises"))?;

    let mut edges = String::with_capacity(g.edges().len() * 12);
    for &(u, v) in g.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write(dir, "edges.tsv", edges.as_bytes())?;

    let features: Vec<u8> = g.features().iter().flat_map(|v| v.to_le_bytes()).collect();
    write(dir, "features.f32", &features)?;
    let labels: Vec<u8> = g.labels().iter().flat_map(|v| v.to_le_bytes()).collect();
    write(dir, "labels.u16", &labels)?;
    write(dir, "splits.json", &serde_json::to_vec(g.splits()).expect("splits serialise"))?;
    Ok(())
}

/// Writes `client_<i>/` bundle directories, each with its `idmap.json`.
pub fn write_shards(shards: &[GraphShard], dir: impl AsRef<Path>) -> Result<()> {
    for shard in shards {
        let sub = dir.as_ref().join(format!("client_{}", shard.client_id));
        write_bundle(&shard.bundle, &sub)?;
        write(&sub, "idmap.json", &serde_json::to_vec(&shard.local_to_global).expect("idmap serialises"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::*;
    use super::*;
    use crate::graph::synthetic::{sbm_bundle, SbmSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let g = sbm_bundle(&SbmSpec::small(3), 9);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&g, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, g);
        let again = tempfile::tempdir().unwrap();
        write_bundle(&back, again.path()).unwrap();
        for name in ["meta.json", "edges.tsv", "features.f32", "labels.u16", "splits.json"] {
            assert_eq!(
                fs::read(dir.path().join(name)).unwrap(),
                fs::read(again.path().join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn load_symmetrises_and_deduplicates() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&from_edges(3, &[]), dir.path()).unwrap();
        fs::write(dir.path().join("edges.tsv"), "0\t1\n1\t0\n2\t1\n0\t1\n").unwrap();
        let g = load_bundle(dir.path()).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let g = from_edges(2, &[(0, 1)]);
        write_bundle(&g, dir.path()).unwrap();

        fs::write(dir.path().join("labels.u16"), [0u8, 0, 2, 0]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::OutOfRange { what: "label", .. })));

        write_bundle(&g, dir.path()).unwrap();
        fs::write(dir.path().join("features.f32"), [0u8; 7]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::FeatureLength { got: 7, expected: 8 })));

        write_bundle(&g, dir.path()).unwrap();
        fs::write(dir.path().join("edges.tsv"), "0\t5\n").unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::OutOfRange { .. })));

        write_bundle(&g, dir.path()).unwrap();
        fs::remove_file(dir.path().join("splits.json")).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(GraphError::MissingFile(_))));
    }
}
