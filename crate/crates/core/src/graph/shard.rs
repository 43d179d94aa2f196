use super::{GraphBundle, Partition, Splits};

/// One client's private induced subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphShard {
    pub client_id: usize,
    pub bundle: GraphBundle,
    pub local_to_global: Vec<usize>,
}

/// Splits `g` into one induced subgraph per client. Cross-partition edges
/// are dropped; split membership is intersected with each shard.
pub fn induce_shards(g: &GraphBundle, p: &Partition) -> Vec<GraphShard> {
    let k = p.num_clients();
    let assignment = p.assignment();
    let mut local_to_global = vec![Vec::new(); k];
    let mut global_to_local = vec![usize::MAX; g.num_nodes()];
    for (v, &part) in assignment.iter().enumerate() {
        global_to_local[v] = local_to_global[part].len();
        local_to_global[part].push(v);
    }

    let mut shard_edges = vec![Vec::new(); k];
    let mut dropped = 0usize;
    for &(u, v) in g.edges() {
        if assignment[u] == assignment[v] {
            shard_edges[assignment[u]].push((global_to_local[u], global_to_local[v]));
        } else {
            dropped += 1;
        }
    }
    log::info!("induce_shards: dropped {dropped} cross-partition edges across {k} shards");

    let remap = |nodes: &[usize], part: usize| -> Vec<usize> {
        nodes
            .iter()
            .filter(|&&v| assignment[v] == part)
            .map(|&v| global_to_local[v])
            .collect()
    };

    (0..k)
        .map(|part| {
            let ids = &local_to_global[part];
            let f = g.num_features();
            let mut features = Vec::with_capacity(ids.len() * f);
            for &v in ids {
                features.extend_from_slice(g.feature_row(v));
            }
            let labels = ids.iter().map(|&v| g.labels()[v]).collect();
            let splits = Splits {
                train: remap(&g.splits().train, part),
                val: remap(&g.splits().val, part),
                test: remap(&g.splits().test, part),
            };
            let bundle = GraphBundle::new(
                ids.len(),
                f,
                g.num_classes(),
                &shard_edges[part],
                features,
                labels,
                splits,
            )
            .expect("induced subgraph of a valid bundle is valid");
            GraphShard {
                client_id: part,
                bundle,
                local_to_global: ids.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::*;
    use super::*;
    use crate::graph::synthetic::{sbm_bundle, SbmSpec};
    use crate::graph::{partition_edgecut, partition_random};
    use proptest::prelude::*;

    #[test]
    fn single_shard_is_the_whole_graph() {
        let g = sbm_bundle(&SbmSpec::small(2), 1);
        let p = Partition::new(vec![0; g.num_nodes()], 1).unwrap();
        let shards = induce_shards(&g, &p);
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].bundle, g);
        assert_eq!(shards[0].local_to_global, (0..g.num_nodes()).collect::<Vec<_>>());
    }

    #[test]
    fn path_split_drops_the_middle_edge() {
        let g = path(4);
        let p = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        let shards = induce_shards(&g, &p);
        assert_eq!(shards[0].bundle.edges(), &[(0, 1)]);
        assert_eq!(shards[1].bundle.edges(), &[(0, 1)]);
        assert_eq!(shards[1].local_to_global, vec![2, 3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn shards_partition_nodes_splits_and_edges(seed in 0u64..1000, k in 1usize..5, random in any::<bool>()) {
            let g = sbm_bundle(&SbmSpec::small(3), seed);
            let p = if random { partition_random(&g, k, seed).unwrap() } else { partition_edgecut(&g, k, seed).unwrap() };
            let shards = induce_shards(&g, &p);

            let mut seen = vec![false; g.num_nodes()];
            for s in &shards {
                for &v in &s.local_to_global {
                    prop_assert!(!seen[v]);
                    seen[v] = true;
                }
            }
            prop_assert!(seen.iter().all(|&x| x));

            let val_total: usize = shards.iter().map(|s| s.bundle.splits().val.len()).sum();
            prop_assert_eq!(val_total, g.splits().val.len());
            let train_total: usize = shards.iter().map(|s| s.bundle.splits().train.len()).sum();
            prop_assert_eq!(train_total, g.splits().train.len());

            let kept: usize = shards.iter().map(|s| s.bundle.edges().len()).sum();
            prop_assert_eq!(g.edges().len() - kept, p.edge_cut(&g));

            for s in &shards {
                for &(u, v) in s.bundle.edges() {
                    let (gu, gv) = (s.local_to_global[u], s.local_to_global[v]);
                    prop_assert!(g.edges().binary_search(&(gu.min(gv), gu.max(gv))).is_ok());
                }
                for (l, &gid) in s.local_to_global.iter().enumerate() {
                    prop_assert_eq!(s.bundle.labels()[l], g.labels()[gid]);
                    prop_assert_eq!(s.bundle.feature_row(l), g.feature_row(gid));
                }
            }
        }
    }
}
