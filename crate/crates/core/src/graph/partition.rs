use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{edge_cut, GraphBundle, GraphError, Result};

/// Assignment of every node to one of `num_clients` parts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_clients: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_clients: usize) -> Result<Self> {
        let mut counts = vec![0usize; num_clients];
        for &a in &assignment {
            if a >= num_clients {
                return Err(GraphError::InvalidPartition(format!("client id {a} >= {num_clients}")));
            }
            counts[a] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(GraphError::InvalidPartition(format!("client {empty} has no nodes")));
        }
        Ok(Self {
            assignment,
            num_clients,
        })
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn part_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_clients];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn edge_cut(&self, g: &GraphBundle) -> usize {
        edge_cut(g, &self.assignment)
    }
}

fn check_k(g: &GraphBundle, k: usize) -> Result<()> {
    if k == 0 {
        return Err(GraphError::InvalidPartition("k must be at least 1".into()));
    }
    if k > g.num_nodes() {
        return Err(GraphError::InvalidPartition(format!(
            "k = {k} exceeds node count {}",
            g.num_nodes()
        )));
    }
    Ok(())
}

/// Size bounds for the ±20% balance rule. When the rule admits no integer
/// size (tiny graphs), fall back to floor/ceil of N/k.
fn balance_bounds(n: usize, k: usize) -> (usize, usize) {
    let target = n as f64 / k as f64;
    let lo = (0.8 * target).ceil() as usize;
    let hi = (1.2 * target).floor() as usize;
    if lo <= hi && lo >= 1 {
        (lo, hi)
    } else {
        ((target.floor() as usize).max(1), target.ceil() as usize)
    }
}

/// Farthest unassigned node (BFS over unassigned nodes) from `start`.
fn pseudo_peripheral(start: usize, neighbors: &[Vec<usize>], assigned: &[bool]) -> usize {
    let mut current = start;
    for _ in 0..2 {
        let mut dist = vec![usize::MAX; neighbors.len()];
        dist[current] = 0;
        let mut queue = VecDeque::from([current]);
        let mut last = current;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &u in &neighbors[v] {
                if !assigned[u] && dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        current = last;
    }
    current
}

/// Balanced low-edge-cut partitioner: parts are grown one at a time from a
/// pseudo-peripheral seed, always absorbing the frontier node with the most
/// edges into the growing part, and then refined by label propagation
/// (single-node moves with strictly positive gain that keep every part
/// within the balance bounds) until no such move exists.
pub fn partition_edgecut(g: &GraphBundle, k: usize, seed: u64) -> Result<Partition> {
    check_k(g, k)?;
    let n = g.num_nodes();
    let neighbors = g.neighbors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![usize::MAX; n];
    let mut assigned = vec![false; n];

    let base = n / k;
    let extra = n % k;
    for part in 0..k {
        let quota = base + usize::from(part < extra);
        if part == k - 1 {
            for v in 0..n {
                if !assigned[v] {
                    assignment[v] = part;
                    assigned[v] = true;
                }
            }
            break;
        }
        // connection count of each unassigned node into the current part
        let mut gain = vec![0usize; n];
        let mut frontier: Vec<usize> = Vec::new();
        let mut size = 0;
        while size < quota {
            let next = if frontier.is_empty() {
                let unassigned: Vec<usize> = (0..n).filter(|&v| !assigned[v]).collect();
                let start = unassigned[rng.gen_range(0..unassigned.len())];
                pseudo_peripheral(start, &neighbors, &assigned)
            } else {
                // highest connectivity, ties by lowest id for determinism
                let (pos, _) = frontier
                    .iter()
                    .enumerate()
                    .max_by(|(_, &a), (_, &b)| gain[a].cmp(&gain[b]).then(b.cmp(&a)))
                    .unwrap();
                frontier.swap_remove(pos)
            };
            assignment[next] = part;
            assigned[next] = true;
            size += 1;
            for &u in &neighbors[next] {
                if !assigned[u] {
                    if gain[u] == 0 {
                        frontier.push(u);
                    }
                    gain[u] += 1;
                }
            }
        }
    }

    refine(&neighbors, &mut assignment, k, &mut rng);
    Partition::new(assignment, k)
}

fn refine(neighbors: &[Vec<usize>], assignment: &mut [usize], k: usize, rng: &mut ChaCha8Rng) {
    let n = assignment.len();
    let (lo, hi) = balance_bounds(n, k);
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut conn = vec![0usize; k];
    for _pass in 0..100 {
        order.shuffle(rng);
        let mut moved = false;
        for &v in &order {
            let from = assignment[v];
            if sizes[from] <= lo {
                continue;
            }
            conn.iter_mut().for_each(|c| *c = 0);
            for &u in &neighbors[v] {
                conn[assignment[u]] += 1;
            }
            let best = (0..k)
                .filter(|&p| p != from && sizes[p] < hi && conn[p] > conn[from])
                .max_by(|&a, &b| conn[a].cmp(&conn[b]).then(b.cmp(&a)));
            if let Some(to) = best {
                assignment[v] = to;
                sizes[from] -= 1;
                sizes[to] += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}

/// Uniform random assignment with every part nonempty: a random set of k
/// nodes seeds one part each, the rest are assigned uniformly.
pub fn partition_random(g: &GraphBundle, k: usize, seed: u64) -> Result<Partition> {
    check_k(g, k)?;
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![0; n];
    for (i, &v) in order.iter().enumerate() {
        assignment[v] = if i < k { i } else { rng.gen_range(0..k) };
    }
    Partition::new(assignment, k)
}

#[cfg(test)]
mod tests {
    use super::super::test_graphs::*;
    use super::*;
    use crate::graph::synthetic::erdos_renyi;

    /// Smallest cut over all partitions of the path into two equal halves.
    fn brute_force_balanced_bisection(g: &GraphBundle) -> usize {
        let n = g.num_nodes();
        (0u32..(1 << n))
            .filter(|m| m.count_ones() as usize == n / 2)
            .map(|m| {
                let a: Vec<usize> = (0..n).map(|i| ((m >> i) & 1) as usize).collect();
                edge_cut(g, &a)
            })
            .min()
            .unwrap()
    }

    #[test]
    fn path_of_four_splits_in_the_middle() {
        let g = path(4);
        assert_eq!(brute_force_balanced_bisection(&g), 1);
        for seed in 0..10 {
            let p = partition_edgecut(&g, 2, seed).unwrap();
            assert_eq!(p.edge_cut(&g), 1);
            let a = p.assignment();
            assert_eq!(a[0], a[1]);
            assert_eq!(a[2], a[3]);
            assert_ne!(a[1], a[2]);
        }
    }

    #[test]
    fn single_part_has_no_cut() {
        let g = path(5);
        let p = partition_edgecut(&g, 1, 0).unwrap();
        assert_eq!(p.assignment(), &[0; 5]);
        assert_eq!(p.edge_cut(&g), 0);
    }

    #[test]
    fn disconnected_triangles_separate() {
        let g = from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        for seed in 0..10 {
            let p = partition_edgecut(&g, 2, seed).unwrap();
            assert_eq!(p.edge_cut(&g), 0, "seed {seed}");
            assert_eq!(p.part_sizes(), vec![3, 3]);
        }
    }

    #[test]
    fn too_many_parts_is_an_error() {
        let g = path(3);
        assert!(partition_edgecut(&g, 4, 0).is_err());
        assert!(partition_random(&g, 4, 0).is_err());
        assert!(partition_edgecut(&g, 0, 0).is_err());
    }

    #[test]
    fn edgecut_parts_are_balanced_and_locally_minimal() {
        for seed in 0..5 {
            let g = erdos_renyi(120, 0.05, seed);
            let k = 3;
            let p = partition_edgecut(&g, k, seed).unwrap();
            let (lo, hi) = balance_bounds(120, k);
            let sizes = p.part_sizes();
            assert!(sizes.iter().all(|&s| s >= lo && s <= hi), "{sizes:?}");
            let nbrs = g.neighbors();
            for v in 0..120 {
                let from = p.assignment()[v];
                if sizes[from] <= lo {
                    continue;
                }
                let mut conn = vec![0; k];
                for &u in &nbrs[v] {
                    conn[p.assignment()[u]] += 1;
                }
                for to in 0..k {
                    if to != from && sizes[to] < hi {
                        assert!(conn[to] <= conn[from], "improving move left for node {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn random_partition_is_deterministic() {
        let g = erdos_renyi(50, 0.1, 1);
        assert_eq!(partition_random(&g, 3, 7).unwrap(), partition_random(&g, 3, 7).unwrap());
    }

    #[test]
    fn random_partition_with_k_equal_n_is_singletons() {
        let g = path(7);
        let p = partition_random(&g, 7, 3).unwrap();
        assert_eq!(p.part_sizes(), vec![1; 7]);
    }

    #[test]
    fn random_cross_edge_fraction_matches_expectation() {
        let k = 3;
        let g = erdos_renyi(300, 0.05, 99);
        let mean: f64 = (0..20)
            .map(|seed| partition_random(&g, k, seed).unwrap().edge_cut(&g) as f64 / g.edges().len() as f64)
            .sum::<f64>()
            / 20.0;
        let expected = (k - 1) as f64 / k as f64;
        assert!((mean - expected).abs() / expected < 0.1, "mean {mean}");
    }

    #[test]
    fn edgecut_beats_random_in_median() {
        let g = crate::graph::synthetic::sbm_bundle(&crate::graph::synthetic::SbmSpec::small(3), 4);
        let mut cut_e: Vec<usize> = (0..20).map(|s| partition_edgecut(&g, 3, s).unwrap().edge_cut(&g)).collect();
        let mut cut_r: Vec<usize> = (0..20).map(|s| partition_random(&g, 3, s).unwrap().edge_cut(&g)).collect();
        cut_e.sort();
        cut_r.sort();
        assert!(cut_e[10] <= cut_r[10]);
    }
}
