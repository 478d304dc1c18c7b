//! Scale-free overlay, leader roles and shard placement.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Digest;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("invalid overlay parameters: {0}")]
    InvalidParams(String),
    #[error("invalid placement parameter: {0}")]
    InvalidPolicyParam(String),
    #[error("edge list parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected simple graph produced by preferential attachment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlayGraph {
    node_count: usize,
    m0: usize,
    m: usize,
    seed: u64,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl OverlayGraph {
    /// Builds a graph from an explicit edge list, rejecting self-loops and
    /// duplicate edges.
    pub fn from_edges(
        node_count: usize,
        m0: usize,
        m: usize,
        seed: u64,
        edges: Vec<(usize, usize)>,
    ) -> Result<OverlayGraph, TopologyError> {
        let mut adjacency = vec![Vec::new(); node_count];
        let mut seen = BTreeSet::new();
        for &(u, v) in &edges {
            if u >= node_count || v >= node_count {
                return Err(TopologyError::InvalidParams(format!(
                    "edge ({u},{v}) outside {node_count} nodes"
                )));
            }
            if u == v {
                return Err(TopologyError::InvalidParams(format!("self-loop on {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(TopologyError::InvalidParams(format!(
                    "duplicate edge ({u},{v})"
                )));
            }
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in adjacency.iter_mut() {
            list.sort_unstable();
        }
        Ok(OverlayGraph {
            node_count,
            m0,
            m,
            seed,
            edges,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edges.len() as f64 / self.node_count as f64
    }

    /// Hop distances from `source`; unreachable nodes get `u32::MAX`.
    pub fn bfs(&self, source: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.node_count];
        let mut queue = VecDeque::from([source]);
        dist[source] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_connected(&self) -> bool {
        self.node_count == 0 || self.bfs(0).iter().all(|d| *d != u32::MAX)
    }

    /// Text form: header `N m0 m seed`, then one `u v` per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{} {} {} {}\n", self.node_count, self.m0, self.m, self.seed);
        for (u, v) in &self.edges {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }

    pub fn from_edge_list(text: &str) -> Result<OverlayGraph, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let fields = parse_fields(header, 1)?;
        let [n, m0, m, seed]: [u64; 4] = fields.try_into().map_err(|_| TopologyError::Parse {
            line: 1,
            msg: "header must be `N m0 m seed`".into(),
        })?;
        let mut edges = Vec::new();
        for (i, line) in lines {
            let fields = parse_fields(line, i + 1)?;
            let [u, v]: [u64; 2] = fields.try_into().map_err(|_| TopologyError::Parse {
                line: i + 1,
                msg: "expected `u v`".into(),
            })?;
            edges.push((u as usize, v as usize));
        }
        OverlayGraph::from_edges(n as usize, m0 as usize, m as usize, seed, edges)
    }
}

fn parse_fields(line: &str, lineno: usize) -> Result<Vec<u64>, TopologyError> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<u64>().map_err(|e| TopologyError::Parse {
                line: lineno,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect()
}

/// Barabási–Albert preferential attachment: a clique on `m0` seed nodes,
/// then each new node links to `m` distinct existing nodes chosen with
/// probability proportional to their current degree.
pub fn generate_scale_free(
    n: usize,
    m0: usize,
    m: usize,
    seed: u64,
) -> Result<OverlayGraph, TopologyError> {
    if !(1 <= m && m <= m0 && m0 < n) {
        return Err(TopologyError::InvalidParams(format!(
            "need 1 <= m <= m0 < N, got N={n} m0={m0} m={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(m0 * (m0 - 1) / 2 + (n - m0) * m);
    // one entry per edge endpoint, so uniform draws are degree-proportional
    let mut endpoints: Vec<usize> = Vec::new();
    for u in 0..m0 {
        for v in u + 1..m0 {
            edges.push((u, v));
            endpoints.extend([u, v]);
        }
    }
    for new in m0..n {
        let mut targets = BTreeSet::new();
        while targets.len() < m {
            let t = if endpoints.is_empty() {
                rng.random_range(0..new)
            } else {
                endpoints[rng.random_range(0..endpoints.len())]
            };
            targets.insert(t);
        }
        for t in targets {
            edges.push((t, new));
            endpoints.extend([t, new]);
        }
    }
    OverlayGraph::from_edges(n, m0, m, seed, edges)
}

/// Leader set: the `⌈fraction·N⌉` highest-degree nodes, ties to lower id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub leaders: Vec<usize>,
}

impl Roles {
    pub fn is_leader(&self, node: usize) -> bool {
        self.leaders.contains(&node)
    }
}

/// Nodes sorted by descending degree, ties broken by ascending id.
pub fn degree_order(graph: &OverlayGraph) -> Vec<usize> {
    let mut nodes: Vec<usize> = (0..graph.node_count()).collect();
    nodes.sort_by_key(|&n| (std::cmp::Reverse(graph.degree(n)), n));
    nodes
}

pub fn assign_roles(graph: &OverlayGraph, leader_fraction: f64) -> Roles {
    let n = graph.node_count();
    let count = ((leader_fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n.max(1));
    let mut leaders: Vec<usize> = degree_order(graph).into_iter().take(count).collect();
    leaders.sort_unstable();
    Roles { leaders }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlacementPolicy {
    /// Home node `key mod N` plus a replica on its nearest leader.
    GftLocality,
    /// `copies` distinct nodes drawn by a seeded RNG.
    RandomDup { copies: usize },
    /// Every node holds every shard.
    FullLedger,
}

impl PlacementPolicy {
    pub fn label(&self) -> String {
        match self {
            PlacementPolicy::GftLocality => "gft_locality".into(),
            PlacementPolicy::RandomDup { copies } => format!("random_dup({copies})"),
            PlacementPolicy::FullLedger => "full_ledger".into(),
        }
    }
}

/// Shard key → holding nodes (sorted, distinct).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementMap {
    pub node_count: usize,
    pub leaders: Vec<usize>,
    pub policy: PlacementPolicy,
    pub assignments: BTreeMap<Digest, Vec<usize>>,
}

impl PlacementMap {
    pub fn holders(&self, key: &Digest) -> Option<&[usize]> {
        self.assignments.get(key).map(Vec::as_slice)
    }
}

/// `key mod N`.
pub fn home_node(key: &Digest, node_count: usize) -> usize {
    (key.prefix_u64() % node_count as u64) as usize
}

/// For every node, the closest leader by hop count (ties to lower id).
pub fn nearest_leaders(graph: &OverlayGraph, roles: &Roles) -> Vec<usize> {
    let mut best: Vec<(u32, usize)> = vec![(u32::MAX, usize::MAX); graph.node_count()];
    for &leader in &roles.leaders {
        for (node, d) in graph.bfs(leader).into_iter().enumerate() {
            if (d, leader) < best[node] {
                best[node] = (d, leader);
            }
        }
    }
    best.into_iter().map(|(_, l)| l).collect()
}

pub fn place_shards(
    graph: &OverlayGraph,
    roles: &Roles,
    keys: &[Digest],
    policy: PlacementPolicy,
    seed: u64,
) -> Result<PlacementMap, TopologyError> {
    let n = graph.node_count();
    if n == 0 || keys.is_empty() {
        return Err(TopologyError::InvalidPolicyParam(
            "empty graph or key set".into(),
        ));
    }
    let mut assignments = BTreeMap::new();
    match policy {
        PlacementPolicy::GftLocality => {
            let nearest = nearest_leaders(graph, roles);
            for key in keys {
                let home = home_node(key, n);
                let mut nodes = vec![home, nearest[home]];
                nodes.sort_unstable();
                nodes.dedup();
                assignments.insert(*key, nodes);
            }
        }
        PlacementPolicy::RandomDup { copies } => {
            if copies < 1 || copies > n {
                return Err(TopologyError::InvalidPolicyParam(format!(
                    "random_dup({copies}) needs 1 <= d <= N={n}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for key in keys {
                let mut nodes = sample(&mut rng, n, copies).into_vec();
                nodes.sort_unstable();
                assignments.insert(*key, nodes);
            }
        }
        PlacementPolicy::FullLedger => {
            let all: Vec<usize> = (0..n).collect();
            for key in keys {
                assignments.insert(*key, all.clone());
            }
        }
    }
    Ok(PlacementMap {
        node_count: n,
        leaders: roles.leaders.clone(),
        policy,
        assignments,
    })
}

/// Total stored copies divided by distinct shards.
pub fn replication_factor(map: &PlacementMap) -> f64 {
    if map.assignments.is_empty() {
        return 0.0;
    }
    let copies: usize = map.assignments.values().map(Vec::len).sum();
    copies as f64 / map.assignments.len() as f64
}

/// Bytes held by each node, given a size per shard key.
pub fn storage_per_node(map: &PlacementMap, size_of: impl Fn(&Digest) -> u64) -> Vec<u64> {
    let mut per_node = vec![0u64; map.node_count];
    for (key, nodes) in &map.assignments {
        let size = size_of(key);
        for &n in nodes {
            per_node[n] += size;
        }
    }
    per_node
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys(n: usize) -> Vec<Digest> {
        (0..n)
            .map(|i| Digest::of(&(i as u64).to_le_bytes()))
            .collect()
    }

    #[test]
    fn edge_count_follows_attachment_arithmetic() {
        let g = generate_scale_free(20, 3, 2, 7).unwrap();
        assert_eq!(g.edges().len(), 3 + 17 * 2);
        assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.edges().len());
        assert!(g.is_connected());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_scale_free(50, 4, 3, 99).unwrap();
        let b = generate_scale_free(50, 4, 3, 99).unwrap();
        assert_eq!(a.edges(), b.edges());
        assert_ne!(
            a.edges(),
            generate_scale_free(50, 4, 3, 100).unwrap().edges()
        );
    }

    #[test]
    fn invalid_params_rejected() {
        for (n, m0, m) in [(5, 5, 1), (10, 2, 3), (10, 3, 0)] {
            assert!(matches!(
                generate_scale_free(n, m0, m, 0),
                Err(TopologyError::InvalidParams(_))
            ));
        }
        assert!(generate_scale_free(4, 1, 1, 0).unwrap().is_connected());
    }

    #[test]
    fn hubs_emerge() {
        // simulation oracle: how often does the max degree reach 3x the mean?
        let hits = (0..50u64)
            .filter(|&seed| {
                let g = generate_scale_free(200, 3, 2, seed).unwrap();
                let max = *g.degrees().iter().max().unwrap() as f64;
                max >= 3.0 * g.mean_degree()
            })
            .count();
        assert!(hits >= 45, "hubs in {hits}/50 seeds");
    }

    #[test]
    fn all_leaders_at_full_fraction() {
        let g = generate_scale_free(20, 3, 2, 1).unwrap();
        assert_eq!(assign_roles(&g, 1.0).leaders, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn leaders_are_top_degree() {
        let g = generate_scale_free(20, 3, 2, 1).unwrap();
        let roles = assign_roles(&g, 0.1);
        assert_eq!(roles.leaders.len(), 2);
        let mut by_degree = degree_order(&g);
        by_degree.truncate(2);
        by_degree.sort_unstable();
        assert_eq!(roles.leaders, by_degree);
        let min_leader = roles.leaders.iter().map(|&l| g.degree(l)).min().unwrap();
        assert!((0..20)
            .filter(|n| !roles.is_leader(*n))
            .all(|n| g.degree(n) <= min_leader));
    }

    #[test]
    fn degree_ties_go_to_lower_id() {
        // degrees: 0:3, 3:2, 4:2, others 1
        let edges = vec![(0, 1), (0, 2), (0, 3), (3, 4), (4, 5)];
        let g = OverlayGraph::from_edges(6, 0, 0, 0, edges).unwrap();
        // ⌈0.3·6⌉ = 2: node 0 then the lower of the tied {3, 4}
        assert_eq!(assign_roles(&g, 0.3).leaders, vec![0, 3]);

        let edges = vec![
            (4, 0),
            (4, 1),
            (9, 2),
            (9, 3),
            (4, 5),
            (9, 6),
            (5, 7),
            (6, 8),
        ];
        let g = OverlayGraph::from_edges(10, 0, 0, 0, edges).unwrap();
        assert_eq!((g.degree(4), g.degree(9)), (3, 3));
        assert_eq!(assign_roles(&g, 0.1).leaders, vec![4]);
    }

    #[test]
    fn full_ledger_places_everywhere() {
        let g = generate_scale_free(20, 3, 2, 2).unwrap();
        let roles = assign_roles(&g, 0.1);
        let map = place_shards(&g, &roles, &keys(50), PlacementPolicy::FullLedger, 0).unwrap();
        assert!(map.assignments.values().all(|v| v.len() == 20));
        assert_eq!(replication_factor(&map), 20.0);
    }

    #[test]
    fn random_dup_places_exactly_d() {
        let g = generate_scale_free(20, 3, 2, 2).unwrap();
        let roles = assign_roles(&g, 0.1);
        let map = place_shards(
            &g,
            &roles,
            &keys(200),
            PlacementPolicy::RandomDup { copies: 3 },
            5,
        )
        .unwrap();
        for nodes in map.assignments.values() {
            assert_eq!(nodes.len(), 3);
            assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(replication_factor(&map), 3.0);
        for d in [0, 21] {
            assert!(matches!(
                place_shards(
                    &g,
                    &roles,
                    &keys(2),
                    PlacementPolicy::RandomDup { copies: d },
                    5
                ),
                Err(TopologyError::InvalidPolicyParam(_))
            ));
        }
    }

    #[test]
    fn gft_locality_copy_count_matches_brute_force() {
        let g = generate_scale_free(20, 3, 2, 3).unwrap();
        let roles = assign_roles(&g, 0.1);
        let ks = keys(1600);
        let map = place_shards(&g, &roles, &ks, PlacementPolicy::GftLocality, 0).unwrap();
        // brute force: per shard, BFS from the home node and pick the leader by (hops, id)
        let mut copies = 0usize;
        for k in &ks {
            let home = (k.prefix_u64() % 20) as usize;
            let dist = g.bfs(home);
            let leader = *roles.leaders.iter().min_by_key(|&&l| (dist[l], l)).unwrap();
            copies += if leader == home { 1 } else { 2 };
            assert!(map.holders(k).unwrap().contains(&home));
            assert!(map.holders(k).unwrap().contains(&leader));
        }
        let rf = replication_factor(&map);
        assert_eq!(rf, copies as f64 / 1600.0);
        assert!((1.0..=2.0).contains(&rf));
    }

    #[test]
    fn single_copy_factor_is_one() {
        let g = OverlayGraph::from_edges(1, 0, 0, 0, vec![]).unwrap();
        let roles = assign_roles(&g, 0.1);
        let map = place_shards(&g, &roles, &keys(1), PlacementPolicy::GftLocality, 0).unwrap();
        assert_eq!(replication_factor(&map), 1.0);
        assert_eq!(storage_per_node(&map, |_| 10), vec![10]);
    }

    #[test]
    fn storage_sums_copies() {
        let g = generate_scale_free(20, 3, 2, 4).unwrap();
        let roles = assign_roles(&g, 0.1);
        let ks = keys(100);
        let map =
            place_shards(&g, &roles, &ks, PlacementPolicy::RandomDup { copies: 3 }, 1).unwrap();
        let per_node = storage_per_node(&map, |_| 7);
        assert_eq!(per_node.iter().sum::<u64>(), 7 * 300);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = generate_scale_free(30, 3, 2, 8).unwrap();
        let text = g.to_edge_list();
        assert!(text.starts_with("30 3 2 8\n"));
        assert_eq!(OverlayGraph::from_edge_list(&text).unwrap(), g);
        assert!(matches!(
            OverlayGraph::from_edge_list("3 1 1 0\n0 x\n"),
            Err(TopologyError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn generated_graphs_are_simple_and_connected(n in 3usize..80, m0 in 1usize..5, m in 1usize..5, seed in any::<u64>()) {
            prop_assume!(m <= m0 && m0 < n);
            let g = generate_scale_free(n, m0, m, seed).unwrap();
            prop_assert!(g.is_connected());
            prop_assert_eq!(g.degrees().iter().sum::<usize>(), 2 * g.edges().len());
            prop_assert!(g.edges().iter().all(|(u, v)| u != v));
        }

        #[test]
        fn replication_ordering_at_twenty_nodes(seed in any::<u64>()) {
            let g = generate_scale_free(20, 3, 2, seed).unwrap();
            let roles = assign_roles(&g, 0.1);
            let ks = keys(300);
            let rf = |p| replication_factor(&place_shards(&g, &roles, &ks, p, seed).unwrap());
            let gft = rf(PlacementPolicy::GftLocality);
            let rnd = rf(PlacementPolicy::RandomDup { copies: 3 });
            let full = rf(PlacementPolicy::FullLedger);
            prop_assert!(gft < rnd && rnd < full);
        }

        #[test]
        fn placement_is_deterministic(seed in any::<u64>()) {
            let g = generate_scale_free(20, 3, 2, seed).unwrap();
            let roles = assign_roles(&g, 0.1);
            let ks = keys(40);
            for p in [PlacementPolicy::GftLocality, PlacementPolicy::RandomDup { copies: 3 }, PlacementPolicy::FullLedger] {
                prop_assert_eq!(place_shards(&g, &roles, &ks, p, seed).unwrap(), place_shards(&g, &roles, &ks, p, seed).unwrap());
            }
        }
    }
}
