//! Community detection over the association graph and partition comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::association::AssociationGraph;
use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::seed;

const GAIN_EPS: f64 = 1e-12;
const MAX_PASSES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Louvain,
    LabelPropagation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunityConfig {
    pub backend: Backend,
    /// Modularity resolution (Louvain only).
    pub resolution: f64,
}

impl Default for CommunityConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Louvain,
            resolution: 1.0,
        }
    }
}

impl CommunityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Disjoint groups covering every client. Groups are sorted by their
/// smallest member; members are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunityPartition {
    pub groups: Vec<Vec<ClientId>>,
    pub assignment: BTreeMap<ClientId, usize>,
}

impl CommunityPartition {
    pub fn from_groups(groups: Vec<Vec<ClientId>>) -> Result<Self> {
        let mut groups: Vec<Vec<ClientId>> = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|mut g| {
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort_unstable_by_key(|g| g[0]);
        let mut assignment = BTreeMap::new();
        for (k, g) in groups.iter().enumerate() {
            for &m in g {
                if assignment.insert(m, k).is_some() {
                    return Err(Error::InvalidData(format!(
                        "client {m} appears in two groups"
                    )));
                }
            }
        }
        Ok(Self { groups, assignment })
    }

    /// Groups clients by a key, e.g. the ground-truth inlier class.
    pub fn from_labels<K: Ord>(labels: impl IntoIterator<Item = (ClientId, K)>) -> Self {
        let mut by_key: BTreeMap<K, Vec<ClientId>> = BTreeMap::new();
        for (id, k) in labels {
            by_key.entry(k).or_default().push(id);
        }
        Self::from_groups(by_key.into_values().collect()).expect("keys give disjoint groups")
    }

    /// Ideal partition: one group per inlier class.
    pub fn ideal(ids: &[ClientId]) -> Self {
        Self::from_labels(ids.iter().map(|&id| (id, id.inlier_class)))
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, id: ClientId) -> Option<&[ClientId]> {
        self.assignment.get(&id).map(|&k| self.groups[k].as_slice())
    }

    /// Body lines `index: member member ...`.
    fn body(&self) -> String {
        let mut out = String::new();
        for (k, g) in self.groups.iter().enumerate() {
            let members: Vec<String> = g.iter().map(ToString::to_string).collect();
            writeln!(out, "{k}: {}", members.join(" ")).expect("write to string");
        }
        out
    }

    pub fn to_text(&self, source: Provenance) -> String {
        let body = self.body();
        format!(
            "# fedcomm partition v1\n# source: {}\n# digest: {:016x}\n{body}",
            source.as_str(),
            digest(&body)
        )
    }

    /// Parses a partition file. A file is reported as [`Provenance::Detected`]
    /// only when it claims so and its digest matches its contents.
    pub fn from_text(text: &str) -> Result<(Self, Provenance)> {
        let mut source = None;
        let mut recorded = None;
        let mut groups = Vec::new();
        let mut lines = text.lines();
        match lines.next() {
            Some("# fedcomm partition v1") => {}
            other => {
                return Err(Error::InvalidData(format!(
                    "not a partition file (header {other:?})"
                )))
            }
        }
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.split_once(':') {
                    match k.trim() {
                        "source" => source = Some(v.trim().to_string()),
                        "digest" => recorded = u64::from_str_radix(v.trim(), 16).ok(),
                        _ => {}
                    }
                }
                continue;
            }
            let (_, members) = line
                .split_once(':')
                .ok_or_else(|| Error::InvalidData(format!("bad partition line `{line}`")))?;
            let group = members
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<Vec<ClientId>>>()?;
            groups.push(group);
        }
        let partition = Self::from_groups(groups)?;
        let provenance = if source.as_deref() == Some("detected")
            && recorded == Some(digest(&partition.body()))
        {
            Provenance::Detected
        } else {
            Provenance::External
        };
        Ok((partition, provenance))
    }

    pub fn digest(&self) -> u64 {
        digest(&self.body())
    }
}

fn digest(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Detected,
    External,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Detected => "detected",
            Provenance::External => "external",
        }
    }
}

// ---------------------------------------------------------------------------
// Louvain

/// Weighted undirected graph. `self_loops[i]` is the diagonal entry A_ii,
/// i.e. twice the weight internal to an aggregated node.
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
}

impl WeightedGraph {
    fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push((b, 1.0));
            adj[b].push((a, 1.0));
        }
        Self {
            adj,
            self_loops: vec![0.0; n],
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn degree(&self, i: usize) -> f64 {
        self.adj[i].iter().map(|&(_, w)| w).sum::<f64>() + self.self_loops[i]
    }

    fn aggregate(&self, comm: &[usize], n_comm: usize) -> Self {
        let mut weights: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_comm];
        let mut self_loops = vec![0.0; n_comm];
        for i in 0..self.len() {
            let ci = comm[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                let cj = comm[j];
                if ci == cj {
                    self_loops[ci] += w;
                } else {
                    *weights[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        Self {
            adj: weights
                .into_iter()
                .map(|m| m.into_iter().collect())
                .collect(),
            self_loops,
        }
    }
}

/// Relabels communities to `0..k` in order of first appearance.
fn renumber(comm: &mut [usize]) -> usize {
    let mut map = BTreeMap::new();
    for c in comm.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Local-moving phase. Returns the community of every node and whether any
/// node moved.
fn local_moves(g: &WeightedGraph, resolution: f64, seed: u64) -> (Vec<usize>, bool) {
    let n = g.len();
    let degree: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let two_m: f64 = degree.iter().sum();
    let mut comm: Vec<usize> = (0..n).collect();
    if two_m <= 0.0 {
        return (comm, false);
    }
    let mut tot = degree.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut moved_any = false;
    for pass in 0..MAX_PASSES {
        order.shuffle(&mut seed::rng(seed::derive(
            seed,
            "louvain-order",
            &[pass as u64],
        )));
        let mut moved = false;
        for &i in &order {
            let ci = comm[i];
            let ki = degree[i];
            let mut links: BTreeMap<usize, f64> = BTreeMap::new();
            for &(j, w) in &g.adj[i] {
                *links.entry(comm[j]).or_insert(0.0) += w;
            }
            tot[ci] -= ki;
            let gain = |c: usize, w: f64| w - resolution * tot[c] * ki / two_m;
            let stay = gain(ci, links.get(&ci).copied().unwrap_or(0.0));
            let mut best = ci;
            let mut best_gain = stay;
            for (&c, &w) in &links {
                let g = gain(c, w);
                let better = g > best_gain + GAIN_EPS
                    || ((g - best_gain).abs() <= GAIN_EPS && c < best && g > stay + GAIN_EPS);
                if better {
                    best = c;
                    best_gain = g;
                }
            }
            tot[best] += ki;
            if best != ci {
                comm[i] = best;
                moved = true;
                moved_any = true;
            }
        }
        if !moved {
            break;
        }
    }
    (comm, moved_any)
}

fn louvain(graph: &AssociationGraph, resolution: f64, seed: u64) -> Vec<usize> {
    let mut g = WeightedGraph::from_edges(graph.n_nodes(), &graph.edges);
    let mut membership: Vec<usize> = (0..graph.n_nodes()).collect();
    for level in 0.. {
        let (mut comm, moved) =
            local_moves(&g, resolution, seed::derive(seed, "louvain", &[level]));
        if !moved {
            break;
        }
        let k = renumber(&mut comm);
        for m in membership.iter_mut() {
            *m = comm[*m];
        }
        g = g.aggregate(&comm, k);
    }
    membership
}

fn label_propagation(graph: &AssociationGraph, seed: u64) -> Vec<usize> {
    let adj = graph.adjacency();
    let n = adj.len();
    let mut labels: Vec<usize> = (0..n).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for sweep in 0..MAX_PASSES {
        order.shuffle(&mut seed::rng(seed::derive(
            seed,
            "lpa-order",
            &[sweep as u64],
        )));
        let mut changed = false;
        for &i in &order {
            if adj[i].is_empty() {
                continue;
            }
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &j in &adj[i] {
                *counts.entry(labels[j]).or_insert(0) += 1;
            }
            let top = *counts.values().max().expect("non-empty neighbourhood");
            if counts.get(&labels[i]) == Some(&top) {
                continue;
            }
            let pick = counts
                .iter()
                .find(|(_, &c)| c == top)
                .map(|(&l, _)| l)
                .expect("maximum exists");
            labels[i] = pick;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Partitions the graph into communities. Deterministic for a fixed seed;
/// isolated nodes become singletons.
pub fn detect_communities(
    graph: &AssociationGraph,
    cfg: &CommunityConfig,
    seed: u64,
) -> Result<CommunityPartition> {
    cfg.validate()?;
    let membership = match cfg.backend {
        Backend::Louvain => louvain(graph, cfg.resolution, seed),
        Backend::LabelPropagation => label_propagation(graph, seed),
    };
    Ok(CommunityPartition::from_labels(
        graph.nodes.iter().copied().zip(membership),
    ))
}

/// Modularity of a partition of `graph` at resolution `gamma`.
pub fn modularity(graph: &AssociationGraph, partition: &CommunityPartition, gamma: f64) -> f64 {
    let m = graph.edges.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let adj = graph.adjacency();
    let comm: Vec<usize> = graph
        .nodes
        .iter()
        .map(|id| partition.assignment[id])
        .collect();
    let mut internal = vec![0.0; partition.n_groups()];
    let mut tot = vec![0.0; partition.n_groups()];
    for &(a, b) in &graph.edges {
        if comm[a] == comm[b] {
            internal[comm[a]] += 1.0;
        }
    }
    for (i, nbrs) in adj.iter().enumerate() {
        tot[comm[i]] += nbrs.len() as f64;
    }
    internal
        .iter()
        .zip(&tot)
        .map(|(&l, &d)| l / m - gamma * (d / (2.0 * m)).powi(2))
        .sum()
}

// ---------------------------------------------------------------------------
// Partition comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub adjusted_rand_index: f64,
    pub exact_match: bool,
    /// For each found group, `(ideal group index, overlap)` pairs.
    pub confusion: Vec<Vec<(usize, usize)>>,
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

pub fn partition_metrics(
    found: &CommunityPartition,
    ideal: &CommunityPartition,
) -> Result<PartitionMetrics> {
    if !found.assignment.keys().eq(ideal.assignment.keys()) {
        return Err(Error::InvalidParameter(
            "partitions cover different node sets".into(),
        ));
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (id, &f) in &found.assignment {
        *table.entry((f, ideal.assignment[id])).or_insert(0) += 1;
    }
    let n = found.assignment.len();
    let sum_cells: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_found: f64 = found.groups.iter().map(|g| pairs(g.len())).sum();
    let sum_ideal: f64 = ideal.groups.iter().map(|g| pairs(g.len())).sum();
    let total = pairs(n);
    let expected = if total > 0.0 {
        sum_found * sum_ideal / total
    } else {
        0.0
    };
    let max_index = 0.5 * (sum_found + sum_ideal);
    let denom = max_index - expected;
    let ari = if denom == 0.0 {
        1.0
    } else {
        (sum_cells - expected) / denom
    };
    let mut confusion = vec![Vec::new(); found.n_groups()];
    for (&(f, i), &c) in &table {
        confusion[f].push((i, c));
    }
    Ok(PartitionMetrics {
        adjusted_rand_index: ari,
        exact_match: found.groups == ideal.groups,
        confusion,
    })
}
