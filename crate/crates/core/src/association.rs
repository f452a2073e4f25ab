//! Pairwise model exchange and the mutual-association graph.
//!
//! Every client scores its own data with every peer's OC-SVM. Client `i`
//! flags peer `j` when the fraction of its data that `j`'s model calls
//! normal is within `q` of the fraction its own model calls normal; an
//! undirected edge needs both flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientId;
use crate::error::{Error, Result};
use crate::ocsvm::OcsvmModel;

pub const DEFAULT_Q: f64 = 0.08;
const Q_RANGE: (f64, f64) = (0.01, 0.10);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub q: f64,
    /// Accept a `q` outside the usual range (with a warning).
    #[serde(default)]
    pub allow_out_of_range: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            q: DEFAULT_Q,
            allow_out_of_range: false,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("q = {} outside [0, 1]", self.q)));
        }
        if !(Q_RANGE.0..=Q_RANGE.1).contains(&self.q) {
            if self.allow_out_of_range {
                log::warn!(
                    "association threshold q = {} outside [{}, {}]",
                    self.q,
                    Q_RANGE.0,
                    Q_RANGE.1
                );
            } else {
                return Err(Error::Config(format!(
                    "q = {} outside [{}, {}]; set allow_out_of_range to override",
                    self.q, Q_RANGE.0, Q_RANGE.1
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of labels equal to 1.
pub fn inlier_fraction(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("inlier label vector"));
    }
    let n_in = labels.iter().filter(|&&l| l == 1).count();
    Ok(n_in as f64 / labels.len() as f64)
}

/// `in_self - q <= in_other <= in_self + q`, endpoints included.
pub fn association_bit(in_self: f64, in_other: f64, q: f64) -> bool {
    in_self - q <= in_other && in_other <= in_self + q
}

/// Result of one directed check: peer `model_owner`'s model applied to the
/// data of `data_owner`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedRecord {
    pub model_owner: ClientId,
    pub data_owner: ClientId,
    pub inlier_fraction: f64,
    pub bit: bool,
}

/// One client's view after scoring its data with its own and its peers' models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalView {
    pub client: ClientId,
    pub own_inlier_fraction: f64,
    pub records: Vec<DirectedRecord>,
}

impl LocalView {
    /// Peers whose bit toward this client is set. Mutual candidates need
    /// the reverse bits as well, see [`candidates`].
    pub fn flagged(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.records.iter().filter(|r| r.bit).map(|r| r.model_owner)
    }
}

/// Runs the local association step for one client. Receives the client's
/// features only; ground truth never reaches this function.
pub fn local_ad(
    client: ClientId,
    features: ArrayView2<'_, f64>,
    own_model: &OcsvmModel,
    peers: &[ClientId],
    peer_models: &BTreeMap<ClientId, &OcsvmModel>,
    cfg: &AssociationConfig,
) -> Result<LocalView> {
    let own = inlier_fraction(&own_model.predict(features)?)?;
    let mut records = Vec::with_capacity(peers.len());
    for &peer in peers {
        if peer == client {
            continue;
        }
        let Some(model) = peer_models.get(&peer) else {
            log::warn!("client {client}: no model received from {peer}, skipping");
            continue;
        };
        let frac = inlier_fraction(&model.predict(features)?)?;
        records.push(DirectedRecord {
            model_owner: peer,
            data_owner: client,
            inlier_fraction: frac,
            bit: association_bit(own, frac, cfg.q),
        });
    }
    Ok(LocalView {
        client,
        own_inlier_fraction: own,
        records,
    })
}

/// Runs [`local_ad`] for every client (in parallel) and returns the views in
/// input order.
pub fn exchange_all(
    clients: &[(ClientId, ArrayView2<'_, f64>)],
    models: &[OcsvmModel],
    cfg: &AssociationConfig,
) -> Result<Vec<LocalView>> {
    cfg.validate()?;
    if clients.len() != models.len() {
        return Err(Error::InvalidParameter(format!(
            "{} clients but {} models",
            clients.len(),
            models.len()
        )));
    }
    let ids: Vec<ClientId> = clients.iter().map(|(id, _)| *id).collect();
    let lookup: BTreeMap<ClientId, &OcsvmModel> = ids.iter().copied().zip(models).collect();
    clients
        .par_iter()
        .zip(models)
        .map(|((id, x), own)| local_ad(*id, *x, own, &ids, &lookup, cfg))
        .collect()
}

/// Collects every directed bit keyed by `(model_owner, data_owner)`.
pub fn directed_bits(views: &[LocalView]) -> BTreeMap<(ClientId, ClientId), bool> {
    views
        .iter()
        .flat_map(|v| v.records.iter())
        .map(|r| ((r.model_owner, r.data_owner), r.bit))
        .collect()
}

/// Mutual candidate set of `client` once every client has published its bits.
pub fn candidates(
    client: ClientId,
    bits: &BTreeMap<(ClientId, ClientId), bool>,
) -> BTreeSet<ClientId> {
    bits.iter()
        .filter(|(&(owner, data), &b)| data == client && owner != client && b)
        .map(|(&(owner, _), _)| owner)
        .filter(|&peer| bits.get(&(client, peer)).copied().unwrap_or(false))
        .collect()
}

/// Undirected graph over clients; node `k` is `nodes[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationGraph {
    pub nodes: Vec<ClientId>,
    /// Node-index pairs `(a, b)` with `a < b`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub records: Vec<DirectedRecord>,
    pub own_inlier_fraction: BTreeMap<ClientId, f64>,
}

impl AssociationGraph {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn has_edge(&self, a: ClientId, b: ClientId) -> bool {
        let idx = |c| self.nodes.iter().position(|&n| n == c);
        match (idx(a), idx(b)) {
            (Some(x), Some(y)) => self.edges.binary_search(&(x.min(y), x.max(y))).is_ok(),
            _ => false,
        }
    }

    pub fn edge_set(&self) -> BTreeSet<(ClientId, ClientId)> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.nodes[a], self.nodes[b]))
            .collect()
    }

    /// One `a b` node-index pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges {
            writeln!(out, "{a} {b}").expect("write to string");
        }
        out
    }

    pub fn from_edge_list(nodes: Vec<ClientId>, text: &str) -> Result<Self> {
        let mut edges = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidData(format!("edge list line {}: `{line}`", lineno + 1));
            let mut it = line.split_whitespace();
            let a: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let b: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if a >= nodes.len() || b >= nodes.len() || a == b {
                return Err(bad());
            }
            edges.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            nodes,
            edges: edges.into_iter().collect(),
            records: Vec::new(),
            own_inlier_fraction: BTreeMap::new(),
        })
    }
}

/// Builds the undirected graph: edge `{i, j}` iff both directed bits hold.
/// Missing bits count as false.
pub fn build_graph(
    bits: &BTreeMap<(ClientId, ClientId), bool>,
    clients: &[ClientId],
) -> AssociationGraph {
    let mut nodes = clients.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    let mut edges = Vec::new();
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            let (i, j) = (nodes[a], nodes[b]);
            let forward = bits.get(&(j, i));
            let backward = bits.get(&(i, j));
            if forward.is_none() || backward.is_none() {
                log::debug!("missing association bit between {i} and {j}; treated as false");
            }
            if forward.copied().unwrap_or(false) && backward.copied().unwrap_or(false) {
                edges.push((a, b));
            }
        }
    }
    AssociationGraph {
        nodes,
        edges,
        records: Vec::new(),
        own_inlier_fraction: BTreeMap::new(),
    }
}

/// Builds the graph from the views of all clients, keeping the directed
/// records for inspection.
pub fn graph_from_views(views: &[LocalView]) -> AssociationGraph {
    let ids: Vec<ClientId> = views.iter().map(|v| v.client).collect();
    let mut graph = build_graph(&directed_bits(views), &ids);
    graph.records = views
        .iter()
        .flat_map(|v| v.records.iter().copied())
        .collect();
    graph.own_inlier_fraction = views
        .iter()
        .map(|v| (v.client, v.own_inlier_fraction))
        .collect();
    graph
}

/// Re-thresholds stored records at a new `q` without re-running predictions.
pub fn rethreshold(graph: &AssociationGraph, q: f64) -> AssociationGraph {
    let bits: BTreeMap<(ClientId, ClientId), bool> = graph
        .records
        .iter()
        .map(|r| {
            let own = graph.own_inlier_fraction[&r.data_owner];
            (
                (r.model_owner, r.data_owner),
                association_bit(own, r.inlier_fraction, q),
            )
        })
        .collect();
    let mut out = build_graph(&bits, &graph.nodes);
    out.records = graph
        .records
        .iter()
        .map(|r| DirectedRecord {
            bit: bits[&(r.model_owner, r.data_owner)],
            ..*r
        })
        .collect();
    out.own_inlier_fraction = graph.own_inlier_fraction.clone();
    out
}
