//! Cluster placement across ranks and routing of classified queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::LinkSpec;
use crate::error::{Error, Result};
use crate::kmeans::Assignment;
use crate::vector::Dataset;

/// Routing header carried with each dispatched vector: query id, origin,
/// cluster and slot, four `u32`s. The cost model prices payload only.
pub const ROUTING_HEADER_BYTES: u64 = 16;

/// Ranks grouped into nodes of `ranks_per_node`; rank `r` lives on node
/// `r / ranks_per_node`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    ranks: usize,
    ranks_per_node: usize,
    pub links: LinkSpec,
}

impl ClusterTopology {
    pub fn new(ranks: usize, ranks_per_node: usize, links: LinkSpec) -> Result<Self> {
        if ranks == 0 || ranks_per_node == 0 {
            return Err(Error::invalid("ranks and ranks_per_node must be positive"));
        }
        if !ranks.is_multiple_of(ranks_per_node) {
            return Err(Error::invalid(format!(
                "{ranks} ranks cannot be split into nodes of {ranks_per_node}"
            )));
        }
        links.validate()?;
        Ok(Self {
            ranks,
            ranks_per_node,
            links,
        })
    }

    /// Two nodes of eight ranks each.
    pub fn reference() -> Self {
        Self::new(16, 8, LinkSpec::a100_hdr()).expect("valid preset")
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn ranks_per_node(&self) -> usize {
        self.ranks_per_node
    }

    pub fn nodes(&self) -> usize {
        self.ranks / self.ranks_per_node
    }

    pub fn node_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_node
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of(a) == self.node_of(b)
    }

    pub fn intra_node_fraction(&self) -> f64 {
        crate::cost::intra_node_fraction(self.ranks, self.ranks_per_node)
    }

    /// Origin rank for the `batch`-th batch from the endpoint (round-robin).
    pub fn origin_of_batch(&self, batch: usize) -> usize {
        batch % self.ranks
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlacementMap {
    ranks: usize,
    owner: Vec<u32>,
}

impl PlacementMap {
    pub fn from_owners(ranks: usize, owner: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = owner.iter().find(|&&r| r as usize >= ranks) {
            return Err(Error::invalid(format!("cluster placed on rank {bad} of {ranks}")));
        }
        Ok(Self { ranks, owner })
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn num_clusters(&self) -> usize {
        self.owner.len()
    }

    pub fn owner(&self, cluster: usize) -> Option<usize> {
        self.owner.get(cluster).map(|&r| r as usize)
    }

    pub fn owners(&self) -> &[u32] {
        &self.owner
    }

    pub fn clusters_of(&self, rank: usize) -> Vec<u32> {
        (0..self.owner.len() as u32)
            .filter(|&c| self.owner[c as usize] as usize == rank)
            .collect()
    }
}

/// Round-robin placement: cluster `i` goes to rank `i mod R`.
pub fn place_clusters(num_clusters: usize, topo: &ClusterTopology) -> Result<PlacementMap> {
    if num_clusters < topo.ranks() {
        return Err(Error::invalid(format!(
            "{num_clusters} clusters cannot cover {} ranks",
            topo.ranks()
        )));
    }
    let owner = (0..num_clusters).map(|c| (c % topo.ranks()) as u32).collect();
    PlacementMap::from_owners(topo.ranks(), owner)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutedEntry {
    pub query_id: u32,
    pub origin: u32,
    pub cluster: u32,
    /// Position of `cluster` in the query's top-c list.
    pub slot: u32,
    pub vector: Vec<f32>,
}

/// Dispatch traffic grouped by destination rank.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedBatch {
    per_rank: Vec<Vec<RoutedEntry>>,
}

impl RoutedBatch {
    pub fn ranks(&self) -> usize {
        self.per_rank.len()
    }

    pub fn to_rank(&self, rank: usize) -> &[RoutedEntry] {
        &self.per_rank[rank]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &RoutedEntry)> {
        self.per_rank
            .iter()
            .enumerate()
            .flat_map(|(r, es)| es.iter().map(move |e| (r, e)))
    }

    pub fn num_entries(&self) -> usize {
        self.per_rank.iter().map(Vec::len).sum()
    }

    /// Each query's cluster list, rebuilt in top-c order.
    pub fn regroup_by_query(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut slots: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for (_, e) in self.iter() {
            slots.entry(e.query_id).or_default().push((e.slot, e.cluster));
        }
        slots
            .into_iter()
            .map(|(q, mut v)| {
                v.sort_unstable();
                (q, v.into_iter().map(|(_, c)| c).collect())
            })
            .collect()
    }
}

/// One entry per (query, assigned cluster), sent to the cluster's owner.
///
/// Entries whose destination is the origin itself are kept; they still cross
/// the intra-node link.
pub fn route(
    assignment: &Assignment,
    placement: &PlacementMap,
    origin_rank: usize,
    queries: &Dataset,
    query_id_base: u32,
) -> Result<RoutedBatch> {
    if assignment.len() != queries.len() {
        return Err(Error::invalid(format!(
            "assignment covers {} queries, batch has {}",
            assignment.len(),
            queries.len()
        )));
    }
    if origin_rank >= placement.ranks() {
        return Err(Error::invalid(format!(
            "origin rank {origin_rank} outside {} ranks",
            placement.ranks()
        )));
    }
    let mut per_rank = vec![Vec::new(); placement.ranks()];
    for (i, clusters) in assignment.iter().enumerate() {
        for (slot, &cluster) in clusters.iter().enumerate() {
            let dest = placement.owner(cluster as usize).ok_or_else(|| {
                Error::internal(format!("cluster {cluster} has no placement"))
            })?;
            per_rank[dest].push(RoutedEntry {
                query_id: query_id_base + i as u32,
                origin: origin_rank as u32,
                cluster,
                slot: slot as u32,
                vector: queries.row(i).to_vec(),
            });
        }
    }
    Ok(RoutedBatch { per_rank })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSplit {
    pub intra_bytes: u64,
    pub inter_bytes: u64,
}

impl TrafficSplit {
    pub fn total(&self) -> u64 {
        self.intra_bytes + self.inter_bytes
    }

    pub fn intra_fraction(&self) -> f64 {
        self.intra_bytes as f64 / self.total() as f64
    }
}

impl std::ops::AddAssign for TrafficSplit {
    fn add_assign(&mut self, rhs: Self) {
        self.intra_bytes += rhs.intra_bytes;
        self.inter_bytes += rhs.inter_bytes;
    }
}

/// FP32 payload bytes of `routed`, split by whether sender and receiver
/// share a node.
pub fn traffic_split(routed: &RoutedBatch, topo: &ClusterTopology) -> TrafficSplit {
    let mut split = TrafficSplit::default();
    for (dest, e) in routed.iter() {
        let bytes = e.vector.len() as u64 * 4;
        if topo.same_node(e.origin as usize, dest) {
            split.intra_bytes += bytes;
        } else {
            split.inter_bytes += bytes;
        }
    }
    split
}
