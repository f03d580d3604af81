//! Fixed out-degree proximity graph over one partition, and the batched beam
//! search that walks it.
//!
//! Every iteration expands the `w` best unexpanded candidates and scores all
//! of their `d_g` neighbours, so a query scores at most `I * w * d_g` vectors
//! beyond its entry points. That count is what the cost model charges for.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vector::{l2_sq, select_topk, Dataset, ScoredId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchParams {
    pub iterations: usize,
    pub beam_width: usize,
    pub k: usize,
    pub entry_count: usize,
}

impl SearchParams {
    /// Entry count defaults to the beam width.
    pub fn new(iterations: usize, beam_width: usize, k: usize) -> Result<Self> {
        Self::with_entries(iterations, beam_width, k, beam_width)
    }

    pub fn with_entries(
        iterations: usize,
        beam_width: usize,
        k: usize,
        entry_count: usize,
    ) -> Result<Self> {
        let p = Self {
            iterations,
            beam_width,
            k,
            entry_count,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iterations", self.iterations),
            ("beam_width", self.beam_width),
            ("k", self.k),
            ("entry_count", self.entry_count),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Candidate pool bound. Never below `iterations * beam_width`, which
    /// keeps every node that could still be chosen for expansion.
    pub fn pool_capacity(&self) -> usize {
        (4 * self.k).max(2 * self.iterations * self.beam_width)
    }

    /// Expanded nodes per query (`I * w`).
    pub fn expanded_nodes(&self) -> usize {
        self.iterations * self.beam_width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphIndex {
    vectors: Dataset,
    global_ids: Vec<u32>,
    out_degree: usize,
    adjacency: Vec<u32>,
    /// Local ids by distance to the partition mean; search starts from a prefix.
    entry_order: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    /// Global ids, ascending by `(dist, id)`.
    pub neighbors: Vec<ScoredId>,
    /// Vectors scored, entry points included.
    pub visited: usize,
}

impl GraphIndex {
    /// Builds the exact k-NN graph of `vectors` with `out_degree` neighbours
    /// per node. `global_ids` must be strictly ascending.
    ///
    /// Partitions with at most `out_degree` nodes link every node to all the
    /// others, nearest first and repeated cyclically to fill the row. A
    /// single-node partition points at itself.
    pub fn build(vectors: Dataset, global_ids: Vec<u32>, out_degree: usize) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::invalid("cannot build a graph over an empty partition"));
        }
        if out_degree == 0 {
            return Err(Error::invalid("out-degree must be at least 1"));
        }
        check_ids(&global_ids, vectors.len())?;
        let n = vectors.len();
        let adjacency: Vec<u32> = (0..n)
            .into_par_iter()
            .flat_map_iter(|v| knn_row(&vectors, v, out_degree))
            .collect();
        let entry_order = entry_order(&vectors);
        Ok(Self {
            vectors,
            global_ids,
            out_degree,
            adjacency,
            entry_order,
        })
    }

    /// Reassembles a graph from stored parts, validating every invariant.
    pub fn from_parts(
        vectors: Dataset,
        global_ids: Vec<u32>,
        out_degree: usize,
        adjacency: Vec<u32>,
    ) -> Result<Self> {
        if vectors.is_empty() || out_degree == 0 {
            return Err(Error::invalid("graph needs nodes and a positive out-degree"));
        }
        check_ids(&global_ids, vectors.len())?;
        let n = vectors.len();
        if adjacency.len() != n * out_degree {
            return Err(Error::invalid(format!(
                "adjacency has {} entries, expected {n} x {out_degree}",
                adjacency.len()
            )));
        }
        for (v, row) in adjacency.chunks_exact(out_degree).enumerate() {
            for &u in row {
                if u as usize >= n {
                    return Err(Error::invalid(format!("node {v} links to missing node {u}")));
                }
                if u as usize == v && n > 1 {
                    return Err(Error::invalid(format!("node {v} has a self-loop")));
                }
            }
        }
        let entry_order = entry_order(&vectors);
        Ok(Self {
            vectors,
            global_ids,
            out_degree,
            adjacency,
            entry_order,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn out_degree(&self) -> usize {
        self.out_degree
    }

    pub fn vectors(&self) -> &Dataset {
        &self.vectors
    }

    pub fn global_ids(&self) -> &[u32] {
        &self.global_ids
    }

    pub fn adjacency(&self) -> &[u32] {
        &self.adjacency
    }

    pub fn neighbors(&self, local: usize) -> &[u32] {
        &self.adjacency[local * self.out_degree..(local + 1) * self.out_degree]
    }

    pub fn entry_points(&self, count: usize) -> &[u32] {
        &self.entry_order[..count.min(self.entry_order.len())]
    }

    pub fn search(&self, q: &[f32], p: &SearchParams) -> Result<SearchOutcome> {
        self.vectors.check_dim(q.len(), "query")?;
        p.validate()?;

        let cap = p.pool_capacity();
        let mut visited: HashSet<u32> = HashSet::with_capacity(cap);
        // (candidate, expanded) kept sorted by (dist, local id).
        let mut pool: Vec<(ScoredId, bool)> = Vec::with_capacity(cap + p.beam_width * self.out_degree);

        for &e in self.entry_points(p.entry_count) {
            visited.insert(e);
            pool.push((ScoredId::new(e, l2_sq(q, self.vectors.row(e as usize))), false));
        }
        pool.sort_unstable_by_key(|a| a.0);

        let mut frontier = Vec::with_capacity(p.beam_width);
        for _ in 0..p.iterations {
            frontier.clear();
            for (cand, expanded) in pool.iter_mut() {
                if frontier.len() == p.beam_width {
                    break;
                }
                if !*expanded {
                    *expanded = true;
                    frontier.push(cand.id);
                }
            }
            if frontier.is_empty() {
                break;
            }
            for &node in &frontier {
                for &u in self.neighbors(node as usize) {
                    if visited.insert(u) {
                        pool.push((ScoredId::new(u, l2_sq(q, self.vectors.row(u as usize))), false));
                    }
                }
            }
            pool.sort_unstable_by_key(|a| a.0);
            pool.truncate(cap);
        }

        // Local ids ascend with global ids, so the (dist, id) order carries over.
        let neighbors = pool
            .iter()
            .take(p.k)
            .map(|(s, _)| ScoredId::new(self.global_ids[s.id as usize], s.dist))
            .collect();
        Ok(SearchOutcome {
            neighbors,
            visited: visited.len(),
        })
    }
}

fn check_ids(global_ids: &[u32], n: usize) -> Result<()> {
    if global_ids.len() != n {
        return Err(Error::invalid(format!(
            "{} global ids for {n} vectors",
            global_ids.len()
        )));
    }
    if global_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("global ids must be strictly ascending"));
    }
    Ok(())
}

fn knn_row(vectors: &Dataset, v: usize, out_degree: usize) -> Vec<u32> {
    let n = vectors.len();
    if n == 1 {
        return vec![0; out_degree];
    }
    let q = vectors.row(v);
    let others: Vec<ScoredId> = (0..n)
        .filter(|&u| u != v)
        .map(|u| ScoredId::new(u as u32, l2_sq(q, vectors.row(u))))
        .collect();
    let ranked = select_topk(others, out_degree);
    ranked.iter().cycle().take(out_degree).map(|s| s.id).collect()
}

fn entry_order(vectors: &Dataset) -> Vec<u32> {
    let dim = vectors.dim();
    let mut mean = vec![0f64; dim];
    for row in vectors.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += f64::from(x);
        }
    }
    let n = vectors.len() as f64;
    let mean: Vec<f32> = mean.into_iter().map(|m| (m / n) as f32).collect();
    let scored = vectors
        .rows()
        .enumerate()
        .map(|(i, v)| ScoredId::new(i as u32, l2_sq(&mean, v)))
        .collect::<Vec<_>>();
    select_topk(scored, vectors.len()).into_iter().map(|s| s.id).collect()
}

/// Graph over `part` with identity global ids.
pub fn build_graph(part: &Dataset, out_degree: usize) -> Result<GraphIndex> {
    GraphIndex::build(part.clone(), (0..part.len() as u32).collect(), out_degree)
}

pub fn beam_search(g: &GraphIndex, q: &[f32], p: &SearchParams) -> Result<Vec<ScoredId>> {
    g.search(q, p).map(|o| o.neighbors)
}

/// Number of vectors the matching [`beam_search`] call scores.
pub fn visited_count(g: &GraphIndex, q: &[f32], p: &SearchParams) -> Result<usize> {
    g.search(q, p).map(|o| o.visited)
}
