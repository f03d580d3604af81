//! Four-stage pipeline over simulated ranks.
//!
//! Each rank has a compute lane (k-means, search) and a communication lane
//! (dispatch, combine). A batch is split into two microbatches; in
//! [`PipelineMode::TwoMicrobatch`] one microbatch's transfers overlap the
//! other's computation, in [`PipelineMode::Sequential`] the eight stage
//! instances run back to back.
//!
//! Scheduling is list scheduling: the unscheduled stage with the earliest
//! ready time (ties by microbatch, then stage order) goes next and starts
//! once its lane is free. Stage durations are identical on every rank for a
//! given microbatch size, so each rank's schedule is computed independently.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{t_combine, t_dispatch, t_kmeans, t_search, GpuSpec};
use crate::error::{Error, Result};
use crate::graph::{SearchOutcome, SearchParams};
use crate::index::IndexBundle;
use crate::kmeans::assign_top_c;
use crate::router::{route, traffic_split, ClusterTopology, TrafficSplit};
use crate::vector::{Dataset, ElementFormat, ScoredId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute,
    Comm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Kmeans,
    Dispatch,
    Search,
    Combine,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Kmeans, Stage::Dispatch, Stage::Search, Stage::Combine];

    pub fn lane(self) -> Lane {
        match self {
            Stage::Kmeans | Stage::Search => Lane::Compute,
            Stage::Dispatch | Stage::Combine => Lane::Comm,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Kmeans => "kmeans",
            Stage::Dispatch => "dispatch",
            Stage::Search => "search",
            Stage::Combine => "combine",
        }
    }
}

impl Lane {
    pub fn name(self) -> &'static str {
        match self {
            Lane::Compute => "compute",
            Lane::Comm => "comm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Sequential,
    TwoMicrobatch,
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "two_microbatch" | "two-microbatch" | "pipelined" => Ok(Self::TwoMicrobatch),
            other => Err(Error::invalid(format!("unknown pipeline mode {other:?}"))),
        }
    }
}

/// Seconds spent in each stage by one microbatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageDurations {
    pub kmeans: f64,
    pub dispatch: f64,
    pub search: f64,
    pub combine: f64,
}

impl StageDurations {
    pub fn uniform(d: f64) -> Self {
        Self {
            kmeans: d,
            dispatch: d,
            search: d,
            combine: d,
        }
    }

    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Kmeans => self.kmeans,
            Stage::Dispatch => self.dispatch,
            Stage::Search => self.search,
            Stage::Combine => self.combine,
        }
    }

    pub fn total(&self) -> f64 {
        self.kmeans + self.dispatch + self.search + self.combine
    }

    fn validate(&self) -> Result<()> {
        for s in Stage::ALL {
            let d = self.get(s);
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::invalid(format!(
                    "{} duration must be finite and non-negative, got {d}",
                    s.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub rank: u32,
    pub lane: Lane,
    pub stage: Stage,
    pub microbatch: u32,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub intervals: Vec<Interval>,
}

impl Timeline {
    pub fn makespan(&self) -> f64 {
        self.intervals.iter().map(|i| i.end).fold(0.0, f64::max)
    }

    /// Verifies the schedule from the interval list alone: stages sit on
    /// their own lane, intervals on a lane never overlap, and each
    /// microbatch runs its stages in order.
    pub fn check(&self) -> Result<()> {
        let mut by_lane: std::collections::BTreeMap<(u32, Lane), Vec<&Interval>> = Default::default();
        let mut by_mb: std::collections::BTreeMap<(u32, u32), [Option<&Interval>; 4]> = Default::default();
        for iv in &self.intervals {
            if iv.end.partial_cmp(&iv.start).is_none_or(|o| o.is_lt()) || iv.start < 0.0 {
                return Err(Error::internal(format!("malformed interval {iv:?}")));
            }
            if iv.stage.lane() != iv.lane {
                return Err(Error::internal(format!("{} scheduled on {} lane", iv.stage.name(), iv.lane.name())));
            }
            by_lane.entry((iv.rank, iv.lane)).or_default().push(iv);
            let slot = &mut by_mb.entry((iv.rank, iv.microbatch)).or_default()[iv.stage.index()];
            if slot.replace(iv).is_some() {
                return Err(Error::internal(format!(
                    "rank {} microbatch {} runs {} twice",
                    iv.rank,
                    iv.microbatch,
                    iv.stage.name()
                )));
            }
        }
        for ((rank, lane), mut ivs) in by_lane {
            ivs.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
            for w in ivs.windows(2) {
                if w[1].start < w[0].end {
                    return Err(Error::internal(format!(
                        "rank {rank} {} lane overlap: {:?} and {:?}",
                        lane.name(),
                        w[0],
                        w[1]
                    )));
                }
            }
        }
        for ((rank, mb), stages) in by_mb {
            let mut prev: Option<&Interval> = None;
            for (s, iv) in Stage::ALL.iter().zip(stages) {
                let Some(iv) = iv else {
                    return Err(Error::internal(format!("rank {rank} microbatch {mb} lacks {}", s.name())));
                };
                if let Some(p) = prev {
                    if iv.start < p.end {
                        return Err(Error::internal(format!(
                            "rank {rank} microbatch {mb}: {} starts before {} ends",
                            s.name(),
                            p.stage.name()
                        )));
                    }
                }
                prev = Some(iv);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.intervals).expect("intervals are plain data")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,lane,stage,mb,start,end\n");
        for iv in &self.intervals {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                iv.rank,
                iv.lane.name(),
                iv.stage.name(),
                iv.microbatch,
                iv.start,
                iv.end
            )
            .unwrap();
        }
        out
    }
}

/// Schedules one batch of two microbatches on `rank`, with both lanes free
/// from `start`. Microbatch ids are `mb_base` and `mb_base + 1`.
fn schedule_batch(
    rank: u32,
    mb_base: u32,
    start: f64,
    durations: &[StageDurations; 2],
    mode: PipelineMode,
) -> Vec<Interval> {
    let mut lane_free = [start, start];
    let mut end: [[Option<f64>; 4]; 2] = [[None; 4]; 2];
    let mut out = Vec::with_capacity(8);

    for _ in 0..8 {
        let mut best: Option<(f64, usize, usize)> = None;
        for mb in 0..2 {
            for s in 0..4 {
                if end[mb][s].is_some() {
                    continue;
                }
                let dep = if s > 0 {
                    end[mb][s - 1]
                } else if mb == 1 && mode == PipelineMode::Sequential {
                    end[0][3]
                } else {
                    Some(start)
                };
                let Some(ready) = dep else { continue };
                let key = (ready, mb, s);
                if best.is_none_or(|b| (key.0, key.1, key.2) < b) {
                    best = Some(key);
                }
            }
        }
        let (ready, mb, s) = best.expect("dependency chains always leave a ready stage");
        let stage = Stage::ALL[s];
        let lane = stage.lane() as usize;
        let begin = ready.max(lane_free[lane]);
        let finish = begin + durations[mb].get(stage);
        lane_free[lane] = finish;
        end[mb][s] = Some(finish);
        out.push(Interval {
            rank,
            lane: stage.lane(),
            stage,
            microbatch: mb_base + mb as u32,
            start: begin,
            end: finish,
        });
    }
    out
}

/// Timeline of a single rank processing one batch of two microbatches.
pub fn replay_schedule(durations: &[StageDurations; 2], mode: PipelineMode) -> Result<Timeline> {
    for d in durations {
        d.validate()?;
    }
    Ok(Timeline {
        intervals: schedule_batch(0, 0, 0.0, durations, mode),
    })
}

/// How a microbatch's search stage is priced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPricing {
    /// `I * w * d_g` vectors per routed query.
    Modeled,
    /// Vectors actually scored, averaged over ranks.
    Measured,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimingModel {
    /// Every microbatch takes these durations regardless of size.
    Fixed(StageDurations),
    Modeled {
        gpu: GpuSpec,
        search_format: ElementFormat,
        pricing: SearchPricing,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub search: SearchParams,
    pub fan_out: usize,
    pub mode: PipelineMode,
    /// Queries per endpoint batch; defaults to an even split over ranks.
    pub batch_size: Option<usize>,
    pub timing: TimingModel,
}

/// A result vector with its payload attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u32,
    pub dist: f32,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrobatchRecord {
    pub rank: u32,
    pub batch: u32,
    pub microbatch: u32,
    /// Query id range `[first_query, first_query + queries)`.
    pub first_query: u32,
    pub queries: u32,
    pub durations: StageDurations,
    pub visited: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub batches: usize,
    pub routed_entries: usize,
    pub dispatch_traffic: TrafficSplit,
    pub combine_traffic: TrafficSplit,
    pub visited: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineResult {
    /// Per query, nearest first.
    pub neighbors: Vec<Vec<Neighbor>>,
    pub timeline: Timeline,
    pub makespan: f64,
    pub microbatches: Vec<MicrobatchRecord>,
    pub stats: PipelineStats,
}

/// A simulated GPU: the clusters it owns and when each lane frees up.
#[derive(Clone, Debug)]
pub struct RankState {
    pub rank: usize,
    pub clusters: Vec<u32>,
    pub compute_free: f64,
    pub comm_free: f64,
}

/// Merges per-cluster top-k lists into one top-k list.
///
/// Every input list must be strictly ascending by `(dist, id)`.
pub fn combine_results(partials: &[Vec<ScoredId>], k: usize) -> Result<Vec<ScoredId>> {
    let mut merged = Vec::with_capacity(partials.iter().map(Vec::len).sum());
    for (i, p) in partials.iter().enumerate() {
        if p.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::internal(format!("partial list {i} is not sorted")));
        }
        merged.extend_from_slice(p);
    }
    merged.sort_unstable();
    // Partitions are disjoint, but keep the nearest copy if an id repeats.
    let mut seen = std::collections::HashSet::with_capacity(merged.len());
    merged.retain(|s| seen.insert(s.id));
    merged.truncate(k);
    Ok(merged)
}

fn split_microbatches(start: usize, len: usize) -> [(usize, usize); 2] {
    let first = len.div_ceil(2);
    [(start, first), (start + first, len - first)]
}

/// Runs classification, dispatch, search and combine for every query.
///
/// Queries are cut into endpoint batches that arrive at ranks round-robin.
/// Results do not depend on mode, batching or topology.
pub fn run_pipeline(
    bundle: &IndexBundle,
    queries: &Dataset,
    topo: &ClusterTopology,
    cfg: &PipelineConfig,
) -> Result<PipelineResult> {
    queries.check_dim(bundle.dim(), "index")?;
    cfg.search.validate()?;
    let placement = bundle.placement();
    if placement.ranks() != topo.ranks() {
        return Err(Error::invalid(format!(
            "index is placed over {} ranks but topology has {}",
            placement.ranks(),
            topo.ranks()
        )));
    }
    if cfg.fan_out == 0 || cfg.fan_out > bundle.num_clusters() {
        return Err(Error::invalid(format!(
            "fan-out c = {} must be in 1..={}",
            cfg.fan_out,
            bundle.num_clusters()
        )));
    }
    let nq = queries.len();
    let batch_size = cfg.batch_size.unwrap_or_else(|| nq.div_ceil(topo.ranks()).max(2));
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    if cfg.mode == PipelineMode::TwoMicrobatch && batch_size < 2 {
        return Err(Error::invalid("two-microbatch mode needs batch_size >= 2"));
    }
    let timing = cfg.timing;
    if let TimingModel::Fixed(d) = &timing {
        d.validate()?;
    }
    if let TimingModel::Modeled { gpu, .. } = &timing {
        gpu.validate()?;
    }

    let mut ranks: Vec<RankState> = (0..topo.ranks())
        .map(|r| RankState {
            rank: r,
            clusters: placement.clusters_of(r),
            compute_free: 0.0,
            comm_free: 0.0,
        })
        .collect();

    let mut neighbors: Vec<Vec<Neighbor>> = vec![Vec::new(); nq];
    let mut intervals = Vec::new();
    let mut records = Vec::new();
    let mut stats = PipelineStats::default();
    let mut next_mb = vec![0u32; topo.ranks()];

    for (batch, start) in (0..nq).step_by(batch_size).enumerate() {
        let len = batch_size.min(nq - start);
        let origin = topo.origin_of_batch(batch);
        let mut durations = [StageDurations::default(); 2];
        let mb_base = next_mb[origin];
        next_mb[origin] += 2;

        for (slot, (mb_start, mb_len)) in split_microbatches(start, len).into_iter().enumerate() {
            let visited = if mb_len == 0 {
                0
            } else {
                let chunk = queries.slice(mb_start, mb_start + mb_len);
                let (visited, mb_stats) =
                    execute_microbatch(bundle, &chunk, mb_start as u32, origin, topo, cfg, &mut neighbors)?;
                stats.routed_entries += mb_stats.routed_entries;
                stats.dispatch_traffic += mb_stats.dispatch_traffic;
                stats.combine_traffic += mb_stats.combine_traffic;
                visited
            };
            stats.visited += visited;
            durations[slot] = price(bundle, topo, cfg, mb_len, visited);
            records.push(MicrobatchRecord {
                rank: origin as u32,
                batch: batch as u32,
                microbatch: mb_base + slot as u32,
                first_query: mb_start as u32,
                queries: mb_len as u32,
                durations: durations[slot],
                visited,
            });
        }
        stats.batches += 1;

        let state = &mut ranks[origin];
        let begin = state.compute_free.max(state.comm_free);
        let scheduled = schedule_batch(origin as u32, mb_base, begin, &durations, cfg.mode);
        for iv in &scheduled {
            match iv.lane {
                Lane::Compute => state.compute_free = state.compute_free.max(iv.end),
                Lane::Comm => state.comm_free = state.comm_free.max(iv.end),
            }
        }
        intervals.extend(scheduled);
    }

    let timeline = Timeline { intervals };
    timeline.check()?;
    let makespan = timeline.makespan();
    Ok(PipelineResult {
        neighbors,
        timeline,
        makespan,
        microbatches: records,
        stats,
    })
}

fn price(
    bundle: &IndexBundle,
    topo: &ClusterTopology,
    cfg: &PipelineConfig,
    queries: usize,
    visited: u64,
) -> StageDurations {
    match cfg.timing {
        TimingModel::Fixed(d) => d,
        TimingModel::Modeled {
            gpu,
            search_format,
            pricing,
        } => {
            let d = bundle.dim();
            let dispatch = t_dispatch(queries, cfg.fan_out, d, topo.intra_node_fraction(), &topo.links);
            let search = match pricing {
                SearchPricing::Modeled => t_search(
                    queries,
                    cfg.fan_out,
                    cfg.search.iterations,
                    cfg.search.beam_width,
                    bundle.out_degree(),
                    d,
                    search_format,
                    &gpu,
                ),
                SearchPricing::Measured => {
                    let bytes = visited as f64 * d as f64 * f64::from(search_format.bytes_per_element());
                    bytes / topo.ranks() as f64 / gpu.hbm_bandwidth
                }
            };
            StageDurations {
                kmeans: t_kmeans(queries, d, bundle.num_clusters(), &gpu),
                dispatch,
                search,
                combine: t_combine(dispatch, cfg.fan_out),
            }
        }
    }
}

/// Functional work for one microbatch; writes final neighbours into `out`.
fn execute_microbatch(
    bundle: &IndexBundle,
    chunk: &Dataset,
    first_query: u32,
    origin: usize,
    topo: &ClusterTopology,
    cfg: &PipelineConfig,
    out: &mut [Vec<Neighbor>],
) -> Result<(u64, PipelineStats)> {
    let assignment = assign_top_c(bundle.centroids(), chunk, cfg.fan_out)?;
    let routed = route(&assignment, bundle.placement(), origin, chunk, first_query)?;
    let dispatch_traffic = traffic_split(&routed, topo);

    let jobs: Vec<(usize, &crate::router::RoutedEntry)> = routed.iter().collect();
    let outcomes: Vec<SearchOutcome> = jobs
        .par_iter()
        .map(|&(dest, e)| {
            if bundle.placement().owner(e.cluster as usize) != Some(dest) {
                return Err(Error::internal(format!(
                    "cluster {} routed to rank {dest} which does not own it",
                    e.cluster
                )));
            }
            match bundle.graph(e.cluster as usize) {
                Some(g) => g.search(&e.vector, &cfg.search),
                None => Ok(SearchOutcome {
                    neighbors: Vec::new(),
                    visited: 0,
                }),
            }
        })
        .collect::<Result<_>>()?;

    let fan_out = cfg.fan_out;
    let mut partials: Vec<Vec<Vec<ScoredId>>> = vec![vec![Vec::new(); fan_out]; chunk.len()];
    let mut combine_traffic = TrafficSplit::default();
    let mut visited = 0u64;
    for (&(dest, e), o) in jobs.iter().zip(outcomes) {
        visited += o.visited as u64;
        let bytes = (o.neighbors.len() * bundle.dim() * 4) as u64;
        if topo.same_node(dest, origin) {
            combine_traffic.intra_bytes += bytes;
        } else {
            combine_traffic.inter_bytes += bytes;
        }
        partials[(e.query_id - first_query) as usize][e.slot as usize] = o.neighbors;
    }

    for (i, parts) in partials.iter().enumerate() {
        let merged = combine_results(parts, cfg.search.k)?;
        out[first_query as usize + i] = merged
            .into_iter()
            .map(|s| Neighbor {
                id: s.id,
                dist: s.dist,
                vector: bundle.vector(s.id).to_vec(),
            })
            .collect();
    }

    Ok((
        visited,
        PipelineStats {
            batches: 0,
            routed_entries: routed.num_entries(),
            dispatch_traffic,
            combine_traffic,
            visited,
        },
    ))
}
