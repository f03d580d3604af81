use std::fs;
use std::io::Write;
use std::path::Path;

use fantasy_core::cost::full_report;
use fantasy_core::vector::{brute_force_topk, load_fvecs, recall_at_k_ids, save_fvecs, save_ivecs};
use fantasy_core::{
    run_pipeline, BuildParams, Dataset, IndexBundle, PipelineConfig, PipelineMode, PipelineResult, StageDurations,
    TimingModel,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Fillers for queries that found fewer than k neighbours.
pub const MISSING_ID: i32 = -1;
pub const MISSING_DIST: f32 = f32::MAX;

type Out<'a> = &'a mut dyn Write;

fn io(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

pub fn build(cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    let db_path = cfg.require("database", &cfg.database)?;
    let index_path = cfg.require("index", &cfg.index)?;
    let params = BuildParams {
        num_clusters: cfg.num_clusters()?,
        out_degree: cfg.out_degree()?,
        max_iters: cfg.max_iters()?,
        seed: cfg.seed(),
    };
    let topo = cfg.topology()?;
    if params.num_clusters < topo.ranks() {
        return Err(CliError::Config(format!(
            "num_clusters {} is smaller than ranks {}",
            params.num_clusters,
            topo.ranks()
        )));
    }

    let db = load_fvecs(db_path)?;
    cfg.check_dim(db.dim(), "database")?;
    if params.num_clusters > db.len() {
        return Err(CliError::Config(format!(
            "num_clusters {} exceeds the {} database vectors",
            params.num_clusters,
            db.len()
        )));
    }
    let bundle = IndexBundle::build(&db, &params, &topo)?;
    bundle.save(index_path)?;

    writeln!(
        out,
        "built {} vectors x {} dims into {} partitions over {} ranks -> {}",
        db.len(),
        db.dim(),
        params.num_clusters,
        topo.ranks(),
        index_path.display()
    )
    .map_err(io)?;
    write_histogram(&bundle.partition_sizes(), out).map_err(io)
}

fn write_histogram(sizes: &[usize], out: Out) -> std::io::Result<()> {
    let min = *sizes.iter().min().unwrap_or(&0);
    let max = *sizes.iter().max().unwrap_or(&0);
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
    writeln!(out, "partition sizes: min {min}, max {max}, mean {mean:.1}")?;
    let bins = 10.min(max - min + 1);
    let width = (max - min + 1).div_ceil(bins);
    let mut counts = vec![0usize; bins];
    for &s in sizes {
        counts[(s - min) / width] += 1;
    }
    let peak = *counts.iter().max().unwrap_or(&1);
    for (i, &c) in counts.iter().enumerate() {
        let lo = min + i * width;
        let hi = lo + width - 1;
        let bar = "#".repeat((c * 40).div_ceil(peak.max(1)));
        writeln!(out, "  {lo:>7} - {hi:<7} {c:>6} {bar}")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct StageTimes {
    kmeans: f64,
    dispatch: f64,
    search: f64,
    combine: f64,
}

impl From<StageDurations> for StageTimes {
    fn from(d: StageDurations) -> Self {
        Self {
            kmeans: d.kmeans,
            dispatch: d.dispatch,
            search: d.search,
            combine: d.combine,
        }
    }
}

#[derive(Serialize)]
struct Traffic {
    intra_node_bytes: u64,
    inter_node_bytes: u64,
}

#[derive(Serialize)]
struct Metrics {
    queries: usize,
    k: usize,
    fan_out: usize,
    ranks: usize,
    ranks_per_node: usize,
    mode: PipelineMode,
    recall_at_k: f64,
    makespan_sequential_s: f64,
    makespan_pipelined_s: f64,
    /// Modeled seconds per stage, summed over all microbatches.
    stage_times_s: StageTimes,
    batches: usize,
    microbatches: usize,
    routed_entries: usize,
    visited: u64,
    dispatch_traffic: Traffic,
    combine_traffic: Traffic,
}

pub fn query(cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    let index_path = cfg.require("index", &cfg.index)?;
    let queries_path = cfg.require("queries", &cfg.queries)?;
    let out_dir = cfg.require("output_dir", &cfg.output_dir)?;
    let search = cfg.search_params()?;
    let fan_out = cfg.fan_out()?;
    let mode = cfg.mode()?;
    let timing = TimingModel::Modeled {
        gpu: cfg.gpu_spec()?,
        search_format: cfg.element_format()?,
        pricing: cfg.search_pricing()?,
    };

    let mut bundle = IndexBundle::load(index_path)?;
    // The index remembers its topology; flags may re-place it.
    let mut topo_cfg = cfg.clone();
    topo_cfg.ranks.get_or_insert(bundle.placement().ranks());
    topo_cfg.ranks_per_node.get_or_insert(bundle.ranks_per_node());
    let topo = topo_cfg.topology()?;
    cfg.check_dim(bundle.dim(), "index")?;
    for (field, given, actual) in [
        ("num_clusters", cfg.num_clusters, bundle.num_clusters()),
        ("out_degree", cfg.out_degree, bundle.out_degree()),
    ] {
        if given.is_some_and(|g| g != actual) {
            return Err(CliError::Config(format!("{field} is {} but the index has {actual}", given.unwrap())));
        }
    }
    if fan_out > bundle.num_clusters() {
        return Err(CliError::Config(format!(
            "fan_out {fan_out} exceeds the index's {} clusters",
            bundle.num_clusters()
        )));
    }
    if topo.ranks() > bundle.num_clusters() {
        return Err(CliError::Config(format!(
            "ranks {} exceeds the index's {} clusters",
            topo.ranks(),
            bundle.num_clusters()
        )));
    }
    if bundle.placement().ranks() != topo.ranks() || bundle.ranks_per_node() != topo.ranks_per_node() {
        bundle.replace(&topo)?;
    }

    let queries = load_fvecs(queries_path)?;
    if queries.dim() != bundle.dim() {
        return Err(CliError::Data(format!(
            "queries have dimension {} but the index has {}",
            queries.dim(),
            bundle.dim()
        )));
    }
    if mode == PipelineMode::TwoMicrobatch && cfg.batch_size == Some(1) {
        return Err(CliError::Config("batch_size must be at least 2 in two_microbatch mode".into()));
    }

    let run = |m: PipelineMode| {
        let pc = PipelineConfig {
            search,
            fan_out,
            mode: m,
            batch_size: cfg.batch_size,
            timing,
        };
        run_pipeline(&bundle, &queries, &topo, &pc)
    };
    let seq = run(PipelineMode::Sequential)?;
    let two = run(PipelineMode::TwoMicrobatch)?;
    if seq.neighbors != two.neighbors {
        return Err(CliError::Core(fantasy_core::Error::Internal(
            "pipelined results differ from sequential results".into(),
        )));
    }
    let chosen = match mode {
        PipelineMode::Sequential => &seq,
        PipelineMode::TwoMicrobatch => &two,
    };

    let db = bundle.database();
    let k = search.k;
    let mut recall = 0.0;
    for (got, q) in chosen.neighbors.iter().zip(queries.rows()) {
        let truth: Vec<u32> = brute_force_topk(&db, q, k)?.into_iter().map(|s| s.id).collect();
        let ids: Vec<u32> = got.iter().map(|n| n.id).collect();
        recall += recall_at_k_ids(&ids, &truth, k)?;
    }
    recall /= queries.len().max(1) as f64;

    fs::create_dir_all(out_dir).map_err(io)?;
    write_results(chosen, k, bundle.dim(), out_dir)?;

    let mut totals = StageDurations::default();
    for m in &chosen.microbatches {
        totals.kmeans += m.durations.kmeans;
        totals.dispatch += m.durations.dispatch;
        totals.search += m.durations.search;
        totals.combine += m.durations.combine;
    }
    let s = &chosen.stats;
    let metrics = Metrics {
        queries: queries.len(),
        k,
        fan_out,
        ranks: topo.ranks(),
        ranks_per_node: topo.ranks_per_node(),
        mode,
        recall_at_k: recall,
        makespan_sequential_s: seq.makespan,
        makespan_pipelined_s: two.makespan,
        stage_times_s: totals.into(),
        batches: s.batches,
        microbatches: chosen.microbatches.len(),
        routed_entries: s.routed_entries,
        visited: s.visited,
        dispatch_traffic: Traffic {
            intra_node_bytes: s.dispatch_traffic.intra_bytes,
            inter_node_bytes: s.dispatch_traffic.inter_bytes,
        },
        combine_traffic: Traffic {
            intra_node_bytes: s.combine_traffic.intra_bytes,
            inter_node_bytes: s.combine_traffic.inter_bytes,
        },
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics are plain data");
    fs::write(out_dir.join("metrics.json"), json + "\n").map_err(io)?;
    fs::write(out_dir.join("timeline.json"), chosen.timeline.to_json() + "\n").map_err(io)?;
    fs::write(out_dir.join("timeline.csv"), chosen.timeline.to_csv()).map_err(io)?;

    writeln!(
        out,
        "{} queries, k={k}, c={fan_out}, R={}: recall@{k} {:.4}, makespan sequential {:.6} s, pipelined {:.6} s",
        queries.len(),
        topo.ranks(),
        recall,
        seq.makespan,
        two.makespan
    )
    .map_err(io)?;
    writeln!(out, "wrote results to {}", out_dir.display()).map_err(io)
}

/// `results.ivecs` holds ids, `distances.fvecs` squared distances (one row
/// per query) and `results.fvecs` the vectors (k rows per query).
fn write_results(res: &PipelineResult, k: usize, dim: usize, dir: &Path) -> Result<(), CliError> {
    let mut ids = Vec::with_capacity(res.neighbors.len());
    let mut dists = Vec::with_capacity(res.neighbors.len() * k);
    let mut vecs = Vec::with_capacity(res.neighbors.len() * k * dim);
    for got in &res.neighbors {
        let mut row: Vec<i32> = got.iter().map(|n| n.id as i32).collect();
        row.resize(k, MISSING_ID);
        ids.push(row);
        dists.extend(got.iter().map(|n| n.dist));
        dists.extend(std::iter::repeat_n(MISSING_DIST, k - got.len()));
        for n in got {
            vecs.extend_from_slice(&n.vector);
        }
        vecs.extend(std::iter::repeat_n(0.0, (k - got.len()) * dim));
    }
    save_ivecs(&ids, dir.join("results.ivecs"))?;
    save_fvecs(&Dataset::new(k, dists)?, dir.join("distances.fvecs"))?;
    save_fvecs(&Dataset::new(dim, vecs)?, dir.join("results.fvecs"))?;
    Ok(())
}

pub fn oracle(cfg: &RunConfig, out: Out) -> Result<(), CliError> {
    let db_path = cfg.require("database", &cfg.database)?;
    let queries_path = cfg.require("queries", &cfg.queries)?;
    let gt_path = cfg.require("ground_truth", &cfg.ground_truth)?;
    let k = cfg.k()?;
    let db = load_fvecs(db_path)?;
    cfg.check_dim(db.dim(), "database")?;
    let queries = load_fvecs(queries_path)?;
    if queries.dim() != db.dim() {
        return Err(CliError::Data(format!(
            "queries have dimension {} but the database has {}",
            queries.dim(),
            db.dim()
        )));
    }
    let rows = queries
        .rows()
        .map(|q| Ok(brute_force_topk(&db, q, k)?.into_iter().map(|s| s.id as i32).collect()))
        .collect::<Result<Vec<Vec<i32>>, CliError>>()?;
    save_ivecs(&rows, gt_path)?;
    writeln!(out, "wrote top-{k} ground truth for {} queries to {}", rows.len(), gt_path.display()).map_err(io)
}

pub fn model(cfg: &RunConfig, json: bool, out: Out) -> Result<(), CliError> {
    let report = full_report(&cfg.workload()?, &cfg.gpu_spec()?, &cfg.link_spec()?)?;
    if json {
        writeln!(out, "{}", report.to_json()).map_err(io)
    } else {
        write!(out, "{report}").map_err(io)
    }
}

pub fn sweep_bs(cfg: &RunConfig, values: &[usize], out: Out) -> Result<(), CliError> {
    let base = cfg.workload()?;
    let gpu = cfg.gpu_spec()?;
    let links = cfg.link_spec()?;
    let default: Vec<usize> = (6..=20).map(|p| 1usize << p).collect();
    let values = if values.is_empty() { &default[..] } else { values };
    writeln!(out, "bs,t_out_of_core_s,t_in_hbm_s").map_err(io)?;
    for &bs in values {
        let mut w = base;
        w.batch_size = bs;
        let r = full_report(&w, &gpu, &links)?;
        writeln!(out, "{bs},{:e},{:e}", r.t_out_of_core_s, r.t_in_hbm_s).map_err(io)?;
    }
    Ok(())
}
