//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fantasy_core::cost::{
    arithmetic_intensity, full_report, iteration_time_in_hbm, iteration_time_out_of_core,
};
use fantasy_core::vector::{brute_force_topk, read_fvecs, recall_at_k_ids, write_fvecs, write_ivecs};
use fantasy_core::{
    replay_schedule, run_pipeline, BuildParams, ClusterTopology, Dataset, ElementFormat, GpuSpec, IndexBundle, LinkSpec,
    PipelineConfig, PipelineMode, PipelineResult, SearchParams, SearchPricing, StageDurations, TimingModel, Workload,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn within(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure(rel(got, want) <= tol, || format!("{name} = {got:e}, want {want:e} within {tol}"))
}

const K: usize = 10;
const SEED: u64 = 2024;
const C: usize = 64;
const OUT_DEGREE: usize = 32;

fn desk_topology() -> ClusterTopology {
    ClusterTopology::new(8, 4, LinkSpec::a100_hdr()).unwrap()
}

fn desk_build(db: &Dataset) -> IndexBundle {
    let params = BuildParams {
        num_clusters: C,
        out_degree: OUT_DEGREE,
        max_iters: 25,
        seed: SEED,
    };
    IndexBundle::build(db, &params, &desk_topology()).expect("build")
}

fn modeled_timing() -> TimingModel {
    TimingModel::Modeled {
        gpu: GpuSpec::a100(),
        search_format: ElementFormat::FP16,
        pricing: SearchPricing::Modeled,
    }
}

fn config(search: SearchParams, fan_out: usize, mode: PipelineMode) -> PipelineConfig {
    PipelineConfig {
        search,
        fan_out,
        mode,
        batch_size: Some(16),
        timing: modeled_timing(),
    }
}

struct Desk {
    db: Dataset,
    queries: Dataset,
    bundle: IndexBundle,
    truth: Vec<Vec<u32>>,
}

fn mean_recall(res: &PipelineResult, truth: &[Vec<u32>]) -> f64 {
    let total: f64 = res
        .neighbors
        .iter()
        .zip(truth)
        .map(|(got, want)| {
            let ids: Vec<u32> = got.iter().map(|n| n.id).collect();
            recall_at_k_ids(&ids, want, K).unwrap()
        })
        .sum();
    total / truth.len() as f64
}

fn criterion_1() -> Check {
    ensure(arithmetic_intensity(2.0, 4.0) == 0.5, || "AI(2,4) != 0.5".into())?;
    ensure(arithmetic_intensity(3.0, 4.0) == 0.75, || "AI(3,4) != 0.75".into())?;
    let r = full_report(&Workload::reference(), &GpuSpec::a100(), &LinkSpec::a100_hdr()).map_err(|e| e.to_string())?;
    within("T_kmeans", r.t_kmeans_s, 1.35e-3, 0.01)?;
    ensure(r.bytes_per_query == 3_538_944.0, || format!("bytes/query = {}", r.bytes_per_query))?;
    within("QPS", r.search_qps, 4.37e5, 0.01)?;
    within("T_search", r.t_search_s, 68.5e-3, 0.01)?;
    within("T_dispatch", r.t_dispatch_s, 3.84e-3, 0.01)?;
    within("NVLink volume", r.dispatch_bytes_intra, 92.16e6, 0.005)?;
    within("RDMA volume", r.dispatch_bytes_inter, 92.16e6, 0.005)?;
    ensure(r.t_combine_s == 3.0 * r.t_dispatch_s, || "T_combine != 3 T_dispatch".into())?;
    Ok(format!(
        "T_kmeans={:.3}ms T_dispatch={:.3}ms T_search={:.2}ms QPS={:.0} T_combine={:.2}ms",
        r.t_kmeans_s * 1e3,
        r.t_dispatch_s * 1e3,
        r.t_search_s * 1e3,
        r.search_qps,
        r.t_combine_s * 1e3
    ))
}

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut equal = 0;
    for i in 0..1000 {
        let gpu = GpuSpec {
            peak_flops: 10f64.powf(rng.random_range(12.0..15.5)),
            gemm_efficiency: rng.random_range(0.05..=1.0),
            hbm_bandwidth: 10f64.powf(rng.random_range(11.0..13.0)),
            io_bandwidth: 0.0,
        };
        // Every fifth sample pins B_IO to B_HBM to exercise the boundary.
        let io = if i % 5 == 0 { gpu.hbm_bandwidth } else { gpu.hbm_bandwidth * rng.random_range(1e-3..1.0) };
        let gpu = GpuSpec { io_bandwidth: io, ..gpu };
        let bs = rng.random_range(1..200_000) as f64;
        let fq = 10f64.powf(rng.random_range(3.0..10.0));
        let bq = 10f64.powf(rng.random_range(3.0..9.0));

        let ooc = iteration_time_out_of_core(bs, fq, bq, &gpu);
        let hbm = iteration_time_in_hbm(bs, fq, bq, &gpu);
        let compute = bs * fq / gpu.peak_flops;
        let mem = bs * bq / gpu.hbm_bandwidth;
        let io_t = bs * bq / gpu.io_bandwidth;
        ensure(ooc >= hbm, || format!("sample {i}: out-of-core {ooc:e} < in-HBM {hbm:e}"))?;
        let binding_shared = io_t <= compute.max(mem);
        ensure((ooc == hbm) == binding_shared, || {
            format!("sample {i}: equality {} but I/O binding {}", ooc == hbm, !binding_shared)
        })?;
        equal += usize::from(ooc == hbm);
    }
    Ok(format!("1000 samples, {equal} with a shared binding channel"))
}

fn criterion_3(desk: &Desk) -> Check {
    let max_part = desk.bundle.partition_sizes().into_iter().max().unwrap();
    let w = 16;
    let iters = max_part.div_ceil(w);
    ensure(iters * w * OUT_DEGREE >= max_part, || "parameters are not exhaustive-scale".into())?;
    let run = |search: SearchParams| {
        run_pipeline(
            &desk.bundle,
            &desk.queries,
            &desk_topology(),
            &config(search, C, PipelineMode::TwoMicrobatch),
        )
        .map(|res| mean_recall(&res, &desk.truth))
        .map_err(|e| e.to_string())
    };
    // Nodes that are in no other node's k-NN list cannot be reached by any
    // traversal, so exhaustive search seeds from every node.
    let exhaustive = run(SearchParams::with_entries(iters, w, K, max_part).unwrap())?;
    let default_entries = run(SearchParams::new(iters, w, K).unwrap())?;
    ensure(exhaustive == 1.0, || format!("recall@10 = {exhaustive}"))?;
    Ok(format!(
        "recall@10 = {exhaustive:.4} (max partition {max_part}, I={iters}, w={w}, d_g={OUT_DEGREE}, \
         entries={max_part}); {default_entries:.4} with entries=w"
    ))
}

fn criterion_4(desk: &Desk) -> Check {
    let search = SearchParams::new(6, 6, K).unwrap();
    let mut recalls = Vec::new();
    for c in [1, 2, 4, 8] {
        let res = run_pipeline(
            &desk.bundle,
            &desk.queries,
            &desk_topology(),
            &config(search, c, PipelineMode::TwoMicrobatch),
        )
        .map_err(|e| e.to_string())?;
        recalls.push(mean_recall(&res, &desk.truth));
    }
    ensure(recalls[2] >= 0.85, || format!("recall@10 at c=4 is {}", recalls[2]))?;
    ensure(recalls.windows(2).all(|w| w[0] <= w[1]), || format!("recall not monotone in c: {recalls:?}"))?;
    Ok(format!(
        "recall@10 for c=1,2,4,8: {}",
        recalls.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(", ")
    ))
}

fn criterion_5(desk: &Desk) -> Check {
    let unit = [StageDurations::uniform(1.0); 2];
    let seq = replay_schedule(&unit, PipelineMode::Sequential).map_err(|e| e.to_string())?;
    let two = replay_schedule(&unit, PipelineMode::TwoMicrobatch).map_err(|e| e.to_string())?;
    ensure(seq.makespan() == 8.0 && two.makespan() == 5.0, || {
        format!("unit makespans {} / {}", seq.makespan(), two.makespan())
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let mut draw = || StageDurations {
        kmeans: rng.random_range(0.0..10.0),
        dispatch: rng.random_range(0.0..10.0),
        search: rng.random_range(0.0..10.0),
        combine: rng.random_range(0.0..10.0),
    };
    for i in 0..1000 {
        let d = [draw(), draw()];
        let seq = replay_schedule(&d, PipelineMode::Sequential).map_err(|e| e.to_string())?;
        let two = replay_schedule(&d, PipelineMode::TwoMicrobatch).map_err(|e| e.to_string())?;
        seq.check().map_err(|e| format!("tuple {i} sequential: {e}"))?;
        two.check().map_err(|e| format!("tuple {i} two-microbatch: {e}"))?;
        ensure(two.makespan() <= seq.makespan(), || format!("tuple {i}: {d:?}"))?;
    }

    let search = SearchParams::new(6, 6, K).unwrap();
    let mut reference: Option<PipelineResult> = None;
    for (ranks, per_node) in [(1, 1), (4, 4), (16, 8)] {
        let topo = ClusterTopology::new(ranks, per_node, LinkSpec::a100_hdr()).unwrap();
        let mut bundle = desk.bundle.clone();
        bundle.replace(&topo).map_err(|e| e.to_string())?;
        let mut makespans = Vec::new();
        for mode in [PipelineMode::Sequential, PipelineMode::TwoMicrobatch] {
            let res = run_pipeline(&bundle, &desk.queries, &topo, &config(search, 4, mode)).map_err(|e| e.to_string())?;
            res.timeline.check().map_err(|e| format!("R={ranks} {mode:?}: {e}"))?;
            makespans.push(res.makespan);
            match &reference {
                None => reference = Some(res),
                Some(r) => ensure(same_results(r, &res), || format!("results differ at R={ranks} {mode:?}"))?,
            }
        }
        ensure(makespans[1] <= makespans[0], || format!("R={ranks}: pipelined {makespans:?}"))?;
    }
    Ok("unit makespans 8 / 5; 1000 tuples checked; results identical over modes and R = 1, 4, 16".into())
}

/// Compares ids, distance bits and payload bits.
fn same_results(a: &PipelineResult, b: &PipelineResult) -> bool {
    a.neighbors.len() == b.neighbors.len()
        && a.neighbors.iter().zip(&b.neighbors).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y).all(|(p, q)| {
                    p.id == q.id
                        && p.dist.to_bits() == q.dist.to_bits()
                        && p.vector.iter().map(|v| v.to_bits()).eq(q.vector.iter().map(|v| v.to_bits()))
                })
        })
}

fn result_files(res: &PipelineResult, dim: usize) -> (Vec<u8>, Vec<u8>) {
    let ids: Vec<Vec<i32>> = res.neighbors.iter().map(|n| n.iter().map(|x| x.id as i32).collect()).collect();
    let vecs: Vec<f32> = res.neighbors.iter().flatten().flat_map(|n| n.vector.iter().copied()).collect();
    let mut ivecs = Vec::new();
    write_ivecs(&mut ivecs, &ids).unwrap();
    let mut fvecs = Vec::new();
    write_fvecs(&mut fvecs, &Dataset::new(dim, vecs).unwrap()).unwrap();
    (ivecs, fvecs)
}

fn criterion_6(desk: &Desk) -> Check {
    let again = desk_build(&desk.db);
    let bytes_a = desk.bundle.to_bytes();
    let bytes_b = again.to_bytes();
    ensure(bytes_a == bytes_b, || "rebuild produced different index bytes".into())?;

    let cfg = config(SearchParams::new(6, 6, K).unwrap(), 4, PipelineMode::TwoMicrobatch);
    let topo = desk_topology();
    let ra = run_pipeline(&desk.bundle, &desk.queries, &topo, &cfg).map_err(|e| e.to_string())?;
    let rb = run_pipeline(&again, &desk.queries, &topo, &cfg).map_err(|e| e.to_string())?;
    ensure(result_files(&ra, desk.db.dim()) == result_files(&rb, desk.db.dim()), || {
        "result files differ between runs".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("index.fnsy");
    desk.bundle.save(&path).map_err(|e| e.to_string())?;
    let loaded = IndexBundle::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded == desk.bundle, || "loaded index differs from the built one".into())?;
    ensure(loaded.to_bytes() == bytes_a, || "re-saved index bytes differ".into())?;

    let mut buf = Vec::new();
    write_fvecs(&mut buf, &desk.db).map_err(|e| e.to_string())?;
    let back = read_fvecs(&buf).map_err(|e| e.to_string())?;
    ensure(
        back.dim() == desk.db.dim()
            && back.as_slice().iter().map(|v| v.to_bits()).eq(desk.db.as_slice().iter().map(|v| v.to_bits())),
        || "fvecs round trip is not bit-exact".into(),
    )?;
    Ok(format!("index {} bytes reproduced; results and fvecs round trips bit-exact", bytes_a.len()))
}

fn run(id: usize, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = t.elapsed();
    let out = match out {
        Ok(d) if elapsed > budget => Err(format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
        other => other,
    };
    match &out {
        Ok(d) => println!("PASS criterion {id} ({elapsed:.2?}): {d}"),
        Err(d) => println!("FAIL criterion {id} ({elapsed:.2?}): {d}"),
    }
    out.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, Duration::from_secs(1), criterion_1);
    ok &= run(2, Duration::from_secs(1), criterion_2);

    // Corpus generation, build and ground truth count towards criterion 3.
    let mut desk = None;
    ok &= run(3, Duration::from_secs(120), || {
        let (db, queries) = common::desk_corpus();
        let bundle = desk_build(&db);
        let truth = queries
            .rows()
            .map(|q| brute_force_topk(&db, q, K).unwrap().into_iter().map(|s| s.id).collect())
            .collect();
        let d = desk.insert(Desk { db, queries, bundle, truth });
        criterion_3(d)
    });
    let Some(desk) = desk else {
        for id in 4..=6 {
            println!("FAIL criterion {id}: desk corpus unavailable");
        }
        std::process::exit(1);
    };
    ok &= run(4, Duration::from_secs(120), || criterion_4(&desk));
    ok &= run(5, Duration::from_secs(60), || criterion_5(&desk));
    ok &= run(6, Duration::from_secs(60), || criterion_6(&desk));

    if !ok {
        std::process::exit(1);
    }
}
