//! Closed-form latency and throughput model.
//!
//! Units are SI throughout: seconds, bytes, FLOP/s, bytes/s. MB and GB in
//! reports are decimal (10^6 and 10^9 bytes).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ElementFormat;

/// Query vectors travel as FP32 during dispatch.
pub const DISPATCH_BYTES_PER_ELEMENT: f64 = 4.0;

/// Arithmetic intensity at which a kernel stops being bandwidth-bound.
pub const COMPUTE_BOUND_AI: f64 = 10.0;

/// Single-GPU throughput ceilings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    /// Peak arithmetic throughput, FLOP/s.
    pub peak_flops: f64,
    /// Fraction of peak a large GEMM sustains, in (0, 1].
    pub gemm_efficiency: f64,
    /// HBM bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
    /// Host or disk to GPU bandwidth, bytes/s.
    pub io_bandwidth: f64,
}

impl GpuSpec {
    pub const PCIE4_X16: f64 = 32e9;
    pub const PCIE5_X16: f64 = 64e9;
    pub const NVME: f64 = 7e9;

    /// A100: 156 TFLOP/s TF32, 1.55 TB/s HBM, PCIe 4 x16 host link, 60% GEMM efficiency.
    pub fn a100() -> Self {
        Self {
            peak_flops: 156e12,
            gemm_efficiency: 0.6,
            hbm_bandwidth: 1.55e12,
            io_bandwidth: Self::PCIE4_X16,
        }
    }

    pub fn io_preset(name: &str) -> Option<f64> {
        match name {
            "pcie4" => Some(Self::PCIE4_X16),
            "pcie5" => Some(Self::PCIE5_X16),
            "nvme" => Some(Self::NVME),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("peak_flops", self.peak_flops)?;
        positive("hbm_bandwidth", self.hbm_bandwidth)?;
        positive("io_bandwidth", self.io_bandwidth)?;
        if !(self.gemm_efficiency > 0.0 && self.gemm_efficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "gemm_efficiency must be in (0, 1], got {}",
                self.gemm_efficiency
            )));
        }
        Ok(())
    }
}

/// Per-GPU interconnect bandwidths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Intra-node (NVLink) bandwidth, bytes/s.
    pub nvlink_bandwidth: f64,
    /// Inter-node (RDMA) bandwidth, bytes/s.
    pub rdma_bandwidth: f64,
}

impl LinkSpec {
    /// 600 GB/s NVLink, 25 GB/s RDMA per GPU.
    pub fn a100_hdr() -> Self {
        Self {
            nvlink_bandwidth: 600e9,
            rdma_bandwidth: 25e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("nvlink_bandwidth", self.nvlink_bandwidth)?;
        positive("rdma_bandwidth", self.rdma_bandwidth)
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Everything the stage formulas need to know about one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub batch_size: usize,
    pub dim: usize,
    pub num_clusters: usize,
    pub fan_out: usize,
    pub ranks: usize,
    pub ranks_per_node: usize,
    pub iterations: usize,
    pub beam_width: usize,
    pub out_degree: usize,
    pub k: usize,
    /// Expanded nodes per query; `iterations * beam_width` when unset.
    pub visited_nodes: Option<usize>,
    /// Encoding of vectors read during search.
    pub search_format: ElementFormat,
}

impl Workload {
    /// The worked example: 10k queries of dimension 1536, 4096 clusters,
    /// top-3 fan-out over 16 ranks on two nodes, `I = w = 6`, `d_g = 32`,
    /// FP16 search traffic.
    pub fn reference() -> Self {
        Self {
            batch_size: 10_000,
            dim: 1536,
            num_clusters: 4096,
            fan_out: 3,
            ranks: 16,
            ranks_per_node: 8,
            iterations: 6,
            beam_width: 6,
            out_degree: 32,
            k: 10,
            visited_nodes: None,
            search_format: ElementFormat::FP16,
        }
    }

    pub fn visited_nodes(&self) -> usize {
        self.visited_nodes
            .unwrap_or(self.iterations * self.beam_width)
    }

    /// Probability that a dispatch destination shares the sender's node.
    pub fn intra_node_fraction(&self) -> f64 {
        intra_node_fraction(self.ranks, self.ranks_per_node)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("num_clusters", self.num_clusters),
            ("fan_out", self.fan_out),
            ("ranks", self.ranks),
            ("ranks_per_node", self.ranks_per_node),
            ("iterations", self.iterations),
            ("beam_width", self.beam_width),
            ("out_degree", self.out_degree),
            ("k", self.k),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.visited_nodes == Some(0) {
            return Err(Error::invalid("visited_nodes must be positive"));
        }
        if self.fan_out > self.num_clusters {
            return Err(Error::invalid(format!(
                "fan_out {} exceeds num_clusters {}",
                self.fan_out, self.num_clusters
            )));
        }
        if !self.ranks.is_multiple_of(self.ranks_per_node) {
            return Err(Error::invalid(format!(
                "ranks {} is not a multiple of ranks_per_node {}",
                self.ranks, self.ranks_per_node
            )));
        }
        Ok(())
    }
}

pub fn intra_node_fraction(ranks: usize, ranks_per_node: usize) -> f64 {
    ranks_per_node as f64 / ranks as f64
}

/// FLOPs per query: `F_elem * L * M * d`.
pub fn flops_per_query(visited_nodes: usize, out_degree: usize, dim: usize, flops_per_element: u32) -> f64 {
    f64::from(flops_per_element) * visited_nodes as f64 * out_degree as f64 * dim as f64
}

/// HBM bytes per query: `(bt_elem * d) * (L * M)`.
pub fn bytes_per_query(visited_nodes: usize, out_degree: usize, dim: usize, bytes_per_element: u32) -> f64 {
    f64::from(bytes_per_element) * dim as f64 * visited_nodes as f64 * out_degree as f64
}

/// FLOP per byte; the graph-shape terms cancel out.
pub fn arithmetic_intensity(flops_per_element: f64, bytes_per_element: f64) -> f64 {
    flops_per_element / bytes_per_element
}

/// Batch time when vectors stream from host memory or disk: the slowest of
/// compute, HBM and host I/O.
pub fn iteration_time_out_of_core(batch: f64, flops_q: f64, bytes_q: f64, gpu: &GpuSpec) -> f64 {
    iteration_time_in_hbm(batch, flops_q, bytes_q, gpu).max(batch * bytes_q / gpu.io_bandwidth)
}

/// Batch time with the index resident in HBM: the slower of compute and HBM.
pub fn iteration_time_in_hbm(batch: f64, flops_q: f64, bytes_q: f64, gpu: &GpuSpec) -> f64 {
    (batch * flops_q / gpu.peak_flops).max(batch * bytes_q / gpu.hbm_bandwidth)
}

/// Local top-c classification: `2 b d C / (eta P)`.
pub fn t_kmeans(batch: usize, dim: usize, num_clusters: usize, gpu: &GpuSpec) -> f64 {
    kmeans_flops(batch, dim, num_clusters) / (gpu.gemm_efficiency * gpu.peak_flops)
}

pub fn kmeans_flops(batch: usize, dim: usize, num_clusters: usize) -> f64 {
    2.0 * batch as f64 * dim as f64 * num_clusters as f64
}

/// Bytes a rank sends during dispatch: `bs * c * d * 4`.
pub fn dispatch_volume(batch: usize, fan_out: usize, dim: usize) -> f64 {
    batch as f64 * fan_out as f64 * dim as f64 * DISPATCH_BYTES_PER_ELEMENT
}

/// All-to-all dispatch time per rank. The per-rank volume `bs * c * d * 4`
/// splits into an NVLink share `f_nv` and an RDMA share `1 - f_nv`.
pub fn t_dispatch(batch: usize, fan_out: usize, dim: usize, f_intra: f64, links: &LinkSpec) -> f64 {
    let volume = dispatch_volume(batch, fan_out, dim);
    volume * f_intra / links.nvlink_bandwidth + volume * (1.0 - f_intra) / links.rdma_bandwidth
}

/// Search time on one rank for `c * bs` routed queries, bounded by HBM.
#[allow(clippy::too_many_arguments)]
pub fn t_search(
    batch: usize,
    fan_out: usize,
    iterations: usize,
    beam_width: usize,
    out_degree: usize,
    dim: usize,
    fmt: ElementFormat,
    gpu: &GpuSpec,
) -> f64 {
    let bytes_q = bytes_per_query(iterations * beam_width, out_degree, dim, fmt.bytes_per_element());
    fan_out as f64 * batch as f64 * bytes_q / gpu.hbm_bandwidth
}

/// Queries per second one rank sustains when HBM is the only limit.
pub fn search_qps(bytes_q: f64, gpu: &GpuSpec) -> f64 {
    gpu.hbm_bandwidth / bytes_q
}

/// Return of results to the originating ranks, priced as `c * T_dispatch`.
pub fn t_combine(t_dispatch: f64, fan_out: usize) -> f64 {
    fan_out as f64 * t_dispatch
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub workload: Workload,
    pub gpu: GpuSpec,
    pub links: LinkSpec,
    pub arithmetic_intensity: f64,
    pub flops_per_query: f64,
    pub bytes_per_query: f64,
    pub kmeans_flops: f64,
    pub t_kmeans_s: f64,
    pub intra_node_fraction: f64,
    pub dispatch_bytes_per_rank: f64,
    pub dispatch_bytes_intra: f64,
    pub dispatch_bytes_inter: f64,
    pub t_dispatch_s: f64,
    pub search_qps: f64,
    pub t_search_s: f64,
    pub t_combine_s: f64,
    /// Roofline times for a batch of `c * bs` search queries.
    pub t_out_of_core_s: f64,
    pub t_in_hbm_s: f64,
}

pub fn full_report(w: &Workload, gpu: &GpuSpec, links: &LinkSpec) -> Result<CostReport> {
    w.validate()?;
    gpu.validate()?;
    links.validate()?;

    let fmt = w.search_format;
    let visited = w.visited_nodes();
    let fq = flops_per_query(visited, w.out_degree, w.dim, fmt.flops_per_element());
    let bq = bytes_per_query(visited, w.out_degree, w.dim, fmt.bytes_per_element());
    let f_intra = w.intra_node_fraction();
    let volume = dispatch_volume(w.batch_size, w.fan_out, w.dim);
    let t_disp = t_dispatch(w.batch_size, w.fan_out, w.dim, f_intra, links);
    let searched = (w.fan_out * w.batch_size) as f64;

    let report = CostReport {
        workload: *w,
        gpu: *gpu,
        links: *links,
        arithmetic_intensity: arithmetic_intensity(
            f64::from(fmt.flops_per_element()),
            f64::from(fmt.bytes_per_element()),
        ),
        flops_per_query: fq,
        bytes_per_query: bq,
        kmeans_flops: kmeans_flops(w.batch_size, w.dim, w.num_clusters),
        t_kmeans_s: t_kmeans(w.batch_size, w.dim, w.num_clusters, gpu),
        intra_node_fraction: f_intra,
        dispatch_bytes_per_rank: volume,
        dispatch_bytes_intra: volume * f_intra,
        dispatch_bytes_inter: volume * (1.0 - f_intra),
        t_dispatch_s: t_disp,
        search_qps: search_qps(bq, gpu),
        t_search_s: searched * bq / gpu.hbm_bandwidth,
        t_combine_s: t_combine(t_disp, w.fan_out),
        t_out_of_core_s: iteration_time_out_of_core(searched, fq, bq, gpu),
        t_in_hbm_s: iteration_time_in_hbm(searched, fq, bq, gpu),
    };
    Ok(report)
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = &self.workload;
        writeln!(
            f,
            "workload: bs={} d={} C={} c={} R={} ({} per node) I={} w={} d_g={} search={}B/elem",
            w.batch_size,
            w.dim,
            w.num_clusters,
            w.fan_out,
            w.ranks,
            w.ranks_per_node,
            w.iterations,
            w.beam_width,
            w.out_degree,
            w.search_format.bytes_per_element()
        )?;
        let rows: [(&str, String, String); 10] = [
            ("arithmetic intensity", format!("{:.3}", self.arithmetic_intensity), "FLOP/B".into()),
            ("FLOPs / query", format!("{:.0}", self.flops_per_query), "FLOP".into()),
            ("bytes / query", format!("{:.0}", self.bytes_per_query), "B".into()),
            ("stage 1  k-means", format!("{:.4}", self.t_kmeans_s * 1e3), "ms".into()),
            (
                "stage 2  dispatch",
                format!("{:.4}", self.t_dispatch_s * 1e3),
                format!(
                    "ms  ({:.2} MB nvlink + {:.2} MB rdma)",
                    self.dispatch_bytes_intra / 1e6,
                    self.dispatch_bytes_inter / 1e6
                ),
            ),
            ("stage 3  search", format!("{:.4}", self.t_search_s * 1e3), "ms".into()),
            ("search QPS / rank", format!("{:.4e}", self.search_qps), "queries/s".into()),
            ("stage 4  combine", format!("{:.4}", self.t_combine_s * 1e3), "ms".into()),
            ("roofline out-of-core", format!("{:.4}", self.t_out_of_core_s * 1e3), "ms".into()),
            ("roofline in-HBM", format!("{:.4}", self.t_in_hbm_s * 1e3), "ms".into()),
        ];
        for (name, value, unit) in rows {
            writeln!(f, "  {name:<22} {value:>14} {unit}")?;
        }
        Ok(())
    }
}
