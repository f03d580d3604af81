//! Run configuration: a JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use fantasy_core::{
    ClusterTopology, ElementFormat, GpuSpec, LinkSpec, PipelineMode, SearchParams, SearchPricing, Workload,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every field is optional; unset fields fall back to the reference
/// workload or to values derived from the input files. Flags use the
/// kebab-case form of the JSON field name.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Database vectors (fvecs).
    #[arg(long)]
    pub database: Option<PathBuf>,
    /// Query vectors (fvecs).
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Index file written by `build`, read by `query`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Directory for query results, metrics and timelines.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Ground-truth ivecs written by `oracle`.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,

    /// Queries per endpoint batch (bs).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Vector dimension for `model`; checked against the data elsewhere.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of clusters (C).
    #[arg(long)]
    pub num_clusters: Option<usize>,
    /// Clusters each query is sent to (c).
    #[arg(long)]
    pub fan_out: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Beam-search iterations (I).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Beam width (w).
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Graph out-degree (d_g).
    #[arg(long)]
    pub out_degree: Option<usize>,
    /// Search entry nodes per partition; defaults to the beam width.
    #[arg(long)]
    pub entry_count: Option<usize>,
    /// Expanded nodes per query (L) for `model`; defaults to I * w.
    #[arg(long)]
    pub visited_nodes: Option<usize>,
    /// Simulated GPUs (R).
    #[arg(long)]
    pub ranks: Option<usize>,
    #[arg(long)]
    pub ranks_per_node: Option<usize>,
    /// Lloyd iterations during `build`.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `sequential` or `two_microbatch`.
    #[arg(long)]
    pub mode: Option<String>,

    /// GPU preset (`a100`).
    #[arg(long)]
    pub gpu: Option<String>,
    #[arg(long)]
    pub peak_flops: Option<f64>,
    #[arg(long)]
    pub gemm_efficiency: Option<f64>,
    #[arg(long)]
    pub hbm_bandwidth: Option<f64>,
    /// Host-to-GPU link preset: `pcie4`, `pcie5` or `nvme`.
    #[arg(long)]
    pub io: Option<String>,
    #[arg(long)]
    pub io_bandwidth: Option<f64>,
    /// Interconnect preset (`a100_hdr`).
    #[arg(long)]
    pub links: Option<String>,
    #[arg(long)]
    pub nvlink_bandwidth: Option<f64>,
    #[arg(long)]
    pub rdma_bandwidth: Option<f64>,
    /// Search element format: `fp16` or `fp32`.
    #[arg(long)]
    pub search_format: Option<String>,
    #[arg(long)]
    pub bytes_per_element: Option<u32>,
    #[arg(long)]
    pub flops_per_element: Option<u32>,
    /// Search-stage pricing: `modeled` (I*w*d_g per query) or `measured`.
    #[arg(long)]
    pub search_pricing: Option<String>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($f:ident),+ $(,)?) => {
        $( if $top.$f.is_some() { $base.$f = $top.$f; } )+
    };
}

impl RunConfig {
    /// Reads the config file (if any) and applies flag overrides on top.
    pub fn resolve(path: Option<&Path>, flags: RunConfig) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.overlay(flags);
        Ok(cfg)
    }

    fn overlay(&mut self, top: RunConfig) {
        overlay!(
            self,
            top,
            database,
            queries,
            index,
            output_dir,
            ground_truth,
            batch_size,
            dim,
            num_clusters,
            fan_out,
            k,
            iterations,
            beam_width,
            out_degree,
            entry_count,
            visited_nodes,
            ranks,
            ranks_per_node,
            max_iters,
            seed,
            mode,
            gpu,
            peak_flops,
            gemm_efficiency,
            hbm_bandwidth,
            io,
            io_bandwidth,
            links,
            nvlink_bandwidth,
            rdma_bandwidth,
            search_format,
            bytes_per_element,
            flops_per_element,
            search_pricing,
        );
    }

    pub fn require<'a>(&self, field: &'static str, v: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        v.as_deref().ok_or_else(|| CliError::Config(format!("{field} is required")))
    }

    fn positive(field: &str, v: usize) -> Result<usize, CliError> {
        if v == 0 {
            Err(CliError::Config(format!("{field} must be positive")))
        } else {
            Ok(v)
        }
    }

    pub fn num_clusters(&self) -> Result<usize, CliError> {
        Self::positive("num_clusters", self.num_clusters.unwrap_or(Workload::reference().num_clusters))
    }

    pub fn fan_out(&self) -> Result<usize, CliError> {
        Self::positive("fan_out", self.fan_out.unwrap_or(Workload::reference().fan_out))
    }

    pub fn k(&self) -> Result<usize, CliError> {
        Self::positive("k", self.k.unwrap_or(Workload::reference().k))
    }

    pub fn out_degree(&self) -> Result<usize, CliError> {
        Self::positive("out_degree", self.out_degree.unwrap_or(Workload::reference().out_degree))
    }

    pub fn max_iters(&self) -> Result<usize, CliError> {
        Self::positive("max_iters", self.max_iters.unwrap_or(25))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn search_params(&self) -> Result<SearchParams, CliError> {
        let r = Workload::reference();
        let iterations = Self::positive("iterations", self.iterations.unwrap_or(r.iterations))?;
        let beam_width = Self::positive("beam_width", self.beam_width.unwrap_or(r.beam_width))?;
        let entry_count = Self::positive("entry_count", self.entry_count.unwrap_or(beam_width))?;
        SearchParams::with_entries(iterations, beam_width, self.k()?, entry_count)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn topology(&self) -> Result<ClusterTopology, CliError> {
        let r = Workload::reference();
        let ranks = Self::positive("ranks", self.ranks.unwrap_or(r.ranks))?;
        let per_node = Self::positive("ranks_per_node", self.ranks_per_node.unwrap_or(r.ranks_per_node.min(ranks)))?;
        ClusterTopology::new(ranks, per_node, self.link_spec()?).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn mode(&self) -> Result<PipelineMode, CliError> {
        match self.mode.as_deref() {
            None => Ok(PipelineMode::TwoMicrobatch),
            Some(s) => s.parse().map_err(|_| CliError::Config(format!("mode: unknown value {s:?}"))),
        }
    }

    pub fn search_pricing(&self) -> Result<SearchPricing, CliError> {
        match self.search_pricing.as_deref() {
            None | Some("modeled") => Ok(SearchPricing::Modeled),
            Some("measured") => Ok(SearchPricing::Measured),
            Some(s) => Err(CliError::Config(format!("search_pricing: unknown value {s:?}"))),
        }
    }

    pub fn gpu_spec(&self) -> Result<GpuSpec, CliError> {
        let mut g = match self.gpu.as_deref() {
            None | Some("a100") => GpuSpec::a100(),
            Some(s) => return Err(CliError::Config(format!("gpu: unknown preset {s:?}"))),
        };
        if let Some(name) = &self.io {
            g.io_bandwidth =
                GpuSpec::io_preset(name).ok_or_else(|| CliError::Config(format!("io: unknown preset {name:?}")))?;
        }
        if let Some(v) = self.peak_flops {
            g.peak_flops = v;
        }
        if let Some(v) = self.gemm_efficiency {
            g.gemm_efficiency = v;
        }
        if let Some(v) = self.hbm_bandwidth {
            g.hbm_bandwidth = v;
        }
        if let Some(v) = self.io_bandwidth {
            g.io_bandwidth = v;
        }
        g.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(g)
    }

    pub fn link_spec(&self) -> Result<LinkSpec, CliError> {
        let mut l = match self.links.as_deref() {
            None | Some("a100_hdr") => LinkSpec::a100_hdr(),
            Some(s) => return Err(CliError::Config(format!("links: unknown preset {s:?}"))),
        };
        if let Some(v) = self.nvlink_bandwidth {
            l.nvlink_bandwidth = v;
        }
        if let Some(v) = self.rdma_bandwidth {
            l.rdma_bandwidth = v;
        }
        l.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(l)
    }

    pub fn element_format(&self) -> Result<ElementFormat, CliError> {
        let base = match self.search_format.as_deref() {
            None | Some("fp16") => ElementFormat::FP16,
            Some("fp32") => ElementFormat::FP32,
            Some(s) => return Err(CliError::Config(format!("search_format: unknown value {s:?}"))),
        };
        ElementFormat::new(
            self.bytes_per_element.unwrap_or(base.bytes_per_element()),
            self.flops_per_element.unwrap_or(base.flops_per_element()),
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }

    /// The analytical workload, defaulting to the reference configuration.
    pub fn workload(&self) -> Result<Workload, CliError> {
        let r = Workload::reference();
        let topo = self.topology()?;
        let search = self.search_params()?;
        let w = Workload {
            batch_size: self.batch_size.unwrap_or(r.batch_size),
            dim: self.dim.unwrap_or(r.dim),
            num_clusters: self.num_clusters()?,
            fan_out: self.fan_out()?,
            ranks: topo.ranks(),
            ranks_per_node: topo.ranks_per_node(),
            iterations: search.iterations,
            beam_width: search.beam_width,
            out_degree: self.out_degree()?,
            k: search.k,
            visited_nodes: self.visited_nodes,
            search_format: self.element_format()?,
        };
        w.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(w)
    }

    /// Fails on a `dim` setting that disagrees with the data.
    pub fn check_dim(&self, actual: usize, what: &str) -> Result<(), CliError> {
        match self.dim {
            Some(d) if d != actual => Err(CliError::Config(format!("dim is {d} but {what} has dimension {actual}"))),
            _ => Ok(()),
        }
    }
}
