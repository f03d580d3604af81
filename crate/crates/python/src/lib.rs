//! Python module `fantasy`.
//!
//! Vectors cross the boundary as lists of float rows; anything iterable
//! of float sequences (including 2-D numpy arrays) is accepted.

use fantasy_core::cost::full_report;
use fantasy_core::vector::{self, brute_force_topk};
use fantasy_core::{
    replay_schedule as core_replay, run_pipeline, BuildParams, ClusterTopology, Dataset, ElementFormat, Error, GpuSpec,
    IndexBundle, LinkSpec, PipelineConfig, PipelineMode, SearchParams, SearchPricing, StageDurations, TimingModel,
    Workload,
};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Internal(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn dataset(rows: Vec<Vec<f32>>) -> PyResult<Dataset> {
    Dataset::from_rows(rows).map_err(py_err)
}

fn rows(ds: &Dataset) -> Vec<Vec<f32>> {
    ds.rows().map(<[f32]>::to_vec).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyfunction]
fn load_fvecs(path: &str) -> PyResult<Vec<Vec<f32>>> {
    Ok(rows(&vector::load_fvecs(path).map_err(py_err)?))
}

#[pyfunction]
fn save_fvecs(path: &str, data: Vec<Vec<f32>>) -> PyResult<()> {
    vector::save_fvecs(&dataset(data)?, path).map_err(py_err)
}

#[pyfunction]
fn load_ivecs(path: &str) -> PyResult<Vec<Vec<i32>>> {
    vector::load_ivecs(path).map_err(py_err)
}

#[pyfunction]
fn save_ivecs(path: &str, data: Vec<Vec<i32>>) -> PyResult<()> {
    vector::save_ivecs(&data, path).map_err(py_err)
}

#[pyfunction]
fn squared_l2(a: Vec<f32>, b: Vec<f32>) -> PyResult<f32> {
    vector::squared_l2(&a, &b).map_err(py_err)
}

/// Exact top-k as `(id, squared distance)` pairs, nearest first.
#[pyfunction]
fn brute_force(db: Vec<Vec<f32>>, query: Vec<f32>, k: usize) -> PyResult<Vec<(u32, f32)>> {
    let db = dataset(db)?;
    let top = brute_force_topk(&db, &query, k).map_err(py_err)?;
    Ok(top.into_iter().map(|s| (s.id, s.dist)).collect())
}

fn parse_mode(mode: &str) -> PyResult<PipelineMode> {
    mode.parse().map_err(py_err)
}

/// Cost-model report for the reference workload with keyword overrides.
#[pyfunction]
#[pyo3(signature = (**overrides))]
fn cost_report<'py>(py: Python<'py>, overrides: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyAny>> {
    let mut w = Workload::reference();
    let mut gpu = GpuSpec::a100();
    let mut links = LinkSpec::a100_hdr();
    if let Some(kw) = overrides {
        for (key, value) in kw.iter() {
            let key: String = key.extract()?;
            match key.as_str() {
                "batch_size" => w.batch_size = value.extract()?,
                "dim" => w.dim = value.extract()?,
                "num_clusters" => w.num_clusters = value.extract()?,
                "fan_out" => w.fan_out = value.extract()?,
                "ranks" => w.ranks = value.extract()?,
                "ranks_per_node" => w.ranks_per_node = value.extract()?,
                "iterations" => w.iterations = value.extract()?,
                "beam_width" => w.beam_width = value.extract()?,
                "out_degree" => w.out_degree = value.extract()?,
                "k" => w.k = value.extract()?,
                "visited_nodes" => w.visited_nodes = value.extract()?,
                "search_format" => {
                    w.search_format = match value.extract::<String>()?.as_str() {
                        "fp16" => ElementFormat::FP16,
                        "fp32" => ElementFormat::FP32,
                        other => return Err(PyValueError::new_err(format!("unknown search_format {other:?}"))),
                    }
                }
                "peak_flops" => gpu.peak_flops = value.extract()?,
                "gemm_efficiency" => gpu.gemm_efficiency = value.extract()?,
                "hbm_bandwidth" => gpu.hbm_bandwidth = value.extract()?,
                "io_bandwidth" => gpu.io_bandwidth = value.extract()?,
                "io" => {
                    let name: String = value.extract()?;
                    gpu.io_bandwidth = GpuSpec::io_preset(&name)
                        .ok_or_else(|| PyValueError::new_err(format!("unknown io preset {name:?}")))?;
                }
                "nvlink_bandwidth" => links.nvlink_bandwidth = value.extract()?,
                "rdma_bandwidth" => links.rdma_bandwidth = value.extract()?,
                other => return Err(PyValueError::new_err(format!("unknown field {other:?}"))),
            }
        }
    }
    let report = full_report(&w, &gpu, &links).map_err(py_err)?;
    json_to_py(py, &report.to_json())
}

/// Replays one batch of two microbatches. Each duration tuple is
/// `(kmeans, dispatch, search, combine)` in seconds.
#[pyfunction]
#[pyo3(signature = (first, second, mode = "two_microbatch"))]
fn replay_schedule<'py>(
    py: Python<'py>,
    first: (f64, f64, f64, f64),
    second: (f64, f64, f64, f64),
    mode: &str,
) -> PyResult<(f64, Bound<'py, PyAny>)> {
    let d = |t: (f64, f64, f64, f64)| StageDurations {
        kmeans: t.0,
        dispatch: t.1,
        search: t.2,
        combine: t.3,
    };
    let tl = core_replay(&[d(first), d(second)], parse_mode(mode)?).map_err(py_err)?;
    Ok((tl.makespan(), json_to_py(py, &tl.to_json())?))
}

/// Pipeline output: per-query ids, distances and vectors plus timing.
#[pyclass(frozen, get_all)]
struct QueryResult {
    ids: Vec<Vec<u32>>,
    distances: Vec<Vec<f32>>,
    vectors: Vec<Vec<Vec<f32>>>,
    makespan: f64,
    timeline_csv: String,
}

#[pyclass(frozen)]
struct Index {
    bundle: IndexBundle,
}

#[pymethods]
impl Index {
    #[staticmethod]
    #[pyo3(signature = (database, num_clusters, out_degree = 32, ranks = 1, ranks_per_node = 1, max_iters = 25, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        py: Python<'_>,
        database: Vec<Vec<f32>>,
        num_clusters: usize,
        out_degree: usize,
        ranks: usize,
        ranks_per_node: usize,
        max_iters: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let db = dataset(database)?;
        let topo = ClusterTopology::new(ranks, ranks_per_node, LinkSpec::a100_hdr()).map_err(py_err)?;
        let params = BuildParams {
            num_clusters,
            out_degree,
            max_iters,
            seed,
        };
        let bundle = py.detach(|| IndexBundle::build(&db, &params, &topo)).map_err(py_err)?;
        Ok(Self { bundle })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            bundle: IndexBundle::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.bundle.save(path).map_err(py_err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.bundle.to_bytes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.bundle.dim()
    }

    #[getter]
    fn num_clusters(&self) -> usize {
        self.bundle.num_clusters()
    }

    #[getter]
    fn ranks(&self) -> usize {
        self.bundle.placement().ranks()
    }

    fn partition_sizes(&self) -> Vec<usize> {
        self.bundle.partition_sizes()
    }

    /// Runs the simulated pipeline with modeled A100 stage times.
    #[pyo3(signature = (
        queries, k = 10, fan_out = 3, iterations = 6, beam_width = 6,
        entry_count = None, mode = "two_microbatch", batch_size = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn query(
        &self,
        py: Python<'_>,
        queries: Vec<Vec<f32>>,
        k: usize,
        fan_out: usize,
        iterations: usize,
        beam_width: usize,
        entry_count: Option<usize>,
        mode: &str,
        batch_size: Option<usize>,
    ) -> PyResult<QueryResult> {
        let queries = dataset(queries)?;
        let search = SearchParams::with_entries(iterations, beam_width, k, entry_count.unwrap_or(beam_width))
            .map_err(py_err)?;
        let cfg = PipelineConfig {
            search,
            fan_out,
            mode: parse_mode(mode)?,
            batch_size,
            timing: TimingModel::Modeled {
                gpu: GpuSpec::a100(),
                search_format: ElementFormat::FP16,
                pricing: SearchPricing::Modeled,
            },
        };
        let topo = ClusterTopology::new(self.bundle.placement().ranks(), self.bundle.ranks_per_node(), LinkSpec::a100_hdr())
            .map_err(py_err)?;
        let res = py.detach(|| run_pipeline(&self.bundle, &queries, &topo, &cfg)).map_err(py_err)?;
        Ok(QueryResult {
            ids: res.neighbors.iter().map(|n| n.iter().map(|x| x.id).collect()).collect(),
            distances: res.neighbors.iter().map(|n| n.iter().map(|x| x.dist).collect()).collect(),
            vectors: res.neighbors.iter().map(|n| n.iter().map(|x| x.vector.clone()).collect()).collect(),
            makespan: res.makespan,
            timeline_csv: res.timeline.to_csv(),
        })
    }
}

#[pymodule]
fn fantasy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add_class::<QueryResult>()?;
    m.add_function(wrap_pyfunction!(load_fvecs, m)?)?;
    m.add_function(wrap_pyfunction!(save_fvecs, m)?)?;
    m.add_function(wrap_pyfunction!(load_ivecs, m)?)?;
    m.add_function(wrap_pyfunction!(save_ivecs, m)?)?;
    m.add_function(wrap_pyfunction!(squared_l2, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(replay_schedule, m)?)?;
    Ok(())
}
