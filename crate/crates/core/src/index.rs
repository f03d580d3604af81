//! The offline index: centroids, cluster placement and one graph per
//! cluster, plus its on-disk container.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "FNSY" | version: u32
//! section*: tag: [u8; 4] | byte_len: u64 | payload
//!   META  dim, num_clusters, out_degree, num_vectors        (u32 each)
//!   CENT  num_clusters * dim                                 (f32)
//!   PLAC  ranks, ranks_per_node, owner rank per cluster      (u32)
//!   IDS_  per cluster: count, then count global ids          (u32)
//!   ADJ_  per cluster: count * out_degree local ids          (u32)
//!   VECS  per cluster: count * dim                           (f32)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::graph::GraphIndex;
use crate::kmeans::{kmeans_fit, partition_database, Centroids};
use crate::router::{place_clusters, ClusterTopology, PlacementMap};
use crate::vector::Dataset;

pub const MAGIC: &[u8; 4] = b"FNSY";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildParams {
    pub num_clusters: usize,
    pub out_degree: usize,
    pub max_iters: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexBundle {
    centroids: Centroids,
    placement: PlacementMap,
    ranks_per_node: usize,
    out_degree: usize,
    /// `None` for a cluster that received no database vectors.
    graphs: Vec<Option<GraphIndex>>,
    /// Global id -> (cluster, local id).
    locate: Vec<(u32, u32)>,
}

impl IndexBundle {
    pub fn build(db: &Dataset, params: &BuildParams, topo: &ClusterTopology) -> Result<Self> {
        if params.out_degree == 0 {
            return Err(Error::invalid("out_degree must be at least 1"));
        }
        let placement = place_clusters(params.num_clusters, topo)?;
        let fit = kmeans_fit(db, params.num_clusters, params.max_iters, params.seed)?;
        let parts = partition_database(db, &fit.centroids)?;
        let graphs = parts
            .into_iter()
            .map(|ids| {
                if ids.is_empty() {
                    return Ok(None);
                }
                let vectors = db.select(&ids)?;
                GraphIndex::build(vectors, ids, params.out_degree).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(fit.centroids, placement, topo.ranks_per_node(), params.out_degree, graphs)
    }

    fn assemble(
        centroids: Centroids,
        placement: PlacementMap,
        ranks_per_node: usize,
        out_degree: usize,
        graphs: Vec<Option<GraphIndex>>,
    ) -> Result<Self> {
        if placement.num_clusters() != centroids.num_clusters() || graphs.len() != centroids.num_clusters() {
            return Err(Error::internal("cluster counts disagree across index sections"));
        }
        let n: usize = graphs.iter().flatten().map(GraphIndex::len).sum();
        let mut locate = vec![(u32::MAX, u32::MAX); n];
        for (c, g) in graphs.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.dim() != centroids.dim() || g.out_degree() != out_degree {
                return Err(Error::internal(format!("cluster {c} graph shape disagrees with index")));
            }
            for (local, &global) in g.global_ids().iter().enumerate() {
                let slot = locate
                    .get_mut(global as usize)
                    .ok_or_else(|| Error::internal(format!("global id {global} out of range")))?;
                if slot.0 != u32::MAX {
                    return Err(Error::internal(format!("global id {global} stored twice")));
                }
                *slot = (c as u32, local as u32);
            }
        }
        Ok(Self {
            centroids,
            placement,
            ranks_per_node,
            out_degree,
            graphs,
            locate,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.num_clusters()
    }

    pub fn num_vectors(&self) -> usize {
        self.locate.len()
    }

    pub fn out_degree(&self) -> usize {
        self.out_degree
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn placement(&self) -> &PlacementMap {
        &self.placement
    }

    pub fn ranks_per_node(&self) -> usize {
        self.ranks_per_node
    }

    pub fn graph(&self, cluster: usize) -> Option<&GraphIndex> {
        self.graphs.get(cluster).and_then(Option::as_ref)
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.graphs
            .iter()
            .map(|g| g.as_ref().map_or(0, GraphIndex::len))
            .collect()
    }

    pub fn vector(&self, global_id: u32) -> &[f32] {
        let (c, local) = self.locate[global_id as usize];
        self.graphs[c as usize]
            .as_ref()
            .expect("located vectors live in built graphs")
            .vectors()
            .row(local as usize)
    }

    /// The full database in global id order.
    pub fn database(&self) -> Dataset {
        let mut data = Vec::with_capacity(self.num_vectors() * self.dim());
        for id in 0..self.num_vectors() as u32 {
            data.extend_from_slice(self.vector(id));
        }
        Dataset::new(self.dim(), data).expect("stored vectors are finite")
    }

    /// Re-places clusters round-robin over a different rank count.
    pub fn replace(&mut self, topo: &ClusterTopology) -> Result<()> {
        self.placement = place_clusters(self.num_clusters(), topo)?;
        self.ranks_per_node = topo.ranks_per_node();
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;

        let mut meta = Vec::new();
        for v in [self.dim(), self.num_clusters(), self.out_degree, self.num_vectors()] {
            meta.write_u32::<LittleEndian>(v as u32)?;
        }
        write_section(&mut w, b"META", &meta)?;

        let mut cent = Vec::new();
        put_f32s(&mut cent, self.centroids.as_dataset().as_slice())?;
        write_section(&mut w, b"CENT", &cent)?;

        let mut plac = Vec::new();
        plac.write_u32::<LittleEndian>(self.placement.ranks() as u32)?;
        plac.write_u32::<LittleEndian>(self.ranks_per_node as u32)?;
        put_u32s(&mut plac, self.placement.owners())?;
        write_section(&mut w, b"PLAC", &plac)?;

        let (mut ids, mut adj, mut vecs) = (Vec::new(), Vec::new(), Vec::new());
        for g in &self.graphs {
            match g {
                Some(g) => {
                    ids.write_u32::<LittleEndian>(g.len() as u32)?;
                    put_u32s(&mut ids, g.global_ids())?;
                    put_u32s(&mut adj, g.adjacency())?;
                    put_f32s(&mut vecs, g.vectors().as_slice())?;
                }
                None => ids.write_u32::<LittleEndian>(0)?,
            }
        }
        write_section(&mut w, b"IDS_", &ids)?;
        write_section(&mut w, b"ADJ_", &adj)?;
        write_section(&mut w, b"VECS", &vecs)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic, not an index file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }

        let mut meta = r.section(b"META")?;
        let dim = meta.u32()? as usize;
        let num_clusters = meta.u32()? as usize;
        let out_degree = meta.u32()? as usize;
        let num_vectors = meta.u32()? as usize;
        meta.finish()?;
        if dim == 0 || num_clusters == 0 || out_degree == 0 {
            return Err(r.err_at(8, "zero dimension, cluster count or out-degree"));
        }

        let mut cent = r.section(b"CENT")?;
        let centers = cent.f32s(num_clusters * dim)?;
        cent.finish()?;
        let centroids = Centroids::new(Dataset::new(dim, centers).map_err(|e| cent.err(e.to_string()))?)
            .map_err(|e| cent.err(e.to_string()))?;

        let mut plac = r.section(b"PLAC")?;
        let ranks = plac.u32()? as usize;
        let ranks_per_node = plac.u32()? as usize;
        let owners = plac.u32s(num_clusters)?;
        plac.finish()?;
        if ranks == 0 || ranks_per_node == 0 || !ranks.is_multiple_of(ranks_per_node) {
            return Err(plac.err(format!("invalid topology {ranks} ranks / {ranks_per_node} per node")));
        }
        let placement = PlacementMap::from_owners(ranks, owners).map_err(|e| plac.err(e.to_string()))?;

        let mut ids_sec = r.section(b"IDS_")?;
        let mut id_lists = Vec::with_capacity(num_clusters);
        for _ in 0..num_clusters {
            let count = ids_sec.u32()? as usize;
            id_lists.push(ids_sec.u32s(count)?);
        }
        ids_sec.finish()?;
        let total: usize = id_lists.iter().map(Vec::len).sum();
        if total != num_vectors {
            return Err(ids_sec.err(format!("{total} ids listed, header says {num_vectors}")));
        }

        let mut adj_sec = r.section(b"ADJ_")?;
        let mut vec_sec = r.section(b"VECS")?;
        let mut graphs = Vec::with_capacity(num_clusters);
        for ids in id_lists {
            if ids.is_empty() {
                graphs.push(None);
                continue;
            }
            let adjacency = adj_sec.u32s(ids.len() * out_degree)?;
            let at = vec_sec.pos;
            let vectors = Dataset::new(dim, vec_sec.f32s(ids.len() * dim)?)
                .map_err(|e| vec_sec.err_at(at, e.to_string()))?;
            let g = GraphIndex::from_parts(vectors, ids, out_degree, adjacency)
                .map_err(|e| adj_sec.err(e.to_string()))?;
            graphs.push(Some(g));
        }
        adj_sec.finish()?;
        vec_sec.finish()?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last section"));
        }

        Self::assemble(centroids, placement, ranks_per_node, out_degree, graphs).map_err(|e| match e {
            Error::Internal(msg) => Error::IndexFormat { offset: 0, reason: msg },
            other => other,
        })
    }
}

fn write_section<W: Write>(w: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    w.write_all(tag)?;
    w.write_u64::<LittleEndian>(payload.len() as u64)?;
    w.write_all(payload)?;
    Ok(())
}

fn put_u32s(buf: &mut Vec<u8>, xs: &[u32]) -> Result<()> {
    for &x in xs {
        buf.write_u32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) -> Result<()> {
    for &x in xs {
        buf.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

/// Bounds-checked cursor; `base` offsets error positions into the file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Section<'a> {
    inner: Reader<'a>,
    base: usize,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        self.err_at(self.pos, reason)
    }

    fn err_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::IndexFormat {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        self.take(4).map(LittleEndian::read_u32)
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Section<'a>> {
        let start = self.pos;
        let found = self.take(4)?;
        if found != tag {
            return Err(self.err_at(
                start,
                format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(found)
                ),
            ));
        }
        let len = LittleEndian::read_u64(self.take(8)?);
        let len = usize::try_from(len).map_err(|_| self.err("section length overflows"))?;
        let base = self.pos;
        let payload = self.take(len)?;
        Ok(Section {
            inner: Reader { bytes: payload, pos: 0 },
            base,
            pos: base,
        })
    }
}

impl Section<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        self.err_at(self.base + self.inner.pos, reason)
    }

    fn err_at(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::IndexFormat {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn sync<T>(&mut self, r: Result<T>) -> Result<T> {
        let out = r.map_err(|e| match e {
            Error::IndexFormat { offset, reason } => Error::IndexFormat {
                offset: offset + self.base as u64,
                reason,
            },
            other => other,
        });
        self.pos = self.base + self.inner.pos;
        out
    }

    fn u32(&mut self) -> Result<u32> {
        let r = self.inner.u32();
        self.sync(r)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.err("count overflows"))?;
        let r = self
            .inner
            .take(bytes)
            .map(|b| b.chunks_exact(4).map(LittleEndian::read_u32).collect());
        self.sync(r)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.err("count overflows"))?;
        let r = self
            .inner
            .take(bytes)
            .map(|b| b.chunks_exact(4).map(LittleEndian::read_f32).collect());
        self.sync(r)
    }

    fn finish(&self) -> Result<()> {
        if self.inner.pos != self.inner.bytes.len() {
            return Err(self.err(format!(
                "{} unread bytes at end of section",
                self.inner.bytes.len() - self.inner.pos
            )));
        }
        Ok(())
    }
}
