//! Vector storage, squared-L2 arithmetic, fvecs/ivecs I/O and the exhaustive
//! top-k oracle every approximate path is checked against.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense, id-addressed collection of fixed-dimension `f32` vectors.
///
/// Rows are stored contiguously; the id of a row is its position.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "buffer of {} floats is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite element in vector {} (component {})",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<I, R>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f32]>,
    {
        let mut dim = None;
        let mut data = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            let row = row.as_ref();
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::invalid(format!(
                        "row {i} has dimension {} but row 0 has {d}",
                        row.len()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(row);
        }
        let dim = dim.ok_or_else(|| Error::invalid("cannot infer dimension of zero rows"))?;
        Self::new(dim, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the rows at `ids` into a new dataset, in the given order.
    pub fn select(&self, ids: &[u32]) -> Result<Self> {
        let n = self.len();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id as usize >= n {
                return Err(Error::invalid(format!("id {id} out of range for {n} vectors")));
            }
            data.extend_from_slice(self.row(id as usize));
        }
        Ok(Self { dim: self.dim, data })
    }

    /// Contiguous row range `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub(crate) fn check_dim(&self, other: usize, what: &str) -> Result<()> {
        if self.dim != other {
            return Err(Error::invalid(format!(
                "{what} dimension {other} does not match dataset dimension {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// A vector id paired with its squared-L2 distance to some query.
///
/// Ordered by `(dist, id)`, which is the tie-breaking rule used for every
/// ranking in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: u32,
    pub dist: f32,
}

impl ScoredId {
    pub fn new(id: u32, dist: f32) -> Self {
        Self { id, dist }
    }
}

impl Eq for ScoredId {}

impl PartialOrd for ScoredId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScoredId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

/// Element encoding used when pricing memory traffic and arithmetic.
///
/// Functional search always runs on `f32`; this only feeds the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementFormat {
    bytes_per_element: u32,
    flops_per_element: u32,
}

impl ElementFormat {
    pub const FP32: Self = Self {
        bytes_per_element: 4,
        flops_per_element: 2,
    };
    pub const FP16: Self = Self {
        bytes_per_element: 2,
        flops_per_element: 2,
    };

    pub fn new(bytes_per_element: u32, flops_per_element: u32) -> Result<Self> {
        if !matches!(bytes_per_element, 2 | 4) {
            return Err(Error::invalid(format!(
                "bytes per element must be 2 or 4, got {bytes_per_element}"
            )));
        }
        if !matches!(flops_per_element, 2 | 3) {
            return Err(Error::invalid(format!(
                "flops per element must be 2 or 3, got {flops_per_element}"
            )));
        }
        Ok(Self {
            bytes_per_element,
            flops_per_element,
        })
    }

    pub fn bytes_per_element(self) -> u32 {
        self.bytes_per_element
    }

    pub fn flops_per_element(self) -> u32 {
        self.flops_per_element
    }
}

/// Squared Euclidean distance, summed left to right in `f32`.
///
/// Callers must guarantee equal lengths; use [`squared_l2`] at API edges.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn squared_l2(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(l2_sq(a, b))
}

/// Squared distance via `|a|^2 + |b|^2 - 2 a.b`, accumulated in `f64`.
///
/// This is the form a GEMM-based distance kernel evaluates; the result is
/// clamped at zero to absorb cancellation.
pub fn squared_l2_expanded(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(expanded_from_parts(norm_sq_f64(a), norm_sq_f64(b), dot_f64(a, b)))
}

#[inline]
pub(crate) fn norm_sq_f64(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

#[inline]
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[inline]
pub(crate) fn expanded_from_parts(norm_a: f64, norm_b: f64, dot: f64) -> f64 {
    (norm_a + norm_b - 2.0 * dot).max(0.0)
}

/// Keeps the `k` smallest entries of `scored`, sorted by `(dist, id)`.
pub(crate) fn select_topk(mut scored: Vec<ScoredId>, k: usize) -> Vec<ScoredId> {
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable(k - 1);
        scored.truncate(k);
    }
    scored.sort_unstable();
    scored
}

/// Exact k nearest neighbours of `q` in `db`, sorted by `(dist, id)`.
pub fn brute_force_topk(db: &Dataset, q: &[f32], k: usize) -> Result<Vec<ScoredId>> {
    if db.is_empty() {
        return Err(Error::invalid("database is empty"));
    }
    if k == 0 || k > db.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={}",
            db.len()
        )));
    }
    db.check_dim(q.len(), "query")?;
    let scored = db
        .rows()
        .enumerate()
        .map(|(i, v)| ScoredId::new(i as u32, l2_sq(q, v)))
        .collect();
    Ok(select_topk(scored, k))
}

/// Fraction of the first `k` ground-truth ids present among the first `k`
/// result ids.
pub fn recall_at_k(result: &[ScoredId], truth: &[ScoredId], k: usize) -> Result<f64> {
    let result: Vec<u32> = result.iter().map(|s| s.id).collect();
    let truth: Vec<u32> = truth.iter().map(|s| s.id).collect();
    recall_at_k_ids(&result, &truth, k)
}

pub fn recall_at_k_ids(result: &[u32], truth: &[u32], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if truth.len() < k {
        return Err(Error::invalid(format!(
            "ground truth has {} entries, need at least k = {k}",
            truth.len()
        )));
    }
    let truth = &truth[..k];
    let hits = result
        .iter()
        .take(k)
        .filter(|id| truth.contains(id))
        .count();
    Ok(hits as f64 / k as f64)
}

// fvecs / ivecs: each record is a little-endian i32 dimension followed by
// that many 4-byte little-endian payload values.

fn parse_vecs(bytes: &[u8]) -> Result<(usize, Vec<[u8; 4]>)> {
    let mut pos = 0usize;
    let mut dim: Option<usize> = None;
    let mut payload = Vec::new();
    let mut record = 0usize;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            return Err(Error::VecsFormat {
                record,
                offset: pos as u64,
                reason: format!("truncated dimension field ({} trailing bytes)", bytes.len() - pos),
            });
        }
        let d = LittleEndian::read_i32(&bytes[pos..pos + 4]);
        if d <= 0 {
            return Err(Error::VecsFormat {
                record,
                offset: pos as u64,
                reason: format!("non-positive dimension {d}"),
            });
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::VecsFormat {
                    record,
                    offset: pos as u64,
                    reason: format!("dimension {d} differs from first record's {expected}"),
                })
            }
            _ => {}
        }
        pos += 4;
        let body = d * 4;
        if bytes.len() - pos < body {
            return Err(Error::VecsFormat {
                record,
                offset: pos as u64,
                reason: format!(
                    "truncated payload: need {body} bytes, {} remain",
                    bytes.len() - pos
                ),
            });
        }
        payload.extend(
            bytes[pos..pos + body]
                .chunks_exact(4)
                .map(|c| [c[0], c[1], c[2], c[3]]),
        );
        pos += body;
        record += 1;
    }
    Ok((dim.unwrap_or(0), payload))
}

pub fn read_fvecs(bytes: &[u8]) -> Result<Dataset> {
    let (dim, payload) = parse_vecs(bytes)?;
    if dim == 0 {
        return Err(Error::VecsFormat {
            record: 0,
            offset: 0,
            reason: "empty file".into(),
        });
    }
    let mut data = Vec::with_capacity(payload.len());
    for (i, raw) in payload.iter().enumerate() {
        let x = f32::from_le_bytes(*raw);
        if !x.is_finite() {
            let record = i / dim;
            return Err(Error::VecsFormat {
                record,
                offset: (record * (dim + 1) * 4 + 4 + (i % dim) * 4) as u64,
                reason: "non-finite element".into(),
            });
        }
        data.push(x);
    }
    Dataset::new(dim, data)
}

pub fn load_fvecs(path: impl AsRef<Path>) -> Result<Dataset> {
    read_fvecs(&std::fs::read(path)?)
}

pub fn write_fvecs<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    for row in ds.rows() {
        w.write_i32::<LittleEndian>(ds.dim() as i32)?;
        for &x in row {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn save_fvecs(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_fvecs(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_ivecs(bytes: &[u8]) -> Result<Vec<Vec<i32>>> {
    let (dim, payload) = parse_vecs(bytes)?;
    if dim == 0 {
        return Ok(Vec::new());
    }
    Ok(payload
        .chunks_exact(dim)
        .map(|rec| rec.iter().map(|raw| i32::from_le_bytes(*raw)).collect())
        .collect())
}

pub fn load_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    read_ivecs(&std::fs::read(path)?)
}

pub fn write_ivecs<W: Write>(mut w: W, rows: &[Vec<i32>]) -> Result<()> {
    if let Some(first) = rows.first() {
        if first.is_empty() {
            return Err(Error::invalid("ivecs records must be non-empty"));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != first.len()) {
            return Err(Error::invalid(format!(
                "ivecs record {i} has length {} but record 0 has {}",
                rows[i].len(),
                first.len()
            )));
        }
    }
    for row in rows {
        w.write_i32::<LittleEndian>(row.len() as i32)?;
        for &x in row {
            w.write_i32::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn save_ivecs(rows: &[Vec<i32>], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ivecs(&mut w, rows)?;
    w.flush()?;
    Ok(())
}
