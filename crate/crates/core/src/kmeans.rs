//! K-means training over the database and top-c query classification.
//!
//! Training is Lloyd's algorithm seeded with k-means++ from a ChaCha RNG, so a
//! fixed seed reproduces the centroids bit for bit. Classification evaluates
//! query/centroid distances the way a GEMM kernel would, from norms and a
//! dot-product matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vector::{dot_f64, expanded_from_parts, l2_sq, norm_sq_f64, Dataset};

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    centers: Dataset,
}

impl Centroids {
    pub fn new(centers: Dataset) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("need at least one centroid"));
        }
        Ok(Self { centers })
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers.dim()
    }

    pub fn center(&self, cluster: usize) -> &[f32] {
        self.centers.row(cluster)
    }

    pub fn as_dataset(&self) -> &Dataset {
        &self.centers
    }

    /// Nearest centroid by direct squared distance; ties go to the lower id.
    pub fn nearest(&self, v: &[f32]) -> u32 {
        let mut best = (f32::INFINITY, 0u32);
        for (j, c) in self.centers.rows().enumerate() {
            let d = l2_sq(v, c);
            if d < best.0 {
                best = (d, j as u32);
            }
        }
        best.1
    }
}

/// Top-c cluster ids for each query, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    fan_out: usize,
    clusters: Vec<u32>,
}

impl Assignment {
    pub fn fan_out(&self) -> usize {
        self.fan_out
    }

    pub fn len(&self) -> usize {
        self.clusters.len() / self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn clusters_of(&self, query: usize) -> &[u32] {
        &self.clusters[query * self.fan_out..(query + 1) * self.fan_out]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.clusters.chunks_exact(self.fan_out)
    }
}

/// Result of a training run, with the per-iteration objective.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Centroids,
    pub labels: Vec<u32>,
    /// Within-cluster sum of squares after each update step.
    pub wcss_history: Vec<f64>,
    pub converged: bool,
}

pub fn kmeans_train(
    db: &Dataset,
    num_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Centroids> {
    kmeans_fit(db, num_clusters, max_iters, seed).map(|fit| fit.centroids)
}

pub fn kmeans_fit(
    db: &Dataset,
    num_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    let n = db.len();
    if num_clusters == 0 {
        return Err(Error::invalid("number of clusters must be positive"));
    }
    if num_clusters > n {
        return Err(Error::invalid(format!(
            "cannot train {num_clusters} clusters on {n} vectors"
        )));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeanspp_seed(db, num_clusters, &mut rng);
    let mut labels: Vec<u32> = Vec::new();
    let mut wcss_history = Vec::with_capacity(max_iters);
    let mut converged = false;

    for _ in 0..max_iters {
        let mut next = assign_nearest(db, &centers);
        repair_empty(db, &centers, &mut next, num_clusters);
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
        centers = update_means(db, &labels, num_clusters);
        wcss_history.push(wcss(db, &centers, &labels));
    }

    Ok(KMeansFit {
        centroids: Centroids::new(centers)?,
        labels,
        wcss_history,
        converged,
    })
}

fn kmeanspp_seed(db: &Dataset, num_clusters: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let n = db.len();
    let mut chosen = Vec::with_capacity(num_clusters);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut d2: Vec<f64> = db
        .rows()
        .map(|v| f64::from(l2_sq(v, db.row(first))))
        .collect();

    while chosen.len() < num_clusters {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every remaining point duplicates a chosen center.
            taken.iter().position(|t| !t).unwrap()
        };
        chosen.push(pick);
        taken[pick] = true;
        let c = db.row(pick);
        for (i, v) in db.rows().enumerate() {
            let d = f64::from(l2_sq(v, c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let ids: Vec<u32> = chosen.into_iter().map(|i| i as u32).collect();
    db.select(&ids).expect("seed ids are in range")
}

fn assign_nearest(db: &Dataset, centers: &Dataset) -> Vec<u32> {
    db.as_slice()
        .par_chunks_exact(db.dim())
        .map(|v| {
            let mut best = (f32::INFINITY, 0u32);
            for (j, c) in centers.rows().enumerate() {
                let d = l2_sq(v, c);
                if d < best.0 {
                    best = (d, j as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(db: &Dataset, centers: &Dataset, labels: &mut [u32], num_clusters: usize) {
    let mut sizes = vec![0usize; num_clusters];
    for &l in labels.iter() {
        sizes[l as usize] += 1;
    }
    for empty in 0..num_clusters {
        if sizes[empty] > 0 {
            continue;
        }
        let mut best: Option<(f32, usize)> = None;
        for (i, v) in db.rows().enumerate() {
            let l = labels[i] as usize;
            if sizes[l] < 2 {
                continue;
            }
            let d = l2_sq(v, centers.row(l));
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("n >= C leaves a cluster with two or more points");
        sizes[labels[i] as usize] -= 1;
        labels[i] = empty as u32;
        sizes[empty] = 1;
    }
}

fn update_means(db: &Dataset, labels: &[u32], num_clusters: usize) -> Dataset {
    let dim = db.dim();
    let mut sums = vec![0f64; num_clusters * dim];
    let mut counts = vec![0usize; num_clusters];
    for (v, &l) in db.rows().zip(labels) {
        let l = l as usize;
        counts[l] += 1;
        for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(v) {
            *s += f64::from(x);
        }
    }
    let data = sums
        .chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(s, &c)| s.iter().map(move |x| (x / c as f64) as f32))
        .collect();
    Dataset::new(dim, data).expect("means of finite data are finite")
}

pub(crate) fn wcss(db: &Dataset, centers: &Dataset, labels: &[u32]) -> f64 {
    db.rows()
        .zip(labels)
        .map(|(v, &l)| {
            v.iter()
                .zip(centers.row(l as usize))
                .map(|(&x, &c)| {
                    let d = f64::from(x) - f64::from(c);
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

/// Top-c nearest clusters per query, ordered by `(distance, cluster id)`.
///
/// Distances come from the expansion `|q|^2 + |c|^2 - 2 q.c` over a
/// query-by-centroid dot-product matrix.
pub fn assign_top_c(cents: &Centroids, queries: &Dataset, c: usize) -> Result<Assignment> {
    let num_clusters = cents.num_clusters();
    if c == 0 || c > num_clusters {
        return Err(Error::invalid(format!(
            "fan-out c = {c} must be in 1..={num_clusters}"
        )));
    }
    queries.check_dim(cents.dim(), "centroid")?;

    let center_norms: Vec<f64> = cents.centers.rows().map(norm_sq_f64).collect();
    let clusters = queries
        .as_slice()
        .par_chunks_exact(queries.dim())
        .flat_map_iter(|q| {
            let qn = norm_sq_f64(q);
            let mut row: Vec<(f64, u32)> = cents
                .centers
                .rows()
                .zip(&center_norms)
                .enumerate()
                .map(|(j, (cv, &cn))| (expanded_from_parts(qn, cn, dot_f64(q, cv)), j as u32))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if c < row.len() {
                row.select_nth_unstable_by(c - 1, cmp);
                row.truncate(c);
            }
            row.sort_unstable_by(cmp);
            row.into_iter().map(|(_, j)| j)
        })
        .collect();

    Ok(Assignment {
        fan_out: c,
        clusters,
    })
}

/// Places every database vector in the cluster of its nearest centroid.
///
/// Each returned id list is ascending.
pub fn partition_database(db: &Dataset, cents: &Centroids) -> Result<Vec<Vec<u32>>> {
    db.check_dim(cents.dim(), "centroid")?;
    let labels = assign_nearest(db, &cents.centers);
    let mut parts = vec![Vec::new(); cents.num_clusters()];
    for (i, l) in labels.into_iter().enumerate() {
        parts[l as usize].push(i as u32);
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::squared_l2;
    use rand::Rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, per_blob: usize) -> (Dataset, Vec<[f32; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[-20.0f32, 0.0], [20.0, 5.0]];
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut rows = Vec::new();
        for c in centers {
            for _ in 0..per_blob {
                rows.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
            }
        }
        (Dataset::from_rows(rows).unwrap(), centers.to_vec())
    }

    fn random_ds(seed: u64, n: usize, dim: usize, scale: f32) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-scale..scale)).collect();
        Dataset::new(dim, data).unwrap()
    }

    #[test]
    fn exact_cover_recovers_points() {
        let db = Dataset::from_rows([[0.0f32, 0.0], [5.0, 1.0], [-3.0, 8.0], [2.0, -2.0]]).unwrap();
        let fit = kmeans_fit(&db, 4, 10, 3).unwrap();
        let mut got: Vec<Vec<f32>> = fit.centroids.as_dataset().rows().map(<[f32]>::to_vec).collect();
        let mut want: Vec<Vec<f32>> = db.rows().map(<[f32]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(*fit.wcss_history.last().unwrap(), 0.0);
    }

    /// Membership in the convex hull of a 2-D point set, checked against
    /// every edge of the hull built by monotone chain.
    fn in_hull(points: &[[f32; 2]], p: [f32; 2]) -> bool {
        let mut pts: Vec<[f64; 2]> = points.iter().map(|q| [q[0] as f64, q[1] as f64]).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
            (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
        };
        let mut hull: Vec<[f64; 2]> = Vec::new();
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
                Box::new(pts.iter())
            } else {
                Box::new(pts.iter().rev())
            };
            for &q in iter {
                while hull.len() >= start + 2
                    && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0
                {
                    hull.pop();
                }
                hull.push(q);
            }
            hull.pop();
        }
        let p = [p[0] as f64, p[1] as f64];
        (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= -1e-9)
    }

    #[test]
    fn two_blobs_centers_lie_in_blob_hulls() {
        let (db, _) = blobs(11, 200);
        let cents = kmeans_train(&db, 2, 50, 5).unwrap();
        let blob_a: Vec<[f32; 2]> = db.rows().take(200).map(|r| [r[0], r[1]]).collect();
        let blob_b: Vec<[f32; 2]> = db.rows().skip(200).map(|r| [r[0], r[1]]).collect();
        let c0 = [cents.center(0)[0], cents.center(0)[1]];
        let c1 = [cents.center(1)[0], cents.center(1)[1]];
        let ok = (in_hull(&blob_a, c0) && in_hull(&blob_b, c1))
            || (in_hull(&blob_a, c1) && in_hull(&blob_b, c0));
        assert!(ok, "centers {c0:?} {c1:?}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let db = random_ds(1, 300, 6, 1.0);
        let a = kmeans_train(&db, 7, 20, 99).unwrap();
        let b = kmeans_train(&db, 7, 20, 99).unwrap();
        let bits = |c: &Centroids| c.as_dataset().as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn train_errors() {
        let db = random_ds(1, 5, 2, 1.0);
        assert!(kmeans_train(&db, 6, 10, 0).is_err());
        assert!(kmeans_train(&db, 0, 10, 0).is_err());
        assert!(kmeans_train(&db, 2, 0, 0).is_err());
    }

    #[test]
    fn every_cluster_non_empty_with_duplicates() {
        let mut rows = vec![vec![1.0f32, 1.0]; 10];
        rows.extend(vec![vec![4.0f32, 4.0]; 3]);
        let db = Dataset::from_rows(rows).unwrap();
        let fit = kmeans_fit(&db, 5, 10, 2).unwrap();
        let mut sizes = [0; 5];
        for &l in &fit.labels {
            sizes[l as usize] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0), "{sizes:?}");
    }

    #[test]
    fn assign_examples() {
        let cents = Centroids::new(Dataset::from_rows([[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]]).unwrap()).unwrap();
        let q = Dataset::from_rows([[1.0f32, 0.0]]).unwrap();
        assert_eq!(assign_top_c(&cents, &q, 2).unwrap().clusters_of(0), &[0, 1]);

        let cents4 = Centroids::new(
            Dataset::from_rows([[0.0f32, 0.0], [1.0, 1.0], [2.0, 2.0], [3.5, -1.0]]).unwrap(),
        )
        .unwrap();
        let q = Dataset::from_rows([[3.5f32, -1.0]]).unwrap();
        assert_eq!(assign_top_c(&cents4, &q, 1).unwrap().clusters_of(0), &[3]);

        let cents2 = Centroids::new(Dataset::from_rows([[0.0f32, 0.0], [10.0, 0.0]]).unwrap()).unwrap();
        let q = Dataset::from_rows([[5.0f32, 0.0]]).unwrap();
        assert_eq!(assign_top_c(&cents2, &q, 1).unwrap().clusters_of(0), &[0]);

        assert!(assign_top_c(&cents2, &q, 3).is_err());
        assert!(assign_top_c(&cents2, &q, 0).is_err());
        let bad = Dataset::from_rows([[1.0f32, 2.0, 3.0]]).unwrap();
        assert!(assign_top_c(&cents2, &bad, 1).is_err());
    }

    #[test]
    fn partition_examples() {
        let cents = Centroids::new(Dataset::from_rows([[0.0f32], [10.0], [20.0]]).unwrap()).unwrap();
        let db = Dataset::from_rows([[1.0f32], [20.0], [9.0], [11.0]]).unwrap();
        let parts = partition_database(&db, &cents).unwrap();
        assert_eq!(parts, vec![vec![0], vec![2, 3], vec![1]]);
    }

    #[test]
    fn partition_is_exact_cover_and_matches_label_scan() {
        let (db, _) = blobs(4, 150);
        let cents = kmeans_train(&db, 2, 30, 8).unwrap();
        let parts = partition_database(&db, &cents).unwrap();
        let mut seen = vec![0; db.len()];
        for (j, p) in parts.iter().enumerate() {
            for &id in p {
                seen[id as usize] += 1;
                // Independent label: scan both centroids with the checked distance.
                let d: Vec<f32> = (0..2)
                    .map(|c| squared_l2(db.row(id as usize), cents.center(c)).unwrap())
                    .collect();
                let label = if d[1] < d[0] { 1 } else { 0 };
                assert_eq!(label, j);
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn wcss_never_increases() {
        for seed in 0..5 {
            let db = random_ds(seed, 400, 4, 1.0);
            let fit = kmeans_fit(&db, 12, 50, seed).unwrap();
            for w in fit.wcss_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", fit.wcss_history);
            }
        }
    }

    #[test]
    fn converged_labels_equal_nearest_partition() {
        let db = random_ds(3, 500, 3, 1.0);
        let fit = kmeans_fit(&db, 9, 200, 1).unwrap();
        assert!(fit.converged);
        let parts = partition_database(&db, &fit.centroids).unwrap();
        for (j, p) in parts.iter().enumerate() {
            for &id in p {
                assert_eq!(fit.labels[id as usize], j as u32);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn full_fan_out_is_sorted_and_prefix_stable(seed in any::<u64>(), c in 1usize..8) {
            let cents = Centroids::new(random_ds(seed, 8, 5, 1e3)).unwrap();
            let q = random_ds(seed ^ 0xabcd, 4, 5, 1e3);
            let all = assign_top_c(&cents, &q, 8).unwrap();
            let some = assign_top_c(&cents, &q, c).unwrap();
            for i in 0..q.len() {
                prop_assert_eq!(&all.clusters_of(i)[..c], some.clusters_of(i));
                let mut seen = all.clusters_of(i).to_vec();
                seen.sort_unstable();
                seen.dedup();
                prop_assert_eq!(seen.len(), 8);
            }
        }

        #[test]
        fn expanded_ranking_matches_direct(seed in any::<u64>()) {
            let cents = Centroids::new(random_ds(seed, 16, 6, 1e3)).unwrap();
            let q = random_ds(seed.wrapping_add(1), 3, 6, 1e3);
            let got = assign_top_c(&cents, &q, 16).unwrap();
            for (i, qv) in q.rows().enumerate() {
                let direct: Vec<f64> = (0..16)
                    .map(|j| qv.iter().zip(cents.center(j)).map(|(&a, &b)| {
                        let d = f64::from(a) - f64::from(b);
                        d * d
                    }).sum())
                    .collect();
                let mut order: Vec<usize> = (0..16).collect();
                order.sort_by(|&a, &b| direct[a].partial_cmp(&direct[b]).unwrap().then(a.cmp(&b)));
                // Rankings agree up to distances within the stated tolerance.
                for (pos, &j) in got.clusters_of(i).iter().enumerate() {
                    prop_assert!((direct[j as usize] - direct[order[pos]]).abs() <= 1e-3);
                }
            }
        }
    }
}
