//! Point clouds and the geometric kernels the model is built on.
//!
//! Index-producing kernels (farthest point sampling, k-nearest neighbors) are
//! plain functions over [`PointCloud`]s. Distance ties are always broken
//! toward the lowest index so every kernel is deterministic.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Error, Result};

pub type Point3 = [f64; 3];

/// Floor applied to seed distances before inversion in
/// [`interpolate_seed_features`].
pub const DISTANCE_FLOOR: f64 = 1e-8;

#[inline]
pub fn squared_distance(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn distance(a: &Point3, b: &Point3) -> f64 {
    squared_distance(a, b).sqrt()
}

/// A nonempty ordered set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(contract_err!("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(contract_err!("point {i} has a non-finite coordinate"));
        }
        Ok(PointCloud { points })
    }

    /// Reads an `[N, 3]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != 3 {
            return Err(shape_err!("expected [N, 3] coordinates, got {:?}", t.shape()));
        }
        let pts = t
            .data()
            .chunks(3)
            .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
            .collect();
        PointCloud::new(pts)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .points
            .iter()
            .flat_map(|p| p.iter().map(|&c| T::from_f64(c)))
            .collect();
        Tensor::new(vec![self.points.len(), 3], data).expect("[N, 3] layout")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Point3 {
        &self.points[i]
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.points.len();
        let pts = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("index {i} out of range for {n} points")))
            })
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(pts)
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        PointCloud { points: pts }
    }

    pub fn translated(&self, t: Point3) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        distance(&lo, &hi)
    }
}

/// Greedy max-min subset selection starting from `start`.
///
/// Each new index maximizes the Euclidean distance to its nearest already
/// selected point; ties go to the lowest index.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(contract_err!("farthest point sampling needs 1 <= k <= {n}, got {k}"));
    }
    if start >= n {
        return Err(contract_err!("start index {start} out of range for {n} points"));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let anchor = pts[current];
        let mut best = usize::MAX;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = distance(p, &anchor);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_dist {
                best_dist = min_dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(selected)
}

/// Index of the lexicographically smallest point (lowest index on ties).
///
/// Independent of point order and commutes with translation, which makes it a
/// start point for [`farthest_point_sample`] that keeps the sampled set
/// invariant under input permutation.
pub fn canonical_start(cloud: &PointCloud) -> usize {
    let pts = cloud.points();
    let mut best = 0;
    for i in 1..pts.len() {
        let ord = pts[i]
            .partial_cmp(&pts[best])
            .expect("finite coordinates");
        if ord == Ordering::Less {
            best = i;
        }
    }
    best
}

/// `k` nearest reference points for every query.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_queries(&self) -> usize {
        self.indices.len() / self.k
    }

    /// Row-major `[queries, k]` reference indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Row-major `[queries, k]` Euclidean distances, nondecreasing per row.
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn row(&self, q: usize) -> (&[usize], &[f64]) {
        let r = q * self.k..(q + 1) * self.k;
        (&self.indices[r.clone()], &self.distances[r])
    }

    /// `[0,0,..,1,1,..]`: the query index repeated `k` times, aligned with
    /// [`NeighborIndex::indices`].
    pub fn query_indices(&self) -> Vec<usize> {
        (0..self.num_queries())
            .flat_map(|q| std::iter::repeat_n(q, self.k))
            .collect()
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.partial_cmp(&b.0)
        .expect("finite distances")
        .then(a.1.cmp(&b.1))
}

/// Brute-force k-nearest-neighbor search. A reference point coinciding with a
/// query is a valid neighbor.
pub fn knn(queries: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborIndex> {
    let m = reference.len();
    if k == 0 || k > m {
        return Err(contract_err!("knn needs 1 <= k <= {m}, got {k}"));
    }
    let refs = reference.points();
    let rows: Vec<Vec<(f64, usize)>> = queries
        .points()
        .par_iter()
        .map(|q| {
            let mut cand: Vec<(f64, usize)> =
                refs.iter().enumerate().map(|(j, r)| (distance(q, r), j)).collect();
            if k < m {
                cand.select_nth_unstable_by(k - 1, by_distance_then_index);
                cand.truncate(k);
            }
            cand.sort_unstable_by(by_distance_then_index);
            cand
        })
        .collect();
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut distances = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for (d, j) in row {
            indices.push(j);
            distances.push(d);
        }
    }
    Ok(NeighborIndex {
        k,
        indices,
        distances,
    })
}

/// Nearest reference index and squared distance for every query.
pub fn nearest_neighbors(queries: &PointCloud, reference: &PointCloud) -> Vec<(usize, f64)> {
    let refs = reference.points();
    queries
        .points()
        .par_iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, r) in refs.iter().enumerate() {
                let d = squared_distance(q, r);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .collect()
}

/// Normalized inverse-distance weights over each query's `k` nearest seeds.
#[derive(Clone, Debug)]
pub struct InterpolationWeights {
    pub neighbors: NeighborIndex,
    /// Row-major `[queries, k]`, each row summing to one.
    pub weights: Vec<f64>,
}

pub fn interpolation_weights(
    queries: &PointCloud,
    seeds: &PointCloud,
    k: usize,
) -> Result<InterpolationWeights> {
    let neighbors = knn(queries, seeds, k)?;
    let mut weights = Vec::with_capacity(neighbors.distances().len());
    for q in 0..neighbors.num_queries() {
        let (_, dist) = neighbors.row(q);
        let inv: Vec<f64> = dist.iter().map(|&d| 1.0 / d.max(DISTANCE_FLOOR)).collect();
        let total: f64 = inv.iter().sum();
        weights.extend(inv.iter().map(|w| w / total));
    }
    Ok(InterpolationWeights { neighbors, weights })
}

/// Inverse-distance weighted average of the `k` nearest seed features for
/// each query point.
///
/// `queries` is `[N, 3]`, `seeds` is `[S, 3]` and `seed_features` is
/// `[S, C]`. Differentiable in all three; the neighbor sets are fixed by the
/// forward values.
pub fn interpolate_seed_features<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    seeds: Var,
    seed_features: Var,
    k: usize,
) -> Result<Var> {
    let qc = PointCloud::from_tensor(tape.value(queries))?;
    let sc = PointCloud::from_tensor(tape.value(seeds))?;
    let fs = tape.shape(seed_features).to_vec();
    if fs.len() != 2 || fs[0] != sc.len() {
        return Err(shape_err!("seed features {:?} do not match {} seeds", fs, sc.len()));
    }
    let (n, channels) = (qc.len(), fs[1]);
    let nb = knn(&qc, &sc, k)?;

    let q = tape.gather_rows(queries, nb.query_indices())?;
    let s = tape.gather_rows(seeds, nb.indices().to_vec())?;
    let diff = tape.sub(q, s)?;
    let dist = tape.row_norm(diff)?;
    let dist = tape.clamp_min(dist, DISTANCE_FLOOR)?;
    let inv = tape.recip(dist)?;
    let inv = tape.reshape(inv, vec![n, k])?;
    let total = tape.sum_axis(inv, 1)?;
    let norm = tape.recip(total)?;
    let norm = tape.reshape(norm, vec![n, 1])?;
    let norm = tape.expand_last(norm, k)?;
    let w = tape.mul(inv, norm)?;
    let w = tape.reshape(w, vec![n * k, 1])?;
    let w = tape.expand_last(w, channels)?;

    let f = tape.gather_rows(seed_features, nb.indices().to_vec())?;
    let weighted = tape.mul(f, w)?;
    let grouped = tape.reshape(weighted, vec![n, k, channels])?;
    tape.sum_axis(grouped, 1)
}

/// Indices (into `seeds ++ partial`) selected by farthest point sampling
/// from index 0 of the concatenation.
pub fn fuse_indices(seeds: &PointCloud, partial: &PointCloud, n0: usize) -> Result<Vec<usize>> {
    let total = seeds.len() + partial.len();
    if n0 > total {
        return Err(contract_err!("cannot resample {n0} points from {total}"));
    }
    farthest_point_sample(&seeds.concat(partial), n0, 0)
}

/// Merges seeds with the partial input and resamples `n0` points by
/// farthest point sampling.
pub fn fuse_and_resample(seeds: &PointCloud, partial: &PointCloud, n0: usize) -> Result<PointCloud> {
    let idx = fuse_indices(seeds, partial, n0)?;
    seeds.concat(partial).select(&idx)
}
