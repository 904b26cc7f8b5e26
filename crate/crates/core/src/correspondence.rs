//! Spectral segmentation of an image's tokens and optimal segment matching
//! between images.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};
use crate::linalg::sq_dist_rows;

pub const DEFAULT_SEGMENTS: usize = 10;
pub const KMEANS_RESTARTS: usize = 20;
pub const KMEANS_MAX_ITERS: usize = 300;

/// Hard assignment of each token of one image to one of `k` segments.
///
/// Every label in `0..k` is used at least once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentationRepr")]
pub struct Segmentation {
    image_id: String,
    k: usize,
    labels: Vec<usize>,
}

#[derive(Deserialize)]
struct SegmentationRepr {
    image_id: String,
    k: usize,
    labels: Vec<usize>,
}

impl TryFrom<SegmentationRepr> for Segmentation {
    type Error = VibeError;

    fn try_from(r: SegmentationRepr) -> Result<Self> {
        Segmentation::new(r.image_id, r.k, r.labels)
    }
}

impl Segmentation {
    pub fn new(image_id: impl Into<String>, k: usize, labels: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(VibeError::invalid("k", "must be at least 1"));
        }
        let mut used = vec![false; k];
        for &l in &labels {
            if l >= k {
                return Err(VibeError::invalid("labels", format!("label {l} out of range for k = {k}")));
            }
            used[l] = true;
        }
        if let Some(missing) = used.iter().position(|u| !u) {
            return Err(VibeError::invalid("labels", format!("segment {missing} is empty")));
        }
        Ok(Self {
            image_id: image_id.into(),
            k,
            labels,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Applies `relabel[old] = new` to every token.
    pub fn relabeled(&self, relabel: &[usize]) -> Result<Self> {
        if relabel.len() != self.k {
            return Err(VibeError::invalid("relabel", "must have one entry per segment"));
        }
        Segmentation::new(
            self.image_id.clone(),
            self.k,
            self.labels.iter().map(|&l| relabel[l]).collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("segmentation serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| VibeError::invalid("segmentation", e.to_string()))
    }
}

pub fn write_segmentation_file(seg: &Segmentation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, seg.to_json()).map_err(|e| VibeError::io(path, e))
}

pub fn read_segmentation_file(path: impl AsRef<Path>) -> Result<Segmentation> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| VibeError::io(path, e))?;
    Segmentation::from_json(&s)
}

/// Normalized spectral clustering of one image's eigenvector rows.
///
/// The first `k` columns are taken, each row scaled to unit length, and the
/// rows clustered by k-means (k-means++ seeding, [`KMEANS_RESTARTS`] restarts,
/// lowest inertia kept). Labels are renumbered in order of first appearance.
pub fn segment_tokens(image_id: &str, psi_rows: &DMatrix<f64>, k: usize, seed: u64) -> Result<Segmentation> {
    let n = psi_rows.nrows();
    if k == 0 {
        return Err(VibeError::invalid("k", "must be at least 1"));
    }
    if k > n {
        return Err(VibeError::invalid("k", format!("{k} segments for {n} tokens")));
    }
    if psi_rows.ncols() < k {
        return Err(VibeError::invalid(
            "k",
            format!("{k} segments need at least {k} eigenvector columns, got {}", psi_rows.ncols()),
        ));
    }
    if psi_rows.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("eigenvector rows"));
    }
    if k == 1 {
        return Segmentation::new(image_id, 1, vec![0; n]);
    }
    let mut x = psi_rows.columns(0, k).into_owned();
    for mut row in x.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let distinct = count_distinct_rows(&x);
    if distinct < k {
        return Err(VibeError::TooFewDistinctRows { k, distinct });
    }
    let labels = kmeans(&x, k, seed);
    Segmentation::new(image_id, k, canonical_labels(&labels, k))
}

fn count_distinct_rows(x: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = x
        .row_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Renumbers labels so they appear in increasing order of first use.
fn canonical_labels(labels: &[usize], k: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Best-of-restarts Lloyd clustering; every returned cluster is nonempty.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centers = kmeans_pp(x, k, &mut rng);
        let (inertia, labels) = lloyd(x, centers);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

fn kmeans_pp(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = x.nrows();
    let mut centers = DMatrix::zeros(k, x.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist_rows(x, i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            // rounding can land on a zero-weight point; fall back to the farthest
            if d2[chosen] == 0.0 {
                argmax(&d2)
            } else {
                chosen
            }
        } else {
            argmax(&d2)
        };
        centers.row_mut(c).copy_from(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist_rows(x, i, &centers, c));
        }
    }
    centers
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn assign(x: &DMatrix<f64>, centers: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    let k = centers.nrows();
    (0..x.nrows())
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist_rows(x, i, centers, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn lloyd(x: &DMatrix<f64>, mut centers: DMatrix<f64>) -> (f64, Vec<usize>) {
    let k = centers.nrows();
    let (mut labels, mut dist) = assign(x, &centers);
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let mut row = sums.row_mut(l);
            row += x.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed from the point farthest from its own center
                let far = argmax(&dist);
                centers.row_mut(c).copy_from(&x.row(far));
                dist[far] = 0.0;
            } else {
                let mean = sums.row(c) / counts[c] as f64;
                centers.row_mut(c).copy_from(&mean);
            }
        }
        let (next, next_dist) = assign(x, &centers);
        let changed = next != labels;
        labels = next;
        dist = next_dist;
        if !changed && labels_cover(&labels, k) {
            break;
        }
    }
    if !labels_cover(&labels, k) {
        fill_empty(&mut labels, &mut dist, k);
    }
    (dist.iter().sum(), labels)
}

fn labels_cover(labels: &[usize], k: usize) -> bool {
    let mut used = vec![false; k];
    for &l in labels {
        used[l] = true;
    }
    used.iter().all(|&u| u)
}

/// Moves the farthest points of multi-member clusters into empty clusters.
fn fill_empty(labels: &mut [usize], dist: &mut [f64], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        for i in 0..labels.len() {
            if counts[labels[i]] > 1 && far.is_none_or(|f: usize| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let f = far.expect("k <= n leaves a cluster with several members");
        labels[f] = empty;
        dist[f] = 0.0;
    }
}

/// Per-segment mean rows, `k x d`.
pub fn segment_centroids(values: &DMatrix<f64>, seg: &Segmentation) -> Result<DMatrix<f64>> {
    if values.nrows() != seg.len() {
        return Err(VibeError::DimensionMismatch {
            context: "segment centroid rows",
            expected: seg.len(),
            actual: values.nrows(),
        });
    }
    let mut c = DMatrix::zeros(seg.k(), values.ncols());
    for (i, &l) in seg.labels().iter().enumerate() {
        let mut row = c.row_mut(l);
        row += values.row(i);
    }
    for (l, count) in seg.counts().into_iter().enumerate() {
        let mut row = c.row_mut(l);
        row /= count as f64;
    }
    Ok(c)
}

/// Optimal assignment of rows to columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the column assigned to row `i`.
    pub perm: Vec<usize>,
    /// `sum_i cost[i, perm[i]]`, summed in row order.
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Among optimal permutations the lexicographically smallest is returned.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Assignment> {
    let k = cost.nrows();
    if cost.ncols() != k {
        return Err(VibeError::DimensionMismatch {
            context: "square cost matrix",
            expected: k,
            actual: cost.ncols(),
        });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("assignment cost"));
    }
    if k == 0 {
        return Ok(Assignment {
            perm: vec![],
            cost: 0.0,
        });
    }
    let total = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
    let optimum = total(&solve_assignment(cost));
    let scale = cost.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * scale * k as f64;

    // fix rows one at a time to the smallest column that keeps the optimum reachable
    let mut perm = vec![usize::MAX; k];
    let mut free_cols: Vec<usize> = (0..k).collect();
    let mut fixed_cost = 0.0;
    for i in 0..k {
        let rest_rows: Vec<usize> = (i + 1..k).collect();
        let mut chosen = None;
        for (pos, &j) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let sub = DMatrix::from_fn(rest_rows.len(), rest_cols.len(), |a, b| cost[(rest_rows[a], rest_cols[b])]);
            let sub_perm = solve_assignment(&sub);
            let sub_cost: f64 = sub_perm.iter().enumerate().map(|(a, &b)| sub[(a, b)]).sum();
            if fixed_cost + cost[(i, j)] + sub_cost <= optimum + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("some column keeps the optimum reachable");
        let j = free_cols.remove(pos);
        perm[i] = j;
        fixed_cost += cost[(i, j)];
    }
    let cost = total(&perm);
    Ok(Assignment { perm, cost })
}

/// Shortest-augmenting-path Hungarian method with potentials, O(k^3).
fn solve_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    if n == 0 {
        return vec![];
    }
    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    perm
}

/// Tokens of one image as seen by the matcher.
#[derive(Debug, Clone, Copy)]
pub struct ImageTokens<'a> {
    pub image_id: &'a str,
    /// Source-space features, one row per token.
    pub source: &'a DMatrix<f64>,
    /// This image's rows of the joint eigenvector matrix.
    pub psi: &'a DMatrix<f64>,
    /// Latent codes of the tokens.
    pub latent: &'a DMatrix<f64>,
}

/// Segment bijection between two images.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// `pi[i]` is the segment of B matched to segment `i` of A.
    pub pi: Vec<usize>,
    pub seg_a: Segmentation,
    pub seg_b: Segmentation,
    /// Source-feature centroids used for matching.
    pub source_centroids_a: DMatrix<f64>,
    pub source_centroids_b: DMatrix<f64>,
    /// `sum_i |source_a[i] - source_b[pi[i]]|`.
    pub cost: f64,
    /// Latent centroids of the same segments.
    pub centroids_a: DMatrix<f64>,
    pub centroids_b: DMatrix<f64>,
}

impl Correspondence {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// `centroids_b[pi[i]] - centroids_a[i]` for each segment `i` of A.
    pub fn segment_displacements(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.k(), self.centroids_a.ncols());
        for (i, &j) in self.pi.iter().enumerate() {
            d.row_mut(i).copy_from(&(self.centroids_b.row(j) - self.centroids_a.row(i)));
        }
        d
    }
}

/// Euclidean distances between every row of `a` and every row of `b`.
pub fn centroid_costs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| sq_dist_rows(a, i, b, j).sqrt())
}

/// Segments both images with the same seed, matches segments on source
/// centroids and reports latent centroids for the matched segments.
pub fn match_images(a: ImageTokens<'_>, b: ImageTokens<'_>, k: usize, seed: u64) -> Result<Correspondence> {
    for (img, ctx) in [(&a, "image A"), (&b, "image B")] {
        let n = img.source.nrows();
        if img.psi.nrows() != n || img.latent.nrows() != n {
            return Err(VibeError::DimensionMismatch {
                context: ctx,
                expected: n,
                actual: if img.psi.nrows() != n { img.psi.nrows() } else { img.latent.nrows() },
            });
        }
    }
    if a.source.ncols() != b.source.ncols() || a.latent.ncols() != b.latent.ncols() {
        return Err(VibeError::DimensionMismatch {
            context: "feature widths of matched images",
            expected: a.source.ncols(),
            actual: b.source.ncols(),
        });
    }
    let seg_a = segment_tokens(a.image_id, a.psi, k, seed)?;
    let seg_b = segment_tokens(b.image_id, b.psi, k, seed)?;
    correspond(a, b, seg_a, seg_b)
}

/// Matching step of [`match_images`] for given segmentations.
pub fn correspond(
    a: ImageTokens<'_>,
    b: ImageTokens<'_>,
    seg_a: Segmentation,
    seg_b: Segmentation,
) -> Result<Correspondence> {
    if seg_a.k() != seg_b.k() {
        return Err(VibeError::invalid("k", "both segmentations need the same number of segments"));
    }
    let source_centroids_a = segment_centroids(a.source, &seg_a)?;
    let source_centroids_b = segment_centroids(b.source, &seg_b)?;
    let assignment = hungarian(&centroid_costs(&source_centroids_a, &source_centroids_b))?;
    let cost = assignment
        .perm
        .iter()
        .enumerate()
        .map(|(i, &j)| sq_dist_rows(&source_centroids_a, i, &source_centroids_b, j).sqrt())
        .sum();
    Ok(Correspondence {
        pi: assignment.perm,
        centroids_a: segment_centroids(a.latent, &seg_a)?,
        centroids_b: segment_centroids(b.latent, &seg_b)?,
        seg_a,
        seg_b,
        source_centroids_a,
        source_centroids_b,
        cost,
    })
}

/// Broadcasts each A segment's centroid displacement to its tokens.
pub fn displacement(corr: &Correspondence, z_a: &DMatrix<f64>, seg_a: &Segmentation) -> Result<DMatrix<f64>> {
    if z_a.nrows() != seg_a.len() {
        return Err(VibeError::DimensionMismatch {
            context: "displacement rows",
            expected: seg_a.len(),
            actual: z_a.nrows(),
        });
    }
    if z_a.ncols() != corr.centroids_a.ncols() {
        return Err(VibeError::DimensionMismatch {
            context: "displacement width",
            expected: corr.centroids_a.ncols(),
            actual: z_a.ncols(),
        });
    }
    if seg_a.k() != corr.k() {
        return Err(VibeError::invalid("seg_a", "segment count differs from the correspondence"));
    }
    Ok(broadcast_rows(&corr.segment_displacements(), seg_a))
}

/// Row `p` of the result is `per_segment[label(p)]`.
pub fn broadcast_rows(per_segment: &DMatrix<f64>, seg: &Segmentation) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(seg.len(), per_segment.ncols());
    for (p, &l) in seg.labels().iter().enumerate() {
        out.row_mut(p).copy_from(&per_segment.row(l));
    }
    out
}
