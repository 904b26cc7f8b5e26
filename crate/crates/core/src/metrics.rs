//! Path geometry, blend consistency, feature similarity and pairwise-preference
//! aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correspondence::{segment_tokens, Segmentation};
use crate::error::{Result, VibeError};
use crate::feature_io::read_feature_file;
use crate::model::VibeSpaceModel;
use crate::spectral::{build_affinity, solve_diffusion_map};

fn check_points(path: &[DVector<f64>], min: usize, what: &'static str) -> Result<()> {
    if path.len() < min {
        return Err(VibeError::invalid(what, format!("need at least {min} points, got {}", path.len())));
    }
    let d = path[0].len();
    for p in path {
        if p.len() != d {
            return Err(VibeError::DimensionMismatch {
                context: "path point dimension",
                expected: d,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("path point"));
        }
    }
    Ok(())
}

/// Polyline length divided by the endpoint distance.
pub fn length_ratio(path: &[DVector<f64>]) -> Result<f64> {
    check_points(path, 2, "path")?;
    let chord = (&path[path.len() - 1] - &path[0]).norm();
    if chord == 0.0 {
        return Err(VibeError::invalid("path", "endpoints coincide; length ratio undefined"));
    }
    let length: f64 = path.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum();
    Ok(length / chord)
}

/// Mean turning angle between consecutive steps, in radians.
pub fn direction_change(path: &[DVector<f64>]) -> Result<f64> {
    check_points(path, 3, "path")?;
    let steps: Vec<DVector<f64>> = path.windows(2).map(|w| &w[1] - &w[0]).collect();
    if let Some(i) = steps.iter().position(|s| s.norm() == 0.0) {
        return Err(VibeError::invalid("path", format!("step {i} has zero length")));
    }
    let total: f64 = steps
        .windows(2)
        .map(|w| {
            // half-angle form stays accurate near 0 and pi, unlike acos of the cosine
            let (a, b) = (w[0].normalize(), w[1].normalize());
            2.0 * f64::atan2((&a - &b).norm(), (&a + &b).norm())
        })
        .sum();
    Ok(total / (steps.len() - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PnsReport {
    pub length_ratio: f64,
    pub mean_direction_change: f64,
    /// Mean of the two batch-normalized sub-scores, in [0, 1].
    pub normalized_pns: f64,
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Path nonlinearity scores of a batch; each sub-metric is min-max scaled
/// across the batch, with a constant sub-metric mapping to 0.5.
pub fn pns_batch(paths: &[Vec<DVector<f64>>]) -> Result<Vec<PnsReport>> {
    if paths.is_empty() {
        return Err(VibeError::invalid("paths", "at least one path is required"));
    }
    let ratios = paths.iter().map(|p| length_ratio(p)).collect::<Result<Vec<_>>>()?;
    let angles = paths.iter().map(|p| direction_change(p)).collect::<Result<Vec<_>>>()?;
    let (nr, na) = (min_max(&ratios), min_max(&angles));
    Ok((0..paths.len())
        .map(|i| PnsReport {
            length_ratio: ratios[i],
            mean_direction_change: angles[i],
            normalized_pns: 0.5 * (nr[i] + na[i]),
        })
        .collect())
}

/// Points from row vectors.
pub fn path_from_rows(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_column_slice(r)).collect()
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

fn segment_means(values: &DMatrix<f64>, seg: &Segmentation) -> Vec<DVector<f64>> {
    let mut sums = vec![DVector::zeros(values.ncols()); seg.k()];
    let mut counts = vec![0usize; seg.k()];
    for (i, &l) in seg.labels().iter().enumerate() {
        sums[l] += values.row(i).transpose();
        counts[l] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean cosine over segments with nonzero means on both sides.
    pub score: f64,
    /// Ideal-side segments left out because a mean had zero norm.
    pub excluded: Vec<usize>,
}

/// Average cosine similarity between matched segment-mean features.
///
/// Segment `c` of the ideal tokens is compared with segment `pi[c]` of the
/// realized tokens.
pub fn consistency_score(
    ideal: &DMatrix<f64>,
    realized: &DMatrix<f64>,
    seg_ideal: &Segmentation,
    seg_realized: &Segmentation,
    pi: &[usize],
) -> Result<Consistency> {
    for (m, s, ctx) in [(ideal, seg_ideal, "ideal rows"), (realized, seg_realized, "realized rows")] {
        if m.nrows() != s.len() {
            return Err(VibeError::DimensionMismatch {
                context: ctx,
                expected: s.len(),
                actual: m.nrows(),
            });
        }
    }
    if ideal.ncols() != realized.ncols() {
        return Err(VibeError::DimensionMismatch {
            context: "realized feature width",
            expected: ideal.ncols(),
            actual: realized.ncols(),
        });
    }
    if pi.len() != seg_ideal.k() || pi.iter().any(|&j| j >= seg_realized.k()) {
        return Err(VibeError::invalid("pi", "must map every ideal segment to a realized segment"));
    }
    let mi = segment_means(ideal, seg_ideal);
    let mr = segment_means(realized, seg_realized);
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = Vec::new();
    for (c, &j) in pi.iter().enumerate() {
        match cosine(&mi[c], &mr[j]) {
            Some(v) => {
                total += v;
                used += 1;
            }
            None => excluded.push(c),
        }
    }
    if used == 0 {
        return Err(VibeError::invalid("segments", "every segment mean has zero norm"));
    }
    Ok(Consistency {
        score: total / used as f64,
        excluded,
    })
}

/// Source of realized features for each point of an ideal path, such as
/// generated images re-encoded into the target space.
pub trait RealizedProvider {
    fn realize(&mut self, index: usize, alpha: f64, ideal: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String>;
}

impl<F> RealizedProvider for F
where
    F: FnMut(usize, f64, &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String>,
{
    fn realize(&mut self, index: usize, alpha: f64, ideal: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String> {
        self(index, alpha, ideal)
    }
}

pub fn realized_file_name(index: usize) -> String {
    format!("realized_{index:03}.vibe")
}

/// Reads realized features from `realized_{index:03}.vibe` files in a directory.
#[derive(Debug, Clone)]
pub struct DirectoryProvider {
    pub dir: PathBuf,
}

impl DirectoryProvider {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self {
            dir: dir.as_ref().to_path_buf(),
        }
    }
}

impl RealizedProvider for DirectoryProvider {
    fn realize(&mut self, index: usize, _alpha: f64, ideal: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String> {
        let grid = read_feature_file(self.dir.join(realized_file_name(index))).map_err(|e| e.to_string())?;
        if grid.tokens().shape() != ideal.shape() {
            return Err(format!(
                "realized shape {:?} differs from ideal {:?}",
                grid.tokens().shape(),
                ideal.shape()
            ));
        }
        Ok(grid.into_tokens())
    }
}

/// Scores within this distance of the minimum count as tied.
pub const SCORE_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaScore {
    pub alpha: f64,
    /// `None` when the provider failed at this alpha.
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    pub scores: Vec<AlphaScore>,
    pub segmentation: Segmentation,
}

/// Segments decoded tokens by spectral clustering of their own affinity graph.
pub fn segment_features(image_id: &str, tokens: &DMatrix<f64>, k: usize, seed: u64) -> Result<Segmentation> {
    if k == 1 {
        return Segmentation::new(image_id, 1, vec![0; tokens.nrows()]);
    }
    if k > tokens.nrows() {
        return Err(VibeError::invalid("k", format!("{k} segments for {} tokens", tokens.nrows())));
    }
    let graph = build_affinity(tokens, None)?;
    let map = solve_diffusion_map(&graph, k, 1.0)?;
    segment_tokens(image_id, map.eigenvectors(), k, seed)
}

/// Picks the alpha where realized features drift furthest from the ideal path.
///
/// The ideal decoding at alpha 0 is segmented once; every alpha is scored by
/// [`consistency_score`] between its ideal and realized tokens under that
/// segmentation. Failed alphas are skipped. Ties go to the smallest alpha.
#[allow(clippy::too_many_arguments)]
pub fn select_alpha(
    model: &VibeSpaceModel,
    z_a: &DMatrix<f64>,
    delta: &DMatrix<f64>,
    alphas: &[f64],
    provider: &mut dyn RealizedProvider,
    k: usize,
    seed: u64,
) -> Result<AlphaSelection> {
    if alphas.is_empty() {
        return Err(VibeError::invalid("alphas", "at least one weight is required"));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(VibeError::invalid("alphas", "must be finite"));
    }
    if z_a.shape() != delta.shape() {
        return Err(VibeError::DimensionMismatch {
            context: "displacement rows",
            expected: z_a.nrows(),
            actual: delta.nrows(),
        });
    }
    let base = model.decode(z_a)?;
    let seg = segment_features("ideal", &base, k, seed)?;
    let identity: Vec<usize> = (0..seg.k()).collect();
    let mut scores = Vec::with_capacity(alphas.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        let ideal = model.decode(&(z_a + delta * alpha))?;
        let entry = match provider.realize(i, alpha, &ideal) {
            Ok(realized) => match consistency_score(&ideal, &realized, &seg, &seg, &identity) {
                Ok(c) => AlphaScore {
                    alpha,
                    score: Some(c.score),
                    error: None,
                },
                Err(e) => AlphaScore {
                    alpha,
                    score: None,
                    error: Some(e.to_string()),
                },
            },
            Err(e) => AlphaScore {
                alpha,
                score: None,
                error: Some(e),
            },
        };
        scores.push(entry);
    }
    let alpha = pick_min(&scores).ok_or(VibeError::ProviderExhausted)?;
    Ok(AlphaSelection {
        alpha,
        scores,
        segmentation: seg,
    })
}

fn pick_min(scores: &[AlphaScore]) -> Option<f64> {
    let min = scores.iter().filter_map(|s| s.score).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    scores
        .iter()
        .filter(|s| s.score.is_some_and(|v| v <= min + SCORE_TIE_TOL))
        .map(|s| s.alpha)
        .fold(None, |acc: Option<f64>, a| Some(acc.map_or(a, |b| b.min(a))))
}

fn masked_mean(feats: &DMatrix<f64>, mask: &[bool], which: &'static str) -> Result<DVector<f64>> {
    if mask.len() != feats.nrows() {
        return Err(VibeError::DimensionMismatch {
            context: which,
            expected: feats.nrows(),
            actual: mask.len(),
        });
    }
    let mut sum = DVector::zeros(feats.ncols());
    let mut count = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sum += feats.row(i).transpose();
        count += 1;
    }
    if count == 0 {
        return Err(VibeError::invalid(which, "mask selects no tokens"));
    }
    Ok(sum / count as f64)
}

/// Cosine similarity of the mean features inside each mask.
pub fn masked_similarity(feats_a: &DMatrix<f64>, mask_a: &[bool], feats_b: &DMatrix<f64>, mask_b: &[bool]) -> Result<f64> {
    if feats_a.ncols() != feats_b.ncols() {
        return Err(VibeError::DimensionMismatch {
            context: "masked feature width",
            expected: feats_a.ncols(),
            actual: feats_b.ncols(),
        });
    }
    let va = masked_mean(feats_a, mask_a, "mask_a")?;
    let vb = masked_mean(feats_b, mask_b, "mask_b")?;
    cosine(&va, &vb).ok_or_else(|| VibeError::invalid("features", "masked mean has zero norm"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    CosineDistance,
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = VibeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cosine_distance" => Ok(Distance::CosineDistance),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(VibeError::invalid("dist", format!("unknown distance {other:?}"))),
        }
    }
}

/// Mean pairwise distance over all unordered pairs.
pub fn diversity(features: &[DVector<f64>], dist: Distance) -> Result<f64> {
    if features.len() < 2 {
        return Err(VibeError::invalid("features", "need at least 2 items"));
    }
    check_points(features, 2, "features")?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            total += match dist {
                Distance::Euclidean => (&features[i] - &features[j]).norm(),
                Distance::CosineDistance => {
                    1.0 - cosine(&features[i], &features[j])
                        .ok_or_else(|| VibeError::invalid("features", "zero vector has no cosine distance"))?
                }
            };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtScores {
    /// Sorted item ids.
    pub items: Vec<String>,
    /// Strengths with geometric mean 1.
    pub strengths: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBin {
    Low,
    Medium,
    High,
}

impl BtScores {
    pub fn strength(&self, item: &str) -> Option<f64> {
        self.items.iter().position(|i| i == item).map(|p| self.strengths[p])
    }

    /// Tertile bin of each item by strength rank; ties keep item order.
    pub fn tertile_bins(&self) -> Vec<DifficultyBin> {
        let n = self.items.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.strengths[a].total_cmp(&self.strengths[b]));
        let mut bins = vec![DifficultyBin::Low; n];
        for (rank, &i) in order.iter().enumerate() {
            bins[i] = match 3 * rank / n {
                0 => DifficultyBin::Low,
                1 => DifficultyBin::Medium,
                _ => DifficultyBin::High,
            };
        }
        bins
    }
}

/// Bradley-Terry strengths over the items named in `comparisons`.
pub fn bt_fit(comparisons: &[(String, String)], max_iters: usize, tol: f64) -> Result<BtScores> {
    let items: BTreeSet<String> = comparisons.iter().flat_map(|(w, l)| [w.clone(), l.clone()]).collect();
    bt_fit_items(&items.into_iter().collect::<Vec<_>>(), comparisons, max_iters, tol)
}

/// Bradley-Terry strengths by minorization-maximization.
///
/// Every listed item must appear in a comparison, the comparison graph must be
/// connected, and every item needs at least one win and one loss for the
/// maximum-likelihood strengths to be finite and positive.
pub fn bt_fit_items(items: &[String], comparisons: &[(String, String)], max_iters: usize, tol: f64) -> Result<BtScores> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(VibeError::invalid("tol", "must be positive"));
    }
    if max_iters == 0 {
        return Err(VibeError::invalid("max_iters", "must be positive"));
    }
    let mut items: Vec<String> = items.to_vec();
    items.sort();
    items.dedup();
    if items.len() < 2 {
        return Err(VibeError::invalid("comparisons", "need at least two items"));
    }
    let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n = items.len();
    let mut wins = vec![0.0; n];
    let mut losses = vec![0.0; n];
    let mut games = DMatrix::<f64>::zeros(n, n);
    for (w, l) in comparisons {
        let (Some(&wi), Some(&li)) = (index.get(w.as_str()), index.get(l.as_str())) else {
            return Err(VibeError::invalid("comparisons", format!("unknown item in ({w}, {l})")));
        };
        if wi == li {
            return Err(VibeError::invalid("comparisons", format!("{w} compared with itself")));
        }
        wins[wi] += 1.0;
        losses[li] += 1.0;
        games[(wi, li)] += 1.0;
        games[(li, wi)] += 1.0;
    }
    if let Some(i) = (0..n).find(|&i| wins[i] + losses[i] == 0.0) {
        return Err(VibeError::UnobservedItem(items[i].clone()));
    }
    let components = connected_components(&games);
    if components.len() > 1 {
        return Err(VibeError::Disconnected(
            components
                .into_iter()
                .map(|c| c.into_iter().map(|i| items[i].clone()).collect())
                .collect(),
        ));
    }
    for i in 0..n {
        if wins[i] == 0.0 || losses[i] == 0.0 {
            return Err(VibeError::invalid(
                "comparisons",
                format!(
                    "{} has {} wins and {} losses; strengths have no finite maximum",
                    items[i], wins[i], losses[i]
                ),
            ));
        }
    }
    let mut p = vec![1.0; n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<f64> = (0..n)
            .map(|i| {
                let denom: f64 = (0..n)
                    .filter(|&j| j != i && games[(i, j)] > 0.0)
                    .map(|j| games[(i, j)] / (p[i] + p[j]))
                    .sum();
                wins[i] / denom
            })
            .collect();
        let log_mean = next.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
        for v in next.iter_mut() {
            *v = (v.ln() - log_mean).exp();
        }
        let change = next
            .iter()
            .zip(&p)
            .map(|(a, b)| (a.ln() - b.ln()).abs())
            .fold(0.0, f64::max);
        p = next;
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(BtScores {
        items,
        strengths: p,
        converged,
        iterations,
    })
}

fn connected_components(games: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = games.nrows();
    let mut comp = vec![usize::MAX; n];
    let mut out = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if games[(i, j)] > 0.0 && comp[j] == usize::MAX {
                    comp[j] = id;
                    members.push(j);
                    stack.push(j);
                }
            }
        }
        members.sort_unstable();
        out.push(members);
    }
    out
}

/// `points` evenly spaced points on a circular arc from `(0, 0)` to `(1, 0)`
/// whose midpoint sits at height `sagitta >= 0`; zero gives the straight chord.
pub fn arc_path(sagitta: f64, points: usize) -> Vec<DVector<f64>> {
    let frac = |i: usize| i as f64 / (points - 1) as f64;
    if sagitta == 0.0 {
        return (0..points).map(|i| DVector::from_vec(vec![frac(i), 0.0])).collect();
    }
    let r = (0.25 + sagitta * sagitta) / (2.0 * sagitta);
    let center_y = sagitta - r;
    // angle measured from the upward vertical through the center
    let half = f64::atan2(0.5, r - sagitta);
    (0..points)
        .map(|i| {
            let theta = -half + 2.0 * half * frac(i);
            DVector::from_vec(vec![0.5 + r * theta.sin(), center_y + r * theta.cos()])
        })
        .collect()
}
