//! Gaussian affinity graphs and their diffusion maps.
//!
//! The graph Laplacian `L = D - W` is paired with the degree matrix `D` in the
//! generalized problem `L psi = lambda D psi`. It is solved through the
//! symmetric normalization `D^{-1/2} L D^{-1/2}` and back-transformed, which
//! makes the returned eigenvectors D-orthonormal. The random-walk operator
//! `P = D^{-1} W` shares the eigenvectors with eigenvalues `mu = 1 - lambda`;
//! diffusion coordinates are `mu^t psi` over the non-constant components.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VibeError};
use crate::linalg::{fix_column_signs, sq_dist_rows, sq_dist_to_row, symmetric_eigen};

/// Default number of Nystrom anchors.
pub const DEFAULT_ANCHORS: usize = 500;
/// Default diffusion time.
pub const DEFAULT_DIFFUSION_TIME: f64 = 1.0;
/// Relative eigen-residual accepted from the dense solver.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Components whose transition eigenvalue falls below this are skipped by the extension.
pub const EXTENSION_MIN_EIGENVALUE: f64 = 1e-8;
/// Degrees below this are treated as an underflow during extension.
pub const MIN_DEGREE: f64 = 1e-300;
/// Relative cutoff for the anchor-kernel pseudo-inverse.
pub const PINV_RCOND: f64 = 1e-10;

/// Dense Gaussian affinity graph over `n` tokens.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    weights: DMatrix<f64>,
    degrees: DVector<f64>,
    sigma_sq: f64,
}

impl AffinityGraph {
    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// `L = D - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.degrees) - &self.weights
    }
}

/// Sum of per-feature population variances over all tokens.
pub fn default_sigma_sq(tokens: &DMatrix<f64>) -> Result<f64> {
    let n = tokens.nrows();
    if n == 0 {
        return Err(VibeError::invalid("tokens", "no tokens"));
    }
    let mut total = 0.0;
    for col in tokens.column_iter() {
        let mean = col.sum() / n as f64;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    }
    if total <= 0.0 {
        return Err(VibeError::ZeroVariance);
    }
    Ok(total)
}

/// Gaussian kernel value `exp(-d^2 / sigma^2)`.
#[inline]
pub fn gaussian(sq_dist: f64, sigma_sq: f64) -> f64 {
    (-sq_dist / sigma_sq).exp()
}

/// Builds `W_ij = exp(-|x_i - x_j|^2 / sigma^2)` and its degrees.
///
/// Without an explicit `sigma_sq` the kernel width matches the global feature
/// variance (see [`default_sigma_sq`]).
pub fn build_affinity(tokens: &DMatrix<f64>, sigma_sq: Option<f64>) -> Result<AffinityGraph> {
    let n = tokens.nrows();
    if n < 2 {
        return Err(VibeError::invalid("tokens", format!("need at least 2 tokens, got {n}")));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("affinity tokens"));
    }
    let sigma_sq = match sigma_sq {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(VibeError::invalid("sigma_sq", format!("must be positive, got {s}"))),
        None => default_sigma_sq(tokens)?,
    };
    let mut weights = DMatrix::from_element(n, n, 1.0);
    for j in 0..n {
        for i in (j + 1)..n {
            let w = gaussian(sq_dist_rows(tokens, i, tokens, j), sigma_sq);
            if w <= 0.0 {
                return Err(VibeError::AffinityUnderflow { i, j, sigma_sq });
            }
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
    }
    let degrees = DVector::from_iterator(n, weights.column_iter().map(|c| c.sum()));
    Ok(AffinityGraph {
        weights,
        degrees,
        sigma_sq,
    })
}

/// Generalized eigenpairs of a graph Laplacian plus a diffusion time.
#[derive(Debug, Clone)]
pub struct DiffusionMap {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    degrees: DVector<f64>,
    t: f64,
    d_orthonormal: bool,
}

impl DiffusionMap {
    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    /// Number of eigenpairs, including the trivial one.
    pub fn m(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Laplacian eigenvalues `lambda`, ascending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenvectors `psi`, one per column.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn d_orthonormal(&self) -> bool {
        self.d_orthonormal
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.t = t;
        self
    }

    /// Random-walk eigenvalues `mu = 1 - lambda`.
    pub fn transition_eigenvalues(&self) -> DVector<f64> {
        self.eigenvalues.map(|l| 1.0 - l)
    }

    /// Per-component weights `mu_k^t` for the non-constant components.
    pub fn coordinate_weights(&self) -> DVector<f64> {
        let t = self.t;
        DVector::from_iterator(
            self.m().saturating_sub(1),
            self.eigenvalues.iter().skip(1).map(|l| {
                let mu = 1.0 - l;
                mu.signum() * mu.abs().powf(t)
            }),
        )
    }

    /// Number of diffusion coordinates (the trivial component is excluded).
    pub fn coordinate_dim(&self) -> usize {
        self.m().saturating_sub(1)
    }

    /// Maps a row of eigenvector values to diffusion coordinates.
    pub fn coordinates_from_psi(&self, psi_row: &DVector<f64>) -> DVector<f64> {
        let w = self.coordinate_weights();
        DVector::from_iterator(w.len(), w.iter().enumerate().map(|(k, wk)| wk * psi_row[k + 1]))
    }

    /// Diffusion coordinates of training point `i`.
    pub fn coordinates(&self, i: usize) -> DVector<f64> {
        let row = self.eigenvectors.row(i).transpose();
        self.coordinates_from_psi(&row)
    }

    /// All diffusion coordinates, `n x (m - 1)`.
    pub fn embedding(&self) -> DMatrix<f64> {
        let w = self.coordinate_weights();
        DMatrix::from_fn(self.n(), w.len(), |i, k| w[k] * self.eigenvectors[(i, k + 1)])
    }

    /// `D^{1/2} psi`: the eigenvectors of the normalized affinity, with
    /// Euclidean-orthonormal columns.
    pub fn orthonormal_basis(&self) -> DMatrix<f64> {
        let mut u = self.eigenvectors.clone();
        for (i, d) in self.degrees.iter().enumerate() {
            let s = d.sqrt();
            u.row_mut(i).scale_mut(s);
        }
        u
    }

    /// Keeps the first `m` eigenpairs.
    pub fn truncated(&self, m: usize) -> DiffusionMap {
        let m = m.min(self.m());
        DiffusionMap {
            eigenvalues: self.eigenvalues.rows(0, m).into_owned(),
            eigenvectors: self.eigenvectors.columns(0, m).into_owned(),
            degrees: self.degrees.clone(),
            t: self.t,
            d_orthonormal: self.d_orthonormal,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(VibeError::invalid("t", format!("diffusion time must be non-negative, got {t}")));
    }
    Ok(())
}

/// Solves `L psi = lambda D psi` for the `m` smallest eigenvalues.
///
/// Columns are D-orthonormal and sign-fixed so that the largest-magnitude entry
/// is positive. Every returned pair is verified against the residual bound
/// `|L psi - lambda D psi| <= 1e-8 |D psi|`.
pub fn solve_diffusion_map(graph: &AffinityGraph, m: usize, t: f64) -> Result<DiffusionMap> {
    let n = graph.n();
    if m == 0 || m > n {
        return Err(VibeError::invalid("m", format!("need 1 <= m <= {n}, got {m}")));
    }
    check_time(t)?;
    let inv_sqrt: Vec<f64> = graph.degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lsym = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let a = graph.weights[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
            let v = if i == j { 1.0 - a } else { -a };
            lsym[(i, j)] = v;
            lsym[(j, i)] = v;
        }
    }
    let (values, vectors) = symmetric_eigen(&lsym);
    let eigenvalues = values.rows(0, m).into_owned();
    let mut psi = DMatrix::from_fn(n, m, |i, k| vectors[(i, k)] * inv_sqrt[i]);
    fix_column_signs(&mut psi);

    let laplacian = graph.laplacian();
    for k in 0..m {
        let col = psi.column(k);
        let d_psi = col.component_mul(&graph.degrees);
        let residual = (&laplacian * col - eigenvalues[k] * &d_psi).norm();
        let scale = d_psi.norm();
        let rel = residual / scale;
        if !(rel <= RESIDUAL_TOL) {
            return Err(VibeError::EigenNonConvergence {
                component: k,
                residual: rel,
            });
        }
    }
    Ok(DiffusionMap {
        eigenvalues,
        eigenvectors: psi,
        degrees: graph.degrees.clone(),
        t,
        d_orthonormal: true,
    })
}

/// A diffusion map computed from a Nystrom-approximated kernel.
#[derive(Debug, Clone)]
pub struct NystromMap {
    pub map: DiffusionMap,
    /// Sorted anchor indices into the token matrix.
    pub anchors: Vec<usize>,
    pub sigma_sq: f64,
    /// Anchor-kernel eigen-directions discarded by the pseudo-inverse.
    pub dropped_directions: usize,
}

impl NystromMap {
    /// True when the anchor kernel was too ill-conditioned to invert exactly.
    pub fn used_pseudo_inverse(&self) -> bool {
        self.dropped_directions > 0
    }
}

/// Uniform anchor sample without replacement, sorted.
pub fn sample_anchors(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Low-rank factor `B` with `W_NS W_SS^+ W_NS^T = B B^T`.
fn nystrom_factor(
    tokens: &DMatrix<f64>,
    anchors: &[usize],
    sigma_sq: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let n = tokens.nrows();
    let s = anchors.len();
    let mut wss = DMatrix::from_element(s, s, 1.0);
    for b in 0..s {
        for a in (b + 1)..s {
            let w = gaussian(sq_dist_rows(tokens, anchors[a], tokens, anchors[b]), sigma_sq);
            wss[(a, b)] = w;
            wss[(b, a)] = w;
        }
    }
    let wns = DMatrix::from_fn(n, s, |i, a| gaussian(sq_dist_rows(tokens, i, tokens, anchors[a]), sigma_sq));
    let (vals, vecs) = symmetric_eigen(&wss);
    let top = vals.iter().cloned().fold(0.0_f64, f64::max);
    if top <= 0.0 {
        return Err(VibeError::NystromDegenerate("anchor kernel has no positive spectrum".into()));
    }
    let keep: Vec<usize> = (0..s).filter(|&k| vals[k] > PINV_RCOND * top).collect();
    let dropped = s - keep.len();
    let mut proj = DMatrix::zeros(s, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let scale = 1.0 / vals[k].sqrt();
        proj.set_column(c, &(vecs.column(k) * scale));
    }
    Ok((wns * proj, dropped))
}

/// The approximated kernel `W_NS W_SS^+ W_NS^T` for a given anchor set.
pub fn nystrom_kernel(tokens: &DMatrix<f64>, sigma_sq: f64, anchors: &[usize]) -> Result<DMatrix<f64>> {
    let (b, _) = nystrom_factor(tokens, anchors, sigma_sq)?;
    Ok(&b * b.transpose())
}

/// Diffusion map of the Nystrom kernel `W~ = W_NS W_SS^{-1} W_NS^T` built from
/// `anchors` uniformly sampled tokens.
///
/// The eigenpairs solve `(D~ - W~) psi = lambda D~ psi` exactly for the
/// approximated kernel, at `O(n S^2)` cost.
pub fn nystrom_diffusion_map(
    tokens: &DMatrix<f64>,
    sigma_sq: Option<f64>,
    anchors: usize,
    m: usize,
    t: f64,
    seed: u64,
) -> Result<NystromMap> {
    let n = tokens.nrows();
    if anchors == 0 || anchors > n {
        return Err(VibeError::invalid("anchors", format!("need 1 <= S <= {n}, got {anchors}")));
    }
    if m == 0 || m > anchors {
        return Err(VibeError::invalid("m", format!("need 1 <= m <= S = {anchors}, got {m}")));
    }
    check_time(t)?;
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("nystrom tokens"));
    }
    let sigma_sq = match sigma_sq {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(VibeError::invalid("sigma_sq", format!("must be positive, got {s}"))),
        None => default_sigma_sq(tokens)?,
    };
    let anchor_idx = sample_anchors(n, anchors, seed);
    let (factor, dropped) = nystrom_factor(tokens, &anchor_idx, sigma_sq)?;
    let rank = factor.ncols();

    // degrees of the approximated kernel: W~ 1 = B (B^T 1)
    let col_sums = DVector::from_iterator(rank, factor.column_iter().map(|c| c.sum()));
    let degrees = &factor * col_sums;
    if let Some(i) = degrees.iter().position(|d| !(*d > 0.0)) {
        return Err(VibeError::NystromDegenerate(format!(
            "approximated degree of token {i} is {:e}",
            degrees[i]
        )));
    }
    let inv_sqrt = degrees.map(|d| 1.0 / d.sqrt());
    let mut b = factor;
    for (i, s) in inv_sqrt.iter().enumerate() {
        b.row_mut(i).scale_mut(*s);
    }
    // D^{-1/2} W~ D^{-1/2} = B B^T; its leading eigenvectors come from B^T B.
    let gram = b.transpose() * &b;
    let (vals, vecs) = symmetric_eigen(&gram);
    let top = vals.iter().cloned().fold(0.0_f64, f64::max);
    let mut eigenvalues = DVector::zeros(m);
    let mut u = DMatrix::zeros(n, m);
    for k in 0..m {
        if k >= rank {
            return Err(VibeError::NystromDegenerate(format!(
                "approximated kernel has rank {rank} < m = {m}"
            )));
        }
        let idx = rank - 1 - k;
        let mu = vals[idx];
        if !(mu > 1e-12 * top) {
            return Err(VibeError::NystromDegenerate(format!(
                "approximated kernel has numerical rank {k} < m = {m}"
            )));
        }
        eigenvalues[k] = 1.0 - mu;
        let col = &b * vecs.column(idx) / mu.sqrt();
        u.set_column(k, &col);
    }
    let mut psi = u;
    for (i, s) in inv_sqrt.iter().enumerate() {
        psi.row_mut(i).scale_mut(*s);
    }
    fix_column_signs(&mut psi);
    Ok(NystromMap {
        map: DiffusionMap {
            eigenvalues,
            eigenvectors: psi,
            degrees,
            t,
            d_orthonormal: true,
        },
        anchors: anchor_idx,
        sigma_sq,
        dropped_directions: dropped,
    })
}

/// Out-of-sample eigenvector values at `x_new`:
/// `psi_k(x) = sum_j w(x, x_j) psi_k(j) / ((1 - lambda_k) deg(x))`.
///
/// Components with `1 - lambda_k < 1e-8` are reported as zero.
pub fn nystrom_extension(
    map: &DiffusionMap,
    graph: &AffinityGraph,
    training_tokens: &DMatrix<f64>,
    x_new: &DVector<f64>,
) -> Result<DVector<f64>> {
    Extender::new(map, graph.sigma_sq(), training_tokens)?.psi(x_new.as_slice())
}

/// Reusable out-of-sample evaluator for one map.
#[derive(Debug, Clone)]
pub struct Extender<'a> {
    map: &'a DiffusionMap,
    tokens: &'a DMatrix<f64>,
    sigma_sq: f64,
    inv_mu: Vec<f64>,
}

impl<'a> Extender<'a> {
    pub fn new(map: &'a DiffusionMap, sigma_sq: f64, tokens: &'a DMatrix<f64>) -> Result<Self> {
        if tokens.nrows() != map.n() {
            return Err(VibeError::DimensionMismatch {
                context: "extension training tokens",
                expected: map.n(),
                actual: tokens.nrows(),
            });
        }
        let inv_mu = map
            .eigenvalues
            .iter()
            .map(|l| {
                let mu = 1.0 - l;
                if mu < EXTENSION_MIN_EIGENVALUE {
                    0.0
                } else {
                    1.0 / mu
                }
            })
            .collect();
        Ok(Self {
            map,
            tokens,
            sigma_sq,
            inv_mu,
        })
    }

    pub fn map(&self) -> &DiffusionMap {
        self.map
    }

    pub fn feature_dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Raw eigenvector values `psi_k(x)` for all `m` components.
    pub fn psi(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.tokens.ncols() {
            return Err(VibeError::DimensionMismatch {
                context: "extension query dimension",
                expected: self.tokens.ncols(),
                actual: x.len(),
            });
        }
        let n = self.tokens.nrows();
        let m = self.map.m();
        let psi = &self.map.eigenvectors;
        let mut acc = vec![0.0; m];
        let mut degree = 0.0;
        for j in 0..n {
            let w = gaussian(sq_dist_to_row(x, self.tokens, j), self.sigma_sq);
            if w == 0.0 {
                continue;
            }
            degree += w;
            for (k, a) in acc.iter_mut().enumerate() {
                *a += w * psi[(j, k)];
            }
        }
        if !(degree >= MIN_DEGREE) {
            return Err(VibeError::DegreeUnderflow { degree });
        }
        Ok(DVector::from_iterator(
            m,
            acc.iter().zip(&self.inv_mu).map(|(a, im)| a * im / degree),
        ))
    }

    /// Diffusion coordinates `mu_k^t psi_k(x)` over the non-constant components.
    pub fn coordinates(&self, x: &[f64]) -> Result<DVector<f64>> {
        let psi = self.psi(x)?;
        Ok(self.map.coordinates_from_psi(&psi))
    }
}

/// Euclidean distance between the diffusion coordinates of points `i` and `j`.
pub fn diffusion_distance(map: &DiffusionMap, i: usize, j: usize) -> f64 {
    let w = map.coordinate_weights();
    let mut s = 0.0;
    for (k, wk) in w.iter().enumerate() {
        let d = wk * (map.eigenvectors[(i, k + 1)] - map.eigenvectors[(j, k + 1)]);
        s += d * d;
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::{synth_point_cloud, CloudKind};

    fn cloud(kind: CloudKind, n: usize, noise: f64, seed: u64) -> DMatrix<f64> {
        synth_point_cloud(kind, n, noise, seed).unwrap().into_tokens()
    }

    #[test]
    fn identical_points_give_unit_weights() {
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.3, 0.4]);
        let g = build_affinity(&x, Some(1.0)).unwrap();
        assert_eq!(g.weights(), &DMatrix::from_element(2, 2, 1.0));
        assert_eq!(g.degrees().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn default_sigma_matches_global_variance() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = build_affinity(&x, None).unwrap();
        assert_eq!(g.sigma_sq(), 0.25);
        assert!((g.weights()[(0, 1)] - (-4.0f64).exp()).abs() < 1e-15);
        assert!((g.weights()[(0, 1)] - 0.018316).abs() < 1e-6);
    }

    #[test]
    fn default_sigma_rejects_identical_tokens() {
        let x = DMatrix::from_element(5, 3, 2.0);
        assert!(matches!(build_affinity(&x, None), Err(VibeError::ZeroVariance)));
    }

    #[test]
    fn rejects_non_finite_and_tiny_inputs() {
        let mut x = DMatrix::from_element(3, 2, 0.0);
        x[(1, 1)] = f64::INFINITY;
        assert!(build_affinity(&x, Some(1.0)).is_err());
        assert!(build_affinity(&DMatrix::zeros(1, 2), Some(1.0)).is_err());
        assert!(build_affinity(&DMatrix::zeros(3, 2), Some(-1.0)).is_err());
    }

    #[test]
    fn underflowing_kernel_is_reported() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 100.0]);
        assert!(matches!(
            build_affinity(&x, Some(1.0)),
            Err(VibeError::AffinityUnderflow { .. })
        ));
    }

    #[test]
    fn weights_symmetric_and_degrees_exact() {
        let x = cloud(CloudKind::SwissRoll, 60, 0.1, 4);
        let g = build_affinity(&x, None).unwrap();
        for i in 0..60 {
            assert_eq!(g.weights()[(i, i)], 1.0);
            for j in 0..60 {
                assert_eq!(g.weights()[(i, j)].to_bits(), g.weights()[(j, i)].to_bits());
                assert!(g.weights()[(i, j)] > 0.0);
            }
            let row_sum: f64 = g.weights().row(i).iter().sum();
            assert!((row_sum - g.degrees()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn trivial_component_is_constant() {
        let x = cloud(CloudKind::TwoArcs, 30, 0.05, 2);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 5, 1.0).unwrap();
        assert!(map.eigenvalues()[0].abs() <= 1e-10);
        let c = map.eigenvectors().column(0);
        let mean = c.mean();
        assert!(mean > 0.0);
        for v in c.iter() {
            assert!(((v - mean) / mean).abs() < 1e-8);
        }
    }

    #[test]
    fn eigenvectors_are_d_orthonormal() {
        let x = cloud(CloudKind::Circle, 16, 0.1, 8);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 16, 1.0).unwrap();
        let psi = map.eigenvectors();
        let gram = psi.transpose() * DMatrix::from_diagonal(g.degrees()) * psi;
        assert!((gram - DMatrix::identity(16, 16)).amax() < 1e-8);
        let u = map.orthonormal_basis();
        assert!((u.transpose() * &u - DMatrix::identity(16, 16)).amax() < 1e-8);
        for w in map.eigenvalues().as_slice().windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn full_spectrum_residuals_are_small() {
        let x = cloud(CloudKind::SwissRoll, 40, 0.2, 1);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 40, 1.0).unwrap();
        let l = g.laplacian();
        let mut total = 0.0;
        for k in 0..40 {
            let col = map.eigenvectors().column(k);
            total += (&l * col - map.eigenvalues()[k] * col.component_mul(g.degrees())).norm();
        }
        assert!(total <= 1e-7, "sum of residuals {total}");
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let x = cloud(CloudKind::TwoArcs, 24, 0.1, 3);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 6, 1.0).unwrap();
        for col in map.eigenvectors().column_iter() {
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }

    #[test]
    fn solve_validates_m_and_t() {
        let x = cloud(CloudKind::Circle, 8, 0.0, 0);
        let g = build_affinity(&x, None).unwrap();
        assert!(solve_diffusion_map(&g, 0, 1.0).is_err());
        assert!(solve_diffusion_map(&g, 9, 1.0).is_err());
        assert!(solve_diffusion_map(&g, 3, -1.0).is_err());
    }

    #[test]
    fn distance_is_symmetric_and_zero_on_diagonal() {
        let x = cloud(CloudKind::TwoArcs, 20, 0.1, 9);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 8, 2.0).unwrap();
        for i in 0..20 {
            assert_eq!(diffusion_distance(&map, i, i), 0.0);
            for j in 0..20 {
                assert_eq!(diffusion_distance(&map, i, j), diffusion_distance(&map, j, i));
            }
        }
    }

    #[test]
    fn circle_adjacent_distances_are_equal() {
        let x = cloud(CloudKind::Circle, 8, 0.0, 21);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 8, 1.0).unwrap();
        let d0 = diffusion_distance(&map, 0, 1);
        for i in 1..8 {
            let d = diffusion_distance(&map, i, (i + 1) % 8);
            assert!((d - d0).abs() < 1e-8, "{d} vs {d0}");
        }
    }

    #[test]
    fn extension_reproduces_training_rows() {
        let x = cloud(CloudKind::TwoArcs, 40, 0.05, 6);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 6, 1.0).unwrap();
        for i in [0, 7, 33] {
            let row = x.row(i).transpose();
            let ext = nystrom_extension(&map, &g, &x, &row).unwrap();
            let truth = map.eigenvectors().row(i).transpose();
            assert!((&ext - &truth).norm() <= 0.05 * truth.norm());
        }
    }

    #[test]
    fn extension_at_circle_centre_cancels() {
        let x = cloud(CloudKind::Circle, 16, 0.0, 5);
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 4, 1.0).unwrap();
        let centre = DVector::from_vec(vec![x.column(0).mean(), x.column(1).mean()]);
        let a = nystrom_extension(&map, &g, &x, &centre).unwrap();
        let b = nystrom_extension(&map, &g, &x, &centre).unwrap();
        assert_eq!(a, b);
        assert!(a[1].abs() < 1e-6 && a[2].abs() < 1e-6);
    }

    #[test]
    fn extension_reports_underflow() {
        let x = cloud(CloudKind::Circle, 8, 0.0, 5);
        let g = build_affinity(&x, Some(0.01)).unwrap();
        let map = solve_diffusion_map(&g, 3, 1.0).unwrap();
        let far = DVector::from_vec(vec![1e3, 1e3]);
        assert!(matches!(
            nystrom_extension(&map, &g, &x, &far),
            Err(VibeError::DegreeUnderflow { .. })
        ));
    }

    #[test]
    fn nystrom_validates_arguments() {
        let x = cloud(CloudKind::Circle, 20, 0.1, 5);
        assert!(nystrom_diffusion_map(&x, None, 0, 1, 1.0, 0).is_err());
        assert!(nystrom_diffusion_map(&x, None, 21, 1, 1.0, 0).is_err());
        assert!(nystrom_diffusion_map(&x, None, 5, 6, 1.0, 0).is_err());
    }

    #[test]
    fn nystrom_first_vector_is_constant() {
        let x = cloud(CloudKind::SwissRoll, 200, 0.1, 5);
        let ny = nystrom_diffusion_map(&x, None, 50, 1, 1.0, 3).unwrap();
        let c = ny.map.eigenvectors().column(0);
        let mean = c.mean();
        for v in c.iter() {
            assert!(((v - mean) / mean).abs() < 1e-6);
        }
        assert_eq!(ny.anchors.len(), 50);
        let again = nystrom_diffusion_map(&x, None, 50, 1, 1.0, 3).unwrap();
        assert_eq!(ny.map.eigenvectors(), again.map.eigenvectors());
    }
}
