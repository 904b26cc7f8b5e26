//! Flag kernels over nested eigenvector prefixes and the reference inverse
//! diffusion mapping used to trace geodesics through feature space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};
use crate::spectral::{AffinityGraph, DiffusionMap, Extender};

/// Coarse-to-fine scales used when none are given.
pub const DEFAULT_FLAG_SCALES: [usize; 5] = [4, 8, 16, 32, 64];

/// Strictly increasing prefix lengths `m_1 < ... < m_M`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FlagScales(Vec<usize>);

impl FlagScales {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(VibeError::invalid("scales", "at least one scale is required"));
        }
        if scales[0] == 0 {
            return Err(VibeError::invalid("scales", "scales must be positive"));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VibeError::invalid("scales", format!("must be strictly increasing, got {scales:?}")));
        }
        Ok(Self(scales))
    }

    /// The default scales restricted to `available` columns.
    ///
    /// Falls back to the single scale `{available}` when every default exceeds it.
    pub fn default_for(available: usize) -> Result<Self> {
        Self::clipped(&DEFAULT_FLAG_SCALES, available)
    }

    /// Keeps the scales that fit in `available` columns.
    pub fn clipped(scales: &[usize], available: usize) -> Result<Self> {
        if available == 0 {
            return Err(VibeError::invalid("scales", "no eigenvectors available"));
        }
        let kept: Vec<usize> = scales.iter().copied().filter(|&s| s <= available).collect();
        if kept.is_empty() {
            Self::new(vec![available])
        } else {
            Self::new(kept)
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> usize {
        *self.0.last().expect("non-empty scales")
    }

    pub fn check_available(&self, available: usize) -> Result<()> {
        if self.max() > available {
            return Err(VibeError::invalid(
                "scales",
                format!("largest scale {} exceeds the {available} available eigenvectors", self.max()),
            ));
        }
        Ok(())
    }

    /// Weight of column `j` (0-based) in the averaged kernel: the fraction of
    /// scales whose prefix contains it.
    pub fn column_weights(&self) -> Vec<f64> {
        let count = self.0.len() as f64;
        (0..self.max())
            .map(|j| self.0.iter().filter(|&&s| s > j).count() as f64 / count)
            .collect()
    }
}

impl TryFrom<Vec<usize>> for FlagScales {
    type Error = VibeError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FlagScales> for Vec<usize> {
    fn from(s: FlagScales) -> Self {
        s.0
    }
}

/// Scale-averaged Gram matrix of eigenvector prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagKernel {
    matrix: DMatrix<f64>,
}

impl FlagKernel {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `S = (1/|M|) sum_k Psi^{1:m_k} (Psi^{1:m_k})^T`, computed as
/// `Psi diag(c) Psi^T` with `c` from [`FlagScales::column_weights`].
///
/// Only the lower triangle is accumulated; the upper one is mirrored, so the
/// result is symmetric bit for bit.
pub fn flag_kernel(psi: &DMatrix<f64>, scales: &FlagScales) -> Result<FlagKernel> {
    scales.check_available(psi.ncols())?;
    let c = scales.column_weights();
    let n = psi.nrows();
    let cols = c.len();
    let weighted = DMatrix::from_fn(n, cols, |i, k| psi[(i, k)] * c[k]);
    let mut matrix = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let mut s = 0.0;
            for k in 0..cols {
                s += weighted[(i, k)] * psi[(j, k)];
            }
            matrix[(i, j)] = s;
            matrix[(j, i)] = s;
        }
    }
    Ok(FlagKernel { matrix })
}

/// Step-size and stopping controls for the inverse mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseMapOptions {
    pub max_iters: usize,
    /// Initial step length, in units of the kernel width `sqrt(sigma^2)`.
    pub step: f64,
    /// Upper bound on a single step length, in the same units as `step`.
    pub max_step: f64,
    /// Stop once an accepted step lowers the objective by less than `tol`
    /// times its previous value.
    pub tol: f64,
}

impl Default for InverseMapOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            step: 0.02,
            max_step: 0.05,
            tol: 1e-10,
        }
    }
}

impl InverseMapOptions {
    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(VibeError::invalid("step", format!("must be positive, got {}", self.step)));
        }
        if !(self.max_step >= self.step && self.max_step.is_finite()) {
            return Err(VibeError::invalid(
                "max_step",
                format!("must be finite and at least step = {}, got {}", self.step, self.max_step),
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(VibeError::invalid("tol", format!("must be non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Number of consecutive rejected trial steps after which the solver stops.
pub const MAX_REJECTED_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMapStatus {
    /// Objective decrease fell below tolerance (or the start was already optimal).
    Converged,
    /// No trial step reduced the objective for [`MAX_REJECTED_STEPS`] attempts.
    Stalled,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseMapResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: InverseMapStatus,
}

/// Evaluates inverse-mapping objectives against one diffusion map.
#[derive(Debug, Clone)]
pub struct InverseMapper<'a> {
    extender: Extender<'a>,
    scale: f64,
}

impl<'a> InverseMapper<'a> {
    pub fn new(map: &'a DiffusionMap, graph: &AffinityGraph, training_tokens: &'a DMatrix<f64>) -> Result<Self> {
        if graph.n() != map.n() {
            return Err(VibeError::DimensionMismatch {
                context: "graph and diffusion map",
                expected: map.n(),
                actual: graph.n(),
            });
        }
        let sigma_sq = graph.sigma_sq();
        Ok(Self {
            extender: Extender::new(map, sigma_sq, training_tokens)?,
            scale: sigma_sq.sqrt(),
        })
    }

    pub fn extender(&self) -> &Extender<'a> {
        &self.extender
    }

    /// Diffusion coordinates of an arbitrary point via the out-of-sample extension.
    pub fn coordinates(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.extender.coordinates(x)
    }

    /// `|Psi_t(x) - target|^2` over all non-constant components.
    pub fn point_objective(&self, x: &[f64], target: &DVector<f64>) -> Result<f64> {
        let c = self.coordinates(x)?;
        Ok((c - target).norm_squared())
    }

    /// `(1/|M|) sum_k |Psi_t^{1:m_k}(x) - target_k|^2`.
    ///
    /// A scale `m` covers the first `m` eigenvector columns; the constant one
    /// contributes nothing, so its target holds `m - 1` coordinates.
    pub fn flag_objective(&self, x: &[f64], targets: &[DVector<f64>], scales: &FlagScales) -> Result<f64> {
        let c = self.coordinates(x)?;
        let mut total = 0.0;
        for (t, &m) in targets.iter().zip(scales.as_slice()) {
            let mut s = 0.0;
            for k in 0..(m - 1) {
                let d = c[k] - t[k];
                s += d * d;
            }
            total += s;
        }
        Ok(total / scales.len() as f64)
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.extender.feature_dim() {
            return Err(VibeError::DimensionMismatch {
                context: "inverse-map initial point",
                expected: self.extender.feature_dim(),
                actual: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("inverse-map initial point"));
        }
        Ok(())
    }

    fn check_target(&self, target: &DVector<f64>, expected: usize) -> Result<()> {
        if target.len() != expected {
            return Err(VibeError::DimensionMismatch {
                context: "inverse-map target",
                expected,
                actual: target.len(),
            });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("inverse-map target"));
        }
        Ok(())
    }

    /// Minimizes [`Self::point_objective`] from `init`.
    pub fn solve_point(
        &self,
        target: &DVector<f64>,
        init: &DVector<f64>,
        opts: &InverseMapOptions,
    ) -> Result<InverseMapResult> {
        self.check_target(target, self.extender.map().coordinate_dim())?;
        self.check_point(init)?;
        opts.validate()?;
        self.descend(init, opts, |x| self.point_objective(x, target))
    }

    /// Minimizes [`Self::flag_objective`] from `init`.
    pub fn solve_flag(
        &self,
        targets: &[DVector<f64>],
        scales: &FlagScales,
        init: &DVector<f64>,
        opts: &InverseMapOptions,
    ) -> Result<InverseMapResult> {
        scales.check_available(self.extender.map().m())?;
        if targets.len() != scales.len() {
            return Err(VibeError::DimensionMismatch {
                context: "targets per scale",
                expected: scales.len(),
                actual: targets.len(),
            });
        }
        for (t, &m) in targets.iter().zip(scales.as_slice()) {
            self.check_target(t, m - 1)?;
        }
        self.check_point(init)?;
        opts.validate()?;
        self.descend(init, opts, |x| self.flag_objective(x, targets, scales))
    }

    /// Normalized-gradient descent with central differences and an adaptive
    /// step: accepted steps grow by 1.25 up to `max_step`, rejected ones halve.
    fn descend<F>(&self, init: &DVector<f64>, opts: &InverseMapOptions, f: F) -> Result<InverseMapResult>
    where
        F: Fn(&[f64]) -> Result<f64>,
    {
        let h = 1e-4 * self.scale;
        let mut x = init.clone();
        let mut fx = f(x.as_slice())?;
        if !fx.is_finite() {
            return Err(VibeError::Diverged {
                iteration: 0,
                objective: fx,
            });
        }
        let result = |x: DVector<f64>, objective, iterations, status| {
            Ok(InverseMapResult {
                x,
                objective,
                iterations,
                status,
            })
        };
        if fx == 0.0 {
            return result(x, fx, 0, InverseMapStatus::Converged);
        }
        let mut length = opts.step * self.scale;
        let max_length = opts.max_step * self.scale;
        let mut rejected = 0;
        let mut probe = x.clone();
        let mut grad = DVector::zeros(x.len());
        let mut fresh_gradient = false;
        for iter in 1..=opts.max_iters {
            if !fresh_gradient {
                for d in 0..x.len() {
                    let orig = probe[d];
                    probe[d] = orig + h;
                    let fp = f(probe.as_slice())?;
                    probe[d] = orig - h;
                    let fm = f(probe.as_slice())?;
                    probe[d] = orig;
                    grad[d] = (fp - fm) / (2.0 * h);
                }
                fresh_gradient = true;
            }
            let gnorm = grad.norm();
            if !gnorm.is_finite() {
                return Err(VibeError::Diverged {
                    iteration: iter,
                    objective: fx,
                });
            }
            if gnorm == 0.0 {
                return result(x, fx, iter - 1, InverseMapStatus::Converged);
            }
            let trial = &x - &grad * (length / gnorm);
            let ft = match f(trial.as_slice()) {
                Ok(v) => v,
                Err(VibeError::DegreeUnderflow { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if ft.is_nan() {
                return Err(VibeError::Diverged {
                    iteration: iter,
                    objective: ft,
                });
            }
            if ft < fx {
                let decrease = fx - ft;
                x = trial;
                probe.copy_from(&x);
                let prev = fx;
                fx = ft;
                fresh_gradient = false;
                rejected = 0;
                length = (length * 1.25).min(max_length);
                if decrease <= opts.tol * prev || fx == 0.0 {
                    return result(x, fx, iter, InverseMapStatus::Converged);
                }
            } else {
                rejected += 1;
                length *= 0.5;
                if rejected >= MAX_REJECTED_STEPS {
                    return result(x, fx, iter, InverseMapStatus::Stalled);
                }
            }
        }
        result(x, fx, opts.max_iters, InverseMapStatus::MaxIters)
    }
}

/// Finds `x` whose diffusion coordinates approach `target` (all non-constant components).
pub fn inverse_map_point(
    map: &DiffusionMap,
    graph: &AffinityGraph,
    training_tokens: &DMatrix<f64>,
    target: &DVector<f64>,
    init: &DVector<f64>,
    opts: &InverseMapOptions,
) -> Result<InverseMapResult> {
    InverseMapper::new(map, graph, training_tokens)?.solve_point(target, init, opts)
}

/// Scale-averaged variant of [`inverse_map_point`]; `targets_per_scale[k]`
/// holds the first `scales[k] - 1` diffusion coordinates.
pub fn inverse_map_flag(
    map: &DiffusionMap,
    graph: &AffinityGraph,
    training_tokens: &DMatrix<f64>,
    targets_per_scale: &[DVector<f64>],
    scales: &FlagScales,
    init: &DVector<f64>,
    opts: &InverseMapOptions,
) -> Result<InverseMapResult> {
    InverseMapper::new(map, graph, training_tokens)?.solve_flag(targets_per_scale, scales, init, opts)
}

/// Splits one full coordinate vector into the per-scale prefixes.
pub fn prefix_targets(full: &DVector<f64>, scales: &FlagScales) -> Vec<DVector<f64>> {
    scales
        .as_slice()
        .iter()
        .map(|&m| full.rows(0, m - 1).into_owned())
        .collect()
}

/// Traces `gamma(alpha)` for `n_steps` equally spaced `alpha` in `[0, 1]`.
///
/// Endpoints are returned unchanged. Interior points invert the linear
/// interpolation of the endpoint coordinates, each starting from the previous
/// point.
#[allow(clippy::too_many_arguments)]
pub fn geodesic_path_oracle(
    map: &DiffusionMap,
    graph: &AffinityGraph,
    training_tokens: &DMatrix<f64>,
    x_a: &DVector<f64>,
    x_b: &DVector<f64>,
    n_steps: usize,
    scales: &FlagScales,
    opts: &InverseMapOptions,
) -> Result<Vec<DVector<f64>>> {
    if n_steps < 2 {
        return Err(VibeError::invalid("n_steps", format!("need at least 2, got {n_steps}")));
    }
    let mapper = InverseMapper::new(map, graph, training_tokens)?;
    scales.check_available(map.m())?;
    let c_a = mapper.coordinates(x_a.as_slice())?;
    let c_b = mapper.coordinates(x_b.as_slice())?;
    let mut path = Vec::with_capacity(n_steps);
    path.push(x_a.clone());
    for i in 1..n_steps - 1 {
        let alpha = i as f64 / (n_steps - 1) as f64;
        let target = &c_a * (1.0 - alpha) + &c_b * alpha;
        let targets = prefix_targets(&target, scales);
        let init = path.last().expect("path has a start").clone();
        let solved = mapper
            .solve_flag(&targets, scales, &init, opts)
            .map_err(|e| VibeError::PathPoint {
                alpha,
                source: Box::new(e),
            })?;
        path.push(solved.x);
    }
    path.push(x_b.clone());
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_io::{synth_point_cloud, CloudKind};
    use crate::spectral::{build_affinity, solve_diffusion_map};

    #[test]
    fn scales_validate_ordering() {
        assert!(FlagScales::new(vec![]).is_err());
        assert!(FlagScales::new(vec![0, 2]).is_err());
        assert!(FlagScales::new(vec![4, 4]).is_err());
        assert!(FlagScales::new(vec![8, 4]).is_err());
        assert_eq!(FlagScales::new(vec![1, 3]).unwrap().max(), 3);
    }

    #[test]
    fn default_scales_clip_to_available_columns() {
        assert_eq!(FlagScales::default_for(100).unwrap().as_slice(), &[4, 8, 16, 32, 64]);
        assert_eq!(FlagScales::default_for(20).unwrap().as_slice(), &[4, 8, 16]);
        assert_eq!(FlagScales::default_for(3).unwrap().as_slice(), &[3]);
    }

    #[test]
    fn column_weights_count_covering_scales() {
        let s = FlagScales::new(vec![1, 2, 4]).unwrap();
        let w = s.column_weights();
        assert_eq!(w.len(), 4);
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[3] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_scale_is_plain_gram() {
        let psi = DMatrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let s = flag_kernel(&psi, &FlagScales::new(vec![3]).unwrap()).unwrap();
        let gram = &psi * psi.transpose();
        assert!((s.matrix() - gram).amax() < 1e-14);
    }

    #[test]
    fn hand_expanded_two_scale_kernel() {
        let psi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let s = flag_kernel(&psi, &FlagScales::new(vec![1, 2]).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.matrix(), &expected);
    }

    #[test]
    fn kernel_rejects_oversized_scale() {
        let psi = DMatrix::zeros(4, 2);
        assert!(flag_kernel(&psi, &FlagScales::new(vec![3]).unwrap()).is_err());
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let psi = DMatrix::from_fn(7, 5, |i, j| ((i * 7 + j * 3) as f64).sin());
        let s = flag_kernel(&psi, &FlagScales::new(vec![2, 3, 5]).unwrap()).unwrap();
        assert_eq!(s.matrix(), &s.matrix().transpose());
    }

    fn circle_setup(n: usize) -> (DMatrix<f64>, AffinityGraph, DiffusionMap) {
        let x = synth_point_cloud(CloudKind::Circle, n, 0.0, 3).unwrap().into_tokens();
        let g = build_affinity(&x, Some(0.1)).unwrap();
        let map = solve_diffusion_map(&g, 6, 1.0).unwrap();
        (x, g, map)
    }

    #[test]
    fn training_point_target_needs_no_iterations() {
        let (x, g, map) = circle_setup(40);
        let mapper = InverseMapper::new(&map, &g, &x).unwrap();
        let xi = x.row(5).transpose();
        let target = mapper.coordinates(xi.as_slice()).unwrap();
        let r = mapper.solve_point(&target, &xi, &InverseMapOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.x, xi);
        let scales = FlagScales::new(vec![2, 4, 6]).unwrap();
        let f = mapper
            .flag_objective(xi.as_slice(), &prefix_targets(&target, &scales), &scales)
            .unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn perturbed_start_recovers_training_point() {
        let (x, g, map) = circle_setup(40);
        let mapper = InverseMapper::new(&map, &g, &x).unwrap();
        let xi = x.row(11).transpose();
        let target = mapper.coordinates(xi.as_slice()).unwrap();
        let init = &xi + DVector::from_vec(vec![0.03, -0.02]);
        let r = mapper.solve_point(&target, &init, &InverseMapOptions::default()).unwrap();
        assert!((&r.x - &xi).norm() <= 0.05 * 2.0, "{}", (&r.x - &xi).norm());
    }

    #[test]
    fn single_scale_flag_matches_point_solver() {
        let (x, g, map) = circle_setup(40);
        let mapper = InverseMapper::new(&map, &g, &x).unwrap();
        let target = (mapper.coordinates(x.row(0).transpose().as_slice()).unwrap()
            + mapper.coordinates(x.row(6).transpose().as_slice()).unwrap())
            * 0.5;
        let init = x.row(0).transpose();
        let opts = InverseMapOptions::default();
        let a = mapper.solve_point(&target, &init, &opts).unwrap();
        let scales = FlagScales::new(vec![map.m()]).unwrap();
        let b = mapper
            .solve_flag(&prefix_targets(&target, &scales), &scales, &init, &opts)
            .unwrap();
        assert!((a.x - b.x).amax() <= 1e-8);
    }

    #[test]
    fn solver_validates_inputs() {
        let (x, g, map) = circle_setup(20);
        let mapper = InverseMapper::new(&map, &g, &x).unwrap();
        let init = x.row(0).transpose();
        let bad_target = DVector::zeros(2);
        assert!(mapper.solve_point(&bad_target, &init, &InverseMapOptions::default()).is_err());
        let target = DVector::zeros(map.coordinate_dim());
        let opts = InverseMapOptions {
            step: 0.0,
            ..Default::default()
        };
        assert!(mapper.solve_point(&target, &init, &opts).is_err());
        assert!(mapper
            .solve_point(&target, &DVector::zeros(3), &InverseMapOptions::default())
            .is_err());
    }

    #[test]
    fn identical_endpoints_give_constant_path() {
        let (x, g, map) = circle_setup(30);
        let a = x.row(4).transpose();
        let scales = FlagScales::new(vec![2, 4]).unwrap();
        let path = geodesic_path_oracle(&map, &g, &x, &a, &a, 5, &scales, &Default::default()).unwrap();
        assert_eq!(path.len(), 5);
        for p in &path {
            assert_eq!(p, &a);
        }
        assert!(geodesic_path_oracle(&map, &g, &x, &a, &a, 1, &scales, &Default::default()).is_err());
    }
}
