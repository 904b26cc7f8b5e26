//! Synthetic token grids with known segment structure.
//!
//! Every image in a set draws its tokens from the same `segments` region
//! prototypes, laid out differently per image, plus a per-image style offset,
//! a smooth positional term and noise. Target features are a fixed smooth
//! nonlinear function of the source features shared by all images in the set.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};
use crate::feature_io::{FeatureGrid, FeatureSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub source_dim: usize,
    pub target_dim: usize,
    pub segments: usize,
    /// Norm scale of the per-image style offset relative to prototype spread.
    pub style: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            source_dim: 32,
            target_dim: 32,
            segments: 4,
            style: 0.5,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(VibeError::invalid("height/width", "must be positive"));
        }
        if self.source_dim == 0 || self.target_dim == 0 {
            return Err(VibeError::invalid("source_dim/target_dim", "must be positive"));
        }
        if self.segments == 0 || self.segments > self.height * self.width {
            return Err(VibeError::invalid("segments", "must lie in [1, height * width]"));
        }
        for (name, v) in [("style", self.style), ("noise", self.noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(VibeError::invalid(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub source: FeatureGrid,
    pub target: FeatureGrid,
    /// Ground-truth region of each token, row-major.
    pub labels: Vec<usize>,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// Region of pixel `(r, c)` under layout `layout`; each layout splits the grid
/// into `k` contiguous parts along a different axis.
fn region(layout: usize, r: usize, c: usize, h: usize, w: usize, k: usize) -> usize {
    let frac = match layout % 4 {
        0 => c as f64 / w as f64,
        1 => r as f64 / h as f64,
        2 => (r as f64 / h as f64 + c as f64 / w as f64) / 2.0,
        _ => 1.0 - c as f64 / w as f64 - 1e-12,
    };
    ((frac * k as f64).floor() as usize).min(k - 1)
}

/// Generates `count` images sharing prototypes and the source-to-target map.
pub fn synth_image_set(spec: &SceneSpec, count: usize) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.source_dim;
    let prototypes = normal_matrix(spec.segments, d, 1.0, &mut rng);
    let positional = normal_matrix(2, d, 0.3, &mut rng);
    let mixing = normal_matrix(d, spec.target_dim, 1.0 / (d as f64).sqrt(), &mut rng);
    let bias = normal_matrix(1, spec.target_dim, 0.1, &mut rng);
    let n = spec.height * spec.width;
    let mut out = Vec::with_capacity(count);
    for img in 0..count {
        let style = normal_matrix(1, d, spec.style, &mut rng);
        let mut labels = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, d);
        for r in 0..spec.height {
            for c in 0..spec.width {
                let p = r * spec.width + c;
                let label = region(img, r, c, spec.height, spec.width, spec.segments);
                labels.push(label);
                let u = r as f64 / spec.height as f64 - 0.5;
                let v = c as f64 / spec.width as f64 - 0.5;
                for j in 0..d {
                    let noise: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                    x[(p, j)] = prototypes[(label, j)]
                        + style[(0, j)]
                        + u * positional[(0, j)]
                        + v * positional[(1, j)]
                        + spec.noise * noise;
                }
            }
        }
        let mut y = &x * &mixing;
        for mut row in y.row_iter_mut() {
            let t = DVector::from_iterator(spec.target_dim, row.iter().copied());
            for (j, v) in row.iter_mut().enumerate() {
                *v = 1.5 * (t[j]).tanh() + bias[(0, j)];
            }
        }
        let id = format!("scene{img}");
        out.push(SyntheticImage {
            source: FeatureGrid::new(id.clone(), spec.height, spec.width, FeatureSpace::Source, x)?,
            target: FeatureGrid::new(id, spec.height, spec.width, FeatureSpace::Target, y)?,
            labels,
        });
    }
    Ok(out)
}
