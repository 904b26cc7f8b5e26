//! End-to-end blend paths: joint graph, diffusion map, training, matching and
//! straight-line interpolation in the learned latent space.
//!
//! Every entry point follows the same recipe. The source grids are stacked
//! into one token matrix (identical grids are stacked once), its diffusion
//! eigenvectors define the encoder's target kernel, the encoder/decoder pair is
//! trained, and segment correspondences give a per-token latent displacement.
//! Paths are `z_A + alpha * delta`, decoded token by token.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::correspondence::{broadcast_rows, correspond, segment_tokens, Correspondence, ImageTokens, Segmentation};
use crate::error::{Result, VibeError};
use crate::feature_io::{read_feature_file, write_feature_file, FeatureGrid, FeatureSpace};
use crate::flag::FlagScales;
use crate::linalg::vstack;
use crate::model::{filter_negative, kernel_basis, train_vibe_space, FilteredBasis, TrainConfig, VibeSpaceModel};
use crate::spectral::{build_affinity, nystrom_diffusion_map, solve_diffusion_map, DiffusionMap, Extender};

/// Interpolation weights outside this range are rejected.
pub const ALPHA_RANGE: (f64, f64) = (-0.5, 2.0);
pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything a blend run needs besides its inputs.
///
/// `train.seed` seeds training, anchor sampling and segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendConfig {
    pub train: TrainConfig,
    /// Flag scales; `None` keeps the defaults that fit the token count.
    pub scales: Option<FlagScales>,
    /// Diffusion time.
    pub t: f64,
    /// Segments per image for correspondence.
    pub k: usize,
    /// Token count above which the diffusion map uses this many Nystrom anchors.
    pub anchors: usize,
    /// Non-constant eigenvectors of the negative graph removed by negative blends.
    pub negative_components: usize,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scales: None,
            t: 1.0,
            k: crate::correspondence::DEFAULT_SEGMENTS,
            anchors: 1024,
            negative_components: 4,
        }
    }
}

impl BlendConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(VibeError::invalid("t", "must be finite and non-negative"));
        }
        if self.k == 0 {
            return Err(VibeError::invalid("k", "must be at least 1"));
        }
        if self.anchors == 0 {
            return Err(VibeError::invalid("anchors", "must be at least 1"));
        }
        Ok(())
    }
}

/// Checks that `alphas` is non-empty, strictly increasing and inside [`ALPHA_RANGE`].
pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(VibeError::invalid("alphas", "at least one weight is required"));
    }
    for &a in alphas {
        if !(a >= ALPHA_RANGE.0 && a <= ALPHA_RANGE.1) {
            return Err(VibeError::invalid(
                "alphas",
                format!("{a} outside [{}, {}]", ALPHA_RANGE.0, ALPHA_RANGE.1),
            ));
        }
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VibeError::invalid("alphas", "must be strictly increasing"));
    }
    Ok(())
}

/// `count` equally spaced weights from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|i| if i + 1 == count { hi } else { lo + (hi - lo) * i as f64 / (count - 1) as f64 })
            .collect(),
    }
}

/// Latent line, its decodings and the decoded step differences.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendPath {
    pub alphas: Vec<f64>,
    /// `origin + alphas[i] * direction`.
    pub latents: Vec<DMatrix<f64>>,
    pub decoded: Vec<DMatrix<f64>>,
    /// Latent codes of the start image.
    pub origin: DMatrix<f64>,
    /// Per-token latent displacement.
    pub direction: DMatrix<f64>,
    /// `decoded[i + 1] - decoded[i]`.
    pub step_deltas: Vec<DMatrix<f64>>,
    /// Grid shape of the start image.
    pub height: usize,
    pub width: usize,
    /// Start image first, then the images defining the direction.
    pub image_ids: Vec<String>,
}

impl BlendPath {
    /// Decodes `origin + alpha * direction` for every alpha.
    pub fn along(
        model: &VibeSpaceModel,
        origin: DMatrix<f64>,
        direction: DMatrix<f64>,
        alphas: &[f64],
        shape: (usize, usize),
        image_ids: Vec<String>,
    ) -> Result<Self> {
        validate_alphas(alphas)?;
        if origin.shape() != direction.shape() {
            return Err(VibeError::DimensionMismatch {
                context: "blend direction rows",
                expected: origin.nrows(),
                actual: direction.nrows(),
            });
        }
        let latents: Vec<DMatrix<f64>> = alphas.iter().map(|&a| &origin + &direction * a).collect();
        let decoded = latents
            .iter()
            .map(|z| {
                let y = model.decode(z)?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(VibeError::NonFinite("decoded features"));
                }
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let step_deltas = decoded.windows(2).map(|w| &w[1] - &w[0]).collect();
        Ok(Self {
            alphas: alphas.to_vec(),
            latents,
            decoded,
            origin,
            direction,
            step_deltas,
            height: shape.0,
            width: shape.1,
            image_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// Token-averaged decoded feature at each alpha.
    pub fn pooled(&self) -> Vec<Vec<f64>> {
        self.decoded
            .iter()
            .map(|y| y.row_mean().iter().copied().collect())
            .collect()
    }

    /// Largest `|latents[i] - origin - alphas[i] * direction|` entry.
    pub fn collinearity_error(&self) -> f64 {
        self.alphas
            .iter()
            .zip(&self.latents)
            .map(|(&a, z)| (z - &self.origin - &self.direction * a).amax())
            .fold(0.0, f64::max)
    }
}

/// `|z z^T - anchor anchor^T|_F^2`, minimized with value 0 at `z = anchor`.
pub fn latent_surrogate(z: &DMatrix<f64>, anchor: &DMatrix<f64>) -> f64 {
    (z * z.transpose() - anchor * anchor.transpose()).norm_squared()
}

/// A trained latent space over a set of stacked images.
#[derive(Debug, Clone)]
pub struct VibeSpace {
    pub model: VibeSpaceModel,
    pub map: DiffusionMap,
    /// Basis whose flag kernel the encoder was trained on.
    pub basis: DMatrix<f64>,
    pub scales: FlagScales,
    /// Kernel width of the joint affinity graph.
    pub graph_sigma_sq: f64,
    /// `slot[i]` is the stacked block holding input image `i`.
    slot: Vec<usize>,
    offsets: Vec<usize>,
}

impl VibeSpace {
    /// Rows of the joint eigenvector matrix belonging to input image `i`.
    pub fn psi_rows(&self, i: usize, len: usize) -> DMatrix<f64> {
        self.map.eigenvectors().rows(self.offsets[self.slot[i]], len).into_owned()
    }

    /// Number of distinct stacked images.
    pub fn stacked_images(&self) -> usize {
        self.offsets.len()
    }
}

fn check_grids(sources: &[&FeatureGrid], targets: &[&FeatureGrid]) -> Result<()> {
    if sources.is_empty() {
        return Err(VibeError::invalid("grids", "at least one image is required"));
    }
    if sources.len() != targets.len() {
        return Err(VibeError::DimensionMismatch {
            context: "target grid count",
            expected: sources.len(),
            actual: targets.len(),
        });
    }
    for (s, t) in sources.iter().zip(targets) {
        if s.len() != t.len() {
            return Err(VibeError::DimensionMismatch {
                context: "target tokens per image",
                expected: s.len(),
                actual: t.len(),
            });
        }
        if s.dim() != sources[0].dim() {
            return Err(VibeError::DimensionMismatch {
                context: "source feature width",
                expected: sources[0].dim(),
                actual: s.dim(),
            });
        }
        if t.dim() != targets[0].dim() {
            return Err(VibeError::DimensionMismatch {
                context: "target feature width",
                expected: targets[0].dim(),
                actual: t.dim(),
            });
        }
        if s.space() == FeatureSpace::Target {
            return Err(VibeError::invalid("grids", format!("{} is tagged as a target grid", s.image_id())));
        }
    }
    Ok(())
}

/// Builds the joint map over `sources`, lets `adjust` replace the kernel
/// basis, and trains the model on it.
///
/// Grids whose source and target tokens equal an earlier grid's are stacked once.
pub fn fit_vibe_space(
    sources: &[&FeatureGrid],
    targets: &[&FeatureGrid],
    config: &BlendConfig,
    adjust: impl FnOnce(&DiffusionMap, &DMatrix<f64>) -> Result<DMatrix<f64>>,
) -> Result<VibeSpace> {
    config.validate()?;
    check_grids(sources, targets)?;
    let mut slot = Vec::with_capacity(sources.len());
    let mut unique: Vec<usize> = Vec::new();
    for i in 0..sources.len() {
        let same = unique
            .iter()
            .position(|&u| sources[u].tokens() == sources[i].tokens() && targets[u].tokens() == targets[i].tokens());
        match same {
            Some(s) => slot.push(s),
            None => {
                slot.push(unique.len());
                unique.push(i);
            }
        }
    }
    let mut offsets = Vec::with_capacity(unique.len());
    let mut n = 0;
    for &u in &unique {
        offsets.push(n);
        n += sources[u].len();
    }
    let xs = vstack(&unique.iter().map(|&u| sources[u].tokens()).collect::<Vec<_>>());
    let xt = vstack(&unique.iter().map(|&u| targets[u].tokens()).collect::<Vec<_>>());

    let exact = n <= config.anchors;
    let available = if exact { n } else { config.anchors };
    let scales = match &config.scales {
        Some(s) => {
            s.check_available(available)?;
            s.clone()
        }
        None => FlagScales::default_for(available)?,
    };
    let m = scales.max().max(config.k);
    if m > available {
        return Err(VibeError::invalid(
            "k",
            format!("{} segments need {m} eigenvectors but only {available} are available", config.k),
        ));
    }
    let (map, graph_sigma_sq) = if exact {
        let graph = build_affinity(&xs, None)?;
        (solve_diffusion_map(&graph, m, config.t)?, graph.sigma_sq())
    } else {
        let nm = nystrom_diffusion_map(&xs, None, config.anchors, m, config.t, config.seed())?;
        (nm.map, nm.sigma_sq)
    };
    let basis = adjust(&map, &kernel_basis(&map))?;
    let model = train_vibe_space(&xs, &xt, &basis, &scales, &config.train)?;
    Ok(VibeSpace {
        model,
        map,
        basis,
        scales,
        graph_sigma_sq,
        slot,
        offsets,
    })
}

fn unchanged(_: &DiffusionMap, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(basis.clone())
}

/// Encoded and segmented view of one input image.
struct Encoded {
    latent: DMatrix<f64>,
    psi: DMatrix<f64>,
    seg: Segmentation,
}

fn encode_image(space: &VibeSpace, index: usize, grid: &FeatureGrid, config: &BlendConfig) -> Result<Encoded> {
    let psi = space.psi_rows(index, grid.len());
    let seg = segment_tokens(grid.image_id(), &psi, config.k, config.seed())?;
    Ok(Encoded {
        latent: space.model.encode(grid.tokens())?,
        psi,
        seg,
    })
}

fn match_encoded(a: &FeatureGrid, ea: &Encoded, b: &FeatureGrid, eb: &Encoded) -> Result<Correspondence> {
    correspond(
        ImageTokens {
            image_id: a.image_id(),
            source: a.tokens(),
            psi: &ea.psi,
            latent: &ea.latent,
        },
        ImageTokens {
            image_id: b.image_id(),
            source: b.tokens(),
            psi: &eb.psi,
            latent: &eb.latent,
        },
        ea.seg.clone(),
        eb.seg.clone(),
    )
}

/// Result of a blend: the path plus the artifacts that produced it.
#[derive(Debug, Clone)]
pub struct BlendRun {
    pub path: BlendPath,
    pub space: VibeSpace,
    /// Correspondence that defined the direction.
    pub correspondence: Correspondence,
}

/// Blends grid A toward grid B.
pub fn vibe_blend(
    source_a: &FeatureGrid,
    source_b: &FeatureGrid,
    target_a: &FeatureGrid,
    target_b: &FeatureGrid,
    config: &BlendConfig,
    alphas: &[f64],
) -> Result<BlendRun> {
    vibe_blend_extra(&[source_a, source_b], &[target_a, target_b], (0, 1), config, alphas)
}

/// Trains on every grid but blends only the pair `blend_pair`.
pub fn vibe_blend_extra(
    sources: &[&FeatureGrid],
    targets: &[&FeatureGrid],
    blend_pair: (usize, usize),
    config: &BlendConfig,
    alphas: &[f64],
) -> Result<BlendRun> {
    validate_alphas(alphas)?;
    if sources.len() < 2 {
        return Err(VibeError::invalid("grids", "blending needs at least two images"));
    }
    let (ia, ib) = blend_pair;
    if ia >= sources.len() || ib >= sources.len() {
        return Err(VibeError::invalid("blend_pair", format!("indices must be below {}", sources.len())));
    }
    let space = fit_vibe_space(sources, targets, config, unchanged)?;
    pair_path(space, sources[ia], ia, sources[ib], ib, config, alphas)
}

fn pair_path(
    space: VibeSpace,
    a: &FeatureGrid,
    ia: usize,
    b: &FeatureGrid,
    ib: usize,
    config: &BlendConfig,
    alphas: &[f64],
) -> Result<BlendRun> {
    let ea = encode_image(&space, ia, a, config)?;
    let eb = encode_image(&space, ib, b, config)?;
    let corr = match_encoded(a, &ea, b, &eb)?;
    let direction = broadcast_rows(&corr.segment_displacements(), &ea.seg);
    let path = BlendPath::along(
        &space.model,
        ea.latent,
        direction,
        alphas,
        (a.height(), a.width()),
        vec![a.image_id().to_string(), b.image_id().to_string()],
    )?;
    Ok(BlendRun {
        path,
        space,
        correspondence: corr,
    })
}

/// Applies the A-to-B segment displacements to A'.
///
/// Each segment of A' receives the displacement of the A segment matched to it.
pub fn vibe_analogy(
    sources: [&FeatureGrid; 3],
    targets: [&FeatureGrid; 3],
    config: &BlendConfig,
    alphas: &[f64],
) -> Result<BlendRun> {
    validate_alphas(alphas)?;
    let space = fit_vibe_space(&sources, &targets, config, unchanged)?;
    let [a, b, a2] = sources;
    let ea = encode_image(&space, 0, a, config)?;
    let eb = encode_image(&space, 1, b, config)?;
    let ea2 = encode_image(&space, 2, a2, config)?;
    let ab = match_encoded(a, &ea, b, &eb)?;
    let aa2 = match_encoded(a, &ea, a2, &ea2)?;
    let per_a = ab.segment_displacements();
    let mut per_a2 = DMatrix::zeros(per_a.nrows(), per_a.ncols());
    for (i, &j) in aa2.pi.iter().enumerate() {
        per_a2.row_mut(j).copy_from(&per_a.row(i));
    }
    let direction = broadcast_rows(&per_a2, &ea2.seg);
    let path = BlendPath::along(
        &space.model,
        ea2.latent,
        direction,
        alphas,
        (a2.height(), a2.width()),
        vec![a2.image_id().to_string(), a.image_id().to_string(), b.image_id().to_string()],
    )?;
    Ok(BlendRun {
        path,
        space,
        correspondence: ab,
    })
}

/// Negative basis evaluated on the positive tokens: the first
/// `components` non-constant eigenvectors of the negative graph, extended to
/// each positive token.
pub fn negative_basis_on(
    positive_tokens: &DMatrix<f64>,
    negative_tokens: &DMatrix<f64>,
    components: usize,
    t: f64,
) -> Result<DMatrix<f64>> {
    if components == 0 {
        return Ok(DMatrix::zeros(positive_tokens.nrows(), 0));
    }
    if negative_tokens.ncols() != positive_tokens.ncols() {
        return Err(VibeError::DimensionMismatch {
            context: "negative feature width",
            expected: positive_tokens.ncols(),
            actual: negative_tokens.ncols(),
        });
    }
    if components + 1 > negative_tokens.nrows() {
        return Err(VibeError::invalid(
            "negative_components",
            format!("{components} exceeds the {} negative tokens", negative_tokens.nrows()),
        ));
    }
    let graph = build_affinity(negative_tokens, None)?;
    let map = solve_diffusion_map(&graph, components + 1, t)?;
    let ext = Extender::new(&map, graph.sigma_sq(), negative_tokens)?;
    let mut out = DMatrix::zeros(positive_tokens.nrows(), components);
    for i in 0..positive_tokens.nrows() {
        let row: Vec<f64> = positive_tokens.row(i).iter().copied().collect();
        let psi = ext.psi(&row)?;
        for c in 0..components {
            out[(i, c)] = psi[c + 1];
        }
    }
    Ok(out)
}

/// Blend of the positive pair with the negative pair's dominant directions
/// filtered out of the encoder's target basis.
#[allow(clippy::too_many_arguments)]
pub fn negative_blend(
    pos_a: &FeatureGrid,
    pos_b: &FeatureGrid,
    target_a: &FeatureGrid,
    target_b: &FeatureGrid,
    neg_a: &FeatureGrid,
    neg_c: &FeatureGrid,
    beta: f64,
    config: &BlendConfig,
    alphas: &[f64],
) -> Result<(BlendRun, FilteredBasis)> {
    validate_alphas(alphas)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(VibeError::invalid("beta", "must be finite and non-negative"));
    }
    let neg_tokens = vstack(&[neg_a.tokens(), neg_c.tokens()]);
    let mut filtered = None;
    let sources = [pos_a, pos_b];
    let space = fit_vibe_space(&sources, &[target_a, target_b], config, |_, basis| {
        let pos_tokens = if pos_a.tokens() == pos_b.tokens() && target_a.tokens() == target_b.tokens() {
            pos_a.tokens().clone()
        } else {
            vstack(&[pos_a.tokens(), pos_b.tokens()])
        };
        let neg = negative_basis_on(&pos_tokens, &neg_tokens, config.negative_components, config.t)?;
        let f = filter_negative(basis, &neg, beta)?;
        let b = f.basis.clone();
        filtered = Some(f);
        Ok(b)
    })?;
    let run = pair_path(space, pos_a, 0, pos_b, 1, config, alphas)?;
    Ok((run, filtered.expect("basis adjusted during fitting")))
}

/// Multi-image blend around a base image.
#[derive(Debug, Clone)]
pub struct NBlend {
    pub latent: DMatrix<f64>,
    pub decoded: DMatrix<f64>,
    pub base_segmentation: Segmentation,
    /// Correspondence from the base to each other image, in input order.
    pub correspondences: Vec<Correspondence>,
    pub space: VibeSpace,
}

/// Moves each base segment by `sum_k w_k (c_k[pi_k(i)] - c_base[i])`.
///
/// `weights` has one entry per non-base image, in input order.
pub fn n_blend(
    sources: &[&FeatureGrid],
    targets: &[&FeatureGrid],
    base: usize,
    weights: &[f64],
    config: &BlendConfig,
) -> Result<NBlend> {
    if base >= sources.len() {
        return Err(VibeError::invalid("base_index", format!("must be below {}", sources.len())));
    }
    if weights.len() + 1 != sources.len() {
        return Err(VibeError::invalid(
            "weights",
            format!("need {} weights (one per non-base image), got {}", sources.len() - 1, weights.len()),
        ));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(VibeError::invalid("weights", "must be finite"));
    }
    let space = fit_vibe_space(sources, targets, config, unchanged)?;
    let eb = encode_image(&space, base, sources[base], config)?;
    let mut per_segment = DMatrix::zeros(config.k, eb.latent.ncols());
    let mut correspondences = Vec::with_capacity(weights.len());
    let others = (0..sources.len()).filter(|&i| i != base);
    for (i, &w) in others.zip(weights) {
        let ei = encode_image(&space, i, sources[i], config)?;
        let corr = match_encoded(sources[base], &eb, sources[i], &ei)?;
        per_segment += corr.segment_displacements() * w;
        correspondences.push(corr);
    }
    let latent = &eb.latent + broadcast_rows(&per_segment, &eb.seg);
    let decoded = space.model.decode(&latent)?;
    if decoded.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("decoded features"));
    }
    Ok(NBlend {
        latent,
        decoded,
        base_segmentation: eb.seg,
        correspondences,
        space,
    })
}

/// Manifest written next to an exported path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendManifest {
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub config: BlendConfig,
    pub k: usize,
    pub image_ids: Vec<String>,
    /// File name for each alpha, relative to the manifest.
    pub files: Vec<String>,
    pub space: FeatureSpace,
}

pub fn alpha_file_name(index: usize) -> String {
    format!("alpha_{index:03}.vibe")
}

/// Writes one target-space feature file per alpha plus [`MANIFEST_FILE`].
pub fn export_blend_path(path: &BlendPath, config: &BlendConfig, dir: impl AsRef<Path>) -> Result<BlendManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| VibeError::io(dir, e))?;
    let base_id = path.image_ids.join("->");
    let mut files = Vec::with_capacity(path.len());
    for (i, (alpha, decoded)) in path.alphas.iter().zip(&path.decoded).enumerate() {
        let grid = FeatureGrid::new(
            format!("{base_id}@{alpha}"),
            path.height,
            path.width,
            FeatureSpace::Target,
            decoded.clone(),
        )?;
        let name = alpha_file_name(i);
        write_feature_file(&grid, dir.join(&name))?;
        files.push(name);
    }
    let manifest = BlendManifest {
        alphas: path.alphas.clone(),
        seed: config.seed(),
        config: config.clone(),
        k: config.k,
        image_ids: path.image_ids.clone(),
        files,
        space: FeatureSpace::Target,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| VibeError::io(mpath, e))?;
    Ok(manifest)
}

pub fn read_blend_manifest(dir: impl AsRef<Path>) -> Result<BlendManifest> {
    let mpath = dir.as_ref().join(MANIFEST_FILE);
    let s = fs::read_to_string(&mpath).map_err(|e| VibeError::io(&mpath, e))?;
    let m: BlendManifest = serde_json::from_str(&s).map_err(|e| VibeError::invalid("manifest", e.to_string()))?;
    if m.files.len() != m.alphas.len() {
        return Err(VibeError::invalid("manifest", "one file per alpha is required"));
    }
    Ok(m)
}

/// Reads the manifest and every per-alpha grid of an exported path.
pub fn read_blend_export(dir: impl AsRef<Path>) -> Result<(BlendManifest, Vec<FeatureGrid>)> {
    let dir = dir.as_ref();
    let m = read_blend_manifest(dir)?;
    let grids = m
        .files
        .iter()
        .map(|f| read_feature_file(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, grids))
}
