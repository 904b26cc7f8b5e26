//! The learned latent space: an encoder from source features and a decoder to
//! target features, trained so that latent Gram matrices reproduce a flag kernel.
//!
//! All losses are per-entry means. The flag terms divide the squared Frobenius
//! residual by `n^2`; the reconstruction term is the mean squared error in
//! standardized target units. Parameters are `f32`; gradient checks run on an
//! `f64` copy of the same networks.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VibeError};
use crate::flag::{flag_kernel, FlagKernel, FlagScales};
use crate::linalg::orthonormalize_columns;
use crate::mlp::{Activation, Adam, AdamConfig, ForwardCache, Mlp, Real};
use crate::spectral::{build_affinity, default_sigma_sq, solve_diffusion_map, DiffusionMap};

/// Fixed affine normalization `(x - mean) / scale` with one global scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl Standardizer {
    /// Per-feature means and `scale = sqrt(mean per-feature variance)`;
    /// constant data gets scale 1.
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let var: f64 = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            .sum::<f64>()
            / x.ncols().max(1) as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale)
    }

    pub fn inverse(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] * self.scale + self.mean[j])
    }

    fn validate(&self, field: &'static str) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(VibeError::invalid(field, "normalization must be finite with positive scale"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub flag_enc: f64,
    pub flag_dec: f64,
    pub sample: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            flag_enc: 1.0,
            flag_dec: 0.01,
            sample: 0.01,
            recon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn recon_only() -> Self {
        Self {
            flag_enc: 0.0,
            flag_dec: 0.0,
            sample: 0.0,
            recon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub hidden_dim: usize,
    /// Number of linear layers in each network.
    pub n_layers: usize,
    pub latent_dim: usize,
    pub weights: LossWeights,
    /// Steps before the sample term is evaluated.
    pub sample_loss_warmup: usize,
    pub seed: u64,
    /// Steps between recomputations of the decoded-token kernel.
    pub decoded_kernel_refresh: usize,
    /// Kernel width for graphs on decoded tokens; defaults to the global
    /// variance of the training targets.
    pub sigma_sq: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            total_steps: 1000,
            hidden_dim: 256,
            n_layers: 4,
            latent_dim: 6,
            weights: LossWeights::default(),
            sample_loss_warmup: 500,
            seed: 0,
            decoded_kernel_refresh: 25,
            sigma_sq: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VibeError::invalid("learning_rate", "must be positive and finite"));
        }
        if self.hidden_dim == 0 {
            return Err(VibeError::invalid("hidden_dim", "must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(VibeError::invalid("n_layers", "must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(VibeError::invalid("latent_dim", "must be at least 1"));
        }
        let w = &self.weights;
        for (name, v) in [
            ("weights.flag_enc", w.flag_enc),
            ("weights.flag_dec", w.flag_dec),
            ("weights.sample", w.sample),
            ("weights.recon", w.recon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(VibeError::invalid(name, format!("must be non-negative, got {v}")));
            }
        }
        if self.sample_loss_warmup > self.total_steps {
            return Err(VibeError::invalid(
                "sample_loss_warmup",
                format!("{} exceeds total_steps = {}", self.sample_loss_warmup, self.total_steps),
            ));
        }
        if self.decoded_kernel_refresh == 0 {
            return Err(VibeError::invalid("decoded_kernel_refresh", "must be at least 1"));
        }
        if let Some(s) = self.sigma_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(VibeError::invalid("sigma_sq", format!("must be positive, got {s}")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub flag_enc: f64,
    pub flag_dec: f64,
    pub sample: f64,
    pub recon: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.flag_enc * self.flag_enc + w.flag_dec * self.flag_dec + w.sample * self.sample + w.recon * self.recon
    }

    fn is_finite(&self) -> bool {
        [self.flag_enc, self.flag_dec, self.sample, self.recon]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossTerms,
    #[serde(rename = "final")]
    pub final_terms: LossTerms,
    /// Reconstruction loss before each update.
    pub recon_history: Vec<f64>,
    /// Encoder flag loss before each update.
    pub flag_enc_history: Vec<f64>,
    pub kernel_refreshes: usize,
}

/// Trained encoder/decoder pair with its fixed normalizations.
#[derive(Debug, Clone)]
pub struct VibeSpaceModel {
    encoder: Mlp<f32>,
    decoder: Mlp<f32>,
    input_norm: Standardizer,
    output_norm: Standardizer,
    scales: FlagScales,
    target_kernel: Option<FlagKernel>,
    training_sigma_sq: f64,
    config: TrainConfig,
    report: Option<TrainReport>,
}

impl PartialEq for VibeSpaceModel {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.decoder == other.decoder
            && self.input_norm == other.input_norm
            && self.output_norm == other.output_norm
            && self.scales == other.scales
            && self.training_sigma_sq.to_bits() == other.training_sigma_sq.to_bits()
            && self.config == other.config
    }
}

impl VibeSpaceModel {
    /// Assembles a model, checking that the networks chain as
    /// `source -> latent -> target`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        encoder: Mlp<f32>,
        decoder: Mlp<f32>,
        input_norm: Standardizer,
        output_norm: Standardizer,
        scales: FlagScales,
        training_sigma_sq: f64,
        config: TrainConfig,
    ) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() {
            return Err(VibeError::DimensionMismatch {
                context: "encoder output vs decoder input",
                expected: encoder.output_dim(),
                actual: decoder.input_dim(),
            });
        }
        if input_norm.dim() != encoder.input_dim() {
            return Err(VibeError::DimensionMismatch {
                context: "input normalization",
                expected: encoder.input_dim(),
                actual: input_norm.dim(),
            });
        }
        if output_norm.dim() != decoder.output_dim() {
            return Err(VibeError::DimensionMismatch {
                context: "output normalization",
                expected: decoder.output_dim(),
                actual: output_norm.dim(),
            });
        }
        input_norm.validate("input_norm")?;
        output_norm.validate("output_norm")?;
        if !encoder.is_finite() || !decoder.is_finite() {
            return Err(VibeError::NonFinite("model parameters"));
        }
        if !(training_sigma_sq > 0.0 && training_sigma_sq.is_finite()) {
            return Err(VibeError::invalid("training_sigma_sq", "must be positive"));
        }
        Ok(Self {
            encoder,
            decoder,
            input_norm,
            output_norm,
            scales,
            target_kernel: None,
            training_sigma_sq,
            config,
            report: None,
        })
    }

    pub fn encoder(&self) -> &Mlp<f32> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp<f32> {
        &self.decoder
    }

    pub fn input_norm(&self) -> &Standardizer {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &Standardizer {
        &self.output_norm
    }

    pub fn scales(&self) -> &FlagScales {
        &self.scales
    }

    /// Encoder target kernel; only present on freshly trained models.
    pub fn target_kernel(&self) -> Option<&FlagKernel> {
        self.target_kernel.as_ref()
    }

    pub fn source_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn target_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn training_sigma_sq(&self) -> f64 {
        self.training_sigma_sq
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn activation(&self) -> Activation {
        self.encoder.activation()
    }

    pub fn report(&self) -> Option<&TrainReport> {
        self.report.as_ref()
    }

    pub(crate) fn set_report(&mut self, report: Option<TrainReport>) {
        self.report = report;
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// `z = f(x)`, one latent row per token.
    pub fn encode(&self, x_source: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(x_source, self.source_dim(), "encoder input")?;
        let xs = to_f32(&self.input_norm.forward(x_source));
        let z = to_f64(&self.encoder.forward(&xs));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("encoded latents"));
        }
        Ok(z)
    }

    /// `g(z)`, one target-space row per latent row.
    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_input(z, self.latent_dim(), "decoder input")?;
        let y = to_f64(&self.decoder.forward(&to_f32(z)));
        let out = self.output_norm.inverse(&y);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(VibeError::NonFinite("decoded features"));
        }
        Ok(out)
    }
}

fn check_input(x: &DMatrix<f64>, dim: usize, context: &'static str) -> Result<()> {
    if x.ncols() != dim {
        return Err(VibeError::DimensionMismatch {
            context,
            expected: dim,
            actual: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite(context));
    }
    Ok(())
}

fn to_f32(x: &DMatrix<f64>) -> DMatrix<f32> {
    x.map(|v| v as f32)
}

fn to_f64<T: Real>(x: &DMatrix<T>) -> DMatrix<f64> {
    x.map(|v| v.as_f64())
}

/// Eigenvector basis used for flag kernels: `sqrt(n) D^{1/2} psi`.
///
/// Columns are orthogonal with squared norm `n`, so kernel entries are O(1)
/// regardless of the token count.
pub fn kernel_basis(map: &DiffusionMap) -> DMatrix<f64> {
    map.orthonormal_basis() * (map.n() as f64).sqrt()
}

/// Flag kernel of the affinity graph on `tokens` with a fixed kernel width.
pub fn tokens_kernel(tokens: &DMatrix<f64>, sigma_sq: f64, scales: &FlagScales) -> Result<FlagKernel> {
    let first = tokens.row(0);
    if tokens.row_iter().all(|r| r == first) {
        return Err(VibeError::DegenerateDecodedGraph);
    }
    let graph = build_affinity(tokens, Some(sigma_sq))?;
    let m = scales.max();
    scales.check_available(tokens.nrows())?;
    let map = solve_diffusion_map(&graph, m, 1.0)?;
    flag_kernel(&kernel_basis(&map), scales)
}

/// `|z z^T - S|_F^2 / n^2`.
pub fn gram_mismatch(z: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let n = z.nrows() as f64;
    (z * z.transpose() - s).norm_squared() / (n * n)
}

/// `|z z^T - S|_F / |S|_F`.
pub fn alignment_error(z: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    (z * z.transpose() - s).norm() / s.norm()
}

/// Latent samples drawn uniformly from the bounding box of `z`, widened by 20%
/// (10% of each axis range on either side).
pub fn sample_latents<R: Rng + ?Sized>(z: &DMatrix<f64>, count: usize, rng: &mut R) -> DMatrix<f64> {
    let bounds: Vec<(f64, f64)> = z
        .column_iter()
        .map(|c| {
            let lo = c.min();
            let hi = c.max();
            let pad = 0.1 * (hi - lo);
            (lo - pad, hi + pad)
        })
        .collect();
    let mut out = DMatrix::zeros(count, z.ncols());
    for i in 0..count {
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            out[(i, j)] = if hi > lo { rng.random_range(lo..hi) } else { lo };
        }
    }
    out
}

fn sample_term(model: &VibeSpaceModel, z: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let zs = sample_latents(z, z.nrows(), rng);
    let decoded = model.decode(&zs)?;
    let s = tokens_kernel(&decoded, model.training_sigma_sq, &model.scales)?;
    Ok(gram_mismatch(&zs, s.matrix()))
}

/// Evaluates all four losses at `step` for a model.
///
/// The sample term is exactly zero before the warmup ends. `psi` is the
/// encoder's target basis (see [`kernel_basis`]).
pub fn loss_terms(
    model: &VibeSpaceModel,
    x_source: &DMatrix<f64>,
    x_target: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    config: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let n = x_source.nrows();
    check_rows(n, x_target.nrows(), "target token count")?;
    check_rows(n, psi.nrows(), "eigenvector rows")?;
    check_input(x_target, model.target_dim(), "target features")?;
    let s = flag_kernel(psi, &model.scales)?;
    let z = model.encode(x_source)?;
    let decoded = model.decode(&z)?;
    let s_dec = tokens_kernel(&decoded, model.training_sigma_sq, &model.scales)?;
    let scale = model.output_norm.scale;
    let recon = (x_target - &decoded).norm_squared() / (n as f64 * model.target_dim() as f64 * scale * scale);
    let sample = if step < config.sample_loss_warmup {
        0.0
    } else {
        sample_term(model, &z, rng)?
    };
    Ok(LossTerms {
        flag_enc: gram_mismatch(&z, s.matrix()),
        flag_dec: gram_mismatch(&z, s_dec.matrix()),
        sample,
        recon,
    })
}

fn check_rows(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected != actual {
        return Err(VibeError::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Loss values and parameter gradients for one batch, in the networks'
/// precision. The decoded kernel is held fixed.
struct Evaluation<T: Real> {
    flag_enc: f64,
    flag_dec: f64,
    recon: f64,
    enc_grad: Mlp<T>,
    dec_grad: Mlp<T>,
}

struct Batch<T: Real> {
    xs: DMatrix<T>,
    yt: DMatrix<T>,
    kernel: DMatrix<T>,
}

fn sum_sq<T: Real>(m: &DMatrix<T>) -> f64 {
    m.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

fn evaluate<T: Real>(
    enc: &Mlp<T>,
    dec: &Mlp<T>,
    batch: &Batch<T>,
    dec_kernel: Option<&DMatrix<T>>,
    w: &LossWeights,
    with_grads: bool,
) -> Evaluation<T> {
    let n = batch.xs.nrows();
    let nn = (n * n) as f64;
    let (z, cache_e): (DMatrix<T>, ForwardCache<T>) = enc.forward_cached(&batch.xs);
    let (y, cache_d) = dec.forward_cached(&z);
    // one pass turns the Gram matrix into the combined residual
    // G = w_enc (zz^T - S) + w_dec (zz^T - S_dec) while accumulating both losses
    let mut g = T::product(&z, false, &z, true);
    let (we, wd) = (T::of_f64(w.flag_enc), T::of_f64(w.flag_dec));
    // lane-split accumulators let the reductions vectorize
    const LANES: usize = 8;
    let (mut lanes_enc, mut lanes_dec) = ([0.0f64; LANES], [0.0f64; LANES]);
    match dec_kernel {
        Some(k) => {
            let chunks = g
                .as_mut_slice()
                .chunks_mut(LANES)
                .zip(batch.kernel.as_slice().chunks(LANES))
                .zip(k.as_slice().chunks(LANES));
            for ((gc, sc), dc) in chunks {
                for l in 0..gc.len() {
                    let (re, rd) = (gc[l] - sc[l], gc[l] - dc[l]);
                    lanes_enc[l] += re.as_f64() * re.as_f64();
                    lanes_dec[l] += rd.as_f64() * rd.as_f64();
                    gc[l] = we * re + wd * rd;
                }
            }
        }
        None => {
            let chunks = g.as_mut_slice().chunks_mut(LANES).zip(batch.kernel.as_slice().chunks(LANES));
            for (gc, sc) in chunks {
                for l in 0..gc.len() {
                    let re = gc[l] - sc[l];
                    lanes_enc[l] += re.as_f64() * re.as_f64();
                    gc[l] = we * re;
                }
            }
        }
    }
    let acc_enc: f64 = lanes_enc.iter().sum();
    let acc_dec: f64 = lanes_dec.iter().sum();
    let flag_enc = acc_enc / nn;
    let flag_dec = acc_dec / nn;
    let diff = &y - &batch.yt;
    let recon = sum_sq(&diff) / (n * batch.yt.ncols()) as f64;
    if !with_grads {
        return Evaluation {
            flag_enc,
            flag_dec,
            recon,
            enc_grad: Mlp::zeros(&enc.layer_sizes(), enc.activation()),
            dec_grad: Mlp::zeros(&dec.layer_sizes(), dec.activation()),
        };
    }
    // d/dz |zz^T - S|^2 / n^2 = 4 (zz^T - S) z / n^2 for symmetric S
    let mut dz = T::product(&g, false, &z, false) * T::of_f64(4.0 / nn);
    let dy = diff * T::of_f64(2.0 * w.recon / (n * batch.yt.ncols()) as f64);
    let (dec_grad, dz_recon) = dec.backward(&cache_d, &dy, true);
    dz += dz_recon.expect("input gradient requested");
    let (enc_grad, _) = enc.backward(&cache_e, &dz, false);
    Evaluation {
        flag_enc,
        flag_dec,
        recon,
        enc_grad,
        dec_grad,
    }
}

/// Trains encoder and decoder with Adam on the weighted sum of the four losses.
///
/// `psi` supplies the encoder's target kernel `S(psi)` over `scales`. The
/// decoder-side kernel is rebuilt from decoded tokens every
/// `decoded_kernel_refresh` steps and treated as a constant. The sample term
/// compares sampled latents against a kernel of their own decodings, which is
/// likewise constant, so it has no parameter gradient and is evaluated only
/// for the final report.
pub fn train_vibe_space(
    x_source: &DMatrix<f64>,
    x_target: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    scales: &FlagScales,
    config: &TrainConfig,
) -> Result<VibeSpaceModel> {
    config.validate()?;
    let n = x_source.nrows();
    check_rows(n, x_target.nrows(), "target token count")?;
    check_rows(n, psi.nrows(), "eigenvector rows")?;
    if n < 2 {
        return Err(VibeError::invalid("x_source", "need at least 2 tokens"));
    }
    check_input(x_source, x_source.ncols(), "source features")?;
    check_input(x_target, x_target.ncols(), "target features")?;
    scales.check_available(psi.ncols())?;
    if scales.max() > n {
        return Err(VibeError::invalid("scales", "largest scale exceeds the token count"));
    }
    let target_kernel = flag_kernel(psi, scales)?;
    let sigma_sq = match config.sigma_sq {
        Some(s) => s,
        None => default_sigma_sq(x_target)?,
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);
    let d = config.latent_dim;
    let enc_sizes = Mlp::<f32>::sizes(x_source.ncols(), config.hidden_dim, d, config.n_layers);
    let dec_sizes = Mlp::<f32>::sizes(d, config.hidden_dim, x_target.ncols(), config.n_layers);
    let encoder = Mlp::<f32>::new_uniform(&enc_sizes, Activation::Silu, &mut init_rng);
    let decoder = Mlp::<f32>::new_uniform(&dec_sizes, Activation::Silu, &mut init_rng);
    let mut model = VibeSpaceModel::from_parts(
        encoder,
        decoder,
        Standardizer::fit(x_source),
        Standardizer::fit(x_target),
        scales.clone(),
        sigma_sq,
        config.clone(),
    )?;

    let batch = Batch {
        xs: to_f32(&model.input_norm.forward(x_source)),
        yt: to_f32(&model.output_norm.forward(x_target)),
        kernel: to_f32(target_kernel.matrix()),
    };
    let mut adam_enc = Adam::new(&model.encoder, config.adam());
    let mut adam_dec = Adam::new(&model.decoder, config.adam());
    let w = config.weights;
    let mut dec_kernel: Option<DMatrix<f32>> = None;
    let mut refreshes = 0;
    let mut recon_history = Vec::with_capacity(config.total_steps);
    let mut flag_enc_history = Vec::with_capacity(config.total_steps);
    let mut initial = None;

    for step in 0..config.total_steps {
        if w.flag_dec > 0.0 && step % config.decoded_kernel_refresh == 0 {
            let z = to_f64(&model.encoder.forward(&batch.xs));
            let decoded = model.output_norm.inverse(&to_f64(&model.decoder.forward(&to_f32(&z))));
            dec_kernel = Some(to_f32(tokens_kernel(&decoded, sigma_sq, scales)?.matrix()));
            refreshes += 1;
        }
        let eval = evaluate(&model.encoder, &model.decoder, &batch, dec_kernel.as_ref(), &w, true);
        let terms = LossTerms {
            flag_enc: eval.flag_enc,
            flag_dec: eval.flag_dec,
            sample: 0.0,
            recon: eval.recon,
        };
        if !terms.is_finite() {
            return Err(VibeError::NonFiniteLoss { step });
        }
        if initial.is_none() {
            initial = Some(terms);
        }
        recon_history.push(terms.recon);
        flag_enc_history.push(terms.flag_enc);
        adam_enc.step(&mut model.encoder, &eval.enc_grad);
        adam_dec.step(&mut model.decoder, &eval.dec_grad);
    }
    if !model.encoder.is_finite() || !model.decoder.is_finite() {
        return Err(VibeError::NonFiniteLoss {
            step: config.total_steps,
        });
    }

    let final_terms = final_losses(&model, &batch, sigma_sq, config, &mut sample_rng)?;
    let initial = match initial {
        Some(t) => t,
        None => final_terms,
    };
    if final_terms.recon > initial.recon {
        return Err(VibeError::TrainingDiverged {
            initial_recon: initial.recon,
            final_recon: final_terms.recon,
        });
    }
    model.target_kernel = Some(target_kernel);
    model.report = Some(TrainReport {
        initial,
        final_terms,
        recon_history,
        flag_enc_history,
        kernel_refreshes: refreshes,
    });
    Ok(model)
}

fn final_losses(
    model: &VibeSpaceModel,
    batch: &Batch<f32>,
    sigma_sq: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossTerms> {
    let z = to_f64(&model.encoder.forward(&batch.xs));
    let decoded = model.output_norm.inverse(&to_f64(&model.decoder.forward(&to_f32(&z))));
    let dec_kernel = match tokens_kernel(&decoded, sigma_sq, &model.scales) {
        Ok(k) => Some(to_f32(k.matrix())),
        Err(VibeError::DegenerateDecodedGraph) if config.weights.flag_dec == 0.0 => None,
        Err(e) => return Err(e),
    };
    let eval = evaluate(
        &model.encoder,
        &model.decoder,
        batch,
        dec_kernel.as_ref(),
        &config.weights,
        false,
    );
    let sample = if config.total_steps >= config.sample_loss_warmup && config.weights.sample > 0.0 {
        sample_term(model, &z, rng)?
    } else {
        0.0
    };
    Ok(LossTerms {
        flag_enc: eval.flag_enc,
        flag_dec: eval.flag_dec,
        sample,
        recon: eval.recon,
    })
}

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    FlagEnc,
    /// Decoder flag term with the decoded kernel frozen at the current parameters.
    FlagDec,
    Recon,
    /// Weighted sum with the model's configured weights.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Largest parameter count sampled by [`finite_difference_check`].
pub const MAX_CHECKED_PARAMS: usize = 200;

/// Compares backpropagated gradients with central differences on up to 200
/// randomly chosen parameters, in double precision.
///
/// The relative error of each entry is taken against the larger of the two
/// magnitudes, floored at `1e-6` times the largest analytic gradient entry.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_check(
    model: &VibeSpaceModel,
    x_source: &DMatrix<f64>,
    x_target: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    selector: LossSelector,
    h: f64,
    seed: u64,
) -> Result<GradientCheck> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(VibeError::invalid("h", format!("must lie in [1e-6, 1e-3], got {h}")));
    }
    let n = x_source.nrows();
    check_rows(n, x_target.nrows(), "target token count")?;
    check_rows(n, psi.nrows(), "eigenvector rows")?;
    check_input(x_source, model.source_dim(), "source features")?;
    check_input(x_target, model.target_dim(), "target features")?;
    let kernel = flag_kernel(psi, &model.scales)?;
    let batch = Batch::<f64> {
        xs: model.input_norm.forward(x_source),
        yt: model.output_norm.forward(x_target),
        kernel: kernel.into_matrix(),
    };
    let enc = model.encoder.cast::<f64>();
    let dec = model.decoder.cast::<f64>();
    let weights = match selector {
        LossSelector::FlagEnc => LossWeights {
            flag_enc: 1.0,
            ..zero_weights()
        },
        LossSelector::FlagDec => LossWeights {
            flag_dec: 1.0,
            ..zero_weights()
        },
        LossSelector::Recon => LossWeights {
            recon: 1.0,
            ..zero_weights()
        },
        LossSelector::Total => model.config.weights,
    };
    let dec_kernel = if weights.flag_dec > 0.0 {
        let z = enc.forward(&batch.xs);
        let decoded = model.output_norm.inverse(&dec.forward(&z));
        Some(tokens_kernel(&decoded, model.training_sigma_sq, &model.scales)?.into_matrix())
    } else {
        None
    };
    let objective = |e: &Mlp<f64>, d: &Mlp<f64>| {
        let ev = evaluate(e, d, &batch, dec_kernel.as_ref(), &weights, false);
        weights.flag_enc * ev.flag_enc + weights.flag_dec * ev.flag_dec + weights.recon * ev.recon
    };
    let eval = evaluate(&enc, &dec, &batch, dec_kernel.as_ref(), &weights, true);
    let analytic: Vec<f64> = eval
        .enc_grad
        .flatten()
        .into_iter()
        .chain(eval.dec_grad.flatten())
        .collect();
    let enc_count = enc.param_count();
    let total = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = sample_indices(&mut rng, total, total.min(MAX_CHECKED_PARAMS)).into_vec();
    let g_scale = analytic.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let floor = (1e-6 * g_scale).max(1e-300);
    let enc_flat = enc.flatten();
    let dec_flat = dec.flatten();
    let enc_sizes = enc.layer_sizes();
    let dec_sizes = dec.layer_sizes();
    let act = enc.activation();
    let perturbed = |k: usize, delta: f64| -> f64 {
        if k < enc_count {
            let mut p = enc_flat.clone();
            p[k] += delta;
            let e = Mlp::from_flat(&enc_sizes, act, &p).expect("same shape");
            objective(&e, &dec)
        } else {
            let mut p = dec_flat.clone();
            p[k - enc_count] += delta;
            let d = Mlp::from_flat(&dec_sizes, act, &p).expect("same shape");
            objective(&enc, &d)
        }
    };
    let mut worst = 0.0_f64;
    for &k in &chosen {
        let numeric = (perturbed(k, h) - perturbed(k, -h)) / (2.0 * h);
        let a = analytic[k];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let err = if a == numeric { 0.0 } else { (a - numeric).abs() / denom };
        worst = worst.max(err);
    }
    Ok(GradientCheck {
        max_rel_error: worst,
        checked: chosen.len(),
    })
}

fn zero_weights() -> LossWeights {
    LossWeights {
        flag_enc: 0.0,
        flag_dec: 0.0,
        sample: 0.0,
        recon: 0.0,
    }
}

/// Positive basis with the negative span projected out.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBasis {
    /// `psi_pos - beta * Q (Q^T psi_pos)`.
    pub basis: DMatrix<f64>,
    /// Orthonormalized negative basis `Q`.
    pub negative: DMatrix<f64>,
    /// Negative columns dropped as linearly dependent.
    pub dropped: Vec<usize>,
}

/// Relative residual below which a negative column counts as dependent.
pub const NEGATIVE_RANK_TOL: f64 = 1e-10;

/// Removes `beta` times the projection of `psi_pos` onto the span of `psi_neg`.
///
/// `psi_neg` is orthonormalized first; dependent columns are dropped and listed.
pub fn filter_negative(psi_pos: &DMatrix<f64>, psi_neg: &DMatrix<f64>, beta: f64) -> Result<FilteredBasis> {
    check_rows(psi_pos.nrows(), psi_neg.nrows(), "negative basis rows")?;
    if !beta.is_finite() {
        return Err(VibeError::invalid("beta", "must be finite"));
    }
    if psi_pos.iter().chain(psi_neg.iter()).any(|v| !v.is_finite()) {
        return Err(VibeError::NonFinite("filter basis"));
    }
    let (q, dropped) = orthonormalize_columns(psi_neg, NEGATIVE_RANK_TOL);
    let basis = if beta == 0.0 || q.ncols() == 0 {
        psi_pos.clone()
    } else {
        psi_pos - (&q * (q.transpose() * psi_pos)) * beta
    };
    Ok(FilteredBasis {
        basis,
        negative: q,
        dropped,
    })
}

/// Per-token latent variance along a unit direction.
pub fn variance_along(z: &DMatrix<f64>, direction: &DVector<f64>) -> f64 {
    let proj = z * direction;
    let mean = proj.mean();
    proj.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / proj.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::build_affinity;

    fn toy(n: usize, ds: usize, dt: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = DMatrix::from_fn(n, ds, |i, j| {
            let c = if i < n / 2 { 1.0 } else { -1.0 };
            c * ((j % 3) as f64 - 1.0) + 0.3 * rng.random_range(-1.0..1.0)
        });
        let xt = DMatrix::from_fn(n, dt, |i, j| xs[(i, j % ds)] * 0.5 + (j as f64) * 0.1);
        (xs, xt)
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            hidden_dim: 16,
            latent_dim: 3,
            sample_loss_warmup: steps / 2,
            decoded_kernel_refresh: 5,
            seed: 3,
            ..Default::default()
        }
    }

    fn basis_for(xs: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
        let g = build_affinity(xs, None).unwrap();
        kernel_basis(&solve_diffusion_map(&g, m, 1.0).unwrap())
    }

    #[test]
    fn config_defaults_match_reference_values() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.total_steps, 1000);
        assert_eq!((c.hidden_dim, c.n_layers, c.latent_dim), (256, 4, 6));
        assert_eq!(c.weights, LossWeights::default());
        assert_eq!(c.sample_loss_warmup, 500);
        c.validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            TrainConfig {
                latent_dim: 0,
                ..Default::default()
            },
            TrainConfig {
                sample_loss_warmup: 2000,
                ..Default::default()
            },
            TrainConfig {
                weights: LossWeights {
                    recon: -1.0,
                    ..Default::default()
                },
                ..Default::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn standardizer_inverts() {
        let x = DMatrix::from_fn(5, 3, |i, j| (i * 2 + j) as f64 * 0.7 - 1.0);
        let s = Standardizer::fit(&x);
        let back = s.inverse(&s.forward(&x));
        assert!((back - &x).amax() < 1e-12);
        let c = Standardizer::fit(&DMatrix::from_element(4, 2, 3.0));
        assert_eq!(c.scale, 1.0);
    }

    fn zero_model(ds: usize, dt: usize) -> VibeSpaceModel {
        VibeSpaceModel::from_parts(
            Mlp::zeros(&Mlp::<f32>::sizes(ds, 8, 2, 4), Activation::Silu),
            Mlp::zeros(&Mlp::<f32>::sizes(2, 8, dt, 4), Activation::Silu),
            Standardizer::identity(ds),
            Standardizer::identity(dt),
            FlagScales::new(vec![2]).unwrap(),
            1.0,
            TrainConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_encode_and_decode_to_zero() {
        let m = zero_model(4, 5);
        let x = DMatrix::from_fn(6, 4, |i, j| (i + j) as f64);
        assert_eq!(m.encode(&x).unwrap(), DMatrix::zeros(6, 2));
        assert_eq!(m.decode(&DMatrix::from_element(3, 2, 1.5)).unwrap(), DMatrix::zeros(3, 5));
    }

    #[test]
    fn encode_checks_dimensions() {
        let m = zero_model(4, 5);
        assert!(matches!(
            m.encode(&DMatrix::zeros(3, 5)),
            Err(VibeError::DimensionMismatch { .. })
        ));
        assert!(m.decode(&DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn from_parts_rejects_mismatched_networks() {
        let r = VibeSpaceModel::from_parts(
            Mlp::zeros(&[4, 3], Activation::Silu),
            Mlp::zeros(&[2, 5], Activation::Silu),
            Standardizer::identity(4),
            Standardizer::identity(5),
            FlagScales::new(vec![2]).unwrap(),
            1.0,
            TrainConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn aligned_latents_have_zero_flag_loss() {
        let z = DMatrix::from_fn(7, 3, |i, j| ((i * 5 + j) as f64).cos());
        let s = &z * z.transpose();
        assert_eq!(gram_mismatch(&z, &s), 0.0);
        assert_eq!(alignment_error(&z, &s), 0.0);
    }

    #[test]
    fn sampled_latents_stay_in_widened_box() {
        let z = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 1.0, 3.0, 0.5, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_latents(&z, 500, &mut rng);
        for i in 0..500 {
            assert!(s[(i, 0)] >= -0.1 && s[(i, 0)] <= 1.1);
            assert!(s[(i, 1)] >= 0.8 && s[(i, 1)] <= 3.2);
        }
    }

    #[test]
    fn loss_terms_respect_warmup_and_exact_reconstruction() {
        let (xs, xt) = toy(24, 4, 5, 1);
        let psi = basis_for(&xs, 4);
        let scales = FlagScales::new(vec![2, 4]).unwrap();
        let cfg = small_config(20);
        let model = train_vibe_space(&xs, &xt, &psi, &scales, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = loss_terms(&model, &xs, &xt, &psi, &cfg, 3, &mut rng).unwrap();
        assert_eq!(before.sample, 0.0);
        let after = loss_terms(&model, &xs, &xt, &psi, &cfg, 15, &mut rng).unwrap();
        assert!(after.sample > 0.0);
        let exact = model.decode(&model.encode(&xs).unwrap()).unwrap();
        let t = loss_terms(&model, &xs, &exact, &psi, &cfg, 0, &mut rng).unwrap();
        assert_eq!(t.recon, 0.0);
    }

    #[test]
    fn degenerate_decoded_graph_is_an_error() {
        let m = zero_model(4, 5);
        let xs = DMatrix::from_fn(6, 4, |i, j| (i * j) as f64);
        let xt = DMatrix::from_fn(6, 5, |i, j| (i + j) as f64);
        let psi = DMatrix::from_fn(6, 2, |i, j| (i + j) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            loss_terms(&m, &xs, &xt, &psi, &TrainConfig::default(), 0, &mut rng),
            Err(VibeError::DegenerateDecodedGraph)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let (xs, xt) = toy(20, 4, 3, 2);
        let psi = basis_for(&xs, 4);
        let scales = FlagScales::new(vec![2, 4]).unwrap();
        let a = train_vibe_space(&xs, &xt, &psi, &scales, &small_config(30)).unwrap();
        let b = train_vibe_space(&xs, &xt, &psi, &scales, &small_config(30)).unwrap();
        let bits = |m: &VibeSpaceModel| -> Vec<u32> {
            m.encoder()
                .flatten()
                .into_iter()
                .chain(m.decoder().flatten())
                .map(f32::to_bits)
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.report(), b.report());
    }

    #[test]
    fn training_validates_shapes() {
        let (xs, xt) = toy(20, 4, 3, 2);
        let psi = basis_for(&xs, 4);
        let scales = FlagScales::new(vec![2, 8]).unwrap();
        assert!(train_vibe_space(&xs, &xt, &psi, &scales, &small_config(5)).is_err());
        let scales = FlagScales::new(vec![2]).unwrap();
        let short = xt.rows(0, 10).into_owned();
        assert!(train_vibe_space(&xs, &short, &psi, &scales, &small_config(5)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (xs, xt) = toy(16, 3, 4, 5);
        let psi = basis_for(&xs, 4);
        let scales = FlagScales::new(vec![2, 4]).unwrap();
        let model = train_vibe_space(&xs, &xt, &psi, &scales, &small_config(10)).unwrap();
        for sel in [
            LossSelector::Recon,
            LossSelector::FlagEnc,
            LossSelector::FlagDec,
            LossSelector::Total,
        ] {
            let chk = finite_difference_check(&model, &xs, &xt, &psi, sel, 1e-4, 9).unwrap();
            assert_eq!(chk.checked, MAX_CHECKED_PARAMS);
            assert!(chk.max_rel_error <= 1e-4, "{sel:?}: {}", chk.max_rel_error);
        }
        assert!(finite_difference_check(&model, &xs, &xt, &psi, LossSelector::Recon, 1e-2, 0).is_err());
    }

    #[test]
    fn zero_model_zero_data_has_zero_gradients() {
        let m = zero_model(3, 2);
        let xs = DMatrix::zeros(5, 3);
        let xt = DMatrix::zeros(5, 2);
        let psi = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64);
        for sel in [LossSelector::Recon, LossSelector::FlagEnc] {
            let chk = finite_difference_check(&m, &xs, &xt, &psi, sel, 1e-4, 1).unwrap();
            assert_eq!(chk.max_rel_error, 0.0);
        }
    }

    #[test]
    fn filter_identities() {
        let pos = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j) as f64).sin());
        let neg = DMatrix::from_fn(6, 2, |i, j| ((i + 4 * j) as f64).cos());
        assert_eq!(filter_negative(&pos, &neg, 0.0).unwrap().basis, pos);
        let f = filter_negative(&pos, &neg, 1.0).unwrap();
        assert!((f.negative.transpose() * &f.basis).amax() <= 1e-10);
        let half = filter_negative(&pos, &neg, 0.5).unwrap().basis;
        assert!((&half * 2.0 - (&pos + &f.basis)).amax() < 1e-12);
    }

    #[test]
    fn filter_drops_dependent_negative_columns() {
        let pos = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64);
        let mut neg = DMatrix::zeros(5, 3);
        neg.set_column(0, &DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]));
        neg.set_column(1, &DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0, 0.0]));
        neg.set_column(2, &DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0]));
        let f = filter_negative(&pos, &neg, 1.0).unwrap();
        assert_eq!(f.dropped, vec![1]);
        assert_eq!(f.negative.ncols(), 2);
    }

    #[test]
    fn filter_leaves_orthogonal_basis_alone() {
        let mut pos = DMatrix::zeros(4, 1);
        pos[(0, 0)] = 1.0;
        let mut neg = DMatrix::zeros(4, 1);
        neg[(2, 0)] = 3.0;
        let f = filter_negative(&pos, &neg, 1.0).unwrap();
        assert!((f.basis - pos).amax() <= 1e-12);
    }
}
