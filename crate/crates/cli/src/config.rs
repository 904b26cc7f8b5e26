//! Run configuration: built-in defaults, then an optional JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use vibe_core::blending::{linspace, validate_alphas, BlendConfig};
use vibe_core::flag::FlagScales;
use vibe_core::model::{LossWeights, TrainConfig};

use crate::CliError;

/// Number of path samples when no alphas are given.
pub const DEFAULT_PATH_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub latent_dim: usize,
    pub weights: LossWeights,
    pub sample_loss_warmup: usize,
    pub decoded_kernel_refresh: usize,
    pub sigma_sq: Option<f64>,
    pub k: usize,
    pub scales: Option<Vec<usize>>,
    pub t: f64,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub anchors: usize,
    pub negative_components: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let blend = BlendConfig::default();
        Self {
            learning_rate: train.learning_rate,
            total_steps: train.total_steps,
            hidden_dim: train.hidden_dim,
            n_layers: train.n_layers,
            latent_dim: train.latent_dim,
            weights: train.weights,
            sample_loss_warmup: train.sample_loss_warmup,
            decoded_kernel_refresh: train.decoded_kernel_refresh,
            sigma_sq: train.sigma_sq,
            k: blend.k,
            scales: None,
            t: blend.t,
            alphas: linspace(0.0, 1.0, DEFAULT_PATH_SAMPLES),
            seed: train.seed,
            output_dir: PathBuf::from("vibe_out"),
            anchors: blend.anchors,
            negative_components: blend.negative_components,
        }
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect()
}

fn usize_list(s: &str) -> Result<Vec<usize>, String> {
    parse_list(s)
}

pub(crate) fn f64_list(s: &str) -> Result<Vec<f64>, String> {
    parse_list(s)
}

/// Configuration flags shared by every training subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with any subset of the run configuration fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Adam step size [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Optimization steps [default: 1000]
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Hidden width of both networks [default: 256]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Linear layers per network [default: 4]
    #[arg(long)]
    pub n_layers: Option<usize>,
    /// Latent dimension [default: 6]
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Weight of the encoder kernel-matching loss [default: 1]
    #[arg(long)]
    pub w_flag_enc: Option<f64>,
    /// Weight of the decoder kernel-matching loss [default: 0.01]
    #[arg(long)]
    pub w_flag_dec: Option<f64>,
    /// Weight of the sampled-latent loss [default: 0.01]
    #[arg(long)]
    pub w_sample: Option<f64>,
    /// Weight of the reconstruction loss [default: 1]
    #[arg(long)]
    pub w_recon: Option<f64>,
    /// Steps before the sampled-latent loss switches on [default: 500]
    #[arg(long)]
    pub sample_loss_warmup: Option<usize>,
    /// Steps between rebuilds of the decoded-token kernel [default: 25]
    #[arg(long)]
    pub decoded_kernel_refresh: Option<usize>,
    /// Kernel width for decoded-token graphs [default: derived from the targets]
    #[arg(long)]
    pub sigma_sq: Option<f64>,
    /// Segments per image [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated flag scales [default: 4,8,16,32,64 clipped to the token count]
    #[arg(long, value_parser = usize_list)]
    pub scales: Option<::std::vec::Vec<usize>>,
    /// Diffusion time [default: 1]
    #[arg(long)]
    pub t: Option<f64>,
    /// Comma-separated interpolation weights [default: 20 evenly spaced in 0..=1]
    #[arg(long, value_parser = f64_list, allow_hyphen_values = true)]
    pub alphas: Option<::std::vec::Vec<f64>>,
    /// Random seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving all outputs [default: vibe_out]
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Nystrom anchors, used when the token count exceeds it [default: 1024]
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Negative-graph eigenvectors removed by negblend [default: 4]
    #[arg(long)]
    pub negative_components: Option<usize>,
}

macro_rules! overlay {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        let a = self;
        overlay!(
            cfg,
            a,
            learning_rate,
            total_steps,
            hidden_dim,
            n_layers,
            latent_dim,
            sample_loss_warmup,
            decoded_kernel_refresh,
            k,
            t,
            alphas,
            seed,
            output_dir,
            anchors,
            negative_components
        );
        if self.sigma_sq.is_some() {
            cfg.sigma_sq = self.sigma_sq;
        }
        if self.scales.is_some() {
            cfg.scales = self.scales.clone();
        }
        if let Some(v) = self.w_flag_enc {
            cfg.weights.flag_enc = v;
        }
        if let Some(v) = self.w_flag_dec {
            cfg.weights.flag_dec = v;
        }
        if let Some(v) = self.w_sample {
            cfg.weights.sample = v;
        }
        if let Some(v) = self.w_recon {
            cfg.weights.recon = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("config: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config: {}: {e}", path.display())))
}

impl RunConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            total_steps: self.total_steps,
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            latent_dim: self.latent_dim,
            weights: self.weights,
            sample_loss_warmup: self.sample_loss_warmup,
            seed: self.seed,
            decoded_kernel_refresh: self.decoded_kernel_refresh,
            sigma_sq: self.sigma_sq,
        }
    }

    pub fn blend(&self) -> Result<BlendConfig, CliError> {
        let scales = match &self.scales {
            Some(s) => Some(FlagScales::new(s.clone())?),
            None => None,
        };
        Ok(BlendConfig {
            train: self.train(),
            scales,
            t: self.t,
            k: self.k,
            anchors: self.anchors,
            negative_components: self.negative_components,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.blend()?.validate()?;
        validate_alphas(&self.alphas)?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::usage("output_dir: must not be empty"));
        }
        Ok(())
    }
}
