//! Subcommand definitions and their file-level behavior.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vibe_core::blending::{
    export_blend_path, n_blend, negative_blend, read_blend_export, vibe_analogy, vibe_blend, vibe_blend_extra,
    BlendConfig, BlendRun,
};
use vibe_core::correspondence::{correspond, segment_tokens, write_segmentation_file, ImageTokens};
use vibe_core::feature_io::{read_feature_file, synth_point_cloud, write_feature_file, CloudKind, FeatureGrid, FeatureSpace};
use vibe_core::flag::FlagScales;
use vibe_core::linalg::vstack;
use vibe_core::metrics::{
    bt_fit, diversity, masked_similarity, pns_batch, select_alpha, DirectoryProvider, Distance, PnsReport,
};
use vibe_core::model::{kernel_basis, train_vibe_space};
use vibe_core::model_file::{read_model_file, write_model_file};
use vibe_core::spectral::{build_affinity, nystrom_diffusion_map, solve_diffusion_map, DiffusionMap};
use vibe_core::synthetic::{synth_image_set, SceneSpec};

use crate::config::{ConfigArgs, RunConfig};
use crate::CliError;

pub const MODEL_FILE: &str = "model.vibm";
pub const ORIGIN_FILE: &str = "origin.vibe";
pub const DIRECTION_FILE: &str = "direction.vibe";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic point cloud or a set of synthetic scene grids
    Synth(SynthArgs),
    /// Diffusion eigenvectors of one or more stacked feature files
    Eigenmap(EigenmapArgs),
    /// Train an encoder/decoder pair
    Train(TrainArgs),
    /// Blend image A toward image B
    Blend(BlendArgs),
    /// Apply the A-to-B change to A'
    Analogy(AnalogyArgs),
    /// Blend with a negative pair's shared directions filtered out
    Negblend(NegblendArgs),
    /// Weighted blend of several images around a base image
    Nblend(NblendArgs),
    /// Path nonlinearity scores of exported blend paths
    Pns(PnsArgs),
    /// Pick the blend weight where realized features drift most from the ideal path
    SelectAlpha(SelectAlphaArgs),
    /// Segment two images and match their segments
    Match(MatchArgs),
    /// Mean pairwise distance between pooled feature files
    Diversity(DiversityArgs),
    /// Cosine similarity of mean features inside two masks
    MaskedSim(MaskedSimArgs),
    /// Bradley-Terry strengths from pairwise comparisons
    Btfit(BtfitArgs),
}

pub fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Eigenmap(a) => eigenmap(a),
        Command::Train(a) => train(a),
        Command::Blend(a) => blend(a),
        Command::Analogy(a) => analogy(a),
        Command::Negblend(a) => negblend(a),
        Command::Nblend(a) => nblend(a),
        Command::Pns(a) => pns(a),
        Command::SelectAlpha(a) => select(a),
        Command::Match(a) => match_cmd(a),
        Command::Diversity(a) => diversity_cmd(a),
        Command::MaskedSim(a) => masked_sim(a),
        Command::Btfit(a) => btfit(a),
    }
}

fn read_grid(path: &Path) -> Result<FeatureGrid, CliError> {
    Ok(read_feature_file(path)?)
}

fn read_grids(paths: &[PathBuf]) -> Result<Vec<FeatureGrid>, CliError> {
    paths.iter().map(|p| read_grid(p)).collect()
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, field: &str) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{field}: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{field}: {}: {e}", path.display())))
}

/// Targets paired with sources; sources double as targets when none are given.
fn pair_targets(sources: &[FeatureGrid], targets: Vec<FeatureGrid>, flag: &str) -> Result<Vec<FeatureGrid>, CliError> {
    if targets.is_empty() {
        return Ok(sources.to_vec());
    }
    if targets.len() != sources.len() {
        return Err(CliError::usage(format!(
            "{flag}: expected {} target files, got {}",
            sources.len(),
            targets.len()
        )));
    }
    Ok(targets)
}

fn optional_target(source: &FeatureGrid, target: &Option<PathBuf>) -> Result<FeatureGrid, CliError> {
    match target {
        Some(p) => read_grid(p),
        None => Ok(source.clone()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// circle, swiss_roll, two_arcs or scene
    #[arg(long)]
    kind: String,
    /// Points in the cloud
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Maximum displacement per point (clouds) or token noise scale (scenes)
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file for clouds [default: <output-dir>/<kind>.vibe]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for scene grids
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
    /// Scene images to generate
    #[arg(long, default_value_t = 2)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    source_dim: usize,
    #[arg(long, default_value_t = 32)]
    target_dim: usize,
    /// Regions per scene
    #[arg(long, default_value_t = 4)]
    segments: usize,
    /// Per-image style offset scale
    #[arg(long, default_value_t = 0.5)]
    style: f64,
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    if a.kind == "scene" {
        let spec = SceneSpec {
            height: a.height,
            width: a.width,
            source_dim: a.source_dim,
            target_dim: a.target_dim,
            segments: a.segments,
            style: a.style,
            noise: a.noise,
            seed: a.seed,
        };
        if a.count == 0 {
            return Err(CliError::usage("count: must be positive"));
        }
        let images = synth_image_set(&spec, a.count)?;
        ensure_dir(&a.output_dir)?;
        let mut files = Vec::new();
        for img in &images {
            let id = img.source.image_id().to_string();
            for (grid, tag) in [(&img.source, "source"), (&img.target, "target")] {
                let name = format!("{id}.{tag}.vibe");
                write_feature_file(grid, a.output_dir.join(&name))?;
                files.push(name);
            }
        }
        write_json(&a.output_dir.join("scenes.json"), &json!({ "spec": spec, "files": files }))?;
        println!("wrote {} scenes to {}", images.len(), a.output_dir.display());
        return Ok(());
    }
    let kind: CloudKind = a.kind.parse()?;
    let grid = synth_point_cloud(kind, a.n, a.noise, a.seed)?;
    let out = match a.out {
        Some(p) => p,
        None => {
            ensure_dir(&a.output_dir)?;
            a.output_dir.join(format!("{}.vibe", a.kind))
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_feature_file(&grid, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EigenmapArgs {
    /// Feature files, stacked in order
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Eigenpairs to keep
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Diffusion time
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    /// Kernel width [default: summed per-dimension variance]
    #[arg(long)]
    sigma_sq: Option<f64>,
    /// Use a Nystrom approximation with this many anchors
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn eigenmap(a: EigenmapArgs) -> Result<(), CliError> {
    let grids = read_grids(&a.inputs)?;
    let tokens = vstack(&grids.iter().map(|g| g.tokens()).collect::<Vec<_>>());
    let (map, sigma_sq, nystrom): (DiffusionMap, f64, bool) = match a.anchors {
        Some(s) => {
            let nm = nystrom_diffusion_map(&tokens, a.sigma_sq, s, a.m, a.t, a.seed)?;
            (nm.map, nm.sigma_sq, true)
        }
        None => {
            let g = build_affinity(&tokens, a.sigma_sq)?;
            (solve_diffusion_map(&g, a.m, a.t)?, g.sigma_sq(), false)
        }
    };
    ensure_dir(&a.output_dir)?;
    let psi = FeatureGrid::from_rows("eigenvectors", FeatureSpace::Raw, map.eigenvectors().clone())?;
    write_feature_file(&psi, a.output_dir.join("eigenvectors.vibe"))?;
    let coords = FeatureGrid::from_rows("diffusion_coordinates", FeatureSpace::Raw, map.embedding())?;
    write_feature_file(&coords, a.output_dir.join("coordinates.vibe"))?;
    write_json(
        &a.output_dir.join(METRICS_FILE),
        &json!({
            "n": map.n(),
            "m": map.m(),
            "t": map.t(),
            "sigma_sq": sigma_sq,
            "nystrom": nystrom,
            "eigenvalues": map.eigenvalues().as_slice(),
            "image_ids": grids.iter().map(|g| g.image_id()).collect::<Vec<_>>(),
        }),
    )?;
    println!("wrote eigenmap of {} tokens to {}", map.n(), a.output_dir.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Source feature files, stacked in order
    #[arg(long = "source", required = true)]
    sources: Vec<PathBuf>,
    /// Target feature files, one per source [default: the sources]
    #[arg(long = "target")]
    targets: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let sources = read_grids(&a.sources)?;
    let targets = pair_targets(&sources, read_grids(&a.targets)?, "target")?;
    let xs = vstack(&sources.iter().map(|g| g.tokens()).collect::<Vec<_>>());
    let xt = vstack(&targets.iter().map(|g| g.tokens()).collect::<Vec<_>>());
    let n = xs.nrows();
    let blend = cfg.blend()?;
    let scales = match &blend.scales {
        Some(s) => s.clone(),
        None => FlagScales::default_for(n.min(blend.anchors))?,
    };
    let map = if n <= blend.anchors {
        let g = build_affinity(&xs, None)?;
        solve_diffusion_map(&g, scales.max(), blend.t)?
    } else {
        nystrom_diffusion_map(&xs, None, blend.anchors, scales.max(), blend.t, cfg.seed)?.map
    };
    let model = train_vibe_space(&xs, &xt, &kernel_basis(&map), &scales, &cfg.train())?;
    ensure_dir(&cfg.output_dir)?;
    write_model_file(&model, cfg.output_dir.join(MODEL_FILE))?;
    write_json(
        &cfg.output_dir.join(METRICS_FILE),
        &json!({
            "config": cfg,
            "scales": scales,
            "param_count": model.param_count(),
            "report": model.report(),
        }),
    )?;
    println!("wrote {}", cfg.output_dir.join(MODEL_FILE).display());
    Ok(())
}

/// Writes the path export, model, latent endpoints and run metrics.
fn write_run(run: &BlendRun, cfg: &RunConfig, blend: &BlendConfig, extra: serde_json::Value) -> Result<(), CliError> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    export_blend_path(&run.path, blend, dir)?;
    write_model_file(&run.space.model, dir.join(MODEL_FILE))?;
    let (h, w) = (run.path.height, run.path.width);
    let origin = FeatureGrid::new("origin", h, w, FeatureSpace::Raw, run.path.origin.clone())?;
    write_feature_file(&origin, dir.join(ORIGIN_FILE))?;
    let direction = FeatureGrid::new("direction", h, w, FeatureSpace::Raw, run.path.direction.clone())?;
    write_feature_file(&direction, dir.join(DIRECTION_FILE))?;
    write_segmentation_file(&run.correspondence.seg_a, dir.join("segmentation_a.json"))?;
    write_segmentation_file(&run.correspondence.seg_b, dir.join("segmentation_b.json"))?;
    let pns = path_pns(&run.path.pooled());
    write_json(
        &dir.join(METRICS_FILE),
        &json!({
            "image_ids": run.path.image_ids,
            "alphas": run.path.alphas,
            "collinearity_error": run.path.collinearity_error(),
            "correspondence": { "pi": run.correspondence.pi, "cost": run.correspondence.cost },
            "pns": pns,
            "report": run.space.model.report(),
            "extra": extra,
        }),
    )?;
    println!("wrote {} path points to {}", run.path.len(), dir.display());
    Ok(())
}

fn path_pns(pooled: &[Vec<f64>]) -> Option<PnsReport> {
    let pts: Vec<DVector<f64>> = pooled.iter().map(|r| DVector::from_column_slice(r)).collect();
    pns_batch(&[pts]).ok().map(|r| r[0])
}

#[derive(Debug, Args)]
pub struct BlendArgs {
    /// Source features of the start image
    #[arg(long)]
    a: PathBuf,
    /// Source features of the end image
    #[arg(long)]
    b: PathBuf,
    /// Target features of A [default: A's source features]
    #[arg(long)]
    a_target: Option<PathBuf>,
    /// Target features of B [default: B's source features]
    #[arg(long)]
    b_target: Option<PathBuf>,
    /// Extra source files used only for training
    #[arg(long = "extra")]
    extra: Vec<PathBuf>,
    /// Target files for the extra sources [default: the extra sources]
    #[arg(long = "extra-target")]
    extra_targets: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn blend(a: BlendArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let blend = cfg.blend()?;
    let ga = read_grid(&a.a)?;
    let gb = read_grid(&a.b)?;
    let ta = optional_target(&ga, &a.a_target)?;
    let tb = optional_target(&gb, &a.b_target)?;
    let run = if a.extra.is_empty() {
        vibe_blend(&ga, &gb, &ta, &tb, &blend, &cfg.alphas)?
    } else {
        let extra = read_grids(&a.extra)?;
        let extra_t = pair_targets(&extra, read_grids(&a.extra_targets)?, "extra-target")?;
        let mut sources = vec![&ga, &gb];
        sources.extend(extra.iter());
        let mut targets = vec![&ta, &tb];
        targets.extend(extra_t.iter());
        vibe_blend_extra(&sources, &targets, (0, 1), &blend, &cfg.alphas)?
    };
    write_run(&run, &cfg, &blend, json!({ "extra_images": a.extra.len() }))
}

#[derive(Debug, Args)]
pub struct AnalogyArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Image receiving the A-to-B change
    #[arg(long)]
    a_prime: PathBuf,
    #[arg(long)]
    a_target: Option<PathBuf>,
    #[arg(long)]
    b_target: Option<PathBuf>,
    #[arg(long)]
    a_prime_target: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn analogy(a: AnalogyArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let blend = cfg.blend()?;
    let ga = read_grid(&a.a)?;
    let gb = read_grid(&a.b)?;
    let gp = read_grid(&a.a_prime)?;
    let ta = optional_target(&ga, &a.a_target)?;
    let tb = optional_target(&gb, &a.b_target)?;
    let tp = optional_target(&gp, &a.a_prime_target)?;
    let run = vibe_analogy([&ga, &gb, &gp], [&ta, &tb, &tp], &blend, &cfg.alphas)?;
    write_run(&run, &cfg, &blend, json!({}))
}

#[derive(Debug, Args)]
pub struct NegblendArgs {
    /// Positive pair, start image
    #[arg(long)]
    a: PathBuf,
    /// Positive pair, end image
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    a_target: Option<PathBuf>,
    #[arg(long)]
    b_target: Option<PathBuf>,
    /// Negative pair, first image
    #[arg(long)]
    neg_a: PathBuf,
    /// Negative pair, second image
    #[arg(long)]
    neg_c: PathBuf,
    /// Strength of the negative filtering; 1 removes the negative span
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

fn negblend(a: NegblendArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let blend = cfg.blend()?;
    let ga = read_grid(&a.a)?;
    let gb = read_grid(&a.b)?;
    let ta = optional_target(&ga, &a.a_target)?;
    let tb = optional_target(&gb, &a.b_target)?;
    let na = read_grid(&a.neg_a)?;
    let nc = read_grid(&a.neg_c)?;
    let (run, filtered) = negative_blend(&ga, &gb, &ta, &tb, &na, &nc, a.beta, &blend, &cfg.alphas)?;
    let residual = (filtered.negative.transpose() * &filtered.basis).amax();
    write_run(
        &run,
        &cfg,
        &blend,
        json!({
            "beta": a.beta,
            "negative_columns": filtered.negative.ncols(),
            "dropped_negative_columns": filtered.dropped,
            "negative_overlap": residual,
        }),
    )
}

#[derive(Debug, Args)]
pub struct NblendArgs {
    /// Source files of all images
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Target files, one per input [default: the inputs]
    #[arg(long = "target")]
    targets: Vec<PathBuf>,
    /// Index of the base image
    #[arg(long, default_value_t = 0)]
    base: usize,
    /// Comma-separated weights, one per non-base image
    #[arg(long, value_parser = crate::config::f64_list, allow_hyphen_values = true)]
    weights: ::std::vec::Vec<f64>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn nblend(a: NblendArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let blend = cfg.blend()?;
    let sources = read_grids(&a.inputs)?;
    let targets = pair_targets(&sources, read_grids(&a.targets)?, "target")?;
    if a.base >= sources.len() {
        return Err(CliError::usage(format!("base: must be below {}", sources.len())));
    }
    let out = n_blend(
        &sources.iter().collect::<Vec<_>>(),
        &targets.iter().collect::<Vec<_>>(),
        a.base,
        &a.weights,
        &blend,
    )?;
    let base = &sources[a.base];
    ensure_dir(&cfg.output_dir)?;
    let grid = FeatureGrid::new(
        format!("nblend:{}", base.image_id()),
        base.height(),
        base.width(),
        FeatureSpace::Target,
        out.decoded.clone(),
    )?;
    write_feature_file(&grid, cfg.output_dir.join("nblend.vibe"))?;
    write_model_file(&out.space.model, cfg.output_dir.join(MODEL_FILE))?;
    write_json(
        &cfg.output_dir.join(METRICS_FILE),
        &json!({
            "base": a.base,
            "weights": a.weights,
            "image_ids": sources.iter().map(|g| g.image_id()).collect::<Vec<_>>(),
            "correspondences": out.correspondences.iter().map(|c| json!({"pi": c.pi, "cost": c.cost})).collect::<Vec<_>>(),
            "report": out.space.model.report(),
        }),
    )?;
    println!("wrote {}", cfg.output_dir.join("nblend.vibe").display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct PnsArgs {
    /// Exported blend directories; scores are normalized across all of them
    #[arg(long = "path-dir", required = true)]
    path_dirs: Vec<PathBuf>,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct PnsRow {
    pair_id: String,
    length_ratio: f64,
    direction_change: f64,
    normalized_pns: f64,
}

fn pns(a: PnsArgs) -> Result<(), CliError> {
    let mut ids = Vec::new();
    let mut paths = Vec::new();
    for dir in &a.path_dirs {
        let (manifest, grids) = read_blend_export(dir)?;
        ids.push(manifest.image_ids.join("->"));
        paths.push(
            grids
                .iter()
                .map(|g| g.tokens().row_mean().transpose())
                .collect::<Vec<DVector<f64>>>(),
        );
    }
    let reports = pns_batch(&paths)?;
    let rows: Vec<PnsRow> = ids
        .into_iter()
        .zip(reports)
        .map(|(pair_id, r)| PnsRow {
            pair_id,
            length_ratio: r.length_ratio,
            direction_change: r.mean_direction_change,
            normalized_pns: r.normalized_pns,
        })
        .collect();
    ensure_dir(&a.output_dir)?;
    write_json(&a.output_dir.join(METRICS_FILE), &rows)?;
    for r in &rows {
        println!("{}\t{:.6}\t{:.6}\t{:.6}", r.pair_id, r.length_ratio, r.direction_change, r.normalized_pns);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SelectAlphaArgs {
    /// Exported blend directory (manifest, model and latent endpoints)
    #[arg(long)]
    path_dir: PathBuf,
    /// Directory of realized_NNN.vibe files [default: the path directory]
    #[arg(long)]
    realized_dir: Option<PathBuf>,
    /// Segments for scoring [default: the blend's k]
    #[arg(long)]
    k: Option<usize>,
    /// Segmentation seed [default: the blend's seed]
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn select(a: SelectAlphaArgs) -> Result<(), CliError> {
    let (manifest, _) = read_blend_export(&a.path_dir)?;
    let model = read_model_file(a.path_dir.join(MODEL_FILE))?;
    let origin = read_grid(&a.path_dir.join(ORIGIN_FILE))?.into_tokens();
    let direction = read_grid(&a.path_dir.join(DIRECTION_FILE))?.into_tokens();
    let mut provider = DirectoryProvider::new(a.realized_dir.as_ref().unwrap_or(&a.path_dir));
    let k = a.k.unwrap_or(manifest.k);
    let seed = a.seed.unwrap_or(manifest.seed);
    let sel = select_alpha(&model, &origin, &direction, &manifest.alphas, &mut provider, k, seed)?;
    ensure_dir(&a.output_dir)?;
    write_json(&a.output_dir.join(METRICS_FILE), &json!({ "alpha": sel.alpha, "scores": sel.scores }))?;
    println!("alpha {}", sel.alpha);
    Ok(())
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Segments per image
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn match_cmd(a: MatchArgs) -> Result<(), CliError> {
    let ga = read_grid(&a.a)?;
    let gb = read_grid(&a.b)?;
    let tokens = vstack(&[ga.tokens(), gb.tokens()]);
    let graph = build_affinity(&tokens, None)?;
    let map = solve_diffusion_map(&graph, a.k.max(1), a.t)?;
    let psi_a = map.eigenvectors().rows(0, ga.len()).into_owned();
    let psi_b = map.eigenvectors().rows(ga.len(), gb.len()).into_owned();
    let seg_a = segment_tokens(ga.image_id(), &psi_a, a.k, a.seed)?;
    let seg_b = segment_tokens(gb.image_id(), &psi_b, a.k, a.seed)?;
    let view = |g: &'_ FeatureGrid, psi: &'_ DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) { (g.tokens().clone(), psi.clone()) };
    let (xa, pa) = view(&ga, &psi_a);
    let (xb, pb) = view(&gb, &psi_b);
    let corr = correspond(
        ImageTokens { image_id: ga.image_id(), source: &xa, psi: &pa, latent: &xa },
        ImageTokens { image_id: gb.image_id(), source: &xb, psi: &pb, latent: &xb },
        seg_a,
        seg_b,
    )?;
    ensure_dir(&a.output_dir)?;
    write_segmentation_file(&corr.seg_a, a.output_dir.join("segmentation_a.json"))?;
    write_segmentation_file(&corr.seg_b, a.output_dir.join("segmentation_b.json"))?;
    write_json(
        &a.output_dir.join(METRICS_FILE),
        &json!({ "image_ids": [ga.image_id(), gb.image_id()], "k": a.k, "pi": corr.pi, "cost": corr.cost }),
    )?;
    println!("cost {}", corr.cost);
    Ok(())
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    /// Feature files; each is mean-pooled to one vector
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// cosine or euclidean
    #[arg(long, default_value = "cosine")]
    dist: String,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn diversity_cmd(a: DiversityArgs) -> Result<(), CliError> {
    let dist: Distance = a.dist.parse()?;
    let grids = read_grids(&a.inputs)?;
    let pooled: Vec<DVector<f64>> = grids.iter().map(|g| g.tokens().row_mean().transpose()).collect();
    let v = diversity(&pooled, dist)?;
    ensure_dir(&a.output_dir)?;
    write_json(&a.output_dir.join(METRICS_FILE), &json!({ "diversity": v, "items": pooled.len(), "dist": dist }))?;
    println!("{v}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct MaskedSimArgs {
    #[arg(long)]
    a: PathBuf,
    /// JSON array of booleans, one per token of A
    #[arg(long)]
    mask_a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// JSON array of booleans, one per token of B
    #[arg(long)]
    mask_b: PathBuf,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn masked_sim(a: MaskedSimArgs) -> Result<(), CliError> {
    let ga = read_grid(&a.a)?;
    let gb = read_grid(&a.b)?;
    let ma: Vec<bool> = read_json(&a.mask_a, "mask_a")?;
    let mb: Vec<bool> = read_json(&a.mask_b, "mask_b")?;
    let s = masked_similarity(ga.tokens(), &ma, gb.tokens(), &mb)?;
    ensure_dir(&a.output_dir)?;
    write_json(&a.output_dir.join(METRICS_FILE), &json!({ "similarity": s }))?;
    println!("{s}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct BtfitArgs {
    /// JSON array of [winner, loser] pairs
    #[arg(long)]
    comparisons: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value = "vibe_out")]
    output_dir: PathBuf,
}

fn btfit(a: BtfitArgs) -> Result<(), CliError> {
    let pairs: Vec<(String, String)> = read_json(&a.comparisons, "comparisons")?;
    let scores = bt_fit(&pairs, a.max_iters, a.tol)?;
    let bins = scores.tertile_bins();
    ensure_dir(&a.output_dir)?;
    write_json(
        &a.output_dir.join(METRICS_FILE),
        &json!({
            "items": scores.items,
            "strengths": scores.strengths,
            "converged": scores.converged,
            "iterations": scores.iterations,
            "bins": bins,
        }),
    )?;
    for (item, s) in scores.items.iter().zip(&scores.strengths) {
        println!("{item}\t{s:.6}");
    }
    Ok(())
}
