//! Command-line surface over the fitting, evaluation and recognition
//! pipelines. Every subcommand accepts `--config FILE` with `key = value`
//! lines; explicit flags win over config values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use facefit::camera::Bbox;
use facefit::cascade::{train_cascade, TrainConfig};
use facefit::features::{FeatureConfig, PatchMode};
use facefit::io::config::ConfigFile;
use facefit::io::landmarks::write_landmarks;
use facefit::io::manifest::{
    load_training_samples, read_manifest, write_manifest, write_sweep_dataset, DatasetManifest,
};
use facefit::io::mesh::{read_mesh, write_mesh, MeshData};
use facefit::io::pgm::read_pgm;
use facefit::lstsq::Ridge;
use facefit::metrics::{npde_map, npde_summary, pose_bucket_report, Alignment, EvalRecord};
use facefit::recognition::{
    distances_to_similarity, fuse_scores, rank1_identify, read_pairs_csv, read_scores_csv,
    shape_distance, verify_metrics, write_scores_csv, MatchMode, NormalizationScope, ScoreMatrix,
};
use facefit::shape::{mean_shape, Shape3D, ShapePrior};
use facefit::synth::{
    face_landmark_indices, face_mesh_topology, frontal_template, kfold_split, synth_faces,
    FaceGenConfig, SweepConfig, SyntheticFace,
};

#[derive(Parser)]
#[command(
    name = "facefit",
    about = "Joint face alignment and 3D face reconstruction pipelines",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rendered pose-sweep dataset with ground truth.
    Synth(SynthArgs),
    /// Train a cascade model from a dataset manifest.
    Train(TrainArgs),
    /// Fit landmarks and 3D shapes to one image.
    Fit(FitArgs),
    /// Evaluate landmark alignment (NME) with pose buckets.
    EvalAlign(EvalArgs),
    /// Evaluate 3D reconstruction (MAE, NPDE) with pose buckets.
    EvalRecon(EvalArgs),
    /// Match probe meshes against gallery meshes into a similarity matrix.
    #[command(name = "match-3d")]
    Match3d(Match3dArgs),
    /// Fuse two score matrices with a weighted sum rule.
    Fuse(FuseArgs),
    /// Rank-1 identification over a score matrix.
    Identify(IdentifyArgs),
    /// Verification metrics (accuracy, EER, AUC) over labeled pairs.
    Verify(VerifyArgs),
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Fit(a) => cmd_fit(a),
        Command::EvalAlign(a) => cmd_eval(a, EvalKind::Align),
        Command::EvalRecon(a) => cmd_eval(a, EvalKind::Recon),
        Command::Match3d(a) => cmd_match3d(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Key-value config file providing defaults for optional flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ConfigFile> {
        match &self.config {
            Some(p) => ConfigFile::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(ConfigFile::empty()),
        }
    }
}

/// Flag value, else config value, else default.
fn resolve<T: std::str::FromStr + Copy>(
    flag: Option<T>,
    cfg: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    Ok(cfg
        .get_parsed::<T>(key)
        .map_err(|e| anyhow!("{e}"))?
        .unwrap_or(default))
}

/* ---------------------------------------------------------------- */

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images, landmark files, meshes and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of synthetic subjects to generate.
    #[arg(long)]
    subjects: Option<usize>,
    /// Use registered meshes from this directory instead of generating.
    #[arg(long)]
    mesh_dir: Option<PathBuf>,
    /// Landmark vertex indices, one per line (required with --mesh-dir).
    #[arg(long)]
    landmark_indices: Option<PathBuf>,
    #[arg(long)]
    yaw_start: Option<f64>,
    #[arg(long)]
    yaw_end: Option<f64>,
    #[arg(long)]
    yaw_step: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Gaussian noise on target landmarks, px.
    #[arg(long)]
    noise_landmarks: Option<f64>,
    /// Gaussian noise on target shapes, mm.
    #[arg(long)]
    noise_shape: Option<f64>,
    /// Fraction of the image side the face spans.
    #[arg(long)]
    fill: Option<f64>,
    /// Non-neutral expressions per generated subject.
    #[arg(long)]
    expressions: Option<usize>,
    /// Subject-disjoint folds to assign (0 leaves everything in fold 0).
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
}

fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(
            t.parse::<usize>()
                .with_context(|| format!("{}:{}: bad index {t:?}", path.display(), lineno + 1))?,
        );
    }
    if out.is_empty() {
        bail!("{}: no indices", path.display());
    }
    Ok(out)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let seed = resolve(args.seed, &cfg, "seed", 0u64)?;
    let sweep_cfg = SweepConfig {
        yaw_degrees: {
            let start = resolve(args.yaw_start, &cfg, "yaw_start", -90.0)?;
            let end = resolve(args.yaw_end, &cfg, "yaw_end", 90.0)?;
            let step = resolve(args.yaw_step, &cfg, "yaw_step", 10.0)?;
            if step <= 0.0 || end < start {
                bail!("invalid yaw sweep: start {start}, end {end}, step {step}");
            }
            let mut yaw = start;
            let mut list = Vec::new();
            while yaw <= end + 1e-9 {
                list.push(yaw);
                yaw += step;
            }
            list
        },
        image_size: resolve(args.image_size, &cfg, "image_size", 160)?,
        landmark_noise_px: resolve(args.noise_landmarks, &cfg, "noise_landmarks", 0.0)?,
        shape_noise_mm: resolve(args.noise_shape, &cfg, "noise_shape", 0.0)?,
        fill_fraction: resolve(args.fill, &cfg, "fill", 0.7)?,
        seed,
    };

    let (subjects, landmark_indices, topology) = match &args.mesh_dir {
        Some(dir) => {
            let idx_path = args
                .landmark_indices
                .as_ref()
                .ok_or_else(|| anyhow!("--landmark-indices is required with --mesh-dir"))?;
            let landmark_indices = read_index_file(idx_path)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("obj") | Some("ply")
                    )
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("{}: no .obj or .ply meshes", dir.display());
            }
            let mut subjects = Vec::new();
            let mut topology: Option<Vec<[usize; 3]>> = None;
            for p in &paths {
                let MeshData { shape, faces } = read_mesh(p).map_err(|e| anyhow!("{e}"))?;
                if topology.is_none() {
                    if faces.is_empty() {
                        bail!("{}: mesh has no faces (needed for normals)", p.display());
                    }
                    topology = Some(faces);
                }
                let stem = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("subject")
                    .to_string();
                subjects.push(SyntheticFace {
                    subject: stem,
                    pen: shape,
                    expression_offsets: vec![],
                });
            }
            (subjects, landmark_indices, topology.unwrap())
        }
        None => {
            let count = resolve(args.subjects, &cfg, "subjects", 3usize)?;
            let gen = FaceGenConfig {
                expressions: resolve(args.expressions, &cfg, "expressions", 1usize)?,
                seed,
                ..FaceGenConfig::default()
            };
            (
                synth_faces(count, &gen),
                face_landmark_indices(&gen),
                face_mesh_topology(&gen),
            )
        }
    };

    let (mut manifest, prior) = write_sweep_dataset(
        &args.out,
        &subjects,
        landmark_indices,
        topology,
        &sweep_cfg,
    )
    .map_err(|e| anyhow!("{e}"))?;

    let folds = resolve(args.folds, &cfg, "folds", 0usize)?;
    if folds > 0 {
        let labels: Vec<String> = manifest.entries.iter().map(|e| e.subject.clone()).collect();
        let assignment = kfold_split(&labels, folds, seed).map_err(|e| anyhow!("{e}"))?;
        for (e, f) in manifest.entries.iter_mut().zip(assignment) {
            e.fold = f;
        }
        let metadata: Vec<(String, String)> = manifest
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        write_manifest(args.out.join("manifest.tsv"), &manifest.entries, &metadata)
            .map_err(|e| anyhow!("{e}"))?;
    }

    println!(
        "wrote {} samples ({} subjects, l = {}, n = {}) to {}",
        manifest.entries.len(),
        subjects.len(),
        prior.l(),
        prior.n(),
        args.out.display()
    );
    Ok(())
}

/* ---------------------------------------------------------------- */

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Landmark vertex indices file; defaults to landmark_indices.txt next
    /// to the manifest.
    #[arg(long)]
    landmark_indices: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Cascade stages.
    #[arg(long)]
    stages: Option<usize>,
    /// Trace-scaled ridge factor; 0 uses the exact closed forms.
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Derive the patch size as bbox side / DIV instead of a fixed size.
    #[arg(long)]
    patch_per_bbox: Option<f64>,
    /// Hold out one fold (train on the rest).
    #[arg(long)]
    exclude_fold: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
}

/// Rebuilds the shape prior a manifest implies: mean of the distinct
/// subjects' neutral shapes, connectivity from the first neutral mesh, and
/// the frontal template from the dataset's recorded camera parameters.
fn prior_from_manifest(
    manifest: &DatasetManifest,
    landmark_indices: Vec<usize>,
) -> Result<ShapePrior> {
    let mut seen: Vec<&str> = Vec::new();
    let mut pens: Vec<Shape3D> = Vec::new();
    let mut faces: Option<Vec<[usize; 3]>> = None;
    for e in &manifest.entries {
        if seen.contains(&e.subject.as_str()) {
            continue;
        }
        seen.push(&e.subject);
        let mesh = read_mesh(manifest.root.join(&e.pen_shape)).map_err(|e| anyhow!("{e}"))?;
        if faces.is_none() {
            faces = Some(mesh.faces);
        }
        pens.push(mesh.shape);
    }
    let mean = mean_shape(&pens).map_err(|e| anyhow!("{e}"))?;
    let image_size = manifest.metadata_parsed::<usize>("image_size").unwrap_or(160);
    let fill = manifest.metadata_parsed::<f64>("fill_fraction").unwrap_or(0.7);
    let template = frontal_template(&mean, &landmark_indices, image_size, fill)
        .map_err(|e| anyhow!("{e}"))?;
    ShapePrior::from_faces(mean.flat(), template, landmark_indices, faces.unwrap_or_default())
        .map_err(|e| anyhow!("{e}"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let manifest = read_manifest(&args.manifest).map_err(|e| anyhow!("{e}"))?;
    let idx_path = args
        .landmark_indices
        .clone()
        .unwrap_or_else(|| manifest.root.join("landmark_indices.txt"));
    let landmark_indices = read_index_file(&idx_path)?;
    let prior = prior_from_manifest(&manifest, landmark_indices)?;

    let loaded = load_training_samples(&manifest, &prior).map_err(|e| anyhow!("{e}"))?;
    let exclude = args.exclude_fold;
    let samples: Vec<_> = loaded
        .into_iter()
        .filter(|s| exclude != Some(s.fold))
        .map(|s| s.sample)
        .collect();
    if samples.is_empty() {
        bail!("no training samples left after fold exclusion");
    }

    let ridge_value = resolve(args.ridge, &cfg, "ridge", 1e-3)?;
    let patch_size = resolve(args.patch_size, &cfg, "patch_size", 32usize)?;
    let patch_mode = match resolve(args.patch_per_bbox, &cfg, "patch_per_bbox", f64::NAN)? {
        d if d.is_nan() => PatchMode::Fixed,
        d if d > 0.0 => PatchMode::BboxFraction(d),
        d => bail!("patch_per_bbox must be positive, got {d}"),
    };
    let train_config = TrainConfig {
        stages: resolve(args.stages, &cfg, "stages", 5usize)?,
        ridge: if ridge_value == 0.0 {
            Ridge::Exact
        } else {
            Ridge::TraceScaled(ridge_value)
        },
        feature_config: FeatureConfig {
            patch_size,
            patch_mode,
            ..FeatureConfig::default()
        },
    };

    let (model, trace) = train_cascade(&samples, &prior, &train_config).map_err(|e| anyhow!("{e}"))?;
    println!(
        "trained on {} samples: initial NME {:.4}, MAE {:.3} mm",
        samples.len(),
        trace.initial.nme,
        trace.initial.shape_mae
    );
    for (k, s) in trace.per_stage.iter().enumerate() {
        println!("stage {}: NME {:.4}, MAE {:.3} mm", k + 1, s.nme, s.shape_mae);
    }
    facefit::save_model(&model, &args.out).map_err(|e| anyhow!("{e}"))?;
    println!("model written to {}", args.out.display());
    Ok(())
}

/* ---------------------------------------------------------------- */

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Face box as x,y,w,h in pixels.
    #[arg(long)]
    bbox: String,
    /// Output prefix; writes PREFIX_pen.obj, PREFIX_expr.obj,
    /// PREFIX_landmarks.txt and PREFIX_mapping.txt.
    #[arg(long)]
    out_prefix: String,
    #[command(flatten)]
    config: ConfigArg,
}

fn parse_bbox(s: &str) -> Result<Bbox> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 4 {
        bail!("bbox must be x,y,w,h (got {s:?})");
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad bbox component {p:?}")))
        .collect::<Result<_>>()?;
    Bbox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| anyhow!("{e}"))
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let _ = args.config.load()?;
    let model = facefit::load_model(&args.model).map_err(|e| anyhow!("{e}"))?;
    let image = read_pgm(&args.image).map_err(|e| anyhow!("{e}"))?;
    let bbox = parse_bbox(&args.bbox)?;
    let result = model.fit(&image, &bbox).map_err(|e| anyhow!("{e}"))?;

    let prefix = &args.out_prefix;
    let faces = model.prior.faces().to_vec();
    write_mesh(&result.pen_shape, &faces, format!("{prefix}_pen.obj"))
        .map_err(|e| anyhow!("{e}"))?;
    write_mesh(&result.expressive_shape, &faces, format!("{prefix}_expr.obj"))
        .map_err(|e| anyhow!("{e}"))?;
    write_landmarks(&result.landmarks, format!("{prefix}_landmarks.txt"))
        .map_err(|e| anyhow!("{e}"))?;
    let m = result.mapping.entries();
    let mapping_text = format!(
        "{} {} {} {}\n{} {} {} {}\n",
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(0, 3)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(1, 3)]
    );
    std::fs::write(format!("{prefix}_mapping.txt"), mapping_text)?;
    println!(
        "fit complete: {} of {} landmarks visible{}",
        result.landmarks.num_visible(),
        result.landmarks.len(),
        if result.degraded { " (degraded mapping)" } else { "" }
    );
    Ok(())
}

/* ---------------------------------------------------------------- */

enum EvalKind {
    Align,
    Recon,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    landmark_indices: Option<PathBuf>,
    /// Evaluate only this fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Allow Procrustes scale during shape alignment.
    #[arg(long)]
    scale: bool,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn cmd_eval(args: EvalArgs, kind: EvalKind) -> Result<()> {
    let _ = args.config.load()?;
    let model = facefit::load_model(&args.model).map_err(|e| anyhow!("{e}"))?;
    let manifest = read_manifest(&args.manifest).map_err(|e| anyhow!("{e}"))?;
    let loaded = load_training_samples(&manifest, &model.prior).map_err(|e| anyhow!("{e}"))?;

    let mut records = Vec::new();
    for s in loaded {
        if let Some(f) = args.fold {
            if s.fold != f {
                continue;
            }
        }
        let result = model
            .fit(&s.sample.image, &s.sample.bbox)
            .map_err(|e| anyhow!("{e}"))?;
        records.push(EvalRecord {
            id: s.subject.clone(),
            gt_shape: Shape3D::from_flat(&s.sample.target_state.identity)
                .map_err(|e| anyhow!("{e}"))?,
            est_shape: result.pen_shape,
            gt_landmarks: s.sample.target_landmarks,
            est_landmarks: result.landmarks,
            bbox: s.sample.bbox,
            pose_label: s.yaw_deg,
        });
    }
    if records.is_empty() {
        bail!("no samples to evaluate (check --fold)");
    }
    let alignment = if args.scale {
        Alignment::Similarity
    } else {
        Alignment::Rigid
    };
    let report = pose_bucket_report(&records, alignment).map_err(|e| anyhow!("{e}"))?;
    match kind {
        EvalKind::Align => {
            println!("landmark alignment over {} samples", records.len());
        }
        EvalKind::Recon => {
            println!("3D reconstruction over {} samples", records.len());
            let mut means = Vec::new();
            for r in &records {
                let map = npde_map(&r.gt_shape, &r.est_shape).map_err(|e| anyhow!("{e}"))?;
                let (mean_pct, std_pct) = npde_summary(&map);
                means.push((mean_pct, std_pct));
            }
            let avg_mean = means.iter().map(|m| m.0).sum::<f64>() / means.len() as f64;
            let avg_std = means.iter().map(|m| m.1).sum::<f64>() / means.len() as f64;
            println!("NPDE mean {avg_mean:.2}% (avg per-sample std {avg_std:.2}%)");
        }
    }
    print!("{}", report.to_text());
    if let Some(csv) = &args.csv {
        std::fs::write(csv, report.to_csv())?;
        println!("report csv written to {}", csv.display());
    }
    Ok(())
}

/* ---------------------------------------------------------------- */

#[derive(Args)]
struct Match3dArgs {
    /// Directory of probe meshes (.obj/.ply); file stem is the label
    /// (text before the first '.').
    #[arg(long)]
    probes: PathBuf,
    /// Directory of gallery meshes.
    #[arg(long)]
    gallery: PathBuf,
    /// Output similarity matrix CSV.
    #[arg(long)]
    out: PathBuf,
    /// icp or corresponded.
    #[arg(long, default_value = "icp")]
    mode: String,
    /// Normalize per probe row instead of over the whole matrix.
    #[arg(long)]
    per_row: bool,
    /// Also write the raw distance matrix.
    #[arg(long)]
    distances_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn read_mesh_dir(dir: &Path) -> Result<Vec<(String, Shape3D)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("obj") | Some("ply")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("{}: no meshes", dir.display());
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let label = p
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("sample")
            .to_string();
        out.push((label, read_mesh(&p).map_err(|e| anyhow!("{e}"))?.shape));
    }
    Ok(out)
}

fn cmd_match3d(args: Match3dArgs) -> Result<()> {
    let _ = args.config.load()?;
    let mode = match args.mode.as_str() {
        "icp" => MatchMode::Icp,
        "corresponded" => MatchMode::Corresponded,
        other => bail!("unknown match mode {other:?} (want icp or corresponded)"),
    };
    let probes = read_mesh_dir(&args.probes)?;
    let gallery = read_mesh_dir(&args.gallery)?;
    let mut distances = DMatrix::zeros(probes.len(), gallery.len());
    for (i, (_, p)) in probes.iter().enumerate() {
        for (j, (_, g)) in gallery.iter().enumerate() {
            distances[(i, j)] = shape_distance(p, g, mode).map_err(|e| anyhow!("{e}"))?;
        }
    }
    let d = ScoreMatrix::new(
        probes.iter().map(|(l, _)| l.clone()).collect(),
        gallery.iter().map(|(l, _)| l.clone()).collect(),
        distances,
    )
    .map_err(|e| anyhow!("{e}"))?;
    if let Some(p) = &args.distances_out {
        write_scores_csv(&d, p).map_err(|e| anyhow!("{e}"))?;
    }
    let scope = if args.per_row {
        NormalizationScope::PerRow
    } else {
        NormalizationScope::Global
    };
    let s = distances_to_similarity(&d, scope);
    write_scores_csv(&s, &args.out).map_err(|e| anyhow!("{e}"))?;
    println!(
        "matched {} probes against {} gallery shapes -> {}",
        probes.len(),
        gallery.len(),
        args.out.display()
    );
    Ok(())
}

/* ---------------------------------------------------------------- */

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scores_2d: PathBuf,
    #[arg(long)]
    scores_3d: PathBuf,
    /// Weight on the 2D matcher, in [0, 1].
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let weight = resolve(args.weight, &cfg, "weight", 0.5)?;
    let s2d = read_scores_csv(&args.scores_2d).map_err(|e| anyhow!("{e}"))?;
    let s3d = read_scores_csv(&args.scores_3d).map_err(|e| anyhow!("{e}"))?;
    let fused = fuse_scores(&s2d, &s3d, weight).map_err(|e| anyhow!("{e}"))?;
    write_scores_csv(&fused, &args.out).map_err(|e| anyhow!("{e}"))?;
    println!("fused with w = {weight} -> {}", args.out.display());
    Ok(())
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Optional per-probe prediction CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn cmd_identify(args: IdentifyArgs) -> Result<()> {
    let _ = args.config.load()?;
    let scores = read_scores_csv(&args.scores).map_err(|e| anyhow!("{e}"))?;
    let result = rank1_identify(&scores).map_err(|e| anyhow!("{e}"))?;
    println!("rank-1 accuracy: {:.2}%", result.rank1_accuracy_pct);
    if let Some(out) = &args.out {
        let mut text = String::from("probe,predicted\n");
        for (p, pred) in scores.probe_labels.iter().zip(&result.predictions) {
            text.push_str(&format!("{p},{pred}\n"));
        }
        std::fs::write(out, text)?;
        println!("predictions written to {}", out.display());
    }
    Ok(())
}

#[derive(Args)]
struct VerifyArgs {
    /// Pairs CSV: path_a,path_b,same(0|1). Mesh paths are relative to the
    /// CSV's directory.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value = "icp")]
    mode: String,
    #[command(flatten)]
    config: ConfigArg,
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let _ = args.config.load()?;
    let mode = match args.mode.as_str() {
        "icp" => MatchMode::Icp,
        "corresponded" => MatchMode::Corresponded,
        other => bail!("unknown match mode {other:?} (want icp or corresponded)"),
    };
    let pairs = read_pairs_csv(&args.pairs).map_err(|e| anyhow!("{e}"))?;
    let root = args.pairs.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut cache: BTreeMap<String, Shape3D> = BTreeMap::new();
    let load = |path: &str, cache: &mut BTreeMap<String, Shape3D>| -> Result<Shape3D> {
        if let Some(s) = cache.get(path) {
            return Ok(s.clone());
        }
        let shape = read_mesh(root.join(path)).map_err(|e| anyhow!("{e}"))?.shape;
        cache.insert(path.to_string(), shape.clone());
        Ok(shape)
    };
    let mut distances = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let a = load(&pair.path_a, &mut cache)?;
        let b = load(&pair.path_b, &mut cache)?;
        distances.push(shape_distance(&a, &b, mode).map_err(|e| anyhow!("{e}"))?);
    }
    // Same conversion as the matcher: subtract from the max, then min-max.
    let max_d = distances.iter().cloned().fold(f64::MIN, f64::max);
    let mut sims: Vec<f64> = distances.iter().map(|d| max_d - d).collect();
    let max_s = sims.iter().cloned().fold(f64::MIN, f64::max);
    let min_s = sims.iter().cloned().fold(f64::MAX, f64::min);
    let range = max_s - min_s;
    if range > 0.0 {
        sims.iter_mut().for_each(|s| *s = (*s - min_s) / range);
    } else {
        sims.iter_mut().for_each(|s| *s = 0.0);
    }
    let genuine: Vec<f64> = pairs
        .iter()
        .zip(&sims)
        .filter(|(p, _)| p.same)
        .map(|(_, s)| *s)
        .collect();
    let imposter: Vec<f64> = pairs
        .iter()
        .zip(&sims)
        .filter(|(p, _)| !p.same)
        .map(|(_, s)| *s)
        .collect();
    let report = verify_metrics(&genuine, &imposter).map_err(|e| anyhow!("{e}"))?;
    println!(
        "pairs: {} genuine, {} imposter",
        genuine.len(),
        imposter.len()
    );
    println!("Accuracy: {:.2}% (threshold {:.4})", report.accuracy_pct, report.threshold);
    println!("EER:      {:.2}% (threshold {:.4})", report.eer_pct, report.eer_threshold);
    println!("AUC:      {:.2}%", report.auc_pct);
    Ok(())
}
