//! Command implementations shared by the binary and the tests.
//!
//! Every `cmd_*` function validates the config, writes `config.lock` into
//! its output directory and only then starts work.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basegen::{expand_training_set, make_base_image, BaseGenConfig};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::PipelineConfig;
use crate::detecteval::{pr_curve_at, read_detections, resolve_ground_truth, write_ap_json, write_pr_csv, PrCurve};
use crate::error::{Error, Result};
use crate::featurenet::FeatureBackend;
use crate::image::{list_png_files, load_image, load_manifest, read_manifest, save_image, save_manifest};
use crate::image::{ContentEntry, DatasetManifest, Image};
use crate::losses::{atki_loss, style_loss, LossConfig};
use crate::stylebank::{Branch, StyleBankParams};
use crate::trainer::{train, TrainOutcome, TrainingData};

fn prepare(cfg: &PipelineConfig, out_dir: &Path) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_lock(out_dir)?;
    Ok(())
}

/// Resolves an input path, failing validation when it does not exist.
fn input_path(path: &Path, what: &str) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|_| Error::Config(format!("{what} {} does not exist", path.display())))
}

fn manifest_arg(cfg: &PipelineConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let p = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("no input manifest: pass --manifest or set paths.manifest".into()))?;
    input_path(&p, "manifest")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn run_basegen(cfg: &PipelineConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    let colormap = cfg.basegen.resolve_colormap()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = DatasetManifest {
        content: Vec::with_capacity(manifest.content.len()),
        styles: manifest.styles.clone(),
    };
    for (i, entry) in manifest.content.iter().enumerate() {
        let depth = load_image(&entry.path)?.to_gray();
        let per_image = BaseGenConfig {
            rng_seed: cfg.basegen.rng_seed.wrapping_add(i as u64),
            ..cfg.basegen.clone()
        };
        let base = make_base_image(&depth, &colormap, &per_image)?;
        let path = out_dir.join(format!("base_{i:05}.png"));
        save_image(&base, &path)?;
        out.content.push(ContentEntry {
            path,
            boxes: entry.boxes.clone(),
        });
    }
    save_manifest(&out, &out_dir.join("manifest.json"))?;
    Ok(out)
}

/// One base image per depth image, plus `manifest.json` carrying the boxes
/// and style sets through unchanged. An empty manifest is not an error.
pub fn cmd_basegen(cfg: &PipelineConfig, manifest: Option<&Path>, out_dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    run_basegen(cfg, &read_manifest(&path)?, out_dir)
}

fn run_train(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
    backend: &FeatureBackend,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    if manifest.styles.is_empty() {
        return Err(Error::Config("the training manifest has no style sets".into()));
    }
    cfg.loss.validate_for(backend)?;
    let data = TrainingData::load(manifest)?;
    train(&data, backend, &cfg.train_settings(), Some(out_dir), resume)
}

/// Trains a network, writing `metrics.csv` and `ckpt_{iteration}.bin` files.
pub fn cmd_train_style(
    cfg: &PipelineConfig,
    manifest: Option<&Path>,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    let backend = cfg.backend.build()?;
    run_train(cfg, &load_manifest(&path)?, &backend, out_dir, resume)
}

fn run_stylize(
    params: &StyleBankParams,
    manifest: &DatasetManifest,
    style_id: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if style_id >= params.n_styles() {
        return Err(Error::StyleOutOfRange {
            style_id,
            n_styles: params.n_styles(),
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = DatasetManifest::default();
    for (i, entry) in manifest.content.iter().enumerate() {
        let img = load_image(&entry.path)?;
        let styled = params.forward(&img, Branch::Stylize(style_id))?;
        let path = out_dir.join(format!("styled_{i:05}.png"));
        save_image(&styled, &path)?;
        out.content.push(ContentEntry {
            path,
            boxes: entry.boxes.clone(),
        });
    }
    save_manifest(&out, &out_dir.join("manifest.json"))?;
    Ok(out)
}

fn checkpoint_arg(cfg: &PipelineConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let p = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint: pass --checkpoint or set paths.checkpoint".into()))?;
    input_path(&p, "checkpoint")
}

/// Renders every content image in one style. Boxes are kept as they are.
pub fn cmd_stylize(
    cfg: &PipelineConfig,
    checkpoint: Option<&Path>,
    manifest: Option<&Path>,
    style_id: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let ckpt_path = checkpoint_arg(cfg, checkpoint)?;
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;
    run_stylize(&ckpt.params, &read_manifest(&path)?, style_id, out_dir)
}

/// Flipped, affinely jittered polarity pairs for detector training.
pub fn cmd_augment(cfg: &PipelineConfig, manifest: Option<&Path>, copies: usize, out_dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    expand_training_set(&read_manifest(&path)?, &cfg.augment, copies, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleDistances {
    pub atki_distance: f64,
    pub gram_distance: f64,
}

/// Mean ATKI and Gram distances over the given `(a, b)` index pairs.
pub fn style_distances(
    backend: &FeatureBackend,
    loss: &LossConfig,
    a: &[Image],
    b: &[Image],
    pairs: &[(usize, usize)],
) -> Result<StyleDistances> {
    if pairs.is_empty() {
        return Err(Error::Eval("no image pairs to compare".into()));
    }
    loss.validate_for(backend)?;
    let taps = loss.style_taps(backend);
    let mut d = StyleDistances {
        atki_distance: 0.0,
        gram_distance: 0.0,
    };
    for &(i, j) in pairs {
        d.atki_distance += atki_loss(&a[i], &b[j], loss.k)?;
        d.gram_distance += style_loss(backend, &a[i], &b[j], &taps)?;
    }
    let n = pairs.len() as f64;
    d.atki_distance /= n;
    d.gram_distance /= n;
    Ok(d)
}

/// Distances from one image to every member of a set, averaged.
pub fn distance_to_set(backend: &FeatureBackend, loss: &LossConfig, img: &Image, set: &[Image]) -> Result<StyleDistances> {
    let pairs: Vec<(usize, usize)> = (0..set.len()).map(|j| (0, j)).collect();
    style_distances(backend, loss, std::slice::from_ref(img), set, &pairs)
}

/// Images of a set given as a directory of PNGs or a manifest's content.
pub fn load_image_set(path: &Path) -> Result<Vec<Image>> {
    let path = input_path(path, "image set")?;
    let files = if path.is_dir() {
        list_png_files(&path)?
    } else {
        read_manifest(&path)?.content.into_iter().map(|c| c.path).collect()
    };
    if files.is_empty() {
        return Err(Error::Eval(format!("image set {} is empty", path.display())));
    }
    files.iter().map(|p| load_image(p)).collect()
}

fn eval_pairs(cfg: &PipelineConfig, na: usize, nb: usize) -> Result<Vec<(usize, usize)>> {
    if cfg.eval.pairing == "aligned" {
        if na != nb {
            return Err(Error::Eval(format!("aligned pairing needs equal set sizes, got {na} and {nb}")));
        }
        return Ok((0..na).map(|i| (i, i)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    Ok((0..cfg.eval.pairs)
        .map(|_| (rng.gen_range(0..na), rng.gen_range(0..nb)))
        .collect())
}

pub const STYLE_METRICS_FILE: &str = "style_metrics.json";

/// Set-level ATKI and Gram distances, written to `style_metrics.json`.
pub fn cmd_eval_style(cfg: &PipelineConfig, set_a: &Path, set_b: &Path, out_dir: &Path) -> Result<StyleDistances> {
    prepare(cfg, out_dir)?;
    let a = load_image_set(set_a)?;
    let b = load_image_set(set_b)?;
    let backend = cfg.backend.build()?;
    let d = style_distances(&backend, &cfg.loss, &a, &b, &eval_pairs(cfg, a.len(), b.len())?)?;
    write_json(&out_dir.join(STYLE_METRICS_FILE), &d)?;
    Ok(d)
}

/// Precision-recall curve (`pr.csv`) and average precision (`ap.json`).
pub fn cmd_eval_detect(
    cfg: &PipelineConfig,
    detections: &Path,
    manifest: Option<&Path>,
    out_dir: &Path,
) -> Result<PrCurve> {
    let dets_path = input_path(detections, "detections file")?;
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    let manifest = read_manifest(&path)?;
    let (gts, dets) = resolve_ground_truth(&manifest, &read_detections(&dets_path)?)?;
    let curve = pr_curve_at(&dets, &gts, cfg.eval.iou_threshold)?;
    write_pr_csv(&curve, &out_dir.join("pr.csv"))?;
    write_ap_json(&curve, &out_dir.join("ap.json"))?;
    Ok(curve)
}

#[derive(Debug, Clone, Serialize)]
pub struct StyleReport {
    pub style_id: usize,
    pub images: usize,
    pub augmented: usize,
    pub distances: StyleDistances,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub base_images: usize,
    pub iterations: u64,
    pub final_loss: Option<f64>,
    pub styles: Vec<StyleReport>,
}

/// Depth frames to detector-ready datasets: base images, training,
/// stylization and augmentation per style, and a style report.
///
/// ```text
/// out/config.lock
/// out/base/       base images + manifest.json
/// out/train/      metrics.csv + ckpt_*.bin
/// out/stylized/style_{s}/
/// out/augmented/style_{s}/
/// out/report.json
/// ```
pub fn cmd_pipeline(cfg: &PipelineConfig, manifest: Option<&Path>, out_dir: &Path) -> Result<PipelineReport> {
    let path = manifest_arg(cfg, manifest)?;
    prepare(cfg, out_dir)?;
    let depth = load_manifest(&path)?;
    if depth.styles.is_empty() {
        return Err(Error::Config("the pipeline manifest has no style sets".into()));
    }
    let n_styles = depth.n_styles();
    if let Some(&bad) = cfg.pipeline.style_ids.iter().find(|&&s| s >= n_styles) {
        return Err(Error::StyleOutOfRange { style_id: bad, n_styles });
    }
    let backend = cfg.backend.build()?;
    cfg.loss.validate_for(&backend)?;

    let base = run_basegen(cfg, &depth, &out_dir.join("base"))?;
    let outcome = run_train(cfg, &base, &backend, &out_dir.join("train"), false)?;

    let style_ids: Vec<usize> = if cfg.pipeline.style_ids.is_empty() {
        (0..n_styles).collect()
    } else {
        cfg.pipeline.style_ids.clone()
    };
    let mut styles = Vec::new();
    for s in style_ids {
        let styled = run_stylize(&outcome.params, &base, s, &out_dir.join(format!("stylized/style_{s}")))?;
        let augmented = expand_training_set(
            &styled,
            &cfg.augment,
            cfg.pipeline.copies,
            &out_dir.join(format!("augmented/style_{s}")),
        )?;
        let outputs: Vec<Image> = styled.content.iter().map(|c| load_image(&c.path)).collect::<Result<_>>()?;
        let exemplars: Vec<Image> = base.styles[s].paths.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
        // aligned pairing with unequal sizes compares every combination
        let pairs = eval_pairs(cfg, outputs.len(), exemplars.len()).unwrap_or_else(|_| {
            (0..outputs.len())
                .flat_map(|i| (0..exemplars.len()).map(move |j| (i, j)))
                .collect()
        });
        let distances = style_distances(&backend, &cfg.loss, &outputs, &exemplars, &pairs)?;
        styles.push(StyleReport {
            style_id: s,
            images: styled.content.len(),
            augmented: augmented.content.len(),
            distances,
        });
    }
    let report = PipelineReport {
        base_images: base.content.len(),
        iterations: cfg.train.iterations,
        final_loss: outcome.metrics.last().map(|m| m.total()),
        styles,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}
