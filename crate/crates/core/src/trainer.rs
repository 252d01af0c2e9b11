//! Alternating StyleBank training.
//!
//! Every `(T+1)`-th iteration trains the autoencoder branch on a
//! reconstruction loss; the others train the stylizing branch on the
//! perceptual loss. Each iteration draws its mini-batch from its own RNG
//! stream, so a resumed run reproduces an uninterrupted one exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_name, latest_checkpoint, write_atomic, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::featurenet::FeatureBackend;
use crate::image::{load_image, DatasetManifest, Image};
use crate::losses::{perceptual_grad, reconstruction_grad, LossConfig, LossTerms, PerceptualTargets};
use crate::stylebank::{Branch, Image3Grad, NetConfig, ParamGroup, StyleBankParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Stylizing steps per autoencoder step.
    pub t_style_steps: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_style_steps: 2,
            batch_size: 4,
            iterations: 1000,
            lr: 1e-3,
            lr_decay: 0.9999,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("train.{field} {msg}")));
        if self.t_style_steps == 0 {
            return bad("t_style_steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be > 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay", "must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be >= 0");
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(field, "must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Learning rate for a 1-based iteration.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr * self.lr_decay.powf(iteration as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Autoencoder,
    Stylize,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Autoencoder => "autoencoder",
            Phase::Stylize => "stylize",
        }
    }
}

/// Autoencoder on every `(t+1)`-th iteration (1-based), stylize otherwise.
pub fn branch_schedule(iteration: u64, t: usize) -> Phase {
    if iteration % (t as u64 + 1) == 0 {
        Phase::Autoencoder
    } else {
        Phase::Stylize
    }
}

/// Decoded content images and style exemplar sets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub content: Vec<Image>,
    pub styles: Vec<Vec<Image>>,
}

impl TrainingData {
    pub fn new(content: Vec<Image>, styles: Vec<Vec<Image>>) -> Result<Self> {
        if content.is_empty() {
            return Err(Error::Config("training needs at least one content image".into()));
        }
        if styles.is_empty() || styles.iter().any(Vec::is_empty) {
            return Err(Error::Config("training needs at least one exemplar in every style set".into()));
        }
        Ok(Self { content, styles })
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let content = manifest
            .content
            .iter()
            .map(|e| load_image(&e.path))
            .collect::<Result<Vec<_>>>()?;
        let styles = manifest
            .styles
            .iter()
            .map(|s| s.paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(content, styles)
    }

    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatch<'a> {
    pub content: Vec<&'a Image>,
    pub style: Vec<&'a Image>,
    pub style_ids: Vec<usize>,
}

/// Content uniformly with replacement; per slot a uniform style id, then a
/// uniform exemplar from that set.
pub fn sample_minibatch<'a>(data: &'a TrainingData, batch_size: usize, rng: &mut impl Rng) -> MiniBatch<'a> {
    let mut batch = MiniBatch {
        content: Vec::with_capacity(batch_size),
        style: Vec::with_capacity(batch_size),
        style_ids: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        batch.content.push(&data.content[rng.gen_range(0..data.content.len())]);
        let id = rng.gen_range(0..data.styles.len());
        let set = &data.styles[id];
        batch.style.push(&set[rng.gen_range(0..set.len())]);
        batch.style_ids.push(id);
    }
    batch
}

/// Adam moments and step counts per named tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, u64>,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    /// One update of the tensors in `groups` with decoupled weight decay.
    pub fn update(
        &mut self,
        params: &mut StyleBankParams,
        grads: &StyleBankParams,
        groups: &[ParamGroup],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        for &group in groups {
            let grad_views = grads.group_named_params(group);
            let slots = params.group_params_mut(group);
            for ((name, g), p) in grad_views.into_iter().zip(slots) {
                let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
                let t = self.steps.entry(name).or_insert(0);
                *t += 1;
                let bc1 = 1.0 - cfg.beta1.powf(*t as f64);
                let bc2 = 1.0 - cfg.beta2.powf(*t as f64);
                for i in 0..p.len() {
                    let gi = g.values[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                    p[i] -= lr * (step + cfg.weight_decay * p[i]);
                }
            }
        }
    }
}

/// One row of the metrics log. Terms not computed by the branch are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub phase: Phase,
    pub terms: Option<LossTerms>,
    pub recon: Option<f64>,
}

impl StepMetrics {
    pub fn total(&self) -> f64 {
        self.terms.map_or(self.recon.unwrap_or(0.0), |t| t.total)
    }
}

pub const METRICS_HEADER: [&str; 8] = ["iter", "branch", "L_total", "L_c", "L_s", "L_reg", "L_atki", "L_R"];

fn metrics_record(m: &StepMetrics) -> Vec<String> {
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let t = m.terms;
    vec![
        m.iteration.to_string(),
        m.phase.as_str().to_string(),
        m.total().to_string(),
        f(t.map(|t| t.content)),
        f(t.map(|t| t.style)),
        f(t.map(|t| t.reg)),
        f(t.map(|t| t.atki)),
        f(m.recon),
    ]
}

/// Attributes a non-finite network output to the branch's first loss term.
fn relabel(e: Error, term: &'static str, iteration: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFinite { term, iteration },
        other => other,
    }
}

fn check_finite(iteration: u64, terms: &[(&'static str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some(&(term, _)) => Err(Error::NonFinite { term, iteration }),
        None => Ok(()),
    }
}

/// One optimization step on a mini-batch. Only the encoder, the decoder and
/// (for the stylizing branch) the banks named in the batch are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut StyleBankParams,
    adam: &mut AdamState,
    batch: &MiniBatch<'_>,
    phase: Phase,
    backend: &FeatureBackend,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    iteration: u64,
) -> Result<StepMetrics> {
    let n = batch.content.len();
    if n == 0 {
        return Err(Error::Config("empty mini-batch".into()));
    }
    let scale = 1.0 / n as f64;
    let mut grads = params.zeros_like();
    let mut groups = vec![ParamGroup::Encoder, ParamGroup::Decoder];
    let mut metrics = StepMetrics {
        iteration,
        phase,
        terms: None,
        recon: None,
    };

    match phase {
        Phase::Autoencoder => {
            let mut recon = 0.0;
            for content in &batch.content {
                let (out, trace) = params
                    .forward_traced(content, Branch::Autoencoder)
                    .map_err(|e| relabel(e, "L_R", iteration))?;
                let (l, g) = reconstruction_grad(&content.to_rgb(), &out)?;
                check_finite(iteration, &[("L_R", l)])?;
                recon += l * scale;
                let g = Image3Grad {
                    width: out.width(),
                    height: out.height(),
                    data: g.into_iter().map(|v| v * scale).collect(),
                };
                params.backward(&trace, &g, &mut grads);
            }
            metrics.recon = Some(recon);
        }
        Phase::Stylize => {
            let mut sum = LossTerms::default();
            for ((content, style), &id) in batch.content.iter().zip(&batch.style).zip(&batch.style_ids) {
                let (out, trace) = params
                    .forward_traced(content, Branch::Stylize(id))
                    .map_err(|e| relabel(e, "L_c", iteration))?;
                let targets = PerceptualTargets::new(backend, content, style, loss_cfg)?;
                let (t, g) = perceptual_grad(backend, &out, &targets, loss_cfg)?;
                check_finite(
                    iteration,
                    &[("L_c", t.content), ("L_s", t.style), ("L_reg", t.reg), ("L_atki", t.atki), ("L_total", t.total)],
                )?;
                sum.total += t.total * scale;
                sum.content += t.content * scale;
                sum.style += t.style * scale;
                sum.reg += t.reg * scale;
                sum.atki += t.atki * scale;
                let g = Image3Grad {
                    width: out.width(),
                    height: out.height(),
                    data: g.into_iter().map(|v| v * scale).collect(),
                };
                params.backward(&trace, &g, &mut grads);
            }
            let touched: BTreeSet<usize> = batch.style_ids.iter().copied().collect();
            groups.extend(touched.into_iter().map(ParamGroup::Bank));
            metrics.terms = Some(sum);
        }
    }
    adam.update(params, &grads, &groups, train_cfg.lr_at(iteration), train_cfg);
    Ok(metrics)
}

/// Everything that determines a training run's trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSettings {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub network: NetConfig,
}

impl TrainSettings {
    /// Hash of the settings, the backend weights and the style count.
    /// `iterations` and `checkpoint_every` are left out so a run can be
    /// extended on resume.
    pub fn config_hash(&self, backend: &FeatureBackend, n_styles: usize) -> String {
        let mut train = self.train.clone();
        train.iterations = 0;
        train.checkpoint_every = 0;
        let doc = serde_json::json!({
            "train": train,
            "loss": self.loss,
            "network": self.network,
            "backend": backend.fingerprint(),
            "n_styles": n_styles,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }
}

pub struct Trainer<'a> {
    data: &'a TrainingData,
    backend: &'a FeatureBackend,
    settings: TrainSettings,
    config_hash: String,
    params: StyleBankParams,
    adam: AdamState,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingData, backend: &'a FeatureBackend, settings: TrainSettings) -> Result<Self> {
        settings.train.validate()?;
        settings.loss.validate_for(backend)?;
        let params = StyleBankParams::init_with(data.n_styles(), settings.train.seed, settings.network)?;
        let config_hash = settings.config_hash(backend, data.n_styles());
        Ok(Self {
            data,
            backend,
            settings,
            config_hash,
            params,
            adam: AdamState::default(),
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by a run with the same settings.
    pub fn resume(
        data: &'a TrainingData,
        backend: &'a FeatureBackend,
        settings: TrainSettings,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let mut t = Self::new(data, backend, settings)?;
        if checkpoint.meta.config_hash != t.config_hash {
            return Err(Error::Config(
                "checkpoint was written with different settings, data or backend".into(),
            ));
        }
        t.params = checkpoint.params;
        t.adam = checkpoint.optimizer.unwrap_or_default();
        t.iteration = checkpoint.meta.iteration;
        Ok(t)
    }

    pub fn params(&self) -> &StyleBankParams {
        &self.params
    }

    pub fn into_params(self) -> StyleBankParams {
        self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn batch_rng(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.train.seed);
        rng.set_stream(iteration);
        rng
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let iteration = self.iteration + 1;
        let cfg = &self.settings.train;
        let mut rng = self.batch_rng(iteration);
        let batch = sample_minibatch(self.data, cfg.batch_size, &mut rng);
        let phase = branch_schedule(iteration, cfg.t_style_steps);
        let m = train_step(
            &mut self.params,
            &mut self.adam,
            &batch,
            phase,
            self.backend,
            &self.settings.loss,
            cfg,
            iteration,
        )?;
        self.iteration = iteration;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                version: FORMAT_VERSION,
                n_styles: self.params.n_styles(),
                base_width: self.params.config().base_width,
                iteration: self.iteration,
                config_hash: self.config_hash.clone(),
                adam_steps: self.adam.steps.clone(),
            },
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: StyleBankParams,
    /// Rows produced by this call (resumed runs exclude earlier rows).
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

pub const METRICS_FILE: &str = "metrics.csv";

fn read_metrics_prefix(path: &Path, upto: u64) -> Result<Vec<Vec<String>>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let it: u64 = rec.get(0).and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if it <= upto {
            rows.push(rec.iter().map(str::to_string).collect());
        }
    }
    Ok(rows)
}

fn write_metrics(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_atomic(path, &bytes)
}

/// Runs `settings.train.iterations` iterations. With `out_dir`, writes
/// `metrics.csv` and `ckpt_{iteration}.bin` files there; with `resume`,
/// continues from the latest checkpoint in `out_dir`, dropping metrics rows
/// written after it.
pub fn train(
    data: &TrainingData,
    backend: &FeatureBackend,
    settings: &TrainSettings,
    out_dir: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    let mut trainer = match (resume, out_dir) {
        (true, Some(dir)) => match latest_checkpoint(dir)? {
            Some((_, path)) => Trainer::resume(data, backend, settings.clone(), Checkpoint::load(&path)?)?,
            None => Trainer::new(data, backend, settings.clone())?,
        },
        _ => Trainer::new(data, backend, settings.clone())?,
    };
    let metrics_path = out_dir.map(|d| d.join(METRICS_FILE));
    let mut rows = match &metrics_path {
        Some(p) if resume => read_metrics_prefix(p, trainer.iteration())?,
        _ => Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let total = settings.train.iterations;
    let every = settings.train.checkpoint_every;
    let mut metrics = Vec::new();
    let mut final_checkpoint = None;
    while trainer.iteration() < total {
        let m = trainer.step()?;
        rows.push(metrics_record(&m));
        metrics.push(m);
        let it = trainer.iteration();
        if let (Some(dir), Some(mp)) = (out_dir, &metrics_path) {
            if (every > 0 && it % every == 0) || it == total {
                write_metrics(mp, &rows)?;
                let path = dir.join(checkpoint_name(it));
                trainer.checkpoint().save(&path)?;
                final_checkpoint = Some(path);
            }
        }
    }
    if let (Some(dir), Some(mp)) = (out_dir, &metrics_path) {
        if final_checkpoint.is_none() {
            write_metrics(mp, &rows)?;
            let path = dir.join(checkpoint_name(trainer.iteration()));
            trainer.checkpoint().save(&path)?;
            final_checkpoint = Some(path);
        }
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        metrics,
        final_checkpoint,
    })
}
