//! Training objectives. Every term uses mean reduction so the weights do
//! not depend on image resolution.
//!
//! Each loss has a value form and, where training needs it, a `*_grad` form
//! returning the value together with the gradient with respect to the output
//! image in its interleaved layout.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurenet::{gram_matrix, FeatureBackend};
use crate::image::{Image, LUMA};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Content (feature reconstruction) weight.
    pub alpha: f64,
    /// Style (Gram) weight.
    pub beta: f64,
    /// Total-variation weight.
    pub gamma: f64,
    /// Top-k intensity weight.
    pub delta: f64,
    pub k: usize,
    pub content_layer: usize,
    /// Empty selects every tap of the backend.
    pub style_layers: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 1e-5,
            delta: 1.0,
            k: 50,
            content_layer: 1,
            style_layers: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss.{name} must be finite and >= 0, got {w}")));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("loss.k must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks the tap indices against a backend.
    pub fn validate_for(&self, backend: &FeatureBackend) -> Result<()> {
        self.validate()?;
        let n = backend.n_taps();
        if self.content_layer >= n {
            return Err(Error::Config(format!(
                "loss.content_layer {} out of range for a backend with {n} taps",
                self.content_layer
            )));
        }
        if let Some(&bad) = self.style_layers.iter().find(|&&l| l >= n) {
            return Err(Error::Config(format!(
                "loss.style_layers entry {bad} out of range for a backend with {n} taps"
            )));
        }
        Ok(())
    }

    pub fn style_taps(&self, backend: &FeatureBackend) -> Vec<usize> {
        if self.style_layers.is_empty() {
            (0..backend.n_taps()).collect()
        } else {
            self.style_layers.clone()
        }
    }
}

/// Weighted total and the unweighted terms it is built from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub reg: f64,
    pub atki: f64,
}

fn check_same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean squared pixel error between the autoencoder output and its input.
pub fn reconstruction_loss(content: &Image, output: &Image) -> Result<f64> {
    Ok(reconstruction_grad(content, output)?.0)
}

pub fn reconstruction_grad(content: &Image, output: &Image) -> Result<(f64, Vec<f64>)> {
    check_same_shape(content, output, "reconstruction loss shape mismatch")?;
    let n = output.data().len() as f64;
    let diff: Vec<f64> = output
        .data()
        .iter()
        .zip(content.data())
        .map(|(o, c)| o - c)
        .collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, grad))
}

fn tap(features: &[FeatureMap], layer: usize) -> Result<&FeatureMap> {
    features.get(layer).ok_or_else(|| {
        Error::Config(format!("tap {layer} out of range for a backend with {} taps", features.len()))
    })
}

fn feature_mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

fn gram_mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("Gram matrices differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok((a - b).mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Mean squared difference of the feature maps at one tap.
pub fn content_loss(backend: &FeatureBackend, output: &Image, content: &Image, layer: usize) -> Result<f64> {
    let fo = backend.extract_features(output)?;
    let fc = backend.extract_features(content)?;
    feature_mse(tap(&fo, layer)?, tap(&fc, layer)?)
}

/// Sum over taps of the mean squared Gram difference.
pub fn style_loss(backend: &FeatureBackend, output: &Image, style: &Image, layers: &[usize]) -> Result<f64> {
    let fo = backend.extract_features(output)?;
    let fs = backend.extract_features(style)?;
    layers.iter().try_fold(0.0, |acc, &l| {
        Ok(acc + gram_mse(&gram_matrix(tap(&fo, l)?), &gram_matrix(tap(&fs, l)?))?)
    })
}

/// Squared horizontal and vertical neighbor differences over the element
/// count.
pub fn tv_regularization(output: &Image) -> f64 {
    tv_grad(output).0
}

pub fn tv_grad(output: &Image) -> (f64, Vec<f64>) {
    let (w, h, c) = (output.width(), output.height(), output.channels());
    let d = output.data();
    let idx = |x: usize, y: usize, ch: usize| (y * w + x) * c + ch;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d.len()];
    let mut pair = |a: usize, b: usize, loss: &mut f64| {
        let diff = d[a] - d[b];
        *loss += diff * diff;
        grad[a] += 2.0 * diff;
        grad[b] -= 2.0 * diff;
    };
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                if x + 1 < w {
                    pair(idx(x + 1, y, ch), idx(x, y, ch), &mut loss);
                }
                if y + 1 < h {
                    pair(idx(x, y + 1, ch), idx(x, y, ch), &mut loss);
                }
            }
        }
    }
    let n = d.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Pixel indices of the `k` brightest luma values, brightest first (ties in
/// index order).
fn top_k_indices(gray: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gray.len()).collect();
    idx.sort_by(|&a, &b| gray[b].total_cmp(&gray[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(img: &Image, k: usize) -> Result<()> {
    if k == 0 || k > img.pixel_count() {
        return Err(Error::InvalidTopK {
            k,
            pixels: img.pixel_count(),
        });
    }
    Ok(())
}

/// The `k` largest grayscale intensities, descending.
pub fn top_k_intensities(img: &Image, k: usize) -> Result<Vec<f64>> {
    check_k(img, k)?;
    let gray = img.to_gray();
    let g = gray.data();
    Ok(top_k_indices(g, k).into_iter().map(|i| g[i]).collect())
}

/// Mean squared difference between the `k` brightest grayscale values of the
/// two images, compared rank by rank. The images may differ in size.
pub fn atki_loss(output: &Image, style: &Image, k: usize) -> Result<f64> {
    Ok(atki_grad(output, &top_k_intensities(style, k)?)?.0)
}

/// ATKI value and gradient given the style's precomputed top-k list. At rank
/// ties the gradient goes to the selected pixels.
pub fn atki_grad(output: &Image, style_top: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = style_top.len();
    check_k(output, k)?;
    let gray = output.to_gray();
    let g = gray.data();
    let c = output.channels();
    let mut loss = 0.0;
    let mut grad = vec![0.0; output.data().len()];
    for (&i, &s) in top_k_indices(g, k).iter().zip(style_top) {
        let diff = g[i] - s;
        loss += diff * diff;
        let dg = 2.0 * diff / k as f64;
        if c == 1 {
            grad[i] += dg;
        } else {
            for (ch, w) in LUMA.iter().enumerate() {
                grad[i * 3 + ch] += w * dg;
            }
        }
    }
    Ok((loss / k as f64, grad))
}

/// Weighted sum of content, style, regularization and ATKI terms.
pub fn perceptual_loss(
    backend: &FeatureBackend,
    output: &Image,
    content: &Image,
    style: &Image,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let targets = PerceptualTargets::new(backend, content, style, cfg)?;
    let fo = backend.extract_features(output)?;
    let mut t = LossTerms {
        content: feature_mse(tap(&fo, cfg.content_layer)?, &targets.content)?,
        reg: tv_regularization(output),
        atki: atki_grad(output, &targets.style_top)?.0,
        ..LossTerms::default()
    };
    for (l, gs) in targets.style_taps.iter().zip(&targets.style_grams) {
        t.style += gram_mse(&gram_matrix(tap(&fo, *l)?), gs)?;
    }
    t.total = cfg.alpha * t.content + cfg.beta * t.style + cfg.gamma * t.reg + cfg.delta * t.atki;
    Ok(t)
}

/// Content features, style Grams and style top-k list for one
/// (content, style) pair, computed once per training sample.
#[derive(Debug, Clone)]
pub struct PerceptualTargets {
    content: FeatureMap,
    style_taps: Vec<usize>,
    style_grams: Vec<Array2<f64>>,
    style_top: Vec<f64>,
}

impl PerceptualTargets {
    pub fn new(backend: &FeatureBackend, content: &Image, style: &Image, cfg: &LossConfig) -> Result<Self> {
        cfg.validate_for(backend)?;
        let fc = backend.extract_features(content)?;
        let fs = backend.extract_features(style)?;
        let style_taps = cfg.style_taps(backend);
        let style_grams = style_taps
            .iter()
            .map(|&l| Ok(gram_matrix(tap(&fs, l)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            content: tap(&fc, cfg.content_layer)?.clone(),
            style_taps,
            style_grams,
            style_top: top_k_intensities(style, cfg.k)?,
        })
    }
}

/// `d/dF` of `mean((G(F) - target)^2)` with `G(F) = F F^T / (C H W)`.
fn gram_backward(f: &FeatureMap, g: &Array2<f64>, target: &Array2<f64>) -> FeatureMap {
    let (c, h, w) = f.shape();
    let fm = ArrayView2::from_shape((c, h * w), f.data()).expect("c x hw");
    let dg = (g - target) * (2.0 / (c * c) as f64);
    let sym = &dg + &dg.t();
    let df = sym.dot(&fm) / (c * h * w) as f64;
    FeatureMap::new(c, h, w, df.into_raw_vec_and_offset().0).expect("same shape")
}

/// Perceptual loss and its gradient with respect to `output`. Terms whose
/// weight is zero are still reported but not differentiated.
pub fn perceptual_grad(
    backend: &FeatureBackend,
    output: &Image,
    targets: &PerceptualTargets,
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let (fo, trace) = backend.extract_traced(output)?;
    let mut t = LossTerms::default();
    let mut taps: Vec<(usize, FeatureMap)> = Vec::new();

    let fc = tap(&fo, cfg.content_layer)?;
    t.content = feature_mse(fc, &targets.content)?;
    if cfg.alpha > 0.0 {
        let n = fc.len() as f64;
        let data = fc
            .data()
            .iter()
            .zip(targets.content.data())
            .map(|(o, c)| cfg.alpha * 2.0 * (o - c) / n)
            .collect();
        let (c, h, w) = fc.shape();
        taps.push((cfg.content_layer, FeatureMap::new(c, h, w, data)?));
    }

    for (&l, gs) in targets.style_taps.iter().zip(&targets.style_grams) {
        let f = tap(&fo, l)?;
        let g = gram_matrix(f);
        t.style += gram_mse(&g, gs)?;
        if cfg.beta > 0.0 {
            let mut df = gram_backward(f, &g, gs);
            df.data_mut().iter_mut().for_each(|v| *v *= cfg.beta);
            taps.push((l, df));
        }
    }

    let mut grad = if taps.is_empty() {
        vec![0.0; output.data().len()]
    } else {
        let refs: Vec<(usize, &FeatureMap)> = taps.iter().map(|(l, f)| (*l, f)).collect();
        backend.backward(&trace, &refs)
    };

    let (reg, dreg) = tv_grad(output);
    t.reg = reg;
    if cfg.gamma > 0.0 {
        grad.iter_mut().zip(&dreg).for_each(|(g, d)| *g += cfg.gamma * d);
    }
    let (atki, datki) = atki_grad(output, &targets.style_top)?;
    t.atki = atki;
    if cfg.delta > 0.0 {
        grad.iter_mut().zip(&datki).for_each(|(g, d)| *g += cfg.delta * d);
    }
    t.total = cfg.alpha * t.content + cfg.beta * t.style + cfg.gamma * t.reg + cfg.delta * t.atki;
    Ok((t, grad))
}
