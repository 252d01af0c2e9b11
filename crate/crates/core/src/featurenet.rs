//! Frozen feature extractors for the perceptual losses, and Gram matrices.
//!
//! Two backends share one implementation (a [`Sequential`] stack with tap
//! points): `test-conv`, a small seeded random conv stack that needs no
//! downloaded weights, and `pretrained-vgg16`, the VGG-16 feature stack
//! loaded from a safetensors file with torchvision key names
//! (`features.{i}.weight`, `features.{i}.bias`).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{gemm, Conv2d, Layer, MaxPool2d, PadMode, Sequential, Standardize, Trace};
use crate::tensor::FeatureMap;

pub const TEST_CONV: &str = "test-conv";
pub const PRETRAINED_VGG16: &str = "pretrained-vgg16";

/// Default perceptual taps for VGG-16.
pub const VGG16_DEFAULT_LAYERS: [&str; 4] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3"];

// torchvision `vgg16().features` layout: (name, index, in, out) for convs.
const VGG16_CONVS: [(usize, usize, usize); 13] = [
    (0, 3, 64),
    (2, 64, 64),
    (5, 64, 128),
    (7, 128, 128),
    (10, 128, 256),
    (12, 256, 256),
    (14, 256, 256),
    (17, 256, 512),
    (19, 512, 512),
    (21, 512, 512),
    (24, 512, 512),
    (26, 512, 512),
    (28, 512, 512),
];
const VGG16_POOLS: [usize; 5] = [4, 9, 16, 23, 30];
const VGG16_RELUS: [(&str, usize); 13] = [
    ("relu1_1", 1),
    ("relu1_2", 3),
    ("relu2_1", 6),
    ("relu2_2", 8),
    ("relu3_1", 11),
    ("relu3_2", 13),
    ("relu3_3", 15),
    ("relu4_1", 18),
    ("relu4_2", 20),
    ("relu4_3", 22),
    ("relu5_1", 25),
    ("relu5_2", 27),
    ("relu5_3", 29),
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// `test-conv` or `pretrained-vgg16`.
    pub kind: String,
    /// Seed for the `test-conv` weights.
    pub seed: u64,
    /// Safetensors file for `pretrained-vgg16`.
    pub weights: Option<PathBuf>,
    /// Tap layer names; empty means the backend's defaults.
    pub layers: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: TEST_CONV.into(),
            seed: 42,
            weights: None,
            layers: Vec::new(),
        }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<FeatureBackend> {
        match self.kind.as_str() {
            TEST_CONV => {
                if !self.layers.is_empty() {
                    return Err(Error::Config(
                        "backend.layers is only configurable for pretrained-vgg16".into(),
                    ));
                }
                Ok(FeatureBackend::test_conv(self.seed))
            }
            PRETRAINED_VGG16 => {
                let path = self.weights.as_ref().ok_or_else(|| {
                    Error::Config("backend.weights is required for pretrained-vgg16".into())
                })?;
                let layers: Vec<&str> = if self.layers.is_empty() {
                    VGG16_DEFAULT_LAYERS.to_vec()
                } else {
                    self.layers.iter().map(String::as_str).collect()
                };
                FeatureBackend::vgg16(path, &layers)
            }
            other => Err(Error::Config(format!(
                "backend.kind must be {TEST_CONV:?} or {PRETRAINED_VGG16:?}, got {other:?}"
            ))),
        }
    }
}

/// Shape of one random conv layer in a `test-conv` stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// A frozen feature extractor with ordered tap points. The stack always ends
/// at its deepest tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBackend {
    name: String,
    layer_ids: Vec<String>,
    net: Sequential,
    taps: Vec<usize>,
}

/// Forward trace needed to backpropagate tap gradients to the input image.
pub struct FeatureTrace {
    trace: Trace,
    input_channels: usize,
    width: usize,
    height: usize,
}

impl FeatureBackend {
    /// The default test backend: 3x3 stride-2 conv to 16 channels, ReLU,
    /// 3x3 stride-1 conv to 32 channels, ReLU; taps after both ReLUs.
    pub fn test_conv(seed: u64) -> Self {
        Self::test_conv_with(
            seed,
            &[
                TestConvLayer { out_channels: 16, kernel: 3, stride: 2 },
                TestConvLayer { out_channels: 32, kernel: 3, stride: 1 },
            ],
        )
    }

    /// A test backend with 1x1 kernels, so every feature depends on a single
    /// pixel.
    pub fn test_pointwise(seed: u64) -> Self {
        Self::test_conv_with(
            seed,
            &[
                TestConvLayer { out_channels: 8, kernel: 1, stride: 1 },
                TestConvLayer { out_channels: 8, kernel: 1, stride: 1 },
            ],
        )
    }

    /// Seeded random conv + ReLU stack, zero padded, tapping every ReLU.
    pub fn test_conv_with(seed: u64, spec: &[TestConvLayer]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut layer_ids = Vec::new();
        let mut in_ch = 3;
        for (i, l) in spec.iter().enumerate() {
            let conv = Conv2d::new(in_ch, l.out_channels, l.kernel, l.stride, l.kernel / 2, PadMode::Zero)
                .init(&mut rng);
            layers.push(Layer::Conv(conv));
            layers.push(Layer::Relu);
            taps.push(layers.len() - 1);
            layer_ids.push(format!("relu{}", i + 1));
            in_ch = l.out_channels;
        }
        Self {
            name: TEST_CONV.into(),
            layer_ids,
            net: Sequential::new(layers),
            taps,
        }
    }

    /// VGG-16 features up to the deepest requested tap, preceded by ImageNet
    /// standardization.
    pub fn vgg16(weights: &Path, layers: &[&str]) -> Result<Self> {
        let bytes = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
        Self::vgg16_from_bytes(&bytes, layers).map_err(|message| Error::Weights {
            path: weights.to_path_buf(),
            message,
        })
    }

    fn vgg16_from_bytes(bytes: &[u8], layers: &[&str]) -> std::result::Result<Self, String> {
        if layers.is_empty() {
            return Err("no tap layers requested".into());
        }
        let mut tap_indices = Vec::with_capacity(layers.len());
        for name in layers {
            let (_, idx) = VGG16_RELUS
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| format!("unknown VGG-16 layer {name:?}"))?;
            tap_indices.push(*idx);
        }
        let deepest = *tap_indices.iter().max().expect("non-empty");
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| e.to_string())?;

        let mut seq = vec![Layer::Standardize(Standardize {
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        })];
        for index in 0..=deepest {
            let layer = if let Some(&(_, cin, cout)) = VGG16_CONVS.iter().find(|c| c.0 == index) {
                let mut conv = Conv2d::same(cin, cout, 3, PadMode::Zero);
                conv.weight = read_tensor(&tensors, index, "weight", &[cout, cin, 3, 3])?;
                conv.bias = read_tensor(&tensors, index, "bias", &[cout])?;
                Layer::Conv(conv)
            } else if VGG16_POOLS.contains(&index) {
                Layer::MaxPool(MaxPool2d { kernel: 2, stride: 2, padding: 0 })
            } else {
                Layer::Relu
            };
            seq.push(layer);
        }
        Ok(Self {
            name: PRETRAINED_VGG16.into(),
            layer_ids: layers.iter().map(|s| s.to_string()).collect(),
            net: Sequential::new(seq),
            // shifted by the standardization layer
            taps: tap_indices.iter().map(|i| i + 1).collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    /// Content hash of the frozen parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for (name, p) in self.net.named_params("net") {
            h.update(name.as_bytes());
            for v in p.values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn input_map(img: &Image) -> FeatureMap {
        FeatureMap::from_image(&img.to_rgb())
    }

    fn too_small(img: &Image, e: Error) -> Error {
        Error::Shape(format!(
            "{}x{} image too small for the feature backend: {e}",
            img.width(),
            img.height()
        ))
    }

    /// One feature map per tap, in tap order. Grayscale input is replicated
    /// to three channels.
    pub fn extract_features(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        let pass = self
            .net
            .run(&Self::input_map(img), &self.taps, false)
            .map_err(|e| Self::too_small(img, e))?;
        Ok(pass.kept)
    }

    /// Like [`FeatureBackend::extract_features`], keeping a trace for
    /// [`FeatureBackend::backward`].
    pub fn extract_traced(&self, img: &Image) -> Result<(Vec<FeatureMap>, FeatureTrace)> {
        let pass = self
            .net
            .run(&Self::input_map(img), &self.taps, true)
            .map_err(|e| Self::too_small(img, e))?;
        Ok((
            pass.kept,
            FeatureTrace {
                trace: pass.trace.expect("traced"),
                input_channels: img.channels(),
                width: img.width(),
                height: img.height(),
            },
        ))
    }

    /// Gradient with respect to the input image (interleaved layout, same
    /// channel count as the traced image) given gradients at some taps.
    pub fn backward(&self, trace: &FeatureTrace, tap_grads: &[(usize, &FeatureMap)]) -> Vec<f64> {
        let injected: Vec<(usize, &FeatureMap)> = tap_grads
            .iter()
            .map(|(tap, g)| (self.taps[*tap], *g))
            .collect();
        let dx = self.net.backward(&trace.trace, None, &injected, None);
        let plane = trace.width * trace.height;
        let d = dx.data();
        match trace.input_channels {
            1 => (0..plane).map(|i| d[i] + d[plane + i] + d[2 * plane + i]).collect(),
            _ => (0..plane)
                .flat_map(|i| [d[i], d[plane + i], d[2 * plane + i]])
                .collect(),
        }
    }
}

fn read_tensor(
    tensors: &SafeTensors<'_>,
    index: usize,
    suffix: &str,
    dims: &[usize],
) -> std::result::Result<Vec<f64>, String> {
    let candidates = [format!("features.{index}.{suffix}"), format!("{index}.{suffix}")];
    let (key, view) = candidates
        .iter()
        .find_map(|k| tensors.tensor(k).ok().map(|v| (k.clone(), v)))
        .ok_or_else(|| format!("missing tensor {}", candidates[0]))?;
    if view.shape() != dims {
        return Err(format!("{key}: shape {:?}, expected {dims:?}", view.shape()));
    }
    let data = view.data();
    let values = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
        other => return Err(format!("{key}: unsupported dtype {other:?}")),
    };
    Ok(values)
}

/// `G[a][b] = sum_{h,w} f[a,h,w] * f[b,h,w] / (C * H * W)`.
pub fn gram_matrix(f: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = f.shape();
    let n = h * w;
    let mut g = vec![0.0; c * c];
    gemm(c, n, c, f.data(), false, f.data(), true, 0.0, &mut g);
    let scale = 1.0 / (c * n) as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Array2::from_shape_vec((c, c), g).expect("c x c")
}
