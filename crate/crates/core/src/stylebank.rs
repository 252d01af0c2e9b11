//! StyleBank network: a shared encoder and decoder with one filter bank per
//! target style between them.
//!
//! ```text
//! encoder: c9s2-w  IN relu  C2w IN relu  C4w IN relu  C8w IN relu
//! bank i:  C8w IN relu  C8w IN relu
//! decoder: C4w IN relu  C2w IN relu  Cw IN relu  tc9s2-3 sigmoid
//! ```
//!
//! `w` is the base width (32 by default, giving 32/64/128/256 channels).
//! Stride-1 convolutions use reflection padding; the two strided layers use
//! zero padding, so only they change resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, ConvTranspose2d, InstanceNorm, Layer, PadMode, ParamView, Sequential, Trace};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_width: 32 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("network.base_width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_width * 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Autoencoder,
    Stylize(usize),
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::Autoencoder => write!(f, "autoencoder"),
            Branch::Stylize(i) => write!(f, "stylize{i}"),
        }
    }
}

/// Which parameters a training step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Bank(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleBankParams {
    config: NetConfig,
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub banks: Vec<Sequential>,
}

fn conv_block(layers: &mut Vec<Layer>, conv: Conv2d) {
    let ch = conv.out_channels;
    layers.push(Layer::Conv(conv));
    layers.push(Layer::InstanceNorm(InstanceNorm::new(ch)));
    layers.push(Layer::Relu);
}

fn build_bank(width: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let c = width * 8;
    let mut layers = Vec::new();
    conv_block(&mut layers, Conv2d::same(c, c, 3, PadMode::Reflect).init(rng));
    conv_block(&mut layers, Conv2d::same(c, c, 3, PadMode::Reflect).init(rng));
    Sequential::new(layers)
}

/// Per-sample forward trace through one branch.
pub struct NetTrace {
    encoder: Trace,
    bank: Option<(usize, Trace)>,
    decoder: Trace,
}

impl StyleBankParams {
    /// Default-width network with `n_styles` banks.
    pub fn init(n_styles: usize, seed: u64) -> Result<Self> {
        Self::init_with(n_styles, seed, NetConfig::default())
    }

    pub fn init_with(n_styles: usize, seed: u64, config: NetConfig) -> Result<Self> {
        config.validate()?;
        if n_styles == 0 {
            return Err(Error::Config("the network needs at least one style bank".into()));
        }
        let w = config.base_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut enc = Vec::new();
        conv_block(&mut enc, Conv2d::new(3, w, 9, 2, 4, PadMode::Zero).init(&mut rng));
        conv_block(&mut enc, Conv2d::same(w, 2 * w, 3, PadMode::Reflect).init(&mut rng));
        conv_block(&mut enc, Conv2d::same(2 * w, 4 * w, 3, PadMode::Reflect).init(&mut rng));
        conv_block(&mut enc, Conv2d::same(4 * w, 8 * w, 3, PadMode::Reflect).init(&mut rng));

        // stride-1 transposed convolutions are ordinary same-padded convolutions
        let mut dec = Vec::new();
        conv_block(&mut dec, Conv2d::same(8 * w, 4 * w, 3, PadMode::Reflect).init(&mut rng));
        conv_block(&mut dec, Conv2d::same(4 * w, 2 * w, 3, PadMode::Reflect).init(&mut rng));
        conv_block(&mut dec, Conv2d::same(2 * w, w, 3, PadMode::Reflect).init(&mut rng));
        dec.push(Layer::ConvTranspose(ConvTranspose2d::new(w, 3, 9, 2, 4, 1).init(&mut rng)));
        dec.push(Layer::Sigmoid);

        let banks = (0..n_styles).map(|_| build_bank(w, &mut rng)).collect();
        Ok(Self {
            config,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
            banks,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn n_styles(&self) -> usize {
        self.banks.len()
    }

    fn check_input(&self, img: &Image) -> Result<()> {
        let (w, h) = (img.width(), img.height());
        if w % 2 != 0 || h % 2 != 0 || w < 16 || h < 16 {
            return Err(Error::Shape(format!(
                "network input must have even width and height >= 16, got {w}x{h}"
            )));
        }
        Ok(())
    }

    fn check_bottleneck(&self, f: &FeatureMap) -> Result<()> {
        let c = self.config.bottleneck_channels();
        if f.channels() != c {
            return Err(Error::Shape(format!(
                "expected {c}-channel features, got {}",
                f.channels()
            )));
        }
        Ok(())
    }

    fn check_style(&self, style_id: usize) -> Result<()> {
        if style_id >= self.banks.len() {
            return Err(Error::StyleOutOfRange {
                style_id,
                n_styles: self.banks.len(),
            });
        }
        Ok(())
    }

    /// `8w x H/2 x W/2` features; grayscale input is replicated to RGB.
    pub fn encode(&self, img: &Image) -> Result<FeatureMap> {
        self.check_input(img)?;
        self.encoder.forward(&FeatureMap::from_image(&img.to_rgb()))
    }

    pub fn apply_style(&self, style_id: usize, f: &FeatureMap) -> Result<FeatureMap> {
        self.check_style(style_id)?;
        self.check_bottleneck(f)?;
        self.banks[style_id].forward(f)
    }

    pub fn decode(&self, f: &FeatureMap) -> Result<Image> {
        self.check_bottleneck(f)?;
        self.decoder.forward(f)?.to_image()
    }

    pub fn forward(&self, img: &Image, branch: Branch) -> Result<Image> {
        let f = self.encode(img)?;
        let f = match branch {
            Branch::Autoencoder => f,
            Branch::Stylize(i) => self.apply_style(i, &f)?,
        };
        self.decode(&f)
    }

    pub fn forward_traced(&self, img: &Image, branch: Branch) -> Result<(Image, NetTrace)> {
        self.check_input(img)?;
        if let Branch::Stylize(i) = branch {
            self.check_style(i)?;
        }
        let (f, encoder) = self
            .encoder
            .forward_traced(&FeatureMap::from_image(&img.to_rgb()))?;
        let (f, bank) = match branch {
            Branch::Autoencoder => (f, None),
            Branch::Stylize(i) => {
                let (g, t) = self.banks[i].forward_traced(&f)?;
                (g, Some((i, t)))
            }
        };
        let (out, decoder) = self.decoder.forward_traced(&f)?;
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "network output",
                iteration: 0,
            });
        }
        Ok((
            out.to_image()?,
            NetTrace {
                encoder,
                bank,
                decoder,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` given the gradient of a
    /// loss with respect to the traced output image (interleaved RGB).
    /// Only the encoder, the decoder and the bank used by the trace are
    /// touched.
    pub fn backward(&self, trace: &NetTrace, grad_output: &Image3Grad, grads: &mut StyleBankParams) {
        let dout = grad_output.to_planar();
        let d = self
            .decoder
            .backward(&trace.decoder, Some(&dout), &[], Some(&mut grads.decoder));
        let d = match &trace.bank {
            Some((i, t)) => self.banks[*i].backward(t, Some(&d), &[], Some(&mut grads.banks[*i])),
            None => d,
        };
        self.encoder
            .backward(&trace.encoder, Some(&d), &[], Some(&mut grads.encoder));
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            banks: self.banks.iter().map(Sequential::zeros_like).collect(),
        }
    }

    fn group_net(&self, group: ParamGroup) -> &Sequential {
        match group {
            ParamGroup::Encoder => &self.encoder,
            ParamGroup::Decoder => &self.decoder,
            ParamGroup::Bank(i) => &self.banks[i],
        }
    }

    fn group_net_mut(&mut self, group: ParamGroup) -> &mut Sequential {
        match group {
            ParamGroup::Encoder => &mut self.encoder,
            ParamGroup::Decoder => &mut self.decoder,
            ParamGroup::Bank(i) => &mut self.banks[i],
        }
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Encoder, ParamGroup::Decoder];
        g.extend((0..self.banks.len()).map(ParamGroup::Bank));
        g
    }

    pub fn group_prefix(group: ParamGroup) -> String {
        match group {
            ParamGroup::Encoder => "encoder".into(),
            ParamGroup::Decoder => "decoder".into(),
            ParamGroup::Bank(i) => format!("bank.{i}"),
        }
    }

    /// Canonical tensor names (`encoder.0.weight`, `bank.3.1.bias`, ...)
    /// with their views, group by group.
    pub fn named_params(&self) -> Vec<(String, ParamView<'_>)> {
        self.groups()
            .into_iter()
            .flat_map(|g| self.group_named_params(g))
            .collect()
    }

    pub fn group_named_params(&self, group: ParamGroup) -> Vec<(String, ParamView<'_>)> {
        self.group_net(group).named_params(&Self::group_prefix(group))
    }

    pub fn group_params_mut(&mut self, group: ParamGroup) -> Vec<&mut Vec<f64>> {
        self.group_net_mut(group).params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.values.len()).sum()
    }

    /// Rebuilds a network from named tensors (as written by
    /// [`StyleBankParams::named_params`]).
    pub fn from_named(
        n_styles: usize,
        config: NetConfig,
        mut lookup: impl FnMut(&str, &[usize]) -> std::result::Result<Vec<f64>, String>,
    ) -> std::result::Result<Self, String> {
        let mut params = Self::init_with(n_styles, 0, config).map_err(|e| e.to_string())?;
        for group in params.groups() {
            let names: Vec<(String, Vec<usize>)> = params
                .group_named_params(group)
                .into_iter()
                .map(|(n, p)| (n, p.dims))
                .collect();
            for ((name, dims), slot) in names.into_iter().zip(params.group_params_mut(group)) {
                let values = lookup(&name, &dims)?;
                if values.len() != slot.len() {
                    return Err(format!("{name}: {} values, expected {}", values.len(), slot.len()));
                }
                *slot = values;
            }
        }
        Ok(params)
    }
}

/// Gradient with respect to a 3-channel network output, in the image's
/// interleaved layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Image3Grad {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image3Grad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    fn to_planar(&self) -> FeatureMap {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[c * plane + i] = self.data[i * 3 + c];
            }
        }
        FeatureMap::new(3, self.height, self.width, out).expect("3-channel gradient")
    }
}
