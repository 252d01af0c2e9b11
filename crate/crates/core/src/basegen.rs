//! Base-image generation from simulator depth frames, and the augmentation
//! that turns stylized images into detector-ready polarity pairs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    load_image, save_image, save_manifest, BoundingBox, ContentEntry, DatasetManifest, Image,
};

/// A 256-entry RGB lookup table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Colormap {
    entries: Vec<[u8; 3]>,
}

// Polynomial fit of matplotlib's viridis (coefficients c0..c6 per channel).
const VIRIDIS_POLY: [[f64; 3]; 7] = [
    [0.277_727_327_223_417_7, 0.005_407_344_544_966_578, 0.334_099_805_335_306_1],
    [0.105_093_043_108_577_4, 1.404_613_529_898_575, 1.384_590_162_594_685],
    [-0.330_861_828_725_556_3, 0.214_847_559_468_213, 0.095_095_163_028_236_59],
    [-4.634_230_498_983_486, -5.799_100_973_351_585, -19.332_440_956_279_87],
    [6.228_269_936_347_081, 14.179_933_366_805_09, 56.690_552_600_681_05],
    [4.776_384_997_670_288, -13.745_145_377_746_01, -65.353_032_633_372_34],
    [-5.435_455_855_934_631, 4.645_852_612_178_535, 26.312_435_249_583_2],
];

impl Colormap {
    pub const LEN: usize = 256;

    pub fn new(entries: Vec<[u8; 3]>) -> Result<Self> {
        if entries.len() != Self::LEN {
            return Err(Error::Config(format!(
                "colormap must have {} entries, got {}",
                Self::LEN,
                entries.len()
            )));
        }
        Ok(Self { entries })
    }

    /// Perceptually uniform blue-green-yellow ramp (viridis).
    pub fn viridis() -> Self {
        let entries = (0..Self::LEN)
            .map(|i| {
                let t = i as f64 / 255.0;
                let mut rgb = [0u8; 3];
                for (ch, out) in rgb.iter_mut().enumerate() {
                    let v = VIRIDIS_POLY
                        .iter()
                        .rev()
                        .fold(0.0, |acc, c| acc * t + c[ch]);
                    *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                rgb
            })
            .collect();
        Self { entries }
    }

    pub fn gray() -> Self {
        Self {
            entries: (0..=255u8).map(|v| [v, v, v]).collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "viridis" => Ok(Self::viridis()),
            "gray" | "grey" => Ok(Self::gray()),
            other => Err(Error::Config(format!("unknown colormap {other:?}"))),
        }
    }

    /// Parses 256 lines of `R G B` integers in `0..=255`. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut entries = Vec::with_capacity(Self::LEN);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values: Vec<u8> = line
                .split_whitespace()
                .map(|t| t.parse::<u8>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", n + 1))?;
            let [r, g, b] = values[..] else {
                return Err(format!("line {}: expected 3 values", n + 1));
            };
            entries.push([r, g, b]);
        }
        Self::new(entries).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::Config(format!("{}: {m}", path.display())))
    }

    pub fn entry(&self, index: usize) -> [u8; 3] {
        self.entries[index]
    }

    /// RGB in `[0, 1]` for a value in `[0, 1]` (nearest entry).
    pub fn lookup(&self, v: f64) -> [f64; 3] {
        let i = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        self.entries[i].map(|c| f64::from(c) / 255.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseGenConfig {
    pub noise_sigma: f64,
    /// Built-in colormap name, or a path to a 256-line `R G B` file.
    pub colormap: String,
    pub rng_seed: u64,
}

impl Default for BaseGenConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            colormap: "viridis".into(),
            rng_seed: 0,
        }
    }
}

impl BaseGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "basegen.noise_sigma must be a finite value >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn resolve_colormap(&self) -> Result<Colormap> {
        Colormap::by_name(&self.colormap).or_else(|_| {
            let path = Path::new(&self.colormap);
            if path.is_file() {
                Colormap::load(path)
            } else {
                Err(Error::Config(format!(
                    "basegen.colormap {:?} is neither a built-in colormap nor a file",
                    self.colormap
                )))
            }
        })
    }
}

/// Colormap lookup, additive Gaussian noise, clamping, then per-channel
/// min-max normalization.
pub fn make_base_image(depth: &Image, colormap: &Colormap, cfg: &BaseGenConfig) -> Result<Image> {
    cfg.validate()?;
    if depth.channels() != 1 {
        return Err(Error::InvalidImage(format!(
            "depth image must have 1 channel, got {}",
            depth.channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(depth.pixel_count() * 3);
    for &d in depth.data() {
        for c in colormap.lookup(d) {
            let n = if cfg.noise_sigma > 0.0 {
                rng.sample(noise)
            } else {
                0.0
            };
            data.push((c + n).clamp(0.0, 1.0));
        }
    }
    let noisy = Image::new(depth.width(), depth.height(), 3, data)?;
    Ok(normalize_minmax(&noisy))
}

/// Per-channel `(v - min) / (max - min)`; constant channels become zero.
pub fn normalize_minmax(img: &Image) -> Image {
    let c = img.channels();
    let mut lo = vec![f64::INFINITY; c];
    let mut hi = vec![f64::NEG_INFINITY; c];
    for px in img.data().chunks_exact(c) {
        for (ch, &v) in px.iter().enumerate() {
            lo[ch] = lo[ch].min(v);
            hi[ch] = hi[ch].max(v);
        }
    }
    let data = img
        .data()
        .chunks_exact(c)
        .flat_map(|px| {
            px.iter().enumerate().map(|(ch, &v)| {
                let range = hi[ch] - lo[ch];
                if range > 0.0 {
                    ((v - lo[ch]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
        })
        .collect::<Vec<_>>();
    Image::new(img.width(), img.height(), c, data).expect("normalized values lie in [0, 1]")
}

pub fn flip_horizontal(img: &Image, boxes: &[BoundingBox]) -> (Image, Vec<BoundingBox>) {
    let (w, c) = (img.width(), img.channels());
    let flipped = Image::from_fn(w, img.height(), c, |x, y, ch| img.get(w - 1 - x, y, ch))
        .expect("same shape");
    let wf = w as f64;
    let boxes = boxes
        .iter()
        .map(|b| BoundingBox {
            x_min: wf - b.x_max,
            x_max: wf - b.x_min,
            ..*b
        })
        .collect();
    (flipped, boxes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation is drawn from `[-rotation_range, rotation_range]` degrees.
    pub rotation_range: f64,
    /// Translation is drawn from `[-t, t]` times the image width / height.
    pub translation_range: f64,
    pub scale_range: (f64, f64),
    pub flip_probability: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range: 15.0,
            translation_range: 0.1,
            scale_range: (0.9, 1.1),
            flip_probability: 0.5,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No rotation, translation, scaling or flipping.
    pub fn identity(rng_seed: u64) -> Self {
        Self {
            rotation_range: 0.0,
            translation_range: 0.0,
            scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "augment.scale_range must satisfy 0 < low <= high, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "augment.flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        if !(self.rotation_range >= 0.0 && self.rotation_range.is_finite()) {
            return Err(Error::Config(format!(
                "augment.rotation_range must be >= 0, got {}",
                self.rotation_range
            )));
        }
        if !(self.translation_range >= 0.0 && self.translation_range.is_finite()) {
            return Err(Error::Config(format!(
                "augment.translation_range must be >= 0, got {}",
                self.translation_range
            )));
        }
        Ok(())
    }
}

/// Similarity transform about the image center:
/// `p' = center + scale * R(rotation) * (p - center) + (tx, ty)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
        scale: 1.0,
    };

    pub fn sample(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let r = cfg.rotation_range;
        let t = cfg.translation_range;
        Self {
            rotation_deg: rng.gen_range(-r..=r),
            tx: rng.gen_range(-t..=t) * width as f64,
            ty: rng.gen_range(-t..=t) * height as f64,
            scale: rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1),
        }
    }

    fn trig(&self) -> (f64, f64) {
        let th = self.rotation_deg.to_radians();
        (th.cos(), th.sin())
    }

    pub fn apply(&self, center: (f64, f64), p: (f64, f64)) -> (f64, f64) {
        let (cos, sin) = self.trig();
        let (dx, dy) = (p.0 - center.0, p.1 - center.1);
        (
            center.0 + self.scale * (cos * dx - sin * dy) + self.tx,
            center.1 + self.scale * (sin * dx + cos * dy) + self.ty,
        )
    }

    pub fn invert(&self, center: (f64, f64), q: (f64, f64)) -> (f64, f64) {
        let (cos, sin) = self.trig();
        let (dx, dy) = (
            (q.0 - center.0 - self.tx) / self.scale,
            (q.1 - center.1 - self.ty) / self.scale,
        );
        (
            center.0 + cos * dx + sin * dy,
            center.1 - sin * dx + cos * dy,
        )
    }
}

fn center_of(img: &Image) -> (f64, f64) {
    (img.width() as f64 / 2.0, img.height() as f64 / 2.0)
}

/// Inverse-mapped bilinear warp with zero padding outside the source.
pub fn warp_image(img: &Image, params: &AffineParams) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let center = center_of(img);
    let mut data = vec![0.0; w * h * c];
    let sample = |x: isize, y: isize, ch: usize| -> f64 {
        if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
            0.0
        } else {
            img.get(x as usize, y as usize, ch)
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = params.invert(center, (x as f64 + 0.5, y as f64 + 0.5));
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = (fx - x0, fy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - ay)
                    * ((1.0 - ax) * sample(x0, y0, ch) + ax * sample(x0 + 1, y0, ch))
                    + ay * ((1.0 - ax) * sample(x0, y0 + 1, ch) + ax * sample(x0 + 1, y0 + 1, ch));
                data[(y * w + x) * c + ch] = v;
            }
        }
    }
    Image::from_clamped(w, h, c, data).expect("same shape")
}

/// Axis-aligned hull of each box's transformed corners, clamped to the image;
/// boxes left without area are dropped.
pub fn transform_boxes(
    boxes: &[BoundingBox],
    params: &AffineParams,
    width: usize,
    height: usize,
) -> Vec<BoundingBox> {
    let center = (width as f64 / 2.0, height as f64 / 2.0);
    let (w, h) = (width as f64, height as f64);
    boxes
        .iter()
        .filter_map(|b| {
            let quad = [
                (b.x_min, b.y_min),
                (b.x_max, b.y_min),
                (b.x_max, b.y_max),
                (b.x_min, b.y_max),
            ]
            .map(|p| params.apply(center, p));
            let visible = clip_to_rect(quad.to_vec(), w, h);
            if visible.is_empty() {
                return None;
            }
            let mut hull = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &(x, y) in &visible {
                hull = (hull.0.min(x), hull.1.min(y), hull.2.max(x), hull.3.max(y));
            }
            BoundingBox {
                x_min: hull.0,
                y_min: hull.1,
                x_max: hull.2,
                y_max: hull.3,
                label: b.label,
            }
            .clamped(width, height)
        })
        .collect()
}

/// Sutherland-Hodgman clip of a convex polygon against `[0,w] x [0,h]`.
fn clip_to_rect(mut poly: Vec<(f64, f64)>, w: f64, h: f64) -> Vec<(f64, f64)> {
    // Each edge: signed distance that is >= 0 on the inside.
    let edges: [&dyn Fn((f64, f64)) -> f64; 4] = [&|p| p.0, &|p| w - p.0, &|p| p.1, &|p| h - p.1];
    for inside in edges {
        if poly.is_empty() {
            break;
        }
        let mut out = Vec::with_capacity(poly.len() + 2);
        for i in 0..poly.len() {
            let a = poly[i];
            let b = poly[(i + 1) % poly.len()];
            let (da, db) = (inside(a), inside(b));
            if da >= 0.0 {
                out.push(a);
            }
            if (da >= 0.0) != (db >= 0.0) {
                let t = da / (da - db);
                out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
            }
        }
        poly = out;
    }
    poly
}

/// Applies a known transform to an image and its boxes.
pub fn apply_affine(
    img: &Image,
    boxes: &[BoundingBox],
    params: &AffineParams,
) -> (Image, Vec<BoundingBox>) {
    (
        warp_image(img, params),
        transform_boxes(boxes, params, img.width(), img.height()),
    )
}

/// Samples a transform from `cfg` (seeded by `cfg.rng_seed`) and applies it.
pub fn augment_affine(
    img: &Image,
    boxes: &[BoundingBox],
    cfg: &AugmentConfig,
) -> Result<(Image, Vec<BoundingBox>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let params = AffineParams::sample(cfg, img.width(), img.height(), &mut rng);
    Ok(apply_affine(img, boxes, &params))
}

/// Luma grayscale and its inversion.
pub fn make_polarity_pair(img: &Image) -> (Image, Image) {
    let gray = img.to_gray();
    let inverted = gray.inverted();
    (gray, inverted)
}

/// For each content image, writes `copies` randomly flipped and affinely
/// augmented variants, each as a grayscale + inverted pair, and returns the
/// resulting manifest (also saved as `manifest.json` in `out_dir`).
///
/// Entry `i` draws from its own stream seeded with `rng_seed + i`.
pub fn expand_training_set(
    manifest: &DatasetManifest,
    aug: &AugmentConfig,
    copies: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    aug.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = DatasetManifest::default();
    for (index, entry) in manifest.content.iter().enumerate() {
        let source = load_image(&entry.path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(aug.rng_seed.wrapping_add(index as u64));
        for copy in 0..copies {
            let flip = rng.gen_bool(aug.flip_probability);
            let params = AffineParams::sample(aug, source.width(), source.height(), &mut rng);
            let (img, boxes) = if flip {
                flip_horizontal(&source, &entry.boxes)
            } else {
                (source.clone(), entry.boxes.clone())
            };
            let (img, boxes) = apply_affine(&img, &boxes, &params);
            let (gray, inverted) = make_polarity_pair(&img);
            for (suffix, variant) in [("gray", gray), ("inv", inverted)] {
                let path = out_dir.join(format!("e{index:05}_c{copy:03}_{suffix}.png"));
                save_image(&variant, &path)?;
                out.content.push(ContentEntry {
                    path,
                    boxes: boxes.clone(),
                });
            }
        }
    }
    save_manifest(&out, &out_dir.join("manifest.json"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, 0).unwrap()
    }

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, _, _| x as f64 / (w - 1) as f64).unwrap()
    }

    #[test]
    fn viridis_endpoints() {
        let cm = Colormap::viridis();
        // matplotlib viridis: #440154 ... #fde725 (polynomial fit)
        let close = |a: [u8; 3], b: [u8; 3]| a.iter().zip(b).all(|(x, y)| x.abs_diff(y) <= 5);
        assert!(close(cm.entry(0), [0x44, 0x01, 0x54]), "{:?}", cm.entry(0));
        assert!(close(cm.entry(255), [0xfd, 0xe7, 0x25]), "{:?}", cm.entry(255));
    }

    #[test]
    fn colormap_file_parsing() {
        let text: String = (0..256).map(|i| format!("{i} {} 0\n", 255 - i)).collect();
        let cm = Colormap::parse(&text).unwrap();
        assert_eq!(cm.entry(10), [10, 245, 0]);
        assert!(Colormap::parse("1 2 3\n").is_err());
        assert!(Colormap::parse(&text.replace("0 255 0", "0 256 0")).is_err());
    }

    #[test]
    fn constant_depth_without_noise_normalizes_to_zero() {
        let depth = Image::filled(8, 6, 1, 0.0).unwrap();
        let cfg = BaseGenConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let cm = Colormap::viridis();
        let base = make_base_image(&depth, &cm, &cfg).unwrap();
        let c0 = cm.lookup(0.0);
        let expected = normalize_minmax(&Image::from_fn(8, 6, 3, |_, _, c| c0[c]).unwrap());
        assert_eq!(base.channels(), 3);
        assert!(base.data().iter().all(|&v| v == 0.0));
        assert_eq!(base.data(), expected.data());
    }

    #[test]
    fn noiseless_ramp_is_normalized_colormap_lookup() {
        let depth = ramp(16, 4);
        let cm = Colormap::viridis();
        let cfg = BaseGenConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let base = make_base_image(&depth, &cm, &cfg).unwrap();
        // oracle: direct table lookup, then per-channel min/max by hand
        for ch in 0..3 {
            let raw: Vec<f64> = depth
                .data()
                .iter()
                .map(|&d| f64::from(cm.entry((d * 255.0).round() as usize)[ch]) / 255.0)
                .collect();
            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (i, r) in raw.iter().enumerate() {
                let expected = (r - lo) / (hi - lo);
                assert!((base.data()[i * 3 + ch] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn base_image_is_seed_deterministic_and_rejects_rgb() {
        let depth = ramp(12, 12);
        let cm = Colormap::viridis();
        let cfg = BaseGenConfig {
            rng_seed: 9,
            ..Default::default()
        };
        let a = make_base_image(&depth, &cm, &cfg).unwrap();
        let b = make_base_image(&depth, &cm, &cfg).unwrap();
        assert_eq!(a, b);
        let c = make_base_image(&depth, &cm, &BaseGenConfig { rng_seed: 10, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        assert!(make_base_image(&depth.to_rgb(), &cm, &cfg).is_err());
    }

    #[test]
    fn normalize_examples() {
        let img = Image::new(3, 1, 1, vec![0.2, 0.6, 1.0]).unwrap();
        let n = normalize_minmax(&img);
        for (a, b) in n.data().iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Image::filled(4, 4, 1, 0.3).unwrap();
        assert!(normalize_minmax(&flat).data().iter().all(|&v| v == 0.0));
        let spanning = Image::new(3, 1, 1, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_minmax(&spanning), spanning);
    }

    #[test]
    fn flip_box_arithmetic() {
        let img = Image::filled(100, 40, 1, 0.0).unwrap();
        let (_, boxes) = flip_horizontal(&img, &[bx(10.0, 5.0, 30.0, 25.0), bx(40.0, 0.0, 60.0, 10.0)]);
        assert_eq!(boxes[0], bx(70.0, 5.0, 90.0, 25.0));
        assert_eq!(boxes[1], bx(40.0, 0.0, 60.0, 10.0));
    }

    #[test]
    fn identity_affine_is_noop() {
        let img = Image::from_fn(9, 7, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0).unwrap();
        let boxes = vec![bx(1.0, 1.0, 4.0, 5.0)];
        let (out, out_boxes) = augment_affine(&img, &boxes, &AugmentConfig::identity(3)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out_boxes, boxes);
    }

    #[test]
    fn translation_and_scale_move_boxes() {
        let shift = AffineParams { tx: 10.0, ..AffineParams::IDENTITY };
        let moved = transform_boxes(&[bx(5.0, 5.0, 15.0, 20.0)], &shift, 64, 64);
        assert_eq!(moved, vec![bx(15.0, 5.0, 25.0, 20.0)]);

        let zoom = AffineParams { scale: 2.0, ..AffineParams::IDENTITY };
        let grown = transform_boxes(&[bx(28.0, 30.0, 36.0, 34.0)], &zoom, 64, 64);
        assert!((grown[0].width() - 16.0).abs() < 1e-12);
        assert!((grown[0].height() - 8.0).abs() < 1e-12);

        // shifted off the image entirely
        let gone = AffineParams { tx: 100.0, ..AffineParams::IDENTITY };
        assert!(transform_boxes(&[bx(5.0, 5.0, 15.0, 20.0)], &gone, 64, 64).is_empty());
    }

    #[test]
    fn translated_pixels_follow_the_boxes() {
        let img = Image::from_fn(20, 20, 1, |x, y, _| if (4..8).contains(&x) && (6..9).contains(&y) { 1.0 } else { 0.0 }).unwrap();
        let params = AffineParams { tx: 3.0, ty: -2.0, ..AffineParams::IDENTITY };
        let (out, boxes) = apply_affine(&img, &[bx(4.0, 6.0, 8.0, 9.0)], &params);
        assert_eq!(boxes, vec![bx(7.0, 4.0, 11.0, 7.0)]);
        assert!((out.get(7, 4, 0) - 1.0).abs() < 1e-12);
        assert_eq!(out.get(4, 6, 0), 0.0);
    }

    #[test]
    fn polarity_pair_examples() {
        let white = Image::filled(1, 1, 3, 1.0).unwrap();
        let (g, i) = make_polarity_pair(&white);
        assert!((g.data()[0] - 1.0).abs() < 1e-12);
        assert!(i.data()[0].abs() < 1e-12);

        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let (g, i) = make_polarity_pair(&red);
        assert!((g.data()[0] - 0.299).abs() < 1e-12);
        assert!((i.data()[0] - 0.701).abs() < 1e-12);
    }

    /// Oracle for box propagation: forward-map a supersampled mask of the
    /// box's pixels and take the bounding box of the pixel cells hit.
    fn mask_oracle(w: usize, h: usize, b: &BoundingBox, params: &AffineParams) -> Option<(f64, f64, f64, f64)> {
        const SUB: usize = 8;
        let center = (w as f64 / 2.0, h as f64 / 2.0);
        let mut hull: Option<(f64, f64, f64, f64)> = None;
        for y in b.y_min as usize..b.y_max as usize {
            for x in b.x_min as usize..b.x_max as usize {
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let p = (
                            x as f64 + (sx as f64 + 0.5) / SUB as f64,
                            y as f64 + (sy as f64 + 0.5) / SUB as f64,
                        );
                        let (mx, my) = params.apply(center, p);
                        if mx < 0.0 || my < 0.0 || mx >= w as f64 || my >= h as f64 {
                            continue;
                        }
                        let (cx, cy) = (mx.floor(), my.floor());
                        hull = Some(match hull {
                            None => (cx, cy, cx + 1.0, cy + 1.0),
                            Some(a) => (a.0.min(cx), a.1.min(cy), a.2.max(cx + 1.0), a.3.max(cy + 1.0)),
                        });
                    }
                }
            }
        }
        hull
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn box_propagation_agrees_with_mask_oracle(
            x0 in 4usize..14, y0 in 4usize..14, bw in 4usize..10, bh in 4usize..10,
            rot in -30.0f64..30.0, tx in -4.0f64..4.0, ty in -4.0f64..4.0, scale in 0.8f64..1.25,
        ) {
            let (w, h) = (32, 32);
            let b = bx(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64);
            let params = AffineParams { rotation_deg: rot, tx, ty, scale };
            let mapped = transform_boxes(&[b], &params, w, h);
            let oracle = mask_oracle(w, h, &b, &params);
            let thin = |x0: f64, y0: f64, x1: f64, y1: f64| (x1 - x0).min(y1 - y0) <= 1.0;
            let (m, o) = match (mapped.first(), oracle) {
                (None, None) => return Ok(()),
                (Some(m), None) => {
                    prop_assert!(thin(m.x_min, m.y_min, m.x_max, m.y_max), "{:?} vs nothing", m);
                    return Ok(());
                }
                (None, Some(o)) => {
                    prop_assert!(thin(o.0, o.1, o.2, o.3), "nothing vs {:?}", o);
                    return Ok(());
                }
                (Some(m), Some(o)) => (*m, o),
            };
            prop_assert!((m.x_min - o.0).abs() <= 1.0, "{:?} vs {:?}", m, o);
            prop_assert!((m.y_min - o.1).abs() <= 1.0, "{:?} vs {:?}", m, o);
            prop_assert!((m.x_max - o.2).abs() <= 1.0, "{:?} vs {:?}", m, o);
            prop_assert!((m.y_max - o.3).abs() <= 1.0, "{:?} vs {:?}", m, o);
        }

        #[test]
        fn flip_and_invert_are_involutions(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Image::from_fn(w, h, 3, |_, _, _| rand::Rng::gen::<f64>(&mut rng)).unwrap();
            let boxes = vec![bx(0.0, 0.0, w as f64 * 0.5 + 0.5, h as f64)];
            let (f, fb) = flip_horizontal(&img, &boxes);
            let (ff, ffb) = flip_horizontal(&f, &fb);
            prop_assert_eq!(&ff, &img);
            for (a, b) in ffb.iter().zip(&boxes) {
                prop_assert!((a.x_min - b.x_min).abs() < 1e-12 && (a.x_max - b.x_max).abs() < 1e-12);
            }
            let (gray, inv) = make_polarity_pair(&img);
            for (a, b) in inv.inverted().data().iter().zip(gray.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_is_idempotent(values in proptest::collection::vec(0.0f64..=1.0, 1..40)) {
            let n = values.len();
            let img = Image::new(n, 1, 1, values).unwrap();
            let once = normalize_minmax(&img);
            let twice = normalize_minmax(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expansion_counts_bounds_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = DatasetManifest::default();
        for i in 0..3 {
            let path = dir.path().join(format!("src{i}.png"));
            let img = Image::from_fn(24, 20, 3, |x, y, c| ((x + y + c + i) % 7) as f64 / 6.0).unwrap();
            save_image(&img, &path).unwrap();
            manifest.content.push(ContentEntry {
                path,
                boxes: vec![bx(2.0, 3.0, 12.0, 15.0), bx(15.0, 10.0, 23.0, 19.0)],
            });
        }
        let aug = AugmentConfig { rng_seed: 5, ..Default::default() };
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let a = expand_training_set(&manifest, &aug, 2, &out_a).unwrap();
        let b = expand_training_set(&manifest, &aug, 2, &out_b).unwrap();
        assert_eq!(a.content.len(), 2 * 2 * 3);
        for e in &a.content {
            let img = load_image(&e.path).unwrap();
            assert_eq!(img.channels(), 1);
            for bb in &e.boxes {
                assert!(bb.x_min >= 0.0 && bb.y_min >= 0.0);
                assert!(bb.x_max <= img.width() as f64 && bb.y_max <= img.height() as f64);
            }
        }
        for (ea, eb) in a.content.iter().zip(&b.content) {
            assert_eq!(fs::read(&ea.path).unwrap(), fs::read(&eb.path).unwrap());
            assert_eq!(ea.boxes, eb.boxes);
        }
        assert_eq!(
            fs::read(out_a.join("manifest.json")).unwrap(),
            fs::read(out_b.join("manifest.json")).unwrap()
        );
    }
}
