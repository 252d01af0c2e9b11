//! Image, bounding-box and dataset-manifest types shared by the whole pipeline,
//! plus PNG and manifest I/O.
//!
//! Images are stored as `f64` intensities in `[0, 1]`, row-major with the
//! channels of a pixel interleaved (`data[(y * width + x) * channels + c]`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Luma weights used for every RGB to grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting bad channel counts, wrong data lengths and
    /// any value outside `[0, 1]` (NaN included).
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels} = {expected}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidImage(format!(
                "value {v} at index {i} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds an image from a per-sample function `f(x, y, channel)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    /// Like [`Image::new`] but clamps values into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, channels, data)
    }

    /// Builds an image from channel-planar (`C x H x W`) data.
    pub fn from_planar(
        width: usize,
        height: usize,
        channels: usize,
        planar: &[f64],
    ) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(Error::Shape(format!(
                "planar buffer of {} values for {width}x{height}x{channels}",
                planar.len()
            )));
        }
        let mut data = vec![0.0; planar.len()];
        for c in 0..channels {
            for i in 0..plane {
                data[i * channels + c] = planar[c * plane + i];
            }
        }
        Self::from_clamped(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Channel-planar copy of the data (`C x H x W`).
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.pixel_count();
        let mut out = vec![0.0; self.data.len()];
        for i in 0..plane {
            for c in 0..self.channels {
                out[c * plane + i] = self.data[i * self.channels + c];
            }
        }
        out
    }

    /// Grayscale images are replicated into three channels; RGB is returned as is.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Single-channel luma image; grayscale input is returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Elementwise `1 - v`.
    pub fn inverted(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }

    /// Applies `f` to every sample, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|&v| {
                    let r = f(v);
                    if r.is_nan() {
                        0.0
                    } else {
                        r.clamp(0.0, 1.0)
                    }
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Axis-aligned box in continuous pixel coordinates: a box covering pixel
/// columns `a..b` has `x_min = a`, `x_max = b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord", into = "BoxRecord")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub label: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BoxRecord {
    Labelled(f64, f64, f64, f64, u32),
    Bare(f64, f64, f64, f64),
}

impl TryFrom<BoxRecord> for BoundingBox {
    type Error = Error;

    fn try_from(r: BoxRecord) -> Result<Self> {
        match r {
            BoxRecord::Labelled(a, b, c, d, l) => BoundingBox::new(a, b, c, d, l),
            BoxRecord::Bare(a, b, c, d) => BoundingBox::new(a, b, c, d, 0),
        }
    }
}

impl From<BoundingBox> for BoxRecord {
    fn from(b: BoundingBox) -> Self {
        BoxRecord::Labelled(b.x_min, b.y_min, b.x_max, b.y_max, b.label)
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, label: u32) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!(
                "[{x_min}, {y_min}, {x_max}, {y_max}] must satisfy x_min < x_max and y_min < y_max"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            label,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Clamps the box into `[0, width] x [0, height]`; `None` if nothing with
    /// positive area remains.
    pub fn clamped(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let (w, h) = (width as f64, height as f64);
        BoundingBox::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
            self.label,
        )
        .ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContentEntry {
    pub path: PathBuf,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleSet {
    pub id: usize,
    pub paths: Vec<PathBuf>,
}

/// Content images with their ground-truth boxes plus the style exemplar sets.
/// Style sets are kept sorted by id and their ids are exactly `0..n_styles`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub content: Vec<ContentEntry>,
    pub styles: Vec<StyleSet>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    content: Vec<ContentRecord>,
    #[serde(default)]
    styles: Vec<StyleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContentRecord {
    path: PathBuf,
    #[serde(default)]
    boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleRecord {
    id: usize,
    paths: Vec<PathBuf>,
}

impl DatasetManifest {
    pub fn n_styles(&self) -> usize {
        self.styles.len()
    }

    pub fn style_set(&self, id: usize) -> Option<&StyleSet> {
        self.styles.get(id)
    }

    /// Checks style-id contiguity and sorts the sets by id.
    fn normalize_styles(&mut self) -> std::result::Result<(), String> {
        self.styles.sort_by_key(|s| s.id);
        for (expected, set) in self.styles.iter().enumerate() {
            if set.id != expected {
                let ids: Vec<_> = self.styles.iter().map(|s| s.id).collect();
                return Err(format!("non-contiguous style ids {ids:?}"));
            }
            if set.paths.is_empty() {
                return Err(format!("style set {} has no images", set.id));
            }
        }
        Ok(())
    }

    fn all_paths(&self) -> impl Iterator<Item = &Path> {
        self.content
            .iter()
            .map(|c| c.path.as_path())
            .chain(self.styles.iter().flat_map(|s| s.paths.iter().map(|p| p.as_path())))
    }

    pub fn to_json(&self, base_dir: &Path) -> String {
        let rel = |p: &Path| -> PathBuf {
            p.strip_prefix(base_dir)
                .map(Path::to_path_buf)
                .unwrap_or_else(|_| p.to_path_buf())
        };
        let file = ManifestFile {
            content: self
                .content
                .iter()
                .map(|c| ContentRecord {
                    path: rel(&c.path),
                    boxes: c.boxes.clone(),
                })
                .collect(),
            styles: self
                .styles
                .iter()
                .map(|s| StyleRecord {
                    id: s.id,
                    paths: s.paths.iter().map(|p| rel(p)).collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
        text.push('\n');
        text
    }
}

fn manifest_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Parses and validates a manifest without requiring content entries.
/// Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| manifest_err(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let mut manifest = DatasetManifest {
        content: file
            .content
            .into_iter()
            .map(|c| ContentEntry {
                path: resolve(c.path),
                boxes: c.boxes,
            })
            .collect(),
        styles: file
            .styles
            .into_iter()
            .map(|s| StyleSet {
                id: s.id,
                paths: s.paths.into_iter().map(resolve).collect(),
            })
            .collect(),
    };
    manifest
        .normalize_styles()
        .map_err(|m| manifest_err(path, m))?;
    if let Some(missing) = manifest.all_paths().find(|p| !p.is_file()) {
        return Err(manifest_err(
            path,
            format!("dangling path {}", missing.display()),
        ));
    }
    Ok(manifest)
}

/// Parses and validates a manifest; at least one content entry is required.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest = read_manifest(path)?;
    if manifest.content.is_empty() {
        return Err(manifest_err(path, "no content entries"));
    }
    Ok(manifest)
}

/// Writes the manifest as JSON, with paths relative to the manifest's
/// directory where possible.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    fs::write(path, manifest.to_json(base)).map_err(|e| Error::io(path, e))
}

/// Loads an 8/16-bit grayscale or RGB PNG, mapping samples linearly to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match decoded {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw().into_iter().map(u8_unit).collect()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw().into_iter().map(u8_unit).collect()),
        DynamicImage::ImageLuma16(buf) => {
            (1, buf.into_raw().into_iter().map(u16_unit).collect())
        }
        DynamicImage::ImageRgb16(buf) => (3, buf.into_raw().into_iter().map(u16_unit).collect()),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                message: format!(
                    "{:?}; expected 8- or 16-bit grayscale or RGB",
                    other.color()
                ),
            })
        }
    };
    Image::new(w, h, channels, data).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn u8_unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn u16_unit(v: u16) -> f64 {
    f64::from(v) / 65535.0
}

/// Quantizes a `[0, 1]` sample to 8 bits.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes the image as an 8-bit PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let encode_err = |e: image::ImageError| Error::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let dynamic = match img.channels() {
        1 => DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, bytes).expect("buffer length matches"),
        ),
        _ => DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, bytes).expect("buffer length matches"),
        ),
    };
    let mut out = Vec::new();
    dynamic
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(encode_err)?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
