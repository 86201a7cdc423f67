//! Procedural shape images whose classes are the leaves of a known taxonomy.
//!
//! Each class is a combination of binary visual attributes, and level `k` of
//! the class tree splits on attribute `k`:
//!
//! | level | attribute | 0       | 1       |
//! |-------|-----------|---------|---------|
//! | 1     | shape     | round   | angular |
//! | 2     | fill      | solid   | hollow  |
//! | 3     | stroke    | plain   | dashed  |
//! | 4     | size      | large   | small   |
//!
//! Two classes that first differ at attribute `k` are `2 * (depth - k)` edges
//! apart, so siblings differ only in size. Configurations with fewer classes use
//! the leading attributes and draw the rest at random per sample.
//!
//! Every sample is rendered from its own RNG stream seeded by
//! `(master seed, split, class, sample id)`, so generation order is irrelevant.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::ClassTaxonomy;
use crate::tensor::Tensor;
use crate::util;

pub const FORMAT_VERSION: u32 = 1;
const ATTRIBUTES: [(&str, &str); 4] = [("round", "angular"), ("solid", "hollow"), ("plain", "dashed"), ("large", "small")];
const DASH_SECTORS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Center offset, as a fraction of the image extent.
    pub position: f64,
    /// Maximum absolute rotation in radians.
    pub rotation: f64,
    /// Relative scale perturbation.
    pub scale: f64,
    /// Standard deviation of additive Gaussian pixel noise, in [0,255] units.
    pub noise_std: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            position: 0.06,
            rotation: std::f64::consts::FRAC_PI_4,
            scale: 0.1,
            noise_std: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub jitter: Jitter,
    /// Foreground colours are blended toward the background by this factor
    /// (1 = full saturated fill and dark stroke).
    pub contrast: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            num_classes: 16,
            train_per_class: 120,
            val_per_class: 16,
            jitter: Jitter::default(),
            contrast: 0.15,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        if self.channels != 3 {
            return bad(format!("only 3-channel images are rendered, got {}", self.channels));
        }
        if !matches!(self.num_classes, 2 | 4 | 8 | 16) {
            return bad(format!("num_classes must be 2, 4, 8 or 16, got {}", self.num_classes));
        }
        if self.val_per_class < 2 {
            return bad(format!("val_per_class must be >= 2, got {}", self.val_per_class));
        }
        if self.train_per_class < 1 {
            return bad("train_per_class must be >= 1".into());
        }
        let j = &self.jitter;
        if [j.position, j.rotation, j.scale, j.noise_std].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("jitter parameters must be finite and non-negative".into());
        }
        if j.position > 0.1 || j.scale > 0.2 {
            return bad("position jitter must be <= 0.1 and scale jitter <= 0.2 to keep shapes in frame".into());
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return bad(format!("contrast must be in (0, 1], got {}", self.contrast));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.num_classes.trailing_zeros() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// The four generating attributes of a rendered shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub angular: bool,
    pub hollow: bool,
    pub dashed: bool,
    pub small: bool,
}

impl Attributes {
    fn bits(self) -> [bool; 4] {
        [self.angular, self.hollow, self.dashed, self.small]
    }

    fn from_bits(b: [bool; 4]) -> Self {
        Self {
            angular: b[0],
            hollow: b[1],
            dashed: b[2],
            small: b[3],
        }
    }

    /// Class id under a tree of the given depth (attribute 0 is the most significant bit).
    pub fn class_id(self, depth: usize) -> usize {
        self.bits()[..depth].iter().fold(0, |acc, b| (acc << 1) | usize::from(*b))
    }
}

/// Geometry and colours of one sample before rasterization.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderParams {
    pub attrs: Attributes,
    pub center: (f64, f64),
    pub radius: f64,
    pub rotation: f64,
    pub stroke_width: f64,
    pub background: f64,
    pub fill: [f64; 3],
    pub stroke: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `(3, H, W)` in [0, 255].
    pub image: Tensor,
    pub label: usize,
    pub split: Split,
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub taxonomy: ClassTaxonomy,
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
}

pub fn taxonomy_for(num_classes: usize) -> Result<ClassTaxonomy> {
    let depth = num_classes.trailing_zeros() as usize;
    ClassTaxonomy::balanced_binary(depth, |level, bits| {
        if level == 0 {
            return "shape".to_string();
        }
        (0..level)
            .map(|k| {
                let bit = (bits >> (level - 1 - k)) & 1;
                if bit == 0 {
                    ATTRIBUTES[k].0
                } else {
                    ATTRIBUTES[k].1
                }
            })
            .collect::<Vec<_>>()
            .join("-")
    })
}

/// Draw the per-sample render parameters for one class.
pub fn sample_params(config: &DatasetConfig, class: usize, rng: &mut impl Rng) -> RenderParams {
    let depth = config.depth();
    let s = config.image_size as f64;
    let j = &config.jitter;
    let mut bits = [false; 4];
    for (k, bit) in bits.iter_mut().enumerate() {
        *bit = if k < depth {
            (class >> (depth - 1 - k)) & 1 == 1
        } else {
            rng.gen_bool(0.5)
        };
    }
    let attrs = Attributes::from_bits(bits);
    let mut sym = |amp: f64| if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
    let center = (s / 2.0 + sym(j.position * s), s / 2.0 + sym(j.position * s));
    let base = if attrs.small { 0.2 } else { 0.32 };
    let mut radius = base * s * (1.0 + sym(j.scale));
    if attrs.angular {
        // half side of the square, sized so its area is close to the disc's
        radius *= 0.85;
    }
    let rotation = sym(j.rotation);
    let background = rng.gen_range(190.0..=250.0);
    let hi = rng.gen_range(150.0..=200.0);
    let lo = rng.gen_range(0.0..=40.0);
    let mid = rng.gen_range(lo..=hi);
    let mut fill = [hi, mid, lo];
    let perm = rng.gen_range(0..6);
    fill = match perm {
        0 => fill,
        1 => [fill[0], fill[2], fill[1]],
        2 => [fill[1], fill[0], fill[2]],
        3 => [fill[1], fill[2], fill[0]],
        4 => [fill[2], fill[0], fill[1]],
        _ => [fill[2], fill[1], fill[0]],
    };
    let stroke = rng.gen_range(10.0..=50.0);
    let blend = |v: f64| background + config.contrast * (v - background);
    let fill = fill.map(blend);
    let stroke = blend(stroke);
    RenderParams {
        attrs,
        center,
        radius,
        rotation,
        stroke_width: 0.06 * s,
        background,
        fill,
        stroke,
    }
}

/// Rasterize without noise. Output is `(3, size, size)` row-major.
pub fn rasterize(p: &RenderParams, size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; 3 * plane];
    let (sin, cos) = p.rotation.sin_cos();
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - p.center.0;
            let dy = py as f64 + 0.5 - p.center.1;
            // into the shape frame
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            let rho = if p.attrs.angular { u.abs().max(v.abs()) } else { (u * u + v * v).sqrt() };
            let inside = rho <= p.radius;
            let in_band = inside && rho > p.radius - p.stroke_width;
            let dash_on = if p.attrs.dashed {
                let ang = v.atan2(u).rem_euclid(std::f64::consts::TAU);
                (ang / std::f64::consts::TAU * DASH_SECTORS).floor() as usize % 2 == 0
            } else {
                true
            };
            let rgb = if in_band && dash_on {
                [p.stroke; 3]
            } else if inside && !p.attrs.hollow {
                p.fill
            } else {
                [p.background; 3]
            };
            for (c, v) in rgb.iter().enumerate() {
                out[c * plane + py * size + px] = *v;
            }
        }
    }
    out
}

fn sample_rng(config: &DatasetConfig, split: Split, class: usize, sample: usize) -> rand_chacha::ChaCha8Rng {
    util::rng_for(config.seed, &[split.tag(), class as u64, sample as u64])
}

/// Noise-free render of one sample: same geometry and colours as
/// [`render_sample`], without pixel noise.
pub fn render_clean(config: &DatasetConfig, split: Split, class: usize, sample: usize) -> (RenderParams, Vec<f64>) {
    let mut rng = sample_rng(config, split, class, sample);
    let params = sample_params(config, class, &mut rng);
    let pixels = rasterize(&params, config.image_size);
    (params, pixels)
}

/// Final pixels of one sample, quantized to `f32` (the on-disk precision).
pub fn render_sample(config: &DatasetConfig, split: Split, class: usize, sample: usize) -> Vec<f64> {
    let mut rng = sample_rng(config, split, class, sample);
    let params = sample_params(config, class, &mut rng);
    let mut pixels = rasterize(&params, config.image_size);
    if config.jitter.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.jitter.noise_std).expect("finite std");
        for v in pixels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    pixels.into_iter().map(|v| v.clamp(0.0, 255.0) as f32 as f64).collect()
}

pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let taxonomy = taxonomy_for(config.num_classes)?;
    let shape = config.image_shape().to_vec();
    let make = |split: Split, per_class: usize| -> Result<Vec<LabeledImage>> {
        let mut out = Vec::with_capacity(per_class * config.num_classes);
        for class in 0..config.num_classes {
            for sample in 0..per_class {
                out.push(LabeledImage {
                    image: Tensor::new(shape.clone(), render_sample(config, split, class, sample))?,
                    label: class,
                    split,
                    sample_id: sample,
                });
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        train: make(Split::Train, config.train_per_class)?,
        validation: make(Split::Validation, config.val_per_class)?,
        taxonomy,
        config: config.clone(),
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn get(&self, split: Split, class: usize, sample_id: usize) -> Option<&LabeledImage> {
        let per = match split {
            Split::Train => self.config.train_per_class,
            Split::Validation => self.config.val_per_class,
        };
        if class >= self.config.num_classes || sample_id >= per {
            return None;
        }
        self.split(split).get(class * per + sample_id)
    }

    /// Per-channel mean pixel over the training split.
    pub fn mean_pixel(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for img in &self.train {
            let plane = img.image.len() / 3;
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            n += plane;
        }
        acc.map(|a| a / n.max(1) as f64)
    }

    fn payload(&self) -> Vec<u8> {
        util::f32_le_bytes(self.train.iter().chain(&self.validation).flat_map(|r| r.image.data().iter().copied()))
    }

    pub fn content_hash(&self) -> String {
        util::sha256_hex(&[&self.payload()])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let payload = self.payload();
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            taxonomy: self.taxonomy.clone(),
            image_shape: self.config.image_shape().to_vec(),
            num_records: self.train.len() + self.validation.len(),
            payload: PAYLOAD_FILE.to_string(),
            content_hash: util::sha256_hex(&[&payload]),
        };
        util::write_file(&dir.join(PAYLOAD_FILE), &payload)?;
        util::write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let path = dir.join(&manifest.payload);
        let payload = util::read_file(&path)?;
        let per_image: usize = manifest.image_shape.iter().product();
        let expected = manifest.num_records * per_image * 4;
        if payload.len() != expected {
            return Err(Error::Corrupt {
                path,
                reason: format!("payload has {} bytes, manifest implies {expected}", payload.len()),
            });
        }
        let actual = util::sha256_hex(&[&payload]);
        if actual != manifest.content_hash {
            return Err(Error::HashMismatch {
                path,
                expected: manifest.content_hash,
                actual,
            });
        }
        let cfg = &manifest.config;
        if manifest.num_records != cfg.num_classes * (cfg.train_per_class + cfg.val_per_class)
            || manifest.image_shape != cfg.image_shape()
        {
            return Err(Error::Corrupt {
                path,
                reason: "record count or image shape disagrees with the config".into(),
            });
        }
        let values = util::f32_from_le(&payload);
        let mut chunks = values.chunks_exact(per_image);
        let mut read = |split: Split, per_class: usize| -> Result<Vec<LabeledImage>> {
            let mut out = Vec::new();
            for class in 0..cfg.num_classes {
                for sample in 0..per_class {
                    let data = chunks.next().expect("length checked").to_vec();
                    out.push(LabeledImage {
                        image: Tensor::new(manifest.image_shape.clone(), data)?,
                        label: class,
                        split,
                        sample_id: sample,
                    });
                }
            }
            Ok(out)
        };
        let train = read(Split::Train, cfg.train_per_class)?;
        let validation = read(Split::Validation, cfg.val_per_class)?;
        Ok(Self {
            config: manifest.config,
            taxonomy: manifest.taxonomy,
            train,
            validation,
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "images.bin";

/// JSON manifest stored next to the image payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub taxonomy: ClassTaxonomy,
    pub image_shape: Vec<usize>,
    pub num_records: usize,
    pub payload: String,
    pub content_hash: String,
}

impl DatasetManifest {
    /// Read only the manifest; the image payload is not touched.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = util::read_json(&dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                what: "dataset manifest".into(),
                expected: FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        Ok(manifest)
    }
}
