//! Multi-domain image datasets sharing one label space.

mod idx;
mod imagedir;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use idx::{read_idx_images, read_idx_labels};
pub use synthetic::{make_synthetic_domains, DomainStyle, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Deterministic 90/10 train/val assignment from a hash of the image index.
pub fn split_for_index(index: usize) -> Split {
    if splitmix64(index as u64) % 10 == 0 {
        Split::Val
    } else {
        Split::Train
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Images of one domain, stored `count × H × W × channels` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub split: Vec<Split>,
}

impl DomainDataset {
    /// Validates the invariants and assigns the hashed train/val split.
    pub fn new(
        name: impl Into<String>,
        (height, width, channels): (usize, usize, usize),
        images: Vec<f32>,
        labels: Vec<usize>,
        classes: Vec<String>,
    ) -> Result<Self> {
        let name = name.into();
        let item = height * width * channels;
        if labels.is_empty() {
            return Err(Error::Dataset(format!("{name}: empty dataset")));
        }
        if item == 0 || images.len() != labels.len() * item {
            return Err(Error::Dataset(format!(
                "{name}: {} pixels for {} images of {height}x{width}x{channels}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Dataset(format!(
                "{name}: label {bad} outside the declared {} classes",
                classes.len()
            )));
        }
        if images.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!(
                "{name}: pixel values must be finite and in [0, 1]"
            )));
        }
        let split = (0..labels.len()).map(split_for_index).collect();
        Ok(Self {
            name,
            height,
            width,
            channels,
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// `[H, W, channels]`, the wire shape of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Batch of the given images as an `[n, channels, H, W]` tensor.
    pub fn batch_nchw(&self, indices: &[usize]) -> Tensor {
        let images: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        hwc_batch_to_nchw(&images, self.height, self.width, self.channels)
    }

    /// Checks that every dataset in an experiment shares one label space.
    pub fn ensure_shared_label_space(datasets: &[&DomainDataset]) -> Result<()> {
        let Some(first) = datasets.first() else {
            return Err(Error::Dataset("no datasets given".into()));
        };
        for d in datasets {
            if d.classes != first.classes {
                return Err(Error::Dataset(format!(
                    "domain {} has classes {:?}, domain {} has {:?}",
                    d.name, d.classes, first.name, first.classes
                )));
            }
            if d.image_shape() != first.image_shape() {
                return Err(Error::Dataset(format!(
                    "domain {} has image shape {:?}, domain {} has {:?}",
                    d.name,
                    d.image_shape(),
                    first.name,
                    first.image_shape()
                )));
            }
        }
        Ok(())
    }
}

/// Converts HWC images to one NCHW tensor.
pub fn hwc_batch_to_nchw(images: &[&[f32]], h: usize, w: usize, ch: usize) -> Tensor {
    let mut data = vec![0.0; images.len() * h * w * ch];
    for (n, img) in images.iter().enumerate() {
        let base = n * h * w * ch;
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    data[base + (c * h + y) * w + x] = img[(y * w + x) * ch + c];
                }
            }
        }
    }
    Tensor::new(vec![images.len(), ch, h, w], data).expect("consistent batch shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Idx,
    Imagedir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Target `(height, width)`; images are resized when they differ.
    pub image_size: (usize, usize),
    pub channels: usize,
    /// Declared label set. IDX defaults to the digits 0-9; image
    /// directories default to the sorted sub-directory names.
    pub classes: Option<Vec<String>>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            image_size: (32, 32),
            channels: 1,
            classes: None,
        }
    }
}

/// Loads one domain from disk, normalized to `[0, 1]`.
pub fn load_domain(name: &str, path: &Path, format: DatasetFormat, opts: &LoadOptions) -> Result<DomainDataset> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    match format {
        DatasetFormat::Idx => idx::load(name, path, opts),
        DatasetFormat::Imagedir => imagedir::load(name, path, opts),
    }
}

/// Bilinear resize of one `h × w × ch` image.
pub(crate) fn resize_bilinear(src: &[f32], (h, w): (usize, usize), (th, tw): (usize, usize), ch: usize) -> Vec<f32> {
    if (h, w) == (th, tw) {
        return src.to_vec();
    }
    let mut out = vec![0.0; th * tw * ch];
    let sy = h as f32 / th as f32;
    let sx = w as f32 / tw as f32;
    for y in 0..th {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..tw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..ch {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * ch + c];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(y * tw + x) * ch + c] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
            }
        }
    }
    out
}
