//! Procedural multi-domain stroke images.
//!
//! Every class owns a fixed set of line segments. A domain renders those
//! strokes through a fixed style transform (rotation, stroke width,
//! contrast, polarity, background texture, pixel noise) whose strength is
//! scaled by `style_shift`. With `style_shift = 0` every domain uses the
//! same transform, so domains differ only by sampling.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{splitmix64, DomainDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub style_shift: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Dataset(format!("invalid synthetic spec: {m}")));
        if self.n_domains < 2 {
            return bad("n_domains must be at least 2");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.n_per_class == 0 {
            return bad("n_per_class must be positive");
        }
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if !self.style_shift.is_finite() || self.style_shift < 0.0 {
            return bad("style_shift must be finite and non-negative");
        }
        Ok(())
    }
}

/// Fixed-function style of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub rotation_deg: f32,
    pub stroke_scale: f32,
    pub contrast: f32,
    pub inversion: f32,
    pub texture_amplitude: f32,
    /// `(fx, fy, phase)` of the two background sinusoids.
    pub texture_waves: [(f32, f32, f32); 2],
    pub noise_std: f32,
}

impl DomainStyle {
    pub fn for_domain(spec: &SyntheticSpec, d: usize) -> Self {
        let s = spec.style_shift;
        let sc = s.min(1.0);
        let t = if spec.n_domains > 1 {
            d as f32 / (spec.n_domains - 1) as f32
        } else {
            0.0
        };
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x7E57_0000 ^ d as u64));
        let mut wave = || {
            (
                rng.gen_range(1.0..3.5f32) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                rng.gen_range(1.0..3.5f32),
                rng.gen_range(0.0..2.0 * PI),
            )
        };
        let texture_waves = [wave(), wave()];
        Self {
            rotation_deg: s * (2.0 * t - 1.0) * 40.0,
            stroke_scale: 1.0 + 0.8 * sc * (t - 0.5),
            contrast: 1.0 - 0.5 * sc * t,
            inversion: if d % 2 == 1 { sc } else { 0.0 },
            texture_amplitude: 0.25 * s,
            texture_waves,
            noise_std: 0.04 + 0.08 * s * t,
        }
    }
}

type Segment = [(f32, f32); 2];

fn class_prototypes(spec: &SyntheticSpec) -> Vec<Vec<Segment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0xC1A5_5E5));
    (0..spec.classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let mut p = || (rng.gen_range(0.15..0.85f32), rng.gen_range(0.15..0.85f32));
                    [p(), p()]
                })
                .collect()
        })
        .collect()
}

fn segment_distance((px, py): (f32, f32), [(ax, ay), (bx, by)]: &Segment) -> f32 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx - px, ay + t * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn render(segments: &[Segment], style: &DomainStyle, size: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let jitter = Normal::new(0.0f32, 1.0).expect("unit normal");
    let shift = (0.05 * jitter.sample(rng), 0.05 * jitter.sample(rng));
    let scale = 1.0 + 0.06 * jitter.sample(rng);
    let angle = (style.rotation_deg + 8.0 * jitter.sample(rng)).to_radians();
    let thickness = (0.07 + rng.gen_range(0.0..0.04f32)) * style.stroke_scale;
    let segs: Vec<Segment> = segments
        .iter()
        .map(|s| {
            let mut s = *s;
            for p in &mut s {
                p.0 += 0.02 * jitter.sample(rng);
                p.1 += 0.02 * jitter.sample(rng);
            }
            s
        })
        .collect();
    let (sin, cos) = angle.sin_cos();
    let pixel = 1.0 / size as f32;
    let fg = 0.5 + 0.5 * style.contrast;
    let bg = 0.5 - 0.5 * style.contrast;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5) * pixel - 0.5;
            let v = (y as f32 + 0.5) * pixel - 0.5;
            // inverse of rotate(scale(p) + shift) about the centre
            let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
            let q = ((ru - shift.0) / scale + 0.5, (rv - shift.1) / scale + 0.5);
            let dist = segs
                .iter()
                .map(|s| segment_distance(q, s))
                .fold(f32::INFINITY, f32::min);
            let ink = (1.0 - (dist - thickness / 2.0) / pixel).clamp(0.0, 1.0);
            let mut value = bg + (fg - bg) * ink;
            value = (1.0 - style.inversion) * value + style.inversion * (1.0 - value);
            let (xu, yv) = (u + 0.5, v + 0.5);
            let texture: f32 = style
                .texture_waves
                .iter()
                .map(|&(fx, fy, ph)| (2.0 * PI * (fx * xu + fy * yv) + ph).sin())
                .sum::<f32>()
                / 2.0;
            value += style.texture_amplitude * texture + style.noise_std * jitter.sample(rng);
            out.push(value.clamp(0.0, 1.0));
        }
    }
}

/// Generates `n_domains` single-channel domains of `C × n_per_class` images.
/// Labels cycle through the classes so every histogram is exactly balanced.
pub fn make_synthetic_domains(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let prototypes = class_prototypes(spec);
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
    let size = spec.image_size;
    (0..spec.n_domains)
        .map(|d| {
            let style = DomainStyle::for_domain(spec, d);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed.wrapping_add(1 + d as u64)));
            let n = spec.classes * spec.n_per_class;
            let mut images = Vec::with_capacity(n * size * size);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % spec.classes;
                render(&prototypes[label], &style, size, &mut rng, &mut images);
                labels.push(label);
            }
            DomainDataset::new(format!("domain{d}"), (size, size, 1), images, labels, classes.clone())
        })
        .collect()
}
