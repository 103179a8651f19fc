//! Desk-scale synthetic two-domain image tasks.
//!
//! Each class owns a procedural motif (shape kind plus a hue from a
//! golden-angle palette); every sample draws the motif with seeded
//! position/scale/rotation jitter over a noisy background. The target
//! domain renders the same underlying image per index and then applies
//! the configured shift: affine jitter, Gaussian blur, hue rotation.
//! Zero shift magnitudes reproduce the source images exactly.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::derive_seed;
use crate::error::{Error, Result};
use crate::label_space::ClassId;

/// Fixed-magnitude target-domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_shift_deg: f64,
    pub blur_sigma: f64,
    /// Relative translation/scale amplitude.
    pub affine_jitter: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        Self {
            hue_shift_deg: 0.0,
            blur_sigma: 0.0,
            affine_jitter: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.hue_shift_deg == 0.0 && self.blur_sigma == 0.0 && self.affine_jitter == 0.0
    }
}

/// Description of one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub shift: DomainShift,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.images_per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic task needs at least one class and one image".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "image size must be at least 8, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

const SHIFT_STREAM: u64 = 0x5F17;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta < 1e-12 {
        0.0
    } else if (max - r).abs() < 1e-12 {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if (max - g).abs() < 1e-12 {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max < 1e-12 { 0.0 } else { delta / max };
    (h, s, max)
}

/// Which pixels of the unit box belong to motif `kind`.
fn inside_motif(kind: usize, p: f64, q: f64) -> bool {
    let r = (p * p + q * q).sqrt();
    match kind % 10 {
        0 => r <= 1.0,
        1 => p.abs() <= 0.9 && q.abs() <= 0.9,
        2 => (-0.9..=0.9).contains(&q) && p.abs() <= (0.9 - q) * 0.6,
        3 => (0.55..=1.0).contains(&r),
        4 => (p.abs() <= 0.35 && q.abs() <= 1.0) || (q.abs() <= 0.35 && p.abs() <= 1.0),
        5 => p.abs() + q.abs() <= 1.1,
        6 => q.abs() <= 1.0 && p.abs() <= 1.0 && ((q + 1.0) / 0.4).floor() as i64 % 2 == 0,
        7 => q.abs() <= 1.0 && p.abs() <= 1.0 && ((p + 1.0) / 0.4).floor() as i64 % 2 == 0,
        8 => {
            p.abs() <= 1.0
                && q.abs() <= 1.0
                && (((p + 1.0) / 0.5).floor() + ((q + 1.0) / 0.5).floor()) as i64 % 2 == 0
        }
        _ => {
            let spacing = 0.66;
            let dp = (p + 1.0).rem_euclid(spacing) - spacing / 2.0;
            let dq = (q + 1.0).rem_euclid(spacing) - spacing / 2.0;
            p.abs() <= 1.0 && q.abs() <= 1.0 && (dp * dp + dq * dq).sqrt() <= 0.22
        }
    }
}

/// Class hue on a golden-angle palette. Samples jitter around it (see
/// [`render_class_image`]) so hue alone never pins down the class.
fn class_hue(class: ClassId) -> f64 {
    (class as f64 * 137.508).rem_euclid(360.0)
}

/// Per-sample hue jitter amplitude in degrees, applied in both domains.
const HUE_JITTER_DEG: f64 = 16.0;

/// Renders the pre-shift image of `(class, index)`. Pixels are
/// `(3, size, size)` in `[0, 1]`.
pub fn render_class_image(
    spec: &SyntheticTaskSpec,
    class: ClassId,
    index: usize,
    seed: u64,
) -> Array3<f64> {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, class as u64), index as u64));
    let s = size as f64;

    let hue = class_hue(class) + rng.gen_range(-HUE_JITTER_DEG..HUE_JITTER_DEG);
    let (fr, fg, fb) = hsv_to_rgb(hue, 0.75, 0.92);
    let cx = s / 2.0 + rng.gen_range(-0.10..0.10) * s;
    let cy = s / 2.0 + rng.gen_range(-0.10..0.10) * s;
    let half_extent = s * rng.gen_range(0.26..0.36);
    let theta: f64 = rng.gen_range(-0.45..0.45);
    let (sin_t, cos_t) = theta.sin_cos();
    let bg_base = rng.gen_range(0.10..0.22);
    // Mild diagonal lighting so the background is not constant.
    let light_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ldy, ldx) = light_dir.sin_cos();

    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let p = (dx * cos_t + dy * sin_t) / half_extent;
            let q = (-dx * sin_t + dy * cos_t) / half_extent;
            let (r, g, b) = if inside_motif(class, p, q) {
                (fr + noise, fg + noise, fb + noise)
            } else {
                let grad =
                    0.06 * ((x as f64 / s - 0.5) * ldx + (y as f64 / s - 0.5) * ldy);
                let v = bg_base + grad + noise;
                (v, v, v)
            };
            out[(0, y, x)] = r.clamp(0.0, 1.0);
            out[(1, y, x)] = g.clamp(0.0, 1.0);
            out[(2, y, x)] = b.clamp(0.0, 1.0);
        }
    }
    out
}

fn bilinear(img: &Array3<f64>, c: usize, y: f64, x: f64) -> f64 {
    let h = img.shape()[1] as f64;
    let w = img.shape()[2] as f64;
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.shape()[1] - 1);
    let x1 = (x0 + 1).min(img.shape()[2] - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    img[(c, y0, x0)] * (1.0 - fy) * (1.0 - fx)
        + img[(c, y0, x1)] * (1.0 - fy) * fx
        + img[(c, y1, x0)] * fy * (1.0 - fx)
        + img[(c, y1, x1)] * fy * fx
}

fn affine_jitter(img: &Array3<f64>, amount: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let tx = rng.gen_range(-amount..=amount) * w as f64;
    let ty = rng.gen_range(-amount..=amount) * h as f64;
    let scale = 1.0 + rng.gen_range(-amount..=amount);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros(img.raw_dim());
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let sy = cy + (y as f64 - cy - ty) / scale;
                let sx = cx + (x as f64 - cx - tx) / scale;
                out[(c, y, x)] = bilinear(img, c, sy, sx);
            }
        }
    }
    out
}

fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (2.5 * sigma).ceil() as i64;
    if radius == 0 {
        return img.clone();
    }
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / norm).collect();
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let clamp_y = |y: i64| y.clamp(0, h as i64 - 1) as usize;
    let clamp_x = |x: i64| x.clamp(0, w as i64 - 1) as usize;
    let mut pass1 = Array3::zeros(img.raw_dim());
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    acc += k * img[(c, y, clamp_x(x as i64 + ki as i64 - radius))];
                }
                pass1[(c, y, x)] = acc;
            }
        }
    }
    let mut pass2 = Array3::zeros(img.raw_dim());
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    acc += k * pass1[(c, clamp_y(y as i64 + ki as i64 - radius), x)];
                }
                pass2[(c, y, x)] = acc;
            }
        }
    }
    pass2
}

fn hue_rotate(img: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let mut out = img.clone();
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let (hh, ss, vv) = rgb_to_hsv(img[(0, y, x)], img[(1, y, x)], img[(2, y, x)]);
            let (r, g, b) = hsv_to_rgb(hh + degrees, ss, vv);
            out[(0, y, x)] = r;
            out[(1, y, x)] = g;
            out[(2, y, x)] = b;
        }
    }
    out
}

/// Applies the target-domain shift. Each zero-magnitude component is
/// skipped outright so a zero shift is exactly the identity.
pub fn apply_shift(img: &Array3<f64>, shift: &DomainShift, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut out = img.clone();
    if shift.affine_jitter != 0.0 {
        out = affine_jitter(&out, shift.affine_jitter, rng);
    }
    if shift.blur_sigma != 0.0 {
        out = gaussian_blur(&out, shift.blur_sigma);
    }
    if shift.hue_shift_deg != 0.0 {
        out = hue_rotate(&out, shift.hue_shift_deg);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// The image of `(class, index)` as seen from one domain.
pub fn synthesize_image(
    spec: &SyntheticTaskSpec,
    class: ClassId,
    index: usize,
    domain: Domain,
    seed: u64,
) -> Array3<f64> {
    let base = render_class_image(spec, class, index, seed);
    match domain {
        Domain::Source => base,
        Domain::Target => {
            let shift_seed = derive_seed(
                derive_seed(derive_seed(seed, class as u64), index as u64),
                SHIFT_STREAM,
            );
            let mut rng = ChaCha8Rng::seed_from_u64(shift_seed);
            apply_shift(&base, &spec.shift, &mut rng)
        }
    }
}

/// In-memory corpus for the given classes from one domain, image ids in
/// `class/index` form.
pub fn synthesize_corpus(
    spec: &SyntheticTaskSpec,
    class_ids: &[ClassId],
    domain: Domain,
    seed: u64,
) -> Result<(Vec<Array3<f64>>, Vec<ClassId>, Vec<String>)> {
    spec.validate()?;
    for &c in class_ids {
        if c >= spec.num_classes {
            return Err(Error::InvalidConfig(format!(
                "class {c} outside the {}-class universe",
                spec.num_classes
            )));
        }
    }
    let mut images = Vec::with_capacity(class_ids.len() * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut ids = Vec::with_capacity(images.capacity());
    for &class in class_ids {
        for index in 0..spec.images_per_class {
            images.push(synthesize_image(spec, class, index, domain, seed));
            labels.push(class);
            ids.push(format!("{class}/{index}"));
        }
    }
    Ok((images, labels, ids))
}
