//! Training-time augmentation. A plan is drawn from a seed, applied to image
//! and mask together for geometric transforms, and to the image alone for
//! photometric ones. Plans are plain data so tests can force exact settings.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{gaussian_blur, ImageBuf, MaskBuf, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    /// Side-length fraction kept, in `[0.7, 1.0]`.
    pub scale: f64,
    /// Fractional placement of the crop window inside the slack, in `[0, 1]`.
    pub fx: f64,
    pub fy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Elastic {
    /// Peak displacement in pixels, `[0, 10]`.
    pub amplitude: f64,
    /// Seed for the smoothed displacement field; image and mask share it.
    pub field_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub sigma: f64,
    pub seed: u64,
}

/// One augmentation draw. `None` means the transform is off; each switch
/// comes up with probability one half.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub rotate_deg: Option<f64>,
    pub crop: Option<Crop>,
    pub elastic: Option<Elastic>,
    pub flip: Option<FlipAxis>,
    pub noise: Option<Noise>,
    pub gamma: Option<f64>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
}

impl AugmentPlan {
    pub fn identity() -> AugmentPlan {
        AugmentPlan {
            rotate_deg: None,
            crop: None,
            elastic: None,
            flip: None,
            noise: None,
            gamma: None,
            brightness: None,
            contrast: None,
        }
    }

    /// Draws switches and parameters in a fixed order so a seed pins the
    /// whole plan.
    pub fn draw(sub_seed: u64) -> AugmentPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
        let mut plan = AugmentPlan::identity();
        if rng.gen_bool(0.5) {
            plan.rotate_deg = Some(rng.gen_range(-30.0..=30.0));
        }
        if rng.gen_bool(0.5) {
            plan.crop = Some(Crop {
                scale: rng.gen_range(0.7..=1.0),
                fx: rng.gen_range(0.0..=1.0),
                fy: rng.gen_range(0.0..=1.0),
            });
        }
        if rng.gen_bool(0.5) {
            plan.elastic =
                Some(Elastic { amplitude: rng.gen_range(0.0..=10.0), field_seed: rng.next_u64() });
        }
        if rng.gen_bool(0.5) {
            plan.flip = Some(if rng.gen_bool(0.5) {
                FlipAxis::Horizontal
            } else {
                FlipAxis::Vertical
            });
        }
        if rng.gen_bool(0.5) {
            plan.noise = Some(Noise { sigma: rng.gen_range(0.0..=0.05), seed: rng.next_u64() });
        }
        if rng.gen_bool(0.5) {
            plan.gamma = Some(rng.gen_range(0.7..=1.5));
        }
        if rng.gen_bool(0.5) {
            plan.brightness = Some(rng.gen_range(-0.2..=0.2));
        }
        if rng.gen_bool(0.5) {
            plan.contrast = Some(rng.gen_range(0.7..=1.3));
        }
        plan
    }

    pub fn apply(&self, sample: &Sample) -> Sample {
        let size = sample.image.size;
        let mut image = sample.image.data.clone();
        let mut mask = sample.mask.data.clone();

        if let Some(deg) = self.rotate_deg {
            let theta = deg.to_radians();
            let c = (size as f64 - 1.0) / 2.0;
            let (sin, cos) = theta.sin_cos();
            let map = |x: f64, y: f64| {
                let dx = x - c;
                let dy = y - c;
                (c + dx * cos + dy * sin, c - dx * sin + dy * cos)
            };
            image = warp(&image, size, Sampling::Bilinear, map);
            mask = warp(&mask, size, Sampling::Nearest, map);
        }

        if let Some(crop) = self.crop {
            let w = (crop.scale * size as f64).round().clamp(1.0, size as f64);
            let ox = crop.fx * (size as f64 - w);
            let oy = crop.fy * (size as f64 - w);
            let ratio = w / size as f64;
            let map = move |x: f64, y: f64| {
                ((x + 0.5) * ratio - 0.5 + ox, (y + 0.5) * ratio - 0.5 + oy)
            };
            image = warp(&image, size, Sampling::Bilinear, map);
            mask = warp(&mask, size, Sampling::Nearest, map);
        }

        if let Some(el) = self.elastic {
            let (dx, dy) = elastic_fields(size, el);
            let map = |x: f64, y: f64| {
                let i = y as usize * size + x as usize;
                (x + dx[i] as f64, y + dy[i] as f64)
            };
            image = warp(&image, size, Sampling::Bilinear, map);
            mask = warp(&mask, size, Sampling::Nearest, map);
        }

        if let Some(axis) = self.flip {
            image = flip(&image, size, axis);
            mask = flip(&mask, size, axis);
        }

        if let Some(noise) = self.noise {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            let dist = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
            for v in &mut image {
                *v = (*v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        if let Some(g) = self.gamma {
            for v in &mut image {
                *v = v.clamp(0.0, 1.0).powf(g as f32);
            }
        }
        if let Some(b) = self.brightness {
            for v in &mut image {
                *v = (*v + b as f32).clamp(0.0, 1.0);
            }
        }
        if let Some(c) = self.contrast {
            for v in &mut image {
                *v = ((*v - 0.5) * c as f32 + 0.5).clamp(0.0, 1.0);
            }
        }

        Sample {
            id: sample.id.clone(),
            image: ImageBuf { size, data: image },
            mask: MaskBuf { size, data: mask },
        }
    }
}

/// Draws a plan from the seed and applies it.
pub fn augment(sample: &Sample, sub_seed: u64) -> Sample {
    AugmentPlan::draw(sub_seed).apply(sample)
}

#[derive(Clone, Copy)]
enum Sampling {
    Bilinear,
    Nearest,
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn sample_at(data: &[f32], size: usize, x: f64, y: f64, mode: Sampling) -> f32 {
    match mode {
        Sampling::Nearest => {
            let xi = reflect(x.round() as isize, size);
            let yi = reflect(y.round() as isize, size);
            data[yi * size + xi]
        }
        Sampling::Bilinear => {
            let x0 = x.floor();
            let y0 = y.floor();
            let tx = x - x0;
            let ty = y - y0;
            let xa = reflect(x0 as isize, size);
            let xb = reflect(x0 as isize + 1, size);
            let ya = reflect(y0 as isize, size);
            let yb = reflect(y0 as isize + 1, size);
            let v00 = data[ya * size + xa] as f64;
            let v01 = data[ya * size + xb] as f64;
            let v10 = data[yb * size + xa] as f64;
            let v11 = data[yb * size + xb] as f64;
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            (top + (bot - top) * ty) as f32
        }
    }
}

/// Pulls each destination pixel from `map(dst)` in the source.
fn warp(
    data: &[f32],
    size: usize,
    mode: Sampling,
    map: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = map(x as f64, y as f64);
            out[y * size + x] = sample_at(data, size, sx, sy, mode);
        }
    }
    out
}

/// Exact index remap; involutive and binarity preserving.
fn flip(data: &[f32], size: usize, axis: FlipAxis) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = match axis {
                FlipAxis::Horizontal => (size - 1 - x, y),
                FlipAxis::Vertical => (x, size - 1 - y),
            };
            out[y * size + x] = data[sy * size + sx];
        }
    }
    out
}

/// White noise smoothed at sigma 8 px and rescaled so the largest
/// displacement equals the requested amplitude.
fn elastic_fields(size: usize, el: Elastic) -> (Vec<f32>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(el.field_seed);
    let mut make = |rng: &mut ChaCha8Rng| {
        let raw: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
        let mut field = gaussian_blur(&raw, size, 8.0);
        let m = field.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if m > 0.0 {
            let s = (el.amplitude / m as f64) as f32;
            for v in &mut field {
                *v *= s;
            }
        }
        field
    };
    let dx = make(&mut rng);
    let dy = make(&mut rng);
    (dx, dy)
}
