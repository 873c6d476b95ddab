//! Synthetic few-shot segmentation data: a procedural blob generator with
//! controllable difficulty and domain shifts, deterministic train/test
//! splitting, on-disk corpora, and training-time augmentation.

pub mod augment;
pub mod pgm;

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::splitmix64;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentPlan, FlipAxis};

/// Square grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub size: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(size: usize) -> ImageBuf {
        ImageBuf { size, data: vec![0.0; size * size] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.size + x] = v;
    }

    /// Single-channel `[1, S, S]` tensor view for the model input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.size, self.size], self.data.clone())
            .expect("image buffer length matches its declared size")
    }
}

/// Square binary mask with values in `{0, 1}` stored as floats.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBuf {
    pub size: usize,
    pub data: Vec<f32>,
}

impl MaskBuf {
    pub fn new(size: usize) -> MaskBuf {
        MaskBuf { size, data: vec![0.0; size * size] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.size + x] = v;
    }

    /// Flat `[S*S]` target tensor for the loss.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.size * self.size], self.data.clone())
            .expect("mask buffer length matches its declared size")
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: ImageBuf,
    pub mask: MaskBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Ellipse,
    Particle,
}

impl ObjectKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectKind::Ellipse => "ellipse",
            ObjectKind::Particle => "particle",
        }
    }

    pub fn parse(s: &str) -> Result<ObjectKind> {
        match s {
            "ellipse" => Ok(ObjectKind::Ellipse),
            "particle" => Ok(ObjectKind::Particle),
            other => Err(Error::Config(format!(
                "unknown object kind '{other}' (expected ellipse or particle)"
            ))),
        }
    }
}

/// Domain shift applied to images only; ground truth is untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shift {
    None,
    Invert,
    Blur,
    Haze,
}

impl Shift {
    pub fn as_str(&self) -> &'static str {
        match self {
            Shift::None => "none",
            Shift::Invert => "invert",
            Shift::Blur => "blur",
            Shift::Haze => "haze",
        }
    }

    pub fn parse(s: &str) -> Result<Shift> {
        match s {
            "none" => Ok(Shift::None),
            "invert" => Ok(Shift::Invert),
            "blur" => Ok(Shift::Blur),
            "haze" => Ok(Shift::Haze),
            other => Err(Error::Config(format!(
                "unknown shift '{other}' (expected none, invert, blur, or haze)"
            ))),
        }
    }
}

/// Generator settings. Parsed from `key=value` lines and echoed back in a
/// fixed order so corpus directories record exactly what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub count: usize,
    pub size: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub kind: ObjectKind,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub texture_scale: usize,
    pub noise_sigma: f64,
    pub shift: Shift,
    pub blur_sigma: f64,
    pub haze_alpha: f64,
}

impl Default for GenSpec {
    fn default() -> GenSpec {
        GenSpec {
            count: 100,
            size: 64,
            objects_min: 1,
            objects_max: 3,
            kind: ObjectKind::Ellipse,
            radius_min: 6.0,
            radius_max: 14.0,
            contrast_min: 0.4,
            contrast_max: 0.9,
            texture_scale: 8,
            noise_sigma: 0.02,
            shift: Shift::None,
            blur_sigma: 2.0,
            haze_alpha: 0.5,
        }
    }
}

impl GenSpec {
    /// Applies one `key=value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("invalid value '{value}' for key '{key}'"))
            })
        }
        match key {
            "count" => self.count = num(key, value)?,
            "size" => self.size = num(key, value)?,
            "objects_min" => self.objects_min = num(key, value)?,
            "objects_max" => self.objects_max = num(key, value)?,
            "kind" => self.kind = ObjectKind::parse(value)?,
            "radius_min" => self.radius_min = num(key, value)?,
            "radius_max" => self.radius_max = num(key, value)?,
            "contrast_min" => self.contrast_min = num(key, value)?,
            "contrast_max" => self.contrast_max = num(key, value)?,
            "texture_scale" => self.texture_scale = num(key, value)?,
            "noise_sigma" => self.noise_sigma = num(key, value)?,
            "shift" => self.shift = Shift::parse(value)?,
            "blur_sigma" => self.blur_sigma = num(key, value)?,
            "haze_alpha" => self.haze_alpha = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown data key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parses a block of `key=value` lines. Blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<GenSpec> {
        let mut spec = GenSpec::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{line}'")))?;
            spec.set(key.trim(), value.trim())?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.count == 0 || self.size == 0 {
            return fail("count and size must be positive".into());
        }
        if self.objects_min > self.objects_max {
            return fail("objects_min must not exceed objects_max".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return fail("radii must satisfy 0 < radius_min <= radius_max".into());
        }
        if !(0.0..=1.0).contains(&self.contrast_min)
            || !(0.0..=1.0).contains(&self.contrast_max)
            || self.contrast_min > self.contrast_max
        {
            return fail("contrast range must satisfy 0 <= min <= max <= 1".into());
        }
        if self.texture_scale == 0 {
            return fail("texture_scale must be positive".into());
        }
        if self.noise_sigma < 0.0 || self.blur_sigma <= 0.0 {
            return fail("noise_sigma must be >= 0 and blur_sigma > 0".into());
        }
        if !(0.0..=1.0).contains(&self.haze_alpha) {
            return fail("haze_alpha must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Fixed-order settings block, parseable by [`GenSpec::parse`].
    pub fn echo(&self) -> String {
        format!(
            "count={}\nsize={}\nobjects_min={}\nobjects_max={}\nkind={}\n\
             radius_min={}\nradius_max={}\ncontrast_min={}\ncontrast_max={}\n\
             texture_scale={}\nnoise_sigma={}\nshift={}\nblur_sigma={}\nhaze_alpha={}\n",
            self.count,
            self.size,
            self.objects_min,
            self.objects_max,
            self.kind.as_str(),
            self.radius_min,
            self.radius_max,
            self.contrast_min,
            self.contrast_max,
            self.texture_scale,
            self.noise_sigma,
            self.shift.as_str(),
            self.blur_sigma,
            self.haze_alpha,
        )
    }
}

/// Deterministic sub-stream seed for (epoch, step, slot) coordinates, used
/// for batch sampling and per-sample augmentation draws.
pub fn sub_seed(seed: u64, epoch: u64, step: u64, slot: u64) -> u64 {
    let mut s = splitmix64(seed ^ 0x9e37_79b9_7f4a_7c15);
    s = splitmix64(s ^ epoch);
    s = splitmix64(s ^ step);
    splitmix64(s ^ slot)
}

/// Smoothstep polynomial on `[0, 1]`; 0.5 maps to 0.5 exactly.
fn smoothstep01(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coarse value-noise field: uniform lattice values with cell size `cell`,
/// bilinearly interpolated to pixel resolution. Output in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(1);
    let nodes = size.div_ceil(cell) + 1;
    let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let y0 = (fy.floor() as usize).min(nodes - 2);
        let ty = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let x0 = (fx.floor() as usize).min(nodes - 2);
            let tx = fx - x0 as f64;
            let v00 = lattice[y0 * nodes + x0];
            let v01 = lattice[y0 * nodes + x0 + 1];
            let v10 = lattice[(y0 + 1) * nodes + x0];
            let v11 = lattice[(y0 + 1) * nodes + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders.
pub(crate) fn gaussian_blur(data: &[f32], size: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    for w in &mut kernel {
        *w /= sum;
    }
    let n = size as isize;
    let reflect = |i: isize| -> usize {
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
    };
    let mut tmp = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = reflect(x + k as isize - radius);
                acc += *w * data[y * size + sx] as f64;
            }
            tmp[y * size + x as usize] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; size * size];
    for y in 0..size as isize {
        for x in 0..size {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = reflect(y + k as isize - radius);
                acc += *w * tmp[sy as usize * size + x] as f64;
            }
            out[y as usize * size + x] = acc as f32;
        }
    }
    out
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    value: f64,
    kind: ObjectKind,
}

impl Blob {
    /// Soft coverage in `[0, 1]`; exactly 0.5 on the nominal boundary.
    fn alpha(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.kind {
            ObjectKind::Ellipse => {
                let (s, c) = self.angle.sin_cos();
                let u = (dx * c + dy * s) / self.rx;
                let v = (-dx * s + dy * c) / self.ry;
                let rho = (u * u + v * v).sqrt();
                // Approximate signed pixel distance to the boundary, fed
                // through a 3 px soft edge centred on it.
                let d = (rho - 1.0) * 0.5 * (self.rx + self.ry);
                let soft = 1.5;
                1.0 - smoothstep01(d / (2.0 * soft) + 0.5)
            }
            ObjectKind::Particle => {
                let d2 = dx * dx + dy * dy;
                let r2 = self.rx * self.rx;
                (-std::f64::consts::LN_2 * d2 / r2).exp()
            }
        }
    }
}

/// Generates `spec.count` image/mask pairs. Each image is drawn from its own
/// sub-stream of `seed`, so pair `i` is independent of `count`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        out.push(generate_one(spec, seed, i));
    }
    Ok(out)
}

fn generate_one(spec: &GenSpec, seed: u64, index: usize) -> Sample {
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 0, 0, index as u64));

    // Background: low-amplitude texture kept strictly below mid-gray.
    let bg = value_noise(&mut rng, s, spec.texture_scale);
    let n_objects = rng.gen_range(spec.objects_min..=spec.objects_max);
    let mut blobs = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cx = rng.gen_range(0.15..0.85) * s as f64;
        let cy = rng.gen_range(0.15..0.85) * s as f64;
        let rx = rng.gen_range(spec.radius_min..=spec.radius_max);
        let ry = match spec.kind {
            ObjectKind::Ellipse => rng.gen_range(spec.radius_min..=spec.radius_max),
            ObjectKind::Particle => rx,
        };
        let angle = match spec.kind {
            ObjectKind::Ellipse => rng.gen_range(0.0..std::f64::consts::PI),
            ObjectKind::Particle => 0.0,
        };
        let contrast = rng.gen_range(spec.contrast_min..=spec.contrast_max);
        blobs.push(Blob { cx, cy, rx, ry, angle, value: 0.5 + 0.5 * contrast, kind: spec.kind });
    }

    let mut image = ImageBuf::new(s);
    let mut mask = MaskBuf::new(s);
    for y in 0..s {
        for x in 0..s {
            let px = x as f64;
            let py = y as f64;
            let mut alpha_max = 0.0f64;
            let mut lit = 0.0f64;
            for b in &blobs {
                let a = b.alpha(px, py);
                alpha_max = alpha_max.max(a);
                lit = lit.max(a * b.value);
            }
            let base = 0.05 + 0.35 * bg[y * s + x];
            image.set(x, y, base.max(lit) as f32);
            if alpha_max >= 0.5 {
                mask.set(x, y, 1.0);
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let dist = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in &mut image.data {
            *v = (*v + dist.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }

    apply_shift(spec, &mut rng, &mut image);
    Sample { id: format!("{index:04}"), image, mask }
}

fn apply_shift(spec: &GenSpec, rng: &mut ChaCha8Rng, image: &mut ImageBuf) {
    let s = spec.size;
    match spec.shift {
        Shift::None => {}
        Shift::Invert => {
            for v in &mut image.data {
                *v = 1.0 - *v;
            }
        }
        Shift::Blur => {
            image.data = gaussian_blur(&image.data, s, spec.blur_sigma);
        }
        Shift::Haze => {
            // Uneven tinted fog: coarse fields drive both opacity and tint,
            // so patches of background brighten past dimmed objects. A
            // constant veil would be value-monotone and thresholdable; this
            // one is not.
            let opacity = value_noise(rng, s, (s / 4).max(2));
            let tint = value_noise(rng, s, (s / 4).max(2));
            for ((v, o), t) in image.data.iter_mut().zip(&opacity).zip(&tint) {
                let h = (spec.haze_alpha * (0.3 + 1.4 * o)).min(0.95) as f32;
                let c = (0.05 + 0.9 * t) as f32;
                *v = (*v * (1.0 - h) + c * h).clamp(0.0, 1.0);
            }
        }
    }
}

/// Train/test partition of a corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Holds out the last 20% of a corpus-seeded permutation as the test set,
/// then picks `train_n` items from the remainder under the run seed. The
/// test membership depends only on `corpus_seed` and the corpus length, so
/// every run and every train_n is scored on identical held-out images.
pub fn split(
    samples: &[Sample],
    corpus_seed: u64,
    train_n: usize,
    run_seed: u64,
) -> Result<DatasetSplit> {
    let n = samples.len();
    let test_n = n / 5;
    if test_n == 0 {
        return Err(Error::Data(format!(
            "corpus of {n} images is too small to hold out a test set"
        )));
    }
    if train_n == 0 || train_n > n - test_n {
        return Err(Error::Data(format!(
            "train_n={train_n} out of range (1..={} after holdout)",
            n - test_n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, splitmix64(corpus_seed ^ 0x7e57_5e7_u64));
    let mut test_idx: Vec<usize> = order[n - test_n..].to_vec();
    test_idx.sort_unstable();
    let mut pool: Vec<usize> = order[..n - test_n].to_vec();
    shuffle(&mut pool, splitmix64(run_seed ^ 0x7ea1_u64));
    let train_idx = &pool[..train_n];
    Ok(DatasetSplit {
        train: train_idx.iter().map(|&i| samples[i].clone()).collect(),
        test: test_idx.iter().map(|&i| samples[i].clone()).collect(),
    })
}

/// Fisher-Yates with an explicit seed.
fn shuffle(xs: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..xs.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}

/// Writes a corpus directory: `images/<id>.pgm`, `masks/<id>.pgm`, a
/// `manifest.txt` listing ids, and `genspec.txt` echoing the settings plus
/// the generator seed.
pub fn write_corpus(dir: &Path, samples: &[Sample], spec: &GenSpec, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        pgm::write_image_pgm(&dir.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
        pgm::write_mask_pgm(&dir.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    std::fs::write(dir.join("genspec.txt"), format!("{}seed={seed}\n", spec.echo()))?;
    Ok(())
}

/// A corpus loaded back from disk, with enough metadata to reproduce the
/// split (the generator seed doubles as the corpus seed).
#[derive(Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub spec: GenSpec,
    pub seed: u64,
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let genspec_path = dir.join("genspec.txt");
    let text = std::fs::read_to_string(&genspec_path)?;
    let mut seed = None;
    let mut spec_lines = String::new();
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("seed=") {
            seed = Some(v.parse::<u64>().map_err(|_| {
                Error::Config(format!("invalid seed '{v}' in {}", genspec_path.display()))
            })?);
        } else {
            spec_lines.push_str(line);
            spec_lines.push('\n');
        }
    }
    let seed = seed.ok_or_else(|| {
        Error::Config(format!("missing seed= line in {}", genspec_path.display()))
    })?;
    let spec = GenSpec::parse(&spec_lines)?;

    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let ids: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if ids.is_empty() {
        return Err(Error::Data(format!("empty manifest in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = pgm::read_image_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
        let mask = pgm::read_mask_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
        if image.size != mask.size {
            return Err(Error::Data(format!(
                "image/mask size mismatch for id {id}: {} vs {}",
                image.size, mask.size
            )));
        }
        samples.push(Sample { id: id.to_string(), image, mask });
    }
    Ok(Corpus { samples, spec, seed })
}

/// Convenience check used by tests: ids of the held-out set.
pub fn test_ids(split: &DatasetSplit) -> Vec<String> {
    split.test.iter().map(|s| s.id.clone()).collect()
}

#[allow(dead_code)]
fn ids_disjoint(split: &DatasetSplit) -> bool {
    let train: HashSet<&str> = split.train.iter().map(|s| s.id.as_str()).collect();
    split.test.iter().all(|s| !train.contains(s.id.as_str()))
}
