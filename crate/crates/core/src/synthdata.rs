//! Procedural retina-like patients and paired-camera datasets.
//!
//! A patient is described by a handful of latent parameters. Both eyes are
//! rendered from the same latents with mirrored geometry and a small
//! independent per-eye perturbation, and every label is a deterministic
//! function of the latents so that the image-to-label mapping is learnable.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MIN_IMAGE_SIZE: usize = 32;

const SPLIT_SALT: u64 = 0x5EED_5911_7A11_0001;

/// `H x W x 3` image with values in `[0, 1]`, `H == W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array3<f32>);

impl ImageTensor {
    pub fn new(pixels: Array3<f32>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h != w || c != 3 || h == 0 {
            return Err(Error::Argument(format!("image must be square RGB, got {h}x{w}x{c}")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self(pixels.as_standard_layout().into_owned()))
    }

    pub fn zeros(size: usize) -> Self {
        Self(Array3::zeros((size, size, 3)))
    }

    pub fn size(&self) -> usize {
        self.0.dim().0
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.0
    }

    /// 8-bit RGB bytes in row-major order.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.0.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(size: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != size * size * 3 {
            return Err(Error::Data(format!(
                "expected {} bytes for a {size}x{size} RGB image, got {}",
                size * size * 3,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self(Array3::from_shape_vec((size, size, 3), data).expect("shape checked")))
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self(self.0.mapv(|v| quantize(v) as f32 / 255.0))
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub const BOTH: [Laterality; 2] = [Laterality::Left, Laterality::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Laterality::Left),
            "right" => Ok(Laterality::Right),
            other => Err(Error::Data(format!("unknown laterality '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

pub const REGRESSION_TASKS: [&str; 5] = ["who_cvd_log", "age", "sbp", "tc", "bmi"];
pub const CLASSIFICATION_TASKS: [&str; 3] = ["gender", "smoking", "diabetes"];

/// Five regression targets followed by three binary targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub who_cvd_log: f32,
    pub age: f32,
    pub sbp: f32,
    pub tc: f32,
    pub bmi: f32,
    pub gender: bool,
    pub smoking: bool,
    pub diabetes: bool,
}

impl LabelSet {
    pub fn regression(&self) -> [f32; 5] {
        [self.who_cvd_log, self.age, self.sbp, self.tc, self.bmi]
    }

    pub fn classes(&self) -> [bool; 3] {
        [self.gender, self.smoking, self.diabetes]
    }

    pub fn from_parts(regression: [f32; 5], classes: [bool; 3]) -> Result<Self> {
        if regression.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite regression label".into()));
        }
        Ok(Self {
            who_cvd_log: regression[0],
            age: regression[1],
            sbp: regression[2],
            tc: regression[3],
            bmi: regression[4],
            gender: classes[0],
            smoking: classes[1],
            diabetes: classes[2],
        })
    }
}

/// Generative parameters of one patient. All values lie in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub tortuosity: f32,
    pub pallor: f32,
    pub caliber: f32,
    pub age: f32,
    pub sbp: f32,
    pub tc: f32,
    pub bmi: f32,
    pub gender: f32,
    pub smoking: f32,
    pub diabetes: f32,
    pub pigment: f32,
}

const Z_SCALE: f32 = 3.464_101_6; // sqrt(12): unit variance for U(0, 1)

impl Latents {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut u = || rng.gen::<f32>();
        Self {
            tortuosity: u(),
            pallor: u(),
            caliber: u(),
            age: u(),
            sbp: u(),
            tc: u(),
            bmi: u(),
            gender: u(),
            smoking: u(),
            diabetes: u(),
            pigment: u(),
        }
    }

    /// Affine in tortuosity, pallor and caliber plus a small interaction
    /// term, on a log risk scale.
    pub fn who_cvd_log(&self) -> f32 {
        let t = self.tortuosity;
        let p = self.pallor;
        let c = self.caliber;
        -3.0 + 1.5 * (t + 0.3 * p + 0.2 * c + 0.1 * t * p)
    }

    pub fn labels(&self) -> LabelSet {
        let z = |u: f32| Z_SCALE * (u - 0.5);
        LabelSet {
            who_cvd_log: self.who_cvd_log(),
            age: z(self.age),
            sbp: z(self.sbp),
            tc: z(self.tc),
            bmi: z(self.bmi),
            gender: self.gender > 0.5,
            smoking: self.smoking > 0.5,
            diabetes: self.diabetes > 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub left: ImageTensor,
    pub right: ImageTensor,
    pub labels: LabelSet,
    /// Known for generated patients, absent for ones loaded from disk.
    pub latents: Option<Latents>,
}

impl PatientRecord {
    pub fn image(&self, side: Laterality) -> &ImageTensor {
        match side {
            Laterality::Left => &self.left,
            Laterality::Right => &self.right,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Fraction of patients assigned to the training split.
    pub train_fraction: f64,
    /// Scale of the independent per-eye geometric perturbation.
    pub eye_perturbation: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_fraction: 0.8,
            eye_perturbation: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image_size must be at least {MIN_IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train_fraction {} outside [0, 1]", self.train_fraction)));
        }
        if !self.eye_perturbation.is_finite() || self.eye_perturbation < 0.0 {
            return Err(Error::Config("eye_perturbation must be a finite non-negative value".into()));
        }
        Ok(())
    }
}

struct Segment {
    a: (f32, f32),
    b: (f32, f32),
    half_width: f32,
}

struct EyeGeometry {
    center: (f32, f32),
    radius: f32,
    disc: (f32, f32),
    disc_radius: f32,
    vessels: Vec<Segment>,
    dots: Vec<(f32, f32, f32)>,
}

const VESSEL_SEGMENTS: usize = 40;

fn vessel_path<R: Rng>(
    segments: &mut Vec<Segment>,
    start: (f32, f32),
    angle: f32,
    length: f32,
    width: f32,
    amplitude: f32,
    frequency: f32,
    phase: f32,
    rng: &mut R,
    branch: bool,
    perturb: f32,
) {
    let dir = (angle.cos(), angle.sin());
    let normal = (-dir.1, dir.0);
    let point = |t: f32| {
        let wiggle = amplitude * t.sqrt() * (std::f32::consts::TAU * frequency * t + phase).sin();
        (
            start.0 + length * t * dir.0 + wiggle * normal.0,
            start.1 + length * t * dir.1 + wiggle * normal.1,
        )
    };
    let mut prev = point(0.0);
    for i in 1..=VESSEL_SEGMENTS {
        let t = i as f32 / VESSEL_SEGMENTS as f32;
        let next = point(t);
        let taper = 1.0 - 0.5 * t;
        segments.push(Segment {
            a: prev,
            b: next,
            half_width: 0.5 * width * taper,
        });
        prev = next;
    }
    if branch {
        let t_branch = 0.4 + 0.15 * rng.gen::<f32>();
        let origin = point(t_branch);
        let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let child_angle = angle + side * (0.5 + 0.1 * perturb * (rng.gen::<f32>() - 0.5));
        vessel_path(
            segments,
            origin,
            child_angle,
            0.6 * length,
            0.7 * width * (1.0 - 0.5 * t_branch),
            0.8 * amplitude,
            frequency,
            phase + 1.3,
            rng,
            false,
            perturb,
        );
    }
}

/// `side` is +1 for the right eye and -1 for the left; the left eye is the
/// mirror image of the right before the per-eye perturbation.
fn eye_geometry(latents: &Latents, size: f32, side: f32, perturb: f32, rng: &mut ChaCha8Rng) -> EyeGeometry {
    let jitter = |rng: &mut ChaCha8Rng, scale: f32| perturb * scale * (rng.gen::<f32>() - 0.5);
    let center = (0.5 * size + jitter(rng, 0.03 * size), 0.5 * size + jitter(rng, 0.03 * size));
    let radius = 0.46 * size;
    let disc = (
        center.0 + side * 0.22 * size,
        center.1 + jitter(rng, 0.04 * size),
    );
    let disc_radius = size * (0.065 + 0.025 * latents.gender);

    let width = size * (0.022 + 0.018 * latents.caliber);
    let amplitude = size * (0.006 + 0.075 * latents.tortuosity);
    let frequency = 2.5 + 2.5 * latents.tortuosity;
    // main arcades point towards the macula (the -side direction) and the nasal side
    let bases = [0.85f32, -0.85, 2.3, -2.3];
    let mut vessels = Vec::new();
    for (i, base) in bases.iter().enumerate() {
        let toward_macula = std::f32::consts::PI - base;
        let angle = if side > 0.0 { toward_macula } else { *base };
        let angle = angle + jitter(rng, 0.1);
        let length = size * if i < 2 { 0.55 } else { 0.32 };
        let phase = std::f32::consts::TAU * rng.gen::<f32>() * perturb.min(1.0) + i as f32;
        vessel_path(
            &mut vessels,
            disc,
            angle,
            length,
            width * if i < 2 { 1.0 } else { 0.8 },
            amplitude,
            frequency,
            phase,
            rng,
            true,
            perturb,
        );
    }

    let n_dots = if latents.diabetes > 0.5 {
        2 + (12.0 * (latents.diabetes - 0.5)) as usize
    } else {
        0
    };
    let dots = (0..n_dots)
        .map(|_| {
            let r = radius * 0.75 * rng.gen::<f32>().sqrt();
            let a = std::f32::consts::TAU * rng.gen::<f32>();
            (center.0 + r * a.cos(), center.1 + r * a.sin(), size * 0.012)
        })
        .collect();

    EyeGeometry {
        center,
        radius,
        disc,
        disc_radius,
        vessels,
        dots,
    }
}

fn segment_distance(p: (f32, f32), s: &Segment) -> f32 {
    let (vx, vy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let (wx, wy) = (p.0 - s.a.0, p.1 - s.a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn render_eye(latents: &Latents, size: usize, geometry: &EyeGeometry) -> ImageTensor {
    let shade = 1.0 - 0.25 * latents.age;
    let base = [
        (0.72 + 0.12 * latents.pigment) * shade,
        (0.30 + 0.08 * latents.pigment + 0.06 * latents.age) * shade,
        (0.12 + 0.05 * latents.pigment - 0.05 * latents.age).max(0.0) * shade,
    ];
    let disc_color = mix([0.98, 0.78, 0.45], [1.0, 0.97, 0.9], latents.pallor);
    let vessel_color = {
        let dark = 1.0 - 0.3 * latents.smoking;
        [0.42 * dark, 0.07 * dark, 0.05 * dark]
    };
    let dot_color = [0.35, 0.04, 0.03];

    let mut pixels = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let dc = ((p.0 - geometry.center.0).powi(2) + (p.1 - geometry.center.1).powi(2)).sqrt();
            let inside = (geometry.radius - dc + 0.5).clamp(0.0, 1.0);
            if inside <= 0.0 {
                continue;
            }
            let falloff = 1.0 - 0.35 * (dc / geometry.radius).powi(2);
            let mut color = base.map(|c| c * falloff);

            let dd = ((p.0 - geometry.disc.0).powi(2) + (p.1 - geometry.disc.1).powi(2)).sqrt();
            let disc_alpha = (1.0 - dd / geometry.disc_radius).clamp(0.0, 1.0).powf(0.5);
            color = mix(color, disc_color, disc_alpha);

            let mut vessel_alpha: f32 = 0.0;
            for seg in &geometry.vessels {
                let reach = seg.half_width + 1.0;
                if p.0 < seg.a.0.min(seg.b.0) - reach
                    || p.0 > seg.a.0.max(seg.b.0) + reach
                    || p.1 < seg.a.1.min(seg.b.1) - reach
                    || p.1 > seg.a.1.max(seg.b.1) + reach
                {
                    continue;
                }
                let d = segment_distance(p, seg);
                vessel_alpha = vessel_alpha.max((seg.half_width - d + 0.5).clamp(0.0, 1.0));
            }
            color = mix(color, vessel_color, 0.9 * vessel_alpha);

            for &(dx, dy, r) in &geometry.dots {
                let d = ((p.0 - dx).powi(2) + (p.1 - dy).powi(2)).sqrt();
                let a = (r - d + 0.5).clamp(0.0, 1.0);
                color = mix(color, dot_color, a);
            }

            for c in 0..3 {
                pixels[[y, x, c]] = (color[c] * inside).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor(pixels)
}

/// Renders one patient. Deterministic in `(seed, config)`.
pub fn generate_patient(seed: u64, config: &GeneratorConfig) -> Result<PatientRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = Latents::sample(&mut rng);
    let size = config.image_size;
    let eye = |side: f32, stream: u64| {
        let mut eye_rng = ChaCha8Rng::seed_from_u64(seed);
        eye_rng.set_stream(stream);
        let geometry = eye_geometry(&latents, size as f32, side, config.eye_perturbation, &mut eye_rng);
        render_eye(&latents, size, &geometry)
    };
    let left = eye(-1.0, 1);
    let right = eye(1.0, 2);
    Ok(PatientRecord {
        patient_id: seed,
        left,
        right,
        labels: latents.labels(),
        latents: Some(latents),
    })
}

/// Optical and sensor model of one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraProfile {
    pub color_matrix: [[f32; 3]; 3],
    pub blur_sigma: f32,
    pub vignette_strength: f32,
    pub gamma: f32,
    pub noise_sigma: f32,
    pub seed_offset: u64,
}

impl CameraProfile {
    pub fn identity() -> Self {
        Self {
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            blur_sigma: 0.0,
            vignette_strength: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            seed_offset: 0,
        }
    }

    /// A clean tabletop camera: near-neutral color, no blur.
    pub fn tabletop() -> Self {
        Self {
            color_matrix: [[1.0, 0.02, 0.0], [0.0, 0.98, 0.02], [0.0, 0.0, 1.0]],
            blur_sigma: 0.0,
            vignette_strength: 0.05,
            gamma: 1.0,
            noise_sigma: 0.005,
            seed_offset: 101,
        }
    }

    /// A portable camera: cooler color response, soft optics, strong
    /// vignetting, a different tone curve and more sensor noise.
    pub fn portable() -> Self {
        Self {
            color_matrix: [[0.78, 0.12, 0.0], [0.08, 0.86, 0.08], [0.02, 0.22, 0.95]],
            blur_sigma: 0.9,
            vignette_strength: 0.45,
            gamma: 1.4,
            noise_sigma: 0.025,
            seed_offset: 202,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.color_matrix;
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("color_matrix must be finite".into()));
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.abs() < 1e-6 {
            return Err(Error::Config("color_matrix is singular".into()));
        }
        if !(self.blur_sigma.is_finite() && self.blur_sigma >= 0.0) {
            return Err(Error::Config(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::Config(format!(
                "vignette_strength must lie in [0, 1], got {}",
                self.vignette_strength
            )));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps `w[-r..=r]` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma as f64 * sigma as f64)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|w| (w / sum) as f32).collect()
}

fn blur_axis(src: &Array3<f32>, kernel: &[f32], horizontal: bool) -> Array3<f32> {
    let (h, w, _) = src.dim();
    let r = (kernel.len() / 2) as i64;
    let mut out = Array3::zeros(src.dim());
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for (k, &wk) in kernel.iter().enumerate() {
                    let off = k as i64 - r;
                    let (sy, sx) = if horizontal {
                        (y as i64, (x as i64 + off).clamp(0, w as i64 - 1))
                    } else {
                        ((y as i64 + off).clamp(0, h as i64 - 1), x as i64)
                    };
                    acc += wk as f64 * src[[sy as usize, sx as usize, c]] as f64;
                }
                out[[y, x, c]] = acc as f32;
            }
        }
    }
    out
}

/// `clip(gamma(vignette(blur(M x))) + noise)`; deterministic in `(img, profile, seed)`.
///
/// Blur uses a separable truncated Gaussian with edge clamping; vignetting
/// scales each pixel by `1 - v (r / r_corner)^2`.
pub fn apply_camera_profile(img: &ImageTensor, profile: &CameraProfile, seed: u64) -> Result<ImageTensor> {
    profile.validate()?;
    let src = img.pixels();
    let (h, w, _) = src.dim();
    let m = &profile.color_matrix;
    let mut px = Array3::<f32>::zeros(src.dim());
    for y in 0..h {
        for x in 0..w {
            let v = [src[[y, x, 0]], src[[y, x, 1]], src[[y, x, 2]]];
            for c in 0..3 {
                px[[y, x, c]] = m[c][0] * v[0] + m[c][1] * v[1] + m[c][2] * v[2];
            }
        }
    }

    if profile.blur_sigma > 0.0 {
        let kernel = gaussian_kernel(profile.blur_sigma);
        px = blur_axis(&blur_axis(&px, &kernel, true), &kernel, false);
    }

    if profile.vignette_strength > 0.0 {
        let (cx, cy) = (0.5 * w as f32, 0.5 * h as f32);
        let corner2 = cx * cx + cy * cy;
        for ((y, x, _), v) in px.indexed_iter_mut() {
            let r2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            *v *= 1.0 - profile.vignette_strength * r2 / corner2;
        }
    }

    if profile.gamma != 1.0 {
        px.mapv_inplace(|v| v.max(0.0).powf(profile.gamma));
    }

    if profile.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, profile.seed_offset]));
        let dist = Normal::new(0.0f32, profile.noise_sigma).expect("validated sigma");
        px.mapv_inplace(|v| v + dist.sample(&mut rng));
    }

    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(px)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub patient_id: u64,
    pub laterality: Laterality,
    pub source_image: ImageTensor,
    pub target_image: ImageTensor,
}

/// Source-camera patients plus their same-eye source/target pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<PatientRecord>,
    pub pairs: Vec<PairedSample>,
    /// One entry per record, in the same order.
    pub splits: Vec<Split>,
}

impl PairedDataset {
    pub fn split_of(&self, patient_id: u64) -> Option<Split> {
        self.records
            .iter()
            .position(|r| r.patient_id == patient_id)
            .map(|i| self.splits[i])
    }

    pub fn records_in(&self, split: Split) -> Vec<&PatientRecord> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r)
            .collect()
    }

    pub fn pairs_in(&self, split: Split) -> Vec<&PairedSample> {
        let splits: std::collections::HashMap<u64, Split> =
            self.records.iter().map(|r| r.patient_id).zip(self.splits.iter().copied()).collect();
        self.pairs.iter().filter(|p| splits.get(&p.patient_id) == Some(&split)).collect()
    }
}

/// Seed passed to [`apply_camera_profile`] for one eye. It is shared by
/// both cameras; the profiles' `seed_offset` keeps their noise apart.
pub fn image_seed(seed: u64, patient_id: u64, side: Laterality) -> u64 {
    derive_seed(&[seed, patient_id, side as u64])
}

/// Renders `n` patients (ids `0..n`, per-patient seed `seed + id`) under
/// both cameras, quantized to 8-bit levels, and assigns a patient-level
/// train/validation split.
pub fn make_paired_dataset(
    n: usize,
    profile_s: &CameraProfile,
    profile_t: &CameraProfile,
    seed: u64,
    config: &GeneratorConfig,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::Argument("dataset needs at least one patient".into()));
    }
    config.validate()?;
    profile_s.validate()?;
    profile_t.validate()?;

    let mut records = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(2 * n);
    for id in 0..n as u64 {
        let raw = generate_patient(seed.wrapping_add(id), config)?;
        let mut source = [raw.left.clone(), raw.right.clone()];
        for side in Laterality::BOTH {
            let idx = side as usize;
            let rendered = raw.image(side);
            let s = apply_camera_profile(rendered, profile_s, image_seed(seed, id, side))?.quantized();
            let t = apply_camera_profile(rendered, profile_t, image_seed(seed, id, side))?.quantized();
            source[idx] = s.clone();
            pairs.push(PairedSample {
                patient_id: id,
                laterality: side,
                source_image: s,
                target_image: t,
            });
        }
        let [left, right] = source;
        records.push(PatientRecord {
            patient_id: id,
            left,
            right,
            labels: raw.labels,
            latents: raw.latents,
        });
    }

    let n_train = ((n as f64) * config.train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let mut splits = vec![Split::Validation; n];
    for &i in order.iter().take(n_train) {
        splits[i] = Split::Train;
    }
    Ok(PairedDataset { records, pairs, splits })
}
