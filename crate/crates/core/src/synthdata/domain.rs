use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Images must have sides divisible by this.
pub const SIZE_MULTIPLE: usize = 8;
pub const MIN_FG_FRACTION: f64 = 0.03;
pub const MAX_FG_FRACTION: f64 = 0.6;

/// Noise draws start this far into a sample's RNG stream, past anything
/// the scene geometry can consume.
const NOISE_WORD_POS: u128 = 1 << 48;
const MAX_SCENE_ATTEMPTS: usize = 1000;

/// Scene intensities: objects are darker than a textured background whose
/// level varies per image.
const BACKGROUND_LEVEL: std::ops::Range<f64> = 0.25..0.45;
const OBJECT_DEPTH: std::ops::Range<f64> = 0.12..0.22;
const TEXTURE_AMPLITUDE: f64 = 0.05;

/// Intensity transform describing one acquisition domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default)]
    pub intensity_bias: f32,
    #[serde(default = "one")]
    pub contrast: f32,
    #[serde(default = "one")]
    pub gamma: f32,
    #[serde(default)]
    pub noise_sigma: f32,
    #[serde(default)]
    pub blur_radius: usize,
    #[serde(default = "default_freq")]
    pub texture_freq: f32,
}

fn one() -> f32 {
    1.0
}

fn default_freq() -> f32 {
    3.0
}

impl DomainSpec {
    /// No shift at all.
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.into(),
            intensity_bias: 0.0,
            contrast: 1.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            texture_freq: default_freq(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("domain {:?}: {what}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name");
        }
        if !(-0.3..=0.3).contains(&self.intensity_bias) {
            return bad("intensity_bias outside [-0.3, 0.3]");
        }
        if !(0.5..=2.0).contains(&self.contrast) {
            return bad("contrast outside [0.5, 2]");
        }
        if !(0.5..=2.0).contains(&self.gamma) {
            return bad("gamma outside [0.5, 2]");
        }
        if !(0.0..=0.15).contains(&self.noise_sigma) {
            return bad("noise_sigma outside [0, 0.15]");
        }
        if self.blur_radius > 2 {
            return bad("blur_radius must be 0, 1 or 2");
        }
        if !(self.texture_freq >= 0.0 && self.texture_freq.is_finite()) {
            return bad("texture_freq must be finite and nonnegative");
        }
        Ok(())
    }
}

/// One image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<bool>,
    pub domain: String,
    pub index: usize,
}

impl Sample {
    /// `[1, 1, H, W]` network input.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.image.clone())
            .expect("sample dimensions are consistent")
    }

    pub fn fg_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    level: f64,
}

impl Ellipse {
    /// Squared normalized radius of a pixel centre.
    fn r2(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Clean scene and mask for one geometry draw.
fn draw_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, freq: f64) -> (Vec<f64>, Vec<bool>) {
    let size = h.min(w) as f64;
    let count = rng.random_range(1..=3);
    let base: f64 = rng.random_range(BACKGROUND_LEVEL);
    let shapes: Vec<Ellipse> = (0..count)
        .map(|_| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.15..0.85) * h as f64,
                cx: rng.random_range(0.15..0.85) * w as f64,
                a: rng.random_range(0.08..0.25) * size,
                b: rng.random_range(0.08..0.25) * size,
                cos: theta.cos(),
                sin: theta.sin(),
                level: base - rng.random_range(OBJECT_DEPTH),
            }
        })
        .collect();
    let amp = TEXTURE_AMPLITUDE;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let k = std::f64::consts::TAU * freq / w as f64;

    let mut img = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = base + amp * (k * (px * angle.cos() + py * angle.sin()) + phase).sin();
            let mut inside = false;
            for e in &shapes {
                let r2 = e.r2(py, px);
                if r2 <= 1.0 {
                    inside = true;
                    // Darkest at the centre.
                    v = v.min(e.level * (1.0 + 0.15 * r2));
                }
            }
            img.push(v.clamp(0.0, 1.0));
            mask.push(inside);
        }
    }
    (img, mask)
}

fn box_blur(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let r = r as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / (2 * r + 1) as f64;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Domain transform in its fixed order: contrast, bias, gamma, blur,
/// noise, clamp.
fn apply_domain(clean: &[f64], h: usize, w: usize, spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f64> = clean.to_vec();
    if spec.contrast != 1.0 {
        v.iter_mut().for_each(|p| *p *= spec.contrast as f64);
    }
    if spec.intensity_bias != 0.0 {
        v.iter_mut().for_each(|p| *p += spec.intensity_bias as f64);
    }
    if spec.gamma != 1.0 {
        v.iter_mut().for_each(|p| *p = p.max(0.0).powf(spec.gamma as f64));
    }
    if spec.blur_radius > 0 {
        v = box_blur(&v, h, w, spec.blur_radius);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma as f64).expect("sigma is validated");
        rng.set_word_pos(NOISE_WORD_POS);
        v.iter_mut().for_each(|p| *p += normal.sample(rng));
    }
    v.into_iter().map(|p| p.clamp(0.0, 1.0) as f32).collect()
}

fn check_request(n: usize, (h, w): (usize, usize)) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Sample `index` of the dataset generated with `seed`. The geometry, and
/// so the mask, depends only on `(seed, index)`.
pub fn generate_one(spec: &DomainSpec, index: usize, hw: (usize, usize), seed: u64) -> Result<Sample> {
    spec.validate()?;
    check_request(1, hw)?;
    let (h, w) = hw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let (clean, mask) = draw_scene(&mut rng, h, w, spec.texture_freq as f64);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if !(MIN_FG_FRACTION..=MAX_FG_FRACTION).contains(&frac) {
            continue;
        }
        let image = apply_domain(&clean, h, w, spec, &mut rng);
        return Ok(Sample {
            height: h,
            width: w,
            image,
            mask,
            domain: spec.name.clone(),
            index,
        });
    }
    Err(Error::Contract(format!(
        "no admissible scene for index {index} after {MAX_SCENE_ATTEMPTS} draws"
    )))
}

/// Samples `start .. start + n`.
pub fn generate_range(
    spec: &DomainSpec,
    start: usize,
    n: usize,
    hw: (usize, usize),
    seed: u64,
) -> Result<Vec<Sample>> {
    check_request(n, hw)?;
    (start..start + n).map(|i| generate_one(spec, i, hw, seed)).collect()
}

/// Samples `0 .. n`.
pub fn generate(spec: &DomainSpec, n: usize, hw: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    generate_range(spec, 0, n, hw, seed)
}
