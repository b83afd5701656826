//! Deterministic two-domain phantom generator.
//!
//! MRI-like slices: four distinct channels, each a smooth background plus
//! large diffuse Gaussian lesions with per-channel contrast. CT-like
//! slices: one textured, noisier channel with small compact nodules,
//! replicated to four channels. A lesion of radius `R` covers the mask
//! where its intensity profile is at least half its peak, which is the
//! disc of radius `R`.
//!
//! Every sample is a pure function of `(spec, domain, index)`.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::preprocess::normalize_slice;
use super::{Sample, CHANNELS};
use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub mri_lesions: (usize, usize),
    pub ct_lesions: (usize, usize),
    /// Half-max radius range in pixels.
    pub mri_radius: (f64, f64),
    pub ct_radius: (f64, f64),
    /// Shortest wavelength of the background texture, in pixels.
    pub texture_scale: f64,
    /// Lesion peak intensity above background.
    pub contrast: (f64, f64),
    pub mri_noise: f64,
    pub ct_noise: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Default ranges; on images smaller than 50 px the radius ranges are
    /// clipped to at most half the image side less one pixel.
    pub fn new(image_size: usize, seed: u64) -> Self {
        let cap = (image_size / 2) as f64 - 1.0;
        let clip = |(lo, hi): (f64, f64)| (f64::min(lo, cap), f64::min(hi, cap));
        Self {
            image_size,
            mri_lesions: (1, 2),
            ct_lesions: (1, 3),
            mri_radius: clip((8.0, 24.0)),
            ct_radius: clip((2.0, 6.0)),
            texture_scale: 24.0,
            contrast: (0.6, 1.0),
            mri_noise: 0.02,
            ct_noise: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid("image_size", "must be >= 8"));
        }
        // a disc of radius r plus a one pixel margin must fit in the slice
        let cap = self.image_size as f64 / 2.0 - 1.0;
        for (name, (lo, hi)) in [("mri_radius", self.mri_radius), ("ct_radius", self.ct_radius)] {
            if !(lo > 0.0 && lo <= hi && hi <= cap) {
                return Err(Error::invalid(
                    name,
                    format!("need 0 < {lo} <= {hi} <= image_size / 2 - 1 = {cap}"),
                ));
            }
        }
        for (name, (lo, hi)) in [("mri_lesions", self.mri_lesions), ("ct_lesions", self.ct_lesions)] {
            if lo > hi {
                return Err(Error::invalid(name, format!("min {lo} exceeds max {hi}")));
            }
        }
        let (c0, c1) = self.contrast;
        if !(c0 > 0.0 && c0 <= c1 && c1.is_finite()) {
            return Err(Error::invalid("contrast", format!("invalid range ({c0}, {c1})")));
        }
        let positive = self.texture_scale > 0.0 && self.mri_noise >= 0.0 && self.ct_noise >= 0.0;
        if !positive {
            return Err(Error::invalid("texture", "scale must be > 0 and noise >= 0"));
        }
        Ok(())
    }

    fn lesions(&self, domain: Domain) -> (usize, usize) {
        match domain {
            Domain::Mri => self.mri_lesions,
            Domain::Ct => self.ct_lesions,
        }
    }

    fn radius(&self, domain: Domain) -> (f64, f64) {
        match domain {
            Domain::Mri => self.mri_radius,
            Domain::Ct => self.ct_radius,
        }
    }
}

/// Generator for sample `index` of `domain`.
pub fn sample_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain.code() as u64) << 48) | index);
    rng
}

struct Lesion {
    cy: f64,
    cx: f64,
    radius: f64,
}

impl Lesion {
    /// Profile in `[0, 1]`, equal to 1/2 at distance `radius`. MRI lesions
    /// fall off as a Gaussian, CT nodules with a steeper fourth-power edge.
    fn profile(&self, y: f64, x: f64, order: i32) -> f64 {
        let d2 = ((y - self.cy).powi(2) + (x - self.cx).powi(2)) / (self.radius * self.radius);
        (-LN_2 * d2.powi(order / 2)).exp()
    }

    fn covers(&self, y: f64, x: f64) -> bool {
        (y - self.cy).powi(2) + (x - self.cx).powi(2) <= self.radius * self.radius
    }
}

/// Smooth random field from a handful of plane waves, roughly in `[-1, 1]`.
fn texture<R: Rng>(size: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    const WAVES: usize = 6;
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let wavelength = scale * rng.random_range(1.0..3.0);
            let theta = rng.random_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let norm = 1.0 / (WAVES as f64).sqrt();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v: f64 = waves
                .iter()
                .map(|(ky, kx, ph)| (ky * y as f64 + kx * x as f64 + ph).cos())
                .sum();
            out.push(v * norm);
        }
    }
    out
}

fn place_lesions<R: Rng>(spec: &PhantomSpec, domain: Domain, rng: &mut R) -> Vec<Lesion> {
    let (lo, hi) = spec.lesions(domain);
    let count = rng.random_range(lo..=hi);
    let (r0, r1) = spec.radius(domain);
    let size = spec.image_size as f64;
    (0..count)
        .map(|_| {
            let radius = if r1 > r0 { rng.random_range(r0..r1) } else { r0 };
            // keep the half-max disc inside the slice
            let margin = radius + 1.0;
            let span = margin..size - margin;
            let mut centre = || {
                if span.is_empty() {
                    margin
                } else {
                    rng.random_range(span.clone())
                }
            };
            let cy = centre();
            let cx = centre();
            Lesion { cy, cx, radius }
        })
        .collect()
}

fn mask_of(lesions: &[Lesion], size: usize) -> Vec<f64> {
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let hit = lesions.iter().any(|l| l.covers(y as f64, x as f64));
            mask.push(if hit { 1.0 } else { 0.0 });
        }
    }
    mask
}

fn channel<R: Rng>(
    spec: &PhantomSpec,
    lesions: &[Lesion],
    contrasts: &[f64],
    order: i32,
    noise: f64,
    background_weight: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let size = spec.image_size;
    let bg = texture(size, spec.texture_scale, rng);
    let level = rng.random_range(0.2..0.4);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
    let mut values = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let lesion: f64 = lesions
                .iter()
                .zip(contrasts)
                .map(|(l, c)| c * l.profile(y as f64, x as f64, order))
                .fold(0.0, f64::max);
            let v = level + background_weight * bg[y * size + x] + lesion + normal.sample(rng);
            values.push(v);
        }
    }
    // per-slice min-max to [0, 1], stored at f32 precision to match the file format
    Ok(normalize_slice(&values)?.into_iter().map(|v| v as f32 as f64).collect())
}

fn one_sample(spec: &PhantomSpec, domain: Domain, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(spec.seed, domain, index as u64);
    let size = spec.image_size;
    let lesions = place_lesions(spec, domain, &mut rng);
    let mask = mask_of(&lesions, size);
    let (c0, c1) = spec.contrast;
    let draw_contrast = |rng: &mut ChaCha8Rng| {
        lesions
            .iter()
            .map(|_| if c1 > c0 { rng.random_range(c0..c1) } else { c0 })
            .collect::<Vec<f64>>()
    };
    let image = match domain {
        Domain::Mri => {
            let mut data = Vec::with_capacity(CHANNELS * size * size);
            for _ in 0..CHANNELS {
                let contrasts = draw_contrast(&mut rng);
                data.extend(channel(spec, &lesions, &contrasts, 2, spec.mri_noise, 0.12, &mut rng)?);
            }
            data
        }
        Domain::Ct => {
            let contrasts = draw_contrast(&mut rng);
            let plane = channel(spec, &lesions, &contrasts, 4, spec.ct_noise, 0.15, &mut rng)?;
            plane.repeat(CHANNELS)
        }
    };
    let prefix = match domain {
        Domain::Mri => "mri",
        Domain::Ct => "ct",
    };
    Sample::new(
        format!("{prefix}_{index:05}"),
        domain,
        Tensor::new([CHANNELS, size, size], image)?,
        Tensor::new([1, size, size], mask)?,
    )
}

/// Generates samples `0..n` of `domain`.
pub fn generate_phantom(spec: &PhantomSpec, domain: Domain, n: usize) -> Result<Vec<Sample>> {
    generate_range(spec, domain, 0, n)
}

/// Generates samples `start..start + n` of `domain`.
pub fn generate_range(spec: &PhantomSpec, domain: Domain, start: usize, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("n", "must generate at least one sample"));
    }
    (start..start + n).map(|i| one_sample(spec, domain, i)).collect()
}
