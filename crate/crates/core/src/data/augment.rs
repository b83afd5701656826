//! On-the-fly training augmentation.
//!
//! Geometric transforms (flips, rotation, elastic warp) move image and mask
//! together: bilinear sampling for the image, nearest for the mask.
//! Photometric transforms (brightness/contrast, coarse dropout) touch the
//! image only and clamp it to `[0, 1]`.

use rand::Rng;

use super::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate_p: f64,
    pub max_rotation_deg: f64,
    pub elastic_p: f64,
    /// Peak displacement in pixels.
    pub elastic_alpha: f64,
    /// Control points per side of the displacement grid.
    pub elastic_grid: usize,
    /// Smoothing of the control-point displacements, in grid cells.
    pub elastic_sigma: f64,
    pub brightness_contrast_p: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    pub coarse_dropout_p: f64,
    pub max_holes: usize,
    /// Largest hole side as a fraction of the image side.
    pub max_hole_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate_p: 0.5,
            max_rotation_deg: 15.0,
            elastic_p: 0.3,
            elastic_alpha: 3.0,
            elastic_grid: 8,
            elastic_sigma: 1.0,
            brightness_contrast_p: 0.5,
            brightness_limit: 0.2,
            contrast_limit: 0.2,
            coarse_dropout_p: 0.3,
            max_holes: 8,
            max_hole_frac: 0.125,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            hflip_p: 0.0,
            vflip_p: 0.0,
            rotate_p: 0.0,
            elastic_p: 0.0,
            brightness_contrast_p: 0.0,
            coarse_dropout_p: 0.0,
            ..Self::default()
        }
    }
}

fn fires<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Applies each transform independently with its configured probability.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, config: &AugmentConfig) -> Sample {
    let mut out = sample.clone();
    if fires(config.hflip_p, rng) {
        out = hflip(&out);
    }
    if fires(config.vflip_p, rng) {
        out = vflip(&out);
    }
    if fires(config.rotate_p, rng) {
        let deg = rng.random_range(-config.max_rotation_deg..=config.max_rotation_deg);
        out = rotate(&out, deg);
    }
    if fires(config.elastic_p, rng) {
        out = elastic(&out, config, rng);
    }
    if fires(config.brightness_contrast_p, rng) {
        let gain = 1.0 + rng.random_range(-config.contrast_limit..=config.contrast_limit);
        let shift = rng.random_range(-config.brightness_limit..=config.brightness_limit);
        out.image = out.image.map(|v| (v * gain + shift).clamp(0.0, 1.0));
    }
    if fires(config.coarse_dropout_p, rng) {
        coarse_dropout(&mut out.image, config, rng);
    }
    out
}

fn flip(sample: &Sample, horizontal: bool) -> Sample {
    let flip_planes = |t: &Tensor| {
        let [c, h, w] = t.shape() else {
            unreachable!("samples are [C, H, W]")
        };
        let (c, h, w) = (*c, *h, *w);
        let src = t.data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                    out.push(src[(ch * h + sy) * w + sx]);
                }
            }
        }
        Tensor::new(t.shape(), out).expect("same shape")
    };
    Sample {
        id: sample.id.clone(),
        domain: sample.domain,
        image: flip_planes(&sample.image),
        mask: flip_planes(&sample.mask),
    }
}

pub fn hflip(sample: &Sample) -> Sample {
    flip(sample, true)
}

pub fn vflip(sample: &Sample) -> Sample {
    flip(sample, false)
}

fn bilinear_at(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    // zero outside the image
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let get = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let top = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1.0) * fx;
    let bottom = get(y0 + 1.0, x0) * (1.0 - fx) + get(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest_at(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0.0
    } else {
        plane[yy as usize * w + xx as usize]
    }
}

/// Resamples image and mask at `source(y, x)` for every output pixel.
fn warp(sample: &Sample, source: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let [c, h, w] = *sample.image.shape() else {
        unreachable!("samples are [C, H, W]")
    };
    let plane = h * w;
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| source(y, x))
        .collect();
    let mut image = Vec::with_capacity(c * plane);
    for ch in 0..c {
        let src = &sample.image.data()[ch * plane..(ch + 1) * plane];
        image.extend(
            coords
                .iter()
                .map(|&(y, x)| bilinear_at(src, h, w, y, x).clamp(0.0, 1.0)),
        );
    }
    let mask = coords
        .iter()
        .map(|&(y, x)| {
            if nearest_at(sample.mask.data(), h, w, y, x) > 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Sample {
        id: sample.id.clone(),
        domain: sample.domain,
        image: Tensor::new([c, h, w], image).expect("same shape"),
        mask: Tensor::new([1, h, w], mask).expect("same shape"),
    }
}

/// Rotation about the image centre by `degrees` (counter-clockwise in
/// row/column coordinates); outside samples read as zero.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let [_, h, w] = *sample.image.shape() else {
        unreachable!("samples are [C, H, W]")
    };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(sample, |y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        // inverse rotation maps output back to source
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    })
}

fn gaussian_smooth_grid(grid: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return grid.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, kv) in kernel.iter().enumerate() {
                    let o = t as isize - radius;
                    let (ii, jj) = if along_rows {
                        (i as isize, j as isize + o)
                    } else {
                        (i as isize + o, j as isize)
                    };
                    if ii >= 0 && jj >= 0 && (ii as usize) < n && (jj as usize) < n {
                        acc += kv * src[ii as usize * n + jj as usize];
                        norm += kv;
                    }
                }
                out[i * n + j] = acc / norm;
            }
        }
        out
    };
    pass(&pass(grid, true), false)
}

fn upsample_grid(grid: &[f64], n: usize, h: usize, w: usize) -> Vec<f64> {
    let grid_t = Tensor::new([1, n, n], grid.to_vec()).expect("n x n grid");
    if h == w {
        return super::preprocess::resize_bilinear(&grid_t, h)
            .expect("size >= 2")
            .into_data();
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 * (n - 1) as f64 / (h - 1).max(1) as f64;
            let gx = x as f64 * (n - 1) as f64 / (w - 1).max(1) as f64;
            out.push(bilinear_at(grid, n, n, gy.min((n - 1) as f64), gx.min((n - 1) as f64)));
        }
    }
    out
}

/// Smoothed random displacement field on a coarse grid, bilinearly
/// upsampled to full resolution.
pub fn elastic<R: Rng + ?Sized>(sample: &Sample, config: &AugmentConfig, rng: &mut R) -> Sample {
    let [_, h, w] = *sample.image.shape() else {
        unreachable!("samples are [C, H, W]")
    };
    let n = config.elastic_grid.max(2);
    let field = |rng: &mut R| {
        let raw: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let smooth = gaussian_smooth_grid(&raw, n, config.elastic_sigma);
        let peak = smooth.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
        let scaled: Vec<f64> = smooth.iter().map(|v| v / peak * config.elastic_alpha).collect();
        upsample_grid(&scaled, n, h, w)
    };
    let dy = field(rng);
    let dx = field(rng);
    warp(sample, |y, x| {
        let (sy, sx) = (y as f64 + dy[y * w + x], x as f64 + dx[y * w + x]);
        // clamp to the border so the warp never pulls in zeros
        (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64))
    })
}

fn coarse_dropout<R: Rng + ?Sized>(image: &mut Tensor, config: &AugmentConfig, rng: &mut R) {
    let [c, h, w] = *image.shape() else {
        unreachable!("samples are [C, H, W]")
    };
    let holes = rng.random_range(1..=config.max_holes.max(1));
    let max_h = ((h as f64 * config.max_hole_frac) as usize).max(1);
    let max_w = ((w as f64 * config.max_hole_frac) as usize).max(1);
    let data = image.data_mut();
    for _ in 0..holes {
        let hh = rng.random_range(1..=max_h);
        let ww = rng.random_range(1..=max_w);
        let y0 = rng.random_range(0..=h - hh);
        let x0 = rng.random_range(0..=w - ww);
        for ch in 0..c {
            for y in y0..y0 + hh {
                data[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + ww].fill(0.0);
            }
        }
    }
}
