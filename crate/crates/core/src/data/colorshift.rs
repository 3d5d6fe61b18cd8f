//! Feature-shift generator: a class-determined white shape on a
//! client-determined background color.
//!
//! The palette holds two adjacent hues per client, with brightness rising
//! along the palette so clients also differ in background luminance. Each
//! sample draws its background from its own client's pair with probability
//! `shift_strength` and from the whole palette otherwise, so strength 0
//! gives identical background distributions across clients and strength 1
//! gives disjoint ones. Labels are balanced within each client and independent of the
//! background.

use super::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const COLORS_PER_CLIENT: usize = 2;
const FG_LEVEL: f64 = 0.9;
const BG_SATURATION: f64 = 0.8;
const BG_VALUE: f64 = 0.5;
/// Palette brightness ramps linearly over this range around `BG_VALUE`.
const BG_VALUE_SPREAD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorShiftConfig {
    pub num_clients: usize,
    pub num_classes: usize,
    pub samples_per_client: usize,
    pub shift_strength: f64,
    pub image_size: usize,
    /// Per-pixel Gaussian noise on the [0, 1] color scale.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ColorShiftConfig {
    fn default() -> Self {
        ColorShiftConfig {
            num_clients: 4,
            num_classes: 4,
            samples_per_client: 200,
            shift_strength: 0.9,
            image_size: 16,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl ColorShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.num_classes < 2 || self.samples_per_client == 0 {
            return Err(Error::config("colorshift needs >= 1 client, >= 2 classes, >= 1 sample per client"));
        }
        if self.image_size < 4 {
            return Err(Error::config("colorshift image size must be >= 4"));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(Error::config(format!(
                "shift_strength must be in [0, 1], got {}",
                self.shift_strength
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<(Dataset, Vec<ClientShard>)> {
        self.validate()?;
        generate(self)
    }
}

pub fn palette_size(num_clients: usize) -> usize {
    COLORS_PER_CLIENT * num_clients
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => v.abs() < 0.25 && u.abs() < 0.8,
        1 => u.abs() < 0.25 && v.abs() < 0.8,
        2 => (v.abs() < 0.18 && u.abs() < 0.8) || (u.abs() < 0.18 && v.abs() < 0.8),
        3 => r2 < 0.45,
        4 => (0.3..0.75).contains(&r2),
        5 => (u - v).abs() < 0.3 && u.abs() < 0.8 && v.abs() < 0.8,
        6 => ((u - v).abs() < 0.22 || (u + v).abs() < 0.22) && u.abs() < 0.8 && v.abs() < 0.8,
        7 => {
            let m = u.abs().max(v.abs());
            (0.5..0.8).contains(&m)
        }
        c => {
            // Further classes: distinct 3x3 cell patterns.
            if u.abs() >= 0.9 || v.abs() >= 0.9 {
                return false;
            }
            let code = (1u32..512)
                .filter(|b| (3..=6).contains(&b.count_ones()))
                .nth(c - 8)
                .unwrap_or(511);
            let cu = ((u + 0.9) / 0.6).floor() as u32;
            let cv = ((v + 0.9) / 0.6).floor() as u32;
            code >> (cv * 3 + cu) & 1 == 1
        }
    }
}

/// Foreground mask of `class` on a `size × size` grid shifted by `(dx, dy)`
/// pixels, row-major.
pub fn class_mask(class: usize, size: usize, dx: i64, dy: i64) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let half = size as f64 / 2.0;
    let mut m = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 - dx as f64 - c) / half;
            let v = (y as f64 - dy as f64 - c) / half;
            m.push(shape_contains(class, u, v));
        }
    }
    m
}

/// Maximum absolute shape offset in pixels.
pub(crate) fn jitter(size: usize) -> i64 {
    (size / 8).max(1) as i64
}

pub fn gen_colorshift(
    num_clients: usize,
    num_classes: usize,
    samples_per_client: usize,
    shift_strength: f64,
    image_size: usize,
    seed: u64,
) -> Result<(Dataset, Vec<ClientShard>)> {
    ColorShiftConfig {
        num_clients,
        num_classes,
        samples_per_client,
        shift_strength,
        image_size,
        seed,
        ..Default::default()
    }
    .generate()
}

fn generate(cfg: &ColorShiftConfig) -> Result<(Dataset, Vec<ClientShard>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let m = palette_size(cfg.num_clients);
    let palette: Vec<[f64; 3]> = (0..m)
        .map(|k| {
            let v = BG_VALUE + BG_VALUE_SPREAD * (k as f64 / (m - 1).max(1) as f64 - 0.5);
            hsv_to_rgb(k as f64 / m as f64, BG_SATURATION, v)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::config(e.to_string()))?;
    let j = jitter(size);
    let n = cfg.num_clients * cfg.samples_per_client;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let mut backgrounds = Vec::with_capacity(n);
    let mut shards = Vec::with_capacity(cfg.num_clients);
    for client in 0..cfg.num_clients {
        let mut client_labels: Vec<usize> = (0..cfg.samples_per_client).map(|t| t % cfg.num_classes).collect();
        client_labels.shuffle(&mut rng);
        for &label in &client_labels {
            // Fixed draw count per sample keeps samples coupled across
            // shift strengths under one seed.
            let u: f64 = rng.random();
            let own = rng.random_range(0..COLORS_PER_CLIENT);
            let any = rng.random_range(0..m);
            let bg = if u < cfg.shift_strength {
                COLORS_PER_CLIENT * client + own
            } else {
                any
            };
            let dx = rng.random_range(-j..=j);
            let dy = rng.random_range(-j..=j);
            let fg = FG_LEVEL + rng.random_range(-0.05..0.05);
            let mask = class_mask(label, size, dx, dy);
            for ch in 0..3 {
                for &on in &mask {
                    let base = if on { fg } else { palette[bg][ch] };
                    let z = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    data.push(2.0 * (base + z) - 1.0);
                }
            }
            labels.push(label);
            backgrounds.push(bg);
        }
        let start = client * cfg.samples_per_client;
        let idx: Vec<usize> = (start..start + cfg.samples_per_client).collect();
        shards.push(ClientShard::new(client, idx, &labels, cfg.num_classes));
    }
    let images = Tensor::from_vec(&[n, 3, size, size], data)?;
    let mut ds = Dataset::new(images, labels, cfg.num_classes, cfg.seed)?;
    ds.backgrounds = Some(backgrounds);
    Ok((ds, shards))
}
