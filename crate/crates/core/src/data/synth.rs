use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{GroundTruth, HsiCube};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            height: 32,
            width: 32,
            bands: 20,
            classes: 4,
            sigma: 0.02,
            seed: 7,
        }
    }
}

const BASE_COLORS: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

/// Distinct display colors; the first twelve are hand-picked, the rest walk
/// the hue circle by the golden angle.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            if i < BASE_COLORS.len() {
                return BASE_COLORS[i];
            }
            let h = (i as f64 * 137.508) % 360.0;
            hsv(h, 0.65, 0.9)
        })
        .collect()
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

fn signature(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let d = bands as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            let center = rng.random_range(0.0..d);
            let width = rng.random_range((d / 12.0).max(0.5)..(d / 4.0).max(1.0));
            let amp = rng.random_range(0.2..0.8);
            (center, width, amp)
        })
        .collect();
    (0..bands)
        .map(|b| {
            0.1 + bumps
                .iter()
                .map(|&(c, w, a)| a * (-((b as f64 - c) / w).powi(2) / 2.0).exp())
                .sum::<f64>()
        })
        .collect()
}

fn min_pairwise_distance(sigs: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in sigs.iter().enumerate() {
        for b in &sigs[i + 1..] {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// A labeled scene of `classes` Voronoi regions, each with a smooth spectral
/// signature plus Gaussian noise. Every pixel is labeled. Reflectances are
/// rounded to `f32` so a written scene reloads bit-for-bit.
pub fn synth_scene(p: &SynthParams) -> Result<(HsiCube, GroundTruth)> {
    let (h, w, d, n) = (p.height, p.width, p.bands, p.classes);
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!("empty scene {h}×{w}×{d}")));
    }
    if n == 0 || n > h * w || n > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "cannot place {n} classes on {} pixels",
            h * w
        )));
    }
    if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", p.sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let sites: Vec<(f64, f64)> = index::sample(&mut rng, h * w, n)
        .into_iter()
        .map(|i| ((i / w) as f64, (i % w) as f64))
        .collect();
    let labels: Vec<u16> = (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, &(sr, sc)) in sites.iter().enumerate() {
                let dist = (r - sr).powi(2) + (c - sc).powi(2);
                if dist < best_d {
                    best = k;
                    best_d = dist;
                }
            }
            best as u16 + 1
        })
        .collect();

    // resample until every pair of classes is well separated
    let need = 5.0 * p.sigma;
    let mut sigs = Vec::new();
    for attempt in 0.. {
        sigs = (0..n).map(|_| signature(&mut rng, d)).collect();
        if n < 2 || min_pairwise_distance(&sigs) > need {
            break;
        }
        if attempt == 200 {
            return Err(Error::InvalidArgument(format!(
                "could not separate {n} class signatures by 5σ = {need} over {d} bands"
            )));
        }
    }

    let mut data = vec![0.0; h * w * d];
    let noise = Normal::new(0.0, p.sigma).expect("checked sigma");
    for (i, &l) in labels.iter().enumerate() {
        let sig = &sigs[l as usize - 1];
        for b in 0..d {
            let v = sig[b] + if p.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data[b * h * w + i] = v as f32 as f64;
        }
    }
    let mut cube = HsiCube::new(h, w, d, data)?;
    cube.wavelengths = Some(
        (0..d)
            .map(|b| 400.0 + 600.0 * b as f64 / (d.max(2) - 1) as f64)
            .collect(),
    );
    let classes = (1..=n).map(|k| format!("class {k}")).collect();
    let gt = GroundTruth::new(h, w, labels, classes, default_palette(n))?;
    Ok((cube, gt))
}
