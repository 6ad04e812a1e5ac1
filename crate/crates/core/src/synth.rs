//! Synthetic images with known ground truth.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imgio::{self, Image, ImgError, LabelMap};
use crate::objective::mix_seed;

pub const SYNTH_SIZE: usize = 128;
pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Smooth random boundary; label 0 at 0.3, label 1 at 0.7.
    TwoRegion,
    /// Dark ellipse (label 1) on a bright background.
    Blob,
    /// Disk and two annuli, labels 2 (inner) to 0 (outer).
    Rings,
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoRegion => "two-region",
            Self::Blob => "blob",
            Self::Rings => "rings",
        })
    }
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "two-region" => Ok(Self::TwoRegion),
            "blob" => Ok(Self::Blob),
            "rings" => Ok(Self::Rings),
            other => Err(format!("unknown kind {other:?} (expected two-region, blob or rings)")),
        }
    }
}

fn render(size: usize, rng: &mut ChaCha8Rng, label_at: impl Fn(f64, f64) -> u32, levels: &[f32]) -> (Image, LabelMap) {
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut labels = Vec::with_capacity(size * size);
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let l = label_at(r as f64, c as f64);
            labels.push(l);
            let v = f64::from(levels[l as usize]) + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    (
        Image::new(size, size, 1, data).expect("valid synthetic image"),
        LabelMap::new(size, size, labels).expect("valid synthetic labels"),
    )
}

/// One `size x size` single-channel image and its labels.
pub fn generate(kind: SynthKind, size: usize, seed: u64) -> (Image, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    match kind {
        SynthKind::TwoRegion => {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (nx, ny) = (theta.cos(), theta.sin());
            let offset = rng.random_range(-0.2..0.2) * s;
            let waves: Vec<(f64, f64, f64)> = (1..=3)
                .map(|k| {
                    let amp = rng.random_range(0.0..0.08) * s / k as f64;
                    (amp, k as f64 * std::f64::consts::TAU / s, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            let half = s / 2.0;
            let label_at = move |r: f64, c: f64| {
                let (x, y) = (c - half, r - half);
                let along = -x * ny + y * nx;
                let bend: f64 = waves.iter().map(|(a, f, p)| a * (f * along + p).sin()).sum();
                u32::from(x * nx + y * ny - offset > bend)
            };
            render(size, &mut rng, label_at, &[0.3, 0.7])
        }
        SynthKind::Blob => {
            let (cy, cx) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
            let (a, b) = (rng.random_range(0.15..0.3) * s, rng.random_range(0.1..0.25) * s);
            let phi = rng.random_range(0.0..std::f64::consts::PI);
            let (cp, sp) = (phi.cos(), phi.sin());
            let label_at = move |r: f64, c: f64| {
                let (x, y) = (c - cx, r - cy);
                let (u, v) = (x * cp + y * sp, -x * sp + y * cp);
                u32::from((u / a).powi(2) + (v / b).powi(2) <= 1.0)
            };
            render(size, &mut rng, label_at, &[0.75, 0.25])
        }
        SynthKind::Rings => {
            let (cy, cx) = (rng.random_range(0.4..0.6) * s, rng.random_range(0.4..0.6) * s);
            let inner = rng.random_range(0.1..0.16) * s;
            let outer = inner + rng.random_range(0.12..0.2) * s;
            let label_at = move |r: f64, c: f64| {
                let d = ((r - cy).powi(2) + (c - cx).powi(2)).sqrt();
                if d <= inner {
                    2
                } else if d <= outer {
                    1
                } else {
                    0
                }
            };
            render(size, &mut rng, label_at, &[0.2, 0.5, 0.8])
        }
    }
}

/// `n` images with per-index seeds derived from `seed`.
pub fn corpus(kind: SynthKind, n: usize, seed: u64) -> Vec<(Image, LabelMap)> {
    (0..n).map(|i| generate(kind, SYNTH_SIZE, mix_seed(seed, 0x5157, i as u64))).collect()
}

/// Write `synth_NNNN.png` and `synth_NNNN.lbl` pairs; returns the image paths.
pub fn write_corpus(dir: &Path, kind: SynthKind, n: usize, seed: u64) -> Result<Vec<PathBuf>, ImgError> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(n);
    for (i, (img, lm)) in corpus(kind, n, seed).into_iter().enumerate() {
        let png = dir.join(format!("synth_{i:04}.png"));
        imgio::save_png(&img, &png)?;
        imgio::write_label_map(&lm, png.with_extension("lbl"))?;
        paths.push(png);
    }
    Ok(paths)
}
