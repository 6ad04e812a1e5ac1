//! Unsupervised anchor/positive mining: spatial proximity screened by patch SSIM.
//!
//! Negatives are never sampled explicitly. For anchor `a`, the negative set is
//! the positives of every other anchor in the same [`PairSet`].

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{fill_patch, Patch};
use crate::imgio::Image;

/// SSIM stabilizers for a unit dynamic range: `(0.01 L)^2` and `(0.03 L)^2`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Error, PartialEq)]
pub enum MiningError {
    #[error("patch shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("requested {requested} anchors but only {eligible} pixels are eligible")]
    TooManyAnchors { requested: usize, eligible: usize },
    #[error("invalid pair set: {0}")]
    InvalidPairs(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub radius: usize,
    pub ssim_threshold: f64,
    pub max_pos: usize,
    pub anchors_per_image: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { radius: 3, ssim_threshold: 0.5, max_pos: 4, anchors_per_image: 256 }
    }
}

/// Anchors and their mined positives, as `(row, col)` coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub anchors: Vec<(usize, usize)>,
    pub positives: Vec<Vec<(usize, usize)>>,
}

impl PairSet {
    /// Checks distinct anchors, at least one positive each, and bounds.
    pub fn new(
        anchors: Vec<(usize, usize)>,
        positives: Vec<Vec<(usize, usize)>>,
        height: usize,
        width: usize,
    ) -> Result<Self, MiningError> {
        let bad = |m: String| Err(MiningError::InvalidPairs(m));
        if anchors.len() != positives.len() {
            return bad(format!("{} anchors but {} positive lists", anchors.len(), positives.len()));
        }
        let distinct: HashSet<_> = anchors.iter().collect();
        if distinct.len() != anchors.len() {
            return bad("duplicate anchors".into());
        }
        if positives.iter().any(|p| p.is_empty()) {
            return bad("anchor without positives".into());
        }
        let oob = anchors.iter().chain(positives.iter().flatten()).find(|&&(r, c)| r >= height || c >= width);
        if let Some(p) = oob {
            return bad(format!("coordinate {p:?} outside {height}x{width}"));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Negatives of anchor `k`: every other anchor's positives, in anchor order.
    pub fn negatives(&self, k: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positives
            .iter()
            .enumerate()
            .filter(move |(j, _)| *j != k)
            .flat_map(|(_, p)| p.iter().copied())
    }

    /// Every pixel (raster index) whose embedding the losses read.
    pub fn pixels(&self, width: usize) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.anchors.iter().chain(self.positives.iter().flatten()).map(|&(r, c)| r * width + c).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Single-window SSIM with uniform weights, computed per channel and averaged.
pub fn ssim_patch(a: &Patch, b: &Patch) -> Result<f64, MiningError> {
    if (a.size, a.channels) != (b.size, b.channels) || a.data.len() != b.data.len() {
        return Err(MiningError::ShapeMismatch((a.size, a.channels), (b.size, b.channels)));
    }
    Ok(ssim_interleaved(&a.data, &b.data, a.channels))
}

pub(crate) fn ssim_interleaved(a: &[f32], b: &[f32], channels: usize) -> f64 {
    let n = (a.len() / channels) as f64;
    let mut total = 0.0;
    for ch in 0..channels {
        let xs = a.iter().skip(ch).step_by(channels).map(|&v| f64::from(v));
        let ys = b.iter().skip(ch).step_by(channels).map(|&v| f64::from(v));
        let mu_a = xs.clone().sum::<f64>() / n;
        let mu_b = ys.clone().sum::<f64>() / n;
        let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
        for (x, y) in xs.zip(ys) {
            let (dx, dy) = (x - mu_a, y - mu_b);
            var_a += dx * dx;
            var_b += dy * dy;
            cov += dx * dy;
        }
        let (var_a, var_b, cov) = (var_a / n, var_b / n, cov / n);
        total += ssim_from_moments(mu_a, mu_b, var_a, var_b, cov);
    }
    total / channels as f64
}

#[inline]
pub(crate) fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Border margin that keeps an anchor's reconstruction patch inside the image.
pub fn anchor_margin(patch: usize) -> usize {
    patch.div_ceil(2)
}

/// `n` distinct pixels at least `ceil(patch/2)` from every border, uniformly
/// without replacement.
pub fn sample_anchors(img: &Image, n: usize, patch: usize, seed: u64) -> Result<Vec<(usize, usize)>, MiningError> {
    let m = anchor_margin(patch);
    let rows = img.height().saturating_sub(2 * m);
    let cols = img.width().saturating_sub(2 * m);
    let eligible = rows * cols;
    if n > eligible {
        return Err(MiningError::TooManyAnchors { requested: n, eligible });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, eligible, n).into_iter().map(|i| (m + i / cols, m + i % cols)).collect())
}

fn patch_at(img: &Image, row: usize, col: usize, p: usize) -> Vec<f32> {
    let mut buf = vec![0.0f32; p * p * img.channels()];
    fill_patch(img, row, col, p, &mut buf);
    buf
}

/// Positives for each anchor: pixels within Chebyshev distance `radius`
/// whose patch SSIM with the anchor patch is at least `threshold`, best
/// `max_pos` kept (ties broken by raster order). Anchors left with no
/// positive are dropped.
pub fn mine_pairs(
    img: &Image,
    anchors: &[(usize, usize)],
    radius: usize,
    threshold: f64,
    max_pos: usize,
    patch: usize,
) -> PairSet {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut out = PairSet::default();
    let mut seen = HashSet::new();
    for &(ar, ac) in anchors {
        if ar >= h || ac >= w || !seen.insert((ar, ac)) {
            continue;
        }
        let anchor_patch = patch_at(img, ar, ac, patch);
        let mut scored = Vec::new();
        for r in ar.saturating_sub(radius)..=(ar + radius).min(h - 1) {
            for col in ac.saturating_sub(radius)..=(ac + radius).min(w - 1) {
                if (r, col) == (ar, ac) {
                    continue;
                }
                let s = ssim_interleaved(&anchor_patch, &patch_at(img, r, col, patch), c);
                if s >= threshold {
                    scored.push((s, (r, col)));
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(max_pos);
        if !scored.is_empty() {
            out.anchors.push((ar, ac));
            out.positives.push(scored.into_iter().map(|(_, p)| p).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(vals: Vec<f32>, size: usize, channels: usize) -> Patch {
        Patch { size, channels, data: vals }
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let a = patch((0..9).map(|i| i as f32 / 9.0).collect(), 3, 1);
        let b = patch((0..9).map(|i| ((i * 5) % 9) as f32 / 9.0).collect(), 3, 1);
        assert_eq!(ssim_patch(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim_patch(&a, &b).unwrap(), ssim_patch(&b, &a).unwrap());

        let lo = patch(vec![0.2; 9], 3, 1);
        let hi = patch(vec![0.8; 9], 3, 1);
        let (mu_a, mu_b) = (f64::from(0.2f32), f64::from(0.8f32));
        let expected = (2.0 * mu_a * mu_b + 1e-4) * 9e-4 / ((mu_a * mu_a + mu_b * mu_b + 1e-4) * 9e-4);
        let got = ssim_patch(&lo, &hi).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.4706).abs() < 1e-3);

        let rgb = patch(vec![0.5; 27], 3, 3);
        assert!(matches!(ssim_patch(&a, &rgb), Err(MiningError::ShapeMismatch(..))));
    }

    #[test]
    fn anchors_respect_margin_and_seed() {
        let img = Image::filled(20, 16, 1, 0.5).unwrap();
        assert!(sample_anchors(&img, 0, 5, 1).unwrap().is_empty());
        let a = sample_anchors(&img, 30, 5, 9).unwrap();
        assert_eq!(a, sample_anchors(&img, 30, 5, 9).unwrap());
        assert!(a.iter().all(|&(r, c)| (3..17).contains(&r) && (3..13).contains(&c)));
        let distinct: HashSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 30);

        let eligible = 14 * 10;
        let all = sample_anchors(&img, eligible, 5, 2).unwrap();
        let set: HashSet<_> = all.iter().copied().collect();
        let expected: HashSet<_> = (3..17).flat_map(|r| (3..13).map(move |c| (r, c))).collect();
        assert_eq!(set, expected);
        assert_eq!(
            sample_anchors(&img, eligible + 1, 5, 2),
            Err(MiningError::TooManyAnchors { requested: eligible + 1, eligible })
        );
    }

    #[test]
    fn constant_image_fills_every_anchor() {
        let img = Image::filled(12, 12, 1, 0.3).unwrap();
        let anchors = vec![(5, 5), (6, 8), (3, 3)];
        let pairs = mine_pairs(&img, &anchors, 3, 0.5, 4, 5);
        assert_eq!(pairs.anchors, anchors);
        assert!(pairs.positives.iter().all(|p| p.len() == 4));
        assert!(mine_pairs(&img, &anchors, 3, 1.01, 4, 5).is_empty());
    }

    #[test]
    fn two_region_positives_stay_on_their_side() {
        let (h, w) = (16, 16);
        let data = (0..h * w).map(|i| if i % w < 8 { 0.0 } else { 1.0 }).collect();
        let img = Image::new(h, w, 1, data).unwrap();
        let pairs = mine_pairs(&img, &[(8, 2)], 2, 0.9, 24, 5);
        assert_eq!(pairs.len(), 1);
        assert!(!pairs.positives[0].is_empty());
        assert!(pairs.positives[0].iter().all(|&(_, c)| c < 8));
    }

    #[test]
    fn negatives_are_other_anchors_positives() {
        let pairs = PairSet::new(
            vec![(1, 1), (4, 4), (7, 7)],
            vec![vec![(1, 2)], vec![(4, 5), (5, 5)], vec![(7, 8)]],
            10,
            10,
        )
        .unwrap();
        assert_eq!(pairs.negatives(1).collect::<Vec<_>>(), vec![(1, 2), (7, 8)]);
        assert!(PairSet::new(vec![(1, 1)], vec![vec![]], 10, 10).is_err());
        assert!(PairSet::new(vec![(1, 1), (1, 1)], vec![vec![(0, 0)], vec![(0, 1)]], 10, 10).is_err());
        assert!(PairSet::new(vec![(1, 1)], vec![vec![(10, 0)]], 10, 10).is_err());
    }

    fn noisy_image(seed: u64) -> Image {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..24 * 24).map(|i| if (i % 24) < 12 { 0.3 } else { 0.7 } + rng.random_range(-0.1f32..0.1)).collect();
        Image::new(24, 24, 1, data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn positives_in_bounds_and_radius(seed in any::<u64>(), radius in 1usize..4, thr in -0.2f64..0.9) {
            let img = noisy_image(seed);
            let anchors = sample_anchors(&img, 40, 5, seed).unwrap();
            let pairs = mine_pairs(&img, &anchors, radius, thr, 6, 5);
            prop_assert_eq!(&pairs, &mine_pairs(&img, &anchors, radius, thr, 6, 5));
            for (a, pos) in pairs.anchors.iter().zip(&pairs.positives) {
                prop_assert!(!pos.is_empty() && pos.len() <= 6);
                for p in pos {
                    prop_assert!(p.0 < 24 && p.1 < 24);
                    prop_assert!(a.0.abs_diff(p.0).max(a.1.abs_diff(p.1)) <= radius);
                    prop_assert!(p != a);
                }
            }
        }

        #[test]
        fn higher_threshold_never_adds_positives(seed in any::<u64>(), lo in -0.5f64..0.8, bump in 0.0f64..0.5) {
            let img = noisy_image(seed);
            let anchors = sample_anchors(&img, 30, 5, seed ^ 1).unwrap();
            let loose = mine_pairs(&img, &anchors, 3, lo, 48, 5);
            let tight = mine_pairs(&img, &anchors, 3, lo + bump, 48, 5);
            for (a, pos) in tight.anchors.iter().zip(&tight.positives) {
                let k = loose.anchors.iter().position(|x| x == a).unwrap();
                prop_assert!(pos.len() <= loose.positives[k].len());
            }
        }
    }
}
