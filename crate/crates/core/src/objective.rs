//! Contrastive and patch-reconstruction objectives, their gradients with
//! respect to the embedding field, and the epoch/image training loop.
//!
//! Contrastive loss for one anchor `z` with positives `P` and negatives `N`,
//! using cosine similarity `s` and temperature `tau`:
//!
//! ```text
//! l = -log( sum_{p in P} exp(s(z, p) / tau) / sum_{n in N} exp(s(z, n) / tau) )
//! ```
//!
//! The denominator holds negatives only, so `l` can be negative. Per-anchor
//! losses are averaged. The reconstruction loss is the squared error between
//! the image patch around an anchor and the affine head's output, averaged
//! over patch elements and anchors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{self, conv, fill_patch, AdamState, ArchSpec, EmbeddingField, EncoderError, EncoderParams};
use crate::imgio::Image;
use crate::mining::{mine_pairs, sample_anchors, MiningConfig, PairSet};
use crate::real::Real;

/// Cosine similarity treats vectors shorter than this as having this norm.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("pair set has no anchors")]
    EmptyPairs,
    #[error("no anchor has a non-empty negative set")]
    EmptyNegatives,
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("embedding field has dim {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, image {image}")]
    NonFiniteLoss { epoch: usize, image: usize },
    #[error("epoch {epoch}: no image yielded a usable pair set (need at least two anchors with positives)")]
    NoUsablePairs { epoch: usize },
    #[error(transparent)]
    Encoder(Box<EncoderError>),
}

impl From<EncoderError> for ObjectiveError {
    fn from(e: EncoderError) -> Self {
        ObjectiveError::Encoder(Box::new(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Images per optimizer step.
    pub batch_images: usize,
    #[serde(skip)]
    pub mining: MiningConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            temperature: 0.5,
            epochs: 50,
            learning_rate: 1e-3,
            batch_images: 1,
            mining: MiningConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ObjectiveError::LambdaOutOfRange(self.lambda));
        }
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.into()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be >= 0");
        }
        if self.batch_images == 0 {
            return bad("batch_images must be >= 1");
        }
        if self.mining.radius == 0 {
            return bad("mining radius must be >= 1");
        }
        if !(-1.0..=f64::INFINITY).contains(&self.mining.ssim_threshold) {
            return bad("ssim threshold must be >= -1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub reconstruction: f64,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn new(contrastive: f64, reconstruction: f64, lambda: f64) -> Self {
        Self { contrastive, reconstruction, combined: lambda * contrastive + (1.0 - lambda) * reconstruction }
    }
}

pub fn combined_loss(contrastive: f64, reconstruction: f64, lambda: f64) -> Result<f64, ObjectiveError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ObjectiveError::LambdaOutOfRange(lambda));
    }
    Ok(lambda * contrastive + (1.0 - lambda) * reconstruction)
}

fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Mean contrastive loss over anchors with both positives and negatives.
///
/// `z` is a dense `H x W x dim` buffer; only pixels named in `pairs` are read.
/// When `grad` is given, `scale * dl/dz` is added into it.
pub(crate) fn contrastive_terms<T: Real>(
    z: &[T],
    width: usize,
    dim: usize,
    pairs: &PairSet,
    tau: f64,
    grad: Option<(&mut [T], T)>,
) -> Result<T, ObjectiveError> {
    if pairs.is_empty() {
        return Err(ObjectiveError::EmptyPairs);
    }
    let pixels = pairs.pixels(width);
    let slot = |(r, c): (usize, usize)| pixels.binary_search(&(r * width + c)).expect("pixel listed");
    let floor = T::lit(NORM_FLOOR);
    let mut units = vec![T::zero(); pixels.len() * dim];
    let mut norms = vec![T::zero(); pixels.len()];
    for (s, &p) in pixels.iter().enumerate() {
        let v = &z[p * dim..(p + 1) * dim];
        let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
        norms[s] = n;
        units[s * dim..(s + 1) * dim].iter_mut().zip(v).for_each(|(u, &x)| *u = x / n);
    }
    let unit = |s: usize| &units[s * dim..(s + 1) * dim];

    // (owning anchor, slot) for every mined positive, in anchor order.
    let entries: Vec<(usize, usize)> = pairs
        .positives
        .iter()
        .enumerate()
        .flat_map(|(k, ps)| ps.iter().map(move |&p| (k, p)))
        .map(|(k, p)| (k, slot(p)))
        .collect();
    let n_pos = |k: usize| pairs.positives[k].len();
    let contributing: Vec<usize> =
        (0..pairs.len()).filter(|&k| n_pos(k) > 0 && entries.len() > n_pos(k)).collect();
    if contributing.is_empty() {
        return Err(ObjectiveError::EmptyNegatives);
    }

    let inv_tau = T::lit(1.0 / tau);
    let inv_m = T::one() / T::lit(contributing.len() as f64);
    let mut grad = grad;
    let mut total = T::zero();
    let mut sims = vec![T::zero(); entries.len()];
    let (mut pos_logits, mut neg_logits) = (Vec::new(), Vec::new());
    for &k in &contributing {
        let a = slot(pairs.anchors[k]);
        let ua = unit(a);
        pos_logits.clear();
        neg_logits.clear();
        for (s, &(owner, e)) in sims.iter_mut().zip(&entries) {
            *s = ua.iter().zip(unit(e)).map(|(&x, &y)| x * y).sum();
            if owner == k {
                pos_logits.push(*s * inv_tau);
            } else {
                neg_logits.push(*s * inv_tau);
            }
        }
        let lse_pos = log_sum_exp(&pos_logits);
        let lse_neg = log_sum_exp(&neg_logits);
        total += lse_neg - lse_pos;

        if let Some((g, scale)) = grad.as_mut() {
            let base = *scale * inv_m * inv_tau;
            for (&s, &(owner, e)) in sims.iter().zip(&entries) {
                // d l / d s for this entry
                let coeff = if owner == k {
                    -(s * inv_tau - lse_pos).exp()
                } else {
                    (s * inv_tau - lse_neg).exp()
                } * base;
                let ue = unit(e);
                let (pa, pe) = (pixels[a], pixels[e]);
                let (ca, ce) = (coeff / norms[a], coeff / norms[e]);
                for j in 0..dim {
                    g[pa * dim + j] += ca * (ue[j] - s * ua[j]);
                    g[pe * dim + j] += ce * (ua[j] - s * ue[j]);
                }
            }
        }
    }
    Ok(total * inv_m)
}

/// Mean over anchors of the per-element squared reconstruction error.
///
/// When `grad` is given, `scale * dl/dhead` is added to the head tensors of
/// the gradient and `scale * dl/dz` to the dense field gradient.
pub(crate) fn reconstruction_terms<T: Real>(
    params: &EncoderParams<T>,
    z: &[T],
    img: &Image,
    pairs: &PairSet,
    grad: Option<(&mut EncoderParams<T>, &mut [T], T)>,
) -> T {
    if pairs.is_empty() {
        return T::zero();
    }
    let (w, d) = (img.width(), params.arch.embed_dim);
    let p = params.arch.recon_patch;
    let plen = params.arch.patch_len();
    let mut grad = grad;
    let mut target = vec![T::zero(); plen];
    let mut diff = vec![T::zero(); plen];
    let mut total = T::zero();
    let per_anchor = T::one() / T::lit(pairs.len() as f64);
    let per_elem = T::one() / T::lit(plen as f64);
    for &(r, c) in &pairs.anchors {
        let at = (r * w + c) * d;
        let zv = &z[at..at + d];
        fill_patch(img, r, c, p, &mut target);
        let mut sq = T::zero();
        for (q, ((row, &b), &t)) in params.recon_weight.chunks_exact(d).zip(&params.recon_bias).zip(&target).enumerate() {
            let recon = row.iter().zip(zv).fold(b, |acc, (&wq, &x)| acc + wq * x);
            diff[q] = recon - t;
            sq += diff[q] * diff[q];
        }
        total += sq * per_elem;

        if let Some((g, dz, scale)) = grad.as_mut() {
            let k = *scale * T::lit(2.0) * per_elem * per_anchor;
            for (q, &e) in diff.iter().enumerate() {
                let gq = k * e;
                g.recon_bias[q] += gq;
                let wrow = &params.recon_weight[q * d..(q + 1) * d];
                let grow = &mut g.recon_weight[q * d..(q + 1) * d];
                for j in 0..d {
                    grow[j] += gq * zv[j];
                    dz[at + j] += gq * wrow[j];
                }
            }
        }
    }
    total * per_anchor
}

pub fn contrastive_loss<T: Real>(field: &EmbeddingField<T>, pairs: &PairSet, tau: f64) -> Result<f64, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::InvalidConfig("temperature must be > 0".into()));
    }
    contrastive_terms(&field.data, field.width, field.dim, pairs, tau, None).map(Real::as_f64)
}

pub fn reconstruction_loss<T: Real>(
    params: &EncoderParams<T>,
    field: &EmbeddingField<T>,
    img: &Image,
    pairs: &PairSet,
) -> Result<f64, ObjectiveError> {
    if field.dim != params.arch.embed_dim {
        return Err(ObjectiveError::DimMismatch { expected: params.arch.embed_dim, got: field.dim });
    }
    Ok(reconstruction_terms(params, &field.data, img, pairs, None).as_f64())
}

/// Combined loss at `params` and its exact gradient for every parameter.
pub fn loss_and_grad<T: Real>(
    params: &EncoderParams<T>,
    img: &Image,
    pairs: &PairSet,
    lambda: f64,
    tau: f64,
) -> Result<(LossBreakdown, EncoderParams<T>), ObjectiveError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ObjectiveError::LambdaOutOfRange(lambda));
    }
    encoder::check_channels(params, img)?;
    let (w, d) = (img.width(), params.arch.embed_dim);
    let tape = conv::forward_tape(params, img, &pairs.pixels(w));
    let mut dz = vec![T::zero(); tape.output.len()];
    let mut grads = params.zeros_like();
    let lc = contrastive_terms(&tape.output, w, d, pairs, tau, Some((&mut dz, T::lit(lambda))))?;
    let lr = reconstruction_terms(params, &tape.output, img, pairs, Some((&mut grads, &mut dz, T::lit(1.0 - lambda))));
    conv::backward(params, &tape, &dz, &mut grads);
    Ok((LossBreakdown::new(lc.as_f64(), lr.as_f64(), lambda), grads))
}

/// Combined loss only (dense forward), used by gradient oracles.
pub fn evaluate_loss<T: Real>(
    params: &EncoderParams<T>,
    img: &Image,
    pairs: &PairSet,
    lambda: f64,
    tau: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    let field = encoder::forward(params, img)?;
    let lc = contrastive_loss(&field, pairs, tau)?;
    let lr = reconstruction_loss(params, &field, img, pairs)?;
    Ok(LossBreakdown::new(lc, lr, lambda))
}

/// splitmix64 finalizer; derives independent per-step seeds.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mine a pair set for one image at one step of training.
pub fn mine_for_step(img: &Image, arch: &ArchSpec, cfg: &TrainConfig, epoch: usize, index: usize) -> PairSet {
    let m = crate::mining::anchor_margin(arch.recon_patch);
    let eligible = img.height().saturating_sub(2 * m) * img.width().saturating_sub(2 * m);
    let n = cfg.mining.anchors_per_image.min(eligible);
    let seed = mix_seed(cfg.seed, epoch as u64, index as u64);
    let anchors = sample_anchors(img, n, arch.recon_patch, seed).expect("anchor count clamped to eligible");
    mine_pairs(img, &anchors, cfg.mining.radius, cfg.mining.ssim_threshold, cfg.mining.max_pos, arch.recon_patch)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams<f32>,
    /// Mean loss breakdown per epoch.
    pub history: Vec<LossBreakdown>,
}

pub fn train(dataset: &[Image], arch: &ArchSpec, cfg: &TrainConfig) -> Result<TrainOutcome, ObjectiveError> {
    train_with_progress(dataset, arch, cfg, |_, _| {})
}

/// Same as [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with_progress(
    dataset: &[Image],
    arch: &ArchSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome, ObjectiveError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let mut params = encoder::init_params(arch, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut lc, mut lr, mut steps) = (0.0, 0.0, 0usize);
        for (chunk_idx, chunk) in dataset.chunks(cfg.batch_images).enumerate() {
            let first = chunk_idx * cfg.batch_images;
            let batch: Vec<(Image, PairSet)> = chunk
                .iter()
                .enumerate()
                .map(|(i, img)| (img.clone(), mine_for_step(img, arch, cfg, epoch, first + i)))
                .filter(|(_, pairs)| pairs.len() >= 2)
                .collect();
            if batch.is_empty() {
                continue;
            }
            let (next, next_state, loss) = encoder::train_step(&params, &state, &batch, cfg).map_err(|e| match e {
                EncoderError::NonFiniteLoss => ObjectiveError::NonFiniteLoss { epoch: epoch + 1, image: first },
                other => other.into(),
            })?;
            params = next;
            state = next_state;
            lc += loss.contrastive;
            lr += loss.reconstruction;
            steps += 1;
        }
        if steps == 0 {
            return Err(ObjectiveError::NoUsablePairs { epoch: epoch + 1 });
        }
        let mean = LossBreakdown::new(lc / steps as f64, lr / steps as f64, cfg.lambda);
        on_epoch(epoch + 1, &mean);
        history.push(mean);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_from(vectors: &[Vec<f64>], width: usize) -> EmbeddingField<f64> {
        let dim = vectors[0].len();
        EmbeddingField {
            height: vectors.len() / width,
            width,
            dim,
            data: vectors.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn contrastive_closed_forms() {
        // pixel 0: anchor A, 1: positive of A, 2: anchor B, 3: positive of B
        let pairs = PairSet::new(vec![(0, 0), (0, 2)], vec![vec![(0, 1)], vec![(0, 3)]], 1, 4).unwrap();
        let same = field_from(&vec![vec![0.3, -0.4]; 4], 4);
        // |pos| = |neg| = 1 for both anchors
        assert!(contrastive_loss(&same, &pairs, 0.5).unwrap().abs() < 1e-12);

        // A scores -2, B (positive at cosine 0, negative at cosine 1) scores +2
        let f = field_from(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]], 4);
        let mean = contrastive_terms(&f.data, 4, 2, &pairs, 0.5, None).unwrap();
        assert!(mean.abs() < 1e-12);
        let single = PairSet { anchors: vec![(0, 0)], positives: vec![vec![(0, 1)]] };
        assert!(matches!(contrastive_loss(&f, &single, 0.5), Err(ObjectiveError::EmptyNegatives)));
        assert!(matches!(contrastive_loss(&f, &PairSet::default(), 0.5), Err(ObjectiveError::EmptyPairs)));
    }

    #[test]
    fn contrastive_one_positive_one_negative() {
        // anchor 0 with positive 1 (cos 1); anchor 2 with positive 3 (cos 0 to anchor 0)
        // anchor 2 mirrors: its positive 3 has cos 1, its negative 1 has cos 0
        let f = field_from(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], 4);
        let pairs = PairSet::new(vec![(0, 0), (0, 2)], vec![vec![(0, 1)], vec![(0, 3)]], 1, 4).unwrap();
        assert!((contrastive_loss(&f, &pairs, 0.5).unwrap() - (-2.0)).abs() < 1e-12);
        assert!((contrastive_loss(&f, &pairs, 5.0).unwrap() - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn equal_similarities_give_count_ratio() {
        let f = field_from(&vec![vec![0.5, 0.5, 0.1]; 9], 9);
        let pairs = PairSet::new(
            vec![(0, 0), (0, 4), (0, 7)],
            vec![vec![(0, 1), (0, 2), (0, 3)], vec![(0, 5)], vec![(0, 6), (0, 8)]],
            1,
            9,
        )
        .unwrap();
        let expected = [(3.0f64, 3.0f64), (1.0, 5.0), (2.0, 4.0)]
            .iter()
            .map(|(p, n)| -(p / n).ln())
            .sum::<f64>()
            / 3.0;
        assert!((contrastive_loss(&f, &pairs, 0.5).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_offsets() {
        let arch = ArchSpec {
            num_layers: 1,
            filter_size: 1,
            channel_widths: vec![2],
            embed_dim: 2,
            recon_patch: 3,
            input_channels: 1,
        };
        let mut params = EncoderParams::<f64>::zeros(&arch).unwrap();
        let img = Image::filled(5, 5, 1, 0.5).unwrap();
        let field = encoder::forward(&params, &img).unwrap();
        let pairs = PairSet::new(vec![(2, 2), (1, 3)], vec![vec![(2, 3)], vec![(1, 2)]], 5, 5).unwrap();

        params.recon_bias = vec![0.5; 9];
        assert_eq!(reconstruction_loss(&params, &field, &img, &pairs).unwrap(), 0.0);
        params.recon_bias = vec![0.5 + 0.25; 9];
        assert!((reconstruction_loss(&params, &field, &img, &pairs).unwrap() - 0.0625).abs() < 1e-12);

        let reversed = PairSet { anchors: pairs.anchors.iter().rev().copied().collect(), positives: pairs.positives.iter().rev().cloned().collect() };
        assert_eq!(
            reconstruction_loss(&params, &field, &img, &pairs).unwrap(),
            reconstruction_loss(&params, &field, &img, &reversed).unwrap()
        );
    }

    #[test]
    fn combined_weights() {
        assert_eq!(combined_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(combined_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert!((combined_loss(2.0, 1.0, 0.01).unwrap() - 1.01).abs() < 1e-12);
        assert!(matches!(combined_loss(1.0, 1.0, 1.5), Err(ObjectiveError::LambdaOutOfRange(_))));
        assert!(matches!(combined_loss(1.0, 1.0, -0.1), Err(ObjectiveError::LambdaOutOfRange(_))));
    }

    #[test]
    fn mix_seed_separates_steps() {
        assert_ne!(mix_seed(1, 0, 1), mix_seed(1, 1, 0));
        assert_eq!(mix_seed(5, 2, 3), mix_seed(5, 2, 3));
    }
}
