//! Convolutional pixel encoder, its affine patch-reconstruction head, and the
//! hand-written training step.
//!
//! The encoder is a stack of stride-1, zero-padded ("same") convolutions with
//! leaky-ReLU between layers and a linear last layer, so an `H x W x c` image
//! maps to an `H x W x d` embedding field with no change in resolution.

mod adam;
pub mod checkpoint;
pub(crate) mod conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::Image;
use crate::mining::PairSet;
use crate::objective::{self, LossBreakdown, ObjectiveError, TrainConfig};
use crate::real::Real;

pub use adam::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("image has {got} channels, encoder expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("vector has length {got}, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds { row: usize, col: usize, height: usize, width: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("loss or gradient became non-finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Architecture descriptor. Serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub num_layers: usize,
    pub filter_size: usize,
    pub channel_widths: Vec<usize>,
    pub embed_dim: usize,
    pub recon_patch: usize,
    pub input_channels: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            filter_size: 5,
            channel_widths: vec![16, 32, 64, 128],
            embed_dim: 128,
            recon_patch: 5,
            input_channels: 1,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidArch(m));
        if self.channel_widths.is_empty() || self.num_layers == 0 {
            return bad("no layers".into());
        }
        if self.channel_widths.len() != self.num_layers {
            return bad(format!("{} widths for {} layers", self.channel_widths.len(), self.num_layers));
        }
        if self.filter_size % 2 == 0 {
            return bad(format!("filter size {} is even", self.filter_size));
        }
        if self.recon_patch % 2 == 0 {
            return bad(format!("reconstruction patch {} is even", self.recon_patch));
        }
        if self.channel_widths.contains(&0) || self.input_channels == 0 {
            return bad("zero channel width".into());
        }
        if self.channel_widths.last() != Some(&self.embed_dim) {
            return bad(format!("last width {:?} != embed_dim {}", self.channel_widths.last(), self.embed_dim));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        self.num_layers * (self.filter_size - 1) + 1
    }

    /// Number of reals in one reconstructed patch, `p * p * c`.
    pub fn patch_len(&self) -> usize {
        self.recon_patch * self.recon_patch * self.input_channels
    }
}

/// One convolution: weights in `out x in x k x k` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// All trainable tensors. Gradients reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = f32> {
    pub arch: ArchSpec,
    pub layers: Vec<ConvLayer<T>>,
    /// `(p*p*c) x d`, row-major; a patch is `recon_weight * z + recon_bias`.
    pub recon_weight: Vec<T>,
    pub recon_bias: Vec<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(arch: &ArchSpec) -> Result<Self, EncoderError> {
        arch.validate()?;
        let k = arch.filter_size;
        let mut in_ch = arch.input_channels;
        let mut layers = Vec::with_capacity(arch.num_layers);
        for &out_ch in &arch.channel_widths {
            layers.push(ConvLayer {
                in_ch,
                out_ch,
                kernel: k,
                weight: vec![T::zero(); out_ch * in_ch * k * k],
                bias: vec![T::zero(); out_ch],
            });
            in_ch = out_ch;
        }
        let plen = arch.patch_len();
        Ok(Self {
            arch: arch.clone(),
            layers,
            recon_weight: vec![T::zero(); plen * arch.embed_dim],
            recon_bias: vec![T::zero(); plen],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch).expect("arch already validated")
    }

    /// Tensors in checkpoint order: per layer (weight, bias), then head (weight, bias).
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out: Vec<&Vec<T>> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        out.push(&self.recon_weight);
        out.push(&self.recon_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        out.push(&mut self.recon_weight);
        out.push(&mut self.recon_bias);
        out
    }

    /// Shape of each tensor in [`Self::tensors`] order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(vec![l.out_ch, l.in_ch, l.kernel, l.kernel]);
            out.push(vec![l.out_ch]);
        }
        out.push(vec![self.arch.patch_len(), self.arch.embed_dim]);
        out.push(vec![self.arch.patch_len()]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        EncoderParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernel: l.kernel,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
            recon_weight: conv(&self.recon_weight),
            recon_bias: conv(&self.recon_bias),
        }
    }
}

/// Uniform(-b, b) weights with `b = sqrt(1 / fan_in)`, zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<EncoderParams<f32>, EncoderError> {
    let mut params = EncoderParams::<f32>::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let bound = (1.0 / (layer.in_ch * layer.kernel * layer.kernel) as f64).sqrt() as f32;
        layer.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
    }
    let bound = (1.0 / arch.embed_dim as f64).sqrt() as f32;
    params.recon_weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..=bound));
    Ok(params)
}

/// Per-pixel embeddings, row-major `H x W x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingField<T = f32> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Real> EmbeddingField<T> {
    #[inline]
    pub fn vector(&self, row: usize, col: usize) -> &[T] {
        let at = (row * self.width + col) * self.dim;
        &self.data[at..at + self.dim]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

pub fn forward<T: Real>(params: &EncoderParams<T>, img: &Image) -> Result<EmbeddingField<T>, EncoderError> {
    check_channels(params, img)?;
    Ok(EmbeddingField {
        height: img.height(),
        width: img.width(),
        dim: params.arch.embed_dim,
        data: conv::forward_dense(params, img),
    })
}

pub(crate) fn check_channels<T>(params: &EncoderParams<T>, img: &Image) -> Result<(), EncoderError> {
    if img.channels() != params.arch.input_channels {
        return Err(EncoderError::ChannelMismatch { expected: params.arch.input_channels, got: img.channels() });
    }
    Ok(())
}

/// A `p x p x c` window, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T = f32> {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

pub fn reconstruct_patch<T: Real>(params: &EncoderParams<T>, z: &[T]) -> Result<Patch<T>, EncoderError> {
    let d = params.arch.embed_dim;
    if z.len() != d {
        return Err(EncoderError::DimMismatch { expected: d, got: z.len() });
    }
    let data = params
        .recon_weight
        .chunks_exact(d)
        .zip(&params.recon_bias)
        .map(|(row, &b)| row.iter().zip(z).fold(b, |acc, (&w, &x)| acc + w * x))
        .collect();
    Ok(Patch { size: params.arch.recon_patch, channels: params.arch.input_channels, data })
}

/// Window of side `p` centred on `(row, col)`, zero outside the image.
pub fn extract_patch(img: &Image, row: usize, col: usize, p: usize) -> Result<Patch<f32>, EncoderError> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if row >= h || col >= w {
        return Err(EncoderError::OutOfBounds { row, col, height: h, width: w });
    }
    let mut data = vec![0.0f32; p * p * c];
    fill_patch(img, row, col, p, &mut data);
    Ok(Patch { size: p, channels: c, data })
}

pub(crate) fn fill_patch<T: Real>(img: &Image, row: usize, col: usize, p: usize, out: &mut [T]) {
    let (h, w, c) = (img.height() as isize, img.width() as isize, img.channels());
    let r = (p / 2) as isize;
    for dy in 0..p {
        let y = row as isize + dy as isize - r;
        for dx in 0..p {
            let x = col as isize + dx as isize - r;
            let dst = &mut out[(dy * p + dx) * c..(dy * p + dx + 1) * c];
            if y >= 0 && y < h && x >= 0 && x < w {
                for (d, &v) in dst.iter_mut().zip(img.pixel(y as usize, x as usize)) {
                    *d = T::lit(f64::from(v));
                }
            } else {
                dst.fill(T::zero());
            }
        }
    }
}

/// One optimizer step on a batch of `(image, pairs)` items.
///
/// Losses and gradients are averaged over the batch in item order, then a
/// single Adam update is applied. The reported losses are those at the
/// incoming parameters.
pub fn train_step<T: Real>(
    params: &EncoderParams<T>,
    state: &AdamState<T>,
    batch: &[(Image, PairSet)],
    cfg: &TrainConfig,
) -> Result<(EncoderParams<T>, AdamState<T>, LossBreakdown), EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let mut grads = params.zeros_like();
    let (mut lc, mut lr) = (0.0, 0.0);
    for (img, pairs) in batch {
        check_channels(params, img)?;
        let (loss, g) = objective::loss_and_grad(params, img, pairs, cfg.lambda, cfg.temperature)?;
        lc += loss.contrastive;
        lr += loss.reconstruction;
        for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.iter_mut().zip(t).for_each(|(a, &b)| *a += b);
        }
    }
    let n = batch.len() as f64;
    if n > 1.0 {
        let inv = T::lit(1.0 / n);
        grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v *= inv));
    }
    let loss = LossBreakdown::new(lc / n, lr / n, cfg.lambda);
    if !loss.combined.is_finite() || !grads.is_finite() {
        return Err(EncoderError::NonFiniteLoss);
    }
    let mut next = params.clone();
    let mut next_state = state.clone();
    next_state.update(&mut next, &grads, cfg.learning_rate);
    if !next.is_finite() {
        return Err(EncoderError::NonFiniteLoss);
    }
    Ok((next, next_state, loss))
}
