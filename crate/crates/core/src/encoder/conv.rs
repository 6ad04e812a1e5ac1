//! Same-size convolution stack evaluated on arbitrary pixel subsets.
//!
//! Activations are dense `H x W x C` buffers (channel-last). Each layer is
//! evaluated only at the output positions a caller needs; the positions a layer
//! reads are the previous layer's set dilated by the kernel radius, so every
//! value a layer touches has been computed (or is zero padding).

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{ConvLayer, EncoderParams};
use crate::imgio::Image;
use crate::real::Real;

const LEAKY_SLOPE: f64 = 0.01;
const CHUNK_ROWS: usize = 2048;

#[inline]
pub(crate) fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

#[inline]
fn leaky_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::lit(LEAKY_SLOPE)
    }
}

/// Weights reordered to `out x (ky, kx, in)` so that rows of the im2col matrix
/// (which copy contiguous channel runs) line up with them.
pub(crate) fn gemm_weights<T: Real>(layer: &ConvLayer<T>) -> Vec<T> {
    let (o_n, i_n, k) = (layer.out_ch, layer.in_ch, layer.kernel);
    let mut wm = vec![T::zero(); o_n * k * k * i_n];
    for o in 0..o_n {
        for i in 0..i_n {
            for ky in 0..k {
                for kx in 0..k {
                    wm[o * k * k * i_n + (ky * k + kx) * i_n + i] = layer.weight[((o * i_n + i) * k + ky) * k + kx];
                }
            }
        }
    }
    wm
}

fn scatter_weight_grad<T: Real>(dwm: &[T], layer: &mut ConvLayer<T>) {
    let (o_n, i_n, k) = (layer.out_ch, layer.in_ch, layer.kernel);
    for o in 0..o_n {
        for i in 0..i_n {
            for ky in 0..k {
                for kx in 0..k {
                    layer.weight[((o * i_n + i) * k + ky) * k + kx] += dwm[o * k * k * i_n + (ky * k + kx) * i_n + i];
                }
            }
        }
    }
}

fn im2col<T: Real>(input: &[T], (h, w, c): (usize, usize, usize), k: usize, pixels: &[usize], cols: &mut [T]) {
    let r = (k / 2) as isize;
    let kk = k * k * c;
    for (row, &p) in pixels.iter().enumerate() {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let dst = &mut cols[row * kk..(row + 1) * kk];
        for ky in 0..k {
            let yy = y + ky as isize - r;
            for kx in 0..k {
                let xx = x + kx as isize - r;
                let seg = &mut dst[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    let at = (yy as usize * w + xx as usize) * c;
                    seg.copy_from_slice(&input[at..at + c]);
                } else {
                    seg.fill(T::zero());
                }
            }
        }
    }
}

fn col2im_add<T: Real>(dcols: &[T], (h, w, c): (usize, usize, usize), k: usize, pixels: &[usize], dinput: &mut [T]) {
    let r = (k / 2) as isize;
    let kk = k * k * c;
    for (row, &p) in pixels.iter().enumerate() {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let src = &dcols[row * kk..(row + 1) * kk];
        for ky in 0..k {
            let yy = y + ky as isize - r;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for kx in 0..k {
                let xx = x + kx as isize - r;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let at = (yy as usize * w + xx as usize) * c;
                for (d, &s) in dinput[at..at + c].iter_mut().zip(&src[(ky * k + kx) * c..(ky * k + kx + 1) * c]) {
                    *d += s;
                }
            }
        }
    }
}

fn view<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("gemm operand shape")
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("gemm operand shape")
}

/// Pre-activations (`pixels.len() x out`) of one layer at `pixels`.
fn layer_pre<T: Real>(layer: &ConvLayer<T>, wm: &[T], input: &[T], h: usize, w: usize, pixels: &[usize]) -> Vec<T> {
    let (c, k, out) = (layer.in_ch, layer.kernel, layer.out_ch);
    let kk = k * k * c;
    let mut pre = vec![T::zero(); pixels.len() * out];
    let mut cols = vec![T::zero(); CHUNK_ROWS.min(pixels.len()) * kk];
    let wmv = view(wm, out, kk);
    for (chunk_idx, chunk) in pixels.chunks(CHUNK_ROWS).enumerate() {
        let n = chunk.len();
        im2col(input, (h, w, c), k, chunk, &mut cols[..n * kk]);
        let dst = &mut pre[chunk_idx * CHUNK_ROWS * out..][..n * out];
        for row in dst.chunks_exact_mut(out) {
            row.copy_from_slice(&layer.bias);
        }
        general_mat_mul(T::one(), &view(&cols[..n * kk], n, kk), &wmv.t(), T::one(), &mut view_mut(dst, n, out));
    }
    pre
}

fn image_as<T: Real>(img: &Image) -> Vec<T> {
    img.data().iter().map(|&v| T::lit(f64::from(v))).collect()
}

/// Dense forward pass over every pixel; returns the `H x W x d` output buffer.
pub(crate) fn forward_dense<T: Real>(params: &EncoderParams<T>, img: &Image) -> Vec<T> {
    let (h, w) = (img.height(), img.width());
    let all: Vec<usize> = (0..h * w).collect();
    let mut act = image_as::<T>(img);
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let wm = gemm_weights(layer);
        let mut pre = layer_pre(layer, &wm, &act, h, w, &all);
        if l != last {
            pre.iter_mut().for_each(|v| *v = leaky(*v));
        }
        act = pre;
    }
    act
}

/// Grow a pixel set by a square of radius `r`, clipped to the image.
fn dilate(pixels: &[usize], h: usize, w: usize, r: usize) -> Vec<usize> {
    let mut mark = vec![false; h * w];
    for &p in pixels {
        let (y, x) = (p / w, p % w);
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                mark[yy * w + xx] = true;
            }
        }
    }
    mark.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Everything the backward pass needs from a sparse forward pass.
pub(crate) struct Tape<T> {
    h: usize,
    w: usize,
    inputs: Vec<Vec<T>>,
    pixels: Vec<Vec<usize>>,
    pres: Vec<Vec<T>>,
    /// Dense `H x W x d` output; only the requested target pixels are meaningful.
    pub output: Vec<T>,
}

/// Forward pass restricted to what the outputs at `targets` depend on.
pub(crate) fn forward_tape<T: Real>(params: &EncoderParams<T>, img: &Image, targets: &[usize]) -> Tape<T> {
    let (h, w) = (img.height(), img.width());
    let n_layers = params.layers.len();

    let mut sets = vec![Vec::new(); n_layers];
    let mut needed: Vec<usize> = targets.to_vec();
    needed.sort_unstable();
    needed.dedup();
    for l in (0..n_layers).rev() {
        let next = dilate(&needed, h, w, params.layers[l].kernel / 2);
        sets[l] = needed;
        needed = next;
    }

    let mut inputs = Vec::with_capacity(n_layers);
    let mut pres = Vec::with_capacity(n_layers);
    let mut act = image_as::<T>(img);
    for (l, layer) in params.layers.iter().enumerate() {
        let wm = gemm_weights(layer);
        let pre = layer_pre(layer, &wm, &act, h, w, &sets[l]);
        let mut out = vec![T::zero(); h * w * layer.out_ch];
        let linear = l + 1 == n_layers;
        for (row, &p) in pre.chunks_exact(layer.out_ch).zip(&sets[l]) {
            let dst = &mut out[p * layer.out_ch..(p + 1) * layer.out_ch];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = if linear { v } else { leaky(v) };
            }
        }
        inputs.push(std::mem::replace(&mut act, out));
        pres.push(pre);
    }
    Tape { h, w, inputs, pixels: sets, pres, output: act }
}

/// Reverse-mode pass through the conv stack. `dout` is the dense loss gradient
/// with respect to `tape.output`; conv gradients are accumulated into `grads`.
pub(crate) fn backward<T: Real>(params: &EncoderParams<T>, tape: &Tape<T>, dout: &[T], grads: &mut EncoderParams<T>) {
    let (h, w) = (tape.h, tape.w);
    let n_layers = params.layers.len();
    let mut dact = dout.to_vec();
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        let (c, k, out) = (layer.in_ch, layer.kernel, layer.out_ch);
        let kk = k * k * c;
        let pixels = &tape.pixels[l];
        let pre = &tape.pres[l];
        let linear = l + 1 == n_layers;

        let mut dpre = vec![T::zero(); pixels.len() * out];
        for ((row, &p), pre_row) in dpre.chunks_exact_mut(out).zip(pixels).zip(pre.chunks_exact(out)) {
            for ((d, &g), &z) in row.iter_mut().zip(&dact[p * out..(p + 1) * out]).zip(pre_row) {
                *d = if linear { g } else { g * leaky_grad(z) };
            }
        }

        let grad_layer = &mut grads.layers[l];
        for row in dpre.chunks_exact(out) {
            for (b, &g) in grad_layer.bias.iter_mut().zip(row) {
                *b += g;
            }
        }

        let wm = gemm_weights(layer);
        let mut dwm = vec![T::zero(); out * kk];
        let mut din = if l > 0 { vec![T::zero(); h * w * c] } else { Vec::new() };
        let mut cols = vec![T::zero(); CHUNK_ROWS.min(pixels.len()) * kk];
        let mut dcols = if l > 0 { cols.clone() } else { Vec::new() };
        for (chunk_idx, chunk) in pixels.chunks(CHUNK_ROWS).enumerate() {
            let n = chunk.len();
            let dchunk = view(&dpre[chunk_idx * CHUNK_ROWS * out..][..n * out], n, out);
            im2col(&tape.inputs[l], (h, w, c), k, chunk, &mut cols[..n * kk]);
            general_mat_mul(T::one(), &dchunk.t(), &view(&cols[..n * kk], n, kk), T::one(), &mut view_mut(&mut dwm, out, kk));
            if l > 0 {
                let dst = &mut dcols[..n * kk];
                general_mat_mul(T::one(), &dchunk, &view(&wm, out, kk), T::zero(), &mut view_mut(dst, n, kk));
                col2im_add(dst, (h, w, c), k, chunk, &mut din);
            }
        }
        scatter_weight_grad(&dwm, grad_layer);
        dact = din;
    }
}
