//! Reference implementations used as test oracles. Deliberately naive: direct
//! loops, no shared code with the library beyond the public data types.

#![allow(dead_code)]

use cuts::encoder::{ArchSpec, EncoderParams};
use cuts::imgio::{Image, LabelMap};
use cuts::mining::PairSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, 1, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Distinct anchors, each with 1..=3 positives anywhere in the image.
pub fn random_pairs(h: usize, w: usize, anchors: usize, seed: u64) -> PairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    while chosen.len() < anchors {
        let a = (rng.random_range(0..h), rng.random_range(0..w));
        if !chosen.contains(&a) {
            chosen.push(a);
        }
    }
    let positives = chosen
        .iter()
        .map(|_| (0..rng.random_range(1..=3)).map(|_| (rng.random_range(0..h), rng.random_range(0..w))).collect())
        .collect();
    PairSet { anchors: chosen, positives }
}

pub fn small_arch() -> ArchSpec {
    ArchSpec {
        num_layers: 4,
        filter_size: 5,
        channel_widths: vec![3, 4, 5, 6],
        embed_dim: 6,
        recon_patch: 5,
        input_channels: 1,
    }
}

/// Direct zero-padded cross-correlation stack. Returns the `h*w*d` field and
/// the sign of every hidden pre-activation.
pub fn naive_forward(p: &EncoderParams<f64>, img: &Image) -> (Vec<f64>, Vec<bool>) {
    let (h, w) = (img.height(), img.width());
    let mut act: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let mut signs = Vec::new();
    let n = p.layers.len();
    for (li, layer) in p.layers.iter().enumerate() {
        let (ci, co, k) = (layer.in_ch, layer.out_ch, layer.kernel);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w * co];
        for y in 0..h {
            for x in 0..w {
                for o in 0..co {
                    let mut s = layer.bias[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = y as isize + ky as isize - r;
                                let xx = x as isize + kx as isize - r;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let wv = layer.weight[((o * ci + i) * k + ky) * k + kx];
                                s += wv * act[(yy as usize * w + xx as usize) * ci + i];
                            }
                        }
                    }
                    if li + 1 < n {
                        signs.push(s > 0.0);
                        if s < 0.0 {
                            s *= 0.01;
                        }
                    }
                    out[(y * w + x) * co + o] = s;
                }
            }
        }
        act = out;
    }
    (act, signs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `-log(sum_pos exp(s/tau) / sum_neg exp(s/tau))` averaged over anchors;
/// negatives of an anchor are the positives of every other anchor.
pub fn naive_contrastive(z: &[f64], w: usize, d: usize, pairs: &PairSet, tau: f64) -> f64 {
    let vec_at = |(r, c): (usize, usize)| &z[(r * w + c) * d..(r * w + c + 1) * d];
    let mut total = 0.0;
    for (k, &a) in pairs.anchors.iter().enumerate() {
        let za = vec_at(a);
        let pos: f64 = pairs.positives[k].iter().map(|&p| (cosine(za, vec_at(p)) / tau).exp()).sum();
        let mut neg = 0.0;
        for (j, list) in pairs.positives.iter().enumerate() {
            if j != k {
                neg += list.iter().map(|&p| (cosine(za, vec_at(p)) / tau).exp()).sum::<f64>();
            }
        }
        total += -(pos / neg).ln();
    }
    total / pairs.anchors.len() as f64
}

/// Element-mean squared patch error averaged over anchors.
pub fn naive_reconstruction(p: &EncoderParams<f64>, z: &[f64], img: &Image, pairs: &PairSet) -> f64 {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let d = p.arch.embed_dim;
    let ps = p.arch.recon_patch;
    let r = (ps / 2) as isize;
    let mut total = 0.0;
    for &(ay, ax) in &pairs.anchors {
        let za = &z[(ay * w + ax) * d..(ay * w + ax + 1) * d];
        let mut se = 0.0;
        for dy in 0..ps {
            for dx in 0..ps {
                for ch in 0..c {
                    let y = ay as isize + dy as isize - r;
                    let x = ax as isize + dx as isize - r;
                    let target = if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        0.0
                    } else {
                        f64::from(img.get(y as usize, x as usize, ch))
                    };
                    let row = (dy * ps + dx) * c + ch;
                    let mut pred = p.recon_bias[row];
                    for j in 0..d {
                        pred += p.recon_weight[row * d + j] * za[j];
                    }
                    se += (pred - target) * (pred - target);
                }
            }
        }
        total += se / (ps * ps * c) as f64;
    }
    total / pairs.anchors.len() as f64
}

pub fn naive_combined(p: &EncoderParams<f64>, img: &Image, pairs: &PairSet, lambda: f64, tau: f64) -> (f64, Vec<bool>) {
    let (z, signs) = naive_forward(p, img);
    let d = p.arch.embed_dim;
    let lc = naive_contrastive(&z, img.width(), d, pairs, tau);
    let lr = naive_reconstruction(p, &z, img, pairs);
    (lambda * lc + (1.0 - lambda) * lr, signs)
}

pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst: (usize, usize),
}

/// Compare `analytic` with central differences of [`naive_combined`] on the
/// entries yielded by `pick(tensor_index, tensor_len)`.
///
/// A step whose perturbation flips a leaky-ReLU sign is retried with a
/// step 100x smaller; entries that still straddle a kink are skipped.
pub fn check_gradient(
    params: &EncoderParams<f64>,
    analytic: &EncoderParams<f64>,
    img: &Image,
    pairs: &PairSet,
    lambda: f64,
    tau: f64,
    step: f64,
    mut pick: impl FnMut(usize, usize) -> Vec<usize>,
) -> GradCheck {
    let (_, base_signs) = naive_combined(params, img, pairs, lambda, tau);
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = GradCheck { checked: 0, skipped_kinks: 0, max_rel_err: 0.0, worst: (0, 0) };
    let mut work = params.clone();
    for (t, &len) in lens.iter().enumerate() {
        for i in pick(t, len) {
            let original = work.tensors()[t][i];
            let mut numeric = None;
            for h in [step, step / 100.0] {
                work.tensors_mut()[t][i] = original + h;
                let (fp, sp) = naive_combined(&work, img, pairs, lambda, tau);
                work.tensors_mut()[t][i] = original - h;
                let (fm, sm) = naive_combined(&work, img, pairs, lambda, tau);
                work.tensors_mut()[t][i] = original;
                if sp == base_signs && sm == base_signs {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            let Some(n) = numeric else {
                out.skipped_kinks += 1;
                continue;
            };
            let a = analytic.tensors()[t][i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-300);
            let rel = if a == n { 0.0 } else { rel };
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = (t, i);
            }
            out.checked += 1;
        }
    }
    out
}

// ---------- metric oracles ----------

pub fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
    let na = a.iter().filter(|&&x| x).count();
    let nb = b.iter().filter(|&&x| x).count();
    if na + nb == 0 {
        return 1.0;
    }
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    2.0 * both as f64 / (na + nb) as f64
}

/// Max over both directions of the farthest nearest-neighbour distance, by
/// enumerating every pair; `None` when a side is empty.
pub fn brute_hausdorff(a: &[bool], b: &[bool], w: usize) -> Option<f64> {
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        m.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| ((i / w) as i64, (i % w) as i64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt())
}

pub fn brute_rmse(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len() as f64).sqrt()
}

pub fn brute_ergas(pred: &[f64], reference: &[f64]) -> f64 {
    let rmse = brute_rmse(pred, reference);
    let mu = reference.iter().sum::<f64>() / reference.len() as f64;
    let mu = if mu == 0.0 { 1e-12 } else { mu };
    100.0 * ((rmse / mu) * (rmse / mu)).sqrt()
}

/// Single-channel SSIM averaged over 7x7 windows clipped to the image.
pub fn brute_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for y in r.saturating_sub(3)..=(r + 3).min(h - 1) {
                for x in c.saturating_sub(3)..=(c + 3).min(w - 1) {
                    xs.push(a[y * w + x]);
                    ys.push(b[y * w + x]);
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
            let cxy = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
            let (c1, c2) = (1e-4, 9e-4);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (h * w) as f64
}

/// Best total overlap over every injection of pred labels into gt labels
/// (or gt into pred when pred has more labels).
pub fn exhaustive_best_overlap(pred: &LabelMap, gt: &LabelMap) -> u64 {
    let pl = pred.distinct();
    let gl = gt.distinct();
    let mut overlap = vec![vec![0u64; gl.len()]; pl.len()];
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        let i = pl.iter().position(|x| x == p).unwrap();
        let j = gl.iter().position(|x| x == g).unwrap();
        overlap[i][j] += 1;
    }
    let (rows, cols, m) = if pl.len() <= gl.len() {
        (pl.len(), gl.len(), overlap)
    } else {
        let t = (0..gl.len()).map(|j| (0..pl.len()).map(|i| overlap[i][j]).collect()).collect();
        (gl.len(), pl.len(), t)
    };
    fn go(row: usize, rows: usize, used: &mut Vec<bool>, m: &[Vec<u64>]) -> u64 {
        if row == rows {
            return 0;
        }
        let mut best = 0;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(m[row][c] + go(row + 1, rows, used, m));
                used[c] = false;
            }
        }
        best
    }
    go(0, rows, &mut vec![false; cols], &m)
}

pub fn overlap_total(pred: &LabelMap, gt: &LabelMap) -> u64 {
    pred.labels().iter().zip(gt.labels()).filter(|(p, g)| p == g).count() as u64
}

// ---------- condensation oracle ----------

/// Time-inhomogeneous diffusion on the raw 1-D points: build K and
/// P = D^-1 K over all points, apply X <- P X, group points whose distance is
/// under the threshold (transitive closure), and double eps after merge-free
/// steps. Returns the sequence of distinct partitions (as sorted groups) in
/// the order they appear.
pub fn scripted_condensation(xs: &[f64], eps0: f64, threshold: f64, growth: f64, max_iters: usize) -> Vec<Vec<Vec<usize>>> {
    let n = xs.len();
    let mut x = xs.to_vec();
    let mut eps = eps0;
    let groups = |x: &[f64]| -> Vec<Vec<usize>> {
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if (x[i] - x[j]).abs() < threshold && label[j] > label[i] {
                        label[j] = label[i];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut ids: Vec<usize> = label.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.iter().map(|&g| (0..n).filter(|&i| label[i] == g).collect()).collect()
    };
    let mut seq = vec![groups(&x)];
    for _ in 0..max_iters {
        if seq.last().unwrap().len() == 1 {
            break;
        }
        let mut next = vec![0.0; n];
        for i in 0..n {
            let k: Vec<f64> = (0..n).map(|j| (-(x[i] - x[j]).powi(2) / eps).exp()).collect();
            let deg: f64 = k.iter().sum();
            next[i] = (0..n).map(|j| k[j] / deg * x[j]).sum();
        }
        x = next;
        let g = groups(&x);
        if g.len() == seq.last().unwrap().len() {
            eps *= growth;
        } else {
            seq.push(g);
        }
    }
    seq
}
