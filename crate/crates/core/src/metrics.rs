//! Segmentation and image-similarity metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgio::{BinaryMask, Image, LabelMap};
use crate::mining::ssim_from_moments;

pub const SSIM_WINDOW: usize = 7;
pub const ERGAS_MEAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("empty mask")]
    EmptyMask,
}

/// Anything scored as a grid of reals.
pub trait AsReals {
    /// `(height, width, channels)`.
    fn shape(&self) -> (usize, usize, usize);
    /// Row-major, channel-interleaved values.
    fn reals(&self) -> Vec<f64>;
}

impl AsReals for Image {
    fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }

    fn reals(&self) -> Vec<f64> {
        self.data().iter().map(|&v| f64::from(v)).collect()
    }
}

impl AsReals for LabelMap {
    fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), 1)
    }

    fn reals(&self) -> Vec<f64> {
        self.as_reals()
    }
}

fn same_shape(a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<(), MetricsError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricsError::ShapeMismatch(a, b))
    }
}

fn mask_shape(m: &BinaryMask) -> (usize, usize, usize) {
    (m.height(), m.width(), 1)
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_shape(mask_shape(a), mask_shape(b))?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Length of the image diagonal, the stand-in distance for an empty side.
pub fn diagonal(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt()
}

/// Squared distance from every pixel to the nearest set pixel of `mask`.
fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let bits = mask.bits();
    let inf = f64::INFINITY;
    // Column pass: exact vertical distances.
    let mut g = vec![inf; h * w];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if bits[r * w + c] {
                last = Some(r);
            }
            if let Some(l) = last {
                g[r * w + c] = (r - l) as f64;
            }
        }
        let mut last: Option<usize> = None;
        for r in (0..h).rev() {
            if bits[r * w + c] {
                last = Some(r);
            }
            if let Some(l) = last {
                g[r * w + c] = g[r * w + c].min((l - r) as f64);
            }
        }
    }
    // Row pass: lower envelope of parabolas.
    let mut out = vec![inf; h * w];
    let mut v = vec![0usize; w];
    let mut z = vec![0.0f64; w + 1];
    for r in 0..h {
        let f: Vec<f64> = g[r * w..(r + 1) * w].iter().map(|d| d * d).collect();
        let mut k: isize = -1;
        for q in 0..w {
            if f[q].is_infinite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                let p = v[k as usize];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for q in 0..w {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let p = v[j];
            let d = q as f64 - p as f64;
            out[r * w + q] = d * d + f[p];
        }
    }
    out
}

fn directed(from: &BinaryMask, to_edt: &[f64]) -> f64 {
    let w = from.width();
    from.foreground().map(|(r, c)| to_edt[r * w + c]).fold(0.0, f64::max).sqrt()
}

/// Symmetric Hausdorff distance between foreground pixel sets.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    same_shape(mask_shape(a), mask_shape(b))?;
    if a.count() == 0 || b.count() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(directed(a, &squared_edt(b)).max(directed(b, &squared_edt(a))))
}

/// [`hausdorff`], with the image diagonal when either mask is empty.
pub fn hausdorff_or_diagonal(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    match hausdorff(a, b) {
        Err(MetricsError::EmptyMask) => Ok(diagonal(a.height(), a.width())),
        other => other,
    }
}

fn ssim_grid(a: &[f64], b: &[f64], (h, w, ch): (usize, usize, usize)) -> f64 {
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    for r in 0..h {
        let rows = r.saturating_sub(half)..(r + half + 1).min(h);
        for c in 0..w {
            let cols = c.saturating_sub(half)..(c + half + 1).min(w);
            let n = (rows.len() * cols.len()) as f64;
            for k in 0..ch {
                let idx = || rows.clone().flat_map(|y| cols.clone().map(move |x| (y * w + x) * ch + k));
                let mu_a = idx().map(|i| a[i]).sum::<f64>() / n;
                let mu_b = idx().map(|i| b[i]).sum::<f64>() / n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in idx() {
                    let (da, db) = (a[i] - mu_a, b[i] - mu_b);
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
                total += ssim_from_moments(mu_a, mu_b, va / n, vb / n, cov / n);
            }
        }
    }
    total / (h * w * ch) as f64
}

/// Mean windowed SSIM (7x7 uniform window, shrunk at the borders).
pub fn ssim_image<A: AsReals>(a: &A, b: &A) -> Result<f64, MetricsError> {
    same_shape(a.shape(), b.shape())?;
    Ok(ssim_grid(&a.reals(), &b.reals(), a.shape()))
}

pub fn rmse<A: AsReals>(a: &A, b: &A) -> Result<f64, MetricsError> {
    same_shape(a.shape(), b.shape())?;
    let (x, y) = (a.reals(), b.reals());
    let sum: f64 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok((sum / x.len() as f64).sqrt())
}

/// Relative dimensionless global error with unit scale ratio.
pub fn ergas<A: AsReals>(pred: &A, reference: &A) -> Result<f64, MetricsError> {
    same_shape(pred.shape(), reference.shape())?;
    let ch = pred.shape().2;
    let (x, y) = (pred.reals(), reference.reals());
    let n = (x.len() / ch) as f64;
    let mut acc = 0.0;
    for k in 0..ch {
        let (mut se, mut mu) = (0.0, 0.0);
        for i in (k..x.len()).step_by(ch) {
            se += (x[i] - y[i]) * (x[i] - y[i]);
            mu += y[i];
        }
        let rmse = (se / n).sqrt();
        let mu = mu / n;
        let mu = if mu == 0.0 { ERGAS_MEAN_FLOOR } else { mu };
        acc += (rmse / mu) * (rmse / mu);
    }
    Ok(100.0 * (acc / ch as f64).sqrt())
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    debug_assert!(n <= m);
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Assignment of rows to columns maximizing total `overlap`; rows left
/// unassigned (more rows than columns) map to `None`.
pub fn max_overlap_assignment(overlap: &[Vec<u64>]) -> Vec<Option<usize>> {
    let rows = overlap.len();
    let cols = overlap.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        let cost: Vec<Vec<i64>> = overlap.iter().map(|r| r.iter().map(|&o| -(o as i64)).collect()).collect();
        hungarian(&cost).into_iter().map(Some).collect()
    } else {
        let cost: Vec<Vec<i64>> = (0..cols).map(|c| (0..rows).map(|r| -(overlap[r][c] as i64)).collect()).collect();
        let mut out = vec![None; rows];
        for (c, r) in hungarian(&cost).into_iter().enumerate() {
            out[r] = Some(c);
        }
        out
    }
}

/// Relabel `pred` so its labels best overlap those of `gt`.
///
/// Pred labels without a partner get fresh ids above the largest gt label,
/// in ascending order of their original id.
pub fn permute_match(pred: &LabelMap, gt: &LabelMap) -> Result<LabelMap, MetricsError> {
    same_shape(pred.shape(), gt.shape())?;
    let pl = pred.distinct();
    let gl = gt.distinct();
    let p_index: std::collections::HashMap<u32, usize> = pl.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let g_index: std::collections::HashMap<u32, usize> = gl.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut overlap = vec![vec![0u64; gl.len()]; pl.len()];
    for (p, g) in pred.labels().iter().zip(gt.labels()) {
        overlap[p_index[p]][g_index[g]] += 1;
    }
    let mut order: Vec<usize> = (0..pl.len()).collect();
    order.sort_by(|&a, &b| overlap[b].cmp(&overlap[a]).then(a.cmp(&b)));
    let sorted: Vec<Vec<u64>> = order.iter().map(|&i| overlap[i].clone()).collect();
    let mut assign = vec![None; pl.len()];
    for (slot, a) in max_overlap_assignment(&sorted).into_iter().enumerate() {
        assign[order[slot]] = a;
    }
    let mut fresh = gl.last().map_or(0, |&m| m + 1);
    let mapping: Vec<u32> = assign
        .iter()
        .map(|a| match a {
            Some(g) => gl[*g],
            None => {
                fresh += 1;
                fresh - 1
            }
        })
        .collect();
    let labels = pred.labels().iter().map(|p| mapping[p_index[p]]).collect();
    Ok(LabelMap::new(pred.height(), pred.width(), labels).expect("same shape"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: u32,
    pub dice: f64,
    pub hausdorff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub hausdorff: f64,
    pub ssim: f64,
    pub ergas: f64,
    pub rmse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<Vec<ClassScore>>,
}

/// Match labels, then average one-vs-rest dice and Hausdorff over every
/// non-zero gt class. Whole-map SSIM, ERGAS and RMSE compare label values.
///
/// A gt map with no class besides 0 is scored on its foreground (any label
/// other than 0) as a single class.
pub fn multiclass_summary(pred: &LabelMap, gt: &LabelMap) -> Result<MetricsReport, MetricsError> {
    let matched = permute_match(pred, gt)?;
    let classes: Vec<u32> = gt.distinct().into_iter().filter(|&l| l != 0).collect();
    let mut scores = Vec::with_capacity(classes.len());
    for &c in &classes {
        let (p, g) = (matched.mask_of(c), gt.mask_of(c));
        scores.push(ClassScore { label: c, dice: dice(&p, &g)?, hausdorff: hausdorff_or_diagonal(&p, &g)? });
    }
    let (mean_dice, mean_hd) = if scores.is_empty() {
        let fg = |m: &LabelMap| {
            BinaryMask::new(m.height(), m.width(), m.labels().iter().map(|&l| l != 0).collect()).expect("shape")
        };
        let (p, g) = (fg(&matched), fg(gt));
        let hd = if p.count() + g.count() == 0 { 0.0 } else { hausdorff_or_diagonal(&p, &g)? };
        (dice(&p, &g)?, hd)
    } else {
        let k = scores.len() as f64;
        (scores.iter().map(|s| s.dice).sum::<f64>() / k, scores.iter().map(|s| s.hausdorff).sum::<f64>() / k)
    };
    Ok(MetricsReport {
        dice: mean_dice,
        hausdorff: mean_hd,
        ssim: ssim_image(&matched, gt)?,
        ergas: ergas(&matched, gt)?,
        rmse: rmse(&matched, gt)?,
        per_class: Some(scores),
    })
}
