//! Supervision losses over logit grids, each returning its gradient with
//! respect to the logits.

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Same layout as the logit grid.
    pub grad: Vec<f64>,
}

/// Which classes contribute a Lovász term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LovaszClasses {
    /// Classes that occur in the ground truth.
    #[default]
    Present,
    /// Classes that occur in the ground truth or in the argmax prediction.
    PresentOrPredicted,
    All,
}

fn check_pair<'a>(pred: &'a OccupancyGrid, gt: &'a OccupancyGrid) -> Result<(&'a [f64], &'a [u16])> {
    if pred.spec() != gt.spec() {
        return Err(Error::invalid("prediction and ground-truth grids have different specs"));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::invalid(format!(
            "prediction has {} classes, ground truth {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    Ok((pred.logits()?, gt.labels()?))
}

/// Numerically stable softmax of one voxel's logits into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax_grid(logits: &[f64], num_classes: usize) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for (z, o) in logits.chunks_exact(num_classes).zip(p.chunks_exact_mut(num_classes)) {
        softmax_into(z, o);
    }
    p
}

/// Mean over voxels of `-log softmax(z)[label]`.
pub fn cross_entropy(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<LossOutput> {
    let (logits, labels) = check_pair(pred, gt)?;
    let c = pred.num_classes();
    let n = labels.len();
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((z, g), &label) in logits.chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - z[label as usize];
        for (k, (gk, zk)) in g.iter_mut().zip(z).enumerate() {
            let p = (zk - lse).exp();
            *gk = (p - if k == label as usize { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok(LossOutput {
        value: total * inv_n,
        grad,
    })
}

/// Gradient of the Lovász extension of the Jaccard loss at a descending-sorted
/// error vector, given the matching foreground indicators.
pub fn lovasz_jaccard_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = if union > 0.0 { 1.0 - intersection / union } else { 0.0 };
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász-softmax: mean over the selected classes of the Lovász extension of
/// the Jaccard loss applied to per-voxel errors `|1{gt = c} - p_c|`.
/// Sorting ties are broken by ascending voxel index.
pub fn lovasz_softmax(pred: &OccupancyGrid, gt: &OccupancyGrid, classes: LovaszClasses) -> Result<LossOutput> {
    let (logits, labels) = check_pair(pred, gt)?;
    let c = pred.num_classes();
    let n = labels.len();
    let probs = softmax_grid(logits, c);

    let mut considered = vec![false; c];
    match classes {
        LovaszClasses::Present => labels.iter().for_each(|&l| considered[l as usize] = true),
        LovaszClasses::PresentOrPredicted => {
            labels.iter().for_each(|&l| considered[l as usize] = true);
            pred.to_labels().iter().for_each(|&l| considered[l as usize] = true);
        }
        LovaszClasses::All => considered.iter_mut().for_each(|v| *v = true),
    }
    let k = considered.iter().filter(|&&v| v).count();
    let mut d_probs = vec![0.0; probs.len()];
    if k == 0 || n == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grad: d_probs,
        });
    }
    let inv_k = 1.0 / k as f64;

    let mut total = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = vec![0.0; n];
    for class in (0..c).filter(|&cl| considered[cl]) {
        for i in 0..n {
            let fg = labels[i] as usize == class;
            errors[i] = ((fg as u8 as f64) - probs[i * c + class]).abs();
        }
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
        let fg_sorted: Vec<bool> = order.iter().map(|&i| labels[i] as usize == class).collect();
        let g = lovasz_jaccard_grad(&fg_sorted);
        for (rank, &i) in order.iter().enumerate() {
            total += errors[i] * g[rank];
            let sign = if fg_sorted[rank] { -1.0 } else { 1.0 };
            d_probs[i * c + class] += sign * g[rank] * inv_k;
        }
    }

    // Softmax Jacobian: dz = p ⊙ (dp - <p, dp>).
    let mut grad = vec![0.0; probs.len()];
    for ((p, dp), g) in probs
        .chunks_exact(c)
        .zip(d_probs.chunks_exact(c))
        .zip(grad.chunks_exact_mut(c))
    {
        let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((gi, pi), dpi) in g.iter_mut().zip(p).zip(dp) {
            *gi = pi * (dpi - dot);
        }
    }
    Ok(LossOutput {
        value: total * inv_k,
        grad,
    })
}
