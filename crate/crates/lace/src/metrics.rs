//! Evaluation metrics over decoded layouts: alignment and overlap scores,
//! optimal-matching IoU between layout pairs, and a Fréchet distance between
//! Gaussian fits of per-layout summary statistics (a lightweight stand-in
//! for a learned-feature distribution distance; it is never labeled FID).

use crate::constraints::local_alignment_loss;
use crate::error::{Error, Result};
use crate::layout::{BBox, Layout};
use ndarray::Array2;
use serde::Serialize;

/// Aggregate metric report.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub alignment: f64,
    pub overlap: f64,
    pub max_iou: f64,
    pub dist_distance: f64,
    pub n_layouts: usize,
}

fn boxes_of(layout: &Layout) -> Array2<f64> {
    let els = layout.real_elements();
    let mut boxes = Array2::zeros((els.len(), 4));
    for (i, el) in els.iter().enumerate() {
        boxes[[i, 0]] = el.bbox.cx;
        boxes[[i, 1]] = el.bbox.cy;
        boxes[[i, 2]] = el.bbox.w;
        boxes[[i, 3]] = el.bbox.h;
    }
    boxes
}

/// Plain intersection-over-union of two boxes; degenerate sizes clamp to
/// zero area, and an empty union scores 0.
pub fn pair_iou(a: &BBox, b: &BBox) -> f64 {
    let (wa, ha) = (a.w.max(0.0), a.h.max(0.0));
    let (wb, hb) = (b.w.max(0.0), b.h.max(0.0));
    let ix = ((a.cx + wa / 2.0).min(b.cx + wb / 2.0) - (a.cx - wa / 2.0).max(b.cx - wb / 2.0))
        .max(0.0);
    let iy = ((a.cy + ha / 2.0).min(b.cy + hb / 2.0) - (a.cy - ha / 2.0).max(b.cy - hb / 2.0))
        .max(0.0);
    let inter = ix * iy;
    let union = wa * ha + wb * hb - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean over layouts of (local alignment loss / element count) x 100.
pub fn alignment_metric(layouts: &[Layout]) -> f64 {
    if layouts.is_empty() {
        return 0.0;
    }
    let total: f64 = layouts
        .iter()
        .map(|l| {
            let report = local_alignment_loss(&boxes_of(l), l.n_real());
            report.value / l.n_real() as f64
        })
        .sum();
    100.0 * total / layouts.len() as f64
}

/// Mean over layouts of (sum of IoU over unordered real pairs / element
/// count) x 100.
pub fn overlap_metric(layouts: &[Layout]) -> f64 {
    if layouts.is_empty() {
        return 0.0;
    }
    let total: f64 = layouts
        .iter()
        .map(|l| {
            let els = l.real_elements();
            let mut s = 0.0;
            for i in 0..els.len() {
                for j in i + 1..els.len() {
                    s += pair_iou(&els[i].bbox, &els[j].bbox);
                }
            }
            s / l.n_real() as f64
        })
        .sum();
    100.0 * total / layouts.len() as f64
}

/// Maximizes total value over permutations of up to six items.
fn brute_force_best(values: &Array2<f64>) -> f64 {
    let n = values.nrows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::NEG_INFINITY;
    // Heap's algorithm, iterative.
    let mut c = vec![0usize; n];
    let score = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| values[[i, j]]).sum() };
    best = best.max(score(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Minimum-cost perfect assignment on a square cost matrix via shortest
/// augmenting paths (O(n^3)). Returns the column assigned to each row.
pub fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square matrix required");
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best total IoU for one category group: exhaustive for up to six items,
/// optimal assignment beyond that.
fn best_group_iou(values: &Array2<f64>) -> f64 {
    if values.nrows() <= 6 {
        brute_force_best(values)
    } else {
        let cost = values.mapv(|v| 1.0 - v);
        let assignment = hungarian_min(&cost);
        assignment.iter().enumerate().map(|(i, &j)| values[[i, j]]).sum()
    }
}

/// Mean IoU under the best within-category matching. Returns the score and a
/// flag that is true when the category multisets differ (score 0 then).
pub fn max_iou(a: &Layout, b: &Layout) -> (f64, bool) {
    let mut by_class_a: std::collections::BTreeMap<usize, Vec<&BBox>> = Default::default();
    let mut by_class_b: std::collections::BTreeMap<usize, Vec<&BBox>> = Default::default();
    for el in a.real_elements() {
        by_class_a.entry(el.label).or_default().push(&el.bbox);
    }
    for el in b.real_elements() {
        by_class_b.entry(el.label).or_default().push(&el.bbox);
    }
    if by_class_a.len() != by_class_b.len()
        || by_class_a
            .iter()
            .any(|(k, v)| by_class_b.get(k).map(|w| w.len()) != Some(v.len()))
    {
        return (0.0, true);
    }
    let mut total = 0.0;
    for (class, boxes_a) in &by_class_a {
        let boxes_b = &by_class_b[class];
        let k = boxes_a.len();
        let mut values = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                values[[i, j]] = pair_iou(boxes_a[i], boxes_b[j]);
            }
        }
        total += best_group_iou(&values);
    }
    (total / a.n_real() as f64, false)
}

/// Per-layout summary used by the distribution distance: element count,
/// mean/std of each box coordinate, and mean pairwise IoU.
pub fn layout_stats(layout: &Layout) -> Vec<f64> {
    let els = layout.real_elements();
    let n = els.len() as f64;
    let mut stats = Vec::with_capacity(10);
    stats.push(n);
    for pick in [
        |b: &BBox| b.cx,
        |b: &BBox| b.cy,
        |b: &BBox| b.w,
        |b: &BBox| b.h,
    ] {
        let vals: Vec<f64> = els.iter().map(|e| pick(&e.bbox)).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        stats.push(mean);
        stats.push(var.sqrt());
    }
    let mut iou_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..els.len() {
        for j in i + 1..els.len() {
            iou_sum += pair_iou(&els[i].bbox, &els[j].bbox);
            pairs += 1;
        }
    }
    stats.push(if pairs > 0 { iou_sum / pairs as f64 } else { 0.0 });
    stats
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the orthogonal matrix of column eigenvectors.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut vecs = Array2::eye(n);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[[k, p]];
                    let vkq = vecs[[k, q]];
                    vecs[[k, p]] = c * vkp - s * vkq;
                    vecs[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[[i, i]]).collect(), vecs)
}

/// Symmetric positive-semidefinite square root via eigendecomposition;
/// negative eigenvalues from roundoff clamp to zero.
fn sqrtm_psd(a: &Array2<f64>) -> Array2<f64> {
    let (eig, v) = symmetric_eigen(a);
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for (k, lambda) in eig.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += root * v[[i, k]] * v[[j, k]];
            }
        }
    }
    out
}

fn gaussian_fit(stats: &[Vec<f64>]) -> (Vec<f64>, Array2<f64>) {
    let n = stats.len();
    let d = stats[0].len();
    let mut mean = vec![0.0; d];
    for row in stats {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Array2::zeros((d, d));
    if n > 1 {
        for row in stats {
            for i in 0..d {
                for j in 0..d {
                    cov[[i, j]] += (row[i] - mean[i]) * (row[j] - mean[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
    }
    // Ridge keeps near-singular and single-sample fits well-conditioned; it
    // cancels between identical distributions, so zero distances survive.
    for i in 0..d {
        cov[[i, i]] += 1e-6;
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of the per-layout summary
/// statistics of two layout sets.
pub fn dist_distance(set_a: &[Layout], set_b: &[Layout]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::Data("distribution distance needs non-empty sets".into()));
    }
    let stats_a: Vec<Vec<f64>> = set_a.iter().map(layout_stats).collect();
    let stats_b: Vec<Vec<f64>> = set_b.iter().map(layout_stats).collect();
    let (mu_a, cov_a) = gaussian_fit(&stats_a);
    let (mu_b, cov_b) = gaussian_fit(&stats_b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    let root_a = sqrtm_psd(&cov_a);
    let inner = root_a.dot(&cov_b).dot(&root_a);
    let inner_sym = (&inner + &inner.t()) / 2.0;
    let (eig, _) = symmetric_eigen(&inner_sym);
    let cross_trace: f64 = eig.iter().map(|l| l.max(0.0).sqrt()).sum();
    let trace_a: f64 = (0..cov_a.nrows()).map(|i| cov_a[[i, i]]).sum();
    let trace_b: f64 = (0..cov_b.nrows()).map(|i| cov_b[[i, i]]).sum();
    let d2 = mean_term + trace_a + trace_b - 2.0 * cross_trace;
    Ok(d2.max(0.0))
}

/// Full report: alignment/overlap of the generated set, mean best-matching
/// IoU over index-paired layouts, and the distribution distance.
pub fn evaluate(generated: &[Layout], reference: &[Layout]) -> Result<EvalReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Data("evaluation needs non-empty layout sets".into()));
    }
    let pairs = generated.len().min(reference.len());
    let mean_max_iou = (0..pairs)
        .map(|i| max_iou(&generated[i], &reference[i]).0)
        .sum::<f64>()
        / pairs as f64;
    Ok(EvalReport {
        alignment: alignment_metric(generated),
        overlap: overlap_metric(generated),
        max_iou: mean_max_iou,
        dist_distance: dist_distance(generated, reference)?,
        n_layouts: generated.len(),
    })
}
