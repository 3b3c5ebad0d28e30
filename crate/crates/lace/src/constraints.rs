//! Differentiable aesthetic losses over box geometry — local alignment,
//! global alignment against a ground-truth coincidence mask, and pairwise
//! overlap — together with the time-dependent weight that switches the
//! constraints on toward the end of the reverse process.
//!
//! All losses take an `L x 4` geometry matrix (cx, cy, w, h per row) plus the
//! number of real rows, and return the scalar value together with its
//! analytic gradient with respect to every real row's geometry. Gradients are
//! hand-derived (the losses are piecewise compositions of linear maps, |.|,
//! min, IoU and exp) and verified against central finite differences in the
//! test suite.

use crate::error::{Error, Result};
use crate::layout::EdgeKind;
use ndarray::Array2;

/// Scalar loss plus its gradient with respect to the geometry block. Rows of
/// padding elements are always zero.
#[derive(Debug, Clone)]
pub struct ConstraintReport {
    pub value: f64,
    pub grad: Array2<f64>,
}

impl ConstraintReport {
    fn zero(rows: usize) -> Self {
        ConstraintReport { value: 0.0, grad: Array2::zeros((rows, 4)) }
    }
}

/// Barrier transform applied to alignment residuals.
fn barrier(x: f64) -> f64 {
    -(1.0 - x).ln()
}

const BARRIER_CLAMP: f64 = 1.0 - 1e-8;

/// Derivative of an edge coordinate with respect to (cx, cy, w, h).
fn edge_jacobian(kind: EdgeKind) -> [f64; 4] {
    match kind {
        EdgeKind::Left => [1.0, 0.0, -0.5, 0.0],
        EdgeKind::XCenter => [1.0, 0.0, 0.0, 0.0],
        EdgeKind::Right => [1.0, 0.0, 0.5, 0.0],
        EdgeKind::Top => [0.0, 1.0, 0.0, -0.5],
        EdgeKind::YCenter => [0.0, 1.0, 0.0, 0.0],
        EdgeKind::Bottom => [0.0, 1.0, 0.0, 0.5],
    }
}

/// Per-row edge coordinates in canonical order.
fn edge_rows(boxes: &Array2<f64>, n: usize) -> Vec<[f64; 6]> {
    (0..n)
        .map(|i| {
            let (cx, cy, w, h) = (boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]], boxes[[i, 3]]);
            [cx - w / 2.0, cx, cx + w / 2.0, cy - h / 2.0, cy, cy + h / 2.0]
        })
        .collect()
}

fn add_edge_grad(grad: &mut Array2<f64>, row: usize, kind: EdgeKind, coeff: f64) {
    let jac = edge_jacobian(kind);
    for (c, j) in jac.iter().enumerate() {
        grad[[row, c]] += coeff * j;
    }
}

/// Local alignment loss: each real element pays a barrier on its smallest
/// edge-coordinate gap to any other real element, minimized over the six edge
/// types. Ties select the first type in canonical order (then the lowest
/// partner index), which fixes the subgradient deterministically.
pub fn local_alignment_loss(boxes: &Array2<f64>, n_real: usize) -> ConstraintReport {
    let l = boxes.nrows();
    assert!(n_real <= l, "n_real {} exceeds row count {}", n_real, l);
    let mut report = ConstraintReport::zero(l);
    if n_real < 2 {
        return report;
    }
    let edges = edge_rows(boxes, n_real);
    for i in 0..n_real {
        let mut best: Option<(EdgeKind, usize, f64)> = None;
        for kind in EdgeKind::ALL {
            let k = kind.index();
            for j in 0..n_real {
                if j == i {
                    continue;
                }
                let d = (edges[i][k] - edges[j][k]).abs();
                if best.map_or(true, |(_, _, bd)| d < bd) {
                    best = Some((kind, j, d));
                }
            }
        }
        let (kind, j, d) = best.expect("n_real >= 2 guarantees a partner");
        let clamped = d.clamp(0.0, BARRIER_CLAMP);
        report.value += barrier(clamped);
        if d < BARRIER_CLAMP {
            // d(barrier)/d(gap) = 1/(1-gap); the gap is |e_i - e_j| on the
            // selected branch, so the sign routes the gradient to both rows.
            let k = kind.index();
            let s = (edges[i][k] - edges[j][k]).signum_or_zero();
            if s != 0.0 {
                let coeff = s / (1.0 - clamped);
                add_edge_grad(&mut report.grad, i, kind, coeff);
                add_edge_grad(&mut report.grad, j, kind, -coeff);
            }
        }
    }
    report
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Which edge coordinates coincide between which pairs of real elements: six
/// symmetric boolean matrices with zero diagonals, one per edge type. Rows
/// and columns of padding elements stay false.
#[derive(Debug, Clone)]
pub struct AlignmentMask {
    masks: Vec<Array2<bool>>,
    n_real: usize,
}

impl AlignmentMask {
    /// Mask of exactly coinciding edge coordinates (used against ground
    /// truth, where aligned data agrees bit-for-bit).
    pub fn exact(boxes: &Array2<f64>, n_real: usize) -> Self {
        Self::build(boxes, n_real, 0.0)
    }

    /// Mask of edge coordinates closer than `delta` (strict), used by the
    /// post-processor to decide which near-alignments to snap.
    pub fn within(boxes: &Array2<f64>, n_real: usize, delta: f64) -> Self {
        Self::build(boxes, n_real, delta)
    }

    fn build(boxes: &Array2<f64>, n_real: usize, delta: f64) -> Self {
        let l = boxes.nrows();
        assert!(n_real <= l);
        let edges = edge_rows(boxes, n_real);
        let mut masks = Vec::with_capacity(6);
        for kind in EdgeKind::ALL {
            let k = kind.index();
            let mut m = Array2::from_elem((l, l), false);
            for i in 0..n_real {
                for j in 0..n_real {
                    if i == j {
                        continue;
                    }
                    let gap = (edges[i][k] - edges[j][k]).abs();
                    let hit = if delta == 0.0 { gap == 0.0 } else { gap < delta };
                    if hit {
                        m[[i, j]] = true;
                    }
                }
            }
            masks.push(m);
        }
        AlignmentMask { masks, n_real }
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn matrix(&self, kind: EdgeKind) -> &Array2<bool> {
        &self.masks[kind.index()]
    }

    /// Number of masked ordered pairs for one edge type.
    pub fn pair_count(&self, kind: EdgeKind) -> usize {
        self.masks[kind.index()].iter().filter(|b| **b).count()
    }

    /// True if no edge type has any masked pair.
    pub fn is_empty(&self) -> bool {
        EdgeKind::ALL.iter().all(|k| self.pair_count(*k) == 0)
    }
}

/// Average masked residual: mean over the six edge types of the normalized
/// sum of |gap| over masked ordered pairs (types with an empty mask
/// contribute zero). Returns the score and its gradient with respect to the
/// geometry matrix.
pub fn masked_alignment_score(boxes: &Array2<f64>, mask: &AlignmentMask) -> (f64, Array2<f64>) {
    let l = boxes.nrows();
    let n = mask.n_real();
    let edges = edge_rows(boxes, n);
    let mut score = 0.0;
    let mut grad = Array2::zeros((l, 4));
    for kind in EdgeKind::ALL {
        let count = mask.pair_count(kind) as f64;
        if count == 0.0 {
            continue;
        }
        let k = kind.index();
        let m = mask.matrix(kind);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if !m[[i, j]] {
                    continue;
                }
                let diff = edges[i][k] - edges[j][k];
                total += diff.abs();
                let s = diff.signum_or_zero();
                if s != 0.0 {
                    let coeff = s / (6.0 * count);
                    add_edge_grad(&mut grad, i, kind, coeff);
                    add_edge_grad(&mut grad, j, kind, -coeff);
                }
            }
        }
        score += total / (6.0 * count);
    }
    (score, grad)
}

/// Barrier over the average masked residual for an arbitrary alignment mask;
/// the post-processor calls this with a mask inferred from near-alignments.
pub fn masked_global_alignment_loss(boxes: &Array2<f64>, mask: &AlignmentMask) -> ConstraintReport {
    let (s, ds) = masked_alignment_score(boxes, mask);
    let clamped = s.clamp(0.0, BARRIER_CLAMP);
    let value = barrier(clamped);
    let grad =
        if s < BARRIER_CLAMP { ds * (1.0 / (1.0 - clamped)) } else { Array2::zeros(boxes.dim()) };
    ConstraintReport { value, grad }
}

/// Global alignment loss: barrier over the average masked residual of the
/// prediction, with the mask taken from exactly coinciding coordinates of the
/// ground truth.
pub fn global_alignment_loss(pred_boxes: &Array2<f64>, true_boxes: &Array2<f64>, n_real: usize) -> ConstraintReport {
    assert_eq!(pred_boxes.dim(), true_boxes.dim(), "geometry shapes must match");
    let mask = AlignmentMask::exact(true_boxes, n_real);
    masked_global_alignment_loss(pred_boxes, &mask)
}

/// Pairwise overlap loss: mean over ordered real pairs of IoU plus a
/// center-distance kernel gated on nonzero intersection. Negative widths and
/// heights act as zero; a pair of fully degenerate boxes contributes zero
/// rather than dividing by a zero union.
pub fn overlap_loss(boxes: &Array2<f64>, n_real: usize) -> ConstraintReport {
    let l = boxes.nrows();
    assert!(n_real <= l);
    let mut report = ConstraintReport::zero(l);
    if n_real < 2 {
        return report;
    }
    let pairs = (n_real * (n_real - 1)) as f64;
    let mut total = 0.0;
    // Iterate unordered pairs; both orders contribute identical terms.
    for i in 0..n_real {
        for j in (i + 1)..n_real {
            let (term, g) = overlap_pair(boxes, i, j);
            total += 2.0 * term;
            for (row, col, v) in g {
                report.grad[[row, col]] += 2.0 * v / pairs;
            }
        }
    }
    report.value = total / pairs;
    report
}

/// IoU + gated distance kernel for one pair, with sparse gradient entries
/// (row, coord, value).
fn overlap_pair(boxes: &Array2<f64>, i: usize, j: usize) -> (f64, Vec<(usize, usize, f64)>) {
    let get = |r: usize| (boxes[[r, 0]], boxes[[r, 1]], boxes[[r, 2]], boxes[[r, 3]]);
    let (cxi, cyi, wi, hi) = get(i);
    let (cxj, cyj, wj, hj) = get(j);
    let wi_p = wi.max(0.0);
    let hi_p = hi.max(0.0);
    let wj_p = wj.max(0.0);
    let hj_p = hj.max(0.0);
    // Active clamp gates: gradient flows through w only when w > 0.
    let gwi = if wi > 0.0 { 1.0 } else { 0.0 };
    let ghi = if hi > 0.0 { 1.0 } else { 0.0 };
    let gwj = if wj > 0.0 { 1.0 } else { 0.0 };
    let ghj = if hj > 0.0 { 1.0 } else { 0.0 };

    let (li, ri) = (cxi - wi_p / 2.0, cxi + wi_p / 2.0);
    let (ti, bi) = (cyi - hi_p / 2.0, cyi + hi_p / 2.0);
    let (lj, rj) = (cxj - wj_p / 2.0, cxj + wj_p / 2.0);
    let (tj, bj) = (cyj - hj_p / 2.0, cyj + hj_p / 2.0);

    let xi_raw = ri.min(rj) - li.max(lj);
    let yi_raw = bi.min(bj) - ti.max(tj);
    let inter_w = xi_raw.max(0.0);
    let inter_h = yi_raw.max(0.0);
    let inter = inter_w * inter_h;
    let area_i = wi_p * hi_p;
    let area_j = wj_p * hj_p;
    let union = area_i + area_j - inter;

    let mut grads: Vec<(usize, usize, f64)> = Vec::new();
    if union <= 0.0 {
        // Both boxes degenerate: no overlap, no distance term.
        return (0.0, grads);
    }
    let o = inter / union;

    let mut term = o;
    // d(term)/d(inter) and d(term)/d(area): from O = I/U, U = Ai + Aj - I.
    let do_dinter = (1.0 + o) / union;
    let do_darea = -o / union;

    if inter > 0.0 {
        // Intersection-width partials: min/max pick one side each.
        // x direction: d(inter_w)/d(edge).
        let (r_row, r_is_i) = if ri <= rj { (i, true) } else { (j, false) };
        let (l_row, l_is_i) = if li >= lj { (i, true) } else { (j, false) };
        let (t_row, t_is_i) = if ti >= tj { (i, true) } else { (j, false) };
        let (b_row, b_is_i) = if bi <= bj { (i, true) } else { (j, false) };

        // d(inter_w) = d(min(ri,rj)) - d(max(li,lj)): +1 on the active right
        // edge, -1 on the active left edge.
        // Right edge: edge = cx + w'/2.
        {
            let gate = if r_is_i { gwi } else { gwj };
            let c = inter_h * do_dinter;
            grads.push((r_row, 0, c));
            grads.push((r_row, 2, c * 0.5 * gate));
        }
        // Left edge: contributes with -1; edge = cx - w'/2.
        {
            let gate = if l_is_i { gwi } else { gwj };
            let c = -inter_h * do_dinter;
            grads.push((l_row, 0, c));
            grads.push((l_row, 2, c * -0.5 * gate));
        }
        // Bottom edge (y max side): edge = cy + h'/2, +1.
        {
            let gate = if b_is_i { ghi } else { ghj };
            let c = inter_w * do_dinter;
            grads.push((b_row, 1, c));
            grads.push((b_row, 3, c * 0.5 * gate));
        }
        // Top edge: edge = cy - h'/2, -1.
        {
            let gate = if t_is_i { ghi } else { ghj };
            let c = -inter_w * do_dinter;
            grads.push((t_row, 1, c));
            grads.push((t_row, 3, c * -0.5 * gate));
        }

        // Area partials: dAi/dwi = hi', dAi/dhi = wi'.
        grads.push((i, 2, do_darea * hi_p * gwi));
        grads.push((i, 3, do_darea * wi_p * ghi));
        grads.push((j, 2, do_darea * hj_p * gwj));
        grads.push((j, 3, do_darea * wj_p * ghj));

        // Distance kernel, gated on nonzero intersection (gate treated as
        // constant for the gradient).
        let dx = cxi - cxj;
        let dy = cyi - cyj;
        let dist = (dx * dx + dy * dy).sqrt();
        let kernel = (-dist).exp();
        term += kernel;
        if dist > 0.0 {
            let c = -kernel / dist;
            grads.push((i, 0, c * dx));
            grads.push((i, 1, c * dy));
            grads.push((j, 0, -c * dx));
            grads.push((j, 1, -c * dy));
        }
    } else {
        // No intersection: O = 0 and the kernel is gated off; IoU gradient is
        // zero on the clamped branch.
        return (0.0, grads);
    }

    (term, grads)
}

/// Orientation of the constraint-weight curve over timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOrientation {
    /// Weight near 1 at small t, decaying to 0 at t = T: constraints act once
    /// the sample has mostly formed. Default.
    SmallTActive,
    /// Mirror image: weight grows with t. Kept selectable for ablation.
    LargeTActive,
}

/// Precomputed constraint weights for every timestep 0..=T.
#[derive(Debug, Clone)]
pub struct ConstraintWeightSchedule {
    pub beta_w: f64,
    pub t_total: usize,
    pub orientation: WeightOrientation,
    weights: Vec<f64>,
}

impl ConstraintWeightSchedule {
    pub fn new(beta_w: f64, t_total: usize, orientation: WeightOrientation) -> Result<Self> {
        if !(beta_w > 0.0 && beta_w < 1.0) {
            return Err(Error::Config(format!("beta_w {} outside (0,1)", beta_w)));
        }
        if t_total == 0 {
            return Err(Error::Config("weight schedule needs T >= 1".into()));
        }
        let weights = (0..=t_total)
            .map(|t| {
                let expo = match orientation {
                    WeightOrientation::SmallTActive => (t_total - t) as f64,
                    WeightOrientation::LargeTActive => t as f64,
                };
                1.0 - (1.0 - beta_w).powf(expo)
            })
            .collect();
        Ok(ConstraintWeightSchedule { beta_w, t_total, orientation, weights })
    }

    /// Weight at timestep t (0..=T).
    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t]
    }

    /// Largest timestep whose weight still reaches `min_weight`; None if no
    /// timestep does. Under the default orientation this is where a
    /// refinement pass starts its partial reverse walk.
    pub fn threshold_step(&self, min_weight: f64) -> Option<usize> {
        (0..=self.t_total).rev().find(|&t| self.weights[t] >= min_weight)
    }
}

/// Convenience lookup matching the schedule's `weight`.
pub fn constraint_weight(t: usize, schedule: &ConstraintWeightSchedule) -> f64 {
    schedule.weight(t)
}
