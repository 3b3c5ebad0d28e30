//! Constraint-driven refinement of generated layouts.
//!
//! The pipeline scales coordinates by the canvas aspect ratio (long side maps
//! to 1), infers which edge pairs are nearly aligned (strictly closer than a
//! threshold `delta`), freezes that mask, and runs plain gradient descent on
//! the geometry under the barrier-wrapped masked alignment loss plus an
//! optional overlap penalty. Labels and element count never change; a
//! trust-region clip bounds each coordinate's movement so the optimizer snaps
//! near-alignments without rearranging the layout.

use crate::constraints::{
    masked_global_alignment_loss, overlap_loss, AlignmentMask, ConstraintReport,
};
use crate::error::{Error, Result};
use crate::layout::Layout;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const DEFAULT_DELTA: f64 = 1.0 / 64.0;

/// Settings of the post-processing optimizer. `Default` uses the empirically
/// chosen threshold of 1/64 of the scaled canvas's long side.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    /// Strict upper bound on the scaled edge gap that counts as "nearly
    /// aligned" when the mask is inferred.
    pub delta: f64,
    pub max_iters: usize,
    /// Gradient-descent step, in scaled-coordinate units.
    pub step_size: f64,
    pub use_overlap: bool,
    /// Stop when the objective improves by less than this between iterations.
    pub tolerance: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig::with_delta(DEFAULT_DELTA)
    }
}

impl PostConfig {
    /// A config whose step size scales with the threshold, matching the
    /// default recipe (step = 0.1 delta).
    pub fn with_delta(delta: f64) -> Self {
        PostConfig {
            delta,
            max_iters: 200,
            step_size: 0.1 * delta,
            use_overlap: true,
            tolerance: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-axis scale factors mapping normalized coordinates onto a canvas whose
/// longer side has length 1: x-coordinates shrink by W/max(W,H),
/// y-coordinates by H/max(W,H).
pub fn canvas_scale(canvas: (u32, u32)) -> (f64, f64) {
    let (w, h) = (canvas.0 as f64, canvas.1 as f64);
    let long = w.max(h);
    (w / long, h / long)
}

/// Applies the aspect-ratio scaling to an L x 4 geometry matrix in
/// (cx, cy, w, h) layout.
pub fn scale_canvas_coords(boxes: &Array2<f64>, canvas: (u32, u32)) -> Array2<f64> {
    let (sx, sy) = canvas_scale(canvas);
    let mut scaled = boxes.clone();
    for mut row in scaled.rows_mut() {
        row[0] *= sx;
        row[1] *= sy;
        row[2] *= sx;
        row[3] *= sy;
    }
    scaled
}

fn geometry_matrix(layout: &Layout) -> Array2<f64> {
    let n = layout.real_elements().len();
    let mut boxes = Array2::zeros((n, 4));
    for (i, el) in layout.real_elements().iter().enumerate() {
        boxes[[i, 0]] = el.bbox.cx;
        boxes[[i, 1]] = el.bbox.cy;
        boxes[[i, 2]] = el.bbox.w;
        boxes[[i, 3]] = el.bbox.h;
    }
    boxes
}

/// Edge pairs of the layout whose scaled coordinates differ by strictly less
/// than `delta`. Layouts with fewer than two elements produce an empty mask.
pub fn infer_alignment_mask(layout: &Layout, delta: f64) -> AlignmentMask {
    let boxes = scale_canvas_coords(&geometry_matrix(layout), layout.canvas);
    AlignmentMask::within(&boxes, boxes.nrows(), delta)
}

/// Result of one post-processing run.
#[derive(Debug, Clone)]
pub struct PostOutcome {
    pub layout: Layout,
    /// Set when a non-finite gradient aborted optimization; the layout is
    /// then the unmodified input.
    pub aborted_non_finite: bool,
    /// Iterations actually executed (0 when the input is already optimal).
    pub iterations: usize,
    pub objective_before: f64,
    pub objective_after: f64,
}

fn objective(
    scaled: &Array2<f64>,
    mask: &AlignmentMask,
    use_overlap: bool,
) -> (f64, Array2<f64>) {
    let n = scaled.nrows();
    let align = masked_global_alignment_loss(scaled, mask);
    let olap = if use_overlap {
        overlap_loss(scaled, n)
    } else {
        ConstraintReport { value: 0.0, grad: Array2::zeros(scaled.dim()) }
    };
    (align.value + olap.value, align.grad + olap.grad)
}

/// Gradient descent with accept-or-halve step control on scaled geometry
/// under a frozen alignment mask. Each accepted iteration moves every
/// coordinate at most delta/4 and total movement from the start is capped at
/// 2 delta; a proposal that fails to improve halves the step, so descent is
/// monotone and the kinks of the absolute-gap score are approached
/// geometrically. Returns (geometry, aborted, iterations, objective before,
/// objective after); on a non-finite objective or gradient the input comes
/// back unchanged. Exposed at the matrix level so the abort path is directly
/// testable.
pub fn optimize_scaled_geometry(
    start: &Array2<f64>,
    mask: &AlignmentMask,
    config: &PostConfig,
) -> (Array2<f64>, bool, usize, f64, f64) {
    let per_iter_cap = config.delta / 4.0;
    let total_cap = 2.0 * config.delta;
    let (initial, mut grad) = objective(start, mask, config.use_overlap);
    if !initial.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return (start.clone(), true, 0, initial, initial);
    }
    let mut best = start.clone();
    let mut best_value = initial;
    let mut step = config.step_size;
    let mut iterations = 0;
    while iterations < config.max_iters {
        if grad.iter().all(|g| *g == 0.0) || step < 1e-3 * config.step_size {
            break;
        }
        let mut candidate = best.clone();
        for ((r, c), g) in grad.indexed_iter() {
            let delta = (-step * g).clamp(-per_iter_cap, per_iter_cap);
            let moved = (best[[r, c]] + delta - start[[r, c]]).clamp(-total_cap, total_cap);
            candidate[[r, c]] = start[[r, c]] + moved;
        }
        let (value, candidate_grad) = objective(&candidate, mask, config.use_overlap);
        if !value.is_finite() || candidate_grad.iter().any(|g| !g.is_finite()) {
            return (start.clone(), true, iterations, initial, initial);
        }
        iterations += 1;
        if value < best_value {
            let improvement = best_value - value;
            best = candidate;
            best_value = value;
            grad = candidate_grad;
            if improvement < config.tolerance {
                break;
            }
        } else {
            step *= 0.5;
        }
    }
    (best, false, iterations, initial, best_value)
}

/// Refines one layout: infers the near-alignment mask from the raw output,
/// optimizes geometry under it, clamps to the unit square, and rebuilds the
/// layout with original labels and element count.
pub fn postprocess_layout(layout: &Layout, config: &PostConfig) -> Result<PostOutcome> {
    config.validate()?;
    let mask = infer_alignment_mask(layout, config.delta);
    let (sx, sy) = canvas_scale(layout.canvas);
    let scaled = scale_canvas_coords(&geometry_matrix(layout), layout.canvas);
    let (optimized, aborted, iterations, before, after) =
        optimize_scaled_geometry(&scaled, &mask, config);

    let refined = if aborted {
        layout.clone()
    } else {
        let mut unscaled = optimized;
        for mut row in unscaled.rows_mut() {
            row[0] = (row[0] / sx).clamp(0.0, 1.0);
            row[1] = (row[1] / sy).clamp(0.0, 1.0);
            row[2] = (row[2] / sx).clamp(0.0, 1.0);
            row[3] = (row[3] / sy).clamp(0.0, 1.0);
        }
        layout.with_real_boxes(&unscaled)?
    };
    Ok(PostOutcome {
        layout: refined,
        aborted_non_finite: aborted,
        iterations,
        objective_before: before,
        objective_after: after,
    })
}
