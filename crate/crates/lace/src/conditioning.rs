//! Generation tasks expressed as binary condition masks over the layout
//! state, plus the training-time mask augmentation and the refinement
//! perturbation.
//!
//! A mask entry of `true` means "known": at every sampler step the entry is
//! overwritten with the ground-truth value, so the diffusion only has to fill
//! in the unknown entries. Padding rows are marked known for the tasks that
//! condition on per-element attributes, which makes the element count part of
//! the condition; unconditional generation leaves the count to the model.

use crate::error::{Error, Result};
use crate::layout::{Layout, LayoutSchema, StateVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// The five generation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Generate everything from noise.
    Uncond,
    /// Classes given; sizes and positions generated.
    ClassToSizePos,
    /// Classes and sizes given; positions generated.
    ClassSizeToPos,
    /// A sampled subset of elements fully given; the rest generated.
    Completion,
    /// Geometry of a perturbed layout re-denoised; classes kept.
    Refinement,
}

impl TaskKind {
    /// Command-line task tokens.
    pub fn parse_token(s: &str) -> Result<TaskKind> {
        match s {
            "uncond" => Ok(TaskKind::Uncond),
            "c" => Ok(TaskKind::ClassToSizePos),
            "csz" => Ok(TaskKind::ClassSizeToPos),
            "complete" => Ok(TaskKind::Completion),
            "refine" => Ok(TaskKind::Refinement),
            other => Err(Error::Config(format!(
                "unknown task '{}' (expected uncond|c|csz|complete|refine)",
                other
            ))),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            TaskKind::Uncond => "uncond",
            TaskKind::ClassToSizePos => "c",
            TaskKind::ClassSizeToPos => "csz",
            TaskKind::Completion => "complete",
            TaskKind::Refinement => "refine",
        }
    }
}

/// Default upper bound on the fraction of elements revealed by completion.
pub const DEFAULT_COMPLETE_FRAC_MAX: f64 = 0.2;

/// Binary known/unknown selector with the same shape as a layout state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionMask {
    pub known: Array2<bool>,
}

impl ConditionMask {
    pub fn all_unknown(schema: &LayoutSchema) -> Self {
        ConditionMask {
            known: Array2::from_elem((schema.max_elements, schema.state_dim()), false),
        }
    }

    pub fn check_shape(&self, schema: &LayoutSchema) -> Result<()> {
        let want = (schema.max_elements, schema.state_dim());
        if self.known.dim() != want {
            return Err(Error::Config(format!(
                "condition mask is {}x{}, expected {}x{}",
                self.known.nrows(),
                self.known.ncols(),
                want.0,
                want.1
            )));
        }
        Ok(())
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|v| **v).count()
    }

    pub fn is_all_unknown(&self) -> bool {
        self.known_count() == 0
    }
}

fn mark_row(mask: &mut ConditionMask, row: usize) {
    for c in 0..mask.known.ncols() {
        mask.known[[row, c]] = true;
    }
}

fn mark_padding_rows(mask: &mut ConditionMask, layout: &Layout) {
    for row in layout.n_real()..mask.known.nrows() {
        mark_row(mask, row);
    }
}

fn mark_label_columns(mask: &mut ConditionMask, schema: &LayoutSchema) {
    for row in 0..mask.known.nrows() {
        for c in 0..schema.label_dim() {
            mask.known[[row, c]] = true;
        }
    }
}

/// Completion with an explicit fraction: reveals floor(f * n_real) real
/// elements, chosen uniformly without replacement.
fn completion_mask_with_fraction(
    f: f64,
    layout: &Layout,
    schema: &LayoutSchema,
    rng: &mut impl Rng,
) -> ConditionMask {
    let mut mask = ConditionMask::all_unknown(schema);
    mark_padding_rows(&mut mask, layout);
    let k = (f * layout.n_real() as f64).floor() as usize;
    if k > 0 {
        let chosen = rand::seq::index::sample(rng, layout.n_real(), k.min(layout.n_real()));
        for row in chosen {
            mark_row(&mut mask, row);
        }
    }
    mask
}

/// Builds the condition mask for a task against a concrete layout.
///
/// `frac_max` bounds the completion fraction (the draw is uniform on
/// [0, frac_max]); it is ignored by the other tasks.
pub fn make_mask(
    task: TaskKind,
    layout: &Layout,
    schema: &LayoutSchema,
    frac_max: f64,
    rng: &mut impl Rng,
) -> Result<ConditionMask> {
    if layout.n_real() < 1 {
        return Err(Error::Config("conditioning requires at least one real element".into()));
    }
    if !(0.0..=1.0).contains(&frac_max) {
        return Err(Error::Config(format!(
            "completion fraction bound {} outside [0, 1]",
            frac_max
        )));
    }
    let geom_base = schema.label_dim();
    let mut mask = ConditionMask::all_unknown(schema);
    match task {
        TaskKind::Uncond => {}
        TaskKind::ClassToSizePos | TaskKind::Refinement => {
            mark_label_columns(&mut mask, schema);
            mark_padding_rows(&mut mask, layout);
        }
        TaskKind::ClassSizeToPos => {
            mark_label_columns(&mut mask, schema);
            for row in 0..layout.n_real() {
                mask.known[[row, geom_base + 2]] = true; // w
                mask.known[[row, geom_base + 3]] = true; // h
            }
            mark_padding_rows(&mut mask, layout);
        }
        TaskKind::Completion => {
            let f = rng.random_range(0.0..=frac_max);
            mask = completion_mask_with_fraction(f, layout, schema, rng);
        }
    }
    Ok(mask)
}

/// Blends known entries from `x0` with unknown entries from `x_t`:
/// per entry, the mask selects exactly one source, so known values carry over
/// bit-exactly. The result inherits the timestep of `x_t`.
pub fn apply_mask(
    mask: &ConditionMask,
    x0: &StateVector,
    x_t: &StateVector,
) -> Result<StateVector> {
    if x0.values.dim() != x_t.values.dim() || mask.known.dim() != x0.values.dim() {
        return Err(Error::Config(format!(
            "apply_mask shape mismatch: mask {:?}, x0 {:?}, x_t {:?}",
            mask.known.dim(),
            x0.values.dim(),
            x_t.values.dim()
        )));
    }
    let mut out = x_t.values.clone();
    for ((idx, v), known) in out.indexed_iter_mut().zip(mask.known.iter()) {
        if *known {
            *v = x0.values[idx];
        }
    }
    Ok(StateVector { values: out, timestep: x_t.timestep })
}

/// Standard deviation of the refinement perturbation (variance 0.01).
pub const REFINEMENT_NOISE_STD: f64 = 0.1;

/// Adds i.i.d. Gaussian noise (mean 0, std 0.1) to every geometry coordinate
/// of every real element. Labels and padding are untouched and nothing is
/// clamped — the reverse process tolerates out-of-range coordinates.
pub fn perturb_for_refinement(
    layout: &Layout,
    schema: &LayoutSchema,
    rng: &mut impl Rng,
) -> Result<Layout> {
    let normal = Normal::new(0.0, REFINEMENT_NOISE_STD).expect("valid std");
    let mut real = layout.real_elements().to_vec();
    for el in &mut real {
        el.bbox.cx += normal.sample(rng);
        el.bbox.cy += normal.sample(rng);
        el.bbox.w += normal.sample(rng);
        el.bbox.h += normal.sample(rng);
    }
    Layout::new(layout.canvas, real, schema)
}

/// Uniformly picks one of the four training tasks (refinement trains through
/// the unconditional path, so it is not drawn here) and builds its mask.
pub fn sample_training_mask(
    rng: &mut impl Rng,
    layout: &Layout,
    schema: &LayoutSchema,
    frac_max: f64,
) -> Result<(TaskKind, ConditionMask)> {
    let task = match rng.random_range(0..4u32) {
        0 => TaskKind::Uncond,
        1 => TaskKind::ClassToSizePos,
        2 => TaskKind::ClassSizeToPos,
        _ => TaskKind::Completion,
    };
    let mask = make_mask(task, layout, schema, frac_max, rng)?;
    Ok((task, mask))
}
