//! Two-phase constrained training of the denoiser.
//!
//! Each step draws a batch of layouts, corrupts them to random timesteps,
//! blends in conditioning masks, runs the denoiser once over the whole batch
//! on a single tape, and assembles the loss
//!
//! ```text
//! L = mean‖eps − eps_hat‖² + mean‖x0_tilde − x0‖² + ω_t·(C_align + C_overlap)
//! ```
//!
//! averaged over the batch. Phase 1 forces ω_t = 0 so the model first learns
//! plain denoising; phase 2 turns the timestep-dependent constraint weight
//! on. The optimizer is adaptive moment estimation with bias correction,
//! global gradient-norm clipping, and a warmup-then-half-cosine learning-rate
//! schedule. All randomness flows through per-(step, item) derived streams,
//! so a run is a pure function of (seed, config, corpus).

use crate::conditioning::{apply_mask, sample_training_mask, ConditionMask, TaskKind};
use crate::constraints::{
    global_alignment_loss, local_alignment_loss, overlap_loss, ConstraintReport,
    ConstraintWeightSchedule, WeightOrientation,
};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::layout::{encode_layout, Layout, LayoutSchema, StateVector};
use crate::rng::{derive_stream, normal_matrix};
use crate::schedule::{predict_x0, q_sample, NoiseSchedule};
use crate::tape::Real;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which alignment penalty enters the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentKind {
    /// Barrier on each predicted element's nearest edge gap within the
    /// predicted layout itself.
    Local,
    /// Barrier on predicted edge gaps restricted to pairs that are exactly
    /// aligned in the ground truth.
    Global,
}

impl AlignmentKind {
    pub fn parse_token(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(AlignmentKind::Local),
            "global" => Ok(AlignmentKind::Global),
            other => Err(Error::Config(format!(
                "unknown alignment kind {other:?}; expected local or global"
            ))),
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            AlignmentKind::Local => "local",
            AlignmentKind::Global => "global",
        }
    }
}

/// Hyperparameters of a training run. `Default` is the desk-scale recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Steps trained with the constraint weight forced to zero.
    pub phase1_steps: usize,
    /// Steps trained with the timestep-dependent constraint weight enabled.
    pub phase2_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm above which gradients are rescaled.
    pub grad_clip: f64,
    pub seed: u64,
    pub use_overlap: bool,
    pub alignment_kind: AlignmentKind,
    /// Decay rate of the constraint weight curve.
    pub beta_w: f64,
    pub orientation: WeightOrientation,
    /// Upper bound of the uniform fraction of rows revealed by completion
    /// masks during augmentation.
    pub complete_frac_max: f64,
    /// Ablation: restrict the noise-matching term to entries the conditioning
    /// mask leaves unknown. Default scores every entry.
    pub l_simple_unmasked_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 100,
            phase1_steps: 3000,
            phase2_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1000.0,
            seed: 0,
            use_overlap: true,
            alignment_kind: AlignmentKind::Global,
            beta_w: 0.005,
            orientation: WeightOrientation::SmallTActive,
            complete_frac_max: 0.2,
            l_simple_unmasked_only: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.phase1_steps + self.phase2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("phase1_steps + phase2_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.complete_frac_max) {
            return Err(Error::Config(format!(
                "complete_frac_max must lie in [0, 1], got {}",
                self.complete_frac_max
            )));
        }
        Ok(())
    }

    /// Learning rate at a zero-based step: linear warmup to the configured
    /// rate, then a half-cycle cosine decay toward zero over the remainder.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        let warm = self.warmup_steps.min(total);
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        if total <= warm {
            return self.learning_rate;
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// Batch-mean loss terms and optimizer state for one step. Constraint columns
/// carry their timestep weight, so `total` is exactly the optimized value.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub l_simple: f64,
    pub l_mse: f64,
    pub c_align: f64,
    pub c_overlap: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Randomness consumed by one batch item: corruption timestep, forward noise,
/// and the conditioning mask (with the task that produced it).
#[derive(Debug, Clone)]
pub struct ItemDraw {
    pub t: usize,
    pub eps: Array2<f64>,
    pub task: TaskKind,
    pub mask: ConditionMask,
}

/// Draws `(t, eps, mask)` for one item, in that fixed order, from the given
/// stream.
pub fn draw_item(
    rng: &mut impl Rng,
    layout: &Layout,
    schema: &LayoutSchema,
    schedule: &NoiseSchedule,
    complete_frac_max: f64,
) -> Result<ItemDraw> {
    let t = rng.random_range(1..=schedule.len());
    let eps = normal_matrix(rng, schema.max_elements, schema.state_dim());
    let (task, mask) = sample_training_mask(rng, layout, schema, complete_frac_max)?;
    Ok(ItemDraw { t, eps, task, mask })
}

/// One batch item with everything the loss needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub x0: StateVector,
    pub n_real: usize,
    pub draw: ItemDraw,
    /// Constraint weight for this item's timestep (zero during phase 1).
    pub omega: f64,
}

pub fn prepare_item(
    rng: &mut impl Rng,
    layout: &Layout,
    schema: &LayoutSchema,
    schedule: &NoiseSchedule,
    weights: &ConstraintWeightSchedule,
    constraints_on: bool,
    complete_frac_max: f64,
) -> Result<PreparedItem> {
    let draw = draw_item(rng, layout, schema, schedule, complete_frac_max)?;
    let omega = if constraints_on { weights.weight(draw.t) } else { 0.0 };
    Ok(PreparedItem {
        x0: encode_layout(layout, schema)?,
        n_real: layout.real_elements().len(),
        draw,
        omega,
    })
}

/// Loss terms of a single item given the model's noise prediction, plus the
/// derivative of the item's total with respect to that prediction. Constraint
/// terms are returned already multiplied by the item's weight.
#[derive(Debug, Clone)]
pub struct ItemTerms {
    pub l_simple: f64,
    pub l_mse: f64,
    pub c_align: f64,
    pub c_overlap: f64,
    pub d_eps_hat: Array2<f64>,
}

impl ItemTerms {
    pub fn total(&self) -> f64 {
        self.l_simple + self.l_mse + self.c_align + self.c_overlap
    }
}

fn check_term(name: &str, value: f64, item: &PreparedItem) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!(
            "{name} is {value} (task {}, t = {})",
            item.draw.task.token(),
            item.draw.t
        )))
    }
}

/// Computes every loss term of one item from its noise prediction. The
/// gradient flows only through `eps_hat`; the data entering the blend and the
/// constraint references are constants.
pub fn item_loss_terms(
    item: &PreparedItem,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
    config: &TrainConfig,
) -> Result<ItemTerms> {
    let x_t = q_sample(&item.x0, item.draw.t, &item.draw.eps, schedule)?;
    let blended = apply_mask(&item.draw.mask, &item.x0, &x_t)?;
    let x0_tilde = predict_x0(&blended, eps_hat, item.draw.t, schedule)?;

    let entries = (schema.max_elements * schema.state_dim()) as f64;
    let diff = eps_hat - &item.draw.eps;

    // Noise matching: the squared norm of the prediction error, summed over
    // entries (by default all of them; the ablation flag scores only entries
    // the mask leaves unknown). Keeping this term a sum while the
    // reconstruction term below is a mean preserves their relative scale
    // across timesteps: the reconstruction amplification (1 - abar)/abar is
    // damped by the entry count, which keeps large-t items from drowning out
    // the small-t learning signal.
    let (l_simple, mut d_eps_hat) = if config.l_simple_unmasked_only {
        let mut masked = diff.clone();
        for ((r, c), known) in item.draw.mask.known.indexed_iter() {
            if *known {
                masked[[r, c]] = 0.0;
            }
        }
        let value = masked.iter().map(|d| d * d).sum::<f64>();
        (value, masked * 2.0)
    } else {
        let value = diff.iter().map(|d| d * d).sum::<f64>();
        (value, &diff * 2.0)
    };

    // Clean-state reconstruction. x0_tilde is linear in eps_hat with
    // coefficient -sqrt(1 - abar)/sqrt(abar) per entry.
    let ab = schedule.alpha_bar(item.draw.t);
    let noise_to_clean = (1.0 - ab).sqrt() / ab.sqrt();
    let recon = &x0_tilde.values - &item.x0.values;
    let l_mse = recon.iter().map(|d| d * d).sum::<f64>() / entries;
    d_eps_hat -= &(&recon * (2.0 * noise_to_clean / entries));

    // Constraints act on the geometry block of the predicted clean state,
    // masked to the ground-truth real rows.
    let (mut c_align, mut c_overlap) = (0.0, 0.0);
    if item.omega > 0.0 {
        let gd = schema.label_dim();
        let pred_geo = x0_tilde.values.slice(s![.., gd..gd + 4]).to_owned();
        let align = match config.alignment_kind {
            AlignmentKind::Global => {
                let true_geo = item.x0.values.slice(s![.., gd..gd + 4]).to_owned();
                global_alignment_loss(&pred_geo, &true_geo, item.n_real)
            }
            AlignmentKind::Local => local_alignment_loss(&pred_geo, item.n_real),
        };
        let olap = if config.use_overlap {
            overlap_loss(&pred_geo, item.n_real)
        } else {
            ConstraintReport { value: 0.0, grad: Array2::zeros(pred_geo.dim()) }
        };
        c_align = item.omega * align.value;
        c_overlap = item.omega * olap.value;
        let geo_grad = align.grad + olap.grad;
        for ((r, c), g) in geo_grad.indexed_iter() {
            d_eps_hat[[r, gd + c]] -= item.omega * noise_to_clean * g;
        }
    }

    Ok(ItemTerms {
        l_simple: check_term("noise-matching loss", l_simple, item)?,
        l_mse: check_term("reconstruction loss", l_mse, item)?,
        c_align: check_term("alignment constraint", c_align, item)?,
        c_overlap: check_term("overlap constraint", c_overlap, item)?,
        d_eps_hat,
    })
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTerms {
    pub l_simple: f64,
    pub l_mse: f64,
    pub c_align: f64,
    pub c_overlap: f64,
}

impl BatchTerms {
    pub fn total(&self) -> f64 {
        self.l_simple + self.l_mse + self.c_align + self.c_overlap
    }
}

/// Stacks the blended batch inputs into one `(B·L)×D` matrix in model
/// precision, with the per-item timesteps alongside.
fn stack_batch<T: Real>(
    items: &[PreparedItem],
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
) -> Result<(Array2<T>, Vec<usize>)> {
    let l = schema.max_elements;
    let d = schema.state_dim();
    let mut stacked = Array2::zeros((items.len() * l, d));
    let mut ts = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let x_t = q_sample(&item.x0, item.draw.t, &item.draw.eps, schedule)?;
        let blended = apply_mask(&item.draw.mask, &item.x0, &x_t)?;
        for r in 0..l {
            for c in 0..d {
                stacked[[i * l + r, c]] = T::of_f64(blended.values[[r, c]]);
            }
        }
        ts.push(item.draw.t);
    }
    Ok((stacked, ts))
}

fn batch_eps_hat<T: Real>(output: &Array2<T>, item: usize, l: usize) -> Array2<f64> {
    output.slice(s![item * l..(item + 1) * l, ..]).mapv(|v| v.as_f64())
}

/// Runs the denoiser over the batch without a tape and returns the mean loss.
/// This follows exactly the same arithmetic as `batch_terms_and_grads`, which
/// makes it the reference value for finite-difference checks.
pub fn batch_loss_value<T: Real>(
    model: &Denoiser<T>,
    items: &[PreparedItem],
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
    config: &TrainConfig,
) -> Result<f64> {
    let (stacked, ts) = stack_batch::<T>(items, schedule, schema)?;
    let output = model.predict_batch(stacked, &ts)?;
    let mut total = 0.0;
    for (i, item) in items.iter().enumerate() {
        let eps_hat = batch_eps_hat(&output, i, schema.max_elements);
        total += item_loss_terms(item, &eps_hat, schedule, schema, config)?.total();
    }
    Ok(total / items.len() as f64)
}

/// Forward + backward over one batch on a single tape. Returns batch-mean
/// loss terms and the batch-mean gradient per parameter slot, in f64
/// regardless of model precision.
pub fn batch_terms_and_grads<T: Real>(
    model: &Denoiser<T>,
    items: &[PreparedItem],
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
    config: &TrainConfig,
) -> Result<(BatchTerms, Vec<Array2<f64>>)> {
    if items.is_empty() {
        return Err(Error::Config("training batch is empty".into()));
    }
    let b = items.len() as f64;
    let l = schema.max_elements;
    let (stacked, ts) = stack_batch::<T>(items, schedule, schema)?;
    let mut forward = model.forward_batch_traced(stacked, &ts)?;

    let mut terms = BatchTerms { l_simple: 0.0, l_mse: 0.0, c_align: 0.0, c_overlap: 0.0 };
    let mut seed: Array2<T> = Array2::zeros(forward.output_values().dim());
    for (i, item) in items.iter().enumerate() {
        let eps_hat = batch_eps_hat(forward.output_values(), i, l);
        let item_terms = item_loss_terms(item, &eps_hat, schedule, schema, config)?;
        terms.l_simple += item_terms.l_simple / b;
        terms.l_mse += item_terms.l_mse / b;
        terms.c_align += item_terms.c_align / b;
        terms.c_overlap += item_terms.c_overlap / b;
        for ((r, c), g) in item_terms.d_eps_hat.indexed_iter() {
            seed[[i * l + r, c]] = T::of_f64(g / b);
        }
    }

    let grads = forward.backward(&seed, model.index.n_slots(), false)?;
    let grads = grads
        .by_param
        .into_iter()
        .enumerate()
        .map(|(slot, g)| match g {
            Some(g) => g.mapv(|v| v.as_f64()),
            None => Array2::zeros(model.index.shapes[slot]),
        })
        .collect();
    Ok((terms, grads))
}

/// Trips when the loss stays above ten times its first observed value for one
/// hundred consecutive steps.
#[derive(Debug, Clone, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    consecutive_high: usize,
}

pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_PATIENCE: usize = 100;

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, total: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(total);
        if total > DIVERGENCE_FACTOR * initial {
            self.consecutive_high += 1;
        } else {
            self.consecutive_high = 0;
        }
        if self.consecutive_high >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged(format!(
                "loss {total:.6} exceeded {DIVERGENCE_FACTOR}x the initial {initial:.6} for \
                 {DIVERGENCE_PATIENCE} consecutive steps, last at step {step}"
            )));
        }
        Ok(())
    }
}

/// First/second-moment state for adaptive moment estimation, kept in f64.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    fn zeros(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&dim| Array2::zeros(dim)).collect(),
            v: shapes.iter().map(|&dim| Array2::zeros(dim)).collect(),
        }
    }
}

/// One bias-corrected moment update applied in place. `k` is the one-based
/// update count.
fn adam_apply<T: Real>(
    params: &mut [Array2<T>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    k: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bias1 = 1.0 - beta1.powi(k as i32);
    let bias2 = 1.0 - beta2.powi(k as i32);
    for slot in 0..params.len() {
        let g = &grads[slot];
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        ndarray::Zip::from(&mut params[slot]).and(m).and(v).and(g).for_each(
            |p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = T::of_f64(p.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            },
        );
    }
}

/// Scales gradients so their global L2 norm does not exceed `clip`; returns
/// the pre-clip norm.
fn clip_global_norm(grads: &mut [Array2<f64>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Drives training steps over a model. Owns the model and optimizer state;
/// borrows the diffusion schedule and layout schema.
pub struct Trainer<'a, T: Real> {
    pub model: Denoiser<T>,
    pub config: TrainConfig,
    schedule: &'a NoiseSchedule,
    schema: &'a LayoutSchema,
    weights: ConstraintWeightSchedule,
    adam: AdamState,
    guard: DivergenceGuard,
    step: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        model: Denoiser<T>,
        schedule: &'a NoiseSchedule,
        schema: &'a LayoutSchema,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model.config.n_classes != schema.n_classes
            || model.config.max_elements != schema.max_elements
        {
            return Err(Error::Config(format!(
                "model is sized for {} classes x {} elements but the schema has {} x {}",
                model.config.n_classes,
                model.config.max_elements,
                schema.n_classes,
                schema.max_elements
            )));
        }
        let weights =
            ConstraintWeightSchedule::new(config.beta_w, schedule.len(), config.orientation)?;
        let adam = AdamState::zeros(&model.index.shapes);
        Ok(Trainer { model, config, schedule, schema, weights, adam, guard: DivergenceGuard::default(), step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn in_phase2(&self) -> bool {
        self.step >= self.config.phase1_steps
    }

    /// Deterministically picks this step's batch: uniform with replacement
    /// from its own derived stream, so corpora smaller than the batch size
    /// simply repeat.
    pub fn select_batch<'c>(&self, corpus: &'c [Layout]) -> Vec<&'c Layout> {
        let mut rng = derive_stream(self.config.seed, self.step as u64, 0);
        (0..self.config.batch_size)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect()
    }

    /// Draws per-item randomness from streams keyed by (step, item index).
    pub fn prepare_batch(&self, batch: &[&Layout]) -> Result<Vec<PreparedItem>> {
        let constraints_on = self.in_phase2();
        batch
            .iter()
            .enumerate()
            .map(|(i, layout)| {
                let mut rng = derive_stream(self.config.seed, self.step as u64, 1 + i as u64);
                prepare_item(
                    &mut rng,
                    layout,
                    self.schema,
                    self.schedule,
                    &self.weights,
                    constraints_on,
                    self.config.complete_frac_max,
                )
            })
            .collect()
    }

    /// One optimizer step over explicitly prepared items.
    pub fn train_step_items(&mut self, items: &[PreparedItem]) -> Result<StepStats> {
        let (terms, mut grads) =
            batch_terms_and_grads(&self.model, items, self.schedule, self.schema, &self.config)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm is {grad_norm} at step {}",
                self.step
            )));
        }
        let lr = self.config.lr_at(self.step);
        adam_apply(
            &mut self.model.params,
            &grads,
            &mut self.adam,
            self.step + 1,
            lr,
            self.config.beta1,
            self.config.beta2,
            self.config.adam_eps,
        );
        self.model.check_finite()?;
        let stats = StepStats {
            step: self.step,
            l_simple: terms.l_simple,
            l_mse: terms.l_mse,
            c_align: terms.c_align,
            c_overlap: terms.c_overlap,
            total: terms.total(),
            lr,
            grad_norm,
        };
        self.guard.observe(self.step, stats.total)?;
        self.step += 1;
        Ok(stats)
    }

    /// One full step: select a batch from the corpus, draw its randomness,
    /// and update the parameters.
    pub fn train_step(&mut self, corpus: &[Layout]) -> Result<StepStats> {
        if corpus.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let batch = self.select_batch(corpus);
        let items = self.prepare_batch(&batch)?;
        self.train_step_items(&items)
    }

    pub fn into_model(self) -> Denoiser<T> {
        self.model
    }
}

/// A finished run: the final model, the model as it stood at the end of
/// phase 1, and the per-step loss trace.
pub struct TrainOutcome<T> {
    pub model: Denoiser<T>,
    pub phase1_model: Denoiser<T>,
    pub stats: Vec<StepStats>,
}

/// Runs the full two-phase schedule over a corpus, invoking `progress` after
/// every step (for logging); returns the final and phase-1 models.
pub fn train<T: Real>(
    model: Denoiser<T>,
    corpus: &[Layout],
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
    config: &TrainConfig,
    mut progress: impl FnMut(&StepStats),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut trainer = Trainer::new(model, schedule, schema, config.clone())?;
    let total = config.total_steps();
    let mut stats = Vec::with_capacity(total);
    let mut phase1_model = None;
    for step in 0..total {
        if step == config.phase1_steps {
            phase1_model = Some(trainer.model.clone());
        }
        let step_stats = trainer.train_step(corpus)?;
        progress(&step_stats);
        stats.push(step_stats);
    }
    let phase1_model = phase1_model.unwrap_or_else(|| trainer.model.clone());
    Ok(TrainOutcome { model: trainer.into_model(), phase1_model, stats })
}
