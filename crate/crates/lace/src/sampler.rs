//! Reverse-process sampling: deterministic DDIM over a timestep
//! sub-sequence, the ancestral DDPM kernel, and the partial reverse process
//! used for refinement. All tasks share one code path — conditioning is a
//! mask blend re-applied at every step, and the final output overwrites
//! conditioned entries with their known values so conditions hold exactly.

use crate::conditioning::{apply_mask, ConditionMask};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::layout::{LayoutSchema, StateVector};
use crate::rng::{derive_stream, normal_matrix};
use crate::schedule::{ddpm_step, predict_x0, timestep_subsequence, NoiseSchedule, SamplerConfig};
use rand_chacha::ChaCha8Rng;

/// Known values plus the mask that selects them.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub mask: &'a ConditionMask,
    pub known: &'a StateVector,
}

/// Stream-domain tag separating sampling draws from training draws when both
/// derive from one base seed.
const SAMPLER_STREAM_TAG: u64 = 0x5341_4D50;

fn check_condition(cond: &Option<Conditioning<'_>>, schema: &LayoutSchema) -> Result<()> {
    if let Some(c) = cond {
        c.mask.check_shape(schema)?;
        c.known.check_shape(schema)?;
    }
    Ok(())
}

fn blend(x: &StateVector, cond: &Option<Conditioning<'_>>) -> Result<StateVector> {
    match cond {
        Some(c) => apply_mask(c.mask, c.known, x),
        None => Ok(x.clone()),
    }
}

/// One DDIM update from `t` to `t_next` given the clean estimate and the
/// predicted noise. With eta = 0 this is deterministic; otherwise the update
/// injects `sigma * z` noise with the variance interpolation rule.
fn ddim_update(
    x0_tilde: &ndarray::Array2<f64>,
    eps_hat: &ndarray::Array2<f64>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array2<f64> {
    let ab_t = schedule.alpha_bar(t);
    let ab_next = schedule.alpha_bar(t_next);
    let sigma = if eta == 0.0 {
        0.0
    } else {
        eta * ((1.0 - ab_next) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_next).sqrt()
    };
    let dir_scale = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_tilde * ab_next.sqrt() + eps_hat * dir_scale;
    if sigma > 0.0 {
        let z = normal_matrix(rng, out.nrows(), out.ncols());
        out = out + z * sigma;
    }
    out
}

/// Walks a batch of trajectories in lockstep down the given timestep
/// sub-sequence, starting from the provided states. All trajectories share
/// the step sequence; each has its own conditioning and RNG.
fn reverse_ddim_walk<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    seq: &[usize],
    eta: f64,
    mut states: Vec<StateVector>,
    conds: &[Option<Conditioning<'_>>],
    rngs: &mut [ChaCha8Rng],
) -> Result<Vec<StateVector>> {
    for (i, t) in seq.iter().enumerate() {
        let t = *t;
        let t_next = seq.get(i + 1).copied().unwrap_or(0);
        let mut blended = Vec::with_capacity(states.len());
        for (x, cond) in states.iter().zip(conds) {
            let mut x = x.clone();
            x.timestep = t;
            blended.push(blend(&x, cond)?);
        }
        let inputs: Vec<ndarray::Array2<f64>> =
            blended.iter().map(|b| b.values.clone()).collect();
        let ts = vec![t; states.len()];
        let eps = predictor.predict_noise_batch(&inputs, &ts)?;
        for (j, x_hat) in blended.into_iter().enumerate() {
            if eps[j].dim() != x_hat.values.dim() {
                return Err(Error::Config(format!(
                    "noise prediction is {:?}, state is {:?}",
                    eps[j].dim(),
                    x_hat.values.dim()
                )));
            }
            let x0_tilde = predict_x0(&x_hat, &eps[j], t, schedule)?;
            let next =
                ddim_update(&x0_tilde.values, &eps[j], t, t_next, schedule, eta, &mut rngs[j]);
            states[j] = StateVector { values: next, timestep: t_next };
        }
    }
    let mut out = Vec::with_capacity(states.len());
    for (x, cond) in states.iter().zip(conds) {
        out.push(blend(x, cond)?);
    }
    Ok(out)
}

/// Samples a batch of layout states from pure noise with DDIM. Trajectory
/// `i` uses an RNG stream derived from `(config.seed, i)`, so results are
/// reproducible and independent of scheduling.
pub fn ddim_sample_batch<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    schema: &LayoutSchema,
    conds: &[Option<Conditioning<'_>>],
) -> Result<Vec<StateVector>> {
    config.validate(schedule)?;
    for c in conds {
        check_condition(c, schema)?;
    }
    let seq = timestep_subsequence(schedule.len(), config.num_steps)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..conds.len())
        .map(|i| derive_stream(config.seed, SAMPLER_STREAM_TAG, i as u64))
        .collect();
    let t_start = seq[0];
    let states: Vec<StateVector> = rngs
        .iter_mut()
        .map(|rng| StateVector {
            values: normal_matrix(rng, schema.max_elements, schema.state_dim()),
            timestep: t_start,
        })
        .collect();
    reverse_ddim_walk(predictor, schedule, &seq, config.eta, states, conds, &mut rngs)
}

/// Single-trajectory DDIM sampling from pure noise.
pub fn ddim_sample<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    schema: &LayoutSchema,
    cond: Option<Conditioning<'_>>,
) -> Result<StateVector> {
    Ok(ddim_sample_batch(predictor, schedule, config, schema, &[cond])?.remove(0))
}

/// Partial reverse process: each start state is treated as the noisy state
/// at timestep `tau` and walked down `[tau] ++ (sub-sequence entries < tau)`.
/// Used by refinement, where the lightly perturbed input plays x_tau.
pub fn ddim_refine_batch<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    schema: &LayoutSchema,
    tau: usize,
    starts: Vec<StateVector>,
    conds: &[Option<Conditioning<'_>>],
) -> Result<Vec<StateVector>> {
    config.validate(schedule)?;
    schedule.check_t(tau)?;
    if starts.len() != conds.len() {
        return Err(Error::Config("one conditioning slot per start state required".into()));
    }
    for (c, s) in conds.iter().zip(&starts) {
        check_condition(c, schema)?;
        s.check_shape(schema)?;
    }
    let mut seq = vec![tau];
    seq.extend(
        timestep_subsequence(schedule.len(), config.num_steps)?
            .into_iter()
            .filter(|&t| t < tau),
    );
    let mut rngs: Vec<ChaCha8Rng> = (0..starts.len())
        .map(|i| derive_stream(config.seed, SAMPLER_STREAM_TAG, i as u64))
        .collect();
    let states: Vec<StateVector> = starts
        .into_iter()
        .map(|mut s| {
            s.timestep = tau;
            s
        })
        .collect();
    reverse_ddim_walk(predictor, schedule, &seq, config.eta, states, conds, &mut rngs)
}

/// Ancestral sampling with the DDPM kernel over every timestep, provided as
/// the alternative to DDIM. Noise is drawn for every step above t = 1.
pub fn ddpm_sample<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    schema: &LayoutSchema,
    cond: Option<Conditioning<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<StateVector> {
    check_condition(&cond, schema)?;
    let t_total = schedule.len();
    let mut x = StateVector {
        values: normal_matrix(rng, schema.max_elements, schema.state_dim()),
        timestep: t_total,
    };
    for t in (1..=t_total).rev() {
        x.timestep = t;
        let x_hat = blend(&x, &cond)?;
        let eps = predictor.predict_noise(&x_hat.values, t)?;
        let noise = if t > 1 {
            normal_matrix(rng, schema.max_elements, schema.state_dim())
        } else {
            ndarray::Array2::zeros((schema.max_elements, schema.state_dim()))
        };
        x = ddpm_step(&x_hat, &eps, t, schedule, &noise)?;
    }
    blend(&x, &cond)
}
