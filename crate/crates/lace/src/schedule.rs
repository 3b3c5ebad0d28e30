//! Noise schedules and the forward/reverse diffusion kernels: closed-form
//! corruption, x0 reconstruction from predicted noise, the stochastic
//! ancestral step, and the deterministic sub-sequence used by the fast
//! sampler.

use crate::error::{Error, Result};
use crate::layout::StateVector;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Precomputed variance schedule. Index convention: `beta(t)`, `alpha(t)`,
/// `posterior_var(t)` are defined for t in 1..=T; `alpha_bar(t)` for
/// t in 0..=T with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the derived arrays from raw per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        for (i, b) in betas.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0 && *b < 1.0) {
                return Err(Error::Config(format!("beta[{}] = {} outside (0,1)", i + 1, b)));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_vars: Vec<f64> = (1..=betas.len())
            .map(|t| (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t - 1])
            .collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_vars[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Config(format!("timestep {} outside 1..={}", t, self.len())));
        }
        Ok(())
    }

    /// FNV-1a over the step count and the exact bit patterns of the betas;
    /// stored in checkpoints so a model is never silently resumed under a
    /// different schedule.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 + 8 * self.betas.len());
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for b in &self.betas {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    pub fn to_json(&self) -> String {
        let mirror = ScheduleJson { t: self.len(), betas: self.betas.clone() };
        serde_json::to_string(&mirror).expect("schedule serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mirror: ScheduleJson = serde_json::from_str(s)?;
        if mirror.t != mirror.betas.len() {
            return Err(Error::Config(format!(
                "schedule says T={} but carries {} betas",
                mirror.t,
                mirror.betas.len()
            )));
        }
        NoiseSchedule::from_betas(mirror.betas)
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    #[serde(rename = "T")]
    t: usize,
    betas: Vec<f64>,
}

/// 64-bit FNV-1a hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Linear schedule from `beta_start` to `beta_end` inclusive over `t_steps`
/// steps.
pub fn make_linear_schedule(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {}..{}",
            beta_start, beta_end
        )));
    }
    if t_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let betas = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Default schedule used throughout: 1000 steps, betas 1e-4 to 0.02.
pub fn default_schedule() -> NoiseSchedule {
    make_linear_schedule(1000, 1e-4, 0.02).expect("default schedule is valid")
}

/// Closed-form forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
/// `noise` must be an i.i.d. standard normal draw of the state's shape.
pub fn q_sample(x0: &StateVector, t: usize, noise: &Array2<f64>, schedule: &NoiseSchedule) -> Result<StateVector> {
    schedule.check_t(t)?;
    if x0.values.dim() != noise.dim() {
        return Err(Error::Config("noise shape differs from state shape".into()));
    }
    let ab = schedule.alpha_bar(t);
    let values = &x0.values * ab.sqrt() + noise * (1.0 - ab).sqrt();
    Ok(StateVector::new(values, t))
}

/// Reconstructs the clean-state estimate implied by a noise prediction:
/// (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t). Linear in `eps_hat`.
pub fn predict_x0(x_t: &StateVector, eps_hat: &Array2<f64>, t: usize, schedule: &NoiseSchedule) -> Result<StateVector> {
    schedule.check_t(t)?;
    if x_t.values.dim() != eps_hat.dim() {
        return Err(Error::Config("prediction shape differs from state shape".into()));
    }
    let ab = schedule.alpha_bar(t);
    let values = (&x_t.values - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
    Ok(StateVector::new(values, 0))
}

/// One ancestral reverse step. The mean is
/// (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t); for t > 1 the
/// posterior standard deviation scales `noise_draw`, at t = 1 the draw is
/// ignored and the mean is returned as the sample.
pub fn ddpm_step(
    x_t: &StateVector,
    eps_hat: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    noise_draw: &Array2<f64>,
) -> Result<StateVector> {
    schedule.check_t(t)?;
    if x_t.values.dim() != eps_hat.dim() || x_t.values.dim() != noise_draw.dim() {
        return Err(Error::Config("shape mismatch in reverse step".into()));
    }
    let ab = schedule.alpha_bar(t);
    let coeff = schedule.beta(t) / (1.0 - ab).sqrt();
    let mut values = (&x_t.values - &(eps_hat * coeff)) / schedule.alpha(t).sqrt();
    if t > 1 {
        values = values + noise_draw * schedule.posterior_var(t).sqrt();
    }
    Ok(StateVector::new(values, t - 1))
}

/// Deterministic-sampler configuration: number of denoiser queries, the
/// stochasticity knob (0 = fully deterministic given the seed-fixed start),
/// and the seed for the start state and any injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 100, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.len() {
            return Err(Error::Config(format!(
                "num_steps {} outside 1..={}",
                self.num_steps,
                schedule.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0,1]", self.eta)));
        }
        Ok(())
    }
}

/// Strictly decreasing timesteps at which the fast sampler queries the
/// denoiser: uniform stride down from `start`, with the final query forced to
/// t = 1. At most `num_steps` entries.
pub fn timestep_subsequence(start: usize, num_steps: usize) -> Result<Vec<usize>> {
    if start == 0 || num_steps == 0 {
        return Err(Error::Config("subsequence needs start >= 1 and num_steps >= 1".into()));
    }
    let stride = start.div_ceil(num_steps).max(1);
    let mut ts = Vec::with_capacity(num_steps);
    let mut t = start;
    while ts.len() < num_steps && t >= 1 {
        ts.push(t);
        if t <= stride {
            break;
        }
        t -= stride;
    }
    *ts.last_mut().expect("at least one entry") = 1;
    if ts.len() >= 2 && ts[ts.len() - 2] == 1 {
        ts.pop();
    }
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, rng_from_seed};
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn constant_beta_cumulative_products() {
        let s = NoiseSchedule::from_betas(vec![0.02, 0.02, 0.02]).unwrap();
        assert!((s.alpha_bar(1) - 0.98).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.9604).abs() < 1e-12);
        assert!((s.alpha_bar(3) - 0.941192).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn linear_schedule_hits_both_endpoints() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        // Cumulative products strictly decrease and the first posterior
        // variance vanishes.
        assert!(s.alpha_bar(1000) < s.alpha_bar(1));
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_var(t) >= 0.0);
        }
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    fn toy_state(rows: usize, cols: usize, seed: u64) -> StateVector {
        let mut rng = rng_from_seed(seed);
        StateVector::new(normal_matrix(&mut rng, rows, cols), 0)
    }

    #[test]
    fn corruption_with_zero_noise_scales_by_sqrt_alpha_bar() {
        let s = default_schedule();
        let x0 = toy_state(4, 10, 1);
        let zero = Array2::zeros((4, 10));
        for t in [1, 500, 1000] {
            let xt = q_sample(&x0, t, &zero, &s).unwrap();
            let expect = &x0.values * s.alpha_bar(t).sqrt();
            let diff = (&xt.values - &expect).mapv(f64::abs).sum();
            assert!(diff < 1e-12);
            assert_eq!(xt.timestep, t);
        }
    }

    #[test]
    fn corruption_rejects_out_of_range_timesteps() {
        let s = default_schedule();
        let x0 = toy_state(2, 10, 2);
        let zero = Array2::zeros((2, 10));
        assert!(q_sample(&x0, 0, &zero, &s).is_err());
        assert!(q_sample(&x0, 1001, &zero, &s).is_err());
    }

    #[test]
    fn reconstruction_inverts_corruption_with_true_noise() {
        let s = default_schedule();
        let x0 = toy_state(25, 10, 3);
        let mut rng = rng_from_seed(4);
        for t in [1, 500, 1000] {
            let noise = normal_matrix(&mut rng, 25, 10);
            let xt = q_sample(&x0, t, &noise, &s).unwrap();
            let back = predict_x0(&xt, &noise, t, &s).unwrap();
            let max = (&back.values - &x0.values).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(max <= 1e-9, "t={} reconstruction error {}", t, max);
            assert_eq!(back.timestep, 0);
        }
    }

    #[test]
    fn reconstruction_with_zero_prediction_rescales_state() {
        let s = default_schedule();
        let xt = StateVector::new(array![[0.3, -0.7], [1.1, 0.0]], 700);
        let zero = Array2::zeros((2, 2));
        let out = predict_x0(&xt, &zero, 700, &s).unwrap();
        let expect = &xt.values / s.alpha_bar(700).sqrt();
        assert!((&out.values - &expect).mapv(f64::abs).sum() < 1e-12);
    }

    #[test]
    fn reconstruction_gradient_in_prediction_matches_finite_differences() {
        // The map is linear, so central differences recover the diagonal
        // Jacobian -sqrt(1-abar)/sqrt(abar) essentially exactly.
        let s = default_schedule();
        let t = 250;
        let xt = toy_state(3, 10, 5);
        let xt = StateVector::new(xt.values, t);
        let mut eps = Array2::zeros((3, 10));
        let h = 1e-5;
        let expected = -(1.0 - s.alpha_bar(t)).sqrt() / s.alpha_bar(t).sqrt();
        for &(i, j) in &[(0usize, 0usize), (1, 7), (2, 9)] {
            eps[[i, j]] = h;
            let plus = predict_x0(&xt, &eps, t, &s).unwrap();
            eps[[i, j]] = -h;
            let minus = predict_x0(&xt, &eps, t, &s).unwrap();
            eps[[i, j]] = 0.0;
            let fd = (plus.values[[i, j]] - minus.values[[i, j]]) / (2.0 * h);
            assert!(
                (fd - expected).abs() <= 1e-6 * expected.abs(),
                "fd {} vs {}",
                fd,
                expected
            );
        }
    }

    #[test]
    fn final_reverse_step_ignores_the_noise_draw() {
        let s = default_schedule();
        let x1 = StateVector::new(array![[0.4, -0.2]], 1);
        let eps = array![[0.1, 0.3]];
        let loud = array![[100.0, -100.0]];
        let quiet = Array2::zeros((1, 2));
        let a = ddpm_step(&x1, &eps, 1, &s, &loud).unwrap();
        let b = ddpm_step(&x1, &eps, 1, &s, &quiet).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.timestep, 0);
    }

    #[test]
    fn single_reverse_step_from_t1_recovers_clean_state() {
        let s = NoiseSchedule::from_betas(vec![0.02, 0.02, 0.02]).unwrap();
        let x0 = toy_state(4, 10, 6);
        let mut rng = rng_from_seed(7);
        let noise = normal_matrix(&mut rng, 4, 10);
        let x1 = q_sample(&x0, 1, &noise, &s).unwrap();
        let zero = Array2::zeros((4, 10));
        let back = ddpm_step(&x1, &noise, 1, &s, &zero).unwrap();
        let max = (&back.values - &x0.values).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(max <= 1e-9, "error {}", max);
    }

    #[test]
    fn reverse_step_mean_equals_posterior_mean_under_true_noise() {
        let s = default_schedule();
        let x0 = toy_state(4, 10, 8);
        let mut rng = rng_from_seed(9);
        let zero = Array2::zeros((4, 10));
        for t in [2, 500, 1000] {
            let noise = normal_matrix(&mut rng, 4, 10);
            let xt = q_sample(&x0, t, &noise, &s).unwrap();
            let got = ddpm_step(&xt, &noise, t, &s, &zero).unwrap();
            // Posterior mean written in terms of the clean state and x_t.
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar(t - 1);
            let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
            let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let mu = &x0.values * c0 + &xt.values * ct;
            let max = (&got.values - &mu).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(max <= 1e-9, "t={} posterior mean error {}", t, max);
        }
    }

    #[test]
    fn corruption_moments_match_closed_form() {
        // Monte Carlo oracle: empirical mean/variance of the corrupted state
        // against (sqrt(abar) x0, 1 - abar) within three standard errors.
        let s = make_linear_schedule(50, 1e-3, 0.05).unwrap();
        let x0 = StateVector::new(array![[0.8, -0.3]], 0);
        let n = 100_000usize;
        for t in [1, 25, 50] {
            let mut rng = rng_from_seed(100 + t as u64);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let noise = normal_matrix(&mut rng, 1, 2);
                let xt = q_sample(&x0, t, &noise, &s).unwrap();
                sum += xt.values[[0, 0]];
                sumsq += xt.values[[0, 0]] * xt.values[[0, 0]];
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let want_mean = s.alpha_bar(t).sqrt() * 0.8;
            let want_var = 1.0 - s.alpha_bar(t);
            let se_mean = want_var.sqrt() / (n as f64).sqrt();
            let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!((mean - want_mean).abs() < 3.0 * se_mean, "t={} mean {} vs {}", t, mean, want_mean);
            assert!((var - want_var).abs() < 3.0 * se_var, "t={} var {} vs {}", t, var, want_var);
        }
    }

    #[test]
    fn iterated_single_step_kernel_matches_closed_form_moments() {
        // Applying the one-step corruption t times must land on the same
        // distribution as the closed-form jump; checked by Monte Carlo.
        let s = make_linear_schedule(30, 1e-3, 0.05).unwrap();
        let x0v = 0.6;
        let t = 30;
        let n = 100_000usize;
        let mut rng = rng_from_seed(11);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = x0v;
            for step in 1..=t {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                x = s.alpha(step).sqrt() * x + s.beta(step).sqrt() * eps;
            }
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let want_mean = s.alpha_bar(t).sqrt() * x0v;
        let want_var = 1.0 - s.alpha_bar(t);
        let se_mean = want_var.sqrt() / (n as f64).sqrt();
        let se_var = want_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {} vs {}", mean, want_mean);
        assert!((var - want_var).abs() < 3.0 * se_var, "var {} vs {}", var, want_var);
    }

    #[test]
    fn subsequence_for_full_run_has_uniform_stride_and_ends_at_one() {
        let ts = timestep_subsequence(1000, 100).unwrap();
        assert_eq!(ts.len(), 100);
        assert_eq!(ts[0], 1000);
        for i in 0..98 {
            assert_eq!(ts[i] - ts[i + 1], 10);
        }
        assert_eq!(*ts.last().unwrap(), 1);
        for w in ts.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn subsequence_handles_short_starts() {
        assert_eq!(timestep_subsequence(5, 100).unwrap(), vec![5, 4, 3, 2, 1]);
        assert_eq!(timestep_subsequence(1, 100).unwrap(), vec![1]);
        let ts = timestep_subsequence(978, 100).unwrap();
        assert_eq!(ts[0], 978);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.len() <= 100);
        for w in ts.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn schedule_json_round_trips_exactly() {
        let s = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let back = NoiseSchedule::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.content_hash(), back.content_hash());
    }

    #[test]
    fn content_hash_detects_any_beta_change() {
        let a = make_linear_schedule(100, 1e-4, 0.02).unwrap();
        let mut betas: Vec<f64> = (1..=100).map(|t| a.beta(t)).collect();
        betas[50] += 1e-12;
        let b = NoiseSchedule::from_betas(betas).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn sampler_config_validation() {
        let s = default_schedule();
        assert!(SamplerConfig { num_steps: 100, eta: 0.0, seed: 0 }.validate(&s).is_ok());
        assert!(SamplerConfig { num_steps: 0, eta: 0.0, seed: 0 }.validate(&s).is_err());
        assert!(SamplerConfig { num_steps: 1001, eta: 0.0, seed: 0 }.validate(&s).is_err());
        assert!(SamplerConfig { num_steps: 100, eta: 1.5, seed: 0 }.validate(&s).is_err());
    }
}
