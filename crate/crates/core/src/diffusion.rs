//! Observation-anchored residual diffusion.
//!
//! The forward chain moves the clean waveform `x` toward the observation
//! `y` along the residual `z = y - x`:
//!
//! ```text
//! q(x_t | x_{t-1}, y) = N(x_{t-1} + alpha_t z, kappa^2 alpha_t I)
//! q(x_t | x, y)       = N(x + eta_t z,         kappa^2 eta_t I)
//! ```
//!
//! Sampling starts next to the observation, `x_T = y + kappa sqrt(eta_T) eps`,
//! and walks back through the Gaussian posterior
//!
//! ```text
//! q(x_{s} | x_t, x, y) = N((eta_s / eta_t) x_t + (alpha / eta_t) x,
//!                          kappa^2 (eta_s / eta_t) alpha I),   alpha = eta_t - eta_s
//! ```
//!
//! with the denoiser's estimate of `x` substituted. `eta_0 = 0`, so the last
//! reverse step returns the denoiser output itself.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid respacing: {steps} steps for a {total}-step chain")]
    InvalidRespacing { steps: usize, total: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("timestep {t} outside 1..={total}")]
    InvalidTimestep { t: usize, total: usize },
    #[error("denoiser failed: {0}")]
    Denoiser(String),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Schedule and sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub eta1: f64,
    #[serde(rename = "etaT")]
    pub eta_final: f64,
    pub p: f64,
    pub kappa: f64,
    pub sample_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 1000, eta1: 0.001, eta_final: 0.999, p: 1.0, kappa: 0.7, sample_steps: 20 }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.eta1, self.eta_final, self.p, self.kappa)
    }

    pub fn respaced(&self) -> Result<RespacedSchedule> {
        respace(&self.schedule()?, self.sample_steps)
    }
}

/// Monotone schedule `eta_1 < ... < eta_T` with increments `alpha_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    eta: Vec<f64>,
    alpha: Vec<f64>,
    kappa: f64,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.eta.len()
    }

    /// `eta_t` for `t` in `0..=T`, with `eta_0 = 0`.
    pub fn eta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.eta[t - 1]
        }
    }

    /// `alpha_t = eta_t - eta_{t-1}` for `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    /// Same schedule with a different noise scale.
    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self { kappa, ..self.clone() }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::InvalidTimestep { t, total: self.steps() });
        }
        Ok(())
    }
}

/// Schedule geometric in `sqrt(eta)`:
///
/// ```text
/// sqrt(eta_t) = sqrt(eta_1) * b^(beta_t)
/// beta_t      = ((t - 1) / (T - 1))^p * (T - 1)
/// b           = exp(ln(eta_T / eta_1) / (2 (T - 1)))
/// ```
///
/// The endpoints are pinned to `eta1` and `eta_final` exactly.
pub fn make_schedule(steps: usize, eta1: f64, eta_final: f64, p: f64, kappa: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(DiffusionError::InvalidSchedule(format!("T = {steps} < 2")));
    }
    if !(0.0 < eta1 && eta1 < eta_final && eta_final < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < eta1 ({eta1}) < etaT ({eta_final}) < 1"
        )));
    }
    if !(p > 0.0) || !(kappa >= 0.0) {
        return Err(DiffusionError::InvalidSchedule(format!("p = {p}, kappa = {kappa}")));
    }
    let span = (steps - 1) as f64;
    let log_base = (eta_final / eta1).ln() / (2.0 * span);
    let mut eta: Vec<f64> = (0..steps)
        .map(|i| {
            let beta = (i as f64 / span).powf(p) * span;
            let root = eta1.sqrt() * (log_base * beta).exp();
            root * root
        })
        .collect();
    eta[0] = eta1;
    eta[steps - 1] = eta_final;
    if eta.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(DiffusionError::InvalidSchedule("eta is not strictly increasing".into()));
    }
    let alpha = std::iter::once(eta[0]).chain(eta.windows(2).map(|w| w[1] - w[0])).collect();
    Ok(NoiseSchedule { eta, alpha, kappa })
}

/// A sparse, increasing subset of timesteps ending at `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    steps: Vec<usize>,
    parent: NoiseSchedule,
}

impl RespacedSchedule {
    /// Selected timesteps, increasing.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn parent(&self) -> &NoiseSchedule {
        &self.parent
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep preceding the `i`-th selected step (0 before the first).
    pub fn prev_step(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.steps[i - 1]
        }
    }

    /// Effective increment `eta_{s_i} - eta_{s_{i-1}}`.
    pub fn alpha_tilde(&self, i: usize) -> f64 {
        self.parent.eta(self.steps[i]) - self.parent.eta(self.prev_step(i))
    }

    /// `(t, t_prev)` pairs in sampling order, from `T` down.
    pub fn reverse_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.steps.len()).rev().map(|i| (self.steps[i], self.prev_step(i)))
    }
}

/// Selects `count` timesteps spaced uniformly in `t` over `1..=T`, always
/// including `T`.
pub fn respace(sched: &NoiseSchedule, count: usize) -> Result<RespacedSchedule> {
    let total = sched.steps();
    if count < 2 || count > total {
        return Err(DiffusionError::InvalidRespacing { steps: count, total });
    }
    let span = (total - 1) as f64 / (count - 1) as f64;
    let steps: Vec<usize> = (0..count).map(|i| 1 + (i as f64 * span).round() as usize).collect();
    debug_assert!(steps.windows(2).all(|w| w[1] > w[0]));
    debug_assert_eq!(*steps.last().unwrap(), total);
    Ok(RespacedSchedule { steps, parent: sched.clone() })
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DiffusionError::LengthMismatch(a, b));
    }
    Ok(())
}

/// One forward transition: a draw from `N(x_prev + alpha_t z, kappa^2 alpha_t I)`.
pub fn forward_step(x_prev: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    check_len(x_prev.len(), z.len())?;
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let sd = sched.kappa * a.sqrt();
    Ok(x_prev.iter().zip(z).map(|(x, z)| x + a * z + sd * normal(rng)).collect())
}

/// Closed-form marginal: a draw from `N(x + eta_t z, kappa^2 eta_t I)`
/// with `z = y - x`.
pub fn forward_marginal(x: &[f64], y: &[f64], t: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    check_len(x.len(), y.len())?;
    sched.check_t(t)?;
    let e = sched.eta(t);
    let sd = sched.kappa * e.sqrt();
    Ok(x.iter().zip(y).map(|(x, y)| x + e * (y - x) + sd * normal(rng)).collect())
}

/// Starting point of the reverse chain: `y + kappa sqrt(eta_T) eps`.
pub fn ocn_init(y: &[f64], sched: &NoiseSchedule, rng: &mut Rng) -> Vec<f64> {
    let sd = sched.kappa * sched.eta(sched.steps()).sqrt();
    y.iter().map(|v| v + sd * normal(rng)).collect()
}

/// Mean vector and scalar variance of the posterior from step `t` back to
/// `t_prev`, given an estimate `x0_hat` of the clean signal.
pub fn posterior_params(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    check_len(x_t.len(), x0_hat.len())?;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(DiffusionError::InvalidTimestep { t: t_prev, total: t - 1 });
    }
    Ok(posterior_from_etas(x_t, x0_hat, sched.eta(t), sched.eta(t_prev), sched.kappa))
}

/// Posterior in terms of `eta_t` and `eta_prev` directly.
pub fn posterior_from_etas(x_t: &[f64], x0_hat: &[f64], eta_t: f64, eta_prev: f64, kappa: f64) -> (Vec<f64>, f64) {
    let alpha = eta_t - eta_prev;
    let (ct, c0) = (eta_prev / eta_t, alpha / eta_t);
    let mean = x_t.iter().zip(x0_hat).map(|(a, b)| ct * a + c0 * b).collect();
    (mean, kappa * kappa * ct * alpha)
}

/// Maps a noisy state, the observation and the timestep to an estimate of
/// the clean waveform.
pub trait Denoiser: Sync {
    fn denoise(&self, x_t: &[f64], y: &[f64], t: usize) -> Result<Vec<f64>>;

    /// Batched [`Denoiser::denoise`]; implementations may override for speed.
    fn denoise_batch(&self, x_t: &[Vec<f64>], y: &[&[f64]], t: &[usize]) -> Result<Vec<Vec<f64>>> {
        x_t.iter()
            .zip(y)
            .zip(t)
            .map(|((x, y), &t)| self.denoise(x, y, t))
            .collect()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, x_t: &[f64], y: &[f64], t: usize) -> Result<Vec<f64>> {
        (**self).denoise(x_t, y, t)
    }

    fn denoise_batch(&self, x_t: &[Vec<f64>], y: &[&[f64]], t: &[usize]) -> Result<Vec<Vec<f64>>> {
        (**self).denoise_batch(x_t, y, t)
    }
}

/// Returns the true clean waveform of whichever observation it is shown.
#[derive(Debug, Clone, Default)]
pub struct OracleDenoiser {
    truth: HashMap<Vec<u64>, Vec<f64>>,
}

impl OracleDenoiser {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Self {
        let truth = pairs
            .into_iter()
            .map(|(y, x)| (y.iter().map(|v| v.to_bits()).collect(), x.to_vec()))
            .collect();
        Self { truth }
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, _x_t: &[f64], y: &[f64], _t: usize) -> Result<Vec<f64>> {
        let key: Vec<u64> = y.iter().map(|v| v.to_bits()).collect();
        self.truth
            .get(&key)
            .cloned()
            .ok_or_else(|| DiffusionError::Denoiser("oracle has no ground truth for this observation".into()))
    }
}

/// Current point of a reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub y: Vec<f64>,
}

fn posterior_draw(x_t: &[f64], x0_hat: &[f64], t: usize, t_prev: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    check_len(x0_hat.len(), x_t.len())?;
    let (mean, var) = posterior_params(x_t, x0_hat, t, t_prev, sched)?;
    if sched.eta(t_prev) == 0.0 {
        return Ok(mean);
    }
    let sd = var.sqrt();
    Ok(mean.into_iter().map(|m| m + sd * normal(rng)).collect())
}

/// One reverse transition from `state.t` to `t_prev`.
pub fn reverse_step<D: Denoiser + ?Sized>(
    state: &DiffusionState,
    denoiser: &D,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DiffusionState> {
    check_len(state.x_t.len(), state.y.len())?;
    let x0_hat = denoiser.denoise(&state.x_t, &state.y, state.t)?;
    let x_t = posterior_draw(&state.x_t, &x0_hat, state.t, t_prev, sched, rng)?;
    Ok(DiffusionState { x_t, t: t_prev, y: state.y.clone() })
}

/// Full reverse chain over the selected steps, starting next to `y`.
pub fn sample<D: Denoiser + ?Sized>(y: &[f64], denoiser: &D, respaced: &RespacedSchedule, rng: &mut Rng) -> Result<Vec<f64>> {
    let sched = respaced.parent();
    let mut state = DiffusionState { x_t: ocn_init(y, sched, rng), t: sched.steps(), y: y.to_vec() };
    for (t, t_prev) in respaced.reverse_pairs() {
        debug_assert_eq!(state.t, t);
        state = reverse_step(&state, denoiser, t_prev, sched, rng)?;
    }
    Ok(state.x_t)
}

/// [`sample`] over many observations with one batched denoiser call per
/// step. Observation `i` uses stream `first_index + i` of `seed`, giving the
/// same result as `sample` with that stream.
pub fn sample_batch<D: Denoiser + ?Sized>(
    ys: &[&[f64]],
    denoiser: &D,
    respaced: &RespacedSchedule,
    seed: u64,
    first_index: u64,
) -> Result<Vec<Vec<f64>>> {
    let sched = respaced.parent();
    let mut rngs: Vec<Rng> = (0..ys.len()).map(|i| sample_stream(seed, first_index + i as u64)).collect();
    let mut xs: Vec<Vec<f64>> = ys.iter().zip(&mut rngs).map(|(y, r)| ocn_init(y, sched, r)).collect();
    for (t, t_prev) in respaced.reverse_pairs() {
        let ts = vec![t; ys.len()];
        let x0 = denoiser.denoise_batch(&xs, ys, &ts)?;
        if x0.len() != ys.len() {
            return Err(DiffusionError::LengthMismatch(x0.len(), ys.len()));
        }
        for ((x, x0), r) in xs.iter_mut().zip(&x0).zip(&mut rngs) {
            *x = posterior_draw(x, x0, t, t_prev, sched, r)?;
        }
    }
    Ok(xs)
}

/// Sampling stream of observation `index` under `seed`.
pub fn sample_stream(seed: u64, index: u64) -> Rng {
    rng::indexed_stream(seed, "sample", index)
}

/// A training input: noisy state and its timestep. The target is the clean
/// segment itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_t: Vec<f64>,
    pub t: usize,
}

/// Draws `t` uniformly from `1..=T` and `x_t` from the forward marginal.
pub fn training_pair(x: &[f64], y: &[f64], sched: &NoiseSchedule, rng: &mut Rng) -> Result<TrainingPair> {
    let t = rng.random_range(1..=sched.steps());
    let x_t = forward_marginal(x, y, t, sched, rng)?;
    Ok(TrainingPair { x_t, t })
}

/// Batch objective: mean over the batch of `||pred - target||^2`.
pub fn batch_loss(preds: &[Vec<f64>], targets: &[&[f64]]) -> Result<f64> {
    check_len(preds.len(), targets.len())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, x) in preds.iter().zip(targets) {
        check_len(p.len(), x.len())?;
        total += p.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl Denoiser for Zero {
        fn denoise(&self, x_t: &[f64], _y: &[f64], _t: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; x_t.len()])
        }
    }

    struct Short;
    impl Denoiser for Short {
        fn denoise(&self, _x_t: &[f64], _y: &[f64], _t: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; 3])
        }
    }

    fn default_schedule() -> NoiseSchedule {
        DiffusionConfig::default().schedule().unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = default_schedule();
        assert_eq!(s.eta(1), 0.001);
        assert_eq!(s.eta(1000), 0.999);
        assert_eq!(s.eta(0), 0.0);
        assert!(s.etas().windows(2).all(|w| w[1] > w[0]));
        assert!(s.alphas().iter().all(|&a| a > 0.0));
        assert!((s.alphas().iter().sum::<f64>() - 0.999).abs() < 1e-10);
        // interior points follow the geometric law in sqrt(eta)
        let b = ((0.999f64 / 0.001).ln() / (2.0 * 999.0)).exp();
        let mid = (0.001f64.sqrt() * b.powf(499.0)).powi(2);
        assert!((s.eta(500) - mid).abs() < 1e-12);

        let tiny = make_schedule(2, 0.1, 0.9, 1.0, 0.7).unwrap();
        assert_eq!(tiny.etas(), &[0.1, 0.9]);
        assert!((tiny.alpha(1) - 0.1).abs() < 1e-15 && (tiny.alpha(2) - 0.8).abs() < 1e-15);

        let bent = make_schedule(50, 0.01, 0.9, 0.3, 0.7).unwrap();
        assert!(bent.etas().windows(2).all(|w| w[1] > w[0]));

        assert!(make_schedule(1, 0.1, 0.9, 1.0, 0.7).is_err());
        assert!(make_schedule(10, 0.9, 0.1, 1.0, 0.7).is_err());
        assert!(make_schedule(10, 0.0, 0.5, 1.0, 0.7).is_err());
        assert!(make_schedule(10, 0.1, 1.0, 1.0, 0.7).is_err());
    }

    #[test]
    fn respacing() {
        let s = default_schedule();
        let r = respace(&s, 20).unwrap();
        assert_eq!(r.len(), 20);
        assert_eq!(*r.steps().last().unwrap(), 1000);
        assert_eq!(r.steps()[0], 1);
        assert!(r.steps().windows(2).all(|w| w[1] > w[0]));
        let full = respace(&s, 1000).unwrap();
        assert_eq!(full.steps(), (1..=1000).collect::<Vec<_>>().as_slice());
        for i in 0..1000 {
            assert!((full.alpha_tilde(i) - s.alpha(i + 1)).abs() < 1e-15);
        }
        for count in [2, 3, 7, 20, 333, 1000] {
            let r = respace(&s, count).unwrap();
            let total: f64 = (0..r.len()).map(|i| r.alpha_tilde(i)).sum();
            assert!((total - 0.999).abs() < 1e-12);
        }
        assert!(respace(&s, 1).is_err());
        assert!(respace(&s, 1001).is_err());
    }

    #[test]
    fn degenerate_kernels() {
        let s = default_schedule().with_kappa(0.0);
        let mut r = rng::stream(0, "k");
        let x = vec![0.2, 0.4, 0.9];
        let z = vec![0.5, -0.1, 0.3];
        let out = forward_step(&x, &z, 10, &s, &mut r).unwrap();
        for i in 0..3 {
            assert_eq!(out[i], x[i] + s.alpha(10) * z[i]);
        }
        assert_eq!(forward_step(&x, &[0.0; 3], 10, &s, &mut r).unwrap(), x);
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
        let end = forward_marginal(&x, &y, 1000, &s, &mut r).unwrap();
        for i in 0..3 {
            assert!((end[i] - y[i]).abs() <= 0.001 * z[i].abs() + 1e-15);
        }
        for t in [1, 50, 1000] {
            assert_eq!(forward_marginal(&x, &x, t, &s, &mut r).unwrap(), x);
        }
        assert_eq!(ocn_init(&y, &s, &mut r), y);
        assert!(forward_step(&x, &z, 0, &s, &mut r).is_err());
        assert!(forward_marginal(&x, &y[..2], 3, &s, &mut r).is_err());
    }

    #[test]
    fn forward_step_moments() {
        let s = default_schedule();
        let mut r = rng::stream(1, "moments");
        let (x, z, t) = (0.3, 0.8, 400);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| forward_step(&[x], &[z], t, &s, &mut r).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 0.49 * s.alpha(t);
        assert!((mean - (x + s.alpha(t) * z)).abs() <= 4.0 * want_var.sqrt() / (n as f64).sqrt());
        assert!((var / want_var - 1.0).abs() <= 0.05);
    }

    #[test]
    fn ocn_moments() {
        let s = default_schedule();
        let mut r = rng::stream(2, "ocn");
        let y = [0.25];
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| ocn_init(&y, &s, &mut r)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 0.49 * 0.999;
        assert!((mean - 0.25).abs() <= 4.0 * (want / n as f64).sqrt());
        assert!((var / want - 1.0).abs() <= 0.05);
        // against the forward marginal at T for an arbitrary x: same
        // variance, means within (1 - eta_T) max|z|
        let x = [0.9];
        let m: Vec<f64> = (0..n).map(|_| forward_marginal(&x, &y, 1000, &s, &mut r).unwrap()[0]).collect();
        let m_mean = m.iter().sum::<f64>() / n as f64;
        let m_var = m.iter().map(|d| (d - m_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m_var / want - 1.0).abs() <= 0.05);
        let se = 4.0 * (2.0 * want / n as f64).sqrt();
        assert!((m_mean - mean).abs() <= 0.001 * 0.65 + se);
    }

    #[test]
    fn posterior_examples() {
        let s = make_schedule(4, 0.25, 0.75, 1.0, 0.7).unwrap();
        let (mean, var) = posterior_params(&[2.0], &[5.0], 1, 0, &s).unwrap();
        assert_eq!((mean, var), (vec![5.0], 0.0));
        let (mean, var) = posterior_from_etas(&[2.0], &[0.0], 0.5, 0.25, 0.7);
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((var - 0.06125).abs() < 1e-15);
        let (mean, _) = posterior_from_etas(&[2.0], &[9.0], 0.5, 0.5 * (1.0 - 1e-12), 0.7);
        assert!((mean[0] - 2.0).abs() < 1e-10);
        assert!(posterior_params(&[0.0], &[0.0], 2, 2, &s).is_err());
    }

    #[test]
    fn reverse_step_matches_posterior_moments() {
        let s = default_schedule();
        let truth = vec![0.4];
        let oracle = OracleDenoiser::new([(&[0.6][..], &truth[..])]);
        let state = DiffusionState { x_t: vec![0.7], t: 600, y: vec![0.6] };
        let (mean, var) = posterior_params(&state.x_t, &truth, 600, 300, &s).unwrap();
        let mut r = rng::stream(3, "rev");
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| reverse_step(&state, &oracle, 300, &s, &mut r).unwrap().x_t[0]).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - mean[0]).abs() <= 4.0 * (var / n as f64).sqrt());
        assert!((v / var - 1.0).abs() <= 0.05);

        let last = reverse_step(&DiffusionState { t: 1, ..state.clone() }, &oracle, 0, &s, &mut r).unwrap();
        assert_eq!(last.x_t, truth);
        assert_eq!(last.t, 0);
        assert!(matches!(reverse_step(&state, &Short, 300, &s, &mut r), Err(DiffusionError::LengthMismatch(3, 1))));
    }

    #[test]
    fn sampling_with_oracle_and_zero_denoisers() {
        let cfg = DiffusionConfig { kappa: 0.0, ..Default::default() };
        let r20 = cfg.respaced().unwrap();
        let x = vec![0.1, 0.5, 0.9, 0.3];
        let y = vec![0.2, 0.1, 1.0, 0.0];
        let oracle = OracleDenoiser::new([(&y[..], &x[..])]);
        let out = sample(&y, &oracle, &r20, &mut rng::stream(0, "s")).unwrap();
        assert!(out.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-9));
        let zero = sample(&y, &Zero, &r20, &mut rng::stream(0, "s")).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
        // with noise the final step is still the denoiser output
        let noisy = DiffusionConfig::default().respaced().unwrap();
        let out = sample(&y, &oracle, &noisy, &mut rng::stream(0, "s")).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn batched_sampling_matches_single() {
        let r = DiffusionConfig { sample_steps: 5, ..Default::default() }.respaced().unwrap();
        struct Shrink;
        impl Denoiser for Shrink {
            fn denoise(&self, x_t: &[f64], y: &[f64], t: usize) -> Result<Vec<f64>> {
                Ok(x_t.iter().zip(y).map(|(a, b)| 0.5 * a + 0.25 * b + 1e-4 * t as f64).collect())
            }
        }
        let ys = [vec![0.1, 0.4, 0.2], vec![0.9, 0.0, 0.3], vec![0.5, 0.5, 0.6]];
        let refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let batch = sample_batch(&refs, &Shrink, &r, 17, 4).unwrap();
        for (i, y) in ys.iter().enumerate() {
            let single = sample(y, &Shrink, &r, &mut sample_stream(17, 4 + i as u64)).unwrap();
            assert_eq!(batch[i], single);
        }
    }

    #[test]
    fn training_pairs_and_loss() {
        let s = default_schedule();
        let x = vec![0.0, 0.5, 1.0];
        let y = vec![0.3, 0.2, 0.6];
        let a = training_pair(&x, &y, &s, &mut rng::stream(5, "tp")).unwrap();
        let b = training_pair(&x, &y, &s, &mut rng::stream(5, "tp")).unwrap();
        assert_eq!(a, b);
        assert!((1..=1000).contains(&a.t));
        assert_eq!(batch_loss(&[x.clone()], &[&x]).unwrap(), 0.0);
        let z2: f64 = x.iter().zip(&y).map(|(a, b)| (b - a) * (b - a)).sum();
        assert!((batch_loss(&[y.clone(), y.clone()], &[&x, &x]).unwrap() - z2).abs() < 1e-15);
    }
}
