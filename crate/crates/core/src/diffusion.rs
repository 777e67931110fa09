//! Variance-preserving forward process, ε-prediction loss and the DDPM sampler.
//!
//! Steps are indexed `0..=K`; `alpha_bar[0] = 1`. The one-step kernel moves
//! `A^k -> A^{k+1}` with `beta[k+1]`, so composing `k` kernels starting from
//! `A^0` has the closed-form marginal `sqrt(alpha_bar[k]) A^0 + sqrt(1 - alpha_bar[k]) eps`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{FeedForwardNet, Gradients, SeededRng};

/// Width of the sinusoidal step embedding fed to every denoiser and classifier.
pub const STEP_EMBED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 100,
            kind: ScheduleKind::Linear,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }
}

/// Upper bound on `alpha_bar[K]` enforced by [`build_schedule`].
pub const TERMINAL_ALPHA_BAR_MAX: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Builds a schedule and checks that the terminal marginal is close to N(0, I).
pub fn build_schedule(params: ScheduleParams) -> Result<NoiseSchedule> {
    let s = NoiseSchedule::new(params)?;
    let terminal = s.alpha_bar(s.steps());
    if terminal >= TERMINAL_ALPHA_BAR_MAX {
        return Err(Error::Schedule(format!(
            "alpha_bar[{}] = {terminal:.17e} is not below {TERMINAL_ALPHA_BAR_MAX}; \
             the terminal marginal is not close to standard normal",
            s.steps()
        )));
    }
    Ok(s)
}

impl NoiseSchedule {
    /// Builds the schedule, validating only the beta range. Most callers want
    /// [`build_schedule`], which also checks the terminal noise level.
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            steps,
            kind,
            beta_min,
            beta_max,
        } = params;
        if steps == 0 {
            return Err(Error::Schedule("step count must be positive".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let mut beta = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Linear => {
                for (k, b) in beta.iter_mut().enumerate().skip(1) {
                    *b = if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * (k - 1) as f64 / (steps - 1) as f64
                    };
                }
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for k in 1..=steps {
            alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        }
        Ok(Self {
            params,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleParams {
            steps,
            kind: ScheduleKind::Linear,
            beta_min,
            beta_max,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// K.
    pub fn steps(&self) -> usize {
        self.params.steps
    }

    /// `beta[k]` for `k` in `1..=K`; `beta[0]` is 0.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `sqrt(alpha_bar / (1 - alpha_bar))`; infinite at `k = 0`.
    pub fn snr_sqrt(&self, k: usize) -> f64 {
        let ab = self.alpha_bar[k];
        (ab / (1.0 - ab)).sqrt()
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            return Err(Error::StepOutOfRange {
                k,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// `S x d_a` action chunk, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * dim {
            return Err(Error::Shape {
                expected: horizon * dim,
                got: data.len(),
            });
        }
        Ok(Self { horizon, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            horizon: rows.len(),
            dim,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Closed-form sample of `q(A^k | A^0)`.
pub fn forward_noise(schedule: &NoiseSchedule, a0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(k)?;
    if eps.len() != a0.len() {
        return Err(Error::Shape {
            expected: a0.len(),
            got: eps.len(),
        });
    }
    if k == 0 {
        return Ok(a0.to_vec());
    }
    let ab = schedule.alpha_bar(k);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
}

/// One kernel step `A^k -> A^{k+1} ~ N(sqrt(1 - beta[k+1]) A^k, beta[k+1] I)`.
pub fn forward_kernel_step(
    schedule: &NoiseSchedule,
    ak: &[f64],
    k: usize,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if k >= schedule.steps() {
        return Err(Error::StepOutOfRange {
            k,
            max: schedule.steps() - 1,
        });
    }
    if eps.len() != ak.len() {
        return Err(Error::Shape {
            expected: ak.len(),
            got: eps.len(),
        });
    }
    let b = schedule.beta(k + 1);
    let (s, n) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(ak.iter().zip(eps).map(|(a, e)| s * a + n * e).collect())
}

/// Sinusoidal embedding of the diffusion step.
pub fn step_embedding(k: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (k as f64 * freq).sin_cos();
        out[2 * i] = s;
        out[2 * i + 1] = c;
    }
}

/// Denoiser / classifier input row: `[embed(k), noisy chunk, state]`.
pub fn conditioned_input(k: usize, noisy: &[f64], state: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), STEP_EMBED_DIM + noisy.len() + state.len());
    step_embedding(k, &mut out[..STEP_EMBED_DIM]);
    out[STEP_EMBED_DIM..STEP_EMBED_DIM + noisy.len()].copy_from_slice(noisy);
    out[STEP_EMBED_DIM + noisy.len()..].copy_from_slice(state);
}

pub fn conditioned_width(chunk_len: usize, state_len: usize) -> usize {
    STEP_EMBED_DIM + chunk_len + state_len
}

/// Anything that predicts the injected noise.
pub trait Denoiser {
    fn predict_eps(&self, k: usize, noisy: &[f64], state: &[f64]) -> Result<Vec<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(usize, &[f64], &[f64]) -> Result<Vec<f64>>,
{
    fn predict_eps(&self, k: usize, noisy: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        self(k, noisy, state)
    }
}

/// A feedforward net reading `[embed(k), noisy chunk, state]`.
#[derive(Debug, Clone, Copy)]
pub struct NetDenoiser<'a>(pub &'a FeedForwardNet);

impl Denoiser for NetDenoiser<'_> {
    fn predict_eps(&self, k: usize, noisy: &[f64], state: &[f64]) -> Result<Vec<f64>> {
        let mut input = vec![0.0; conditioned_width(noisy.len(), state.len())];
        conditioned_input(k, noisy, state, &mut input);
        self.0.forward(&input)
    }
}

fn check_loss_step(schedule: &NoiseSchedule, k: usize) -> Result<()> {
    if k == 0 || k > schedule.steps() {
        return Err(Error::StepOutOfRange {
            k,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// `||eps_hat(k, A^k, s) - eps||^2` for a fresh `eps`.
pub fn eps_loss_with<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    a0: &[f64],
    state: &[f64],
    k: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    check_loss_step(schedule, k)?;
    let eps = rng.normal_vec(a0.len());
    let noisy = forward_noise(schedule, a0, k, &eps)?;
    let pred = denoiser.predict_eps(k, &noisy, state)?;
    let loss: f64 = pred.iter().zip(&eps).map(|(p, e)| (p - e) * (p - e)).sum();
    if !loss.is_finite() {
        return Err(Error::non_finite("eps loss", format!("loss {loss} at k={k}")));
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct EpsLoss {
    pub loss: f64,
    pub grads: Gradients,
    pub eps: Vec<f64>,
}

/// Single-sample ε-prediction loss with parameter gradients.
pub fn eps_loss(
    net: &FeedForwardNet,
    schedule: &NoiseSchedule,
    a0: &[f64],
    state: &[f64],
    k: usize,
    rng: &mut SeededRng,
) -> Result<EpsLoss> {
    check_loss_step(schedule, k)?;
    let eps = rng.normal_vec(a0.len());
    eps_loss_given(net, schedule, a0, state, k, eps)
}

/// [`eps_loss`] with the noise supplied by the caller.
pub fn eps_loss_given(
    net: &FeedForwardNet,
    schedule: &NoiseSchedule,
    a0: &[f64],
    state: &[f64],
    k: usize,
    eps: Vec<f64>,
) -> Result<EpsLoss> {
    check_loss_step(schedule, k)?;
    let noisy = forward_noise(schedule, a0, k, &eps)?;
    let mut input = vec![0.0; conditioned_width(a0.len(), state.len())];
    conditioned_input(k, &noisy, state, &mut input);
    let x = Array2::from_shape_vec((1, input.len()), input).expect("row");
    let (out, cache) = net.forward_train(x.view())?;
    let diff: Vec<f64> = out.iter().zip(&eps).map(|(p, e)| p - e).collect();
    let loss: f64 = diff.iter().map(|d| d * d).sum();
    if !loss.is_finite() {
        return Err(Error::non_finite("eps loss", format!("loss {loss} at k={k}")));
    }
    let up = Array2::from_shape_vec((1, diff.len()), diff.iter().map(|d| 2.0 * d).collect())
        .expect("row");
    let grads = net.backward_batch(&cache, up.view())?;
    Ok(EpsLoss { loss, grads, eps })
}

/// Reverse-process noise variance at non-final steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `beta_t` ("fixed large"); exact for unit-variance Gaussian data.
    #[default]
    Beta,
    /// `beta_t (1 - alpha_bar_prev) / (1 - alpha_bar_t)` ("fixed small").
    PosteriorBeta,
}

/// Visited steps, descending: `1 + stride*(n-1), ..., 1 + stride, 1` with `stride = K / n`.
pub fn inference_steps(schedule: &NoiseSchedule, n: usize) -> Result<Vec<usize>> {
    let k = schedule.steps();
    if n == 0 || n > k {
        return Err(Error::Config(format!(
            "inference steps must be in 1..={k}, got {n}"
        )));
    }
    let stride = k / n;
    Ok((0..n).rev().map(|j| 1 + j * stride).collect())
}

/// Ancestral DDPM sampling where the noise prediction at visit `i` (0-based, in
/// sampling order) at step `k` comes from `eps_at(i, k, x)`.
pub fn ddpm_sample_with<F>(
    schedule: &NoiseSchedule,
    dim: usize,
    n_steps: usize,
    variance: PosteriorVariance,
    rng: &mut SeededRng,
    mut eps_at: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, usize, &[f64]) -> Result<Vec<f64>>,
{
    let visits = inference_steps(schedule, n_steps)?;
    let mut x = rng.normal_vec(dim);
    for (i, &t) in visits.iter().enumerate() {
        let prev = visits.get(i + 1).copied().unwrap_or(0);
        let eps = eps_at(i, t, &x)?;
        if eps.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: eps.len(),
            });
        }
        let ab_t = schedule.alpha_bar(t);
        let ab_p = schedule.alpha_bar(prev);
        let beta_t = 1.0 - ab_t / ab_p;
        let c_x0 = ab_p.sqrt() * beta_t / (1.0 - ab_t);
        let c_xt = (1.0 - beta_t).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let (sa, sn) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let mut next: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(xi, ei)| {
                let x0 = (xi - sn * ei) / sa;
                c_x0 * x0 + c_xt * xi
            })
            .collect();
        if prev > 0 {
            let var = match variance {
                PosteriorVariance::Beta => beta_t,
                PosteriorVariance::PosteriorBeta => beta_t * (1.0 - ab_p) / (1.0 - ab_t),
            };
            let sd = var.sqrt();
            for v in &mut next {
                *v += sd * rng.normal();
            }
        }
        if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
            return Err(Error::non_finite(
                "ddpm sample",
                format!("value {bad} after step {t} (visit {i})"),
            ));
        }
        x = next;
    }
    Ok(x)
}

pub fn ddpm_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    state: &[f64],
    dim: usize,
    n_steps: usize,
    variance: PosteriorVariance,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    ddpm_sample_with(schedule, dim, n_steps, variance, rng, |_, k, x| {
        denoiser.predict_eps(k, x, state)
    })
}
