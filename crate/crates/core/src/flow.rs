//! Rectified-flow schedule, latents and the noising/denoising primitives.
//!
//! A latent lives on the straight line between clean data and Gaussian noise:
//!
//! ```text
//! x_t = (1 - σ_t) · x_0 + σ_t · ε
//! ```
//!
//! Denoising integrates a velocity field `v ≈ ε - x_0` from σ = 1 down to
//! σ = 0 with explicit Euler steps `x_{k+1} = x_k + (σ_{k+1} - σ_k) · v`.
//!
//! Noise is produced by generator "v1": a ChaCha20 stream (`rand_chacha`)
//! seeded with `seed_from_u64(seed)`, mapped through `rand_distr`'s
//! `StandardNormal`, filled in token-major order (row, column, channel).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest timestep label. Labels are `round(1000 · σ)`.
pub const MAX_TIME_LABEL: u32 = 1000;

/// A grid of `height × width` image tokens with `dim` channels each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Timestep label the latent lives at; 0 for clean data.
    pub time_label: u32,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            time_label: 0,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn from_vec(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}x{} = {} values, got {}",
                height,
                width,
                dim,
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            time_label: 0,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * dim);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..dim {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self {
            height,
            width,
            dim,
            time_label: 0,
            data,
        }
    }

    pub fn with_time_label(mut self, label: u32) -> Self {
        self.time_label = label;
        self
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn token_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Tokens in row-major order.
    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn ensure_same_shape(&self, other: &Latent, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Euclidean norm of each token's channel vector, row-major.
    pub fn channel_norms(&self) -> Vec<f64> {
        self.tokens()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self + scale · other`, entrywise.
    pub fn axpy(&self, scale: f64, other: &Latent) -> Latent {
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Latent {
            data,
            ..self.clone()
        }
    }
}

/// Gaussian noise tied to a seed; see the module docs for the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub seed: u64,
    pub values: Latent,
}

impl NoiseSample {
    pub fn new(seed: u64, height: usize, width: usize, dim: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..height * width * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            seed,
            values: Latent {
                height,
                width,
                dim,
                time_label: MAX_TIME_LABEL,
                data,
            },
        }
    }

    pub fn like(seed: u64, latent: &Latent) -> Self {
        Self::new(seed, latent.height, latent.width, latent.dim)
    }
}

/// Discrete noise levels for rectified-flow sampling.
///
/// `sigmas` has `num_steps + 1` entries running from exactly 1 down to
/// exactly 0; `timesteps` holds the matching integer labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleDoc", into = "ScheduleDoc")]
pub struct Schedule {
    num_steps: usize,
    sigmas: Vec<f64>,
    timesteps: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    num_steps: usize,
    sigmas: Vec<f64>,
    timesteps: Vec<u32>,
}

impl TryFrom<ScheduleDoc> for Schedule {
    type Error = Error;

    fn try_from(doc: ScheduleDoc) -> Result<Self> {
        Schedule::from_parts(doc.num_steps, doc.sigmas, doc.timesteps)
    }
}

impl From<Schedule> for ScheduleDoc {
    fn from(s: Schedule) -> Self {
        ScheduleDoc {
            num_steps: s.num_steps,
            sigmas: s.sigmas,
            timesteps: s.timesteps,
        }
    }
}

impl Schedule {
    /// σ_k = 1 - k/N.
    pub fn linear(num_steps: usize) -> Result<Self> {
        Self::from_sigma_fn(num_steps, |s| s)
    }

    /// Shifted schedule `σ' = shift·σ / (1 + (shift - 1)·σ)`, which keeps the
    /// endpoints and spends more steps at high noise for `shift > 1`.
    pub fn shifted(num_steps: usize, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "shift must be positive, got {shift}"
            )));
        }
        Self::from_sigma_fn(num_steps, |s| shift * s / (1.0 + (shift - 1.0) * s))
    }

    fn from_sigma_fn(num_steps: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be positive".into()));
        }
        let n = num_steps as f64;
        let mut sigmas: Vec<f64> = (0..=num_steps)
            .map(|k| f((num_steps - k) as f64 / n))
            .collect();
        sigmas[0] = 1.0;
        sigmas[num_steps] = 0.0;
        let timesteps = sigmas
            .iter()
            .map(|s| (s * MAX_TIME_LABEL as f64).round() as u32)
            .collect();
        Self::from_parts(num_steps, sigmas, timesteps)
    }

    /// Builds a schedule from explicit tables, checking every invariant.
    pub fn from_parts(num_steps: usize, sigmas: Vec<f64>, timesteps: Vec<u32>) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be positive".into()));
        }
        if sigmas.len() != num_steps + 1 || timesteps.len() != num_steps + 1 {
            return Err(Error::InvalidSchedule(format!(
                "expected {} sigmas and timesteps, got {} and {}",
                num_steps + 1,
                sigmas.len(),
                timesteps.len()
            )));
        }
        if sigmas[0] != 1.0 || sigmas[num_steps] != 0.0 {
            return Err(Error::InvalidSchedule(
                "sigma must start at exactly 1 and end at exactly 0".into(),
            ));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::InvalidSchedule(
                "sigmas must be strictly decreasing".into(),
            ));
        }
        if timesteps[0] > MAX_TIME_LABEL || timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidSchedule(
                "timesteps must be strictly decreasing labels in [0, 1000]".into(),
            ));
        }
        Ok(Self {
            num_steps,
            sigmas,
            timesteps,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn terminal_step(&self) -> usize {
        self.num_steps
    }

    pub fn sigma(&self, step: usize) -> Result<f64> {
        self.sigmas
            .get(step)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("step {step} outside schedule")))
    }

    pub fn label(&self, step: usize) -> Result<u32> {
        self.timesteps
            .get(step)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("step {step} outside schedule")))
    }

    /// σ_{k+1} - σ_k for a non-terminal step.
    pub fn delta(&self, step: usize) -> Result<f64> {
        if step >= self.num_steps {
            return Err(Error::NoSuccessor { step });
        }
        Ok(self.sigmas[step + 1] - self.sigmas[step])
    }

    /// Index of the first step (in denoising order) whose label is not
    /// after `t`, i.e. the smallest `k` with `timesteps[k] <= t`.
    pub fn index_of(&self, t: u32) -> Result<usize> {
        if t > MAX_TIME_LABEL {
            return Err(Error::InvalidInput(format!(
                "timestep label {t} exceeds {MAX_TIME_LABEL}"
            )));
        }
        // the terminal label is 0, so a match always exists
        Ok(self
            .timesteps
            .iter()
            .position(|&label| label <= t)
            .unwrap_or(self.num_steps))
    }
}

/// `(1 - σ_t) · x_0 + σ_t · ε`, labelled with step `t`.
///
/// The endpoints σ = 0 and σ = 1 return copies of `x_0` and `ε` so that
/// they hold bitwise.
pub fn noise_to(clean: &Latent, eps: &NoiseSample, schedule: &Schedule, step: usize) -> Result<Latent> {
    clean.ensure_same_shape(&eps.values, "noise_to")?;
    let sigma = schedule.sigma(step)?;
    let label = schedule.label(step)?;
    let data = if sigma == 0.0 {
        clean.data.clone()
    } else if sigma == 1.0 {
        eps.values.data.clone()
    } else {
        clean
            .data
            .iter()
            .zip(&eps.values.data)
            .map(|(x, e)| (1.0 - sigma) * x + sigma * e)
            .collect()
    };
    Ok(Latent {
        data,
        time_label: label,
        ..clean.clone()
    })
}

/// One-step clean estimate `x_t + (σ_{t+1} - σ_t) · v`.
///
/// This is a single Euler step, not the exact inversion; see
/// [`estimate_x0_exact`].
pub fn estimate_x0(x_t: &Latent, velocity: &Latent, schedule: &Schedule, step: usize) -> Result<Latent> {
    x_t.ensure_same_shape(velocity, "estimate_x0")?;
    let delta = schedule.delta(step)?;
    Ok(x_t.axpy(delta, velocity).with_time_label(0))
}

/// Exact rectified-flow inversion `x_t - σ_t · v`.
pub fn estimate_x0_exact(
    x_t: &Latent,
    velocity: &Latent,
    schedule: &Schedule,
    step: usize,
) -> Result<Latent> {
    x_t.ensure_same_shape(velocity, "estimate_x0_exact")?;
    let sigma = schedule.sigma(step)?;
    Ok(x_t.axpy(-sigma, velocity).with_time_label(0))
}

/// Euler update to the next schedule step.
pub fn euler_step(x_t: &Latent, velocity: &Latent, schedule: &Schedule, step: usize) -> Result<Latent> {
    x_t.ensure_same_shape(velocity, "euler_step")?;
    let delta = schedule.delta(step)?;
    let label = schedule.label(step + 1)?;
    Ok(x_t.axpy(delta, velocity).with_time_label(label))
}

/// A finite set of clean latents with equal prior weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OraclePointSet {
    points: Vec<Latent>,
}

impl OraclePointSet {
    pub fn new(points: Vec<Latent>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::InvalidInput("oracle point set is empty".into()))?;
        for p in &points[1..] {
            first.ensure_same_shape(p, "oracle point set")?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Latent] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Posterior weights `w_i ∝ π_i · exp(-‖x_t - (1-σ)x_i‖² / (2σ²))`.
///
/// `log_priors` defaults to equal weights.
pub fn oracle_posterior(
    x_t: &Latent,
    schedule: &Schedule,
    step: usize,
    data: &OraclePointSet,
    log_priors: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let sigma = schedule.sigma(step)?;
    if sigma == 0.0 {
        return Err(Error::UndefinedVelocity { step });
    }
    if let Some(lp) = log_priors {
        if lp.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} log-priors for {} points",
                lp.len(),
                data.len()
            )));
        }
    }
    x_t.ensure_same_shape(&data.points[0], "oracle_posterior")?;
    let scale = 1.0 - sigma;
    let denom = 2.0 * sigma * sigma;
    let exponents: Vec<f64> = data
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let sq: f64 = x_t
                .data
                .iter()
                .zip(&p.data)
                .map(|(x, c)| {
                    let d = x - scale * c;
                    d * d
                })
                .sum();
            -sq / denom + log_priors.map_or(0.0, |lp| lp[i])
        })
        .collect();
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

/// Closed-form `E[ε - x_0 | x_t] = (x_t - Σ w_i x_i) / σ_t` for a finite
/// dataset.
pub fn oracle_velocity(
    x_t: &Latent,
    schedule: &Schedule,
    step: usize,
    data: &OraclePointSet,
) -> Result<Latent> {
    oracle_velocity_weighted(x_t, schedule, step, data, None)
}

/// [`oracle_velocity`] with non-uniform log-prior weights on the points.
pub fn oracle_velocity_weighted(
    x_t: &Latent,
    schedule: &Schedule,
    step: usize,
    data: &OraclePointSet,
    log_priors: Option<&[f64]>,
) -> Result<Latent> {
    let weights = oracle_posterior(x_t, schedule, step, data, log_priors)?;
    let sigma = schedule.sigma(step)?;
    let mut mean = vec![0.0; x_t.data.len()];
    for (w, p) in weights.iter().zip(&data.points) {
        for (m, v) in mean.iter_mut().zip(&p.data) {
            *m += w * v;
        }
    }
    let data = x_t
        .data
        .iter()
        .zip(&mean)
        .map(|(x, m)| (x - m) / sigma)
        .collect();
    Ok(Latent {
        data,
        ..x_t.clone()
    })
}
