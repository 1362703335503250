//! DDPM variance schedules and the closed-form forward/reverse arithmetic.
//!
//! Forward corruption of a clean mask x₀:
//!   x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε,  ᾱ_t = ∏_{i≤t} (1−β_i)
//! and the ancestral reverse step
//!   x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂)/√α_t + σ_t·z,
//!   σ_t² = β_t·(1−ᾱ_{t−1})/(1−ᾱ_t), σ_1 = 0.
//!
//! Timesteps are 1-based: t ranges over 1..=T. All schedule constants are
//! f64; tensor wrappers convert at the boundary so single-precision network
//! code can consume them.

use crate::tensor::{c, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!(
                "schedule kind must be linear or cosine, got {other}"
            ))),
        }
    }
}

/// Precomputed β, α, ᾱ and posterior variances. Immutable after
/// construction; all accessors take 1-based timesteps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    num_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
}

/// Offset of the squared-cosine ᾱ curve; the conventional small shift that
/// keeps β_1 finite.
const COSINE_S: f64 = 0.008;
/// Clip for cosine β so α_t stays strictly positive.
const COSINE_BETA_MAX: f64 = 0.999;

/// Builds a schedule. `beta_start`/`beta_end` apply to the linear kind and
/// are ignored by the cosine kind, whose curve is fully determined by `T`.
pub fn build_schedule(
    kind: ScheduleKind,
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if num_steps < 1 {
        return Err(Error::Config("T must be >= 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0) {
                return Err(Error::Config(format!("beta_start must be > 0, got {beta_start}")));
            }
            if !(beta_end < 1.0) {
                return Err(Error::Config(format!("beta_end must be < 1, got {beta_end}")));
            }
            if beta_start > beta_end {
                return Err(Error::Config(format!(
                    "beta_start {beta_start} must not exceed beta_end {beta_end}"
                )));
            }
            if num_steps == 1 {
                vec![beta_start]
            } else {
                (0..num_steps)
                    .map(|i| {
                        beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                    })
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let t_f = num_steps as f64;
            let f = |t: f64| (((t / t_f + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0;
            let mut betas = Vec::with_capacity(num_steps);
            for t in 1..=num_steps {
                let ab = f(t as f64) / f0;
                betas.push((1.0 - ab / prev).min(COSINE_BETA_MAX));
                prev = ab;
            }
            betas
        }
    };

    // ᾱ is recomputed from the (possibly clipped) βs so the product
    // invariant holds exactly for both kinds.
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let mut posterior_variances = Vec::with_capacity(num_steps);
    for t in 0..num_steps {
        let ab_prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
        posterior_variances.push(betas[t] * (1.0 - ab_prev) / (1.0 - alpha_bars[t]));
    }

    for (i, &b) in betas.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Config(format!(
                "derived beta_{} = {b} outside (0,1)",
                i + 1
            )));
        }
    }
    Ok(NoiseSchedule { num_steps, betas, alphas, alpha_bars, posterior_variances })
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t >= 1 && t <= self.num_steps {
            Ok(t - 1)
        } else {
            Err(Error::Timestep { t, max: self.num_steps })
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let idx = self.check_t(t)?;
        Ok(if t == 1 { 0.0 } else { self.posterior_variances[idx] })
    }
}

fn check_same_len<F: Real>(op: &str, a: &[F], b: &[F]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "dimension error in {op}: lengths {} vs {}",
            a.len(),
            b.len()
        )))
    }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps, elementwise over flat buffers.
pub fn q_sample<F: Real>(x0: &[F], t: usize, eps: &[F], sched: &NoiseSchedule) -> Result<Vec<F>> {
    check_same_len("q_sample", x0, eps)?;
    let ab = sched.alpha_bar(t)?;
    let sa = c::<F>(ab.sqrt());
    let sn = c::<F>((1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| sa * x + sn * e).collect())
}

/// x0' = (x_t − √(1−ᾱ_t)·eps_hat)/√ᾱ_t. Unclamped; consumers that need
/// [0,1] (persistence, Dice) clamp on their side.
pub fn predict_x0<F: Real>(
    x_t: &[F],
    t: usize,
    eps_hat: &[F],
    sched: &NoiseSchedule,
) -> Result<Vec<F>> {
    check_same_len("predict_x0", x_t, eps_hat)?;
    let ab = sched.alpha_bar(t)?;
    let sn = c::<F>((1.0 - ab).sqrt());
    let inv_sa = c::<F>(1.0 / ab.sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(&x, &e)| (x - sn * e) * inv_sa).collect())
}

/// One ancestral reverse step. `z` must be all-zero when t = 1.
pub fn reverse_step<F: Real>(
    x_t: &[F],
    eps_hat: &[F],
    t: usize,
    z: &[F],
    sched: &NoiseSchedule,
) -> Result<Vec<F>> {
    check_same_len("reverse_step", x_t, eps_hat)?;
    check_same_len("reverse_step", x_t, z)?;
    if t == 1 && z.iter().any(|v| *v != F::zero()) {
        return Err(Error::Contract("reverse_step requires z = 0 at t = 1".into()));
    }
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv_sqrt_alpha = c::<F>(1.0 / sched.alpha(t)?.sqrt());
    let noise_coeff = c::<F>(beta / (1.0 - ab).sqrt());
    let sigma = c::<F>(sched.posterior_variance(t)?.sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&x, &e), &zv)| inv_sqrt_alpha * (x - noise_coeff * e) + sigma * zv)
        .collect())
}

/// Tape-recorded q_sample over tensors (differentiable through both inputs).
pub fn q_sample_t<F: Real>(
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let ab = sched.alpha_bar(t)?;
    Ok(x0
        .mul_scalar(ab.sqrt())
        .add(&eps.mul_scalar((1.0 - ab).sqrt())))
}

/// Tape-recorded predict_x0 over tensors; gradients flow through `eps_hat`
/// (and `x_t` if it requires them).
pub fn predict_x0_t<F: Real>(
    x_t: &Tensor<F>,
    t: usize,
    eps_hat: &Tensor<F>,
    sched: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let ab = sched.alpha_bar(t)?;
    Ok(x_t
        .sub(&eps_hat.mul_scalar((1.0 - ab).sqrt()))
        .mul_scalar(1.0 / ab.sqrt()))
}
