//! Training objectives: Dice and focal primitives, the denoising loss
//! (noise MSE plus Dice on the implied clean mask), their weighted hybrid
//! sum, and the topological consistency term that compares persistence
//! diagrams of the current and a look-back prediction under exact W1.
//!
//! Every loss is a scalar tensor on the live tape. The consistency term is
//! wired into the tape through the diagram's critical cells: each matched
//! point routes the subgradient of its edge cost to the pixels realizing
//! its birth and death values. The look-back branch never carries
//! gradients.

use std::fmt;
use std::str::FromStr;

use crate::schedule::{predict_x0_t, q_sample_t, NoiseSchedule};
use crate::tensor::{c, no_grad, Real, Tensor};
use crate::topology::{persistence_diagram, PersistencePair};
use crate::transport::{w1_distance, MatchEdge};
use crate::{Error, Result};

fn f64_of<F: Real>(x: F) -> f64 {
    x.to_f64().expect("Real converts to f64")
}

/// Weights of the hybrid objective; `lambda` scales the Dice term inside
/// the denoising loss, `smooth` is the Dice smoothing constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_w: f64,
    pub lambda: f64,
    pub focal_gamma: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma_w: 1.0, lambda: 0.5, focal_gamma: 2.0, smooth: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("loss.alpha", self.alpha),
            ("loss.beta", self.beta),
            ("loss.gamma_w", self.gamma_w),
            ("loss.lambda", self.lambda),
            ("loss.focal_gamma", self.focal_gamma),
            ("loss.smooth", self.smooth),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.smooth == 0.0 {
            return Err(Error::Config("loss.smooth must be positive, got 0".into()));
        }
        Ok(())
    }
}

/// How predictions are turned into the field fed to persistence: as-is or
/// binarized at 0.5 (which makes the topological gradient vanish almost
/// everywhere and is kept for ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Soft,
    Binary,
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ThresholdMode::Soft),
            "binary-0.5" => Ok(ThresholdMode::Binary),
            other => Err(Error::Config(format!(
                "unknown threshold mode {other:?}, expected \"soft\" or \"binary-0.5\""
            ))),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdMode::Soft => "soft",
            ThresholdMode::Binary => "binary-0.5",
        })
    }
}

/// Epoch-indexed weight of the topological term: zero during warm-up, then
/// a linear ramp to `peak`, then constant. Fractions are of the total epoch
/// count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WSchedule {
    pub warmup_frac: f64,
    pub ramp_frac: f64,
    pub peak: f64,
}

impl Default for WSchedule {
    fn default() -> Self {
        WSchedule { warmup_frac: 0.2, ramp_frac: 0.3, peak: 0.1 }
    }
}

impl WSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.tdc.warmup_frac", self.warmup_frac),
            ("loss.tdc.ramp_frac", self.ramp_frac),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.warmup_frac + self.ramp_frac > 1.0 {
            return Err(Error::Config(format!(
                "loss.tdc.warmup_frac + loss.tdc.ramp_frac must not exceed 1, got {}",
                self.warmup_frac + self.ramp_frac
            )));
        }
        if !self.peak.is_finite() || self.peak < 0.0 {
            return Err(Error::Config(format!(
                "loss.tdc.peak must be finite and nonnegative, got {}",
                self.peak
            )));
        }
        Ok(())
    }

    /// Weight for 0-based `epoch` out of `total_epochs`; nondecreasing in
    /// `epoch`.
    pub fn weight(&self, epoch: usize, total_epochs: usize) -> f64 {
        let f = epoch as f64 / total_epochs.max(1) as f64;
        let start = self.warmup_frac;
        if f < start {
            0.0
        } else if self.ramp_frac == 0.0 || f >= start + self.ramp_frac {
            self.peak
        } else {
            self.peak * (f - start) / self.ramp_frac
        }
    }
}

/// Topological consistency settings: look-back distance `k`, the epoch
/// schedule of the term's weight, and how predictions become fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdcConfig {
    pub k: usize,
    pub w_schedule: WSchedule,
    pub threshold_mode: ThresholdMode,
}

impl Default for TdcConfig {
    fn default() -> Self {
        TdcConfig { k: 5, w_schedule: WSchedule::default(), threshold_mode: ThresholdMode::Soft }
    }
}

impl TdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("loss.tdc.k must be at least 1".into()));
        }
        self.w_schedule.validate()
    }
}

/// Scalar decomposition of one training step's objective. Parts are stored
/// unweighted; `total` is their weighted recombination.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub denoising_mse: f64,
    pub denoising_dice: f64,
    pub aux_dice: f64,
    pub aux_focal: f64,
    pub topo: f64,
    pub w_epoch: f64,
}

impl LossReport {
    /// Weighted sum of the stored parts; equals `total` up to rounding.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.alpha * (self.denoising_mse + w.lambda * self.denoising_dice)
            + w.beta * self.aux_dice
            + w.gamma_w * self.aux_focal
            + self.w_epoch * (1.0 + self.topo).ln()
    }
}

fn check_shapes<F: Real>(op: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "dimension error in {op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_binary<F: Real>(op: &str, target: &Tensor<F>) -> Result<()> {
    for (i, &v) in target.data().iter().enumerate() {
        if v != F::zero() && v != F::one() {
            return Err(Error::Contract(format!(
                "{op} target must be binary, found {v} at index {i}"
            )));
        }
    }
    Ok(())
}

/// Soft Dice loss 1 − (2·Σ pred·target + smooth)/(Σ pred + Σ target + smooth)
/// over the whole batch; zero exactly when `pred` equals a binary `target`.
pub fn dice_loss<F: Real>(pred: &Tensor<F>, target: &Tensor<F>, smooth: f64) -> Result<Tensor<F>> {
    check_shapes("dice_loss", pred, target)?;
    check_binary("dice_loss", target)?;
    if !smooth.is_finite() || smooth <= 0.0 {
        return Err(Error::Config(format!("loss.smooth must be positive, got {smooth}")));
    }
    let num = pred.mul(target).sum_all().mul_scalar(2.0).add_scalar(smooth);
    let den = pred.sum_all().add(&target.sum_all()).add_scalar(smooth);
    Ok(num.div(&den).neg().add_scalar(1.0))
}

/// Mean focal loss −(1−p_t)^γ·log(p_t) with p_t the predicted probability
/// of the true class. Evaluated in log-space: with u = (2t−1)·logit the
/// per-pixel value is exp(−γ·softplus(u))·softplus(−u), finite for any
/// logit magnitude.
pub fn focal_loss<F: Real>(logits: &Tensor<F>, target: &Tensor<F>, focal_gamma: f64) -> Result<Tensor<F>> {
    check_shapes("focal_loss", logits, target)?;
    check_binary("focal_loss", target)?;
    if !focal_gamma.is_finite() || focal_gamma < 0.0 {
        return Err(Error::Config(format!(
            "loss.focal_gamma must be finite and nonnegative, got {focal_gamma}"
        )));
    }
    let sign = target.mul_scalar(2.0).add_scalar(-1.0);
    let u = logits.mul(&sign);
    let modulation = u.softplus().mul_scalar(-focal_gamma).exp();
    Ok(modulation.mul(&u.neg().softplus()).mean_all())
}

/// Denoising objective and its two parts.
#[derive(Debug, Clone)]
pub struct DenoisingLoss<F: Real> {
    pub total: Tensor<F>,
    pub mse: Tensor<F>,
    pub dice: Tensor<F>,
}

/// Mean squared error between the drawn and predicted noise plus
/// λ·Dice between the clean mask and the implied clean prediction. The
/// implied prediction is clamped to [0,1] for the Dice term only.
pub fn denoising_loss<F: Real>(
    eps: &Tensor<F>,
    eps_hat: &Tensor<F>,
    x0: &Tensor<F>,
    x0_implied: &Tensor<F>,
    lambda: f64,
    smooth: f64,
) -> Result<DenoisingLoss<F>> {
    check_shapes("denoising_loss", eps, eps_hat)?;
    check_shapes("denoising_loss", x0, x0_implied)?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("loss.lambda must be finite and nonnegative, got {lambda}")));
    }
    let diff = eps_hat.sub(eps);
    let mse = diff.mul(&diff).mean_all();
    let dice = dice_loss(&x0_implied.clamp01(), x0, smooth)?;
    let total = mse.add(&dice.mul_scalar(lambda));
    Ok(DenoisingLoss { total, mse, dice })
}

/// A scalar objective on the tape together with its reported parts.
#[derive(Debug, Clone)]
pub struct LossBundle<F: Real> {
    pub total: Tensor<F>,
    pub report: LossReport,
}

/// Weighted sum α·denoising + β·aux Dice + γ_w·aux focal.
pub fn hybrid_loss<F: Real>(
    denoising: &DenoisingLoss<F>,
    aux_dice: &Tensor<F>,
    aux_focal: &Tensor<F>,
    weights: &LossWeights,
) -> Result<LossBundle<F>> {
    weights.validate()?;
    let total = denoising
        .total
        .mul_scalar(weights.alpha)
        .add(&aux_dice.mul_scalar(weights.beta))
        .add(&aux_focal.mul_scalar(weights.gamma_w));
    let report = LossReport {
        total: f64_of(total.item()),
        denoising_mse: f64_of(denoising.mse.item()),
        denoising_dice: f64_of(denoising.dice.item()),
        aux_dice: f64_of(aux_dice.item()),
        aux_focal: f64_of(aux_focal.item()),
        topo: 0.0,
        w_epoch: 0.0,
    };
    Ok(LossBundle { total, report })
}

/// Hybrid objective plus the damped topological term
/// w_epoch·log(1 + L_topo). With w_epoch = 0 or without a topological term
/// the total is bit-identical to the hybrid total.
pub fn enhanced_loss<F: Real>(
    hybrid: &LossBundle<F>,
    topo: Option<&Tensor<F>>,
    epoch: usize,
    total_epochs: usize,
    cfg: &TdcConfig,
) -> Result<LossBundle<F>> {
    cfg.validate()?;
    let w = cfg.w_schedule.weight(epoch, total_epochs);
    let mut report = hybrid.report;
    report.w_epoch = w;
    let total = match topo {
        Some(l) => {
            report.topo = f64_of(l.item());
            if w > 0.0 {
                hybrid.total.add(&l.add_scalar(1.0).ln().mul_scalar(w))
            } else {
                hybrid.total.clone()
            }
        }
        None => {
            report.topo = 0.0;
            hybrid.total.clone()
        }
    };
    report.total = f64_of(total.item());
    Ok(LossBundle { total, report })
}

fn binarize<F: Real>(values: &[F]) -> Vec<F> {
    let half = c::<F>(0.5);
    values.iter().map(|&v| if v >= half { F::one() } else { F::zero() }).collect()
}

/// Subgradients of the matched edge costs with respect to the first
/// diagram's points, accumulated at their critical pixels. L∞ ties route
/// to the birth coordinate; essential edges depend on births only.
fn route_edges(
    cur: &[PersistencePair],
    look: &[PersistencePair],
    edges: &[MatchEdge],
    width: usize,
    grad: &mut [f64],
) {
    let sgn = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let at = |cell: (usize, usize)| cell.0 * width + cell.1;
    for e in edges {
        let Some(i) = e.a else { continue };
        let p = &cur[i];
        match e.b {
            Some(j) => {
                let q = &look[j];
                if p.essential {
                    grad[at(p.birth_cell)] += sgn(p.birth - q.birth);
                } else {
                    let db = p.birth - q.birth;
                    let dd = p.death - q.death;
                    if db.abs() >= dd.abs() {
                        grad[at(p.birth_cell)] += sgn(db);
                    } else {
                        grad[at(p.death_cell)] += sgn(dd);
                    }
                }
            }
            None if p.essential => {
                let mut best = f64::INFINITY;
                let mut s = 0.0;
                for q in look.iter().filter(|q| q.essential) {
                    let d = (p.birth - q.birth).abs();
                    if d < best {
                        best = d;
                        s = sgn(p.birth - q.birth);
                    }
                }
                grad[at(p.birth_cell)] += s;
            }
            None => {
                let s = sgn(p.birth - p.death);
                grad[at(p.birth_cell)] += 0.5 * s;
                grad[at(p.death_cell)] -= 0.5 * s;
            }
        }
    }
}

/// W1 distance between the persistence diagrams of `current` and a fixed
/// `lookback` field, as a scalar on the tape. In soft mode the backward
/// pass routes each matched edge's cost subgradient to the critical pixels
/// of `current`; in binary mode the fields are binarized at 0.5 first and
/// the gradient is identically zero.
pub fn topo_consistency<F: Real>(
    current: &Tensor<F>,
    lookback: &[F],
    height: usize,
    width: usize,
    mode: ThresholdMode,
) -> Result<Tensor<F>> {
    let n = height * width;
    if current.len() != n || lookback.len() != n {
        return Err(Error::Contract(format!(
            "dimension error in topo_consistency: {height}x{width} field needs {n} values, got {} and {}",
            current.len(),
            lookback.len()
        )));
    }
    let (cur_vals, look_vals) = match mode {
        ThresholdMode::Soft => (current.data().to_vec(), lookback.to_vec()),
        ThresholdMode::Binary => (binarize(current.data()), binarize(lookback)),
    };
    let pd_cur = persistence_diagram(&cur_vals, height, width)?;
    let pd_look = persistence_diagram(&look_vals, height, width)?;
    let (cost, matching) = w1_distance(&pd_cur, &pd_look)?;
    let mut grad = vec![0.0f64; n];
    if mode == ThresholdMode::Soft {
        route_edges(&pd_cur.dim0, &pd_look.dim0, &matching.dim0, width, &mut grad);
        route_edges(&pd_cur.dim1, &pd_look.dim1, &matching.dim1, width, &mut grad);
    }
    let grad_f: Vec<F> = grad.into_iter().map(c::<F>).collect();
    Ok(current.inject_scalar_with_grad(c::<F>(cost), grad_f))
}

/// A denoiser queried for the look-back prediction.
pub trait NoisePredictor<F: Real> {
    /// Predicted noise residual for `x_t` at timestep `t`, conditioned on
    /// `image`.
    fn predict_eps(&mut self, x_t: &Tensor<F>, t: usize, image: &Tensor<F>) -> Result<Tensor<F>>;
}

/// Outcome of the consistency term for one sample.
#[derive(Debug, Clone)]
pub struct TdcTerm<F: Real> {
    /// W1 between the current and look-back implied masks, wired to the
    /// current prediction; `None` when the term was skipped.
    pub topo: Option<Tensor<F>>,
    pub skipped: bool,
}

/// Topological consistency between the current implied mask and the one a
/// second, gradient-free forward pass implies `k` steps earlier on the same
/// noise draw. Skipped when t − k would precede the first timestep.
#[allow(clippy::too_many_arguments)]
pub fn tdc_term<F: Real, M: NoisePredictor<F> + ?Sized>(
    model: &mut M,
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    image: &Tensor<F>,
    current_x0: &Tensor<F>,
    height: usize,
    width: usize,
    cfg: &TdcConfig,
    sched: &NoiseSchedule,
) -> Result<TdcTerm<F>> {
    cfg.validate()?;
    check_shapes("tdc_term", x0, eps)?;
    if current_x0.len() != height * width {
        return Err(Error::Contract(format!(
            "dimension error in tdc_term: prediction holds {} values for a {height}x{width} field",
            current_x0.len()
        )));
    }
    if t <= cfg.k {
        return Ok(TdcTerm { topo: None, skipped: true });
    }
    let t_back = t - cfg.k;
    let lookback = no_grad(|| -> Result<Vec<F>> {
        let x_back = q_sample_t(x0, t_back, eps, sched)?;
        let eps_hat = model.predict_eps(&x_back, t_back, image)?;
        let implied = predict_x0_t(&x_back, t_back, &eps_hat, sched)?;
        Ok(implied.clamp01().data().to_vec())
    })?;
    let topo = topo_consistency(current_x0, &lookback, height, width, cfg.threshold_mode)?;
    Ok(TdcTerm { topo: Some(topo), skipped: false })
}
