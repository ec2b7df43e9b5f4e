//! Noise schedules, the forward noising map and the reverse samplers.
//!
//! Steps are 1-based: step `i` turns `v_{i-1}` into `v_i` on the way up and
//! the sampler step `i` maps `v_i` back to `v_{i-1}`. `alpha_bar(0) == 1`.
//!
//! Both samplers accept an externally supplied per-step noise. DDPM uses it
//! in place of its fresh Gaussian draw (`mu + sigma * n`); DDIM, which draws
//! nothing, adds it to its deterministic output (`D(v) + n`). At steps where
//! the DDPM posterior deviation vanishes (step 1) the supplied noise is added
//! unscaled, the same contract as DDIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::VideoTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f32>,
    alpha_bars: Vec<f32>,
    // 64-bit products and their complements; `1 - ab` near step 1 would lose
    // most of its digits if formed from the 32-bit table.
    ab_wide: Vec<f64>,
    one_minus_ab: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f32>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

/// Parameters of a linear beta table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for LinearSchedule {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl LinearSchedule {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// `steps` betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start as f32
                } else {
                    (beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64) as f32
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f32>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta table".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule("betas must be non-decreasing".into()));
        }
        let mut prod = 1.0f64;
        let ab_wide: Vec<f64> = betas
            .iter()
            .map(|&b| {
                prod *= 1.0 - b as f64;
                prod
            })
            .collect();
        let mut log_sum = 0.0f64;
        let one_minus_ab: Vec<f64> = betas
            .iter()
            .map(|&b| {
                log_sum += (-(b as f64)).ln_1p();
                -log_sum.exp_m1()
            })
            .collect();
        let alpha_bars: Vec<f32> = ab_wide.iter().map(|&a| a as f32).collect();
        let mut prev = 1.0f32;
        for (i, &ab) in alpha_bars.iter().enumerate() {
            if !(ab < prev && ab > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar not strictly decreasing at step {}",
                    i + 1
                )));
            }
            prev = ab;
        }
        Ok(Self {
            betas,
            alpha_bars,
            ab_wide,
            one_minus_ab,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.steps() {
            return Err(Error::StepIndex(format!("step {i} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1] as f64
    }

    pub fn alpha(&self, i: usize) -> f64 {
        1.0 - self.beta(i)
    }

    /// Cumulative product at 64-bit precision; [`Self::alpha_bars`] holds
    /// the same values rounded to 32 bits.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.ab_wide[i - 1]
        }
    }

    /// `1 - alpha_bar(i)` without cancellation.
    pub fn one_minus_alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.one_minus_ab[i - 1]
        }
    }

    pub fn betas(&self) -> &[f32] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    /// Standard deviation of the DDPM posterior `q(v_{i-1} | v_i, v_0)`.
    pub fn sigma(&self, i: usize) -> f64 {
        (self.beta(i) * self.one_minus_alpha_bar(i - 1) / self.one_minus_alpha_bar(i))
            .max(0.0)
            .sqrt()
    }

    /// Integer step for a fraction of the schedule, rounded to nearest with
    /// ties going down.
    pub fn control_step(&self, fraction: f64) -> usize {
        round_half_down(fraction * self.steps() as f64)
    }
}

pub fn round_half_down(x: f64) -> usize {
    let f = x.floor();
    let r = if x - f > 0.5 { f + 1.0 } else { f };
    r.max(0.0) as usize
}

/// Noise prediction for the sample at step `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsPrediction {
    pub eps: VideoTensor,
    pub step: usize,
}

impl EpsPrediction {
    pub fn new(eps: VideoTensor, step: usize) -> Self {
        Self { eps, step }
    }
}

fn check_pred(v: &VideoTensor, pred: &EpsPrediction, i: usize) -> Result<()> {
    if pred.step != i {
        return Err(Error::StepIndex(format!(
            "prediction is for step {}, sampler is at step {i}",
            pred.step
        )));
    }
    v.ensure_same_dims(&pred.eps, "noise prediction")
}

/// Closed form of the first `i` noising steps:
/// `v_i = sqrt(ab_i) v_0 + sqrt(1 - ab_i) eps`.
pub fn add_noise(v0: &VideoTensor, i: usize, eps: &VideoTensor, sched: &NoiseSchedule) -> Result<VideoTensor> {
    if i == 0 {
        return Ok(v0.clone());
    }
    sched.check(i)?;
    v0.ensure_same_dims(eps, "add_noise")?;
    v0.lincomb(sched.alpha_bar(i).sqrt(), eps, sched.one_minus_alpha_bar(i).sqrt())
}

/// One stochastic forward transition from step `from` to step `to > from`,
/// `v_to = sqrt(ab_to / ab_from) v_from + sqrt(1 - ab_to / ab_from) z`.
/// For consecutive steps this is `sqrt(alpha_i) v + sqrt(beta_i) z`.
pub fn forward_transition(
    v: &VideoTensor,
    from: usize,
    to: usize,
    z: &VideoTensor,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    sched.check(to)?;
    if from >= to {
        return Err(Error::StepIndex(format!("forward transition {from} -> {to}")));
    }
    v.ensure_same_dims(z, "forward_transition")?;
    let (keep, add) = if to == from + 1 {
        (sched.alpha(to), sched.beta(to))
    } else {
        let ratio = sched.alpha_bar(to) / sched.alpha_bar(from);
        let log_ratio: f64 = (from + 1..=to).map(|k| (-sched.beta(k)).ln_1p()).sum();
        (ratio, -log_ratio.exp_m1())
    };
    v.lincomb(keep.sqrt(), z, add.sqrt())
}

/// Noise source for one reverse step.
pub enum StepNoise<'a> {
    /// No stochastic term.
    Zero,
    /// Externally supplied noise (e.g. extracted inversion latents).
    Injected(&'a VideoTensor),
    /// Fresh standard normal draws from the stream.
    Fresh(&'a mut RngStream),
}

fn ddpm_mean_wide(v: &VideoTensor, eps: &VideoTensor, i: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let c_eps = sched.beta(i) / sched.one_minus_alpha_bar(i).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(i).sqrt();
    v.data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (x as f64 - c_eps * e as f64) * inv_sqrt_alpha)
        .collect()
}

fn ddim_wide(v: &VideoTensor, eps: &VideoTensor, i: usize, i_prev: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let sqrt_1m = sched.one_minus_alpha_bar(i).sqrt();
    let inv_sqrt_ab = 1.0 / sched.alpha_bar(i).sqrt();
    let (a, b) = (
        sched.alpha_bar(i_prev).sqrt(),
        sched.one_minus_alpha_bar(i_prev).sqrt(),
    );
    v.data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| {
            let (x, e) = (x as f64, e as f64);
            let x0 = (x - sqrt_1m * e) * inv_sqrt_ab;
            a * x0 + b * e
        })
        .collect()
}

/// Posterior mean `(v_i - beta_i / sqrt(1 - ab_i) eps) / sqrt(alpha_i)`.
pub fn ddpm_mean(v: &VideoTensor, pred: &EpsPrediction, i: usize, sched: &NoiseSchedule) -> Result<VideoTensor> {
    sched.check(i)?;
    check_pred(v, pred, i)?;
    VideoTensor::new(v.dims(), ddpm_mean_wide(v, &pred.eps, i, sched).into_iter().map(|m| m as f32).collect())
}

/// Ancestral DDPM update `v_{i-1} = mu_i(v_i, eps) + sigma_i z`.
pub fn ddpm_step(
    v: &VideoTensor,
    pred: &EpsPrediction,
    i: usize,
    noise: StepNoise<'_>,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    sched.check(i)?;
    check_pred(v, pred, i)?;
    let sigma = sched.sigma(i);
    let mean = ddpm_mean_wide(v, &pred.eps, i, sched);
    let out = match noise {
        StepNoise::Zero => mean.into_iter().map(|m| m as f32).collect(),
        StepNoise::Injected(n) => {
            v.ensure_same_dims(n, "injected noise")?;
            // Unscaled injection where the posterior is a point mass.
            let scale = if sigma > 0.0 { sigma } else { 1.0 };
            inject(&mean, scale, n)
        }
        StepNoise::Fresh(rng) => {
            if sigma > 0.0 {
                mean.into_iter().map(|m| (m + sigma * rng.gaussian()) as f32).collect()
            } else {
                mean.into_iter().map(|m| m as f32).collect()
            }
        }
    };
    VideoTensor::new(v.dims(), out)
}

fn inject(det: &[f64], scale: f64, n: &VideoTensor) -> Vec<f32> {
    det.iter().zip(n.data()).map(|(&d, &z)| (d + scale * z as f64) as f32).collect()
}

/// The deterministic part of one reverse step and the factor an injected
/// noise is multiplied by, so that the step returns `det + scale * n`.
///
/// Inversion solves `n = (target - det) / scale` against exactly the values
/// the sampler will use.
pub fn step_decomposition(
    sampler: &Sampler,
    v: &VideoTensor,
    pred: &EpsPrediction,
    (i, i_prev): (usize, usize),
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, f64)> {
    sched.check(i)?;
    check_pred(v, pred, i)?;
    match sampler.kind {
        SamplerKind::Ddpm => {
            if i_prev + 1 != i {
                return Err(Error::StepIndex(format!("DDPM cannot jump {i} -> {i_prev}")));
            }
            let sigma = sched.sigma(i);
            let scale = if sigma > 0.0 {
                sigma
            } else if i == 1 {
                1.0
            } else {
                return Err(Error::DivisionGuard(i));
            };
            Ok((ddpm_mean_wide(v, &pred.eps, i, sched), scale))
        }
        SamplerKind::Ddim => {
            if i_prev >= i {
                return Err(Error::StepIndex(format!("DDIM needs i_prev < i, got {i_prev} >= {i}")));
            }
            Ok((ddim_wide(v, &pred.eps, i, i_prev, sched), 1.0))
        }
    }
}

/// Deterministic DDIM update from step `i` to `i_prev`, plus the injected
/// noise when one is supplied.
pub fn ddim_step(
    v: &VideoTensor,
    pred: &EpsPrediction,
    i: usize,
    i_prev: usize,
    injected: Option<&VideoTensor>,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    sched.check(i)?;
    if i_prev >= i {
        return Err(Error::StepIndex(format!("DDIM needs i_prev < i, got {i_prev} >= {i}")));
    }
    check_pred(v, pred, i)?;
    let det = ddim_wide(v, &pred.eps, i, i_prev, sched);
    let out: Vec<f32> = match injected {
        None => det.into_iter().map(|d| d as f32).collect(),
        Some(n) => {
            v.ensure_same_dims(n, "injected noise")?;
            inject(&det, 1.0, n)
        }
    };
    VideoTensor::new(v.dims(), out)
}

/// Classifier-free guidance, `eps_u + s (eps_c - eps_u)`, evaluated as
/// `(1 - s) eps_u + s eps_c` so that `s = 1` and `s = 0` return the inputs
/// exactly.
pub fn cfg_combine(uncond: &EpsPrediction, cond: &EpsPrediction, scale: f64) -> Result<EpsPrediction> {
    if !scale.is_finite() {
        return Err(Error::Config(format!("guidance scale {scale} is not finite")));
    }
    if uncond.step != cond.step {
        return Err(Error::StepIndex(format!(
            "guidance over mismatched steps {} and {}",
            uncond.step, cond.step
        )));
    }
    let eps = uncond.eps.lincomb(1.0 - scale, &cond.eps, scale)?;
    eps.ensure_finite("guided prediction")?;
    Ok(EpsPrediction::new(eps, cond.step))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn tag(self) -> u8 {
        match self {
            SamplerKind::Ddpm => 0,
            SamplerKind::Ddim => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(SamplerKind::Ddpm),
            1 => Some(SamplerKind::Ddim),
            _ => None,
        }
    }
}

/// A sampler together with the step grid it walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub kind: SamplerKind,
    /// Step spacing for DDIM; DDPM always walks every step.
    pub stride: usize,
}

impl Sampler {
    pub fn ddpm() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            stride: 1,
        }
    }

    pub fn ddim(stride: usize) -> Self {
        Self {
            kind: SamplerKind::Ddim,
            stride: stride.max(1),
        }
    }

    /// `(i, i_prev)` pairs visited when denoising from `start` down to 0.
    pub fn step_pairs(&self, start: usize) -> Vec<(usize, usize)> {
        let stride = match self.kind {
            SamplerKind::Ddpm => 1,
            SamplerKind::Ddim => self.stride.max(1),
        };
        let mut pairs = Vec::new();
        let mut i = start;
        while i > 0 {
            let prev = i.saturating_sub(stride);
            pairs.push((i, prev));
            i = prev;
        }
        pairs
    }

    /// Applies one reverse step of this sampler.
    pub fn step(
        &self,
        v: &VideoTensor,
        pred: &EpsPrediction,
        (i, i_prev): (usize, usize),
        noise: StepNoise<'_>,
        sched: &NoiseSchedule,
    ) -> Result<VideoTensor> {
        match self.kind {
            SamplerKind::Ddpm => {
                if i_prev + 1 != i {
                    return Err(Error::StepIndex(format!("DDPM cannot jump {i} -> {i_prev}")));
                }
                ddpm_step(v, pred, i, noise, sched)
            }
            SamplerKind::Ddim => match noise {
                StepNoise::Zero | StepNoise::Fresh(_) => ddim_step(v, pred, i, i_prev, None, sched),
                StepNoise::Injected(n) => ddim_step(v, pred, i, i_prev, Some(n), sched),
            },
        }
    }
}
