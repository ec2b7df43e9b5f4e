use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{checked_prediction, Denoiser, PromptTokens};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedulers::{EpsPrediction, NoiseSchedule};
use crate::tensor::VideoTensor;

/// Exact noise predictor for data drawn from an isotropic Gaussian mixture.
///
/// Every frame of the input is treated as one point of dimension
/// `H * W * C`, so a tensor of `F` frames is a batch of `F` points. The
/// prompt is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOracle {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    sched: NoiseSchedule,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>, sched: NoiseSchedule) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Config("mixture needs matching, non-empty weights/means/variances".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Config("mixture means must share one positive dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        // A zero variance is a point mass; still well defined for i >= 1.
        if variances.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("mixture variances must be finite and non-negative".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
            sched,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Per-coordinate mean of the clean distribution.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|d| self.weights.iter().zip(&self.means).map(|(w, m)| w * m[d]).sum())
            .collect()
    }

    /// Per-coordinate variance of the clean distribution.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim())
            .map(|d| {
                let second: f64 = self
                    .weights
                    .iter()
                    .zip(&self.means)
                    .zip(&self.variances)
                    .map(|((w, m), v)| w * (v + m[d] * m[d]))
                    .sum();
                second - mean[d] * mean[d]
            })
            .collect()
    }

    fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.sched.steps() {
            return Err(Error::StepIndex(format!("step {i} outside 1..={}", self.sched.steps())));
        }
        Ok(())
    }

    /// Component log-weights `ln w_k + ln N(x; sqrt(ab) mu_k, s_k^2 I)` and
    /// the per-component variances `s_k^2`.
    fn component_terms(&self, x: &[f64], i: usize) -> (Vec<f64>, Vec<f64>) {
        let a = self.sched.alpha_bar(i).sqrt();
        let (ab, omab) = (self.sched.alpha_bar(i), self.sched.one_minus_alpha_bar(i));
        let dim = x.len() as f64;
        let mut logs = Vec::with_capacity(self.components());
        let mut s2s = Vec::with_capacity(self.components());
        for ((w, mu), var) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let s2 = ab * var + omab;
            let d2: f64 = x.iter().zip(mu).map(|(xv, m)| (xv - a * m).powi(2)).sum();
            logs.push(w.ln() - 0.5 * dim * (std::f64::consts::TAU * s2).ln() - d2 / (2.0 * s2));
            s2s.push(s2);
        }
        (logs, s2s)
    }

    /// `ln p_i(x)` of the noised marginal.
    pub fn log_density(&self, x: &[f64], i: usize) -> Result<f64> {
        self.check_step(i)?;
        self.check_dim(x.len())?;
        let (logs, _) = self.component_terms(x, i);
        Ok(log_sum_exp(&logs))
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::ShapeMismatch(format!("point of dimension {d}, mixture has {}", self.dim())));
        }
        Ok(())
    }

    /// `-sqrt(1 - ab_i) * grad ln p_i(x)` for one point.
    pub fn analytic_eps(&self, x: &[f64], i: usize) -> Result<Vec<f64>> {
        self.check_step(i)?;
        self.check_dim(x.len())?;
        Ok(self.eps_point(x, i))
    }

    fn eps_point(&self, x: &[f64], i: usize) -> Vec<f64> {
        let a = self.sched.alpha_bar(i).sqrt();
        let (logs, s2s) = self.component_terms(x, i);
        let lse = log_sum_exp(&logs);
        let scale = self.sched.one_minus_alpha_bar(i).sqrt();
        let mut eps = vec![0.0; x.len()];
        for ((l, s2), mu) in logs.iter().zip(&s2s).zip(&self.means) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((e, xv), m) in eps.iter_mut().zip(x).zip(mu) {
                *e += r * (xv - a * m) / s2;
            }
        }
        eps.iter_mut().for_each(|e| *e *= scale);
        eps
    }

    /// `count` clean samples, one per frame of a `[count, 1, 1, dim]` tensor.
    pub fn sample(&self, count: usize, stream: &mut RngStream) -> Result<VideoTensor> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let u = stream.uniform();
            let mut acc = 0.0;
            let mut k = self.components() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let sd = self.variances[k].sqrt();
            for d in 0..dim {
                data.push((self.means[k][d] + sd * stream.gaussian()) as f32);
            }
        }
        VideoTensor::new([count, 1, 1, dim], data)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

impl Denoiser for GmmOracle {
    fn predict_eps(&self, x: &VideoTensor, step: usize, _prompt: &PromptTokens) -> Result<EpsPrediction> {
        self.check_step(step)?;
        let dim = x.height() * x.width() * x.channels();
        self.check_dim(dim)?;
        let out: Vec<f32> = x
            .data()
            .par_chunks(dim)
            .flat_map_iter(|frame| {
                let p: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
                self.eps_point(&p, step).into_iter().map(|e| e as f32)
            })
            .collect();
        checked_prediction(x.dims(), out, step)
    }
}
