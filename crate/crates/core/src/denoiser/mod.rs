//! Noise predictors behind one interface.

mod checkpoint;
mod dit;
mod gmm;
mod train;

use serde::{Deserialize, Serialize};

use crate::attention::ReplacementSpec;
use crate::error::{Error, Result};
use crate::schedulers::{cfg_combine, EpsPrediction};
use crate::tensor::VideoTensor;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use dit::{Activation, BlockParams, DitParams, Real, TemporalWindow, ToyDit, ToyDitConfig};
pub use gmm::GmmOracle;
pub use train::{
    batch_loss, batch_loss_and_grad, grad_check, reference_eps, train, GradCheckReport, NoisySample, OptimizerConfig, TrainConfig,
    TrainReport, Trainer, TrainingSample,
};

/// Token id reserved for "no content"; the unconditional prompt is all null.
pub const NULL_TOKEN: u16 = 0;

/// Fixed-length attribute-slot prompt. Slots carry no positional encoding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTokens(Vec<u16>);

impl PromptTokens {
    pub fn new(ids: Vec<u16>) -> Self {
        Self(ids)
    }

    pub fn null(len: usize) -> Self {
        Self(vec![NULL_TOKEN; len])
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with_slot(&self, slot: usize, id: u16) -> Self {
        let mut ids = self.0.clone();
        ids[slot] = id;
        Self(ids)
    }

    /// Slots whose ids differ.
    pub fn diff_slots(&self, other: &PromptTokens) -> Vec<usize> {
        self.0
            .iter()
            .zip(&other.0)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self, len: usize, vocab: usize) -> Result<()> {
        if self.0.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "prompt has {} slots, model expects {len}",
                self.0.len()
            )));
        }
        if let Some(&id) = self.0.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::IndexOutOfRange(format!("token {id} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

/// One branch of a paired evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Branch<'a> {
    pub x: &'a VideoTensor,
    pub prompt: &'a PromptTokens,
}

impl<'a> Branch<'a> {
    pub fn new(x: &'a VideoTensor, prompt: &'a PromptTokens) -> Self {
        Self { x, prompt }
    }
}

pub trait Denoiser: Send + Sync {
    fn predict_eps(&self, x: &VideoTensor, step: usize, prompt: &PromptTokens) -> Result<EpsPrediction>;

    /// Evaluates two branches as one paired pass. With `control` present the
    /// edit branch's cross-attention maps take the listed columns from the
    /// orig branch's maps. Models without cross-attention ignore `control`.
    fn predict_pair(
        &self,
        orig: Branch<'_>,
        edit: Branch<'_>,
        step: usize,
        control: Option<&ReplacementSpec>,
    ) -> Result<(EpsPrediction, EpsPrediction)> {
        let _ = control;
        Ok((
            self.predict_eps(orig.x, step, orig.prompt)?,
            self.predict_eps(edit.x, step, edit.prompt)?,
        ))
    }

    /// Prompt length the model expects, if it reads prompts at all.
    fn prompt_len(&self) -> Option<usize> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, x: &VideoTensor, step: usize, prompt: &PromptTokens) -> Result<EpsPrediction> {
        (**self).predict_eps(x, step, prompt)
    }

    fn predict_pair(
        &self,
        orig: Branch<'_>,
        edit: Branch<'_>,
        step: usize,
        control: Option<&ReplacementSpec>,
    ) -> Result<(EpsPrediction, EpsPrediction)> {
        (**self).predict_pair(orig, edit, step, control)
    }

    fn prompt_len(&self) -> Option<usize> {
        (**self).prompt_len()
    }
}

/// Classifier-free guidance around a conditional model.
///
/// The unconditional prediction uses the all-null prompt. In paired mode
/// only the conditional pair shares attention maps; the unconditional
/// predictions of both branches are evaluated independently.
pub struct Guided<D> {
    inner: D,
    scale: f64,
}

impl<D: Denoiser> Guided<D> {
    pub fn new(inner: D, scale: f64) -> Self {
        Self { inner, scale }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }

    fn unconditional(&self, prompt: &PromptTokens) -> PromptTokens {
        PromptTokens::null(prompt.len())
    }
}

impl<D: Denoiser> Denoiser for Guided<D> {
    fn predict_eps(&self, x: &VideoTensor, step: usize, prompt: &PromptTokens) -> Result<EpsPrediction> {
        let cond = self.inner.predict_eps(x, step, prompt)?;
        if self.scale == 1.0 {
            return Ok(cond);
        }
        let uncond = self.inner.predict_eps(x, step, &self.unconditional(prompt))?;
        cfg_combine(&uncond, &cond, self.scale)
    }

    fn predict_pair(
        &self,
        orig: Branch<'_>,
        edit: Branch<'_>,
        step: usize,
        control: Option<&ReplacementSpec>,
    ) -> Result<(EpsPrediction, EpsPrediction)> {
        let (c1, c2) = self.inner.predict_pair(orig, edit, step, control)?;
        if self.scale == 1.0 {
            return Ok((c1, c2));
        }
        let u1 = self.inner.predict_eps(orig.x, step, &self.unconditional(orig.prompt))?;
        let u2 = if edit.x == orig.x {
            u1.clone()
        } else {
            self.inner.predict_eps(edit.x, step, &self.unconditional(edit.prompt))?
        };
        Ok((cfg_combine(&u1, &c1, self.scale)?, cfg_combine(&u2, &c2, self.scale)?))
    }

    fn prompt_len(&self) -> Option<usize> {
        self.inner.prompt_len()
    }
}

pub(crate) fn checked_prediction(dims: crate::tensor::Dims, data: Vec<f32>, step: usize) -> Result<EpsPrediction> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Denoiser(format!("non-finite noise prediction at step {step}")));
    }
    Ok(EpsPrediction::new(VideoTensor::new(dims, data)?, step))
}
