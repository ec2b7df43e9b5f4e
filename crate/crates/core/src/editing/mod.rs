//! Preservation-controlled dual generation and the progression controller.

mod plan;

pub use plan::{plan_progression, EditPlan, SLOT_PRIORITY};

use serde::{Deserialize, Serialize};

use crate::attention::ReplacementSpec;
use crate::denoiser::{Branch, Denoiser, Guided, PromptTokens};
use crate::error::{Error, Result};
use crate::inversion::{invert, LatentTrack};
use crate::rng::{Purpose, RngStream};
use crate::schedulers::{NoiseSchedule, Sampler, StepNoise};
use crate::tensor::VideoTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub guidance_scale: f64,
    /// Weight of the previous subtask's latents against the source's.
    pub lambda: f64,
    pub max_subtasks: usize,
    pub sampler: Sampler,
    /// Extract latents under the same guidance the branches sample with.
    /// Without it the injected noises are solved for a different predictor
    /// and an identity edit no longer reproduces its source.
    pub guided_inversion: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.5,
            guidance_scale: 7.0,
            lambda: 0.5,
            max_subtasks: 6,
            sampler: Sampler::ddpm(),
            guided_inversion: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("edit.alpha = {} outside [0, 1]", self.alpha)));
        }
        // alpha = 0 is the empty edit; beta then has nowhere to go but 0.
        let beta_ok = self.beta >= 0.0 && (self.beta < self.alpha || (self.alpha == 0.0 && self.beta == 0.0));
        if !beta_ok {
            return Err(Error::Config(format!(
                "edit.beta = {} must be >= 0 and below edit.alpha = {}",
                self.beta, self.alpha
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("edit.guidance_scale must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("edit.lambda = {} outside [0, 1]", self.lambda)));
        }
        if self.max_subtasks == 0 {
            return Err(Error::Config("edit.max_subtasks must be at least 1".into()));
        }
        if self.sampler.stride == 0 {
            return Err(Error::Config("edit.sampler.stride must be at least 1".into()));
        }
        Ok(())
    }

    /// `(αT, βT)` on the given schedule.
    pub fn control_steps(&self, sched: &NoiseSchedule) -> (usize, usize) {
        (sched.control_step(self.alpha), sched.control_step(self.beta))
    }

    fn inversion_scale(&self) -> f64 {
        if self.guided_inversion {
            self.guidance_scale
        } else {
            1.0
        }
    }
}

/// What the controller did at one reverse step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub step: usize,
    pub injected: bool,
    pub replaced: bool,
    /// Max abs difference between the two branches after the step.
    pub branch_gap: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubtaskResult {
    pub index: usize,
    pub edited: VideoTensor,
    pub orig: VideoTensor,
    /// The (possibly mixed) track the edit branch followed.
    pub track: LatentTrack,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// `λ·prev + (1−λ)·ref`, element-wise over the start and every noise.
pub fn mix_tracks(prev: &LatentTrack, reference: &LatentTrack, lambda: f64) -> Result<LatentTrack> {
    prev.validate()?;
    reference.validate()?;
    if prev.alpha_steps != reference.alpha_steps || prev.sampler != reference.sampler {
        return Err(Error::Contract(format!(
            "cannot mix tracks of {} and {} steps",
            prev.alpha_steps, reference.alpha_steps
        )));
    }
    if prev.start.dims() != reference.start.dims() {
        return Err(Error::ShapeMismatch(format!(
            "track shapes {:?} and {:?}",
            prev.start.dims(),
            reference.start.dims()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixture coefficient {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(prev.clone());
    }
    if lambda == 0.0 {
        return Ok(reference.clone());
    }
    let blend = |a: &VideoTensor, b: &VideoTensor| -> Result<VideoTensor> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &r)| (lambda * p as f64 + (1.0 - lambda) * r as f64) as f32)
            .collect();
        VideoTensor::new(a.dims(), data)
    };
    Ok(LatentTrack {
        alpha_steps: prev.alpha_steps,
        sampler: prev.sampler,
        start: blend(&prev.start, &reference.start)?,
        noises: prev
            .noises
            .iter()
            .zip(&reference.noises)
            .map(|(p, r)| blend(p, r))
            .collect::<Result<_>>()?,
    })
}

fn check_track(track: &LatentTrack, cfg: &ControlConfig, alpha_steps: usize, dims: crate::tensor::Dims) -> Result<()> {
    track.validate()?;
    if track.alpha_steps != alpha_steps {
        return Err(Error::Contract(format!("track covers {} steps, αT is {alpha_steps}", track.alpha_steps)));
    }
    if track.sampler != cfg.sampler {
        return Err(Error::Contract(format!("track sampler {:?} differs from {:?}", track.sampler, cfg.sampler)));
    }
    if track.start.dims() != dims {
        return Err(Error::ShapeMismatch(format!("track shape {:?}, video {:?}", track.start.dims(), dims)));
    }
    Ok(())
}

/// One dual generation.
///
/// Both branches start from the edit track's `v_{αT}`. Inside (βT, αT] the
/// edit branch injects the mixed latents and takes every cross-attention
/// map from the orig branch, which injects its own track and so
/// regenerates the current video. At or below βT both branches refine
/// freely with one shared fresh noise per step.
#[allow(clippy::too_many_arguments)]
pub fn preserve_edit<D: Denoiser + ?Sized>(
    v_src: &VideoTensor,
    prompt_orig: &PromptTokens,
    prompt_edit: &PromptTokens,
    cfg: &ControlConfig,
    model: &D,
    sched: &NoiseSchedule,
    track_ref: &LatentTrack,
    track_prev: Option<&LatentTrack>,
    stream: &mut RngStream,
) -> Result<SubtaskResult> {
    cfg.validate()?;
    let (alpha_steps, beta_steps) = cfg.control_steps(sched);
    if alpha_steps > sched.steps() {
        return Err(Error::StepIndex(format!("αT = {alpha_steps} beyond {} steps", sched.steps())));
    }
    v_src.ensure_finite("edit source")?;
    check_track(track_ref, cfg, alpha_steps, v_src.dims())?;
    if let Some(prev) = track_prev {
        check_track(prev, cfg, alpha_steps, v_src.dims())?;
    }
    if prompt_orig.len() != prompt_edit.len() {
        return Err(Error::ShapeMismatch(format!(
            "prompts of {} and {} slots",
            prompt_orig.len(),
            prompt_edit.len()
        )));
    }
    let (own, mixed) = match track_prev {
        None => (track_ref.clone(), track_ref.clone()),
        Some(prev) => (prev.clone(), mix_tracks(prev, track_ref, cfg.lambda)?),
    };
    if alpha_steps == 0 {
        return Ok(SubtaskResult {
            index: 0,
            edited: v_src.clone(),
            orig: v_src.clone(),
            track: mixed,
            diagnostics: Vec::new(),
        });
    }

    let guided = Guided::new(model, cfg.guidance_scale);
    let amr = ReplacementSpec::identity(model.prompt_len().unwrap_or(0));
    let mut x_orig = mixed.start.clone();
    let mut x_edit = mixed.start.clone();
    let pairs = cfg.sampler.step_pairs(alpha_steps);
    let mut diagnostics = Vec::with_capacity(pairs.len());
    for (k, &(i, i_prev)) in pairs.iter().enumerate() {
        let controlled = i > beta_steps && i <= alpha_steps;
        let (p_orig, p_edit) = guided.predict_pair(
            Branch::new(&x_orig, prompt_orig),
            Branch::new(&x_edit, prompt_edit),
            i,
            controlled.then_some(&amr),
        )?;
        if controlled {
            x_orig = cfg.sampler.step(&x_orig, &p_orig, (i, i_prev), StepNoise::Injected(&own.noises[k]), sched)?;
            x_edit = cfg.sampler.step(&x_edit, &p_edit, (i, i_prev), StepNoise::Injected(&mixed.noises[k]), sched)?;
        } else {
            let mut shared = stream.clone();
            x_orig = cfg.sampler.step(&x_orig, &p_orig, (i, i_prev), StepNoise::Fresh(&mut shared), sched)?;
            x_edit = cfg.sampler.step(&x_edit, &p_edit, (i, i_prev), StepNoise::Fresh(stream), sched)?;
        }
        diagnostics.push(StepDiagnostic {
            step: i,
            injected: controlled,
            replaced: controlled,
            branch_gap: x_orig.max_abs_diff(&x_edit)?,
        });
    }
    Ok(SubtaskResult {
        index: 0,
        edited: x_edit,
        orig: x_orig,
        track: mixed,
        diagnostics,
    })
}

/// Transforms each subtask's output before it feeds the next subtask.
pub type SubtaskHook<'a> = dyn FnMut(usize, VideoTensor) -> Result<VideoTensor> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ProgressionResult {
    /// Subtask outputs in order; the last one is the final edit.
    pub subtasks: Vec<SubtaskResult>,
    /// Input video of each subtask (after any hook).
    pub inputs: Vec<VideoTensor>,
    /// The last subtask's output after any hook.
    pub final_video: VideoTensor,
}

/// Runs the plan's subtasks in order.
///
/// Subtask 1 edits `v0` with its own latents; subtask t > 1 edits the
/// previous output, mixing that output's latents with `v0`'s. A plan with
/// a single waypoint still runs one identity subtask. All randomness comes
/// from `seed`: inversions and free refinement use disjoint forks.
#[allow(clippy::too_many_arguments)]
pub fn run_progression<D: Denoiser + ?Sized>(
    v0: &VideoTensor,
    plan: &EditPlan,
    cfg: &ControlConfig,
    model: &D,
    sched: &NoiseSchedule,
    seed: u64,
    mut hook: Option<&mut SubtaskHook<'_>>,
) -> Result<ProgressionResult> {
    cfg.validate()?;
    plan.validate()?;
    let (alpha_steps, _) = cfg.control_steps(sched);
    let root = RngStream::new(seed, Purpose::Sampling);
    let inverter = Guided::new(model, cfg.inversion_scale());
    let track_ref = invert(v0, alpha_steps, &inverter, &plan.waypoints[0], sched, cfg.sampler, &mut root.fork(0))?;

    let transitions: Vec<(usize, usize)> = if plan.waypoints.len() == 1 {
        vec![(0, 0)]
    } else {
        (1..plan.waypoints.len()).map(|t| (t - 1, t)).collect()
    };
    let mut current = v0.clone();
    let mut subtasks = Vec::with_capacity(transitions.len());
    let mut inputs = Vec::with_capacity(transitions.len());
    for (t, &(from, to)) in transitions.iter().enumerate() {
        let label = 2 * t as u64 + 1;
        let track_prev = if t == 0 {
            None
        } else {
            Some(invert(&current, alpha_steps, &inverter, &plan.waypoints[from], sched, cfg.sampler, &mut root.fork(label))?)
        };
        let mut result = preserve_edit(
            &current,
            &plan.waypoints[from],
            &plan.waypoints[to],
            cfg,
            model,
            sched,
            &track_ref,
            track_prev.as_ref(),
            &mut root.fork(label + 1),
        )?;
        result.index = t + 1;
        inputs.push(std::mem::replace(&mut current, result.edited.clone()));
        if let Some(h) = hook.as_deref_mut() {
            let next = h(t + 1, current)?;
            if next.dims() != v0.dims() {
                return Err(Error::Pipeline(format!(
                    "hook after subtask {} returned shape {:?}, expected {:?}",
                    t + 1,
                    next.dims(),
                    v0.dims()
                )));
            }
            next.ensure_finite("hook output")?;
            current = next;
        }
        subtasks.push(result);
    }
    Ok(ProgressionResult {
        subtasks,
        inputs,
        final_video: current,
    })
}

#[cfg(test)]
mod tests;
