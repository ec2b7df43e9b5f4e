//! DDPM-latent extraction: the per-step noises that make a sampler's
//! reverse chain reproduce a given video.

mod track;

pub use track::{LatentTrack, TRACK_MAGIC};

use crate::denoiser::{Denoiser, PromptTokens};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedulers::{forward_transition, step_decomposition, NoiseSchedule, Sampler, StepNoise};
use crate::tensor::VideoTensor;

/// The stochastic forward chain `v_0, v_1, ..., v_steps`, one fresh
/// Gaussian per step.
pub fn forward_chain(v0: &VideoTensor, steps: usize, sched: &NoiseSchedule, stream: &mut RngStream) -> Result<Vec<VideoTensor>> {
    let mut chain = Vec::with_capacity(steps + 1);
    chain.push(v0.clone());
    for i in 1..=steps {
        let z = stream.gaussian_tensor(v0.dims())?;
        let next = forward_transition(&chain[i - 1], i - 1, i, &z, sched)?;
        chain.push(next);
    }
    Ok(chain)
}

/// Extracts latents for the first `alpha_steps` noising steps of `v0`.
///
/// Each noise is solved against the state the replay will actually be in
/// (which equals the forward chain up to 32-bit rounding of earlier steps),
/// so rounding never compounds along the chain.
pub fn invert<D: Denoiser + ?Sized>(
    v0: &VideoTensor,
    alpha_steps: usize,
    denoiser: &D,
    prompt: &PromptTokens,
    sched: &NoiseSchedule,
    sampler: Sampler,
    stream: &mut RngStream,
) -> Result<LatentTrack> {
    if alpha_steps > sched.steps() {
        return Err(Error::StepIndex(format!("alpha step {alpha_steps} beyond {} steps", sched.steps())));
    }
    v0.ensure_finite("inversion source")?;
    let chain = forward_chain(v0, alpha_steps, sched, stream)?;
    let start = chain[alpha_steps].clone();
    let pairs = sampler.step_pairs(alpha_steps);
    let mut noises = Vec::with_capacity(pairs.len());
    let mut x = start.clone();
    for (i, i_prev) in pairs {
        let pred = denoiser.predict_eps(&x, i, prompt)?;
        let (det, scale) = step_decomposition(&sampler, &x, &pred, (i, i_prev), sched)?;
        let target = chain[i_prev].data();
        let n: Vec<f32> = target
            .iter()
            .zip(&det)
            .map(|(&t, &d)| ((t as f64 - d) / scale) as f32)
            .collect();
        let n = VideoTensor::new(x.dims(), n)?;
        x = sampler.step(&x, &pred, (i, i_prev), StepNoise::Injected(&n), sched)?;
        noises.push(n);
    }
    Ok(LatentTrack {
        alpha_steps,
        sampler,
        start,
        noises,
    })
}

/// Runs the track's sampler from its start, injecting the stored noises.
pub fn replay<D: Denoiser + ?Sized>(track: &LatentTrack, denoiser: &D, prompt: &PromptTokens, sched: &NoiseSchedule) -> Result<VideoTensor> {
    track.validate()?;
    if track.alpha_steps > sched.steps() {
        return Err(Error::Contract(format!(
            "track starts at step {} of a {}-step schedule",
            track.alpha_steps,
            sched.steps()
        )));
    }
    let mut x = track.start.clone();
    for ((i, i_prev), n) in track.step_pairs().into_iter().zip(&track.noises) {
        let pred = denoiser.predict_eps(&x, i, prompt)?;
        x = track.sampler.step(&x, &pred, (i, i_prev), StepNoise::Injected(n), sched)?;
    }
    Ok(x)
}

/// [`replay`] that first checks the track was made for `sampler`.
pub fn replay_with<D: Denoiser + ?Sized>(
    track: &LatentTrack,
    sampler: Sampler,
    denoiser: &D,
    prompt: &PromptTokens,
    sched: &NoiseSchedule,
) -> Result<VideoTensor> {
    if track.sampler != sampler {
        return Err(Error::Contract(format!(
            "track was extracted for {:?}, replay requested {:?}",
            track.sampler, sampler
        )));
    }
    replay(track, denoiser, prompt, sched)
}
