//! Shared fixtures for the criterion benches.

use pve_core::denoiser::{PromptTokens, ToyDit, ToyDitConfig};
use pve_core::schedulers::NoiseSchedule;
use pve_core::synth::make_dataset;
use pve_core::{Purpose, Result, RngStream, VideoTensor};

/// The default toy model with random weights; timings do not depend on
/// training.
pub fn toy_model() -> Result<ToyDit> {
    ToyDit::init(ToyDitConfig::default(), 0)
}

pub fn schedule() -> Result<NoiseSchedule> {
    ToyDitConfig::default().schedule.build()
}

/// A synthetic clip at the default model size and its prompt.
pub fn toy_clip() -> Result<(VideoTensor, PromptTokens)> {
    let cfg = ToyDitConfig::default();
    let mut item = make_dataset(1, &mut RngStream::new(0, Purpose::Dataset), cfg.max_frames, cfg.height, cfg.width)?;
    let v = item.pop().expect("one item");
    Ok((v.video, v.prompt))
}
