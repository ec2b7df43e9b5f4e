//! Render-edit-reconstruct on a planar world: crops of a texture stand in
//! for camera views, and reconstruction is the per-texel least-squares fit.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::editing::{run_progression, ControlConfig, EditPlan, ProgressionResult};
use crate::error::{Error, Result};
use crate::schedulers::NoiseSchedule;
use crate::synth::Mask;
use crate::tensor::VideoTensor;

/// A world texture stored as a one-frame tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarScene {
    texture: VideoTensor,
}

impl PlanarScene {
    pub fn new(texture: VideoTensor) -> Result<Self> {
        if texture.frames() != 1 {
            return Err(Error::InvalidShape(format!("scene texture has {} frames, expected 1", texture.frames())));
        }
        texture.ensure_finite("scene texture")?;
        Ok(Self { texture })
    }

    pub fn texture(&self) -> &VideoTensor {
        &self.texture
    }

    pub fn height(&self) -> usize {
        self.texture.height()
    }

    pub fn width(&self) -> usize {
        self.texture.width()
    }

    pub fn channels(&self) -> usize {
        self.texture.channels()
    }
}

/// Fixed-size crop windows, one per frame, given by their top-left corners.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    pub frame_height: usize,
    pub frame_width: usize,
    pub windows: Vec<(usize, usize)>,
    #[serde(default)]
    pub looped: bool,
}

fn overlap_1d(a: usize, b: usize, len: usize) -> usize {
    (a.min(b) + len).saturating_sub(a.max(b))
}

impl CameraPath {
    /// Horizontal pan by `step` texels per frame.
    pub fn pan(frame_height: usize, frame_width: usize, frames: usize, step: usize) -> Self {
        Self {
            frame_height,
            frame_width,
            windows: (0..frames).map(|t| (0, t * step)).collect(),
            looped: false,
        }
    }

    pub fn frames(&self) -> usize {
        self.windows.len()
    }

    fn overlap(&self, a: usize, b: usize) -> usize {
        let (wa, wb) = (self.windows[a], self.windows[b]);
        overlap_1d(wa.0, wb.0, self.frame_height) * overlap_1d(wa.1, wb.1, self.frame_width)
    }

    pub fn validate(&self, scene_height: usize, scene_width: usize) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::Path("camera path has no windows".into()));
        }
        if self.frame_height == 0 || self.frame_width == 0 {
            return Err(Error::Path("crop size must be positive".into()));
        }
        for (t, &(top, left)) in self.windows.iter().enumerate() {
            if top + self.frame_height > scene_height || left + self.frame_width > scene_width {
                return Err(Error::Path(format!(
                    "window {t} at ({top}, {left}) leaves the {scene_height}x{scene_width} texture"
                )));
            }
        }
        let area = self.frame_height * self.frame_width;
        let mut links: Vec<(usize, usize)> = (1..self.frames()).map(|t| (t - 1, t)).collect();
        if self.looped && self.frames() > 1 {
            links.push((self.frames() - 1, 0));
        }
        for (a, b) in links {
            if 4 * self.overlap(a, b) < area {
                return Err(Error::Path(format!("windows {a} and {b} overlap by less than 25%")));
            }
        }
        Ok(())
    }
}

pub fn render(scene: &PlanarScene, path: &CameraPath) -> Result<VideoTensor> {
    path.validate(scene.height(), scene.width())?;
    let tex = &scene.texture;
    VideoTensor::from_fn(
        [path.frames(), path.frame_height, path.frame_width, scene.channels()],
        |t, y, x, c| {
            let (top, left) = path.windows[t];
            tex.get(0, top + y, left + x, c)
        },
    )
}

fn check_video(video: &VideoTensor, path: &CameraPath) -> Result<()> {
    if video.frames() != path.frames() || video.height() != path.frame_height || video.width() != path.frame_width {
        return Err(Error::ShapeMismatch(format!(
            "video {:?} does not match a {}-window path of {}x{} crops",
            video.dims(),
            path.frames(),
            path.frame_height,
            path.frame_width
        )));
    }
    Ok(())
}

/// Least-squares scene for a set of views: the mean of every pixel that
/// lands on a texel. Uncovered texels are 0 and unset in the mask.
pub fn reconstruct(video: &VideoTensor, path: &CameraPath, scene_height: usize, scene_width: usize) -> Result<(PlanarScene, Mask)> {
    path.validate(scene_height, scene_width)?;
    check_video(video, path)?;
    let c = video.channels();
    let mut sum = vec![0f64; scene_height * scene_width * c];
    let mut hits = vec![0u32; scene_height * scene_width];
    for (t, &(top, left)) in path.windows.iter().enumerate() {
        for y in 0..path.frame_height {
            for x in 0..path.frame_width {
                let texel = (top + y) * scene_width + left + x;
                hits[texel] += 1;
                for k in 0..c {
                    sum[texel * c + k] += video.get(t, y, x, k) as f64;
                }
            }
        }
    }
    let texture = VideoTensor::from_fn([1, scene_height, scene_width, c], |_, y, x, k| {
        let texel = y * scene_width + x;
        match hits[texel] {
            0 => 0.0,
            n => (sum[texel * c + k] / n as f64) as f32,
        }
    })?;
    let mask = Mask::from_fn(1, scene_height, scene_width, |_, y, x| hits[y * scene_width + x] > 0);
    Ok((PlanarScene::new(texture)?, mask))
}

/// Root-mean-square difference over every pair of frames, every texel both
/// frames see, and every channel. Zero exactly when the video is a render.
pub fn consistency_metric(video: &VideoTensor, path: &CameraPath) -> Result<f64> {
    check_video(video, path)?;
    let mut sum = 0f64;
    let mut count = 0usize;
    for a in 0..path.frames() {
        for b in a + 1..path.frames() {
            let ((ta, la), (tb, lb)) = (path.windows[a], path.windows[b]);
            let (y0, y1) = (ta.max(tb), (ta.min(tb) + path.frame_height));
            let (x0, x1) = (la.max(lb), (la.min(lb) + path.frame_width));
            for wy in y0..y1 {
                for wx in x0..x1 {
                    for k in 0..video.channels() {
                        let d = video.get(a, wy - ta, wx - la, k) as f64 - video.get(b, wy - tb, wx - lb, k) as f64;
                        sum += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("no two frames of the path overlap".into()));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerOutcome {
    pub scene: PlanarScene,
    pub coverage: Mask,
    /// Scene reconstructed from each subtask's raw output.
    pub subtask_scenes: Vec<PlanarScene>,
    /// With reconstruction enabled, the rendering of the final scene;
    /// otherwise the last subtask's raw output.
    pub final_video: VideoTensor,
    pub progression: ProgressionResult,
}

/// Edits a scene through its rendering. With `reconstruct_each` every
/// subtask output is projected back to a scene and re-rendered before it
/// feeds the next subtask, so every subtask input is exactly consistent.
#[allow(clippy::too_many_arguments)]
pub fn rer_edit<D: Denoiser + ?Sized>(
    scene: &PlanarScene,
    path: &CameraPath,
    plan: &EditPlan,
    cfg: &ControlConfig,
    model: &D,
    sched: &NoiseSchedule,
    seed: u64,
    reconstruct_each: bool,
) -> Result<RerOutcome> {
    let (h, w) = (scene.height(), scene.width());
    let v0 = render(scene, path)?;
    let mut scenes = Vec::new();
    let mut project = |_: usize, video: VideoTensor| -> Result<VideoTensor> {
        let (s, _) = reconstruct(&video, path, h, w)?;
        let again = render(&s, path)?;
        scenes.push(s);
        Ok(again)
    };
    let progression = if reconstruct_each {
        run_progression(&v0, plan, cfg, model, sched, seed, Some(&mut project))?
    } else {
        run_progression(&v0, plan, cfg, model, sched, seed, None)?
    };
    if !reconstruct_each {
        for r in &progression.subtasks {
            scenes.push(reconstruct(&r.edited, path, h, w)?.0);
        }
    }
    let (final_scene, coverage) = reconstruct(&progression.final_video, path, h, w)?;
    let final_video = if reconstruct_each {
        progression.final_video.clone()
    } else {
        progression.subtasks.last().expect("at least one subtask").edited.clone()
    };
    Ok(RerOutcome {
        scene: final_scene,
        coverage,
        subtask_scenes: scenes,
        final_video,
        progression,
    })
}

#[cfg(test)]
mod tests;
