//! Procedural moving-shape videos with exact prompts and per-slot masks,
//! and the proxy metrics computed against them.

mod metrics;

pub use metrics::{fulfillment_score, psnr_masked, PSNR_CAP};

use serde::{Deserialize, Serialize};

use crate::denoiser::PromptTokens;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::VideoTensor;

pub const SLOT_SHAPE: usize = 0;
pub const SLOT_COLOR: usize = 1;
pub const SLOT_BACKGROUND: usize = 2;
pub const SLOT_EXTRA: usize = 3;
pub const SLOT_MOTION: usize = 4;
pub const SLOTS: usize = 5;

/// Token 0 is the null token; each slot owns a contiguous id range.
const SHAPE_BASE: u16 = 1;
const COLOR_BASE: u16 = 4;
const BACKGROUND_BASE: u16 = 8;
const EXTRA_BASE: u16 = 11;
const MOTION_BASE: u16 = 13;
pub const VOCAB: usize = 16;

pub const SHAPE_COLORS: [[f32; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.2, 0.9], [0.95, 0.9, 0.1]];
pub const BACKGROUNDS: [[f32; 3]; 3] = [[0.05, 0.05, 0.05], [0.95, 0.95, 0.95], [0.5, 0.5, 0.5]];
pub const DOT_COLOR: [f32; 3] = [0.95, 0.4, 0.85];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extra {
    None,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Static,
    DriftRight,
    DriftDown,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
const EXTRAS: [Extra; 2] = [Extra::None, Extra::Dot];
const MOTIONS: [Motion; 3] = [Motion::Static, Motion::DriftRight, Motion::DriftDown];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: usize,
    pub background: usize,
    pub extra: Extra,
    pub motion: Motion,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Per-pixel, per-frame boolean region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            dims: [frames, height, width],
            data: vec![false; frames * height * width],
        }
    }

    pub fn from_fn(frames: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(frames, height, width);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    m.data[(t * height + y) * width + x] = f(t, y, x);
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.data[(t * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check(other)?;
        Ok(Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn complement(&self) -> Mask {
        Mask {
            dims: self.dims,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Restriction to frames `[start, start + count)`.
    pub fn slice_frames(&self, start: usize, count: usize) -> Result<Mask> {
        if start + count > self.dims[0] {
            return Err(Error::InvalidShape(format!("mask frames {start}..{} of {}", start + count, self.dims[0])));
        }
        let n = self.dims[1] * self.dims[2];
        Ok(Mask {
            dims: [count, self.dims[1], self.dims[2]],
            data: self.data[start * n..(start + count) * n].to_vec(),
        })
    }

    fn check(&self, other: &Mask) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    pub(crate) fn check_video(&self, v: &VideoTensor) -> Result<()> {
        if self.dims != [v.frames(), v.height(), v.width()] {
            return Err(Error::ShapeMismatch(format!("mask {:?} vs video {:?}", self.dims, v.dims())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub spec: SceneSpec,
    pub video: VideoTensor,
    pub prompt: PromptTokens,
    /// Region each slot controls, indexed by slot.
    pub masks: Vec<Mask>,
}

/// Object box side, motion step and dot side for a frame size.
struct Geometry {
    side: usize,
    step: usize,
    dot: usize,
    /// Exclusive row/column limits the object box stays inside.
    lim_h: usize,
    lim_w: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Spec("frame count must be positive".into()));
        }
        if self.color >= SHAPE_COLORS.len() || self.background >= BACKGROUNDS.len() {
            return Err(Error::Spec(format!(
                "color {} / background {} outside the palette",
                self.color, self.background
            )));
        }
        self.geometry().map(|_| ())
    }

    fn geometry(&self) -> Result<Geometry> {
        let short = self.height.min(self.width);
        let side = (3 * short + 4) / 8;
        let unit = (short / 8).max(1);
        let g = Geometry {
            side,
            step: unit,
            dot: unit,
            lim_h: self.height.saturating_sub(unit + 1),
            lim_w: self.width.saturating_sub(unit + 1),
        };
        if side < 2 || side >= g.lim_h || side >= g.lim_w {
            return Err(Error::Spec(format!(
                "a {side}-pixel shape does not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        Ok(g)
    }

    /// Top-left corner of the object box in frame `t`.
    fn origin(&self, g: &Geometry, t: usize) -> (usize, usize) {
        let (r, c) = ((g.lim_h - g.side) / 2, (g.lim_w - g.side) / 2);
        match self.motion {
            Motion::Static => (r, c),
            Motion::DriftRight => (r, (t * g.step).min(g.lim_w - g.side)),
            Motion::DriftDown => ((t * g.step).min(g.lim_h - g.side), c),
        }
    }

    fn covers(&self, g: &Geometry, y: usize, x: usize) -> bool {
        let s = g.side as i64;
        let (y, x) = (y as i64, x as i64);
        match self.shape {
            Shape::Square => true,
            Shape::Circle => (2 * y - (s - 1)).pow(2) + (2 * x - (s - 1)).pow(2) <= s * s,
            Shape::Triangle => (2 * x - (s - 1)).abs() <= y + 1,
        }
    }

    pub fn object_mask(&self) -> Result<Mask> {
        let g = self.geometry()?;
        Ok(Mask::from_fn(self.frames, self.height, self.width, |t, y, x| {
            let (r, c) = self.origin(&g, t);
            y >= r && x >= c && y < r + g.side && x < c + g.side && self.covers(&g, y - r, x - c)
        }))
    }

    pub fn dot_mask(&self) -> Result<Mask> {
        let g = self.geometry()?;
        let (r, c) = (self.height - 1 - g.dot, self.width - 1 - g.dot);
        let on = self.extra == Extra::Dot;
        Ok(Mask::from_fn(self.frames, self.height, self.width, |_, y, x| {
            on && y >= r && x >= c && y < r + g.dot && x < c + g.dot
        }))
    }

    pub fn prompt(&self) -> PromptTokens {
        fn idx<T: PartialEq>(all: &[T], v: T) -> u16 {
            all.iter().position(|a| *a == v).expect("listed variant") as u16
        }
        PromptTokens::new(vec![
            SHAPE_BASE + idx(&SHAPES, self.shape),
            COLOR_BASE + self.color as u16,
            BACKGROUND_BASE + self.background as u16,
            EXTRA_BASE + idx(&EXTRAS, self.extra),
            MOTION_BASE + idx(&MOTIONS, self.motion),
        ])
    }

    pub fn from_prompt(prompt: &PromptTokens, frames: usize, height: usize, width: usize) -> Result<Self> {
        let ids = prompt.ids();
        if ids.len() != SLOTS {
            return Err(Error::Spec(format!("prompt has {} slots, expected {SLOTS}", ids.len())));
        }
        let pick = |slot: usize, base: u16, n: usize| -> Result<usize> {
            let id = ids[slot];
            if id < base || id >= base + n as u16 {
                return Err(Error::Spec(format!("token {id} is not valid for slot {slot}")));
            }
            Ok((id - base) as usize)
        };
        let spec = Self {
            shape: SHAPES[pick(SLOT_SHAPE, SHAPE_BASE, SHAPES.len())?],
            color: pick(SLOT_COLOR, COLOR_BASE, SHAPE_COLORS.len())?,
            background: pick(SLOT_BACKGROUND, BACKGROUND_BASE, BACKGROUNDS.len())?,
            extra: EXTRAS[pick(SLOT_EXTRA, EXTRA_BASE, EXTRAS.len())?],
            motion: MOTIONS[pick(SLOT_MOTION, MOTION_BASE, MOTIONS.len())?],
            frames,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same scene with the slots of `prompt` that differ applied.
    pub fn with_prompt(&self, prompt: &PromptTokens) -> Result<Self> {
        Self::from_prompt(prompt, self.frames, self.height, self.width)
    }

    /// Every spec of the attribute grid at one size.
    pub fn grid(frames: usize, height: usize, width: usize) -> Vec<SceneSpec> {
        let mut out = Vec::new();
        for &shape in &SHAPES {
            for color in 0..SHAPE_COLORS.len() {
                for background in 0..BACKGROUNDS.len() {
                    for &extra in &EXTRAS {
                        for &motion in &MOTIONS {
                            out.push(SceneSpec {
                                shape,
                                color,
                                background,
                                extra,
                                motion,
                                frames,
                                height,
                                width,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Hard-edged raster of the spec. Geometry is a function of the spec alone,
/// so a target spec can be re-rendered pixel-aligned with its source.
pub fn gen_video(spec: &SceneSpec) -> Result<LabeledVideo> {
    spec.validate()?;
    let object = spec.object_mask()?;
    let dot = spec.dot_mask()?;
    let (bg, fg) = (BACKGROUNDS[spec.background], SHAPE_COLORS[spec.color]);
    let video = VideoTensor::from_fn([spec.frames, spec.height, spec.width, 3], |t, y, x, c| {
        if object.get(t, y, x) {
            fg[c]
        } else if dot.get(t, y, x) {
            DOT_COLOR[c]
        } else {
            bg[c]
        }
    })?;
    let background = object.union(&dot)?.complement();
    let masks = vec![object.clone(), object.clone(), background, dot, object];
    Ok(LabeledVideo {
        spec: spec.clone(),
        prompt: spec.prompt(),
        video,
        masks,
    })
}

/// Specs drawn uniformly over the attribute grid, one slot at a time.
pub fn sample_spec(stream: &mut RngStream, frames: usize, height: usize, width: usize) -> SceneSpec {
    SceneSpec {
        shape: SHAPES[stream.below(SHAPES.len() as u64) as usize],
        color: stream.below(SHAPE_COLORS.len() as u64) as usize,
        background: stream.below(BACKGROUNDS.len() as u64) as usize,
        extra: EXTRAS[stream.below(EXTRAS.len() as u64) as usize],
        motion: MOTIONS[stream.below(MOTIONS.len() as u64) as usize],
        frames,
        height,
        width,
    }
}

pub fn make_dataset(count: usize, stream: &mut RngStream, frames: usize, height: usize, width: usize) -> Result<Vec<LabeledVideo>> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    (0..count)
        .map(|_| gen_video(&sample_spec(stream, frames, height, width)))
        .collect()
}

/// Union of the regions, in either video, of every slot where the two
/// specs differ.
pub fn edit_region(src: &SceneSpec, dst: &SceneSpec) -> Result<Mask> {
    let (a, b) = (gen_video(src)?, gen_video(dst)?);
    let mut region = Mask::empty(src.frames, src.height, src.width);
    for slot in src.prompt().diff_slots(&dst.prompt()) {
        region = region.union(&a.masks[slot])?.union(&b.masks[slot])?;
    }
    Ok(region)
}
