use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedulers::{Sampler, SamplerKind};
use crate::tensor::{write_atomic, VideoTensor};

pub const TRACK_MAGIC: &[u8; 4] = b"VTRK";

/// Extracted latents: the noisy start `v_{aT}` and one injected noise per
/// sampler step, ordered from step `aT` down to step 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrack {
    pub alpha_steps: usize,
    pub sampler: Sampler,
    pub start: VideoTensor,
    pub noises: Vec<VideoTensor>,
}

impl LatentTrack {
    /// `(i, i_prev)` of every stored noise, in storage order.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        self.sampler.step_pairs(self.alpha_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.step_pairs().len();
        if self.noises.len() != want {
            return Err(Error::Contract(format!(
                "track holds {} noises, {:?} at alpha step {} needs {want}",
                self.noises.len(),
                self.sampler.kind,
                self.alpha_steps
            )));
        }
        self.start.ensure_finite("track start")?;
        for (k, n) in self.noises.iter().enumerate() {
            self.start.ensure_same_dims(n, "track noise")?;
            if n.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("track noise {k} is not finite")));
            }
        }
        Ok(())
    }

    /// Noise injected at the step leaving `i`, if `i` is on the track.
    pub fn noise_at(&self, i: usize) -> Option<&VideoTensor> {
        if i == 0 || i > self.alpha_steps {
            return None;
        }
        let pairs = self.step_pairs();
        pairs.iter().position(|&(s, _)| s == i).map(|k| &self.noises[k])
    }

    /// `VTRK`, sampler tag byte, `aT` as u32, a u32 DDIM stride (DDIM only),
    /// then the start and the noises as embedded `VTEN` records.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TRACK_MAGIC);
        out.push(self.sampler.kind.tag());
        out.extend_from_slice(&(self.alpha_steps as u32).to_le_bytes());
        if self.sampler.kind == SamplerKind::Ddim {
            out.extend_from_slice(&(self.sampler.stride as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.start.to_bytes());
        for n in &self.noises {
            out.extend_from_slice(&n.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != TRACK_MAGIC {
            return Err(Error::format(origin, "not a latent track"));
        }
        let kind = SamplerKind::from_tag(bytes[4])
            .ok_or_else(|| Error::format(origin, format!("unknown sampler tag {}", bytes[4])))?;
        let alpha_steps = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let mut pos = 9;
        let sampler = match kind {
            SamplerKind::Ddpm => Sampler::ddpm(),
            SamplerKind::Ddim => {
                let raw = bytes.get(9..13).ok_or_else(|| Error::format(origin, "truncated stride"))?;
                pos = 13;
                let stride = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
                if stride == 0 {
                    return Err(Error::format(origin, "zero DDIM stride"));
                }
                Sampler::ddim(stride)
            }
        };
        let (start, used) = VideoTensor::from_bytes(&bytes[pos..], origin)?;
        pos += used;
        let mut noises = Vec::new();
        while pos < bytes.len() {
            let (n, used) = VideoTensor::from_bytes(&bytes[pos..], origin)?;
            pos += used;
            noises.push(n);
        }
        let track = Self {
            alpha_steps,
            sampler,
            start,
            noises,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}
