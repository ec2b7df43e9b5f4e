use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame-window restriction for temporal self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Total frames `L` in the video being generated.
    pub total_frames: usize,
    /// Clip length `l` the model was trained on.
    pub window: usize,
    pub tokens_per_frame: usize,
    /// The first frame continues the last one.
    pub looped: bool,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_frames == 0 || self.window == 0 || self.tokens_per_frame == 0 {
            return Err(Error::Config(format!("invalid window spec {self:?}")));
        }
        Ok(())
    }
}

/// Frame-level admissibility with the temporal position each admitted key
/// frame takes when seen from a given query frame.
///
/// Query frame `k` admits key frames `j` with `|j - k| <= floor(l / 2)` at
/// position `j`. With looping, a query frame `k < l / 2` also admits the tail
/// frames `j` (0-based) with `L + k - l/2 < j <= L`, placed at position
/// `j - L` so they read as frames preceding `k`. Halves are compared exactly
/// (doubled integers). When a tail frame is already inside the plain window
/// it keeps its plain position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowMask {
    frames: usize,
    tokens_per_frame: usize,
    admit: Vec<bool>,
    position: Vec<i64>,
}

pub fn build_window_mask(ws: &WindowSpec) -> Result<WindowMask> {
    ws.validate()?;
    let big_l = ws.total_frames;
    let half = (ws.window / 2) as i64;
    let mut admit = vec![false; big_l * big_l];
    let mut position = vec![0i64; big_l * big_l];
    for k in 0..big_l {
        for j in 0..big_l {
            let idx = k * big_l + j;
            if (j as i64 - k as i64).abs() <= half {
                admit[idx] = true;
                position[idx] = j as i64;
            } else if ws.looped
                && 2 * k < ws.window
                && 2 * (big_l + k) < 2 * j + ws.window
            {
                // L + k - l/2 < j (doubled), j <= L holds for every 0-based j.
                admit[idx] = true;
                position[idx] = j as i64 - big_l as i64;
            }
        }
    }
    Ok(WindowMask {
        frames: big_l,
        tokens_per_frame: ws.tokens_per_frame,
        admit,
        position,
    })
}

impl WindowMask {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn admits_frame(&self, query: usize, key: usize) -> bool {
        self.admit[query * self.frames + key]
    }

    /// Temporal position of key frame `key` as seen from `query`, if admitted.
    pub fn effective_position(&self, query: usize, key: usize) -> Option<i64> {
        let idx = query * self.frames + key;
        self.admit[idx].then_some(self.position[idx])
    }

    pub fn admitted(&self, query: usize) -> Vec<usize> {
        (0..self.frames).filter(|&j| self.admits_frame(query, j)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.admit.iter().all(|&a| a)
    }

    /// Token-level view: token `t` belongs to frame `t / tokens_per_frame`.
    pub fn admits_token(&self, query: usize, key: usize) -> bool {
        self.admits_frame(query / self.tokens_per_frame, key / self.tokens_per_frame)
    }
}
