use serde::{Deserialize, Serialize};

use crate::denoiser::PromptTokens;
use crate::error::{Error, Result};
use crate::synth::{SLOT_BACKGROUND, SLOT_COLOR, SLOT_EXTRA, SLOT_MOTION, SLOT_SHAPE};

/// Order in which slots are edited; slots beyond these follow in index order.
pub const SLOT_PRIORITY: [usize; 5] = [SLOT_BACKGROUND, SLOT_SHAPE, SLOT_COLOR, SLOT_EXTRA, SLOT_MOTION];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPlan {
    pub source: PromptTokens,
    pub target: PromptTokens,
    pub waypoints: Vec<PromptTokens>,
}

impl EditPlan {
    pub fn subtasks(&self) -> usize {
        (self.waypoints.len() - 1).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("edit plan: {m}")));
        if self.source.len() != self.target.len() {
            return bad("source and target lengths differ".into());
        }
        match (self.waypoints.first(), self.waypoints.last()) {
            (Some(first), Some(last)) if *first == self.source && *last == self.target => {}
            _ => return bad("waypoints must run from source to target".into()),
        }
        for (k, w) in self.waypoints.windows(2).enumerate() {
            if w[0].len() != w[1].len() || w[0] == w[1] {
                return bad(format!("waypoints {k} and {} do not differ", k + 1));
            }
        }
        Ok(())
    }
}

fn priority_order(len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = SLOT_PRIORITY.iter().copied().filter(|&s| s < len).collect();
    order.extend((0..len).filter(|s| !SLOT_PRIORITY.contains(s)));
    order
}

/// Interpolates `src` to `dst` one slot per subtask in priority order.
///
/// At most `max(K−1, 1)` subtasks are used. When more slots differ, they are
/// split into that many priority-ordered groups as evenly as possible, the
/// larger groups last.
pub fn plan_progression(src: &PromptTokens, dst: &PromptTokens, max_subtasks: usize) -> EditPlan {
    if src.len() != dst.len() {
        // Left for validation to reject.
        return EditPlan {
            source: src.clone(),
            target: dst.clone(),
            waypoints: vec![src.clone(), dst.clone()],
        };
    }
    let differing: Vec<usize> = priority_order(src.len())
        .into_iter()
        .filter(|&s| src.ids().get(s) != dst.ids().get(s))
        .collect();
    let mut waypoints = vec![src.clone()];
    if !differing.is_empty() {
        let groups = differing.len().min(max_subtasks.saturating_sub(1).max(1));
        let (base, extra) = (differing.len() / groups, differing.len() % groups);
        let mut cursor = 0;
        let mut current = src.clone();
        for g in 0..groups {
            let size = base + usize::from(g >= groups - extra);
            for &slot in &differing[cursor..cursor + size] {
                current = current.with_slot(slot, dst.ids()[slot]);
            }
            cursor += size;
            waypoints.push(current.clone());
        }
    }
    EditPlan {
        source: src.clone(),
        target: dst.clone(),
        waypoints,
    }
}
