//! The run configuration shared by every command: one strict JSON document
//! with `model`, `edit`, `sched`, `data`, `bench` and `seeds` namespaces.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::bench::BenchConfig;
use crate::denoiser::{PromptTokens, ToyDitConfig, TrainConfig};
use crate::editing::ControlConfig;
use crate::error::{Error, Result};
use crate::schedulers::LinearSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub arch: ToyDitConfig,
    pub train: TrainConfig,
    /// Temporal attention window used at inference; `None` attends over the
    /// whole clip.
    pub window: Option<usize>,
    pub looped: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ToyDitConfig::default(),
            train: TrainConfig::default(),
            window: None,
            looped: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training set size generated by `train`.
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Prompt describing the input video of `invert`, `edit` and `rer`.
    pub source_prompt: Option<Vec<u16>>,
    /// Prompt the edit should reach.
    pub target_prompt: Option<Vec<u16>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            frames: 4,
            height: 16,
            width: 16,
            source_prompt: None,
            target_prompt: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedConfig {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub edit: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub edit: ControlConfig,
    pub sched: LinearSchedule,
    pub data: DataConfig,
    pub bench: BenchConfig,
    pub seeds: SeedConfig,
    pub out: Option<PathBuf>,
}

fn config_error(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Parses a document; absent keys take defaults, unknown keys fail.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Sets the key at a dotted path such as `edit.alpha`. The value is read
    /// as JSON, falling back to a bare string.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut doc = self.to_json();
        let mut node = &mut doc;
        for key in path.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown key {path}")))?;
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_base()?;
        self.edit.validate()
    }

    /// Everything except the `edit` namespace, for commands that do not edit.
    pub fn validate_base(&self) -> Result<()> {
        self.model.arch.validate()?;
        self.model.train.validate()?;
        self.bench.validate()?;
        self.sched.build().map_err(|e| Error::Config(format!("sched: {e}")))?;
        let (a, d) = (&self.model.arch, &self.data);
        if a.schedule != self.sched {
            return Err(Error::Config("model.arch.schedule must equal sched".into()));
        }
        if d.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        if (d.height, d.width) != (a.height, a.width) {
            return Err(Error::Config(format!(
                "data.height x data.width = {}x{} but model.arch expects {}x{}",
                d.height, d.width, a.height, a.width
            )));
        }
        if d.frames == 0 || (d.frames > a.max_frames && self.model.window.is_none()) {
            return Err(Error::Config(format!(
                "data.frames = {} needs model.window when above model.arch.max_frames = {}",
                d.frames, a.max_frames
            )));
        }
        if let Some(w) = self.model.window {
            if w == 0 || w > a.max_frames {
                return Err(Error::Config(format!(
                    "model.window = {w} must lie in 1..=model.arch.max_frames ({})",
                    a.max_frames
                )));
            }
        }
        for (name, p) in [("data.source_prompt", &d.source_prompt), ("data.target_prompt", &d.target_prompt)] {
            if let Some(ids) = p {
                PromptTokens::new(ids.clone())
                    .validate(a.prompt_len, a.vocab)
                    .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn source_prompt(&self) -> Result<PromptTokens> {
        prompt(&self.data.source_prompt, "data.source_prompt")
    }

    pub fn target_prompt(&self) -> Result<PromptTokens> {
        prompt(&self.data.target_prompt, "data.target_prompt")
    }
}

fn prompt(ids: &Option<Vec<u16>>, name: &str) -> Result<PromptTokens> {
    ids.clone()
        .map(PromptTokens::new)
        .ok_or_else(|| Error::Config(format!("{name} is required")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json().to_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"edit": {"alpah": 0.5}}"#, r#"{"extra": 1}"#, r#"{"model": {"arch": {"depth": 3}}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["edit.alpha=0.7", "model.train.optimizer.lr=0.002", "edit.sampler.kind=ddim", "data.target_prompt=[1,2,3,4,5]"])
            .unwrap();
        assert_eq!(c.edit.alpha, 0.7);
        assert_eq!(c.model.train.optimizer.lr, 0.002);
        assert_eq!(c.edit.sampler.kind, crate::schedulers::SamplerKind::Ddim);
        assert_eq!(c.target_prompt().unwrap().ids(), &[1, 2, 3, 4, 5]);
        for bad in ["edit.gamma=1", "edit.alpha", "edit.alpha=\"x\"", "edit.alpha.x=1"] {
            assert!(matches!(c.clone().apply_overrides(&[bad]), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn validation_names_the_keys() {
        let mut c = RunConfig::default();
        c.set("edit.beta", "0.95").unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("edit.beta") && msg.contains("edit.alpha"), "{msg}");
        let mut c = RunConfig::default();
        c.set("data.frames", "8").unwrap();
        assert!(c.validate().is_err());
        c.set("model.window", "4").unwrap();
        c.validate().unwrap();
        c.set("data.source_prompt", "[1,2]").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().source_prompt().is_err());
    }
}
