use std::fs;
use std::path::{Path, PathBuf};

use pve_core::config::RunConfig;
use pve_core::tensor::{export_frames, save_tensor, write_atomic};
use pve_core::{Result, VideoTensor};
use serde_json::{json, Value};

/// An output directory that lists everything written to it. Every file is
/// written to a temporary sibling and renamed into place.
pub struct RunDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn track(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.outputs.push(rel.to_string());
        Ok(path)
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.track(rel)?;
        write_atomic(&path, bytes)
    }

    pub fn json(&mut self, rel: &str, value: &Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.bytes(rel, text.as_bytes())
    }

    pub fn tensor(&mut self, rel: &str, t: &VideoTensor) -> Result<()> {
        let path = self.track(rel)?;
        save_tensor(t, &path)
    }

    /// Writes `<rel>/frame_XXXX.ppm` (or `.pgm`) per frame.
    pub fn frames(&mut self, rel: &str, t: &VideoTensor) -> Result<()> {
        let dir = self.root.join(rel);
        export_frames(t, &dir)?;
        self.outputs.push(format!("{rel}/"));
        Ok(())
    }

    /// Writes `config.json` (the resolved configuration, loadable with
    /// `--config`), `metrics.json` and `manifest.json`.
    pub fn finish(mut self, command: &str, args: Value, cfg: &RunConfig, metrics: Value) -> Result<()> {
        self.json("config.json", &cfg.to_json())?;
        self.json("metrics.json", &metrics)?;
        let manifest = json!({
            "command": command,
            "args": args,
            "config": cfg.to_json(),
            "seeds": serde_json::to_value(&cfg.seeds)?,
            "outputs": self.outputs,
            "metrics": metrics,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&self.root.join("manifest.json"), text.as_bytes())
    }
}
