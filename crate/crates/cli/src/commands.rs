use std::fs;
use std::path::Path;

use pve_core::attention::bench::{run_bench, slope};
use pve_core::config::RunConfig;
use pve_core::denoiser::{checkpoint_bytes, load_checkpoint, train as train_model, Guided, PromptTokens, ToyDit, TrainingSample};
use pve_core::editing::{plan_progression, ProgressionResult};
use pve_core::inversion::{invert as extract, replay as replay_track, LatentTrack};
use pve_core::rer::{consistency_metric, rer_edit, CameraPath, PlanarScene};
use pve_core::synth::{edit_region, fulfillment_score, make_dataset, psnr_masked, Mask, SceneSpec};
use pve_core::tensor::load_tensor;
use pve_core::{Error, Purpose, Result, RngStream, VideoTensor};
use serde_json::{json, Value};

use crate::output::RunDir;
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

/// Loads a checkpoint and makes the config describe it.
fn load_model(path: &Path, cfg: &mut RunConfig) -> Result<ToyDit> {
    let model = load_checkpoint(path)?;
    cfg.model.arch = model.config().clone();
    match cfg.model.window {
        Some(w) => model.with_window(w, cfg.model.looped),
        None => Ok(model),
    }
}

fn masks_tensor(masks: &[Mask]) -> Result<VideoTensor> {
    let [t, h, w] = masks[0].dims();
    VideoTensor::from_fn([t, h, w, masks.len()], |f, y, x, c| f32::from(u8::from(masks[c].get(f, y, x))))
}

pub fn gen_data(count: usize, seed: u64, out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.data.count = count;
    cfg.seeds.data = seed;
    cfg.validate_base()?;
    let d = &cfg.data;
    let items = make_dataset(count, &mut RngStream::new(seed, Purpose::Dataset), d.frames, d.height, d.width)?;
    let mut dir = RunDir::create(out)?;
    let mut lines = String::new();
    let mut shapes = std::collections::BTreeMap::<String, usize>::new();
    for (k, item) in items.iter().enumerate() {
        let (video, masks) = (format!("items/item_{k:05}.vten"), format!("items/item_{k:05}_masks.vten"));
        dir.tensor(&video, &item.video)?;
        dir.tensor(&masks, &masks_tensor(&item.masks)?)?;
        *shapes.entry(format!("{:?}", item.spec.shape).to_lowercase()).or_default() += 1;
        let record = json!({
            "index": k,
            "spec": item.spec,
            "prompt": item.prompt.ids(),
            "video": video,
            "masks": masks,
        });
        lines.push_str(&record.to_string());
        lines.push('\n');
    }
    dir.bytes("dataset.jsonl", lines.as_bytes())?;
    let metrics = json!({ "count": items.len(), "shape_counts": shapes });
    dir.finish("gen-data", json!({ "count": count, "seed": seed }), &cfg, metrics)
}

pub fn train(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate_base()?;
    let sched = cfg.sched.build()?;
    let d = &cfg.data;
    let data: Vec<TrainingSample> = make_dataset(d.count, &mut RngStream::new(cfg.seeds.data, Purpose::Dataset), d.frames, d.height, d.width)?
        .into_iter()
        .map(|item| TrainingSample {
            video: item.video,
            prompt: item.prompt,
        })
        .collect();
    let mut model = ToyDit::init(cfg.model.arch.clone(), cfg.seeds.init)?;
    let report = train_model(&mut model, &data, &sched, &cfg.model.train, &mut RngStream::new(cfg.seeds.train, Purpose::Training))?;
    let mut dir = RunDir::create(out)?;
    dir.bytes("model.vckp", &checkpoint_bytes(&model)?)?;
    let metrics = json!({
        "parameters": model.config().param_count(),
        "initial_smoothed_loss": report.initial_smoothed,
        "final_smoothed_loss": report.final_smoothed,
        "losses": report.losses,
    });
    dir.finish("train", json!({}), &cfg, metrics)
}

fn source_or_null(cfg: &RunConfig) -> PromptTokens {
    cfg.source_prompt().unwrap_or_else(|_| PromptTokens::null(cfg.model.arch.prompt_len))
}

fn inversion_scale(cfg: &RunConfig) -> f64 {
    if cfg.edit.guided_inversion {
        cfg.edit.guidance_scale
    } else {
        1.0
    }
}

pub fn invert(video: &Path, alpha: f64, checkpoint: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.edit.alpha = alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")));
    }
    let model = load_model(checkpoint, &mut cfg)?;
    cfg.validate_base()?;
    let sched = cfg.sched.build()?;
    let v0 = load_tensor(video)?;
    let prompt = source_or_null(&cfg);
    let inverter = Guided::new(&model, inversion_scale(&cfg));
    let mut stream = RngStream::new(cfg.seeds.edit, Purpose::Sampling);
    let track = extract(&v0, sched.control_step(alpha), &inverter, &prompt, &sched, cfg.edit.sampler, &mut stream)?;
    let back = replay_track(&track, &inverter, &prompt, &sched)?;
    let err = back.max_abs_diff(&v0)?;
    let mut dir = RunDir::create(out)?;
    dir.bytes("track.vtrk", &track.to_bytes())?;
    dir.tensor("source.vten", &v0)?;
    let metrics = json!({
        "alpha_steps": track.alpha_steps,
        "noises": track.noises.len(),
        "replay_max_abs_err": err,
    });
    let call = json!({ "video": video, "alpha": alpha, "checkpoint": checkpoint });
    dir.finish("invert", call, &cfg, metrics)
}

/// Uses the `config.json` an `invert` run left beside the track unless a
/// config file is given.
pub fn replay(track: &Path, checkpoint: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let sibling = |name: &str| track.parent().map(|p| p.join(name)).filter(|p| p.exists());
    let mut args = args.clone();
    if args.config.is_none() {
        args.config = sibling("config.json");
    }
    let mut cfg = load_config(&args)?;
    let model = load_model(checkpoint, &mut cfg)?;
    cfg.validate_base()?;
    let sched = cfg.sched.build()?;
    let t = LatentTrack::load(track)?;
    let prompt = source_or_null(&cfg);
    let v = replay_track(&t, &Guided::new(&model, inversion_scale(&cfg)), &prompt, &sched)?;
    let err = match sibling("source.vten") {
        Some(p) => Some(v.max_abs_diff(&load_tensor(&p)?)? as f64),
        None => None,
    };
    let mut dir = RunDir::create(out)?;
    dir.tensor("replay.vten", &v)?;
    if v.channels() == 1 || v.channels() == 3 {
        dir.frames("frames", &v)?;
    }
    let call = json!({ "track": track, "checkpoint": checkpoint });
    dir.finish("replay", call, &cfg, json!({ "max_abs_err_vs_source": err }))
}

/// Scene specs for both prompts when they describe synthetic scenes of the
/// video's size; metrics that need ground truth are skipped otherwise.
fn specs(src: &PromptTokens, dst: &PromptTokens, v: &VideoTensor) -> Option<(SceneSpec, SceneSpec)> {
    let a = SceneSpec::from_prompt(src, v.frames(), v.height(), v.width()).ok()?;
    let b = SceneSpec::from_prompt(dst, v.frames(), v.height(), v.width()).ok()?;
    Some((a, b))
}

fn subtask_metrics(r: &ProgressionResult, waypoints: &[PromptTokens], v0: &VideoTensor) -> Result<Vec<Value>> {
    let truth = specs(&waypoints[0], waypoints.last().expect("waypoints"), v0);
    let background = match &truth {
        Some((a, b)) => Some(edit_region(a, b)?.complement()).filter(|m| !m.is_empty()),
        None => None,
    };
    let mut out = Vec::new();
    for s in &r.subtasks {
        let reached = &waypoints[s.index.min(waypoints.len() - 1)];
        let bg_psnr = match &background {
            Some(m) => Some(psnr_masked(&s.edited, v0, m)?),
            None => None,
        };
        let fulfillment = match specs(&waypoints[0], reached, v0) {
            Some((a, b)) => {
                let region = edit_region(&a, &b)?;
                if region.is_empty() {
                    None
                } else {
                    Some(fulfillment_score(&s.edited, &b, &region)?)
                }
            }
            None => None,
        };
        out.push(json!({
            "subtask": s.index,
            "prompt": reached.ids(),
            "controlled_steps": s.diagnostics.iter().filter(|d| d.injected).count(),
            "background_psnr": bg_psnr,
            "fulfillment": fulfillment,
        }));
    }
    Ok(out)
}

pub fn edit(video: &Path, checkpoint: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.edit.validate()?;
    let model = load_model(checkpoint, &mut cfg)?;
    cfg.validate()?;
    let (src, dst) = (cfg.source_prompt()?, cfg.target_prompt()?);
    let sched = cfg.sched.build()?;
    let v0 = load_tensor(video)?;
    let plan = plan_progression(&src, &dst, cfg.edit.max_subtasks);
    let r = pve_core::editing::run_progression(&v0, &plan, &cfg.edit, &model, &sched, cfg.seeds.edit, None)?;
    let mut dir = RunDir::create(out)?;
    for s in &r.subtasks {
        dir.tensor(&format!("subtask_{}/video.vten", s.index), &s.edited)?;
        dir.frames(&format!("subtask_{}", s.index), &s.edited)?;
    }
    dir.tensor("final.vten", &r.final_video)?;
    let metrics = json!({
        "plan": plan.waypoints.iter().map(|w| w.ids().to_vec()).collect::<Vec<_>>(),
        "subtasks": subtask_metrics(&r, &plan.waypoints, &v0)?,
    });
    let call = json!({ "video": video, "checkpoint": checkpoint });
    dir.finish("edit", call, &cfg, metrics)
}

pub fn rer(scene: &Path, path: &Path, checkpoint: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.edit.validate()?;
    let model = load_model(checkpoint, &mut cfg)?;
    cfg.validate()?;
    let (src, dst) = (cfg.source_prompt()?, cfg.target_prompt()?);
    let sched = cfg.sched.build()?;
    let world = PlanarScene::new(load_tensor(scene)?)?;
    let camera: CameraPath = serde_json::from_str(&fs::read_to_string(path)?)?;
    let plan = plan_progression(&src, &dst, cfg.edit.max_subtasks);
    let r = rer_edit(&world, &camera, &plan, &cfg.edit, &model, &sched, cfg.seeds.edit, true)?;
    let mut dir = RunDir::create(out)?;
    let mut per = Vec::new();
    for (s, sc) in r.progression.subtasks.iter().zip(&r.subtask_scenes) {
        dir.tensor(&format!("subtask_{}/video.vten", s.index), &s.edited)?;
        dir.tensor(&format!("subtask_{}/scene.vten", s.index), sc.texture())?;
        dir.frames(&format!("subtask_{}", s.index), &s.edited)?;
        per.push(json!({
            "subtask": s.index,
            "raw_consistency": consistency_metric(&s.edited, &camera)?,
        }));
    }
    dir.tensor("scene.vten", r.scene.texture())?;
    dir.tensor("final.vten", &r.final_video)?;
    dir.frames("final", &r.final_video)?;
    let metrics = json!({
        "subtasks": per,
        "final_consistency": consistency_metric(&r.final_video, &camera)?,
        "covered_texels": r.coverage.count(),
    });
    let call = json!({ "scene": scene, "path": path, "checkpoint": checkpoint });
    dir.finish("rer", call, &cfg, metrics)
}

pub fn attnbench(grid: &str, out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    cfg.bench.sizes = grid
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--grid {grid:?}: {e}")))?;
    cfg.validate_base()?;
    let report = run_bench(&cfg.bench)?;
    let mut dir = RunDir::create(out)?;
    dir.json("report.json", &serde_json::to_value(&report)?)?;
    let points = |f: fn(&pve_core::attention::bench::AuxPoint) -> Option<usize>| -> Option<f64> {
        let pts: Option<Vec<(f64, f64)>> = report.aux_vs_m.iter().map(|p| f(p).map(|b| (p.m as f64, b as f64))).collect();
        pts.filter(|p| p.len() > 1).map(|p| slope(&p))
    };
    let metrics = json!({
        "max_rel_dev": report.rows.iter().map(|r| r.max_rel_dev).fold(0.0, f64::max),
        "speedup": report.rows.iter().map(|r| json!({ "size": r.size, "ratio": r.speedup })).collect::<Vec<_>>(),
        "streaming_aux_slope": points(|p| p.streaming_aux_bytes),
        "naive_aux_slope": points(|p| p.naive_aux_bytes),
    });
    dir.finish("attnbench", json!({ "grid": grid }), &cfg, metrics)
}
