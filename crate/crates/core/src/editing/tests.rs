use proptest::prelude::*;

use super::*;
use crate::denoiser::{GmmOracle, ToyDit, ToyDitConfig};
use crate::inversion::replay;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn media(dims: [usize; 4], seed: u64) -> VideoTensor {
    RngStream::new(seed, Purpose::Dataset)
        .gaussian_tensor(dims)
        .unwrap()
        .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
}

fn tiny_dit() -> ToyDit {
    ToyDit::init(ToyDitConfig::tiny(), 11).unwrap()
}

fn gmm() -> GmmOracle {
    GmmOracle::new(vec![0.5, 0.5], vec![vec![0.3; 3], vec![0.7; 3]], vec![0.01, 0.02], sched()).unwrap()
}

fn track_for<D: Denoiser>(d: &D, v: &VideoTensor, prompt: &PromptTokens, cfg: &ControlConfig, seed: u64) -> LatentTrack {
    let s = sched();
    let g = Guided::new(d, cfg.inversion_scale());
    invert(v, cfg.control_steps(&s).0, &g, prompt, &s, cfg.sampler, &mut RngStream::new(seed, Purpose::Sampling)).unwrap()
}

fn identity_cfg() -> ControlConfig {
    ControlConfig {
        beta: 0.0,
        lambda: 1.0,
        ..ControlConfig::default()
    }
}

#[test]
fn defaults_and_validation() {
    let c = ControlConfig::default();
    assert_eq!((c.alpha, c.beta, c.guidance_scale, c.lambda, c.max_subtasks), (0.9, 0.5, 7.0, 0.5, 6));
    assert_eq!(c.control_steps(&sched()), (900, 500));
    assert!(c.validate().is_ok());
    let err = ControlConfig { beta: 0.9, ..c.clone() }.validate().unwrap_err().to_string();
    assert!(err.contains("edit.beta") && err.contains("edit.alpha"), "{err}");
    assert!(ControlConfig { alpha: 1.5, ..c.clone() }.validate().is_err());
    assert!(ControlConfig { lambda: -0.1, ..c.clone() }.validate().is_err());
    assert!(ControlConfig { max_subtasks: 0, ..c.clone() }.validate().is_err());
    assert!(ControlConfig { alpha: 0.0, beta: 0.0, ..c.clone() }.validate().is_ok());
    let parsed: ControlConfig = serde_json::from_str(r#"{"alpha": 0.5, "beta": 0.1}"#).unwrap();
    assert_eq!(parsed.guidance_scale, 7.0);
    assert!(serde_json::from_str::<ControlConfig>(r#"{"alpa": 0.5}"#).is_err());
}

#[test]
fn mixing_examples() {
    let t = |value: f32| LatentTrack {
        alpha_steps: 3,
        sampler: Sampler::ddpm(),
        start: VideoTensor::filled([1, 2, 2, 3], value).unwrap(),
        noises: vec![VideoTensor::filled([1, 2, 2, 3], value).unwrap(); 3],
    };
    let (plus, minus) = (t(1.0), t(-1.0));
    assert_eq!(mix_tracks(&plus, &minus, 1.0).unwrap(), plus);
    assert_eq!(mix_tracks(&plus, &minus, 0.0).unwrap(), minus);
    let mid = mix_tracks(&plus, &minus, 0.5).unwrap();
    assert!(mid.noises.iter().chain([&mid.start]).all(|n| n.data().iter().all(|&v| v == 0.0)));
    let q = mix_tracks(&plus, &minus, 0.25).unwrap();
    assert!(q.noises[1].data().iter().all(|&v| v == -0.5));

    let mut short = minus.clone();
    short.alpha_steps = 2;
    short.noises.pop();
    assert!(matches!(mix_tracks(&plus, &short, 0.5), Err(Error::Contract(_))));
    let mut wide = minus;
    wide.start = VideoTensor::zeros([1, 2, 3, 3]).unwrap();
    wide.noises = vec![VideoTensor::zeros([1, 2, 3, 3]).unwrap(); 3];
    assert!(matches!(mix_tracks(&plus, &wide, 0.5), Err(Error::ShapeMismatch(_))));
}

#[test]
fn zero_alpha_returns_source() {
    let m = tiny_dit();
    let v = media([2, 4, 4, 3], 1);
    let p = PromptTokens::new(vec![1, 2, 3]);
    let cfg = ControlConfig {
        alpha: 0.0,
        beta: 0.0,
        ..ControlConfig::default()
    };
    let track = track_for(&m, &v, &p, &cfg, 0);
    let q = PromptTokens::new(vec![1, 4, 3]);
    let r = preserve_edit(&v, &p, &q, &cfg, &m, &sched(), &track, None, &mut RngStream::new(0, Purpose::Sampling)).unwrap();
    assert_eq!(r.edited, v);
    assert!(r.diagnostics.is_empty());
}

#[test]
fn identity_edit_reproduces_source() {
    let m = tiny_dit();
    let s = sched();
    let p = PromptTokens::new(vec![2, 5, 1]);
    for (k, sampler) in [Sampler::ddpm(), Sampler::ddim(10)].into_iter().enumerate() {
        let cfg = ControlConfig { sampler, ..identity_cfg() };
        let v = media([2, 4, 4, 3], 3 + k as u64);
        let track = track_for(&m, &v, &p, &cfg, k as u64);
        let r = preserve_edit(&v, &p, &p, &cfg, &m, &s, &track, None, &mut RngStream::new(1, Purpose::Sampling)).unwrap();
        let err = r.edited.max_abs_diff(&v).unwrap();
        assert!(err <= 1e-3, "{sampler:?}: {err}");
        // The orig branch is the plain guided replay of its own track.
        assert_eq!(r.orig, replay(&track, &Guided::new(&m, cfg.guidance_scale), &p, &s).unwrap());
    }
}

#[test]
fn identical_prompts_keep_branches_bitwise_equal() {
    let m = tiny_dit();
    let p = PromptTokens::new(vec![2, 5, 1]);
    let cfg = ControlConfig { alpha: 0.3, ..identity_cfg() };
    let v = media([2, 4, 4, 3], 5);
    let track = track_for(&m, &v, &p, &cfg, 2);
    let r = preserve_edit(&v, &p, &p, &cfg, &m, &sched(), &track, None, &mut RngStream::new(1, Purpose::Sampling)).unwrap();
    assert_eq!(r.diagnostics.len(), 300);
    assert!(r.diagnostics.iter().all(|d| d.branch_gap == 0.0));
    assert_eq!(r.edited, r.orig);
}

#[test]
fn control_is_active_exactly_inside_the_interval() {
    let g = gmm();
    let s = sched();
    let p = PromptTokens::null(0);
    let v = media([2, 1, 1, 3], 0);
    for (alpha, beta) in [(0.9, 0.5), (0.5, 0.0), (1.0, 0.9), (0.25, 0.1)] {
        for sampler in [Sampler::ddpm(), Sampler::ddim(7)] {
            let cfg = ControlConfig {
                alpha,
                beta,
                sampler,
                ..ControlConfig::default()
            };
            let (a, b) = cfg.control_steps(&s);
            let track = track_for(&g, &v, &p, &cfg, 0);
            let r = preserve_edit(&v, &p, &p, &cfg, &g, &s, &track, None, &mut RngStream::new(0, Purpose::Sampling)).unwrap();
            let steps: Vec<usize> = r.diagnostics.iter().map(|d| d.step).collect();
            assert_eq!(steps, sampler.step_pairs(a).iter().map(|p| p.0).collect::<Vec<_>>());
            for d in &r.diagnostics {
                let inside = b < d.step && d.step <= a;
                assert_eq!((d.injected, d.replaced), (inside, inside), "step {}", d.step);
            }
        }
    }
}

#[test]
fn free_refinement_uses_the_stream() {
    let g = gmm();
    let s = sched();
    let p = PromptTokens::null(0);
    let v = media([2, 1, 1, 3], 0);
    let cfg = ControlConfig::default();
    let track = track_for(&g, &v, &p, &cfg, 0);
    let run = |seed| preserve_edit(&v, &p, &p, &cfg, &g, &s, &track, None, &mut RngStream::new(seed, Purpose::Sampling)).unwrap();
    assert_eq!(run(3), run(3));
    assert_ne!(run(3).edited, run(4).edited);
    // DDIM refines without noise, so the stream is irrelevant.
    let cfg = ControlConfig { sampler: Sampler::ddim(1), ..cfg };
    let track = track_for(&g, &v, &p, &cfg, 0);
    let run = |seed| preserve_edit(&v, &p, &p, &cfg, &g, &s, &track, None, &mut RngStream::new(seed, Purpose::Sampling)).unwrap();
    assert_eq!(run(3), run(4));
}

#[test]
fn contract_violations() {
    let g = gmm();
    let s = sched();
    let p = PromptTokens::null(0);
    let v = media([2, 1, 1, 3], 0);
    let cfg = ControlConfig::default();
    let track = track_for(&g, &v, &p, &cfg, 0);
    let mut st = RngStream::new(0, Purpose::Sampling);
    let other = ControlConfig { alpha: 0.8, ..cfg.clone() };
    assert!(matches!(preserve_edit(&v, &p, &p, &other, &g, &s, &track, None, &mut st), Err(Error::Contract(_))));
    let ddim = ControlConfig { sampler: Sampler::ddim(1), ..cfg.clone() };
    assert!(matches!(preserve_edit(&v, &p, &p, &ddim, &g, &s, &track, None, &mut st), Err(Error::Contract(_))));
    let bad = ControlConfig { beta: 0.95, ..cfg.clone() };
    assert!(matches!(preserve_edit(&v, &p, &p, &bad, &g, &s, &track, None, &mut st), Err(Error::Config(_))));
    let w = media([1, 1, 2, 3], 0);
    assert!(matches!(preserve_edit(&w, &p, &p, &cfg, &g, &s, &track, None, &mut st), Err(Error::ShapeMismatch(_))));
}

#[test]
fn plan_examples() {
    let src = PromptTokens::new(vec![1, 4, 8, 11, 13]);
    let plan = plan_progression(&src, &src, 6);
    assert_eq!(plan.waypoints, vec![src.clone()]);
    assert!(plan.validate().is_ok());

    let dst = src.with_slot(0, 2).with_slot(1, 5).with_slot(2, 9);
    let plan = plan_progression(&src, &dst, 6);
    assert_eq!(plan.waypoints.len(), 4);
    let changed: Vec<Vec<usize>> = plan.waypoints.windows(2).map(|w| w[0].diff_slots(&w[1])).collect();
    assert_eq!(changed, vec![vec![2], vec![0], vec![1]]);

    let forced = plan_progression(&src, &dst, 1);
    assert_eq!(forced.waypoints, vec![src.clone(), dst.clone()]);
    assert_eq!(forced.subtasks(), 1);

    let a = PromptTokens::new(vec![1; 7]);
    let b = PromptTokens::new(vec![2; 7]);
    let plan = plan_progression(&a, &b, 6);
    assert_eq!(plan.waypoints.len(), 6);
    let sizes: Vec<usize> = plan.waypoints.windows(2).map(|w| w[0].diff_slots(&w[1]).len()).collect();
    assert_eq!(sizes, vec![1, 1, 1, 2, 2]);
    assert!(plan.validate().is_ok());
}

/// Every split of the priority-ordered differing slots into `groups`
/// contiguous nonempty runs; the planner's choice is the most even one
/// (least sum of squared run lengths), ties broken towards small runs first.
fn brute_force_sizes(d: usize, groups: usize) -> Vec<usize> {
    let mut best: Option<Vec<usize>> = None;
    for cuts in 0u32..(1 << (d - 1)) {
        if cuts.count_ones() as usize != groups - 1 {
            continue;
        }
        let mut sizes = vec![];
        let mut run = 1;
        for k in 0..d - 1 {
            if cuts >> k & 1 == 1 {
                sizes.push(run);
                run = 1;
            } else {
                run += 1;
            }
        }
        sizes.push(run);
        let key = |s: &Vec<usize>| (s.iter().map(|x| x * x).sum::<usize>(), s.clone());
        if best.as_ref().map_or(true, |b| key(&sizes) < key(b)) {
            best = Some(sizes);
        }
    }
    best.unwrap()
}

#[test]
fn bundling_matches_brute_force() {
    for len in 1..=9usize {
        let a = PromptTokens::new(vec![1; len]);
        for d in 1..=len {
            let b = PromptTokens::new((0..len).map(|s| if s < d { 2 } else { 1 }).collect());
            for k in 1..=8 {
                let plan = plan_progression(&a, &b, k);
                let sizes: Vec<usize> = plan.waypoints.windows(2).map(|w| w[0].diff_slots(&w[1]).len()).collect();
                assert_eq!(sizes, brute_force_sizes(d, d.min(k.saturating_sub(1).max(1))), "len {len} d {d} K {k}");
                assert!(plan.waypoints.len() <= k.max(2));
            }
        }
    }
}

proptest! {
    #[test]
    fn plans_approach_the_target(src in prop::collection::vec(0u16..4, 5), dst in prop::collection::vec(0u16..4, 5), k in 1usize..8) {
        let (src, dst) = (PromptTokens::new(src), PromptTokens::new(dst));
        let plan = plan_progression(&src, &dst, k);
        prop_assert!(plan.validate().is_ok());
        let dist: Vec<usize> = plan.waypoints.iter().map(|w| w.diff_slots(&dst).len()).collect();
        prop_assert!(dist.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(*dist.last().unwrap(), 0);
        // Each slot is touched once, in priority order.
        let rank = |s: &usize| SLOT_PRIORITY.iter().position(|p| p == s).unwrap();
        let order: Vec<usize> = plan
            .waypoints
            .windows(2)
            .flat_map(|w| {
                let mut g = w[0].diff_slots(&w[1]);
                g.sort_by_key(rank);
                g
            })
            .collect();
        let mut sorted = order.clone();
        sorted.sort_by_key(rank);
        prop_assert_eq!(order, sorted);
    }
}

#[test]
fn plan_validation() {
    let a = PromptTokens::new(vec![1, 1]);
    let b = PromptTokens::new(vec![2, 2]);
    let stalled = EditPlan {
        source: a.clone(),
        target: b.clone(),
        waypoints: vec![a.clone(), a.clone(), b.clone()],
    };
    assert!(stalled.validate().is_err());
    let wrong_end = EditPlan {
        source: a.clone(),
        target: b.clone(),
        waypoints: vec![a.clone()],
    };
    assert!(wrong_end.validate().is_err());
    assert!(plan_progression(&a, &PromptTokens::new(vec![1]), 6).validate().is_err());
}

#[test]
fn single_waypoint_progression_reproduces_source() {
    let m = tiny_dit();
    let p = PromptTokens::new(vec![2, 5, 1]);
    let v = media([2, 4, 4, 3], 8);
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = ControlConfig { lambda, ..identity_cfg() };
        let plan = plan_progression(&p, &p, 6);
        let r = run_progression(&v, &plan, &cfg, &m, &sched(), 4, None).unwrap();
        assert_eq!(r.subtasks.len(), 1);
        assert!(r.final_video.max_abs_diff(&v).unwrap() <= 1e-3);
    }
}

#[test]
fn progression_sequencing_and_hooks() {
    let m = tiny_dit();
    let s = sched();
    let cfg = ControlConfig {
        alpha: 0.2,
        beta: 0.1,
        ..ControlConfig::default()
    };
    let v = media([2, 4, 4, 3], 9);
    let src = PromptTokens::new(vec![1, 2, 3]);
    let dst = PromptTokens::new(vec![4, 5, 3]);
    let plan = plan_progression(&src, &dst, 6);
    assert_eq!(plan.subtasks(), 2);
    let a = run_progression(&v, &plan, &cfg, &m, &s, 7, None).unwrap();
    let b = run_progression(&v, &plan, &cfg, &m, &s, 7, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.subtasks.len(), 2);
    assert_eq!(a.inputs[0], v);
    assert_eq!(a.inputs[1], a.subtasks[0].edited);
    assert_eq!(&a.final_video, &a.subtasks[1].edited);
    assert_eq!(a.subtasks.iter().map(|r| r.index).collect::<Vec<_>>(), vec![1, 2]);
    assert_ne!(run_progression(&v, &plan, &cfg, &m, &s, 8, None).unwrap().final_video, a.final_video);

    let forced = plan_progression(&src, &dst, 1);
    assert_eq!(run_progression(&v, &forced, &cfg, &m, &s, 7, None).unwrap().subtasks.len(), 1);

    // A pass-through hook changes nothing; a transforming hook feeds the next subtask.
    let mut seen = vec![];
    let mut pass = |t: usize, x: VideoTensor| {
        seen.push(t);
        Ok(x)
    };
    assert_eq!(run_progression(&v, &plan, &cfg, &m, &s, 7, Some(&mut pass)).unwrap(), a);
    assert_eq!(seen, vec![1, 2]);
    let mut flat = |_: usize, x: VideoTensor| Ok(x.map(|_| 0.5));
    let c = run_progression(&v, &plan, &cfg, &m, &s, 7, Some(&mut flat)).unwrap();
    assert!(c.inputs[1].data().iter().all(|&x| x == 0.5));
    assert!(c.final_video.data().iter().all(|&x| x == 0.5));

    let mut shrink = |_: usize, _: VideoTensor| VideoTensor::zeros([1, 4, 4, 3]);
    assert!(matches!(
        run_progression(&v, &plan, &cfg, &m, &s, 7, Some(&mut shrink)),
        Err(Error::Pipeline(_))
    ));
}
