use super::*;
use crate::rng::{Purpose, RngStream};

fn random_scene(h: usize, w: usize, seed: u64) -> PlanarScene {
    let mut st = RngStream::new(seed, Purpose::Dataset);
    PlanarScene::new(VideoTensor::from_fn([1, h, w, 3], |_, _, _, _| st.uniform() as f32).unwrap()).unwrap()
}

fn random_path(st: &mut RngStream, h: usize, w: usize, fh: usize, fw: usize, frames: usize) -> CameraPath {
    loop {
        let windows = (0..frames)
            .map(|_| (st.below((h - fh + 1) as u64) as usize, st.below((w - fw + 1) as u64) as usize))
            .collect();
        let p = CameraPath {
            frame_height: fh,
            frame_width: fw,
            windows,
            looped: false,
        };
        if p.validate(h, w).is_ok() {
            return p;
        }
    }
}

#[test]
fn render_copies_texels() {
    let scene = random_scene(9, 12, 1);
    let mut st = RngStream::new(2, Purpose::Sampling);
    let path = random_path(&mut st, 9, 12, 5, 6, 4);
    let v = render(&scene, &path).unwrap();
    for (t, &(top, left)) in path.windows.iter().enumerate() {
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    assert_eq!(v.get(t, y, x, c), scene.texture().get(0, top + y, left + x, c));
                }
            }
        }
    }
    let constant = PlanarScene::new(VideoTensor::filled([1, 9, 12, 3], 0.3).unwrap()).unwrap();
    assert!(render(&constant, &path).unwrap().data().iter().all(|&x| x == 0.3));
    let still = CameraPath {
        windows: vec![(1, 2); 3],
        ..path.clone()
    };
    let v = render(&scene, &still).unwrap();
    assert_eq!(v.frame(0), v.frame(2));
}

#[test]
fn path_validation() {
    let scene = random_scene(8, 8, 0);
    let out = CameraPath {
        frame_height: 4,
        frame_width: 4,
        windows: vec![(0, 0), (0, 5)],
        looped: false,
    };
    assert!(matches!(render(&scene, &out), Err(Error::Path(_))));
    let sparse = CameraPath {
        windows: vec![(0, 0), (0, 4)],
        ..out.clone()
    };
    assert!(sparse.validate(8, 8).is_err());
    let quarter = CameraPath {
        windows: vec![(0, 0), (2, 2)],
        ..out.clone()
    };
    assert!(quarter.validate(8, 8).is_ok());
    let looped = CameraPath {
        windows: vec![(0, 0), (0, 2), (0, 4)],
        looped: true,
        ..out.clone()
    };
    assert!(looped.validate(8, 8).is_err());
    assert!(CameraPath { looped: false, ..looped }.validate(8, 8).is_ok());
    assert!(CameraPath { windows: vec![], ..out }.validate(8, 8).is_err());
}

#[test]
fn reconstruct_inverts_render() {
    let scene = random_scene(10, 14, 3);
    let mut st = RngStream::new(4, Purpose::Sampling);
    for _ in 0..10 {
        let path = random_path(&mut st, 10, 14, 6, 6, 5);
        let v = render(&scene, &path).unwrap();
        let (rec, mask) = reconstruct(&v, &path, 10, 14).unwrap();
        for y in 0..10 {
            for x in 0..14 {
                for c in 0..3 {
                    let want = if mask.get(0, y, x) { scene.texture().get(0, y, x, c) } else { 0.0 };
                    assert_eq!(rec.texture().get(0, y, x, c), want);
                }
            }
        }
        assert_eq!(render(&rec, &path).unwrap(), v);
        assert_eq!(consistency_metric(&v, &path).unwrap(), 0.0);
    }
}

#[test]
fn two_views_average() {
    let path = CameraPath {
        frame_height: 1,
        frame_width: 2,
        windows: vec![(0, 0), (0, 1)],
        looped: false,
    };
    let v = VideoTensor::new([2, 1, 2, 1], vec![0.0, 0.2, 0.6, 1.0]).unwrap();
    let (rec, mask) = reconstruct(&v, &path, 1, 3).unwrap();
    assert_eq!(rec.texture().data(), &[0.0, 0.4, 1.0]);
    assert_eq!(mask.count(), 3);
}

/// Dense least squares: one unknown per texel and channel, one equation
/// per pixel; solved from the normal equations by Gaussian elimination.
fn normal_equations(video: &VideoTensor, path: &CameraPath, h: usize, w: usize) -> Vec<Option<f64>> {
    let c = video.channels();
    let mut out = vec![None; h * w * c];
    for k in 0..c {
        let n = h * w;
        let mut ata = vec![vec![0f64; n]; n];
        let mut atb = vec![0f64; n];
        for (t, &(top, left)) in path.windows.iter().enumerate() {
            for y in 0..path.frame_height {
                for x in 0..path.frame_width {
                    let j = (top + y) * w + left + x;
                    ata[j][j] += 1.0;
                    atb[j] += video.get(t, y, x, k) as f64;
                }
            }
        }
        let covered: Vec<usize> = (0..n).filter(|&j| ata[j][j] > 0.0).collect();
        let m = covered.len();
        let mut a: Vec<Vec<f64>> = covered
            .iter()
            .map(|&r| {
                let mut row: Vec<f64> = covered.iter().map(|&cc| ata[r][cc]).collect();
                row.push(atb[r]);
                row
            })
            .collect();
        for col in 0..m {
            let piv = (col..m).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for cc in col..=m {
                        a[r][cc] -= f * a[col][cc];
                    }
                }
            }
        }
        for (i, &j) in covered.iter().enumerate() {
            out[j * c + k] = Some(a[i][m] / a[i][i]);
        }
    }
    out
}

#[test]
fn reconstruct_matches_dense_least_squares() {
    let mut st = RngStream::new(8, Purpose::Sampling);
    for _ in 0..5 {
        let path = random_path(&mut st, 6, 8, 3, 4, 4);
        let v = st.gaussian_tensor([4, 3, 4, 3]).unwrap();
        let (rec, mask) = reconstruct(&v, &path, 6, 8).unwrap();
        let oracle = normal_equations(&v, &path, 6, 8);
        for (k, o) in oracle.iter().enumerate() {
            let got = rec.texture().data()[k] as f64;
            match o {
                Some(x) => assert!((got - x).abs() <= 1e-6, "{got} vs {x}"),
                None => {
                    assert_eq!(got, 0.0);
                    assert!(!mask.data()[k / 3]);
                }
            }
        }
    }
}

#[test]
fn reconstruction_is_the_minimizer() {
    let mut st = RngStream::new(9, Purpose::Sampling);
    let path = random_path(&mut st, 6, 8, 3, 4, 4);
    let v = st.gaussian_tensor([4, 3, 4, 3]).unwrap();
    let (rec, mask) = reconstruct(&v, &path, 6, 8).unwrap();
    let residual = |s: &PlanarScene| {
        let r = render(s, &path).unwrap();
        r.data().iter().zip(v.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
    };
    let base = residual(&rec);
    for texel in 0..48 {
        if !mask.data()[texel] {
            continue;
        }
        let mut t = rec.texture().clone();
        t.data_mut()[texel * 3] += 1e-2;
        assert!(residual(&PlanarScene::new(t).unwrap()) > base);
    }
}

#[test]
fn consistency_closed_form() {
    let path = CameraPath {
        frame_height: 2,
        frame_width: 3,
        windows: vec![(0, 0), (0, 1)],
        looped: false,
    };
    let scene = random_scene(2, 4, 5);
    let mut v = render(&scene, &path).unwrap();
    let c = 0.125f32;
    for y in 0..2 {
        for x in 0..2 {
            for k in 0..3 {
                let old = v.get(1, y, x, k);
                v.set(1, y, x, k, old + c);
            }
        }
    }
    assert!((consistency_metric(&v, &path).unwrap() - c as f64).abs() < 1e-7);
    let apart = CameraPath {
        frame_height: 1,
        frame_width: 1,
        windows: vec![(0, 0), (0, 1)],
        looped: false,
    };
    let tiny = VideoTensor::zeros([2, 1, 1, 3]).unwrap();
    assert!(matches!(consistency_metric(&tiny, &apart), Err(Error::UndefinedMetric(_))));
}

#[test]
fn consistency_matches_pairwise_oracle() {
    let mut st = RngStream::new(10, Purpose::Sampling);
    for _ in 0..5 {
        let path = random_path(&mut st, 7, 9, 4, 5, 5);
        let v = st.gaussian_tensor([5, 4, 5, 3]).unwrap();
        // Oracle: walk world texels and compare every pair of frames seeing them.
        let (mut sum, mut n) = (0f64, 0f64);
        for a in 0..5 {
            for b in a + 1..5 {
                for wy in 0..7 {
                    for wx in 0..9 {
                        let sees = |t: usize| {
                            let (top, left) = path.windows[t];
                            (wy >= top && wy < top + 4 && wx >= left && wx < left + 5).then(|| (wy - top, wx - left))
                        };
                        if let (Some((ya, xa)), Some((yb, xb))) = (sees(a), sees(b)) {
                            for k in 0..3 {
                                sum += (v.get(a, ya, xa, k) as f64 - v.get(b, yb, xb, k) as f64).powi(2);
                                n += 1.0;
                            }
                        }
                    }
                }
            }
        }
        assert!((consistency_metric(&v, &path).unwrap() - (sum / n).sqrt()).abs() <= 1e-6);
    }
}

mod editing {
    use super::*;
    use crate::denoiser::{PromptTokens, ToyDit, ToyDitConfig};
    use crate::editing::plan_progression;
    use crate::schedulers::{EpsPrediction, NoiseSchedule};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    /// Predicts a fixed pattern that differs per frame, so every edit
    /// pulls the views of one texel apart.
    struct FrameNoise;

    impl Denoiser for FrameNoise {
        fn predict_eps(&self, x: &VideoTensor, step: usize, _: &PromptTokens) -> Result<EpsPrediction> {
            let [_, h, w, c] = x.dims();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let t = k / (h * w * c);
                    v + 0.3 * ((t * 7 + k % 5) as f32).sin()
                })
                .collect();
            Ok(EpsPrediction::new(VideoTensor::new(x.dims(), data)?, step))
        }
    }

    #[test]
    fn identity_plan_returns_the_scene() {
        let m = ToyDit::init(ToyDitConfig::tiny(), 2).unwrap();
        let scene = random_scene(4, 6, 12);
        let path = CameraPath::pan(4, 4, 2, 2);
        let p = PromptTokens::new(vec![1, 2, 3]);
        let plan = plan_progression(&p, &p, 6);
        let cfg = ControlConfig {
            beta: 0.0,
            lambda: 1.0,
            ..ControlConfig::default()
        };
        for enabled in [false, true] {
            let out = rer_edit(&scene, &path, &plan, &cfg, &m, &sched(), 3, enabled).unwrap();
            assert_eq!(out.coverage.count(), 24);
            let err = out.scene.texture().max_abs_diff(scene.texture()).unwrap();
            assert!(err <= 1e-3, "{err}");
        }
    }

    #[test]
    fn reconstruction_hook_restores_consistency() {
        let scene = random_scene(4, 10, 13);
        let path = CameraPath::pan(4, 4, 4, 2);
        let src = PromptTokens::new(vec![1, 1, 1]);
        let plan = plan_progression(&src, &PromptTokens::new(vec![2, 2, 2]), 6);
        assert_eq!(plan.subtasks(), 3);
        let cfg = ControlConfig {
            alpha: 0.1,
            beta: 0.05,
            ..ControlConfig::default()
        };
        let off = rer_edit(&scene, &path, &plan, &cfg, &FrameNoise, &sched(), 1, false).unwrap();
        let on = rer_edit(&scene, &path, &plan, &cfg, &FrameNoise, &sched(), 1, true).unwrap();
        for (k, input) in on.progression.inputs.iter().enumerate() {
            assert_eq!(consistency_metric(input, &path).unwrap(), 0.0, "input {k}");
        }
        assert_eq!(on.subtask_scenes.len(), 3);
        assert_eq!(consistency_metric(&on.final_video, &path).unwrap(), 0.0);
        let raw = |o: &RerOutcome| consistency_metric(&o.progression.subtasks[2].edited, &path).unwrap();
        assert!(raw(&on) < raw(&off), "{} vs {}", raw(&on), raw(&off));
        assert!(consistency_metric(&off.final_video, &path).unwrap() > 0.0);
    }
}
