use ndarray::{s, Array2};
use proptest::prelude::*;

use super::*;
use crate::rng::{Purpose, RngStream};

fn rand_mat(s: &mut RngStream, r: usize, c: usize, scale: f64) -> Array2<f32> {
    Array2::from_shape_fn((r, c), |_| (s.gaussian() * scale) as f32)
}

fn inputs(s: &mut RngStream, n: usize, m: usize, d: usize, dv: usize, scale: f64) -> AttnInputs {
    AttnInputs::new(rand_mat(s, n, d, scale), rand_mat(s, m, d, scale), rand_mat(s, m, dv, 1.0)).unwrap()
}

/// Plain 64-bit softmax attention over an explicit logit matrix.
fn oracle_from_logits(logits: &[Vec<f64>], v: &Array2<f32>, keep: impl Fn(usize, usize) -> bool) -> Array2<f32> {
    let dv = v.ncols();
    let mut out = Array2::<f32>::zeros((logits.len(), dv));
    for (i, row) in logits.iter().enumerate() {
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| keep(i, j))
            .map(|(_, &l)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0;
        let mut acc = vec![0.0f64; dv];
        for (j, &l) in row.iter().enumerate() {
            if !keep(i, j) {
                continue;
            }
            let w = (l - max).exp();
            den += w;
            for c in 0..dv {
                acc[c] += w * v[[j, c]] as f64;
            }
        }
        for c in 0..dv {
            out[[i, c]] = (acc[c] / den) as f32;
        }
    }
    out
}

fn oracle_logits(q: &Array2<f32>, k: &Array2<f32>) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    (0..q.nrows())
        .map(|i| {
            (0..k.nrows())
                .map(|j| (0..q.ncols()).map(|c| q[[i, c]] as f64 * k[[j, c]] as f64).sum::<f64>() * scale)
                .collect()
        })
        .collect()
}

fn oracle(inp: &AttnInputs) -> Array2<f32> {
    oracle_from_logits(&oracle_logits(&inp.q, &inp.k), &inp.v, |_, _| true)
}

fn oracle_amr(a1: &AttnInputs, a2: &AttnInputs, spec: &ReplacementSpec) -> Array2<f32> {
    let l1 = oracle_logits(&a1.q, &a1.k);
    let mut l2 = oracle_logits(&a2.q, &a2.k);
    for &(from, to) in spec.pairs() {
        for i in 0..l2.len() {
            l2[i][to] = l1[i][from];
        }
    }
    oracle_from_logits(&l2, &a2.v, |_, _| true)
}

#[test]
fn single_entry_returns_value() {
    let inp = AttnInputs::new(
        Array2::from_elem((1, 3), 0.7),
        Array2::from_elem((1, 3), -2.0),
        Array2::from_shape_vec((1, 2), vec![0.25, -9.5]).unwrap(),
    )
    .unwrap();
    assert_eq!(attn_naive(inp.view()).unwrap(), inp.v);
    assert_eq!(attn_streaming(inp.view()).unwrap(), inp.v);
}

#[test]
fn identical_keys_average_values() {
    let mut s = RngStream::new(1, Purpose::Sampling);
    let q = rand_mat(&mut s, 4, 3, 1.0);
    let k = Array2::from_shape_fn((6, 3), |(_, c)| c as f32 - 1.0);
    let v = Array2::from_shape_fn((6, 2), |(j, c)| (j * 2 + c) as f32 * 0.125);
    let inp = AttnInputs::new(q, k, v).unwrap();
    let mean: Vec<f64> = (0..2).map(|c| (0..6).map(|j| inp.v[[j, c]] as f64).sum::<f64>() / 6.0).collect();
    for out in [attn_naive(inp.view()).unwrap(), attn_streaming(inp.view()).unwrap()] {
        for i in 0..4 {
            for c in 0..2 {
                assert!((out[[i, c]] as f64 - mean[c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn naive_matches_high_precision_oracle() {
    let mut s = RngStream::new(2, Purpose::Sampling);
    let inp = inputs(&mut s, 7, 5, 4, 3, 1.0);
    assert!(max_rel_err(&attn_naive(inp.view()).unwrap(), &oracle(&inp)) <= 1e-5);
}

#[test]
fn naive_rows_sum_to_one() {
    let mut s = RngStream::new(3, Purpose::Sampling);
    let inp = inputs(&mut s, 9, 13, 4, 1, 3.0);
    let ones = Array2::from_elem((13, 1), 1.0f32);
    let out = attn_naive(AttnView::new(inp.q.view(), inp.k.view(), ones.view())).unwrap();
    assert!(out.iter().all(|&x| (x as f64 - 1.0).abs() <= 1e-6));
}

#[test]
fn extreme_logits_stay_finite() {
    // Row logits +80 and -80 after scaling by 1/sqrt(1).
    let q = Array2::from_elem((1, 1), 1.0f32);
    let k = Array2::from_shape_vec((3, 1), vec![80.0, -80.0, 79.0]).unwrap();
    let v = Array2::from_shape_vec((3, 1), vec![1.0, 5.0, -1.0]).unwrap();
    let inp = AttnInputs::new(q, k, v).unwrap();
    let out = attn_streaming(inp.view()).unwrap();
    let naive = attn_naive(inp.view()).unwrap();
    assert!(out[[0, 0]].is_finite());
    assert!(max_rel_err(&out, &naive) <= 1e-6);
    let e = (-1.0f64).exp();
    let expect = (1.0 - e) / (1.0 + e + (-160.0f64).exp());
    assert!((out[[0, 0]] as f64 - expect).abs() < 1e-6);
}

#[test]
fn single_key_broadcasts_value_row() {
    let mut s = RngStream::new(4, Purpose::Sampling);
    let inp = inputs(&mut s, 5, 1, 3, 4, 1.0);
    let out = attn_streaming(inp.view()).unwrap();
    for i in 0..5 {
        assert_eq!(out.row(i), inp.v.row(0));
    }
}

#[test]
fn streaming_matches_naive_on_random_shapes() {
    let mut s = RngStream::new(5, Purpose::Sampling);
    for case in 0..200 {
        let n = 1 + s.below(if case < 10 { 512 } else { 96 }) as usize;
        let m = 1 + s.below(if case < 10 { 512 } else { 96 }) as usize;
        let d = 1 + s.below(16) as usize;
        let dv = 1 + s.below(8) as usize;
        // Scale so that |logit| reaches roughly 80 on adversarial cases.
        let scale = if case % 3 == 0 { (80.0 * (d as f64).sqrt()).sqrt() / 2.0 } else { 1.0 };
        let inp = inputs(&mut s, n, m, d, dv, scale);
        let a = attn_streaming(inp.view()).unwrap();
        let b = attn_naive(inp.view()).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        let e = max_rel_err(&a, &b);
        assert!(e <= 1e-5, "case {case} n={n} m={m} d={d}: {e}");
    }
}

#[test]
fn shape_errors() {
    let q = Array2::<f32>::zeros((2, 3));
    let k = Array2::<f32>::zeros((4, 2));
    let v = Array2::<f32>::zeros((4, 1));
    assert!(matches!(AttnInputs::new(q.clone(), k, v.clone()), Err(Error::ShapeMismatch(_))));
    let k = Array2::<f32>::zeros((5, 3));
    assert!(AttnInputs::new(q.clone(), k, v).is_err());
    let mut bad = q.clone();
    bad[[0, 0]] = f32::NAN;
    let k = Array2::<f32>::zeros((4, 3));
    let v = Array2::<f32>::zeros((4, 1));
    assert!(AttnInputs::new(bad, k, v).is_err());
}

#[test]
fn amr_empty_spec_is_two_independent_attentions() {
    let mut s = RngStream::new(6, Purpose::Sampling);
    let a1 = inputs(&mut s, 10, 7, 4, 3, 1.0);
    let a2 = inputs(&mut s, 10, 9, 6, 2, 1.0);
    let (o1, o2) = attn_amr(a1.view(), a2.view(), &ReplacementSpec::empty()).unwrap();
    assert_eq!(o1, attn_streaming(a1.view()).unwrap());
    assert_eq!(o2, attn_streaming(a2.view()).unwrap());
}

#[test]
fn amr_full_self_replacement_duplicates() {
    let mut s = RngStream::new(7, Purpose::Sampling);
    let a = inputs(&mut s, 8, 6, 4, 3, 1.0);
    let (o1, o2) = attn_amr(a.view(), a.view(), &ReplacementSpec::identity(6)).unwrap();
    assert_eq!(o1, o2);
}

#[test]
fn amr_o1_is_plain_streaming() {
    let mut s = RngStream::new(8, Purpose::Sampling);
    let a1 = inputs(&mut s, 12, 5, 4, 3, 1.0);
    let a2 = inputs(&mut s, 12, 8, 4, 3, 1.0);
    let spec = ReplacementSpec::new(vec![(4, 0), (1, 7), (1, 3)]).unwrap();
    let (o1, _) = attn_amr(a1.view(), a2.view(), &spec).unwrap();
    assert_eq!(o1, attn_streaming(a1.view()).unwrap());
}

#[test]
fn amr_matches_materialize_and_replace_oracle() {
    let mut s = RngStream::new(9, Purpose::Sampling);
    for case in 0..60 {
        let n = 1 + s.below(256) as usize;
        let m1 = 1 + s.below(64) as usize;
        let m2 = 1 + s.below(64) as usize;
        let d1 = 1 + s.below(8) as usize;
        let d2 = 1 + s.below(8) as usize;
        let dv = 1 + s.below(6) as usize;
        let scale = if case % 4 == 0 { 4.0 } else { 1.0 };
        let a1 = inputs(&mut s, n, m1, d1, dv, scale);
        let a2 = inputs(&mut s, n, m2, d2, dv, scale);
        let mut targets: Vec<usize> = (0..m2).filter(|_| s.below(2) == 0).collect();
        targets.truncate(m2);
        let pairs = targets.into_iter().map(|t| (s.below(m1 as u64) as usize, t)).collect();
        let spec = ReplacementSpec::new(pairs).unwrap();
        let (o1, o2) = attn_amr(a1.view(), a2.view(), &spec).unwrap();
        assert!(max_rel_err(&o1, &oracle(&a1)) <= 1e-5);
        let e = max_rel_err(&o2, &oracle_amr(&a1, &a2, &spec));
        assert!(e <= 1e-5, "case {case}: {e}");
        let (_, naive2) = attn_amr_naive(a1.view(), a2.view(), &spec).unwrap();
        assert!(max_rel_err(&o2, &naive2) <= 1e-5);
    }
}

#[test]
fn amr_errors() {
    let mut s = RngStream::new(10, Purpose::Sampling);
    let a1 = inputs(&mut s, 3, 4, 2, 2, 1.0);
    let a2 = inputs(&mut s, 4, 4, 2, 2, 1.0);
    assert!(matches!(
        attn_amr(a1.view(), a2.view(), &ReplacementSpec::empty()),
        Err(Error::ShapeMismatch(_))
    ));
    let a2 = inputs(&mut s, 3, 4, 2, 2, 1.0);
    let spec = ReplacementSpec::new(vec![(4, 0)]).unwrap();
    assert!(matches!(attn_amr(a1.view(), a2.view(), &spec), Err(Error::IndexOutOfRange(_))));
    assert!(ReplacementSpec::new(vec![(0, 1), (2, 1)]).is_err());
}

#[test]
fn amr_handles_column_views() {
    // Per-head slices of a wider matrix are column views with contiguous rows.
    let mut s = RngStream::new(11, Purpose::Sampling);
    let wide = inputs(&mut s, 6, 5, 8, 8, 1.0);
    let head = AttnView::new(wide.q.slice(s![.., 4..8]), wide.k.slice(s![.., 4..8]), wide.v.slice(s![.., 4..8]));
    let owned = AttnInputs::new(
        wide.q.slice(s![.., 4..8]).to_owned(),
        wide.k.slice(s![.., 4..8]).to_owned(),
        wide.v.slice(s![.., 4..8]).to_owned(),
    )
    .unwrap();
    assert_eq!(attn_streaming(head).unwrap(), attn_streaming(owned.view()).unwrap());
}

#[test]
fn all_true_mask_equals_streaming() {
    let mut s = RngStream::new(12, Purpose::Sampling);
    let inp = inputs(&mut s, 9, 11, 5, 3, 2.0);
    assert_eq!(attn_masked(inp.view(), |_, _| true).unwrap(), attn_streaming(inp.view()).unwrap());
}

#[test]
fn one_key_per_row_selects_value() {
    let mut s = RngStream::new(13, Purpose::Sampling);
    let inp = inputs(&mut s, 7, 7, 3, 4, 1.0);
    let out = attn_masked(inp.view(), |i, j| j == (i * 3) % 7).unwrap();
    for i in 0..7 {
        assert_eq!(out.row(i), inp.v.row((i * 3) % 7));
    }
}

#[test]
fn empty_row_is_an_error() {
    let mut s = RngStream::new(14, Purpose::Sampling);
    let inp = inputs(&mut s, 4, 4, 2, 2, 1.0);
    assert!(matches!(attn_masked(inp.view(), |i, _| i != 2), Err(Error::EmptyRow(2))));
}

#[test]
fn masked_matches_oracle() {
    let mut s = RngStream::new(15, Purpose::Sampling);
    for _ in 0..40 {
        let n = 1 + s.below(40) as usize;
        let m = 1 + s.below(40) as usize;
        let inp = inputs(&mut s, n, m, 4, 3, 3.0);
        let seed = s.next_u64();
        let keep = move |i: usize, j: usize| j == i % m || crate::rng::mix(seed ^ ((i * 1000 + j) as u64)) % 3 != 0;
        let out = attn_masked(inp.view(), keep).unwrap();
        let want = oracle_from_logits(&oracle_logits(&inp.q, &inp.k), &inp.v, keep);
        assert!(max_rel_err(&out, &want) <= 1e-5);
    }
}

#[test]
fn masked_excludes_rather_than_penalizes() {
    // A huge excluded logit must have no influence at all.
    let q = Array2::from_elem((1, 1), 1.0f32);
    let k = Array2::from_shape_vec((2, 1), vec![1e30, 0.0]).unwrap();
    let v = Array2::from_shape_vec((2, 1), vec![100.0, 3.0]).unwrap();
    let inp = AttnInputs::new(q, k, v).unwrap();
    let out = attn_masked(inp.view(), |_, j| j == 1).unwrap();
    assert_eq!(out[[0, 0]], 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..6, m in 2usize..10) {
        let mut s = RngStream::new(seed, Purpose::Sampling);
        let inp = inputs(&mut s, n, m, 3, 2, 1.0);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                p.swap(i, s.below(i as u64 + 1) as usize);
            }
            p
        };
        let keep = |i: usize, j: usize| (i + j) % 3 != 1 || j == 0;
        let k2 = Array2::from_shape_fn((m, 3), |(j, c)| inp.k[[perm[j], c]]);
        let v2 = Array2::from_shape_fn((m, 2), |(j, c)| inp.v[[perm[j], c]]);
        let permuted = AttnInputs::new(inp.q.clone(), k2, v2).unwrap();
        let a = attn_masked(inp.view(), keep).unwrap();
        let b = attn_masked(permuted.view(), |i, j| keep(i, perm[j])).unwrap();
        prop_assert!(max_rel_err(&a, &b) <= 1e-6);
    }
}
