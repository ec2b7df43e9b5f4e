//! Dot-product attention kernels.
//!
//! [`attn_naive`] materializes the `n x m` logit matrix. Every other kernel
//! streams over keys with an online softmax per query row: a running maximum,
//! a running denominator and a running weighted sum of value rows, rescaled
//! whenever the maximum grows. No `n x m` buffer is ever allocated; the only
//! scratch is one `d'`-wide accumulator reused across rows.
//!
//! Keys are visited left to right in a fixed order, so results are
//! bit-stable. Dot products and softmax statistics accumulate in `f64`.

pub mod bench;
mod window;

use ndarray::{Array2, ArrayView2, ArrayViewMut1};

use crate::error::{Error, Result};

pub use window::{build_window_mask, WindowMask, WindowSpec};

/// Owned `Q (n x d)`, `K (m x d)`, `V (m x d')`.
#[derive(Clone, Debug)]
pub struct AttnInputs {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
}

impl AttnInputs {
    pub fn new(q: Array2<f32>, k: Array2<f32>, v: Array2<f32>) -> Result<Self> {
        let inp = Self { q, k, v };
        inp.view().validate()?;
        Ok(inp)
    }

    pub fn view(&self) -> AttnView<'_> {
        AttnView {
            q: self.q.view(),
            k: self.k.view(),
            v: self.v.view(),
        }
    }
}

/// Borrowed attention operands. Rows must be contiguous (row-major storage
/// or a column slice of it).
#[derive(Clone, Copy, Debug)]
pub struct AttnView<'a> {
    pub q: ArrayView2<'a, f32>,
    pub k: ArrayView2<'a, f32>,
    pub v: ArrayView2<'a, f32>,
}

impl<'a> AttnView<'a> {
    pub fn new(q: ArrayView2<'a, f32>, k: ArrayView2<'a, f32>, v: ArrayView2<'a, f32>) -> Self {
        Self { q, k, v }
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    pub fn d(&self) -> usize {
        self.q.ncols()
    }

    pub fn dv(&self) -> usize {
        self.v.ncols()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d() as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.q.dim();
        let (m, dk) = self.k.dim();
        let (mv, _) = self.v.dim();
        if n == 0 || m == 0 || d == 0 || self.dv() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "empty attention operand: Q {n}x{d}, K {m}x{dk}, V {mv}x{}",
                self.dv()
            )));
        }
        if dk != d {
            return Err(Error::ShapeMismatch(format!("Q width {d} != K width {dk}")));
        }
        if mv != m {
            return Err(Error::ShapeMismatch(format!("K has {m} rows, V has {mv}")));
        }
        for (name, a) in [("Q", &self.q), ("K", &self.k), ("V", &self.v)] {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::ShapeMismatch(format!("{name} has non-finite entries")));
            }
            if a.row(0).as_slice().is_none() {
                return Err(Error::ShapeMismatch(format!("{name} rows are not contiguous")));
            }
        }
        Ok(())
    }

    #[inline]
    fn q_row(&self, i: usize) -> &'a [f32] {
        row_slice(self.q, i)
    }

    #[inline]
    fn k_row(&self, j: usize) -> &'a [f32] {
        row_slice(self.k, j)
    }

    #[inline]
    fn v_row(&self, j: usize) -> &'a [f32] {
        row_slice(self.v, j)
    }
}

#[inline]
fn row_slice<'a>(a: ArrayView2<'a, f32>, i: usize) -> &'a [f32] {
    let row = a.index_axis_move(ndarray::Axis(0), i);
    row.to_slice().expect("contiguous rows checked in validate")
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = 4 * c;
        acc[0] += a[o] as f64 * b[o] as f64;
        acc[1] += a[o + 1] as f64 * b[o + 1] as f64;
        acc[2] += a[o + 2] as f64 * b[o + 2] as f64;
        acc[3] += a[o + 3] as f64 * b[o + 3] as f64;
    }
    let mut tail = 0.0;
    for o in 4 * chunks..a.len() {
        tail += a[o] as f64 * b[o] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Keys are scored in fixed blocks so the running maximum is updated once per
/// block rather than once per key.
const BLOCK: usize = 64;

/// Admitted logits of one block and the key rows they belong to.
struct Block {
    logits: [f64; BLOCK],
    keys: [usize; BLOCK],
    len: usize,
}

impl Block {
    fn new() -> Self {
        Self {
            logits: [0.0; BLOCK],
            keys: [0; BLOCK],
            len: 0,
        }
    }

    #[inline]
    fn push(&mut self, logit: f64, key: usize) {
        self.logits[self.len] = logit;
        self.keys[self.len] = key;
        self.len += 1;
    }

    fn is_full(&self) -> bool {
        self.len == BLOCK
    }
}

/// Online softmax state for one query row.
struct OnlineRow<'s> {
    max: f64,
    den: f64,
    acc: &'s mut [f64],
}

impl<'s> OnlineRow<'s> {
    fn new(acc: &'s mut [f64]) -> Self {
        acc.fill(0.0);
        Self {
            max: f64::NEG_INFINITY,
            den: 0.0,
            acc,
        }
    }

    /// Folds a block into the row and empties it.
    #[inline]
    fn flush<'v>(&mut self, blk: &mut Block, value: impl Fn(usize) -> &'v [f32]) {
        let logits = &blk.logits[..blk.len];
        let bmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if bmax > self.max {
            if self.den > 0.0 {
                let r = (self.max - bmax).exp();
                self.den *= r;
                for a in self.acc.iter_mut() {
                    *a *= r;
                }
            }
            self.max = bmax;
        }
        for (&l, &key) in logits.iter().zip(&blk.keys[..blk.len]) {
            let w = (l - self.max).exp();
            self.den += w;
            for (a, &x) in self.acc.iter_mut().zip(value(key)) {
                *a += w * x as f64;
            }
        }
        blk.len = 0;
    }

    fn is_empty(&self) -> bool {
        self.den == 0.0
    }

    fn finish(&self, mut out: ArrayViewMut1<'_, f32>) {
        let inv = 1.0 / self.den;
        for (o, &a) in out.iter_mut().zip(self.acc.iter()) {
            *o = (a * inv) as f32;
        }
    }
}

/// Query rows processed together by the paired kernel; they see the same keys,
/// so each key and value row is converted once per tile.
const TILE: usize = 4;

/// Online softmax state for up to `TILE` query rows over one shared key
/// sequence. Per row the arithmetic is the same as `OnlineRow`'s.
struct Tile<'s> {
    rows: usize,
    q: &'s mut [f64],
    acc: &'s mut [f64],
    vbuf: &'s mut [f64],
    max: [f64; TILE],
    den: [f64; TILE],
    logits: [[f64; BLOCK]; TILE],
    keys: [usize; BLOCK],
    len: usize,
}

impl<'s> Tile<'s> {
    /// `q` holds `TILE * d` and `acc` `TILE * dv` scratch values, `vbuf` `dv`.
    fn new(a: AttnView<'_>, i0: usize, rows: usize, q: &'s mut [f64], acc: &'s mut [f64], vbuf: &'s mut [f64]) -> Self {
        let d = a.d();
        for t in 0..rows {
            for (x, &y) in q[t * d..(t + 1) * d].iter_mut().zip(a.q_row(i0 + t)) {
                *x = y as f64;
            }
        }
        acc.fill(0.0);
        Self {
            rows,
            q,
            acc,
            vbuf,
            max: [f64::NEG_INFINITY; TILE],
            den: [0.0; TILE],
            logits: [[0.0; BLOCK]; TILE],
            keys: [0; BLOCK],
            len: 0,
        }
    }

    /// Scaled logits of every row against `k` into `out`, summed in the same
    /// order as `dot`.
    #[inline]
    fn dots(&self, k: &[f32], scale: f64, out: &mut [f64; TILE]) {
        let d = k.len();
        let chunks = d / 4;
        let mut acc = [[0.0f64; 4]; TILE];
        for c in 0..chunks {
            let o = 4 * c;
            let kf = [k[o] as f64, k[o + 1] as f64, k[o + 2] as f64, k[o + 3] as f64];
            for (t, a) in acc.iter_mut().enumerate().take(self.rows) {
                let q = &self.q[t * d + o..t * d + o + 4];
                a[0] += q[0] * kf[0];
                a[1] += q[1] * kf[1];
                a[2] += q[2] * kf[2];
                a[3] += q[3] * kf[3];
            }
        }
        for t in 0..self.rows {
            let mut tail = 0.0;
            for o in 4 * chunks..d {
                tail += self.q[t * d + o] * k[o] as f64;
            }
            let a = acc[t];
            out[t] = ((a[0] + a[1]) + (a[2] + a[3]) + tail) * scale;
        }
    }

    #[inline]
    fn push(&mut self, logits: &[f64; TILE], key: usize) {
        for t in 0..self.rows {
            self.logits[t][self.len] = logits[t];
        }
        self.keys[self.len] = key;
        self.len += 1;
    }

    fn is_full(&self) -> bool {
        self.len == BLOCK
    }

    #[inline]
    fn flush<'v>(&mut self, value: impl Fn(usize) -> &'v [f32]) {
        let dv = self.vbuf.len();
        let n = self.len;
        let mut w = [[0.0f64; BLOCK]; TILE];
        for t in 0..self.rows {
            let logits = &self.logits[t][..n];
            let bmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let acc = &mut self.acc[t * dv..(t + 1) * dv];
            if bmax > self.max[t] {
                if self.den[t] > 0.0 {
                    let r = (self.max[t] - bmax).exp();
                    self.den[t] *= r;
                    for a in acc.iter_mut() {
                        *a *= r;
                    }
                }
                self.max[t] = bmax;
            }
            for (wk, &l) in w[t].iter_mut().zip(logits) {
                *wk = (l - self.max[t]).exp();
                self.den[t] += *wk;
            }
        }
        for k in 0..n {
            for (b, &x) in self.vbuf.iter_mut().zip(value(self.keys[k])) {
                *b = x as f64;
            }
            for (t, wt) in w.iter().enumerate().take(self.rows) {
                let wk = wt[k];
                for (a, &x) in self.acc[t * dv..(t + 1) * dv].iter_mut().zip(self.vbuf.iter()) {
                    *a += wk * x;
                }
            }
        }
        self.len = 0;
    }

    fn finish(&self, out: &mut Array2<f32>, i0: usize) {
        let dv = self.vbuf.len();
        for t in 0..self.rows {
            let inv = 1.0 / self.den[t];
            for (o, &a) in out.row_mut(i0 + t).iter_mut().zip(&self.acc[t * dv..(t + 1) * dv]) {
                *o = (a * inv) as f32;
            }
        }
    }
}

/// Reference attention that materializes `M = Q K^T / sqrt(d)`, applies a
/// max-subtracted row softmax in place and multiplies by `V`.
pub fn attn_naive(inp: AttnView<'_>) -> Result<Array2<f32>> {
    inp.validate()?;
    let (n, m, dv) = (inp.n(), inp.m(), inp.dv());
    let scale = inp.scale();
    let mut map = Array2::<f32>::zeros((n, m));
    for i in 0..n {
        let q = inp.q_row(i);
        for j in 0..m {
            map[[i, j]] = (dot(q, inp.k_row(j)) * scale) as f32;
        }
    }
    softmax_rows_in_place(&mut map);
    Ok(weighted_values(&map, inp.v, dv))
}

pub(crate) fn softmax_rows_in_place(map: &mut Array2<f32>) {
    for mut row in map.rows_mut() {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let den: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
        for x in row.iter_mut() {
            *x = ((*x as f64 - max).exp() / den) as f32;
        }
    }
}

pub(crate) fn weighted_values(probs: &Array2<f32>, v: ArrayView2<'_, f32>, dv: usize) -> Array2<f32> {
    let (n, m) = probs.dim();
    let mut out = Array2::<f32>::zeros((n, dv));
    let mut acc = vec![0.0f64; dv];
    for i in 0..n {
        acc.fill(0.0);
        for j in 0..m {
            let p = probs[[i, j]] as f64;
            for (a, &x) in acc.iter_mut().zip(row_slice(v, j)) {
                *a += p * x as f64;
            }
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

/// Streaming attention with a per-entry logit hook.
///
/// `adjust(i, j, logit)` receives the scaled logit and returns the value to
/// use, or `None` to drop key `j` from row `i` entirely (it then takes no
/// part in the maximum, the denominator or the weighted sum).
pub fn attn_streaming_with<F>(inp: AttnView<'_>, mut adjust: F) -> Result<Array2<f32>>
where
    F: FnMut(usize, usize, f64) -> Option<f64>,
{
    inp.validate()?;
    let (n, m, dv) = (inp.n(), inp.m(), inp.dv());
    let scale = inp.scale();
    let mut out = Array2::<f32>::zeros((n, dv));
    let mut acc = vec![0.0f64; dv];
    let mut blk = Block::new();
    for i in 0..n {
        let q = inp.q_row(i);
        let mut row = OnlineRow::new(&mut acc);
        for j in 0..m {
            if let Some(l) = adjust(i, j, dot(q, inp.k_row(j)) * scale) {
                blk.push(l, j);
                if blk.is_full() {
                    row.flush(&mut blk, |k| inp.v_row(k));
                }
            }
        }
        row.flush(&mut blk, |k| inp.v_row(k));
        if row.is_empty() {
            return Err(Error::EmptyRow(i));
        }
        row.finish(out.row_mut(i));
    }
    Ok(out)
}

/// Single-pass attention that never materializes the logit matrix.
pub fn attn_streaming(inp: AttnView<'_>) -> Result<Array2<f32>> {
    attn_streaming_with(inp, |_, _, l| Some(l))
}

/// Attention restricted to the keys `admits(i, j)` allows for each query.
pub fn attn_masked<F>(inp: AttnView<'_>, admits: F) -> Result<Array2<f32>>
where
    F: Fn(usize, usize) -> bool,
{
    attn_streaming_with(inp, |i, j, l| admits(i, j).then_some(l))
}

/// Column replacement pairs `(source column in M1, target column in M2)`.
///
/// Stored sorted by target column; target columns are pairwise distinct.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplacementSpec {
    pairs: Vec<(usize, usize)>,
}

impl ReplacementSpec {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_by_key(|&(_, to)| to);
        if let Some(w) = pairs.windows(2).find(|w| w[0].1 == w[1].1) {
            return Err(Error::IndexOutOfRange(format!(
                "target column {} replaced twice",
                w[0].1
            )));
        }
        Ok(Self { pairs })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Column `j` of M2 taken from column `j` of M1 for every `j < m`.
    pub fn identity(m: usize) -> Self {
        Self {
            pairs: (0..m).map(|j| (j, j)).collect(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, m1: usize, m2: usize) -> Result<()> {
        for &(from, to) in &self.pairs {
            if from >= m1 || to >= m2 {
                return Err(Error::IndexOutOfRange(format!(
                    "pair ({from}, {to}) outside M1 width {m1} / M2 width {m2}"
                )));
            }
        }
        Ok(())
    }
}

/// Paired attention with on-the-fly map replacement.
///
/// `O1` is plain attention on `a1`. `O2` is attention on `a2` except that the
/// logit of every replaced column `j = I2_k` is `Q1_i . K1_{I1_k} / sqrt(d1)`;
/// its value row is still `V2_j`. Both outputs come from one pass over the
/// keys and the logit matrices are never stored.
pub fn attn_amr(a1: AttnView<'_>, a2: AttnView<'_>, spec: &ReplacementSpec) -> Result<(Array2<f32>, Array2<f32>)> {
    a1.validate()?;
    a2.validate()?;
    if a1.n() != a2.n() {
        return Err(Error::ShapeMismatch(format!(
            "paired attention needs equal query counts, got {} and {}",
            a1.n(),
            a2.n()
        )));
    }
    let (n, m1, m2) = (a1.n(), a1.m(), a2.m());
    spec.validate(m1, m2)?;
    let (s1, s2) = (a1.scale(), a2.scale());
    let mut o1 = Array2::<f32>::zeros((n, a1.dv()));
    let mut o2 = Array2::<f32>::zeros((n, a2.dv()));
    let (d1, d2, dv1, dv2) = (a1.d(), a2.d(), a1.dv(), a2.dv());
    let (mut q1, mut q2) = (vec![0.0f64; TILE * d1], vec![0.0f64; TILE * d2]);
    let (mut acc1, mut acc2) = (vec![0.0f64; TILE * dv1], vec![0.0f64; TILE * dv2]);
    let (mut v1, mut v2) = (vec![0.0f64; dv1], vec![0.0f64; dv2]);
    let pairs = spec.pairs();
    let (mut l1, mut l2) = ([0.0f64; TILE], [0.0f64; TILE]);
    for i0 in (0..n).step_by(TILE) {
        let rows = TILE.min(n - i0);
        let mut t1 = Tile::new(a1, i0, rows, &mut q1, &mut acc1, &mut v1);
        let mut t2 = Tile::new(a2, i0, rows, &mut q2, &mut acc2, &mut v2);
        let mut cursor = 0;
        for j in 0..m1.max(m2) {
            if j < m1 {
                t1.dots(a1.k_row(j), s1, &mut l1);
                t1.push(&l1, j);
                if t1.is_full() {
                    t1.flush(|k| a1.v_row(k));
                }
            }
            if j < m2 {
                if cursor < pairs.len() && pairs[cursor].1 == j {
                    let from = pairs[cursor].0;
                    cursor += 1;
                    if from == j {
                        l2 = l1;
                    } else {
                        t1.dots(a1.k_row(from), s1, &mut l2);
                    }
                } else {
                    t2.dots(a2.k_row(j), s2, &mut l2);
                }
                t2.push(&l2, j);
                if t2.is_full() {
                    t2.flush(|k| a2.v_row(k));
                }
            }
        }
        t1.flush(|k| a1.v_row(k));
        t2.flush(|k| a2.v_row(k));
        t1.finish(&mut o1, i0);
        t2.finish(&mut o2, i0);
    }
    Ok((o1, o2))
}

/// Naive AMR: materialize both logit maps, overwrite the replaced columns of
/// the second, softmax both and multiply by the values.
pub fn attn_amr_naive(
    a1: AttnView<'_>,
    a2: AttnView<'_>,
    spec: &ReplacementSpec,
) -> Result<(Array2<f32>, Array2<f32>)> {
    a1.validate()?;
    a2.validate()?;
    if a1.n() != a2.n() {
        return Err(Error::ShapeMismatch("paired attention needs equal query counts".into()));
    }
    spec.validate(a1.m(), a2.m())?;
    let logits = |a: AttnView<'_>| {
        let s = a.scale();
        let mut map = Array2::<f32>::zeros((a.n(), a.m()));
        for i in 0..a.n() {
            for j in 0..a.m() {
                map[[i, j]] = (dot(a.q_row(i), a.k_row(j)) * s) as f32;
            }
        }
        map
    };
    let mut m1 = logits(a1);
    let mut m2 = logits(a2);
    for &(from, to) in spec.pairs() {
        let col = m1.column(from).to_owned();
        m2.column_mut(to).assign(&col);
    }
    softmax_rows_in_place(&mut m1);
    softmax_rows_in_place(&mut m2);
    Ok((weighted_values(&m1, a1.v, a1.dv()), weighted_values(&m2, a2.v, a2.dv())))
}

/// `max |a - b| / max |b|` over all entries.
pub fn max_rel_err(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = b.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())).max(1e-30);
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()))
        / scale
}

#[cfg(test)]
mod tests;
