//! A small diffusion transformer over video patches.
//!
//! Tokens are `patch x patch` pixel blocks of every frame, frame-major. Each
//! block runs adaLN-modulated self-attention over all tokens (with a learned
//! per-head bias on the relative frame offset; there is no absolute
//! temporal embedding), cross-attention from video tokens to the prompt-slot
//! embeddings, and an MLP. The modulation vectors come from the timestep
//! plus an order-free sum of per-token prompt vectors.
//!
//! Inference runs on the streaming attention kernels; the paired entry
//! point routes every cross-attention layer through map replacement.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView1, LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{checked_prediction, Branch, Denoiser, PromptTokens};
use crate::attention::{attn_amr, attn_streaming, attn_streaming_with, build_window_mask, AttnView, ReplacementSpec, WindowMask, WindowSpec};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::schedulers::{EpsPrediction, LinearSchedule};
use crate::tensor::VideoTensor;

pub trait Real:
    Float + LinalgScalar + ScalarOperand + Send + Sync + Debug + Sum + AddAssign + SubAssign + MulAssign + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<F: Real>(x: f64) -> F {
    F::from(x).expect("finite constant")
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh approximation.
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                let u = cst::<F>(GELU_C) * (x + cst::<F>(0.044715) * x * x * x);
                cst::<F>(0.5) * x * (F::one() + u.tanh())
            }
        }
    }

    #[inline]
    pub fn grad<F: Real>(self, x: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Gelu => {
                let u = cst::<F>(GELU_C) * (x + cst::<F>(0.044715) * x * x * x);
                let t = u.tanh();
                let du = cst::<F>(GELU_C) * (F::one() + cst::<F>(3.0 * 0.044715) * x * x);
                cst::<F>(0.5) * (F::one() + t) + cst::<F>(0.5) * x * (F::one() - t * t) * du
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDitConfig {
    /// Longest clip the model attends over without a window.
    pub max_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub prompt_len: usize,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    pub activation: Activation,
    /// Noise schedule the model is trained for; the x0 head needs its
    /// signal and noise levels.
    pub schedule: LinearSchedule,
}

impl Default for ToyDitConfig {
    fn default() -> Self {
        Self {
            max_frames: 4,
            height: 16,
            width: 16,
            channels: 3,
            patch: 4,
            dim: 64,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            vocab: 16,
            prompt_len: 5,
            time_dim: 32,
            activation: Activation::Gelu,
            schedule: LinearSchedule::default(),
        }
    }
}

impl ToyDitConfig {
    /// Every mechanism of the full model at a size where finite differences
    /// over all parameters stay cheap (under 10^4 parameters).
    pub fn tiny() -> Self {
        Self {
            max_frames: 2,
            height: 4,
            width: 4,
            channels: 3,
            patch: 2,
            dim: 8,
            heads: 2,
            layers: 2,
            mlp_hidden: 12,
            vocab: 6,
            prompt_len: 3,
            time_dim: 8,
            activation: Activation::Gelu,
            schedule: LinearSchedule::default(),
        }
    }

    /// One layer, one head, identity activations.
    pub fn linear() -> Self {
        Self {
            heads: 1,
            layers: 1,
            activation: Activation::Identity,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_frames", self.max_frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("prompt_len", self.prompt_len),
            ("time_dim", self.time_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "model.patch {} must divide {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("model.dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("model.time_dim must be even".into()));
        }
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("model.schedule: {e}")))?;
        if self.vocab > u16::MAX as usize {
            return Err(Error::Config("model.vocab too large".into()));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Number of relative frame offsets with a learned bias.
    pub fn offsets(&self) -> usize {
        2 * self.max_frames - 1
    }

    pub fn param_count(&self) -> usize {
        DitParams::<f32>::zeros(self).tensors().iter().map(|t| t.2.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<F> {
    pub mod_w: Array2<F>,
    pub mod_b: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub rel_bias: Array2<F>,
    pub cq: Array2<F>,
    pub ck: Array2<F>,
    pub cv: Array2<F>,
    pub co: Array2<F>,
    pub cbo: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitParams<F> {
    pub patch_w: Array2<F>,
    pub patch_b: Array1<F>,
    pub pos: Array2<F>,
    pub time_w1: Array2<F>,
    pub time_b1: Array1<F>,
    pub time_w2: Array2<F>,
    pub time_b2: Array1<F>,
    pub tok: Array2<F>,
    /// Per-token vectors summed into the modulation conditioning.
    pub ctok: Array2<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub final_w: Array2<F>,
    pub final_b: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
    /// Per-channel gain on the input patches, added to the output outside
    /// every LayerNorm (token magnitude survives to the prediction).
    pub skip_w: Array2<F>,
    pub skip_b: Array1<F>,
    /// Second head predicting the clean patch, and the per-element gate
    /// mixing its implied noise into the prediction (see [`mix_heads`]).
    pub x0_w: Array2<F>,
    pub x0_b: Array1<F>,
    pub gate_w: Array2<F>,
    pub gate_b: Array1<F>,
}

/// Modulation chunks per block: shift, scale, gate for each of the three
/// sublayers.
pub(crate) const MOD_CHUNKS: usize = 9;

macro_rules! visit_params {
    ($p:expr, $one:ident, $iter:ident) => {{
        let mut out = Vec::new();
        out.push(("patch_w".to_string(), $p.patch_w.$one()));
        out.push(("patch_b".to_string(), $p.patch_b.$one()));
        out.push(("pos".to_string(), $p.pos.$one()));
        out.push(("time_w1".to_string(), $p.time_w1.$one()));
        out.push(("time_b1".to_string(), $p.time_b1.$one()));
        out.push(("time_w2".to_string(), $p.time_w2.$one()));
        out.push(("time_b2".to_string(), $p.time_b2.$one()));
        out.push(("tok".to_string(), $p.tok.$one()));
        out.push(("ctok".to_string(), $p.ctok.$one()));
        for (l, b) in $p.blocks.$iter().enumerate() {
            out.push((format!("blocks.{l}.mod_w"), b.mod_w.$one()));
            out.push((format!("blocks.{l}.mod_b"), b.mod_b.$one()));
            out.push((format!("blocks.{l}.wq"), b.wq.$one()));
            out.push((format!("blocks.{l}.wk"), b.wk.$one()));
            out.push((format!("blocks.{l}.wv"), b.wv.$one()));
            out.push((format!("blocks.{l}.wo"), b.wo.$one()));
            out.push((format!("blocks.{l}.bo"), b.bo.$one()));
            out.push((format!("blocks.{l}.rel_bias"), b.rel_bias.$one()));
            out.push((format!("blocks.{l}.cq"), b.cq.$one()));
            out.push((format!("blocks.{l}.ck"), b.ck.$one()));
            out.push((format!("blocks.{l}.cv"), b.cv.$one()));
            out.push((format!("blocks.{l}.co"), b.co.$one()));
            out.push((format!("blocks.{l}.cbo"), b.cbo.$one()));
            out.push((format!("blocks.{l}.w1"), b.w1.$one()));
            out.push((format!("blocks.{l}.b1"), b.b1.$one()));
            out.push((format!("blocks.{l}.w2"), b.w2.$one()));
            out.push((format!("blocks.{l}.b2"), b.b2.$one()));
        }
        out.push(("final_w".to_string(), $p.final_w.$one()));
        out.push(("final_b".to_string(), $p.final_b.$one()));
        out.push(("out_w".to_string(), $p.out_w.$one()));
        out.push(("out_b".to_string(), $p.out_b.$one()));
        out.push(("skip_w".to_string(), $p.skip_w.$one()));
        out.push(("skip_b".to_string(), $p.skip_b.$one()));
        out.push(("x0_w".to_string(), $p.x0_w.$one()));
        out.push(("x0_b".to_string(), $p.x0_b.$one()));
        out.push(("gate_w".to_string(), $p.gate_w.$one()));
        out.push(("gate_b".to_string(), $p.gate_b.$one()));
        out
    }};
}

trait ShapedSlice<F> {
    fn shaped(&self) -> (Vec<usize>, &[F]);
    fn shaped_mut(&mut self) -> &mut [F];
}

impl<F, D: ndarray::Dimension> ShapedSlice<F> for ndarray::Array<F, D> {
    fn shaped(&self) -> (Vec<usize>, &[F]) {
        (self.shape().to_vec(), self.as_slice().expect("standard layout"))
    }

    fn shaped_mut(&mut self) -> &mut [F] {
        self.as_slice_mut().expect("standard layout")
    }
}

impl<F: Real> DitParams<F> {
    pub fn zeros(cfg: &ToyDitConfig) -> Self {
        let d = cfg.dim;
        let z2 = |r: usize, c: usize| Array2::<F>::zeros((r, c));
        let z1 = |n: usize| Array1::<F>::zeros(n);
        let block = || BlockParams {
            mod_w: z2(d, MOD_CHUNKS * d),
            mod_b: z1(MOD_CHUNKS * d),
            wq: z2(d, d),
            wk: z2(d, d),
            wv: z2(d, d),
            wo: z2(d, d),
            bo: z1(d),
            rel_bias: z2(cfg.heads, cfg.offsets()),
            cq: z2(d, d),
            ck: z2(d, d),
            cv: z2(d, d),
            co: z2(d, d),
            cbo: z1(d),
            w1: z2(d, cfg.mlp_hidden),
            b1: z1(cfg.mlp_hidden),
            w2: z2(cfg.mlp_hidden, d),
            b2: z1(d),
        };
        Self {
            patch_w: z2(cfg.patch_dim(), d),
            patch_b: z1(d),
            pos: z2(cfg.tokens_per_frame(), d),
            time_w1: z2(cfg.time_dim, d),
            time_b1: z1(d),
            time_w2: z2(d, d),
            time_b2: z1(d),
            tok: z2(cfg.vocab, d),
            ctok: z2(cfg.vocab, d),
            blocks: (0..cfg.layers).map(|_| block()).collect(),
            final_w: z2(d, 2 * d),
            final_b: z1(2 * d),
            out_w: z2(d, cfg.patch_dim()),
            out_b: z1(cfg.patch_dim()),
            skip_w: z2(d, cfg.patch_dim()),
            skip_b: z1(cfg.patch_dim()),
            x0_w: z2(d, cfg.patch_dim()),
            x0_b: z1(cfg.patch_dim()),
            gate_w: z2(d, cfg.patch_dim()),
            gate_b: z1(cfg.patch_dim()),
        }
    }

    /// Random initialization. Gates start open (bias 1) so every block
    /// contributes from the first step; the output projection starts small
    /// and the skip starts as the identity, the right answer at high noise;
    /// the x0 head starts at mid-gray behind a nearly closed gate.
    pub fn init(cfg: &ToyDitConfig, seed: u64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut stream = RngStream::new(seed, Purpose::Training).fork(0x1417);
        let d = cfg.dim;
        let fill = |a: &mut [F], std: f64, s: &mut RngStream| a.iter_mut().for_each(|x| *x = cst(std * s.gaussian()));
        let inv = |fan: usize| 1.0 / (fan as f64).sqrt();
        fill(p.patch_w.shaped_mut(), inv(cfg.patch_dim()), &mut stream);
        fill(p.pos.shaped_mut(), 0.1, &mut stream);
        fill(p.time_w1.shaped_mut(), inv(cfg.time_dim), &mut stream);
        fill(p.time_w2.shaped_mut(), inv(d), &mut stream);
        fill(p.tok.shaped_mut(), 1.0, &mut stream);
        fill(p.ctok.shaped_mut(), 0.5, &mut stream);
        for b in p.blocks.iter_mut() {
            fill(b.mod_w.shaped_mut(), 0.1 * inv(d), &mut stream);
            for k in [2, 5, 8] {
                b.mod_b.slice_mut(s![k * d..(k + 1) * d]).fill(F::one());
            }
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.cq, &mut b.ck, &mut b.cv, &mut b.co] {
                fill(w.shaped_mut(), inv(d), &mut stream);
            }
            fill(b.w1.shaped_mut(), inv(d), &mut stream);
            fill(b.w2.shaped_mut(), inv(cfg.mlp_hidden), &mut stream);
        }
        fill(p.final_w.shaped_mut(), 0.1 * inv(d), &mut stream);
        fill(p.out_w.shaped_mut(), 0.1 * inv(d), &mut stream);
        p.skip_b.fill(F::one());
        fill(p.x0_w.shaped_mut(), 0.1 * inv(d), &mut stream);
        p.x0_b.fill(cst(0.5));
        // Start from the direct noise head; the x0 route is learned in.
        p.gate_b.fill(cst(-3.0));
        p
    }

    /// `(name, shape, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let v: Vec<(String, (Vec<usize>, &[F]))> = visit_params!(self, shaped, iter);
        v.into_iter().map(|(n, (s, d))| (n, s, d)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        visit_params!(self, shaped_mut, iter_mut)
    }

    pub fn cast<G: Real>(&self) -> DitParams<G> {
        let mut out = DitParams::<G>::zeros_like_shapes(self);
        for ((_, dst), (_, _, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = G::from(s).expect("finite parameter");
            }
        }
        out
    }

    fn zeros_like_shapes<G: Real>(other: &DitParams<G>) -> Self {
        let z2 = |a: &Array2<G>| Array2::<F>::zeros(a.dim());
        let z1 = |a: &Array1<G>| Array1::<F>::zeros(a.dim());
        Self {
            patch_w: z2(&other.patch_w),
            patch_b: z1(&other.patch_b),
            pos: z2(&other.pos),
            time_w1: z2(&other.time_w1),
            time_b1: z1(&other.time_b1),
            time_w2: z2(&other.time_w2),
            time_b2: z1(&other.time_b2),
            tok: z2(&other.tok),
            ctok: z2(&other.ctok),
            blocks: other
                .blocks
                .iter()
                .map(|b| BlockParams {
                    mod_w: z2(&b.mod_w),
                    mod_b: z1(&b.mod_b),
                    wq: z2(&b.wq),
                    wk: z2(&b.wk),
                    wv: z2(&b.wv),
                    wo: z2(&b.wo),
                    bo: z1(&b.bo),
                    rel_bias: z2(&b.rel_bias),
                    cq: z2(&b.cq),
                    ck: z2(&b.ck),
                    cv: z2(&b.cv),
                    co: z2(&b.co),
                    cbo: z1(&b.cbo),
                    w1: z2(&b.w1),
                    b1: z1(&b.b1),
                    w2: z2(&b.w2),
                    b2: z1(&b.b2),
                })
                .collect(),
            final_w: z2(&other.final_w),
            final_b: z1(&other.final_b),
            out_w: z2(&other.out_w),
            out_b: z1(&other.out_b),
            skip_w: z2(&other.skip_w),
            skip_b: z1(&other.skip_b),
            x0_w: z2(&other.x0_w),
            x0_b: z1(&other.x0_b),
            gate_w: z2(&other.gate_w),
            gate_b: z1(&other.gate_b),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros_like_shapes(self)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }

    pub fn scale(&mut self, k: F) {
        for (_, dst) in self.tensors_mut() {
            dst.iter_mut().for_each(|d| *d *= k);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|x| x.is_finite()))
    }
}

// ---- shared building blocks (generic so the training path can run in f64)

/// Rows of `x` normalized to zero mean and unit variance, and the per-row
/// reciprocal deviation.
pub(crate) fn layer_norm<F: Real>(x: &Array2<F>) -> (Array2<F>, Array1<F>) {
    let d = cst::<F>(x.ncols() as f64);
    let mut out = x.clone();
    let mut rstd = Array1::<F>::zeros(x.nrows());
    for (mut row, r) in out.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.iter().copied().sum::<F>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / d;
        *r = F::one() / (var + cst(LN_EPS)).sqrt();
        row.mapv_inplace(|v| (v - mean) * *r);
    }
    (out, rstd)
}

pub(crate) fn modulate<F: Real>(n: &Array2<F>, shift: ArrayView1<'_, F>, scale: ArrayView1<'_, F>) -> Array2<F> {
    let mut h = n.clone();
    for mut row in h.rows_mut() {
        for ((x, &sc), &sh) in row.iter_mut().zip(scale).zip(shift) {
            *x = *x * (F::one() + sc) + sh;
        }
    }
    h
}

pub(crate) fn affine<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    for mut row in y.rows_mut() {
        row += b;
    }
    y
}

/// `x += a * gate`, gate broadcast over rows.
pub(crate) fn gated_add<F: Real>(x: &mut Array2<F>, a: &Array2<F>, gate: ArrayView1<'_, F>) {
    for (mut xr, ar) in x.rows_mut().into_iter().zip(a.rows()) {
        for ((xv, &av), &g) in xr.iter_mut().zip(ar).zip(gate) {
            *xv += av * g;
        }
    }
}

pub(crate) fn time_features<F: Real>(step: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let t = step as f64;
    Array1::from_shape_fn(dim, |k| {
        let freq = (-(10_000f64).ln() * (k % half) as f64 / half as f64).exp();
        cst(if k < half { (t * freq).sin() } else { (t * freq).cos() })
    })
}

pub(crate) fn skip_gain<F: Real>(p: &DitParams<F>, cond: &Array1<F>) -> Array1<F> {
    cond.dot(&p.skip_w) + &p.skip_b
}

/// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `step` of the model's schedule.
pub(crate) fn signal_levels(cfg: &ToyDitConfig, step: usize) -> (f64, f64) {
    let sc = &cfg.schedule;
    let mut log_ab = 0.0f64;
    for k in 0..step.min(sc.steps) {
        let beta = if sc.steps == 1 {
            sc.beta_start
        } else {
            sc.beta_start + (sc.beta_end - sc.beta_start) * k as f64 / (sc.steps - 1) as f64
        };
        log_ab += (-(beta as f32 as f64)).ln_1p();
    }
    (log_ab.exp().sqrt(), (-log_ab.exp_m1()).sqrt())
}

/// The two heads combined: `(1 - g) * eps + g * (x - a * x0) / s` with
/// `g = sigmoid(gate)`. Near zero noise the second term turns small errors
/// in a clean-patch estimate into the large noise gains the first head
/// cannot reach. Returns the prediction and `g`.
pub(crate) fn mix_heads<F: Real>(
    eps: &Array2<F>,
    x0: &Array2<F>,
    gate: &Array2<F>,
    patches: &Array2<F>,
    (a, s): (f64, f64),
) -> (Array2<F>, Array2<F>) {
    let (a, s) = (cst::<F>(a), cst::<F>(s));
    let g = gate.mapv(|v| F::one() / (F::one() + (-v).exp()));
    let mut y = eps.clone();
    ndarray::Zip::from(&mut y)
        .and(x0)
        .and(&g)
        .and(patches)
        .for_each(|y, &x0, &g, &x| *y = (F::one() - g) * *y + g * (x - a * x0) / s);
    (y, g)
}

/// `y += patches * gain`, gain broadcast over rows.
pub(crate) fn add_skip<F: Real>(y: &mut Array2<F>, patches: &Array2<F>, gain: &Array1<F>) {
    for (mut yr, pr) in y.rows_mut().into_iter().zip(patches.rows()) {
        for ((yv, &pv), &g) in yr.iter_mut().zip(pr).zip(gain) {
            *yv += pv * g;
        }
    }
}

pub(crate) fn chunk<F>(m: &Array1<F>, k: usize, d: usize) -> ArrayView1<'_, F> {
    m.slice(s![k * d..(k + 1) * d])
}

/// Pre-activation and activation of the time MLP, and the conditioning
/// vector fed to every modulation (`act(c)`) together with `c` itself.
pub(crate) struct TimeCond<F> {
    pub feat: Array1<F>,
    pub pre: Array1<F>,
    pub hidden: Array1<F>,
    pub c: Array1<F>,
    pub cond: Array1<F>,
}

pub(crate) fn time_cond<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, step: usize, prompt: &PromptTokens) -> TimeCond<F> {
    let act = cfg.activation;
    let feat = time_features::<F>(step, cfg.time_dim);
    let pre = feat.dot(&p.time_w1) + &p.time_b1;
    let hidden = pre.mapv(|v| act.apply(v));
    let mut c = hidden.dot(&p.time_w2) + &p.time_b2;
    for &id in prompt.ids() {
        c += &p.ctok.row(id as usize);
    }
    let cond = c.mapv(|v| act.apply(v));
    TimeCond {
        feat,
        pre,
        hidden,
        c,
        cond,
    }
}

/// `[N, patch_dim]` token matrix of a video, frame-major, patch rows in
/// `(py, px, c)` order.
pub(crate) fn patchify<F: Real>(x: &VideoTensor, patch: usize) -> Array2<F> {
    let (f, h, w, c) = (x.frames(), x.height(), x.width(), x.channels());
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::<F>::zeros((f * gh * gw, patch * patch * c));
    for t in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = (t * gh + gy) * gw + gx;
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            out[[row, k]] = cst(x.get(t, gy * patch + py, gx * patch + px, ch) as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn unpatchify<F: Real>(y: &Array2<F>, dims: [usize; 4], patch: usize) -> Vec<f32> {
    let [f, h, w, c] = dims;
    let (gh, gw) = (h / patch, w / patch);
    let mut out = vec![0f32; f * h * w * c];
    for t in 0..f {
        for gy in 0..gh {
            for gx in 0..gw {
                let row = (t * gh + gy) * gw + gx;
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for ch in 0..c {
                            let idx = ((t * h + gy * patch + py) * w + gx * patch + px) * c + ch;
                            out[idx] = y[[row, k]].to_f32().unwrap_or(f32::NAN);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn embed_tokens<F: Real>(p: &DitParams<F>, patches: &Array2<F>, tokens_per_frame: usize) -> Array2<F> {
    let mut x = affine(patches, &p.patch_w, &p.patch_b);
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &p.pos.row(i % tokens_per_frame);
    }
    x
}

pub(crate) fn prompt_context<F: Real>(p: &DitParams<F>, prompt: &PromptTokens) -> Array2<F> {
    let d = p.tok.ncols();
    let mut e = Array2::<F>::zeros((prompt.len(), d));
    for (mut row, &id) in e.rows_mut().into_iter().zip(prompt.ids()) {
        row.assign(&p.tok.row(id as usize));
    }
    e
}

/// Inference-time temporal window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalWindow {
    pub window: usize,
    pub looped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDit {
    cfg: ToyDitConfig,
    params: DitParams<f32>,
    window: Option<TemporalWindow>,
}

impl ToyDit {
    pub fn new(cfg: ToyDitConfig, params: DitParams<f32>) -> Result<Self> {
        cfg.validate()?;
        let expect = DitParams::<f32>::zeros(&cfg);
        for ((name, shape, _), (_, want, _)) in params.tensors().iter().zip(expect.tensors()) {
            if *shape != want {
                return Err(Error::ShapeMismatch(format!("parameter {name}: {shape:?} vs config {want:?}")));
            }
        }
        if params.blocks.len() != cfg.layers {
            return Err(Error::ShapeMismatch("layer count differs from config".into()));
        }
        Ok(Self {
            cfg,
            params,
            window: None,
        })
    }

    pub fn init(cfg: ToyDitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = DitParams::init(&cfg, seed);
        Self::new(cfg, params)
    }

    /// Restricts self-attention to a frame window of `window` frames
    /// (optionally looping), which also lifts the frame-count limit.
    pub fn with_window(mut self, window: usize, looped: bool) -> Result<Self> {
        if window == 0 || window / 2 > self.cfg.max_frames - 1 {
            return Err(Error::Config(format!(
                "window {window} needs half-width <= {} (max_frames - 1)",
                self.cfg.max_frames - 1
            )));
        }
        self.window = Some(TemporalWindow { window, looped });
        Ok(self)
    }

    pub fn without_window(mut self) -> Self {
        self.window = None;
        self
    }

    pub fn window(&self) -> Option<TemporalWindow> {
        self.window
    }

    pub fn config(&self) -> &ToyDitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DitParams<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DitParams<f32> {
        &mut self.params
    }

    fn check_input(&self, x: &VideoTensor, prompt: &PromptTokens) -> Result<()> {
        let c = &self.cfg;
        if x.height() != c.height || x.width() != c.width || x.channels() != c.channels {
            return Err(Error::ShapeMismatch(format!(
                "video {:?} does not match model resolution {}x{}x{}",
                x.dims(),
                c.height,
                c.width,
                c.channels
            )));
        }
        if self.window.is_none() && x.frames() > c.max_frames {
            return Err(Error::Capacity(format!(
                "{} frames exceed the model's {} without a temporal window",
                x.frames(),
                c.max_frames
            )));
        }
        prompt.validate(c.prompt_len, c.vocab)
    }

    fn window_mask(&self, frames: usize) -> Result<Option<WindowMask>> {
        self.window
            .map(|w| {
                build_window_mask(&WindowSpec {
                    total_frames: frames,
                    window: w.window,
                    tokens_per_frame: self.cfg.tokens_per_frame(),
                    looped: w.looped,
                })
            })
            .transpose()
    }

    /// Lock-step forward over one or two branches. With two branches and a
    /// replacement spec, every cross-attention layer computes both outputs
    /// in one paired pass, the first branch being the map source.
    fn infer(&self, branches: &[Branch<'_>], step: usize, control: Option<&ReplacementSpec>) -> Result<Vec<EpsPrediction>> {
        if step == 0 {
            return Err(Error::StepIndex("model evaluated at step 0".into()));
        }
        for b in branches {
            self.check_input(b.x, b.prompt)?;
        }
        if branches.len() == 2 && branches[0].x.dims() != branches[1].x.dims() {
            return Err(Error::ShapeMismatch("paired branches differ in shape".into()));
        }
        let cfg = &self.cfg;
        let p = &self.params;
        let (d, heads, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
        let tpf = cfg.tokens_per_frame();
        let act = cfg.activation;
        let off = cfg.max_frames as i64 - 1;
        let frames = branches[0].x.frames();
        let mask = self.window_mask(frames)?;
        let conds: Vec<Array1<f32>> = branches
            .iter()
            .map(|b| time_cond(p, cfg, step, b.prompt).cond)
            .collect();

        let patches: Vec<Array2<f32>> = branches.iter().map(|b| patchify(b.x, cfg.patch)).collect();
        let mut xs: Vec<Array2<f32>> = patches.iter().map(|pt| embed_tokens(p, pt, tpf)).collect();
        let ctxs: Vec<Array2<f32>> = branches.iter().map(|b| prompt_context(p, b.prompt)).collect();

        for blk in &p.blocks {
            let ms: Vec<Array1<f32>> = conds.iter().map(|c| c.dot(&blk.mod_w) + &blk.mod_b).collect();
            // Self-attention.
            for (x, m) in xs.iter_mut().zip(&ms) {
                let (n, _) = layer_norm(x);
                let h = modulate(&n, chunk(m, 0, d), chunk(m, 1, d));
                let (q, k, v) = (h.dot(&blk.wq), h.dot(&blk.wk), h.dot(&blk.wv));
                let mut o = Array2::<f32>::zeros((q.nrows(), d));
                for hd in 0..heads {
                    let cols = s![.., hd * dh..(hd + 1) * dh];
                    let view = AttnView::new(q.slice(cols), k.slice(cols), v.slice(cols));
                    let bias = blk.rel_bias.row(hd);
                    let out = attn_streaming_with(view, |i, j, l| {
                        let (fi, fj) = (i / tpf, j / tpf);
                        let pos = match &mask {
                            Some(mk) => mk.effective_position(fi, fj)?,
                            None => fj as i64,
                        };
                        Some(l + bias[(fi as i64 - pos + off) as usize] as f64)
                    })?;
                    o.slice_mut(cols).assign(&out);
                }
                let a = affine(&o, &blk.wo, &blk.bo);
                gated_add(x, &a, chunk(m, 2, d));
            }
            // Cross-attention to the prompt slots.
            let mut qs = Vec::with_capacity(xs.len());
            let mut kvs = Vec::with_capacity(xs.len());
            for ((x, ctx), m) in xs.iter().zip(&ctxs).zip(&ms) {
                let (n, _) = layer_norm(x);
                let h = modulate(&n, chunk(m, 3, d), chunk(m, 4, d));
                qs.push(h.dot(&blk.cq));
                kvs.push((ctx.dot(&blk.ck), ctx.dot(&blk.cv)));
            }
            let mut os: Vec<Array2<f32>> = qs.iter().map(|q| Array2::zeros((q.nrows(), d))).collect();
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let view = |b: usize| AttnView::new(qs[b].slice(cols), kvs[b].0.slice(cols), kvs[b].1.slice(cols));
                match (control, xs.len()) {
                    (Some(spec), 2) => {
                        let (o1, o2) = attn_amr(view(0), view(1), spec)?;
                        os[0].slice_mut(cols).assign(&o1);
                        os[1].slice_mut(cols).assign(&o2);
                    }
                    _ => {
                        for (b, o) in os.iter_mut().enumerate() {
                            o.slice_mut(cols).assign(&attn_streaming(view(b))?);
                        }
                    }
                }
            }
            for ((x, o), m) in xs.iter_mut().zip(&os).zip(&ms) {
                let a = affine(o, &blk.co, &blk.cbo);
                gated_add(x, &a, chunk(m, 5, d));
            }
            // MLP.
            for (x, m) in xs.iter_mut().zip(&ms) {
                let (n, _) = layer_norm(x);
                let h = modulate(&n, chunk(m, 6, d), chunk(m, 7, d));
                let z = affine(&h, &blk.w1, &blk.b1).mapv(|v| act.apply(v));
                let a = affine(&z, &blk.w2, &blk.b2);
                gated_add(x, &a, chunk(m, 8, d));
            }
        }

        xs.iter()
            .zip(branches)
            .zip(conds.iter().zip(&patches))
            .map(|((x, b), (c, pt))| {
                let mf = c.dot(&p.final_w) + &p.final_b;
                let (n, _) = layer_norm(x);
                let h = modulate(&n, chunk(&mf, 0, d), chunk(&mf, 1, d));
                let mut y = affine(&h, &p.out_w, &p.out_b);
                add_skip(&mut y, pt, &skip_gain(p, c));
                let x0 = affine(&h, &p.x0_w, &p.x0_b);
                let gate = affine(&h, &p.gate_w, &p.gate_b);
                let (y, _) = mix_heads(&y, &x0, &gate, pt, signal_levels(cfg, step));
                checked_prediction(b.x.dims(), unpatchify(&y, b.x.dims(), cfg.patch), step)
            })
            .collect()
    }
}

impl Denoiser for ToyDit {
    fn predict_eps(&self, x: &VideoTensor, step: usize, prompt: &PromptTokens) -> Result<EpsPrediction> {
        let mut out = self.infer(&[Branch::new(x, prompt)], step, None)?;
        Ok(out.pop().expect("one branch"))
    }

    fn predict_pair(
        &self,
        orig: Branch<'_>,
        edit: Branch<'_>,
        step: usize,
        control: Option<&ReplacementSpec>,
    ) -> Result<(EpsPrediction, EpsPrediction)> {
        let mut out = self.infer(&[orig, edit], step, control)?;
        let e = out.pop().expect("two branches");
        let o = out.pop().expect("two branches");
        Ok((o, e))
    }

    fn prompt_len(&self) -> Option<usize> {
        Some(self.cfg.prompt_len)
    }
}
