//! Training-time forward pass with activation caches, its manual backward
//! pass, the optimizer and the finite-difference gradient check.
//!
//! The forward mirrors [`ToyDit`]'s inference path but keeps every
//! attention probability matrix (token counts are tiny at toy scale) and is
//! generic over the float type so the gradient check can run on 64-bit
//! shadow weights.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dit::{
    add_skip, affine, chunk, mix_heads, signal_levels, skip_gain, cst, embed_tokens, gated_add, layer_norm, modulate, patchify, prompt_context, time_cond, DitParams,
    Real, TimeCond, ToyDitConfig, MOD_CHUNKS,
};
use super::{PromptTokens, ToyDit};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::schedulers::{add_noise, NoiseSchedule};
use crate::tensor::VideoTensor;

/// A clean video with its prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub video: VideoTensor,
    pub prompt: PromptTokens,
}

/// A fully specified regression target: noise `eps` added at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub clean: VideoTensor,
    pub prompt: PromptTokens,
    pub step: usize,
    pub eps: VideoTensor,
}

struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    o: Array2<F>,
}

struct BlockCache<F> {
    m: Array1<F>,
    n1: Array2<F>,
    r1: Array1<F>,
    h1: Array2<F>,
    sa: AttnCache<F>,
    a1: Array2<F>,
    n2: Array2<F>,
    r2: Array2<F>,
    h2: Array2<F>,
    ctx: Array2<F>,
    ca: AttnCache<F>,
    a2: Array2<F>,
    n3: Array2<F>,
    r3: Array1<F>,
    h3: Array2<F>,
    z: Array2<F>,
    g: Array2<F>,
    a3: Array2<F>,
}

struct Cache<F> {
    patches: Array2<F>,
    tc: TimeCond<F>,
    blocks: Vec<BlockCache<F>>,
    mf: Array1<F>,
    nf: Array2<F>,
    rf: Array1<F>,
    hf: Array2<F>,
    ye: Array2<F>,
    x0: Array2<F>,
    g: Array2<F>,
    levels: (f64, f64),
}

/// Relative-offset bias lookup for self-attention during training (frames
/// never exceed the model's maximum here, positions are frame indices).
struct Bias<'a, F> {
    table: &'a Array2<F>,
    tokens_per_frame: usize,
    offset: usize,
}

impl<F: Real> Bias<'_, F> {
    fn index(&self, i: usize, j: usize) -> usize {
        i / self.tokens_per_frame + self.offset - j / self.tokens_per_frame
    }
}

fn attn_forward<F: Real>(q: Array2<F>, k: Array2<F>, v: Array2<F>, heads: usize, bias: Option<&Bias<'_, F>>) -> AttnCache<F> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let mut o = Array2::<F>::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if let Some(b) = bias {
            for ((i, j), x) in sc.indexed_iter_mut() {
                *x += b.table[[h, b.index(i, j)]];
            }
        }
        for mut row in sc.rows_mut() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - max).exp());
            let den = row.iter().copied().sum::<F>();
            row.mapv_inplace(|x| x / den);
        }
        o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    AttnCache { q, k, v, probs, o }
}

/// Gradients of an attention call with respect to Q, K, V (and the bias
/// table when present).
fn attn_backward<F: Real>(
    c: &AttnCache<F>,
    d_o: &Array2<F>,
    heads: usize,
    bias: Option<(&Bias<'_, F>, &mut Array2<F>)>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let dh = c.q.ncols() / heads;
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::<F>::zeros(c.q.dim());
    let mut dk = Array2::<F>::zeros(c.k.dim());
    let mut dv = Array2::<F>::zeros(c.v.dim());
    let mut bias = bias;
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &c.probs[h];
        let doh = d_o.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let dp = doh.dot(&c.v.slice(cols).t());
        let mut ds = dp;
        for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<F>();
            for (x, &pv) in dsr.iter_mut().zip(pr) {
                *x = pv * (*x - dot);
            }
        }
        if let Some((b, table)) = bias.as_mut() {
            for ((i, j), &x) in ds.indexed_iter() {
                table[[h, b.index(i, j)]] += x;
            }
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    (dq, dk, dv)
}

fn layer_norm_backward<F: Real>(dn: &Array2<F>, n: &Array2<F>, rstd: &Array1<F>) -> Array2<F> {
    let d = cst::<F>(n.ncols() as f64);
    let mut dx = Array2::<F>::zeros(n.dim());
    for (((mut out, g), nr), &r) in dx.rows_mut().into_iter().zip(dn.rows()).zip(n.rows()).zip(rstd) {
        let mg = g.iter().copied().sum::<F>() / d;
        let mgn = g.iter().zip(nr).map(|(&a, &b)| a * b).sum::<F>() / d;
        for ((o, &gv), &nv) in out.iter_mut().zip(g).zip(nr) {
            *o = r * (gv - mg - nv * mgn);
        }
    }
    dx
}

/// Backward of `h = n * (1 + scale) + shift`: returns `dn` and writes the
/// shift/scale gradients into `dm`.
fn modulate_backward<F: Real>(dh: &Array2<F>, n: &Array2<F>, m: &Array1<F>, dm: &mut Array1<F>, shift_k: usize, d: usize) -> Array2<F> {
    let scale = chunk(m, shift_k + 1, d);
    let mut dn = dh.clone();
    for mut row in dn.rows_mut() {
        for (x, &sc) in row.iter_mut().zip(scale) {
            *x *= F::one() + sc;
        }
    }
    let dshift = dh.sum_axis(Axis(0));
    let dscale = (dh * n).sum_axis(Axis(0));
    dm.slice_mut(s![shift_k * d..(shift_k + 1) * d]).zip_mut_with(&dshift, |a, &b| *a += b);
    dm.slice_mut(s![(shift_k + 1) * d..(shift_k + 2) * d]).zip_mut_with(&dscale, |a, &b| *a += b);
    dn
}

/// Backward of `x += a * gate`: returns `da` and accumulates the gate
/// gradient into `dm`.
fn gate_backward<F: Real>(dx: &Array2<F>, a: &Array2<F>, m: &Array1<F>, dm: &mut Array1<F>, gate_k: usize, d: usize) -> Array2<F> {
    let gate = chunk(m, gate_k, d);
    let mut da = dx.clone();
    for mut row in da.rows_mut() {
        row.zip_mut_with(&gate, |x, &g| *x *= g);
    }
    let dg = (dx * a).sum_axis(Axis(0));
    dm.slice_mut(s![gate_k * d..(gate_k + 1) * d]).zip_mut_with(&dg, |x, &g| *x += g);
    da
}

fn forward<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, patches: Array2<F>, step: usize, prompt: &PromptTokens) -> (Array2<F>, Cache<F>) {
    let d = cfg.dim;
    let heads = cfg.heads;
    let act = cfg.activation;
    let tpf = cfg.tokens_per_frame();
    let tc = time_cond(p, cfg, step, prompt);
    let mut x = embed_tokens(p, &patches, tpf);
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for blk in &p.blocks {
        let m = tc.cond.dot(&blk.mod_w) + &blk.mod_b;
        let bias = Bias {
            table: &blk.rel_bias,
            tokens_per_frame: tpf,
            offset: cfg.max_frames - 1,
        };
        let (n1, r1) = layer_norm(&x);
        let h1 = modulate(&n1, chunk(&m, 0, d), chunk(&m, 1, d));
        let sa = attn_forward(h1.dot(&blk.wq), h1.dot(&blk.wk), h1.dot(&blk.wv), heads, Some(&bias));
        let a1 = affine(&sa.o, &blk.wo, &blk.bo);
        gated_add(&mut x, &a1, chunk(&m, 2, d));

        let (n2, r2v) = layer_norm(&x);
        let h2 = modulate(&n2, chunk(&m, 3, d), chunk(&m, 4, d));
        let ctx = prompt_context(p, prompt);
        let ca = attn_forward(h2.dot(&blk.cq), ctx.dot(&blk.ck), ctx.dot(&blk.cv), heads, None);
        let a2 = affine(&ca.o, &blk.co, &blk.cbo);
        gated_add(&mut x, &a2, chunk(&m, 5, d));

        let (n3, r3) = layer_norm(&x);
        let h3 = modulate(&n3, chunk(&m, 6, d), chunk(&m, 7, d));
        let z = affine(&h3, &blk.w1, &blk.b1);
        let g = z.mapv(|v| act.apply(v));
        let a3 = affine(&g, &blk.w2, &blk.b2);
        gated_add(&mut x, &a3, chunk(&m, 8, d));

        blocks.push(BlockCache {
            m,
            n1,
            r1,
            h1,
            sa,
            a1,
            n2,
            r2: r2v.insert_axis(Axis(1)),
            h2,
            ctx,
            ca,
            a2,
            n3,
            r3,
            h3,
            z,
            g,
            a3,
        });
    }
    let mf = tc.cond.dot(&p.final_w) + &p.final_b;
    let (nf, rf) = layer_norm(&x);
    let hf = modulate(&nf, chunk(&mf, 0, d), chunk(&mf, 1, d));
    let mut ye = affine(&hf, &p.out_w, &p.out_b);
    add_skip(&mut ye, &patches, &skip_gain(p, &tc.cond));
    let x0 = affine(&hf, &p.x0_w, &p.x0_b);
    let gate = affine(&hf, &p.gate_w, &p.gate_b);
    let levels = signal_levels(cfg, step);
    let (y, g) = mix_heads(&ye, &x0, &gate, &patches, levels);
    (
        y,
        Cache {
            patches,
            tc,
            blocks,
            mf,
            nf,
            rf,
            hf,
            ye,
            x0,
            g,
            levels,
        },
    )
}

fn outer_acc<F: Real>(dst: &mut Array2<F>, a: &Array1<F>, b: &Array1<F>) {
    for (mut row, &av) in dst.rows_mut().into_iter().zip(a) {
        row.zip_mut_with(b, |x, &bv| *x += av * bv);
    }
}

fn backward<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, c: &Cache<F>, dy: &Array2<F>, prompt: &PromptTokens) -> DitParams<F> {
    let d = cfg.dim;
    let heads = cfg.heads;
    let act = cfg.activation;
    let tpf = cfg.tokens_per_frame();
    let mut g = p.zeros_like();
    let mut dcond = Array1::<F>::zeros(d);

    // Head mixing.
    let (a, s) = (cst::<F>(c.levels.0), cst::<F>(c.levels.1));
    let mut dye = dy.clone();
    let mut dx0 = dy.clone();
    let mut dgate = dy.clone();
    for (i, &d) in dy.indexed_iter() {
        let (g, ye, x0, x) = (c.g[i], c.ye[i], c.x0[i], c.patches[i]);
        dye[i] = d * (F::one() - g);
        dx0[i] = -d * g * a / s;
        dgate[i] = d * ((x - a * x0) / s - ye) * g * (F::one() - g);
    }
    let dy = &dye;
    g.x0_w += &c.hf.t().dot(&dx0);
    g.x0_b += &dx0.sum_axis(Axis(0));
    g.gate_w += &c.hf.t().dot(&dgate);
    g.gate_b += &dgate.sum_axis(Axis(0));

    // Input skip.
    let mut dgain = Array1::<F>::zeros(dy.ncols());
    for (dr, pr) in dy.rows().into_iter().zip(c.patches.rows()) {
        dgain.zip_mut_with(&(&dr * &pr), |a, &b| *a += b);
    }
    outer_acc(&mut g.skip_w, &c.tc.cond, &dgain);
    g.skip_b += &dgain;
    dcond += &dgain.dot(&p.skip_w.t());

    // Output heads.
    g.out_w += &c.hf.t().dot(dy);
    g.out_b += &dy.sum_axis(Axis(0));
    let dhf = dy.dot(&p.out_w.t()) + dx0.dot(&p.x0_w.t()) + dgate.dot(&p.gate_w.t());
    let mut dmf = Array1::<F>::zeros(2 * d);
    let dnf = modulate_backward(&dhf, &c.nf, &c.mf, &mut dmf, 0, d);
    let mut dx = layer_norm_backward(&dnf, &c.nf, &c.rf);
    outer_acc(&mut g.final_w, &c.tc.cond, &dmf);
    g.final_b += &dmf;
    dcond += &dmf.dot(&p.final_w.t());

    for (l, (blk, bc)) in p.blocks.iter().zip(&c.blocks).enumerate().rev() {
        let gb = &mut g.blocks[l];
        let mut dm = Array1::<F>::zeros(MOD_CHUNKS * d);

        // MLP.
        let da3 = gate_backward(&dx, &bc.a3, &bc.m, &mut dm, 8, d);
        gb.w2 += &bc.g.t().dot(&da3);
        gb.b2 += &da3.sum_axis(Axis(0));
        let mut dz = da3.dot(&blk.w2.t());
        dz.zip_mut_with(&bc.z, |x, &zv| *x *= act.grad(zv));
        gb.w1 += &bc.h3.t().dot(&dz);
        gb.b1 += &dz.sum_axis(Axis(0));
        let dh3 = dz.dot(&blk.w1.t());
        let dn3 = modulate_backward(&dh3, &bc.n3, &bc.m, &mut dm, 6, d);
        dx += &layer_norm_backward(&dn3, &bc.n3, &bc.r3);

        // Cross-attention.
        let da2 = gate_backward(&dx, &bc.a2, &bc.m, &mut dm, 5, d);
        gb.co += &bc.ca.o.t().dot(&da2);
        gb.cbo += &da2.sum_axis(Axis(0));
        let dco = da2.dot(&blk.co.t());
        let (dq, dk, dv) = attn_backward(&bc.ca, &dco, heads, None);
        gb.cq += &bc.h2.t().dot(&dq);
        gb.ck += &bc.ctx.t().dot(&dk);
        gb.cv += &bc.ctx.t().dot(&dv);
        let dctx = dk.dot(&blk.ck.t()) + dv.dot(&blk.cv.t());
        for (row, &id) in dctx.rows().into_iter().zip(prompt.ids()) {
            let mut dst = g.tok.row_mut(id as usize);
            dst += &row;
        }
        let gb = &mut g.blocks[l];
        let dh2 = dq.dot(&blk.cq.t());
        let dn2 = modulate_backward(&dh2, &bc.n2, &bc.m, &mut dm, 3, d);
        dx += &layer_norm_backward(&dn2, &bc.n2, &bc.r2.column(0).to_owned());

        // Self-attention.
        let da1 = gate_backward(&dx, &bc.a1, &bc.m, &mut dm, 2, d);
        gb.wo += &bc.sa.o.t().dot(&da1);
        gb.bo += &da1.sum_axis(Axis(0));
        let dso = da1.dot(&blk.wo.t());
        let bias = Bias {
            table: &blk.rel_bias,
            tokens_per_frame: tpf,
            offset: cfg.max_frames - 1,
        };
        let (dq, dk, dv) = attn_backward(&bc.sa, &dso, heads, Some((&bias, &mut gb.rel_bias)));
        gb.wq += &bc.h1.t().dot(&dq);
        gb.wk += &bc.h1.t().dot(&dk);
        gb.wv += &bc.h1.t().dot(&dv);
        let dh1 = dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
        let dn1 = modulate_backward(&dh1, &bc.n1, &bc.m, &mut dm, 0, d);
        dx += &layer_norm_backward(&dn1, &bc.n1, &bc.r1);

        outer_acc(&mut gb.mod_w, &c.tc.cond, &dm);
        gb.mod_b += &dm;
        dcond += &dm.dot(&blk.mod_w.t());
    }

    // Time MLP.
    let mut dc = dcond;
    dc.zip_mut_with(&c.tc.c, |x, &cv| *x *= act.grad(cv));
    outer_acc(&mut g.time_w2, &c.tc.hidden, &dc);
    g.time_b2 += &dc;
    for &id in prompt.ids() {
        let mut row = g.ctok.row_mut(id as usize);
        row += &dc;
    }
    let mut dpre = dc.dot(&p.time_w2.t());
    dpre.zip_mut_with(&c.tc.pre, |x, &v| *x *= act.grad(v));
    outer_acc(&mut g.time_w1, &c.tc.feat, &dpre);
    g.time_b1 += &dpre;

    // Input embedding.
    g.patch_w += &c.patches.t().dot(&dx);
    g.patch_b += &dx.sum_axis(Axis(0));
    for (i, row) in dx.rows().into_iter().enumerate() {
        let mut dst = g.pos.row_mut(i % tpf);
        dst += &row;
    }
    g
}

/// Mean squared error of one sample and, optionally, its parameter gradient.
fn sample_loss<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, s: &NoisySample, sched: &NoiseSchedule, want_grad: bool) -> Result<(f64, Option<DitParams<F>>)> {
    let noisy = add_noise(&s.clean, s.step, &s.eps, sched)?;
    let (y, cache) = forward(p, cfg, patchify(&noisy, cfg.patch), s.step, &s.prompt);
    let target: Array2<F> = patchify(&s.eps, cfg.patch);
    let diff = &y - &target;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|&v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>() / count;
    let grad = want_grad.then(|| {
        let dy = diff * cst::<F>(2.0 / count);
        backward(p, cfg, &cache, &dy, &s.prompt)
    });
    Ok((loss, grad))
}

fn validate_sample(cfg: &ToyDitConfig, s: &NoisySample, sched: &NoiseSchedule) -> Result<()> {
    let [f, h, w, c] = s.clean.dims();
    if h != cfg.height || w != cfg.width || c != cfg.channels || f > cfg.max_frames {
        return Err(Error::ShapeMismatch(format!("training video {:?} does not fit the model", s.clean.dims())));
    }
    s.clean.ensure_same_dims(&s.eps, "training noise")?;
    s.prompt.validate(cfg.prompt_len, cfg.vocab)?;
    if s.step == 0 || s.step > sched.steps() {
        return Err(Error::StepIndex(format!("training step {} outside 1..={}", s.step, sched.steps())));
    }
    Ok(())
}

/// The x0 head is tied to the schedule in the model config.
fn check_schedule(cfg: &ToyDitConfig, sched: &NoiseSchedule) -> Result<()> {
    if cfg.schedule.build()?.betas() != sched.betas() {
        return Err(Error::Config("training schedule differs from model.schedule".into()));
    }
    Ok(())
}

/// Mean loss over a batch and the mean gradient. Per-sample work runs in
/// parallel; the reduction runs in batch order.
pub fn batch_loss_and_grad<F: Real>(
    p: &DitParams<F>,
    cfg: &ToyDitConfig,
    batch: &[NoisySample],
    sched: &NoiseSchedule,
) -> Result<(f64, DitParams<F>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    check_schedule(cfg, sched)?;
    for s in batch {
        validate_sample(cfg, s, sched)?;
    }
    let parts: Vec<(f64, Option<DitParams<F>>)> = batch
        .par_iter()
        .map(|s| sample_loss(p, cfg, s, sched, true))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = p.zeros_like();
    for (l, g) in &parts {
        loss += l;
        grad.add_assign(g.as_ref().expect("gradient requested"));
    }
    let n = batch.len() as f64;
    grad.scale(cst(1.0 / n));
    Ok((loss / n, grad))
}

pub fn batch_loss<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, batch: &[NoisySample], sched: &NoiseSchedule) -> Result<f64> {
    check_schedule(cfg, sched)?;
    let mut total = 0.0;
    for s in batch {
        validate_sample(cfg, s, sched)?;
        total += sample_loss(p, cfg, s, sched, false)?.0;
    }
    Ok(total / batch.len() as f64)
}

/// Adaptive per-parameter step without momentum:
/// `v = rho v + (1 - rho) g^2`, `theta -= lr g / (sqrt(v / (1 - rho^t)) + eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            rho: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Probability of replacing a prompt by the null prompt, which teaches
    /// the unconditional prediction used by guidance.
    pub p_uncond: f64,
    pub optimizer: OptimizerConfig,
    /// Window of the moving average reported for the loss curve.
    pub smooth: usize,
    /// Decay of an exponential moving average of the weights, which become
    /// the trained model; 0 keeps the last iterate. The optimizer has no
    /// learning-rate decay, so the average is what settles the weights.
    pub ema: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            p_uncond: 0.1,
            optimizer: OptimizerConfig::default(),
            smooth: 100,
            ema: 0.995,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.smooth == 0 {
            return Err(Error::Config("model.train.batch and model.train.smooth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config("model.train.ema must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config("model.train.p_uncond must lie in [0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite()) || !(0.0..1.0).contains(&o.rho) || !(o.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

pub struct Trainer {
    opt: OptimizerConfig,
    second: Vec<Vec<f32>>,
    t: u64,
    frozen: BTreeSet<String>,
    steps_taken: usize,
}

impl Trainer {
    pub fn new(opt: OptimizerConfig) -> Self {
        Self {
            opt,
            second: Vec::new(),
            t: 0,
            frozen: BTreeSet::new(),
            steps_taken: 0,
        }
    }

    /// Parameters whose tensor name is listed are never updated.
    pub fn freeze(&mut self, names: impl IntoIterator<Item = String>) {
        self.frozen.extend(names);
    }

    /// Draws a step and a noise per sample, evaluates the mean loss and
    /// applies one optimizer update. Returns the pre-update loss.
    pub fn train_step(&mut self, model: &mut ToyDit, batch: &[TrainingSample], sched: &NoiseSchedule, stream: &mut RngStream) -> Result<f64> {
        let noisy: Vec<NoisySample> = batch
            .iter()
            .map(|s| {
                let step = 1 + stream.below(sched.steps() as u64) as usize;
                let eps = stream.gaussian_tensor(s.video.dims())?;
                Ok(NoisySample {
                    clean: s.video.clone(),
                    prompt: s.prompt.clone(),
                    step,
                    eps,
                })
            })
            .collect::<Result<_>>()?;
        self.step_on(model, &noisy, sched)
    }

    pub fn step_on(&mut self, model: &mut ToyDit, batch: &[NoisySample], sched: &NoiseSchedule) -> Result<f64> {
        let cfg = model.config().clone();
        let (loss, mut grad) = batch_loss_and_grad(model.params(), &cfg, batch, sched)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Divergence {
                step: self.steps_taken,
                detail: format!("loss {loss}, finite gradient: {}", grad.all_finite()),
            });
        }
        zero_frozen(&mut grad, &self.frozen);
        self.apply(model.params_mut(), &grad);
        self.steps_taken += 1;
        Ok(loss)
    }

    fn apply(&mut self, params: &mut DitParams<f32>, grad: &DitParams<f32>) {
        if self.second.is_empty() {
            self.second = grad.tensors().iter().map(|t| vec![0.0; t.2.len()]).collect();
        }
        self.t += 1;
        let (lr, rho, eps) = (self.opt.lr, self.opt.rho, self.opt.eps);
        let correction = 1.0 - rho.powi(self.t.min(i32::MAX as u64) as i32);
        for (((name, theta), (_, _, g)), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(self.second.iter_mut()) {
            if self.frozen.contains(&name) {
                continue;
            }
            for ((th, &gv), vv) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                let gv = gv as f64;
                let nv = rho * *vv as f64 + (1.0 - rho) * gv * gv;
                *vv = nv as f32;
                let step = lr * gv / ((nv / correction).sqrt() + eps);
                *th = (*th as f64 - step) as f32;
            }
        }
    }
}

fn zero_frozen<F: Real>(grad: &mut DitParams<F>, frozen: &BTreeSet<String>) {
    for (name, g) in grad.tensors_mut() {
        if frozen.contains(&name) {
            g.fill(F::zero());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Moving average of the first `smooth` losses.
    pub initial_smoothed: f64,
    /// Moving average of the last `smooth` losses.
    pub final_smoothed: f64,
}

/// Full training loop: batches are drawn uniformly with replacement, prompts
/// are dropped to null with probability `p_uncond`.
pub fn train(model: &mut ToyDit, data: &[TrainingSample], sched: &NoiseSchedule, cfg: &TrainConfig, stream: &mut RngStream) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut trainer = Trainer::new(cfg.optimizer.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    let plen = model.config().prompt_len;
    let mut avg_params = (cfg.ema > 0.0).then(|| model.params().clone());
    for _ in 0..cfg.steps {
        let batch: Vec<TrainingSample> = (0..cfg.batch)
            .map(|_| {
                let s = &data[stream.below(data.len() as u64) as usize];
                let prompt = if stream.uniform() < cfg.p_uncond {
                    PromptTokens::null(plen)
                } else {
                    s.prompt.clone()
                };
                TrainingSample {
                    video: s.video.clone(),
                    prompt,
                }
            })
            .collect();
        losses.push(trainer.train_step(model, &batch, sched, stream)?);
        if let Some(avg) = avg_params.as_mut() {
            let k = cfg.ema as f32;
            for ((_, a), (_, _, w)) in avg.tensors_mut().into_iter().zip(model.params().tensors()) {
                a.iter_mut().zip(w).for_each(|(a, &w)| *a = k * *a + (1.0 - k) * w);
            }
        }
    }
    if let Some(avg) = avg_params {
        *model.params_mut() = avg;
    }
    let w = cfg.smooth.min(losses.len().max(1));
    let avg = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(TrainReport {
        initial_smoothed: avg(&losses[..w.min(losses.len())]),
        final_smoothed: avg(&losses[losses.len().saturating_sub(w)..]),
        losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest absolute analytic gradient reported for a frozen parameter.
    pub frozen_max_abs: f64,
}

/// Compares analytic gradients of the batch loss with central differences
/// (step `h`) on `count` randomly chosen parameters, all in 64-bit.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// parameters whose gradient is pure rounding noise from dominating.
pub fn grad_check(
    model: &ToyDit,
    batch: &[NoisySample],
    sched: &NoiseSchedule,
    count: usize,
    h: f64,
    frozen: &BTreeSet<String>,
    stream: &mut RngStream,
) -> Result<GradCheckReport> {
    const FLOOR: f64 = 1e-7;
    let cfg = model.config().clone();
    let shadow: DitParams<f64> = model.params().cast();
    let (_, mut grad) = batch_loss_and_grad(&shadow, &cfg, batch, sched)?;
    zero_frozen(&mut grad, frozen);
    let layout: Vec<(String, usize)> = shadow.tensors().iter().map(|t| (t.0.clone(), t.2.len())).collect();
    let total: usize = layout.iter().map(|l| l.1).sum();
    let locate = |mut flat: usize| {
        for (ti, (_, len)) in layout.iter().enumerate() {
            if flat < *len {
                return (ti, flat);
            }
            flat -= len;
        }
        unreachable!("flat index in range")
    };
    let grad_tensors = grad.tensors();
    let frozen_max_abs = grad_tensors
        .iter()
        .filter(|t| frozen.contains(&t.0))
        .flat_map(|t| t.2.iter())
        .fold(0.0f64, |m, &g| m.max(g.abs()));
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < count && attempts < 100 * count.max(1) {
        attempts += 1;
        let (ti, idx) = locate(stream.below(total as u64) as usize);
        if frozen.contains(&layout[ti].0) {
            continue;
        }
        let analytic = grad_tensors[ti].2[idx];
        let mut probe = shadow.clone();
        let eval = |probe: &mut DitParams<f64>, value: f64| -> Result<f64> {
            probe.tensors_mut()[ti].1[idx] = value;
            batch_loss(probe, &cfg, batch, sched)
        };
        let base = shadow.tensors()[ti].2[idx];
        let plus = eval(&mut probe, base + h)?;
        let minus = eval(&mut probe, base - h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err: max_rel,
        frozen_max_abs,
    })
}

/// The training forward pass as a prediction, for cross-checking the
/// inference path.
pub fn reference_eps<F: Real>(p: &DitParams<F>, cfg: &ToyDitConfig, x: &VideoTensor, step: usize, prompt: &PromptTokens) -> Vec<f32> {
    let (y, _) = forward(p, cfg, patchify(x, cfg.patch), step, prompt);
    super::dit::unpatchify(&y, x.dims(), cfg.patch)
}
