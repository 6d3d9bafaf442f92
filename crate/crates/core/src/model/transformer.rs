//! Bidirectional pre-norm transformer with a hand-written backward pass.
//!
//! Parameters live in one flat buffer described by a list of named entries,
//! which keeps the optimizer, clipping, checkpoints and the gradient checker
//! oblivious to the architecture.

use std::fmt;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{encode, view_span, Encoded};
use super::linalg::{add_bias, col_sum_acc, matmul, matmul_nt, matmul_tn_acc, Scalar};
use super::{softmax4, ActionDist, ActionModel, ModelError, Query};
use crate::codec::{Token, TrainExample};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Hidden width of the feed-forward block as a multiple of `embed_dim`.
    pub ff_mult: usize,
    /// Longest sequence (context plus plan) the position table covers.
    pub max_len: usize,
    /// Upper bound on grid width and height.
    pub grid: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The 1-layer, 16-wide configuration used for gradient checking.
    pub fn tiny(max_len: usize, grid: usize) -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 16,
            ff_mult: 4,
            max_len,
            grid,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ff_mult == 0 {
            return bad("layers, heads, embed_dim and ff_mult must be positive");
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad("heads must divide embed_dim");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(2..=255).contains(&self.grid) {
            return bad("grid bound must be in 2..=255");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "layers={} heads={} dim={} ff={} len={} grid={}",
            self.layers, self.heads, self.embed_dim, self.ff_mult, self.max_len, self.grid
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    init: Init,
}

impl ParamEntry {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct BlockIx {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_fc: Range<usize>,
    b_fc: Range<usize>,
    w_proj: Range<usize>,
    b_proj: Range<usize>,
}

#[derive(Debug, Clone)]
struct Ix {
    emb_x: Range<usize>,
    emb_y: Range<usize>,
    emb_dir: Range<usize>,
    emb_gx: Range<usize>,
    emb_gy: Range<usize>,
    emb_goal: Range<usize>,
    emb_view: Range<usize>,
    emb_act: Range<usize>,
    emb_pos: Range<usize>,
    blocks: Vec<BlockIx>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    w_head: Range<usize>,
    b_head: Range<usize>,
}

struct Builder {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, decay: bool, init: Init) -> Range<usize> {
        let e = ParamEntry {
            name,
            offset: self.len,
            rows,
            cols,
            decay,
            init,
        };
        self.len += rows * cols;
        let r = e.range();
        self.entries.push(e);
        r
    }

    fn emb(&mut self, name: &str, rows: usize, d: usize) -> Range<usize> {
        self.add(name.to_string(), rows, d, false, Init::Normal)
    }
}

fn build_index(cfg: &ModelConfig) -> (Ix, Vec<ParamEntry>, usize) {
    let d = cfg.embed_dim;
    let f = cfg.ff_mult * d;
    let span2 = view_span(cfg.grid).pow(2);
    let mut b = Builder {
        entries: Vec::new(),
        len: 0,
    };
    let emb_x = b.emb("emb.x", cfg.grid, d);
    let emb_y = b.emb("emb.y", cfg.grid, d);
    let emb_dir = b.emb("emb.dir", 4, d);
    let emb_gx = b.emb("emb.gx", cfg.grid, d);
    let emb_gy = b.emb("emb.gy", cfg.grid, d);
    let emb_goal = b.emb("emb.goal", span2, d);
    let emb_view = b.emb("emb.view", 2 * span2, d);
    let emb_act = b.emb("emb.act", Token::VOCAB, d);
    let emb_pos = b.emb("emb.pos", cfg.max_len, d);
    let blocks = (0..cfg.layers)
        .map(|l| {
            let mut p = |name: &str, rows, cols, decay, init| b.add(format!("block{l}.{name}"), rows, cols, decay, init);
            BlockIx {
                ln1_g: p("ln1.g", 1, d, false, Init::Ones),
                ln1_b: p("ln1.b", 1, d, false, Init::Zeros),
                w_qkv: p("attn.w_qkv", d, 3 * d, true, Init::Normal),
                b_qkv: p("attn.b_qkv", 1, 3 * d, false, Init::Zeros),
                w_o: p("attn.w_o", d, d, true, Init::Normal),
                b_o: p("attn.b_o", 1, d, false, Init::Zeros),
                ln2_g: p("ln2.g", 1, d, false, Init::Ones),
                ln2_b: p("ln2.b", 1, d, false, Init::Zeros),
                w_fc: p("mlp.w_fc", d, f, true, Init::Normal),
                b_fc: p("mlp.b_fc", 1, f, false, Init::Zeros),
                w_proj: p("mlp.w_proj", f, d, true, Init::Normal),
                b_proj: p("mlp.b_proj", 1, d, false, Init::Zeros),
            }
        })
        .collect();
    let lnf_g = b.add("lnf.g".into(), 1, d, false, Init::Ones);
    let lnf_b = b.add("lnf.b".into(), 1, d, false, Init::Zeros);
    let w_head = b.add("head.w".into(), d, Token::ACTIONS, true, Init::Normal);
    let b_head = b.add("head.b".into(), 1, Token::ACTIONS, false, Init::Zeros);
    let ix = Ix {
        emb_x,
        emb_y,
        emb_dir,
        emb_gx,
        emb_gy,
        emb_goal,
        emb_view,
        emb_act,
        emb_pos,
        blocks,
        lnf_g,
        lnf_b,
        w_head,
        b_head,
    };
    (ix, b.entries, b.len)
}

/// The masked sequence model. `F` is `f32` for training and planning and
/// `f64` for gradient checking.
#[derive(Clone)]
pub struct MaskedSeqModel<F: Scalar> {
    cfg: ModelConfig,
    ix: Ix,
    entries: Vec<ParamEntry>,
    theta: Vec<F>,
}

impl<F: Scalar> fmt::Debug for MaskedSeqModel<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskedSeqModel")
            .field("cfg", &self.cfg)
            .field("params", &self.theta.len())
            .finish()
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    h1: Vec<F>,
    ln1: LnCache<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    drop1: Option<Vec<F>>,
    h2: Vec<F>,
    ln2: LnCache<F>,
    pre: Vec<F>,
    tanh: Vec<F>,
    act: Vec<F>,
    drop2: Option<Vec<F>>,
}

struct Cache<F> {
    drop0: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    hf: Vec<F>,
    lnf: LnCache<F>,
    logits: Vec<F>,
}

struct Dropout<'a> {
    p: f64,
    rng: &'a mut dyn RngCore,
}

fn apply_dropout<F: Scalar>(x: &mut [F], drop: Option<&mut Dropout<'_>>) -> Option<Vec<F>> {
    let drop = drop?;
    if drop.p <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - drop.p));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if drop.rng.gen::<f64>() < drop.p { F::zero() } else { keep })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= *m;
    }
    Some(mask)
}

fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
    d: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::of(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let (mut m1, mut m2) = (F::zero(), F::zero());
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            dxhat[c] = dyr[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// `tanh` through one `exp`, noticeably cheaper than the libm call.
fn tanh_fast<F: Scalar>(z: F) -> F {
    let two = F::of(2.0);
    two / (F::one() + (-two * z).exp()) - F::one()
}

/// Inner `tanh` of the tanh-approximated GELU.
fn gelu_tanh<F: Scalar>(x: F) -> F {
    tanh_fast(F::of(GELU_C) * (x + F::of(GELU_K) * x * x * x))
}

fn gelu<F: Scalar>(x: F, t: F) -> F {
    F::of(0.5) * x * (F::one() + t)
}

fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let half = F::of(0.5);
    let k3 = F::of(3.0 * GELU_K);
    half * (F::one() + t) + half * x * (F::one() - t * t) * F::of(GELU_C) * (F::one() + k3 * x * x)
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn pair_mut<'a, F>(v: &'a mut [F], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [F], &'a mut [F]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

fn add_row<F: Scalar>(out: &mut [F], table: &[F], row: usize) {
    let d = out.len();
    for (o, t) in out.iter_mut().zip(&table[row * d..(row + 1) * d]) {
        *o += *t;
    }
}

impl<F: Scalar> MaskedSeqModel<F> {
    /// Fresh model with truncated-normal weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (ix, entries, len) = build_index(&cfg);
        let mut theta = vec![F::zero(); len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for e in &entries {
            for v in &mut theta[e.range()] {
                *v = match e.init {
                    Init::Zeros => F::zero(),
                    Init::Ones => F::one(),
                    Init::Normal => loop {
                        let s: f64 = normal.sample(&mut rng);
                        if s.abs() <= 2.0 * INIT_STD {
                            break F::of(s);
                        }
                    },
                };
            }
        }
        Ok(MaskedSeqModel { cfg, ix, entries, theta })
    }

    /// Rebuild from a flat parameter vector laid out as `entries()`.
    pub fn from_params(cfg: ModelConfig, theta: Vec<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let (ix, entries, len) = build_index(&cfg);
        if theta.len() != len {
            return Err(ModelError::DimMismatch {
                expected: format!("{len} parameters"),
                found: format!("{} parameters", theta.len()),
            });
        }
        Ok(MaskedSeqModel { cfg, ix, entries, theta })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn params(&self) -> &[F] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Zero the output projection so every position starts uniform.
    pub fn zero_head(&mut self) {
        let (w, b) = (self.ix.w_head.clone(), self.ix.b_head.clone());
        self.theta[w].fill(F::zero());
        self.theta[b].fill(F::zero());
    }

    /// Same weights in another precision.
    pub fn cast<G: Scalar>(&self) -> MaskedSeqModel<G> {
        MaskedSeqModel {
            cfg: self.cfg,
            ix: self.ix.clone(),
            entries: self.entries.clone(),
            theta: self.theta.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    fn forward(&self, enc: &Encoded, mut drop: Option<&mut Dropout<'_>>) -> Cache<F> {
        let d = self.cfg.embed_dim;
        let th = &self.theta;
        let ix = &self.ix;
        let mut gemb = vec![F::zero(); enc.groups.len() * d];
        for (g, st) in enc.groups.iter().enumerate() {
            let out = &mut gemb[g * d..(g + 1) * d];
            add_row(out, &th[ix.emb_x.clone()], st.x);
            add_row(out, &th[ix.emb_y.clone()], st.y);
            add_row(out, &th[ix.emb_dir.clone()], st.dir);
            add_row(out, &th[ix.emb_gx.clone()], st.gx);
            add_row(out, &th[ix.emb_gy.clone()], st.gy);
            add_row(out, &th[ix.emb_goal.clone()], st.goal);
            let view = &th[ix.emb_view.clone()];
            for &v in &enc.view_pool[st.view.clone()] {
                add_row(out, view, v as usize);
            }
        }
        let n = enc.slots.len();
        let mut x = vec![F::zero(); n * d];
        for (i, slot) in enc.slots.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&gemb[slot.group * d..(slot.group + 1) * d]);
            add_row(row, &th[ix.emb_act.clone()], slot.act);
            add_row(row, &th[ix.emb_pos.clone()], slot.pos);
        }
        let drop0 = apply_dropout(&mut x, drop.as_deref_mut());
        let mut layers = Vec::with_capacity(ix.blocks.len());
        for b in &ix.blocks {
            let (lc, next) = self.block_forward(b, x, enc, drop.as_deref_mut());
            layers.push(lc);
            x = next;
        }
        let q = enc.queries.len();
        let mut xq = vec![F::zero(); q * d];
        for (r, &i) in enc.queries.iter().enumerate() {
            xq[r * d..(r + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
        }
        let (hf, lnf) = layer_norm(&xq, &th[ix.lnf_g.clone()], &th[ix.lnf_b.clone()], d);
        let a = Token::ACTIONS;
        let mut logits = vec![F::zero(); q * a];
        matmul(&hf, &th[ix.w_head.clone()], &mut logits, q, d, a);
        add_bias(&mut logits, &th[ix.b_head.clone()]);
        Cache {
            drop0,
            layers,
            hf,
            lnf,
            logits,
        }
    }

    fn block_forward(
        &self,
        b: &BlockIx,
        x: Vec<F>,
        enc: &Encoded,
        mut drop: Option<&mut Dropout<'_>>,
    ) -> (LayerCache<F>, Vec<F>) {
        let th = &self.theta;
        let d = self.cfg.embed_dim;
        let f = self.cfg.ff_mult * d;
        let n = enc.slots.len();

        let (h1, ln1) = layer_norm(&x, &th[b.ln1_g.clone()], &th[b.ln1_b.clone()], d);
        let mut qkv = vec![F::zero(); n * 3 * d];
        matmul(&h1, &th[b.w_qkv.clone()], &mut qkv, n, d, 3 * d);
        add_bias(&mut qkv, &th[b.b_qkv.clone()]);
        let (ctx, probs) = self.attention(&qkv, enc);
        let mut attn = vec![F::zero(); n * d];
        matmul(&ctx, &th[b.w_o.clone()], &mut attn, n, d, d);
        add_bias(&mut attn, &th[b.b_o.clone()]);
        let drop1 = apply_dropout(&mut attn, drop.as_deref_mut());
        let mut x_mid = x;
        for (v, a) in x_mid.iter_mut().zip(&attn) {
            *v += *a;
        }

        let (h2, ln2) = layer_norm(&x_mid, &th[b.ln2_g.clone()], &th[b.ln2_b.clone()], d);
        let mut pre = vec![F::zero(); n * f];
        matmul(&h2, &th[b.w_fc.clone()], &mut pre, n, d, f);
        add_bias(&mut pre, &th[b.b_fc.clone()]);
        let tanh: Vec<F> = pre.iter().map(|&v| gelu_tanh(v)).collect();
        let act: Vec<F> = pre.iter().zip(&tanh).map(|(&v, &t)| gelu(v, t)).collect();
        let mut mlp = vec![F::zero(); n * d];
        matmul(&act, &th[b.w_proj.clone()], &mut mlp, n, f, d);
        add_bias(&mut mlp, &th[b.b_proj.clone()]);
        let drop2 = apply_dropout(&mut mlp, drop);
        let mut out = x_mid;
        for (v, m) in out.iter_mut().zip(&mlp) {
            *v += *m;
        }
        let cache = LayerCache {
            h1,
            ln1,
            qkv,
            probs,
            ctx,
            drop1,
            h2,
            ln2,
            pre,
            tanh,
            act,
            drop2,
        };
        (cache, out)
    }

    /// Full (unmasked) self-attention within each sequence.
    fn attention(&self, qkv: &[F], enc: &Encoded) -> (Vec<F>, Vec<F>) {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let n = enc.slots.len();
        let total: usize = enc.seq_offsets.windows(2).map(|w| heads * (w[1] - w[0]).pow(2)).sum();
        let mut probs = vec![F::zero(); total];
        let mut ctx = vec![F::zero(); n * d];
        let mut poff = 0;
        for w in enc.seq_offsets.windows(2) {
            let (o, l) = (w[0], w[1] - w[0]);
            for h in 0..heads {
                for i in 0..l {
                    let qi = &qkv[(o + i) * 3 * d + h * dh..][..dh];
                    let prow = &mut probs[poff + (h * l + i) * l..][..l];
                    let mut max = F::neg_infinity();
                    for (j, p) in prow.iter_mut().enumerate() {
                        let kj = &qkv[(o + j) * 3 * d + d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum::<F>() * scale;
                        *p = s;
                        max = max.max(s);
                    }
                    let mut z = F::zero();
                    for p in prow.iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    for p in prow.iter_mut() {
                        *p = *p / z;
                    }
                    let ci = &mut ctx[(o + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &qkv[(o + j) * 3 * d + 2 * d + h * dh..][..dh];
                        for (c, v) in ci.iter_mut().zip(vj) {
                            *c += p * *v;
                        }
                    }
                }
            }
            poff += heads * l * l;
        }
        (ctx, probs)
    }

    fn attention_backward(&self, qkv: &[F], probs: &[F], dctx: &[F], enc: &Encoded) -> Vec<F> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut dqkv = vec![F::zero(); qkv.len()];
        let mut dp = Vec::new();
        let mut poff = 0;
        for w in enc.seq_offsets.windows(2) {
            let (o, l) = (w[0], w[1] - w[0]);
            dp.resize(l, F::zero());
            for h in 0..heads {
                for i in 0..l {
                    let prow = &probs[poff + (h * l + i) * l..][..l];
                    let dci = &dctx[(o + i) * d + h * dh..][..dh];
                    for j in 0..l {
                        let vbase = (o + j) * 3 * d + 2 * d + h * dh;
                        let mut acc = F::zero();
                        for c in 0..dh {
                            acc += dci[c] * qkv[vbase + c];
                            dqkv[vbase + c] += prow[j] * dci[c];
                        }
                        dp[j] = acc;
                    }
                    let s: F = prow.iter().zip(&dp).map(|(p, g)| *p * *g).sum();
                    let qbase = (o + i) * 3 * d + h * dh;
                    for j in 0..l {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let kbase = (o + j) * 3 * d + d + h * dh;
                        for c in 0..dh {
                            dqkv[qbase + c] += ds * qkv[kbase + c];
                            dqkv[kbase + c] += ds * qkv[qbase + c];
                        }
                    }
                }
            }
            poff += heads * l * l;
        }
        dqkv
    }

    fn backward(&self, enc: &Encoded, cache: &Cache<F>, dlogits: &[F], grad: &mut [F]) {
        let d = self.cfg.embed_dim;
        let ix = &self.ix;
        let th = &self.theta;
        let a = Token::ACTIONS;
        let q = enc.queries.len();
        matmul_tn_acc(&cache.hf, dlogits, &mut grad[ix.w_head.clone()], q, d, a);
        col_sum_acc(dlogits, &mut grad[ix.b_head.clone()]);
        let mut dhf = vec![F::zero(); q * d];
        matmul_nt(dlogits, &th[ix.w_head.clone()], &mut dhf, q, a, d);
        let (dg, db) = pair_mut(grad, &ix.lnf_g, &ix.lnf_b);
        let dxq = layer_norm_backward(&dhf, &cache.lnf, &th[ix.lnf_g.clone()], dg, db, d);

        let n = enc.slots.len();
        let mut dx = vec![F::zero(); n * d];
        for (r, &i) in enc.queries.iter().enumerate() {
            for c in 0..d {
                dx[i * d + c] += dxq[r * d + c];
            }
        }
        for (b, lc) in ix.blocks.iter().zip(&cache.layers).rev() {
            dx = self.block_backward(b, lc, enc, dx, grad);
        }
        if let Some(m) = &cache.drop0 {
            for (v, k) in dx.iter_mut().zip(m) {
                *v *= *k;
            }
        }

        let mut dgroup = vec![F::zero(); enc.groups.len() * d];
        for (i, slot) in enc.slots.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            add_row_grad(&mut grad[ix.emb_act.clone()], slot.act, row);
            add_row_grad(&mut grad[ix.emb_pos.clone()], slot.pos, row);
            add_row_grad(&mut dgroup, slot.group, row);
        }
        for (g, st) in enc.groups.iter().enumerate() {
            let row = &dgroup[g * d..(g + 1) * d];
            add_row_grad(&mut grad[ix.emb_x.clone()], st.x, row);
            add_row_grad(&mut grad[ix.emb_y.clone()], st.y, row);
            add_row_grad(&mut grad[ix.emb_dir.clone()], st.dir, row);
            add_row_grad(&mut grad[ix.emb_gx.clone()], st.gx, row);
            add_row_grad(&mut grad[ix.emb_gy.clone()], st.gy, row);
            add_row_grad(&mut grad[ix.emb_goal.clone()], st.goal, row);
            let view = &mut grad[ix.emb_view.clone()];
            for &v in &enc.view_pool[st.view.clone()] {
                add_row_grad(view, v as usize, row);
            }
        }
    }

    fn block_backward(&self, b: &BlockIx, lc: &LayerCache<F>, enc: &Encoded, dx: Vec<F>, grad: &mut [F]) -> Vec<F> {
        let th = &self.theta;
        let d = self.cfg.embed_dim;
        let f = self.cfg.ff_mult * d;
        let n = enc.slots.len();

        let mut dmlp = dx.clone();
        if let Some(m) = &lc.drop2 {
            for (v, k) in dmlp.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        matmul_tn_acc(&lc.act, &dmlp, &mut grad[b.w_proj.clone()], n, f, d);
        col_sum_acc(&dmlp, &mut grad[b.b_proj.clone()]);
        let mut dpre = vec![F::zero(); n * f];
        matmul_nt(&dmlp, &th[b.w_proj.clone()], &mut dpre, n, d, f);
        for ((g, &p), &t) in dpre.iter_mut().zip(&lc.pre).zip(&lc.tanh) {
            *g *= gelu_grad(p, t);
        }
        matmul_tn_acc(&lc.h2, &dpre, &mut grad[b.w_fc.clone()], n, d, f);
        col_sum_acc(&dpre, &mut grad[b.b_fc.clone()]);
        let mut dh2 = vec![F::zero(); n * d];
        matmul_nt(&dpre, &th[b.w_fc.clone()], &mut dh2, n, f, d);
        let (dg, db) = pair_mut(grad, &b.ln2_g, &b.ln2_b);
        let dln2 = layer_norm_backward(&dh2, &lc.ln2, &th[b.ln2_g.clone()], dg, db, d);
        let mut dmid = dx;
        for (v, g) in dmid.iter_mut().zip(&dln2) {
            *v += *g;
        }

        let mut dattn = dmid.clone();
        if let Some(m) = &lc.drop1 {
            for (v, k) in dattn.iter_mut().zip(m) {
                *v *= *k;
            }
        }
        matmul_tn_acc(&lc.ctx, &dattn, &mut grad[b.w_o.clone()], n, d, d);
        col_sum_acc(&dattn, &mut grad[b.b_o.clone()]);
        let mut dctx = vec![F::zero(); n * d];
        matmul_nt(&dattn, &th[b.w_o.clone()], &mut dctx, n, d, d);
        let dqkv = self.attention_backward(&lc.qkv, &lc.probs, &dctx, enc);
        matmul_tn_acc(&lc.h1, &dqkv, &mut grad[b.w_qkv.clone()], n, d, 3 * d);
        col_sum_acc(&dqkv, &mut grad[b.b_qkv.clone()]);
        let mut dh1 = vec![F::zero(); n * d];
        matmul_nt(&dqkv, &th[b.w_qkv.clone()], &mut dh1, n, 3 * d, d);
        let (dg, db) = pair_mut(grad, &b.ln1_g, &b.ln1_b);
        let dln1 = layer_norm_backward(&dh1, &lc.ln1, &th[b.ln1_g.clone()], dg, db, d);
        for (v, g) in dmid.iter_mut().zip(&dln1) {
            *v += *g;
        }
        dmid
    }

    fn encode_batch(&self, batch: &[TrainExample]) -> (Encoded, Vec<usize>) {
        let positions: Vec<[usize; 1]> = batch.iter().map(|ex| [ex.position]).collect();
        let queries: Vec<Query> = batch
            .iter()
            .zip(&positions)
            .map(|(ex, p)| Query {
                seq: &ex.seq,
                positions: p,
            })
            .collect();
        let targets = batch
            .iter()
            .map(|ex| ex.target.vocab_index().expect("training targets are planning actions"))
            .collect();
        (encode(&queries, self.cfg.grid, self.cfg.max_len), targets)
    }

    /// Mean masked-target NLL with dropout disabled.
    pub fn loss(&self, batch: &[TrainExample]) -> f64 {
        let (enc, targets) = self.encode_batch(batch);
        let cache = self.forward(&enc, None);
        xent(&cache.logits, &targets).0
    }

    /// Loss of `batch`, accumulating its gradient into `grad`. Dropout is
    /// active only when an RNG is supplied.
    pub fn loss_and_grad(&self, batch: &[TrainExample], grad: &mut [F], rng: Option<&mut dyn RngCore>) -> f64 {
        assert_eq!(grad.len(), self.theta.len());
        if batch.is_empty() {
            return 0.0;
        }
        let (enc, targets) = self.encode_batch(batch);
        let mut drop = rng.map(|rng| Dropout {
            p: self.cfg.dropout,
            rng,
        });
        let cache = self.forward(&enc, drop.as_mut());
        let (loss, dlogits) = xent(&cache.logits, &targets);
        self.backward(&enc, &cache, &dlogits, grad);
        loss
    }

    /// Raw logits for each queried position, in query order.
    pub fn logits(&self, queries: &[Query<'_>]) -> Vec<[f64; 4]> {
        let enc = encode(queries, self.cfg.grid, self.cfg.max_len);
        if enc.queries.is_empty() {
            return Vec::new();
        }
        let cache = self.forward(&enc, None);
        cache
            .logits
            .chunks_exact(Token::ACTIONS)
            .map(|r| [r[0].f64(), r[1].f64(), r[2].f64(), r[3].f64()])
            .collect()
    }
}

fn add_row_grad<F: Scalar>(table: &mut [F], row: usize, g: &[F]) {
    let d = g.len();
    for (t, v) in table[row * d..(row + 1) * d].iter_mut().zip(g) {
        *t += *v;
    }
}

/// Mean cross-entropy over rows of 4 logits and its gradient.
fn xent<F: Scalar>(logits: &[F], targets: &[usize]) -> (f64, Vec<F>) {
    let a = Token::ACTIONS;
    let q = targets.len();
    let inv_q = F::of(1.0 / q as f64);
    let mut grad = vec![F::zero(); logits.len()];
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * a..(r + 1) * a];
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let z: F = row.iter().map(|&l| (l - m).exp()).sum();
        let logz = m + z.ln();
        loss += (logz - row[t]).f64();
        for k in 0..a {
            let p = (row[k] - logz).exp();
            grad[r * a + k] = (p - if k == t { F::one() } else { F::zero() }) * inv_q;
        }
    }
    (loss / q as f64, grad)
}

impl<F: Scalar> ActionModel for MaskedSeqModel<F> {
    fn marginals_batch(&self, queries: &[Query<'_>]) -> Vec<Vec<ActionDist>> {
        let mut flat = self.logits(queries).into_iter().map(softmax4);
        queries
            .iter()
            .map(|q| flat.by_ref().take(q.positions.len()).collect())
            .collect()
    }
}
