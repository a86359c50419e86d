//! Transformer building blocks shared by the vision encoder, the scene-graph
//! encoder and the report decoder: parameter structs with named traversal
//! (for the optimizer and checkpoints), and tape-level forward helpers.

use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::Rng;

/// How a binary attention mask is applied to the score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Disconnected pairs are excluded from the softmax entirely
    /// (additive negative-infinity form); their weights are exactly zero.
    Exclusive,
    /// Literal elementwise product of mask and scores before the softmax;
    /// disconnected pairs keep score zero and still receive weight.
    Hadamard,
}

#[derive(Debug, Clone)]
pub struct AttnParams<S> {
    pub wq: Mat<S>,
    pub bq: Mat<S>,
    pub wk: Mat<S>,
    pub bk: Mat<S>,
    pub wv: Mat<S>,
    pub bv: Mat<S>,
    pub wo: Mat<S>,
    pub bo: Mat<S>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<S> {
    pub gamma: Mat<S>,
    pub beta: Mat<S>,
}

#[derive(Debug, Clone)]
pub struct FfnParams<S> {
    pub w1: Mat<S>,
    pub b1: Mat<S>,
    pub w2: Mat<S>,
    pub b2: Mat<S>,
}

/// One self-attention encoder layer (post-norm residual wiring).
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<S> {
    pub attn: AttnParams<S>,
    pub ln1: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
    pub ln2: LayerNormParams<S>,
}

/// One decoder layer: causal self-attention, cross-attention over visual
/// tokens, cross-attention over the scene graph, then the feed-forward block.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams<S> {
    pub self_attn: AttnParams<S>,
    pub ln1: LayerNormParams<S>,
    pub cross_vis: AttnParams<S>,
    pub ln2: LayerNormParams<S>,
    pub cross_graph: AttnParams<S>,
    pub ln3: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
    pub ln4: LayerNormParams<S>,
}

pub type ParamVisitor<'a, S> = dyn FnMut(&str, &Mat<S>) + 'a;
pub type ParamVisitorMut<'a, S> = dyn FnMut(&str, &mut Mat<S>) + 'a;

impl<S: Scalar> AttnParams<S> {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        AttnParams {
            wq: Mat::glorot(d, d, rng),
            bq: Mat::zeros(1, d),
            wk: Mat::glorot(d, d, rng),
            bk: Mat::zeros(1, d),
            wv: Mat::glorot(d, d, rng),
            bv: Mat::zeros(1, d),
            wo: Mat::glorot(d, d, rng),
            bo: Mat::zeros(1, d),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.bq"), &self.bq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.bk"), &self.bk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.bv"), &self.bv);
        f(&format!("{prefix}.wo"), &self.wo);
        f(&format!("{prefix}.bo"), &self.bo);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.bq"), &mut self.bq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.bk"), &mut self.bk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.bv"), &mut self.bv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        f(&format!("{prefix}.bo"), &mut self.bo);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundAttn {
        BoundAttn {
            wq: t.param(&format!("{prefix}.wq"), &self.wq),
            bq: t.param(&format!("{prefix}.bq"), &self.bq),
            wk: t.param(&format!("{prefix}.wk"), &self.wk),
            bk: t.param(&format!("{prefix}.bk"), &self.bk),
            wv: t.param(&format!("{prefix}.wv"), &self.wv),
            bv: t.param(&format!("{prefix}.bv"), &self.bv),
            wo: t.param(&format!("{prefix}.wo"), &self.wo),
            bo: t.param(&format!("{prefix}.bo"), &self.bo),
        }
    }
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Mat::from_fn(1, d, |_, _| S::one()),
            beta: Mat::zeros(1, d),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundLayerNorm {
        BoundLayerNorm {
            gamma: t.param(&format!("{prefix}.gamma"), &self.gamma),
            beta: t.param(&format!("{prefix}.beta"), &self.beta),
        }
    }
}

impl<S: Scalar> FfnParams<S> {
    pub fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self::init_io(d, hidden, d, rng)
    }

    /// Feed-forward with distinct input and output widths.
    pub fn init_io(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        FfnParams {
            w1: Mat::glorot(d_in, hidden, rng),
            b1: Mat::zeros(1, hidden),
            w2: Mat::glorot(hidden, d_out, rng),
            b2: Mat::zeros(1, d_out),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundFfn {
        BoundFfn {
            w1: t.param(&format!("{prefix}.w1"), &self.w1),
            b1: t.param(&format!("{prefix}.b1"), &self.b1),
            w2: t.param(&format!("{prefix}.w2"), &self.w2),
            b2: t.param(&format!("{prefix}.b2"), &self.b2),
        }
    }
}

impl<S: Scalar> EncoderLayerParams<S> {
    pub fn init(d: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        EncoderLayerParams {
            attn: AttnParams::init(d, rng),
            ln1: LayerNormParams::init(d),
            ffn: FfnParams::init(d, ffn_hidden, rng),
            ln2: LayerNormParams::init(d),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundEncoderLayer {
        BoundEncoderLayer {
            attn: self.attn.bind(t, &format!("{prefix}.attn")),
            ln1: self.ln1.bind(t, &format!("{prefix}.ln1")),
            ffn: self.ffn.bind(t, &format!("{prefix}.ffn")),
            ln2: self.ln2.bind(t, &format!("{prefix}.ln2")),
        }
    }
}

impl<S: Scalar> DecoderLayerParams<S> {
    pub fn init(d: usize, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        DecoderLayerParams {
            self_attn: AttnParams::init(d, rng),
            ln1: LayerNormParams::init(d),
            cross_vis: AttnParams::init(d, rng),
            ln2: LayerNormParams::init(d),
            cross_graph: AttnParams::init(d, rng),
            ln3: LayerNormParams::init(d),
            ffn: FfnParams::init(d, ffn_hidden, rng),
            ln4: LayerNormParams::init(d),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.cross_vis.visit(&format!("{prefix}.cross_vis"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.cross_graph.visit(&format!("{prefix}.cross_graph"), f);
        self.ln3.visit(&format!("{prefix}.ln3"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
        self.ln4.visit(&format!("{prefix}.ln4"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.cross_vis.visit_mut(&format!("{prefix}.cross_vis"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.cross_graph.visit_mut(&format!("{prefix}.cross_graph"), f);
        self.ln3.visit_mut(&format!("{prefix}.ln3"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
        self.ln4.visit_mut(&format!("{prefix}.ln4"), f);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundDecoderLayer {
        BoundDecoderLayer {
            self_attn: self.self_attn.bind(t, &format!("{prefix}.self_attn")),
            ln1: self.ln1.bind(t, &format!("{prefix}.ln1")),
            cross_vis: self.cross_vis.bind(t, &format!("{prefix}.cross_vis")),
            ln2: self.ln2.bind(t, &format!("{prefix}.ln2")),
            cross_graph: self.cross_graph.bind(t, &format!("{prefix}.cross_graph")),
            ln3: self.ln3.bind(t, &format!("{prefix}.ln3")),
            ffn: self.ffn.bind(t, &format!("{prefix}.ffn")),
            ln4: self.ln4.bind(t, &format!("{prefix}.ln4")),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundAttn {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy)]
pub struct BoundFfn {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy)]
pub struct BoundEncoderLayer {
    pub attn: BoundAttn,
    pub ln1: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub ln2: BoundLayerNorm,
}

#[derive(Clone, Copy)]
pub struct BoundDecoderLayer {
    pub self_attn: BoundAttn,
    pub ln1: BoundLayerNorm,
    pub cross_vis: BoundAttn,
    pub ln2: BoundLayerNorm,
    pub cross_graph: BoundAttn,
    pub ln3: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub ln4: BoundLayerNorm,
}

pub fn linear<S: Scalar>(t: &mut Tape<S>, x: Var, w: Var, b: Var) -> Var {
    let xw = t.matmul(x, w);
    t.add_row(xw, b)
}

pub fn ffn_forward<S: Scalar>(t: &mut Tape<S>, x: Var, p: &BoundFfn) -> Var {
    let h = linear(t, x, p.w1, p.b1);
    let a = t.gelu(h);
    linear(t, a, p.w2, p.b2)
}

/// Tape-free linear layer over the same kernels the tape ops use.
pub fn linear_plain<S: Scalar>(x: &Mat<S>, w: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let mut y = crate::mat::matmul(x, w);
    for i in 0..y.rows() {
        for (v, &bj) in y.row_mut(i).iter_mut().zip(b.row(0)) {
            *v += bj;
        }
    }
    y
}

/// Tape-free feed-forward block.
pub fn ffn_plain<S: Scalar>(x: &Mat<S>, p: &FfnParams<S>) -> Mat<S> {
    let h = linear_plain(x, &p.w1, &p.b1).map(crate::mat::gelu);
    linear_plain(&h, &p.w2, &p.b2)
}

/// Multi-head attention. `allowed`, when present, is a row-major
/// `n_q`-by-`n_kv` connectivity mask applied according to `mode`.
pub fn mha<S: Scalar>(
    t: &mut Tape<S>,
    q_in: Var,
    kv_in: Var,
    p: &BoundAttn,
    heads: usize,
    allowed: Option<&[bool]>,
    mode: MaskMode,
) -> Var {
    let q = linear(t, q_in, p.wq, p.bq);
    let k = linear(t, kv_in, p.wk, p.bk);
    let v = linear(t, kv_in, p.wv, p.bv);
    let d = t.value(q).cols();
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let (nq, nk) = (t.value(q).rows(), t.value(k).rows());

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(k, h * dh, dh);
        let vh = t.slice_cols(v, h * dh, dh);
        let scores = t.matmul_tb(qh, kh);
        let scaled = t.scale(scores, scale);
        let probs = match (allowed, mode) {
            (None, _) => t.softmax_rows(scaled, None),
            (Some(m), MaskMode::Exclusive) => t.softmax_rows(scaled, Some(m.to_vec())),
            (Some(m), MaskMode::Hadamard) => {
                let mask_mat = Mat::from_vec(
                    nq,
                    nk,
                    m.iter()
                        .map(|&b| if b { S::one() } else { S::zero() })
                        .collect(),
                );
                let gated = t.mul_const(scaled, mask_mat);
                t.softmax_rows(gated, None)
            }
        };
        outs.push(t.matmul(probs, vh));
    }
    let cat = t.concat_cols(&outs);
    linear(t, cat, p.wo, p.bo)
}

/// Post-norm encoder layer: x -> LN(x + MHA(x)) -> LN(· + FFN(·)).
pub fn encoder_layer<S: Scalar>(
    t: &mut Tape<S>,
    x: Var,
    attn: &BoundAttn,
    ln1: &BoundLayerNorm,
    ffn: &BoundFfn,
    ln2: &BoundLayerNorm,
    heads: usize,
    allowed: Option<&[bool]>,
    mode: MaskMode,
) -> Var {
    let a = mha(t, x, x, attn, heads, allowed, mode);
    let r1 = t.add(x, a);
    let x1 = t.layer_norm(r1, ln1.gamma, ln1.beta);
    let f = ffn_forward(t, x1, ffn);
    let r2 = t.add(x1, f);
    t.layer_norm(r2, ln2.gamma, ln2.beta)
}
