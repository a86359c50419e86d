//! Report decoder: causal self-attention, cross-attention over visual
//! tokens, cross-attention over subgraph summaries (with a learned null
//! token when the graph is empty), and greedy or beam generation through an
//! incremental key-value cache that reproduces the full-prefix forward pass
//! bitwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attn::{
    ffn_forward, linear, linear_plain, mha, BoundDecoderLayer, DecoderLayerParams, MaskMode,
    ParamVisitor, ParamVisitorMut,
};
use crate::error::{Error, Result};
use crate::mat::{layer_norm_row, softmax_row_masked, Mat};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::vocab::{BOS, EOS, PAD};

/// Generated or reference report token ids; BOS first, PAD only as suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportTokens {
    pub ids: Vec<u32>,
}

/// One vector per subgraph, pooled from its object token and attribute
/// tokens.
#[derive(Debug, Clone)]
pub struct SubgraphSummaries<S> {
    pub g: Mat<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// What the graph cross-attention sublayer sees: skipped entirely, the
/// learned null token, or a matrix of graph-derived context rows.
#[derive(Clone, Copy)]
pub enum GraphCtx<'a, S> {
    Disabled,
    Null,
    Tokens(&'a Mat<S>),
}

#[derive(Debug, Clone)]
pub struct DecoderParams<S> {
    pub tok_emb: Mat<S>,
    pub pos_emb: Mat<S>,
    pub layers: Vec<DecoderLayerParams<S>>,
    pub out_w: Mat<S>,
    pub out_b: Mat<S>,
    pub null_token: Mat<S>,
}

impl<S: Scalar> DecoderParams<S> {
    pub fn init(
        vocab: usize,
        max_len: usize,
        d: usize,
        ffn_hidden: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            tok_emb: Mat::uniform(vocab, d, 0.1, rng),
            pos_emb: Mat::uniform(max_len, d, 0.1, rng),
            layers: (0..n_layers)
                .map(|_| DecoderLayerParams::init(d, ffn_hidden, rng))
                .collect(),
            out_w: Mat::glorot(d, vocab, rng),
            out_b: Mat::zeros(1, vocab),
            null_token: Mat::uniform(1, d, 0.1, rng),
        }
    }

    pub fn max_len(&self) -> usize {
        self.pos_emb.rows()
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.tok_emb"), &self.tok_emb);
        f(&format!("{prefix}.pos_emb"), &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
        f(&format!("{prefix}.out_w"), &self.out_w);
        f(&format!("{prefix}.out_b"), &self.out_b);
        f(&format!("{prefix}.null_token"), &self.null_token);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.tok_emb"), &mut self.tok_emb);
        f(&format!("{prefix}.pos_emb"), &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
        f(&format!("{prefix}.out_w"), &mut self.out_w);
        f(&format!("{prefix}.out_b"), &mut self.out_b);
        f(&format!("{prefix}.null_token"), &mut self.null_token);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundDecoder {
        BoundDecoder {
            tok_emb: t.param(&format!("{prefix}.tok_emb"), &self.tok_emb),
            pos_emb: t.param(&format!("{prefix}.pos_emb"), &self.pos_emb),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(t, &format!("{prefix}.layer{i}")))
                .collect(),
            out_w: t.param(&format!("{prefix}.out_w"), &self.out_w),
            out_b: t.param(&format!("{prefix}.out_b"), &self.out_b),
            null_token: t.param(&format!("{prefix}.null_token"), &self.null_token),
        }
    }
}

#[derive(Clone)]
pub struct BoundDecoder {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundDecoderLayer>,
    pub out_w: Var,
    pub out_b: Var,
    pub null_token: Var,
}

/// Pools each token group into one row per subgraph.
pub fn summarize_subgraphs_tape<S: Scalar>(
    t: &mut Tape<S>,
    graph_tokens: Var,
    groups: &[Vec<usize>],
    pooling: Pooling,
) -> Var {
    match pooling {
        Pooling::Max => t.max_groups(graph_tokens, groups),
        Pooling::Mean => t.mean_groups(graph_tokens, groups.to_vec()),
    }
}

/// Inference-mode subgraph pooling.
pub fn summarize_subgraphs<S: Scalar>(
    graph_tokens: &Mat<S>,
    groups: &[Vec<usize>],
    pooling: Pooling,
) -> SubgraphSummaries<S> {
    let mut t = Tape::new();
    let g = t.constant(graph_tokens.clone());
    let out = summarize_subgraphs_tape(&mut t, g, groups, pooling);
    SubgraphSummaries {
        g: t.value(out).clone(),
    }
}

/// Token embedding plus position embedding for a prefix.
pub fn embed_prefix_tape<S: Scalar>(t: &mut Tape<S>, ids: &[u32], dec: &BoundDecoder) -> Var {
    let tok: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let te = t.gather_rows(dec.tok_emb, tok);
    let pe = t.gather_rows(dec.pos_emb, (0..ids.len()).collect());
    t.add(te, pe)
}

fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Full-prefix decoder stack: per layer, causal self-attention, visual
/// cross-attention, graph cross-attention (skipped when disabled), then the
/// feed-forward block, all with post-norm residuals.
pub fn decode_stack_tape<S: Scalar>(
    t: &mut Tape<S>,
    x0: Var,
    visual: Var,
    graph: Option<Var>,
    dec: &BoundDecoder,
    heads: usize,
) -> Var {
    let n = t.value(x0).rows();
    let causal = causal_mask(n);
    let mut x = x0;
    for layer in &dec.layers {
        let sa = mha(
            t,
            x,
            x,
            &layer.self_attn,
            heads,
            Some(&causal),
            MaskMode::Exclusive,
        );
        let r1 = t.add(x, sa);
        let x1 = t.layer_norm(r1, layer.ln1.gamma, layer.ln1.beta);

        let cv = mha(t, x1, visual, &layer.cross_vis, heads, None, MaskMode::Exclusive);
        let r2 = t.add(x1, cv);
        let x2 = t.layer_norm(r2, layer.ln2.gamma, layer.ln2.beta);

        let x3 = match graph {
            Some(g) => {
                let cg = mha(t, x2, g, &layer.cross_graph, heads, None, MaskMode::Exclusive);
                let r3 = t.add(x2, cg);
                t.layer_norm(r3, layer.ln3.gamma, layer.ln3.beta)
            }
            None => x2,
        };

        let f = ffn_forward(t, x3, &layer.ffn);
        let r4 = t.add(x3, f);
        x = t.layer_norm(r4, layer.ln4.gamma, layer.ln4.beta);
    }
    x
}

/// Resolves a graph context into the matrix the cross-attention attends to.
pub fn graph_ctx_var<S: Scalar>(
    t: &mut Tape<S>,
    ctx: GraphCtx<'_, S>,
    dec: &BoundDecoder,
) -> Option<Var> {
    match ctx {
        GraphCtx::Disabled => None,
        GraphCtx::Null => Some(dec.null_token),
        GraphCtx::Tokens(m) => Some(t.constant(m.clone())),
    }
}

/// Classification head over hidden states.
pub fn logits_tape<S: Scalar>(t: &mut Tape<S>, hidden: Var, dec: &BoundDecoder) -> Var {
    linear(t, hidden, dec.out_w, dec.out_b)
}

/// Mean negative log-softmax of each target under its logits row, PAD
/// targets excluded. Rows must align one-to-one with targets.
pub fn generation_loss<S: Scalar>(logits: &Mat<S>, targets: &[u32]) -> Result<S> {
    if logits.rows() != targets.len() {
        return Err(Error::LengthMismatch {
            context: "generation_loss",
            left: logits.rows(),
            right: targets.len(),
        });
    }
    let active: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    if !active.iter().any(|&a| a) {
        return Ok(S::zero());
    }
    let mut t = Tape::new();
    let l = t.constant(logits.clone());
    let loss = t.cross_entropy_rows(
        l,
        targets.iter().map(|&x| x as usize).collect(),
        active,
    );
    Ok(t.value(loss).item())
}

/// Incremental decode state: cached self-attention keys/values per layer
/// plus fixed cross-attention keys/values. Produces the same values as the
/// full-prefix tape forward.
#[derive(Clone)]
pub struct DecodeState<S> {
    heads: usize,
    tok_emb: Mat<S>,
    pos_emb: Mat<S>,
    out_w: Mat<S>,
    out_b: Mat<S>,
    layers: Vec<LayerState<S>>,
    pos: usize,
}

#[derive(Clone)]
struct LayerState<S> {
    p: DecoderLayerParams<S>,
    k_self: Mat<S>,
    v_self: Mat<S>,
    k_vis: Mat<S>,
    v_vis: Mat<S>,
    kv_graph: Option<(Mat<S>, Mat<S>)>,
}

fn ln_affine<S: Scalar>(row: &[S], gamma: &Mat<S>, beta: &Mat<S>) -> Vec<S> {
    let mut norm = vec![S::zero(); row.len()];
    layer_norm_row(row, S::of(1e-5), &mut norm);
    norm.iter()
        .enumerate()
        .map(|(j, &x)| x * gamma.at(0, j) + beta.at(0, j))
        .collect()
}

/// Single-query multi-head attention over cached keys/values, mirroring the
/// tape kernels operation for operation.
fn attend_row<S: Scalar>(
    q_row: &Mat<S>,
    k: &Mat<S>,
    v: &Mat<S>,
    heads: usize,
    wo: &Mat<S>,
    bo: &Mat<S>,
) -> Mat<S> {
    let d = q_row.cols();
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let n = k.rows();
    let mut cat = Mat::zeros(1, d);
    for h in 0..heads {
        let mut scores = vec![S::zero(); n];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut acc = S::zero();
            for c in 0..dh {
                acc += q_row.at(0, h * dh + c) * k.at(j, h * dh + c);
            }
            *s = acc * scale;
        }
        softmax_row_masked(&mut scores, None);
        for c in 0..dh {
            let mut acc = S::zero();
            for (j, &w) in scores.iter().enumerate() {
                acc += w * v.at(j, h * dh + c);
            }
            *cat.at_mut(0, h * dh + c) = acc;
        }
    }
    linear_plain(&cat, wo, bo)
}

impl<S: Scalar> DecodeState<S> {
    pub fn new(
        params: &DecoderParams<S>,
        heads: usize,
        visual: &Mat<S>,
        graph: GraphCtx<'_, S>,
    ) -> Self {
        let d = params.tok_emb.cols();
        let layers = params
            .layers
            .iter()
            .map(|p| {
                let k_vis = linear_plain(visual, &p.cross_vis.wk, &p.cross_vis.bk);
                let v_vis = linear_plain(visual, &p.cross_vis.wv, &p.cross_vis.bv);
                let kv_graph = match graph {
                    GraphCtx::Disabled => None,
                    GraphCtx::Null => Some((
                        linear_plain(&params.null_token, &p.cross_graph.wk, &p.cross_graph.bk),
                        linear_plain(&params.null_token, &p.cross_graph.wv, &p.cross_graph.bv),
                    )),
                    GraphCtx::Tokens(g) => Some((
                        linear_plain(g, &p.cross_graph.wk, &p.cross_graph.bk),
                        linear_plain(g, &p.cross_graph.wv, &p.cross_graph.bv),
                    )),
                };
                LayerState {
                    p: p.clone(),
                    k_self: Mat::zeros(0, d),
                    v_self: Mat::zeros(0, d),
                    k_vis,
                    v_vis,
                    kv_graph,
                }
            })
            .collect();
        Self {
            heads,
            tok_emb: params.tok_emb.clone(),
            pos_emb: params.pos_emb.clone(),
            out_w: params.out_w.clone(),
            out_b: params.out_b.clone(),
            layers,
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one token and returns the logits row for the next position.
    pub fn step(&mut self, token: u32) -> Mat<S> {
        let d = self.tok_emb.cols();
        let mut x = Mat::zeros(1, d);
        for j in 0..d {
            *x.at_mut(0, j) = self.tok_emb.at(token as usize, j) + self.pos_emb.at(self.pos, j);
        }
        for layer in &mut self.layers {
            let q = linear_plain(&x, &layer.p.self_attn.wq, &layer.p.self_attn.bq);
            let k_new = linear_plain(&x, &layer.p.self_attn.wk, &layer.p.self_attn.bk);
            let v_new = linear_plain(&x, &layer.p.self_attn.wv, &layer.p.self_attn.bv);
            layer.k_self.push_row(k_new.row(0));
            layer.v_self.push_row(v_new.row(0));
            let sa = attend_row(
                &q,
                &layer.k_self,
                &layer.v_self,
                self.heads,
                &layer.p.self_attn.wo,
                &layer.p.self_attn.bo,
            );
            let r1: Vec<S> = x
                .row(0)
                .iter()
                .zip(sa.row(0))
                .map(|(&a, &b)| a + b)
                .collect();
            let x1 = ln_affine(&r1, &layer.p.ln1.gamma, &layer.p.ln1.beta);
            let x1m = Mat::row_vec(&x1);

            let qv = linear_plain(&x1m, &layer.p.cross_vis.wq, &layer.p.cross_vis.bq);
            let cv = attend_row(
                &qv,
                &layer.k_vis,
                &layer.v_vis,
                self.heads,
                &layer.p.cross_vis.wo,
                &layer.p.cross_vis.bo,
            );
            let r2: Vec<S> = x1.iter().zip(cv.row(0)).map(|(&a, &b)| a + b).collect();
            let x2 = ln_affine(&r2, &layer.p.ln2.gamma, &layer.p.ln2.beta);
            let x2m = Mat::row_vec(&x2);

            let x3m = match &layer.kv_graph {
                Some((kg, vg)) => {
                    let qg = linear_plain(&x2m, &layer.p.cross_graph.wq, &layer.p.cross_graph.bq);
                    let cg = attend_row(
                        &qg,
                        kg,
                        vg,
                        self.heads,
                        &layer.p.cross_graph.wo,
                        &layer.p.cross_graph.bo,
                    );
                    let r3: Vec<S> = x2.iter().zip(cg.row(0)).map(|(&a, &b)| a + b).collect();
                    Mat::row_vec(&ln_affine(&r3, &layer.p.ln3.gamma, &layer.p.ln3.beta))
                }
                None => x2m,
            };

            let h = linear_plain(&x3m, &layer.p.ffn.w1, &layer.p.ffn.b1).map(crate::mat::gelu);
            let f = linear_plain(&h, &layer.p.ffn.w2, &layer.p.ffn.b2);
            let r4: Vec<S> = x3m
                .row(0)
                .iter()
                .zip(f.row(0))
                .map(|(&a, &b)| a + b)
                .collect();
            x = Mat::row_vec(&ln_affine(&r4, &layer.p.ln4.gamma, &layer.p.ln4.beta));
        }
        self.pos += 1;
        linear_plain(&x, &self.out_w, &self.out_b)
    }
}

fn argmax_row<S: Scalar>(row: &[S]) -> u32 {
    let mut best = 0usize;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Autoregressive generation from encoded visual tokens and a graph context.
/// Emits BOS followed by up to `max_len` tokens, stopping after EOS.
pub fn generate_tokens<S: Scalar>(
    params: &DecoderParams<S>,
    heads: usize,
    visual: &Mat<S>,
    graph: GraphCtx<'_, S>,
    max_len: usize,
    mode: DecodeMode,
) -> ReportTokens {
    let cap = max_len.min(params.max_len().saturating_sub(1));
    match mode {
        DecodeMode::Greedy => {
            let mut state = DecodeState::new(params, heads, visual, graph);
            let mut ids = vec![BOS];
            for _ in 0..cap {
                let logits = state.step(*ids.last().unwrap());
                let next = argmax_row(logits.row(0));
                ids.push(next);
                if next == EOS {
                    break;
                }
            }
            ReportTokens { ids }
        }
        DecodeMode::Beam(width) => beam_search(params, heads, visual, graph, cap, width.max(1)),
    }
}

struct Beam<S> {
    ids: Vec<u32>,
    score: f64,
    state: DecodeState<S>,
    finished: bool,
}

fn beam_search<S: Scalar>(
    params: &DecoderParams<S>,
    heads: usize,
    visual: &Mat<S>,
    graph: GraphCtx<'_, S>,
    cap: usize,
    width: usize,
) -> ReportTokens {
    let mut beams = vec![Beam {
        ids: vec![BOS],
        score: 0.0,
        state: DecodeState::new(params, heads, visual, graph),
        finished: false,
    }];
    for _ in 0..cap {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam<S>> = Vec::new();
        for beam in beams {
            if beam.finished {
                candidates.push(beam);
                continue;
            }
            let mut state = beam.state;
            let logits = state.step(*beam.ids.last().unwrap());
            let row: Vec<f64> = logits.row(0).iter().map(|x| x.f64()).collect();
            let log_probs = log_softmax(&row);
            let mut order: Vec<usize> = (0..log_probs.len()).collect();
            order.sort_by(|&a, &b| {
                log_probs[b]
                    .partial_cmp(&log_probs[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &tok in order.iter().take(width) {
                let mut ids = beam.ids.clone();
                ids.push(tok as u32);
                candidates.push(Beam {
                    ids,
                    score: beam.score + log_probs[tok],
                    state: state.clone(),
                    finished: tok as u32 == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.ids.cmp(&b.ids))
        });
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams
        .into_iter()
        .min_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.ids.cmp(&b.ids))
                .reverse()
        })
        .expect("beam search always keeps at least one beam");
    ReportTokens { ids: best.ids }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::AttnParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(vocab: usize, d: usize, layers: usize, seed: u64) -> DecoderParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderParams::init(vocab, 16, d, 2 * d, layers, &mut rng)
    }

    #[test]
    fn summarize_examples() {
        let tokens = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.0, 3.0]);
        let groups = vec![vec![0, 1]];
        let mx = summarize_subgraphs(&tokens, &groups, Pooling::Max);
        assert_eq!(mx.g.row(0), &[1.0, 3.0]);
        let mn = summarize_subgraphs(&tokens, &groups, Pooling::Mean);
        assert_eq!(mn.g.row(0), &[0.5, 0.5]);

        let same = Mat::from_vec(2, 2, vec![0.7, -0.1, 0.7, -0.1]);
        let one = summarize_subgraphs(&same, &groups, Pooling::Max);
        assert_eq!(one.g.row(0), &[0.7, -0.1]);
    }

    #[test]
    fn max_pool_dominates_mean_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = Mat::<f64>::uniform(6, 4, 1.0, &mut rng);
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5]];
        let mx = summarize_subgraphs(&tokens, &groups, Pooling::Max);
        let mn = summarize_subgraphs(&tokens, &groups, Pooling::Mean);
        for i in 0..3 {
            for j in 0..4 {
                assert!(mx.g.at(i, j) >= mn.g.at(i, j));
            }
        }
    }

    #[test]
    fn singleton_context_yields_value_projection_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let attn = AttnParams::<f64>::init(d, &mut rng);
        let x = Mat::uniform(4, d, 1.0, &mut rng);
        let ctx = Mat::uniform(1, d, 1.0, &mut rng);

        let mut t = Tape::new();
        let a = attn.bind(&mut t, "a");
        let xv = t.constant(x);
        let cv = t.constant(ctx.clone());
        let out = mha(&mut t, xv, cv, &a, 2, None, MaskMode::Exclusive);

        let v = linear_plain(&ctx, &attn.wv, &attn.bv);
        let expected = linear_plain(&v, &attn.wo, &attn.bo);
        for i in 0..4 {
            for j in 0..d {
                assert!((t.value(out).at(i, j) - expected.at(0, j)).abs() <= 1e-12);
            }
        }
    }

    fn forward_hidden(
        params: &DecoderParams<f64>,
        ids: &[u32],
        visual: &Mat<f64>,
        graph: GraphCtx<'_, f64>,
        heads: usize,
    ) -> (Mat<f64>, Mat<f64>) {
        let mut t = Tape::new();
        let dec = params.bind(&mut t, "dec");
        let x0 = embed_prefix_tape(&mut t, ids, &dec);
        let vis = t.constant(visual.clone());
        let g = graph_ctx_var(&mut t, graph, &dec);
        let hidden = decode_stack_tape(&mut t, x0, vis, g, &dec, heads);
        let logits = logits_tape(&mut t, hidden, &dec);
        (t.value(hidden).clone(), t.value(logits).clone())
    }

    #[test]
    fn causality_is_exact() {
        let params = decoder(11, 8, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let visual = Mat::uniform(3, 8, 1.0, &mut rng);
        let graph = Mat::uniform(2, 8, 1.0, &mut rng);
        let ids = [BOS, 4, 7, 5, 9];
        let (h_base, l_base) = forward_hidden(&params, &ids, &visual, GraphCtx::Tokens(&graph), 2);
        let mut changed = ids;
        changed[4] = 10;
        changed[3] = 6;
        let (h_alt, l_alt) = forward_hidden(&params, &changed, &visual, GraphCtx::Tokens(&graph), 2);
        for t_pos in 0..3 {
            assert_eq!(h_base.row(t_pos), h_alt.row(t_pos));
            assert_eq!(l_base.row(t_pos), l_alt.row(t_pos));
        }
        assert_ne!(h_base.row(3), h_alt.row(3));
    }

    /// Brute-force one decoder layer with plain loops.
    fn dense_decoder_layer(
        x: &Mat<f64>,
        visual: &Mat<f64>,
        graph: Option<&Mat<f64>>,
        p: &DecoderLayerParams<f64>,
        heads: usize,
    ) -> Mat<f64> {
        let n = x.rows();
        let d = x.cols();
        let dh = d / heads;
        let attn = |q_in: &Mat<f64>,
                    kv: &Mat<f64>,
                    a: &AttnParams<f64>,
                    causal: bool|
         -> Mat<f64> {
            let q = linear_plain(q_in, &a.wq, &a.bq);
            let k = linear_plain(kv, &a.wk, &a.bk);
            let v = linear_plain(kv, &a.wv, &a.bv);
            let m = kv.rows();
            let mut cat = Mat::zeros(n, d);
            for h in 0..heads {
                for i in 0..n {
                    let mut w = vec![f64::NEG_INFINITY; m];
                    for j in 0..m {
                        if causal && j > i {
                            continue;
                        }
                        let mut s = 0.0;
                        for c in 0..dh {
                            s += q.at(i, h * dh + c) * k.at(j, h * dh + c);
                        }
                        w[j] = s / (dh as f64).sqrt();
                    }
                    softmax_row_masked(&mut w, None);
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for j in 0..m {
                            if w[j] > 0.0 {
                                acc += w[j] * v.at(j, h * dh + c);
                            }
                        }
                        *cat.at_mut(i, h * dh + c) = acc;
                    }
                }
            }
            linear_plain(&cat, &a.wo, &a.bo)
        };
        let add = |a: &Mat<f64>, b: &Mat<f64>| -> Mat<f64> {
            Mat::from_fn(a.rows(), a.cols(), |i, j| a.at(i, j) + b.at(i, j))
        };
        let ln = |m: &Mat<f64>, g: &Mat<f64>, b: &Mat<f64>| -> Mat<f64> {
            let mut out = Mat::zeros(m.rows(), m.cols());
            for i in 0..m.rows() {
                let r = ln_affine(m.row(i), g, b);
                out.row_mut(i).copy_from_slice(&r);
            }
            out
        };
        let sa = attn(x, x, &p.self_attn, true);
        let x1 = ln(&add(x, &sa), &p.ln1.gamma, &p.ln1.beta);
        let cv = attn(&x1, visual, &p.cross_vis, false);
        let x2 = ln(&add(&x1, &cv), &p.ln2.gamma, &p.ln2.beta);
        let x3 = match graph {
            Some(g) => {
                let cg = attn(&x2, g, &p.cross_graph, false);
                ln(&add(&x2, &cg), &p.ln3.gamma, &p.ln3.beta)
            }
            None => x2,
        };
        let h = linear_plain(&x3, &p.ffn.w1, &p.ffn.b1).map(crate::mat::gelu);
        let f = linear_plain(&h, &p.ffn.w2, &p.ffn.b2);
        ln(&add(&x3, &f), &p.ln4.gamma, &p.ln4.beta)
    }

    #[test]
    fn decode_stack_matches_dense_oracle() {
        let params = decoder(9, 8, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let visual = Mat::uniform(3, 8, 1.0, &mut rng);
        let graph = Mat::uniform(2, 8, 1.0, &mut rng);
        let ids = [BOS, 3, 6, 2];
        let (hidden, _) = forward_hidden(&params, &ids, &visual, GraphCtx::Tokens(&graph), 2);

        let mut x = Mat::from_fn(4, 8, |i, j| {
            params.tok_emb.at(ids[i] as usize, j) + params.pos_emb.at(i, j)
        });
        for layer in &params.layers {
            x = dense_decoder_layer(&x, &visual, Some(&graph), layer, 2);
        }
        assert!(hidden.max_abs_diff(&x) <= 1e-5);
    }

    #[test]
    fn generation_loss_limit_cases() {
        let v = 7usize;
        let targets = [2u32, 5, 1];
        let mut confident = Mat::<f64>::zeros(3, v);
        for (i, &t) in targets.iter().enumerate() {
            *confident.at_mut(i, t as usize) = 50.0;
        }
        let near_zero: f64 = generation_loss(&confident, &targets).unwrap();
        assert!(near_zero < 1e-6);

        let uniform = Mat::<f64>::zeros(3, v);
        let lnv: f64 = generation_loss(&uniform, &targets).unwrap();
        assert!((lnv - (v as f64).ln()).abs() <= 1e-12);
    }

    #[test]
    fn generation_loss_matches_scalar_oracle_and_skips_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Mat::<f64>::uniform(3, 5, 2.0, &mut rng);
        let targets = [4u32, 0, 2];
        let got: f64 = generation_loss(&logits, &targets).unwrap();

        let mut expected = 0.0;
        let mut n = 0;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt == PAD {
                continue;
            }
            let row = logits.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            expected += lse - row[tgt as usize];
            n += 1;
        }
        expected /= n as f64;
        assert!((got - expected).abs() <= 1e-7);

        let only_active: f64 =
            generation_loss(&Mat::from_fn(2, 5, |i, j| logits.at(i + 1, j)), &[0u32, 2]).unwrap();
        let with_pad_row: f64 = generation_loss(&logits, &[PAD, 0, 2]).unwrap();
        assert!((with_pad_row - only_active).abs() <= 1e-12);
    }

    #[test]
    fn generation_loss_length_mismatch() {
        let logits = Mat::<f64>::zeros(2, 4);
        assert!(matches!(
            generation_loss(&logits, &[1u32, 2, 3]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn max_len_one_yields_bos_plus_argmax() {
        let params = decoder(9, 8, 1, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let visual = Mat::uniform(2, 8, 1.0, &mut rng);
        let out = generate_tokens(&params, 2, &visual, GraphCtx::Null, 1, DecodeMode::Greedy);
        assert_eq!(out.ids.len(), 2);
        assert_eq!(out.ids[0], BOS);

        let (_, logits) = forward_hidden(&params, &[BOS], &visual, GraphCtx::Null, 2);
        assert_eq!(out.ids[1], argmax_row(logits.row(0)));
    }

    #[test]
    fn cached_generation_matches_full_prefix_rollout() {
        let params = decoder(12, 8, 2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let visual = Mat::uniform(3, 8, 1.0, &mut rng);
        let graph = Mat::uniform(2, 8, 1.0, &mut rng);
        let cached = generate_tokens(
            &params,
            2,
            &visual,
            GraphCtx::Tokens(&graph),
            6,
            DecodeMode::Greedy,
        );

        let mut ids = vec![BOS];
        for _ in 0..6 {
            let (_, logits) =
                forward_hidden(&params, &ids, &visual, GraphCtx::Tokens(&graph), 2);
            let next = argmax_row(logits.row(logits.rows() - 1));
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        assert_eq!(cached.ids, ids);

        // And the cached logits agree bitwise with the full-prefix forward.
        let mut state = DecodeState::new(&params, 2, &visual, GraphCtx::Tokens(&graph));
        let step_logits = state.step(BOS);
        let (_, full_logits) = forward_hidden(&params, &[BOS], &visual, GraphCtx::Tokens(&graph), 2);
        assert_eq!(step_logits.row(0), full_logits.row(0));
    }

    #[test]
    fn beam_width_one_equals_greedy() {
        for seed in [30u64, 31, 32] {
            let params = decoder(10, 8, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let visual = Mat::uniform(3, 8, 1.0, &mut rng);
            let greedy =
                generate_tokens(&params, 2, &visual, GraphCtx::Null, 8, DecodeMode::Greedy);
            let beam =
                generate_tokens(&params, 2, &visual, GraphCtx::Null, 8, DecodeMode::Beam(1));
            assert_eq!(greedy.ids, beam.ids);
        }
    }

    #[test]
    fn disabled_graph_context_leaves_graph_attention_untouched() {
        let params = decoder(9, 8, 1, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let visual = Mat::uniform(2, 8, 1.0, &mut rng);

        let mut t = Tape::<f64>::new();
        let dec = params.bind(&mut t, "dec");
        let x0 = embed_prefix_tape(&mut t, &[BOS, 3, 5], &dec);
        let vis = t.constant(visual.clone());
        let hidden = decode_stack_tape(&mut t, x0, vis, None, &dec, 2);
        let loss = t.sum_all(hidden);
        let grads = t.backward(loss);
        let named = t.param_grads(&grads);
        let zero_norm = |name: &str| -> f64 {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, g)| g.data().iter().map(|x| x.abs()).sum())
                .unwrap()
        };
        assert_eq!(zero_norm("dec.layer0.cross_graph.wq"), 0.0);
        assert_eq!(zero_norm("dec.layer0.ln3.gamma"), 0.0);
        assert_eq!(zero_norm("dec.null_token"), 0.0);
        assert!(zero_norm("dec.layer0.self_attn.wq") > 0.0);
        assert!(zero_norm("dec.layer0.cross_vis.wq") > 0.0);
    }

    #[test]
    fn decode_stack_gradients_match_finite_differences() {
        let params = decoder(7, 8, 1, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let visual = Mat::uniform(2, 8, 1.0, &mut rng);
        let graph = Mat::uniform(2, 8, 1.0, &mut rng);
        let ids = [BOS, 2, 4];
        let targets = [2u32, 4, EOS];

        let forward = |p: &DecoderParams<f64>| -> f64 {
            let mut t = Tape::new();
            let dec = p.bind(&mut t, "dec");
            let x0 = embed_prefix_tape(&mut t, &ids, &dec);
            let vis = t.constant(visual.clone());
            let g = t.constant(graph.clone());
            let hidden = decode_stack_tape(&mut t, x0, vis, Some(g), &dec, 2);
            let logits = logits_tape(&mut t, hidden, &dec);
            let loss = t.cross_entropy_rows(
                logits,
                targets.iter().map(|&x| x as usize).collect(),
                vec![true; 3],
            );
            t.value(loss).item()
        };

        let mut t = Tape::new();
        let dec = params.bind(&mut t, "dec");
        let x0 = embed_prefix_tape(&mut t, &ids, &dec);
        let vis = t.constant(visual.clone());
        let g = t.constant(graph.clone());
        let hidden = decode_stack_tape(&mut t, x0, vis, Some(g), &dec, 2);
        let logits = logits_tape(&mut t, hidden, &dec);
        let loss = t.cross_entropy_rows(
            logits,
            targets.iter().map(|&x| x as usize).collect(),
            vec![true; 3],
        );
        let grads = t.backward(loss);
        let named = t.param_grads(&grads);

        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let eps = 1e-5;
        for (name, gmat) in &named {
            if gmat.len() == 0 {
                continue;
            }
            let idx = rng.gen::<usize>() % gmat.len();
            let analytic = gmat.data()[idx];
            let mut plus = params.clone();
            let mut minus = params.clone();
            let bump = |p: &mut DecoderParams<f64>, delta: f64| {
                p.visit_mut("dec", &mut |n: &str, m: &mut Mat<f64>| {
                    if n == name {
                        m.data_mut()[idx] += delta;
                    }
                });
            };
            bump(&mut plus, eps);
            bump(&mut minus, -eps);
            let fd = (forward(&plus) - forward(&minus)) / (2.0 * eps);
            if analytic.abs().max(fd.abs()) < 1e-7 {
                continue;
            }
            assert!(
                (analytic - fd).abs() / analytic.abs().max(fd.abs()) <= 1e-4,
                "param {name}[{idx}]: analytic {analytic}, fd {fd}"
            );
        }
    }
}
