//! Scene-graph construction head: memory-aided anatomical-location selection
//! and per-category attribute prediction. At training time the same heads
//! produce logits for the region-selection and attribute-prediction losses;
//! at inference they gate detected boxes into a graph.

use rand::Rng;

use crate::attn::{ffn_plain, linear_plain, FfnParams, ParamVisitor, ParamVisitorMut};
use crate::backbone::{global_pool, roi_pool, PatchFeatures};
use crate::error::{Error, Result};
use crate::mat::{matmul, sigmoid, Mat};
use crate::scalar::Scalar;
use crate::scene_graph::{dedupe_detections, Detection, SceneGraph};
use crate::tape::{Tape, Var};
use crate::vocab::AttributeVocab;

/// Learnable memory: slot matrix plus the query/key/response projections,
/// the global-feature projection into memory space, and the fusion layer.
#[derive(Debug, Clone)]
pub struct MemoryParams<S> {
    /// N_p x d slot matrix.
    pub slots: Mat<S>,
    /// d x d query projection applied to the projected global feature.
    pub wq: Mat<S>,
    /// d x d key projection applied to each slot.
    pub wp: Mat<S>,
    /// d x d response projection applied to each selected slot.
    pub wr: Mat<S>,
    /// C x d projection of the pooled visual feature into memory space.
    pub wg: Mat<S>,
    /// 2d x d fusion weight over [projected global, response].
    pub fuse_w: Mat<S>,
    /// 1 x d fusion bias.
    pub fuse_b: Mat<S>,
}

impl<S: Scalar> MemoryParams<S> {
    pub fn init(n_slots: usize, d: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            slots: Mat::glorot(n_slots, d, rng),
            wq: Mat::glorot(d, d, rng),
            wp: Mat::glorot(d, d, rng),
            wr: Mat::glorot(d, d, rng),
            wg: Mat::glorot(channels, d, rng),
            fuse_w: Mat::glorot(2 * d, d, rng),
            fuse_b: Mat::zeros(1, d),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.slots"), &self.slots);
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wp"), &self.wp);
        f(&format!("{prefix}.wr"), &self.wr);
        f(&format!("{prefix}.wg"), &self.wg);
        f(&format!("{prefix}.fuse_w"), &self.fuse_w);
        f(&format!("{prefix}.fuse_b"), &self.fuse_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.slots"), &mut self.slots);
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wp"), &mut self.wp);
        f(&format!("{prefix}.wr"), &mut self.wr);
        f(&format!("{prefix}.wg"), &mut self.wg);
        f(&format!("{prefix}.fuse_w"), &mut self.fuse_w);
        f(&format!("{prefix}.fuse_b"), &mut self.fuse_b);
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundMemory {
        BoundMemory {
            slots: t.param(&format!("{prefix}.slots"), &self.slots),
            wq: t.param(&format!("{prefix}.wq"), &self.wq),
            wp: t.param(&format!("{prefix}.wp"), &self.wp),
            wr: t.param(&format!("{prefix}.wr"), &self.wr),
            wg: t.param(&format!("{prefix}.wg"), &self.wg),
            fuse_w: t.param(&format!("{prefix}.fuse_w"), &self.fuse_w),
            fuse_b: t.param(&format!("{prefix}.fuse_b"), &self.fuse_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundMemory {
    pub slots: Var,
    pub wq: Var,
    pub wp: Var,
    pub wr: Var,
    pub wg: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// Region-selector sigmoid outputs and the thresholded decision vector.
#[derive(Debug, Clone)]
pub struct SelectorOutput {
    pub probs: Vec<f64>,
    pub selected: Vec<bool>,
}

impl SelectorOutput {
    pub fn selected_categories(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Shared feed-forward plus one classification head per anatomical category.
/// Head `k` has one column per attribute in category `k`'s vocabulary.
#[derive(Debug, Clone)]
pub struct AttributeHeads<S> {
    pub ff: FfnParams<S>,
    pub heads: Vec<Mat<S>>,
}

impl<S: Scalar> AttributeHeads<S> {
    pub fn init(d: usize, hidden: usize, sizes: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            ff: FfnParams::init(d, hidden, rng),
            heads: sizes.iter().map(|&n| Mat::glorot(d, n, rng)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        self.ff.visit(&format!("{prefix}.ff"), f);
        for (k, h) in self.heads.iter().enumerate() {
            f(&format!("{prefix}.head{k}"), h);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
        for (k, h) in self.heads.iter_mut().enumerate() {
            f(&format!("{prefix}.head{k}"), h);
        }
    }
}

/// Everything the graph-construction head owns: the memory block, the two
/// selector heads (one over the fused feature, one over the raw pooled
/// feature for the memory-less path), and the attribute heads.
#[derive(Debug, Clone)]
pub struct GraphBuilderParams<S> {
    pub mem: MemoryParams<S>,
    /// d x N_c selector head over the fused global feature.
    pub sel_mem_w: Mat<S>,
    pub sel_mem_b: Mat<S>,
    /// C x N_c selector head over the raw pooled feature.
    pub sel_raw_w: Mat<S>,
    pub sel_raw_b: Mat<S>,
    pub attrs: AttributeHeads<S>,
}

impl<S: Scalar> GraphBuilderParams<S> {
    pub fn init(
        n_slots: usize,
        d: usize,
        channels: usize,
        n_categories: usize,
        width: usize,
        ffn_hidden: usize,
        attr_sizes: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mem: MemoryParams::init(n_slots, d, channels, rng),
            sel_mem_w: Mat::glorot(d, n_categories, rng),
            sel_mem_b: Mat::zeros(1, n_categories),
            sel_raw_w: Mat::glorot(channels, n_categories, rng),
            sel_raw_b: Mat::zeros(1, n_categories),
            attrs: AttributeHeads::init(width, ffn_hidden, attr_sizes, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        self.mem.visit(&format!("{prefix}.mem"), f);
        f(&format!("{prefix}.sel_mem_w"), &self.sel_mem_w);
        f(&format!("{prefix}.sel_mem_b"), &self.sel_mem_b);
        f(&format!("{prefix}.sel_raw_w"), &self.sel_raw_w);
        f(&format!("{prefix}.sel_raw_b"), &self.sel_raw_b);
        self.attrs.visit(&format!("{prefix}.attrs"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        self.mem.visit_mut(&format!("{prefix}.mem"), f);
        f(&format!("{prefix}.sel_mem_w"), &mut self.sel_mem_w);
        f(&format!("{prefix}.sel_mem_b"), &mut self.sel_mem_b);
        f(&format!("{prefix}.sel_raw_w"), &mut self.sel_raw_w);
        f(&format!("{prefix}.sel_raw_b"), &mut self.sel_raw_b);
        self.attrs.visit_mut(&format!("{prefix}.attrs"), f);
    }
}

/// Picks the top-`gamma` slot indices by similarity, ties going to the lower
/// slot index. Returned indices are in ascending slot order.
pub fn top_gamma(similarities: &[f64], gamma: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..similarities.len()).collect();
    idx.sort_by(|&a, &b| {
        similarities[b]
            .partial_cmp(&similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(gamma);
    idx.sort_unstable();
    idx
}

/// Memory read on the tape: project the pooled feature, score every slot,
/// keep the top-gamma, softmax their scores, and average the response
/// projections of the kept slots. Input is the already-projected 1 x d
/// global feature; returns the 1 x d response.
pub fn memory_response_tape<S: Scalar>(
    t: &mut Tape<S>,
    v_g_proj: Var,
    mem: &BoundMemory,
    gamma: usize,
) -> Result<Var> {
    let (n_slots, d) = t.value(mem.slots).shape();
    if gamma == 0 || gamma > n_slots {
        return Err(Error::GammaOutOfRange {
            gamma,
            slots: n_slots,
        });
    }
    let q = t.matmul(v_g_proj, mem.wq);
    let keys = t.matmul(mem.slots, mem.wp);
    let scores = t.matmul_tb(q, keys);
    let scale = S::of(1.0 / (d as f64).sqrt());
    let u = t.scale(scores, scale);
    let u_row: Vec<f64> = t.value(u).row(0).iter().map(|x| x.f64()).collect();
    let sel = top_gamma(&u_row, gamma);
    let u_sel = t.gather_cols(u, sel.clone());
    let w = t.softmax_rows(u_sel, None);
    let chosen = t.gather_rows(mem.slots, sel);
    let responses = t.matmul(chosen, mem.wr);
    let mixed = t.matmul(w, responses);
    Ok(t.scale(mixed, S::of(1.0 / gamma as f64)))
}

/// Fusion on the tape: GELU(Linear([v'_g, r])), with inverted dropout applied
/// only when a mask is supplied.
pub fn fuse_response_tape<S: Scalar>(
    t: &mut Tape<S>,
    v_g_proj: Var,
    response: Var,
    mem: &BoundMemory,
    dropout_mask: Option<Mat<S>>,
) -> Var {
    let cat = t.concat_cols(&[v_g_proj, response]);
    let pre = linear_plain_tape(t, cat, mem.fuse_w, mem.fuse_b);
    let act = t.gelu(pre);
    match dropout_mask {
        Some(m) => t.mul_const(act, m),
        None => act,
    }
}

fn linear_plain_tape<S: Scalar>(t: &mut Tape<S>, x: Var, w: Var, b: Var) -> Var {
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

/// Inference-mode memory read: pooled C-vector in, d-vector response out.
pub fn memory_query_response<S: Scalar>(
    v_g: &Mat<S>,
    mem: &MemoryParams<S>,
    gamma: usize,
) -> Result<Mat<S>> {
    let v_g_proj = matmul(v_g, &mem.wg);
    memory_response_from_proj(&v_g_proj, mem, gamma)
}

/// Memory read given the already-projected global feature.
pub fn memory_response_from_proj<S: Scalar>(
    v_g_proj: &Mat<S>,
    mem: &MemoryParams<S>,
    gamma: usize,
) -> Result<Mat<S>> {
    let mut t = Tape::new();
    let bound = mem.bind(&mut t, "mem");
    let vp = t.constant(v_g_proj.clone());
    let r = memory_response_tape(&mut t, vp, &bound, gamma)?;
    Ok(t.value(r).clone())
}

/// Inference-mode fusion: dropout is off.
pub fn fuse_response<S: Scalar>(
    v_g_proj: &Mat<S>,
    response: &Mat<S>,
    mem: &MemoryParams<S>,
) -> Mat<S> {
    let mut cat = Mat::zeros(1, v_g_proj.cols() + response.cols());
    cat.row_mut(0)[..v_g_proj.cols()].copy_from_slice(v_g_proj.row(0));
    cat.row_mut(0)[v_g_proj.cols()..].copy_from_slice(response.row(0));
    let pre = linear_plain(&cat, &mem.fuse_w, &mem.fuse_b);
    pre.map(crate::mat::gelu)
}

/// Thresholds selector logits: selected iff sigmoid strictly exceeds alpha.
pub fn select_regions<S: Scalar>(
    v_star: &Mat<S>,
    w: &Mat<S>,
    b: &Mat<S>,
    alpha: f64,
) -> SelectorOutput {
    let logits = linear_plain(v_star, w, b);
    let probs: Vec<f64> = logits.row(0).iter().map(|&x| sigmoid(x).f64()).collect();
    let selected = probs.iter().map(|&p| p > alpha).collect();
    SelectorOutput { probs, selected }
}

/// Per-attribute sigmoid outputs and thresholded decisions for one object
/// embedding, using category `k`'s head.
#[derive(Debug, Clone)]
pub struct AttributePrediction {
    pub probs: Vec<f64>,
    pub selected: Vec<bool>,
}

/// Runs the shared feed-forward then category `k`'s head; selected iff
/// sigmoid strictly exceeds beta.
pub fn predict_attributes<S: Scalar>(
    obj_emb: &Mat<S>,
    k: usize,
    heads: &AttributeHeads<S>,
    beta: f64,
) -> Result<AttributePrediction> {
    if k >= heads.heads.len() {
        return Err(Error::UnknownCategory {
            category: k,
            known: heads.heads.len(),
        });
    }
    let refined = ffn_plain(obj_emb, &heads.ff);
    let logits = matmul(&refined, &heads.heads[k]);
    let probs: Vec<f64> = logits.row(0).iter().map(|&x| sigmoid(x).f64()).collect();
    let selected = probs.iter().map(|&p| p > beta).collect();
    Ok(AttributePrediction { probs, selected })
}

/// Knobs for inference-time graph construction.
#[derive(Debug, Clone, Copy)]
pub struct BuilderCfg {
    pub use_memory: bool,
    pub gamma: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// Builds the inference scene graph: run the selector on the pooled visual
/// feature, keep detected boxes whose category was selected (deduped to one
/// instance per category), embed each kept box, and attach the attributes
/// whose head output clears beta. An empty result is a valid state, not an
/// error.
pub fn build_inference_graph<S: Scalar>(
    v: &PatchFeatures<S>,
    detections: &[Detection],
    params: &GraphBuilderParams<S>,
    obj_ff: &FfnParams<S>,
    vocab: &AttributeVocab,
    cfg: &BuilderCfg,
) -> Result<SceneGraph> {
    let v_g = global_pool(v);
    let selector = if cfg.use_memory {
        let v_g_proj = matmul(&v_g, &params.mem.wg);
        let r = memory_response_from_proj(&v_g_proj, &params.mem, cfg.gamma)?;
        let v_star = fuse_response(&v_g_proj, &r, &params.mem);
        select_regions(&v_star, &params.sel_mem_w, &params.sel_mem_b, cfg.alpha)
    } else {
        select_regions(&v_g, &params.sel_raw_w, &params.sel_raw_b, cfg.alpha)
    };

    let mut graph = SceneGraph {
        objects: Vec::new(),
        attributes: Vec::new(),
    };
    for det in dedupe_detections(detections) {
        if det.category >= selector.selected.len() || !selector.selected[det.category] {
            continue;
        }
        let pooled = roi_pool(v, std::slice::from_ref(&det.bbox))?;
        let obj_emb = ffn_plain(&pooled, obj_ff);
        let pred = predict_attributes(&obj_emb, det.category, &params.attrs, cfg.beta)?;
        let owner = graph.objects.len();
        graph.objects.push(crate::scene_graph::ObjectNode {
            category: det.category,
            bbox: det.bbox,
        });
        for (slot, &on) in pred.selected.iter().enumerate() {
            if !on {
                continue;
            }
            let s = vocab.slot_string(det.category, slot);
            if let Some(attr) = crate::scene_graph::AttributeNode::parse_serialized(s, owner) {
                graph.attributes.push(attr);
            }
        }
    }
    Ok(graph)
}
