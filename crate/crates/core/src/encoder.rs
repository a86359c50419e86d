//! Scene-graph encoder: object and attribute nodes become a token sequence
//! carrying token-type and anatomy embeddings, then a transformer stack whose
//! attention is restricted to the graph's adjacency produces the enriched
//! node embeddings fed to the decoder.

use rand::Rng;

use crate::attn::{
    encoder_layer, ffn_forward, BoundEncoderLayer, BoundFfn, BoundLayerNorm, EncoderLayerParams,
    FfnParams, LayerNormParams, MaskMode, ParamVisitor, ParamVisitorMut,
};
use crate::backbone::{roi_cells, PatchFeatures};
use crate::error::Result;
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::scene_graph::{build_adjacency_mask, token_order, AdjacencyMask, SceneGraph, TokenRef};
use crate::tape::{Tape, Var};
use crate::vocab::AttributeVocab;

/// Parameters of the scene-graph encoder: the attribute embedding table with
/// its norm, the token-type embeddings (shared attribute `e_a`, shared object
/// `e_o` for the no-anatomy path), per-category anatomy embeddings, the
/// object feed-forward over pooled region features, and the transformer
/// stack.
#[derive(Debug, Clone)]
pub struct SgEncoderParams<S> {
    pub attr_table: Mat<S>,
    pub attr_ln: LayerNormParams<S>,
    pub e_a: Mat<S>,
    pub e_o: Mat<S>,
    pub anatomy: Mat<S>,
    pub obj_ff: FfnParams<S>,
    pub layers: Vec<EncoderLayerParams<S>>,
}

impl<S: Scalar> SgEncoderParams<S> {
    pub fn init(
        attr_vocab: usize,
        n_categories: usize,
        channels: usize,
        width: usize,
        ffn_hidden: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            attr_table: Mat::glorot(attr_vocab, width, rng),
            attr_ln: LayerNormParams::init(width),
            e_a: Mat::uniform(1, width, 0.02, rng),
            e_o: Mat::uniform(1, width, 0.02, rng),
            anatomy: Mat::uniform(n_categories, width, 0.02, rng),
            obj_ff: FfnParams::init_io(channels, ffn_hidden, width, rng),
            layers: (0..n_layers)
                .map(|_| EncoderLayerParams::init(width, ffn_hidden, rng))
                .collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<S>) {
        f(&format!("{prefix}.attr_table"), &self.attr_table);
        self.attr_ln.visit(&format!("{prefix}.attr_ln"), f);
        f(&format!("{prefix}.e_a"), &self.e_a);
        f(&format!("{prefix}.e_o"), &self.e_o);
        f(&format!("{prefix}.anatomy"), &self.anatomy);
        self.obj_ff.visit(&format!("{prefix}.obj_ff"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<S>) {
        f(&format!("{prefix}.attr_table"), &mut self.attr_table);
        self.attr_ln.visit_mut(&format!("{prefix}.attr_ln"), f);
        f(&format!("{prefix}.e_a"), &mut self.e_a);
        f(&format!("{prefix}.e_o"), &mut self.e_o);
        f(&format!("{prefix}.anatomy"), &mut self.anatomy);
        self.obj_ff.visit_mut(&format!("{prefix}.obj_ff"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn bind(&self, t: &mut Tape<S>, prefix: &str) -> BoundSgEncoder {
        BoundSgEncoder {
            attr_table: t.param(&format!("{prefix}.attr_table"), &self.attr_table),
            attr_ln: self.attr_ln.bind(t, &format!("{prefix}.attr_ln")),
            e_a: t.param(&format!("{prefix}.e_a"), &self.e_a),
            e_o: t.param(&format!("{prefix}.e_o"), &self.e_o),
            anatomy: t.param(&format!("{prefix}.anatomy"), &self.anatomy),
            obj_ff: self.obj_ff.bind(t, &format!("{prefix}.obj_ff")),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(t, &format!("{prefix}.layer{i}")))
                .collect(),
        }
    }
}

#[derive(Clone)]
pub struct BoundSgEncoder {
    pub attr_table: Var,
    pub attr_ln: BoundLayerNorm,
    pub e_a: Var,
    pub e_o: Var,
    pub anatomy: Var,
    pub obj_ff: BoundFfn,
    pub layers: Vec<BoundEncoderLayer>,
}

/// Assembled node tokens plus everything needed to attend over them.
#[derive(Debug, Clone)]
pub struct NodeTokenSequence<S> {
    pub tokens: Mat<S>,
    pub mask: AdjacencyMask,
    pub kinds: Vec<TokenRef>,
    pub anatomy_ids: Vec<Option<usize>>,
}

/// Per-box mean-pool groups over the patch grid.
pub fn roi_groups<S: Scalar>(v: &PatchFeatures<S>, graph: &SceneGraph) -> Result<Vec<Vec<usize>>> {
    graph
        .objects
        .iter()
        .map(|o| roi_cells(v.h, v.w, &o.bbox))
        .collect()
}

/// Mean-pools each object's box over the patch features and applies the
/// object feed-forward; differentiable into the patch features.
pub fn embed_objects_tape<S: Scalar>(
    t: &mut Tape<S>,
    feats: Var,
    groups: Vec<Vec<usize>>,
    obj_ff: &BoundFfn,
) -> Var {
    let pooled = t.mean_groups(feats, groups);
    ffn_forward(t, pooled, obj_ff)
}

/// Looks up each attribute's global id (UNK when unseen), embeds, norms,
/// and applies the dropout mask when given.
pub fn embed_attributes_tape<S: Scalar>(
    t: &mut Tape<S>,
    graph: &SceneGraph,
    vocab: &AttributeVocab,
    enc: &BoundSgEncoder,
    dropout_mask: Option<Mat<S>>,
) -> Var {
    let ids: Vec<usize> = graph
        .attributes
        .iter()
        .map(|a| vocab.global_id(&a.serialized()) as usize)
        .collect();
    let rows = t.gather_rows(enc.attr_table, ids);
    let normed = t.layer_norm(rows, enc.attr_ln.gamma, enc.attr_ln.beta);
    match dropout_mask {
        Some(m) => t.mul_const(normed, m),
        None => normed,
    }
}

/// Adds token-type information and orders tokens as objects first, then
/// attributes grouped by owner. With `use_anatomy` each object token gets its
/// category's embedding; otherwise all object tokens share `e_o`.
pub fn assemble_tokens_tape<S: Scalar>(
    t: &mut Tape<S>,
    obj_emb: Var,
    attr_emb: Var,
    graph: &SceneGraph,
    enc: &BoundSgEncoder,
    use_anatomy: bool,
) -> Result<(Var, AdjacencyMask)> {
    let obj_tokens = if use_anatomy {
        let cats: Vec<usize> = graph.objects.iter().map(|o| o.category).collect();
        let anat = t.gather_rows(enc.anatomy, cats);
        t.add(obj_emb, anat)
    } else {
        t.add_row(obj_emb, enc.e_o)
    };
    let mask = build_adjacency_mask(graph)?;
    if graph.attributes.is_empty() {
        return Ok((obj_tokens, mask));
    }
    let typed_attrs = t.add_row(attr_emb, enc.e_a);
    let perm: Vec<usize> = token_order(graph)
        .into_iter()
        .filter_map(|r| match r {
            TokenRef::Attribute(j) => Some(j),
            TokenRef::Object(_) => None,
        })
        .collect();
    let ordered = t.gather_rows(typed_attrs, perm);
    let tokens = t.concat_rows(&[obj_tokens, ordered]);
    Ok((tokens, mask))
}

/// Runs the adjacency-masked transformer stack.
pub fn encode_scene_graph_tape<S: Scalar>(
    t: &mut Tape<S>,
    tokens: Var,
    mask: &AdjacencyMask,
    enc: &BoundSgEncoder,
    heads: usize,
    mode: MaskMode,
) -> Var {
    let allowed = mask.flat();
    let mut x = tokens;
    for layer in &enc.layers {
        x = encoder_layer(
            t,
            x,
            &layer.attn,
            &layer.ln1,
            &layer.ffn,
            &layer.ln2,
            heads,
            Some(allowed),
            mode,
        );
    }
    x
}

/// Full inference-mode pass from features and a graph to the encoded node
/// embeddings, in token order.
pub fn encode_graph<S: Scalar>(
    v: &PatchFeatures<S>,
    graph: &SceneGraph,
    vocab: &AttributeVocab,
    params: &SgEncoderParams<S>,
    heads: usize,
    mode: MaskMode,
    use_anatomy: bool,
) -> Result<Mat<S>> {
    let mut t = Tape::new();
    let enc = params.bind(&mut t, "sg");
    let feats = t.constant(v.feats.clone());
    let groups = roi_groups(v, graph)?;
    let obj = embed_objects_tape(&mut t, feats, groups, &enc.obj_ff);
    let attr = embed_attributes_tape(&mut t, graph, vocab, &enc, None);
    let (tokens, mask) = assemble_tokens_tape(&mut t, obj, attr, graph, &enc, use_anatomy)?;
    let out = encode_scene_graph_tape(&mut t, tokens, &mask, &enc, heads, mode);
    Ok(t.value(out).clone())
}

/// Inference-mode object embeddings for a graph's boxes.
pub fn embed_objects<S: Scalar>(
    v: &PatchFeatures<S>,
    graph: &SceneGraph,
    params: &SgEncoderParams<S>,
) -> Result<Mat<S>> {
    let mut t = Tape::new();
    let ff = params.obj_ff.bind(&mut t, "obj_ff");
    let feats = t.constant(v.feats.clone());
    let groups = roi_groups(v, graph)?;
    let out = embed_objects_tape(&mut t, feats, groups, &ff);
    Ok(t.value(out).clone())
}

/// Inference-mode attribute embeddings (dropout off), in attribute order.
pub fn embed_attributes<S: Scalar>(
    graph: &SceneGraph,
    vocab: &AttributeVocab,
    params: &SgEncoderParams<S>,
) -> Mat<S> {
    let mut t = Tape::new();
    let enc = params.bind(&mut t, "sg");
    let out = embed_attributes_tape(&mut t, graph, vocab, &enc, None);
    t.value(out).clone()
}

/// Inference-mode token assembly.
pub fn assemble_node_tokens<S: Scalar>(
    obj_emb: &Mat<S>,
    attr_emb: &Mat<S>,
    graph: &SceneGraph,
    params: &SgEncoderParams<S>,
    use_anatomy: bool,
) -> Result<NodeTokenSequence<S>> {
    let mut t = Tape::new();
    let enc = params.bind(&mut t, "sg");
    let obj = t.constant(obj_emb.clone());
    let attr = t.constant(attr_emb.clone());
    let (tokens, mask) = assemble_tokens_tape(&mut t, obj, attr, graph, &enc, use_anatomy)?;
    let kinds = token_order(graph);
    let anatomy_ids = kinds
        .iter()
        .map(|r| match r {
            TokenRef::Object(i) => Some(graph.objects[*i].category),
            TokenRef::Attribute(_) => None,
        })
        .collect();
    Ok(NodeTokenSequence {
        tokens: t.value(tokens).clone(),
        mask,
        kinds,
        anatomy_ids,
    })
}

/// Inference-mode encoder stack over an assembled sequence.
pub fn encode_scene_graph<S: Scalar>(
    seq: &NodeTokenSequence<S>,
    params: &SgEncoderParams<S>,
    heads: usize,
    mode: MaskMode,
) -> Mat<S> {
    let mut t = Tape::new();
    let enc = params.bind(&mut t, "sg");
    let tokens = t.constant(seq.tokens.clone());
    let out = encode_scene_graph_tape(&mut t, tokens, &seq.mask, &enc, heads, mode);
    t.value(out).clone()
}
