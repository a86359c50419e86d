//! Full-model assembly: every stage's parameters under one namespace, the
//! multi-task training step on a single tape, and the image-to-report
//! inference path. Training teacher-forces the labeled scene graph; inference
//! builds the graph from the selector and attribute heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::abnormal::{disease_recognition_loss_tape, nas_contrastive_loss_tape, DiseaseHead};
use crate::attn::{ffn_forward, ffn_plain, linear, BoundFfn, ParamVisitor, ParamVisitorMut};
use crate::backbone::{
    bind_backbone, encode_visual, extract_patch_features, global_pool, patch_features_tape,
    patchify, roi_cells, roi_pool, visual_tokens_tape, BackboneParams, Image,
};
use crate::builder::{
    build_inference_graph, fuse_response, fuse_response_tape, memory_response_from_proj,
    memory_response_tape, predict_attributes, select_regions, AttributePrediction, BoundMemory,
    BuilderCfg, GraphBuilderParams, SelectorOutput,
};
use crate::config::TrainingConfig;
use crate::data::{Sample, VocabBundle};
use crate::decoder::{
    decode_stack_tape, embed_prefix_tape, generate_tokens, logits_tape, summarize_subgraphs,
    summarize_subgraphs_tape, DecoderParams, GraphCtx, ReportTokens,
};
use crate::encoder::{
    assemble_tokens_tape, embed_attributes_tape, embed_objects_tape, encode_graph,
    encode_scene_graph_tape, SgEncoderParams,
};
use crate::error::Result;
use crate::mat::{matmul, Mat};
use crate::scalar::Scalar;
use crate::scene_graph::{
    subgraph_labels, subgraph_token_groups, BBox, Detection, SceneGraph,
};
use crate::tape::{Tape, Var};
use crate::vocab::EOS;

/// All learnable state. The prefixes used by [`ModelParams::visit`] are the
/// canonical parameter names shared by the optimizer and checkpoints.
#[derive(Debug, Clone)]
pub struct ModelParams<S> {
    pub backbone: BackboneParams<S>,
    pub builder: GraphBuilderParams<S>,
    pub encoder: SgEncoderParams<S>,
    pub decoder: DecoderParams<S>,
    pub disease: DiseaseHead<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(cfg: &TrainingConfig, vocab: &VocabBundle, rng: &mut impl Rng) -> Self {
        let attr_sizes: Vec<usize> = (0..vocab.attributes.n_categories())
            .map(|k| vocab.attributes.n_attrs(k))
            .collect();
        let grid = cfg.canvas / cfg.patch;
        ModelParams {
            backbone: BackboneParams::init(
                cfg.patch,
                1,
                cfg.channels,
                cfg.width,
                cfg.ffn_hidden,
                cfg.layers,
                cfg.heads,
                grid * grid,
                true,
                rng,
            ),
            builder: GraphBuilderParams::init(
                cfg.memory_slots,
                cfg.memory_dim,
                cfg.channels,
                cfg.n_categories,
                cfg.width,
                cfg.ffn_hidden,
                &attr_sizes,
                rng,
            ),
            encoder: SgEncoderParams::init(
                vocab.attributes.total(),
                cfg.n_categories,
                cfg.channels,
                cfg.width,
                cfg.ffn_hidden,
                cfg.layers,
                rng,
            ),
            decoder: DecoderParams::init(
                vocab.tokens.len(),
                cfg.max_len,
                cfg.width,
                cfg.ffn_hidden,
                cfg.layers,
                rng,
            ),
            disease: DiseaseHead::init(cfg.channels, rng),
        }
    }

    pub fn visit(&self, f: &mut ParamVisitor<S>) {
        self.backbone.visit("backbone", f);
        self.builder.visit("builder", f);
        self.encoder.visit("sg", f);
        self.decoder.visit("dec", f);
        self.disease.visit("disease", f);
    }

    pub fn visit_mut(&mut self, f: &mut ParamVisitorMut<S>) {
        self.backbone.visit_mut("backbone", f);
        self.builder.visit_mut("builder", f);
        self.encoder.visit_mut("sg", f);
        self.decoder.visit_mut("dec", f);
        self.disease.visit_mut("disease", f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }
}

/// Scalar value of each loss component for one batch, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub gen: f64,
    pub rs: f64,
    pub ap: f64,
    pub dr: f64,
    pub con: f64,
}

/// One optimization step's forward results: component losses and the gradient
/// of the weighted objective for every parameter (zero-filled where a
/// component is disabled).
pub struct TrainOutput<S> {
    pub losses: LossValues,
    pub grads: Vec<(String, Mat<S>)>,
}

struct BoundBuilder {
    mem: BoundMemory,
    sel_mem_w: Var,
    sel_mem_b: Var,
    sel_raw_w: Var,
    sel_raw_b: Var,
    attr_ff: BoundFfn,
    attr_heads: Vec<Var>,
}

fn bind_builder<S: Scalar>(
    t: &mut Tape<S>,
    p: &GraphBuilderParams<S>,
    prefix: &str,
) -> BoundBuilder {
    BoundBuilder {
        mem: p.mem.bind(t, &format!("{prefix}.mem")),
        sel_mem_w: t.param(&format!("{prefix}.sel_mem_w"), &p.sel_mem_w),
        sel_mem_b: t.param(&format!("{prefix}.sel_mem_b"), &p.sel_mem_b),
        sel_raw_w: t.param(&format!("{prefix}.sel_raw_w"), &p.sel_raw_w),
        sel_raw_b: t.param(&format!("{prefix}.sel_raw_b"), &p.sel_raw_b),
        attr_ff: p.attrs.ff.bind(t, &format!("{prefix}.attrs.ff")),
        attr_heads: p
            .attrs
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| t.param(&format!("{prefix}.attrs.head{k}"), h))
            .collect(),
    }
}

/// Inverted-dropout mask: kept entries carry 1/(1-p).
fn dropout_mask<S: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Mat<S> {
    let keep = 1.0 - p;
    let inv = S::of(1.0 / keep);
    Mat::from_fn(rows, cols, |_, _| {
        if rng.gen::<f64>() < keep {
            inv
        } else {
            S::zero()
        }
    })
}

fn mean_of<S: Scalar>(t: &mut Tape<S>, terms: &[Var]) -> Var {
    match terms.len() {
        0 => t.constant(Mat::scalar(S::zero())),
        1 => terms[0],
        _ => {
            let cat = t.concat_cols(terms);
            t.mean_all(cat)
        }
    }
}

/// One batch's forward and backward pass. Everything runs on a single tape so
/// every loss component backpropagates into the shared backbone. The labeled
/// scene graph stands in for the predicted one (teacher forcing); `rng` only
/// feeds the dropout masks.
pub fn training_step<S: Scalar>(
    model: &ModelParams<S>,
    batch: &[&Sample<S>],
    vocab: &VocabBundle,
    cfg: &TrainingConfig,
    rng: &mut impl Rng,
) -> Result<TrainOutput<S>> {
    assert!(!batch.is_empty(), "training_step with an empty batch");
    let mut t = Tape::new();
    let mut binder = |name: &str, m: &Mat<S>| {
        t.param(name, m);
    };
    model.visit(&mut binder);

    let bb = bind_backbone(&mut t, &model.backbone, "backbone");
    let builder = bind_builder(&mut t, &model.builder, "builder");
    let enc = model.encoder.bind(&mut t, "sg");
    let dec = model.decoder.bind(&mut t, "dec");
    let disease_w = t.param("disease.w", &model.disease.w);
    let disease_b = t.param("disease.b", &model.disease.b);

    let n_categories = builder.attr_heads.len();
    let mut gen_terms = Vec::with_capacity(batch.len());
    let mut rs_terms = Vec::new();
    let mut ap_terms = Vec::new();
    let mut dr_terms = Vec::new();
    let mut con_parts: Vec<Vec<Var>> = vec![Vec::new(); n_categories];
    let mut con_labels: Vec<Vec<u8>> = vec![Vec::new(); n_categories];

    for sample in batch {
        assert!(
            sample.image.h > 0 && sample.image.w > 0,
            "sample {} has no pixels to train on",
            sample.image_id
        );
        let pixels = t.constant(patchify(&sample.image, cfg.patch)?);
        let feats = patch_features_tape(&mut t, &bb, pixels);
        let visual = visual_tokens_tape(&mut t, &model.backbone, &bb, feats);
        let n_cells = t.value(feats).rows();
        let v_g = t.mean_groups(feats, vec![(0..n_cells).collect()]);

        if cfg.use_sg {
            let sel_logits = if cfg.use_mem {
                let v_g_proj = t.matmul(v_g, builder.mem.wg);
                let response = memory_response_tape(&mut t, v_g_proj, &builder.mem, cfg.gamma)?;
                let mask = (cfg.dropout > 0.0)
                    .then(|| dropout_mask(1, cfg.memory_dim, cfg.dropout, rng));
                let v_star = fuse_response_tape(&mut t, v_g_proj, response, &builder.mem, mask);
                linear(&mut t, v_star, builder.sel_mem_w, builder.sel_mem_b)
            } else {
                linear(&mut t, v_g, builder.sel_raw_w, builder.sel_raw_b)
            };
            assert_eq!(sample.mentions.len(), n_categories, "mention vector width");
            let targets = Mat::from_fn(1, n_categories, |_, j| {
                if sample.mentions[j] {
                    S::one()
                } else {
                    S::zero()
                }
            });
            rs_terms.push(t.bce_with_logits(sel_logits, targets, S::of(cfg.pos_weight)));
        }

        let graph = &sample.graph;
        let mut ctx: Option<Var> = None;
        if cfg.use_sg {
            ctx = Some(dec.null_token);
            if !graph.objects.is_empty() {
                let gh = sample.image.h / cfg.patch;
                let gw = sample.image.w / cfg.patch;
                let groups: Vec<Vec<usize>> = graph
                    .objects
                    .iter()
                    .map(|o| roi_cells(gh, gw, &o.bbox))
                    .collect::<Result<_>>()?;
                let obj_emb = embed_objects_tape(&mut t, feats, groups, &enc.obj_ff);

                let refined = ffn_forward(&mut t, obj_emb, &builder.attr_ff);
                let mut slots_by_owner: Vec<Vec<usize>> = vec![Vec::new(); graph.objects.len()];
                for a in &graph.attributes {
                    let k = graph.objects[a.owner].category;
                    if let Some(slot) = vocab.attributes.slot_of(k, &a.serialized()) {
                        slots_by_owner[a.owner].push(slot);
                    }
                }
                for (i, obj) in graph.objects.iter().enumerate() {
                    let head_width = vocab.attributes.n_attrs(obj.category);
                    if head_width == 0 {
                        continue;
                    }
                    let row = t.gather_rows(refined, vec![i]);
                    let logits = t.matmul(row, builder.attr_heads[obj.category]);
                    let mut target = Mat::zeros(1, head_width);
                    for &slot in &slots_by_owner[i] {
                        *target.at_mut(0, slot) = S::one();
                    }
                    ap_terms.push(t.bce_with_logits(logits, target, S::of(cfg.pos_weight)));
                }

                let attr_mask = (cfg.dropout > 0.0 && !graph.attributes.is_empty())
                    .then(|| dropout_mask(graph.attributes.len(), cfg.width, cfg.dropout, rng));
                let attr_emb =
                    embed_attributes_tape(&mut t, graph, &vocab.attributes, &enc, attr_mask);
                let (tokens, mask) =
                    assemble_tokens_tape(&mut t, obj_emb, attr_emb, graph, &enc, cfg.use_ae)?;
                let encoded =
                    encode_scene_graph_tape(&mut t, tokens, &mask, &enc, cfg.heads, cfg.mask_mode());

                let mut summaries = None;
                if cfg.use_sg_att || cfg.use_nas {
                    let sg_groups = subgraph_token_groups(graph)?;
                    summaries = Some(summarize_subgraphs_tape(
                        &mut t,
                        encoded,
                        &sg_groups,
                        cfg.pooling,
                    ));
                }
                if cfg.use_nas {
                    let labels = subgraph_labels(graph)?;
                    for k in 0..n_categories {
                        let idxs: Vec<usize> = graph
                            .objects
                            .iter()
                            .enumerate()
                            .filter(|(_, o)| o.category == k)
                            .map(|(i, _)| i)
                            .collect();
                        if idxs.is_empty() {
                            continue;
                        }
                        con_labels[k].extend(idxs.iter().map(|&i| labels[i]));
                        let rows = t.gather_rows(summaries.unwrap(), idxs);
                        con_parts[k].push(rows);
                    }
                }
                ctx = Some(if cfg.use_sg_att {
                    summaries.unwrap()
                } else {
                    encoded
                });
            }
        }

        if cfg.use_dr {
            dr_terms.push(disease_recognition_loss_tape(
                &mut t,
                v_g,
                disease_w,
                disease_b,
                &sample.labels,
            ));
        }

        let mut ids = vocab.tokens.encode_report(&sample.report);
        if ids.len() > cfg.max_len {
            ids.truncate(cfg.max_len);
            *ids.last_mut().unwrap() = EOS;
        }
        let x0 = embed_prefix_tape(&mut t, &ids[..ids.len() - 1], &dec);
        let hidden = decode_stack_tape(&mut t, x0, visual, ctx, &dec, cfg.heads);
        let logits = logits_tape(&mut t, hidden, &dec);
        let targets: Vec<usize> = ids[1..].iter().map(|&x| x as usize).collect();
        let active = vec![true; targets.len()];
        gen_terms.push(t.cross_entropy_rows(logits, targets, active));
    }

    let gen = mean_of(&mut t, &gen_terms);
    let rs = mean_of(&mut t, &rs_terms);
    let ap = mean_of(&mut t, &ap_terms);
    let dr = mean_of(&mut t, &dr_terms);
    let con = if cfg.use_nas && cfg.use_sg {
        let mut groups = Vec::new();
        for (parts, labels) in con_parts.into_iter().zip(con_labels) {
            match parts.len() {
                0 => {}
                1 => groups.push((parts[0], labels)),
                _ => groups.push((t.concat_rows(&parts), labels)),
            }
        }
        nas_contrastive_loss_tape(&mut t, &groups, &cfg.contrastive())
    } else {
        t.constant(Mat::scalar(S::zero()))
    };

    let mut objective = gen;
    for (term, weight) in [
        (rs, cfg.lambda_rs),
        (ap, cfg.delta_ap),
        (dr, cfg.eta_dr),
        (con, cfg.phi_con),
    ] {
        let scaled = t.scale(term, S::of(weight));
        objective = t.add(objective, scaled);
    }
    let grads = t.backward(objective);
    let named = t.param_grads(&grads);
    Ok(TrainOutput {
        losses: LossValues {
            gen: t.value(gen).item().f64(),
            rs: t.value(rs).item().f64(),
            ap: t.value(ap).item().f64(),
            dr: t.value(dr).item().f64(),
            con: t.value(con).item().f64(),
        },
        grads: named,
    })
}

/// One generated report with the graph that conditioned it.
#[derive(Debug, Clone)]
pub struct GeneratedReport {
    pub report: String,
    pub tokens: ReportTokens,
    pub graph: SceneGraph,
}

fn builder_cfg(cfg: &TrainingConfig) -> BuilderCfg {
    BuilderCfg {
        use_memory: cfg.use_mem,
        gamma: cfg.gamma,
        alpha: cfg.alpha,
        beta: cfg.beta,
    }
}

/// Image to report. Detected boxes are gated by the region selector into a
/// scene graph, the graph is encoded and pooled per subgraph, and the decoder
/// attends to visual tokens plus the graph context while generating.
pub fn generate_report<S: Scalar>(
    model: &ModelParams<S>,
    image: &Image<S>,
    detections: &[Detection],
    vocab: &VocabBundle,
    cfg: &TrainingConfig,
) -> Result<GeneratedReport> {
    let v = extract_patch_features(image, &model.backbone)?;
    let visual = encode_visual(&v, &model.backbone);
    let mut graph = SceneGraph::default();
    if cfg.use_sg {
        graph = build_inference_graph(
            &v,
            detections,
            &model.builder,
            &model.encoder.obj_ff,
            &vocab.attributes,
            &builder_cfg(cfg),
        )?;
    }
    let mode = cfg.decode_mode();
    let tokens = if !cfg.use_sg {
        generate_tokens(
            &model.decoder,
            cfg.heads,
            &visual,
            GraphCtx::Disabled,
            cfg.max_len,
            mode,
        )
    } else if graph.objects.is_empty() {
        generate_tokens(
            &model.decoder,
            cfg.heads,
            &visual,
            GraphCtx::Null,
            cfg.max_len,
            mode,
        )
    } else {
        let encoded = encode_graph(
            &v,
            &graph,
            &vocab.attributes,
            &model.encoder,
            cfg.heads,
            cfg.mask_mode(),
            cfg.use_ae,
        )?;
        let ctx_rows = if cfg.use_sg_att {
            let groups = subgraph_token_groups(&graph)?;
            summarize_subgraphs(&encoded, &groups, cfg.pooling).g
        } else {
            encoded
        };
        generate_tokens(
            &model.decoder,
            cfg.heads,
            &visual,
            GraphCtx::Tokens(&ctx_rows),
            cfg.max_len,
            mode,
        )
    };
    Ok(GeneratedReport {
        report: vocab.tokens.decode(&tokens.ids),
        tokens,
        graph,
    })
}

/// Region-selector probabilities and decisions for one image.
pub fn predict_mentions<S: Scalar>(
    model: &ModelParams<S>,
    image: &Image<S>,
    cfg: &TrainingConfig,
) -> Result<SelectorOutput> {
    let v = extract_patch_features(image, &model.backbone)?;
    let v_g = global_pool(&v);
    if cfg.use_mem {
        let v_g_proj = matmul(&v_g, &model.builder.mem.wg);
        let response = memory_response_from_proj(&v_g_proj, &model.builder.mem, cfg.gamma)?;
        let v_star = fuse_response(&v_g_proj, &response, &model.builder.mem);
        Ok(select_regions(
            &v_star,
            &model.builder.sel_mem_w,
            &model.builder.sel_mem_b,
            cfg.alpha,
        ))
    } else {
        Ok(select_regions(
            &v_g,
            &model.builder.sel_raw_w,
            &model.builder.sel_raw_b,
            cfg.alpha,
        ))
    }
}

/// Attribute probabilities and decisions for one region of one image.
pub fn predict_object_attributes<S: Scalar>(
    model: &ModelParams<S>,
    image: &Image<S>,
    bbox: &BBox,
    category: usize,
    cfg: &TrainingConfig,
) -> Result<AttributePrediction> {
    let v = extract_patch_features(image, &model.backbone)?;
    let pooled = roi_pool(&v, std::slice::from_ref(bbox))?;
    let obj_emb = ffn_plain(&pooled, &model.encoder.obj_ff);
    predict_attributes(&obj_emb, category, &model.builder.attrs, cfg.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, build_vocab, SyntheticSpec};
    use crate::decoder::DecodeMode;
    use crate::vocab::BOS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn tiny_cfg() -> TrainingConfig {
        let mut cfg = TrainingConfig::default();
        cfg.canvas = 32;
        cfg.patch = 8;
        cfg.channels = 8;
        cfg.width = 16;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.ffn_hidden = 24;
        cfg.memory_dim = 16;
        cfg.memory_slots = 8;
        cfg.gamma = 3;
        cfg.max_len = 24;
        cfg.n_categories = 8;
        cfg.batch_size = 2;
        cfg.dropout = 0.1;
        cfg
    }

    fn tiny_world(cfg: &TrainingConfig) -> (Vec<Sample<f64>>, VocabBundle, ModelParams<f64>) {
        let spec = SyntheticSpec {
            canvas: cfg.canvas,
            n_categories: cfg.n_categories,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let samples = generate_dataset::<f64>(&spec, 4);
        let vocab = build_vocab(&samples).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = ModelParams::init(cfg, &vocab, &mut rng);
        (samples, vocab, model)
    }

    fn step(
        model: &ModelParams<f64>,
        samples: &[Sample<f64>],
        vocab: &VocabBundle,
        cfg: &TrainingConfig,
        seed: u64,
    ) -> TrainOutput<f64> {
        let batch: Vec<&Sample<f64>> = samples.iter().take(2).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        training_step(model, &batch, vocab, cfg, &mut rng).unwrap()
    }

    fn grads_by_name(out: &TrainOutput<f64>) -> BTreeMap<String, Mat<f64>> {
        out.grads.iter().cloned().collect()
    }

    fn grad_norm(grads: &BTreeMap<String, Mat<f64>>, prefix: &str) -> f64 {
        grads
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn parameter_names_are_unique_and_shared_between_visit_modes() {
        let cfg = tiny_cfg();
        let (_, vocab, model) = tiny_world(&cfg);
        let mut names = Vec::new();
        model.visit(&mut |n, _| names.push(n.to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().cloned().collect();
        assert_eq!(unique.len(), names.len(), "duplicate parameter name");
        assert!(names.iter().any(|n| n == "backbone.patch_w"));
        assert!(names.iter().any(|n| n == "builder.mem.slots"));
        assert!(names.iter().any(|n| n == "sg.attr_table"));
        assert!(names.iter().any(|n| n == "dec.tok_emb"));
        assert!(names.iter().any(|n| n == "disease.w"));

        let mut model = model;
        let mut mut_names = Vec::new();
        model.visit_mut(&mut |n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
        assert!(model.num_params() > 0);
        drop(vocab);
    }

    #[test]
    fn training_step_is_deterministic_and_finite() {
        let cfg = tiny_cfg();
        let (samples, vocab, model) = tiny_world(&cfg);
        let a = step(&model, &samples, &vocab, &cfg, 3);
        let b = step(&model, &samples, &vocab, &cfg, 3);
        assert_eq!(a.losses, b.losses);
        for v in [a.losses.gen, a.losses.rs, a.losses.ap, a.losses.dr, a.losses.con] {
            assert!(v.is_finite());
        }
        assert!(a.losses.gen > 0.0);
        assert!(a.losses.rs > 0.0);
        assert!(a.losses.ap > 0.0);
        assert!(a.losses.dr > 0.0);
        let ga = grads_by_name(&a);
        let gb = grads_by_name(&b);
        assert_eq!(ga.len(), gb.len());
        for (name, g) in &ga {
            assert_eq!(g.data(), gb[name].data(), "grad mismatch for {name}");
            assert!(g.data().iter().all(|x| x.is_finite()), "{name} not finite");
        }
    }

    #[test]
    fn dropout_seed_changes_the_losses() {
        let cfg = tiny_cfg();
        let (samples, vocab, model) = tiny_world(&cfg);
        let a = step(&model, &samples, &vocab, &cfg, 3);
        let b = step(&model, &samples, &vocab, &cfg, 4);
        assert_ne!(a.losses, b.losses);
    }

    #[test]
    fn disabling_the_graph_zeroes_its_losses_and_gradients() {
        let mut cfg = tiny_cfg();
        cfg.use_sg = false;
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = step(&model, &samples, &vocab, &cfg, 3);
        assert_eq!(out.losses.rs, 0.0);
        assert_eq!(out.losses.ap, 0.0);
        assert_eq!(out.losses.con, 0.0);
        assert!(out.losses.gen > 0.0);
        assert!(out.losses.dr > 0.0);
        let grads = grads_by_name(&out);
        assert_eq!(grad_norm(&grads, "builder."), 0.0);
        assert_eq!(grad_norm(&grads, "sg."), 0.0);
        assert!(grad_norm(&grads, "dec.") > 0.0);
        assert!(grad_norm(&grads, "disease.") > 0.0);
        for layer_part in ["cross_graph", "ln3"] {
            let key = format!("dec.layer0.{layer_part}");
            assert_eq!(grad_norm(&grads, &key), 0.0, "{key} should be idle");
        }
    }

    #[test]
    fn memoryless_selector_leaves_memory_parameters_idle() {
        let mut cfg = tiny_cfg();
        cfg.use_mem = false;
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = step(&model, &samples, &vocab, &cfg, 3);
        let grads = grads_by_name(&out);
        assert_eq!(grad_norm(&grads, "builder.mem."), 0.0);
        assert_eq!(grad_norm(&grads, "builder.sel_mem_"), 0.0);
        assert!(grad_norm(&grads, "builder.sel_raw_") > 0.0);
    }

    #[test]
    fn memory_selector_leaves_raw_head_idle() {
        let cfg = tiny_cfg();
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = step(&model, &samples, &vocab, &cfg, 3);
        let grads = grads_by_name(&out);
        assert!(grad_norm(&grads, "builder.mem.") > 0.0);
        assert_eq!(grad_norm(&grads, "builder.sel_raw_"), 0.0);
    }

    #[test]
    fn disabling_heads_zeroes_their_components() {
        let mut cfg = tiny_cfg();
        cfg.use_dr = false;
        cfg.use_nas = false;
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = step(&model, &samples, &vocab, &cfg, 3);
        assert_eq!(out.losses.dr, 0.0);
        assert_eq!(out.losses.con, 0.0);
        assert!(out.losses.rs > 0.0);
        let grads = grads_by_name(&out);
        assert_eq!(grad_norm(&grads, "disease."), 0.0);
    }

    #[test]
    fn selector_loss_weight_scales_its_exclusive_gradients() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.0;
        let (samples, vocab, model) = tiny_world(&cfg);
        cfg.lambda_rs = 0.25;
        let quarter = grads_by_name(&step(&model, &samples, &vocab, &cfg, 3));
        cfg.lambda_rs = 0.5;
        let half = grads_by_name(&step(&model, &samples, &vocab, &cfg, 3));
        let q = &quarter["builder.sel_mem_w"];
        let h = &half["builder.sel_mem_w"];
        for (a, b) in q.data().iter().zip(h.data()) {
            assert_eq!(2.0 * a, *b, "selector head gradient should scale with the weight");
        }
        assert_eq!(
            quarter["dec.out_w"].data(),
            half["dec.out_w"].data(),
            "decoder gradients must not depend on the selector weight"
        );
    }

    #[test]
    fn long_reports_are_truncated_not_rejected() {
        let mut cfg = tiny_cfg();
        cfg.max_len = 6;
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = step(&model, &samples, &vocab, &cfg, 3);
        assert!(out.losses.gen.is_finite());
    }

    #[test]
    fn generated_reports_are_deterministic_and_beam_one_matches_greedy() {
        let cfg = tiny_cfg();
        let (samples, vocab, model) = tiny_world(&cfg);
        let dets: Vec<Detection> = samples[0]
            .graph
            .objects
            .iter()
            .map(|o| Detection {
                category: o.category,
                bbox: o.bbox,
                score: 1.0,
            })
            .collect();
        let a = generate_report(&model, &samples[0].image, &dets, &vocab, &cfg).unwrap();
        let b = generate_report(&model, &samples[0].image, &dets, &vocab, &cfg).unwrap();
        assert_eq!(a.tokens.ids, b.tokens.ids);
        assert_eq!(a.tokens.ids[0], BOS);
        assert!(a.tokens.ids.len() <= cfg.max_len);

        let mut beam_cfg = cfg.clone();
        beam_cfg.decode = crate::config::DecodeChoice::Beam;
        beam_cfg.beam_width = 1;
        assert_eq!(beam_cfg.decode_mode(), DecodeMode::Beam(1));
        let c = generate_report(&model, &samples[0].image, &dets, &vocab, &beam_cfg).unwrap();
        assert_eq!(a.tokens.ids, c.tokens.ids);
    }

    #[test]
    fn graphless_inference_paths_run() {
        let mut cfg = tiny_cfg();
        cfg.use_sg = false;
        let (samples, vocab, model) = tiny_world(&cfg);
        let out = generate_report(&model, &samples[0].image, &[], &vocab, &cfg).unwrap();
        assert!(out.graph.objects.is_empty());

        let mut cfg2 = tiny_cfg();
        cfg2.use_sg = true;
        let out2 = generate_report(&model, &samples[0].image, &[], &vocab, &cfg2).unwrap();
        assert!(out2.graph.objects.is_empty());
        assert_eq!(out2.tokens.ids[0], BOS);
    }

    #[test]
    fn selector_and_attribute_probes_run_on_an_untrained_model() {
        let cfg = tiny_cfg();
        let (samples, vocab, model) = tiny_world(&cfg);
        let sel = predict_mentions(&model, &samples[0].image, &cfg).unwrap();
        assert_eq!(sel.probs.len(), cfg.n_categories);
        let obj = &samples[0].graph.objects[0];
        let pred =
            predict_object_attributes(&model, &samples[0].image, &obj.bbox, obj.category, &cfg)
                .unwrap();
        assert_eq!(pred.probs.len(), vocab.attributes.n_attrs(obj.category));
    }
}
