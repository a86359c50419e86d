//! Optimization loop: Adam with a cosine schedule and a slower backbone
//! group, the weighted multi-task objective, checkpoint save and restore
//! with bitwise resume, evaluation over generated reports, and the
//! ablation grid.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abnormal::KeywordMap;
use crate::checkpoint::Checkpoint;
use crate::config::TrainingConfig;
use crate::data::{collision_batches, Sample, VocabBundle};
use crate::decoder::Pooling;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::metrics::{evaluate_reports, MetricReport};
use crate::model::{generate_report, training_step, LossValues, ModelParams};
use crate::scalar::Scalar;
use crate::scene_graph::{Detection, SceneGraph};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed by parameter name. Entries are
/// created lazily on the first update so a fresh optimizer is just two
/// empty maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub m: BTreeMap<String, Mat<S>>,
    pub v: BTreeMap<String, Mat<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One optimizer step over every parameter. `t` is the 1-based update
    /// count used for bias correction; `lr_of` maps a parameter name to its
    /// learning rate for this step, schedule already applied.
    pub fn update(
        &mut self,
        model: &mut ModelParams<S>,
        grads: &[(String, Mat<S>)],
        t: u64,
        lr_of: &dyn Fn(&str) -> f64,
    ) {
        assert!(t >= 1, "bias correction needs a 1-based step count");
        let by_name: BTreeMap<&str, &Mat<S>> =
            grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |name, w| {
            let g = by_name
                .get(name)
                .unwrap_or_else(|| panic!("no gradient for parameter {name}"));
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(w.rows(), w.cols()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| Mat::zeros(w.rows(), w.cols()));
            adam_apply(w, g, m, v, t, lr_of(name));
        });
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn adam_apply<S: Scalar>(
    w: &mut Mat<S>,
    g: &Mat<S>,
    m: &mut Mat<S>,
    v: &mut Mat<S>,
    t: u64,
    lr: f64,
) {
    assert_eq!(w.shape(), g.shape());
    assert_eq!(w.shape(), m.shape());
    assert_eq!(w.shape(), v.shape());
    let b1 = S::of(ADAM_BETA1);
    let b2 = S::of(ADAM_BETA2);
    let one = S::one();
    let eps = S::of(ADAM_EPS);
    let bc1 = S::of(1.0 - ADAM_BETA1.powf(t as f64));
    let bc2 = S::of(1.0 - ADAM_BETA2.powf(t as f64));
    let lr = S::of(lr);
    let (wd, md, vd, gd) = (w.data_mut(), m.data_mut(), v.data_mut(), g.data());
    for i in 0..wd.len() {
        let gi = gd[i];
        md[i] = b1 * md[i] + (one - b1) * gi;
        vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        wd[i] = wd[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Cosine-decayed rate: full strength at step zero, zero at `total`,
/// clamped flat beyond. A zero horizon means no schedule at all.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * frac).cos())
}

/// Per-group base rate: the visual backbone trains slower than the rest.
pub fn group_lr(cfg: &TrainingConfig, name: &str) -> f64 {
    if name.starts_with("backbone.") {
        cfg.lr_backbone
    } else {
        cfg.lr
    }
}

fn neumaier(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Weighted sum of the five objectives. The addition is compensated, so the
/// result is the correctly rounded sum rather than a left-to-right drift.
pub fn total_loss(losses: &LossValues, cfg: &TrainingConfig) -> f64 {
    neumaier(&[
        losses.gen,
        cfg.lambda_rs * losses.rs,
        cfg.delta_ap * losses.ap,
        cfg.eta_dr * losses.dr,
        cfg.phi_con * losses.con,
    ])
}

fn finite(component: &'static str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            component,
            step: step as usize,
        })
    }
}

/// Reject NaN or infinite components before they reach the optimizer.
pub fn validate_losses(losses: &LossValues, step: u64) -> Result<()> {
    finite("gen", losses.gen, step)?;
    finite("rs", losses.rs, step)?;
    finite("ap", losses.ap, step)?;
    finite("dr", losses.dr, step)?;
    finite("con", losses.con, step)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub losses: LossValues,
    pub total: f64,
    pub lr: f64,
}

/// Everything the loop needs to continue: parameters, optimizer moments,
/// and the number of completed steps.
#[derive(Debug, Clone)]
pub struct TrainState<S> {
    pub model: ModelParams<S>,
    pub opt: Adam<S>,
    pub step: u64,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: &TrainingConfig, vocab: &VocabBundle) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        TrainState {
            model: ModelParams::init(cfg, vocab, &mut rng),
            opt: Adam::new(),
            step: 0,
        }
    }
}

/// Advance the loop until `until` steps have completed. Both the batch
/// order and the dropout noise are functions of the step index alone, so a
/// run that stops and restarts from a checkpoint retraces the same path
/// bit for bit.
pub fn train_to_step<S: Scalar>(
    state: &mut TrainState<S>,
    samples: &[Sample<S>],
    vocab: &VocabBundle,
    cfg: &TrainingConfig,
    until: u64,
    on_step: &mut dyn FnMut(&TrainLogEntry),
) -> Result<()> {
    assert!(!samples.is_empty(), "training needs at least one sample");
    let n_batches = samples.len().div_ceil(cfg.batch_size) as u64;
    let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < until {
        let step = state.step;
        let epoch = step / n_batches;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = collision_batches(samples, cfg.batch_size, cfg.seed ^ epoch);
            debug_assert_eq!(batches.len() as u64, n_batches);
            cached = Some((epoch, batches));
        }
        let batches = &cached.as_ref().unwrap().1;
        let ids = &batches[(step % n_batches) as usize];
        let batch: Vec<&Sample<S>> = ids.iter().map(|&i| &samples[i]).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step + 1);
        let out = training_step(&state.model, &batch, vocab, cfg, &mut rng)?;
        validate_losses(&out.losses, step)?;

        let scale = cosine_lr(1.0, step, cfg.steps as u64);
        state.opt.update(&mut state.model, &out.grads, step + 1, &|name| {
            group_lr(cfg, name) * scale
        });
        state.step = step + 1;

        on_step(&TrainLogEntry {
            step,
            losses: out.losses,
            total: total_loss(&out.losses, cfg),
            lr: cfg.lr * scale,
        });
    }
    Ok(())
}

/// Train from a fresh initialization for `cfg.steps` steps.
pub fn train_new<S: Scalar>(
    samples: &[Sample<S>],
    vocab: &VocabBundle,
    cfg: &TrainingConfig,
    on_step: &mut dyn FnMut(&TrainLogEntry),
) -> Result<TrainState<S>> {
    let mut state = TrainState::new(cfg, vocab);
    train_to_step(&mut state, samples, vocab, cfg, cfg.steps as u64, on_step)?;
    Ok(state)
}

/// Freeze the loop into a checkpoint: every parameter under its visit name,
/// the optimizer moments under `opt.m.` and `opt.v.`, the completed step
/// count, and the config as JSON.
pub fn to_checkpoint<S: Scalar>(state: &TrainState<S>, cfg: &TrainingConfig) -> Checkpoint<S> {
    let mut segments = BTreeMap::new();
    state.model.visit(&mut |name, m| {
        segments.insert(name.to_string(), m.clone());
    });
    for (name, m) in &state.opt.m {
        segments.insert(format!("opt.m.{name}"), m.clone());
    }
    for (name, v) in &state.opt.v {
        segments.insert(format!("opt.v.{name}"), v.clone());
    }
    Checkpoint {
        step: state.step,
        config_json: serde_json::to_string(cfg).expect("config serializes"),
        segments,
    }
}

/// Rebuild a training state from a checkpoint. The vocabulary must be the
/// one the run was started with; a missing, unexpected, or reshaped
/// segment is reported by name.
pub fn from_checkpoint<S: Scalar>(
    ck: &Checkpoint<S>,
    vocab: &VocabBundle,
) -> Result<(TrainState<S>, TrainingConfig)> {
    let cfg: TrainingConfig = serde_json::from_str(&ck.config_json)
        .map_err(|e| Error::Checkpoint(format!("embedded config does not parse: {e}")))?;
    cfg.validate()?;
    let mut state = TrainState::<S>::new(&cfg, vocab);

    let mut shapes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    state.model.visit(&mut |name, w| {
        shapes.insert(name.to_string(), w.shape());
    });
    for (name, seg) in &ck.segments {
        let base = name
            .strip_prefix("opt.m.")
            .or_else(|| name.strip_prefix("opt.v."))
            .unwrap_or(name);
        match shapes.get(base) {
            None => return Err(Error::Checkpoint(format!("unexpected segment {name}"))),
            Some(&(r, c)) if (r, c) != seg.shape() => {
                return Err(Error::Checkpoint(format!(
                    "segment {name} is {}x{}, the model wants {r}x{c}",
                    seg.rows(),
                    seg.cols()
                )))
            }
            Some(_) => {}
        }
    }
    for name in shapes.keys() {
        if !ck.segments.contains_key(name) {
            return Err(Error::Checkpoint(format!("missing segment {name}")));
        }
    }

    state.model.visit_mut(&mut |name, w| {
        *w = ck.segments[name].clone();
    });
    for (name, seg) in &ck.segments {
        if let Some(base) = name.strip_prefix("opt.m.") {
            state.opt.m.insert(base.to_string(), seg.clone());
        } else if let Some(base) = name.strip_prefix("opt.v.") {
            state.opt.v.insert(base.to_string(), seg.clone());
        }
    }
    state.step = ck.step;
    Ok((state, cfg))
}

/// Perfect detections straight from a graph's ground-truth boxes.
pub fn gt_detections(graph: &SceneGraph) -> Vec<Detection> {
    graph
        .objects
        .iter()
        .map(|o| Detection {
            category: o.category,
            bbox: o.bbox,
            score: 1.0,
        })
        .collect()
}

/// Generate a report for every sample from its ground-truth boxes and
/// score the batch against the references.
pub fn evaluate_model<S: Scalar>(
    model: &ModelParams<S>,
    samples: &[Sample<S>],
    vocab: &VocabBundle,
    cfg: &TrainingConfig,
    map: &KeywordMap,
) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut refs = Vec::with_capacity(samples.len());
    for s in samples {
        let dets = gt_detections(&s.graph);
        preds.push(generate_report(model, &s.image, &dets, vocab, cfg)?.report);
        refs.push(s.report.clone());
    }
    evaluate_reports(&preds, &refs, map)
}

/// One scored row of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricReport,
    /// Mean difference against the `base` row over the eight metric columns.
    pub avg_delta: f64,
}

/// The model variants the suite trains, in reporting order. `base` is the
/// plain encoder-decoder with every auxiliary signal off; the rest switch
/// off one piece at a time, and the last two pit the pooling modes against
/// each other.
pub fn ablation_variants(cfg: &TrainingConfig) -> Vec<(String, TrainingConfig)> {
    let with = |f: &dyn Fn(&mut TrainingConfig)| {
        let mut v = cfg.clone();
        f(&mut v);
        v
    };
    vec![
        (
            "base".to_string(),
            with(&|c| {
                c.use_sg = false;
                c.use_dr = false;
            }),
        ),
        ("full".to_string(), cfg.clone()),
        ("no-sg".to_string(), with(&|c| c.use_sg = false)),
        ("no-sg-att".to_string(), with(&|c| c.use_sg_att = false)),
        ("no-ae".to_string(), with(&|c| c.use_ae = false)),
        ("no-mem".to_string(), with(&|c| c.use_mem = false)),
        ("no-nas".to_string(), with(&|c| c.use_nas = false)),
        ("no-dr".to_string(), with(&|c| c.use_dr = false)),
        ("pool-max".to_string(), with(&|c| c.pooling = Pooling::Max)),
        ("pool-mean".to_string(), with(&|c| c.pooling = Pooling::Mean)),
    ]
}

fn metric_columns(m: &MetricReport) -> [f64; 8] {
    [
        m.bleu_1,
        m.bleu_2,
        m.bleu_3,
        m.bleu_4,
        m.rouge_l,
        m.ce_precision,
        m.ce_recall,
        m.ce_f1,
    ]
}

fn mean_metrics(reports: &[MetricReport]) -> MetricReport {
    assert!(!reports.is_empty());
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricReport {
        bleu_1: mean(&|r| r.bleu_1),
        bleu_2: mean(&|r| r.bleu_2),
        bleu_3: mean(&|r| r.bleu_3),
        bleu_4: mean(&|r| r.bleu_4),
        rouge_l: mean(&|r| r.rouge_l),
        ce_precision: mean(&|r| r.ce_precision),
        ce_recall: mean(&|r| r.ce_recall),
        ce_f1: mean(&|r| r.ce_f1),
        avg_report_length: mean(&|r| r.avg_report_length),
    }
}

/// Train and score every variant, averaging metrics over `seeds`.
/// `progress` is called with the variant name and seed before each run.
pub fn run_ablation_suite<S: Scalar>(
    cfg: &TrainingConfig,
    train_set: &[Sample<S>],
    eval_set: &[Sample<S>],
    vocab: &VocabBundle,
    seeds: &[u64],
    map: &KeywordMap,
    progress: &mut dyn FnMut(&str, u64),
) -> Result<Vec<AblationRow>> {
    assert!(!seeds.is_empty(), "the ablation suite needs at least one seed");
    let mut rows = Vec::new();
    for (name, variant) in ablation_variants(cfg) {
        let mut scored = Vec::new();
        for &seed in seeds {
            progress(&name, seed);
            let mut run_cfg = variant.clone();
            run_cfg.seed = seed;
            let state = train_new::<S>(train_set, vocab, &run_cfg, &mut |_| {})?;
            scored.push(evaluate_model(&state.model, eval_set, vocab, &run_cfg, map)?);
        }
        rows.push(AblationRow {
            name,
            metrics: mean_metrics(&scored),
            avg_delta: 0.0,
        });
    }
    let base = metric_columns(&rows[0].metrics);
    for row in &mut rows {
        let cols = metric_columns(&row.metrics);
        row.avg_delta = cols
            .iter()
            .zip(base.iter())
            .map(|(c, b)| c - b)
            .sum::<f64>()
            / base.len() as f64;
    }
    Ok(rows)
}

/// Aligned text table over the standard column order plus the mean delta.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<10}", "model"));
    for h in ["BL-1", "BL-2", "BL-3", "BL-4", "RG-L", "P", "R", "F1", "AVG.D"] {
        out.push_str(&format!(" {h:>7}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{:<10}", row.name));
        for v in metric_columns(&row.metrics) {
            out.push_str(&format!(" {v:>7.4}"));
        }
        out.push_str(&format!(" {:>+7.4}\n", row.avg_delta));
    }
    out
}
