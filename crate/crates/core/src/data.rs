//! Synthetic dataset generation, JSON-lines ingestion, vocabulary assembly,
//! and collision-biased batch composition.
//!
//! The generator draws a handful of anatomical regions per image, renders
//! each as a textured rectangle, and writes one report sentence per region.
//! Category identity is painted as a fixed 8x8 sign pattern tiled over the
//! box; each attribute adds a striped wave on the rows congruent to its slot,
//! so both the region selector and the attribute heads can be learned from
//! pixels alone. Disease mentions in the text agree with the rule-based
//! labeler by construction.

use crate::abnormal::{rule_based_labeler, DiseaseLabels, KeywordMap, DEFAULT_DISEASES,
                      NUM_DISEASES};
use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene_graph::{AttributeNode, AttributeType, BBox, GraphRecord, ObjectNode,
                         ObjectRecord, SceneGraph, NUM_CATEGORIES};
use crate::vocab::{AttributeVocab, TokenVocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Texture tile side in pixels; matches the default backbone patch so each
/// grid cell sees one full period of every pattern.
pub const TILE: usize = 8;

/// Generator-side attribute slots per category: four benign descriptors,
/// one positive finding, one negated finding.
pub const GEN_SLOTS: usize = 6;

/// Seed for the pattern bank. Fixed independently of the dataset seed so
/// differently seeded train and eval splits share one texture code.
const TEXTURE_SEED: u64 = 0x7a31_9c52;

const BG_LEVEL: f64 = 0.45;
const SIG_AMP: f64 = 0.18;
const WAVE_AMP: f64 = 0.25;
const NEG_FINDING_RATE: f64 = 0.3;

pub const REGION_NAMES: [&str; NUM_CATEGORIES] = [
    "right lung",
    "left lung",
    "right upper lobe",
    "right middle lobe",
    "right lower lobe",
    "left upper lobe",
    "left lower lobe",
    "right hilum",
    "left hilum",
    "right apex",
    "left apex",
    "right costophrenic angle",
    "left costophrenic angle",
    "right hemidiaphragm",
    "left hemidiaphragm",
    "trachea",
    "carina",
    "mediastinum",
    "upper mediastinum",
    "cardiac silhouette",
    "aortic arch",
    "descending aorta",
    "right clavicle",
    "left clavicle",
    "spine",
    "right atrium",
    "left ventricle",
    "right chest wall",
    "left chest wall",
];

/// Display name for a region category; synthetic ids past the named list
/// fall back to a numbered form.
pub fn region_name(k: usize) -> String {
    if k < REGION_NAMES.len() {
        REGION_NAMES[k].to_string()
    } else {
        format!("region {k}")
    }
}

const BENIGN_FAMILIES: [AttributeType; 5] = [
    AttributeType::Texture,
    AttributeType::Size,
    AttributeType::Laterality,
    AttributeType::Technical,
    AttributeType::Device,
];

const BENIGN_WORDS: [[&str; 4]; 5] = [
    ["sharp", "coarse", "smooth", "granular"],
    ["small", "large", "elongated", "rounded"],
    ["leftward", "rightward", "central", "bilateral"],
    ["obscured", "rotated", "magnified", "clipped"],
    ["wire", "clip", "tube", "valve"],
];

/// The label set minus the catch-all entry, in label order: these are the
/// findings a synthetic region can actually present with.
const ASSIGNABLE_DISEASES: [&str; NUM_DISEASES - 1] = [
    "atelectasis",
    "cardiomegaly",
    "consolidation",
    "edema",
    "enlarged cardiomediastinum",
    "fracture",
    "lung lesion",
    "lung opacity",
    "pleural effusion",
    "pleural other",
    "pneumonia",
    "pneumothorax",
    "support devices",
];

/// The finding a category presents with when abnormal.
pub fn category_disease(k: usize) -> &'static str {
    ASSIGNABLE_DISEASES[k % ASSIGNABLE_DISEASES.len()]
}

fn disease_label_index(name: &str) -> usize {
    DEFAULT_DISEASES
        .iter()
        .position(|d| *d == name)
        .expect("assignable diseases are a subset of the label set")
}

/// The attribute at generator slot `j` of category `k`, minus its owner.
/// Slots 0..4 are benign descriptors spread over the non-finding families;
/// slot 4 is the positive finding, slot 5 its negated form.
pub fn gen_attribute(k: usize, j: usize) -> (AttributeType, String) {
    assert!(j < GEN_SLOTS);
    if j < 4 {
        let fam = (k + j) % BENIGN_FAMILIES.len();
        let word = BENIGN_WORDS[fam][(k + j) % 4];
        (BENIGN_FAMILIES[fam], format!("|yes|{word}|"))
    } else {
        let flag = if j == 4 { "yes" } else { "no" };
        (
            AttributeType::AnatomicalFinding,
            format!("|{flag}|{}|", category_disease(k)),
        )
    }
}

/// Fixed sign patterns shared by every dataset: a 64-entry tile per category
/// and an 8-entry wave per (category, slot). Draw order is per category, so
/// banks of different sizes agree on their common prefix.
pub struct SignatureBank {
    category: Vec<Vec<f64>>,
    wave: Vec<Vec<Vec<f64>>>,
}

impl SignatureBank {
    pub fn new(n_categories: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(TEXTURE_SEED);
        let mut category = Vec::with_capacity(n_categories);
        let mut wave = Vec::with_capacity(n_categories);
        let sign = |rng: &mut ChaCha8Rng| if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for _ in 0..n_categories {
            category.push((0..TILE * TILE).map(|_| sign(&mut rng)).collect());
            wave.push(
                (0..GEN_SLOTS)
                    .map(|_| (0..TILE).map(|_| sign(&mut rng)).collect())
                    .collect(),
            );
        }
        SignatureBank { category, wave }
    }

    /// Tile value for category `k` at absolute pixel (y, x).
    pub fn tile(&self, k: usize, y: usize, x: usize) -> f64 {
        self.category[k][(y % TILE) * TILE + (x % TILE)]
    }

    /// Wave value for slot `j` of category `k` at absolute column `x`.
    pub fn wave(&self, k: usize, j: usize, x: usize) -> f64 {
        self.wave[k][j][x % TILE]
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Square canvas side in pixels; must be a multiple of the texture tile
    /// and at least four tiles wide so every box covers a full tile.
    pub canvas: usize,
    pub n_categories: usize,
    pub min_regions: usize,
    pub max_regions: usize,
    /// Per-region probability of presenting with its finding.
    pub abnormal_rate: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            canvas: 48,
            n_categories: NUM_CATEGORIES,
            min_regions: 2,
            max_regions: 4,
            abnormal_rate: 0.3,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) {
        assert!(self.canvas % TILE == 0 && self.canvas >= 4 * TILE);
        assert!(self.n_categories >= 1);
        assert!(self.min_regions >= 1 && self.min_regions <= self.max_regions);
        assert!((0.0..=1.0).contains(&self.abnormal_rate));
        assert!(self.noise >= 0.0);
    }
}

/// One training example. Ingested real data carries a zero-sized image;
/// everything else is populated either way.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub image_id: String,
    pub image: Image<S>,
    pub graph: SceneGraph,
    pub report: String,
    pub labels: DiseaseLabels,
    /// Selector targets: `mentions[k]` is true iff category `k` is described
    /// in the report (for synthetic data, iff it is rendered).
    pub mentions: Vec<bool>,
}

struct Instance {
    category: usize,
    /// Pixel box: x0, y0, x1, y1 (exclusive).
    px: [usize; 4],
    /// Generator slots present, ascending.
    slots: Vec<usize>,
}

fn sentence(category: usize, slots: &[usize]) -> String {
    let name = region_name(category);
    let words: Vec<&str> = slots
        .iter()
        .filter(|&&j| j < 4)
        .map(|&j| {
            let fam = (category + j) % BENIGN_FAMILIES.len();
            BENIGN_WORDS[fam][(category + j) % 4]
        })
        .collect();
    let mut list = String::new();
    for (i, w) in words.iter().enumerate() {
        if i == 0 {
            list.push_str(w);
        } else if i + 1 == words.len() {
            list.push_str(" and ");
            list.push_str(w);
        } else {
            list.push_str(" , ");
            list.push_str(w);
        }
    }
    let clause = if slots.contains(&4) {
        format!(" with {}", category_disease(category))
    } else if slots.contains(&5) {
        format!(" free of {}", category_disease(category))
    } else {
        String::new()
    };
    format!("the {name} is {list}{clause} .")
}

fn draw_instances(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    let m_hi = spec.max_regions.min(spec.n_categories);
    let m_lo = spec.min_regions.min(m_hi);
    let m = rng.gen_range(m_lo..=m_hi);
    let mut cats: Vec<usize> = (0..spec.n_categories).collect();
    for i in 0..m {
        let j = rng.gen_range(i..cats.len());
        cats.swap(i, j);
    }
    cats.truncate(m);

    let lo = spec.canvas / 4;
    let hi = spec.canvas / 2;
    let mut out = Vec::with_capacity(m);
    for &category in &cats {
        let w = rng.gen_range(lo..=hi);
        let h = rng.gen_range(lo..=hi);
        let x0 = rng.gen_range(0..=spec.canvas - w);
        let y0 = rng.gen_range(0..=spec.canvas - h);

        let abnormal = rng.gen::<f64>() < spec.abnormal_rate;
        let mut benign: Vec<usize> = (0..4).collect();
        let b = if abnormal {
            rng.gen_range(1..=4)
        } else {
            rng.gen_range(2..=4)
        };
        for i in 0..b {
            let j = rng.gen_range(i..benign.len());
            benign.swap(i, j);
        }
        benign.truncate(b);
        benign.sort_unstable();
        let mut slots = benign;
        if abnormal {
            slots.push(4);
        } else if rng.gen::<f64>() < NEG_FINDING_RATE {
            slots.push(5);
        }
        out.push(Instance {
            category,
            px: [x0, y0, x0 + w, y0 + h],
            slots,
        });
    }
    out
}

fn render<S: Scalar>(
    spec: &SyntheticSpec,
    bank: &SignatureBank,
    instances: &[Instance],
    rng: &mut ChaCha8Rng,
) -> Image<S> {
    let c = spec.canvas;
    let mut px = vec![BG_LEVEL; c * c];
    if spec.noise > 0.0 {
        for v in px.iter_mut() {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    for inst in instances {
        let [x0, y0, x1, y1] = inst.px;
        for y in y0..y1 {
            let striped = inst.slots.iter().copied().find(|&j| y % TILE == j);
            for x in x0..x1 {
                let mut v = SIG_AMP * bank.tile(inst.category, y, x);
                if let Some(j) = striped {
                    v += WAVE_AMP * bank.wave(inst.category, j, x);
                }
                px[y * c + x] += v;
            }
        }
    }
    let mut image = Image::zeros(c, c, 1);
    for (o, v) in image.data.iter_mut().zip(px) {
        *o = S::of(v.clamp(0.0, 1.0));
    }
    image
}

/// Generate `n` samples. Deterministic given the spec seed: sample `i` draws
/// from stream `i` of a counter-based generator, so shards merge stably.
pub fn generate_dataset<S: Scalar>(spec: &SyntheticSpec, n: usize) -> Vec<Sample<S>> {
    assert!(n >= 1);
    spec.validate();
    let bank = SignatureBank::new(spec.n_categories);
    (0..n).map(|i| generate_sample(spec, &bank, i)).collect()
}

fn generate_sample<S: Scalar>(spec: &SyntheticSpec, bank: &SignatureBank, index: usize) -> Sample<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let instances = draw_instances(spec, &mut rng);
    let image = render(spec, bank, &instances, &mut rng);

    let scale = spec.canvas as f64;
    let mut graph = SceneGraph::default();
    let mut sentences = Vec::with_capacity(instances.len());
    let mut labels = DiseaseLabels::zeros();
    let mut mentions = vec![false; spec.n_categories];
    for inst in &instances {
        let [x0, y0, x1, y1] = inst.px;
        let owner = graph.objects.len();
        graph.objects.push(ObjectNode {
            category: inst.category,
            bbox: BBox::new(
                x0 as f64 / scale,
                y0 as f64 / scale,
                x1 as f64 / scale,
                y1 as f64 / scale,
            ),
        });
        for &j in &inst.slots {
            let (attr_type, raw) = gen_attribute(inst.category, j);
            graph.attributes.push(AttributeNode {
                attr_type,
                raw,
                owner,
            });
        }
        sentences.push(sentence(inst.category, &inst.slots));
        if inst.slots.contains(&4) {
            labels.y[disease_label_index(category_disease(inst.category))] = 1;
        }
        mentions[inst.category] = true;
    }
    Sample {
        image_id: format!("synth-{index:06}"),
        image,
        graph,
        report: sentences.join(" "),
        labels,
        mentions,
    }
}

// ---------------------------------------------------------------------------
// JSON-lines dataset format

/// One dataset line: the scene-graph record plus the report text and
/// optional disease labels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub objects: Vec<ObjectRecord>,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

impl DatasetRecord {
    pub fn from_sample<S: Scalar>(sample: &Sample<S>) -> Self {
        let rec = GraphRecord::from_graph(&sample.image_id, &sample.graph);
        DatasetRecord {
            image_id: rec.image_id,
            objects: rec.objects,
            report: sample.report.clone(),
            labels: Some(sample.labels.y.clone()),
        }
    }
}

/// Write samples as JSON-lines. Pixels are not serialized; the format
/// carries annotations only.
pub fn emit_jsonl<S: Scalar>(samples: &[Sample<S>], out: &mut impl Write) -> Result<()> {
    for s in samples {
        let rec = DatasetRecord::from_sample(s);
        let line = serde_json::to_string(&rec).expect("record serialization cannot fail");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn write_jsonl<S: Scalar>(samples: &[Sample<S>], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    emit_jsonl(samples, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Read a JSON-lines dataset. Malformed lines fail with their 1-based line
/// number; records with an empty report or no objects are dropped; missing
/// labels are backfilled with the rule-based labeler. Ingested samples carry
/// a zero-sized image.
pub fn ingest_jsonl<S: Scalar>(path: &Path, n_categories: usize) -> Result<Vec<Sample<S>>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let keyword_map = KeywordMap::default_chest();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::ParseError {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.report.trim().is_empty() || rec.objects.is_empty() {
            continue;
        }
        let graph = GraphRecord {
            image_id: rec.image_id.clone(),
            objects: rec.objects,
        }
        .to_graph(line_no, n_categories)?;
        let labels = match rec.labels {
            Some(y) if y.len() == NUM_DISEASES => DiseaseLabels { y },
            Some(y) => {
                return Err(Error::SchemaError {
                    line: line_no,
                    field: "labels",
                    message: format!("expected {NUM_DISEASES} entries, got {}", y.len()),
                })
            }
            None => rule_based_labeler(&rec.report, &keyword_map),
        };
        let mut mentions = vec![false; n_categories];
        for o in &graph.objects {
            mentions[o.category] = true;
        }
        out.push(Sample {
            image_id: rec.image_id,
            image: Image::zeros(0, 0, 1),
            graph,
            report: rec.report,
            labels,
            mentions,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Vocabulary assembly

/// Report-token and attribute vocabularies built from one corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabBundle {
    pub tokens: TokenVocab,
    pub attributes: AttributeVocab,
}

pub fn build_vocab<S: Scalar>(samples: &[Sample<S>]) -> Result<VocabBundle> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_categories = samples[0].mentions.len();
    let tokens = TokenVocab::build(samples.iter().map(|s| s.report.as_str()), 1)?;
    let graphs: Vec<SceneGraph> = samples.iter().map(|s| s.graph.clone()).collect();
    let attributes = AttributeVocab::build(&graphs, n_categories);
    Ok(VocabBundle { tokens, attributes })
}

// ---------------------------------------------------------------------------
// Batch composition

/// Partition `0..samples.len()` into batches that tend to put same-category
/// regions together: shuffle, then stably sort by each sample's leading
/// category, chunk, and shuffle the chunk order. The contrastive objective
/// needs at least two subgraphs of one category per batch to bite.
pub fn collision_batches<S: Scalar>(
    samples: &[Sample<S>],
    batch_size: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.sort_by_key(|&i| {
        samples[i]
            .graph
            .objects
            .first()
            .map_or(usize::MAX, |o| o.category)
    });
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{patchify, roi_cells};
    use crate::scene_graph::{build_adjacency_mask, subgraph_labels};
    use std::collections::BTreeSet;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            canvas: 48,
            n_categories: 8,
            min_regions: 2,
            max_regions: 4,
            abnormal_rate: 0.4,
            noise: 0.02,
            seed,
        }
    }

    #[test]
    fn same_seed_reproduces_the_dataset_bitwise() {
        let a = generate_dataset::<f64>(&small_spec(5), 12);
        let b = generate_dataset::<f64>(&small_spec(5), 12);
        assert_eq!(a, b);
        let c = generate_dataset::<f64>(&small_spec(6), 12);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn zero_abnormal_rate_means_every_subgraph_is_normal() {
        let mut spec = small_spec(9);
        spec.abnormal_rate = 0.0;
        for s in generate_dataset::<f64>(&spec, 50) {
            assert!(subgraph_labels(&s.graph).unwrap().iter().all(|&l| l == 0));
            assert_eq!(s.labels, DiseaseLabels::zeros());
        }
    }

    #[test]
    fn abnormal_fraction_concentrates_near_the_rate() {
        let mut spec = SyntheticSpec::default();
        spec.seed = 17;
        let data = generate_dataset::<f64>(&spec, 1000);
        let mut total = 0usize;
        let mut abnormal = 0usize;
        for s in &data {
            for l in subgraph_labels(&s.graph).unwrap() {
                total += 1;
                abnormal += l as usize;
            }
        }
        let frac = abnormal as f64 / total as f64;
        assert!((frac - 0.3).abs() <= 0.05, "fraction {frac}");
    }

    #[test]
    fn one_sentence_per_object_naming_its_region() {
        for s in generate_dataset::<f64>(&small_spec(11), 30) {
            let sentences: Vec<&str> = s
                .report
                .split('.')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .collect();
            assert_eq!(sentences.len(), s.graph.num_objects());
            for (sent, obj) in sentences.iter().zip(&s.graph.objects) {
                assert!(
                    sent.contains(&region_name(obj.category)),
                    "{sent:?} should mention {:?}",
                    region_name(obj.category)
                );
            }
        }
    }

    #[test]
    fn report_text_agrees_with_the_rule_based_labeler() {
        let mut spec = small_spec(13);
        spec.abnormal_rate = 0.5;
        let map = KeywordMap::default_chest();
        assert_eq!(map.disease_names(), DEFAULT_DISEASES.to_vec());
        for s in generate_dataset::<f64>(&spec, 200) {
            assert_eq!(s.labels, rule_based_labeler(&s.report, &map), "{}", s.report);
        }
    }

    #[test]
    fn mentions_track_rendered_categories() {
        for s in generate_dataset::<f64>(&small_spec(19), 40) {
            let rendered: BTreeSet<usize> =
                s.graph.objects.iter().map(|o| o.category).collect();
            for (k, &m) in s.mentions.iter().enumerate() {
                assert_eq!(m, rendered.contains(&k));
            }
        }
    }

    #[test]
    fn every_sample_satisfies_graph_invariants() {
        for s in generate_dataset::<f64>(&small_spec(23), 50) {
            build_adjacency_mask(&s.graph).unwrap();
            subgraph_labels(&s.graph).unwrap();
            for o in &s.graph.objects {
                assert!(o.bbox.is_ordered());
                let n = s
                    .graph
                    .attributes
                    .iter()
                    .filter(|a| s.graph.objects[a.owner].category == o.category)
                    .count();
                assert!((2..=5).contains(&n), "{n} attributes");
            }
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_annotations() {
        let data = generate_dataset::<f64>(&small_spec(29), 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_jsonl(&data, &path).unwrap();
        let back = ingest_jsonl::<f64>(&path, 8).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.graph, b.graph);
            assert_eq!(a.report, b.report);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.image_id, b.image_id);
            assert_eq!(a.mentions, b.mentions);
        }
    }

    #[test]
    fn malformed_json_names_its_line() {
        let data = generate_dataset::<f64>(&small_spec(31), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut text = String::new();
        let rec = DatasetRecord::from_sample(&data[0]);
        text.push_str(&serde_json::to_string(&rec).unwrap());
        text.push_str("\nnot json\n");
        std::fs::write(&path, text).unwrap();
        match ingest_jsonl::<f64>(&path, 8) {
            Err(Error::ParseError { line: 2, .. }) => {}
            other => panic!("expected a parse error on line 2, got {other:?}"),
        }
    }

    #[test]
    fn unordered_bbox_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bbox.jsonl");
        let line = r#"{"image_id":"x","objects":[{"category":0,"bbox":[0.5,0.1,0.2,0.9],"attributes":["texture|yes|sharp|","size|yes|small|"]}],"report":"the right lung is sharp ."}"#;
        std::fs::write(&path, line).unwrap();
        match ingest_jsonl::<f64>(&path, 8) {
            Err(Error::SchemaError {
                line: 1,
                field: "bbox",
                ..
            }) => {}
            other => panic!("expected a bbox schema error on line 1, got {other:?}"),
        }
    }

    #[test]
    fn wrong_label_width_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let line = r#"{"image_id":"x","objects":[{"category":0,"bbox":[0.1,0.1,0.5,0.5],"attributes":["texture|yes|sharp|"]}],"report":"the right lung is sharp .","labels":[1,0]}"#;
        std::fs::write(&path, line).unwrap();
        match ingest_jsonl::<f64>(&path, 8) {
            Err(Error::SchemaError {
                line: 1,
                field: "labels",
                ..
            }) => {}
            other => panic!("expected a labels schema error, got {other:?}"),
        }
    }

    #[test]
    fn empty_reports_are_dropped_and_missing_labels_backfilled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let obj = r#"[{"category":1,"bbox":[0.1,0.1,0.5,0.5],"attributes":["texture|yes|coarse|","anatomical_finding|yes|pneumonia|"]}]"#;
        let a = format!(
            r#"{{"image_id":"a","objects":{obj},"report":"the left lung is coarse with pneumonia ."}}"#
        );
        let b = format!(r#"{{"image_id":"b","objects":{obj},"report":"   "}}"#);
        let c = format!(r#"{{"image_id":"c","objects":{obj},"report":"the left lung is coarse ."}}"#);
        std::fs::write(&path, format!("{a}\n{b}\n{c}\n")).unwrap();
        let got = ingest_jsonl::<f64>(&path, 8).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].image_id, "a");
        assert_eq!(got[1].image_id, "c");
        let pneumonia = disease_label_index("pneumonia");
        assert_eq!(got[0].labels.y[pneumonia], 1);
        assert_eq!(got[1].labels.y[pneumonia], 0);
    }

    #[test]
    fn vocab_build_is_deterministic_and_counts_match() {
        let data = generate_dataset::<f64>(&small_spec(37), 60);
        let a = build_vocab(&data).unwrap();
        let b = build_vocab(&data).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.id("the") >= 4);
        for k in 0..8 {
            let distinct: BTreeSet<String> = data
                .iter()
                .flat_map(|s| {
                    s.graph.attributes.iter().filter_map(move |at| {
                        (s.graph.objects[at.owner].category == k).then(|| at.serialized())
                    })
                })
                .collect();
            assert_eq!(a.attributes.n_attrs(k), distinct.len());
        }
        let empty: Vec<Sample<f64>> = Vec::new();
        assert!(matches!(build_vocab(&empty), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn signature_bank_is_stable_across_sizes() {
        let small = SignatureBank::new(4);
        let large = SignatureBank::new(29);
        for k in 0..4 {
            assert_eq!(small.category[k], large.category[k]);
            assert_eq!(small.wave[k], large.wave[k]);
        }
    }

    #[test]
    fn collision_batches_partition_and_collide() {
        let data = generate_dataset::<f64>(&small_spec(41), 200);
        let batches = collision_batches(&data, 8, 7);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        let full: Vec<&Vec<usize>> = batches.iter().filter(|b| b.len() == 8).collect();
        let colliding = full
            .iter()
            .filter(|b| {
                let cats: Vec<usize> = b
                    .iter()
                    .map(|&i| data[i].graph.objects[0].category)
                    .collect();
                cats.iter()
                    .any(|c| cats.iter().filter(|&&x| x == *c).count() >= 2)
            })
            .count();
        assert!(
            colliding as f64 >= 0.9 * full.len() as f64,
            "{colliding} of {}",
            full.len()
        );
    }

    /// A linear probe on RoI-averaged raw patch pixels must recover the
    /// attribute set of each region; the textures make the task well posed
    /// before any model training enters the picture.
    #[test]
    fn attribute_textures_are_linearly_decodable() {
        let mut spec = small_spec(33);
        spec.abnormal_rate = 0.5;
        let data = generate_dataset::<f64>(&spec, 1000);
        let vocab = build_vocab(&data).unwrap().attributes;
        let dim = TILE * TILE;
        let grid = spec.canvas / TILE;

        // Per-category design matrices: RoI-mean pixel features, multi-hot
        // slot targets.
        let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 8];
        let mut ys: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 8];
        for s in &data {
            let px = patchify(&s.image, TILE).unwrap();
            for (oi, o) in s.graph.objects.iter().enumerate() {
                let cells = roi_cells(grid, grid, &o.bbox).unwrap();
                let mut mean = vec![0.0; dim];
                for &c in &cells {
                    for (m, &v) in mean.iter_mut().zip(px.row(c)) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= cells.len() as f64;
                }
                let k = o.category;
                let mut y = vec![0.0; vocab.n_attrs(k)];
                for a in s.graph.attributes.iter().filter(|a| a.owner == oi) {
                    y[vocab.slot_of(k, &a.serialized()).unwrap()] = 1.0;
                }
                xs[k].push(mean);
                ys[k].push(y);
            }
        }

        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for k in 0..8 {
            let m = vocab.n_attrs(k);
            let n = xs[k].len();
            let train: Vec<usize> = (0..n).filter(|i| i % 5 != 0).collect();
            let eval: Vec<usize> = (0..n).filter(|i| i % 5 == 0).collect();
            let mut w = vec![0.0; dim * m];
            let mut b = vec![0.0; m];
            for _ in 0..300 {
                let mut gw = vec![0.0; dim * m];
                let mut gb = vec![0.0; m];
                for &i in &train {
                    for j in 0..m {
                        let mut z = b[j];
                        for (d, &x) in xs[k][i].iter().enumerate() {
                            z += x * w[d * m + j];
                        }
                        let e = 1.0 / (1.0 + (-z).exp()) - ys[k][i][j];
                        gb[j] += e;
                        for (d, &x) in xs[k][i].iter().enumerate() {
                            gw[d * m + j] += x * e;
                        }
                    }
                }
                let lr = 2.0 / train.len() as f64;
                for (wv, g) in w.iter_mut().zip(&gw) {
                    *wv -= lr * g;
                }
                for (bv, g) in b.iter_mut().zip(&gb) {
                    *bv -= lr * g;
                }
            }
            for &i in &eval {
                for j in 0..m {
                    let mut z = b[j];
                    for (d, &x) in xs[k][i].iter().enumerate() {
                        z += x * w[d * m + j];
                    }
                    let pred = z > 0.0;
                    let truth = ys[k][i][j] > 0.5;
                    match (pred, truth) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        (false, false) => {}
                    }
                }
            }
        }
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fneg as f64);
        assert!(f1 >= 0.95, "micro-F1 {f1}");
    }
}
