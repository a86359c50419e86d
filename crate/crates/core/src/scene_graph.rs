//! Radiology scene graphs: objects (anatomical-location instances), their
//! attribute nodes, adjacency masks for graph-aware attention, subgraph
//! partitions, and abnormality labels read off attribute templates.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Number of anatomical-location categories in the default label space.
pub const NUM_CATEGORIES: usize = 29;

/// Bounding box in normalized image coordinates, `[0, 1]` on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// Strictly positive extent on both axes.
    pub fn is_ordered(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// The seven attribute families. Only the first two can mark a subgraph
/// abnormal: an anatomical finding `|yes|<disease>|`, or the free-text-derived
/// status `|yes|abnormal|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeType {
    AnatomicalFinding,
    Nlp,
    Device,
    Technical,
    Texture,
    Size,
    Laterality,
}

impl AttributeType {
    pub const ALL: [AttributeType; 7] = [
        AttributeType::AnatomicalFinding,
        AttributeType::Nlp,
        AttributeType::Device,
        AttributeType::Technical,
        AttributeType::Texture,
        AttributeType::Size,
        AttributeType::Laterality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttributeType::AnatomicalFinding => "anatomical_finding",
            AttributeType::Nlp => "nlp",
            AttributeType::Device => "device",
            AttributeType::Technical => "technical",
            AttributeType::Texture => "texture",
            AttributeType::Size => "size",
            AttributeType::Laterality => "laterality",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.name() == s)
    }

    /// Whether this family participates in abnormality labeling.
    pub fn indicates_abnormality(&self) -> bool {
        matches!(self, AttributeType::AnatomicalFinding | AttributeType::Nlp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectNode {
    pub category: usize,
    pub bbox: BBox,
}

/// An attribute node; `owner` is the index of its object in
/// [`SceneGraph::objects`]. `raw` keeps the pipe-delimited template string,
/// e.g. `|yes|pneumothorax|` for an anatomical finding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeNode {
    pub attr_type: AttributeType,
    pub raw: String,
    pub owner: usize,
}

impl AttributeNode {
    /// Serialized form carried in JSON: the type name glued onto the raw
    /// template, e.g. `anatomical_finding|yes|pneumothorax|`.
    pub fn serialized(&self) -> String {
        format!("{}{}", self.attr_type.name(), self.raw)
    }

    /// Parse the serialized form back into type + raw template.
    pub fn parse_serialized(s: &str, owner: usize) -> Option<AttributeNode> {
        let bar = s.find('|')?;
        let attr_type = AttributeType::from_name(&s[..bar])?;
        Some(AttributeNode {
            attr_type,
            raw: s[bar..].to_string(),
            owner,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneGraph {
    pub objects: Vec<ObjectNode>,
    pub attributes: Vec<AttributeNode>,
}

/// What a mask/token index refers to: an object (by position in `objects`)
/// or an attribute (by position in `attributes`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRef {
    Object(usize),
    Attribute(usize),
}

/// Symmetric binary attention mask over the graph's token sequence, plus the
/// token order it is expressed in: objects `[0..N_o)` first, then attributes
/// grouped by owner in object order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyMask {
    n: usize,
    m: Vec<bool>,
    pub token_order: Vec<TokenRef>,
}

impl AdjacencyMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.m[i * self.n + j]
    }

    /// Row-major flattened view, for building attention masks.
    pub fn flat(&self) -> &[bool] {
        &self.m
    }

    /// Builds a mask from a row-major flattened connectivity matrix.
    pub fn from_flat(n: usize, m: Vec<bool>, token_order: Vec<TokenRef>) -> Self {
        assert_eq!(m.len(), n * n, "mask must be n-by-n");
        assert_eq!(token_order.len(), n, "token order must cover all nodes");
        AdjacencyMask { n, m, token_order }
    }
}

/// One subgraph: an object index plus the indices of its attributes, all into
/// the graph's own lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub object: usize,
    pub attributes: Vec<usize>,
}

impl SceneGraph {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Total token count N_s = N_o + N_a.
    pub fn num_tokens(&self) -> usize {
        self.objects.len() + self.attributes.len()
    }

    /// Check structural invariants against a category space of `n_categories`.
    pub fn validate(&self, n_categories: usize) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut seen = vec![false; n_categories];
        for o in &self.objects {
            if o.category >= n_categories {
                return Err(Error::UnknownCategory {
                    category: o.category,
                    known: n_categories,
                });
            }
            if seen[o.category] {
                return Err(Error::SchemaError {
                    line: 0,
                    field: "category",
                    message: format!("duplicate instance for category {}", o.category),
                });
            }
            seen[o.category] = true;
            if !o.bbox.is_ordered() {
                return Err(Error::DegenerateBox {
                    x0: o.bbox.x0,
                    y0: o.bbox.y0,
                    x1: o.bbox.x1,
                    y1: o.bbox.y1,
                });
            }
        }
        for a in &self.attributes {
            if a.owner >= self.objects.len() {
                return Err(Error::SchemaError {
                    line: 0,
                    field: "attributes",
                    message: format!("attribute owner {} out of range", a.owner),
                });
            }
        }
        Ok(())
    }
}

/// Build the adjacency mask: a token attends to itself, an object to its own
/// attributes, and an attribute to its owner. Sibling attributes are not
/// directly connected; they communicate through their object across layers.
pub fn build_adjacency_mask(graph: &SceneGraph) -> Result<AdjacencyMask> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let n_o = graph.num_objects();
    let order = token_order(graph);
    let n = order.len();
    let mut m = vec![false; n * n];
    for i in 0..n {
        m[i * n + i] = true;
    }
    for (pos, tok) in order.iter().enumerate() {
        if let TokenRef::Attribute(ai) = tok {
            let owner_pos = graph.attributes[*ai].owner;
            debug_assert!(owner_pos < n_o);
            m[pos * n + owner_pos] = true;
            m[owner_pos * n + pos] = true;
        }
    }
    Ok(AdjacencyMask {
        n,
        m,
        token_order: order,
    })
}

/// Token order shared by the mask, the encoder and the subgraph summarizer:
/// objects by instance index, then attributes grouped by owner in object
/// order (original relative order within an owner preserved).
pub fn token_order(graph: &SceneGraph) -> Vec<TokenRef> {
    let mut order: Vec<TokenRef> = (0..graph.num_objects()).map(TokenRef::Object).collect();
    for owner in 0..graph.num_objects() {
        for (ai, a) in graph.attributes.iter().enumerate() {
            if a.owner == owner {
                order.push(TokenRef::Attribute(ai));
            }
        }
    }
    order
}

/// Split the graph into per-object subgraphs, ordered by instance index; each
/// attribute lands in exactly its owner's partition.
pub fn partition_subgraphs(graph: &SceneGraph) -> Result<Vec<Subgraph>> {
    if graph.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut parts: Vec<Subgraph> = (0..graph.num_objects())
        .map(|object| Subgraph {
            object,
            attributes: Vec::new(),
        })
        .collect();
    for (ai, a) in graph.attributes.iter().enumerate() {
        parts[a.owner].attributes.push(ai);
    }
    Ok(parts)
}

/// Token positions (into the mask's token order) belonging to each subgraph:
/// the object token first, then its attribute tokens.
pub fn subgraph_token_groups(graph: &SceneGraph) -> Result<Vec<Vec<usize>>> {
    let parts = partition_subgraphs(graph)?;
    let n_o = graph.num_objects();
    let mut groups = vec![Vec::new(); n_o];
    for (g, part) in parts.iter().enumerate() {
        groups[g].push(part.object);
    }
    let mut pos = n_o;
    for owner in 0..n_o {
        for a in &graph.attributes {
            if a.owner == owner {
                groups[owner].push(pos);
                pos += 1;
            }
        }
    }
    Ok(groups)
}

/// Fields of a parsed `|flag|payload|` template.
pub struct ParsedTemplate<'a> {
    pub positive: bool,
    pub payload: &'a str,
}

/// Parse the two-field template used by abnormality-indicating attributes.
pub fn parse_template(raw: &str) -> Result<ParsedTemplate<'_>> {
    let malformed = |reason: &str| Error::MalformedAttribute {
        raw: raw.to_string(),
        reason: reason.to_string(),
    };
    let parts: Vec<&str> = raw.split('|').collect();
    if parts.len() != 4 || !parts[0].is_empty() || !parts[3].is_empty() {
        return Err(malformed("expected |flag|payload| form"));
    }
    let positive = match parts[1] {
        "yes" => true,
        "no" => false,
        _ => return Err(malformed("flag must be yes or no")),
    };
    if parts[2].is_empty() {
        return Err(malformed("empty payload"));
    }
    Ok(ParsedTemplate {
        positive,
        payload: parts[2],
    })
}

/// Abnormality label for one subgraph's attribute list: 1 iff an anatomical
/// finding is positively present, or the free-text status says `abnormal`.
pub fn extract_abnormality_label(attrs: &[AttributeNode]) -> Result<u8> {
    let mut abnormal = false;
    for a in attrs {
        match a.attr_type {
            AttributeType::AnatomicalFinding => {
                let t = parse_template(&a.raw)?;
                if t.positive {
                    abnormal = true;
                }
            }
            AttributeType::Nlp => {
                let t = parse_template(&a.raw)?;
                if t.payload != "normal" && t.payload != "abnormal" {
                    return Err(Error::MalformedAttribute {
                        raw: a.raw.clone(),
                        reason: "status payload must be normal or abnormal".to_string(),
                    });
                }
                if t.positive && t.payload == "abnormal" {
                    abnormal = true;
                }
            }
            _ => {}
        }
    }
    Ok(u8::from(abnormal))
}

/// Abnormality labels for every subgraph, in instance order.
pub fn subgraph_labels(graph: &SceneGraph) -> Result<Vec<u8>> {
    let parts = partition_subgraphs(graph)?;
    parts
        .iter()
        .map(|p| {
            let attrs: Vec<AttributeNode> = p
                .attributes
                .iter()
                .map(|&ai| graph.attributes[ai].clone())
                .collect();
            extract_abnormality_label(&attrs)
        })
        .collect()
}

/// A detected region before graph assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub category: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Collapse duplicate detections per category: keep the highest score, break
/// ties by smaller box area, then by earlier position. Output preserves the
/// first-occurrence order of the surviving categories.
pub fn dedupe_detections(dets: &[Detection]) -> Vec<Detection> {
    let mut best: Vec<Option<usize>> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        if d.category >= best.len() {
            best.resize(d.category + 1, None);
        }
        match best[d.category] {
            None => best[d.category] = Some(i),
            Some(j) => {
                let cur = &dets[j];
                let wins = d.score > cur.score
                    || (d.score == cur.score && d.bbox.area() < cur.bbox.area());
                if wins {
                    best[d.category] = Some(i);
                }
            }
        }
    }
    let mut keep: Vec<usize> = best.into_iter().flatten().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| dets[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// JSON-lines schema

/// One graph as serialized on a JSON line:
/// `{"image_id": ..., "objects": [{"category", "bbox", "attributes"}]}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GraphRecord {
    pub image_id: String,
    pub objects: Vec<ObjectRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ObjectRecord {
    pub category: usize,
    pub bbox: [f64; 4],
    pub attributes: Vec<String>,
}

impl GraphRecord {
    pub fn from_graph(image_id: &str, graph: &SceneGraph) -> Self {
        let mut objects = Vec::with_capacity(graph.num_objects());
        for (oi, o) in graph.objects.iter().enumerate() {
            let attributes = graph
                .attributes
                .iter()
                .filter(|a| a.owner == oi)
                .map(|a| a.serialized())
                .collect();
            objects.push(ObjectRecord {
                category: o.category,
                bbox: [o.bbox.x0, o.bbox.y0, o.bbox.x1, o.bbox.y1],
                attributes,
            });
        }
        GraphRecord {
            image_id: image_id.to_string(),
            objects,
        }
    }

    /// Rebuild the in-memory graph; `line` is used for error reporting.
    pub fn to_graph(&self, line: usize, n_categories: usize) -> Result<SceneGraph> {
        let mut graph = SceneGraph::default();
        for rec in &self.objects {
            if rec.category >= n_categories {
                return Err(Error::SchemaError {
                    line,
                    field: "category",
                    message: format!("{} out of range (max {})", rec.category, n_categories - 1),
                });
            }
            let [x0, y0, x1, y1] = rec.bbox;
            if !(x0 < x1) || !(y0 < y1) {
                return Err(Error::SchemaError {
                    line,
                    field: "bbox",
                    message: format!("box [{x0}, {y0}, {x1}, {y1}] is not min < max"),
                });
            }
            let owner = graph.objects.len();
            graph.objects.push(ObjectNode {
                category: rec.category,
                bbox: BBox::new(x0, y0, x1, y1),
            });
            for s in &rec.attributes {
                match AttributeNode::parse_serialized(s, owner) {
                    Some(a) => graph.attributes.push(a),
                    None => {
                        return Err(Error::SchemaError {
                            line,
                            field: "attributes",
                            message: format!("unrecognized attribute string {s:?}"),
                        })
                    }
                }
            }
        }
        if graph.objects.iter().map(|o| o.category).collect::<std::collections::BTreeSet<_>>().len()
            != graph.objects.len()
        {
            // Ingested data may legitimately carry duplicates; collapse them
            // with the standard rule (annotation score absent, so all equal).
            let dets: Vec<Detection> = graph
                .objects
                .iter()
                .map(|o| Detection {
                    category: o.category,
                    bbox: o.bbox,
                    score: 1.0,
                })
                .collect();
            let kept = dedupe_detections(&dets);
            let mut new_graph = SceneGraph::default();
            for d in kept {
                let old_idx = graph
                    .objects
                    .iter()
                    .position(|o| o.category == d.category && o.bbox == d.bbox)
                    .unwrap();
                let new_idx = new_graph.objects.len();
                new_graph.objects.push(graph.objects[old_idx].clone());
                for a in graph.attributes.iter().filter(|a| a.owner == old_idx) {
                    let mut a = a.clone();
                    a.owner = new_idx;
                    new_graph.attributes.push(a);
                }
            }
            return Ok(new_graph);
        }
        Ok(graph)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_object_graph() -> SceneGraph {
        SceneGraph {
            objects: vec![
                ObjectNode {
                    category: 3,
                    bbox: BBox::new(0.1, 0.1, 0.4, 0.5),
                },
                ObjectNode {
                    category: 7,
                    bbox: BBox::new(0.5, 0.2, 0.9, 0.8),
                },
            ],
            attributes: vec![
                AttributeNode {
                    attr_type: AttributeType::Nlp,
                    raw: "|yes|normal|".into(),
                    owner: 0,
                },
                AttributeNode {
                    attr_type: AttributeType::Texture,
                    raw: "|yes|homogeneous|".into(),
                    owner: 0,
                },
                AttributeNode {
                    attr_type: AttributeType::AnatomicalFinding,
                    raw: "|yes|pneumothorax|".into(),
                    owner: 1,
                },
            ],
        }
    }

    #[test]
    fn mask_connects_objects_to_their_attributes_only() {
        let g = two_object_graph();
        let m = build_adjacency_mask(&g).unwrap();
        assert_eq!(m.len(), 5);
        // order [o0, o1, a0, a1, a2]
        assert!(m.at(0, 2) && m.at(0, 3) && m.at(1, 4));
        assert!(m.at(2, 0) && m.at(3, 0) && m.at(4, 1));
        assert!(!m.at(0, 1), "objects are never directly connected");
        assert!(!m.at(2, 3), "sibling attributes are not directly connected");
        assert!(!m.at(0, 4) && !m.at(1, 2));
        for i in 0..5 {
            assert!(m.at(i, i));
        }
    }

    #[test]
    fn single_object_no_attributes_is_a_self_loop() {
        let g = SceneGraph {
            objects: vec![ObjectNode {
                category: 0,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            }],
            attributes: vec![],
        };
        let m = build_adjacency_mask(&g).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.at(0, 0));
    }

    #[test]
    fn empty_graph_is_rejected() {
        let g = SceneGraph::default();
        assert!(matches!(build_adjacency_mask(&g), Err(Error::EmptyGraph)));
        assert!(matches!(partition_subgraphs(&g), Err(Error::EmptyGraph)));
    }

    #[test]
    fn partitions_follow_ownership() {
        let g = two_object_graph();
        let parts = partition_subgraphs(&g).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].attributes, vec![0, 1]);
        assert_eq!(parts[1].attributes, vec![2]);
    }

    #[test]
    fn attribute_counts_are_conserved() {
        let mut g = two_object_graph();
        g.objects.push(ObjectNode {
            category: 11,
            bbox: BBox::new(0.2, 0.6, 0.5, 0.9),
        });
        for i in 0..6 {
            g.attributes.push(AttributeNode {
                attr_type: AttributeType::Size,
                raw: format!("|yes|s{i}|"),
                owner: i % 3,
            });
        }
        let parts = partition_subgraphs(&g).unwrap();
        let total: usize = parts.iter().map(|p| p.attributes.len()).sum();
        assert_eq!(total, g.num_attributes());
    }

    #[test]
    fn positive_finding_marks_abnormal() {
        let attrs = vec![AttributeNode {
            attr_type: AttributeType::AnatomicalFinding,
            raw: "|yes|pneumothorax|".into(),
            owner: 0,
        }];
        assert_eq!(extract_abnormality_label(&attrs).unwrap(), 1);
    }

    #[test]
    fn normal_status_stays_normal() {
        let attrs = vec![AttributeNode {
            attr_type: AttributeType::Nlp,
            raw: "|yes|normal|".into(),
            owner: 0,
        }];
        assert_eq!(extract_abnormality_label(&attrs).unwrap(), 0);
    }

    #[test]
    fn empty_or_neutral_attributes_default_to_normal() {
        assert_eq!(extract_abnormality_label(&[]).unwrap(), 0);
        let attrs = vec![AttributeNode {
            attr_type: AttributeType::Device,
            raw: "|yes|surgical clip|".into(),
            owner: 0,
        }];
        assert_eq!(extract_abnormality_label(&attrs).unwrap(), 0);
    }

    #[test]
    fn negated_finding_and_negated_status_stay_normal() {
        let attrs = vec![
            AttributeNode {
                attr_type: AttributeType::AnatomicalFinding,
                raw: "|no|pneumothorax|".into(),
                owner: 0,
            },
            AttributeNode {
                attr_type: AttributeType::Nlp,
                raw: "|no|abnormal|".into(),
                owner: 0,
            },
        ];
        assert_eq!(extract_abnormality_label(&attrs).unwrap(), 0);
    }

    #[test]
    fn malformed_indicative_attribute_is_an_error() {
        let attrs = vec![AttributeNode {
            attr_type: AttributeType::AnatomicalFinding,
            raw: "|maybe|pneumothorax|".into(),
            owner: 0,
        }];
        assert!(matches!(
            extract_abnormality_label(&attrs),
            Err(Error::MalformedAttribute { .. })
        ));
        let attrs = vec![AttributeNode {
            attr_type: AttributeType::Nlp,
            raw: "|yes|cloudy|".into(),
            owner: 0,
        }];
        assert!(matches!(
            extract_abnormality_label(&attrs),
            Err(Error::MalformedAttribute { .. })
        ));
    }

    #[test]
    fn dedupe_keeps_best_score_then_smallest_area() {
        let dets = vec![
            Detection {
                category: 2,
                bbox: BBox::new(0.0, 0.0, 0.5, 0.5),
                score: 0.7,
            },
            Detection {
                category: 2,
                bbox: BBox::new(0.0, 0.0, 0.4, 0.4),
                score: 0.9,
            },
            Detection {
                category: 5,
                bbox: BBox::new(0.1, 0.1, 0.9, 0.9),
                score: 0.5,
            },
            Detection {
                category: 5,
                bbox: BBox::new(0.2, 0.2, 0.6, 0.6),
                score: 0.5,
            },
        ];
        let kept = dedupe_detections(&dets);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9, "higher score wins for category 2");
        assert_eq!(
            kept[1].bbox,
            BBox::new(0.2, 0.2, 0.6, 0.6),
            "tied score falls back to smaller area"
        );
    }

    #[test]
    fn serialized_attribute_round_trips() {
        let a = AttributeNode {
            attr_type: AttributeType::AnatomicalFinding,
            raw: "|yes|pleural effusion|".into(),
            owner: 4,
        };
        let s = a.serialized();
        assert_eq!(s, "anatomical_finding|yes|pleural effusion|");
        let back = AttributeNode::parse_serialized(&s, 4).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn mask_and_partitions_agree() {
        let g = two_object_graph();
        let mask = build_adjacency_mask(&g).unwrap();
        let groups = subgraph_token_groups(&g).unwrap();
        let n = mask.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let connected = mask.at(i, j);
                let same_part_with_object = groups.iter().any(|grp| {
                    grp.contains(&i) && grp.contains(&j) && (grp[0] == i || grp[0] == j)
                });
                assert_eq!(connected, same_part_with_object, "pair ({i}, {j})");
            }
        }
    }
}
