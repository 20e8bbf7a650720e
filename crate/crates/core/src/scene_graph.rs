//! Scene-graph data model and ingestion of CLEVR-style scene annotations.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, UNKNOWN_LABEL};
use crate::error::{Error, Result};

pub const CLEVR_RELATIONS: [&str; 4] = ["left", "right", "front", "behind"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered attribute names, their legal values, and the relation vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    relations: Vec<String>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>, relations: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("schema needs at least one attribute".into()));
        }
        let mut names = HashSet::new();
        for attr in &attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(Error::Config(format!("duplicate attribute {:?}", attr.name)));
            }
            if attr.values.is_empty() {
                return Err(Error::Config(format!("attribute {:?} has no values", attr.name)));
            }
            let mut seen = HashSet::new();
            for v in &attr.values {
                if !valid_label(v) {
                    return Err(Error::Config(format!("illegal value label {v:?}")));
                }
                if !seen.insert(v.as_str()) {
                    return Err(Error::Config(format!("duplicate value {v:?}")));
                }
            }
        }
        if relations.is_empty() {
            return Err(Error::Config("schema needs at least one relation".into()));
        }
        let mut seen = HashSet::new();
        for r in &relations {
            if !valid_label(r) || !seen.insert(r.as_str()) {
                return Err(Error::Config(format!("illegal or duplicate relation {r:?}")));
            }
        }
        Ok(AttributeSchema {
            attributes,
            relations,
        })
    }

    /// CLEVR v1.0: size, color, material, shape and the four spatial relations.
    pub fn clevr() -> Self {
        let attr = |name: &str, values: &[&str]| Attribute {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        };
        AttributeSchema::new(
            vec![
                attr("size", &["small", "large"]),
                attr(
                    "color",
                    &[
                        "gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow",
                    ],
                ),
                attr("material", &["rubber", "metal"]),
                attr("shape", &["cube", "sphere", "cylinder"]),
            ],
            CLEVR_RELATIONS.iter().map(|r| r.to_string()).collect(),
        )
        .expect("built-in schema is valid")
    }

    /// M, the number of attributes per node.
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn values(&self, attribute: usize) -> &[String] {
        &self.attributes[attribute].values
    }

    pub fn is_legal(&self, attribute: usize, value: &str) -> bool {
        self.attributes[attribute].values.iter().any(|v| v == value)
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_index(&self, label: &str) -> Option<usize> {
        self.relations.iter().position(|r| r == label)
    }

    /// Every attribute value and relation label, for populating embedding tables.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.attributes
            .iter()
            .flat_map(|a| a.values.iter().map(String::as_str))
            .chain(self.relations.iter().map(String::as_str))
    }

    /// Size of the attribute-value product space (upper bound on distinct nodes).
    pub fn value_space_size(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).product()
    }
}

impl Default for AttributeSchema {
    fn default() -> Self {
        Self::clevr()
    }
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace) && s != UNKNOWN_LABEL
}

/// One object: an attribute value per schema attribute, in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectNode {
    pub values: Vec<String>,
}

impl ObjectNode {
    pub fn new<S: Into<String>>(values: impl IntoIterator<Item = S>) -> Self {
        ObjectNode {
            values: values.into_iter().map(Into::into).collect(),
        }
    }

    /// Canonical identity: values joined by single spaces. Values never contain
    /// whitespace, so this is injective over value tuples.
    pub fn node_key(&self) -> String {
        self.values.join(" ")
    }

    fn validate(&self, schema: &AttributeSchema, image_id: u64) -> Result<()> {
        if self.values.len() != schema.num_attributes() {
            return Err(Error::Schema {
                image_id,
                message: format!(
                    "object has {} attribute values, schema has {}",
                    self.values.len(),
                    schema.num_attributes()
                ),
            });
        }
        for (i, v) in self.values.iter().enumerate() {
            if !schema.is_legal(i, v) {
                return Err(Error::Schema {
                    image_id,
                    message: format!(
                        "value {v:?} is not legal for attribute {:?}",
                        schema.attributes[i].name
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Directed spatial relation: `head` is `relation` of `tail`
/// (e.g. head is left of tail).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationEdge {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

impl RelationEdge {
    pub fn new(head: usize, relation: impl Into<String>, tail: usize) -> Self {
        RelationEdge {
            head,
            relation: relation.into(),
            tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: u64,
    pub nodes: Vec<ObjectNode>,
    pub edges: Vec<RelationEdge>,
}

impl SceneGraph {
    /// Validates against the schema; duplicate triples are dropped keeping the first.
    pub fn new(
        image_id: u64,
        nodes: Vec<ObjectNode>,
        edges: Vec<RelationEdge>,
        schema: &AttributeSchema,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Schema {
                image_id,
                message: "scene has no objects".into(),
            });
        }
        for node in &nodes {
            node.validate(schema, image_id)?;
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(edges.len());
        for edge in edges {
            if edge.head >= nodes.len() || edge.tail >= nodes.len() {
                return Err(Error::Schema {
                    image_id,
                    message: format!(
                        "edge ({}, {}, {}) references a missing object",
                        edge.head, edge.relation, edge.tail
                    ),
                });
            }
            if edge.head == edge.tail {
                return Err(Error::Schema {
                    image_id,
                    message: format!("self relation on object {}", edge.head),
                });
            }
            if schema.relation_index(&edge.relation).is_none() {
                return Err(Error::Schema {
                    image_id,
                    message: format!("unknown relation {:?}", edge.relation),
                });
            }
            if seen.insert(edge.clone()) {
                kept.push(edge);
            }
        }
        Ok(SceneGraph {
            image_id,
            nodes,
            edges: kept,
        })
    }

    pub fn node_keys(&self) -> Vec<String> {
        self.nodes.iter().map(ObjectNode::node_key).collect()
    }

    /// Edges as `(head_key, relation, tail_key)`.
    pub fn keyed_triples(&self) -> Vec<(String, String, String)> {
        self.edges
            .iter()
            .map(|e| {
                (
                    self.nodes[e.head].node_key(),
                    e.relation.clone(),
                    self.nodes[e.tail].node_key(),
                )
            })
            .collect()
    }

    /// Order-free identity used for deduplication: sorted node keys (with
    /// multiplicity) and the sorted set of keyed triples.
    pub fn signature(&self) -> (Vec<String>, Vec<(String, String, String)>) {
        let mut keys = self.node_keys();
        keys.sort();
        let mut triples = self.keyed_triples();
        triples.sort();
        triples.dedup();
        (keys, triples)
    }
}

/// M×N node representation plus the known-attribute mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix {
    values: Vec<f64>,
    mask: Vec<bool>,
    dimension: usize,
}

impl NodeMatrix {
    /// `rows[i] = None` marks attribute i unknown; its row is zero.
    pub fn from_rows(rows: &[Option<&[f64]>], dimension: usize) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * dimension);
        let mut mask = Vec::with_capacity(rows.len());
        for row in rows {
            match row {
                Some(r) => {
                    if r.len() != dimension {
                        return Err(Error::Argument(format!(
                            "row has {} components, expected {dimension}",
                            r.len()
                        )));
                    }
                    if r.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Argument("non-finite embedding component".into()));
                    }
                    values.extend_from_slice(r);
                    mask.push(true);
                }
                None => {
                    values.extend(std::iter::repeat(0.0).take(dimension));
                    mask.push(false);
                }
            }
        }
        Ok(NodeMatrix {
            values,
            mask,
            dimension,
        })
    }

    /// Matrix for attribute labels, `None` meaning unknown.
    pub fn from_labels(labels: &[Option<&str>], table: &EmbeddingTable) -> Result<Self> {
        let looked_up = labels
            .iter()
            .map(|l| l.map(|l| table.lookup(l)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Option<&[f64]>> = looked_up.iter().map(|r| r.as_deref()).collect();
        Self::from_rows(&rows, table.dimension())
    }

    pub fn num_rows(&self) -> usize {
        self.mask.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_known(&self, i: usize) -> bool {
        self.mask[i]
    }

    /// Row-major flattening of all M rows.
    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// Overwrites a row without touching the mask. Used to probe that masked
    /// rows carry no signal.
    pub fn set_row(&mut self, i: usize, row: &[f64]) {
        assert_eq!(row.len(), self.dimension);
        self.values[i * self.dimension..(i + 1) * self.dimension].copy_from_slice(row);
    }
}

/// Fully specified matrix for a catalog object.
pub fn node_matrix(
    node: &ObjectNode,
    schema: &AttributeSchema,
    table: &EmbeddingTable,
) -> Result<NodeMatrix> {
    if node.values.len() != schema.num_attributes() {
        return Err(Error::Argument(format!(
            "node has {} values, schema has {} attributes",
            node.values.len(),
            schema.num_attributes()
        )));
    }
    let labels: Vec<Option<&str>> = node.values.iter().map(|v| Some(v.as_str())).collect();
    NodeMatrix::from_labels(&labels, table)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep at most this many outgoing edges per object (first in file order).
    pub max_edges_per_node: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenesDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    info: Option<serde_json::Value>,
    scenes: Vec<RawScene>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawScene {
    image_index: u64,
    objects: Vec<serde_json::Map<String, serde_json::Value>>,
    #[serde(default)]
    relationships: BTreeMap<String, Vec<Vec<usize>>>,
}

pub fn load_clevr_scenes(
    path: impl AsRef<Path>,
    schema: &AttributeSchema,
    options: LoadOptions,
) -> Result<Vec<SceneGraph>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let doc: ScenesDocument = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(Some(e.line()), e.to_string()))?;
    doc.scenes
        .into_iter()
        .map(|raw| scene_from_raw(raw, schema, options))
        .collect()
}

pub fn parse_clevr_scenes(
    text: &str,
    schema: &AttributeSchema,
    options: LoadOptions,
) -> Result<Vec<SceneGraph>> {
    let doc: ScenesDocument =
        serde_json::from_str(text).map_err(|e| Error::parse(Some(e.line()), e.to_string()))?;
    doc.scenes
        .into_iter()
        .map(|raw| scene_from_raw(raw, schema, options))
        .collect()
}

fn scene_from_raw(
    raw: RawScene,
    schema: &AttributeSchema,
    options: LoadOptions,
) -> Result<SceneGraph> {
    let image_id = raw.image_index;
    let n = raw.objects.len();
    let nodes = raw
        .objects
        .iter()
        .enumerate()
        .map(|(idx, obj)| {
            let values = schema
                .attributes()
                .iter()
                .map(|attr| match obj.get(&attr.name) {
                    Some(serde_json::Value::String(s)) => Ok(s.clone()),
                    Some(other) => Err(Error::Schema {
                        image_id,
                        message: format!(
                            "object {idx}: attribute {:?} is not a string: {other}",
                            attr.name
                        ),
                    }),
                    None => Err(Error::Schema {
                        image_id,
                        message: format!("object {idx}: missing attribute {:?}", attr.name),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ObjectNode { values })
        })
        .collect::<Result<Vec<_>>>()?;

    // relationships[rel][i] lists the objects j that stand in `rel` to object i,
    // i.e. "j is rel of i", materialized as the edge (j, rel, i).
    let mut edges = Vec::new();
    for rel in schema.relations() {
        let Some(lists) = raw.relationships.get(rel) else {
            continue;
        };
        if lists.len() != n {
            return Err(Error::parse(
                None,
                format!(
                    "image {image_id}: relation {rel:?} has {} lists for {n} objects",
                    lists.len()
                ),
            ));
        }
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j >= n {
                    return Err(Error::parse(
                        None,
                        format!("image {image_id}: relation {rel:?} references object {j}"),
                    ));
                }
                edges.push(RelationEdge::new(j, rel.clone(), i));
            }
        }
    }
    if let Some(rel) = raw
        .relationships
        .keys()
        .find(|r| schema.relation_index(r).is_none())
    {
        return Err(Error::Schema {
            image_id,
            message: format!("unknown relation {rel:?}"),
        });
    }

    let mut scene = SceneGraph::new(image_id, nodes, edges, schema)?;
    if let Some(limit) = options.max_edges_per_node {
        let mut per_head = vec![0usize; scene.nodes.len()];
        scene.edges.retain(|e| {
            per_head[e.head] += 1;
            per_head[e.head] <= limit
        });
    }
    Ok(scene)
}

/// Serializes scenes in the CLEVR annotation layout.
pub fn clevr_scenes_json(scenes: &[SceneGraph], schema: &AttributeSchema) -> Result<String> {
    let raw: Vec<RawScene> = scenes
        .iter()
        .map(|scene| {
            let objects = scene
                .nodes
                .iter()
                .map(|node| {
                    schema
                        .attributes()
                        .iter()
                        .zip(&node.values)
                        .map(|(a, v)| (a.name.clone(), serde_json::Value::String(v.clone())))
                        .collect()
                })
                .collect();
            let mut relationships = BTreeMap::new();
            for rel in schema.relations() {
                let mut lists = vec![Vec::new(); scene.nodes.len()];
                for e in scene.edges.iter().filter(|e| &e.relation == rel) {
                    lists[e.tail].push(e.head);
                }
                lists.iter_mut().for_each(|l| l.sort_unstable());
                relationships.insert(rel.clone(), lists);
            }
            RawScene {
                image_index: scene.image_id,
                objects,
                relationships,
            }
        })
        .collect();
    let doc = ScenesDocument {
        info: None,
        scenes: raw,
    };
    serde_json::to_string(&doc).map_err(|e| Error::parse(None, e.to_string()))
}

pub fn write_clevr_scenes(
    path: impl AsRef<Path>,
    scenes: &[SceneGraph],
    schema: &AttributeSchema,
) -> Result<()> {
    let path = path.as_ref();
    let text = clevr_scenes_json(scenes, schema)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
