//! The consolidated catalog graph.
//!
//! Every image's scene graph is folded into one graph whose nodes are keyed by
//! their attribute tuple, so identical objects from different images collapse
//! into a single node. Each node and `(head, relation, tail)` triple carries an
//! inverted index of the images containing it, and each image keeps the list of
//! catalog nodes (with multiplicity) and triples it is made of, which is enough
//! to recover its original scene graph.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scene_graph::{node_matrix, AttributeSchema, NodeMatrix, ObjectNode, SceneGraph};

pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CatalogNode {
    pub node_key: String,
    pub object: ObjectNode,
    pub matrix: NodeMatrix,
    /// `(image_id, local node index)`, sorted.
    pub postings: Vec<(u64, usize)>,
}

impl CatalogNode {
    /// Distinct images containing this node, ascending.
    pub fn images(&self) -> impl Iterator<Item = u64> + '_ {
        let mut last = None;
        self.postings.iter().filter_map(move |&(id, _)| {
            if last == Some(id) {
                None
            } else {
                last = Some(id);
                Some(id)
            }
        })
    }
}

/// Triple over catalog node indices and a schema relation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleKey {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone)]
pub struct CatalogTriple {
    pub key: TripleKey,
    /// Sorted, distinct image ids.
    pub postings: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct CatalogImage {
    pub image_id: u64,
    /// Catalog node indices in the order of the source scene's objects.
    pub nodes: Vec<usize>,
    /// Catalog triple indices, sorted and distinct.
    pub triples: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct CatalogGraph {
    schema: AttributeSchema,
    embedding_fingerprint: u64,
    dimension: usize,
    nodes: Vec<CatalogNode>,
    node_index: HashMap<String, usize>,
    triples: Vec<CatalogTriple>,
    triple_index: HashMap<TripleKey, usize>,
    images: Vec<CatalogImage>,
    image_index: HashMap<u64, usize>,
    relation_vectors: Vec<Vec<f64>>,
}

/// Borrowed view of one image's subgraph.
#[derive(Debug, Clone)]
pub struct ImageSubgraph<'a> {
    pub nodes: Vec<&'a CatalogNode>,
    pub triples: Vec<&'a CatalogTriple>,
}

pub fn build_catalog(
    scenes: &[SceneGraph],
    schema: &AttributeSchema,
    table: &EmbeddingTable,
) -> Result<CatalogGraph> {
    if scenes.is_empty() {
        return Err(Error::Build("no scenes to index".into()));
    }

    // Collect distinct nodes and triples, keyed by strings first so that the
    // final index order is canonical (sorted by key).
    let mut node_objects: BTreeMap<String, ObjectNode> = BTreeMap::new();
    let mut seen_ids = HashMap::with_capacity(scenes.len());
    for scene in scenes {
        if seen_ids.insert(scene.image_id, ()).is_some() {
            return Err(Error::Build(format!("duplicate image id {}", scene.image_id)));
        }
        if scene.nodes.is_empty() {
            return Err(Error::Build(format!("image {} has no objects", scene.image_id)));
        }
        for node in &scene.nodes {
            if node.values.len() != schema.num_attributes()
                || node.values.iter().enumerate().any(|(i, v)| !schema.is_legal(i, v))
            {
                return Err(Error::Schema {
                    image_id: scene.image_id,
                    message: format!("object {:?} does not fit the schema", node.values),
                });
            }
            node_objects
                .entry(node.node_key())
                .or_insert_with(|| node.clone());
        }
    }

    let mut nodes = node_objects
        .into_iter()
        .map(|(key, object)| {
            let matrix = node_matrix(&object, schema, table)?;
            Ok(CatalogNode {
                node_key: key,
                object,
                matrix,
                postings: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let node_index: HashMap<String, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_key.clone(), i))
        .collect();

    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.sort_by_key(|&i| scenes[i].image_id);

    let mut triple_postings: BTreeMap<TripleKey, Vec<u64>> = BTreeMap::new();
    let mut image_nodes = Vec::with_capacity(scenes.len());
    let mut image_triple_keys = Vec::with_capacity(scenes.len());
    for &si in &order {
        let scene = &scenes[si];
        let local: Vec<usize> = scene
            .nodes
            .iter()
            .map(|n| node_index[&n.node_key()])
            .collect();
        for (li, &ci) in local.iter().enumerate() {
            nodes[ci].postings.push((scene.image_id, li));
        }
        let mut keys = Vec::with_capacity(scene.edges.len());
        for edge in &scene.edges {
            let relation = schema.relation_index(&edge.relation).ok_or_else(|| Error::Schema {
                image_id: scene.image_id,
                message: format!("unknown relation {:?}", edge.relation),
            })?;
            if edge.head >= local.len() || edge.tail >= local.len() {
                return Err(Error::Build(format!(
                    "image {}: edge endpoint out of range",
                    scene.image_id
                )));
            }
            keys.push(TripleKey {
                head: local[edge.head],
                relation,
                tail: local[edge.tail],
            });
        }
        keys.sort_unstable();
        keys.dedup();
        for key in &keys {
            let postings = triple_postings.entry(*key).or_default();
            if postings.last() != Some(&scene.image_id) {
                postings.push(scene.image_id);
            }
        }
        image_nodes.push((scene.image_id, local));
        image_triple_keys.push(keys);
    }

    let triples: Vec<CatalogTriple> = triple_postings
        .into_iter()
        .map(|(key, postings)| CatalogTriple { key, postings })
        .collect();
    let triple_index: HashMap<TripleKey, usize> =
        triples.iter().enumerate().map(|(i, t)| (t.key, i)).collect();

    let images: Vec<CatalogImage> = image_nodes
        .into_iter()
        .zip(image_triple_keys)
        .map(|((image_id, nodes), keys)| CatalogImage {
            image_id,
            nodes,
            // Keys are sorted and triple indices follow key order.
            triples: keys.iter().map(|k| triple_index[k]).collect(),
        })
        .collect();

    CatalogGraph::assemble(
        schema.clone(),
        table,
        nodes,
        triples,
        images,
    )
}

impl CatalogGraph {
    fn assemble(
        schema: AttributeSchema,
        table: &EmbeddingTable,
        nodes: Vec<CatalogNode>,
        triples: Vec<CatalogTriple>,
        images: Vec<CatalogImage>,
    ) -> Result<Self> {
        let relation_vectors = schema
            .relations()
            .iter()
            .map(|r| table.lookup(r).map(|v| v.into_owned()))
            .collect::<Result<Vec<_>>>()?;
        let node_index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_key.clone(), i))
            .collect();
        let triple_index = triples.iter().enumerate().map(|(i, t)| (t.key, i)).collect();
        let image_index = images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.image_id, i))
            .collect();
        Ok(CatalogGraph {
            schema,
            embedding_fingerprint: table.fingerprint(),
            dimension: table.dimension(),
            nodes,
            node_index,
            triples,
            triple_index,
            images,
            image_index,
            relation_vectors,
        })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn embedding_fingerprint(&self) -> u64 {
        self.embedding_fingerprint
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nodes(&self) -> &[CatalogNode] {
        &self.nodes
    }

    pub fn triples(&self) -> &[CatalogTriple] {
        &self.triples
    }

    /// Images in ascending id order.
    pub fn images(&self) -> &[CatalogImage] {
        &self.images
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn node_by_key(&self, key: &str) -> Option<usize> {
        self.node_index.get(key).copied()
    }

    pub fn triple_by_key(&self, key: TripleKey) -> Option<usize> {
        self.triple_index.get(&key).copied()
    }

    /// Triple lookup by string keys.
    pub fn triple_by_labels(&self, head: &str, relation: &str, tail: &str) -> Option<usize> {
        let key = TripleKey {
            head: self.node_by_key(head)?,
            relation: self.schema.relation_index(relation)?,
            tail: self.node_by_key(tail)?,
        };
        self.triple_by_key(key)
    }

    pub fn image_position(&self, image_id: u64) -> Option<usize> {
        self.image_index.get(&image_id).copied()
    }

    pub fn image(&self, image_id: u64) -> Result<&CatalogImage> {
        self.image_position(image_id)
            .map(|i| &self.images[i])
            .ok_or_else(|| Error::Lookup(format!("image {image_id} is not in the catalog")))
    }

    /// Embedding of relation `index` in schema order.
    pub fn relation_vector(&self, index: usize) -> &[f64] {
        &self.relation_vectors[index]
    }

    /// `(head_key, relation, tail_key)` for a catalog triple.
    pub fn triple_labels(&self, index: usize) -> (&str, &str, &str) {
        let key = self.triples[index].key;
        (
            &self.nodes[key.head].node_key,
            &self.schema.relations()[key.relation],
            &self.nodes[key.tail].node_key,
        )
    }

    /// Nodes (with multiplicity, scene order) and triples of one image.
    pub fn image_subgraph(&self, image_id: u64) -> Result<ImageSubgraph<'_>> {
        let image = self.image(image_id)?;
        Ok(ImageSubgraph {
            nodes: image.nodes.iter().map(|&i| &self.nodes[i]).collect(),
            triples: image.triples.iter().map(|&i| &self.triples[i]).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_json().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<Self> {
        let path = path.as_ref();
        let mut text = String::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, table)
    }

    pub fn to_json(&self) -> String {
        self.to_json_with(None)
    }

    /// Like [`to_json`](Self::to_json), with an extra `provenance` record.
    pub fn to_json_with(&self, provenance: Option<serde_json::Value>) -> String {
        let file = IndexFile {
            version: INDEX_VERSION,
            schema: self.schema.clone(),
            embedding_fingerprint: self.embedding_fingerprint,
            embedding_dimension: self.dimension,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    key: n.node_key.clone(),
                    values: n.object.values.clone(),
                    postings: n.postings.clone(),
                })
                .collect(),
            triples: self
                .triples
                .iter()
                .map(|t| TripleRecord {
                    head: t.key.head,
                    relation: t.key.relation,
                    tail: t.key.tail,
                    postings: t.postings.clone(),
                })
                .collect(),
            images: self
                .images
                .iter()
                .map(|img| ImageRecord {
                    image_id: img.image_id,
                    nodes: img.nodes.clone(),
                    triples: img.triples.clone(),
                })
                .collect(),
            provenance,
        };
        serde_json::to_string(&file).expect("index records always serialize")
    }

    pub fn from_json(text: &str, table: &EmbeddingTable) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            version: u32,
        }
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        if probe.version != INDEX_VERSION {
            return Err(Error::Version {
                found: probe.version,
                expected: INDEX_VERSION,
            });
        }
        let file: IndexFile =
            serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        if file.embedding_fingerprint != table.fingerprint() {
            return Err(Error::Compatibility {
                expected: file.embedding_fingerprint,
                found: table.fingerprint(),
            });
        }
        if file.embedding_dimension != table.dimension() {
            return Err(Error::Corrupt(format!(
                "index dimension {} does not match table dimension {}",
                file.embedding_dimension,
                table.dimension()
            )));
        }
        file.into_catalog(table)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    schema: AttributeSchema,
    embedding_fingerprint: u64,
    embedding_dimension: usize,
    nodes: Vec<NodeRecord>,
    triples: Vec<TripleRecord>,
    images: Vec<ImageRecord>,
    /// Free-form record of how the index was produced; ignored on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    key: String,
    values: Vec<String>,
    postings: Vec<(u64, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TripleRecord {
    head: usize,
    relation: usize,
    tail: usize,
    postings: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    image_id: u64,
    nodes: Vec<usize>,
    triples: Vec<usize>,
}

impl IndexFile {
    fn into_catalog(self, table: &EmbeddingTable) -> Result<CatalogGraph> {
        let corrupt = |msg: String| Error::Corrupt(msg);
        let schema = AttributeSchema::new(
            self.schema.attributes().to_vec(),
            self.schema.relations().to_vec(),
        )
        .map_err(|e| corrupt(format!("invalid schema: {e}")))?;

        let nodes = self
            .nodes
            .into_iter()
            .map(|rec| {
                let object = ObjectNode { values: rec.values };
                if object.node_key() != rec.key {
                    return Err(corrupt(format!("node key {:?} does not match values", rec.key)));
                }
                if rec.postings.is_empty() {
                    return Err(corrupt(format!("node {:?} has no postings", rec.key)));
                }
                let matrix = node_matrix(&object, &schema, table)
                    .map_err(|e| corrupt(format!("node {:?}: {e}", rec.key)))?;
                Ok(CatalogNode {
                    node_key: rec.key,
                    object,
                    matrix,
                    postings: rec.postings,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let triples = self
            .triples
            .into_iter()
            .map(|rec| {
                if rec.head >= nodes.len()
                    || rec.tail >= nodes.len()
                    || rec.relation >= schema.relations().len()
                {
                    return Err(corrupt("triple references a missing node or relation".into()));
                }
                if rec.postings.is_empty() {
                    return Err(corrupt("triple has no postings".into()));
                }
                Ok(CatalogTriple {
                    key: TripleKey {
                        head: rec.head,
                        relation: rec.relation,
                        tail: rec.tail,
                    },
                    postings: rec.postings,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let images = self
            .images
            .into_iter()
            .map(|rec| {
                if rec.nodes.is_empty()
                    || rec.nodes.iter().any(|&i| i >= nodes.len())
                    || rec.triples.iter().any(|&i| i >= triples.len())
                {
                    return Err(corrupt(format!("image {} is malformed", rec.image_id)));
                }
                Ok(CatalogImage {
                    image_id: rec.image_id,
                    nodes: rec.nodes,
                    triples: rec.triples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(corrupt("index has no images".into()));
        }

        CatalogGraph::assemble(schema, table, nodes, triples, images)
    }
}
