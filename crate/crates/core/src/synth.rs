//! Synthetic CLEVR-like scenes.
//!
//! Objects get uniformly drawn attribute values and a random ground-plane
//! position; spatial relations are the full pairwise closure derived from those
//! positions, as in CLEVR's own annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{build_catalog, CatalogGraph};
use crate::embeddings::EmbeddingTable;
use crate::error::Result;
use crate::query::{QueryGraph, QueryNode, QueryTriple};
use crate::scene_graph::{Attribute, AttributeSchema, ObjectNode, RelationEdge, SceneGraph};
use crate::scoring::ScoringParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub first_image_id: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 1000,
            min_objects: 3,
            max_objects: 10,
            first_image_id: 0,
            seed: 0,
        }
    }
}

const MIN_DISTANCE: f64 = 0.25;
const EXTENT: f64 = 3.0;

pub fn synthesize_scenes(schema: &AttributeSchema, config: &SynthConfig) -> Vec<SceneGraph> {
    assert!(config.min_objects >= 1 && config.min_objects <= config.max_objects);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_scenes)
        .map(|i| {
            let n = rng.gen_range(config.min_objects..=config.max_objects);
            synth_scene(schema, config.first_image_id + i as u64, n, &mut rng)
        })
        .collect()
}

fn synth_scene(schema: &AttributeSchema, image_id: u64, n: usize, rng: &mut ChaCha8Rng) -> SceneGraph {
    let nodes: Vec<ObjectNode> = (0..n)
        .map(|_| {
            ObjectNode::new(
                schema
                    .attributes()
                    .iter()
                    .map(|a| a.values[rng.gen_range(0..a.values.len())].clone()),
            )
        })
        .collect();

    let mut positions: Vec<(f64, f64)> = Vec::with_capacity(n);
    while positions.len() < n {
        let p = (rng.gen_range(-EXTENT..EXTENT), rng.gen_range(-EXTENT..EXTENT));
        let clear = positions.iter().all(|q| {
            let (dx, dy) = (p.0 - q.0, p.1 - q.1);
            (dx * dx + dy * dy).sqrt() >= MIN_DISTANCE
        });
        if clear {
            positions.push(p);
        }
    }

    let has = |r: &str| schema.relation_index(r).is_some();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let (pa, pb) = (positions[a], positions[b]);
            // Edge (a, rel, b): a is rel of b. Smaller y is nearer the camera.
            if pa.0 < pb.0 && has("left") {
                edges.push(RelationEdge::new(a, "left", b));
            }
            if pa.0 > pb.0 && has("right") {
                edges.push(RelationEdge::new(a, "right", b));
            }
            if pa.1 < pb.1 && has("front") {
                edges.push(RelationEdge::new(a, "front", b));
            }
            if pa.1 > pb.1 && has("behind") {
                edges.push(RelationEdge::new(a, "behind", b));
            }
        }
    }
    SceneGraph::new(image_id, nodes, edges, schema).expect("synthetic scenes respect the schema")
}

/// A small retrieval problem with randomized parameters, for checking the
/// scorer and the trainer against brute-force references.
#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub schema: AttributeSchema,
    pub table: EmbeddingTable,
    pub scenes: Vec<SceneGraph>,
    pub catalog: CatalogGraph,
    pub params: ScoringParams,
    pub query: QueryGraph,
    pub gold: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub min_images: usize,
    pub max_images: usize,
    pub max_query_nodes: usize,
    pub dimension: usize,
    pub mask_probability: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            min_images: 3,
            max_images: 10,
            max_query_nodes: 3,
            dimension: 4,
            mask_probability: 0.3,
        }
    }
}

/// Two attributes with four values each and two relations.
pub fn toy_schema() -> AttributeSchema {
    let attr = |name: &str, prefix: &str| Attribute {
        name: name.into(),
        values: (0..4).map(|i| format!("{prefix}{i}")).collect(),
    };
    AttributeSchema::new(
        vec![attr("tone", "t"), attr("form", "f")],
        vec!["near".into(), "above".into()],
    )
    .expect("toy schema is valid")
}

pub fn toy_instance(seed: u64, config: &ToyConfig) -> Result<ToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = toy_schema();
    let dim = config.dimension;
    let table = EmbeddingTable::deterministic(dim, rng.gen(), schema.labels())?;
    let num_images = rng.gen_range(config.min_images..=config.max_images);
    let query_nodes = rng.gen_range(1..=config.max_query_nodes);

    let mut scenes = Vec::with_capacity(num_images);
    for id in 0..num_images {
        let n = rng.gen_range(query_nodes.max(1)..=query_nodes.max(1) + 2);
        let nodes: Vec<ObjectNode> = (0..n)
            .map(|_| {
                ObjectNode::new(
                    schema
                        .attributes()
                        .iter()
                        .map(|a| a.values[rng.gen_range(0..a.values.len())].clone()),
                )
            })
            .collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b && rng.gen_bool(0.4) {
                    let r = &schema.relations()[rng.gen_range(0..schema.relations().len())];
                    edges.push(RelationEdge::new(a, r.clone(), b));
                }
            }
        }
        scenes.push(SceneGraph::new(id as u64 * 7 + 3, nodes, edges, &schema)?);
    }
    let catalog = build_catalog(&scenes, &schema, &table)?;

    let gold_scene = &scenes[rng.gen_range(0..scenes.len())];
    let mut picked: Vec<usize> =
        rand::seq::index::sample(&mut rng, gold_scene.nodes.len(), query_nodes).into_vec();
    picked.sort_unstable();
    let nodes = picked
        .iter()
        .map(|&i| {
            let mut values: Vec<Option<String>> = gold_scene.nodes[i]
                .values
                .iter()
                .map(|v| (!rng.gen_bool(config.mask_probability)).then(|| v.clone()))
                .collect();
            if values.iter().all(Option::is_none) {
                let k = rng.gen_range(0..values.len());
                values[k] = Some(gold_scene.nodes[i].values[k].clone());
            }
            QueryNode::new(values, &table)
        })
        .collect::<Result<Vec<_>>>()?;
    let triples = gold_scene
        .edges
        .iter()
        .filter_map(|e| {
            Some(QueryTriple {
                head: picked.iter().position(|&p| p == e.head)?,
                relation: e.relation.clone(),
                tail: picked.iter().position(|&p| p == e.tail)?,
            })
        })
        .collect();
    let query = QueryGraph::new(nodes, triples, &schema, &table)?;

    let mut params = ScoringParams::new(schema.num_attributes()).with_identity_projection(dim);
    for l in params.attribute_logits.iter_mut() {
        *l = rng.gen_range(-0.5..0.5);
    }
    params.edge_logit = rng.gen_range(-0.5..0.5);
    if let Some(p) = params.projection.as_mut() {
        for x in p.iter_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
    }
    Ok(ToyInstance {
        gold: gold_scene.image_id,
        schema,
        table,
        scenes,
        catalog,
        params,
        query,
    })
}
