#![allow(dead_code)]

use scene_retrieval::catalog::{build_catalog, CatalogGraph};
use scene_retrieval::embeddings::EmbeddingTable;
use scene_retrieval::eval::dedup_scenes;
use scene_retrieval::scene_graph::{AttributeSchema, SceneGraph};
use scene_retrieval::synth::{synthesize_scenes, SynthConfig};

pub struct Corpus {
    pub schema: AttributeSchema,
    pub table: EmbeddingTable,
    pub scenes: Vec<SceneGraph>,
    pub catalog: CatalogGraph,
}

/// Deduplicated synthetic CLEVR corpus with hashed 50-d embeddings.
pub fn corpus(num_scenes: usize, seed: u64) -> Corpus {
    let schema = AttributeSchema::clevr();
    let table = EmbeddingTable::deterministic(50, 0, schema.labels()).unwrap();
    let raw = synthesize_scenes(
        &schema,
        &SynthConfig {
            num_scenes,
            seed,
            ..SynthConfig::default()
        },
    );
    let (scenes, _) = dedup_scenes(&raw);
    let catalog = build_catalog(&scenes, &schema, &table).unwrap();
    Corpus {
        schema,
        table,
        scenes,
        catalog,
    }
}
