//! Retrieval metrics and the node-drop experiment.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::CatalogGraph;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::query::{sample_partial_query, QueryGraph};
use crate::scene_graph::{AttributeSchema, SceneGraph};
use crate::scoring::{ScoringContext, ScoringMode, ScoringParams};

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub drop_fraction: f64,
    pub attribute_mask_fraction: f64,
    pub num_queries: usize,
    pub top1_accuracy: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mean_reciprocal_rank: f64,
    /// Mean wall-clock seconds per query. Not part of serialized reports
    /// unless explicitly kept, so that reports are reproducible byte for byte.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_per_query: Option<f64>,
}

impl EvalReport {
    /// Aggregates 1-based gold ranks.
    pub fn from_ranks(ranks: &[usize], drop_fraction: f64, attribute_mask_fraction: f64) -> Self {
        let n = ranks.len().max(1) as f64;
        let recall_at_k = RECALL_CUTOFFS
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
            .collect::<BTreeMap<_, _>>();
        EvalReport {
            drop_fraction,
            attribute_mask_fraction,
            num_queries: ranks.len(),
            top1_accuracy: recall_at_k[&1],
            recall_at_k,
            mean_reciprocal_rank: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            wall_time_per_query: None,
        }
    }
}

/// Ranks every query's gold image in its retrieval result.
pub fn evaluate(
    catalog: &CatalogGraph,
    eval_set: &[(QueryGraph, u64)],
    params: &ScoringParams,
    mode: ScoringMode,
) -> Result<EvalReport> {
    let ctx = ScoringContext::new(catalog, params)?;
    let start = Instant::now();
    let ranks = gold_ranks(&ctx, eval_set, mode)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = EvalReport::from_ranks(&ranks, f64::NAN, f64::NAN);
    report.wall_time_per_query = Some(elapsed / eval_set.len().max(1) as f64);
    Ok(report)
}

fn gold_ranks(
    ctx: &ScoringContext<'_>,
    eval_set: &[(QueryGraph, u64)],
    mode: ScoringMode,
) -> Result<Vec<usize>> {
    for (_, gold) in eval_set {
        if ctx.catalog().image_position(*gold).is_none() {
            return Err(Error::Argument(format!("gold image {gold} is not in the catalog")));
        }
    }
    eval_set
        .par_iter()
        .map(|(query, gold)| {
            let result = ctx.retrieve(query, mode)?;
            Ok(result.rank_of(*gold).expect("gold is in the catalog"))
        })
        .collect()
}

/// Removes scenes whose node multiset and triple set repeat an earlier scene.
/// Returns the kept scenes and the number removed.
pub fn dedup_scenes(scenes: &[SceneGraph]) -> (Vec<SceneGraph>, usize) {
    let mut seen = HashSet::new();
    let kept: Vec<SceneGraph> = scenes
        .iter()
        .filter(|s| seen.insert(s.signature()))
        .cloned()
        .collect();
    let removed = scenes.len() - kept.len();
    (kept, removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDropConfig {
    pub queries_per_fraction: usize,
    pub attribute_mask_fraction: f64,
    pub seed: u64,
    pub mode: ScoringMode,
}

impl Default for NodeDropConfig {
    fn default() -> Self {
        NodeDropConfig {
            queries_per_fraction: 1000,
            attribute_mask_fraction: 0.0,
            seed: 0,
            mode: ScoringMode::default(),
        }
    }
}

/// For each drop fraction, queries sampled from uniformly drawn gold scenes.
/// The same gold images and per-query seeds are used at every fraction.
pub fn node_drop_experiment(
    catalog: &CatalogGraph,
    scenes: &[SceneGraph],
    drop_fractions: &[f64],
    params: &ScoringParams,
    table: &EmbeddingTable,
    config: &NodeDropConfig,
) -> Result<Vec<EvalReport>> {
    if scenes.is_empty() {
        return Err(Error::Argument("no scenes to sample queries from".into()));
    }
    let schema: &AttributeSchema = catalog.schema();
    let ctx = ScoringContext::new(catalog, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let draws: Vec<(usize, u64)> = (0..config.queries_per_fraction)
        .map(|_| (rng.gen_range(0..scenes.len()), rng.gen()))
        .collect();

    drop_fractions
        .iter()
        .map(|&fraction| {
            let eval_set = draws
                .iter()
                .map(|&(si, qseed)| {
                    let scene = &scenes[si];
                    let q = sample_partial_query(
                        scene,
                        fraction,
                        config.attribute_mask_fraction,
                        qseed,
                        schema,
                        table,
                    )?;
                    Ok((q, scene.image_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let start = Instant::now();
            let ranks = gold_ranks(&ctx, &eval_set, config.mode)?;
            let elapsed = start.elapsed().as_secs_f64();
            let mut report = EvalReport::from_ranks(&ranks, fraction, config.attribute_mask_fraction);
            report.wall_time_per_query = Some(elapsed / eval_set.len().max(1) as f64);
            Ok(report)
        })
        .collect()
}

/// Tab-separated table, one row per report.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("drop_fraction\tattribute_mask_fraction\tnum_queries\ttop1\trecall@1\trecall@5\trecall@10\tmrr\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.drop_fraction,
            r.attribute_mask_fraction,
            r.num_queries,
            r.top1_accuracy,
            r.recall_at_k[&1],
            r.recall_at_k[&5],
            r.recall_at_k[&10],
            r.mean_reciprocal_rank
        ));
    }
    out
}
