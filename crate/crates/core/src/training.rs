//! Policy-gradient training of the scoring parameters.
//!
//! The objective over the catalog's images is
//!
//! ```text
//! J(θ) = Σ_I P_θ(I) · [R(I) − B] · log P_θ(I)
//! ```
//!
//! with `R(I) = 1 − ‖I − I*‖ / (‖I‖ + ‖I*‖ + ε)` comparing image `I` against the
//! gold image `I*` through their mean node matrices, and `B` a baseline.
//! Rewards are constants with respect to θ.
//!
//! Two gradients are available. [`GradientForm::Literal`] differentiates the
//! expression above exactly, including the leading `P` factor.
//! [`GradientForm::ScoreFunction`] treats the leading `P` as the sampling
//! distribution, which yields `Σ_I P(I)(R(I) − B) ∇log P(I)`, the usual
//! REINFORCE estimator and the gradient of the expected reward.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::CatalogGraph;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::query::QueryGraph;
use crate::scene_graph::{node_matrix, AttributeSchema, SceneGraph};
use crate::scoring::{
    grad, softmax, AttentionMap, BestMatch, ImageMatch, ParamGradient, RetrievalResult, ScoringContext, ScoringMode,
    ScoringParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Normalizer {
    /// `‖I‖ + ‖I'‖ + ε`
    NormSum,
    /// A fixed corpus-wide bound on `‖I − I'‖`; rewards are clamped to [0, 1].
    CorpusMax(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub epsilon: f64,
    pub normalizer: Normalizer,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            epsilon: 1e-9,
            normalizer: Normalizer::NormSum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BaselineMode {
    Zero,
    /// Exponential moving average of the epoch's mean expected reward.
    RunningMean { decay: f64 },
    /// Exact expected reward under the current distribution, per example.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveMode {
    /// Sum over every catalog image.
    FullDistribution,
    /// One image drawn from P per example.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientForm {
    Literal,
    ScoreFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub baseline: BaselineMode,
    pub objective: ObjectiveMode,
    pub gradient_form: GradientForm,
    pub rng_seed: u64,
    pub gradient_clip: Option<f64>,
    pub reward: RewardSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 10,
            baseline: BaselineMode::RunningMean { decay: 0.9 },
            objective: ObjectiveMode::FullDistribution,
            gradient_form: GradientForm::Literal,
            rng_seed: 0,
            gradient_clip: None,
            reward: RewardSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be positive".into()));
        }
        if let BaselineMode::RunningMean { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Argument(format!("baseline decay {decay} outside [0, 1)")));
            }
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(Error::Argument(format!("gradient clip {c}")));
            }
        }
        if !(self.reward.epsilon > 0.0) {
            return Err(Error::Argument("reward epsilon must be positive".into()));
        }
        Ok(())
    }
}

fn mean_of(matrices: impl ExactSizeIterator<Item = Vec<f64>>) -> Vec<f64> {
    let count = matrices.len() as f64;
    let mut acc: Vec<f64> = Vec::new();
    for m in matrices {
        if acc.is_empty() {
            acc = vec![0.0; m.len()];
        }
        acc.iter_mut().zip(&m).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= count);
    acc
}

/// Mean of the image's node matrices (with multiplicity), row-major, length M·N.
pub fn image_representation(catalog: &CatalogGraph, image_id: u64) -> Result<Vec<f64>> {
    let image = catalog.image(image_id)?;
    Ok(mean_of(
        image
            .nodes
            .iter()
            .map(|&i| catalog.nodes()[i].matrix.as_flat().to_vec()),
    ))
}

pub fn scene_representation(
    scene: &SceneGraph,
    schema: &AttributeSchema,
    table: &EmbeddingTable,
) -> Result<Vec<f64>> {
    if scene.nodes.is_empty() {
        return Err(Error::Argument("scene has no nodes".into()));
    }
    let matrices = scene
        .nodes
        .iter()
        .map(|n| node_matrix(n, schema, table).map(|m| m.as_flat().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(matrices.into_iter()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 − normalized ‖gold − retrieved‖`, in [0, 1].
pub fn reward(gold: &[f64], retrieved: &[f64], spec: &RewardSpec) -> f64 {
    let diff: f64 = gold
        .iter()
        .zip(retrieved)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let denom = match spec.normalizer {
        Normalizer::NormSum => norm(gold) + norm(retrieved) + spec.epsilon,
        Normalizer::CorpusMax(m) => m + spec.epsilon,
    };
    (1.0 - diff / denom).clamp(0.0, 1.0)
}

/// Image representations in catalog order, computed once per catalog.
#[derive(Debug, Clone)]
pub struct RewardTable {
    representations: Vec<Vec<f64>>,
    spec: RewardSpec,
}

impl RewardTable {
    pub fn new(catalog: &CatalogGraph, spec: RewardSpec) -> Self {
        let representations = catalog
            .images()
            .iter()
            .map(|img| image_representation(catalog, img.image_id).expect("catalog image"))
            .collect();
        RewardTable {
            representations,
            spec,
        }
    }

    /// Reward of every catalog image against the gold image at `gold_pos`.
    pub fn rewards(&self, gold_pos: usize) -> Vec<f64> {
        let gold = &self.representations[gold_pos];
        self.representations
            .iter()
            .map(|r| reward(gold, r, &self.spec))
            .collect()
    }
}

/// Literal objective value for given probabilities and rewards.
pub fn objective_value(probabilities: &[f64], rewards: &[f64], baseline: f64) -> f64 {
    probabilities
        .iter()
        .zip(rewards)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &r)| p * (r - baseline) * p.ln())
        .sum()
}

/// J over the full catalog distribution for one query.
pub fn objective(
    query: &QueryGraph,
    catalog: &CatalogGraph,
    gold_image_id: u64,
    params: &ScoringParams,
    reward_spec: &RewardSpec,
    baseline: f64,
) -> Result<f64> {
    let gold_pos = catalog
        .image_position(gold_image_id)
        .ok_or_else(|| Error::Argument(format!("gold image {gold_image_id} is not in the catalog")))?;
    let rewards = RewardTable::new(catalog, *reward_spec).rewards(gold_pos);
    let result = ScoringContext::new(catalog, params)?.retrieve(query, ScoringMode::Dense)?;
    Ok(objective_value(&result.probabilities, &rewards, baseline))
}

/// Everything computed while differentiating one example.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub value: f64,
    pub gradient: ParamGradient,
    pub probabilities: Vec<f64>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    /// Ranking under the current parameters.
    pub ranking: Vec<u64>,
    /// Some max was attained by two different catalog elements.
    pub tie: bool,
    /// Smallest gap between a best match and the runner-up with a different
    /// index, over all images and query elements.
    pub min_margin: f64,
}

/// How the baseline is chosen for a single gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    Fixed(f64),
    Expected,
}

/// Analytic gradient of J (or of its sampled surrogate) for one example.
///
/// `sampled`: draw one image from P with this rng; the value and gradient are
/// then those of `(R − B)·log P` for the drawn image.
pub fn gradient(
    query: &QueryGraph,
    catalog: &CatalogGraph,
    gold_image_id: u64,
    params: &ScoringParams,
    rewards: &RewardTable,
    baseline: Baseline,
    form: GradientForm,
    sampled: Option<&mut ChaCha8Rng>,
) -> Result<GradientReport> {
    let gold_pos = catalog
        .image_position(gold_image_id)
        .ok_or_else(|| Error::Argument(format!("gold image {gold_image_id} is not in the catalog")))?;
    let ctx = ScoringContext::new(catalog, params)?;
    let attention = ctx.attention(query, ScoringMode::Dense)?;
    let images = catalog.images();
    let matches: Vec<_> = images
        .par_iter()
        .map(|img| ctx.match_image(&attention, img))
        .collect();
    let log_scores: Vec<f64> = matches.iter().map(|m| m.log_score).collect();
    let probabilities = softmax(&log_scores);
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + log_scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let log_p: Vec<f64> = log_scores.iter().map(|s| s - log_z).collect();

    let reward_vec = rewards.rewards(gold_pos);
    let b = match baseline {
        Baseline::Fixed(b) => b,
        Baseline::Expected => probabilities.iter().zip(&reward_vec).map(|(p, r)| p * r).sum(),
    };
    let adv: Vec<f64> = reward_vec.iter().map(|r| r - b).collect();

    // dValue/dlog_score_K for every image K.
    let (value, dlr): (f64, Vec<f64>) = match sampled {
        Some(rng) => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probabilities.len() - 1;
            for (i, p) in probabilities.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            // ∂ log P_pick / ∂ lr_K = δ − P_K
            let dlr = probabilities
                .iter()
                .enumerate()
                .map(|(k, &pk)| adv[pick] * ((k == pick) as u8 as f64 - pk))
                .collect();
            (adv[pick] * log_p[pick], dlr)
        }
        None => {
            let value = objective_value(&probabilities, &reward_vec, b);
            let dlr = match form {
                GradientForm::Literal => {
                    let weights: Vec<f64> = (0..images.len())
                        .map(|i| adv[i] * probabilities[i] * (log_p[i] + 1.0))
                        .collect();
                    let total: f64 = weights.iter().sum();
                    (0..images.len())
                        .map(|k| weights[k] - probabilities[k] * total)
                        .collect()
                }
                GradientForm::ScoreFunction => {
                    let mean_adv: f64 = probabilities.iter().zip(&adv).map(|(p, a)| p * a).sum();
                    (0..images.len())
                        .map(|k| probabilities[k] * (adv[k] - mean_adv))
                        .collect()
                }
            };
            (value, dlr)
        }
    };

    // Accumulate per-factor coefficients so each (query element, catalog
    // element) derivative is evaluated once.
    let eps = params.epsilon;
    let mut node_coef: HashMap<(usize, usize), f64> = HashMap::new();
    let mut edge_coef: HashMap<(usize, usize), f64> = HashMap::new();
    for (k, m) in matches.iter().enumerate() {
        let g = dlr[k];
        if g == 0.0 {
            continue;
        }
        for (q, best) in m.nodes.iter().enumerate() {
            if let (Some(c), true) = (best.index, best.score > eps) {
                *node_coef.entry((q, c)).or_default() += g / best.score;
            }
        }
        for (qt, best) in m.triples.iter().enumerate() {
            if let (Some(t), true) = (best.index, best.score > eps) {
                let key = catalog.triples()[t].key;
                let (qh, qtl) = attention.triple_ends[qt];
                let coef = g / (3.0 * best.score);
                *node_coef.entry((qh, key.head)).or_default() += coef;
                *node_coef.entry((qtl, key.tail)).or_default() += coef;
                *edge_coef.entry((qt, key.relation)).or_default() += coef;
            }
        }
    }

    let mut gradient = ParamGradient::zeros_like(params);
    let mut node_terms: Vec<_> = node_coef.into_iter().collect();
    node_terms.sort_by_key(|(k, _)| *k);
    for ((q, c), coef) in node_terms {
        grad::node_score(
            &query.nodes[q].matrix,
            &catalog.nodes()[c].matrix,
            params,
            coef,
            &mut gradient,
        );
    }
    let mut edge_terms: Vec<_> = edge_coef.into_iter().collect();
    edge_terms.sort_by_key(|(k, _)| *k);
    for ((qt, r), coef) in edge_terms {
        let qr = catalog
            .schema()
            .relation_index(&query.triples[qt].relation)
            .expect("checked by attention");
        grad::edge_score(
            catalog.relation_vector(qr),
            catalog.relation_vector(r),
            params,
            coef,
            &mut gradient,
        );
    }

    let (tie, min_margin) = tie_scan(&attention, catalog, &matches);
    let ranking = RetrievalResult::rank(catalog, &log_scores);
    Ok(GradientReport {
        value,
        gradient,
        probabilities,
        rewards: reward_vec,
        baseline: b,
        ranking,
        tie,
        min_margin,
    })
}

fn tie_scan(
    attention: &AttentionMap,
    catalog: &CatalogGraph,
    matches: &[ImageMatch],
) -> (bool, f64) {
    let mut tie = false;
    let mut margin = f64::INFINITY;
    let mut consider = |best: &BestMatch, score: f64, index: usize| {
        if Some(index) != best.index {
            let gap = best.score - score;
            if gap == 0.0 {
                tie = true;
            }
            margin = margin.min(gap);
        }
    };
    for (img, m) in catalog.images().iter().zip(matches) {
        for (q, best) in m.nodes.iter().enumerate() {
            for &c in &img.nodes {
                consider(best, attention.node_scores[q][c], c);
            }
        }
        for (qt, best) in m.triples.iter().enumerate() {
            for &t in &img.triples {
                consider(best, attention.triple_score(catalog, qt, t), t);
            }
        }
    }
    (tie, margin)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_j: f64,
    pub mean_reward: f64,
    pub top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ScoringParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Full-batch gradient ascent: one parameter update per epoch from the mean
/// of the per-example gradients.
pub fn train(
    dataset: &[(QueryGraph, u64)],
    catalog: &CatalogGraph,
    initial: &ScoringParams,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    for (_, gold) in dataset {
        if catalog.image_position(*gold).is_none() {
            return Err(Error::Argument(format!("gold image {gold} is not in the catalog")));
        }
    }
    let rewards = RewardTable::new(catalog, config.reward);
    let mut params = initial.clone();
    let mut running = 0.0;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let baseline = match config.baseline {
            BaselineMode::Zero => Baseline::Fixed(0.0),
            BaselineMode::RunningMean { .. } => Baseline::Fixed(running),
            BaselineMode::Expected => Baseline::Expected,
        };
        let reports = dataset
            .par_iter()
            .enumerate()
            .map(|(i, (query, gold))| {
                let mut rng = match config.objective {
                    ObjectiveMode::Sampled => Some(ChaCha8Rng::seed_from_u64(
                        config.rng_seed ^ ((epoch as u64) << 32) ^ i as u64,
                    )),
                    ObjectiveMode::FullDistribution => None,
                };
                let report = gradient(
                    query,
                    catalog,
                    *gold,
                    &params,
                    &rewards,
                    baseline,
                    config.gradient_form,
                    rng.as_mut(),
                )?;
                let expected_reward: f64 = report
                    .probabilities
                    .iter()
                    .zip(&report.rewards)
                    .map(|(p, r)| p * r)
                    .sum();
                let hit = report.ranking.first() == Some(gold);
                Ok((report.value, report.gradient, expected_reward, hit))
            })
            .collect::<Result<Vec<_>>>()?;

        let n = reports.len() as f64;
        let mut total = ParamGradient::zeros_like(&params);
        let (mut sum_j, mut sum_r, mut hits) = (0.0, 0.0, 0usize);
        for (value, g, r, hit) in &reports {
            total.add_scaled(g, 1.0 / n);
            sum_j += value;
            sum_r += r;
            hits += *hit as usize;
        }
        let m = EpochMetrics {
            epoch,
            mean_j: sum_j / n,
            mean_reward: sum_r / n,
            top1: hits as f64 / n,
        };
        if !m.mean_j.is_finite() || !total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                message: format!(
                    "mean J {}, gradient norm {}, params {:?}",
                    m.mean_j,
                    total.norm(),
                    params
                ),
            });
        }
        if let Some(clip) = config.gradient_clip {
            let g = total.norm();
            if g > clip {
                total.scale(clip / g);
            }
        }
        apply_step(&mut params, &total, config.learning_rate);
        if let BaselineMode::RunningMean { decay } = config.baseline {
            running = decay * running + (1.0 - decay) * m.mean_reward;
        }
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

fn apply_step(params: &mut ScoringParams, g: &ParamGradient, lr: f64) {
    for (p, d) in params.attribute_logits.iter_mut().zip(&g.attribute_logits) {
        *p += lr * d;
    }
    params.edge_logit += lr * g.edge_logit;
    if let (Some(p), Some(d)) = (&mut params.projection, &g.projection) {
        for (x, y) in p.iter_mut().zip(d) {
            *x += lr * y;
        }
    }
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

pub fn save_params(path: impl AsRef<Path>, params: &ScoringParams) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, params).map_err(|e| Error::parse(None, e.to_string()))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads parameters saved by [`save_params`] or a training artifact that
/// holds them under a `params` key.
pub fn load_params(path: impl AsRef<Path>) -> Result<ScoringParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::parse(Some(e.line()), e.to_string()))?;
    if let Some(inner) = value.get_mut("params") {
        value = inner.take();
    }
    serde_json::from_value(value).map_err(|e| Error::parse(None, e.to_string()))
}
