//! Soft subsumption scoring of query graphs against the catalog.
//!
//! A query node is scored against a catalog node by the inverse of a masked,
//! weighted Frobenius distance between their attribute matrices:
//!
//! ```text
//! d = sqrt( Σ_i mask_i · w_i · ‖P·q_i − P·c_i‖² )      score = 1 / (1 + d)
//! ```
//!
//! Unknown query attributes (mask false) contribute nothing, so a catalog node
//! is only judged on what the query actually says. A triple scores the mean of
//! its head score, tail score and relation score `1 / (1 + w_e·‖P·e_q − P·e_c‖)`.
//!
//! An image's raw score is the product, over query nodes and triples, of the
//! best match found inside that image; probabilities are raw scores normalized
//! over the catalog. Everything is accumulated in log space.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogGraph, CatalogImage};
use crate::error::{Error, Result};
use crate::query::QueryGraph;
use crate::scene_graph::NodeMatrix;

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_TOP_T: usize = 64;
pub const DEFAULT_SUBSUMPTION_THRESHOLD: f64 = 0.99;

/// Trainable scoring parameters.
///
/// Weights are stored as logs (`w = exp(logit)`) so they stay positive under
/// unconstrained gradient steps. `projection` is a row-major N×N matrix; `None`
/// means a fixed identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringParams {
    pub attribute_logits: Vec<f64>,
    pub edge_logit: f64,
    pub projection: Option<Vec<f64>>,
    pub epsilon: f64,
}

impl ScoringParams {
    /// Unit weights, identity projection (not trained).
    pub fn new(num_attributes: usize) -> Self {
        ScoringParams {
            attribute_logits: vec![0.0; num_attributes],
            edge_logit: 0.0,
            projection: None,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Makes the projection trainable, starting from the identity.
    pub fn with_identity_projection(mut self, dimension: usize) -> Self {
        let mut p = vec![0.0; dimension * dimension];
        for i in 0..dimension {
            p[i * dimension + i] = 1.0;
        }
        self.projection = Some(p);
        self
    }

    pub fn attribute_weight(&self, i: usize) -> f64 {
        self.attribute_logits[i].exp()
    }

    pub fn edge_weight(&self) -> f64 {
        self.edge_logit.exp()
    }

    pub fn validate(&self, num_attributes: usize, dimension: usize) -> Result<()> {
        if self.attribute_logits.len() != num_attributes {
            return Err(Error::Argument(format!(
                "{} attribute weights for {num_attributes} attributes",
                self.attribute_logits.len()
            )));
        }
        if !self.attribute_logits.iter().all(|v| v.is_finite()) || !self.edge_logit.is_finite() {
            return Err(Error::Argument("non-finite weight".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Argument(format!("epsilon {} outside (0, 1)", self.epsilon)));
        }
        if let Some(p) = &self.projection {
            if p.len() != dimension * dimension {
                return Err(Error::Argument(format!(
                    "projection has {} entries, expected {}",
                    p.len(),
                    dimension * dimension
                )));
            }
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Argument("non-finite projection entry".into()));
            }
        }
        Ok(())
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => v.to_vec(),
            Some(p) => mat_vec(p, v),
        }
    }

    fn project_matrix(&self, m: &NodeMatrix) -> Vec<f64> {
        match &self.projection {
            None => m.as_flat().to_vec(),
            Some(p) => (0..m.num_rows()).flat_map(|i| mat_vec(p, m.row(i))).collect(),
        }
    }
}

fn mat_vec(p: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|r| p[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gradient with respect to every trainable coordinate of [`ScoringParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub attribute_logits: Vec<f64>,
    pub edge_logit: f64,
    pub projection: Option<Vec<f64>>,
}

impl ParamGradient {
    pub fn zeros_like(params: &ScoringParams) -> Self {
        ParamGradient {
            attribute_logits: vec![0.0; params.attribute_logits.len()],
            edge_logit: 0.0,
            projection: params.projection.as_ref().map(|p| vec![0.0; p.len()]),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.attribute_logits.iter_mut().zip(&other.attribute_logits) {
            *a += scale * b;
        }
        self.edge_logit += scale * other.edge_logit;
        if let (Some(a), Some(b)) = (&mut self.projection, &other.projection) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.attribute_logits.iter_mut().for_each(|v| *v *= s);
        self.edge_logit *= s;
        if let Some(p) = &mut self.projection {
            p.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// All coordinates in a fixed order: attribute logits, edge logit, projection.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.attribute_logits.clone();
        out.push(self.edge_logit);
        if let Some(p) = &self.projection {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Score of a catalog node as a match for a query node.
pub fn node_subsumption(query: &NodeMatrix, cat: &NodeMatrix, params: &ScoringParams) -> Result<f64> {
    check_shapes(query, cat, params)?;
    let q = params.project_matrix(query);
    let c = params.project_matrix(cat);
    Ok(node_score_projected(query.mask(), &q, &c, query.dimension(), params))
}

fn check_shapes(query: &NodeMatrix, cat: &NodeMatrix, params: &ScoringParams) -> Result<()> {
    if query.num_rows() != cat.num_rows() || query.dimension() != cat.dimension() {
        return Err(Error::Argument(format!(
            "node matrices differ in shape: {}x{} vs {}x{}",
            query.num_rows(),
            query.dimension(),
            cat.num_rows(),
            cat.dimension()
        )));
    }
    params.validate(query.num_rows(), query.dimension())
}

fn node_distance_projected(
    mask: &[bool],
    q: &[f64],
    c: &[f64],
    n: usize,
    params: &ScoringParams,
) -> f64 {
    let mut d2 = 0.0;
    for (i, &known) in mask.iter().enumerate() {
        if known {
            d2 += params.attribute_weight(i) * sq_dist(&q[i * n..(i + 1) * n], &c[i * n..(i + 1) * n]);
        }
    }
    d2.sqrt()
}

fn node_score_projected(mask: &[bool], q: &[f64], c: &[f64], n: usize, params: &ScoringParams) -> f64 {
    1.0 / (1.0 + node_distance_projected(mask, q, c, n, params))
}

fn edge_score_projected(q: &[f64], c: &[f64], params: &ScoringParams) -> f64 {
    1.0 / (1.0 + params.edge_weight() * sq_dist(q, c).sqrt())
}

/// A `(head, relation, tail)` triple given by its head/tail node matrices and
/// the relation embedding.
#[derive(Debug, Clone, Copy)]
pub struct TripleView<'a> {
    pub head: &'a NodeMatrix,
    pub relation: &'a [f64],
    pub tail: &'a NodeMatrix,
}

pub fn triple_subsumption(
    query: TripleView<'_>,
    cat: TripleView<'_>,
    params: &ScoringParams,
) -> Result<f64> {
    if query.relation.len() != cat.relation.len() || query.relation.len() != query.head.dimension() {
        return Err(Error::Argument("relation embeddings differ in dimension".into()));
    }
    let s_head = node_subsumption(query.head, cat.head, params)?;
    let s_tail = node_subsumption(query.tail, cat.tail, params)?;
    let s_edge = edge_score_projected(
        &params.project(query.relation),
        &params.project(cat.relation),
        params,
    );
    Ok((s_head + s_tail + s_edge) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringMode {
    /// Score every catalog image.
    Dense,
    /// Score only images holding one of the `top_t` best catalog nodes (plus
    /// any tied with the last of them) for every constrained query node.
    Pruned { top_t: usize },
}

impl Default for ScoringMode {
    fn default() -> Self {
        ScoringMode::Pruned {
            top_t: DEFAULT_TOP_T,
        }
    }
}

/// Parameters and catalog projected once, reusable across queries.
pub struct ScoringContext<'a> {
    catalog: &'a CatalogGraph,
    params: &'a ScoringParams,
    /// Projected rows of every catalog node (M·N each).
    node_rows: Vec<Vec<f64>>,
    relation_rows: Vec<Vec<f64>>,
}

impl<'a> ScoringContext<'a> {
    pub fn new(catalog: &'a CatalogGraph, params: &'a ScoringParams) -> Result<Self> {
        params.validate(catalog.schema().num_attributes(), catalog.dimension())?;
        let node_rows = catalog
            .nodes()
            .iter()
            .map(|n| params.project_matrix(&n.matrix))
            .collect();
        let relation_rows = (0..catalog.schema().relations().len())
            .map(|r| params.project(catalog.relation_vector(r)))
            .collect();
        Ok(ScoringContext {
            catalog,
            params,
            node_rows,
            relation_rows,
        })
    }

    pub fn catalog(&self) -> &'a CatalogGraph {
        self.catalog
    }

    pub fn params(&self) -> &'a ScoringParams {
        self.params
    }

    fn check_query(&self, query: &QueryGraph) -> Result<Vec<usize>> {
        if query.embedding_fingerprint != self.catalog.embedding_fingerprint() {
            return Err(Error::Compatibility {
                expected: self.catalog.embedding_fingerprint(),
                found: query.embedding_fingerprint,
            });
        }
        let m = self.catalog.schema().num_attributes();
        for node in &query.nodes {
            if node.matrix.num_rows() != m || node.matrix.dimension() != self.catalog.dimension() {
                return Err(Error::Argument("query node shape does not match catalog".into()));
            }
        }
        query
            .triples
            .iter()
            .map(|t| {
                self.catalog
                    .schema()
                    .relation_index(&t.relation)
                    .ok_or_else(|| Error::Lookup(format!("unknown relation {:?}", t.relation)))
            })
            .collect()
    }

    /// Attention of every query node over every catalog node, and of every
    /// query relation over every catalog relation.
    pub fn attention(&self, query: &QueryGraph, mode: ScoringMode) -> Result<AttentionMap> {
        let query_relations = self.check_query(query)?;
        let n = self.catalog.dimension();
        let node_scores: Vec<Vec<f64>> = query
            .nodes
            .iter()
            .map(|qn| {
                let q = self.params.project_matrix(&qn.matrix);
                self.node_rows
                    .iter()
                    .map(|c| node_score_projected(qn.matrix.mask(), &q, c, n, self.params))
                    .collect()
            })
            .collect();
        let relation_scores: Vec<Vec<f64>> = query_relations
            .iter()
            .map(|&qr| {
                self.relation_rows
                    .iter()
                    .map(|c| edge_score_projected(&self.relation_rows[qr], c, self.params))
                    .collect()
            })
            .collect();
        let triple_ends = query.triples.iter().map(|t| (t.head, t.tail)).collect();

        let candidate_images = match mode {
            ScoringMode::Dense => None,
            ScoringMode::Pruned { top_t } => self.candidates(query, &node_scores, top_t),
        };
        Ok(AttentionMap {
            node_scores,
            relation_scores,
            triple_ends,
            candidate_images,
        })
    }

    /// Positions (into `catalog.images()`) surviving the candidate filter, or
    /// `None` when the filter does not constrain anything.
    fn candidates(
        &self,
        query: &QueryGraph,
        node_scores: &[Vec<f64>],
        top_t: usize,
    ) -> Option<Vec<usize>> {
        let num_images = self.catalog.num_images();
        let mut count = vec![0u32; num_images];
        let mut constrained = 0u32;
        let mut seen = vec![u32::MAX; num_images];
        for (qi, qn) in query.nodes.iter().enumerate() {
            if qn.num_known() == 0 {
                continue;
            }
            constrained += 1;
            let scores = &node_scores[qi];
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            // Nodes tied with the T-th score are kept too, so the cut never
            // splits a group of equally good matches.
            let keep = match top_t.checked_sub(1).and_then(|i| order.get(i)) {
                Some(&last) => {
                    let cutoff = scores[last];
                    order.iter().take_while(|&&c| scores[c] >= cutoff).count()
                }
                None => order.len().min(top_t),
            };
            for &ci in order.iter().take(keep) {
                for image_id in self.catalog.nodes()[ci].images() {
                    let pos = self
                        .catalog
                        .image_position(image_id)
                        .expect("postings reference catalog images");
                    if seen[pos] != qi as u32 {
                        seen[pos] = qi as u32;
                        count[pos] += 1;
                    }
                }
            }
        }
        if constrained == 0 {
            return None;
        }
        let survivors: Vec<usize> = (0..num_images)
            .filter(|&i| count[i] == constrained)
            .collect();
        // An empty intersection would leave nothing to normalize over.
        if survivors.is_empty() {
            None
        } else {
            Some(survivors)
        }
    }

    /// Best match of every query element inside one image.
    pub fn match_image(&self, attention: &AttentionMap, image: &CatalogImage) -> ImageMatch {
        let eps = self.params.epsilon;
        let nodes: Vec<BestMatch> = attention
            .node_scores
            .iter()
            .map(|scores| {
                let mut best = BestMatch::NONE;
                for &ci in &image.nodes {
                    best.offer(scores[ci], ci);
                }
                best
            })
            .collect();
        let triples: Vec<BestMatch> = attention
            .triple_ends
            .iter()
            .enumerate()
            .map(|(qt, &(qh, qtl))| {
                let head_scores = &attention.node_scores[qh];
                let tail_scores = &attention.node_scores[qtl];
                let rel_scores = &attention.relation_scores[qt];
                let mut best = BestMatch::NONE;
                for &ti in &image.triples {
                    let key = self.catalog.triples()[ti].key;
                    let s = (head_scores[key.head] + tail_scores[key.tail] + rel_scores[key.relation])
                        / 3.0;
                    best.offer(s, ti);
                }
                best
            })
            .collect();
        let log_score = nodes
            .iter()
            .chain(&triples)
            .map(|b| b.score.max(eps).ln())
            .sum();
        ImageMatch {
            log_score,
            nodes,
            triples,
        }
    }

    pub fn retrieve(&self, query: &QueryGraph, mode: ScoringMode) -> Result<RetrievalResult> {
        let attention = self.attention(query, mode)?;
        let images = self.catalog.images();
        if images.is_empty() {
            return Err(Error::Argument("catalog has no images".into()));
        }
        let positions: Vec<usize> = match &attention.candidate_images {
            Some(c) => c.clone(),
            None => (0..images.len()).collect(),
        };
        let scored: Vec<f64> = positions
            .par_iter()
            .map(|&p| self.match_image(&attention, &images[p]).log_score)
            .collect();
        let mut log_scores = vec![f64::NEG_INFINITY; images.len()];
        for (&p, &s) in positions.iter().zip(&scored) {
            log_scores[p] = s;
        }
        Ok(RetrievalResult::from_log_scores(self.catalog, log_scores, attention))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestMatch {
    pub score: f64,
    /// Catalog node or triple index attaining `score`; lowest index on ties.
    /// `None` when the image holds no element of that kind.
    pub index: Option<usize>,
}

impl BestMatch {
    const NONE: BestMatch = BestMatch {
        score: 0.0,
        index: None,
    };

    fn offer(&mut self, score: f64, index: usize) {
        let better = match self.index {
            None => true,
            Some(i) => score > self.score || (score == self.score && index < i),
        };
        if better {
            self.score = score;
            self.index = Some(index);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// `Σ ln max(best, ε)` over query nodes and triples.
    pub log_score: f64,
    pub nodes: Vec<BestMatch>,
    pub triples: Vec<BestMatch>,
}

/// Query-to-catalog attention.
///
/// Node scores are stored densely (query node × catalog node). A triple score
/// is fully determined by its head, tail and relation scores, so triple
/// attention is derived on demand from those factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub node_scores: Vec<Vec<f64>>,
    /// Query triple × schema relation.
    pub relation_scores: Vec<Vec<f64>>,
    /// `(head, tail)` query node indices of each query triple.
    pub triple_ends: Vec<(usize, usize)>,
    /// Catalog image positions kept by the pruning filter (pruned mode only).
    pub candidate_images: Option<Vec<usize>>,
}

impl AttentionMap {
    pub fn triple_score(&self, catalog: &CatalogGraph, query_triple: usize, catalog_triple: usize) -> f64 {
        let (qh, qt) = self.triple_ends[query_triple];
        let key = catalog.triples()[catalog_triple].key;
        (self.node_scores[qh][key.head]
            + self.node_scores[qt][key.tail]
            + self.relation_scores[query_triple][key.relation])
            / 3.0
    }

    /// Scores of one query triple over all catalog triples (or, in pruned mode,
    /// over triples occurring in candidate images), as `(triple index, score)`.
    pub fn triple_attention(&self, catalog: &CatalogGraph, query_triple: usize) -> Vec<(usize, f64)> {
        let indices: Vec<usize> = match &self.candidate_images {
            None => (0..catalog.triples().len()).collect(),
            Some(c) => {
                let mut v: Vec<usize> = c
                    .iter()
                    .flat_map(|&p| catalog.images()[p].triples.iter().copied())
                    .collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        };
        indices
            .into_iter()
            .map(|t| (t, self.triple_score(catalog, query_triple, t)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// Image ids in catalog order (ascending id).
    pub image_ids: Vec<u64>,
    /// Probability per image, aligned with `image_ids`.
    pub probabilities: Vec<f64>,
    /// Unnormalized log score per image; `-inf` for pruned-away images.
    pub log_scores: Vec<f64>,
    /// Image ids by descending probability.
    pub ranking: Vec<u64>,
    pub attention: AttentionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub rank: usize,
    pub image_id: u64,
    pub probability: f64,
}

impl RetrievalResult {
    fn from_log_scores(catalog: &CatalogGraph, log_scores: Vec<f64>, attention: AttentionMap) -> Self {
        let probabilities = softmax(&log_scores);
        RetrievalResult {
            image_ids: catalog.images().iter().map(|i| i.image_id).collect(),
            probabilities,
            ranking: Self::rank(catalog, &log_scores),
            log_scores,
            attention,
        }
    }

    /// Image ids in ranking order for the given per-image log scores.
    pub(crate) fn rank(catalog: &CatalogGraph, log_scores: &[f64]) -> Vec<u64> {
        let images = catalog.images();
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.sort_by(|&a, &b| rank_order(log_scores, images, a, b));
        order.iter().map(|&i| images[i].image_id).collect()
    }

    pub fn probability(&self, image_id: u64) -> Option<f64> {
        self.image_ids
            .binary_search(&image_id)
            .ok()
            .map(|i| self.probabilities[i])
    }

    /// 1-based rank of an image.
    pub fn rank_of(&self, image_id: u64) -> Option<usize> {
        self.ranking.iter().position(|&id| id == image_id).map(|r| r + 1)
    }

    pub fn top(&self, k: usize) -> Vec<RankedImage> {
        self.ranking
            .iter()
            .take(k)
            .enumerate()
            .map(|(r, &id)| RankedImage {
                rank: r + 1,
                image_id: id,
                probability: self.probability(id).expect("ranked ids are catalog ids"),
            })
            .collect()
    }
}

/// Descending score; exact ties go to the smaller image (fewer nodes, then
/// fewer triples), then to the lower image id.
fn rank_order(log_scores: &[f64], images: &[CatalogImage], a: usize, b: usize) -> Ordering {
    log_scores[b]
        .total_cmp(&log_scores[a])
        .then(images[a].nodes.len().cmp(&images[b].nodes.len()))
        .then(images[a].triples.len().cmp(&images[b].triples.len()))
        .then(images[a].image_id.cmp(&images[b].image_id))
}

/// Normalizes log scores; `-inf` entries get probability zero.
pub fn softmax(log_scores: &[f64]) -> Vec<f64> {
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn attention(
    query: &QueryGraph,
    catalog: &CatalogGraph,
    params: &ScoringParams,
    mode: ScoringMode,
) -> Result<AttentionMap> {
    ScoringContext::new(catalog, params)?.attention(query, mode)
}

pub fn image_probabilities(
    query: &QueryGraph,
    catalog: &CatalogGraph,
    params: &ScoringParams,
    mode: ScoringMode,
) -> Result<RetrievalResult> {
    ScoringContext::new(catalog, params)?.retrieve(query, mode)
}

/// Thresholded reading of subsumption: every query element finds a match in
/// the image scoring at least `threshold`.
pub fn is_subsumed(
    query: &QueryGraph,
    catalog: &CatalogGraph,
    image_id: u64,
    params: &ScoringParams,
    threshold: f64,
) -> Result<bool> {
    let ctx = ScoringContext::new(catalog, params)?;
    let attention = ctx.attention(query, ScoringMode::Dense)?;
    let m = ctx.match_image(&attention, catalog.image(image_id)?);
    Ok(m
        .nodes
        .iter()
        .chain(&m.triples)
        .all(|b| b.index.is_some() && b.score >= threshold))
}

/// Derivatives of single factors, used by the trainer.
pub(crate) mod grad {
    use super::*;

    /// Adds `coef · ∂(node score)/∂θ` for query node matrix `q` against
    /// catalog node `c`.
    pub fn node_score(
        q: &NodeMatrix,
        c: &NodeMatrix,
        params: &ScoringParams,
        coef: f64,
        out: &mut ParamGradient,
    ) {
        let n = q.dimension();
        let qp = params.project_matrix(q);
        let cp = params.project_matrix(c);
        let d = node_distance_projected(q.mask(), &qp, &cp, n, params);
        if d == 0.0 {
            // Minimum of the distance; zero subgradient.
            return;
        }
        let s = 1.0 / (1.0 + d);
        let ds_dd = -s * s;
        let k = coef * ds_dd / d;
        for i in 0..q.num_rows() {
            if !q.is_known(i) {
                continue;
            }
            let w = params.attribute_weight(i);
            let pd: Vec<f64> = qp[i * n..(i + 1) * n]
                .iter()
                .zip(&cp[i * n..(i + 1) * n])
                .map(|(a, b)| a - b)
                .collect();
            let sq: f64 = pd.iter().map(|v| v * v).sum();
            // ∂d/∂logit_i = w_i · ‖PΔ_i‖² / (2d)
            out.attribute_logits[i] += k * 0.5 * w * sq;
            if let Some(gp) = &mut out.projection {
                // ∂d/∂P = Σ_i w_i (PΔ_i) Δ_iᵀ / d
                let delta: Vec<f64> = q.row(i).iter().zip(c.row(i)).map(|(a, b)| a - b).collect();
                for r in 0..n {
                    let a = k * w * pd[r];
                    if a != 0.0 {
                        let row = &mut gp[r * n..(r + 1) * n];
                        for (g, dv) in row.iter_mut().zip(&delta) {
                            *g += a * dv;
                        }
                    }
                }
            }
        }
    }

    /// Adds `coef · ∂(relation score)/∂θ`.
    pub fn edge_score(
        q: &[f64],
        c: &[f64],
        params: &ScoringParams,
        coef: f64,
        out: &mut ParamGradient,
    ) {
        let qp = params.project(q);
        let cp = params.project(c);
        let dist = sq_dist(&qp, &cp).sqrt();
        if dist == 0.0 {
            return;
        }
        let ew = params.edge_weight();
        let s = 1.0 / (1.0 + ew * dist);
        out.edge_logit += coef * (-s * s * dist * ew);
        if let Some(gp) = &mut out.projection {
            let n = q.len();
            let k = coef * (-s * s * ew / dist);
            let delta: Vec<f64> = q.iter().zip(c).map(|(a, b)| a - b).collect();
            for r in 0..n {
                let a = k * (qp[r] - cp[r]);
                if a != 0.0 {
                    for (g, dv) in gp[r * n..(r + 1) * n].iter_mut().zip(&delta) {
                        *g += a * dv;
                    }
                }
            }
        }
    }
}
