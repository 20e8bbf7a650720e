//! Query graphs: partially specified scene graphs built from captions or
//! sampled from gold scenes.
//!
//! Captions follow a small templated grammar:
//!
//! ```text
//! CAPTION := "there is" NP (REL NP)*
//! NP      := article? size? color? material? noun
//! REL     := "left of" | "right of" | "in front of" | "behind"
//! ```
//!
//! The noun is a shape word or "thing"/"object", which leaves the shape
//! unknown. Each REL attaches the preceding NP (head) to the following NP
//! (tail). Synonyms such as "shiny" (metal) or "ball" (sphere) are accepted.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::scene_graph::{AttributeSchema, NodeMatrix, SceneGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct QueryNode {
    /// Known attribute values in schema order; `None` is unknown.
    pub values: Vec<Option<String>>,
    pub matrix: NodeMatrix,
    /// Character range of the noun phrase in the caption.
    pub span: Option<Range<usize>>,
}

impl QueryNode {
    pub fn new(values: Vec<Option<String>>, table: &EmbeddingTable) -> Result<Self> {
        let labels: Vec<Option<&str>> = values.iter().map(|v| v.as_deref()).collect();
        let matrix = NodeMatrix::from_labels(&labels, table)?;
        Ok(QueryNode {
            values,
            matrix,
            span: None,
        })
    }

    pub fn num_known(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryTriple {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryGraph {
    pub nodes: Vec<QueryNode>,
    pub triples: Vec<QueryTriple>,
    /// Fingerprint of the embedding table the node matrices came from.
    pub embedding_fingerprint: u64,
}

impl QueryGraph {
    pub fn new(
        nodes: Vec<QueryNode>,
        triples: Vec<QueryTriple>,
        schema: &AttributeSchema,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Argument("query graph needs at least one node".into()));
        }
        for node in &nodes {
            if node.values.len() != schema.num_attributes() {
                return Err(Error::Argument(format!(
                    "query node has {} attributes, schema has {}",
                    node.values.len(),
                    schema.num_attributes()
                )));
            }
        }
        for t in &triples {
            if t.head >= nodes.len() || t.tail >= nodes.len() {
                return Err(Error::Argument("query triple endpoint out of range".into()));
            }
            if schema.relation_index(&t.relation).is_none() {
                return Err(Error::Lookup(format!("unknown relation {:?}", t.relation)));
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.num_known() == 0 && !triples.iter().any(|t| t.head == i || t.tail == i) {
                return Err(Error::Argument(format!(
                    "query node {i} has no known attribute and no relation"
                )));
            }
        }
        Ok(QueryGraph {
            nodes,
            triples,
            embedding_fingerprint: table.fingerprint(),
        })
    }

    /// The full scene graph as a query: every attribute known.
    pub fn from_scene(
        scene: &SceneGraph,
        schema: &AttributeSchema,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        let nodes = scene
            .nodes
            .iter()
            .map(|n| QueryNode::new(n.values.iter().cloned().map(Some).collect(), table))
            .collect::<Result<Vec<_>>>()?;
        let triples = scene
            .edges
            .iter()
            .map(|e| QueryTriple {
                head: e.head,
                relation: e.relation.clone(),
                tail: e.tail,
            })
            .collect();
        QueryGraph::new(nodes, triples, schema, table)
    }

    /// Human-readable description, one element per line.
    pub fn describe(&self, schema: &AttributeSchema) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let attrs: Vec<String> = schema
                .attributes()
                .iter()
                .zip(&node.values)
                .map(|(a, v)| format!("{}={}", a.name, v.as_deref().unwrap_or("?")))
                .collect();
            out.push_str(&format!("node {i}: {}\n", attrs.join(" ")));
        }
        for t in &self.triples {
            out.push_str(&format!("triple: ({}, {}, {})\n", t.head, t.relation, t.tail));
        }
        out
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const GENERIC_NOUNS: [&str; 2] = ["thing", "object"];

/// Word lists for a schema: surface words per attribute value and relation
/// phrases per relation label.
#[derive(Debug, Clone)]
pub struct Lexicon {
    /// surface word → (attribute index, canonical value)
    words: HashMap<String, (usize, String)>,
    /// canonical value → surface forms (canonical first)
    surface: HashMap<(usize, String), Vec<String>>,
    /// token sequences → relation label, longest first
    relation_phrases: Vec<(Vec<String>, String)>,
    noun_attribute: usize,
}

fn clevr_synonyms(value: &str) -> &'static [&'static str] {
    match value {
        "large" => &["big"],
        "small" => &["tiny"],
        "metal" => &["metallic", "shiny"],
        "rubber" => &["matte"],
        "sphere" => &["ball"],
        "cube" => &["block"],
        _ => &[],
    }
}

fn relation_synonyms(label: &str) -> Vec<Vec<&'static str>> {
    match label {
        "left" => vec![
            vec!["left", "of"],
            vec!["to", "the", "left", "of"],
            vec!["on", "the", "left", "side", "of"],
        ],
        "right" => vec![
            vec!["right", "of"],
            vec!["to", "the", "right", "of"],
            vec!["on", "the", "right", "side", "of"],
        ],
        "front" => vec![vec!["in", "front", "of"]],
        "behind" => vec![vec!["behind"]],
        _ => vec![],
    }
}

impl Lexicon {
    pub fn new(schema: &AttributeSchema) -> Self {
        let noun_attribute = schema
            .attribute_index("shape")
            .unwrap_or(schema.num_attributes() - 1);
        let mut words = HashMap::new();
        let mut surface = HashMap::new();
        for (ai, attr) in schema.attributes().iter().enumerate() {
            for value in &attr.values {
                let mut forms = vec![value.clone()];
                forms.extend(clevr_synonyms(value).iter().map(|s| s.to_string()));
                for form in &forms {
                    words
                        .entry(form.clone())
                        .or_insert_with(|| (ai, value.clone()));
                }
                surface.insert((ai, value.clone()), forms);
            }
        }
        let mut relation_phrases = Vec::new();
        for rel in schema.relations() {
            let mut phrases: Vec<Vec<String>> = relation_synonyms(rel)
                .into_iter()
                .map(|p| p.into_iter().map(String::from).collect())
                .collect();
            if phrases.is_empty() {
                phrases.push(vec![rel.clone(), "of".into()]);
                phrases.push(vec![rel.clone()]);
            }
            relation_phrases.extend(phrases.into_iter().map(|p| (p, rel.clone())));
        }
        relation_phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        Lexicon {
            words,
            surface,
            relation_phrases,
            noun_attribute,
        }
    }

    /// Canonical surface phrase for a relation label.
    pub fn relation_phrase(&self, label: &str) -> Option<String> {
        let canonical = relation_synonyms(label);
        if let Some(first) = canonical.first() {
            return Some(first.join(" "));
        }
        self.relation_phrases
            .iter()
            .find(|(_, l)| l == label)
            .map(|(p, _)| p.join(" "))
    }
}

struct Token<'a> {
    text: &'a str,
    span: Range<usize>,
}

fn tokenize(caption: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in caption.char_indices() {
        let boundary = c.is_whitespace() || matches!(c, '.' | ',' | ';' | '?' | '!');
        match (boundary, start) {
            (true, Some(s)) => {
                tokens.push(Token {
                    text: &caption[s..i],
                    span: s..i,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            text: &caption[s..],
            span: s..caption.len(),
        });
    }
    tokens
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    pos: usize,
    lexicon: &'a Lexicon,
    num_attributes: usize,
    lowered: Vec<String>,
}

impl<'a> Parser<'a> {
    fn error(&self, message: impl Into<String>) -> Error {
        let token = self
            .tokens
            .get(self.pos)
            .map(|t| t.text.to_string())
            .unwrap_or_else(|| "<end>".into());
        Error::Caption {
            position: self.pos,
            token,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&str> {
        self.lowered.get(self.pos).map(String::as_str)
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {word:?}")))
        }
    }

    fn noun_phrase(&mut self) -> Result<(Vec<Option<String>>, Range<usize>)> {
        let start_pos = self.pos;
        if self.peek().is_some_and(|w| ARTICLES.contains(&w)) {
            self.pos += 1;
        }
        let mut values: Vec<Option<String>> = vec![None; self.num_attributes];
        loop {
            let Some(word) = self.peek() else {
                return Err(self.error("expected a noun"));
            };
            if GENERIC_NOUNS.contains(&word) {
                self.pos += 1;
                break;
            }
            let Some((attr, value)) = self.lexicon.words.get(word) else {
                return Err(self.error("unrecognized token"));
            };
            if values[*attr].is_some() {
                return Err(self.error("attribute given twice in one noun phrase"));
            }
            values[*attr] = Some(value.clone());
            self.pos += 1;
            if *attr == self.lexicon.noun_attribute {
                break;
            }
        }
        let span = self.tokens[start_pos].span.start..self.tokens[self.pos - 1].span.end;
        Ok((values, span))
    }

    fn relation(&mut self) -> Option<String> {
        let rest = &self.lowered[self.pos..];
        for (phrase, label) in &self.lexicon.relation_phrases {
            if rest.len() >= phrase.len() && rest[..phrase.len()] == phrase[..] {
                self.pos += phrase.len();
                return Some(label.clone());
            }
        }
        None
    }
}

/// Parses a templated caption into a query graph.
pub fn parse_caption(
    caption: &str,
    schema: &AttributeSchema,
    table: &EmbeddingTable,
) -> Result<QueryGraph> {
    let lexicon = Lexicon::new(schema);
    parse_caption_with(caption, schema, table, &lexicon)
}

pub fn parse_caption_with(
    caption: &str,
    schema: &AttributeSchema,
    table: &EmbeddingTable,
    lexicon: &Lexicon,
) -> Result<QueryGraph> {
    let tokens = tokenize(caption);
    let lowered = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let mut p = Parser {
        tokens,
        pos: 0,
        lexicon,
        num_attributes: schema.num_attributes(),
        lowered,
    };
    p.expect("there")?;
    p.expect("is")?;

    let mut phrases = vec![p.noun_phrase()?];
    let mut triples = Vec::new();
    while p.peek().is_some() {
        let Some(relation) = p.relation() else {
            return Err(p.error("unrecognized token"));
        };
        if p.peek().is_none() {
            return Err(p.error("relation phrase without a second noun phrase"));
        }
        let head = phrases.len() - 1;
        phrases.push(p.noun_phrase()?);
        triples.push(QueryTriple {
            head,
            relation,
            tail: phrases.len() - 1,
        });
    }

    if phrases.len() == 1 && phrases[0].0.iter().all(Option::is_none) {
        p.pos = p.tokens.len() - 1;
        return Err(p.error("caption names no attribute or relation"));
    }

    let nodes = phrases
        .into_iter()
        .map(|(values, span)| {
            let mut node = QueryNode::new(values, table)?;
            node.span = Some(span);
            Ok(node)
        })
        .collect::<Result<Vec<_>>>()?;
    QueryGraph::new(nodes, triples, schema, table)
}

/// Drops `⌊node_drop_fraction · n⌋` nodes (keeping at least one) and masks each
/// remaining attribute with probability `attribute_mask_fraction`.
pub fn sample_partial_query(
    scene: &SceneGraph,
    node_drop_fraction: f64,
    attribute_mask_fraction: f64,
    rng_seed: u64,
    schema: &AttributeSchema,
    table: &EmbeddingTable,
) -> Result<QueryGraph> {
    for (name, f) in [
        ("node_drop_fraction", node_drop_fraction),
        ("attribute_mask_fraction", attribute_mask_fraction),
    ] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Argument(format!("{name} = {f} is outside [0, 1)")));
        }
    }
    let n = scene.nodes.len();
    if n == 0 {
        return Err(Error::Argument("scene has no nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let drop = ((node_drop_fraction * n as f64).floor() as usize).min(n - 1);
    let mut retained: Vec<usize> = rand::seq::index::sample(&mut rng, n, n - drop).into_vec();
    retained.sort_unstable();

    let mut remap = vec![None; n];
    for (new, &old) in retained.iter().enumerate() {
        remap[old] = Some(new);
    }
    let triples: Vec<QueryTriple> = scene
        .edges
        .iter()
        .filter_map(|e| {
            Some(QueryTriple {
                head: remap[e.head]?,
                relation: e.relation.clone(),
                tail: remap[e.tail]?,
            })
        })
        .collect();

    let mut nodes = Vec::with_capacity(retained.len());
    for (new, &old) in retained.iter().enumerate() {
        let mut values: Vec<Option<String>> = scene.nodes[old]
            .values
            .iter()
            .map(|v| Some(v.clone()))
            .collect();
        if attribute_mask_fraction > 0.0 {
            for v in values.iter_mut() {
                if rng.gen::<f64>() < attribute_mask_fraction {
                    *v = None;
                }
            }
            let connected = triples.iter().any(|t| t.head == new || t.tail == new);
            if !connected && values.iter().all(Option::is_none) {
                // An isolated node must say something; restore one attribute.
                let keep = rng.gen_range(0..values.len());
                values[keep] = Some(scene.nodes[old].values[keep].clone());
            }
        }
        nodes.push(QueryNode::new(values, table)?);
    }
    QueryGraph::new(nodes, triples, schema, table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedCaption {
    pub text: String,
    /// Scene object described by each noun phrase, in caption order.
    pub objects: Vec<usize>,
}

/// Random caption describing a chain of up to three objects of `scene`.
pub fn caption_grammar_generate(
    scene: &SceneGraph,
    schema: &AttributeSchema,
    rng_seed: u64,
) -> GeneratedCaption {
    let lexicon = Lexicon::new(schema);
    generate_with(scene, schema, &lexicon, rng_seed)
}

pub fn generate_with(
    scene: &SceneGraph,
    schema: &AttributeSchema,
    lexicon: &Lexicon,
    rng_seed: u64,
) -> GeneratedCaption {
    assert!(!scene.nodes.is_empty(), "scene must have at least one object");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let max_len = rng.gen_range(1..=3usize);

    let mut objects = vec![rng.gen_range(0..scene.nodes.len())];
    let mut relations: Vec<String> = Vec::new();
    while objects.len() < max_len {
        let current = *objects.last().expect("chain is non-empty");
        let options: Vec<_> = scene
            .edges
            .iter()
            .filter(|e| e.head == current && !objects.contains(&e.tail))
            .collect();
        let Some(edge) = options.choose(&mut rng) else {
            break;
        };
        relations.push(edge.relation.clone());
        objects.push(edge.tail);
    }

    let mut words: Vec<String> = vec!["there".into(), "is".into()];
    for (i, &obj) in objects.iter().enumerate() {
        if i > 0 {
            let phrase = lexicon
                .relation_phrase(&relations[i - 1])
                .expect("schema relations have phrases");
            words.push(phrase);
        }
        let standalone = objects.len() == 1;
        let mut phrase = noun_phrase_words(&scene.nodes[obj].values, schema, lexicon, standalone, &mut rng);
        let article = if phrase[0].starts_with(['a', 'e', 'i', 'o', 'u']) {
            "an"
        } else {
            "a"
        };
        words.push(article.into());
        words.append(&mut phrase);
    }
    GeneratedCaption {
        text: words.join(" "),
        objects,
    }
}

fn noun_phrase_words(
    values: &[String],
    schema: &AttributeSchema,
    lexicon: &Lexicon,
    require_attribute: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let m = schema.num_attributes();
    let mut include: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.5)).collect();
    if require_attribute && !include.iter().any(|&b| b) {
        include[rng.gen_range(0..m)] = true;
    }
    let surface = |ai: usize, rng: &mut ChaCha8Rng| -> String {
        let forms = &lexicon.surface[&(ai, values[ai].clone())];
        forms.choose(rng).expect("at least the canonical form").clone()
    };
    let mut words = Vec::new();
    for ai in (0..m).filter(|&ai| ai != lexicon.noun_attribute) {
        if include[ai] {
            words.push(surface(ai, rng));
        }
    }
    if include[lexicon.noun_attribute] {
        words.push(surface(lexicon.noun_attribute, rng));
    } else {
        words.push(GENERIC_NOUNS.choose(rng).expect("non-empty").to_string());
    }
    words
}
