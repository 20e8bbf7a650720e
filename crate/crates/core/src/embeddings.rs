//! Semantic vectors for attribute values and relation labels.
//!
//! Vectors come either from a pretrained word-vector text file (`label v1 .. vN`
//! per line) or from a deterministic hash of the label, so that the engine runs
//! hermetically without an external vector file.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved label for attributes the query does not mention. Always the zero vector.
pub const UNKNOWN_LABEL: &str = "⟨unknown⟩";

pub const DEFAULT_DIMENSION: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    File,
    DeterministicHash { seed: u64 },
}

/// Label → vector table with a fixed dimension. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: HashMap<String, Vec<f64>>,
    source: EmbeddingSource,
    /// Seed used to synthesize vectors for labels missing from a file table.
    fallback_seed: Option<u64>,
    fingerprint: u64,
}

impl EmbeddingTable {
    /// A hash-backed table. Any label resolves; `labels` are materialized eagerly.
    pub fn deterministic<'a>(
        dimension: usize,
        seed: u64,
        labels: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut entries = HashMap::new();
        for label in labels {
            if label != UNKNOWN_LABEL {
                entries
                    .entry(label.to_string())
                    .or_insert_with(|| deterministic_embedding(label, dimension, seed));
            }
        }
        entries.insert(UNKNOWN_LABEL.to_string(), vec![0.0; dimension]);
        let mut table = EmbeddingTable {
            dimension,
            entries,
            source: EmbeddingSource::DeterministicHash { seed },
            fallback_seed: None,
            fingerprint: 0,
        };
        table.fingerprint = table.compute_fingerprint();
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>, dimension: usize) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file), dimension).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    /// Parses the word-vector text format. Duplicate labels keep their first occurrence.
    pub fn from_reader(reader: impl BufRead, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut entries: HashMap<String, Vec<f64>> = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            let mut tokens = line.split_whitespace();
            let Some(label) = tokens.next() else {
                continue;
            };
            let values = tokens
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| {
                            Error::parse(Some(line_no), format!("invalid component {tok:?}"))
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != dimension {
                return Err(Error::parse(
                    Some(line_no),
                    format!(
                        "label {label:?} has {} components, expected {dimension}",
                        values.len()
                    ),
                ));
            }
            entries.entry(label.to_string()).or_insert(values);
        }
        entries.insert(UNKNOWN_LABEL.to_string(), vec![0.0; dimension]);
        let mut table = EmbeddingTable {
            dimension,
            entries,
            source: EmbeddingSource::File,
            fallback_seed: None,
            fingerprint: 0,
        };
        table.fingerprint = table.compute_fingerprint();
        Ok(table)
    }

    /// Lets a file-backed table synthesize vectors for labels it lacks.
    pub fn with_fallback(mut self, seed: u64) -> Self {
        if self.source == EmbeddingSource::File {
            self.fallback_seed = Some(seed);
            self.fingerprint = self.compute_fingerprint();
        }
        self
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    /// 64-bit digest identifying the table contents (or its generator).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.contains_key(label)
    }

    pub fn lookup(&self, label: &str) -> Result<Cow<'_, [f64]>> {
        if let Some(v) = self.entries.get(label) {
            return Ok(Cow::Borrowed(v.as_slice()));
        }
        let seed = match self.source {
            EmbeddingSource::DeterministicHash { seed } => Some(seed),
            EmbeddingSource::File => self.fallback_seed,
        };
        match seed {
            Some(seed) => Ok(Cow::Owned(deterministic_embedding(
                label,
                self.dimension,
                seed,
            ))),
            None => Err(Error::Lookup(format!("no embedding for label {label:?}"))),
        }
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.dimension as u64).to_le_bytes());
        match self.source {
            EmbeddingSource::DeterministicHash { seed } => {
                // Contents are a pure function of (dimension, seed).
                hasher.update(b"hash");
                hasher.update(seed.to_le_bytes());
            }
            EmbeddingSource::File => {
                hasher.update(b"file");
                let mut labels: Vec<&String> = self.entries.keys().collect();
                labels.sort();
                for label in labels {
                    hasher.update((label.len() as u64).to_le_bytes());
                    hasher.update(label.as_bytes());
                    for v in &self.entries[label] {
                        hasher.update(v.to_bits().to_le_bytes());
                    }
                }
                if let Some(seed) = self.fallback_seed {
                    hasher.update(b"fallback");
                    hasher.update(seed.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Unit-norm pseudo-random vector that is a pure function of `(label, dimension, seed)`.
pub fn deterministic_embedding(label: &str, dimension: usize, seed: u64) -> Vec<f64> {
    debug_assert!(!label.is_empty());
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((dimension as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());

    let mut v: Vec<f64> = (0..dimension)
        .map(|_| {
            let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            2.0 * unit - 1.0
        })
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}
