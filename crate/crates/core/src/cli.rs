//! The `sgr` command line.
//!
//! Every knob lives in [`RunConfig`]. A TOML file given with `--config` is read
//! first and flags override it; the merged config is written into every
//! artifact so a run can be repeated exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::catalog::{build_catalog, CatalogGraph};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{dedup_scenes, node_drop_experiment, reports_table, NodeDropConfig};
use crate::query::{parse_caption, sample_partial_query, QueryGraph};
use crate::scene_graph::{load_clevr_scenes, write_clevr_scenes, AttributeSchema, LoadOptions, SceneGraph};
use crate::scoring::{ScoringContext, ScoringMode, ScoringParams, DEFAULT_TOP_T};
use crate::synth::{synthesize_scenes, SynthConfig};
use crate::training::{
    load_params, metrics_jsonl, train, BaselineMode, GradientForm, ObjectiveMode, TrainConfig,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Dense,
    Pruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BaselineName {
    Zero,
    RunningMean,
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ObjectiveName {
    FullDistribution,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum GradientName {
    Literal,
    ScoreFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenes: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embedding_dim: usize,
    pub embedding_seed: u64,
    pub index: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub max_edges_per_node: Option<usize>,
    pub caption: Option<String>,
    pub top_k: usize,
    pub mode: ModeName,
    pub top_t: usize,
    pub drop_fractions: Vec<f64>,
    pub queries_per_fraction: usize,
    pub attribute_mask_fraction: f64,
    pub include_timing: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub baseline: BaselineName,
    pub baseline_decay: f64,
    pub objective: ObjectiveName,
    pub gradient: GradientName,
    pub gradient_clip: Option<f64>,
    pub train_drop_fraction: f64,
    pub num_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            scenes: None,
            embeddings: None,
            embedding_dim: crate::embeddings::DEFAULT_DIMENSION,
            embedding_seed: 0,
            index: None,
            params: None,
            output: None,
            max_edges_per_node: None,
            caption: None,
            top_k: 10,
            mode: ModeName::Pruned,
            top_t: DEFAULT_TOP_T,
            drop_fractions: vec![0.0, 0.2, 0.3],
            queries_per_fraction: 1000,
            attribute_mask_fraction: 0.0,
            include_timing: false,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            baseline: BaselineName::RunningMean,
            baseline_decay: 0.9,
            objective: ObjectiveName::FullDistribution,
            gradient: GradientName::Literal,
            gradient_clip: None,
            train_drop_fraction: 0.0,
            num_scenes: synth.num_scenes,
            min_objects: synth.min_objects,
            max_objects: synth.max_objects,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sgr", version, about = "Scene-graph caption-to-image retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build a catalog index from CLEVR-format scenes.
    BuildIndex,
    /// Rank catalog images for a caption.
    Retrieve,
    /// Train scoring parameters on partial queries drawn from the scenes.
    Train,
    /// Run the node-drop experiment.
    Eval,
    /// Print the query graph of a caption.
    ParseCaption,
    /// Write synthetic CLEVR-format scenes.
    SynthScenes,
}

/// Flags override values from the config file.
#[derive(Debug, Default, clap::Args)]
pub struct Flags {
    /// TOML file with run settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenes: Option<PathBuf>,
    /// Word-vector text file: `label v1 ... vN` per line.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embedding_dim: Option<usize>,
    #[arg(long, global = true)]
    pub embedding_seed: Option<u64>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub max_edges_per_node: Option<usize>,
    #[arg(long, global = true)]
    pub caption: Option<String>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeName>,
    #[arg(long, global = true)]
    pub top_t: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub drop_fractions: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub queries_per_fraction: Option<usize>,
    #[arg(long, global = true)]
    pub attribute_mask_fraction: Option<f64>,
    /// Keep per-query wall time in report artifacts.
    #[arg(long, global = true)]
    pub include_timing: bool,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub baseline: Option<BaselineName>,
    #[arg(long, global = true)]
    pub baseline_decay: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub objective: Option<ObjectiveName>,
    #[arg(long, global = true, value_enum)]
    pub gradient: Option<GradientName>,
    #[arg(long, global = true)]
    pub gradient_clip: Option<f64>,
    #[arg(long, global = true)]
    pub train_drop_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub num_scenes: Option<usize>,
    #[arg(long, global = true)]
    pub min_objects: Option<usize>,
    #[arg(long, global = true)]
    pub max_objects: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

macro_rules! override_fields {
    ($cfg:expr, $flags:expr; $($f:ident),*; $($o:ident),*) => {
        $(if let Some(v) = $flags.$f.clone() { $cfg.$f = v; })*
        $(if $flags.$o.is_some() { $cfg.$o = $flags.$o.clone(); })*
    };
}

impl Flags {
    /// Reads the config file (if any) and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        override_fields!(cfg, self;
            embedding_dim, embedding_seed, top_k, mode, top_t, drop_fractions,
            queries_per_fraction, attribute_mask_fraction, learning_rate, epochs, baseline,
            baseline_decay, objective, gradient, train_drop_fraction, num_scenes,
            min_objects, max_objects, seed;
            scenes, embeddings, index, params, output, max_edges_per_node, caption,
            gradient_clip, threads);
        if self.include_timing {
            cfg.include_timing = true;
        }
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn scoring_mode(&self) -> ScoringMode {
        match self.mode {
            ModeName::Dense => ScoringMode::Dense,
            ModeName::Pruned => ScoringMode::Pruned { top_t: self.top_t },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            baseline: match self.baseline {
                BaselineName::Zero => BaselineMode::Zero,
                BaselineName::RunningMean => BaselineMode::RunningMean {
                    decay: self.baseline_decay,
                },
                BaselineName::Expected => BaselineMode::Expected,
            },
            objective: match self.objective {
                ObjectiveName::FullDistribution => ObjectiveMode::FullDistribution,
                ObjectiveName::Sampled => ObjectiveMode::Sampled,
            },
            gradient_form: match self.gradient {
                GradientName::Literal => GradientForm::Literal,
                GradientName::ScoreFunction => GradientForm::ScoreFunction,
            },
            rng_seed: self.seed,
            gradient_clip: self.gradient_clip,
            ..TrainConfig::default()
        }
    }

    fn require<'a, T>(&self, value: &'a Option<T>, flag: &str, command: Command) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::Argument(format!("{} needs --{flag}", command_name(command))))
    }

    /// The embedding table: a word-vector file with hashed fallback for
    /// missing labels, or hashed vectors throughout.
    pub fn embedding_table(&self, schema: &AttributeSchema) -> Result<EmbeddingTable> {
        match &self.embeddings {
            Some(path) => Ok(EmbeddingTable::load(path, self.embedding_dim)?.with_fallback(self.embedding_seed)),
            None => EmbeddingTable::deterministic(self.embedding_dim, self.embedding_seed, schema.labels()),
        }
    }

    fn load_scenes(&self, command: Command, schema: &AttributeSchema) -> Result<Vec<SceneGraph>> {
        let path = self.require(&self.scenes, "scenes", command)?;
        load_clevr_scenes(
            path,
            schema,
            LoadOptions {
                max_edges_per_node: self.max_edges_per_node,
            },
        )
    }

    fn load_index(&self, command: Command) -> Result<(CatalogGraph, EmbeddingTable)> {
        let path = self.require(&self.index, "index", command)?;
        // The schema is stored in the index; read it before choosing labels for
        // hashed embeddings.
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema = index_schema(&text)?;
        let table = self.embedding_table(&schema)?;
        Ok((CatalogGraph::from_json(&text, &table)?, table))
    }

    fn load_params(&self, catalog: &CatalogGraph) -> Result<ScoringParams> {
        let params = match &self.params {
            Some(path) => load_params(path)?,
            None => ScoringParams::new(catalog.schema().num_attributes()),
        };
        params.validate(catalog.schema().num_attributes(), catalog.dimension())?;
        Ok(params)
    }
}

fn index_schema(text: &str) -> Result<AttributeSchema> {
    #[derive(Deserialize)]
    struct SchemaProbe {
        schema: AttributeSchema,
    }
    serde_json::from_str::<SchemaProbe>(text)
        .map(|p| p.schema)
        .map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn command_name(command: Command) -> &'static str {
    match command {
        Command::BuildIndex => "build-index",
        Command::Retrieve => "retrieve",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::ParseCaption => "parse-caption",
        Command::SynthScenes => "synth-scenes",
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Caption { .. }
        | Error::Schema { .. }
        | Error::Lookup(_)
        | Error::Compatibility { .. }
        | Error::Version { .. }
        | Error::Corrupt(_) => EXIT_INPUT,
        Error::Build(_) | Error::Divergence { .. } => EXIT_RUNTIME,
    }
}

fn run_record(command: Command, cfg: &RunConfig) -> serde_json::Value {
    json!({ "command": command_name(command), "seed": cfg.seed, "config": cfg })
}

fn write_artifact(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Executes one command, writing human-readable output to `out`.
pub fn run(command: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cfg.threads {
        // Fails only if a pool already exists, which leaves the caller's
        // pool in charge.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::SynthScenes => {
            let output = cfg.require(&cfg.output, "output", command)?;
            if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
                return Err(Error::Argument("need 1 <= min-objects <= max-objects".into()));
            }
            let schema = AttributeSchema::clevr();
            let scenes = synthesize_scenes(
                &schema,
                &SynthConfig {
                    num_scenes: cfg.num_scenes,
                    min_objects: cfg.min_objects,
                    max_objects: cfg.max_objects,
                    first_image_id: 0,
                    seed: cfg.seed,
                },
            );
            write_clevr_scenes(output, &scenes, &schema)?;
            writeln!(out, "wrote {} scenes to {}", scenes.len(), output.display()).map_err(io)?;
        }
        Command::BuildIndex => {
            let output = cfg.require(&cfg.output, "output", command)?;
            let schema = AttributeSchema::clevr();
            let table = cfg.embedding_table(&schema)?;
            let scenes = cfg.load_scenes(command, &schema)?;
            let catalog = build_catalog(&scenes, &schema, &table)?;
            let text = catalog.to_json_with(Some(run_record(command, cfg)));
            fs::write(output, text).map_err(|e| Error::io(output, e))?;
            writeln!(
                out,
                "indexed {} images, {} nodes, {} triples -> {}",
                catalog.num_images(),
                catalog.nodes().len(),
                catalog.triples().len(),
                output.display()
            )
            .map_err(io)?;
        }
        Command::ParseCaption => {
            let caption = cfg.require(&cfg.caption, "caption", command)?;
            let schema = AttributeSchema::clevr();
            let table = cfg.embedding_table(&schema)?;
            let query = parse_caption(caption, &schema, &table)?;
            write!(out, "{}", query.describe(&schema)).map_err(io)?;
            if let Some(path) = &cfg.output {
                write_artifact(
                    path,
                    &json!({ "run": run_record(command, cfg), "query": query_json(&query) }),
                )?;
            }
        }
        Command::Retrieve => {
            let caption = cfg.require(&cfg.caption, "caption", command)?;
            let (catalog, table) = cfg.load_index(command)?;
            let params = cfg.load_params(&catalog)?;
            let query = parse_caption(caption, catalog.schema(), &table)?;
            let result = ScoringContext::new(&catalog, &params)?.retrieve(&query, cfg.scoring_mode())?;
            let top = result.top(cfg.top_k);
            writeln!(out, "rank\timage_id\tprobability").map_err(io)?;
            for r in &top {
                writeln!(out, "{}\t{}\t{:.6}", r.rank, r.image_id, r.probability).map_err(io)?;
            }
            if let Some(path) = &cfg.output {
                write_artifact(
                    path,
                    &json!({
                        "run": run_record(command, cfg),
                        "query": query_json(&query),
                        "results": top,
                    }),
                )?;
            }
        }
        Command::Eval => {
            let (catalog, table) = cfg.load_index(command)?;
            let params = cfg.load_params(&catalog)?;
            let scenes = cfg.load_scenes(command, catalog.schema())?;
            let (scenes, removed) = dedup_scenes(&scenes);
            let scenes: Vec<SceneGraph> = scenes
                .into_iter()
                .filter(|s| catalog.image_position(s.image_id).is_some())
                .collect();
            let reports = node_drop_experiment(
                &catalog,
                &scenes,
                &cfg.drop_fractions,
                &params,
                &table,
                &NodeDropConfig {
                    queries_per_fraction: cfg.queries_per_fraction,
                    attribute_mask_fraction: cfg.attribute_mask_fraction,
                    seed: cfg.seed,
                    mode: cfg.scoring_mode(),
                },
            )?;
            write!(out, "{}", reports_table(&reports)).map_err(io)?;
            for r in &reports {
                if let Some(t) = r.wall_time_per_query {
                    writeln!(out, "# drop {}: {:.3} ms/query", r.drop_fraction, t * 1e3).map_err(io)?;
                }
            }
            if let Some(path) = &cfg.output {
                let mut reports = reports;
                if !cfg.include_timing {
                    reports.iter_mut().for_each(|r| r.wall_time_per_query = None);
                }
                write_artifact(
                    path,
                    &json!({
                        "run": run_record(command, cfg),
                        "duplicates_removed": removed,
                        "reports": reports,
                    }),
                )?;
            }
        }
        Command::Train => {
            let output = cfg.require(&cfg.output, "output", command)?;
            let (catalog, table) = cfg.load_index(command)?;
            let initial = cfg.load_params(&catalog)?;
            let scenes = cfg.load_scenes(command, catalog.schema())?;
            let dataset = scenes
                .iter()
                .filter(|s| catalog.image_position(s.image_id).is_some())
                .enumerate()
                .map(|(i, s)| {
                    let q = sample_partial_query(
                        s,
                        cfg.train_drop_fraction,
                        cfg.attribute_mask_fraction,
                        cfg.seed.wrapping_add(i as u64),
                        catalog.schema(),
                        &table,
                    )?;
                    Ok((q, s.image_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let outcome = train(&dataset, &catalog, &initial, &cfg.train_config())?;
            write!(out, "{}", metrics_jsonl(&outcome.metrics)).map_err(io)?;
            write_artifact(
                output,
                &json!({
                    "run": run_record(command, cfg),
                    "params": outcome.params,
                    "metrics": outcome.metrics,
                }),
            )?;
        }
    }
    Ok(())
}

fn query_json(query: &QueryGraph) -> serde_json::Value {
    json!({
        "nodes": query.nodes.iter().map(|n| json!({
            "values": n.values,
            "span": n.span.as_ref().map(|s| [s.start, s.end]),
        })).collect::<Vec<_>>(),
        "triples": query.triples.iter().map(|t| json!([t.head, t.relation, t.tail])).collect::<Vec<_>>(),
    })
}

/// Parses arguments, runs the command and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = cli
        .flags
        .resolve()
        .and_then(|cfg| run(cli.command, &cfg, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sgr {}: {e}", command_name(cli.command));
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 7\ntop_k = 3\nmode = \"dense\"\ndrop_fractions = [0.0, 0.5]\n").unwrap();
        let cli = Cli::try_parse_from(["sgr", "eval", "--config", path.to_str().unwrap(), "--top-k", "5"]).unwrap();
        let cfg = cli.flags.resolve().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.mode, ModeName::Dense);
        assert_eq!(cfg.drop_fractions, vec![0.0, 0.5]);
    }

    #[test]
    fn unknown_config_key_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "sed = 7\n").unwrap();
        let flags = Flags {
            config: Some(path),
            ..Flags::default()
        };
        let err = flags.resolve().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn comma_separated_fractions() {
        let cli = Cli::try_parse_from(["sgr", "eval", "--drop-fractions", "0,0.2,0.3"]).unwrap();
        assert_eq!(cli.flags.drop_fractions, Some(vec![0.0, 0.2, 0.3]));
    }

    #[test]
    fn missing_path_is_usage_error() {
        let cfg = RunConfig::default();
        let err = run(Command::Retrieve, &cfg, &mut Vec::new()).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_USAGE);
    }

    #[test]
    fn exit_codes_separate_input_from_runtime() {
        assert_eq!(exit_code(&Error::Corrupt("x".into())), EXIT_INPUT);
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 0,
                message: String::new()
            }),
            EXIT_RUNTIME
        );
    }
}
