use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scene_retrieval::catalog::build_catalog;
use scene_retrieval::embeddings::EmbeddingTable;
use scene_retrieval::scene_graph::{write_clevr_scenes, AttributeSchema, ObjectNode, SceneGraph};

fn sgr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sgr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn one_image_catalog_returns_it_with_certainty() {
    let dir = tempfile::tempdir().unwrap();
    let schema = AttributeSchema::clevr();
    let scene = SceneGraph::new(
        42,
        vec![ObjectNode::new(["large", "red", "metal", "cube"])],
        vec![],
        &schema,
    )
    .unwrap();
    let scenes = dir.path().join("scenes.json");
    let index = dir.path().join("index.json");
    write_clevr_scenes(&scenes, &[scene], &schema).unwrap();
    ok(&["build-index", "--scenes", p(&scenes), "--output", p(&index)]);
    let out = ok(&["retrieve", "--index", p(&index), "--caption", "there is a sphere"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["rank\timage_id\tprobability", "1\t42\t1.000000"]);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes.json");
    let index = dir.path().join("index.json");
    ok(&["synth-scenes", "--num-scenes", "60", "--seed", "3", "--output", p(&scenes)]);
    ok(&["build-index", "--scenes", p(&scenes), "--output", p(&index)]);

    let config = dir.path().join("eval.toml");
    let report = dir.path().join("report.json");
    fs::write(
        &config,
        format!(
            "index = {:?}\nscenes = {:?}\noutput = {:?}\nqueries_per_fraction = 50\nseed = 9\n",
            p(&index),
            p(&scenes),
            p(&report)
        ),
    )
    .unwrap();
    let table = ok(&["eval", "--config", p(&config), "--drop-fractions", "0,0.2,0.3"]);
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 4);
    let first = fs::read(&report).unwrap();
    ok(&["eval", "--config", p(&config), "--drop-fractions", "0,0.2,0.3"]);
    assert_eq!(first, fs::read(&report).unwrap());

    let artifact: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(artifact["run"]["seed"], 9);
    assert_eq!(artifact["reports"].as_array().unwrap().len(), 3);

    let params = dir.path().join("params.json");
    let train = ["train", "--index", p(&index), "--scenes", p(&scenes), "--epochs", "2", "--train-drop-fraction", "0.5", "--output", p(&params)];
    let metrics = ok(&train);
    assert_eq!(metrics.lines().count(), 2);
    let trained = fs::read(&params).unwrap();
    ok(&train);
    assert_eq!(trained, fs::read(&params).unwrap());
    ok(&["retrieve", "--index", p(&index), "--params", p(&params), "--caption", "there is a cube"]);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes.json");
    let index = dir.path().join("index.json");
    ok(&["synth-scenes", "--num-scenes", "40", "--output", p(&scenes)]);
    ok(&["build-index", "--scenes", p(&scenes), "--output", p(&index)]);
    let args = |t: &'static str| {
        vec!["retrieve", "--index", p(&index), "--caption", "there is a small thing left of a cube", "--threads", t]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let run = |t| {
        let a = args(t);
        ok(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn exit_status_separates_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sgr(&["retrieve"]).status.code(), Some(2));
    assert_eq!(sgr(&["frobnicate"]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(
        sgr(&["retrieve", "--index", p(&missing), "--caption", "there is a cube"]).status.code(),
        Some(3)
    );
    assert_eq!(sgr(&["parse-caption", "--caption", "a red cube"]).status.code(), Some(3));
}

#[test]
fn index_built_with_other_embeddings_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let schema = AttributeSchema::clevr();
    let table = EmbeddingTable::deterministic(50, 5, schema.labels()).unwrap();
    let scene = SceneGraph::new(0, vec![ObjectNode::new(["small", "blue", "rubber", "sphere"])], vec![], &schema).unwrap();
    let index = dir.path().join("index.json");
    build_catalog(&[scene], &schema, &table).unwrap().save(&index).unwrap();
    let out = sgr(&["retrieve", "--index", p(&index), "--caption", "there is a sphere"]);
    assert_eq!(out.status.code(), Some(3));
    ok(&["retrieve", "--index", p(&index), "--caption", "there is a sphere", "--embedding-seed", "5"]);
}

#[test]
fn parse_caption_prints_the_graph() {
    let out = ok(&["parse-caption", "--caption", "there is a red cube left of a small sphere"]);
    assert_eq!(
        out,
        "node 0: size=? color=red material=? shape=cube\nnode 1: size=small color=? material=? shape=sphere\ntriple: (0, left, 1)\n"
    );
}
