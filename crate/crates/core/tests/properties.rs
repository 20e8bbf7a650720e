mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scene_retrieval::catalog::build_catalog;
use scene_retrieval::query::{caption_grammar_generate, parse_caption, sample_partial_query};
use scene_retrieval::scene_graph::SceneGraph;
use scene_retrieval::scoring::{ScoringContext, ScoringMode, ScoringParams};
use scene_retrieval::synth::{toy_instance, ToyConfig};
use scene_retrieval::training::{
    gradient, objective, reward, Baseline, GradientForm, RewardSpec, RewardTable,
};

use common::Corpus;

fn shared() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| common::corpus(150, 17))
}

fn random_params(seed: u64, dim: usize) -> ScoringParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ScoringParams::new(4);
    for l in p.attribute_logits.iter_mut() {
        *l = rng.gen_range(-1.0..1.0);
    }
    p.edge_logit = rng.gen_range(-1.0..1.0);
    if rng.gen_bool(0.5) {
        p = p.with_identity_projection(dim);
        for x in p.projection.as_mut().unwrap() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn probabilities_sum_to_one(
        scene in 0usize..150, drop in 0.0f64..0.9, mask in 0.0f64..0.9, seed in any::<u64>(), dense in any::<bool>()
    ) {
        let c = shared();
        let scene = &c.scenes[scene % c.scenes.len()];
        let q = sample_partial_query(scene, drop, mask, seed, &c.schema, &c.table).unwrap();
        let params = random_params(seed, 50);
        let mode = if dense { ScoringMode::Dense } else { ScoringMode::default() };
        let r = ScoringContext::new(&c.catalog, &params).unwrap().retrieve(&q, mode).unwrap();
        let total: f64 = r.probabilities.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(r.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn masked_rows_carry_no_signal(scene in 0usize..150, seed in any::<u64>()) {
        let c = shared();
        let scene = &c.scenes[scene % c.scenes.len()];
        let q = sample_partial_query(scene, 0.3, 0.5, seed, &c.schema, &c.table).unwrap();
        let mut noisy = q.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for node in noisy.nodes.iter_mut() {
            for i in 0..node.matrix.num_rows() {
                if !node.matrix.is_known(i) {
                    let row: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();
                    node.matrix.set_row(i, &row);
                }
            }
        }
        let params = random_params(seed, 50);
        let ctx = ScoringContext::new(&c.catalog, &params).unwrap();
        let a = ctx.retrieve(&q, ScoringMode::Dense).unwrap();
        let b = ctx.retrieve(&noisy, ScoringMode::Dense).unwrap();
        prop_assert_eq!(&a.attention.node_scores, &b.attention.node_scores);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.log_scores), bits(&b.log_scores));
    }

    #[test]
    fn pruned_scores_agree_with_dense_on_candidates(scene in 0usize..150, seed in any::<u64>()) {
        let c = shared();
        let scene = &c.scenes[scene % c.scenes.len()];
        let q = sample_partial_query(scene, 0.5, 0.25, seed, &c.schema, &c.table).unwrap();
        let params = ScoringParams::new(4);
        let ctx = ScoringContext::new(&c.catalog, &params).unwrap();
        let dense = ctx.retrieve(&q, ScoringMode::Dense).unwrap();
        let pruned = ctx.retrieve(&q, ScoringMode::Pruned { top_t: 8 }).unwrap();
        for (d, p) in dense.log_scores.iter().zip(&pruned.log_scores) {
            prop_assert!(*p == f64::NEG_INFINITY || p == d);
        }
        // The gold image always survives pruning.
        let gold = c.catalog.image_position(scene.image_id).unwrap();
        prop_assert!(pruned.log_scores[gold].is_finite());
    }

    #[test]
    fn generated_captions_parse_back(scene in 0usize..150, seed in any::<u64>()) {
        let c = shared();
        let scene = &c.scenes[scene % c.scenes.len()];
        let generated = caption_grammar_generate(scene, &c.schema, seed);
        let q = parse_caption(&generated.text, &c.schema, &c.table).unwrap();
        prop_assert_eq!(q.nodes.len(), generated.objects.len());
        for (node, &obj) in q.nodes.iter().zip(&generated.objects) {
            for (v, truth) in node.values.iter().zip(&scene.nodes[obj].values) {
                if let Some(v) = v {
                    prop_assert_eq!(v, truth);
                }
            }
        }
    }

    #[test]
    fn rewards_are_bounded(a in 0usize..150, b in 0usize..150) {
        let c = shared();
        let table = RewardTable::new(&c.catalog, RewardSpec::default());
        let rewards = table.rewards(a % c.catalog.num_images());
        prop_assert!(rewards.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert_eq!(rewards[a % c.catalog.num_images()], 1.0);
        let x: Vec<f64> = (0..8).map(|i| ((a * 31 + i * 7) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..8).map(|i| ((b * 17 + i * 5) % 11) as f64 - 5.0).collect();
        let r = reward(&x, &y, &RewardSpec::default());
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn objective_ignores_image_order(seed in any::<u64>(), shift in 1u64..50) {
        let t = toy_instance(seed, &ToyConfig::default()).unwrap();
        let n = t.scenes.len() as u64;
        // Reverse id order and offset, so catalog order is permuted.
        let renumbered: Vec<SceneGraph> = t
            .scenes
            .iter()
            .enumerate()
            .map(|(i, s)| SceneGraph { image_id: shift + (n - i as u64) * 3, ..s.clone() })
            .collect();
        let gold_pos = t.scenes.iter().position(|s| s.image_id == t.gold).unwrap();
        let other = build_catalog(&renumbered, &t.schema, &t.table).unwrap();
        let spec = RewardSpec::default();
        let a = objective(&t.query, &t.catalog, t.gold, &t.params, &spec, 0.3).unwrap();
        let b = objective(&t.query, &other, renumbered[gold_pos].image_id, &t.params, &spec, 0.3).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), baseline in 0.0f64..1.0) {
        let t = toy_instance(seed, &ToyConfig::default()).unwrap();
        let rewards = RewardTable::new(&t.catalog, RewardSpec::default());
        let rep = gradient(
            &t.query, &t.catalog, t.gold, &t.params, &rewards,
            Baseline::Fixed(baseline), GradientForm::Literal, None,
        ).unwrap();
        prop_assume!(!rep.tie && rep.min_margin > 1e-4);
        let analytic = rep.gradient.flatten();
        let h = 1e-5;
        let spec = RewardSpec::default();
        let j = |p: &ScoringParams| objective(&t.query, &t.catalog, t.gold, p, &spec, baseline).unwrap();
        let m = t.params.attribute_logits.len();
        for k in 0..analytic.len() {
            let nudge = |delta: f64| {
                let mut p = t.params.clone();
                if k < m {
                    p.attribute_logits[k] += delta;
                } else if k == m {
                    p.edge_logit += delta;
                } else {
                    p.projection.as_mut().unwrap()[k - m - 1] += delta;
                }
                p
            };
            let f = (j(&nudge(h)) - j(&nudge(-h))) / (2.0 * h);
            let rel = (analytic[k] - f).abs() / analytic[k].abs().max(f.abs()).max(1e-6);
            prop_assert!(rel <= 1e-4, "coord {}: {} vs {}", k, analytic[k], f);
        }
    }
}

#[test]
fn postings_match_a_brute_force_scan() {
    let c = shared();
    for node in c.catalog.nodes() {
        let expected: BTreeSet<u64> = c
            .scenes
            .iter()
            .filter(|s| s.nodes.iter().any(|n| n.node_key() == node.node_key))
            .map(|s| s.image_id)
            .collect();
        assert_eq!(node.images().collect::<BTreeSet<_>>(), expected, "{}", node.node_key);
    }
    for (k, triple) in c.catalog.triples().iter().enumerate().step_by(37) {
        let (h, r, t) = c.catalog.triple_labels(k);
        let expected: BTreeSet<u64> = c
            .scenes
            .iter()
            .filter(|s| s.keyed_triples().iter().any(|(a, b, d)| a == h && b == r && d == t))
            .map(|s| s.image_id)
            .collect();
        assert_eq!(triple.postings.iter().copied().collect::<BTreeSet<_>>(), expected);
    }
}
