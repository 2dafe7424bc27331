//! Splicing experts into the backbone against standalone oracles.

mod common;

use ccoe::bench::InsertionStrategy;
use ccoe::model::{forward_base, forward_with_expert, BackboneModel, ExpertSubnetwork, ModelConfig};
use ccoe::tokenizer::Token;
use ccoe::Rng;
use common::*;

fn backbone(seed: u64) -> BackboneModel {
    let mut b = BackboneModel::init(ModelConfig::default(), &mut Rng::new(seed)).unwrap();
    b.freeze();
    b
}

#[test]
fn every_strategy_matches_hand_composed_model() {
    let b = backbone(1);
    let cfg = *b.config();
    let mut rng = Rng::new(2);
    for s in InsertionStrategy::ALL {
        for l in [1, 3, 4] {
            let positions = s.positions(cfg.n_layers, l).unwrap();
            let width = 16 + rng.below(100);
            let e = ExpertSubnetwork::init_random(3, "copy", positions, width, &cfg, &mut rng).unwrap();
            let err = splice_error(&b, &e, 10, &mut rng);
            assert!(err <= 1e-6, "{s} l={l}: {err:e}");
        }
    }
}

#[test]
fn spliced_logits_match_f64_reference() {
    let b = backbone(5);
    let cfg = *b.config();
    let mut rng = Rng::new(6);
    let e = ExpertSubnetwork::init_random(3, "copy", vec![1, 4, 7], 40, &cfg, &mut rng).unwrap();
    let reference = RefModel::with_expert(&b, &e);
    for _ in 0..10 {
        let len = 1 + rng.below(40);
        let tokens: Vec<Token> = (0..len).map(|_| rng.below(cfg.vocab) as Token).collect();
        let got = forward_with_expert(&b, &e, &tokens).unwrap();
        let want = reference.logits(&tokens, None);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
        }
    }
}

#[test]
fn identity_experts_leave_logits_unchanged() {
    let b = backbone(7);
    let tokens: Vec<Token> = (0..30).map(|i| (i * 7 % 256) as Token).collect();
    let base = forward_base(&b, &tokens).unwrap();
    let empty = ExpertSubnetwork::empty(1, "copy");
    assert_eq!(forward_with_expert(&b, &empty, &tokens).unwrap(), base);
    let copied = ExpertSubnetwork::copied_from(&b, 2, "copy", vec![0, 3, 7]).unwrap();
    assert_eq!(forward_with_expert(&b, &copied, &tokens).unwrap(), base);
    let materialized = b.materialize_expert(&copied).unwrap();
    assert_eq!(forward_base(&materialized, &tokens).unwrap(), base);
}

#[test]
fn materialized_model_equals_splice() {
    let b = backbone(8);
    let cfg = *b.config();
    let mut rng = Rng::new(9);
    let e = ExpertSubnetwork::pruned_from(&b, 4, "copy", vec![0, 2, 4, 6], 64).unwrap();
    let mut e2 = e.clone();
    for l in e2.layers_mut() {
        for v in l.up.weight.data_mut() {
            *v += 0.05 * rng.normal();
        }
    }
    let m = b.materialize_expert(&e2).unwrap();
    let tokens: Vec<Token> = (0..cfg.max_seq).map(|_| rng.below(256) as Token).collect();
    assert_eq!(forward_base(&m, &tokens).unwrap(), forward_with_expert(&b, &e2, &tokens).unwrap());
}

#[test]
fn invalid_splices_are_rejected() {
    let b = backbone(10);
    let cfg = *b.config();
    let mut rng = Rng::new(11);
    assert!(ExpertSubnetwork::init_random(1, "x", vec![2, 1], 8, &cfg, &mut rng).is_err());
    assert!(ExpertSubnetwork::init_random(1, "x", vec![8], 8, &cfg, &mut rng).is_err());
    let other = ModelConfig { d_model: 32, ..cfg };
    let e = ExpertSubnetwork::init_random(1, "x", vec![0], 8, &other, &mut rng).unwrap();
    assert!(forward_with_expert(&b, &e, &[1, 2, 3]).is_err());
}
