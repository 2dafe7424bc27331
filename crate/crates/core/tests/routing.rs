//! Rule-based gating and the planner loop.

mod common;

use ccoe::error::ErrorCategory;
use ccoe::lifecycle::ExpertRegistry;
use ccoe::model::{BackboneModel, ExpertSubnetwork};
use ccoe::routing::{execute_plan, select_expert, MappingMatrix, PlanQuery, PlannerExpert, Subtask, SLOT_DONE};
use ccoe::tokenizer::{encode, BOS, IND};
use ccoe::{Error, Rng};
use common::*;
use proptest::prelude::*;

fn registry(n: u32) -> ExpertRegistry {
    let cfg = tiny_config();
    let mut rng = Rng::new(21);
    let mut b = BackboneModel::init(cfg, &mut rng).unwrap();
    b.freeze();
    let mut reg = ExpertRegistry::new(b, 1).unwrap();
    for id in 0..n {
        let domain = ccoe::data::Domain::ALL[id as usize % 5].name();
        reg.push(ExpertSubnetwork::init_random(id, domain, vec![1, 3], 8, &cfg, &mut rng).unwrap()).unwrap();
    }
    reg
}

#[test]
fn gating_agrees_with_row_scan() {
    let c = gating_check(1000, 77);
    assert_eq!(c.agreements, c.queries);
    assert!(c.zero_rows > 0);
    assert_eq!(c.zero_row_fallbacks, c.zero_rows);
}

#[test]
fn gating_errors() {
    let reg = registry(2);
    let e = reg.gate(&[("nope".into(), vec![])]).unwrap_err();
    assert!(matches!(e, Error::Gating(_)));
    assert_eq!(e.category(), ErrorCategory::Data);
    assert!(MappingMatrix::from_rows(&[1, 2], &[("a", vec![1, 2])]).is_err());
    assert!(MappingMatrix::from_rows(&[1, 2], &[("a", vec![1])]).is_err());
    let mut m = MappingMatrix::new();
    assert!(m.set("a", 3, true).is_err());
    m.add_expert(3);
    m.set("a", 3, true).unwrap();
    assert_eq!(m.row("a"), Some(vec![1]));
}

#[test]
fn multi_expert_rows_answer_once_per_expert() {
    let mut reg = registry(3);
    reg.associate("copy", 1, true).unwrap();
    reg.associate("copy", 2, true).unwrap();
    let answers = reg.answer("copy", &encode("ab1")).unwrap();
    assert_eq!(answers.iter().map(|a| a.expert).collect::<Vec<_>>(), vec![Some(0), Some(1), Some(2)]);
}

proptest! {
    #[test]
    fn select_expert_is_first_argmax(h in proptest::collection::vec(-5i32..5, 1..12)) {
        let h: Vec<f32> = h.into_iter().map(|v| v as f32).collect();
        let i = select_expert(&h).unwrap();
        let max = h.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(h[i], max);
        prop_assert!(h[..i].iter().all(|&v| v < max));
    }
}

#[test]
fn subtask_layout_and_truncation() {
    let q = PlanQuery { instruction: encode("ru"), payload: encode("ab1") };
    let s1 = Subtask::encode(&q, 1, &[], 64).unwrap();
    let mut want = vec![BOS, IND];
    want.extend(encode("ru:ab1|"));
    assert_eq!(s1.tokens, want);
    let s2 = Subtask::encode(&q, 2, &encode("1ba"), 64).unwrap();
    assert_eq!(s2.tokens[2], SLOT_DONE);
    assert!(s2.tokens.ends_with(&encode("|1ba")));
    assert!(!s2.truncated);
    let long = encode("0123456789");
    let s = Subtask::encode(&q, 2, &long, s1.tokens.len() + 4).unwrap();
    assert!(s.truncated);
    assert_eq!(s.carried, encode("6789"));
    assert!(Subtask::encode(&q, 0, &[], 64).is_err());
    assert!(Subtask::encode(&q, 1, &[], 4).is_err());
    assert!(select_expert(&[]).is_err());
}

#[test]
fn planner_tracks_registry_membership() {
    let mut reg = registry(3);
    let planner = PlannerExpert::for_registry(&reg, 1000, 2, 8, 0).unwrap();
    assert_eq!(planner.candidates(), &[0, 1, 2]);
    assert_eq!(planner.stop_index(), 3);
    reg.set_planner(planner).unwrap();

    let cfg = tiny_config();
    let e = ExpertSubnetwork::init_random(7, "reverse", vec![0], 8, &cfg, &mut Rng::new(1)).unwrap();
    reg.push(e).unwrap();
    let p = reg.planner().unwrap();
    assert_eq!(p.candidates(), &[0, 1, 2, 7]);
    assert_eq!(p.stop_index(), 4);
    assert_eq!(p.uncalibrated(), &[false, false, false, true]);
    assert_eq!(p.indicators().rows(), 5);

    reg.pop_remove(1).unwrap();
    let p = reg.planner().unwrap();
    assert_eq!(p.candidates(), &[0, 2, 7]);
    assert_eq!(p.indicators().rows(), 4);

    let bad = PlannerExpert::for_registry(&registry(2), 1000, 2, 8, 0).unwrap();
    assert!(matches!(reg.set_planner(bad), Err(Error::RoutingConfig(_)) | Err(Error::Lookup(_))));
}

#[test]
fn plan_execution_is_bounded() {
    let mut reg = registry(3);
    let planner = PlannerExpert::for_registry(&reg, 1000, 2, 8, 0).unwrap();
    reg.set_planner(planner).unwrap();
    let q = PlanQuery { instruction: encode("rc"), payload: encode("ab1") };
    assert!(execute_plan(&reg, &q, 0).is_err());
    for max_steps in [1, 3] {
        let out = execute_plan(&reg, &q, max_steps).unwrap();
        assert!(out.path.steps.len() <= max_steps);
        for s in &out.path.steps {
            assert_eq!(s.positions, reg.expert(s.expert_id).unwrap().positions());
        }
    }
    reg.remove_planner();
    assert!(execute_plan(&reg, &q, 2).is_err());
}
