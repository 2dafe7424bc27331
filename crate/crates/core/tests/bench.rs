//! Serving baselines and the insertion ablation on a tiny model.

mod common;

use ccoe::bench::*;
use ccoe::data::Domain;
use ccoe::lifecycle::ExpertRegistry;
use ccoe::model::{forward_base, BackboneModel, ExpertSubnetwork, Params};
use ccoe::training::TrainConfig;
use ccoe::Rng;
use common::*;

fn registry() -> ExpertRegistry {
    let cfg = tiny_config();
    let mut rng = Rng::new(31);
    let mut b = BackboneModel::init(cfg, &mut rng).unwrap();
    b.freeze();
    let mut reg = ExpertRegistry::new(b, 0).unwrap();
    for (i, d) in Domain::ALL.iter().enumerate() {
        reg.push(ExpertSubnetwork::init_random(i as u32, d.name(), vec![0, 2], 16, &cfg, &mut rng).unwrap()).unwrap();
    }
    reg
}

#[test]
fn all_systems_serve_the_same_tokens() {
    let reg = registry();
    let w = Workload::round_robin(&Domain::ALL, 2, 3, 0);
    assert_eq!(w.items.len(), 10);
    assert_eq!(w.domain_switches(), 9 * 3 + 2);
    let ccoe = run_ccoe(&reg, &w).unwrap();
    let direct = run_direct(&reg, &w).unwrap();
    assert_eq!(ccoe.generated_tokens, direct.generated_tokens);
    assert_eq!(ccoe.switches, w.domain_switches());
    assert_eq!(ccoe.resident_param_bytes_peak, reg.total_bytes());

    let models = mdme_models(&reg).unwrap();
    let unlimited = run_mdme_baseline(&models, &w, None).unwrap();
    assert_eq!(unlimited.generated_tokens, ccoe.generated_tokens);
    assert_eq!(unlimited.resident_param_bytes_peak, 5 * reg.backbone().param_bytes());
    let one = reg.backbone().param_bytes();
    let capped = run_mdme_baseline(&models, &w, Some(one)).unwrap();
    assert_eq!(capped.generated_tokens, ccoe.generated_tokens);
    assert_eq!(capped.resident_param_bytes_peak, one);
    assert!(capped.switch_overhead_seconds > 0.0);
    assert!(run_mdme_baseline(&models, &w, Some(one - 1)).is_err());

    let mut rng = Rng::new(1);
    let adapters: Vec<Adapter> =
        Domain::ALL.iter().map(|d| Adapter::random(reg.backbone(), d.name(), 1, 0.02, false, &mut rng)).collect();
    let a = run_adapter_baseline(reg.backbone(), &adapters, &w).unwrap();
    assert_eq!(a.switches, w.domain_switches());
    assert_eq!(
        a.resident_param_bytes_peak,
        adapter_deployment_bytes(reg.backbone().config(), 5, 1)
    );
    let table = BenchReport::table(&[ccoe, direct, capped, a]);
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn adapter_materialization_matches_oracle() {
    let reg = registry();
    let b = reg.backbone();
    let mut rng = Rng::new(2);
    let zero = Adapter::random(b, "copy", 2, 0.1, true, &mut rng);
    let mut overlay = b.clone();
    zero.materialize(b, &mut overlay);
    assert_eq!(&overlay, b);

    let a = Adapter::random(b, "copy", 2, 0.1, false, &mut rng);
    a.materialize(b, &mut overlay);
    let base = RefModel::new(b);
    let got = RefModel::new(&overlay);
    for (name, a_f, b_f) in &a.factors {
        let (rows, cols) = (a_f.rows(), b_f.cols());
        let w = &base.p[name];
        let m = &got.p[name];
        for i in 0..rows {
            for j in 0..cols {
                let delta: f64 = (0..2).map(|k| a_f.at(i, k) as f64 * b_f.at(k, j) as f64).sum();
                assert!((m[i * cols + j] - w[i * cols + j] - delta).abs() < 1e-6);
            }
        }
    }
    // Rematerializing from the base is idempotent and leaves unadapted tensors alone.
    let snapshot = overlay.clone();
    a.materialize(b, &mut overlay);
    assert_eq!(overlay, snapshot);
    assert_eq!(overlay.embedding(), b.embedding());
    assert_ne!(forward_base(&overlay, &[1, 2, 3]).unwrap(), forward_base(b, &[1, 2, 3]).unwrap());
}

#[test]
fn ablation_reports_every_strategy() {
    let reg = registry();
    let cfg = TrainConfig { steps: 3, batch_size: 4, ..TrainConfig::default() };
    let rows = ablate_insertion(reg.backbone(), &InsertionStrategy::ALL, Domain::Copy, 2, 8, &cfg, 8).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r.positions, r.strategy.positions(4, 2).unwrap());
        assert!((r.gain - (r.accuracy - r.base_accuracy)).abs() < 1e-12);
        assert!(r.final_loss.is_finite());
    }
    assert!(best_strategy(&rows).is_some());
    assert_eq!(ablation_table(&rows).lines().count(), 6);
    assert!(InsertionStrategy::parse("md") == Some(InsertionStrategy::MD));
}

#[test]
fn strategies_produce_valid_positions() {
    for n in 2..12 {
        for l in 1..=n {
            for s in InsertionStrategy::ALL {
                let p = s.positions(n, l).unwrap();
                assert_eq!(p.len(), l, "{s} {n} {l}");
                assert!(p.windows(2).all(|w| w[0] < w[1]));
                assert!(p.iter().all(|&x| x < n));
            }
        }
        assert!(InsertionStrategy::GL.positions(n, 0).is_err());
    }
}
