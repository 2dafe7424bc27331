//! Parallel vs sequential execution of the two data-parallel hot paths:
//! batched expert gradients and batched greedy evaluation.

use ccoe::data::{Domain, Split, SyntheticDomain};
use ccoe::model::{BackboneModel, ExpertSubnetwork, ModelConfig};
use ccoe::par::Exec;
use ccoe::training::{eval_set, exact_match_accuracy, expert_batch_grads};
use ccoe::Rng;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn fixture() -> (BackboneModel, ExpertSubnetwork) {
    let mut rng = Rng::new(1);
    let mut b = BackboneModel::init(ModelConfig::default(), &mut rng).unwrap();
    b.freeze();
    let e = ExpertSubnetwork::pruned_from(&b, 0, "copy", vec![0, 2, 4, 6], 64).unwrap();
    (b, e)
}

fn execs() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn grads(c: &mut Criterion) {
    let (b, e) = fixture();
    let batch = SyntheticDomain::new(Domain::Copy).batch(&mut Rng::new(2), Split::Train, 32);
    let mut g = c.benchmark_group("expert_batch_grads");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bench, &exec| {
            bench.iter(|| black_box(expert_batch_grads(&b, &e, &batch, exec).unwrap()))
        });
    }
    g.finish();
}

fn accuracy(c: &mut Criterion) {
    let (b, e) = fixture();
    let eval = eval_set(Domain::Copy, 32, 3);
    let mut g = c.benchmark_group("exact_match_accuracy");
    g.sample_size(10);
    for (name, exec) in execs() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |bench, &exec| {
            bench.iter(|| black_box(exact_match_accuracy(&b, Some(&e), &eval, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, grads, accuracy);
criterion_main!(benches);
