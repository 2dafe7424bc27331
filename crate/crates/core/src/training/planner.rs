//! Joint training of the planner expert, its indicator rows and its scorer.

use std::collections::BTreeMap;

use crate::data::{composite_tasks, CompositeTask, Domain};
use crate::error::{Error, Result};
use crate::lifecycle::ExpertRegistry;
use crate::model::{backward, forward_traced, BackboneModel, GradSink, Params, ParamsMut, Stack};
use crate::par::{map_collect, Exec};
use crate::routing::{score_backward, score_forward, PlanQuery, PlannerExpert, PlannerGrads, Subtask};
use crate::tensor::{Rng, Tensor};
use crate::tokenizer::{encode, Token};

use super::{clip_grad_norm, softmax_xent_row, Adam, BatchStats, LossRecord, TrainConfig, GRAD_CHUNK};

/// A composite task unrolled into per-step supervision with ground-truth
/// carried context.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerExample {
    pub query: PlanQuery,
    /// `(carried context, target row)` for every step, ending with STOP.
    pub steps: Vec<(Vec<Token>, usize)>,
    /// Number of experts the task needs.
    pub n_experts: usize,
}

impl PlannerExample {
    /// Fails with a dataset error if a domain has no expert in `experts` or
    /// the expert is not a planner candidate.
    pub fn new(task: &CompositeTask, experts: &BTreeMap<Domain, u32>, planner: &PlannerExpert) -> Result<Self> {
        let mut steps = Vec::with_capacity(task.order.len() + 1);
        for (t, d) in task.order.iter().enumerate() {
            let id = experts
                .get(d)
                .ok_or_else(|| Error::Dataset(format!("no expert registered for domain {d}")))?;
            let row = planner
                .row_of(*id)
                .ok_or_else(|| Error::Dataset(format!("expert {id} is not a planner candidate")))?;
            let carried = if t == 0 { Vec::new() } else { encode(&task.carried_after(t)) };
            steps.push((carried, row));
        }
        steps.push((encode(&task.final_output()), planner.stop_index()));
        Ok(Self {
            query: PlanQuery { instruction: task.instruction(), payload: encode(&task.payload) },
            steps,
            n_experts: task.order.len(),
        })
    }
}

/// Accumulates summed gradients of every step of one example.
fn planner_example(
    backbone: &BackboneModel,
    planner: &PlannerExpert,
    ex: &PlannerExample,
    g: &mut PlannerGrads,
) -> Result<BatchStats> {
    let stack = Stack::new(backbone, Some(&planner.expert))?;
    let mut stats = BatchStats::default();
    for (t, (carried, label)) in ex.steps.iter().enumerate() {
        let sub = Subtask::encode(&ex.query, t + 1, carried, backbone.config().max_seq)?;
        let trace = forward_traced(&stack, &sub.tokens)?;
        let st = score_forward(&planner.scorer, planner.indicators(), &trace.hidden);
        let mut dh = vec![0.0; st.h.len()];
        let (loss, ok) = softmax_xent_row(&st.h, *label, &mut dh);
        stats.loss_sum += loss as f64;
        stats.correct += ok as usize;
        stats.count += 1;
        let d_hidden = score_backward(&planner.scorer, planner.indicators(), &trace.hidden, &st, &dh, g);
        let mut sink = GradSink { expert: Some(&mut g.expert), ..Default::default() };
        backward(&stack, &trace, &d_hidden, &mut sink);
    }
    Ok(stats)
}

/// Mean per-step cross-entropy gradients over a batch.
pub fn planner_batch_grads(
    backbone: &BackboneModel,
    planner: &PlannerExpert,
    batch: &[PlannerExample],
    exec: Exec,
) -> Result<(PlannerGrads, LossRecord)> {
    let chunks: Vec<&[PlannerExample]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = map_collect(exec, &chunks, |chunk| -> Result<(PlannerGrads, BatchStats)> {
        let mut g = planner.zero_grads();
        let mut stats = BatchStats::default();
        for ex in chunk.iter() {
            stats.merge(planner_example(backbone, planner, ex, &mut g)?);
        }
        Ok((g, stats))
    });
    let mut total = planner.zero_grads();
    let mut stats = BatchStats::default();
    for part in parts {
        let (g, s) = part?;
        for ((_, a), (_, b)) in total.named_params_mut("").into_iter().zip(g.named_params("")) {
            a.add_assign(b);
        }
        stats.merge(s);
    }
    if stats.count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let inv = 1.0 / stats.count as f32;
    for (_, t) in total.named_params_mut("") {
        t.scale(inv);
    }
    Ok((total, stats.record(0)))
}

/// Trains the planner in place. The backbone must be frozen and is never
/// written; every candidate row is marked calibrated afterwards.
pub fn train_planner(
    planner: &mut PlannerExpert,
    backbone: &BackboneModel,
    train: &[PlannerExample],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if !backbone.is_frozen() {
        return Err(Error::Config("planner training requires a frozen backbone".into()));
    }
    if train.is_empty() {
        return Err(Error::Dataset("no planner training examples".into()));
    }
    planner.expert.validate_for(backbone.config())?;
    let n_rows = planner.indicators().rows();
    if train.iter().flat_map(|e| &e.steps).any(|&(_, r)| r >= n_rows) {
        return Err(Error::Dataset("planner label out of range".into()));
    }
    let mut opt = Adam::new(&planner.named_params("planner"), cfg);
    let mut rng = Rng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<PlannerExample> =
            (0..cfg.batch_size).map(|_| train[rng.below(train.len())].clone()).collect();
        let (mut grads, mut rec) = planner_batch_grads(backbone, planner, &batch, cfg.exec)?;
        rec.step = step;
        {
            let mut gs: Vec<&mut Tensor> = grads.named_params_mut("").into_iter().map(|(_, t)| t).collect();
            let norm = clip_grad_norm(&mut gs, cfg.grad_clip);
            if !rec.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence { step });
            }
        }
        let g: Vec<&Tensor> = grads.named_params("").into_iter().map(|(_, t)| t).collect();
        opt.step(planner.named_params_mut("planner"), &g, cfg.lr_at(step))?;
        curve.push(rec);
    }
    planner.mark_calibrated();
    Ok(curve)
}

/// Closed-loop accuracy with ground-truth carried context.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlannerEval {
    /// Single-expert tasks whose expert and STOP were both chosen correctly.
    pub single_sequence_accuracy: f64,
    /// Two-expert tasks whose full ordered sequence (and STOP) was correct.
    pub pair_order_accuracy: f64,
    /// Correct choice at the first step, over all tasks.
    pub first_step_accuracy: f64,
    /// Correct choice over every step of every task.
    pub step_accuracy: f64,
    pub n_tasks: usize,
}

pub fn evaluate_planner(
    planner: &PlannerExpert,
    backbone: &BackboneModel,
    examples: &[PlannerExample],
    exec: Exec,
) -> Result<PlannerEval> {
    let chunks: Vec<&[PlannerExample]> = examples.chunks(GRAD_CHUNK * 4).collect();
    let results = map_collect(exec, &chunks, |chunk| -> Result<Vec<(usize, Vec<bool>)>> {
        chunk
            .iter()
            .map(|ex| {
                let hits = ex
                    .steps
                    .iter()
                    .enumerate()
                    .map(|(t, (carried, label))| {
                        let sub = Subtask::encode(&ex.query, t + 1, carried, backbone.config().max_seq)?;
                        let h = crate::routing::plan_scores(planner, backbone, &sub)?;
                        Ok(crate::routing::select_expert(&h)? == *label)
                    })
                    .collect::<Result<Vec<bool>>>()?;
                Ok((ex.n_experts, hits))
            })
            .collect()
    });
    let (mut single, mut single_ok, mut pair, mut pair_ok) = (0usize, 0usize, 0usize, 0usize);
    let (mut first_ok, mut steps, mut steps_ok, mut n) = (0usize, 0usize, 0usize, 0usize);
    for r in results {
        for (k, hits) in r? {
            n += 1;
            let all = hits.iter().all(|&h| h);
            match k {
                1 => {
                    single += 1;
                    single_ok += all as usize;
                }
                2 => {
                    pair += 1;
                    pair_ok += all as usize;
                }
                _ => {}
            }
            first_ok += hits.first().copied().unwrap_or(false) as usize;
            steps += hits.len();
            steps_ok += hits.iter().filter(|&&h| h).count();
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(PlannerEval {
        single_sequence_accuracy: frac(single_ok, single),
        pair_order_accuracy: frac(pair_ok, pair),
        first_step_accuracy: frac(first_ok, n),
        step_accuracy: frac(steps_ok, steps),
        n_tasks: n,
    })
}

/// Control set: whole label sequences permuted among examples that need the
/// same number of experts, so labels no longer follow the instruction.
pub fn shuffled_labels(examples: &[PlannerExample], rng: &mut Rng) -> Vec<PlannerExample> {
    let mut out = examples.to_vec();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.n_experts).or_default().push(i);
    }
    for idx in groups.values() {
        let mut perm = idx.clone();
        rng.shuffle(&mut perm);
        for (&dst, &src) in idx.iter().zip(&perm) {
            for (s, (_, label)) in out[dst].steps.iter_mut().zip(&examples[src].steps) {
                s.1 = *label;
            }
        }
    }
    out
}

/// The lowest-id registered expert for every synthetic domain.
pub fn domain_experts(registry: &ExpertRegistry) -> BTreeMap<Domain, u32> {
    let mut m = BTreeMap::new();
    for e in registry.experts() {
        if let Some(d) = Domain::parse(&e.domain) {
            m.entry(d).or_insert(e.id);
        }
    }
    m
}

/// Generates `n` composite tasks, split 9:1 by hash, as planner examples.
pub fn planner_dataset(
    planner: &PlannerExpert,
    experts: &BTreeMap<Domain, u32>,
    n: usize,
    seed: u64,
) -> Result<(Vec<PlannerExample>, Vec<PlannerExample>)> {
    let (train, eval) = composite_tasks(&mut Rng::new(seed), n);
    let conv = |ts: Vec<CompositeTask>| -> Result<Vec<PlannerExample>> {
        ts.iter().map(|t| PlannerExample::new(t, experts, planner)).collect()
    };
    Ok((conv(train)?, conv(eval)?))
}
