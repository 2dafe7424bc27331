//! Next-token training against a frozen backbone.
//!
//! Expert and planner runs build their optimizer from the trainable
//! component alone; the backbone is only ever borrowed immutably, so its
//! tensors cannot enter the optimizer set. Pretraining is the one place the
//! backbone is trained, and it ends by freezing the model.

mod planner;

use serde::{Deserialize, Serialize};

use crate::data::{sample_mixed, Domain, Example, Split, SyntheticDomain};
use crate::error::{Error, Result};
use crate::model::{
    backward, decode_with, forward_traced, head_logits, BackboneModel, ExpertSubnetwork, GradSink,
    KvCache, ModelConfig, Params, Stack,
};
use crate::par::{map_collect, Exec};
use crate::tensor::{argmax, axpy, gemm_a_bt, gemm_at_b_acc, Rng, Tensor};
use crate::tokenizer::{Token, EOS};

pub use planner::{
    domain_experts, evaluate_planner, planner_batch_grads, planner_dataset, shuffled_labels, train_planner,
    PlannerEval, PlannerExample,
};

/// Examples processed sequentially inside one parallel work item.
const GRAD_CHUNK: usize = 4;

/// Layer after which the pretraining domain vector is added.
pub const COND_LAYER: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to `floor * learning_rate`.
    WarmupCosine { warmup: usize, floor: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub grad_clip: f32,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub schedule: Schedule,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 32,
            steps: 300,
            grad_clip: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    /// Settings used to pretrain the desk-scale backbone.
    pub fn pretraining() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 3500,
            schedule: Schedule::WarmupCosine { warmup: 200, floor: 0.1 },
            ..Self::default()
        }
    }

    /// Settings for the planner expert and scorer.
    pub fn planner() -> Self {
        Self { steps: 200, ..Self::default() }
    }

    /// A zero learning rate is accepted and leaves parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::WarmupCosine { warmup, floor } => {
                let w = if warmup == 0 { 1.0 } else { ((step + 1) as f32 / warmup as f32).min(1.0) };
                let span = self.steps.saturating_sub(warmup).max(1);
                let progress = (step.saturating_sub(warmup) as f32 / span as f32).min(1.0);
                let c = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
                self.learning_rate * w * c.max(floor)
            }
        }
    }
}

/// One optimizer step's statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Mean negative log-likelihood per target token.
    pub loss: f32,
    /// Fraction of target tokens predicted exactly.
    pub accuracy: f32,
}

/// Adam over a fixed, named parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    names: Vec<String>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(params: &[(String, &Tensor)], cfg: &TrainConfig) -> Self {
        Self {
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// Names of every tensor this optimizer may update.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[&Tensor], lr: f32) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::Dimension("optimizer parameter set changed".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (name, p)) in params.into_iter().enumerate() {
            if name != self.names[i] || p.numel() != self.m[i].len() {
                return Err(Error::Dimension(format!("optimizer slot {i} is {}, got {name}", self.names[i])));
            }
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Tensor], max_norm: f32) -> f32 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Mean masked negative log-likelihood and its gradient with respect to the
/// logits.
pub fn nll_loss(logits: &Tensor, targets: &[Token], mask: &[bool]) -> Result<(f32, Tensor)> {
    let (t, v) = (logits.rows(), logits.cols());
    if targets.len() != t || mask.len() != t {
        return Err(Error::Dimension(format!(
            "{} targets / {} mask entries for {t} logit rows",
            targets.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::DegenerateBatch);
    }
    let mut grad = Tensor::zeros(&[t, v]);
    let mut total = 0.0f64;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let (l, _) = softmax_xent_row(logits.row(i), targets[i] as usize, grad.row_mut(i));
        total += l as f64;
        grad.row_mut(i).iter_mut().for_each(|g| *g /= n as f32);
    }
    Ok(((total / n as f64) as f32, grad))
}

/// Writes `softmax(z) - onehot(y)` into `grad`; returns `(-log p_y, argmax == y)`.
fn softmax_xent_row(z: &[f32], y: usize, grad: &mut [f32]) -> (f32, bool) {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (g, &v) in grad.iter_mut().zip(z) {
        *g = (v - max).exp();
        sum += *g;
    }
    let inv = 1.0 / sum;
    grad.iter_mut().for_each(|g| *g *= inv);
    let loss = sum.ln() - (z[y] - max);
    grad[y] -= 1.0;
    (loss, argmax(z) == y)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct BatchStats {
    pub loss_sum: f64,
    pub count: usize,
    pub correct: usize,
}

impl BatchStats {
    fn merge(&mut self, o: BatchStats) {
        self.loss_sum += o.loss_sum;
        self.count += o.count;
        self.correct += o.correct;
    }

    fn record(&self, step: usize) -> LossRecord {
        LossRecord {
            step,
            loss: (self.loss_sum / self.count.max(1) as f64) as f32,
            accuracy: self.correct as f32 / self.count.max(1) as f32,
        }
    }
}

/// Accumulates summed (unnormalized) gradients of one teacher-forced example.
pub(crate) fn lm_example(stack: &Stack, ex: &Example, sink: &mut GradSink) -> Result<BatchStats> {
    let (input, targets, mask) = ex.teacher_forced();
    let trace = forward_traced(stack, &input)?;
    let model = stack.model;
    let d = model.config().d_model;
    let vocab = model.config().vocab;
    let rows: Vec<usize> = (0..input.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let mut h = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        h.extend_from_slice(&trace.hidden[r * d..(r + 1) * d]);
    }
    let logits = head_logits(model, &h);
    let mut dlogits = vec![0.0; rows.len() * vocab];
    let mut stats = BatchStats { count: rows.len(), ..Default::default() };
    for (k, &r) in rows.iter().enumerate() {
        let (l, ok) = softmax_xent_row(
            &logits[k * vocab..(k + 1) * vocab],
            targets[r] as usize,
            &mut dlogits[k * vocab..(k + 1) * vocab],
        );
        stats.loss_sum += l as f64;
        stats.correct += ok as usize;
    }
    let head = model.head();
    if let Some(b) = sink.backbone.as_deref_mut() {
        let hg = b.parts_mut_unchecked().4;
        gemm_at_b_acc(&h, &dlogits, hg.weight.data_mut(), rows.len(), d, vocab);
        for k in 0..rows.len() {
            axpy(1.0, &dlogits[k * vocab..(k + 1) * vocab], hg.bias.data_mut());
        }
    }
    let mut dh_rows = vec![0.0; rows.len() * d];
    gemm_a_bt(&dlogits, head.weight.data(), &mut dh_rows, rows.len(), vocab, d);
    let mut d_hidden = vec![0.0; input.len() * d];
    for (k, &r) in rows.iter().enumerate() {
        d_hidden[r * d..(r + 1) * d].copy_from_slice(&dh_rows[k * d..(k + 1) * d]);
    }
    backward(stack, &trace, &d_hidden, sink);
    Ok(stats)
}

/// Mean-loss gradients of an expert over a batch. The backbone is read-only.
pub fn expert_batch_grads(
    backbone: &BackboneModel,
    expert: &ExpertSubnetwork,
    batch: &[Example],
    exec: Exec,
) -> Result<(ExpertSubnetwork, LossRecord)> {
    let chunks: Vec<&[Example]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = map_collect(exec, &chunks, |chunk| -> Result<(ExpertSubnetwork, BatchStats)> {
        let stack = Stack::new(backbone, Some(expert))?;
        let mut g = expert.zeros_like();
        let mut stats = BatchStats::default();
        for ex in chunk.iter() {
            let mut sink = GradSink { expert: Some(&mut g), ..Default::default() };
            stats.merge(lm_example(&stack, ex, &mut sink)?);
        }
        Ok((g, stats))
    });
    let mut total = expert.zeros_like();
    let mut stats = BatchStats::default();
    for part in parts {
        let (g, s) = part?;
        for ((_, a), (_, b)) in total.params_mut().into_iter().zip(g.named_params("")) {
            a.add_assign(b);
        }
        stats.merge(s);
    }
    let inv = 1.0 / stats.count as f32;
    for (_, t) in total.params_mut() {
        t.scale(inv);
    }
    Ok((total, stats.record(0)))
}

/// Optimizer state for one expert run, exposed so callers can inspect the
/// exact parameter set being trained.
pub struct ExpertTrainer {
    optimizer: Adam,
    cfg: TrainConfig,
    step: usize,
}

impl ExpertTrainer {
    pub fn new(expert: &ExpertSubnetwork, backbone: &BackboneModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::Config("expert training requires a frozen backbone".into()));
        }
        expert.validate_for(backbone.config())?;
        Ok(Self { optimizer: Adam::new(&expert.named_params("expert"), cfg), cfg: *cfg, step: 0 })
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// One update. On a non-finite loss or gradient the expert is left as it
    /// was and a divergence error is returned.
    pub fn step(
        &mut self,
        expert: &mut ExpertSubnetwork,
        backbone: &BackboneModel,
        batch: &[Example],
    ) -> Result<LossRecord> {
        let (mut grads, mut rec) = expert_batch_grads(backbone, expert, batch, self.cfg.exec)?;
        rec.step = self.step;
        {
            let mut gs: Vec<&mut Tensor> = grads.params_mut().into_iter().map(|(_, t)| t).collect();
            let norm = clip_grad_norm(&mut gs, self.cfg.grad_clip);
            if !rec.loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence { step: self.step });
            }
        }
        let lr = self.cfg.lr_at(self.step);
        let g: Vec<&Tensor> = grads.named_params("").into_iter().map(|(_, t)| t).collect();
        let params = expert.params_mut().into_iter().map(|(n, t)| (format!("expert.{n}"), t)).collect();
        self.optimizer.step(params, &g, lr)?;
        self.step += 1;
        Ok(rec)
    }
}

/// Trains `expert` in place on one domain. The backbone is never written.
pub fn train_expert(
    expert: &mut ExpertSubnetwork,
    backbone: &BackboneModel,
    domain: SyntheticDomain,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut trainer = ExpertTrainer::new(expert, backbone, cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = domain.batch(&mut rng, Split::Train, cfg.batch_size);
        curve.push(trainer.step(expert, backbone, &batch)?);
    }
    Ok(curve)
}

/// A freshly pretrained, frozen backbone and its training history.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: BackboneModel,
    pub curve: Vec<LossRecord>,
    /// Mixed-domain loss on a fixed held-out probe, before and after training.
    pub initial_loss: f32,
    pub final_loss: f32,
}

/// Per-domain gradients for the pretraining conditioning vectors.
struct PretrainGrads {
    backbone: BackboneModel,
    cond: Tensor,
}

fn pretrain_batch(
    backbone: &BackboneModel,
    cond: &Tensor,
    batch: &[(Domain, Example)],
    exec: Exec,
    with_grads: bool,
) -> Result<(Option<PretrainGrads>, BatchStats)> {
    let chunks: Vec<&[(Domain, Example)]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = map_collect(exec, &chunks, |chunk| -> Result<(Option<PretrainGrads>, BatchStats)> {
        let mut g = with_grads.then(|| PretrainGrads { backbone: backbone.zeros_like(), cond: cond.zeros_like() });
        let mut stats = BatchStats::default();
        for (dom, ex) in chunk.iter() {
            let stack = Stack::new(backbone, None)?.with_cond(COND_LAYER, cond.row(dom.index()));
            let mut sink = GradSink::default();
            if let Some(g) = g.as_mut() {
                sink.backbone = Some(&mut g.backbone);
                sink.cond = Some(g.cond.row_mut(dom.index()));
            }
            stats.merge(lm_example(&stack, ex, &mut sink)?);
        }
        Ok((g, stats))
    });
    let mut total: Option<PretrainGrads> = None;
    let mut stats = BatchStats::default();
    for part in parts {
        let (g, s) = part?;
        stats.merge(s);
        if let Some(g) = g {
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => {
                    for ((_, a), (_, b)) in crate::model::ParamsMut::named_params_mut(&mut t.backbone, "")
                        .into_iter()
                        .zip(g.backbone.named_params(""))
                    {
                        a.add_assign(b);
                    }
                    t.cond.add_assign(&g.cond);
                }
            }
        }
    }
    if let Some(t) = total.as_mut() {
        let inv = 1.0 / stats.count as f32;
        for (_, p) in crate::model::ParamsMut::named_params_mut(&mut t.backbone, "") {
            p.scale(inv);
        }
        t.cond.scale(inv);
    }
    Ok((total, stats))
}

/// Mean-loss gradients of the backbone and the per-domain conditioning
/// vectors `cond [domains, d_model]` over a mixed batch. Returns
/// `(backbone grads, cond grads, loss)`.
pub fn pretrain_batch_grads(
    backbone: &BackboneModel,
    cond: &Tensor,
    batch: &[(Domain, Example)],
    exec: Exec,
) -> Result<(BackboneModel, Tensor, LossRecord)> {
    if cond.shape() != [Domain::ALL.len(), backbone.config().d_model] {
        return Err(Error::Dimension(format!("cond shape {:?}", cond.shape())));
    }
    let (g, stats) = pretrain_batch(backbone, cond, batch, exec, true)?;
    if stats.count == 0 {
        return Err(Error::DegenerateBatch);
    }
    let g = g.expect("gradients requested");
    Ok((g.backbone, g.cond, stats.record(0)))
}

/// Pretrains a backbone on a uniform mixture of all domains, then freezes it.
///
/// Each example's domain is signalled by a learned vector added to the
/// residual stream after the first layer. The vectors are discarded
/// afterwards, so the frozen backbone has learned every transformation but
/// cannot tell from a bare prompt which one is wanted.
pub fn pretrain_backbone(config: ModelConfig, cfg: &TrainConfig) -> Result<Pretrained> {
    pretrain_backbone_with(config, cfg, |_| {})
}

/// [`pretrain_backbone`] with a callback invoked after every step.
pub fn pretrain_backbone_with(
    config: ModelConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Pretrained> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut backbone = BackboneModel::init(config, &mut rng)?;
    let mut cond = Tensor::zeros(&[Domain::ALL.len(), config.d_model]);

    let mut probe_rng = rng.fork(0x9e37);
    let probe: Vec<(Domain, Example)> = (0..64).map(|_| sample_mixed(&mut probe_rng, Split::Eval)).collect();
    let probe_loss = |b: &BackboneModel, c: &Tensor| -> Result<f32> {
        let (_, s) = pretrain_batch(b, c, &probe, cfg.exec, false)?;
        Ok((s.loss_sum / s.count as f64) as f32)
    };
    let initial_loss = probe_loss(&backbone, &cond)?;

    let mut names = backbone.named_params("backbone").iter().map(|(n, t)| (n.clone(), *t)).collect::<Vec<_>>();
    names.push(("cond".to_string(), &cond));
    let mut opt = Adam::new(&names, cfg);
    drop(names);

    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(Domain, Example)> = (0..cfg.batch_size).map(|_| sample_mixed(&mut rng, Split::Train)).collect();
        let (grads, stats) = pretrain_batch(&backbone, &cond, &batch, cfg.exec, true)?;
        let mut grads = grads.expect("gradients requested");
        let mut gs: Vec<&mut Tensor> =
            crate::model::ParamsMut::named_params_mut(&mut grads.backbone, "").into_iter().map(|(_, t)| t).collect();
        gs.push(&mut grads.cond);
        let norm = clip_grad_norm(&mut gs, cfg.grad_clip);
        let rec = stats.record(step);
        if !rec.loss.is_finite() || !norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut g: Vec<&Tensor> = grads.backbone.named_params("").into_iter().map(|(_, t)| t).collect();
        g.push(&grads.cond);
        let mut params: Vec<(String, &mut Tensor)> =
            backbone.params_mut()?.into_iter().map(|(n, t)| (format!("backbone.{n}"), t)).collect();
        params.push(("cond".to_string(), &mut cond));
        opt.step(params, &g, cfg.lr_at(step))?;
        on_step(&rec);
        curve.push(rec);
    }
    let final_loss = probe_loss(&backbone, &cond)?;
    backbone.freeze();
    Ok(Pretrained { backbone, curve, initial_loss, final_loss })
}

/// Fraction of examples whose greedy continuation equals the target exactly,
/// including the closing `<eos>`.
pub fn exact_match_accuracy(
    backbone: &BackboneModel,
    expert: Option<&ExpertSubnetwork>,
    examples: &[Example],
    exec: Exec,
) -> Result<f64> {
    let chunks: Vec<&[Example]> = examples.chunks(GRAD_CHUNK * 4).collect();
    let hits = map_collect(exec, &chunks, |chunk| -> Result<usize> {
        let stack = Stack::new(backbone, expert)?;
        let mut cache = KvCache::new(backbone);
        let mut n = 0;
        for ex in chunk.iter() {
            let out = decode_with(&stack, &ex.prompt, ex.target.len(), Some(EOS), Some(&mut cache))?;
            n += (out == ex.target) as usize;
        }
        Ok(n)
    });
    let mut total = 0;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / examples.len().max(1) as f64)
}

/// Held-out examples for one domain, reproducible from `seed`.
pub fn eval_set(domain: Domain, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::new(seed ^ 0x5eed_0000 ^ domain.index() as u64);
    SyntheticDomain::new(domain).batch(&mut rng, Split::Eval, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, vocab: 260, max_seq: 32 }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[3, 260]);
        let (l, _) = nll_loss(&logits, &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((l - (260f32).ln()).abs() < 1e-5);
        assert!(matches!(nll_loss(&logits, &[1, 2, 3], &[false; 3]), Err(Error::DegenerateBatch)));
        let mut confident = Tensor::zeros(&[1, 4]);
        confident.data_mut()[2] = 50.0;
        let (l, _) = nll_loss(&confident, &[2], &[true]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig { steps: 1000, ..TrainConfig::pretraining() };
        assert!(cfg.lr_at(0) < cfg.lr_at(199));
        assert!((cfg.lr_at(199) - 3e-3).abs() < 1e-4);
        assert!((cfg.lr_at(999) - 3e-4).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_expert_untouched() {
        let mut b = BackboneModel::init(tiny(), &mut Rng::new(1)).unwrap();
        b.freeze();
        let mut e = ExpertSubnetwork::pruned_from(&b, 0, "reverse", vec![1], 8).unwrap();
        let before = e.digest();
        let cfg = TrainConfig { learning_rate: 0.0, steps: 3, batch_size: 4, ..Default::default() };
        train_expert(&mut e, &b, SyntheticDomain::new(Domain::Reverse), &cfg).unwrap();
        assert_eq!(e.digest(), before);
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let b = BackboneModel::init(tiny(), &mut Rng::new(1)).unwrap();
        let e = ExpertSubnetwork::pruned_from(&b, 0, "reverse", vec![1], 8).unwrap();
        assert!(ExpertTrainer::new(&e, &b, &TrainConfig::default()).is_err());
    }

    #[test]
    fn sequential_and_parallel_grads_agree() {
        let mut b = BackboneModel::init(tiny(), &mut Rng::new(2)).unwrap();
        b.freeze();
        let e = ExpertSubnetwork::pruned_from(&b, 0, "reverse", vec![0, 1], 16).unwrap();
        let batch = SyntheticDomain::new(Domain::Reverse).batch(&mut Rng::new(3), Split::Train, 9);
        let (g1, r1) = expert_batch_grads(&b, &e, &batch, Exec::Sequential).unwrap();
        let (g2, r2) = expert_batch_grads(&b, &e, &batch, Exec::Parallel).unwrap();
        assert_eq!(g1.digest(), g2.digest());
        assert_eq!(r1, r2);
    }
}
