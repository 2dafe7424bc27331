//! Serving benchmarks and the insertion-strategy ablation.
//!
//! Three systems answer the same workload with the same decode kernels and
//! cache policy: the shared-backbone registry, an ensemble of standalone
//! models (MDME) under a resident-byte budget, and a low-rank adapter server
//! that re-materializes `W + A B` on every domain switch. Memory is resident
//! parameter bytes; throughput is generated tokens over serving wall time,
//! switch costs included.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode, encode_backbone, Component};
use crate::data::{sample_payload, Domain, Split, SyntheticDomain};
use crate::error::{Error, Result};
use crate::lifecycle::ExpertRegistry;
use crate::model::{BackboneModel, ExpertSubnetwork, KvCache, ModelConfig, Params};
use crate::routing::run_expert;
use crate::tensor::{gemm, Rng, Tensor};
use crate::tokenizer::{encode, Token};
use crate::training::{eval_set, exact_match_accuracy, train_expert, TrainConfig};

/// Ordered `(domain, input)` requests, served `repetitions` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub items: Vec<(String, Vec<Token>)>,
    pub repetitions: usize,
}

#[derive(Deserialize)]
struct WorkloadLine {
    domain: String,
    prompt: String,
}

impl Workload {
    /// Each trial draws one held-out payload per domain, in domain order.
    pub fn round_robin(domains: &[Domain], trials: usize, repetitions: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut items = Vec::with_capacity(domains.len() * trials);
        for _ in 0..trials {
            for d in domains {
                items.push((d.name().to_string(), encode(&sample_payload(&mut rng, Split::Eval))));
            }
        }
        Self { items, repetitions }
    }

    /// One `{"domain": ..., "prompt": ...}` object per non-empty line.
    pub fn from_jsonl(text: &str, repetitions: usize) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: WorkloadLine = serde_json::from_str(line)
                .map_err(|e| Error::Workload(format!("line {}: {e}", i + 1)))?;
            items.push((l.domain, encode(&l.prompt)));
        }
        if items.is_empty() {
            return Err(Error::Workload("workload has no requests".into()));
        }
        Ok(Self { items, repetitions: repetitions.max(1) })
    }

    /// Consecutive requests with different domains, counted over every
    /// repetition (including the wrap from the last request to the first).
    pub fn domain_switches(&self) -> usize {
        let n = self.items.len();
        if n == 0 || self.repetitions == 0 {
            return 0;
        }
        let inner = self.items.windows(2).filter(|w| w[0].0 != w[1].0).count();
        let wrap = (self.items[n - 1].0 != self.items[0].0) as usize;
        inner * self.repetitions + wrap * (self.repetitions - 1)
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = self.items.iter().map(|(d, _)| d.clone()).collect();
        d.sort();
        d.dedup();
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub system: String,
    /// Peak resident parameter bytes.
    pub resident_param_bytes_peak: usize,
    /// KV cache bytes, reported apart from the headline number.
    pub activation_bytes: usize,
    pub generated_tokens: usize,
    /// Serving wall time: routing, switching and decoding.
    pub decode_seconds: f64,
    pub tokens_per_second: f64,
    pub switches: usize,
    /// Total time spent loading or re-materializing weights on switches.
    pub switch_overhead_seconds: f64,
    pub per_switch_seconds: f64,
    /// Includes warmup.
    pub wall_seconds: f64,
}

impl BenchReport {
    fn new(system: &str, peak: usize, activation_bytes: usize, run: RunStats, wall: Duration) -> Self {
        let secs = run.serving.as_secs_f64();
        let sw = run.switch_time.as_secs_f64();
        Self {
            system: system.into(),
            resident_param_bytes_peak: peak,
            activation_bytes,
            generated_tokens: run.tokens,
            decode_seconds: secs,
            tokens_per_second: if secs > 0.0 { run.tokens as f64 / secs } else { 0.0 },
            switches: run.switches,
            switch_overhead_seconds: sw,
            per_switch_seconds: if run.switches > 0 { sw / run.switches as f64 } else { 0.0 },
            wall_seconds: wall.as_secs_f64(),
        }
    }

    pub fn table(reports: &[BenchReport]) -> String {
        let mut s = format!(
            "{:<10} {:>14} {:>10} {:>10} {:>9} {:>12}\n",
            "system", "peak_bytes", "tokens", "tps", "switches", "switch_ms"
        );
        for r in reports {
            s.push_str(&format!(
                "{:<10} {:>14} {:>10} {:>10.1} {:>9} {:>12.3}\n",
                r.system,
                r.resident_param_bytes_peak,
                r.generated_tokens,
                r.tokens_per_second,
                r.switches,
                1e3 * r.per_switch_seconds
            ));
        }
        s
    }
}

#[derive(Default)]
struct RunStats {
    tokens: usize,
    switches: usize,
    serving: Duration,
    switch_time: Duration,
}

fn kv_bytes(config: &ModelConfig) -> usize {
    2 * config.n_layers * config.max_seq * config.d_model * 4
}

/// Serves every request once per repetition. `serve` answers one request
/// and reports `(tokens, switch time)`; switches are counted on domain change.
fn drive(
    workload: &Workload,
    mut serve: impl FnMut(&str, &[Token], bool) -> Result<(usize, Duration)>,
) -> Result<RunStats> {
    // Warmup pass, excluded from timing.
    for (d, x) in workload.items.iter().take(workload.items.len().min(8)) {
        serve(d, x, false)?;
    }
    let mut stats = RunStats::default();
    let mut last: Option<&str> = None;
    let start = Instant::now();
    for _ in 0..workload.repetitions {
        for (d, x) in &workload.items {
            let switched = last.is_some_and(|l| l != d);
            stats.switches += switched as usize;
            let (t, sw) = serve(d, x, true)?;
            stats.tokens += t;
            stats.switch_time += sw;
            last = Some(d);
        }
    }
    stats.serving = start.elapsed();
    Ok(stats)
}

/// All experts resident; a switch is only a gating lookup.
pub fn run_ccoe(registry: &ExpertRegistry, workload: &Workload) -> Result<BenchReport> {
    let started = Instant::now();
    let domains = workload.domains();
    let mut routes: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for d in &domains {
        let ids = registry
            .mapping()
            .experts_for(d)
            .ok_or_else(|| Error::Workload(format!("registry cannot serve domain {d:?}")))?;
        routes.insert(d.clone(), ids.to_vec());
    }
    let backbone = registry.backbone();
    let mut cache = KvCache::new(backbone);
    let stats = drive(workload, |d, x, _| {
        let path = registry.gate(&[(d.to_string(), Vec::new())]).map_err(|e| Error::Workload(e.to_string()))?;
        let mut tokens = 0;
        if path[0].steps.is_empty() {
            tokens += run_expert(backbone, None, x, &mut cache)?.0.len() + 1;
        }
        for s in &path[0].steps {
            let e = registry.expert(s.expert_id).ok_or(Error::Lookup(s.expert_id))?;
            tokens += run_expert(backbone, Some(e), x, &mut cache)?.0.len() + 1;
        }
        Ok((tokens, Duration::ZERO))
    })?;
    Ok(BenchReport::new("ccoe", registry.total_bytes(), kv_bytes(backbone.config()), stats, started.elapsed()))
}

/// Decodes the workload straight through each domain's first expert with no
/// gating, for measuring routing overhead.
pub fn run_direct(registry: &ExpertRegistry, workload: &Workload) -> Result<BenchReport> {
    let started = Instant::now();
    let backbone = registry.backbone();
    let mut first: BTreeMap<String, Option<&ExpertSubnetwork>> = BTreeMap::new();
    for d in workload.domains() {
        let ids = registry.mapping().experts_for(&d).ok_or_else(|| Error::Workload(format!("unknown domain {d:?}")))?;
        first.insert(d, ids.first().and_then(|&id| registry.expert(id)));
    }
    let mut cache = KvCache::new(backbone);
    let stats = drive(workload, |d, x, _| {
        let e = first[d];
        Ok((run_expert(backbone, e, x, &mut cache)?.0.len() + 1, Duration::ZERO))
    })?;
    Ok(BenchReport::new("direct", registry.total_bytes(), kv_bytes(backbone.config()), stats, started.elapsed()))
}

/// A standalone full model per domain, stored serialized and loaded into a
/// least-recently-used resident set bounded by `resident_budget` bytes.
/// `None` keeps every model resident.
pub fn run_mdme_baseline(
    models: &[(String, BackboneModel)],
    workload: &Workload,
    resident_budget: Option<usize>,
) -> Result<BenchReport> {
    let started = Instant::now();
    if models.is_empty() {
        return Err(Error::Workload("no models".into()));
    }
    let mut stored: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (d, m) in models {
        stored.insert(d.clone(), encode_backbone(m));
    }
    for d in workload.domains() {
        if !stored.contains_key(&d) {
            return Err(Error::Workload(format!("no model for domain {d:?}")));
        }
    }
    let model_bytes: BTreeMap<String, usize> = models.iter().map(|(d, m)| (d.clone(), m.param_bytes())).collect();
    let budget = resident_budget.unwrap_or(usize::MAX);
    if model_bytes.values().any(|&b| b > budget) {
        return Err(Error::Workload("a single model exceeds the resident budget".into()));
    }
    let mut resident: Vec<(String, BackboneModel)> = Vec::new();
    let mut peak = 0usize;
    if resident_budget.is_none() {
        for (d, m) in models {
            resident.push((d.clone(), m.clone()));
        }
        peak = model_bytes.values().sum();
    }
    let config = *models[0].1.config();
    let mut cache = KvCache::new(&models[0].1);
    let stats = drive(workload, |d, x, _| {
        let mut sw = Duration::ZERO;
        let pos = match resident.iter().position(|(n, _)| n == d) {
            Some(i) => i,
            None => {
                let t = Instant::now();
                let need = model_bytes[d];
                let mut used: usize = resident.iter().map(|(n, _)| model_bytes[n]).sum();
                while used + need > budget {
                    let (n, _) = resident.remove(0);
                    used -= model_bytes[&n];
                }
                let m = match decode(&stored[d])? {
                    (_, Component::Backbone(m)) => m,
                    _ => return Err(Error::Workload("stored model is not a backbone".into())),
                };
                resident.push((d.to_string(), m));
                peak = peak.max(used + need);
                sw = t.elapsed();
                resident.len() - 1
            }
        };
        // Move to the back: most recently used.
        let entry = resident.remove(pos);
        resident.push(entry);
        let m = &resident.last().unwrap().1;
        Ok((run_expert(m, None, x, &mut cache)?.0.len() + 1, sw))
    })?;
    Ok(BenchReport::new("mdme", peak, kv_bytes(&config), stats, started.elapsed()))
}

/// Rank-`r` factors for every attention projection and both FFN matrices of
/// every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub domain: String,
    pub rank: usize,
    /// `(parameter name, A [in, r], B [r, out])`
    pub factors: Vec<(String, Tensor, Tensor)>,
}

/// Rank used when none is given.
pub const DEFAULT_ADAPTER_RANK: usize = 1;

const ADAPTED: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.up", "ffn.down"];

impl Adapter {
    /// Gaussian factors; with `zero_b` the delta is exactly zero.
    pub fn random(backbone: &BackboneModel, domain: &str, rank: usize, std: f32, zero_b: bool, rng: &mut Rng) -> Self {
        let mut factors = Vec::new();
        for (l, layer) in backbone.layers().iter().enumerate() {
            let shapes = [
                layer.attn.wq.weight.shape(),
                layer.attn.wk.weight.shape(),
                layer.attn.wv.weight.shape(),
                layer.attn.wo.weight.shape(),
                layer.ffn.up.weight.shape(),
                layer.ffn.down.weight.shape(),
            ];
            for (name, s) in ADAPTED.iter().zip(shapes) {
                let a = Tensor::randn(&[s[0], rank], std, rng);
                let b = if zero_b { Tensor::zeros(&[rank, s[1]]) } else { Tensor::randn(&[rank, s[1]], std, rng) };
                factors.push((format!("layers.{l}.{name}.weight"), a, b));
            }
        }
        Self { domain: domain.into(), rank, factors }
    }

    pub fn param_bytes(&self) -> usize {
        self.factors.iter().map(|(_, a, b)| 4 * (a.numel() + b.numel())).sum()
    }

    /// Rewrites the adapted weights of `overlay` as `base + A B`.
    pub fn materialize(&self, base: &BackboneModel, overlay: &mut BackboneModel) {
        let mut delta = Vec::new();
        for (name, a, b) in &self.factors {
            let (rows, r, cols) = (a.rows(), self.rank, b.cols());
            delta.resize(rows * cols, 0.0);
            gemm(a.data(), b.data(), &mut delta, rows, r, cols);
            let (l, w) = parse_adapted(name);
            let src = adapted_weight(&base.layers()[l], w);
            let dst = adapted_weight_mut(&mut overlay.layers_mut_unchecked()[l], w);
            for ((o, &s), &dl) in dst.data_mut().iter_mut().zip(src.data()).zip(&delta) {
                *o = s + dl;
            }
        }
    }
}

fn parse_adapted(name: &str) -> (usize, usize) {
    let rest = name.strip_prefix("layers.").expect("adapter names start with layers.");
    let (l, w) = rest.split_once('.').expect("layer index");
    let w = w.strip_suffix(".weight").expect("weight suffix");
    (l.parse().expect("layer index"), ADAPTED.iter().position(|&a| a == w).expect("known matrix"))
}

fn adapted_weight(l: &crate::model::DecoderLayer, w: usize) -> &Tensor {
    match w {
        0 => &l.attn.wq.weight,
        1 => &l.attn.wk.weight,
        2 => &l.attn.wv.weight,
        3 => &l.attn.wo.weight,
        4 => &l.ffn.up.weight,
        _ => &l.ffn.down.weight,
    }
}

fn adapted_weight_mut(l: &mut crate::model::DecoderLayer, w: usize) -> &mut Tensor {
    match w {
        0 => &mut l.attn.wq.weight,
        1 => &mut l.attn.wk.weight,
        2 => &mut l.attn.wv.weight,
        3 => &mut l.attn.wo.weight,
        4 => &mut l.ffn.up.weight,
        _ => &mut l.ffn.down.weight,
    }
}

/// Bytes of one rank-`rank` adapter for `config`.
pub fn adapter_bytes(config: &ModelConfig, rank: usize) -> usize {
    let (d, f) = (config.d_model, config.d_ff);
    let per_layer = 4 * (d + d) * rank + (d + f) * rank + (f + d) * rank;
    4 * config.n_layers * per_layer
}

/// Backbone, `n` adapters and one full materialized overlay model.
pub fn adapter_deployment_bytes(config: &ModelConfig, n: usize, rank: usize) -> usize {
    2 * config.backbone_param_count() * 4 + n * adapter_bytes(config, rank)
}

/// Adapter serving: one overlay model whose adapted weights are rebuilt from
/// the backbone on every domain switch.
pub fn run_adapter_baseline(backbone: &BackboneModel, adapters: &[Adapter], workload: &Workload) -> Result<BenchReport> {
    let started = Instant::now();
    let by_domain: BTreeMap<&str, &Adapter> = adapters.iter().map(|a| (a.domain.as_str(), a)).collect();
    for d in workload.domains() {
        if !by_domain.contains_key(d.as_str()) {
            return Err(Error::Workload(format!("no adapter for domain {d:?}")));
        }
    }
    let mut overlay = backbone.clone();
    let mut current: Option<String> = None;
    let mut cache = KvCache::new(backbone);
    let stats = drive(workload, |d, x, _| {
        let mut sw = Duration::ZERO;
        if current.as_deref() != Some(d) {
            let t = Instant::now();
            by_domain[d].materialize(backbone, &mut overlay);
            sw = t.elapsed();
            current = Some(d.to_string());
        }
        Ok((run_expert(&overlay, None, x, &mut cache)?.0.len() + 1, sw))
    })?;
    let peak = backbone.param_bytes() + adapters.iter().map(Adapter::param_bytes).sum::<usize>() + overlay.param_bytes();
    Ok(BenchReport::new("adapter", peak, kv_bytes(backbone.config()), stats, started.elapsed()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InsertionStrategy {
    /// Evenly spaced over all layers.
    GL,
    /// Half at the front, half at the back.
    FB,
    /// First layers.
    FE,
    /// Centered block.
    MD,
    /// Last layers.
    BE,
}

impl InsertionStrategy {
    pub const ALL: [InsertionStrategy; 5] = [Self::GL, Self::FB, Self::FE, Self::MD, Self::BE];

    pub fn name(self) -> &'static str {
        match self {
            Self::GL => "GL",
            Self::FB => "FB",
            Self::FE => "FE",
            Self::MD => "MD",
            Self::BE => "BE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name().eq_ignore_ascii_case(s))
    }

    /// Sorted positions for `l` expert layers in an `n_layers` backbone.
    pub fn positions(self, n_layers: usize, l: usize) -> Result<Vec<usize>> {
        if l == 0 || l > n_layers {
            return Err(Error::RoutingConfig(format!("cannot place {l} expert layers in {n_layers}")));
        }
        Ok(match self {
            Self::GL => (0..l).map(|i| i * n_layers / l).collect(),
            Self::FE => (0..l).collect(),
            Self::BE => (n_layers - l..n_layers).collect(),
            Self::MD => {
                let s = (n_layers - l) / 2;
                (s..s + l).collect()
            }
            Self::FB => {
                let front = l - l / 2;
                (0..front).chain(n_layers - l / 2..n_layers).collect()
            }
        })
    }
}

impl fmt::Display for InsertionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: InsertionStrategy,
    pub positions: Vec<usize>,
    pub accuracy: f64,
    pub base_accuracy: f64,
    /// `accuracy - base_accuracy`
    pub gain: f64,
    pub final_loss: f32,
}

/// Trains one expert per strategy on the same data with the same settings
/// and reports held-out exact match and the gain over the frozen base.
pub fn ablate_insertion(
    backbone: &BackboneModel,
    strategies: &[InsertionStrategy],
    domain: Domain,
    n_expert_layers: usize,
    width: usize,
    cfg: &TrainConfig,
    eval_n: usize,
) -> Result<Vec<AblationRow>> {
    let eval = eval_set(domain, eval_n, cfg.seed);
    let base = exact_match_accuracy(backbone, None, &eval, cfg.exec)?;
    strategies
        .iter()
        .map(|&s| {
            let positions = s.positions(backbone.config().n_layers, n_expert_layers)?;
            let mut e = ExpertSubnetwork::pruned_from(backbone, 0, domain.name(), positions.clone(), width)?;
            let curve = train_expert(&mut e, backbone, SyntheticDomain::new(domain), cfg)?;
            let accuracy = exact_match_accuracy(backbone, Some(&e), &eval, cfg.exec)?;
            Ok(AblationRow {
                strategy: s,
                positions,
                accuracy,
                base_accuracy: base,
                gain: accuracy - base,
                final_loss: curve.last().map(|r| r.loss).unwrap_or(f32::NAN),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<8} {:<14} {:>9} {:>9} {:>9}\n", "strategy", "positions", "accuracy", "base", "gain");
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:<14} {:>9.3} {:>9.3} {:>+9.3}\n",
            r.strategy.name(),
            format!("{:?}", r.positions),
            r.accuracy,
            r.base_accuracy,
            r.gain
        ));
    }
    s
}

/// The strategy with the highest accuracy; ties go to the earlier row.
pub fn best_strategy(rows: &[AblationRow]) -> Option<InsertionStrategy> {
    rows.iter().fold(None::<&AblationRow>, |b, r| match b {
        Some(b) if b.accuracy >= r.accuracy => Some(b),
        _ => Some(r),
    })
    .map(|r| r.strategy)
}

/// Ensemble models: the backbone with each expert spliced in, padded to the
/// backbone FFN width.
pub fn mdme_models(registry: &ExpertRegistry) -> Result<Vec<(String, BackboneModel)>> {
    registry
        .experts()
        .map(|e| Ok((e.domain.clone(), registry.backbone().materialize_expert(e)?)))
        .collect()
}
