//! Rule-based gating over a binary domain/expert table, and a learned
//! planner that picks experts one step at a time.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::prompt_tokens;
use crate::error::{Error, Result};
use crate::lifecycle::ExpertRegistry;
use crate::model::{
    decode_with, forward_hidden, BackboneModel, ExpertSubnetwork, KvCache, Params, ParamsMut, Stack,
};
use crate::tensor::{argmax, axpy, dot, gemm, gemm_a_bt, gemm_at_b_acc, softmax_in_place, Rng, Tensor};
use crate::tokenizer::{Token, BOS, EOS, IND};

/// Marks a consumed or empty instruction slot.
pub const SLOT_DONE: Token = b'.' as Token;
pub const INSTRUCTION_END: Token = b':' as Token;
pub const CONTEXT_SEP: Token = b'|' as Token;

/// Binary association between domain tags (rows) and expert ids (columns).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MappingMatrix {
    rows: BTreeMap<String, Vec<u32>>,
    experts: Vec<u32>,
}

impl MappingMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from explicit 0/1 rows over the given expert columns.
    pub fn from_rows(experts: &[u32], rows: &[(&str, Vec<u8>)]) -> Result<Self> {
        let mut m = Self::new();
        for &e in experts {
            m.add_expert(e);
        }
        for (domain, bits) in rows {
            if bits.len() != experts.len() {
                return Err(Error::RoutingConfig(format!(
                    "row {domain} has {} entries for {} experts",
                    bits.len(),
                    experts.len()
                )));
            }
            m.add_domain(domain);
            for (&e, &b) in experts.iter().zip(bits) {
                match b {
                    0 => {}
                    1 => m.set(domain, e, true)?,
                    v => return Err(Error::RoutingConfig(format!("entry {v} is not binary"))),
                }
            }
        }
        Ok(m)
    }

    pub fn add_domain(&mut self, domain: &str) {
        self.rows.entry(domain.to_string()).or_default();
    }

    /// Adds an all-zero column.
    pub fn add_expert(&mut self, id: u32) {
        if let Err(i) = self.experts.binary_search(&id) {
            self.experts.insert(i, id);
        }
    }

    /// Drops a column and every 1 in it.
    pub fn remove_expert(&mut self, id: u32) {
        self.experts.retain(|&e| e != id);
        for row in self.rows.values_mut() {
            row.retain(|&e| e != id);
        }
    }

    pub fn set(&mut self, domain: &str, id: u32, on: bool) -> Result<()> {
        if self.experts.binary_search(&id).is_err() {
            return Err(Error::RoutingConfig(format!("expert {id} is not a column")));
        }
        let row = self.rows.entry(domain.to_string()).or_default();
        match (row.binary_search(&id), on) {
            (Err(i), true) => row.insert(i, id),
            (Ok(i), false) => {
                row.remove(i);
            }
            _ => {}
        }
        Ok(())
    }

    pub fn get(&self, domain: &str, id: u32) -> bool {
        self.rows.get(domain).is_some_and(|r| r.binary_search(&id).is_ok())
    }

    /// Expert columns in ascending order.
    pub fn experts(&self) -> &[u32] {
        &self.experts
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// The row as 0/1 entries over [`experts`](Self::experts).
    pub fn row(&self, domain: &str) -> Option<Vec<u8>> {
        let r = self.rows.get(domain)?;
        Some(self.experts.iter().map(|e| r.binary_search(e).is_ok() as u8).collect())
    }

    /// Experts associated with a domain, ascending.
    pub fn experts_for(&self, domain: &str) -> Option<&[u32]> {
        self.rows.get(domain).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathOrigin {
    Gating,
    Planning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub expert_id: u32,
    pub positions: Vec<usize>,
}

/// The experts a query runs through. Empty means the backbone answers alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPath {
    pub steps: Vec<PathStep>,
    pub origin: PathOrigin,
}

impl ExecutionPath {
    pub fn expert_ids(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.expert_id).collect()
    }
}

/// One path per query: a step for every expert whose entry in the query's
/// row is 1, by ascending id. Each step is answered independently.
pub fn gate(m: &MappingMatrix, registry: &ExpertRegistry, queries: &[(String, Vec<Token>)]) -> Result<Vec<ExecutionPath>> {
    queries
        .iter()
        .map(|(domain, _)| {
            let ids = m
                .experts_for(domain)
                .ok_or_else(|| Error::Gating(format!("unknown domain tag {domain:?}")))?;
            let steps = ids
                .iter()
                .map(|&id| {
                    let e = registry.expert(id).ok_or(Error::Lookup(id))?;
                    Ok(PathStep { expert_id: id, positions: e.positions().to_vec() })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ExecutionPath { steps, origin: PathOrigin::Gating })
        })
        .collect()
}

/// Argmax over raw scores; ties go to the lowest index.
pub fn select_expert(h: &[f32]) -> Result<usize> {
    if h.is_empty() {
        return Err(Error::Routing("no candidate experts to select from".into()));
    }
    Ok(argmax(h))
}

/// A planning query: instruction slots consumed one per step, and the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanQuery {
    pub instruction: Vec<Token>,
    pub payload: Vec<Token>,
}

/// Planner input for step `index` (1-based).
///
/// Encoded as `<bos> <ind> slots : payload | carried`, where the first
/// `index - 1` slots are masked as done and `carried` is the previous step's
/// output (empty at step 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subtask {
    pub index: usize,
    pub tokens: Vec<Token>,
    pub carried: Vec<Token>,
    /// True when the oldest carried tokens had to be dropped to fit.
    pub truncated: bool,
}

impl Subtask {
    pub fn encode(query: &PlanQuery, index: usize, carried: &[Token], max_seq: usize) -> Result<Self> {
        if index == 0 {
            return Err(Error::Routing("subtask index starts at 1".into()));
        }
        let mut head = vec![BOS, IND];
        for (i, &t) in query.instruction.iter().enumerate() {
            head.push(if i + 1 < index { SLOT_DONE } else { t });
        }
        head.push(INSTRUCTION_END);
        head.extend_from_slice(&query.payload);
        head.push(CONTEXT_SEP);
        if head.len() > max_seq {
            return Err(Error::SequenceLength { len: head.len(), max: max_seq });
        }
        let room = max_seq - head.len();
        let (kept, truncated) = if carried.len() > room {
            (&carried[carried.len() - room..], true)
        } else {
            (carried, false)
        };
        let mut tokens = head;
        tokens.extend_from_slice(kept);
        Ok(Self { index, tokens, carried: kept.to_vec(), truncated })
    }
}

/// Single-head cross-attention from indicator rows over hidden states,
/// followed by a scalar head.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[d_model]`
    pub head_w: Tensor,
    /// `[1]`
    pub head_b: Tensor,
}

impl Scorer {
    pub fn new(d: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f32).sqrt();
        Self {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            head_w: Tensor::randn(&[d], 0.02, rng),
            head_b: Tensor::zeros(&[1]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            head_w: self.head_w.zeros_like(),
            head_b: self.head_b.zeros_like(),
        }
    }
}

/// Intermediate values of one scoring pass.
pub(crate) struct ScoreTrace {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    p: Vec<f32>,
    c: Vec<f32>,
    pub h: Vec<f32>,
}

/// `h_i = F(CrossAttention(W_i, H))` for every indicator row.
pub(crate) fn score_forward(scorer: &Scorer, indicators: &Tensor, hidden: &[f32]) -> ScoreTrace {
    let d = scorer.wq.shape()[0];
    let n = indicators.rows();
    let t = hidden.len() / d;
    let scale = 1.0 / (d as f32).sqrt();
    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    gemm(indicators.data(), scorer.wq.data(), &mut q, n, d, d);
    gemm(hidden, scorer.wk.data(), &mut k, t, d, d);
    gemm(hidden, scorer.wv.data(), &mut v, t, d, d);
    let mut p = vec![0.0; n * t];
    gemm_a_bt(&q, &k, &mut p, n, d, t);
    for i in 0..n {
        let row = &mut p[i * t..(i + 1) * t];
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    let mut c = vec![0.0; n * d];
    gemm(&p, &v, &mut c, n, t, d);
    let h = (0..n).map(|i| dot(&c[i * d..(i + 1) * d], scorer.head_w.data()) + scorer.head_b.data()[0]).collect();
    ScoreTrace { q, k, v, p, c, h }
}

/// Accumulates scorer and indicator gradients for `dh`; returns `dH`.
pub(crate) fn score_backward(
    scorer: &Scorer,
    indicators: &Tensor,
    hidden: &[f32],
    tr: &ScoreTrace,
    dh: &[f32],
    g: &mut PlannerGrads,
) -> Vec<f32> {
    let d = scorer.wq.shape()[0];
    let n = indicators.rows();
    let t = hidden.len() / d;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dc = vec![0.0; n * d];
    for i in 0..n {
        axpy(dh[i], scorer.head_w.data(), &mut dc[i * d..(i + 1) * d]);
        axpy(dh[i], &tr.c[i * d..(i + 1) * d], g.scorer.head_w.data_mut());
        g.scorer.head_b.data_mut()[0] += dh[i];
    }
    let mut dp = vec![0.0; n * t];
    gemm_a_bt(&dc, &tr.v, &mut dp, n, d, t);
    let mut dv = vec![0.0; t * d];
    gemm_at_b_acc(&tr.p, &dc, &mut dv, n, t, d);
    let mut ds = vec![0.0; n * t];
    for i in 0..n {
        let p = &tr.p[i * t..(i + 1) * t];
        let dpi = &dp[i * t..(i + 1) * t];
        let s: f32 = p.iter().zip(dpi).map(|(a, b)| a * b).sum();
        for j in 0..t {
            ds[i * t + j] = p[j] * (dpi[j] - s) * scale;
        }
    }
    let mut dq = vec![0.0; n * d];
    gemm(&ds, &tr.k, &mut dq, n, t, d);
    let mut dk = vec![0.0; t * d];
    gemm_at_b_acc(&ds, &tr.q, &mut dk, n, t, d);

    let mut dw = vec![0.0; n * d];
    gemm_a_bt(&dq, scorer.wq.data(), &mut dw, n, d, d);
    axpy(1.0, &dw, g.indicators.data_mut());
    gemm_at_b_acc(indicators.data(), &dq, g.scorer.wq.data_mut(), n, d, d);
    gemm_at_b_acc(hidden, &dk, g.scorer.wk.data_mut(), t, d, d);
    gemm_at_b_acc(hidden, &dv, g.scorer.wv.data_mut(), t, d, d);

    let mut dhid = vec![0.0; t * d];
    gemm_a_bt(&dk, scorer.wk.data(), &mut dhid, t, d, d);
    let mut tmp = vec![0.0; t * d];
    gemm_a_bt(&dv, scorer.wv.data(), &mut tmp, t, d, d);
    for (a, b) in dhid.iter_mut().zip(&tmp) {
        *a += b;
    }
    dhid
}

/// The planner: an ordinary expert subnetwork plus indicator rows and a
/// scorer. Row `i` belongs to `candidates()[i]`; the final row is STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerExpert {
    pub expert: ExpertSubnetwork,
    indicators: Tensor,
    candidates: Vec<u32>,
    uncalibrated: Vec<bool>,
    pub scorer: Scorer,
}

/// Gradient accumulator for every trainable planner tensor.
pub struct PlannerGrads {
    pub expert: ExpertSubnetwork,
    pub indicators: Tensor,
    pub scorer: Scorer,
}

impl PlannerExpert {
    /// Indicator rows start at the `<ind>` embedding plus small noise.
    pub fn new(backbone: &BackboneModel, expert: ExpertSubnetwork, candidates: &[u32], rng: &mut Rng) -> Result<Self> {
        expert.validate_for(backbone.config())?;
        let d = backbone.config().d_model;
        let mut ids = candidates.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != candidates.len() {
            return Err(Error::RoutingConfig("duplicate planner candidates".into()));
        }
        let mut rows = Vec::with_capacity((ids.len() + 1) * d);
        for _ in 0..=ids.len() {
            rows.extend(Self::fresh_row(backbone, rng));
        }
        Ok(Self {
            expert,
            indicators: Tensor::new(vec![ids.len() + 1, d], rows)?,
            uncalibrated: vec![false; ids.len()],
            candidates: ids,
            scorer: Scorer::new(d, rng),
        })
    }

    /// A planner for every expert in `registry`, with a pruned expert of
    /// `width` units on the last `layers` backbone layers.
    pub fn for_registry(registry: &ExpertRegistry, id: u32, layers: usize, width: usize, seed: u64) -> Result<Self> {
        let b = registry.backbone();
        let n = b.config().n_layers;
        if layers == 0 || layers > n {
            return Err(Error::RoutingConfig(format!("cannot place {layers} planner layers in {n}")));
        }
        let expert = ExpertSubnetwork::pruned_from(b, id, "planner", (n - layers..n).collect(), width)?;
        Self::new(b, expert, &registry.expert_ids(), &mut Rng::new(seed).fork(0x91a2))
    }

    fn fresh_row(backbone: &BackboneModel, rng: &mut Rng) -> Vec<f32> {
        let ind = backbone.embedding().row(IND as usize);
        ind.iter().map(|&v| v + 0.02 * rng.normal()).collect()
    }

    /// Candidate expert ids in row order.
    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    /// Index of the STOP row in a score vector.
    pub fn stop_index(&self) -> usize {
        self.candidates.len()
    }

    pub fn indicators(&self) -> &Tensor {
        &self.indicators
    }

    /// Mutable access to every trainable tensor, named as in `named_params`.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        ParamsMut::named_params_mut(self, "")
    }

    pub fn uncalibrated(&self) -> &[bool] {
        &self.uncalibrated
    }

    pub fn row_of(&self, id: u32) -> Option<usize> {
        self.candidates.iter().position(|&c| c == id)
    }

    /// Appends a randomly initialized row for a new expert, marked
    /// uncalibrated until the planner is trained again.
    pub fn add_candidate(&mut self, id: u32, backbone: &BackboneModel, rng: &mut Rng) -> Result<()> {
        if self.row_of(id).is_some() {
            return Ok(());
        }
        let d = self.indicators.cols();
        let n = self.candidates.len();
        let mut data = self.indicators.data()[..n * d].to_vec();
        data.extend(Self::fresh_row(backbone, rng));
        data.extend_from_slice(self.indicators.row(n));
        self.indicators = Tensor::new(vec![n + 2, d], data)?;
        self.candidates.push(id);
        self.uncalibrated.push(true);
        Ok(())
    }

    pub fn remove_candidate(&mut self, id: u32) -> Result<()> {
        let i = self.row_of(id).ok_or(Error::Lookup(id))?;
        let d = self.indicators.cols();
        let n = self.candidates.len();
        let mut data = Vec::with_capacity(n * d);
        for r in 0..=n {
            if r != i {
                data.extend_from_slice(self.indicators.row(r));
            }
        }
        self.indicators = Tensor::new(vec![n, d], data)?;
        self.candidates.remove(i);
        self.uncalibrated.remove(i);
        Ok(())
    }

    pub fn mark_calibrated(&mut self) {
        self.uncalibrated.iter_mut().for_each(|u| *u = false);
    }

    pub fn zero_grads(&self) -> PlannerGrads {
        PlannerGrads {
            expert: self.expert.zeros_like(),
            indicators: self.indicators.zeros_like(),
            scorer: self.scorer.zeros_like(),
        }
    }

    pub(crate) fn from_parts(
        expert: ExpertSubnetwork,
        indicators: Tensor,
        candidates: Vec<u32>,
        uncalibrated: Vec<bool>,
        scorer: Scorer,
    ) -> Result<Self> {
        if indicators.rows() != candidates.len() + 1 || uncalibrated.len() != candidates.len() {
            return Err(Error::Dimension("planner rows do not match candidates".into()));
        }
        Ok(Self { expert, indicators, candidates, uncalibrated, scorer })
    }
}

fn visit_scorer<'a>(s: &'a Scorer, f: &mut dyn FnMut(String, &'a Tensor)) {
    f("scorer.wq".into(), &s.wq);
    f("scorer.wk".into(), &s.wk);
    f("scorer.wv".into(), &s.wv);
    f("scorer.head_w".into(), &s.head_w);
    f("scorer.head_b".into(), &s.head_b);
}

impl Params for PlannerExpert {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.expert.visit(&p("expert"), f);
        f(p("indicators"), &self.indicators);
        visit_scorer(&self.scorer, &mut |n, t| f(p(&n), t));
    }
}

impl ParamsMut for PlannerExpert {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let PlannerExpert { expert, indicators, scorer, .. } = self;
        expert.visit_mut(&p("expert"), f);
        f(p("indicators"), indicators);
        let Scorer { wq, wk, wv, head_w, head_b } = scorer;
        f(p("scorer.wq"), wq);
        f(p("scorer.wk"), wk);
        f(p("scorer.wv"), wv);
        f(p("scorer.head_w"), head_w);
        f(p("scorer.head_b"), head_b);
    }
}

impl Params for PlannerGrads {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.expert.visit(&p("expert"), f);
        f(p("indicators"), &self.indicators);
        visit_scorer(&self.scorer, &mut |n, t| f(p(&n), t));
    }
}

impl ParamsMut for PlannerGrads {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let PlannerGrads { expert, indicators, scorer } = self;
        expert.visit_mut(&p("expert"), f);
        f(p("indicators"), indicators);
        let Scorer { wq, wk, wv, head_w, head_b } = scorer;
        f(p("scorer.wq"), wq);
        f(p("scorer.wk"), wk);
        f(p("scorer.wv"), wv);
        f(p("scorer.head_w"), head_w);
        f(p("scorer.head_b"), head_b);
    }
}

/// Scores every candidate (and STOP) for one subtask.
pub fn plan_scores(planner: &PlannerExpert, backbone: &BackboneModel, subtask: &Subtask) -> Result<Vec<f32>> {
    if subtask.tokens.is_empty() {
        return Err(Error::Routing("empty subtask".into()));
    }
    let hidden = forward_hidden(backbone, Some(&planner.expert), &subtask.tokens)?;
    Ok(score_forward(&planner.scorer, &planner.indicators, hidden.data()).h)
}

/// Final output and realized path of a planned execution.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub output: Vec<Token>,
    pub path: ExecutionPath,
    /// Set when carried context had to be truncated to fit.
    pub truncated: bool,
}

/// Decodes `input` through one expert using the domain prompt format.
/// The trailing `<eos>` is stripped from the result.
pub fn run_expert(
    backbone: &BackboneModel,
    expert: Option<&ExpertSubnetwork>,
    input: &[Token],
    cache: &mut KvCache,
) -> Result<(Vec<Token>, bool)> {
    let max_seq = backbone.config().max_seq;
    let mut truncated = false;
    // Keep room for at least a short answer; drop the oldest input if needed.
    let budget = max_seq.saturating_sub(2).saturating_sub(1).max(1);
    let input = if input.len() * 3 + 3 > max_seq {
        truncated = true;
        let keep = budget.min(input.len()).min((max_seq.saturating_sub(3)) / 3).max(1);
        &input[input.len() - keep..]
    } else {
        input
    };
    let prompt = prompt_tokens(input);
    let max_new = (2 * input.len() + 2).min(max_seq + 1 - prompt.len());
    let stack = Stack::new(backbone, expert)?;
    let mut out = decode_with(&stack, &prompt, max_new, Some(EOS), Some(cache))?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok((out, truncated))
}

/// Runs the planner loop: score the current subtask, pick an expert, feed
/// the carried output of the previous step to it, and repeat until STOP wins
/// or `max_steps` experts have run.
pub fn execute_plan(registry: &ExpertRegistry, query: &PlanQuery, max_steps: usize) -> Result<PlanOutcome> {
    if max_steps == 0 {
        return Err(Error::Routing("max_steps must be at least 1".into()));
    }
    let planner = registry.planner().ok_or_else(|| Error::Routing("registry has no planner".into()))?;
    let backbone = registry.backbone();
    let max_seq = backbone.config().max_seq;
    let mut carried: Vec<Token> = Vec::new();
    let mut steps = Vec::new();
    let mut truncated = false;
    let mut cache = KvCache::new(backbone);
    for t in 1..=max_steps {
        let sub = Subtask::encode(query, t, &carried, max_seq)?;
        truncated |= sub.truncated;
        let h = plan_scores(planner, backbone, &sub)?;
        let pick = select_expert(&h)?;
        if pick == planner.stop_index() {
            break;
        }
        let id = planner.candidates()[pick];
        let expert = registry.expert(id).ok_or(Error::Lookup(id))?;
        let input = if t == 1 { query.payload.clone() } else { carried.clone() };
        let (out, trunc) = run_expert(backbone, Some(expert), &input, &mut cache)?;
        truncated |= trunc;
        steps.push(PathStep { expert_id: id, positions: expert.positions().to_vec() });
        carried = out;
    }
    let output = if steps.is_empty() { query.payload.clone() } else { carried };
    Ok(PlanOutcome { output, path: ExecutionPath { steps, origin: PathOrigin::Planning }, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_rows_and_columns() {
        let m = MappingMatrix::from_rows(&[0, 1, 2], &[("a", vec![1, 0, 1]), ("b", vec![0, 0, 0])]).unwrap();
        assert_eq!(m.row("a").unwrap(), vec![1, 0, 1]);
        assert_eq!(m.experts_for("a").unwrap(), &[0, 2]);
        assert_eq!(m.experts_for("b").unwrap(), &[] as &[u32]);
        assert!(MappingMatrix::from_rows(&[0], &[("a", vec![2])]).is_err());
        let mut m = m;
        m.remove_expert(2);
        assert_eq!(m.row("a").unwrap(), vec![1, 0]);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_expert(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(select_expert(&[0.5, 0.5]).unwrap(), 0);
        assert!(select_expert(&[]).is_err());
    }

    #[test]
    fn subtask_masks_consumed_slots_and_truncates() {
        let q = PlanQuery { instruction: vec![b'r' as Token, b'u' as Token], payload: vec![97, 98] };
        let s1 = Subtask::encode(&q, 1, &[], 64).unwrap();
        assert_eq!(s1.tokens, vec![BOS, IND, b'r' as Token, b'u' as Token, b':' as Token, 97, 98, b'|' as Token]);
        let s2 = Subtask::encode(&q, 2, &[98, 97], 64).unwrap();
        assert_eq!(&s2.tokens[2..4], &[SLOT_DONE, b'u' as Token]);
        assert_eq!(&s2.tokens[8..], &[98, 97]);
        let s3 = Subtask::encode(&q, 3, &[1, 2, 3, 4], 10).unwrap();
        assert!(s3.truncated);
        assert_eq!(s3.carried, vec![3, 4]);
        assert_eq!(s3.tokens.len(), 10);
    }
}
