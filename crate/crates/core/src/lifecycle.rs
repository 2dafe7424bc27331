//! The live registry: one frozen backbone, an expert pool, the gating table
//! and an optional planner, with exact per-component byte accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_base, forward_with_expert, BackboneModel, ExpertSubnetwork, KvCache, Params};
use crate::routing::{gate, run_expert, ExecutionPath, MappingMatrix, PlannerExpert};
use crate::tensor::{Rng, Tensor};
use crate::tokenizer::Token;

/// Experts may hold at most `BUDGET_NUM / BUDGET_DEN` of the backbone bytes.
pub const BUDGET_NUM: usize = 3;
pub const BUDGET_DEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushOutcome {
    Added,
    Replaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentBytes {
    pub component: String,
    pub param_bytes: usize,
}

/// One expert's answer under rule-based gating. `expert` is `None` when the
/// backbone answered alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatedAnswer {
    pub expert: Option<u32>,
    pub output: Vec<Token>,
}

/// Largest expert byte count allowed next to a backbone of `backbone_bytes`.
pub fn budget_limit(backbone_bytes: usize) -> usize {
    backbone_bytes * BUDGET_NUM / BUDGET_DEN
}

fn check_budget(bytes: usize, backbone_bytes: usize) -> Result<()> {
    if bytes * BUDGET_DEN > backbone_bytes * BUDGET_NUM {
        return Err(Error::Budget { expert_bytes: bytes, limit_bytes: budget_limit(backbone_bytes) });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExpertRegistry {
    backbone: BackboneModel,
    experts: BTreeMap<u32, ExpertSubnetwork>,
    mapping: MappingMatrix,
    planner: Option<PlannerExpert>,
    declared: BTreeMap<u32, Vec<usize>>,
    rng: Rng,
}

impl ExpertRegistry {
    /// The backbone must already be frozen.
    pub fn new(backbone: BackboneModel, seed: u64) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Config("registry requires a frozen backbone".into()));
        }
        Ok(Self {
            backbone,
            experts: BTreeMap::new(),
            mapping: MappingMatrix::new(),
            planner: None,
            declared: BTreeMap::new(),
            rng: Rng::new(seed).fork(0x1d1c),
        })
    }

    pub fn backbone(&self) -> &BackboneModel {
        &self.backbone
    }

    pub fn expert(&self, id: u32) -> Option<&ExpertSubnetwork> {
        self.experts.get(&id)
    }

    pub fn expert_ids(&self) -> Vec<u32> {
        self.experts.keys().copied().collect()
    }

    pub fn experts(&self) -> impl Iterator<Item = &ExpertSubnetwork> {
        self.experts.values()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn mapping(&self) -> &MappingMatrix {
        &self.mapping
    }

    pub fn planner(&self) -> Option<&PlannerExpert> {
        self.planner.as_ref()
    }

    /// Mutable planner next to the read-only backbone, for planner training.
    pub fn planner_mut(&mut self) -> (Option<&mut PlannerExpert>, &BackboneModel) {
        (self.planner.as_mut(), &self.backbone)
    }

    /// Pins the positions an expert id must use when pushed.
    pub fn declare_positions(&mut self, id: u32, positions: Vec<usize>) -> Result<()> {
        crate::model::check_positions(&positions, self.backbone.config().n_layers)?;
        if let Some(e) = self.experts.get(&id) {
            if e.positions() != positions.as_slice() {
                return Err(Error::Config(format!("expert {id} is already registered at other positions")));
            }
        }
        self.declared.insert(id, positions);
        Ok(())
    }

    pub fn declared_positions(&self, id: u32) -> Option<&[usize]> {
        self.declared.get(&id).map(Vec::as_slice)
    }

    /// Adds a new expert or replaces the weights of an existing id.
    ///
    /// A new expert gets a mapping column (set for its own domain tag) and a
    /// fresh uncalibrated planner row. Every check runs before any state
    /// changes, so a failed push leaves the registry untouched.
    pub fn push(&mut self, expert: ExpertSubnetwork) -> Result<PushOutcome> {
        expert.validate_for(self.backbone.config())?;
        check_budget(expert.param_bytes(), self.backbone.param_bytes())?;
        if let Some(p) = self.declared.get(&expert.id) {
            if p.as_slice() != expert.positions() {
                return Err(Error::Config(format!(
                    "expert {} positions {:?} conflict with configured {:?}",
                    expert.id,
                    expert.positions(),
                    p
                )));
            }
        }
        if let Some(old) = self.experts.get(&expert.id) {
            if old.positions() != expert.positions() {
                return Err(Error::Config(format!(
                    "expert {} is registered at {:?}, replacement uses {:?}",
                    expert.id,
                    old.positions(),
                    expert.positions()
                )));
            }
            if old.domain != expert.domain {
                return Err(Error::Config(format!(
                    "expert {} serves {:?}, replacement claims {:?}",
                    expert.id, old.domain, expert.domain
                )));
            }
            self.experts.insert(expert.id, expert);
            return Ok(PushOutcome::Replaced);
        }
        let id = expert.id;
        self.mapping.add_expert(id);
        if !expert.domain.is_empty() {
            self.mapping.set(&expert.domain.clone(), id, true)?;
        }
        if let Some(p) = self.planner.as_mut() {
            p.add_candidate(id, &self.backbone, &mut self.rng)?;
        }
        self.experts.insert(id, expert);
        Ok(PushOutcome::Added)
    }

    /// A deep copy of a registered expert.
    pub fn pop_copy(&self, id: u32) -> Result<ExpertSubnetwork> {
        self.experts.get(&id).cloned().ok_or(Error::Lookup(id))
    }

    /// Removes an expert, its mapping column and its planner row.
    pub fn pop_remove(&mut self, id: u32) -> Result<ExpertSubnetwork> {
        let e = self.experts.remove(&id).ok_or(Error::Lookup(id))?;
        self.mapping.remove_expert(id);
        if let Some(p) = self.planner.as_mut() {
            if p.row_of(id).is_some() {
                p.remove_candidate(id)?;
            }
        }
        Ok(e)
    }

    /// Installs a planner. Its candidates must all be registered and it is
    /// subject to the same byte budget as any expert.
    pub fn set_planner(&mut self, planner: PlannerExpert) -> Result<()> {
        planner.expert.validate_for(self.backbone.config())?;
        check_budget(planner.param_bytes(), self.backbone.param_bytes())?;
        if let Some(&c) = planner.candidates().iter().find(|c| !self.experts.contains_key(c)) {
            return Err(Error::Lookup(c));
        }
        if planner.candidates().len() != self.experts.len() {
            return Err(Error::RoutingConfig("planner must have one row per registered expert".into()));
        }
        self.planner = Some(planner);
        Ok(())
    }

    pub fn remove_planner(&mut self) -> Option<PlannerExpert> {
        self.planner.take()
    }

    /// Sets one mapping entry; the expert must be registered.
    pub fn associate(&mut self, domain: &str, id: u32, on: bool) -> Result<()> {
        if !self.experts.contains_key(&id) {
            return Err(Error::Lookup(id));
        }
        self.mapping.add_domain(domain);
        self.mapping.set(domain, id, on)
    }

    /// Registers a domain tag with an all-zero row.
    pub fn add_domain(&mut self, domain: &str) {
        self.mapping.add_domain(domain);
    }

    /// Replaces the whole mapping table; every column must be registered.
    pub fn set_mapping(&mut self, mapping: MappingMatrix) -> Result<()> {
        let want = self.expert_ids();
        if mapping.experts() != want.as_slice() {
            return Err(Error::RoutingConfig(format!(
                "mapping columns {:?} do not match registered experts {:?}",
                mapping.experts(),
                want
            )));
        }
        self.mapping = mapping;
        Ok(())
    }

    pub fn gate(&self, queries: &[(String, Vec<Token>)]) -> Result<Vec<ExecutionPath>> {
        gate(&self.mapping, self, queries)
    }

    /// Answers `input` for a domain tag: every gated expert answers
    /// independently, or the backbone alone if the row is empty.
    pub fn answer(&self, domain: &str, input: &[Token]) -> Result<Vec<GatedAnswer>> {
        let path = gate(&self.mapping, self, &[(domain.to_string(), input.to_vec())])?.remove(0);
        let mut cache = KvCache::new(&self.backbone);
        if path.steps.is_empty() {
            let (output, _) = run_expert(&self.backbone, None, input, &mut cache)?;
            return Ok(vec![GatedAnswer { expert: None, output }]);
        }
        path.steps
            .iter()
            .map(|s| {
                let e = self.experts.get(&s.expert_id).ok_or(Error::Lookup(s.expert_id))?;
                let (output, _) = run_expert(&self.backbone, Some(e), input, &mut cache)?;
                Ok(GatedAnswer { expert: Some(s.expert_id), output })
            })
            .collect()
    }

    /// Logits through one expert, or the bare backbone for `None`.
    pub fn forward(&self, expert: Option<u32>, tokens: &[Token]) -> Result<Tensor> {
        match expert {
            None => forward_base(&self.backbone, tokens),
            Some(id) => forward_with_expert(&self.backbone, self.experts.get(&id).ok_or(Error::Lookup(id))?, tokens),
        }
    }

    /// Per-component parameter bytes: backbone, experts by id, planner.
    pub fn ledger(&self) -> Vec<ComponentBytes> {
        let mut l = vec![ComponentBytes { component: "backbone".into(), param_bytes: self.backbone.param_bytes() }];
        for (id, e) in &self.experts {
            l.push(ComponentBytes { component: format!("expert.{id}"), param_bytes: e.param_bytes() });
        }
        if let Some(p) = &self.planner {
            l.push(ComponentBytes { component: "planner".into(), param_bytes: p.param_bytes() });
        }
        l
    }

    pub fn total_bytes(&self) -> usize {
        self.ledger().iter().map(|c| c.param_bytes).sum()
    }

    /// Accounting table with the MDME and adapter comparisons.
    ///
    /// The MDME deployment is one full model per registered expert, each the
    /// size of the backbone. The adapter deployment uses `adapter_rank`
    /// adapters per domain on the same backbone.
    pub fn memory_report(&self, adapter_rank: usize) -> MemoryReport {
        let components = self.ledger();
        let total = self.total_bytes();
        let b = self.backbone.param_bytes();
        let n = self.experts.len();
        let mdme = b * n;
        let adapter = crate::bench::adapter_deployment_bytes(self.backbone.config(), n, adapter_rank);
        MemoryReport {
            components,
            total_bytes: total,
            backbone_bytes: b,
            n_experts: n,
            ccoe_over_backbone: total as f64 / b as f64,
            mdme_bytes: mdme,
            reduction_vs_mdme: if mdme == 0 { 0.0 } else { 1.0 - total as f64 / mdme as f64 },
            adapter_bytes: adapter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub components: Vec<ComponentBytes>,
    pub total_bytes: usize,
    pub backbone_bytes: usize,
    pub n_experts: usize,
    pub ccoe_over_backbone: f64,
    /// Equal-size MDME: one backbone-sized model per expert.
    pub mdme_bytes: usize,
    pub reduction_vs_mdme: f64,
    pub adapter_bytes: usize,
}

impl MemoryReport {
    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16} {:>14}\n", "component", "param_bytes"));
        for c in &self.components {
            s.push_str(&format!("{:<16} {:>14}\n", c.component, c.param_bytes));
        }
        s.push_str(&format!("{:<16} {:>14}\n", "total", self.total_bytes));
        s.push_str(&format!("{:<16} {:>14.4}\n", "total/backbone", self.ccoe_over_backbone));
        s.push_str(&format!("{:<16} {:>14}\n", "mdme", self.mdme_bytes));
        s.push_str(&format!("{:<16} {:>13.2}%\n", "reduction", 100.0 * self.reduction_vs_mdme));
        s.push_str(&format!("{:<16} {:>14}\n", "adapter", self.adapter_bytes));
        s
    }
}

/// Relative saving of a shared-backbone deployment of `ccoe_size` over an
/// ensemble of independent models with the given sizes (any common unit).
pub fn reduction_vs_ensemble(ccoe_size: f64, model_sizes: &[f64]) -> f64 {
    1.0 - ccoe_size / model_sizes.iter().sum::<f64>()
}

/// Ensemble sizes (billions of parameters) of the five domain models used in
/// the reference deployment, and the shared backbone size.
pub const REFERENCE_MDME_MIX: [f64; 5] = [7.0, 6.0, 7.0, 7.0, 3.0];
pub const REFERENCE_BACKBONE: f64 = 7.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_backbone() -> BackboneModel {
        let cfg = ModelConfig { n_layers: 4, d_model: 16, n_heads: 2, d_ff: 32, vocab: 260, max_seq: 32 };
        let mut b = BackboneModel::init(cfg, &mut Rng::new(4)).unwrap();
        b.freeze();
        b
    }

    #[test]
    fn push_pop_keeps_ledger_exact() {
        let b = tiny_backbone();
        let bb = b.param_bytes();
        let mut r = ExpertRegistry::new(b, 0).unwrap();
        let e = ExpertSubnetwork::pruned_from(r.backbone(), 3, "reverse", vec![1], 8).unwrap();
        let eb = e.param_bytes();
        assert_eq!(r.push(e.clone()).unwrap(), PushOutcome::Added);
        assert_eq!(r.total_bytes(), bb + eb);
        assert_eq!(r.push(e).unwrap(), PushOutcome::Replaced);
        assert_eq!(r.mapping().experts_for("reverse").unwrap(), &[3]);
        r.pop_remove(3).unwrap();
        assert_eq!(r.total_bytes(), bb);
        assert!(r.gate(&[("reverse".into(), vec![97])]).unwrap()[0].steps.is_empty());
        assert!(matches!(r.pop_copy(3), Err(Error::Lookup(3))));
    }

    #[test]
    fn over_budget_and_conflicting_pushes_fail_cleanly() {
        let mut r = ExpertRegistry::new(tiny_backbone(), 0).unwrap();
        let big = ExpertSubnetwork::pruned_from(r.backbone(), 1, "copy", vec![0, 1, 2, 3], 32).unwrap();
        assert!(matches!(r.push(big), Err(Error::Budget { .. })));
        r.declare_positions(2, vec![0]).unwrap();
        let e = ExpertSubnetwork::pruned_from(r.backbone(), 2, "copy", vec![1], 4).unwrap();
        assert!(matches!(r.push(e), Err(Error::Config(_))));
        assert!(r.is_empty());
        assert_eq!(r.total_bytes(), r.backbone().param_bytes());
    }

    #[test]
    fn unfrozen_backbone_is_rejected() {
        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, vocab: 260, max_seq: 16 };
        let b = BackboneModel::init(cfg, &mut Rng::new(1)).unwrap();
        assert!(ExpertRegistry::new(b, 0).is_err());
    }

    #[test]
    fn reference_mix_reduction() {
        let r = reduction_vs_ensemble(REFERENCE_BACKBONE * 1.75, &REFERENCE_MDME_MIX);
        assert!((r - (1.0 - 12.25 / 30.0)).abs() < 1e-12);
        assert!((0.59..0.60).contains(&r));
    }
}
