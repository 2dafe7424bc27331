//! Double-precision reference implementation used as an independent oracle.
//!
//! Parameters live in a flat map keyed by the crate's canonical tensor names,
//! so any tensor can be perturbed for finite differences.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ccoe::data::{Domain, Example};
use ccoe::model::{BackboneModel, ExpertSubnetwork, ModelConfig, Params, LN_EPS};
use ccoe::routing::{PlannerExpert, Subtask};
use ccoe::tokenizer::Token;
use ccoe::training::{PlannerExample, COND_LAYER};
use ccoe::{Rng, Tensor};

pub type Map = BTreeMap<String, Vec<f64>>;

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn insert_all(map: &mut Map, prefix: &str, params: Vec<(String, &Tensor)>) {
    for (n, t) in params {
        let key = if prefix.is_empty() { n } else { format!("{prefix}.{n}") };
        map.insert(key, to64(t));
    }
}

/// The f64 model: backbone tensors, optional expert tensors under `expert.`,
/// optional planner tensors, and an optional `cond` table.
#[derive(Clone)]
pub struct RefModel {
    pub cfg: ModelConfig,
    pub p: Map,
    /// Backbone layer index -> expert sublayer index.
    pub splice: BTreeMap<usize, usize>,
}

impl RefModel {
    pub fn new(backbone: &BackboneModel) -> Self {
        let mut p = Map::new();
        insert_all(&mut p, "", backbone.named_params(""));
        Self { cfg: *backbone.config(), p, splice: BTreeMap::new() }
    }

    pub fn with_expert(backbone: &BackboneModel, expert: &ExpertSubnetwork) -> Self {
        let mut m = Self::new(backbone);
        insert_all(&mut m.p, "expert", expert.named_params(""));
        m.splice = expert.positions().iter().enumerate().map(|(j, &p)| (p, j)).collect();
        m
    }

    /// Planner tensors go in under their own names (`expert.*`,
    /// `indicators`, `scorer.*`).
    pub fn with_planner(backbone: &BackboneModel, planner: &PlannerExpert) -> Self {
        let mut m = Self::new(backbone);
        insert_all(&mut m.p, "", planner.named_params(""));
        m.splice = planner.expert.positions().iter().enumerate().map(|(j, &p)| (p, j)).collect();
        m
    }

    fn get(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    fn ffn_prefix(&self, l: usize) -> String {
        match self.splice.get(&l) {
            Some(j) => format!("expert.layers.{j}"),
            None => format!("layers.{l}.ffn"),
        }
    }

    /// Final-norm hidden states `[t, d]`.
    pub fn hidden(&self, tokens: &[Token], cond: Option<&[f64]>) -> Vec<f64> {
        let d = self.cfg.d_model;
        let t = tokens.len();
        let emb = self.get("embedding");
        let pos = self.get("pos_embedding");
        let mut x = vec![0.0; t * d];
        for (r, &tok) in tokens.iter().enumerate() {
            for c in 0..d {
                x[r * d + c] = emb[tok as usize * d + c] + pos[r * d + c];
            }
        }
        for l in 0..self.cfg.n_layers {
            let pre = format!("layers.{l}");
            let h = layer_norm(&x, d, self.get(&format!("{pre}.attn_norm.gain")), self.get(&format!("{pre}.attn_norm.bias")));
            let q = linear(&h, d, self.get(&format!("{pre}.attn.wq.weight")), self.get(&format!("{pre}.attn.wq.bias")));
            let k = linear(&h, d, self.get(&format!("{pre}.attn.wk.weight")), self.get(&format!("{pre}.attn.wk.bias")));
            let v = linear(&h, d, self.get(&format!("{pre}.attn.wv.weight")), self.get(&format!("{pre}.attn.wv.bias")));
            let ctx = causal_attention(&q, &k, &v, t, d, self.cfg.n_heads);
            let a = linear(&ctx, d, self.get(&format!("{pre}.attn.wo.weight")), self.get(&format!("{pre}.attn.wo.bias")));
            for (xi, ai) in x.iter_mut().zip(&a) {
                *xi += ai;
            }
            let f = self.ffn(&self.ffn_prefix(l), &x);
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            if let (Some(c), true) = (cond, l == COND_LAYER) {
                for r in 0..t {
                    for j in 0..d {
                        x[r * d + j] += c[j];
                    }
                }
            }
        }
        layer_norm(&x, d, self.get("final_norm.gain"), self.get("final_norm.bias"))
    }

    fn ffn(&self, pre: &str, x: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let h = layer_norm(x, d, self.get(&format!("{pre}.norm.gain")), self.get(&format!("{pre}.norm.bias")));
        let up_b = self.get(&format!("{pre}.up.bias"));
        let mut u = linear(&h, d, self.get(&format!("{pre}.up.weight")), up_b);
        u.iter_mut().for_each(|v| *v = gelu(*v));
        linear(&u, up_b.len(), self.get(&format!("{pre}.down.weight")), self.get(&format!("{pre}.down.bias")))
    }

    pub fn logits(&self, tokens: &[Token], cond: Option<&[f64]>) -> Vec<f64> {
        let h = self.hidden(tokens, cond);
        linear(&h, self.cfg.d_model, self.get("head.weight"), self.get("head.bias"))
    }

    /// Summed next-token loss over an example's target positions and the
    /// number of positions.
    pub fn lm_loss_sum(&self, ex: &Example, cond: Option<&[f64]>) -> (f64, usize) {
        let (input, targets, mask) = ex.teacher_forced();
        let logits = self.logits(&input, cond);
        let v = self.cfg.vocab;
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..input.len() {
            if mask[i] {
                total += xent(&logits[i * v..(i + 1) * v], targets[i] as usize);
                n += 1;
            }
        }
        (total, n)
    }

    /// Mean loss over every target position of the batch.
    pub fn lm_loss(&self, batch: &[Example]) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for ex in batch {
            let (a, b) = self.lm_loss_sum(ex, None);
            s += a;
            n += b;
        }
        s / n as f64
    }

    /// Pretraining loss with per-domain conditioning rows taken from `cond`.
    pub fn pretrain_loss(&self, batch: &[(Domain, Example)]) -> f64 {
        let d = self.cfg.d_model;
        let cond = self.get("cond");
        let (mut s, mut n) = (0.0, 0);
        for (dom, ex) in batch {
            let row = &cond[dom.index() * d..(dom.index() + 1) * d];
            let (a, b) = self.lm_loss_sum(ex, Some(row));
            s += a;
            n += b;
        }
        s / n as f64
    }

    /// Candidate scores for one subtask sequence.
    pub fn plan_scores(&self, tokens: &[Token]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let h = self.hidden(tokens, None);
        let t = tokens.len();
        let ind = self.get("indicators");
        let n = ind.len() / d;
        let zero = vec![0.0; d];
        let q = linear(ind, d, self.get("scorer.wq"), &zero);
        let k = linear(&h, d, self.get("scorer.wk"), &zero);
        let v = linear(&h, d, self.get("scorer.wv"), &zero);
        let w = self.get("scorer.head_w");
        let b = self.get("scorer.head_b")[0];
        let scale = 1.0 / (d as f64).sqrt();
        (0..n)
            .map(|i| {
                let mut s: Vec<f64> = (0..t).map(|j| scale * dot(&q[i * d..(i + 1) * d], &k[j * d..(j + 1) * d])).collect();
                softmax(&mut s);
                let mut c = vec![0.0; d];
                for j in 0..t {
                    for e in 0..d {
                        c[e] += s[j] * v[j * d + e];
                    }
                }
                dot(&c, w) + b
            })
            .collect()
    }

    /// Mean per-step planner loss over a batch.
    pub fn planner_loss(&self, batch: &[PlannerExample]) -> f64 {
        let (mut s, mut n) = (0.0, 0);
        for ex in batch {
            for (t, (carried, label)) in ex.steps.iter().enumerate() {
                let sub = Subtask::encode(&ex.query, t + 1, carried, self.cfg.max_seq).unwrap();
                s += xent(&self.plan_scores(&sub.tokens), *label);
                n += 1;
            }
        }
        s / n as f64
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x [rows, d_in] · w [d_in, d_out] + b`
pub fn linear(x: &[f64], d_in: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            let mut s = b[o];
            for i in 0..d_in {
                s += x[r * d_in + i] * w[i * d_out + o];
            }
            out[r * d_out + o] = s;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS as f64).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter_mut().map(|v| {
        *v = (*v - max).exp();
        *v
    }).sum();
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn xent(z: &[f64], y: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - z[y]
}

/// Causal multi-head attention over `[t, d]` rows.
pub fn causal_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let lo = h * hd;
        for i in 0..t {
            let mut s: Vec<f64> =
                (0..=i).map(|j| scale * dot(&q[i * d + lo..i * d + lo + hd], &k[j * d + lo..j * d + lo + hd])).collect();
            softmax(&mut s);
            for (j, p) in s.iter().enumerate() {
                for e in 0..hd {
                    out[i * d + lo + e] += p * v[j * d + lo + e];
                }
            }
        }
    }
    out
}

/// Central-difference gradient check of one named tensor.
///
/// Checks every coordinate when the tensor has at most `max_coords`
/// entries; otherwise a random subset weighted towards coordinates with a
/// nonzero analytic gradient, plus some zero ones. Returns the norm-wise
/// relative error `|g_a - g_fd| / |g_fd|` over the checked set. Tensors whose
/// true gradient vanishes identically (a key bias under softmax, a bias
/// shared by every score) have `|g_fd|` at roundoff level; for those the
/// absolute difference is returned scaled by `1 / ZERO_GRAD_ABS`, so the
/// same tolerance bounds it at `1e-4 * ZERO_GRAD_ABS`.
pub fn fd_check(
    model: &RefModel,
    name: &str,
    analytic: &Tensor,
    loss: &dyn Fn(&RefModel) -> f64,
    h: f64,
    max_coords: usize,
    rng: &mut Rng,
) -> (f64, usize) {
    let a = analytic.data();
    let n = a.len();
    assert_eq!(model.p[name].len(), n, "{name} size");
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut nonzero: Vec<usize> = (0..n).filter(|&i| a[i] != 0.0).collect();
        let mut zero: Vec<usize> = (0..n).filter(|&i| a[i] == 0.0).collect();
        rng.shuffle(&mut nonzero);
        rng.shuffle(&mut zero);
        let nz = nonzero.len().min(max_coords * 4 / 5);
        let z = zero.len().min(max_coords - nz);
        nonzero[..nz].iter().chain(&zero[..z]).copied().collect()
    };
    let mut m = model.clone();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for &i in &coords {
        let orig = m.p[name][i];
        m.p.get_mut(name).unwrap()[i] = orig + h;
        let lp = loss(&m);
        m.p.get_mut(name).unwrap()[i] = orig - h;
        let lm = loss(&m);
        m.p.get_mut(name).unwrap()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        num += (a[i] as f64 - fd).powi(2);
        den += fd * fd;
    }
    let (num, den) = (num.sqrt(), den.sqrt());
    let err = if den >= ZERO_GRAD { num / den } else { num / ZERO_GRAD_ABS };
    (err, coords.len())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { n_layers: 4, d_model: 16, n_heads: 2, d_ff: 32, vocab: 260, max_seq: 48 }
}

pub const FD_STEP: f64 = 1e-4;
/// Below this finite-difference norm a gradient is treated as identically zero.
pub const ZERO_GRAD: f64 = 1e-7;
pub const ZERO_GRAD_ABS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

fn random_batch(rng: &mut Rng, n: usize) -> Vec<(Domain, Example)> {
    (0..n).map(|_| ccoe::data::sample_mixed(rng, ccoe::data::Split::Train)).collect()
}

/// Worst norm-wise relative error over every expert tensor, for one seed.
/// Returns `(worst error, per-tensor errors)`.
pub fn expert_grad_check(seed: u64) -> (f64, Vec<(String, f64)>) {
    let cfg = tiny_config();
    let mut rng = Rng::new(seed);
    let mut backbone = BackboneModel::init(cfg, &mut rng).unwrap();
    backbone.freeze();
    let positions = match seed % 3 {
        0 => vec![0, 2],
        1 => vec![1, 3],
        _ => vec![3],
    };
    let mut expert = ExpertSubnetwork::init_random(7, "copy", positions, 8, &cfg, &mut rng).unwrap();
    // Non-trivial norm parameters so their gradients are exercised.
    for l in expert.layers_mut() {
        for v in l.norm.gain.data_mut() {
            *v += 0.3 * rng.normal();
        }
        for v in l.norm.bias.data_mut() {
            *v = 0.1 * rng.normal();
        }
        for v in l.up.bias.data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
    let batch: Vec<Example> = random_batch(&mut rng, 2).into_iter().map(|(_, e)| e).collect();
    let (grads, _) =
        ccoe::training::expert_batch_grads(&backbone, &expert, &batch, ccoe::par::Exec::Sequential).unwrap();
    let model = RefModel::with_expert(&backbone, &expert);
    let loss = |m: &RefModel| m.lm_loss(&batch);
    let mut out = Vec::new();
    for (name, g) in grads.named_params("") {
        let (err, _) = fd_check(&model, &format!("expert.{name}"), g, &loss, FD_STEP, 400, &mut rng);
        out.push((name, err));
    }
    (out.iter().map(|e| e.1).fold(0.0, f64::max), out)
}

/// A freshly initialised planner has near-identical indicator rows, so all
/// scores are almost equal and every gradient is a tiny residual at the f32
/// rounding floor. Distinct rows, a non-trivial head and non-trivial norm and
/// bias parameters (as in the expert check) give a well-conditioned loss.
pub fn condition_planner(planner: &mut PlannerExpert, rng: &mut Rng) {
    for (name, t) in planner.params_mut() {
        let v = t.data_mut();
        if name == "indicators" {
            v.iter_mut().for_each(|x| *x = rng.normal());
        } else if name == "scorer.head_w" {
            v.iter_mut().for_each(|x| *x = 0.5 * rng.normal());
        } else if name.ends_with("norm.gain") {
            v.iter_mut().for_each(|x| *x += 0.3 * rng.normal());
        } else if name.ends_with("norm.bias") || name.ends_with("up.bias") {
            v.iter_mut().for_each(|x| *x = 0.1 * rng.normal());
        }
    }
}

/// The same check for the planner expert, indicator rows and scorer.
pub fn planner_grad_check(seed: u64) -> (f64, Vec<(String, f64)>) {
    use ccoe::routing::PlanQuery;
    use ccoe::tokenizer::encode;
    let cfg = tiny_config();
    let mut rng = Rng::new(seed ^ 0xfeed);
    let mut backbone = BackboneModel::init(cfg, &mut rng).unwrap();
    backbone.freeze();
    let expert = ExpertSubnetwork::init_random(1000, "planner", vec![2, 3], 8, &cfg, &mut rng).unwrap();
    let mut planner = PlannerExpert::new(&backbone, expert, &[0, 1, 2], &mut rng).unwrap();
    condition_planner(&mut planner, &mut rng);
    let stop = planner.stop_index();
    let batch = vec![
        PlannerExample {
            query: PlanQuery { instruction: encode("rc"), payload: encode("ab1") },
            steps: vec![(vec![], 0), (encode("1ba"), 2), (encode("aB1"), stop)],
            n_experts: 2,
        },
        PlannerExample {
            query: PlanQuery { instruction: encode("u."), payload: encode("Fe3d") },
            steps: vec![(vec![], 1), (encode("FE3D"), stop)],
            n_experts: 1,
        },
    ];
    let (grads, _) =
        ccoe::training::planner_batch_grads(&backbone, &planner, &batch, ccoe::par::Exec::Sequential).unwrap();
    let model = RefModel::with_planner(&backbone, &planner);
    let loss = |m: &RefModel| m.planner_loss(&batch);
    let mut out = Vec::new();
    for (name, g) in grads.named_params("") {
        let (err, _) = fd_check(&model, &name, g, &loss, FD_STEP, 300, &mut rng);
        out.push((name, err));
    }
    (out.iter().map(|e| e.1).fold(0.0, f64::max), out)
}

/// A standalone backbone assembled by hand: the backbone checkpoint is
/// rewritten tensor by tensor, with each spliced FFN slot replaced by the
/// expert sublayer zero-padded to the backbone width, and then decoded.
pub fn standalone_oracle(backbone: &BackboneModel, expert: &ExpertSubnetwork) -> BackboneModel {
    use ccoe::checkpoint::{decode, encode_backbone, Component, Header};
    use sha2::{Digest, Sha256};

    let bytes = encode_backbone(backbone);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    let d_ff = backbone.config().d_ff;
    let d = backbone.config().d_model;
    let base: BTreeMap<String, &Tensor> = backbone.named_params("").into_iter().collect();
    let mut payload: Vec<u8> = Vec::with_capacity(header.payload_bytes);
    for entry in &header.tensors {
        let mut values: Vec<f32> = base[&entry.name].data().to_vec();
        for (j, &p) in expert.positions().iter().enumerate() {
            let pre = format!("layers.{p}.ffn.");
            let Some(field) = entry.name.strip_prefix(&pre) else { continue };
            let l = &expert.layers()[j];
            let w = l.width();
            values = match field {
                "norm.gain" => l.norm.gain.data().to_vec(),
                "norm.bias" => l.norm.bias.data().to_vec(),
                "down.bias" => l.down.bias.data().to_vec(),
                "up.weight" => {
                    let mut v = vec![0.0; d * d_ff];
                    for i in 0..d {
                        v[i * d_ff..i * d_ff + w].copy_from_slice(l.up.weight.row(i));
                    }
                    v
                }
                "up.bias" => {
                    let mut v = vec![0.0; d_ff];
                    v[..w].copy_from_slice(l.up.bias.data());
                    v
                }
                "down.weight" => {
                    let mut v = vec![0.0; d_ff * d];
                    v[..w * d].copy_from_slice(l.down.weight.data());
                    v
                }
                other => panic!("unexpected ffn tensor {other}"),
            };
        }
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    header.digest = hex::encode(Sha256::digest(&payload));
    let json = serde_json::to_vec(&header).unwrap();
    let mut out = bytes[..8].to_vec();
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    match decode(&out).unwrap() {
        (_, Component::Backbone(b)) => b,
        _ => panic!("not a backbone"),
    }
}

/// Worst absolute logit difference between the spliced forward pass and the
/// standalone oracle over `n` random token sequences.
pub fn splice_error(backbone: &BackboneModel, expert: &ExpertSubnetwork, n: usize, rng: &mut Rng) -> f32 {
    let oracle = standalone_oracle(backbone, expert);
    let cfg = backbone.config();
    let mut worst = 0.0f32;
    for _ in 0..n {
        let len = 1 + rng.below(cfg.max_seq.min(64));
        let tokens: Vec<Token> = (0..len).map(|_| rng.below(cfg.vocab) as Token).collect();
        let got = ccoe::model::forward_with_expert(backbone, expert, &tokens).unwrap();
        let want = ccoe::model::forward_base(&oracle, &tokens).unwrap();
        worst = worst.max(got.max_abs_diff(&want));
    }
    worst
}

/// Outcome of the gating brute-force comparison.
#[derive(Debug, Default)]
pub struct GatingCheck {
    pub matrices: usize,
    pub queries: usize,
    pub agreements: usize,
    pub zero_rows: usize,
    pub zero_row_fallbacks: usize,
}

/// Random binary matrices over random expert sets; each gated path is
/// compared with a direct scan of the raw 0/1 row.
pub fn gating_check(n_matrices: usize, seed: u64) -> GatingCheck {
    use ccoe::lifecycle::ExpertRegistry;
    use ccoe::routing::{run_expert, MappingMatrix};
    use ccoe::model::KvCache;

    let mut rng = Rng::new(seed);
    let mut backbone = BackboneModel::init(tiny_config(), &mut rng).unwrap();
    backbone.freeze();
    let mut out = GatingCheck::default();
    for _ in 0..n_matrices {
        let n_experts = 1 + rng.below(8);
        let mut ids: Vec<u32> = Vec::new();
        while ids.len() < n_experts {
            let id = rng.below(1000) as u32;
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let mut reg = ExpertRegistry::new(backbone.clone(), 0).unwrap();
        for &id in &ids {
            reg.push(ExpertSubnetwork::empty(id, "")).unwrap();
        }
        let n_domains = 1 + rng.below(6);
        let density = rng.uniform();
        let rows: Vec<(String, Vec<u8>)> = (0..n_domains)
            .map(|i| (format!("d{i}"), (0..n_experts).map(|_| (rng.uniform() < density) as u8).collect()))
            .collect();
        // Columns of a mapping matrix are kept in ascending id order.
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        let perm: Vec<usize> = sorted.iter().map(|id| ids.iter().position(|x| x == id).unwrap()).collect();
        let sorted_rows: Vec<(&str, Vec<u8>)> =
            rows.iter().map(|(d, r)| (d.as_str(), perm.iter().map(|&j| r[j]).collect())).collect();
        reg.set_mapping(MappingMatrix::from_rows(&sorted, &sorted_rows).unwrap()).unwrap();
        out.matrices += 1;
        for (d, bits) in &rows {
            let mut want: Vec<u32> = (0..n_experts).filter(|&j| bits[j] == 1).map(|j| ids[j]).collect();
            want.sort_unstable();
            let path = reg.gate(&[(d.clone(), vec![])]).unwrap().remove(0);
            out.queries += 1;
            out.agreements += (path.expert_ids() == want) as usize;
            if want.is_empty() {
                out.zero_rows += 1;
                let input = ccoe::tokenizer::encode("ab1");
                let answers = reg.answer(d, &input).unwrap();
                let base = run_expert(reg.backbone(), None, &input, &mut KvCache::new(reg.backbone())).unwrap().0;
                let ok = answers.len() == 1 && answers[0].expert.is_none() && answers[0].output == base;
                out.zero_row_fallbacks += ok as usize;
            }
        }
    }
    out
}

/// Backbone configuration whose parameter count makes 15% an integer number
/// of expert parameters: 317,700 backbone parameters and 47,655 per expert.
pub fn exact_cap_config() -> ModelConfig {
    ModelConfig { max_seq: 254, ..ModelConfig::default() }
}

/// An expert of exactly 15% of an [`exact_cap_config`] backbone: seven
/// sublayers with 359 hidden units in total.
pub fn exact_cap_expert(id: u32, domain: &str, rng: &mut Rng) -> ExpertSubnetwork {
    use ccoe::model::FeedForward;
    let cfg = exact_cap_config();
    let widths = [52, 51, 51, 51, 51, 51, 52];
    let layers = widths.iter().map(|&w| FeedForward::new(cfg.d_model, w, 0.02, 0.005, rng)).collect();
    ExpertSubnetwork::new(id, domain, (0..7).collect(), layers).unwrap()
}
