//! Decoder-only transformer backbone and pluggable FFN experts.
//!
//! Blocks are pre-norm: `x + attn(ln(x))` then `x + ffn(x)`, where the FFN
//! sublayer owns its own norm. An expert is a set of FFN sublayers plus the
//! layer indices they replace; attention is always shared with the backbone.

mod backward;
mod forward;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub(crate) use backward::{backward, GradSink};
pub use forward::{
    forward_base, forward_hidden, forward_with_expert, greedy_decode, greedy_decode_until, KvCache,
};
pub(crate) use forward::{decode_with, forward_traced, head_logits, Stack};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total decoder layers.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab: crate::tokenizer::VOCAB_SIZE,
            max_seq: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!("need at least 2 layers, got {}", self.n_layers)));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be at least 2, got {}", self.vocab)));
        }
        if self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("d_ff and max_seq must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of a backbone with this configuration.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let norms = 2 * (2 * d);
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        self.vocab * d + self.max_seq * d + self.n_layers * (attn + norms + ffn) + 2 * d + d * self.vocab + self.vocab
    }

    /// Parameters of one expert sublayer of the given hidden width.
    pub fn expert_layer_param_count(&self, width: usize) -> usize {
        2 * self.d_model + self.d_model * width + width + width * self.d_model + self.d_model
    }
}

/// Walks named tensors in a fixed canonical order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Resident size at four bytes per parameter.
    fn param_bytes(&self) -> usize {
        4 * self.param_count()
    }

    /// SHA-256 over all tensors as little-endian f32, in canonical order.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |_, t| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub(crate) trait ParamsMut {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut |n, t| out.push((n, t)));
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, std: f32, rng: &mut Rng) -> Self {
        Self { weight: Tensor::randn(&[d_in, d_out], std, rng), bias: Tensor::zeros(&[d_out]) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `out[rows, d_out] = x[rows, d_in] W + b`
    pub fn forward_rows(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        let (i, o) = (self.d_in(), self.d_out());
        crate::tensor::gemm(x, self.weight.data(), out, rows, i, o);
        for r in 0..rows {
            crate::tensor::axpy(1.0, self.bias.data(), &mut out[r * o..(r + 1) * o]);
        }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: self.weight.zeros_like(), bias: self.bias.zeros_like() }
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

impl ParamsMut for Linear {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let Linear { weight, bias } = self;
        f(join(prefix, "weight"), weight);
        f(join(prefix, "bias"), bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gain: Tensor::full(&[d], 1.0), bias: Tensor::zeros(&[d]) }
    }

    fn zeros_like(&self) -> Self {
        Self { gain: self.gain.zeros_like(), bias: self.bias.zeros_like() }
    }
}

impl Params for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
}

impl ParamsMut for LayerNorm {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let LayerNorm { gain, bias } = self;
        f(join(prefix, "gain"), gain);
        f(join(prefix, "bias"), bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Attention {
    fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
        }
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
}

impl ParamsMut for Attention {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let Attention { wq, wk, wv, wo } = self;
        wq.visit_mut(&join(prefix, "wq"), f);
        wk.visit_mut(&join(prefix, "wk"), f);
        wv.visit_mut(&join(prefix, "wv"), f);
        wo.visit_mut(&join(prefix, "wo"), f);
    }
}

/// Norm, up projection, GELU, down projection. Backbone and expert FFN
/// sublayers share this type, so either can fill any FFN slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(d_model: usize, width: usize, std: f32, down_std: f32, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(d_model),
            up: Linear::new(d_model, width, std, rng),
            down: Linear::new(width, d_model, down_std, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.up.d_out()
    }

    pub fn d_model(&self) -> usize {
        self.up.d_in()
    }

    /// Keeps the `width` hidden units with the largest `|up col| * |down row|`,
    /// in their original order, and copies the norm and output bias.
    pub fn pruned(&self, width: usize) -> Self {
        let d = self.d_model();
        let w = self.width();
        let width = width.min(w);
        let mut score: Vec<(f32, usize)> = (0..w)
            .map(|j| {
                let up: f32 = (0..d).map(|i| self.up.weight.at(i, j).powi(2)).sum::<f32>().sqrt();
                let down: f32 = self.down.weight.row(j).iter().map(|v| v * v).sum::<f32>().sqrt();
                (up * down, j)
            })
            .collect();
        score.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = score[..width].iter().map(|s| s.1).collect();
        keep.sort_unstable();

        let mut up_w = Vec::with_capacity(d * width);
        for i in 0..d {
            for &j in &keep {
                up_w.push(self.up.weight.at(i, j));
            }
        }
        let up_b = keep.iter().map(|&j| self.up.bias.data()[j]).collect();
        let mut down_w = Vec::with_capacity(width * d);
        for &j in &keep {
            down_w.extend_from_slice(self.down.weight.row(j));
        }
        Self {
            norm: self.norm.clone(),
            up: Linear {
                weight: Tensor::new(vec![d, width], up_w).unwrap(),
                bias: Tensor::new(vec![width], up_b).unwrap(),
            },
            down: Linear {
                weight: Tensor::new(vec![width, d], down_w).unwrap(),
                bias: self.down.bias.clone(),
            },
        }
    }

    /// Widens to `width` hidden units with zero weights in the new units.
    /// The padded units contribute exact zeros, so outputs are unchanged.
    pub fn zero_padded(&self, width: usize) -> Self {
        let d = self.d_model();
        let w = self.width();
        if width <= w {
            return self.clone();
        }
        let mut up = Tensor::zeros(&[d, width]);
        for i in 0..d {
            up.row_mut(i)[..w].copy_from_slice(self.up.weight.row(i));
        }
        let mut up_b = Tensor::zeros(&[width]);
        up_b.data_mut()[..w].copy_from_slice(self.up.bias.data());
        let mut down = Tensor::zeros(&[width, d]);
        down.data_mut()[..w * d].copy_from_slice(self.down.weight.data());
        Self {
            norm: self.norm.clone(),
            up: Linear { weight: up, bias: up_b },
            down: Linear { weight: down, bias: self.down.bias.clone() },
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self { norm: self.norm.zeros_like(), up: self.up.zeros_like(), down: self.down.zeros_like() }
    }
}

impl Params for FeedForward {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
}

impl ParamsMut for FeedForward {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let FeedForward { norm, up, down } = self;
        norm.visit_mut(&join(prefix, "norm"), f);
        up.visit_mut(&join(prefix, "up"), f);
        down.visit_mut(&join(prefix, "down"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn zeros_like(&self) -> Self {
        Self {
            attn_norm: self.attn_norm.zeros_like(),
            attn: self.attn.zeros_like(),
            ffn: self.ffn.zeros_like(),
        }
    }
}

impl Params for DecoderLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
}

impl ParamsMut for DecoderLayer {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let DecoderLayer { attn_norm, attn, ffn } = self;
        attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        attn.visit_mut(&join(prefix, "attn"), f);
        ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// The shared backbone. Parameters are read-only once [`freeze`](Self::freeze)
/// has been called.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: ModelConfig,
    embedding: Tensor,
    pos_embedding: Tensor,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    head: Linear,
    frozen: bool,
}

impl BackboneModel {
    /// Normal init with std 0.02, residual output projections scaled by
    /// `1/sqrt(2L)`. The model starts unfrozen.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let embedding = Tensor::randn(&[config.vocab, d], INIT_STD, rng);
        let pos_embedding = Tensor::randn(&[config.max_seq, d], INIT_STD, rng);
        let layers = (0..config.n_layers)
            .map(|_| DecoderLayer {
                attn_norm: LayerNorm::new(d),
                attn: Attention {
                    wq: Linear::new(d, d, INIT_STD, rng),
                    wk: Linear::new(d, d, INIT_STD, rng),
                    wv: Linear::new(d, d, INIT_STD, rng),
                    wo: Linear::new(d, d, resid_std, rng),
                },
                ffn: FeedForward::new(d, config.d_ff, INIT_STD, resid_std, rng),
            })
            .collect();
        let head = Linear::new(d, config.vocab, INIT_STD, rng);
        Ok(Self {
            config,
            embedding,
            pos_embedding,
            layers,
            final_norm: LayerNorm::new(d),
            head,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    pub fn pos_embedding(&self) -> &Tensor {
        &self.pos_embedding
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn final_norm(&self) -> &LayerNorm {
        &self.final_norm
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Permanently marks the parameters read-only.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mutable parameter access, refused once frozen.
    pub fn params_mut(&mut self) -> Result<Vec<(String, &mut Tensor)>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(ParamsMut::named_params_mut(self, ""))
    }

    /// Copy of this backbone with the expert's sublayers written into the
    /// FFN slots, zero-padded to the backbone width. Produces a standalone
    /// model of the same size whose outputs equal the spliced composite.
    pub fn materialize_expert(&self, expert: &ExpertSubnetwork) -> Result<BackboneModel> {
        expert.validate_for(&self.config)?;
        let mut m = self.clone();
        for (p, layer) in expert.positions().iter().zip(expert.layers()) {
            m.layers[*p].ffn = layer.zero_padded(self.config.d_ff);
        }
        Ok(m)
    }

    /// A gradient accumulator shaped like this model.
    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            embedding: self.embedding.zeros_like(),
            pos_embedding: self.pos_embedding.zeros_like(),
            layers: self.layers.iter().map(DecoderLayer::zeros_like).collect(),
            final_norm: self.final_norm.zeros_like(),
            head: self.head.zeros_like(),
            frozen: false,
        }
    }

    pub(crate) fn layers_mut_unchecked(&mut self) -> &mut [DecoderLayer] {
        &mut self.layers
    }

    pub(crate) fn parts_mut_unchecked(
        &mut self,
    ) -> (&mut Tensor, &mut Tensor, &mut [DecoderLayer], &mut LayerNorm, &mut Linear) {
        (
            &mut self.embedding,
            &mut self.pos_embedding,
            &mut self.layers,
            &mut self.final_norm,
            &mut self.head,
        )
    }

    /// Rebuilds a model from tensors in canonical order.
    pub(crate) fn from_named(
        config: ModelConfig,
        frozen: bool,
        take: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut m = Self::init(config, &mut Rng::new(0))?;
        let mut err = None;
        m.visit_mut("", &mut |name, t| {
            if err.is_some() {
                return;
            }
            match take(&name, t.shape()) {
                Ok(v) => *t = v,
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        m.frozen = frozen;
        Ok(m)
    }
}

impl Params for BackboneModel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "embedding"), &self.embedding);
        f(join(prefix, "pos_embedding"), &self.pos_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

impl ParamsMut for BackboneModel {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        let BackboneModel { embedding, pos_embedding, layers, final_norm, head, .. } = self;
        f(join(prefix, "embedding"), embedding);
        f(join(prefix, "pos_embedding"), pos_embedding);
        for (i, l) in layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        final_norm.visit_mut(&join(prefix, "final_norm"), f);
        head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A domain expert: FFN sublayers and the backbone layers they replace.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSubnetwork {
    pub id: u32,
    pub domain: String,
    positions: Vec<usize>,
    layers: Vec<FeedForward>,
}

impl ExpertSubnetwork {
    pub fn new(id: u32, domain: impl Into<String>, positions: Vec<usize>, layers: Vec<FeedForward>) -> Result<Self> {
        if positions.len() != layers.len() {
            return Err(Error::RoutingConfig(format!(
                "{} positions for {} layers",
                positions.len(),
                layers.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::RoutingConfig(format!(
                "positions must be strictly increasing, got {positions:?}"
            )));
        }
        if let Some(first) = layers.first() {
            if layers.iter().any(|l| l.d_model() != first.d_model()) {
                return Err(Error::Dimension("expert layers disagree on d_model".into()));
            }
        }
        Ok(Self { id, domain: domain.into(), positions, layers })
    }

    /// An expert with no layers; splicing it changes nothing.
    pub fn empty(id: u32, domain: impl Into<String>) -> Self {
        Self { id, domain: domain.into(), positions: Vec::new(), layers: Vec::new() }
    }

    /// Fresh random sublayers of the given width.
    pub fn init_random(
        id: u32,
        domain: impl Into<String>,
        positions: Vec<usize>,
        width: usize,
        config: &ModelConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let down_std = INIT_STD / (2.0 * config.n_layers as f32).sqrt();
        let layers = positions
            .iter()
            .map(|_| FeedForward::new(config.d_model, width, INIT_STD, down_std, rng))
            .collect();
        let e = Self::new(id, domain, positions, layers)?;
        e.validate_for(config)?;
        Ok(e)
    }

    /// Sublayers pruned from the backbone FFNs they replace.
    pub fn pruned_from(
        backbone: &BackboneModel,
        id: u32,
        domain: impl Into<String>,
        positions: Vec<usize>,
        width: usize,
    ) -> Result<Self> {
        check_positions(&positions, backbone.config.n_layers)?;
        let layers = positions.iter().map(|&p| backbone.layers[p].ffn.pruned(width)).collect();
        Self::new(id, domain, positions, layers)
    }

    /// Exact copies of the backbone FFN sublayers at `positions`.
    pub fn copied_from(
        backbone: &BackboneModel,
        id: u32,
        domain: impl Into<String>,
        positions: Vec<usize>,
    ) -> Result<Self> {
        check_positions(&positions, backbone.config.n_layers)?;
        let layers = positions.iter().map(|&p| backbone.layers[p].ffn.clone()).collect();
        Self::new(id, domain, positions, layers)
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layers(&self) -> &[FeedForward] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FeedForward] {
        &mut self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// The sublayer replacing backbone layer `p`, if any.
    pub fn layer_at(&self, p: usize) -> Option<&FeedForward> {
        self.positions.iter().position(|&q| q == p).map(|i| &self.layers[i])
    }

    /// Mutable access to every tensor. Experts are never frozen; isolation
    /// comes from training on a deep copy.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        ParamsMut::named_params_mut(self, "")
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<()> {
        check_positions(&self.positions, config.n_layers)?;
        if self.layers.iter().any(|l| l.d_model() != config.d_model) {
            return Err(Error::Dimension(format!(
                "expert {} width does not match d_model {}",
                self.id, config.d_model
            )));
        }
        Ok(())
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            id: self.id,
            domain: self.domain.clone(),
            positions: self.positions.clone(),
            layers: self.layers.iter().map(FeedForward::zeros_like).collect(),
        }
    }
}

impl Params for ExpertSubnetwork {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

impl ParamsMut for ExpertSubnetwork {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

pub(crate) fn check_positions(positions: &[usize], n_layers: usize) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::RoutingConfig(format!(
            "positions must be strictly increasing, got {positions:?}"
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= n_layers) {
        return Err(Error::RoutingConfig(format!(
            "position {p} out of range for {n_layers} layers"
        )));
    }
    Ok(())
}
