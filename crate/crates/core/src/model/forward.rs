use crate::error::{Error, Result};
use crate::model::{BackboneModel, ExpertSubnetwork, FeedForward, LN_EPS};
use crate::tensor::{argmax, attend_row, gelu, layer_norm_row, Tensor};
use crate::tokenizer::{Token, EOS};

/// Resolved layer stack: the backbone with some FFN slots replaced.
pub(crate) struct Stack<'a> {
    pub model: &'a BackboneModel,
    pub ffns: Vec<&'a FeedForward>,
    /// For each backbone layer, the index of the expert sublayer filling it.
    pub spliced: Vec<Option<usize>>,
    /// A vector added to every position after the given layer.
    pub cond: Option<(usize, &'a [f32])>,
}

impl<'a> Stack<'a> {
    pub fn new(model: &'a BackboneModel, expert: Option<&'a ExpertSubnetwork>) -> Result<Self> {
        let n = model.config().n_layers;
        let mut ffns: Vec<&FeedForward> = model.layers().iter().map(|l| &l.ffn).collect();
        let mut spliced = vec![None; n];
        if let Some(e) = expert {
            e.validate_for(model.config())?;
            for (j, (&p, layer)) in e.positions().iter().zip(e.layers()).enumerate() {
                ffns[p] = layer;
                spliced[p] = Some(j);
            }
        }
        Ok(Self { model, ffns, spliced, cond: None })
    }

    pub fn with_cond(mut self, layer: usize, vector: &'a [f32]) -> Self {
        self.cond = Some((layer, vector));
        self
    }
}

/// Per-layer key/value rows for incremental decoding. Owned by one decode.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    d_model: usize,
}

impl KvCache {
    pub fn new(model: &BackboneModel) -> Self {
        let c = model.config();
        Self {
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            len: 0,
            d_model: c.d_model,
        }
    }

    /// Number of positions cached so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        for k in &mut self.keys {
            k.clear();
        }
        for v in &mut self.values {
            v.clear();
        }
        self.len = 0;
    }

    fn check(&self, model: &BackboneModel) -> Result<()> {
        let c = model.config();
        if self.keys.len() != c.n_layers || self.d_model != c.d_model {
            return Err(Error::Dimension("kv cache does not match model shape".into()));
        }
        Ok(())
    }
}

/// Activations saved for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct LayerTrace {
    pub x_in: Vec<f32>,
    pub ln1: Vec<(f32, f32)>,
    pub h1: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// `[head][query][key]`, zero above the diagonal.
    pub probs: Vec<f32>,
    pub ctx: Vec<f32>,
    pub x_mid: Vec<f32>,
    pub ln2: Vec<(f32, f32)>,
    pub h2: Vec<f32>,
    pub u: Vec<f32>,
    pub g: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Trace {
    pub tokens: Vec<Token>,
    pub layers: Vec<LayerTrace>,
    pub x_final: Vec<f32>,
    pub lnf: Vec<(f32, f32)>,
    /// Final-norm output, the input of the output head.
    pub hidden: Vec<f32>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

fn ffn_forward(
    ffn: &FeedForward,
    x: &[f32],
    rows: usize,
    mut trace: Option<&mut LayerTrace>,
) -> Vec<f32> {
    let d = ffn.d_model();
    let w = ffn.width();
    let mut h = vec![0.0; rows * d];
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        stats.push(layer_norm_row(
            &x[r * d..(r + 1) * d],
            ffn.norm.gain.data(),
            ffn.norm.bias.data(),
            LN_EPS,
            &mut h[r * d..(r + 1) * d],
        ));
    }
    let mut u = vec![0.0; rows * w];
    ffn.up.forward_rows(&h, rows, &mut u);
    let g: Vec<f32> = u.iter().map(|&v| gelu(v)).collect();
    let mut f = vec![0.0; rows * d];
    ffn.down.forward_rows(&g, rows, &mut f);
    if let Some(t) = trace.as_deref_mut() {
        t.ln2 = stats;
        t.h2 = h;
        t.u = u;
        t.g = g;
    }
    f
}

/// Runs `tokens` at positions `start..` through the stack, appending keys and
/// values to `cache`. Returns final-norm hidden rows.
fn run(
    stack: &Stack,
    tokens: &[Token],
    cache: &mut KvCache,
    mut trace: Option<&mut Trace>,
) -> Result<Vec<f32>> {
    let model = stack.model;
    let cfg = model.config();
    let d = cfg.d_model;
    let start = cache.len;
    let rows = tokens.len();
    if rows == 0 {
        return Err(Error::Config("empty token sequence".into()));
    }
    if start + rows > cfg.max_seq {
        return Err(Error::SequenceLength { len: start + rows, max: cfg.max_seq });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::Config(format!("token {t} outside vocabulary of {}", cfg.vocab)));
    }
    cache.check(model)?;

    let mut x = vec![0.0f32; rows * d];
    for (r, &tok) in tokens.iter().enumerate() {
        let xr = &mut x[r * d..(r + 1) * d];
        let e = model.embedding().row(tok as usize);
        let p = model.pos_embedding().row(start + r);
        for c in 0..d {
            xr[c] = e[c] + p[c];
        }
    }

    let heads = cfg.n_heads;
    let mut scratch = Vec::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut lt = trace.as_ref().map(|_| LayerTrace::default());
        if let Some(t) = lt.as_mut() {
            t.x_in = x.clone();
        }

        let mut h = vec![0.0; rows * d];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            stats.push(layer_norm_row(
                &x[r * d..(r + 1) * d],
                layer.attn_norm.gain.data(),
                layer.attn_norm.bias.data(),
                LN_EPS,
                &mut h[r * d..(r + 1) * d],
            ));
        }
        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        layer.attn.wq.forward_rows(&h, rows, &mut q);
        layer.attn.wk.forward_rows(&h, rows, &mut k);
        layer.attn.wv.forward_rows(&h, rows, &mut v);
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);

        let mut ctx = vec![0.0; rows * d];
        let mut probs = if lt.is_some() { vec![0.0; heads * rows * rows] } else { Vec::new() };
        let mut row_probs = Vec::new();
        for r in 0..rows {
            let n_keys = start + r + 1;
            let want = lt.is_some();
            if want {
                row_probs.resize(heads * n_keys, 0.0);
            }
            attend_row(
                &q[r * d..(r + 1) * d],
                &cache.keys[l][..n_keys * d],
                &cache.values[l][..n_keys * d],
                n_keys,
                heads,
                &mut ctx[r * d..(r + 1) * d],
                &mut scratch,
                if want { Some(&mut row_probs[..]) } else { None },
            );
            if want {
                for hh in 0..heads {
                    let dst = hh * rows * rows + r * rows;
                    probs[dst..dst + n_keys].copy_from_slice(&row_probs[hh * n_keys..(hh + 1) * n_keys]);
                }
            }
        }
        let mut a = vec![0.0; rows * d];
        layer.attn.wo.forward_rows(&ctx, rows, &mut a);
        for (xi, ai) in x.iter_mut().zip(&a) {
            *xi += ai;
        }
        if let Some(t) = lt.as_mut() {
            t.ln1 = stats;
            t.h1 = h;
            t.q = q;
            t.k = k;
            t.v = v;
            t.probs = probs;
            t.ctx = ctx;
            t.x_mid = x.clone();
        }

        let f = ffn_forward(stack.ffns[l], &x, rows, lt.as_mut());
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
        if let Some((cl, vec)) = stack.cond {
            if cl == l {
                for r in 0..rows {
                    for c in 0..d {
                        x[r * d + c] += vec[c];
                    }
                }
            }
        }
        if let (Some(t), Some(lt)) = (trace.as_deref_mut(), lt) {
            t.layers.push(lt);
        }
    }
    cache.len += rows;

    let mut hidden = vec![0.0; rows * d];
    let mut stats = Vec::with_capacity(rows);
    let fnorm = model.final_norm();
    for r in 0..rows {
        stats.push(layer_norm_row(
            &x[r * d..(r + 1) * d],
            fnorm.gain.data(),
            fnorm.bias.data(),
            LN_EPS,
            &mut hidden[r * d..(r + 1) * d],
        ));
    }
    if let Some(t) = trace {
        t.tokens = tokens.to_vec();
        t.x_final = x;
        t.lnf = stats;
        t.hidden = hidden.clone();
    }
    Ok(hidden)
}

pub(crate) fn head_logits(model: &BackboneModel, hidden: &[f32]) -> Vec<f32> {
    let d = model.config().d_model;
    let rows = hidden.len() / d;
    let mut out = vec![0.0; rows * model.config().vocab];
    model.head().forward_rows(hidden, rows, &mut out);
    out
}

pub(crate) fn forward_traced(stack: &Stack, tokens: &[Token]) -> Result<Trace> {
    let mut cache = KvCache::new(stack.model);
    let mut trace = Trace::default();
    run(stack, tokens, &mut cache, Some(&mut trace))?;
    Ok(trace)
}

fn logits_tensor(model: &BackboneModel, hidden: &[f32], rows: usize) -> Tensor {
    Tensor::new(vec![rows, model.config().vocab], head_logits(model, hidden)).unwrap()
}

/// Next-token logits `[t, vocab]` of the backbone alone.
pub fn forward_base(model: &BackboneModel, tokens: &[Token]) -> Result<Tensor> {
    let stack = Stack::new(model, None)?;
    let hidden = run(&stack, tokens, &mut KvCache::new(model), None)?;
    Ok(logits_tensor(model, &hidden, tokens.len()))
}

/// Logits with the expert's sublayers replacing the backbone FFNs at its positions.
pub fn forward_with_expert(model: &BackboneModel, expert: &ExpertSubnetwork, tokens: &[Token]) -> Result<Tensor> {
    let stack = Stack::new(model, Some(expert))?;
    let hidden = run(&stack, tokens, &mut KvCache::new(model), None)?;
    Ok(logits_tensor(model, &hidden, tokens.len()))
}

/// Final-layer hidden states `[t, d_model]`, taken after the final norm and
/// before the output head.
pub fn forward_hidden(model: &BackboneModel, expert: Option<&ExpertSubnetwork>, tokens: &[Token]) -> Result<Tensor> {
    let stack = Stack::new(model, expert)?;
    let hidden = run(&stack, tokens, &mut KvCache::new(model), None)?;
    Tensor::new(vec![tokens.len(), model.config().d_model], hidden)
}

pub(crate) fn decode_with(
    stack: &Stack,
    prompt: &[Token],
    max_new: usize,
    stop: Option<Token>,
    cache: Option<&mut KvCache>,
) -> Result<Vec<Token>> {
    let model = stack.model;
    let max_seq = model.config().max_seq;
    if prompt.is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    // The last generated token is never fed back.
    let needed = prompt.len() + max_new - 1;
    if needed > max_seq {
        return Err(Error::SequenceLength { len: needed, max: max_seq });
    }
    let vocab = model.config().vocab;
    let mut out = Vec::with_capacity(max_new);
    match cache {
        Some(cache) => {
            cache.clear();
            let hidden = run(stack, prompt, cache, None)?;
            let d = model.config().d_model;
            let mut last = hidden[hidden.len() - d..].to_vec();
            loop {
                let logits = head_logits(model, &last);
                let next = argmax(&logits[..vocab]) as Token;
                out.push(next);
                if out.len() == max_new || Some(next) == stop {
                    break;
                }
                last = run(stack, &[next], cache, None)?;
            }
        }
        None => {
            let mut seq = prompt.to_vec();
            loop {
                let hidden = run(stack, &seq, &mut KvCache::new(model), None)?;
                let d = model.config().d_model;
                let logits = head_logits(model, &hidden[hidden.len() - d..]);
                let next = argmax(&logits) as Token;
                out.push(next);
                if out.len() == max_new || Some(next) == stop {
                    break;
                }
                seq.push(next);
            }
        }
    }
    Ok(out)
}

/// Greedy argmax decoding; ties go to the lowest token id.
///
/// Generates up to `max_new` tokens and stops early after emitting `<eos>`
/// (which is included in the result). With a cache, the prompt is prefilled
/// once and each step feeds only the newest token; without one, every step
/// recomputes the full sequence. Both paths yield identical tokens.
pub fn greedy_decode(
    model: &BackboneModel,
    expert: Option<&ExpertSubnetwork>,
    prompt: &[Token],
    max_new: usize,
    cache: Option<&mut KvCache>,
) -> Result<Vec<Token>> {
    let stack = Stack::new(model, expert)?;
    decode_with(&stack, prompt, max_new, Some(EOS), cache)
}

/// Like [`greedy_decode`] but with an explicit stop token, or none at all.
pub fn greedy_decode_until(
    model: &BackboneModel,
    expert: Option<&ExpertSubnetwork>,
    prompt: &[Token],
    max_new: usize,
    stop: Option<Token>,
    cache: Option<&mut KvCache>,
) -> Result<Vec<Token>> {
    let stack = Stack::new(model, expert)?;
    decode_with(&stack, prompt, max_new, stop, cache)
}
