//! Hand-written reverse pass over a recorded [`Trace`].
//!
//! Gradients flow only into the sinks that are present. Without a backbone
//! sink no backbone weight gradient is ever formed, and the pass stops at the
//! lowest layer that still has a trainable parameter below it.

use crate::model::forward::{Stack, Trace};
use crate::model::{BackboneModel, ExpertSubnetwork, FeedForward, LayerNorm, Linear};
use crate::tensor::{axpy, dot, gelu_grad, gemm_a_bt, gemm_at_b_acc};

/// Where gradients accumulate. Shapes mirror the parameters they belong to.
#[derive(Default)]
pub(crate) struct GradSink<'a> {
    pub backbone: Option<&'a mut BackboneModel>,
    pub expert: Option<&'a mut ExpertSubnetwork>,
    /// Gradient of the conditioning vector, when the stack has one.
    pub cond: Option<&'a mut [f32]>,
}

/// `dx = dy W^T`, plus weight and bias gradients when `grad` is given.
fn linear_backward(lin: &Linear, x: &[f32], dy: &[f32], rows: usize, grad: Option<&mut Linear>) -> Vec<f32> {
    let (i, o) = (lin.d_in(), lin.d_out());
    if let Some(g) = grad {
        gemm_at_b_acc(x, dy, g.weight.data_mut(), rows, i, o);
        let gb = g.bias.data_mut();
        for r in 0..rows {
            axpy(1.0, &dy[r * o..(r + 1) * o], gb);
        }
    }
    let mut dx = vec![0.0; rows * i];
    gemm_a_bt(dy, lin.weight.data(), &mut dx, rows, o, i);
    dx
}

/// Adds the input gradient of a row-wise layer norm into `dx`.
fn layer_norm_backward(
    norm: &LayerNorm,
    x: &[f32],
    stats: &[(f32, f32)],
    dy: &[f32],
    dx: &mut [f32],
    mut grad: Option<&mut LayerNorm>,
) {
    let n = norm.gain.numel();
    let gain = norm.gain.data();
    let mut xhat = vec![0.0; n];
    let mut dyh = vec![0.0; n];
    for (r, &(mean, rstd)) in stats.iter().enumerate() {
        let xr = &x[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        for c in 0..n {
            xhat[c] = (xr[c] - mean) * rstd;
            dyh[c] = dyr[c] * gain[c];
        }
        let m1 = dyh.iter().sum::<f32>() / n as f32;
        let m2 = dot(&dyh, &xhat) / n as f32;
        let dxr = &mut dx[r * n..(r + 1) * n];
        for c in 0..n {
            dxr[c] += rstd * (dyh[c] - m1 - xhat[c] * m2);
        }
        if let Some(g) = grad.as_deref_mut() {
            let gg = g.gain.data_mut();
            for c in 0..n {
                gg[c] += dyr[c] * xhat[c];
            }
            axpy(1.0, dyr, g.bias.data_mut());
        }
    }
}

/// Gradients of an FFN sublayer. Returns the contribution to `dx_mid`.
fn ffn_backward(
    ffn: &FeedForward,
    lt: &crate::model::forward::LayerTrace,
    df: &[f32],
    rows: usize,
    mut grad: Option<&mut FeedForward>,
) -> Vec<f32> {
    let dg = linear_backward(&ffn.down, &lt.g, df, rows, grad.as_deref_mut().map(|g| &mut g.down));
    let du: Vec<f32> = dg.iter().zip(&lt.u).map(|(&a, &u)| a * gelu_grad(u)).collect();
    let dh = linear_backward(&ffn.up, &lt.h2, &du, rows, grad.as_deref_mut().map(|g| &mut g.up));
    let mut dx = vec![0.0; df.len()];
    layer_norm_backward(&ffn.norm, &lt.x_mid, &lt.ln2, &dh, &mut dx, grad.map(|g| &mut g.norm));
    dx
}

/// Backpropagates `d_hidden` (gradient of the final-norm output).
pub(crate) fn backward(stack: &Stack, trace: &Trace, d_hidden: &[f32], sink: &mut GradSink) {
    let model = stack.model;
    let cfg = model.config();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let t = trace.len();
    let n_layers = cfg.n_layers;

    let mut stop = n_layers;
    if sink.backbone.is_some() {
        stop = 0;
    }
    if sink.expert.is_some() {
        if let Some(&p) = sink.expert.as_ref().unwrap().positions().first() {
            stop = stop.min(p);
        }
    }
    let cond_layer = stack.cond.map(|(l, _)| l);
    if sink.cond.is_some() {
        if let Some(c) = cond_layer {
            stop = stop.min(c + 1);
        }
    }

    let mut dx = vec![0.0; t * d];
    layer_norm_backward(
        model.final_norm(),
        &trace.x_final,
        &trace.lnf,
        d_hidden,
        &mut dx,
        sink.backbone.as_deref_mut().map(|b| b.parts_mut_unchecked().3),
    );

    let add_cond = |dx: &[f32], sink: &mut GradSink| {
        if let Some(gc) = sink.cond.as_deref_mut() {
            for r in 0..t {
                axpy(1.0, &dx[r * d..(r + 1) * d], gc);
            }
        }
    };
    if cond_layer == Some(n_layers - 1) {
        add_cond(&dx, sink);
    }

    for l in (stop..n_layers).rev() {
        let lt = &trace.layers[l];
        let layer = &model.layers()[l];

        // FFN sublayer: x_out = x_mid + ffn(x_mid).
        let ffn_grad: Option<&mut FeedForward> = match stack.spliced[l] {
            Some(j) => sink.expert.as_deref_mut().map(|e| &mut e.layers_mut()[j]),
            None => sink.backbone.as_deref_mut().map(|b| &mut b.layers_mut_unchecked()[l].ffn),
        };
        let dmid_ffn = ffn_backward(stack.ffns[l], lt, &dx, t, ffn_grad);
        for (a, b) in dx.iter_mut().zip(&dmid_ffn) {
            *a += b;
        }

        // Attention sublayer: x_mid = x_in + wo(attn(q, k, v)).
        let mut bg = sink.backbone.as_deref_mut().map(|b| &mut b.layers_mut_unchecked()[l]);
        let dctx = linear_backward(&layer.attn.wo, &lt.ctx, &dx, t, bg.as_deref_mut().map(|g| &mut g.attn.wo));
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..heads {
            let lo = h * hd;
            for i in 0..t {
                let p = &lt.probs[h * t * t + i * t..h * t * t + i * t + i + 1];
                let dout = &dctx[i * d + lo..i * d + lo + hd];
                for j in 0..=i {
                    dp[j] = dot(dout, &lt.v[j * d + lo..j * d + lo + hd]);
                    axpy(p[j], dout, &mut dv[j * d + lo..j * d + lo + hd]);
                }
                let s: f32 = (0..=i).map(|j| p[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds != 0.0 {
                        axpy(ds, &lt.k[j * d + lo..j * d + lo + hd], &mut dq[i * d + lo..i * d + lo + hd]);
                        axpy(ds, &lt.q[i * d + lo..i * d + lo + hd], &mut dk[j * d + lo..j * d + lo + hd]);
                    }
                }
            }
        }
        let mut dh = linear_backward(&layer.attn.wq, &lt.h1, &dq, t, bg.as_deref_mut().map(|g| &mut g.attn.wq));
        let dhk = linear_backward(&layer.attn.wk, &lt.h1, &dk, t, bg.as_deref_mut().map(|g| &mut g.attn.wk));
        let dhv = linear_backward(&layer.attn.wv, &lt.h1, &dv, t, bg.as_deref_mut().map(|g| &mut g.attn.wv));
        for i in 0..dh.len() {
            dh[i] += dhk[i] + dhv[i];
        }
        layer_norm_backward(&layer.attn_norm, &lt.x_in, &lt.ln1, &dh, &mut dx, bg.map(|g| &mut g.attn_norm));

        if l > 0 && cond_layer == Some(l - 1) {
            add_cond(&dx, sink);
        }
    }

    if stop == 0 {
        if let Some(b) = sink.backbone.as_deref_mut() {
            let (emb, pos, ..) = b.parts_mut_unchecked();
            for (r, &tok) in trace.tokens.iter().enumerate() {
                axpy(1.0, &dx[r * d..(r + 1) * d], emb.row_mut(tok as usize));
                axpy(1.0, &dx[r * d..(r + 1) * d], pos.row_mut(r));
            }
        }
    }
}
