//! Reverse-mode differentiation through the masked encoder.
//!
//! One hand-derived backward pass serves two products: per-example gradients
//! of the loss with respect to every mask node, and (for the full-Fisher
//! baseline) with respect to every parameter. Parameter gradients are
//! produced through a sink that computes each block lazily, so the mask-only
//! path never runs the weight-gradient matmuls and its working set stays at
//! activation size regardless of how many parameters the model has.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::forward::{ActivationRecord, LayerTape};
use crate::model::{forward, names, Checkpoint, Example, MaskSet};
use crate::tensor::{gelu_derivative, Tensor};

/// Loss gradients with respect to the mask nodes, at mask value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGradients {
    /// (heads, layers)
    pub g_mha: Tensor,
    /// (ffn_dim, layers)
    pub g_mlp: Tensor,
}

/// Loss gradients for every parameter of a checkpoint (encoder and heads;
/// heads of other tasks are exactly zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub grads: BTreeMap<String, Tensor>,
}

/// Per-example gradient of the loss with respect to every mask node.
pub fn mask_grad(ckpt: &Checkpoint, example: &Example) -> Result<MaskGradients> {
    let masks = MaskSet::ones(&ckpt.config);
    let (_, tape) = forward(ckpt, &masks, example)?;
    let mut sink = NoopSink;
    backward(ckpt, &tape, &mut sink)
}

/// Per-example gradient of the loss with respect to every parameter.
pub fn param_grad(ckpt: &Checkpoint, example: &Example) -> Result<ParamGradients> {
    let masks = MaskSet::ones(&ckpt.config);
    let (_, tape) = forward(ckpt, &masks, example)?;
    let mut sink = MapSink::zeros_like(ckpt);
    backward(ckpt, &tape, &mut sink)?;
    Ok(ParamGradients { grads: sink.grads })
}

/// Destination for lazily computed parameter gradients. The mask-only pass
/// uses [`NoopSink`], which never invokes the closures.
trait GradSink {
    fn record<F>(&mut self, name: String, compute: F) -> Result<()>
    where
        F: FnOnce() -> Result<Tensor>;
}

struct NoopSink;

impl GradSink for NoopSink {
    fn record<F>(&mut self, _name: String, _compute: F) -> Result<()>
    where
        F: FnOnce() -> Result<Tensor>,
    {
        Ok(())
    }
}

struct MapSink {
    grads: BTreeMap<String, Tensor>,
}

impl MapSink {
    /// Zero gradients for every tensor the checkpoint names, so the result
    /// has name-set equality with the checkpoint even for parameters off the
    /// compute path.
    fn zeros_like(ckpt: &Checkpoint) -> MapSink {
        let grads = ckpt
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, Tensor::zeros(t.shape())))
            .collect();
        MapSink { grads }
    }
}

impl GradSink for MapSink {
    fn record<F>(&mut self, name: String, compute: F) -> Result<()>
    where
        F: FnOnce() -> Result<Tensor>,
    {
        let g = compute()?;
        let slot = self.grads.get_mut(&name).ok_or(Error::MissingParam { name })?;
        slot.axpy(1.0, &g)
    }
}

fn backward<S: GradSink>(
    ckpt: &Checkpoint,
    tape: &ActivationRecord,
    sink: &mut S,
) -> Result<MaskGradients> {
    let config = &ckpt.config;
    let example: &Example = &tape.example;
    let seq_len = example.tokens.len();

    // d loss / d logits = softmax(logits) - onehot(label)
    let mut dlogits = tape.logits.softmax(0)?;
    dlogits.data_mut()[example.label] -= 1.0;

    let head = ckpt.head(&example.task_id)?;
    let x_first = Tensor::from_vec(&[config.d_model], tape.x_final.row(0).to_vec())?;
    sink.record(names::head_proj_weight(&example.task_id), || {
        Tensor::outer(&dlogits, &x_first)
    })?;
    sink.record(names::head_proj_bias(&example.task_id), || Ok(dlogits.clone()))?;

    let mut dx = Tensor::zeros(&[seq_len, config.d_model]);
    let dx_first = Tensor::vecmat(&dlogits, &head.weight)?;
    dx.row_mut(0).copy_from_slice(dx_first.data());

    let mut g_mha = Tensor::zeros(&[config.heads, config.layers]);
    let mut g_mlp = Tensor::zeros(&[config.ffn_dim, config.layers]);
    for l in (0..config.layers).rev() {
        dx = layer_backward(ckpt, tape, l, dx, &mut g_mha, &mut g_mlp, sink)?;
    }

    // embeddings: x0[t] = token_emb[tokens[t]] + pos_emb[t]
    let tokens = example.tokens.clone();
    let dx_ref = &dx;
    sink.record(names::TOKEN_EMB.to_string(), || {
        let mut g = Tensor::zeros(&[config.vocab_size, config.d_model]);
        for (t, &id) in tokens.iter().enumerate() {
            let src = dx_ref.row(t).to_vec();
            for (o, s) in g.row_mut(id).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(g)
    })?;
    sink.record(names::POS_EMB.to_string(), || {
        let mut g = Tensor::zeros(&[config.max_seq_len, config.d_model]);
        for t in 0..seq_len {
            g.row_mut(t).copy_from_slice(dx_ref.row(t));
        }
        Ok(g)
    })?;

    if !g_mha.data().iter().all(|v| v.is_finite()) || !g_mlp.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "mask_grad" });
    }
    Ok(MaskGradients { g_mha, g_mlp })
}

#[allow(clippy::too_many_arguments)]
fn layer_backward<S: GradSink>(
    ckpt: &Checkpoint,
    tape: &ActivationRecord,
    l: usize,
    dx_out: Tensor,
    g_mha: &mut Tensor,
    g_mlp: &mut Tensor,
    sink: &mut S,
) -> Result<Tensor> {
    let config = &ckpt.config;
    let lt: &LayerTape = &tape.layers[l];
    let masks = &tape.masks;
    let (seq_len, d_head) = (dx_out.rows(), config.d_head);

    // ---- feed-forward block: x_out = x_mid + gelu(m . (xn2 W1^T + b1)) W2^T + b2
    let w2 = ckpt.param(&names::mlp_w2(l))?;
    sink.record(names::mlp_w2(l), || dx_out.matmul_tn(&lt.g_act))?;
    sink.record(names::mlp_b2(l), || dx_out.col_sum())?;
    let dg = dx_out.matmul(w2)?;

    let mut du_masked = dg;
    for (dv, &um) in du_masked.data_mut().iter_mut().zip(lt.u_masked.data()) {
        *dv *= gelu_derivative(um);
    }
    // mask gradient: u_masked[t,r] = u[t,r] * m_mlp[r,l]
    for r in 0..config.ffn_dim {
        let mut acc = 0.0;
        for t in 0..seq_len {
            acc += du_masked.at(t, r) * lt.u.at(t, r);
        }
        g_mlp.set(r, l, g_mlp.at(r, l) + acc);
    }
    let mut du = du_masked;
    for t in 0..seq_len {
        let row = du.row_mut(t);
        for (r, v) in row.iter_mut().enumerate() {
            *v *= masks.m_mlp.at(r, l);
        }
    }

    let w1 = ckpt.param(&names::mlp_w1(l))?;
    sink.record(names::mlp_w1(l), || du.matmul_tn(&lt.xn2))?;
    sink.record(names::mlp_b1(l), || du.col_sum())?;
    let dxn2 = du.matmul(w1)?;

    let gain2 = ckpt.param(&names::mlp_norm_gain(l))?;
    sink.record(names::mlp_norm_gain(l), || dxn2.mul(&lt.xhat2)?.col_sum())?;
    sink.record(names::mlp_norm_bias(l), || dxn2.col_sum())?;
    let dx_mid_ln = layer_norm_backward_dx(&dxn2, &lt.xhat2, &lt.inv_std2, gain2)?;
    let dx_mid = dx_out.add(&dx_mid_ln)?;

    // ---- attention block: x_mid = x_in + (concat_h m_h Y_h) Wo^T + bo
    let wo = ckpt.param(&names::attn_out_weight(l))?;
    sink.record(names::attn_out_weight(l), || dx_mid.matmul_tn(&lt.y_masked))?;
    sink.record(names::attn_out_bias(l), || dx_mid.col_sum())?;
    let dym = dx_mid.matmul(wo)?;

    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut dxn1 = Tensor::zeros(&[seq_len, config.d_model]);
    for (h, ht) in lt.heads.iter().enumerate() {
        let dym_h = col_block(&dym, h * d_head, d_head)?;
        g_mha.set(h, l, g_mha.at(h, l) + dym_h.dot(&ht.y)?);

        let dy = dym_h.scale(masks.m_mha.at(h, l))?;
        let da = dy.matmul_nt(&ht.v)?;
        let dv = ht.probs.matmul_tn(&dy)?;
        let ds = softmax_rows_backward(&ht.probs, &da)?;
        let dq = ds.matmul(&ht.k)?.scale(inv_sqrt)?;
        let dk = ds.matmul_tn(&ht.q)?.scale(inv_sqrt)?;

        for (proj, dp) in [("q", &dq), ("k", &dk), ("v", &dv)] {
            sink.record(names::head_weight(l, h, proj), || dp.matmul_tn(&lt.xn1))?;
            sink.record(names::head_bias(l, h, proj), || dp.col_sum())?;
            let w = ckpt.param(&names::head_weight(l, h, proj))?;
            dxn1.axpy(1.0, &dp.matmul(w)?)?;
        }
    }

    let gain1 = ckpt.param(&names::attn_norm_gain(l))?;
    sink.record(names::attn_norm_gain(l), || dxn1.mul(&lt.xhat1)?.col_sum())?;
    sink.record(names::attn_norm_bias(l), || dxn1.col_sum())?;
    let dx_in_ln = layer_norm_backward_dx(&dxn1, &lt.xhat1, &lt.inv_std1, gain1)?;
    dx_mid.add(&dx_in_ln)
}

/// Backprop through y = gain . xhat + bias where xhat = (x - mean) / std.
fn layer_norm_backward_dx(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gain: &Tensor,
) -> Result<Tensor> {
    let (m, n) = (dy.rows(), dy.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dy_row = dy.row(i);
        let xh_row = xhat.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..n {
            let dxh = dy_row[j] * gain.data()[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh_row[j];
        }
        mean_dxhat /= n as f64;
        mean_dxhat_xhat /= n as f64;
        for j in 0..n {
            let dxh = dy_row[j] * gain.data()[j];
            out[i * n + j] = inv_std[i] * (dxh - mean_dxhat - xh_row[j] * mean_dxhat_xhat);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// Backprop through row-wise softmax: dx = p . (dy - <dy, p>), per row.
fn softmax_rows_backward(probs: &Tensor, dprobs: &Tensor) -> Result<Tensor> {
    let (m, n) = (probs.rows(), probs.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let p = probs.row(i);
        let dp = dprobs.row(i);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[i * n + j] = p[j] * (dp[j] - inner);
        }
    }
    Tensor::from_vec(&[m, n], out)
}

fn col_block(x: &Tensor, start: usize, width: usize) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    if start + width > n {
        return Err(Error::ShapeMismatch {
            op: "col_block",
            detail: format!("cols {}..{} out of {:?}", start, start + width, x.shape()),
        });
    }
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        data.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Tensor::from_vec(&[m, width], data)
}
