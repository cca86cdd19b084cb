//! Masked encoder forward pass and cross-entropy loss.
//!
//! The attention mask entry for head (h, l) scales that head's output before
//! the output projection; the feed-forward mask entry for filter (r, l)
//! scales row r of the intermediate pre-activation. With all-ones masks the
//! forward value is identical to an unmasked encoder.

use super::{Checkpoint, Example, MaskSet, names, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-head intermediates kept for the backward pass.
pub(crate) struct HeadTape {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// (T, T) attention weights.
    pub probs: Tensor,
    /// (T, d_head) head output before the mask multiply.
    pub y: Tensor,
}

pub(crate) struct LayerTape {
    pub xhat1: Tensor,
    pub inv_std1: Vec<f64>,
    pub xn1: Tensor,
    pub heads: Vec<HeadTape>,
    /// (T, d_model) concatenation of masked head outputs.
    pub y_masked: Tensor,
    pub xhat2: Tensor,
    pub inv_std2: Vec<f64>,
    pub xn2: Tensor,
    /// (T, ffn_dim) intermediate pre-activation before the mask multiply.
    pub u: Tensor,
    pub u_masked: Tensor,
    pub g_act: Tensor,
}

/// Everything one backward pass needs. Single-use, single-thread.
pub struct ActivationRecord {
    pub(crate) example: Example,
    pub(crate) masks: MaskSet,
    pub(crate) layers: Vec<LayerTape>,
    pub(crate) x_final: Tensor,
    pub(crate) logits: Tensor,
}

impl ActivationRecord {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// Run the masked encoder on one example, returning classifier logits for
/// the example's task and the activation tape.
pub fn forward(
    ckpt: &Checkpoint,
    masks: &MaskSet,
    example: &Example,
) -> Result<(Tensor, ActivationRecord)> {
    let config = &ckpt.config;
    example.validate(config)?;
    masks.matches(config)?;
    let head = ckpt.head(&example.task_id)?;

    let seq_len = example.tokens.len();
    let mut x = embed(ckpt, &example.tokens)?;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (tape, x_out) = layer_forward(ckpt, masks, l, x, seq_len)?;
        layers.push(tape);
        x = x_out;
    }

    let first = Tensor::from_vec(&[config.d_model], x.row(0).to_vec())?;
    let logits = head.weight.matvec(&first)?.add(&head.bias)?;

    let record = ActivationRecord {
        example: example.clone(),
        masks: masks.clone(),
        layers,
        x_final: x,
        logits: logits.clone(),
    };
    Ok((logits, record))
}

fn embed(ckpt: &Checkpoint, tokens: &[usize]) -> Result<Tensor> {
    let d_model = ckpt.config.d_model;
    let tok = ckpt.param(names::TOKEN_EMB)?;
    let pos = ckpt.param(names::POS_EMB)?;
    let mut data = Vec::with_capacity(tokens.len() * d_model);
    for (t, &id) in tokens.iter().enumerate() {
        let tok_row = tok.row(id);
        let pos_row = pos.row(t);
        for j in 0..d_model {
            data.push(tok_row[j] + pos_row[j]);
        }
    }
    Tensor::from_vec(&[tokens.len(), d_model], data)
}

fn layer_forward(
    ckpt: &Checkpoint,
    masks: &MaskSet,
    l: usize,
    x_in: Tensor,
    seq_len: usize,
) -> Result<(LayerTape, Tensor)> {
    let config = &ckpt.config;
    let (d_model, d_head) = (config.d_model, config.d_head);

    // pre-norm attention block
    let gain1 = ckpt.param(&names::attn_norm_gain(l))?;
    let bias1 = ckpt.param(&names::attn_norm_bias(l))?;
    let (xn1, xhat1, inv_std1) = x_in.layer_norm_parts(gain1, bias1, LAYER_NORM_EPS)?;

    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    let mut y_masked = Tensor::zeros(&[seq_len, d_model]);
    for h in 0..config.heads {
        let q = project(ckpt, &xn1, l, h, "q")?;
        let k = project(ckpt, &xn1, l, h, "k")?;
        let v = project(ckpt, &xn1, l, h, "v")?;
        let scores = q.matmul_nt(&k)?.scale(inv_sqrt)?;
        let probs = scores.softmax(1)?;
        let y = probs.matmul(&v)?;
        let m = masks.m_mha.at(h, l);
        for t in 0..seq_len {
            let y_row = y.row(t);
            let out_row = y_masked.row_mut(t);
            for j in 0..d_head {
                out_row[h * d_head + j] = m * y_row[j];
            }
        }
        heads.push(HeadTape { q, k, v, probs, y });
    }

    let wo = ckpt.param(&names::attn_out_weight(l))?;
    let bo = ckpt.param(&names::attn_out_bias(l))?;
    let attn_out = y_masked.matmul_nt(wo)?.add_row(bo)?;
    let x_mid = x_in.add(&attn_out)?;

    // pre-norm feed-forward block
    let gain2 = ckpt.param(&names::mlp_norm_gain(l))?;
    let bias2 = ckpt.param(&names::mlp_norm_bias(l))?;
    let (xn2, xhat2, inv_std2) = x_mid.layer_norm_parts(gain2, bias2, LAYER_NORM_EPS)?;

    let w1 = ckpt.param(&names::mlp_w1(l))?;
    let b1 = ckpt.param(&names::mlp_b1(l))?;
    let u = xn2.matmul_nt(w1)?.add_row(b1)?;
    let mut u_masked = u.clone();
    for t in 0..seq_len {
        let row = u_masked.row_mut(t);
        for (r, val) in row.iter_mut().enumerate() {
            *val *= masks.m_mlp.at(r, l);
        }
    }
    let g_act = u_masked.gelu()?;

    let w2 = ckpt.param(&names::mlp_w2(l))?;
    let b2 = ckpt.param(&names::mlp_b2(l))?;
    let mlp_out = g_act.matmul_nt(w2)?.add_row(b2)?;
    let x_out = x_mid.add(&mlp_out)?;

    let tape = LayerTape {
        xhat1,
        inv_std1,
        xn1,
        heads,
        y_masked,
        xhat2,
        inv_std2,
        xn2,
        u,
        u_masked,
        g_act,
    };
    Ok((tape, x_out))
}

fn project(ckpt: &Checkpoint, xn: &Tensor, l: usize, h: usize, proj: &str) -> Result<Tensor> {
    let w = ckpt.param(&names::head_weight(l, h, proj))?;
    let b = ckpt.param(&names::head_bias(l, h, proj))?;
    xn.matmul_nt(w)?.add_row(b)
}

/// Cross-entropy: -log softmax(logits)[label], computed via a max-subtracted
/// log-sum-exp.
pub fn loss(logits: &Tensor, label: usize) -> Result<f64> {
    if logits.shape().len() != 1 || label >= logits.numel() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            detail: format!("label {} vs logits {:?}", label, logits.shape()),
        });
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.data().iter().map(|&v| (v - max).exp()).sum();
    let value = max + sum.ln() - logits.data()[label];
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { op: "loss" })
    }
}
