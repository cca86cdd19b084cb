//! Shared test oracles: a straight-line, mask-free reimplementation of the
//! encoder forward pass, and a central finite-difference gradient oracle.
//! Both are kept independent of the library's tensor ops and backward pass.

#![allow(dead_code)]

use std::collections::BTreeMap;

use maskmerge::model::{names, Checkpoint, Example, MaskSet, ModelConfig};
use maskmerge::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const FD_DELTA: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-6;
pub const FD_ABS_FLOOR: f64 = 1e-10;

/// Gradient comparison: within 1e-6 relative, with a 1e-10 absolute floor.
pub fn grads_agree(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    if err <= FD_ABS_FLOOR {
        return true;
    }
    err / analytic.abs().max(numeric.abs()) <= FD_REL_TOL
}

pub fn assert_grads_agree(analytic: f64, numeric: f64, what: &str) {
    assert!(
        grads_agree(analytic, numeric),
        "{what}: analytic {analytic:e} vs finite-difference {numeric:e}"
    );
}

// ---------------------------------------------------------------------------
// straight-line reference forward (no masks, no Tensor ops)
// ---------------------------------------------------------------------------

fn flat(ckpt: &Checkpoint, name: &str) -> Vec<f64> {
    ckpt.tensor(name).unwrap().data().to_vec()
}

fn layer_norm_row(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-12).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| gain[j] * ((v - mean) * inv) + bias[j])
        .collect()
}

fn softmax_plain(row: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Unmasked encoder logits computed with explicit scalar loops: the plain
/// encoder the masked implementation must reproduce when every mask is 1.
pub fn reference_logits(ckpt: &Checkpoint, example: &Example) -> Vec<f64> {
    let cfg = &ckpt.config;
    let (t_len, dm, dh) = (example.tokens.len(), cfg.d_model, cfg.d_head);

    let tok = flat(ckpt, names::TOKEN_EMB);
    let pos = flat(ckpt, names::POS_EMB);
    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            (0..dm)
                .map(|j| tok[example.tokens[t] * dm + j] + pos[t * dm + j])
                .collect()
        })
        .collect();

    for l in 0..cfg.layers {
        let g1 = flat(ckpt, &names::attn_norm_gain(l));
        let b1 = flat(ckpt, &names::attn_norm_bias(l));
        let xn1: Vec<Vec<f64>> = x.iter().map(|r| layer_norm_row(r, &g1, &b1)).collect();

        let wo = flat(ckpt, &names::attn_out_weight(l));
        let bo = flat(ckpt, &names::attn_out_bias(l));
        let mut attn = vec![vec![0.0; dm]; t_len];
        for h in 0..cfg.heads {
            let wq = flat(ckpt, &names::head_weight(l, h, "q"));
            let bq = flat(ckpt, &names::head_bias(l, h, "q"));
            let wk = flat(ckpt, &names::head_weight(l, h, "k"));
            let bk = flat(ckpt, &names::head_bias(l, h, "k"));
            let wv = flat(ckpt, &names::head_weight(l, h, "v"));
            let bv = flat(ckpt, &names::head_bias(l, h, "v"));
            let proj = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
                (0..dh)
                    .map(|i| (0..dm).map(|j| w[i * dm + j] * row[j]).sum::<f64>() + b[i])
                    .collect()
            };
            let q: Vec<Vec<f64>> = xn1.iter().map(|r| proj(&wq, &bq, r)).collect();
            let k: Vec<Vec<f64>> = xn1.iter().map(|r| proj(&wk, &bk, r)).collect();
            let v: Vec<Vec<f64>> = xn1.iter().map(|r| proj(&wv, &bv, r)).collect();
            for t in 0..t_len {
                let scores: Vec<f64> = (0..t_len)
                    .map(|t2| {
                        (0..dh).map(|i| q[t][i] * k[t2][i]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let a = softmax_plain(&scores);
                for i in 0..dh {
                    let y: f64 = (0..t_len).map(|t2| a[t2] * v[t2][i]).sum();
                    for o in 0..dm {
                        attn[t][o] += wo[o * dm + h * dh + i] * y;
                    }
                }
            }
        }
        for t in 0..t_len {
            for o in 0..dm {
                x[t][o] += attn[t][o] + bo[o];
            }
        }

        let g2 = flat(ckpt, &names::mlp_norm_gain(l));
        let b2n = flat(ckpt, &names::mlp_norm_bias(l));
        let xn2: Vec<Vec<f64>> = x.iter().map(|r| layer_norm_row(r, &g2, &b2n)).collect();
        let w1 = flat(ckpt, &names::mlp_w1(l));
        let b1m = flat(ckpt, &names::mlp_b1(l));
        let w2 = flat(ckpt, &names::mlp_w2(l));
        let b2m = flat(ckpt, &names::mlp_b2(l));
        for t in 0..t_len {
            let u: Vec<f64> = (0..cfg.ffn_dim)
                .map(|r| (0..dm).map(|j| w1[r * dm + j] * xn2[t][j]).sum::<f64>() + b1m[r])
                .collect();
            for o in 0..dm {
                let s: f64 = (0..cfg.ffn_dim).map(|r| w2[o * cfg.ffn_dim + r] * gelu_ref(u[r])).sum();
                x[t][o] += s + b2m[o];
            }
        }
    }

    let wh = flat(ckpt, &names::head_proj_weight(&example.task_id));
    let bh = flat(ckpt, &names::head_proj_bias(&example.task_id));
    let classes = cfg.n_classes(&example.task_id).unwrap();
    (0..classes)
        .map(|c| (0..dm).map(|j| wh[c * dm + j] * x[0][j]).sum::<f64>() + bh[c])
        .collect()
}

/// Cross-entropy computed plainly from reference logits.
pub fn reference_loss(ckpt: &Checkpoint, example: &Example) -> f64 {
    let logits = reference_logits(ckpt, example);
    let p = softmax_plain(&logits);
    -p[example.label].ln()
}

// ---------------------------------------------------------------------------
// central finite-difference oracle
// ---------------------------------------------------------------------------

fn masked_loss(ckpt: &Checkpoint, masks: &MaskSet, example: &Example) -> f64 {
    let (logits, _) = maskmerge::model::forward(ckpt, masks, example).unwrap();
    maskmerge::model::loss(&logits, example.label).unwrap()
}

/// d loss / d mask for every mask node, by central differences around 1.
pub fn fd_mask_grad(ckpt: &Checkpoint, example: &Example) -> (Tensor, Tensor) {
    let cfg = &ckpt.config;
    let mut g_mha = Tensor::zeros(&[cfg.heads, cfg.layers]);
    let mut g_mlp = Tensor::zeros(&[cfg.ffn_dim, cfg.layers]);
    let ones_mha = Tensor::full(&[cfg.heads, cfg.layers], 1.0).unwrap();
    let ones_mlp = Tensor::full(&[cfg.ffn_dim, cfg.layers], 1.0).unwrap();

    for h in 0..cfg.heads {
        for l in 0..cfg.layers {
            let eval = |v: f64| {
                let mut m = ones_mha.clone();
                m.set(h, l, v);
                let masks = MaskSet::with_values(m, ones_mlp.clone()).unwrap();
                masked_loss(ckpt, &masks, example)
            };
            let d = (eval(1.0 + FD_DELTA) - eval(1.0 - FD_DELTA)) / (2.0 * FD_DELTA);
            g_mha.set(h, l, d);
        }
    }
    for r in 0..cfg.ffn_dim {
        for l in 0..cfg.layers {
            let eval = |v: f64| {
                let mut m = ones_mlp.clone();
                m.set(r, l, v);
                let masks = MaskSet::with_values(ones_mha.clone(), m).unwrap();
                masked_loss(ckpt, &masks, example)
            };
            let d = (eval(1.0 + FD_DELTA) - eval(1.0 - FD_DELTA)) / (2.0 * FD_DELTA);
            g_mlp.set(r, l, d);
        }
    }
    (g_mha, g_mlp)
}

fn tensor_mut<'a>(ckpt: &'a mut Checkpoint, name: &str) -> &'a mut Tensor {
    if ckpt.params.contains_key(name) {
        return ckpt.params.get_mut(name).unwrap();
    }
    let rest = name.strip_prefix("heads.").unwrap();
    if let Some(task) = rest.strip_suffix(".weight") {
        &mut ckpt.heads.get_mut(task).unwrap().weight
    } else {
        let task = rest.strip_suffix(".bias").unwrap();
        &mut ckpt.heads.get_mut(task).unwrap().bias
    }
}

/// d loss / d theta for one named parameter tensor, by central differences.
/// Restores the checkpoint before returning.
pub fn fd_param_grad(ckpt: &mut Checkpoint, example: &Example, name: &str) -> Tensor {
    let masks = MaskSet::ones(&ckpt.config);
    let shape = ckpt.tensor(name).unwrap().shape().to_vec();
    let numel: usize = shape.iter().product();
    let mut grad = Vec::with_capacity(numel);
    for i in 0..numel {
        let orig = tensor_mut(ckpt, name).data()[i];
        tensor_mut(ckpt, name).data_mut()[i] = orig + FD_DELTA;
        let up = masked_loss(ckpt, &masks, example);
        tensor_mut(ckpt, name).data_mut()[i] = orig - FD_DELTA;
        let down = masked_loss(ckpt, &masks, example);
        tensor_mut(ckpt, name).data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * FD_DELTA));
    }
    Tensor::from_vec(&shape, grad).unwrap()
}

// ---------------------------------------------------------------------------
// random tiny-model builders
// ---------------------------------------------------------------------------

pub fn config_with(
    layers: usize,
    heads: usize,
    d_head: usize,
    ffn_dim: usize,
    tasks: &[(&str, usize)],
) -> ModelConfig {
    let mut classes = BTreeMap::new();
    for &(id, c) in tasks {
        classes.insert(id.to_string(), c);
    }
    ModelConfig {
        layers,
        heads,
        d_model: heads * d_head,
        d_head,
        ffn_dim,
        vocab_size: 13,
        max_seq_len: 5,
        classes_per_task: classes,
    }
}

/// A random architecture within the gradient-check envelope
/// (L <= 2, H <= 2, D <= 4, d_model <= 8).
pub fn random_tiny_config(rng: &mut ChaCha20Rng) -> ModelConfig {
    let layers = rng.gen_range(1..=2);
    let heads = rng.gen_range(1..=2);
    let d_head = if heads == 2 { rng.gen_range(2..=4) } else { rng.gen_range(2..=8) };
    let d_head = if heads * d_head > 8 { 8 / heads } else { d_head };
    let ffn_dim = rng.gen_range(2..=4);
    let n_classes = rng.gen_range(2..=3);
    config_with(layers, heads, d_head, ffn_dim, &[("t", n_classes)])
}

pub fn random_example(cfg: &ModelConfig, task: &str, rng: &mut ChaCha20Rng) -> Example {
    let len = rng.gen_range(2..=cfg.max_seq_len);
    Example {
        tokens: (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect(),
        label: rng.gen_range(0..cfg.classes_per_task[task]),
        task_id: task.to_string(),
    }
}

pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Hand-set single-layer, single-head checkpoint for the spreadsheet-style
/// oracle comparison: every parameter is a small deterministic pattern.
pub fn hand_set_checkpoint() -> (Checkpoint, Example) {
    let cfg = config_with(1, 1, 4, 3, &[("t", 2)]);
    let mut ckpt = Checkpoint::init_random(&cfg, 0).unwrap();
    let mut counter = 0.0f64;
    let mut fill = |t: &mut Tensor| {
        for v in t.data_mut() {
            counter += 1.0;
            *v = 0.05 * (counter * 0.7).sin();
        }
    };
    let names: Vec<String> = ckpt.params.keys().cloned().collect();
    for name in names {
        fill(ckpt.params.get_mut(&name).unwrap());
    }
    let head = ckpt.heads.get_mut("t").unwrap();
    fill(&mut head.weight);
    fill(&mut head.bias);
    let example = Example { tokens: vec![3, 8], label: 1, task_id: "t".into() };
    (ckpt, example)
}
