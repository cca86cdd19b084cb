//! Fisher-weighted merging of sibling checkpoints.
//!
//! [`assign_weights`] maps per-node mask Fisher values onto parameter blocks:
//!
//! 1. each element of head (h, l)'s query and key slices gets f_mha[h, l]
//!    (value slices stay at 1),
//! 2. row r of the first feed-forward matrix and its bias entry get
//!    f_mlp[r, l],
//! 3. everything else gets exactly 1.0, which degenerates to plain averaging.
//!
//! [`merge`] then combines M >= 2 siblings elementwise as
//! `theta* = sum_j lambda_j F_j theta_j / sum_j lambda_j F_j`.
//! Task heads are never merged; the output carries every input's heads
//! verbatim.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fisher::{FullFisher, MaskFisher};
use crate::io;
use crate::model::{names, Checkpoint, ModelConfig, Provenance, TaskHead};
use crate::tensor::Tensor;

/// Optional extensions of the strict mapping rules, recorded in provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingFlags {
    /// Rule 1 also covers the query/key bias slices; the bias feeds the
    /// same masked head output, so this defaults to on.
    pub include_qk_bias: bool,
    /// Rule 2 also weights column r of the second feed-forward matrix.
    /// Defaults to off; only the first matrix's rows carry filter weights.
    pub weight_mlp2_columns: bool,
}

impl Default for MappingFlags {
    fn default() -> Self {
        MappingFlags {
            include_qk_bias: true,
            weight_mlp2_columns: false,
        }
    }
}

impl MappingFlags {
    fn as_map(&self) -> BTreeMap<String, bool> {
        let mut m = BTreeMap::new();
        m.insert("include_qk_bias".to_string(), self.include_qk_bias);
        m.insert("weight_mlp2_columns".to_string(), self.weight_mlp2_columns);
        m
    }
}

/// Per-parameter weight map produced by the mapping scheme (or taken from a
/// full-parameter Fisher estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct FisherWeights {
    pub weights: BTreeMap<String, Tensor>,
    /// Digest of the checkpoint the weights were derived from, when known;
    /// merging verifies it against the checkpoint it is paired with.
    pub source_digest: Option<String>,
    /// Mapping flags used to build the weights (empty if not applicable).
    pub flags: BTreeMap<String, bool>,
}

impl FisherWeights {
    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights.get(name).ok_or_else(|| Error::MissingParam {
            name: name.to_string(),
        })
    }

    /// All-ones weights for a config; merging with these is plain averaging.
    pub fn uniform(config: &ModelConfig) -> Result<FisherWeights> {
        let mut weights = BTreeMap::new();
        for (name, shape) in config.param_specs().into_iter().chain(config.head_specs()) {
            weights.insert(name, Tensor::full(&shape, 1.0)?);
        }
        Ok(FisherWeights {
            weights,
            source_digest: None,
            flags: BTreeMap::new(),
        })
    }

    fn validate_non_negative(&self) -> Result<()> {
        for t in self.weights.values() {
            if t.data().iter().any(|&v| v < 0.0) {
                return Err(Error::NonFinite { op: "fisher_weights" });
            }
        }
        Ok(())
    }
}

/// What to do where every model's weight for a parameter element is zero,
/// leaving the weighted average undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZeroDenominatorPolicy {
    /// Merge that element as the lambda-weighted plain average.
    FallbackToAverage,
    /// Add the given value to every weight entry globally, so no denominator
    /// can vanish (classical Fisher smoothing).
    Epsilon(f64),
}

impl ZeroDenominatorPolicy {
    pub fn label(&self) -> String {
        match self {
            ZeroDenominatorPolicy::FallbackToAverage => "fallback-to-average".to_string(),
            ZeroDenominatorPolicy::Epsilon(v) => format!("epsilon({v})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    /// One positive scalar per model; all 1.0 unless tuned.
    pub lambdas: Vec<f64>,
    pub zero_denominator_policy: ZeroDenominatorPolicy,
}

impl MergeSpec {
    pub fn uniform(n_models: usize) -> MergeSpec {
        MergeSpec {
            lambdas: vec![1.0; n_models],
            zero_denominator_policy: ZeroDenominatorPolicy::FallbackToAverage,
        }
    }

    fn validate(&self, n_models: usize) -> Result<()> {
        if self.lambdas.len() != n_models {
            return Err(Error::InvalidConfig(format!(
                "{} lambdas for {} models",
                self.lambdas.len(),
                n_models
            )));
        }
        if !self.lambdas.iter().all(|&l| l.is_finite() && l > 0.0) {
            return Err(Error::InvalidConfig("lambdas must be positive".into()));
        }
        if let ZeroDenominatorPolicy::Epsilon(v) = self.zero_denominator_policy {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig("epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Map mask-node Fisher values onto per-parameter weights by the three-rule
/// scheme. Weight values are taken verbatim from the MaskFisher or are
/// exactly 1.0; nothing is interpolated.
pub fn assign_weights(
    config: &ModelConfig,
    mf: &MaskFisher,
    flags: &MappingFlags,
) -> Result<FisherWeights> {
    config.validate()?;
    mf.matches(config)?;
    mf.validate()?;

    // rule 3 first: everything starts at exactly 1.0
    let mut weights = BTreeMap::new();
    for (name, shape) in config.param_specs().into_iter().chain(config.head_specs()) {
        weights.insert(name, Tensor::full(&shape, 1.0)?);
    }

    // rule 1: query and key slices of head (h, l) get f_mha[h, l]
    for l in 0..config.layers {
        for h in 0..config.heads {
            let f = mf.f_mha.at(h, l);
            for proj in ["q", "k"] {
                let w = weights.get_mut(&names::head_weight(l, h, proj)).expect("spec'd");
                w.data_mut().fill(f);
                if flags.include_qk_bias {
                    let b = weights.get_mut(&names::head_bias(l, h, proj)).expect("spec'd");
                    b.data_mut().fill(f);
                }
            }
        }
    }

    // rule 2: row r of W1 (and its bias entry) gets f_mlp[r, l]
    for l in 0..config.layers {
        let w1 = weights.get_mut(&names::mlp_w1(l)).expect("spec'd");
        for r in 0..config.ffn_dim {
            let f = mf.f_mlp.at(r, l);
            w1.row_mut(r).fill(f);
        }
        let b1 = weights.get_mut(&names::mlp_b1(l)).expect("spec'd");
        for r in 0..config.ffn_dim {
            b1.data_mut()[r] = mf.f_mlp.at(r, l);
        }
        if flags.weight_mlp2_columns {
            let w2 = weights.get_mut(&names::mlp_w2(l)).expect("spec'd");
            for o in 0..config.d_model {
                for r in 0..config.ffn_dim {
                    w2.set(o, r, mf.f_mlp.at(r, l));
                }
            }
        }
    }

    Ok(FisherWeights {
        weights,
        source_digest: Some(mf.checkpoint_digest.clone()),
        flags: flags.as_map(),
    })
}

/// Fisher-weighted merge of sibling checkpoints (mask-node weighting).
pub fn merge(ckpts: &[Checkpoint], ws: &[FisherWeights], spec: &MergeSpec) -> Result<Checkpoint> {
    merge_core(ckpts, ws, spec, "mask-fisher")
}

/// The original full-parameter Fisher-weighted merge baseline.
pub fn full_fisher_merge(
    ckpts: &[Checkpoint],
    fishers: &[FullFisher],
    spec: &MergeSpec,
) -> Result<Checkpoint> {
    if fishers.len() != ckpts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} fisher estimates for {} checkpoints",
            fishers.len(),
            ckpts.len()
        )));
    }
    let ws: Vec<FisherWeights> = fishers
        .iter()
        .map(|ff| {
            ff.validate()?;
            Ok(FisherWeights {
                weights: ff.fisher.clone(),
                source_digest: Some(ff.checkpoint_digest.clone()),
                flags: BTreeMap::new(),
            })
        })
        .collect::<Result<_>>()?;
    merge_core(ckpts, &ws, spec, "full-fisher")
}

/// Elementwise mean of sibling encoder parameters; heads carried verbatim.
/// Kept as an independent code path so it can cross-check the weighted merge.
pub fn simple_average(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    check_siblings(ckpts)?;
    let m = ckpts.len() as f64;
    let mut params = BTreeMap::new();
    for name in ckpts[0].params.keys() {
        let tensors: Vec<&Tensor> = ckpts
            .iter()
            .map(|c| c.param(name))
            .collect::<Result<_>>()?;
        let numel = tensors[0].numel();
        let mut out = vec![0.0; numel];
        for (i, slot) in out.iter_mut().enumerate() {
            let first = tensors[0].data()[i];
            if tensors.iter().all(|t| t.data()[i] == first) {
                *slot = first;
            } else {
                let sum: f64 = tensors.iter().map(|t| t.data()[i]).sum();
                *slot = clamp_to_hull(sum / m, &tensors, i);
            }
        }
        params.insert(name.clone(), Tensor::from_vec(tensors[0].shape(), out)?);
    }
    let inputs = ckpts
        .iter()
        .map(io::checkpoint_digest)
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: ckpts[0].config.clone(),
        params,
        heads: carry_heads(ckpts)?,
        provenance: Some(Provenance {
            method: "average".to_string(),
            inputs,
            lambdas: vec![1.0; ckpts.len()],
            zero_denominator_policy: "none".to_string(),
            flags: BTreeMap::new(),
        }),
    })
}

fn merge_core(
    ckpts: &[Checkpoint],
    ws: &[FisherWeights],
    spec: &MergeSpec,
    method: &str,
) -> Result<Checkpoint> {
    check_siblings(ckpts)?;
    if ws.len() != ckpts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} weight maps for {} checkpoints",
            ws.len(),
            ckpts.len()
        )));
    }
    spec.validate(ckpts.len())?;
    for w in ws {
        w.validate_non_negative()?;
    }
    for (j, w) in ws.iter().enumerate() {
        if let Some(expected) = &w.source_digest {
            let found = io::checkpoint_digest(&ckpts[j])?;
            if &found != expected {
                return Err(Error::DigestMismatch {
                    context: format!("fisher weights for model {j}"),
                    expected: expected.clone(),
                    found,
                });
            }
        }
    }

    let eps = match spec.zero_denominator_policy {
        ZeroDenominatorPolicy::Epsilon(v) => v,
        ZeroDenominatorPolicy::FallbackToAverage => 0.0,
    };
    let lambda_sum: f64 = spec.lambdas.iter().sum();

    let mut params = BTreeMap::new();
    for name in ckpts[0].params.keys() {
        let thetas: Vec<&Tensor> = ckpts
            .iter()
            .map(|c| c.param(name))
            .collect::<Result<_>>()?;
        let weights: Vec<&Tensor> = ws.iter().map(|w| w.weight(name)).collect::<Result<_>>()?;
        for (j, w) in weights.iter().enumerate() {
            if w.shape() != thetas[j].shape() {
                return Err(Error::ShapeMismatch {
                    op: "merge",
                    detail: format!(
                        "{name}: weights {:?} vs parameters {:?}",
                        w.shape(),
                        thetas[j].shape()
                    ),
                });
            }
        }
        let numel = thetas[0].numel();
        let mut out = vec![0.0; numel];
        for (i, slot) in out.iter_mut().enumerate() {
            let first = thetas[0].data()[i];
            if thetas.iter().all(|t| t.data()[i] == first) {
                // weighted mean of equal values is that value, exactly
                *slot = first;
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for j in 0..thetas.len() {
                let f = weights[j].data()[i] + eps;
                num += spec.lambdas[j] * f * thetas[j].data()[i];
                den += spec.lambdas[j] * f;
            }
            let v = if den == 0.0 {
                let avg: f64 = (0..thetas.len())
                    .map(|j| spec.lambdas[j] * thetas[j].data()[i])
                    .sum();
                avg / lambda_sum
            } else {
                num / den
            };
            *slot = clamp_to_hull(v, &thetas, i);
        }
        params.insert(name.clone(), Tensor::from_vec(thetas[0].shape(), out)?);
    }

    let inputs = ckpts
        .iter()
        .map(io::checkpoint_digest)
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        config: ckpts[0].config.clone(),
        params,
        heads: carry_heads(ckpts)?,
        provenance: Some(Provenance {
            method: method.to_string(),
            inputs,
            lambdas: spec.lambdas.clone(),
            zero_denominator_policy: spec.zero_denominator_policy.label(),
            flags: ws[0].flags.clone(),
        }),
    })
}

/// Weighted averages are convex combinations; keep each element inside the
/// input hull even when float rounding would nudge it out by an ulp.
fn clamp_to_hull(v: f64, thetas: &[&Tensor], i: usize) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in thetas {
        let x = t.data()[i];
        lo = lo.min(x);
        hi = hi.max(x);
    }
    v.clamp(lo, hi)
}

fn check_siblings(ckpts: &[Checkpoint]) -> Result<()> {
    if ckpts.len() < 2 {
        return Err(Error::TooFewModels(ckpts.len()));
    }
    for (j, c) in ckpts.iter().enumerate().skip(1) {
        if !c.is_sibling_of(&ckpts[0]) {
            return Err(Error::NotSiblings(format!(
                "model {j} differs from model 0 in config or parameter names"
            )));
        }
    }
    Ok(())
}

/// Union of the input models' heads, carried verbatim. A head name present
/// in several inputs must be bit-identical everywhere, otherwise ownership
/// is ambiguous and the merge refuses.
fn carry_heads(ckpts: &[Checkpoint]) -> Result<BTreeMap<String, TaskHead>> {
    let mut out: BTreeMap<String, TaskHead> = BTreeMap::new();
    for ckpt in ckpts {
        for (task, head) in &ckpt.heads {
            match out.get(task) {
                None => {
                    out.insert(task.clone(), head.clone());
                }
                Some(existing) if existing == head => {}
                Some(_) => {
                    return Err(Error::ConflictingHeads {
                        task_id: task.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}
