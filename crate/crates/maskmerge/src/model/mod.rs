//! BERT-style encoder with per-head and per-filter mask nodes.
//!
//! The masks are constant-1 multiplicative carriers: they never change the
//! forward value, they exist so the gradient engine can measure the loss
//! sensitivity of whole attention heads and feed-forward filters.

pub(crate) mod forward;

pub use forward::{forward, loss, ActivationRecord};

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon, frozen and recorded in every checkpoint manifest.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Activation tag recorded in manifests; this build uses exact erf-based GELU.
pub const ACTIVATION: &str = "gelu-erf";

/// Architecture hyperparameters for one encoder and its task heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of encoder layers (L).
    pub layers: usize,
    /// Attention heads per layer (H).
    pub heads: usize,
    /// Embedding width; must equal heads * d_head.
    pub d_model: usize,
    /// Per-head width.
    pub d_head: usize,
    /// Feed-forward intermediate width (the filter count D).
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Task id -> class count, for every task this model family knows about.
    pub classes_per_task: BTreeMap<String, usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(
                "layers, heads and ffn_dim must all be >= 1".into(),
            ));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model {} != heads {} * d_head {}",
                self.d_model, self.heads, self.d_head
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size and max_seq_len must be >= 1".into(),
            ));
        }
        for (task, &classes) in &self.classes_per_task {
            if classes < 2 {
                return Err(Error::InvalidConfig(format!(
                    "task {task} needs at least 2 classes, got {classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self, task_id: &str) -> Result<usize> {
        self.classes_per_task
            .get(task_id)
            .copied()
            .ok_or_else(|| Error::MissingHead {
                task_id: task_id.to_string(),
            })
    }

    /// Canonical (name, shape) table for the encoder parameters.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = vec![
            (names::TOKEN_EMB.to_string(), vec![self.vocab_size, self.d_model]),
            (names::POS_EMB.to_string(), vec![self.max_seq_len, self.d_model]),
        ];
        for l in 0..self.layers {
            specs.push((names::attn_norm_gain(l), vec![self.d_model]));
            specs.push((names::attn_norm_bias(l), vec![self.d_model]));
            for h in 0..self.heads {
                for proj in ["q", "k", "v"] {
                    specs.push((names::head_weight(l, h, proj), vec![self.d_head, self.d_model]));
                    specs.push((names::head_bias(l, h, proj), vec![self.d_head]));
                }
            }
            specs.push((names::attn_out_weight(l), vec![self.d_model, self.d_model]));
            specs.push((names::attn_out_bias(l), vec![self.d_model]));
            specs.push((names::mlp_norm_gain(l), vec![self.d_model]));
            specs.push((names::mlp_norm_bias(l), vec![self.d_model]));
            specs.push((names::mlp_w1(l), vec![self.ffn_dim, self.d_model]));
            specs.push((names::mlp_b1(l), vec![self.ffn_dim]));
            specs.push((names::mlp_w2(l), vec![self.d_model, self.ffn_dim]));
            specs.push((names::mlp_b2(l), vec![self.d_model]));
        }
        specs
    }

    /// Canonical (name, shape) table for the task-head parameters.
    pub fn head_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        for (task, &classes) in &self.classes_per_task {
            specs.push((names::head_proj_weight(task), vec![classes, self.d_model]));
            specs.push((names::head_proj_bias(task), vec![classes]));
        }
        specs
    }

    /// Total trainable element count |theta|, all task heads included.
    pub fn total_param_elements(&self) -> usize {
        self.param_specs()
            .iter()
            .chain(self.head_specs().iter())
            .map(|(_, shape)| shape.iter().product::<usize>())
            .sum()
    }
}

/// Canonical parameter names. Everything that looks a tensor up by name
/// (forward, backward, fisher, merge) goes through these builders.
pub mod names {
    pub const TOKEN_EMB: &str = "embeddings.token";
    pub const POS_EMB: &str = "embeddings.position";

    pub fn attn_norm_gain(l: usize) -> String {
        format!("layers.{l}.attn.norm.gain")
    }
    pub fn attn_norm_bias(l: usize) -> String {
        format!("layers.{l}.attn.norm.bias")
    }
    pub fn head_weight(l: usize, h: usize, proj: &str) -> String {
        format!("layers.{l}.attn.head.{h}.{proj}.weight")
    }
    pub fn head_bias(l: usize, h: usize, proj: &str) -> String {
        format!("layers.{l}.attn.head.{h}.{proj}.bias")
    }
    pub fn attn_out_weight(l: usize) -> String {
        format!("layers.{l}.attn.out.weight")
    }
    pub fn attn_out_bias(l: usize) -> String {
        format!("layers.{l}.attn.out.bias")
    }
    pub fn mlp_norm_gain(l: usize) -> String {
        format!("layers.{l}.mlp.norm.gain")
    }
    pub fn mlp_norm_bias(l: usize) -> String {
        format!("layers.{l}.mlp.norm.bias")
    }
    pub fn mlp_w1(l: usize) -> String {
        format!("layers.{l}.mlp.w1")
    }
    pub fn mlp_b1(l: usize) -> String {
        format!("layers.{l}.mlp.b1")
    }
    pub fn mlp_w2(l: usize) -> String {
        format!("layers.{l}.mlp.w2")
    }
    pub fn mlp_b2(l: usize) -> String {
        format!("layers.{l}.mlp.b2")
    }
    pub fn head_proj_weight(task: &str) -> String {
        format!("heads.{task}.weight")
    }
    pub fn head_proj_bias(task: &str) -> String {
        format!("heads.{task}.bias")
    }
}

/// One task-specific classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    /// (n_classes, d_model)
    pub weight: Tensor,
    /// (n_classes,)
    pub bias: Tensor,
}

/// How a merged checkpoint was produced; recorded in its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// "mask-fisher" | "full-fisher" | "average"
    pub method: String,
    /// Content digests of the input checkpoint files, in merge order.
    pub inputs: Vec<String>,
    pub lambdas: Vec<f64>,
    pub zero_denominator_policy: String,
    /// Mapping-scheme flags in effect (empty for average / full-fisher).
    pub flags: BTreeMap<String, bool>,
}

/// A named parameter map for one encoder plus its task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Encoder parameters, keyed by canonical name. These are what merging
    /// operates on.
    pub params: BTreeMap<String, Tensor>,
    /// Task heads, carried verbatim (never merged).
    pub heads: BTreeMap<String, TaskHead>,
    /// Present only on merged checkpoints.
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    /// Random initialization: uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for
    /// weights, zeros for biases, ones for layer-norm gains. Deterministic
    /// given the seed. Carries a head for every task in the config.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_specs() {
            params.insert(name.clone(), init_tensor(&name, &shape, &mut rng)?);
        }
        let mut heads = BTreeMap::new();
        for (task, &classes) in &config.classes_per_task {
            let bound = 1.0 / (config.d_model as f64).sqrt();
            let weight = uniform_tensor(&[classes, config.d_model], bound, &mut rng)?;
            let bias = Tensor::zeros(&[classes]);
            heads.insert(task.clone(), TaskHead { weight, bias });
        }
        Ok(Checkpoint {
            config: config.clone(),
            params,
            heads,
            provenance: None,
        })
    }

    /// Look up any tensor by flat name; `heads.{task}.weight` and
    /// `heads.{task}.bias` route into the head map.
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        if let Some(t) = self.params.get(name) {
            return Ok(t);
        }
        if let Some(rest) = name.strip_prefix("heads.") {
            if let Some(task) = rest.strip_suffix(".weight") {
                if let Some(h) = self.heads.get(task) {
                    return Ok(&h.weight);
                }
            } else if let Some(task) = rest.strip_suffix(".bias") {
                if let Some(h) = self.heads.get(task) {
                    return Ok(&h.bias);
                }
            }
        }
        Err(Error::MissingParam { name: name.to_string() })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::MissingParam {
            name: name.to_string(),
        })
    }

    /// Mutable flat-name lookup, mirroring [`Checkpoint::tensor`]. Used by
    /// the training loop to apply updates.
    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        if self.params.contains_key(name) {
            return Ok(self.params.get_mut(name).expect("checked"));
        }
        if let Some(rest) = name.strip_prefix("heads.") {
            if let Some(task) = rest.strip_suffix(".weight") {
                if let Some(h) = self.heads.get_mut(task) {
                    return Ok(&mut h.weight);
                }
            } else if let Some(task) = rest.strip_suffix(".bias") {
                if let Some(h) = self.heads.get_mut(task) {
                    return Ok(&mut h.bias);
                }
            }
        }
        Err(Error::MissingParam { name: name.to_string() })
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead> {
        self.heads.get(task_id).ok_or_else(|| Error::MissingHead {
            task_id: task_id.to_string(),
        })
    }

    /// All (name, tensor) pairs in canonical serialization order:
    /// encoder parameters first, then heads, both name-sorted.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (task, head) in &self.heads {
            out.push((names::head_proj_weight(task), &head.weight));
            out.push((names::head_proj_bias(task), &head.bias));
        }
        out
    }

    /// Every parameter name present exactly once with shapes consistent with
    /// the config; heads must be a subset of the config's tasks.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} encoder parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, shape) in &specs {
            let t = self.param(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    detail: format!("{name}: {:?} vs expected {:?}", t.shape(), shape),
                });
            }
        }
        for (task, head) in &self.heads {
            let classes = self.config.n_classes(task)?;
            if head.weight.shape() != [classes, self.config.d_model]
                || head.bias.shape() != [classes]
            {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    detail: format!("head {task} shapes inconsistent with config"),
                });
            }
        }
        Ok(())
    }

    /// Siblings: identical configs and identical encoder parameter name sets.
    pub fn is_sibling_of(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self.params.keys().zip(other.params.keys()).all(|(a, b)| a == b)
    }

    /// Copy of this checkpoint carrying only the given task heads. Mirrors a
    /// published fine-tuned checkpoint that ships with its own head only.
    pub fn retaining_heads(&self, tasks: &[&str]) -> Result<Checkpoint> {
        let mut heads = BTreeMap::new();
        for &task in tasks {
            heads.insert(task.to_string(), self.head(task)?.clone());
        }
        Ok(Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            heads,
            provenance: self.provenance.clone(),
        })
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha20Rng) -> Result<Tensor> {
    if name.ends_with(".gain") {
        return Tensor::full(shape, 1.0);
    }
    if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        return Ok(Tensor::zeros(shape));
    }
    // weights and embeddings: uniform with fan-in scaling (last dim is fan-in
    // for projection matrices; embeddings use their width)
    let fan_in = *shape.last().expect("non-scalar shape") as f64;
    uniform_tensor(shape, 1.0 / fan_in.sqrt(), rng)
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data)
}

/// The (H x L, D x L) mask node structure. Entries are 1.0 in every
/// production path; [`MaskSet::with_values`] exists for gradient checking
/// and ablation diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// (heads, layers)
    pub m_mha: Tensor,
    /// (ffn_dim, layers)
    pub m_mlp: Tensor,
}

impl MaskSet {
    /// The production mask set: all ones.
    pub fn ones(config: &ModelConfig) -> MaskSet {
        MaskSet {
            m_mha: Tensor::full(&[config.heads, config.layers], 1.0).expect("finite"),
            m_mlp: Tensor::full(&[config.ffn_dim, config.layers], 1.0).expect("finite"),
        }
    }

    /// Arbitrary mask values, for finite-difference checks and head/filter
    /// ablation experiments. Not a production path.
    pub fn with_values(m_mha: Tensor, m_mlp: Tensor) -> Result<MaskSet> {
        if m_mha.shape().len() != 2 || m_mlp.shape().len() != 2
            || m_mha.shape()[1] != m_mlp.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "mask_set",
                detail: format!("{:?} vs {:?}", m_mha.shape(), m_mlp.shape()),
            });
        }
        Ok(MaskSet { m_mha, m_mlp })
    }

    pub fn matches(&self, config: &ModelConfig) -> Result<()> {
        if self.m_mha.shape() != [config.heads, config.layers]
            || self.m_mlp.shape() != [config.ffn_dim, config.layers]
        {
            return Err(Error::ShapeMismatch {
                op: "mask_set",
                detail: format!(
                    "m_mha {:?} / m_mlp {:?} vs config H={} D={} L={}",
                    self.m_mha.shape(),
                    self.m_mlp.shape(),
                    config.heads,
                    config.ffn_dim,
                    config.layers
                ),
            });
        }
        Ok(())
    }
}

/// One labelled sequence for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub task_id: String,
}

impl Example {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.tokens.len(),
                max: config.max_seq_len,
            });
        }
        for &t in &self.tokens {
            if t >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: config.vocab_size,
                });
            }
        }
        let classes = config.n_classes(&self.task_id)?;
        if self.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: self.label,
                task_id: self.task_id.clone(),
                n_classes: classes,
            });
        }
        Ok(())
    }
}
