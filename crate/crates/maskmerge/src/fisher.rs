//! Diagonal Fisher information estimation over a sample of examples, for
//! mask nodes (the cheap path) and for all parameters (the baseline).
//!
//! Each entry is the mean over the first n examples of the squared
//! per-example loss gradient. Per-example gradients may be computed in
//! parallel, but the accumulation is always sequential in example-index
//! order, so results are bit-stable regardless of scheduling.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{mask_grad, param_grad};
use crate::io;
use crate::model::{Checkpoint, Example, ModelConfig};
use crate::tensor::Tensor;

/// Examples per parallel batch; accumulation order is unaffected.
const GRAD_BATCH: usize = 32;

/// Reported reference speedup of the mask path over full-parameter Fisher
/// estimation on a BERT (Large)-scale model. Recorded in bench reports for
/// comparison only; never asserted.
pub const BERT_LARGE_REFERENCE_SPEEDUP: f64 = 57.4;

/// Diagonal Fisher values of the (H + D) x L mask nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFisher {
    /// (heads, layers)
    pub f_mha: Tensor,
    /// (ffn_dim, layers)
    pub f_mlp: Tensor,
    pub n_samples: usize,
    pub task_id: String,
    /// Content digest of the checkpoint these values were estimated on.
    pub checkpoint_digest: String,
}

impl MaskFisher {
    pub fn matches(&self, config: &ModelConfig) -> Result<()> {
        if self.f_mha.shape() != [config.heads, config.layers]
            || self.f_mlp.shape() != [config.ffn_dim, config.layers]
        {
            return Err(Error::ShapeMismatch {
                op: "mask_fisher",
                detail: format!(
                    "f_mha {:?} / f_mlp {:?} vs config H={} D={} L={}",
                    self.f_mha.shape(),
                    self.f_mlp.shape(),
                    config.heads,
                    config.ffn_dim,
                    config.layers
                ),
            });
        }
        Ok(())
    }

    /// Entries are squares, so they must be non-negative.
    pub fn validate(&self) -> Result<()> {
        let ok = self.f_mha.data().iter().chain(self.f_mlp.data()).all(|&v| v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "mask_fisher" })
        }
    }

    pub fn node_count(&self) -> usize {
        self.f_mha.numel() + self.f_mlp.numel()
    }
}

/// Diagonal Fisher values for every parameter of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FullFisher {
    pub fisher: BTreeMap<String, Tensor>,
    pub n_samples: usize,
    pub task_id: String,
    pub checkpoint_digest: String,
}

impl FullFisher {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .fisher
            .values()
            .all(|t| t.data().iter().all(|&v| v >= 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { op: "full_fisher" })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherMethod {
    Mask,
    Full,
}

/// How many scalar gradients one estimation pass needs: (H + D) x L for the
/// mask method, the full parameter element count otherwise.
pub fn count_gradient_params(config: &ModelConfig, method: FisherMethod) -> usize {
    match method {
        FisherMethod::Mask => (config.heads + config.ffn_dim) * config.layers,
        FisherMethod::Full => config.total_param_elements(),
    }
}

fn take_examples<'a>(
    ckpt: &Checkpoint,
    data: &'a [Example],
    n: usize,
) -> Result<(&'a [Example], String)> {
    if n == 0 || data.len() < n {
        return Err(Error::NotEnoughExamples {
            needed: n.max(1),
            got: data.len(),
        });
    }
    let sample = &data[..n];
    let task_id = sample[0].task_id.clone();
    for ex in sample {
        if ex.task_id != task_id {
            return Err(Error::MixedTasks {
                first: task_id,
                second: ex.task_id.clone(),
            });
        }
        ex.validate(&ckpt.config)?;
    }
    Ok((sample, task_id))
}

/// Mean squared mask gradient over the first n examples of `data`.
/// Deterministic given the example order; shuffling is the caller's job.
pub fn estimate_mask_fisher(ckpt: &Checkpoint, data: &[Example], n: usize) -> Result<MaskFisher> {
    let (sample, task_id) = take_examples(ckpt, data, n)?;
    let config = &ckpt.config;
    let mut sum_mha = Tensor::zeros(&[config.heads, config.layers]);
    let mut sum_mlp = Tensor::zeros(&[config.ffn_dim, config.layers]);
    for batch in sample.chunks(GRAD_BATCH) {
        let grads = batch
            .par_iter()
            .map(|ex| mask_grad(ckpt, ex))
            .collect::<Result<Vec<_>>>()?;
        for g in grads {
            accumulate_squares(&mut sum_mha, &g.g_mha);
            accumulate_squares(&mut sum_mlp, &g.g_mlp);
        }
    }
    let inv = 1.0 / n as f64;
    Ok(MaskFisher {
        f_mha: sum_mha.scale(inv)?,
        f_mlp: sum_mlp.scale(inv)?,
        n_samples: n,
        task_id,
        checkpoint_digest: io::checkpoint_digest(ckpt)?,
    })
}

/// Mean squared parameter gradient over the first n examples of `data`.
/// Parameters off the sample's compute path (other task heads) come out
/// zero, never absent.
pub fn estimate_full_fisher(ckpt: &Checkpoint, data: &[Example], n: usize) -> Result<FullFisher> {
    let (sample, task_id) = take_examples(ckpt, data, n)?;
    let mut sums: BTreeMap<String, Tensor> = ckpt
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, Tensor::zeros(t.shape())))
        .collect();
    for batch in sample.chunks(GRAD_BATCH) {
        let grads = batch
            .par_iter()
            .map(|ex| param_grad(ckpt, ex))
            .collect::<Result<Vec<_>>>()?;
        for g in grads {
            for (name, slot) in sums.iter_mut() {
                accumulate_squares(slot, &g.grads[name]);
            }
        }
    }
    let inv = 1.0 / n as f64;
    let fisher = sums
        .into_iter()
        .map(|(name, t)| Ok((name, t.scale(inv)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(FullFisher {
        fisher,
        n_samples: n,
        task_id,
        checkpoint_digest: io::checkpoint_digest(ckpt)?,
    })
}

fn accumulate_squares(sum: &mut Tensor, g: &Tensor) {
    for (s, &v) in sum.data_mut().iter_mut().zip(g.data()) {
        *s += v * v;
    }
}

/// Wall-clock comparison of the two estimators on identical inputs. Model
/// and data setup happen before any timer starts; reported times are the
/// medians over `reps` runs, interleaved so background load hits both paths
/// alike.
#[derive(Debug, Clone, Serialize)]
pub struct FisherBench {
    pub n_samples: usize,
    pub reps: usize,
    pub mask_seconds: f64,
    pub full_seconds: f64,
    /// full_seconds / mask_seconds
    pub wallclock_ratio: f64,
    pub mask_grad_params: usize,
    pub full_grad_params: usize,
    /// |theta| / ((H + D) x L), exact arithmetic
    pub count_ratio: f64,
    /// Reference figure for BERT (Large)-scale models; not a target.
    pub reference_speedup_bert_large: f64,
}

pub fn bench_fisher(ckpt: &Checkpoint, data: &[Example], n: usize, reps: usize) -> Result<FisherBench> {
    let reps = reps.max(1);
    // warm-up outside the timers
    estimate_mask_fisher(ckpt, data, n)?;
    estimate_full_fisher(ckpt, data, n)?;

    let mut mask_times = Vec::with_capacity(reps);
    let mut full_times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        estimate_full_fisher(ckpt, data, n)?;
        full_times.push(t.elapsed().as_secs_f64());

        let t = Instant::now();
        estimate_mask_fisher(ckpt, data, n)?;
        mask_times.push(t.elapsed().as_secs_f64());
    }
    let mask_seconds = median(&mut mask_times);
    let full_seconds = median(&mut full_times);
    let mask_grad_params = count_gradient_params(&ckpt.config, FisherMethod::Mask);
    let full_grad_params = count_gradient_params(&ckpt.config, FisherMethod::Full);
    Ok(FisherBench {
        n_samples: n,
        reps,
        mask_seconds,
        full_seconds,
        wallclock_ratio: full_seconds / mask_seconds,
        mask_grad_params,
        full_grad_params,
        count_ratio: full_grad_params as f64 / mask_grad_params as f64,
        reference_speedup_bert_large: BERT_LARGE_REFERENCE_SPEEDUP,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let k = values.len() / 2;
    if values.len() % 2 == 1 {
        values[k]
    } else {
        0.5 * (values[k - 1] + values[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::names;
    use std::collections::BTreeMap as Map;

    fn cfg() -> ModelConfig {
        let mut classes = Map::new();
        classes.insert("t".to_string(), 2);
        classes.insert("u".to_string(), 2);
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 8,
            d_head: 4,
            ffn_dim: 4,
            vocab_size: 9,
            max_seq_len: 4,
            classes_per_task: classes,
        }
    }

    fn examples(task: &str, count: usize) -> Vec<Example> {
        (0..count)
            .map(|i| Example {
                tokens: vec![i % 9, (3 * i + 1) % 9, (5 * i + 2) % 9],
                label: i % 2,
                task_id: task.to_string(),
            })
            .collect()
    }

    #[test]
    fn count_follows_the_mask_formula() {
        let mut c = cfg();
        c.heads = 2;
        c.ffn_dim = 8;
        c.d_head = 4;
        c.d_model = 8;
        assert_eq!(count_gradient_params(&c, FisherMethod::Mask), 20);

        // BERT-Base-shaped config
        let mut classes = Map::new();
        classes.insert("t".to_string(), 2);
        let base = ModelConfig {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_head: 64,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            classes_per_task: classes,
        };
        assert_eq!(count_gradient_params(&base, FisherMethod::Mask), 37008);
        assert_eq!(
            count_gradient_params(&base, FisherMethod::Full),
            base.total_param_elements()
        );
    }

    #[test]
    fn mask_count_is_strictly_below_full_count() {
        let c = cfg();
        assert!(
            count_gradient_params(&c, FisherMethod::Mask)
                < count_gradient_params(&c, FisherMethod::Full)
        );
    }

    #[test]
    fn single_sample_fisher_is_the_squared_gradient() {
        let ckpt = Checkpoint::init_random(&cfg(), 31).unwrap();
        let data = examples("t", 3);
        let mf = estimate_mask_fisher(&ckpt, &data, 1).unwrap();
        let g = mask_grad(&ckpt, &data[0]).unwrap();
        for (f, gv) in mf.f_mha.data().iter().zip(g.g_mha.data()) {
            assert_eq!(*f, gv * gv);
        }
        for (f, gv) in mf.f_mlp.data().iter().zip(g.g_mlp.data()) {
            assert_eq!(*f, gv * gv);
        }

        let ff = estimate_full_fisher(&ckpt, &data, 1).unwrap();
        let pg = param_grad(&ckpt, &data[0]).unwrap();
        for (name, t) in &ff.fisher {
            for (f, gv) in t.data().iter().zip(pg.grads[name].data()) {
                assert_eq!(*f, gv * gv);
            }
        }
    }

    #[test]
    fn constant_logit_model_has_zero_mask_fisher() {
        let mut ckpt = Checkpoint::init_random(&cfg(), 32).unwrap();
        let head = ckpt.heads.get_mut("t").unwrap();
        head.weight = Tensor::zeros(&[2, 8]);
        let mf = estimate_mask_fisher(&ckpt, &examples("t", 4), 4).unwrap();
        assert!(mf.f_mha.data().iter().all(|&v| v == 0.0));
        assert!(mf.f_mlp.data().iter().all(|&v| v == 0.0));

        // same for the encoder side of the full-parameter estimate; only the
        // bias of the active head keeps a gradient
        let ff = estimate_full_fisher(&ckpt, &examples("t", 4), 4).unwrap();
        for (name, t) in &ff.fisher {
            if name == "heads.t.bias" {
                assert!(t.data().iter().any(|&v| v > 0.0));
            } else if name != "heads.t.weight" {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn fisher_entries_are_non_negative() {
        let ckpt = Checkpoint::init_random(&cfg(), 33).unwrap();
        let mf = estimate_mask_fisher(&ckpt, &examples("t", 8), 8).unwrap();
        mf.validate().unwrap();
        let ff = estimate_full_fisher(&ckpt, &examples("t", 2), 2).unwrap();
        ff.validate().unwrap();
    }

    #[test]
    fn sample_order_permutation_changes_little() {
        let ckpt = Checkpoint::init_random(&cfg(), 34).unwrap();
        let data = examples("t", 6);
        let mut reversed = data.clone();
        reversed.reverse();
        let a = estimate_mask_fisher(&ckpt, &data, 6).unwrap();
        let b = estimate_mask_fisher(&ckpt, &reversed, 6).unwrap();
        for (x, y) in a.f_mha.data().iter().zip(b.f_mha.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        for (x, y) in a.f_mlp.data().iter().zip(b.f_mlp.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn repeated_estimation_is_bit_identical() {
        let ckpt = Checkpoint::init_random(&cfg(), 35).unwrap();
        let data = examples("t", 8);
        let a = estimate_mask_fisher(&ckpt, &data, 8).unwrap();
        let b = estimate_mask_fisher(&ckpt, &data, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unused_heads_have_zero_full_fisher() {
        let ckpt = Checkpoint::init_random(&cfg(), 36).unwrap();
        let ff = estimate_full_fisher(&ckpt, &examples("t", 2), 2).unwrap();
        assert!(ff.fisher[&names::head_proj_weight("u")]
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(ff.fisher.contains_key(&names::head_proj_weight("t")));
    }

    #[test]
    fn estimator_rejects_bad_input() {
        let ckpt = Checkpoint::init_random(&cfg(), 37).unwrap();
        assert!(matches!(
            estimate_mask_fisher(&ckpt, &[], 1),
            Err(Error::NotEnoughExamples { .. })
        ));
        assert!(matches!(
            estimate_mask_fisher(&ckpt, &examples("t", 4), 0),
            Err(Error::NotEnoughExamples { .. })
        ));
        let mut mixed = examples("t", 2);
        mixed.extend(examples("u", 2));
        assert!(matches!(
            estimate_mask_fisher(&ckpt, &mixed, 4),
            Err(Error::MixedTasks { .. })
        ));
        // taking only the single-task prefix is fine
        assert!(estimate_mask_fisher(&ckpt, &mixed, 2).is_ok());
    }
}
