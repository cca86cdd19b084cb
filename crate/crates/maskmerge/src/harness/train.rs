//! Toy training loop: plain SGD over per-example gradients with seeded
//! shuffling. Deliberately minimal; what matters downstream is that children
//! are deterministic siblings of the parent.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::{derive_seed, Split, SyntheticTask};
use crate::error::{Error, Result};
use crate::grad::param_grad;
use crate::model::{forward, Checkpoint, Example, MaskSet, ModelConfig};

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training examples generated per task; batches sample from this pool.
    pub pool_size: usize,
}

impl TrainParams {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pool_size == 0 {
            return Err(Error::BadProtocolConfig(
                "batch_size and pool_size must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::BadProtocolConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn check_task_fits(config: &ModelConfig, task: &SyntheticTask) -> Result<()> {
    task.validate()?;
    if task.vocab_size != config.vocab_size || task.seq_len > config.max_seq_len {
        return Err(Error::BadProtocolConfig(format!(
            "task {} does not fit the model config",
            task.task_id
        )));
    }
    let classes = config.n_classes(&task.task_id)?;
    if classes != task.n_classes() {
        return Err(Error::BadProtocolConfig(format!(
            "task {} declares {} classes, config says {}",
            task.task_id,
            task.n_classes(),
            classes
        )));
    }
    Ok(())
}

/// One SGD step on a batch: theta -= lr * mean(per-example gradients).
fn sgd_step(ckpt: &mut Checkpoint, batch: &[&Example], lr: f64, step: usize) -> Result<()> {
    let grads = batch
        .par_iter()
        .map(|ex| param_grad(ckpt, ex))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step },
            other => other,
        })?;
    let scale = -lr / batch.len() as f64;
    let names: Vec<String> = grads[0].grads.keys().cloned().collect();
    for name in names {
        let slot = ckpt.tensor_mut(&name)?;
        for g in &grads {
            slot.axpy(scale, &g.grads[&name])
                .map_err(|_| Error::Diverged { step })?;
        }
    }
    Ok(())
}

/// Train a fresh parent on a mixture of all tasks, so children fine-tuned
/// from it share an optimization-trajectory prefix. Deterministic given the
/// seed.
pub fn pretrain_parent(
    config: &ModelConfig,
    tasks: &[SyntheticTask],
    params: &TrainParams,
    seed: u64,
) -> Result<Checkpoint> {
    params.validate()?;
    if tasks.is_empty() {
        return Err(Error::BadProtocolConfig("pretraining needs at least one task".into()));
    }
    for task in tasks {
        check_task_fits(config, task)?;
    }
    let mut ckpt = Checkpoint::init_random(config, derive_seed(seed, 0))?;
    let pools: Vec<Vec<Example>> = tasks
        .iter()
        .map(|t| t.examples(Split::Train, params.pool_size))
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 1));
    for step in 0..params.steps {
        let batch: Vec<&Example> = (0..params.batch_size)
            .map(|_| {
                let t = rng.gen_range(0..pools.len());
                &pools[t][rng.gen_range(0..pools[t].len())]
            })
            .collect();
        sgd_step(&mut ckpt, &batch, params.lr, step)?;
    }
    Ok(ckpt)
}

/// Fine-tune a copy of the parent on one task. With steps = 0 this returns
/// the parent unchanged.
pub fn finetune(
    parent: &Checkpoint,
    task: &SyntheticTask,
    params: &TrainParams,
    seed: u64,
) -> Result<Checkpoint> {
    params.validate()?;
    check_task_fits(&parent.config, task)?;
    parent.head(&task.task_id)?;
    let mut ckpt = parent.clone();
    let pool = task.examples(Split::Train, params.pool_size);
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 2));
    for step in 0..params.steps {
        let batch: Vec<&Example> = (0..params.batch_size)
            .map(|_| &pool[rng.gen_range(0..pool.len())])
            .collect();
        sgd_step(&mut ckpt, &batch, params.lr, step)?;
    }
    Ok(ckpt)
}

/// Fraction correct on the task's held-out split, using the requested head.
pub fn evaluate(
    ckpt: &Checkpoint,
    task: &SyntheticTask,
    head_task: &str,
    eval_size: usize,
) -> Result<f64> {
    check_task_fits_for_eval(ckpt, task, head_task)?;
    let masks = MaskSet::ones(&ckpt.config);
    let examples = task.examples(Split::Eval, eval_size);
    let mut correct = 0usize;
    for ex in &examples {
        let rerouted = Example {
            tokens: ex.tokens.clone(),
            label: ex.label,
            task_id: head_task.to_string(),
        };
        let (logits, _) = forward(ckpt, &masks, &rerouted)?;
        let pred = argmax(logits.data());
        if pred == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn check_task_fits_for_eval(ckpt: &Checkpoint, task: &SyntheticTask, head_task: &str) -> Result<()> {
    task.validate()?;
    ckpt.head(head_task)?;
    let classes = ckpt.config.n_classes(head_task)?;
    if classes != task.n_classes() {
        return Err(Error::BadProtocolConfig(format!(
            "head {head_task} has {classes} classes, task {} needs {}",
            task.task_id,
            task.n_classes()
        )));
    }
    Ok(())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::LabelRule;
    use std::collections::BTreeMap;

    fn setup() -> (ModelConfig, Vec<SyntheticTask>) {
        let tasks = vec![
            SyntheticTask {
                task_id: "p".into(),
                seed: 5,
                rule: LabelRule::Presence,
                seq_len: 8,
                vocab_size: 24,
                signal_tokens: vec![0],
            },
            SyntheticTask {
                task_id: "q".into(),
                seed: 6,
                rule: LabelRule::Presence,
                seq_len: 8,
                vocab_size: 24,
                signal_tokens: vec![4],
            },
        ];
        let mut classes = BTreeMap::new();
        classes.insert("p".to_string(), 2);
        classes.insert("q".to_string(), 2);
        let config = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_head: 8,
            ffn_dim: 16,
            vocab_size: 24,
            max_seq_len: 8,
            classes_per_task: classes,
        };
        (config, tasks)
    }

    fn quick_params() -> TrainParams {
        TrainParams { steps: 30, batch_size: 8, lr: 0.3, pool_size: 256 }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (config, tasks) = setup();
        let a = pretrain_parent(&config, &tasks, &quick_params(), 77).unwrap();
        let b = pretrain_parent(&config, &tasks, &quick_params(), 77).unwrap();
        assert_eq!(a, b);
        let c = pretrain_parent(&config, &tasks, &quick_params(), 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_step_finetune_returns_the_parent_unchanged() {
        let (config, tasks) = setup();
        let parent = pretrain_parent(&config, &tasks, &quick_params(), 1).unwrap();
        let params = TrainParams { steps: 0, ..quick_params() };
        let child = finetune(&parent, &tasks[0], &params, 2).unwrap();
        assert_eq!(child, parent);
    }

    #[test]
    fn finetuned_children_are_siblings_and_differ_per_task() {
        let (config, tasks) = setup();
        let parent = pretrain_parent(&config, &tasks, &quick_params(), 3).unwrap();
        let a = finetune(&parent, &tasks[0], &quick_params(), 4).unwrap();
        let b = finetune(&parent, &tasks[1], &quick_params(), 4).unwrap();
        assert!(a.is_sibling_of(&parent));
        assert!(a.is_sibling_of(&b));
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn evaluation_is_deterministic_and_in_range() {
        let (config, tasks) = setup();
        let parent = pretrain_parent(&config, &tasks, &quick_params(), 9).unwrap();
        let acc1 = evaluate(&parent, &tasks[0], "p", 64).unwrap();
        let acc2 = evaluate(&parent, &tasks[0], "p", 64).unwrap();
        assert_eq!(acc1, acc2);
        assert!((0.0..=1.0).contains(&acc1));
        assert!(evaluate(&parent, &tasks[0], "nope", 64).is_err());
    }

    #[test]
    fn random_model_on_binary_task_is_near_chance() {
        let (config, tasks) = setup();
        let ckpt = Checkpoint::init_random(&config, 123).unwrap();
        let acc = evaluate(&ckpt, &tasks[0], "p", 400).unwrap();
        assert!((0.35..=0.65).contains(&acc), "accuracy {acc}");
    }
}
