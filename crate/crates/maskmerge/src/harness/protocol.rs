//! The pairwise merge-and-evaluate protocol and its report.
//!
//! For every unordered task pair, every merge method, and every Fisher
//! sample count: merge the two fine-tuned children and evaluate the result
//! on both tasks with their respective heads. Scores are normalized to 100 x
//! merged / fine-tuned per task; each (method, n) cell is aggregated as the
//! median of its normalized scores.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, evaluate, finetune, pretrain_parent, LabelRule, Split, SyntheticTask, TrainParams};
use crate::error::{Error, Result};
use crate::fisher::{estimate_full_fisher, estimate_mask_fisher, FullFisher, MaskFisher};
use crate::io;
use crate::merge::{assign_weights, full_fisher_merge, merge, simple_average, MappingFlags, MergeSpec};
use crate::model::{Checkpoint, ModelConfig};

const SEED_PRETRAIN: u64 = 0x01;
const SEED_FINETUNE: u64 = 0x02;
const SEED_TASKS: u64 = 0x03;
const SEED_FISHER_SHUFFLE: u64 = 0x04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MergeMethod {
    Average,
    MaskFisher,
    FullFisher,
}

impl MergeMethod {
    pub fn parse(s: &str) -> Result<MergeMethod> {
        match s {
            "average" => Ok(MergeMethod::Average),
            "mask-fisher" => Ok(MergeMethod::MaskFisher),
            "full-fisher" => Ok(MergeMethod::FullFisher),
            other => Err(Error::BadProtocolConfig(format!(
                "unknown method {other:?} (expected average | mask-fisher | full-fisher)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::MaskFisher => "mask-fisher",
            MergeMethod::FullFisher => "full-fisher",
        }
    }

    fn uses_fisher_samples(self) -> bool {
        self != MergeMethod::Average
    }
}

// ---------------------------------------------------------------------------
// declarative configuration (TOML)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub master_seed: u64,
    pub model: ModelSection,
    pub pretrain: TrainSection,
    pub finetune: TrainSection,
    pub protocol: ProtocolSection,
    pub tasks: Vec<TaskSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolSection {
    /// Any of "average", "mask-fisher", "full-fisher".
    pub methods: Vec<String>,
    /// Fisher sample counts to sweep (ignored by plain averaging).
    pub n_samples: Vec<usize>,
    pub eval_size: usize,
    /// Training examples generated per task; also the pool Fisher samples
    /// are drawn from.
    pub train_pool: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSection {
    pub id: String,
    /// presence | parity | order | majority
    pub rule: String,
    /// Generator seed; derived from the master seed when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Width of the signal-token block reserved per task.
const SIGNAL_BLOCK: usize = 4;

impl ProtocolConfig {
    pub fn from_toml_str(text: &str) -> Result<ProtocolConfig> {
        let cfg: ProtocolConfig = toml::from_str(text)
            .map_err(|e| Error::BadProtocolConfig(format!("TOML parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ProtocolConfig> {
        ProtocolConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::BadProtocolConfig("no tasks defined".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(&t.id) {
                return Err(Error::BadProtocolConfig(format!("duplicate task id {:?}", t.id)));
            }
            LabelRule::parse(&t.rule)?;
        }
        for m in &self.protocol.methods {
            MergeMethod::parse(m)?;
        }
        if self.protocol.methods.is_empty() {
            return Err(Error::BadProtocolConfig("no merge methods requested".into()));
        }
        let needs_n = self
            .protocol
            .methods
            .iter()
            .any(|m| MergeMethod::parse(m).map(|m| m.uses_fisher_samples()).unwrap_or(false));
        if needs_n && self.protocol.n_samples.is_empty() {
            return Err(Error::BadProtocolConfig(
                "fisher-based methods need at least one n_samples entry".into(),
            ));
        }
        if let Some(&max_n) = self.protocol.n_samples.iter().max() {
            if max_n > self.protocol.train_pool {
                return Err(Error::BadProtocolConfig(format!(
                    "n_samples {max_n} exceeds the train pool {}",
                    self.protocol.train_pool
                )));
            }
        }
        if self.model.vocab_size < SIGNAL_BLOCK * self.tasks.len() + 8 {
            return Err(Error::BadProtocolConfig(format!(
                "vocab_size {} too small for {} tasks plus background tokens",
                self.model.vocab_size,
                self.tasks.len()
            )));
        }
        if self.protocol.eval_size == 0 {
            return Err(Error::BadProtocolConfig("eval_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Materialize the task list: per-task seeds (given or derived) and
    /// disjoint signal-token blocks assigned by position.
    pub fn build_tasks(&self) -> Result<Vec<SyntheticTask>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.tasks.len());
        for (i, section) in self.tasks.iter().enumerate() {
            let rule = LabelRule::parse(&section.rule)?;
            let seed = section
                .seed
                .unwrap_or_else(|| derive_seed(derive_seed(self.master_seed, SEED_TASKS), i as u64));
            let base = SIGNAL_BLOCK * i;
            let task = SyntheticTask {
                task_id: section.id.clone(),
                seed,
                rule,
                seq_len: self.model.max_seq_len,
                vocab_size: self.model.vocab_size,
                signal_tokens: (base..base + rule.signal_tokens_needed()).collect(),
            };
            task.validate()?;
            out.push(task);
        }
        Ok(out)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let tasks = self.build_tasks()?;
        let mut classes = BTreeMap::new();
        for t in &tasks {
            classes.insert(t.task_id.clone(), t.n_classes());
        }
        let config = ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            d_model: self.model.heads * self.model.d_head,
            d_head: self.model.d_head,
            ffn_dim: self.model.ffn_dim,
            vocab_size: self.model.vocab_size,
            max_seq_len: self.model.max_seq_len,
            classes_per_task: classes,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn methods(&self) -> Result<Vec<MergeMethod>> {
        self.protocol.methods.iter().map(|m| MergeMethod::parse(m)).collect()
    }

    fn pretrain_params(&self) -> TrainParams {
        TrainParams {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            pool_size: self.protocol.train_pool,
        }
    }

    fn finetune_params(&self) -> TrainParams {
        TrainParams {
            steps: self.finetune.steps,
            batch_size: self.finetune.batch_size,
            lr: self.finetune.lr,
            pool_size: self.protocol.train_pool,
        }
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: String,
    pub raw_accuracy: f64,
    pub finetuned_accuracy: f64,
    /// 100 x raw / finetuned.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub pair: (String, String),
    pub method: String,
    /// None for plain averaging, which ignores the sample sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    pub evals: Vec<TaskEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    /// Median of the normalized scores over all (pair, task) cells.
    pub median_normalized: f64,
    /// median_normalized minus plain averaging's median.
    pub delta_vs_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub master_seed: u64,
    pub tasks: Vec<String>,
    pub methods: Vec<String>,
    pub n_samples: Vec<usize>,
    pub parent_accuracy: BTreeMap<String, f64>,
    pub finetuned_accuracy: BTreeMap<String, f64>,
    pub records: Vec<MergeRecord>,
    pub summaries: Vec<MethodSummary>,
    /// Wall-clock spent inside Fisher estimation, per method. Timing only;
    /// excluded from the content digest.
    pub fisher_runtime_seconds: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

impl EvalReport {
    /// Digest of everything except wall-clock fields; two runs with the same
    /// master seed must agree on this.
    pub fn content_digest(&self) -> String {
        let mut clone = self.clone();
        for v in clone.fisher_runtime_seconds.values_mut() {
            *v = 0.0;
        }
        clone.total_seconds = 0.0;
        io::sha256_hex(&serde_json::to_vec(&clone).expect("report serializes"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary: methods x sample counts, with deltas against
    /// plain averaging.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "pairwise merge protocol: {} tasks, median normalized score (100 = fine-tuned)\n",
            self.tasks.len()
        ));
        let cell = |method: &str, n: Option<usize>| -> String {
            self.summaries
                .iter()
                .find(|s| s.method == method && s.n_samples == n)
                .map(|s| format!("{:7.2} ({:+.2})", s.median_normalized, s.delta_vs_average))
                .unwrap_or_else(|| format!("{:>15}", "-"))
        };
        let mut header = format!("{:<13}", "method");
        if self.methods.iter().any(|m| m == "average") {
            header.push_str(&format!("{:>16}", "(no samples)"));
        }
        for n in &self.n_samples {
            header.push_str(&format!("{:>16}", format!("n={n}")));
        }
        out.push_str(&header);
        out.push('\n');
        for method in &self.methods {
            let mut line = format!("{:<13}", method);
            if self.methods.iter().any(|m| m == "average") {
                if method == "average" {
                    line.push_str(&format!("{:>16}", cell(method, None)));
                } else {
                    line.push_str(&format!("{:>16}", ""));
                }
            }
            for &n in &self.n_samples {
                if method == "average" {
                    line.push_str(&format!("{:>16}", ""));
                } else {
                    line.push_str(&format!("{:>16}", cell(method, Some(n))));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out.push_str("per-task fine-tuned accuracy:");
        for (task, acc) in &self.finetuned_accuracy {
            out.push_str(&format!(" {task}={acc:.3}"));
        }
        out.push('\n');
        out
    }
}

/// Standard median: mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let k = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[k]
    } else {
        0.5 * (sorted[k - 1] + sorted[k])
    }
}

// ---------------------------------------------------------------------------
// the protocol itself
// ---------------------------------------------------------------------------

/// Run the full pairwise protocol for one master seed: pretrain a parent,
/// fine-tune one child per task, estimate Fisher where a method needs it,
/// merge every unordered pair with every method, and evaluate each merge on
/// both tasks with their respective heads.
pub fn run_pairwise_protocol(pc: &ProtocolConfig) -> Result<EvalReport> {
    let t_total = Instant::now();
    pc.validate()?;
    let tasks = pc.build_tasks()?;
    let config = pc.model_config()?;
    let methods = pc.methods()?;
    let master = pc.master_seed;

    let parent = pretrain_parent(
        &config,
        &tasks,
        &pc.pretrain_params(),
        derive_seed(master, SEED_PRETRAIN),
    )?;

    let mut children = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let seed = derive_seed(derive_seed(master, SEED_FINETUNE), task.seed);
        children.push(finetune(&parent, task, &pc.finetune_params(), seed)?);
    }

    let mut parent_accuracy = BTreeMap::new();
    let mut finetuned_accuracy = BTreeMap::new();
    for (task, child) in tasks.iter().zip(&children) {
        parent_accuracy.insert(
            task.task_id.clone(),
            evaluate(&parent, task, &task.task_id, pc.protocol.eval_size)?,
        );
        let acc = evaluate(child, task, &task.task_id, pc.protocol.eval_size)?;
        if acc <= 0.0 {
            return Err(Error::BadProtocolConfig(format!(
                "fine-tuned accuracy on {} is zero; cannot normalize",
                task.task_id
            )));
        }
        finetuned_accuracy.insert(task.task_id.clone(), acc);
    }

    // published-style checkpoints: each child ships only its own head
    let deployed: Vec<Checkpoint> = tasks
        .iter()
        .zip(&children)
        .map(|(task, child)| child.retaining_heads(&[task.task_id.as_str()]))
        .collect::<Result<_>>()?;

    // fisher estimates, cached per (task, n); estimation wall-clock per method
    let mut fisher_runtime: BTreeMap<String, f64> = BTreeMap::new();
    let want_mask = methods.contains(&MergeMethod::MaskFisher);
    let want_full = methods.contains(&MergeMethod::FullFisher);
    let mut mask_fishers: BTreeMap<(usize, usize), MaskFisher> = BTreeMap::new();
    let mut full_fishers: BTreeMap<(usize, usize), FullFisher> = BTreeMap::new();
    if want_mask || want_full {
        for (i, task) in tasks.iter().enumerate() {
            let mut pool = task.examples(Split::Train, pc.protocol.train_pool);
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
                derive_seed(master, SEED_FISHER_SHUFFLE),
                task.seed,
            ));
            pool.shuffle(&mut rng);
            for &n in &pc.protocol.n_samples {
                if want_mask {
                    let t = Instant::now();
                    let mf = estimate_mask_fisher(&deployed[i], &pool, n)?;
                    *fisher_runtime
                        .entry(MergeMethod::MaskFisher.as_str().to_string())
                        .or_insert(0.0) += t.elapsed().as_secs_f64();
                    mask_fishers.insert((i, n), mf);
                }
                if want_full {
                    let t = Instant::now();
                    let ff = estimate_full_fisher(&deployed[i], &pool, n)?;
                    *fisher_runtime
                        .entry(MergeMethod::FullFisher.as_str().to_string())
                        .or_insert(0.0) += t.elapsed().as_secs_f64();
                    full_fishers.insert((i, n), ff);
                }
            }
        }
    }

    let mut records = Vec::new();
    for i in 0..tasks.len() {
        for j in i + 1..tasks.len() {
            for &method in &methods {
                let n_list: Vec<Option<usize>> = if method.uses_fisher_samples() {
                    pc.protocol.n_samples.iter().map(|&n| Some(n)).collect()
                } else {
                    vec![None]
                };
                for n in n_list {
                    let pair_ckpts = [deployed[i].clone(), deployed[j].clone()];
                    let merged = match method {
                        MergeMethod::Average => simple_average(&pair_ckpts)?,
                        MergeMethod::MaskFisher => {
                            let n = n.expect("sample count");
                            let wa = assign_weights(&config, &mask_fishers[&(i, n)], &MappingFlags::default())?;
                            let wb = assign_weights(&config, &mask_fishers[&(j, n)], &MappingFlags::default())?;
                            merge(&pair_ckpts, &[wa, wb], &MergeSpec::uniform(2))?
                        }
                        MergeMethod::FullFisher => {
                            let n = n.expect("sample count");
                            let fa = full_fishers[&(i, n)].clone();
                            let fb = full_fishers[&(j, n)].clone();
                            full_fisher_merge(&pair_ckpts, &[fa, fb], &MergeSpec::uniform(2))?
                        }
                    };
                    let mut evals = Vec::with_capacity(2);
                    for side in [i, j] {
                        let task = &tasks[side];
                        let raw = evaluate(&merged, task, &task.task_id, pc.protocol.eval_size)?;
                        let finetuned = finetuned_accuracy[&task.task_id];
                        evals.push(TaskEval {
                            task_id: task.task_id.clone(),
                            raw_accuracy: raw,
                            finetuned_accuracy: finetuned,
                            normalized: 100.0 * raw / finetuned,
                        });
                    }
                    records.push(MergeRecord {
                        pair: (tasks[i].task_id.clone(), tasks[j].task_id.clone()),
                        method: method.as_str().to_string(),
                        n_samples: n,
                        evals,
                    });
                }
            }
        }
    }
    records.sort_by(|a, b| {
        (&a.pair, &a.method, a.n_samples).cmp(&(&b.pair, &b.method, b.n_samples))
    });

    // aggregate: median of normalized scores per (method, n) cell
    let mut summaries = Vec::new();
    let collect_cell = |method: MergeMethod, n: Option<usize>| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.method == method.as_str() && r.n_samples == n)
            .flat_map(|r| r.evals.iter().map(|e| e.normalized))
            .collect()
    };
    let average_median = if methods.contains(&MergeMethod::Average) {
        Some(median(&collect_cell(MergeMethod::Average, None)))
    } else {
        None
    };
    for &method in &methods {
        let n_list: Vec<Option<usize>> = if method.uses_fisher_samples() {
            pc.protocol.n_samples.iter().map(|&n| Some(n)).collect()
        } else {
            vec![None]
        };
        for n in n_list {
            let med = median(&collect_cell(method, n));
            summaries.push(MethodSummary {
                method: method.as_str().to_string(),
                n_samples: n,
                median_normalized: med,
                delta_vs_average: average_median.map(|a| med - a).unwrap_or(0.0),
            });
        }
    }

    Ok(EvalReport {
        master_seed: master,
        tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
        methods: methods.iter().map(|m| m.as_str().to_string()).collect(),
        n_samples: pc.protocol.n_samples.clone(),
        parent_accuracy,
        finetuned_accuracy,
        records,
        summaries,
        fisher_runtime_seconds: fisher_runtime,
        total_seconds: t_total.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro_config_toml() -> String {
        r#"
master_seed = 11

[model]
layers = 1
heads = 2
d_head = 4
ffn_dim = 8
vocab_size = 32
max_seq_len = 8

[pretrain]
steps = 20
batch_size = 8
lr = 0.3

[finetune]
steps = 20
batch_size = 8
lr = 0.2

[protocol]
methods = ["average", "mask-fisher", "full-fisher"]
n_samples = [4, 8]
eval_size = 32
train_pool = 64

[[tasks]]
id = "alpha"
rule = "presence"

[[tasks]]
id = "beta"
rule = "order"

[[tasks]]
id = "gamma"
rule = "majority"
"#
        .to_string()
    }

    #[test]
    fn config_parses_and_builds_disjoint_tasks() {
        let pc = ProtocolConfig::from_toml_str(&micro_config_toml()).unwrap();
        let tasks = pc.build_tasks().unwrap();
        assert_eq!(tasks.len(), 3);
        for (i, a) in tasks.iter().enumerate() {
            for b in &tasks[i + 1..] {
                for t in &a.signal_tokens {
                    assert!(!b.signal_tokens.contains(t));
                }
            }
        }
        let config = pc.model_config().unwrap();
        assert_eq!(config.d_model, 8);
        assert_eq!(config.classes_per_task["gamma"], 3);
    }

    #[test]
    fn config_validation_catches_mistakes() {
        let base = micro_config_toml();
        let bad_rule = base.replace("rule = \"majority\"", "rule = \"sorted\"");
        assert!(ProtocolConfig::from_toml_str(&bad_rule).is_err());
        let bad_method = base.replace("\"average\"", "\"slerp\"");
        assert!(ProtocolConfig::from_toml_str(&bad_method).is_err());
        let bad_n = base.replace("n_samples = [4, 8]", "n_samples = [4, 9999]");
        assert!(ProtocolConfig::from_toml_str(&bad_n).is_err());
        let dup = base.replace("id = \"beta\"", "id = \"alpha\"");
        assert!(ProtocolConfig::from_toml_str(&dup).is_err());
    }

    #[test]
    fn record_count_is_pairs_times_methods_with_average_deduplicated() {
        let pc = ProtocolConfig::from_toml_str(&micro_config_toml()).unwrap();
        let report = run_pairwise_protocol(&pc).unwrap();
        // C(3,2) = 3 pairs; average once + two fisher methods x two n values
        assert_eq!(report.records.len(), 3 * (1 + 2 * 2));
        for r in &report.records {
            assert_eq!(r.evals.len(), 2);
        }
        // every cell summary exists
        assert_eq!(report.summaries.len(), 1 + 2 * 2);
    }

    #[test]
    fn median_is_the_textbook_median() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }
}
