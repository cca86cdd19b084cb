//! Desk-scale experimental protocol: synthetic sequence-classification
//! tasks, a shared pretrained parent, per-task fine-tuned children, and the
//! pairwise merge-and-evaluate loop.
//!
//! Tasks draw labels from a fixed rule family over designated signal tokens;
//! distinct tasks get disjoint signal token sets. Train and eval examples
//! come from different counter-mode streams of the task's generator, so the
//! splits never share an example stream.

mod protocol;
mod train;

pub use protocol::{
    median, run_pairwise_protocol, EvalReport, MergeMethod, MergeRecord, MethodSummary,
    ProtocolConfig, TaskEval,
};
pub use train::{evaluate, finetune, pretrain_parent, TrainParams};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::Example;

/// Stateless seed derivation (splitmix64 finalizer) for sub-streams.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

/// The fixed labeling-rule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Does the first signal token occur at all?
    Presence,
    /// Occurrence count of the first signal token, mod 2.
    Parity,
    /// Does the first signal token occur before the second?
    Order,
    /// Which of the three signal tokens occurs most often? (3 classes)
    Majority,
}

impl LabelRule {
    pub fn parse(s: &str) -> Result<LabelRule> {
        match s {
            "presence" => Ok(LabelRule::Presence),
            "parity" => Ok(LabelRule::Parity),
            "order" => Ok(LabelRule::Order),
            "majority" => Ok(LabelRule::Majority),
            other => Err(Error::BadProtocolConfig(format!(
                "unknown rule {other:?} (expected presence | parity | order | majority)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelRule::Presence => "presence",
            LabelRule::Parity => "parity",
            LabelRule::Order => "order",
            LabelRule::Majority => "majority",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            LabelRule::Majority => 3,
            _ => 2,
        }
    }

    pub fn signal_tokens_needed(self) -> usize {
        match self {
            LabelRule::Presence | LabelRule::Parity => 1,
            LabelRule::Order => 2,
            LabelRule::Majority => 3,
        }
    }
}

/// One synthetic classification task with its own deterministic generator.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub task_id: String,
    pub seed: u64,
    pub rule: LabelRule,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Tokens carrying this task's signal; disjoint across tasks.
    pub signal_tokens: Vec<usize>,
}

impl SyntheticTask {
    pub fn n_classes(&self) -> usize {
        self.rule.n_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal_tokens.len() < self.rule.signal_tokens_needed() {
            return Err(Error::BadProtocolConfig(format!(
                "task {} needs {} signal tokens, has {}",
                self.task_id,
                self.rule.signal_tokens_needed(),
                self.signal_tokens.len()
            )));
        }
        if self.signal_tokens.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::BadProtocolConfig(format!(
                "task {} has signal tokens outside the vocabulary",
                self.task_id
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::BadProtocolConfig(format!(
                "task {} sequence length {} too short",
                self.task_id, self.seq_len
            )));
        }
        Ok(())
    }

    /// Deterministically generate `count` labelled examples from the given
    /// split's stream. Calling this twice yields identical examples.
    pub fn examples(&self, split: Split, count: usize) -> Vec<Example> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(split.stream());
        let background: Vec<usize> = (0..self.vocab_size)
            .filter(|t| !self.signal_tokens.contains(t))
            .collect();
        (0..count).map(|_| self.one_example(&mut rng, &background)).collect()
    }

    fn one_example(&self, rng: &mut ChaCha20Rng, background: &[usize]) -> Example {
        let mut tokens: Vec<usize> = (0..self.seq_len)
            .map(|_| background[rng.gen_range(0..background.len())])
            .collect();
        let s = &self.signal_tokens;
        let label = match self.rule {
            LabelRule::Presence => {
                let label = rng.gen_range(0..2);
                if label == 1 {
                    let k = rng.gen_range(1..=3);
                    for p in distinct_positions(rng, self.seq_len, k) {
                        tokens[p] = s[0];
                    }
                }
                label
            }
            LabelRule::Parity => {
                let c = rng.gen_range(0..=3);
                for p in distinct_positions(rng, self.seq_len, c) {
                    tokens[p] = s[0];
                }
                c % 2
            }
            LabelRule::Order => {
                let label = rng.gen_range(0..2);
                let pos = distinct_positions(rng, self.seq_len, 2);
                let (first, second) = (pos[0].min(pos[1]), pos[0].max(pos[1]));
                if label == 1 {
                    tokens[first] = s[0];
                    tokens[second] = s[1];
                } else {
                    tokens[first] = s[1];
                    tokens[second] = s[0];
                }
                label
            }
            LabelRule::Majority => {
                let label = rng.gen_range(0..3);
                let other = (label + 1 + rng.gen_range(0..2)) % 3;
                let pos = distinct_positions(rng, self.seq_len, 3);
                tokens[pos[0]] = s[label];
                tokens[pos[1]] = s[label];
                tokens[pos[2]] = s[other];
                label
            }
        };
        Example {
            tokens,
            label,
            task_id: self.task_id.clone(),
        }
    }
}

fn distinct_positions(rng: &mut ChaCha20Rng, len: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.truncate(count);
    idx
}
