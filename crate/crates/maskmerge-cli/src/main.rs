//! Command-line workflows: pretrain/finetune synthetic-task models, estimate
//! mask or full-parameter Fisher information, merge sibling checkpoints, and
//! run the pairwise evaluation protocol end to end.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use maskmerge::fisher::{
    bench_fisher, count_gradient_params, estimate_full_fisher, estimate_mask_fisher, FisherMethod,
};
use maskmerge::harness::{
    derive_seed, finetune, pretrain_parent, run_pairwise_protocol, ProtocolConfig, Split,
};
use maskmerge::io::{
    load_checkpoint, load_full_fisher, load_mask_fisher, save_checkpoint, save_full_fisher,
    save_mask_fisher,
};
use maskmerge::merge::{
    assign_weights, full_fisher_merge, merge, simple_average, MappingFlags, MergeSpec,
    ZeroDenominatorPolicy,
};
use maskmerge::model::{Checkpoint, Example, MaskSet};

/// Environment variable that re-roots relative output paths.
const OUT_DIR_ENV: &str = "MASKMERGE_OUT_DIR";

#[derive(Parser)]
#[command(name = "maskmerge", version, about = "Fisher mask-node model merging")]
struct Cli {
    /// Master seed for anything stochastic; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// Cap internal parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a parent checkpoint on the config's task mixture.
    Pretrain(PretrainArgs),
    /// Fine-tune a parent checkpoint on one task.
    Finetune(FinetuneArgs),
    /// Write labelled examples for one task as JSONL.
    GenData(GenDataArgs),
    /// Estimate diagonal Fisher information for a checkpoint.
    Fisher(FisherArgs),
    /// Merge sibling checkpoints.
    Merge(MergeArgs),
    /// Accuracy of a checkpoint on a JSONL example file.
    Eval(EvalArgs),
    /// Run the pairwise merge-and-evaluate protocol.
    Protocol(ProtocolArgs),
    /// Time mask-node vs full-parameter Fisher estimation on equal samples.
    Bench(BenchArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Protocol config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Task id from the config.
    #[arg(long)]
    task: String,
    /// Override the config's fine-tune step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Keep every task head instead of shipping only the fine-tuned one.
    #[arg(long)]
    keep_all_heads: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Args)]
struct FisherArgs {
    #[arg(long, value_enum)]
    method: FisherMethodArg,
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL of {tokens, label, task_id}, all one task.
    #[arg(long)]
    data: PathBuf,
    /// Number of samples (the first n examples of --data).
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FisherMethodArg {
    Mask,
    Full,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long, value_enum)]
    method: MergeMethodArg,
    /// Two or more sibling checkpoints.
    #[arg(long, num_args = 2.., required = true)]
    ckpts: Vec<PathBuf>,
    /// One Fisher file per checkpoint, same order (not used by average).
    #[arg(long, num_args = 0..)]
    fishers: Vec<PathBuf>,
    /// Per-model merge coefficients, default all 1.
    #[arg(long, num_args = 0..)]
    lambda: Vec<f64>,
    /// fallback | epsilon:<value>
    #[arg(long, default_value = "fallback")]
    zero_denominator: String,
    /// Exclude query/key biases from mapping rule 1.
    #[arg(long)]
    no_qk_bias: bool,
    /// Also weight the second feed-forward matrix's columns in rule 2.
    #[arg(long)]
    weight_mlp2_columns: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum MergeMethodArg {
    MaskFisher,
    FullFisher,
    Average,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Head to classify with; defaults to each example's own task id.
    #[arg(long)]
    head: Option<String>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    out: PathBuf,
    /// Print the human-readable table (on by default).
    #[arg(long, default_value_t = true)]
    table: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Sample count for both estimators.
    #[arg(long)]
    n: usize,
    /// Timing repetitions (median is reported).
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .ok();
    }
    if let Err(err) = run(&cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(args) => cmd_pretrain(cli, args),
        Command::Finetune(args) => cmd_finetune(cli, args),
        Command::GenData(args) => cmd_gen_data(cli, args),
        Command::Fisher(args) => cmd_fisher(cli, args),
        Command::Merge(args) => cmd_merge(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Protocol(args) => cmd_protocol(cli, args),
        Command::Bench(args) => cmd_bench(cli, args),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn out_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => PathBuf::from(dir).join(path),
        _ => path.to_path_buf(),
    }
}

fn guard_overwrite(cli: &Cli, path: &Path) -> Result<()> {
    if path.exists() && !cli.force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_config(cli: &Cli, path: &Path) -> Result<ProtocolConfig> {
    let mut pc = ProtocolConfig::from_path(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        pc.master_seed = seed;
    }
    Ok(pc)
}

fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad example", path.display(), i + 1))?;
        out.push(ex);
    }
    if out.is_empty() {
        bail!("{} holds no examples", path.display());
    }
    Ok(out)
}

/// Write a checkpoint, then reload and re-validate it so exit code 0 means
/// the artifact on disk is usable.
fn write_checkpoint_validated(cli: &Cli, path: &Path, ckpt: &Checkpoint) -> Result<String> {
    guard_overwrite(cli, path)?;
    let digest = save_checkpoint(path, ckpt)?;
    let (_, found) = load_checkpoint(path).context("self-validation re-read failed")?;
    if found != digest {
        bail!("self-validation failed: digest changed on re-read");
    }
    Ok(digest)
}

fn emit(cli: &Cli, human: String, payload: serde_json::Value) {
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&payload).expect("json"));
    } else {
        println!("{human}");
    }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs) -> Result<()> {
    let pc = load_config(cli, &args.config)?;
    let tasks = pc.build_tasks()?;
    let config = pc.model_config()?;
    let params = maskmerge::harness::TrainParams {
        steps: pc.pretrain.steps,
        batch_size: pc.pretrain.batch_size,
        lr: pc.pretrain.lr,
        pool_size: pc.protocol.train_pool,
    };
    let parent = pretrain_parent(&config, &tasks, &params, derive_seed(pc.master_seed, 0x01))?;
    let out = out_path(&args.out);
    let digest = write_checkpoint_validated(cli, &out, &parent)?;
    emit(
        cli,
        format!("wrote parent checkpoint {} ({digest})", out.display()),
        json!({"command": "pretrain", "out": out, "digest": digest, "seed": pc.master_seed}),
    );
    Ok(())
}

fn cmd_finetune(cli: &Cli, args: &FinetuneArgs) -> Result<()> {
    let pc = load_config(cli, &args.config)?;
    let tasks = pc.build_tasks()?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == args.task)
        .with_context(|| format!("task {:?} not in config", args.task))?;
    let (parent, parent_digest) = load_checkpoint(&args.ckpt)?;
    let mut params = maskmerge::harness::TrainParams {
        steps: pc.finetune.steps,
        batch_size: pc.finetune.batch_size,
        lr: pc.finetune.lr,
        pool_size: pc.protocol.train_pool,
    };
    if let Some(steps) = args.steps {
        params.steps = steps;
    }
    let seed = derive_seed(derive_seed(pc.master_seed, 0x02), task.seed);
    let child = finetune(&parent, task, &params, seed)?;
    // by default ship only the trained head, the shape merges expect
    let child = if args.keep_all_heads {
        child
    } else {
        child.retaining_heads(&[task.task_id.as_str()])?
    };
    let out = out_path(&args.out);
    let digest = write_checkpoint_validated(cli, &out, &child)?;
    emit(
        cli,
        format!("wrote fine-tuned checkpoint {} ({digest})", out.display()),
        json!({
            "command": "finetune", "task": args.task, "out": out,
            "digest": digest, "parent_digest": parent_digest, "steps": params.steps,
        }),
    );
    Ok(())
}

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let pc = load_config(cli, &args.config)?;
    let tasks = pc.build_tasks()?;
    let task = tasks
        .iter()
        .find(|t| t.task_id == args.task)
        .with_context(|| format!("task {:?} not in config", args.task))?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let examples = task.examples(split, args.count);
    let out = out_path(&args.out);
    guard_overwrite(cli, &out)?;
    let mut file = fs::File::create(&out)?;
    for ex in &examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    let reread = read_examples(&out)?;
    if reread != examples {
        bail!("self-validation failed: file does not round-trip");
    }
    emit(
        cli,
        format!("wrote {} examples to {}", examples.len(), out.display()),
        json!({"command": "gen-data", "task": args.task, "count": examples.len(), "out": out}),
    );
    Ok(())
}

fn cmd_fisher(cli: &Cli, args: &FisherArgs) -> Result<()> {
    let (ckpt, ckpt_digest) = load_checkpoint(&args.ckpt)?;
    let data = read_examples(&args.data)?;
    let out = out_path(&args.out);
    guard_overwrite(cli, &out)?;
    let (digest, values, method) = match args.method {
        FisherMethodArg::Mask => {
            let mf = estimate_mask_fisher(&ckpt, &data, args.n)?;
            let digest = save_mask_fisher(&out, &mf, &ckpt.config)?;
            let (reread, _) = load_mask_fisher(&out).context("self-validation re-read failed")?;
            if reread != mf {
                bail!("self-validation failed: fisher file does not round-trip");
            }
            (digest, mf.node_count(), "mask")
        }
        FisherMethodArg::Full => {
            let ff = estimate_full_fisher(&ckpt, &data, args.n)?;
            let digest = save_full_fisher(&out, &ff, &ckpt.config)?;
            let (reread, _) = load_full_fisher(&out).context("self-validation re-read failed")?;
            if reread != ff {
                bail!("self-validation failed: fisher file does not round-trip");
            }
            let total: usize = ff.fisher.values().map(|t| t.numel()).sum();
            (digest, total, "full")
        }
    };
    emit(
        cli,
        format!(
            "wrote {method} fisher ({values} values, n={}) to {} ({digest})",
            args.n,
            out.display()
        ),
        json!({
            "command": "fisher", "method": method, "n": args.n, "values": values,
            "out": out, "digest": digest, "checkpoint_digest": ckpt_digest,
        }),
    );
    Ok(())
}

fn parse_policy(s: &str) -> Result<ZeroDenominatorPolicy> {
    if s == "fallback" || s == "fallback-to-average" {
        return Ok(ZeroDenominatorPolicy::FallbackToAverage);
    }
    if let Some(v) = s.strip_prefix("epsilon:") {
        let v: f64 = v.parse().context("bad epsilon value")?;
        return Ok(ZeroDenominatorPolicy::Epsilon(v));
    }
    bail!("bad --zero-denominator {s:?} (expected fallback | epsilon:<value>)");
}

fn cmd_merge(cli: &Cli, args: &MergeArgs) -> Result<()> {
    let mut ckpts = Vec::new();
    let mut input_digests = Vec::new();
    for path in &args.ckpts {
        let (ckpt, digest) = load_checkpoint(path)?;
        ckpts.push(ckpt);
        input_digests.push(digest);
    }
    let n_models = ckpts.len();
    let lambdas = if args.lambda.is_empty() {
        vec![1.0; n_models]
    } else {
        args.lambda.clone()
    };
    let spec = MergeSpec {
        lambdas,
        zero_denominator_policy: parse_policy(&args.zero_denominator)?,
    };

    let needs_fishers = args.method != MergeMethodArg::Average;
    if needs_fishers && args.fishers.len() != n_models {
        bail!(
            "--method {} needs exactly one --fishers entry per checkpoint ({} given, {} needed)",
            match args.method {
                MergeMethodArg::MaskFisher => "mask-fisher",
                MergeMethodArg::FullFisher => "full-fisher",
                MergeMethodArg::Average => unreachable!(),
            },
            args.fishers.len(),
            n_models
        );
    }

    let merged = match args.method {
        MergeMethodArg::Average => simple_average(&ckpts)?,
        MergeMethodArg::MaskFisher => {
            let flags = MappingFlags {
                include_qk_bias: !args.no_qk_bias,
                weight_mlp2_columns: args.weight_mlp2_columns,
            };
            let mut ws = Vec::new();
            for (i, path) in args.fishers.iter().enumerate() {
                let (mf, _) = load_mask_fisher(path)?;
                if mf.checkpoint_digest != input_digests[i] {
                    bail!(
                        "fisher file {} was estimated on a different checkpoint than {} \
                         (digest {} vs {})",
                        path.display(),
                        args.ckpts[i].display(),
                        mf.checkpoint_digest,
                        input_digests[i]
                    );
                }
                ws.push(assign_weights(&ckpts[i].config, &mf, &flags)?);
            }
            merge(&ckpts, &ws, &spec)?
        }
        MergeMethodArg::FullFisher => {
            let mut ffs = Vec::new();
            for (i, path) in args.fishers.iter().enumerate() {
                let (ff, _) = load_full_fisher(path)?;
                if ff.checkpoint_digest != input_digests[i] {
                    bail!(
                        "fisher file {} was estimated on a different checkpoint than {}",
                        path.display(),
                        args.ckpts[i].display()
                    );
                }
                ffs.push(ff);
            }
            full_fisher_merge(&ckpts, &ffs, &spec)?
        }
    };

    let out = out_path(&args.out);
    let digest = write_checkpoint_validated(cli, &out, &merged)?;
    let method = merged
        .provenance
        .as_ref()
        .map(|p| p.method.clone())
        .unwrap_or_default();
    emit(
        cli,
        format!("wrote merged checkpoint ({method}) to {} ({digest})", out.display()),
        json!({
            "command": "merge", "method": method, "out": out, "digest": digest,
            "inputs": input_digests,
        }),
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let (ckpt, _) = load_checkpoint(&args.ckpt)?;
    let data = read_examples(&args.data)?;
    let masks = MaskSet::ones(&ckpt.config);
    let mut correct = 0usize;
    let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ex in &data {
        let head = args.head.clone().unwrap_or_else(|| ex.task_id.clone());
        let routed = Example {
            tokens: ex.tokens.clone(),
            label: ex.label,
            task_id: head,
        };
        let (logits, _) = maskmerge::model::forward(&ckpt, &masks, &routed)?;
        let pred = logits
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let entry = per_task.entry(ex.task_id.clone()).or_insert((0, 0));
        entry.1 += 1;
        if pred == ex.label {
            correct += 1;
            entry.0 += 1;
        }
    }
    let accuracy = correct as f64 / data.len() as f64;
    let per_task_json: BTreeMap<String, f64> = per_task
        .iter()
        .map(|(k, (c, n))| (k.clone(), *c as f64 / *n as f64))
        .collect();
    emit(
        cli,
        format!("accuracy {accuracy:.4} over {} examples", data.len()),
        json!({
            "command": "eval", "accuracy": accuracy, "examples": data.len(),
            "per_task": per_task_json,
        }),
    );
    Ok(())
}

fn cmd_protocol(cli: &Cli, args: &ProtocolArgs) -> Result<()> {
    let pc = load_config(cli, &args.config)?;
    let report = run_pairwise_protocol(&pc)?;
    let out = out_path(&args.out);
    guard_overwrite(cli, &out)?;
    fs::write(&out, report.to_json())?;
    // self-validation: the written report must parse back
    let _: serde_json::Value = serde_json::from_slice(&fs::read(&out)?)?;
    if cli.json {
        println!("{}", report.to_json());
    } else if args.table {
        print!("{}", report.to_table());
        println!("report written to {}", out.display());
        println!("content digest: {}", report.content_digest());
    }
    Ok(())
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let pc = load_config(cli, &args.config)?;
    let tasks = pc.build_tasks()?;
    let config = pc.model_config()?;
    // model and data setup happen before any timer starts
    let ckpt = Checkpoint::init_random(&config, derive_seed(pc.master_seed, 0x05))?;
    let data = tasks[0].examples(Split::Train, args.n);
    let bench = bench_fisher(&ckpt, &data, args.n, args.reps)?;
    let human = format!(
        "fisher estimation over n={} samples ({} reps, medians):\n\
         mask-node path:       {:>10.4}s for {} gradient values\n\
         full-parameter path:  {:>10.4}s for {} gradient values\n\
         wall-clock ratio:     {:>10.2}x\n\
         gradient count ratio: {:>10.2}x\n\
         (reference: {:.1}x reported for a BERT-Large-scale model; not asserted here)",
        bench.n_samples,
        bench.reps,
        bench.mask_seconds,
        count_gradient_params(&config, FisherMethod::Mask),
        bench.full_seconds,
        count_gradient_params(&config, FisherMethod::Full),
        bench.wallclock_ratio,
        bench.count_ratio,
        bench.reference_speedup_bert_large,
    );
    emit(cli, human, serde_json::to_value(&bench)?);
    Ok(())
}
