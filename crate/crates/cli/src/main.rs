use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use edgeformer::checkpoint::{self, Weights};
use edgeformer::data::{self, Pair, Splits};
use edgeformer::distill::{check_vocab, seq_kd};
use edgeformer::experiment::{apply_overrides, parse_override_args, RunDir};
use edgeformer::metrics::{corpus_bleu, exact_match};
use edgeformer::quant::{QuantizedModel, QuantizedStore};
use edgeformer::train::train;
use edgeformer::{cost, repro, teacher_forced, DecodeConfig, ExperimentConfig, Manifest, Model, ModelConfig, TaskSpec, Vocab};

/// A check the command was asked to make did not hold.
#[derive(Debug)]
struct Verification(String);

impl std::fmt::Display for Verification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Verification {}

#[derive(Parser)]
#[command(name = "edgeformer", version, about = "Parameter-efficient seq2seq Transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts, FLOPS, group loads and budget verdicts.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic parallel corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Replace training targets with a teacher's beam output.
    Distill(DistillArgs),
    /// Translate a file of source lines.
    Decode(DecodeArgs),
    /// Quantize a checkpoint's weight matrices to int8.
    Quantize(QuantizeArgs),
    /// Score hypotheses against references, or a checkpoint on a split.
    Eval(EvalArgs),
    /// Compare computed costs with the published tables.
    ReproTables(ReproArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Named preset, e.g. `edgeformer-512`, `ut-12+2-384`, `edgeformer-512-adapter32`.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Experiment config file (its `[model]` section is analyzed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = repro::N_SRC)]
    n_src: u64,
    #[arg(long, default_value_t = repro::N_TGT)]
    n_tgt: u64,
    /// Vocabulary used for the output-projection FLOPS.
    #[arg(long, default_value_t = repro::VOCAB)]
    vocab: u64,
    /// Also write `key=value` lines here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 3 when a budget is exceeded.
    #[arg(long)]
    check_budget: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment config whose `[task]` section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory with `{train,dev}.{src,tgt}` and `vocab.txt`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory (defaults to the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Student experiment config, checked for vocabulary agreement.
    #[arg(long)]
    student_config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    /// Recompute the decoder over the whole prefix at every step.
    #[arg(long)]
    no_cache: bool,
}

impl SearchArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.max_len,
            alpha: self.alpha,
            cached: !self.no_cache,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output file (stdout when absent).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Vocabulary file; defaults to the one stored in the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "reference", conflicts_with = "checkpoint")]
    hyp: Option<PathBuf>,
    #[arg(long = "ref", requires = "hyp")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    search: SearchArgs,
    /// Fail (status 3) below this exact-match rate.
    #[arg(long)]
    min_exact: Option<f64>,
    /// Fail (status 3) below this teacher-forced token accuracy.
    #[arg(long)]
    min_token_acc: Option<f64>,
    /// Write the metrics (and a manifest) into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReproArgs {
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskOnly {
    #[serde(default)]
    task: TaskSpec,
}

/// Remove `--section.key value` / `--section.key=value` pairs from argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut ov = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let name = a.strip_prefix("--").map(|n| n.split('=').next().unwrap_or(n));
        if name.is_some_and(|n| n.contains('.')) {
            let mut pair = vec![a.clone()];
            if !a.contains('=') {
                pair.push(it.next().with_context(|| format!("override `{a}` lacks a value"))?);
            }
            ov.extend(parse_override_args(&pair)?);
        } else {
            rest.push(a);
        }
    }
    Ok((rest, ov))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| edgeformer::Error::io(path, e))?;
    Ok(())
}

fn load_experiment(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, split: &str, vocab: &Vocab) -> Result<Vec<Pair>> {
    Ok(data::read_parallel(
        &dir.join(format!("{split}.src")),
        &dir.join(format!("{split}.tgt")),
        vocab,
    )?)
}

fn split_paths(dir: &Path, splits: &[&str]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = splits
        .iter()
        .flat_map(|s| [dir.join(format!("{s}.src")), dir.join(format!("{s}.tgt"))])
        .collect();
    v.push(dir.join("vocab.txt"));
    v
}

fn manifest(command: &str, config: &impl Serialize, seed: u64, inputs: &[PathBuf]) -> Result<Manifest> {
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    Ok(Manifest::new(command, config, seed, &refs)?)
}

fn cmd_analyze(a: AnalyzeArgs, ov: &[(String, String)]) -> Result<()> {
    let base = match (&a.preset, &a.config) {
        (Some(p), None) => ExperimentConfig::new(ModelConfig::preset(p)?),
        (None, Some(c)) => ExperimentConfig::load(c)?,
        _ => bail!(edgeformer::Error::Config("pass exactly one of --preset or --config".into())),
    };
    let model = base.with_overrides(ov)?.model;
    let report = cost::analyze(&model, a.n_src, a.n_tgt, a.vocab)?;
    let plan = edgeformer::TyingPlan::build(&model)?;
    print!("{}", report.table());
    println!("loads:");
    for (group, load) in plan.load_report() {
        println!("  {group:<24} {load}");
    }
    if let Some(out) = &a.out {
        write_text(out, &report.key_values())?;
    }
    if a.check_budget && !(report.budget.params.pass && report.budget.flops.pass) {
        bail!(Verification("budget exceeded".into()));
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, ov: &[(String, String)]) -> Result<()> {
    let base = TaskOnly {
        task: match &a.config {
            Some(c) => ExperimentConfig::load(c)?.task,
            None => TaskSpec::default(),
        },
    };
    let spec = apply_overrides(&base, ov)?.task;
    spec.validate()?;
    let splits = spec.generate()?;
    let vocab = spec.vocab()?;
    data::write_splits(&a.out, &splits, &vocab)?;
    let m = manifest("gen-data", &spec, spec.seed, &[])?;
    m.save(&a.out.join("manifest.toml"))?;
    write_text(&a.out.join("task.toml"), &toml::to_string(&spec)?)?;
    println!(
        "wrote {} train / {} dev / {} test pairs to {}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, ov: &[(String, String)]) -> Result<()> {
    let mut cfg = load_experiment(&a.config, ov)?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let vocab = Vocab::load(&a.data.join("vocab.txt"))?;
    if vocab.len() != cfg.model.vocab_size {
        bail!(edgeformer::Error::VocabMismatch(format!(
            "corpus vocabulary has {} symbols, model expects {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    let train_set = load_split(&a.data, "train", &vocab)?;
    let dev = load_split(&a.data, "dev", &vocab)?;
    let run = RunDir::create(&cfg.out_dir)?;
    cfg.save(&run.config())?;
    let mut inputs = split_paths(&a.data, &["train", "dev"]);
    inputs.push(a.config.clone());
    manifest("train", &cfg, cfg.train.seed, &inputs)?.save(&run.manifest())?;
    let start = Instant::now();
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut log = String::new();
    let out = train(model, &train_set, &dev, &cfg.train, &mut |line| {
        eprintln!("{line}");
        log.push_str(line);
        log.push('\n');
    })?;
    write_text(&run.log("train"), &log)?;
    checkpoint::save(&run.checkpoint("best"), &out.best, Some(&vocab))?;
    checkpoint::save(&run.checkpoint("last"), &out.last, Some(&vocab))?;
    let summary = format!(
        "best_step={}\ndev_loss={:.6}\ndev_token_acc={:.6}\nparams={}\nseconds={:.1}\n",
        out.best_step,
        out.best_dev.loss,
        out.best_dev.accuracy(),
        out.best.store.param_count(true),
        start.elapsed().as_secs_f64()
    );
    write_text(&run.report("train.txt"), &summary)?;
    print!("{summary}");
    println!("checkpoint={}", run.checkpoint("best").display());
    Ok(())
}

fn cmd_distill(a: DistillArgs) -> Result<()> {
    let ck = checkpoint::load_any(&a.teacher)?;
    let vocab = Vocab::load(&a.data.join("vocab.txt"))?;
    if let Some(tv) = &ck.vocab {
        if tv != &vocab {
            bail!(edgeformer::Error::VocabMismatch("teacher checkpoint and corpus use different vocabularies".into()));
        }
    } else if vocab.len() != ck.config.vocab_size {
        bail!(edgeformer::Error::VocabMismatch(format!(
            "corpus vocabulary has {} symbols, teacher expects {}",
            vocab.len(),
            ck.config.vocab_size
        )));
    }
    if let Some(sc) = &a.student_config {
        let student = ExperimentConfig::load(sc)?.model;
        check_vocab(&ck.config, &student, ck.vocab.as_ref(), Some(&vocab))?;
    }
    let dc = DecodeConfig {
        beam: a.beam,
        max_len: a.max_len,
        alpha: a.alpha,
        cached: true,
    };
    let mut splits = Splits {
        train: load_split(&a.data, "train", &vocab)?,
        dev: load_split(&a.data, "dev", &vocab)?,
        test: load_split(&a.data, "test", &vocab)?,
    };
    let start = Instant::now();
    for set in [&mut splits.train, &mut splits.dev] {
        let sources: Vec<Vec<u32>> = set.iter().map(|p| p.0.clone()).collect();
        *set = seq_kd(ck.view(), &sources, &dc)?;
    }
    data::write_splits(&a.out, &splits, &vocab)?;
    let mut inputs = split_paths(&a.data, &["train", "dev", "test"]);
    inputs.push(a.teacher.clone());
    manifest("distill", &dc, 0, &inputs)?.save(&a.out.join("manifest.toml"))?;
    println!(
        "distilled {} train + {} dev sources in {:.1}s into {}",
        splits.train.len(),
        splits.dev.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

fn model_vocab(ck: &checkpoint::Checkpoint, explicit: Option<&Path>) -> Result<Vocab> {
    let vocab = match explicit {
        Some(p) => Vocab::load(p)?,
        None => ck
            .vocab
            .clone()
            .ok_or_else(|| edgeformer::Error::Config("checkpoint has no vocabulary; pass --vocab".into()))?,
    };
    if vocab.len() != ck.config.vocab_size {
        bail!(edgeformer::Error::VocabMismatch(format!(
            "vocabulary has {} symbols, model expects {}",
            vocab.len(),
            ck.config.vocab_size
        )));
    }
    Ok(vocab)
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let ck = checkpoint::load_any(&a.checkpoint)?;
    let vocab = model_vocab(&ck, a.vocab.as_deref())?;
    let sources = data::read_lines(&a.input, &vocab)?;
    let dc = a.search.config();
    let hyps = edgeformer::decode_all(ck.view(), &sources, &dc)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&vocab.decode(&h.tokens));
        text.push('\n');
    }
    match &a.output {
        Some(out) => {
            write_text(out, &text)?;
            let m = manifest("decode", &dc, 0, &[a.checkpoint.clone(), a.input.clone()])?;
            m.save(&out.with_extension("manifest.toml"))?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let ck = checkpoint::load_any(&a.checkpoint)?;
    let store = match &ck.weights {
        Weights::Float(s) => QuantizedStore::quantize(s)?,
        Weights::Int8(q) => q.clone(),
    };
    let report = store.size_report();
    let q = QuantizedModel {
        config: ck.config.clone(),
        plan: ck.plan.clone(),
        store,
    };
    checkpoint::save_quantized(&a.out, &q, ck.vocab.as_ref())?;
    let float_file = fs::metadata(&a.checkpoint).map(|m| m.len()).unwrap_or(0);
    let int8_file = fs::metadata(&a.out).map(|m| m.len()).unwrap_or(0);
    println!("{report}");
    println!("file_f32_bytes={float_file}");
    println!("file_int8_bytes={int8_file}");
    manifest("quantize", &ck.config, 0, &[a.checkpoint.clone()])?.save(&a.out.with_extension("manifest.toml"))?;
    Ok(())
}

fn words(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut lines = Vec::new();
    let mut inputs = Vec::new();
    let mut failures = Vec::new();
    if let (Some(h), Some(r)) = (&a.hyp, &a.reference) {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| edgeformer::Error::io(p, e));
        let hyps = words(&read(h)?);
        let refs = words(&read(r)?);
        if hyps.len() != refs.len() {
            bail!(edgeformer::Error::Corrupt(format!("{} hypothesis lines for {} references", hyps.len(), refs.len())));
        }
        let em = exact_match(&hyps, &refs)?;
        lines.push(format!("lines={}", hyps.len()));
        lines.push(format!("bleu={:.2}", corpus_bleu(&hyps, &refs)?));
        lines.push(format!("exact_match={em:.4}"));
        if a.min_exact.is_some_and(|m| em < m) {
            failures.push(format!("exact match {em:.4} below {}", a.min_exact.unwrap()));
        }
        inputs.extend([h.clone(), r.clone()]);
    } else if let (Some(c), Some(d)) = (&a.checkpoint, &a.data) {
        let ck = checkpoint::load_any(c)?;
        let vocab = Vocab::load(&d.join("vocab.txt"))?;
        if ck.vocab.as_ref().is_some_and(|v| v != &vocab) || vocab.len() != ck.config.vocab_size {
            bail!(edgeformer::Error::VocabMismatch("checkpoint and corpus use different vocabularies".into()));
        }
        let pairs = load_split(d, &a.split, &vocab)?;
        if pairs.is_empty() {
            bail!(edgeformer::Error::InvalidInput(format!("split `{}` is empty", a.split)));
        }
        let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.0.clone()).collect();
        let hyps = edgeformer::decode_all(ck.view(), &sources, &a.search.config())?;
        let hyp_tokens: Vec<Vec<u32>> = hyps.into_iter().map(|h| h.tokens).collect();
        let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.1.clone()).collect();
        let em = exact_match(&hyp_tokens, &refs)?;
        let tf = teacher_forced(ck.view(), &pairs, 1024)?;
        lines.push(format!("split={}", a.split));
        lines.push(format!("lines={}", pairs.len()));
        lines.push(format!("quantized={}", ck.is_quantized()));
        lines.push(format!("bleu={:.2}", corpus_bleu(&hyp_tokens, &refs)?));
        lines.push(format!("exact_match={em:.4}"));
        lines.push(format!("token_accuracy={:.4}", tf.accuracy()));
        lines.push(format!("loss={:.5}", tf.loss));
        if a.min_exact.is_some_and(|m| em < m) {
            failures.push(format!("exact match {em:.4} below {}", a.min_exact.unwrap()));
        }
        if a.min_token_acc.is_some_and(|m| tf.accuracy() < m) {
            failures.push(format!("token accuracy {:.4} below {}", tf.accuracy(), a.min_token_acc.unwrap()));
        }
        inputs.push(c.clone());
        inputs.extend(split_paths(d, &[a.split.as_str()]));
    } else {
        bail!(edgeformer::Error::Config("pass --hyp/--ref or --checkpoint/--data".into()));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| edgeformer::Error::io(out, e))?;
        write_text(&out.join("metrics.txt"), &text)?;
        manifest("eval", &a.search.config(), 0, &inputs)?.save(&out.join("manifest.toml"))?;
    }
    if !failures.is_empty() {
        bail!(Verification(failures.join("; ")));
    }
    Ok(())
}

fn cmd_repro(a: ReproArgs) -> Result<()> {
    let start = Instant::now();
    let (table, ok) = repro::render(&repro::cells()?, &repro::load_cells()?);
    print!("{table}");
    println!("elapsed={:.3}s", start.elapsed().as_secs_f64());
    if let Some(out) = &a.out {
        write_text(out, &table)?;
    }
    if !ok {
        bail!(Verification("published values not reproduced".into()));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Verification>().is_some() {
        return 3;
    }
    if let Some(e) = err.downcast_ref::<edgeformer::Error>() {
        return match e {
            edgeformer::Error::Io { .. } => 2,
            edgeformer::Error::Corrupt(_) => 4,
            _ => 1,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    1
}

fn run(argv: Vec<String>) -> Result<()> {
    let (argv, overrides) = split_overrides(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let _ = e.print();
            bail!(edgeformer::Error::Config("invalid command line".into()));
        }
    };
    let no_overrides = |name: &str| -> Result<()> {
        if overrides.is_empty() {
            Ok(())
        } else {
            bail!(edgeformer::Error::Config(format!("`{name}` takes no --section.key overrides")))
        }
    };
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a, &overrides),
        Command::GenData(a) => cmd_gen_data(a, &overrides),
        Command::Train(a) => cmd_train(a, &overrides),
        Command::Distill(a) => no_overrides("distill").and_then(|_| cmd_distill(a)),
        Command::Decode(a) => no_overrides("decode").and_then(|_| cmd_decode(a)),
        Command::Quantize(a) => no_overrides("quantize").and_then(|_| cmd_quantize(a)),
        Command::Eval(a) => no_overrides("eval").and_then(|_| cmd_eval(a)),
        Command::ReproTables(a) => no_overrides("repro-tables").and_then(|_| cmd_repro(a)),
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
