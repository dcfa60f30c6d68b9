//! Command-line front end for the whole pipeline: toy-corpus generation,
//! training under any adversarial mode, translation, evaluation, and noise
//! sweeps.
//!
//! Every setting can come from a flat key=value config file (`--config`),
//! with command-line flags taking precedence; the fully-resolved config is
//! echoed as `config key=value` lines. All randomness funnels through one
//! seed, so identical invocations produce identical artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use unmt::adversarial::ATMode;
use unmt::data::{generate_bundle, load_corpus, ReorderRule, ToyLanguageSpec};
use unmt::evaluation::{
    apply_eval_noise, bleu, decode_corpus, evaluate_autoencoder, evaluate_translation, similarity,
    sweep, write_sweep_csv, SweepAxis, DEFAULT_A_AXIS, DEFAULT_B_AXIS,
};
use unmt::model::{checkpoint, Lang, Vocabulary};
use unmt::noise::NoiseSpec;
use unmt::training::{train, TrainConfig, TrainPaths};
use unmt::Error;

#[derive(Parser)]
#[command(name = "unmt", version, about = "Robust unsupervised NMT on synthetic cipher-language pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // one short-lived instance per process
enum Cmd {
    /// Generate a synthetic cipher-language corpus bundle.
    GenData(GenDataArgs),
    /// Train a model with denoising + back-translation.
    Train(TrainArgs),
    /// Translate a corpus file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score translation / auto-encoding / similarity BLEU.
    Evaluate(EvaluateArgs),
    /// Robustness sweep over a noise axis, written as CSV.
    Sweep(SweepArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the corpus bundle.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    n_templates: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    anchor_fraction: Option<f64>,
    /// identity | swap_adjacent
    #[arg(long)]
    reorder: Option<String>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_l1: Option<String>,
    #[arg(long)]
    train_l2: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    test_l1: Option<String>,
    #[arg(long)]
    test_l2: Option<String>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: Option<String>,
    /// Resume from a training checkpoint.
    #[arg(long)]
    resume: Option<String>,
    /// none | word_at | position_at | both_at
    #[arg(long)]
    mode: Option<ATMode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon_at: Option<f64>,
    #[arg(long)]
    drop_prob: Option<f64>,
    #[arg(long)]
    swap_window: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(clap::Args)]
struct TranslateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Input corpus file, one sentence per line.
    #[arg(long = "in")]
    input: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<String>,
    /// l1 | l2 (the target is the other language)
    #[arg(long)]
    source_lang: Option<Lang>,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Source corpus file.
    #[arg(long = "in")]
    input: Option<String>,
    /// Reference corpus (required for task=translation).
    #[arg(long)]
    refs: Option<String>,
    #[arg(long)]
    source_lang: Option<Lang>,
    /// translation | autoencoder | similarity
    #[arg(long)]
    task: Option<String>,
    /// Word-noise level applied to the inputs.
    #[arg(long)]
    a: Option<f64>,
    /// Order-noise level applied to the inputs.
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the noised inputs to this file.
    #[arg(long)]
    write_noisy: Option<String>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    test_l1: Option<String>,
    #[arg(long)]
    test_l2: Option<String>,
    /// a (word noise) | b (order noise)
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated noise levels; defaults to the standard axis.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<String>,
}

/// A CLI failure: usage problems exit 2 with a message, runtime problems
/// exit 1 with a one-line machine-parsable category.
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Resolves each setting from CLI flag, then config file, then default,
/// echoing the result and rejecting unknown config keys at the end.
struct Settings {
    values: BTreeMap<String, String>,
    known: BTreeSet<String>,
    echo: Vec<(String, String)>,
}

impl Settings {
    fn load(config: Option<&Path>) -> CliResult<Settings> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let pstr = path.display().to_string();
            let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{pstr}:{}: expected key=value, got {line:?}", i + 1))
                })?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Settings { values, known: BTreeSet::new(), echo: Vec::new() })
    }

    fn parse<T: FromStr>(&self, key: &str, raw: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        raw.parse().map_err(|e| {
            CliError::Runtime(Error::Config(format!("config key {key}: cannot parse {raw:?}: {e}")))
        })
    }

    fn lookup<T: FromStr>(&mut self, key: &str, cli: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.known.insert(key.to_string());
        if let Some(v) = cli {
            return Ok(Some(v));
        }
        match self.values.get(key).cloned() {
            Some(raw) => Ok(Some(self.parse(key, &raw)?)),
            None => Ok(None),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, cli)?.unwrap_or(default);
        self.echo.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    fn get_opt<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, cli)?;
        if let Some(v) = &v {
            self.echo.push((key.to_string(), v.to_string()));
        }
        Ok(v)
    }

    fn require<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.get_opt(key, cli)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting --{key} (or config key {key})")))
    }

    /// Rejects config keys no setting consumed and prints the resolved config.
    fn finish(self) -> CliResult<()> {
        for key in self.values.keys() {
            if !self.known.contains(key) {
                return Err(CliError::Runtime(Error::Config(format!("unknown config key {key}"))));
            }
        }
        for (k, v) in &self.echo {
            println!("config {k}={v}");
        }
        Ok(())
    }
}

fn load_model(path: &str) -> CliResult<(unmt::model::TransformerModel<f32>, Vocabulary)> {
    let c = checkpoint::load::<f32>(Path::new(path))?;
    Ok((c.model, c.vocab))
}

fn run_gen_data(args: GenDataArgs) -> CliResult<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let defaults = ToyLanguageSpec::default();
    let out = s.require("out", args.out)?;
    let n_train = s.get("n_train", args.n_train, 2000)?;
    let n_test = s.get("n_test", args.n_test, 500)?;
    let seed = s.get("seed", args.seed, 0)?;
    let spec = ToyLanguageSpec {
        vocab_size: s.get("vocab_size", args.vocab_size, defaults.vocab_size)?,
        n_classes: s.get("n_classes", args.n_classes, defaults.n_classes)?,
        n_templates: s.get("n_templates", args.n_templates, defaults.n_templates)?,
        min_len: s.get("min_len", args.min_len, defaults.min_len)?,
        max_len: s.get("max_len", args.max_len, defaults.max_len)?,
        anchor_fraction: s.get("anchor_fraction", args.anchor_fraction, defaults.anchor_fraction)?,
        reorder: match s.get("reorder", args.reorder, "swap_adjacent".to_string())?.as_str() {
            "identity" => ReorderRule::Identity,
            "swap_adjacent" => ReorderRule::SwapAdjacent,
            other => {
                return Err(CliError::Usage(format!(
                    "reorder must be identity or swap_adjacent, got {other}"
                )))
            }
        },
    };
    s.finish()?;
    let bundle = generate_bundle(&spec, n_train, n_test, seed, Path::new(&out))?;
    println!("wrote train_l1={}", bundle.train_l1.display());
    println!("wrote train_l2={}", bundle.train_l2.display());
    println!("wrote test_l1={}", bundle.test_l1.display());
    println!("wrote test_l2={}", bundle.test_l2.display());
    println!("wrote vocab={}", bundle.vocab_file.display());
    println!("wrote manifest={}", bundle.manifest.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> CliResult<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let d = TrainConfig::default();
    let paths = TrainPaths {
        train_l1: PathBuf::from(s.require("train_l1", args.train_l1)?),
        train_l2: PathBuf::from(s.require("train_l2", args.train_l2)?),
        vocab: PathBuf::from(s.require("vocab", args.vocab)?),
        test_l1: s.get_opt("test_l1", args.test_l1)?.map(PathBuf::from),
        test_l2: s.get_opt("test_l2", args.test_l2)?.map(PathBuf::from),
    };
    let out = s.require("out", args.out)?;
    let resume = s.get_opt("resume", args.resume)?;
    let seed = s.get("seed", args.seed, d.seed)?;
    let config = TrainConfig {
        mode: s.get("mode", args.mode, d.mode)?,
        steps: s.get("steps", args.steps, d.steps)?,
        batch_size: s.get("batch_size", args.batch_size, d.batch_size)?,
        lr: s.get("lr", args.lr, d.lr)?,
        beta1: s.get("beta1", args.beta1, d.beta1)?,
        beta2: s.get("beta2", args.beta2, d.beta2)?,
        epsilon_at: s.get("epsilon_at", args.epsilon_at, d.epsilon_at)?,
        spec: NoiseSpec {
            drop_prob: s.get("drop_prob", args.drop_prob, d.spec.drop_prob)?,
            swap_window: s.get("swap_window", args.swap_window, d.spec.swap_window)?,
            seed,
            ..NoiseSpec::default()
        },
        seed,
        checkpoint_every: s.get("checkpoint_every", args.checkpoint_every, d.checkpoint_every)?,
        eval_every: s.get("eval_every", args.eval_every, d.eval_every)?,
        n_layers: s.get("n_layers", args.n_layers, d.n_layers)?,
        d_model: s.get("d_model", args.d_model, d.d_model)?,
        n_heads: s.get("n_heads", args.n_heads, d.n_heads)?,
        d_ff: s.get("d_ff", args.d_ff, d.d_ff)?,
        max_len: s.get("max_len", args.max_len, d.max_len)?,
    };
    s.finish()?;
    let report = train::<f32>(&config, &paths, resume.as_ref().map(Path::new), Path::new(&out))?;
    println!("final_checkpoint={}", report.final_checkpoint.display());
    println!("steps_run={}", report.steps_run);
    println!("mean_loss={:.6}", report.mean_loss);
    println!("rolled_back_steps={}", report.rolled_back_steps);
    Ok(())
}

fn run_translate(args: TranslateArgs) -> CliResult<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let ckpt = s.require("checkpoint", args.checkpoint)?;
    let input = s.require("in", args.input)?;
    let out = s.get_opt("out", args.out)?;
    let source_lang = s.get("source_lang", args.source_lang, Lang::L1)?;
    s.finish()?;
    let (model, vocab) = load_model(&ckpt)?;
    let (sources, unk) = load_corpus(Path::new(&input), &vocab)?;
    if unk > 0 {
        eprintln!("note: {unk} input tokens were out of vocabulary");
    }
    let hyps = decode_corpus(&model, &sources, source_lang, source_lang.other())?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&vocab.decode_line(h));
        text.push('\n');
    }
    match out {
        Some(path) => fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
        None => {
            use std::io::Write;
            // a closed pipe (e.g. `| head`) is not an error for a filter
            if let Err(e) = std::io::stdout().write_all(text.as_bytes()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(Error::io("stdout", e).into());
                }
            }
        }
    }
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let ckpt = s.require("checkpoint", args.checkpoint)?;
    let input = s.require("in", args.input)?;
    let task = s.get("task", args.task, "translation".to_string())?;
    let refs = s.get_opt("refs", args.refs)?;
    let source_lang = s.get("source_lang", args.source_lang, Lang::L1)?;
    let a = s.get("a", args.a, 0.0)?;
    let b = s.get("b", args.b, 0.0)?;
    let seed = s.get("seed", args.seed, 0)?;
    let write_noisy = s.get_opt("write_noisy", args.write_noisy)?;
    s.finish()?;
    let (model, vocab) = load_model(&ckpt)?;
    let (sources, _) = load_corpus(Path::new(&input), &vocab)?;
    let spec = NoiseSpec { a, b, seed, ..NoiseSpec::default() };
    spec.validate()?;

    if let Some(path) = &write_noisy {
        let noisy = apply_eval_noise(&sources, a, b, &vocab, seed, 0xe1)?;
        let mut text = String::new();
        for n in &noisy {
            text.push_str(&vocab.decode_line(n));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }

    let score = match task.as_str() {
        "translation" => {
            let refs = refs.ok_or_else(|| CliError::Usage("task=translation requires --refs".into()))?;
            let (references, _) = load_corpus(Path::new(&refs), &vocab)?;
            if a > 0.0 || b > 0.0 {
                let noisy = apply_eval_noise(&sources, a, b, &vocab, seed, 0xe1)?;
                let hyps = decode_corpus(&model, &noisy, source_lang, source_lang.other())?;
                bleu(&hyps, &references)?
            } else {
                evaluate_translation(&model, &sources, &references, source_lang)?
            }
        }
        "autoencoder" => evaluate_autoencoder(&model, &sources, source_lang, &spec, &vocab)?,
        "similarity" => similarity(&model, &sources, source_lang, &spec, &vocab)?,
        other => {
            return Err(CliError::Usage(format!(
                "task must be translation, autoencoder or similarity, got {other}"
            )))
        }
    };
    println!("task={task} a={a} b={b} {score}");
    Ok(())
}

fn run_sweep(args: SweepArgs) -> CliResult<()> {
    let mut s = Settings::load(args.config.as_deref())?;
    let ckpt = s.require("checkpoint", args.checkpoint)?;
    let test_l1 = s.require("test_l1", args.test_l1)?;
    let test_l2 = s.require("test_l2", args.test_l2)?;
    let axis_name = s.get("axis", args.axis, "a".to_string())?;
    let axis = match axis_name.as_str() {
        "a" => SweepAxis::WordNoise,
        "b" => SweepAxis::OrderNoise,
        other => return Err(CliError::Usage(format!("axis must be a or b, got {other}"))),
    };
    let default_values = match axis {
        SweepAxis::WordNoise => DEFAULT_A_AXIS.map(|v| v.to_string()).join(","),
        SweepAxis::OrderNoise => DEFAULT_B_AXIS.map(|v| v.to_string()).join(","),
    };
    let values = s.get("values", args.values, default_values)?;
    let seed = s.get("seed", args.seed, 0)?;
    let out = s.require("out", args.out)?;
    s.finish()?;
    let levels: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad sweep value {v:?}: {e}")))
        })
        .collect::<CliResult<_>>()?;
    let (model, vocab) = load_model(&ckpt)?;
    let (l1, _) = load_corpus(Path::new(&test_l1), &vocab)?;
    let (l2, _) = load_corpus(Path::new(&test_l2), &vocab)?;
    let result = sweep(&model, &l1, &l2, &vocab, axis, &levels, seed)?;
    write_sweep_csv(&result, Path::new(&out))?;
    print!("{result}");
    println!("wrote csv={out}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(args) => run_gen_data(args),
        Cmd::Train(args) => run_train(args),
        Cmd::Translate(args) => run_translate(args),
        Cmd::Evaluate(args) => run_evaluate(args),
        Cmd::Sweep(args) => run_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error category={} message={e}", e.category());
            ExitCode::from(1)
        }
    }
}
