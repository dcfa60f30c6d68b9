//! Joint denoising + back-translation training loop.
//!
//! Each step draws one batch per language, builds the denoising objective
//! (with the configured adversarial terms) and the online back-translation
//! objective into a single graph, and applies one Adam update to their sum
//! `L_all = L_D' + L_B`. Per-step randomness is derived from (seed, step),
//! so resuming from a checkpoint needs no saved RNG state and reproduces
//! the uninterrupted trajectory exactly.

pub mod adam;

pub use adam::{Adam, GRAD_CLIP};

use std::fs;
use std::fs::OpenOptions;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{build_denoising_terms, corrupt_batch, ATMode};
use crate::data::{load_corpus, load_vocab, BatchStream};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_translation;
use crate::model::checkpoint::{self, Checkpoint, NamedTensor};
use crate::model::{Batch, Lang, ModelConfig, TransformerModel, Vocabulary, UNK};
use crate::noise::{derive_rng, NoiseSpec};
use crate::tensor::{Graph, Scalar, TensorId};

/// Stream identifiers mixed into per-step RNG derivation.
const STREAM_STEP: u64 = 0x7374_6570; // corruption draws for one step
const STREAM_L1: u64 = 0x4c31;
const STREAM_L2: u64 = 0x4c32;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Adversarial training mode for the denoising objective.
    pub mode: ATMode,
    /// Total optimizer steps to reach (a resumed run continues to this).
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Perturbation norm bound for the adversarial terms.
    pub epsilon_at: f64,
    /// Corruption C(·) and seed for all training randomness.
    pub spec: NoiseSpec,
    pub seed: u64,
    /// Write `latest.ckpt` every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
    /// Score the test sets every this many steps (0 = never).
    pub eval_every: u64,
    // Architecture (vocab size comes from the loaded vocabulary).
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = ModelConfig::desk_scale(0);
        TrainConfig {
            mode: ATMode::None,
            steps: 1000,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon_at: 1.0,
            spec: NoiseSpec::default(),
            seed: 0,
            checkpoint_every: 1000,
            eval_every: 0,
            n_layers: desk.n_layers,
            d_model: desk.d_model,
            n_heads: desk.n_heads,
            d_ff: desk.d_ff,
            max_len: desk.max_len,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2)));
        }
        if !(self.epsilon_at >= 0.0 && self.epsilon_at.is_finite()) {
            return Err(Error::Config(format!("epsilon_at must be >= 0, got {}", self.epsilon_at)));
        }
        self.spec.validate()?;
        self.model_config(crate::model::N_SPECIAL + 1).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            vocab_size,
            dropout: 0.0,
        }
    }
}

/// Running means over completed (non-rolled-back) steps.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Running {
    pub sum_all: f64,
    pub sum_denoising: f64,
    pub sum_backtranslation: f64,
    pub count: u64,
}

impl Running {
    fn record(&mut self, m: &StepMetrics) {
        self.sum_all += m.loss_all;
        self.sum_denoising += m.loss_denoising;
        self.sum_backtranslation += m.loss_backtranslation;
        self.count += 1;
    }

    pub fn mean_all(&self) -> f64 {
        if self.count == 0 { f64::NAN } else { self.sum_all / self.count as f64 }
    }
}

#[derive(Debug)]
pub struct TrainState<T> {
    /// Number of steps already taken (the next step index).
    pub step: u64,
    pub adam: Adam<T>,
    pub running: Running,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &TransformerModel<T>, config: &TrainConfig) -> Result<TrainState<T>> {
        Ok(TrainState {
            step: 0,
            adam: Adam::new(&model.params, config.lr, config.beta1, config.beta2)?,
            running: Running::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_denoising: f64,
    pub loss_backtranslation: f64,
    pub loss_all: f64,
    pub grad_norm: f64,
    /// Back-translation generations that came out empty and were replaced
    /// by a single UNK token.
    pub empty_generations: usize,
    /// Sentences truncated to max_len in this step's batches.
    pub truncated: usize,
    /// True when a non-finite loss or gradient aborted the update; the
    /// model and optimizer are left exactly as before the step.
    pub rolled_back: bool,
}

impl StepMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "step={} loss_all={:.9e} loss_denoising={:.9e} loss_backtranslation={:.9e} grad_norm={:.9e} empty_generations={} truncated={} rolled_back={}",
            self.step,
            self.loss_all,
            self.loss_denoising,
            self.loss_backtranslation,
            self.grad_norm,
            self.empty_generations,
            self.truncated,
            self.rolled_back
        )
    }
}

/// Builds both directions of the online back-translation objective into `g`.
///
/// Each clean batch is translated into the other language with the current
/// weights through the no-grad inference path (generation is frozen: it
/// contributes no gradient), then the model is trained to reconstruct the
/// clean batch from its own translation. Empty generations are replaced by
/// a single UNK token and counted. Returns the scalar sum and that count.
pub fn build_backtranslation_terms<T: Scalar>(
    model: &TransformerModel<T>,
    g: &mut Graph<T>,
    bind: &crate::model::params::Binding,
    clean_l1: &Batch,
    clean_l2: &Batch,
) -> Result<(TensorId, usize)> {
    let max_new = model.config.max_len - 2;
    let mut empties = 0usize;
    let mut total: Option<TensorId> = None;
    for clean in [clean_l1, clean_l2] {
        let mut generated = model.translate(clean, clean.lang.other(), max_new)?;
        for gen in &mut generated {
            if gen.is_empty() {
                *gen = vec![UNK];
                empties += 1;
            }
        }
        let (pseudo, _) = Batch::from_sentences(&generated, clean.lang.other(), model.config.max_len)?;
        let (loss, _) = model.reconstruction_loss(g, bind, &pseudo, clean, None, None, false, None)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    Ok((total.expect("two terms"), empties))
}

/// The back-translation loss for one batch pair, evaluated to a scalar.
pub fn backtranslation_loss<T: Scalar>(
    model: &TransformerModel<T>,
    clean_l1: &Batch,
    clean_l2: &Batch,
) -> Result<(T, usize)> {
    let mut g: Graph<T> = Graph::new();
    let bind = model.bind(&mut g, false);
    let (id, empties) = build_backtranslation_terms(model, &mut g, &bind, clean_l1, clean_l2)?;
    Ok((g.scalar_value(id), empties))
}

/// One optimizer step: denoising (with adversarial terms per `config.mode`)
/// plus back-translation, one Adam update on the sum. A non-finite loss or
/// gradient aborts the update and leaves all state untouched except the
/// step counter.
pub fn train_step<T: Scalar>(
    model: &mut TransformerModel<T>,
    state: &mut TrainState<T>,
    config: &TrainConfig,
    stream_l1: &BatchStream,
    stream_l2: &BatchStream,
) -> Result<StepMetrics> {
    let step = state.step;
    let (clean_l1, trunc1) = stream_l1.batch_at(step);
    let (clean_l2, trunc2) = stream_l2.batch_at(step);
    let mut rng = derive_rng(config.seed, step, STREAM_STEP);
    let c1 = corrupt_batch(&clean_l1, &config.spec, config.max_len, &mut rng)?;
    let c2 = corrupt_batch(&clean_l2, &config.spec, config.max_len, &mut rng)?;

    let mut g: Graph<T> = Graph::new();
    let bind = model.bind(&mut g, true);
    let d1 = build_denoising_terms(model, &mut g, &bind, &c1, &clean_l1, config.mode, config.epsilon_at)?;
    let d2 = build_denoising_terms(model, &mut g, &bind, &c2, &clean_l2, config.mode, config.epsilon_at)?;
    let denoising = g.add(d1, d2)?;
    let (bt, empty_generations) = build_backtranslation_terms(model, &mut g, &bind, &clean_l1, &clean_l2)?;
    let total = g.add(denoising, bt)?;

    let mut metrics = StepMetrics {
        step,
        loss_denoising: g.scalar_value(denoising).as_f64(),
        loss_backtranslation: g.scalar_value(bt).as_f64(),
        loss_all: g.scalar_value(total).as_f64(),
        grad_norm: 0.0,
        empty_generations,
        truncated: trunc1 + trunc2,
        rolled_back: false,
    };

    if !metrics.loss_all.is_finite() {
        metrics.rolled_back = true;
        state.step += 1;
        return Ok(metrics);
    }
    g.backward(total)?;
    let grads = bind.collect_grads(&g)?;
    match state.adam.step(&mut model.params, &grads) {
        Ok(norm) => metrics.grad_norm = norm,
        Err(Error::NonFinite(_)) => metrics.rolled_back = true,
        Err(e) => return Err(e),
    }
    if !metrics.rolled_back {
        state.running.record(&metrics);
    }
    state.step += 1;
    Ok(metrics)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointExtra {
    step: u64,
    adam_t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    running: Running,
}

/// Saves model, vocabulary and full optimizer state; a reload continues
/// training bit-for-bit where this left off.
pub fn save_state<T: Scalar>(
    path: &Path,
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    state: &TrainState<T>,
) -> Result<()> {
    let extra = serde_json::to_value(CheckpointExtra {
        step: state.step,
        adam_t: state.adam.t,
        lr: state.adam.lr,
        beta1: state.adam.beta1,
        beta2: state.adam.beta2,
        running: state.running.clone(),
    })
    .map_err(|e| Error::BadCheckpoint(format!("state encode: {e}")))?;
    let mut tensors = Vec::with_capacity(2 * model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        tensors.push(NamedTensor { name: format!("adam.m.{}", p.name), rows: p.rows, cols: p.cols, data: state.adam.m[i].clone() });
        tensors.push(NamedTensor { name: format!("adam.v.{}", p.name), rows: p.rows, cols: p.cols, data: state.adam.v[i].clone() });
    }
    checkpoint::save(path, model, vocab, extra, &tensors)
}

/// Restores a training checkpoint written by [`save_state`].
pub fn load_state<T: Scalar>(path: &Path) -> Result<(TransformerModel<T>, Vocabulary, TrainState<T>)> {
    let Checkpoint { model, vocab, extra, extra_tensors } = checkpoint::load::<T>(path)?;
    let extra: CheckpointExtra = serde_json::from_value(extra)
        .map_err(|e| Error::BadCheckpoint(format!("not a training checkpoint: {e}")))?;
    let mut adam = Adam::new(&model.params, extra.lr, extra.beta1, extra.beta2)?;
    adam.t = extra.adam_t;
    for (i, p) in model.params.iter().enumerate() {
        for (prefix, dst) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            let name = format!("{prefix}{}", p.name);
            let t = extra_tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing optimizer tensor {name}")))?;
            if t.data.len() != p.data.len() {
                return Err(Error::BadCheckpoint(format!("optimizer tensor {name} has wrong size")));
            }
            dst[i] = t.data.clone();
        }
    }
    Ok((model, vocab, TrainState { step: extra.step, adam, running: extra.running }))
}

#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub train_l1: PathBuf,
    pub train_l2: PathBuf,
    pub vocab: PathBuf,
    /// Parallel test sets for periodic evaluation (both or neither).
    pub test_l1: Option<PathBuf>,
    pub test_l2: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub steps_run: u64,
    pub mean_loss: f64,
    pub rolled_back_steps: u64,
}

/// Runs the training loop to `config.steps` total steps, appending per-step
/// metrics to `<out_dir>/metrics.log` and writing `final.ckpt` (plus a
/// rolling `latest.ckpt` every `checkpoint_every` steps). With
/// `resume_from`, training continues from that checkpoint's step; with
/// `steps = 0` only the initial checkpoint is written.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    paths: &TrainPaths,
    resume_from: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let (mut model, vocab, mut state) = match resume_from {
        Some(p) => load_state::<T>(p)?,
        None => {
            let vocab = load_vocab(&paths.vocab)?;
            let model = TransformerModel::<T>::new(config.model_config(vocab.size()), config.seed)?;
            let state = TrainState::new(&model, config)?;
            (model, vocab, state)
        }
    };
    if model.config.max_len != config.max_len {
        return Err(Error::Config(format!(
            "checkpoint max_len {} does not match configured {}",
            model.config.max_len, config.max_len
        )));
    }

    let stream_l1 = BatchStream::new(&paths.train_l1, &vocab, config.batch_size, config.max_len, Lang::L1, config.seed ^ STREAM_L1)?;
    let stream_l2 = BatchStream::new(&paths.train_l2, &vocab, config.batch_size, config.max_len, Lang::L2, config.seed ^ STREAM_L2)?;
    let test_pair = match (&paths.test_l1, &paths.test_l2) {
        (Some(a), Some(b)) => Some((load_corpus(a, &vocab)?.0, load_corpus(b, &vocab)?.0)),
        (None, None) => None,
        _ => return Err(Error::Config("test_l1 and test_l2 must be given together".into())),
    };

    let metrics_path = out_dir.join("metrics.log");
    let mut metrics_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let mut log = |line: &str| -> Result<()> {
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(metrics_path.display().to_string(), e))
    };

    let start = state.step;
    let mut rolled_back_steps = 0u64;
    if start == 0 && config.steps == 0 {
        save_state(&out_dir.join("final.ckpt"), &model, &vocab, &state)?;
        return Ok(TrainReport {
            final_checkpoint: out_dir.join("final.ckpt"),
            steps_run: 0,
            mean_loss: f64::NAN,
            rolled_back_steps: 0,
        });
    }

    while state.step < config.steps {
        let m = train_step(&mut model, &mut state, config, &stream_l1, &stream_l2)?;
        if m.rolled_back {
            rolled_back_steps += 1;
        }
        log(&m.log_line())?;
        let done = state.step;
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            save_state(&out_dir.join("latest.ckpt"), &model, &vocab, &state)?;
        }
        if config.eval_every > 0 && done % config.eval_every == 0 {
            if let Some((test_l1, test_l2)) = &test_pair {
                let b12 = evaluate_translation(&model, test_l1, test_l2, Lang::L1)?;
                let b21 = evaluate_translation(&model, test_l2, test_l1, Lang::L2)?;
                log(&format!("eval step={done} bleu_l1_l2={:.4} bleu_l2_l1={:.4}", b12.score, b21.score))?;
            }
        }
    }
    let final_path = out_dir.join("final.ckpt");
    save_state(&final_path, &model, &vocab, &state)?;
    Ok(TrainReport {
        final_checkpoint: final_path,
        steps_run: state.step - start,
        mean_loss: state.running.mean_all(),
        rolled_back_steps,
    })
}
