//! Gradient-direction adversarial perturbations on the word and positional
//! embeddings, and the adversarial denoising objectives built from them.
//!
//! The perturbation protocol is two-pass: pass 1 runs the plain denoising
//! loss on a corrupted batch and reads the gradient at an embedding
//! injection point; the perturbation delta = epsilon * g / ||g||_2 (Frobenius
//! norm per sentence) is then treated as a constant in pass 2, whose loss is
//! what joins the training objective. Pass-1 parameter gradients are
//! discarded. Both passes condition on the same corruption draw.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, TransformerModel};
use crate::noise::{corrupt, NoiseSpec};
use crate::tensor::{Graph, Scalar, TensorId};

/// Which denoising objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ATMode {
    None,
    WordAt,
    PositionAt,
    BothAt,
}

impl ATMode {
    pub fn wants_word(self) -> bool {
        matches!(self, ATMode::WordAt | ATMode::BothAt)
    }

    pub fn wants_position(self) -> bool {
        matches!(self, ATMode::PositionAt | ATMode::BothAt)
    }
}

impl std::str::FromStr for ATMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ATMode::None),
            "word_at" => Ok(ATMode::WordAt),
            "position_at" => Ok(ATMode::PositionAt),
            "both_at" => Ok(ATMode::BothAt),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode: {s} (expected none | word_at | position_at | both_at)"
            ))),
        }
    }
}

impl std::fmt::Display for ATMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ATMode::None => "none",
            ATMode::WordAt => "word_at",
            ATMode::PositionAt => "position_at",
            ATMode::BothAt => "both_at",
        })
    }
}

/// Injection point of a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaTarget {
    WordEmbedding,
    PositionalEmbedding,
}

/// An additive embedding perturbation, (rows*cols, d) row-major. Every
/// per-sentence slice has L2 norm epsilon (or 0 when its gradient vanished)
/// and pad positions are exactly zero.
#[derive(Debug, Clone)]
pub struct Perturbation<T> {
    pub delta: Vec<T>,
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub epsilon: f64,
    pub target: DeltaTarget,
}

impl<T: Scalar> Perturbation<T> {
    /// L2 norm of one sentence's slice, computed in f64.
    pub fn sentence_norm(&self, r: usize) -> f64 {
        let n = self.cols * self.d;
        self.delta[r * n..(r + 1) * n]
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Scales each sentence's gradient block to L2 norm `epsilon`. A
/// zero-gradient block yields a zero delta (documented degenerate case).
/// Positions at or beyond `lengths[r]` are forced to zero.
pub fn make_delta<T: Scalar>(
    grad: &[T],
    rows: usize,
    cols: usize,
    d: usize,
    lengths: &[usize],
    epsilon: f64,
    target: DeltaTarget,
) -> Result<Perturbation<T>> {
    if grad.len() != rows * cols * d {
        return Err(Error::ShapeMismatch {
            op: "make_delta",
            details: format!("gradient has {} values, expected {rows}x{cols}x{d}", grad.len()),
        });
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon = {epsilon}")));
    }
    for (i, v) in grad.iter().enumerate() {
        if !v.as_f64().is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient[{i}] = {} (sentence {}, position {})",
                v.as_f64(),
                i / (cols * d),
                (i / d) % cols
            )));
        }
    }
    let mut delta = vec![T::zero(); rows * cols * d];
    for r in 0..rows {
        let len = lengths[r].min(cols);
        let block = &grad[r * cols * d..(r * cols + len) * d];
        let norm = block.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let scale = epsilon / norm;
        let out = &mut delta[r * cols * d..(r * cols + len) * d];
        for (o, v) in out.iter_mut().zip(block) {
            *o = T::from_f64(v.as_f64() * scale);
        }
    }
    Ok(Perturbation {
        delta,
        rows,
        cols,
        d,
        epsilon,
        target,
    })
}

/// A per-sentence random direction with the same norm contract as
/// `make_delta`; the comparison arm of the first-order adversariality check.
pub fn random_delta<T: Scalar>(
    rows: usize,
    cols: usize,
    d: usize,
    lengths: &[usize],
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<T> {
    use rand::Rng;
    let mut raw = vec![0.0f64; rows * cols * d];
    for r in 0..rows {
        let len = lengths[r].min(cols);
        for v in raw[r * cols * d..(r * cols + len) * d].iter_mut() {
            // Box-Muller would be overkill; a symmetric uniform direction
            // normalized per sentence is an equally valid random direction.
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let perm = make_delta::<f64>(&raw, rows, cols, d, lengths, epsilon, DeltaTarget::WordEmbedding)
        .expect("finite by construction");
    perm.delta.iter().map(|&v| T::from_f64(v)).collect()
}

/// Corrupts every sentence of a clean batch with C(·), preserving language
/// and row order. Empty sentences pass through unchanged.
pub fn corrupt_batch(clean: &Batch, spec: &NoiseSpec, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut sentences = Vec::with_capacity(clean.rows);
    for r in 0..clean.rows {
        let content = clean.content(r);
        if content.is_empty() {
            sentences.push(Vec::new());
        } else {
            sentences.push(corrupt(content, spec, rng)?);
        }
    }
    let (batch, _) = Batch::from_sentences(&sentences, clean.lang, max_len)?;
    Ok(batch)
}

/// Pass 1: plain denoising loss on (corrupted -> clean) with gradients
/// tracked only at the embedding injection points. Returns (loss value,
/// word-point gradient, position-point gradient); parameter gradients are
/// never computed.
pub fn embedding_gradients_for<T: Scalar>(
    model: &TransformerModel<T>,
    corrupted: &Batch,
    clean: &Batch,
) -> Result<(T, Vec<T>, Vec<T>)> {
    let mut g: Graph<T> = Graph::new();
    let bind = model.bind(&mut g, false);
    let (loss, enc) = model.reconstruction_loss(&mut g, &bind, corrupted, clean, None, None, true, None)?;
    g.backward(loss)?;
    let (wg, pg) = model.embedding_gradients(&g, &enc)?;
    Ok((g.scalar_value(loss), wg, pg))
}

/// Folds a per-occurrence embedding gradient down to the granularity of the
/// embedding table the perturbation is injected into, then broadcasts the
/// sums back to every occurrence.
///
/// The word perturbation is added to a token's embedding before it is
/// combined with the positional embedding, so every occurrence of a token id
/// in the batch shares one perturbation row; its gradient is the sum over
/// those occurrences. The positional perturbation is added to a position's
/// embedding before it is combined with the word embedding, so every row
/// that reaches a position shares that row; its gradient sums over the
/// batch rows. This tying is what distinguishes the two objectives: a
/// word-tied delta follows a token wherever it moves, a position-tied delta
/// stays put whatever token lands there.
pub fn tie_gradient<T: Scalar>(grad: &mut [T], batch: &Batch, d: usize, target: DeltaTarget) {
    match target {
        DeltaTarget::WordEmbedding => {
            // Only content positions carry a word perturbation. The language
            // tag and eos occur in every row, so including them would let
            // their batch-wide accumulated gradients soak up most of each
            // sentence's epsilon budget (and perturbing the direction tag is
            // not a word-noise robustness signal anyway).
            let content = |len: usize, p: usize| p > 0 && p + 1 < len;
            let mut sums: std::collections::HashMap<u32, Vec<f64>> = std::collections::HashMap::new();
            for r in 0..batch.rows {
                let row = batch.row(r);
                let len = batch.lengths[r].min(batch.cols);
                for p in 0..len {
                    if !content(len, p) {
                        continue;
                    }
                    let acc = sums.entry(row[p]).or_insert_with(|| vec![0.0; d]);
                    let base = (r * batch.cols + p) * d;
                    for (a, v) in acc.iter_mut().zip(&grad[base..base + d]) {
                        *a += v.as_f64();
                    }
                }
            }
            for r in 0..batch.rows {
                let row = batch.row(r);
                let len = batch.lengths[r].min(batch.cols);
                for p in 0..len {
                    let base = (r * batch.cols + p) * d;
                    if content(len, p) {
                        let acc = &sums[&row[p]];
                        for (o, a) in grad[base..base + d].iter_mut().zip(acc) {
                            *o = T::from_f64(*a);
                        }
                    } else {
                        for o in grad[base..base + d].iter_mut() {
                            *o = T::zero();
                        }
                    }
                }
            }
        }
        DeltaTarget::PositionalEmbedding => {
            let mut acc = vec![0.0f64; d];
            for p in 0..batch.cols {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for r in 0..batch.rows {
                    if p < batch.lengths[r].min(batch.cols) {
                        let base = (r * batch.cols + p) * d;
                        for (a, v) in acc.iter_mut().zip(&grad[base..base + d]) {
                            *a += v.as_f64();
                        }
                    }
                }
                for r in 0..batch.rows {
                    if p < batch.lengths[r].min(batch.cols) {
                        let base = (r * batch.cols + p) * d;
                        for (o, a) in grad[base..base + d].iter_mut().zip(&acc) {
                            *o = T::from_f64(*a);
                        }
                    }
                }
            }
        }
    }
}

/// Pass 2 as a standalone evaluation: reconstruction loss of (corrupted ->
/// clean) under fixed embedding deltas, no gradients.
pub fn loss_with_delta<T: Scalar>(
    model: &TransformerModel<T>,
    corrupted: &Batch,
    clean: &Batch,
    word_delta: Option<&[T]>,
    pos_delta: Option<&[T]>,
) -> Result<T> {
    let mut g: Graph<T> = Graph::new();
    let bind = model.bind(&mut g, false);
    let (loss, _) = model.reconstruction_loss(&mut g, &bind, corrupted, clean, word_delta, pos_delta, false, None)?;
    Ok(g.scalar_value(loss))
}

fn at_loss<T: Scalar>(
    model: &TransformerModel<T>,
    clean: &Batch,
    spec: &NoiseSpec,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
    target: DeltaTarget,
) -> Result<T> {
    let corrupted = corrupt_batch(clean, spec, model.config.max_len, rng)?;
    let (_, wg, pg) = embedding_gradients_for(model, &corrupted, clean)?;
    let d = model.config.d_model;
    let mut grad = match target {
        DeltaTarget::WordEmbedding => wg,
        DeltaTarget::PositionalEmbedding => pg,
    };
    tie_gradient(&mut grad, &corrupted, d, target);
    let perm = make_delta(&grad, corrupted.rows, corrupted.cols, d, &corrupted.lengths, epsilon, target)?;
    match target {
        DeltaTarget::WordEmbedding => loss_with_delta(model, &corrupted, clean, Some(&perm.delta), None),
        DeltaTarget::PositionalEmbedding => loss_with_delta(model, &corrupted, clean, None, Some(&perm.delta)),
    }
}

/// Adversarial denoising loss with the perturbation on the word embeddings.
pub fn word_at_loss<T: Scalar>(
    model: &TransformerModel<T>,
    clean: &Batch,
    spec: &NoiseSpec,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    at_loss(model, clean, spec, epsilon, rng, DeltaTarget::WordEmbedding)
}

/// Adversarial denoising loss with the perturbation on the positional
/// embeddings.
pub fn position_at_loss<T: Scalar>(
    model: &TransformerModel<T>,
    clean: &Batch,
    spec: &NoiseSpec,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    at_loss(model, clean, spec, epsilon, rng, DeltaTarget::PositionalEmbedding)
}

/// Builds the denoising objective for one language pair of batches into an
/// existing graph (typically the training graph, with parameters bound
/// grad-tracking). Adds the plain denoising term plus the adversarial terms
/// selected by `mode`; all terms share `corrupted`. Returns the scalar sum.
pub fn build_denoising_terms<T: Scalar>(
    model: &TransformerModel<T>,
    g: &mut Graph<T>,
    bind: &crate::model::params::Binding,
    corrupted: &Batch,
    clean: &Batch,
    mode: ATMode,
    epsilon: f64,
) -> Result<TensorId> {
    let d = model.config.d_model;
    let (mut total, _) = model.reconstruction_loss(g, bind, corrupted, clean, None, None, false, None)?;
    if mode == ATMode::None {
        return Ok(total);
    }
    // Pass 1 in a throwaway graph; its parameter gradients are never formed.
    let (_, mut wg, mut pg) = embedding_gradients_for(model, corrupted, clean)?;
    if mode.wants_word() {
        tie_gradient(&mut wg, corrupted, d, DeltaTarget::WordEmbedding);
        let perm = make_delta(&wg, corrupted.rows, corrupted.cols, d, &corrupted.lengths, epsilon, DeltaTarget::WordEmbedding)?;
        let (lw, _) = model.reconstruction_loss(g, bind, corrupted, clean, Some(&perm.delta), None, false, None)?;
        total = g.add(total, lw)?;
    }
    if mode.wants_position() {
        tie_gradient(&mut pg, corrupted, d, DeltaTarget::PositionalEmbedding);
        let perm = make_delta(&pg, corrupted.rows, corrupted.cols, d, &corrupted.lengths, epsilon, DeltaTarget::PositionalEmbedding)?;
        let (lp, _) = model.reconstruction_loss(g, bind, corrupted, clean, None, Some(&perm.delta), false, None)?;
        total = g.add(total, lp)?;
    }
    Ok(total)
}

/// The full denoising objective over both languages, evaluated to a scalar:
/// mode none -> L_D; word_at -> L_D + word terms; position_at -> L_D +
/// positional terms; both_at -> all of them. Corruption draws come from
/// `rng` (language 1 first).
pub fn denoising_objective<T: Scalar>(
    model: &TransformerModel<T>,
    clean_l1: &Batch,
    clean_l2: &Batch,
    mode: ATMode,
    spec: &NoiseSpec,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> Result<T> {
    let c1 = corrupt_batch(clean_l1, spec, model.config.max_len, rng)?;
    let c2 = corrupt_batch(clean_l2, spec, model.config.max_len, rng)?;
    let mut g: Graph<T> = Graph::new();
    let bind = model.bind(&mut g, false);
    let t1 = build_denoising_terms(model, &mut g, &bind, &c1, clean_l1, mode, epsilon)?;
    let t2 = build_denoising_terms(model, &mut g, &bind, &c2, clean_l2, mode, epsilon)?;
    let total = g.add(t1, t2)?;
    Ok(g.scalar_value(total))
}
