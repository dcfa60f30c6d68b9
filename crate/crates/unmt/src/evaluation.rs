//! Case-sensitive 4-gram corpus BLEU (no smoothing), translation /
//! auto-encoder / clean-vs-noisy similarity scoring, and the noise-sweep
//! harness.
//!
//! Similarity is BLEU between translations of noisy inputs (hypotheses) and
//! translations of the corresponding clean inputs (references); at zero
//! noise it is 100.00 by construction for a deterministic decoder. Sweep
//! noise is keyed by (seed, level, line) only, so two models evaluated with
//! the same seed see identical noised inputs.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Batch, Lang, TransformerModel, Vocabulary};
use crate::noise::{derive_rng, order_noise, word_noise, NoiseSpec};
use crate::tensor::Scalar;

/// Figure-style default sweep levels for word noise `a`.
pub const DEFAULT_A_AXIS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];
/// Figure-style default sweep levels for word-order noise `b`.
pub const DEFAULT_B_AXIS: [f64; 6] = [0.0, 2.0, 3.0, 5.0, 8.0, 10.0];

/// Corpus-level BLEU with component statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// In [0, 100].
    pub score: f64,
    /// Clipped n-gram precisions p1..p4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2} ({:.3}/{:.3}/{:.3}/{:.3}, BP = {:.3}, hyp_len = {}, ref_len = {})",
            self.score,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Case-sensitive 4-gram corpus BLEU: clipped n-gram counts pooled over the
/// corpus, brevity penalty exp(1 - r/h) for h < r, no smoothing. Any zero
/// n-gram precision zeroes the score.
pub fn bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<BleuScore> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "bleu needs equal non-empty lists, got {} hypotheses and {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let mut ref_counts: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
            if r.len() >= n {
                for g in r.windows(n) {
                    *ref_counts.entry(g).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: std::collections::HashMap<&[u32], usize> = std::collections::HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_insert(0) += 1;
            }
            totals[n - 1] += h.len() + 1 - n;
            for (g, c) in hyp_counts {
                matches[n - 1] += c.min(ref_counts.get(g).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Applies evaluation noise (word noise `a` then order noise `b`) to
/// id-sentences in memory. Line `i` uses an RNG derived from (seed,
/// stream_tag, i), independent of the model under evaluation.
pub fn apply_eval_noise(
    sentences: &[Vec<u32>],
    a: f64,
    b: f64,
    vocab: &Vocabulary,
    seed: u64,
    stream_tag: u64,
) -> Result<Vec<Vec<u32>>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, stream_tag, i as u64);
            let (s, _) = word_noise(s, a, vocab.content_ids(), &mut rng)?;
            let (s, _) = order_noise(&s, b, &mut rng)?;
            Ok(s)
        })
        .collect()
}

/// Greedy-decodes every sentence toward `target_lang`, in fixed-size chunks.
pub fn decode_corpus<T: Scalar>(
    model: &TransformerModel<T>,
    sources: &[Vec<u32>],
    source_lang: Lang,
    target_lang: Lang,
) -> Result<Vec<Vec<u32>>> {
    let max_new = model.config.max_len - 2;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(32) {
        let (batch, _) = Batch::from_sentences(chunk, source_lang, model.config.max_len)?;
        out.extend(model.translate(&batch, target_lang, max_new)?);
    }
    Ok(out)
}

/// Translation BLEU: decode noisy (or clean) sources, score against the
/// parallel references.
pub fn evaluate_translation<T: Scalar>(
    model: &TransformerModel<T>,
    sources: &[Vec<u32>],
    references: &[Vec<u32>],
    source_lang: Lang,
) -> Result<BleuScore> {
    if sources.len() != references.len() {
        return Err(Error::InvalidArgument("sources/references length mismatch".into()));
    }
    let hyps = decode_corpus(model, sources, source_lang, source_lang.other())?;
    bleu(&hyps, references)
}

/// Auto-encoder BLEU: noise the input with (spec.a, spec.b), reconstruct in
/// the same language, score against the clean original.
pub fn evaluate_autoencoder<T: Scalar>(
    model: &TransformerModel<T>,
    sentences: &[Vec<u32>],
    lang: Lang,
    spec: &NoiseSpec,
    vocab: &Vocabulary,
) -> Result<BleuScore> {
    let noisy = apply_eval_noise(sentences, spec.a, spec.b, vocab, spec.seed, 0xae)?;
    let hyps = decode_corpus(model, &noisy, lang, lang)?;
    bleu(&hyps, sentences)
}

/// Clean-vs-noisy similarity: BLEU of translations of noisy inputs against
/// translations of the corresponding clean inputs.
pub fn similarity<T: Scalar>(
    model: &TransformerModel<T>,
    sources: &[Vec<u32>],
    source_lang: Lang,
    spec: &NoiseSpec,
    vocab: &Vocabulary,
) -> Result<BleuScore> {
    let noisy = apply_eval_noise(sources, spec.a, spec.b, vocab, spec.seed, 0x51)?;
    let hyp = decode_corpus(model, &noisy, source_lang, source_lang.other())?;
    let reference = decode_corpus(model, sources, source_lang, source_lang.other())?;
    bleu(&hyp, &reference)
}

/// Which noise parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    WordNoise,
    OrderNoise,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WordNoise => "a",
            SweepAxis::OrderNoise => "b",
        }
    }

    fn tag(self, level_idx: usize) -> u64 {
        let base = match self {
            SweepAxis::WordNoise => 0xa000_0000u64,
            SweepAxis::OrderNoise => 0xb000_0000u64,
        };
        base + level_idx as u64
    }
}

/// All scores at one noise level.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub level: f64,
    pub translation_l1_l2: f64,
    pub translation_l2_l1: f64,
    pub autoencoder_l1: f64,
    pub autoencoder_l2: f64,
    pub similarity_l1_l2: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn levels(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.level).collect()
    }
}

impl fmt::Display for SweepResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sweep axis={}", self.axis.name())?;
        for p in &self.points {
            writeln!(
                f,
                "level={:.3} trans_l1_l2={:.2} trans_l2_l1={:.2} ae_l1={:.2} ae_l2={:.2} similarity={:.2}",
                p.level, p.translation_l1_l2, p.translation_l2_l1, p.autoencoder_l1, p.autoencoder_l2, p.similarity_l1_l2
            )?;
        }
        Ok(())
    }
}

/// Evaluates translation (both directions), auto-encoding (both languages)
/// and similarity at every level of the axis. Noised inputs depend only on
/// (seed, axis, level index, line), never on the model.
pub fn sweep<T: Scalar>(
    model: &TransformerModel<T>,
    test_l1: &[Vec<u32>],
    test_l2: &[Vec<u32>],
    vocab: &Vocabulary,
    axis: SweepAxis,
    levels: &[f64],
    seed: u64,
) -> Result<SweepResult> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("empty sweep axis".into()));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("sweep axis must be strictly increasing".into()));
    }
    if test_l1.len() != test_l2.len() {
        return Err(Error::InvalidArgument("test halves length mismatch".into()));
    }
    // Clean-input translations are level-independent; reused as the
    // similarity reference at every level.
    let clean_trans_l1 = decode_corpus(model, test_l1, Lang::L1, Lang::L2)?;
    let mut points = Vec::with_capacity(levels.len());
    for (idx, &level) in levels.iter().enumerate() {
        let (a, b) = match axis {
            SweepAxis::WordNoise => (level, 0.0),
            SweepAxis::OrderNoise => (0.0, level),
        };
        let tag = axis.tag(idx);
        let noisy_l1 = apply_eval_noise(test_l1, a, b, vocab, seed, tag)?;
        let noisy_l2 = apply_eval_noise(test_l2, a, b, vocab, seed, tag ^ 0xff)?;

        let hyp_l1 = decode_corpus(model, &noisy_l1, Lang::L1, Lang::L2)?;
        let translation_l1_l2 = bleu(&hyp_l1, test_l2)?.score;
        let hyp_l2 = decode_corpus(model, &noisy_l2, Lang::L2, Lang::L1)?;
        let translation_l2_l1 = bleu(&hyp_l2, test_l1)?.score;

        let ae1 = decode_corpus(model, &noisy_l1, Lang::L1, Lang::L1)?;
        let autoencoder_l1 = bleu(&ae1, test_l1)?.score;
        let ae2 = decode_corpus(model, &noisy_l2, Lang::L2, Lang::L2)?;
        let autoencoder_l2 = bleu(&ae2, test_l2)?.score;

        let similarity_l1_l2 = bleu(&hyp_l1, &clean_trans_l1)?.score;
        let p = SweepPoint {
            level,
            translation_l1_l2,
            translation_l2_l1,
            autoencoder_l1,
            autoencoder_l2,
            similarity_l1_l2,
        };
        for v in [p.translation_l1_l2, p.translation_l2_l1, p.autoencoder_l1, p.autoencoder_l2, p.similarity_l1_l2] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sweep score at level {level}")));
            }
        }
        points.push(p);
    }
    Ok(SweepResult { axis, points })
}

/// Writes a sweep as CSV with a documenting header comment.
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut body = String::new();
    body.push_str("# noise sweep: one row per noise level\n");
    body.push_str(&format!("# level: {} value; trans_*: translation BLEU by direction;\n", result.axis.name()));
    body.push_str("# ae_*: auto-encoder BLEU per language; similarity: BLEU of noisy-input\n");
    body.push_str("# translations against clean-input translations (L1->L2)\n");
    body.push_str("level,trans_l1_l2,trans_l2_l1,ae_l1,ae_l2,similarity\n");
    for p in &result.points {
        body.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            p.level, p.translation_l1_l2, p.translation_l2_l1, p.autoencoder_l1, p.autoencoder_l2, p.similarity_l1_l2
        ));
    }
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Ordinary least-squares slope of ys over xs; the sweep trend statistic.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}
