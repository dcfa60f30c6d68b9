//! Synthetic noise generators and the training-time corruption C(·).
//!
//! Two evaluation-time noise types operate on content-token sentences:
//! word noise replaces each token independently with probability `a` by a
//! uniform draw from the content vocabulary; word-order noise permutes the
//! sentence by sorting scores Q_i = i + U(0,b), which bounds every token's
//! displacement by b and is the identity whenever b <= 1.
//!
//! The corruption C(·) used during denoising training is separate: each
//! token is dropped with `drop_prob` (at least one survivor) and the rest
//! are locally shuffled with magnitude `swap_window`.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Vocabulary, N_SPECIAL};

/// Noise parameters. `a`/`b` are the evaluation-time noise levels; the
/// `drop_prob`/`swap_window` pair parameterizes the training corruption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Word-replacement probability, in [0, 1].
    pub a: f64,
    /// Word-order magnitude, >= 0.
    pub b: f64,
    /// Token-deletion probability of C(·), in [0, 1).
    pub drop_prob: f64,
    /// Local-swap magnitude of C(·).
    pub swap_window: f64,
    /// RNG seed for corpus-level operations.
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            a: 0.0,
            b: 0.0,
            drop_prob: 0.1,
            swap_window: 3.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::InvalidArgument(format!("a = {} outside [0,1]", self.a)));
        }
        if self.b < 0.0 || !self.b.is_finite() {
            return Err(Error::InvalidArgument(format!("b = {} negative", self.b)));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "drop_prob = {} outside [0,1)",
                self.drop_prob
            )));
        }
        if self.swap_window < 0.0 || !self.swap_window.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "swap_window = {} negative",
                self.swap_window
            )));
        }
        Ok(())
    }
}

/// The permutation applied by order noise, with its score array.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderPermutation {
    /// gamma[i] = output position of source index i (0-based).
    pub gamma: Vec<usize>,
    /// The scores Q_i = (i+1) + draw_i that were sorted (1-based positions).
    pub q: Vec<f64>,
}

impl OrderPermutation {
    pub fn max_displacement(&self) -> usize {
        self.gamma
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi.abs_diff(i))
            .max()
            .unwrap_or(0)
    }

    pub fn mean_displacement(&self) -> f64 {
        if self.gamma.is_empty() {
            return 0.0;
        }
        let total: usize = self.gamma.iter().enumerate().map(|(i, &gi)| gi.abs_diff(i)).sum();
        total as f64 / self.gamma.len() as f64
    }
}

/// Deterministic stream derivation: one independent RNG per (seed, a, b)
/// triple, so corpus lines and training steps never share or consume each
/// other's randomness.
fn mix64(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    // Each word is mixed on its own before combining, so distinct triples
    // never alias (a plain sum would let (seed+1, a-1) collide with (seed, a)).
    let x = mix64(mix64(mix64(seed) ^ mix64(a ^ 0x9d8f_3c1e_5b7a_2460)) ^ mix64(b ^ 0x517c_c1b7_2722_0a95));
    ChaCha8Rng::seed_from_u64(x)
}

/// Replaces each token independently with probability `a` by a uniform draw
/// from the content vocabulary (ids >= N_SPECIAL). The draw may coincide
/// with the original token. Length is always preserved; special tokens are
/// never touched. Returns the noised sentence and the replacement-event
/// count.
pub fn word_noise(
    sentence: &[u32],
    a: f64,
    content_ids: std::ops::Range<u32>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, usize)> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!("a = {a} outside [0,1]")));
    }
    if content_ids.is_empty() {
        return Err(Error::InvalidArgument("empty content vocabulary".into()));
    }
    let mut events = 0;
    let out = sentence
        .iter()
        .map(|&tok| {
            if (tok as usize) < N_SPECIAL {
                return tok;
            }
            if a > 0.0 && rng.gen_bool(a) {
                events += 1;
                rng.gen_range(content_ids.clone())
            } else {
                tok
            }
        })
        .collect();
    Ok((out, events))
}

/// Builds the order-noise permutation from explicit uniform draws: scores
/// Q_i = (i+1) + draws[i] are sorted ascending, ties broken by original
/// index. Split out from `order_noise` so the sort core is testable against
/// hand-worked scores.
pub fn permutation_from_draws(draws: &[f64]) -> OrderPermutation {
    let n = draws.len();
    let q: Vec<f64> = draws.iter().enumerate().map(|(i, &u)| (i + 1) as f64 + u).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| q[i].partial_cmp(&q[j]).unwrap().then(i.cmp(&j)));
    let mut gamma = vec![0usize; n];
    for (pos, &src) in order.iter().enumerate() {
        gamma[src] = pos;
    }
    OrderPermutation { gamma, q }
}

/// Word-order noise: draws Q_i = i + U(0,b) per position and reorders the
/// sentence by ascending Q. Every displacement satisfies |gamma(i) - i| <= b
/// and b <= 1 leaves the sentence unchanged.
pub fn order_noise(
    sentence: &[u32],
    b: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, OrderPermutation)> {
    if b < 0.0 || !b.is_finite() {
        return Err(Error::InvalidArgument(format!("b = {b} negative")));
    }
    let draws: Vec<f64> = sentence
        .iter()
        .map(|_| if b > 0.0 { rng.gen_range(0.0..b) } else { 0.0 })
        .collect();
    let perm = permutation_from_draws(&draws);
    let mut out = vec![0u32; sentence.len()];
    for (i, &tok) in sentence.iter().enumerate() {
        out[perm.gamma[i]] = tok;
    }
    Ok((out, perm))
}

/// Training-time corruption C(·): drop each token with `drop_prob` (at
/// least one token is always retained), then locally shuffle the survivors
/// with order noise of magnitude `swap_window`.
pub fn corrupt(sentence: &[u32], spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    if sentence.is_empty() {
        return Err(Error::InvalidArgument("empty sentence".into()));
    }
    spec.validate()?;
    let mut kept: Vec<u32> = sentence
        .iter()
        .copied()
        .filter(|_| !(spec.drop_prob > 0.0 && rng.gen_bool(spec.drop_prob)))
        .collect();
    if kept.is_empty() {
        let idx = rng.gen_range(0..sentence.len());
        kept.push(sentence[idx]);
    }
    let (out, _) = order_noise(&kept, spec.swap_window, rng)?;
    Ok(out)
}

/// Per-corpus noising statistics, printable as key=value lines.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSummary {
    pub lines: usize,
    pub tokens: usize,
    pub replacements: usize,
    pub mean_displacement: f64,
}

impl NoiseSummary {
    pub fn replacement_rate(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.replacements as f64 / self.tokens as f64
        }
    }
}

impl fmt::Display for NoiseSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lines={} tokens={} replacements={} replacement_rate={:.6} mean_displacement={:.6}",
            self.lines,
            self.tokens,
            self.replacements,
            self.replacement_rate(),
            self.mean_displacement
        )
    }
}

/// Applies evaluation noise (word noise `a`, then order noise `b`) to every
/// line of a corpus file, writing a line-aligned noised copy. Each line uses
/// an RNG derived from (spec.seed, line index) so the output is reproducible
/// and order-independent.
pub fn noisify_corpus(input: &Path, spec: &NoiseSpec, output: &Path, vocab: &Vocabulary) -> Result<NoiseSummary> {
    spec.validate()?;
    let ipath = input.display().to_string();
    let text = fs::read_to_string(input).map_err(|e| Error::io(&ipath, e))?;
    let mut out = String::new();
    let mut summary = NoiseSummary {
        lines: 0,
        tokens: 0,
        replacements: 0,
        mean_displacement: 0.0,
    };
    let mut displacement_sum = 0.0;
    for (lineno, line) in text.lines().enumerate() {
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            match vocab.id(tok) {
                Some(id) if (id as usize) >= N_SPECIAL => ids.push(id),
                Some(_) => {
                    return Err(Error::Corpus {
                        path: ipath.clone(),
                        line: lineno + 1,
                        details: format!("special token {tok} in corpus"),
                    })
                }
                None => {
                    return Err(Error::Corpus {
                        path: ipath.clone(),
                        line: lineno + 1,
                        details: format!("unknown token {tok}"),
                    })
                }
            }
        }
        let mut rng = derive_rng(spec.seed, lineno as u64, 0x6e6f6973);
        let (ids, events) = word_noise(&ids, spec.a, vocab.content_ids(), &mut rng)?;
        let (ids, perm) = order_noise(&ids, spec.b, &mut rng)?;
        summary.lines += 1;
        summary.tokens += ids.len();
        summary.replacements += events;
        displacement_sum += perm.mean_displacement() * ids.len() as f64;
        out.push_str(&vocab.decode_line(&ids));
        out.push('\n');
    }
    if summary.tokens > 0 {
        summary.mean_displacement = displacement_sum / summary.tokens as f64;
    }
    let opath = output.display().to_string();
    fs::write(output, out).map_err(|e| Error::io(&opath, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
    }

    /// Exact equal-tailed 99% binomial interval on the event count,
    /// computed from the pmf in log space. Independent of the generators.
    fn binomial_ci_99(n: usize, p: f64) -> (usize, usize) {
        assert!(p > 0.0 && p < 1.0);
        let lodds = (p / (1.0 - p)).ln();
        let mut logpmf = n as f64 * (1.0 - p).ln();
        let mut cdf = 0.0;
        let mut lo = None;
        let mut hi = n;
        for k in 0..=n {
            cdf += logpmf.exp();
            if lo.is_none() && cdf >= 0.005 {
                lo = Some(k);
            }
            if cdf >= 0.995 {
                hi = k;
                break;
            }
            logpmf += ((n - k) as f64 / (k + 1) as f64).ln() + lodds;
        }
        (lo.unwrap_or(0), hi)
    }

    #[test]
    fn binomial_oracle_sanity() {
        // cross-checked against an exact CDF table: Binomial(10^4, 0.1)
        // has mean 1000, sd 30; the 99% interval is mean +/- ~2.58 sd.
        let (lo, hi) = binomial_ci_99(10_000, 0.1);
        assert!((920..=935).contains(&lo), "lo {lo}");
        assert!((1065..=1080).contains(&hi), "hi {hi}");
    }

    #[test]
    fn word_noise_zero_probability_is_identity() {
        let v = test_vocab(10);
        let mut rng = derive_rng(1, 0, 0);
        let s = vec![6, 7, 8, 9];
        let (out, events) = word_noise(&s, 0.0, v.content_ids(), &mut rng).unwrap();
        assert_eq!(out, s);
        assert_eq!(events, 0);
    }

    #[test]
    fn word_noise_rejects_bad_probability() {
        let v = test_vocab(4);
        let mut rng = derive_rng(1, 0, 0);
        assert!(word_noise(&[6], 1.5, v.content_ids(), &mut rng).is_err());
        assert!(word_noise(&[6], -0.1, v.content_ids(), &mut rng).is_err());
    }

    #[test]
    fn word_noise_single_token_vocabulary_is_identity() {
        let v = test_vocab(1);
        let mut rng = derive_rng(2, 0, 0);
        let s = vec![6, 6, 6, 6, 6];
        let (out, _) = word_noise(&s, 1.0, v.content_ids(), &mut rng).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn word_noise_preserves_length_and_rate_within_ci() {
        let v = test_vocab(50);
        for &a in &[0.05, 0.1, 0.25] {
            let mut rng = derive_rng(3, (a * 1000.0) as u64, 0);
            let s: Vec<u32> = (0..10_000).map(|i| 6 + (i % 50) as u32).collect();
            let (out, events) = word_noise(&s, a, v.content_ids(), &mut rng).unwrap();
            assert_eq!(out.len(), s.len());
            let (lo, hi) = binomial_ci_99(10_000, a);
            assert!(
                (lo..=hi).contains(&events),
                "a={a}: {events} outside [{lo},{hi}]"
            );
        }
    }

    #[test]
    fn order_noise_hand_worked_scores() {
        // n=4, draws (2.5, 0.1, 2.2, 0.7): Q = (3.5, 2.1, 5.2, 4.7), so the
        // ascending-Q order of the 1-based sources is (2, 1, 4, 3).
        let perm = permutation_from_draws(&[2.5, 0.1, 2.2, 0.7]);
        assert_eq!(perm.q, vec![3.5, 2.1, 5.2, 4.7]);
        // source 0 lands second, source 1 first, source 2 last, source 3 third
        assert_eq!(perm.gamma, vec![1, 0, 3, 2]);
        let s = [10u32, 11, 12, 13];
        let mut out = vec![0u32; 4];
        for (i, &t) in s.iter().enumerate() {
            out[perm.gamma[i]] = t;
        }
        assert_eq!(out, vec![11, 10, 13, 12]);
    }

    #[test]
    fn order_noise_b_at_most_one_is_identity() {
        for &b in &[0.0, 0.5, 1.0] {
            for trial in 0..200 {
                let mut rng = derive_rng(4, trial, (b * 10.0) as u64);
                let s: Vec<u32> = (6..26).collect();
                let (out, perm) = order_noise(&s, b, &mut rng).unwrap();
                assert_eq!(out, s, "b={b} trial={trial}");
                assert!(perm.gamma.iter().enumerate().all(|(i, &g)| g == i));
            }
        }
    }

    #[test]
    fn order_noise_displacement_bound_holds_over_many_draws() {
        // Eq-style displacement bound: |gamma(i) - i| <= b on every draw.
        let bs = [0.0, 1.0, 2.0, 3.0, 5.0, 8.0, 10.0];
        let mut trial = 0u64;
        while trial < 10_000 {
            for &b in &bs {
                let mut rng = derive_rng(5, trial, b as u64);
                let n = 1 + (rng.gen_range(0..50usize));
                let s: Vec<u32> = (0..n as u32).map(|i| 6 + i).collect();
                let (out, perm) = order_noise(&s, b, &mut rng).unwrap();
                assert!(
                    perm.max_displacement() as f64 <= b,
                    "b={b} displacement {}",
                    perm.max_displacement()
                );
                let mut a = s.clone();
                let mut o = out.clone();
                a.sort_unstable();
                o.sort_unstable();
                assert_eq!(a, o, "multiset changed");
                trial += 1;
            }
        }
    }

    #[test]
    fn mean_displacement_is_monotone_in_b() {
        let bs = [0.0, 2.0, 3.0, 5.0, 8.0, 10.0];
        let mut means = Vec::new();
        for &b in &bs {
            let mut total = 0.0;
            let mut count = 0usize;
            for trial in 0..1000u64 {
                let mut rng = derive_rng(6, trial, b as u64);
                let s: Vec<u32> = (0..30u32).map(|i| 6 + i).collect();
                let (_, perm) = order_noise(&s, b, &mut rng).unwrap();
                total += perm.mean_displacement() * s.len() as f64;
                count += s.len();
            }
            means.push(total / count as f64);
        }
        for w in means.windows(2) {
            assert!(w[1] >= w[0], "means not monotone: {means:?}");
        }
    }

    #[test]
    fn corrupt_identity_when_noiseless() {
        let spec = NoiseSpec {
            drop_prob: 0.0,
            swap_window: 1.0,
            ..NoiseSpec::default()
        };
        let mut rng = derive_rng(7, 0, 0);
        let s = vec![6u32, 7, 8, 9, 10];
        assert_eq!(corrupt(&s, &spec, &mut rng).unwrap(), s);
    }

    #[test]
    fn corrupt_retains_at_least_one_token() {
        let spec = NoiseSpec {
            drop_prob: 0.95,
            swap_window: 0.0,
            ..NoiseSpec::default()
        };
        for trial in 0..500 {
            let mut rng = derive_rng(8, trial, 0);
            let s = vec![6u32, 7];
            let out = corrupt(&s, &spec, &mut rng).unwrap();
            assert!(!out.is_empty());
            assert!(out.iter().all(|t| s.contains(t)));
        }
        // length-1 sentences always come back unchanged
        let mut rng = derive_rng(8, 999, 0);
        assert_eq!(corrupt(&[42], &spec, &mut rng).unwrap(), vec![42]);
    }

    #[test]
    fn corrupt_survivor_count_within_ci() {
        let spec = NoiseSpec {
            drop_prob: 0.1,
            swap_window: 0.0,
            ..NoiseSpec::default()
        };
        let mut rng = derive_rng(9, 0, 0);
        let s: Vec<u32> = (0..10_000).map(|i| 6 + (i % 40) as u32).collect();
        let out = corrupt(&s, &spec, &mut rng).unwrap();
        let dropped = s.len() - out.len();
        let (lo, hi) = binomial_ci_99(10_000, 0.1);
        assert!((lo..=hi).contains(&dropped), "dropped {dropped}");
    }

    #[test]
    fn corrupt_rejects_empty_sentence() {
        let mut rng = derive_rng(10, 0, 0);
        assert!(corrupt(&[], &NoiseSpec::default(), &mut rng).is_err());
    }

    #[test]
    fn generators_are_reproducible() {
        let v = test_vocab(30);
        let s: Vec<u32> = (6..36).collect();
        let run = || {
            let mut rng = derive_rng(11, 3, 7);
            let (w, _) = word_noise(&s, 0.3, v.content_ids(), &mut rng).unwrap();
            let (o, _) = order_noise(&w, 5.0, &mut rng).unwrap();
            o
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noisify_corpus_zero_noise_is_identity() {
        let v = test_vocab(10);
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("in.txt");
        let outp = dir.path().join("out.txt");
        std::fs::write(&inp, "w0 w1 w2\nw3\n").unwrap();
        let spec = NoiseSpec::default();
        let summary = noisify_corpus(&inp, &spec, &outp, &v).unwrap();
        assert_eq!(std::fs::read_to_string(&outp).unwrap(), "w0 w1 w2\nw3\n");
        assert_eq!(summary.lines, 2);
        assert_eq!(summary.tokens, 4);
        assert_eq!(summary.replacements, 0);
        assert_eq!(summary.mean_displacement, 0.0);
    }

    #[test]
    fn noisify_corpus_empty_file() {
        let v = test_vocab(4);
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("in.txt");
        let outp = dir.path().join("out.txt");
        std::fs::write(&inp, "").unwrap();
        let summary = noisify_corpus(&inp, &NoiseSpec::default(), &outp, &v).unwrap();
        assert_eq!(summary.lines, 0);
        assert_eq!(summary.tokens, 0);
        assert_eq!(std::fs::read_to_string(&outp).unwrap(), "");
    }

    #[test]
    fn noisify_corpus_reports_bad_line() {
        let v = test_vocab(4);
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("in.txt");
        let outp = dir.path().join("out.txt");
        std::fs::write(&inp, "w0\nnope\n").unwrap();
        let err = noisify_corpus(&inp, &NoiseSpec::default(), &outp, &v).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn noisify_corpus_replacement_rate_within_ci() {
        let v = test_vocab(50);
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("in.txt");
        let outp = dir.path().join("out.txt");
        let line: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let text = vec![line.join(" "); 200].join("\n");
        std::fs::write(&inp, text).unwrap();
        let spec = NoiseSpec {
            a: 0.1,
            seed: 12,
            ..NoiseSpec::default()
        };
        let summary = noisify_corpus(&inp, &spec, &outp, &v).unwrap();
        let (lo, hi) = binomial_ci_99(summary.tokens, 0.1);
        assert!((lo..=hi).contains(&summary.replacements), "{summary}");
    }
}
