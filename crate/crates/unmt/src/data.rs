//! Synthetic cipher-language corpora, vocabulary construction and batching.
//!
//! The toy language pair is built so unsupervised translation is learnable
//! from monolingual text alone:
//! - sentences are drawn from class templates, and all slots of a sentence
//!   share a latent index, so tokens co-occur in tight groups;
//! - a fraction of tokens (anchors) have the same surface form in both
//!   languages, pinning the alignment of the shared embedding space;
//! - every other token is mapped by a bijective cipher, and the second
//!   language additionally swaps adjacent token pairs.
//!
//! The ground-truth translation of any L1 sentence is cipher + reorder,
//! which gives exact references for the parallel test set. The two training
//! halves are sentence-disjoint so no parallel signal leaks into training.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Lang, Vocabulary};
use crate::noise::derive_rng;

/// Deterministic local reordering applied to L2 surface forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReorderRule {
    Identity,
    /// Swap positions (0,1), (2,3), ... — displacement exactly 1.
    SwapAdjacent,
}

impl ReorderRule {
    pub fn apply<T: Clone>(self, tokens: &[T]) -> Vec<T> {
        match self {
            ReorderRule::Identity => tokens.to_vec(),
            ReorderRule::SwapAdjacent => {
                let mut out = tokens.to_vec();
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
                out
            }
        }
    }
}

/// Parameters of the toy language pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    /// Base (L1) vocabulary size; must be divisible by `n_classes`.
    pub vocab_size: usize,
    /// Number of word classes the vocabulary is partitioned into.
    pub n_classes: usize,
    /// Number of sentence templates (class sequences).
    pub n_templates: usize,
    /// Content-token sentence length range, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of each class whose tokens are shared between languages.
    pub anchor_fraction: f64,
    pub reorder: ReorderRule,
}

impl Default for ToyLanguageSpec {
    fn default() -> Self {
        ToyLanguageSpec {
            vocab_size: 200,
            n_classes: 8,
            n_templates: 20,
            min_len: 3,
            max_len: 10,
            anchor_fraction: 0.2,
            reorder: ReorderRule::SwapAdjacent,
        }
    }
}

impl ToyLanguageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.vocab_size == 0 || self.n_templates == 0 {
            return Err(Error::Config("degenerate toy-language spec".into()));
        }
        if !self.vocab_size.is_multiple_of(self.n_classes) || self.vocab_size / self.n_classes < 3 {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot be split into {} classes of at least 3 tokens",
                self.vocab_size, self.n_classes
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "bad sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(Error::Config(format!(
                "anchor_fraction {} outside [0,1]",
                self.anchor_fraction
            )));
        }
        Ok(())
    }
}

/// A concrete language pair instantiated from a spec and a seed: the class
/// partition, the templates, and the cipher bijection.
pub struct ToyLanguage {
    pub spec: ToyLanguageSpec,
    /// L1 surface forms, index = token id within the toy grammar.
    tokens: Vec<String>,
    /// cipher[i] = L2 surface form of L1 token i (anchors map to self).
    cipher: Vec<String>,
    inverse: HashMap<String, usize>,
    templates: Vec<Vec<usize>>,
    class_size: usize,
}

impl ToyLanguage {
    pub fn build(spec: ToyLanguageSpec, seed: u64) -> Result<ToyLanguage> {
        spec.validate()?;
        let mut rng = derive_rng(seed, 0x746f79, 0);
        let class_size = spec.vocab_size / spec.n_classes;
        let tokens: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:03}")).collect();

        // Choose anchors per class so every class keeps the same share.
        let anchors_per_class = (spec.anchor_fraction * class_size as f64).round() as usize;
        let mut is_anchor = vec![false; spec.vocab_size];
        for c in 0..spec.n_classes {
            let mut members: Vec<usize> = (c * class_size..(c + 1) * class_size).collect();
            for k in 0..anchors_per_class.min(class_size) {
                let pick = rng.gen_range(k..members.len());
                members.swap(k, pick);
                is_anchor[members[k]] = true;
            }
        }
        let cipher: Vec<String> = (0..spec.vocab_size)
            .map(|i| if is_anchor[i] { tokens[i].clone() } else { format!("v{i:03}") })
            .collect();
        let mut inverse = HashMap::new();
        for (i, t) in cipher.iter().enumerate() {
            inverse.insert(t.clone(), i);
        }

        let templates: Vec<Vec<usize>> = (0..spec.n_templates)
            .map(|_| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                (0..len).map(|_| rng.gen_range(0..spec.n_classes)).collect()
            })
            .collect();

        Ok(ToyLanguage {
            spec,
            tokens,
            cipher,
            inverse,
            templates,
            class_size,
        })
    }

    /// Draws one L1 sentence: a template plus a shared latent index with
    /// small per-slot jitter, so tokens within a sentence are correlated.
    pub fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let template = &self.templates[rng.gen_range(0..self.templates.len())];
        let j = rng.gen_range(0..self.class_size);
        template
            .iter()
            .map(|&class| {
                let jitter = rng.gen_range(0..3usize);
                let member = (j + jitter) % self.class_size;
                self.tokens[class * self.class_size + member].clone()
            })
            .collect()
    }

    /// L2 surface form of an L1 token.
    pub fn cipher_token(&self, l1: &str) -> Option<&str> {
        let idx = self.tokens.iter().position(|t| t == l1)?;
        Some(&self.cipher[idx])
    }

    /// L1 surface form of an L2 token (inverse cipher).
    pub fn uncipher_token(&self, l2: &str) -> Option<&str> {
        self.inverse.get(l2).map(|&i| self.tokens[i].as_str())
    }

    /// Ground-truth translation: cipher every token, then reorder.
    pub fn translate_l1(&self, sentence: &[String]) -> Result<Vec<String>> {
        let ciphered: Vec<String> = sentence
            .iter()
            .map(|t| {
                self.cipher_token(t)
                    .map(|s| s.to_string())
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t} not in toy grammar")))
            })
            .collect::<Result<_>>()?;
        Ok(self.spec.reorder.apply(&ciphered))
    }
}

/// Paths and sizes of one generated corpus bundle.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub dir: PathBuf,
    pub train_l1: PathBuf,
    pub train_l2: PathBuf,
    pub test_l1: PathBuf,
    pub test_l2: PathBuf,
    pub vocab_file: PathBuf,
    pub manifest: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
}

impl CorpusBundle {
    /// Conventional file names inside a bundle directory.
    pub fn at(dir: &Path, n_train: usize, n_test: usize) -> CorpusBundle {
        CorpusBundle {
            dir: dir.to_path_buf(),
            train_l1: dir.join("train.l1"),
            train_l2: dir.join("train.l2"),
            test_l1: dir.join("test.l1"),
            test_l2: dir.join("test.l2"),
            vocab_file: dir.join("vocab.txt"),
            manifest: dir.join("manifest.txt"),
            n_train,
            n_test,
        }
    }
}

/// Generates a corpus bundle: two sentence-disjoint monolingual training
/// halves and a parallel test set whose L2 side is the exact cipher+reorder
/// image of its L1 side. Also writes the shared vocabulary and a manifest.
pub fn generate_bundle(
    spec: &ToyLanguageSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
    dir: &Path,
) -> Result<CorpusBundle> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument("n_train and n_test must be positive".into()));
    }
    let lang = ToyLanguage::build(spec.clone(), seed)?;
    let mut rng = derive_rng(seed, 0x67656e, 0);

    let need = 2 * n_train + n_test;
    let mut seen: HashSet<Vec<String>> = HashSet::with_capacity(need);
    let mut sentences: Vec<Vec<String>> = Vec::with_capacity(need);
    let mut attempts = 0usize;
    let max_attempts = need.saturating_mul(200);
    while sentences.len() < need {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "toy grammar too small: only {} distinct sentences found for {need} requested",
                sentences.len()
            )));
        }
        let s = lang.sample_sentence(&mut rng);
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let bundle = CorpusBundle::at(dir, n_train, n_test);

    let join = |lines: &[Vec<String>]| {
        let mut out = String::new();
        for l in lines {
            out.push_str(&l.join(" "));
            out.push('\n');
        }
        out
    };
    let write = |path: &Path, body: &str| -> Result<()> {
        fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    };

    let train_l1 = &sentences[..n_train];
    let train_l2_src = &sentences[n_train..2 * n_train];
    let test_l1 = &sentences[2 * n_train..];

    let train_l2: Vec<Vec<String>> = train_l2_src
        .iter()
        .map(|s| lang.translate_l1(s))
        .collect::<Result<_>>()?;
    let test_l2: Vec<Vec<String>> = test_l1
        .iter()
        .map(|s| lang.translate_l1(s))
        .collect::<Result<_>>()?;

    // Disjointness and reference-exactness guarantees.
    for s in test_l1 {
        assert!(!train_l1.contains(s) && !train_l2_src.contains(s));
    }
    for (src, re) in test_l1.iter().zip(&test_l2) {
        assert_eq!(&lang.translate_l1(src)?, re);
    }

    write(&bundle.train_l1, &join(train_l1))?;
    write(&bundle.train_l2, &join(&train_l2))?;
    write(&bundle.test_l1, &join(test_l1))?;
    write(&bundle.test_l2, &join(&test_l2))?;

    let vocab = build_vocab(&[&bundle.train_l1, &bundle.train_l2])?;
    save_vocab(&vocab, &bundle.vocab_file)?;

    let mut manifest = String::new();
    let _ = writeln!(manifest, "seed={seed}");
    let _ = writeln!(manifest, "n_train={n_train}");
    let _ = writeln!(manifest, "n_test={n_test}");
    let _ = writeln!(manifest, "vocab_size={}", spec.vocab_size);
    let _ = writeln!(manifest, "n_classes={}", spec.n_classes);
    let _ = writeln!(manifest, "n_templates={}", spec.n_templates);
    let _ = writeln!(manifest, "min_len={}", spec.min_len);
    let _ = writeln!(manifest, "max_len={}", spec.max_len);
    let _ = writeln!(manifest, "anchor_fraction={}", spec.anchor_fraction);
    let _ = writeln!(manifest, "reorder={:?}", spec.reorder);
    for (name, path, lines) in [
        ("train_l1", &bundle.train_l1, n_train),
        ("train_l2", &bundle.train_l2, n_train),
        ("test_l1", &bundle.test_l1, n_test),
        ("test_l2", &bundle.test_l2, n_test),
    ] {
        let _ = writeln!(manifest, "file.{name}={} lines={lines}", path.display());
    }
    let _ = writeln!(manifest, "file.vocab={} tokens={}", bundle.vocab_file.display(), vocab.n_content());
    write(&bundle.manifest, &manifest)?;

    Ok(bundle)
}

/// Union vocabulary over the given corpora: content ids ordered by
/// descending frequency (ties broken alphabetically).
pub fn build_vocab(paths: &[&Path]) -> Result<Vocabulary> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for path in paths {
        let pstr = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
        for tok in text.split_whitespace() {
            *counts.entry(tok.to_string()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Corpus {
            path: paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            line: 0,
            details: "empty corpus".into(),
        });
    }
    let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Vocabulary::new(entries.into_iter().map(|(t, _)| t).collect())
}

/// One content token per line; line number = id - number of specials.
pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut body = String::new();
    for t in vocab.content_tokens() {
        body.push_str(t);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    Vocabulary::new(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

/// Reads a whole corpus into token-id sentences. Out-of-vocabulary tokens
/// become UNK and are counted.
pub fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<(Vec<Vec<u32>>, usize)> {
    let pstr = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&pstr, e))?;
    let mut sentences = Vec::new();
    let mut unk = 0;
    for line in text.lines() {
        let (ids, u) = vocab.encode_line(line);
        unk += u;
        sentences.push(ids);
    }
    Ok((sentences, unk))
}

/// Shuffled, padded batches over a monolingual corpus. Epoch `e` uses a
/// Fisher-Yates order keyed by (seed, e), so any step's batch is computable
/// directly from the step index — resuming needs no iterator state.
pub struct BatchStream {
    sentences: Vec<Vec<u32>>,
    lang: Lang,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    /// UNK substitutions made while encoding the corpus.
    pub unk_tokens: usize,
    /// Total corpus tokens.
    pub total_tokens: usize,
}

impl BatchStream {
    pub fn new(
        path: &Path,
        vocab: &Vocabulary,
        batch_size: usize,
        max_len: usize,
        lang: Lang,
        seed: u64,
    ) -> Result<BatchStream> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let (sentences, unk_tokens) = load_corpus(path, vocab)?;
        if sentences.is_empty() {
            return Err(Error::Corpus {
                path: path.display().to_string(),
                line: 0,
                details: "empty corpus".into(),
            });
        }
        let total_tokens = sentences.iter().map(|s| s.len()).sum();
        Ok(BatchStream {
            sentences,
            lang,
            batch_size,
            max_len,
            seed,
            unk_tokens,
            total_tokens,
        })
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.sentences.len().div_ceil(self.batch_size) as u64
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.sentences.len()).collect();
        let mut rng = derive_rng(self.seed, epoch, 0x736875666c65);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// The batch a sequential consumer would see at `step` (0-based),
    /// together with its truncated-sentence count.
    pub fn batch_at(&self, step: u64) -> (Batch, usize) {
        let bpe = self.batches_per_epoch();
        let epoch = step / bpe;
        let index = (step % bpe) as usize;
        let order = self.epoch_order(epoch);
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(order.len());
        let picked: Vec<Vec<u32>> = order[start..end].iter().map(|&i| self.sentences[i].clone()).collect();
        Batch::from_sentences(&picked, self.lang, self.max_len).expect("non-empty by construction")
    }
}
