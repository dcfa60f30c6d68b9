//! Tape-mode transformer forward passes (training path).
//!
//! The embedding stage exposes two injection points: an additive delta on
//! the gathered word embeddings and one on the positional embeddings. Both
//! are recorded as graph leaves so their gradients can be read back after
//! `backward`, which is what the adversarial perturbations are built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{normal_vec, Binding, ParamStore};
use super::{Batch, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, TensorId};

pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// (word delta, positional delta, track delta gradients) — the embedding
/// injection arguments threaded through the encoder.
type DeltaPair<'a, T> = (Option<&'a [T]>, Option<&'a [T]>, bool);

/// Result of an encoder pass, carrying the delta leaves for gradient
/// extraction and the source geometry needed by cross-attention.
pub struct Encoded {
    pub states: TensorId,
    pub word_delta: TensorId,
    pub pos_delta: TensorId,
    pub rows: usize,
    pub cols: usize,
    pub src_lengths: Vec<usize>,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let dff = config.d_ff;
        let v = config.vocab_size;
        // Unit-scale embeddings: rows have L2 norm ~ 1.
        let emb_std = 1.0 / (d as f64).sqrt();
        let w_std = 1.0 / (d as f64).sqrt();
        let w2_std = 1.0 / (dff as f64).sqrt();

        let mut p = ParamStore::new();
        p.add("word_emb", v, d, normal_vec(&mut rng, v * d, emb_std));
        p.add(
            "pos_emb",
            config.max_len,
            d,
            normal_vec(&mut rng, config.max_len * d, emb_std),
        );
        p.add("out_bias", 1, v, vec![T::zero(); v]);

        let add_ln = |p: &mut ParamStore<T>, name: String| {
            p.add(&format!("{name}.g"), 1, d, vec![T::one(); d]);
            p.add(&format!("{name}.b"), 1, d, vec![T::zero(); d]);
        };
        let add_attn = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String| {
            for w in ["wq", "wk", "wv", "wo"] {
                p.add(&format!("{name}.{w}"), d, d, normal_vec(rng, d * d, w_std));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.add(&format!("{name}.{b}"), 1, d, vec![T::zero(); d]);
            }
        };
        let add_ffn = |p: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: String| {
            p.add(&format!("{name}.w1"), d, dff, normal_vec(rng, d * dff, w_std));
            p.add(&format!("{name}.b1"), 1, dff, vec![T::zero(); dff]);
            p.add(&format!("{name}.w2"), dff, d, normal_vec(rng, dff * d, w2_std));
            p.add(&format!("{name}.b2"), 1, d, vec![T::zero(); d]);
        };

        for i in 0..config.n_layers {
            add_ln(&mut p, format!("enc{i}.ln1"));
            add_attn(&mut p, &mut rng, format!("enc{i}.attn"));
            add_ln(&mut p, format!("enc{i}.ln2"));
            add_ffn(&mut p, &mut rng, format!("enc{i}.ffn"));
        }
        add_ln(&mut p, "enc.ln".into());
        for i in 0..config.n_layers {
            add_ln(&mut p, format!("dec{i}.ln1"));
            add_attn(&mut p, &mut rng, format!("dec{i}.self"));
            add_ln(&mut p, format!("dec{i}.ln2"));
            add_attn(&mut p, &mut rng, format!("dec{i}.cross"));
            add_ln(&mut p, format!("dec{i}.ln3"));
            add_ffn(&mut p, &mut rng, format!("dec{i}.ffn"));
        }
        add_ln(&mut p, "dec.ln".into());

        Ok(TransformerModel { config, params: p })
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Binding {
        self.params.bind(g, requires_grad)
    }

    fn maybe_dropout(
        &self,
        g: &mut Graph<T>,
        x: TensorId,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let (m, n) = g.shape(x);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..m * n)
            .map(|_| if rng.gen_bool(p) { T::zero() } else { keep })
            .collect();
        g.dropout(x, mask)
    }

    fn affine_ln(&self, g: &mut Graph<T>, bind: &Binding, x: TensorId, name: &str) -> Result<TensorId> {
        let h = g.layernorm_rows(x);
        let h = g.mul_row(h, bind.get(&format!("{name}.g")))?;
        g.add_row(h, bind.get(&format!("{name}.b")))
    }

    /// Multi-head attention: q from `xq`, k/v from `xkv`, per-sentence masks
    /// from `mask_for(b)` shaped (lq x lkv), true = excluded.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        name: &str,
        xq: TensorId,
        xkv: TensorId,
        b_count: usize,
        lq: usize,
        lkv: usize,
        mask_for: &dyn Fn(usize) -> Vec<bool>,
    ) -> Result<TensorId> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = g.matmul(xq, bind.get(&format!("{name}.wq")))?;
        let q = g.add_row(q, bind.get(&format!("{name}.bq")))?;
        let k = g.matmul(xkv, bind.get(&format!("{name}.wk")))?;
        let k = g.add_row(k, bind.get(&format!("{name}.bk")))?;
        let v = g.matmul(xkv, bind.get(&format!("{name}.wv")))?;
        let v = g.add_row(v, bind.get(&format!("{name}.bv")))?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut per_b = Vec::with_capacity(b_count);
        for b in 0..b_count {
            let mask = mask_for(b);
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let qs = g.slice(q, b * lq, lq, h * dh, dh)?;
                let ks = g.slice(k, b * lkv, lkv, h * dh, dh)?;
                let vs = g.slice(v, b * lkv, lkv, h * dh, dh)?;
                let scores = g.matmul_nt(qs, ks)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax_rows(scores, Some(mask.clone()))?;
                per_head.push(g.matmul(probs, vs)?);
            }
            per_b.push(g.concat_cols(&per_head)?);
        }
        let ctx = g.concat_rows(&per_b)?;
        let out = g.matmul(ctx, bind.get(&format!("{name}.wo")))?;
        g.add_row(out, bind.get(&format!("{name}.bo")))
    }

    fn embed(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        ids: &[u32],
        rows: usize,
        cols: usize,
        deltas: Option<DeltaPair<'_, T>>,
    ) -> Result<(TensorId, TensorId, TensorId)> {
        let d = self.config.d_model;
        if cols > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {cols} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let word = g.gather(bind.get("word_emb"), &tok_ids)?;
        let pos_ids: Vec<usize> = (0..rows * cols).map(|i| i % cols).collect();
        let pos = g.gather(bind.get("pos_emb"), &pos_ids)?;
        let n = rows * cols * d;
        let (wd_init, pd_init, track) = match deltas {
            Some((w, p, track)) => (w, p, track),
            None => (None, None, false),
        };
        let check = |buf: Option<&[T]>, which: &str| -> Result<Vec<T>> {
            match buf {
                None => Ok(vec![T::zero(); n]),
                Some(b) if b.len() == n => Ok(b.to_vec()),
                Some(b) => Err(Error::ShapeMismatch {
                    op: "embed",
                    details: format!(
                        "{which} delta has {} values, expected {rows}x{cols}x{d} = {n}",
                        b.len()
                    ),
                }),
            }
        };
        let wd = g.leaf(rows * cols, d, check(wd_init, "word")?, track);
        let pd = g.leaf(rows * cols, d, check(pd_init, "position")?, track);
        let base = g.add(word, pos)?;
        let dsum = g.add(wd, pd)?;
        let x = g.add(base, dsum)?;
        Ok((x, wd, pd))
    }

    /// Encoder pass. Padding positions are masked out of attention keys;
    /// optional additive deltas are injected at the embedding sum.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        batch: &Batch,
        word_delta: Option<&[T]>,
        pos_delta: Option<&[T]>,
        track_delta_grads: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        if batch.ids.iter().any(|&i| (i as usize) >= self.config.vocab_size) {
            return Err(Error::InvalidArgument("token id out of vocabulary".into()));
        }
        let (b_count, l) = (batch.rows, batch.cols);
        let (mut x, wd, pd) = self.embed(
            g,
            bind,
            &batch.ids,
            b_count,
            l,
            Some((word_delta, pos_delta, track_delta_grads)),
        )?;
        x = self.maybe_dropout(g, x, &mut dropout_rng)?;
        let lengths = batch.lengths.clone();
        let self_mask = |b: usize| -> Vec<bool> {
            let len = lengths[b];
            let mut m = vec![false; l * l];
            for i in 0..l {
                for j in len..l {
                    m[i * l + j] = true;
                }
            }
            m
        };
        for i in 0..self.config.n_layers {
            let h = self.affine_ln(g, bind, x, &format!("enc{i}.ln1"))?;
            let a = self.attention(g, bind, &format!("enc{i}.attn"), h, h, b_count, l, l, &self_mask)?;
            let a = self.maybe_dropout(g, a, &mut dropout_rng)?;
            x = g.add(x, a)?;
            let h = self.affine_ln(g, bind, x, &format!("enc{i}.ln2"))?;
            let f = self.ffn(g, bind, &format!("enc{i}.ffn"), h)?;
            let f = self.maybe_dropout(g, f, &mut dropout_rng)?;
            x = g.add(x, f)?;
        }
        let states = self.affine_ln(g, bind, x, "enc.ln")?;
        Ok(Encoded {
            states,
            word_delta: wd,
            pos_delta: pd,
            rows: b_count,
            cols: l,
            src_lengths: batch.lengths.clone(),
        })
    }

    fn ffn(&self, g: &mut Graph<T>, bind: &Binding, name: &str, x: TensorId) -> Result<TensorId> {
        let h = g.matmul(x, bind.get(&format!("{name}.w1")))?;
        let h = g.add_row(h, bind.get(&format!("{name}.b1")))?;
        let h = g.relu(h);
        let h = g.matmul(h, bind.get(&format!("{name}.w2")))?;
        g.add_row(h, bind.get(&format!("{name}.b2")))
    }

    /// Teacher-forced decoder logits over the target batch, plus the
    /// per-position targets (None at padding).
    pub fn decode_logits(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        enc: &Encoded,
        target: &Batch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TensorId, Vec<Option<usize>>)> {
        if target.rows != enc.rows {
            return Err(Error::ShapeMismatch {
                op: "decode",
                details: format!("target rows {} vs encoder rows {}", target.rows, enc.rows),
            });
        }
        if target.cols < 2 {
            return Err(Error::InvalidArgument("empty target batch".into()));
        }
        let b_count = target.rows;
        let l = target.cols - 1; // decoder input length
        let ls = enc.cols;
        let mut dec_ids = Vec::with_capacity(b_count * l);
        let mut targets = Vec::with_capacity(b_count * l);
        for r in 0..b_count {
            let row = target.row(r);
            dec_ids.extend_from_slice(&row[..l]);
            for t in 0..l {
                targets.push(if t + 1 < target.lengths[r] {
                    Some(row[t + 1] as usize)
                } else {
                    None
                });
            }
        }
        let (mut x, _, _) = self.embed(g, bind, &dec_ids, b_count, l, None)?;
        x = self.maybe_dropout(g, x, &mut dropout_rng)?;

        let tgt_lengths = target.lengths.clone();
        let causal_mask = |b: usize| -> Vec<bool> {
            let len = tgt_lengths[b].saturating_sub(1).max(1);
            let mut m = vec![false; l * l];
            for i in 0..l {
                for j in 0..l {
                    if j > i || j >= len {
                        m[i * l + j] = true;
                    }
                }
            }
            m
        };
        let src_lengths = enc.src_lengths.clone();
        let cross_mask = |b: usize| -> Vec<bool> {
            let slen = src_lengths[b];
            let mut m = vec![false; l * ls];
            for i in 0..l {
                for j in slen..ls {
                    m[i * ls + j] = true;
                }
            }
            m
        };
        for i in 0..self.config.n_layers {
            let h = self.affine_ln(g, bind, x, &format!("dec{i}.ln1"))?;
            let a = self.attention(g, bind, &format!("dec{i}.self"), h, h, b_count, l, l, &causal_mask)?;
            let a = self.maybe_dropout(g, a, &mut dropout_rng)?;
            x = g.add(x, a)?;
            let h = self.affine_ln(g, bind, x, &format!("dec{i}.ln2"))?;
            let c = self.attention(
                g,
                bind,
                &format!("dec{i}.cross"),
                h,
                enc.states,
                b_count,
                l,
                ls,
                &cross_mask,
            )?;
            let c = self.maybe_dropout(g, c, &mut dropout_rng)?;
            x = g.add(x, c)?;
            let h = self.affine_ln(g, bind, x, &format!("dec{i}.ln3"))?;
            let f = self.ffn(g, bind, &format!("dec{i}.ffn"), h)?;
            let f = self.maybe_dropout(g, f, &mut dropout_rng)?;
            x = g.add(x, f)?;
        }
        let x = self.affine_ln(g, bind, x, "dec.ln")?;
        // Output projection tied to the input embeddings.
        let logits = g.matmul_nt(x, bind.get("word_emb"))?;
        let logits = g.add_row(logits, bind.get("out_bias"))?;
        Ok((logits, targets))
    }

    /// Token-mean negative log-likelihood of `target` given encoder states
    /// (teacher forcing; padding excluded).
    pub fn decode_loss(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        enc: &Encoded,
        target: &Batch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let (logits, targets) = self.decode_logits(g, bind, enc, target, dropout_rng)?;
        g.cross_entropy(logits, &targets)
    }

    /// Gradients of the loss at the two embedding injection points,
    /// shaped (rows*cols, d_model). Errors if backward has not run.
    pub fn embedding_gradients(&self, g: &Graph<T>, enc: &Encoded) -> Result<(Vec<T>, Vec<T>)> {
        let wg = g
            .grad(enc.word_delta)
            .ok_or_else(|| Error::InvalidArgument("embedding_gradients before backward".into()))?
            .to_vec();
        let pg = g
            .grad(enc.pos_delta)
            .ok_or_else(|| Error::InvalidArgument("embedding_gradients before backward".into()))?
            .to_vec();
        Ok((wg, pg))
    }

    /// Plain denoising-style loss in one call: encode source (with optional
    /// deltas) and score the target. Used by tests and the adversarial module.
    #[allow(clippy::too_many_arguments)]
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph<T>,
        bind: &Binding,
        source: &Batch,
        target: &Batch,
        word_delta: Option<&[T]>,
        pos_delta: Option<&[T]>,
        track_delta_grads: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TensorId, Encoded)> {
        let mut drng = dropout_rng;
        let enc = self.encode(
            g,
            bind,
            source,
            word_delta,
            pos_delta,
            track_delta_grads,
            drng.as_deref_mut(),
        )?;
        let loss = self.decode_loss(g, bind, &enc, target, drng)?;
        Ok((loss, enc))
    }

    /// Audit helper: total number of parameter tensors and values. Exactly
    /// one encoder, one decoder and one embedding pair serve both languages.
    pub fn parameter_count(&self) -> (usize, usize) {
        (self.params.len(), self.params.n_values())
    }
}

/// Builds a model sized for a vocabulary with desk-scale defaults.
pub fn desk_model<T: Scalar>(vocab: &Vocabulary, seed: u64) -> Result<TransformerModel<T>> {
    TransformerModel::new(ModelConfig::desk_scale(vocab.size()), seed)
}
