//! No-grad inference path: full encoder forward and incremental greedy
//! decoding with per-layer key/value caches. Shares the raw kernels with the
//! tape ops; a consistency test pins both paths to the same outputs.

use super::transformer::TransformerModel;
use super::{Batch, Lang, EOS};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Scalar;

/// Frozen encoder states, row-major (rows*cols, d).
pub struct EncOut<T> {
    pub data: Vec<T>,
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub src_lengths: Vec<usize>,
}

fn linear<T: Scalar>(x: &[T], m: usize, w: &super::ParamTensor<T>, b: &super::ParamTensor<T>) -> Vec<T> {
    let (k, n) = (w.rows, w.cols);
    debug_assert_eq!(x.len(), m * k);
    let mut out = vec![T::zero(); m * n];
    kernels::matmul(x, &w.data, &mut out, m, k, n);
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + b.data[j];
        }
    }
    out
}

fn ln_affine<T: Scalar>(x: &[T], m: usize, n: usize, g: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    kernels::layernorm_rows(x, &mut out, m, n, T::from_f64(1e-5));
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = out[i * n + j] * g[j] + b[j];
        }
    }
    out
}

fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> TransformerModel<T> {
    fn pt(&self, name: &str) -> &super::ParamTensor<T> {
        self.params.get(name)
    }

    fn embed_nograd(&self, ids: &[u32], rows: usize, cols: usize) -> Vec<T> {
        let d = self.config.d_model;
        let we = &self.pt("word_emb").data;
        let pe = &self.pt("pos_emb").data;
        let mut x = vec![T::zero(); rows * cols * d];
        for r in 0..rows {
            for c in 0..cols {
                let tok = ids[r * cols + c] as usize;
                let row = &mut x[(r * cols + c) * d..(r * cols + c + 1) * d];
                for j in 0..d {
                    row[j] = we[tok * d + j] + pe[c * d + j];
                }
            }
        }
        x
    }

    fn ffn_nograd(&self, name: &str, x: &[T], m: usize) -> Vec<T> {
        let h = linear(x, m, self.pt(&format!("{name}.w1")), self.pt(&format!("{name}.b1")));
        let h: Vec<T> = h
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        linear(&h, m, self.pt(&format!("{name}.w2")), self.pt(&format!("{name}.b2")))
    }

    /// Frozen-weight encoder pass (no graph, no deltas).
    pub fn encode_nograd(&self, batch: &Batch) -> Result<EncOut<T>> {
        if batch.cols > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                batch.cols, self.config.max_len
            )));
        }
        let (b_count, l, d) = (batch.rows, batch.cols, self.config.d_model);
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let m = b_count * l;
        let mut x = self.embed_nograd(&batch.ids, b_count, l);

        for li in 0..self.config.n_layers {
            let h = ln_affine(
                &x,
                m,
                d,
                &self.pt(&format!("enc{li}.ln1.g")).data,
                &self.pt(&format!("enc{li}.ln1.b")).data,
            );
            let name = format!("enc{li}.attn");
            let q = linear(&h, m, self.pt(&format!("{name}.wq")), self.pt(&format!("{name}.bq")));
            let k = linear(&h, m, self.pt(&format!("{name}.wk")), self.pt(&format!("{name}.bk")));
            let v = linear(&h, m, self.pt(&format!("{name}.wv")), self.pt(&format!("{name}.bv")));
            let mut ctx = vec![T::zero(); m * d];
            let mut scores = vec![T::zero(); l];
            for b in 0..b_count {
                let len = batch.lengths[b];
                for hd in 0..heads {
                    let c0 = hd * dh;
                    for i in 0..l {
                        let qrow = &q[(b * l + i) * d + c0..(b * l + i) * d + c0 + dh];
                        for j in 0..len {
                            let krow = &k[(b * l + j) * d + c0..(b * l + j) * d + c0 + dh];
                            scores[j] = kernels::dot(qrow, krow) * scale;
                        }
                        kernels::softmax_rows_masked(&mut scores[..len], 1, len, None);
                        let crow = &mut ctx[(b * l + i) * d + c0..(b * l + i) * d + c0 + dh];
                        for j in 0..len {
                            let p = scores[j];
                            let vrow = &v[(b * l + j) * d + c0..(b * l + j) * d + c0 + dh];
                            for t in 0..dh {
                                crow[t] = crow[t] + p * vrow[t];
                            }
                        }
                    }
                }
            }
            let a = linear(&ctx, m, self.pt(&format!("{name}.wo")), self.pt(&format!("{name}.bo")));
            add_assign(&mut x, &a);
            let h = ln_affine(
                &x,
                m,
                d,
                &self.pt(&format!("enc{li}.ln2.g")).data,
                &self.pt(&format!("enc{li}.ln2.b")).data,
            );
            let f = self.ffn_nograd(&format!("enc{li}.ffn"), &h, m);
            add_assign(&mut x, &f);
        }
        let states = ln_affine(&x, m, d, &self.pt("enc.ln.g").data, &self.pt("enc.ln.b").data);
        Ok(EncOut {
            data: states,
            rows: b_count,
            cols: l,
            d,
            src_lengths: batch.lengths.clone(),
        })
    }

    /// Greedy decoding with frozen weights. Emits up to `max_new_tokens`
    /// content tokens per row, stopping early at EOS. Returned sentences
    /// exclude all special tokens.
    pub fn greedy_decode(
        &self,
        enc: &EncOut<T>,
        target_lang: Lang,
        max_new_tokens: usize,
    ) -> Result<Vec<Vec<u32>>> {
        let d = self.config.d_model;
        let v = self.config.vocab_size;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let b_count = enc.rows;
        let ls = enc.cols;
        let n_layers = self.config.n_layers;
        // Positions are bounded by the positional table.
        let max_new = max_new_tokens.min(self.config.max_len - 2);

        // Cross-attention keys/values are fixed per layer; precompute.
        let mut cross_k = Vec::with_capacity(n_layers);
        let mut cross_v = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let name = format!("dec{li}.cross");
            cross_k.push(linear(
                &enc.data,
                b_count * ls,
                self.pt(&format!("{name}.wk")),
                self.pt(&format!("{name}.bk")),
            ));
            cross_v.push(linear(
                &enc.data,
                b_count * ls,
                self.pt(&format!("{name}.wv")),
                self.pt(&format!("{name}.bv")),
            ));
        }

        // Self-attention caches, layout [t][b][d] appended per step.
        let mut self_k: Vec<Vec<T>> = vec![Vec::new(); n_layers];
        let mut self_v: Vec<Vec<T>> = vec![Vec::new(); n_layers];

        let we = &self.pt("word_emb").data;
        let pe = &self.pt("pos_emb").data;
        let out_bias = &self.pt("out_bias").data;

        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); b_count];
        let mut finished = vec![false; b_count];
        let mut cur_tok: Vec<u32> = vec![target_lang.tag(); b_count];

        for t in 0..max_new {
            // Embed the current token at position t for every row.
            let mut x = vec![T::zero(); b_count * d];
            for b in 0..b_count {
                let tok = cur_tok[b] as usize;
                for j in 0..d {
                    x[b * d + j] = we[tok * d + j] + pe[t * d + j];
                }
            }
            for li in 0..n_layers {
                let h = ln_affine(
                    &x,
                    b_count,
                    d,
                    &self.pt(&format!("dec{li}.ln1.g")).data,
                    &self.pt(&format!("dec{li}.ln1.b")).data,
                );
                let name = format!("dec{li}.self");
                let q = linear(&h, b_count, self.pt(&format!("{name}.wq")), self.pt(&format!("{name}.bq")));
                let k = linear(&h, b_count, self.pt(&format!("{name}.wk")), self.pt(&format!("{name}.bk")));
                let vv = linear(&h, b_count, self.pt(&format!("{name}.wv")), self.pt(&format!("{name}.bv")));
                self_k[li].extend_from_slice(&k);
                self_v[li].extend_from_slice(&vv);
                let n_cached = t + 1;
                let mut ctx = vec![T::zero(); b_count * d];
                let mut scores = vec![T::zero(); n_cached];
                for b in 0..b_count {
                    for hd in 0..heads {
                        let c0 = hd * dh;
                        let qrow = &q[b * d + c0..b * d + c0 + dh];
                        for tp in 0..n_cached {
                            let krow = &self_k[li][(tp * b_count + b) * d + c0..(tp * b_count + b) * d + c0 + dh];
                            scores[tp] = kernels::dot(qrow, krow) * scale;
                        }
                        kernels::softmax_rows_masked(&mut scores, 1, n_cached, None);
                        let crow = &mut ctx[b * d + c0..b * d + c0 + dh];
                        for tp in 0..n_cached {
                            let p = scores[tp];
                            let vrow = &self_v[li][(tp * b_count + b) * d + c0..(tp * b_count + b) * d + c0 + dh];
                            for u in 0..dh {
                                crow[u] = crow[u] + p * vrow[u];
                            }
                        }
                    }
                }
                let a = linear(&ctx, b_count, self.pt(&format!("{name}.wo")), self.pt(&format!("{name}.bo")));
                add_assign(&mut x, &a);

                let h = ln_affine(
                    &x,
                    b_count,
                    d,
                    &self.pt(&format!("dec{li}.ln2.g")).data,
                    &self.pt(&format!("dec{li}.ln2.b")).data,
                );
                let cname = format!("dec{li}.cross");
                let q = linear(&h, b_count, self.pt(&format!("{cname}.wq")), self.pt(&format!("{cname}.bq")));
                let mut ctx = vec![T::zero(); b_count * d];
                let mut cscores = vec![T::zero(); ls];
                for b in 0..b_count {
                    let slen = enc.src_lengths[b];
                    for hd in 0..heads {
                        let c0 = hd * dh;
                        let qrow = &q[b * d + c0..b * d + c0 + dh];
                        for j in 0..slen {
                            let krow = &cross_k[li][(b * ls + j) * d + c0..(b * ls + j) * d + c0 + dh];
                            cscores[j] = kernels::dot(qrow, krow) * scale;
                        }
                        kernels::softmax_rows_masked(&mut cscores[..slen], 1, slen, None);
                        let crow = &mut ctx[b * d + c0..b * d + c0 + dh];
                        for j in 0..slen {
                            let p = cscores[j];
                            let vrow = &cross_v[li][(b * ls + j) * d + c0..(b * ls + j) * d + c0 + dh];
                            for u in 0..dh {
                                crow[u] = crow[u] + p * vrow[u];
                            }
                        }
                    }
                }
                let c = linear(&ctx, b_count, self.pt(&format!("{cname}.wo")), self.pt(&format!("{cname}.bo")));
                add_assign(&mut x, &c);

                let h = ln_affine(
                    &x,
                    b_count,
                    d,
                    &self.pt(&format!("dec{li}.ln3.g")).data,
                    &self.pt(&format!("dec{li}.ln3.b")).data,
                );
                let f = self.ffn_nograd(&format!("dec{li}.ffn"), &h, b_count);
                add_assign(&mut x, &f);
            }
            let xf = ln_affine(&x, b_count, d, &self.pt("dec.ln.g").data, &self.pt("dec.ln.b").data);
            let mut logits = vec![T::zero(); b_count * v];
            kernels::matmul_nt(&xf, we, &mut logits, b_count, d, v);
            for b in 0..b_count {
                for j in 0..v {
                    logits[b * v + j] = logits[b * v + j] + out_bias[j];
                }
            }
            let mut all_done = true;
            for b in 0..b_count {
                if finished[b] {
                    cur_tok[b] = EOS;
                    continue;
                }
                let row = &logits[b * v..(b + 1) * v];
                let mut best = EOS as usize;
                let mut best_v = T::neg_infinity();
                for (j, &lv) in row.iter().enumerate() {
                    // Never emit structural tokens; EOS terminates, UNK is
                    // an ordinary vocabulary item.
                    if j == super::PAD as usize
                        || j == super::BOS as usize
                        || j == super::LANG1 as usize
                        || j == super::LANG2 as usize
                    {
                        continue;
                    }
                    if lv > best_v {
                        best_v = lv;
                        best = j;
                    }
                }
                if best == EOS as usize {
                    finished[b] = true;
                    cur_tok[b] = EOS;
                } else {
                    outputs[b].push(best as u32);
                    cur_tok[b] = best as u32;
                    all_done = false;
                }
            }
            if all_done {
                break;
            }
        }
        Ok(outputs)
    }

    /// Encode + greedy decode in one call (translation / reconstruction).
    pub fn translate(&self, batch: &Batch, target_lang: Lang, max_new_tokens: usize) -> Result<Vec<Vec<u32>>> {
        let enc = self.encode_nograd(batch)?;
        self.greedy_decode(&enc, target_lang, max_new_tokens)
    }
}
