//! Tape-free inference. The plain encoder repeats the tape's arithmetic
//! operation for operation, so its output is bit-identical to an off-mode
//! tape pass over the same single sequence.

use std::cmp::Ordering;

use leak_nn::kernels::{self, gemm};
use leak_nn::{Tape, Tensor, LAYER_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Attn, Batch, Example, Ffn, LeakMode, Norm, Seq2Seq};
use crate::error::{Error, Result};
use crate::vocab::{BOS_ID, EOS_ID, MASK_ID};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Generated-token cap; clamped to the model's position count.
    pub max_len: usize,
    /// Rank finished hypotheses by mean instead of total log-probability.
    pub length_norm: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 1,
            max_len: usize::MAX,
            length_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the closing `</s>`.
    pub tokens: Vec<usize>,
    /// Total log-probability, including `</s>` when finished.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn steps(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    fn rank(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.score / self.steps().max(1) as f64
        } else {
            self.score
        }
    }
}

/// Tokens the decoder may emit.
fn allowed(id: usize) -> bool {
    id == EOS_ID || id > MASK_ID
}

fn val<'a>(m: &'a Seq2Seq, id: leak_nn::ParamId) -> &'a [f64] {
    m.store.get(id).value.data()
}

fn linear(m: &Seq2Seq, x: &[f64], rows: usize, w: leak_nn::ParamId, b: leak_nn::ParamId) -> Vec<f64> {
    let wt = &m.store.get(w).value;
    let (k, n) = (wt.rows(), wt.cols());
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, false, wt.data(), false, 0.0, &mut out);
    let bias = val(m, b);
    for i in 0..rows {
        for j in 0..n {
            out[i * n + j] += bias[j];
        }
    }
    out
}

fn layer_norm(m: &Seq2Seq, x: &[f64], n: &Norm) -> Vec<f64> {
    let b = m.config.hidden;
    let (g, be) = (val(m, n.g), val(m, n.b));
    let mut out = vec![0.0; x.len()];
    for (xi, oi) in x.chunks(b).zip(out.chunks_mut(b)) {
        kernels::layer_norm_row(xi, g, be, LAYER_NORM_EPS, oi);
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Multi-head attention of `nq` query rows over `nk` key/value rows. With
/// `causal`, query `i` sees keys `0..=i`.
fn attend(q: &[f64], nq: usize, k: &[f64], v: &[f64], nk: usize, b: usize, heads: usize, causal: bool) -> Vec<f64> {
    let dh = b / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * b];
    let mut row = vec![0.0; nk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..nq {
            let qi = &q[i * b + c0..i * b + c0 + dh];
            let visible = if causal { i + 1 } else { nk };
            for j in 0..visible {
                row[j] = kernels::dot(qi, &k[j * b + c0..j * b + c0 + dh]) * scale;
            }
            kernels::softmax_in_place(&mut row[..visible]);
            let orow = &mut out[i * b + c0..i * b + c0 + dh];
            for j in 0..visible {
                let p = row[j];
                if p != 0.0 {
                    for (o, x) in orow.iter_mut().zip(&v[j * b + c0..j * b + c0 + dh]) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    out
}

fn ffn(m: &Seq2Seq, x: &[f64], rows: usize, f: &Ffn) -> Vec<f64> {
    let h: Vec<f64> = linear(m, x, rows, f.w1, f.b1).into_iter().map(kernels::gelu).collect();
    linear(m, &h, rows, f.w2, f.b2)
}

fn embed(m: &Seq2Seq, ids: &[usize], pos_table: leak_nn::ParamId, first_pos: usize) -> Result<Vec<f64>> {
    let tok = &m.store.get(m.p.tokens).value;
    let pos = &m.store.get(pos_table).value;
    let scale = m.embed_scale();
    let mut out = Vec::with_capacity(ids.len() * m.config.hidden);
    for (i, &id) in ids.iter().enumerate() {
        if id >= tok.rows() {
            return Err(Error::Input(format!("token id {id} outside the vocabulary")));
        }
        let p = first_pos + i;
        if p >= pos.rows() {
            return Err(Error::Input(format!("position {p} exceeds {} positions", pos.rows())));
        }
        out.extend(tok.row(id).iter().zip(pos.row(p)).map(|(a, b)| a * scale + b));
    }
    Ok(out)
}

/// Self-attention key/value cache plus precomputed cross-attention keys and
/// values, for one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    cross_k: std::rc::Rc<Vec<Vec<f64>>>,
    cross_v: std::rc::Rc<Vec<Vec<f64>>>,
    memory_rows: usize,
    pub position: usize,
}

impl Seq2Seq {
    /// Off-mode encoder without a tape.
    pub fn encode_plain(&self, input: &[usize]) -> Result<Tensor> {
        let n = input.len();
        if n > self.config.max_positions {
            return Err(Error::Input(format!("input of {n} tokens exceeds {} positions", self.config.max_positions)));
        }
        let b = self.config.hidden;
        let mut x = embed(self, input, self.p.enc_pos, 0)?;
        for layer in &self.p.enc {
            let h = layer_norm(self, &x, &layer.ln1);
            let a = self.attn_block(&h, n, &h, n, &layer.attn, false);
            x = add(&x, &a);
            let h = layer_norm(self, &x, &layer.ln2);
            let f = ffn(self, &h, n, &layer.ffn);
            x = add(&x, &f);
        }
        let out = layer_norm(self, &x, &self.p.enc_ln);
        Ok(Tensor::matrix(n, b, out)?)
    }

    /// Encoder memory for one example, leaking its WAG when asked. Leak mode
    /// runs the tape encoder in evaluation mode.
    pub fn encode_example(&self, ex: &Example, mode: LeakMode) -> Result<Tensor> {
        match mode {
            LeakMode::Off => self.encode_plain(&ex.input),
            LeakMode::Leak => {
                let mut tape = Tape::new();
                let batch = Batch::new(&[ex]);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let enc = self.encode(&mut tape, &batch, LeakMode::Leak, false, &mut rng)?;
                Ok(tape.value(enc.output).clone())
            }
        }
    }

    fn attn_block(&self, q_in: &[f64], nq: usize, kv_in: &[f64], nk: usize, a: &Attn, causal: bool) -> Vec<f64> {
        let q = linear(self, q_in, nq, a.wq, a.bq);
        let k = linear(self, kv_in, nk, a.wk, a.bk);
        let v = linear(self, kv_in, nk, a.wv, a.bv);
        let o = attend(&q, nq, &k, &v, nk, self.config.hidden, self.config.heads, causal);
        linear(self, &o, nq, a.wo, a.bo)
    }

    pub fn start_decoder(&self, memory: &Tensor) -> DecoderState {
        let n = memory.rows();
        let mut ck = Vec::with_capacity(self.p.dec.len());
        let mut cv = Vec::with_capacity(self.p.dec.len());
        for layer in &self.p.dec {
            ck.push(linear(self, memory.data(), n, layer.cross.wk, layer.cross.bk));
            cv.push(linear(self, memory.data(), n, layer.cross.wv, layer.cross.bv));
        }
        DecoderState {
            self_k: vec![Vec::new(); self.p.dec.len()],
            self_v: vec![Vec::new(); self.p.dec.len()],
            cross_k: std::rc::Rc::new(ck),
            cross_v: std::rc::Rc::new(cv),
            memory_rows: n,
            position: 0,
        }
    }

    /// Feeds `token` at the state's next position and returns the
    /// log-probabilities of the following token.
    pub fn decoder_step(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        let b = self.config.hidden;
        let heads = self.config.heads;
        let mut y = embed(self, &[token], self.p.dec_pos, state.position)?;
        let t = state.position + 1;
        for (l, layer) in self.p.dec.iter().enumerate() {
            let h = layer_norm(self, &y, &layer.ln1);
            let q = linear(self, &h, 1, layer.self_attn.wq, layer.self_attn.bq);
            state.self_k[l].extend(linear(self, &h, 1, layer.self_attn.wk, layer.self_attn.bk));
            state.self_v[l].extend(linear(self, &h, 1, layer.self_attn.wv, layer.self_attn.bv));
            let o = attend(&q, 1, &state.self_k[l], &state.self_v[l], t, b, heads, false);
            let a = linear(self, &o, 1, layer.self_attn.wo, layer.self_attn.bo);
            y = add(&y, &a);
            let h = layer_norm(self, &y, &layer.ln2);
            let q = linear(self, &h, 1, layer.cross.wq, layer.cross.bq);
            let o = attend(&q, 1, &state.cross_k[l], &state.cross_v[l], state.memory_rows, b, heads, false);
            let a = linear(self, &o, 1, layer.cross.wo, layer.cross.bo);
            y = add(&y, &a);
            let h = layer_norm(self, &y, &layer.ln3);
            let f = ffn(self, &h, 1, &layer.ffn);
            y = add(&y, &f);
        }
        let y = layer_norm(self, &y, &self.p.dec_ln);
        let table = &self.store.get(self.p.tokens).value;
        let mut logits = vec![0.0; table.rows()];
        gemm(1, b, table.rows(), &y, false, table.data(), true, 0.0, &mut logits);
        kernels::log_softmax_in_place(&mut logits);
        state.position = t;
        Ok(logits)
    }

    fn max_steps(&self, opts: &DecodeOptions) -> usize {
        opts.max_len.min(self.config.max_positions)
    }

    /// Highest-probability token at every step; ties go to the lowest id.
    pub fn greedy(&self, memory: &Tensor, max_len: usize) -> Result<Hypothesis> {
        let steps = max_len.min(self.config.max_positions);
        let mut state = self.start_decoder(memory);
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            score: 0.0,
            finished: false,
        };
        let mut prev = BOS_ID;
        for _ in 0..steps {
            let lp = self.decoder_step(&mut state, prev)?;
            let (best, s) = argmax_allowed(&lp);
            hyp.score += s;
            if best == EOS_ID {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(best);
            prev = best;
        }
        Ok(hyp)
    }

    /// Beam search with early stopping. The greedy hypothesis competes with
    /// the beam's finished hypotheses, so the result never scores below it.
    pub fn beam_search(&self, memory: &Tensor, opts: &DecodeOptions) -> Result<Hypothesis> {
        let greedy = self.greedy(memory, self.max_steps(opts))?;
        if opts.beam <= 1 {
            return Ok(greedy);
        }
        let steps = self.max_steps(opts);
        struct Live {
            hyp: Hypothesis,
            state: DecoderState,
        }
        let mut live = vec![Live {
            hyp: Hypothesis {
                tokens: Vec::new(),
                score: 0.0,
                finished: false,
            },
            state: self.start_decoder(memory),
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..steps {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            let mut dists = Vec::with_capacity(live.len());
            for (i, l) in live.iter_mut().enumerate() {
                let prev = l.hyp.tokens.last().copied().unwrap_or(BOS_ID);
                let lp = self.decoder_step(&mut l.state, prev)?;
                for (k, &v) in lp.iter().enumerate() {
                    if allowed(k) {
                        cands.push((l.hyp.score + v, i, k));
                    }
                }
                dists.push(lp);
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::with_capacity(opts.beam);
            for &(score, i, k) in &cands {
                if next.len() >= opts.beam {
                    break;
                }
                let mut tokens = live[i].hyp.tokens.clone();
                if k == EOS_ID {
                    finished.push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                    });
                    continue;
                }
                tokens.push(k);
                next.push(Live {
                    hyp: Hypothesis {
                        tokens,
                        score,
                        finished: false,
                    },
                    state: live[i].state.clone(),
                });
            }
            live = next;
            if live.is_empty() || finished.len() >= opts.beam {
                break;
            }
            if !opts.length_norm {
                // Scores only fall as hypotheses grow.
                let best_fin = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
                let best_live = live.iter().map(|l| l.hyp.score).fold(f64::NEG_INFINITY, f64::max);
                if best_fin >= best_live {
                    break;
                }
            }
        }
        if finished.is_empty() {
            finished.extend(live.into_iter().map(|l| l.hyp));
        }
        finished.push(greedy);
        let best = finished
            .into_iter()
            .reduce(|a, b| if b.rank(opts.length_norm) > a.rank(opts.length_norm) { b } else { a })
            .expect("at least the greedy hypothesis");
        Ok(best)
    }

    /// Total log-probability of `tokens` followed by `</s>`.
    pub fn sequence_score(&self, memory: &Tensor, tokens: &[usize]) -> Result<f64> {
        let mut state = self.start_decoder(memory);
        let mut prev = BOS_ID;
        let mut s = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&EOS_ID)) {
            let lp = self.decoder_step(&mut state, prev)?;
            s += lp[t];
            prev = t;
        }
        Ok(s)
    }

    /// Decodes one example with greedy search (`beam` 1) or beam search.
    pub fn decode_example(&self, ex: &Example, mode: LeakMode, opts: &DecodeOptions) -> Result<Hypothesis> {
        let memory = self.encode_example(ex, mode)?;
        self.beam_search(&memory, opts)
    }
}

fn argmax_allowed(lp: &[f64]) -> (usize, f64) {
    let mut best = (EOS_ID, lp[EOS_ID]);
    for (k, &v) in lp.iter().enumerate() {
        if allowed(k) && (v > best.1 || (v == best.1 && k < best.0)) {
            best = (k, v);
        }
    }
    best
}
