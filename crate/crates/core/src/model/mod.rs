//! Encoder-decoder transformer with structural adapters in every encoder layer.
//!
//! Sequences of a batch are packed row-wise into one matrix; attention is
//! block-diagonal over the per-example spans. Parameters live in a single
//! [`ParamStore`] under stable dotted names (`enc.0.attn.wq`, `adapter.2.w_g`,
//! `dec.1.cross.wk`, ...), which is also the checkpoint key space.

mod checkpoint;
mod example;
mod infer;

use leak_nn::{AttnSegment, AttnSpec, ParamId, ParamStore, SparseRows, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};

pub use checkpoint::{load_params, save_params, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use example::{mix_weights, Example, GraphInput, NodeRow};
pub use infer::{DecodeOptions, DecoderState, Hypothesis};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Whether the encoder consumes the example's WAG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeakMode {
    Off,
    Leak,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Attn {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct Adapter {
    pub w_g: ParamId,
    pub w_a: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Params {
    pub tokens: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub adapters: Vec<Adapter>,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
}

struct Init {
    rng: ChaCha8Rng,
    b: usize,
}

impl Init {
    fn xavier(&mut self, store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let d = Uniform::new_inclusive(-a, a);
        let data = (0..fan_in * fan_out).map(|_| d.sample(&mut self.rng)).collect();
        store.add(name, Tensor::matrix(fan_in, fan_out, data).expect("shape"))
    }

    fn normal(&mut self, store: &mut ParamStore, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let d = Normal::new(0.0, std).expect("std");
        let data = (0..rows * cols).map(|_| d.sample(&mut self.rng)).collect();
        store.add(name, Tensor::matrix(rows, cols, data).expect("shape"))
    }

    fn norm(&self, store: &mut ParamStore, prefix: &str) -> Norm {
        Norm {
            g: store.add(format!("{prefix}.g"), Tensor::full(&[1, self.b], 1.0)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[1, self.b])),
        }
    }

    fn attn(&mut self, store: &mut ParamStore, prefix: &str) -> Attn {
        let b = self.b;
        let mut w = |s: &mut ParamStore, n: &str| self.xavier(s, format!("{prefix}.{n}"), b, b);
        let (wq, wk, wv, wo) = (w(store, "wq"), w(store, "wk"), w(store, "wv"), w(store, "wo"));
        let z = |s: &mut ParamStore, n: &str| s.add(format!("{prefix}.{n}"), Tensor::zeros(&[1, b]));
        Attn {
            wq,
            bq: z(store, "bq"),
            wk,
            bk: z(store, "bk"),
            wv,
            bv: z(store, "bv"),
            wo,
            bo: z(store, "bo"),
        }
    }

    fn ffn(&mut self, store: &mut ParamStore, prefix: &str, ffn: usize) -> Ffn {
        let b = self.b;
        Ffn {
            w1: self.xavier(store, format!("{prefix}.w1"), b, ffn),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, ffn])),
            w2: self.xavier(store, format!("{prefix}.w2"), ffn, b),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, b])),
        }
    }
}

const EMBED_STD: f64 = 0.02;
const ADAPTER_OUT_STD: f64 = 0.02;

/// Row spans of one packed batch.
#[derive(Clone, Debug)]
pub struct Layout {
    /// `(start, len)` of each example's encoder rows.
    pub enc: Vec<(usize, usize)>,
    /// `(start, len)` of each example's decoder rows.
    pub dec: Vec<(usize, usize)>,
}

/// Sequences fed to one forward pass. Inputs may differ from the examples'
/// own inputs (masking); everything else is borrowed unchanged.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub inputs: Vec<Vec<usize>>,
    pub examples: Vec<&'a Example>,
}

impl<'a> Batch<'a> {
    pub fn new(examples: &[&'a Example]) -> Self {
        Self {
            inputs: examples.iter().map(|e| e.input.clone()).collect(),
            examples: examples.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn layout(&self) -> Layout {
        let mut enc = Vec::with_capacity(self.len());
        let mut dec = Vec::with_capacity(self.len());
        let (mut e, mut d) = (0, 0);
        for (inp, ex) in self.inputs.iter().zip(&self.examples) {
            enc.push((e, inp.len()));
            dec.push((d, ex.target.len()));
            e += inp.len();
            d += ex.target.len();
        }
        Layout { enc, dec }
    }

    /// Concatenated targets, in decoder-row order.
    pub fn targets(&self) -> Vec<usize> {
        self.examples.iter().flat_map(|e| e.target.iter().copied()).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.target.len()).sum()
    }
}

/// Encoder result on the tape.
pub struct Encoded {
    /// Final (layer-normalized) encoder states.
    pub output: Var,
    /// Token states after each layer (and its adapter, in leak mode).
    pub layers: Vec<Var>,
    /// Virtual-node states after each adapter; empty when off or none exist.
    pub virtual_states: Vec<Var>,
}

/// Adapter bookkeeping for a packed batch.
struct Binding {
    rows: Vec<usize>,
    mix: SparseRows,
    groups: Vec<Vec<usize>>,
}

fn bind(batch: &Batch, layout: &Layout) -> Result<Binding> {
    let n_rows: usize = layout.enc.iter().map(|s| s.1).sum();
    let mut rows = Vec::new();
    let mut mix = Vec::new();
    let mut groups = Vec::new();
    for (i, ex) in batch.examples.iter().enumerate() {
        let g = ex
            .graph
            .as_ref()
            .ok_or_else(|| Error::Input(format!("example {} has no WAG for leak mode", ex.id)))?;
        let (start, len) = layout.enc[i];
        let words = len - 2;
        let base = rows.len();
        let vbase = groups.len();
        for n in &g.nodes {
            rows.push(match *n {
                NodeRow::Token(p) if p < words => start + 1 + p,
                NodeRow::Token(p) => {
                    return Err(Error::Structural(format!(
                        "example {}: WAG node at token {p} but the input has {words} words",
                        ex.id
                    )))
                }
                NodeRow::Virtual(k) if k < g.virtual_labels.len() => n_rows + vbase + k,
                NodeRow::Virtual(k) => {
                    return Err(Error::Structural(format!("example {}: virtual node {k} has no label", ex.id)))
                }
            });
        }
        for r in g.mix_weights()? {
            mix.push(r.into_iter().map(|(u, w)| (base + u, w)).collect());
        }
        groups.extend(g.virtual_labels.iter().cloned());
    }
    Ok(Binding {
        rows,
        mix: SparseRows { rows: mix },
        groups,
    })
}

/// `Σ_u w_uv · H_u · W_g` over each node's normalized neighborhood.
pub fn graph_conv(tape: &mut Tape, h: Var, w_g: Var, mix: &SparseRows) -> Result<Var> {
    let m = tape.sparse_mix(h, mix)?;
    Ok(tape.matmul(m, w_g)?)
}

/// `H + GELU(graph_conv(H)) · W_a`, with dropout on the activation.
pub fn adapter_forward<R: Rng>(
    tape: &mut Tape,
    h: Var,
    w_g: Var,
    w_a: Var,
    mix: &SparseRows,
    dropout: f64,
    rng: &mut R,
) -> Result<Var> {
    let c = graph_conv(tape, h, w_g, mix)?;
    let c = tape.gelu(c)?;
    let c = tape.dropout(c, dropout, rng)?;
    let a = tape.matmul(c, w_a)?;
    Ok(tape.add(h, a)?)
}

/// A model instance: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub(crate) p: Params,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.check()?;
        if config.vocab_size <= crate::vocab::RESERVED {
            return Err(Error::Config(format!("vocabulary size {} is too small", config.vocab_size)));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            b: c.hidden,
        };
        let tokens = init.normal(&mut store, "embed.tokens".into(), c.vocab_size, c.hidden, EMBED_STD);
        let enc_pos = init.normal(&mut store, "embed.enc_pos".into(), c.max_positions, c.hidden, EMBED_STD);
        let dec_pos = init.normal(&mut store, "embed.dec_pos".into(), c.max_positions, c.hidden, EMBED_STD);
        let mut enc = Vec::new();
        let mut adapters = Vec::new();
        for l in 0..c.encoder_layers {
            let p = format!("enc.{l}");
            enc.push(EncLayer {
                ln1: init.norm(&mut store, &format!("{p}.ln1")),
                attn: init.attn(&mut store, &format!("{p}.attn")),
                ln2: init.norm(&mut store, &format!("{p}.ln2")),
                ffn: init.ffn(&mut store, &format!("{p}.ffn"), c.ffn),
            });
        }
        let enc_ln = init.norm(&mut store, "enc.ln");
        for l in 0..c.encoder_layers {
            adapters.push(Adapter {
                w_g: init.xavier(&mut store, format!("adapter.{l}.w_g"), c.hidden, c.hidden),
                w_a: init.normal(&mut store, format!("adapter.{l}.w_a"), c.hidden, c.hidden, ADAPTER_OUT_STD),
            });
        }
        let mut dec = Vec::new();
        for l in 0..c.decoder_layers {
            let p = format!("dec.{l}");
            dec.push(DecLayer {
                ln1: init.norm(&mut store, &format!("{p}.ln1")),
                self_attn: init.attn(&mut store, &format!("{p}.self")),
                ln2: init.norm(&mut store, &format!("{p}.ln2")),
                cross: init.attn(&mut store, &format!("{p}.cross")),
                ln3: init.norm(&mut store, &format!("{p}.ln3")),
                ffn: init.ffn(&mut store, &format!("{p}.ffn"), c.ffn),
            });
        }
        let dec_ln = init.norm(&mut store, "dec.ln");
        Ok(Self {
            config,
            store,
            p: Params {
                tokens,
                enc_pos,
                dec_pos,
                enc,
                enc_ln,
                adapters,
                dec,
                dec_ln,
            },
        })
    }

    /// Replaces every parameter value with the same-named tensor of `other`.
    /// Missing names or mismatched shapes are schema errors.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in self.store.iter_mut() {
            let src = other
                .by_name(&p.name)
                .map_err(|_| Error::Schema(format!("checkpoint lacks parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Schema(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn adapter_ids(&self) -> Vec<(ParamId, ParamId)> {
        self.p.adapters.iter().map(|a| (a.w_g, a.w_a)).collect()
    }

    fn check_lengths(&self, batch: &Batch) -> Result<()> {
        let max = self.config.max_positions;
        for (inp, ex) in batch.inputs.iter().zip(&batch.examples) {
            if inp.len() > max || ex.target.len() > max {
                return Err(Error::Input(format!(
                    "example {}: lengths {} / {} exceed {max} positions",
                    ex.id,
                    inp.len(),
                    ex.target.len()
                )));
            }
            if inp.len() < 2 {
                return Err(Error::Input(format!("example {} has no <s> </s> frame", ex.id)));
            }
        }
        Ok(())
    }

    /// Token embeddings enter the residual stream multiplied by `sqrt(hidden)`,
    /// on the scale of the sublayer outputs added to them.
    pub(crate) fn embed_scale(&self) -> f64 {
        (self.config.hidden as f64).sqrt()
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
        let g = tape.param(&self.store, n.g)?;
        let b = tape.param(&self.store, n.b)?;
        Ok(tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    fn lin(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(&self.store, w)?;
        let b = tape.param(&self.store, b)?;
        Ok(tape.linear(x, w, Some(b))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<R: Rng>(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        a: &Attn,
        segments: Vec<AttnSegment>,
        causal: bool,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let q = self.lin(tape, q_in, a.wq, a.bq)?;
        let k = self.lin(tape, kv_in, a.wk, a.bk)?;
        let v = self.lin(tape, kv_in, a.wv, a.bv)?;
        let spec = AttnSpec {
            segments,
            heads: self.config.heads,
            causal,
            dropout: if train { self.config.attention_dropout } else { 0.0 },
        };
        let o = tape.attention(q, k, v, spec, rng)?;
        self.lin(tape, o, a.wo, a.bo)
    }

    fn ffn<R: Rng>(&self, tape: &mut Tape, x: Var, f: &Ffn, train: bool, rng: &mut R) -> Result<Var> {
        let h = self.lin(tape, x, f.w1, f.b1)?;
        let h = tape.gelu(h)?;
        let o = self.lin(tape, h, f.w2, f.b2)?;
        self.drop(tape, o, train, rng)
    }

    fn drop<R: Rng>(&self, tape: &mut Tape, x: Var, train: bool, rng: &mut R) -> Result<Var> {
        if train {
            Ok(tape.dropout(x, self.config.dropout, rng)?)
        } else {
            Ok(x)
        }
    }

    fn embed<R: Rng>(
        &self,
        tape: &mut Tape,
        seqs: &[&[usize]],
        pos_table: ParamId,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let table = tape.param(&self.store, self.p.tokens)?;
        let pt = tape.param(&self.store, pos_table)?;
        let e = tape.embedding(table, &ids)?;
        let e = tape.scale(e, self.embed_scale())?;
        let p = tape.embedding(pt, &pos)?;
        let x = tape.add(e, p)?;
        self.drop(tape, x, train, rng)
    }

    /// Encodes the batch inputs. In leak mode every encoder layer is followed
    /// by its structural adapter over the example WAGs; virtual-node states are
    /// carried from one adapter to the next.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mode: LeakMode,
        train: bool,
        rng: &mut R,
    ) -> Result<Encoded> {
        self.check_lengths(batch)?;
        let layout = batch.layout();
        let seqs: Vec<&[usize]> = batch.inputs.iter().map(Vec::as_slice).collect();
        let n_rows: usize = seqs.iter().map(|s| s.len()).sum();
        let mut x = self.embed(tape, &seqs, self.p.enc_pos, train, rng)?;
        let segments: Vec<AttnSegment> = layout
            .enc
            .iter()
            .map(|&(s, n)| AttnSegment {
                q_start: s,
                q_len: n,
                k_start: s,
                k_len: n,
            })
            .collect();
        let binding = match mode {
            LeakMode::Leak => Some(bind(batch, &layout)?),
            LeakMode::Off => None,
        };
        let mut s = match &binding {
            Some(b) if !b.groups.is_empty() => {
                let table = tape.param(&self.store, self.p.tokens)?;
                let mean = tape.embedding_mean(table, &b.groups)?;
                Some(tape.scale(mean, self.embed_scale())?)
            }
            _ => None,
        };
        let mut layers = Vec::with_capacity(self.p.enc.len());
        let mut virtual_states = Vec::new();
        for (l, layer) in self.p.enc.iter().enumerate() {
            let h = self.norm(tape, x, &layer.ln1)?;
            let a = self.attention(tape, h, h, &layer.attn, segments.clone(), false, train, rng)?;
            let a = self.drop(tape, a, train, rng)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, &layer.ln2)?;
            let f = self.ffn(tape, h, &layer.ffn, train, rng)?;
            x = tape.add(x, f)?;
            if let Some(b) = &binding {
                let g = match s {
                    Some(sv) => tape.concat_rows(x, sv)?,
                    None => x,
                };
                let nodes = tape.gather_rows(g, &b.rows)?;
                let ad = &self.p.adapters[l];
                let w_g = tape.param(&self.store, ad.w_g)?;
                let w_a = tape.param(&self.store, ad.w_a)?;
                let rate = if train { self.config.adapter_dropout } else { 0.0 };
                let c = graph_conv(tape, nodes, w_g, &b.mix)?;
                let c = tape.gelu(c)?;
                let c = tape.dropout(c, rate, rng)?;
                let delta = tape.matmul(c, w_a)?;
                let g = tape.scatter_add_rows(g, &b.rows, delta)?;
                if s.is_some() {
                    x = tape.slice_rows(g, 0, n_rows)?;
                    let sv = tape.slice_rows(g, n_rows, b.groups.len())?;
                    virtual_states.push(sv);
                    s = Some(sv);
                } else {
                    x = g;
                }
            }
            layers.push(x);
        }
        let output = self.norm(tape, x, &self.p.enc_ln)?;
        Ok(Encoded {
            output,
            layers,
            virtual_states,
        })
    }

    /// Teacher-forced decoder over `memory`; returns output logits, one row
    /// per target position.
    pub fn decode<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        memory: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let layout = batch.layout();
        let dec_in: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.decoder_input()).collect();
        if dec_in.iter().any(Vec::is_empty) {
            return Err(Error::Input("decoding needs a non-empty target".into()));
        }
        let seqs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
        let mut y = self.embed(tape, &seqs, self.p.dec_pos, train, rng)?;
        let self_seg: Vec<AttnSegment> = layout
            .dec
            .iter()
            .map(|&(s, n)| AttnSegment {
                q_start: s,
                q_len: n,
                k_start: s,
                k_len: n,
            })
            .collect();
        let cross_seg: Vec<AttnSegment> = layout
            .dec
            .iter()
            .zip(&layout.enc)
            .map(|(&(s, n), &(es, en))| AttnSegment {
                q_start: s,
                q_len: n,
                k_start: es,
                k_len: en,
            })
            .collect();
        for layer in &self.p.dec {
            let h = self.norm(tape, y, &layer.ln1)?;
            let a = self.attention(tape, h, h, &layer.self_attn, self_seg.clone(), true, train, rng)?;
            let a = self.drop(tape, a, train, rng)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, y, &layer.ln2)?;
            let a = self.attention(tape, h, memory, &layer.cross, cross_seg.clone(), false, train, rng)?;
            let a = self.drop(tape, a, train, rng)?;
            y = tape.add(y, a)?;
            let h = self.norm(tape, y, &layer.ln3)?;
            let f = self.ffn(tape, h, &layer.ffn, train, rng)?;
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, y, &self.p.dec_ln)?;
        let table = tape.param(&self.store, self.p.tokens)?;
        Ok(tape.matmul_bt(y, table)?)
    }

    /// Output logits for every target position of the batch.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mode: LeakMode,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let enc = self.encode(tape, batch, mode, train, rng)?;
        self.decode(tape, batch, enc.output, train, rng)
    }
}

/// Negative log-likelihood summed over target tokens and averaged over the
/// batch, from raw logits.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[usize], batch_size: usize) -> Result<Var> {
    let mask = vec![true; targets.len()];
    let s = tape.cross_entropy(logits, targets, &mask)?;
    Ok(tape.scale(s, 1.0 / batch_size.max(1) as f64)?)
}

/// Tempered log-probabilities `log_softmax(logits / tau)`.
pub fn tempered_log_probs(tape: &mut Tape, logits: Var, tau: f64) -> Result<Var> {
    let z = if tau == 1.0 { logits } else { tape.scale(logits, 1.0 / tau)? };
    Ok(tape.log_softmax(z)?)
}

/// `KL(p ‖ q)` between tempered distributions over all classes, summed over
/// target positions and averaged over the batch. `student` is `p`, the
/// distribution the expectation is taken under.
pub fn kl_loss(tape: &mut Tape, student: Var, teacher: Var, tau: f64, batch_size: usize) -> Result<Var> {
    let lp = tempered_log_probs(tape, student, tau)?;
    let lq = tempered_log_probs(tape, teacher, tau)?;
    let rows = tape.value(lp).rows();
    let s = tape.kl_div(lp, lq, &vec![true; rows])?;
    Ok(tape.scale(s, 1.0 / batch_size.max(1) as f64)?)
}
