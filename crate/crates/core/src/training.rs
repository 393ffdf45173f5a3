//! Training regimes: plain seq2seq, the graph leakage model, teacher-student
//! distillation from a leakage teacher, and single-model two-pass
//! self-distillation.

use std::io::Write;
use std::path::Path;

use leak_nn::{grad_check, Adam, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amr::{delinearize, AmrGraph, LinearizedGraph};
use crate::config::{BetaSetting, LrSchedule, Regime, RegimeSettings, TrainConfig};
use crate::corpus::{build_vocabulary, generate, split_dev, CorpusRecord};
use crate::error::{Error, Result};
use crate::grammar::GrammarSpec;
use crate::model::{
    kl_loss, load_params, nll_loss, save_params, Batch, Checkpoint, CheckpointMeta, DecodeOptions, Example, LeakMode,
    Seq2Seq, CHECKPOINT_VERSION,
};
use crate::smatch::{report, score_pairs};
use crate::vocab::{Vocabulary, MASK_ID};

/// Linear ramp from `start` to `end` over `total_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl BetaSchedule {
    /// The published schedule: 90 down to 10 over 21k iterations.
    pub const PUBLISHED: BetaSchedule = BetaSchedule {
        start: 90.0,
        end: 10.0,
        total_steps: 21_000,
    };
}

pub fn beta_at(s: &BetaSchedule, step: u64) -> f64 {
    if s.total_steps == 0 || step >= s.total_steps {
        return s.end;
    }
    if step == 0 {
        return s.start;
    }
    s.start + (s.end - s.start) * (step as f64 / s.total_steps as f64)
}

/// Replaces input tokens by `<mask>` with a per-batch probability drawn
/// uniformly from `[lo, hi]`. Special tokens are never masked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingAugmenter {
    pub lo: f64,
    pub hi: f64,
}

impl MaskingAugmenter {
    pub fn new(range: [f64; 2]) -> Result<Self> {
        let [lo, hi] = range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("mask range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1")));
        }
        Ok(Self { lo, hi })
    }

    /// Masks `inputs` in place and returns the drawn probability.
    pub fn apply<R: Rng>(&self, inputs: &mut [Vec<usize>], rng: &mut R) -> f64 {
        if self.hi == 0.0 {
            return 0.0;
        }
        let p = if self.lo == self.hi { self.lo } else { rng.gen_range(self.lo..=self.hi) };
        for seq in inputs.iter_mut() {
            for t in seq.iter_mut() {
                if !Vocabulary::is_special(*t) && rng.gen::<f64>() < p {
                    *t = MASK_ID;
                }
            }
        }
        p
    }
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_nll: f64,
    pub l_leak: f64,
    pub l_kl: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// `L_nll` of the plain (off) pass.
pub fn baseline_objective<R: Rng>(
    tape: &mut Tape,
    model: &Seq2Seq,
    batch: &Batch,
    train: bool,
    rng: &mut R,
) -> Result<(Var, StepLosses)> {
    let logits = model.forward(tape, batch, LeakMode::Off, train, rng)?;
    let l = nll_loss(tape, logits, &batch.targets(), batch.len())?;
    let v = tape.value(l).item();
    Ok((l, StepLosses { l_nll: v, total: v, ..Default::default() }))
}

/// `L_leak`: NLL with the WAG leaked into the encoder.
pub fn glm_objective<R: Rng>(
    tape: &mut Tape,
    model: &Seq2Seq,
    batch: &Batch,
    train: bool,
    rng: &mut R,
) -> Result<(Var, StepLosses)> {
    let logits = model.forward(tape, batch, LeakMode::Leak, train, rng)?;
    let l = nll_loss(tape, logits, &batch.targets(), batch.len())?;
    let v = tape.value(l).item();
    Ok((l, StepLosses { l_leak: v, total: v, ..Default::default() }))
}

/// Output logits of a leakage teacher on `batch`, in evaluation mode.
pub fn teacher_logits(teacher: &Seq2Seq, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let l = teacher.forward(&mut tape, batch, LeakMode::Leak, false, &mut rng)?;
    Ok(tape.value(l).clone())
}

/// `L_nll(student) + α·KL(student ‖ teacher)` with the teacher held constant.
#[allow(clippy::too_many_arguments)]
pub fn kd_objective<R: Rng>(
    tape: &mut Tape,
    student: &Seq2Seq,
    teacher: &Tensor,
    batch: &Batch,
    alpha: f64,
    tau: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Var, StepLosses)> {
    let logits = student.forward(tape, batch, LeakMode::Off, train, rng)?;
    let l_nll = nll_loss(tape, logits, &batch.targets(), batch.len())?;
    let t = tape.constant(teacher.clone())?;
    let l_kl = kl_loss(tape, logits, t, tau, batch.len())?;
    let total = tape.weighted_sum(&[(l_nll, 1.0), (l_kl, alpha)])?;
    Ok((
        total,
        StepLosses {
            l_nll: tape.value(l_nll).item(),
            l_kl: tape.value(l_kl).item(),
            alpha,
            total: tape.value(total).item(),
            ..Default::default()
        },
    ))
}

/// Two passes over the same batch, plain and leaked, tied by
/// `L = L_nll + β·L_leak + α·KL(p ‖ q)` where `p` comes from the plain pass.
#[allow(clippy::too_many_arguments)]
pub fn leakdistill_objective<R: Rng>(
    tape: &mut Tape,
    model: &Seq2Seq,
    batch: &Batch,
    alpha: f64,
    beta: f64,
    tau: f64,
    detach_teacher: bool,
    train: bool,
    rng: &mut R,
) -> Result<(Var, StepLosses)> {
    let targets = batch.targets();
    let off = model.forward(tape, batch, LeakMode::Off, train, rng)?;
    let l_nll = nll_loss(tape, off, &targets, batch.len())?;
    let leak = model.forward(tape, batch, LeakMode::Leak, train, rng)?;
    let l_leak = nll_loss(tape, leak, &targets, batch.len())?;
    let q = if detach_teacher { tape.detach(leak)? } else { leak };
    let l_kl = kl_loss(tape, off, q, tau, batch.len())?;
    let total = tape.weighted_sum(&[(l_nll, 1.0), (l_leak, beta), (l_kl, alpha)])?;
    Ok((
        total,
        StepLosses {
            l_nll: tape.value(l_nll).item(),
            l_leak: tape.value(l_leak).item(),
            l_kl: tape.value(l_kl).item(),
            alpha,
            beta,
            total: tape.value(total).item(),
        },
    ))
}

/// One line of `metrics.jsonl`: means over the epoch's optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub l_nll: f64,
    pub l_leak: f64,
    pub l_kl: f64,
    pub beta: f64,
    pub dev_smatch: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub adam: Adam,
    pub data_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
}

/// Parameters frozen in teacher-student distillation: the decoder and the
/// embeddings it shares.
pub const KD_FROZEN: [&str; 3] = ["dec.", "embed.tokens", "embed.dec_pos"];

pub struct Trainer {
    pub config: TrainConfig,
    pub settings: RegimeSettings,
    pub model: Seq2Seq,
    pub vocab: Vocabulary,
    pub state: TrainState,
    teacher: Option<Seq2Seq>,
    train: Vec<Example>,
    dev: Vec<Example>,
    dev_gold: Vec<(AmrGraph, usize)>,
    beta: BetaSchedule,
    total_steps: u64,
    best: Option<ParamStore>,
}

impl Trainer {
    /// Sets up a run on `records` (the last `dev_fraction` becomes the dev
    /// split). Distillation needs a leakage-model teacher; other regimes
    /// reject one.
    pub fn new(regime: Regime, records: &[CorpusRecord], config: TrainConfig, teacher: Option<&Checkpoint>) -> Result<Self> {
        config.check()?;
        let mut settings = config.settings(regime);
        if let Some(tc) = teacher.and_then(|t| t.meta.train.as_ref()) {
            settings.wag = tc.settings(Regime::Glm).wag;
        }
        if records.len() < 2 {
            return Err(Error::Config("training needs at least two records".into()));
        }
        let (train_recs, dev_recs) = split_dev(records, config.dev_fraction);
        // The distillation teacher reads WAGs even though the student never does.
        let needs_wag = regime != Regime::Baseline;
        if regime != Regime::Baseline {
            if let Some(r) = records.iter().find(|r| r.alignment.entries.is_empty()) {
                return Err(Error::Config(format!(
                    "regime {} needs aligned records; {} has no alignment",
                    regime.name(),
                    r.id
                )));
            }
        }
        let (vocab, mut model, teacher_model) = match (regime, teacher) {
            (Regime::Kd, None) => return Err(Error::Config("kd needs a teacher checkpoint".into())),
            (Regime::Kd, Some(t)) => {
                if t.meta.regime != Regime::Glm {
                    return Err(Error::Config(format!(
                        "kd teacher must be a glm checkpoint, got {}",
                        t.meta.regime.name()
                    )));
                }
                if !settings.freeze_decoder {
                    return Err(Error::Config("kd requires a frozen decoder (kd.decoder = \"freeze\")".into()));
                }
                let mut student = Seq2Seq::new(t.model.config.clone(), config.seed)?;
                for (_, src) in t.model.store.iter().filter(|(_, p)| !p.name.starts_with("adapter.")) {
                    let id = student.store.id(&src.name)?;
                    student.store.get_mut(id).value = src.value.clone();
                }
                (t.vocab.clone(), student, Some(t.model.clone()))
            }
            (_, Some(_)) => return Err(Error::Config(format!("regime {} takes no teacher", regime.name()))),
            (_, None) => {
                let vocab = build_vocabulary(records);
                let mut mc = config.model_config();
                mc.vocab_size = vocab.len();
                (vocab, Seq2Seq::new(mc, config.seed)?, None)
            }
        };
        if !regime.uses_adapters() {
            model.store.set_trainable("adapter.", false);
        }
        if regime == Regime::Kd {
            for prefix in KD_FROZEN {
                model.store.set_trainable(prefix, false);
            }
        }
        let variant = needs_wag.then_some(settings.wag);
        let train = train_recs
            .iter()
            .map(|r| Example::from_record(r, &vocab, variant))
            .collect::<Result<Vec<_>>>()?;
        let dev = dev_recs
            .iter()
            .map(|r| Example::from_record(r, &vocab, variant))
            .collect::<Result<Vec<_>>>()?;
        let dev_gold = dev_recs.iter().map(|r| (r.graph.clone(), r.sentence.len())).collect();
        let per_epoch = train.len().div_ceil(settings.batch_size).div_ceil(settings.grad_accum) as u64;
        let total_steps = per_epoch * config.epochs as u64;
        let beta = match settings.beta {
            BetaSetting::Fixed(b) => BetaSchedule {
                start: b,
                end: b,
                total_steps: 0,
            },
            BetaSetting::Schedule { start, end, total_steps: t } => BetaSchedule {
                start,
                end,
                total_steps: t.unwrap_or(total_steps),
            },
        };
        let state = TrainState {
            epoch: 0,
            step: 0,
            adam: Adam::new(0.9, 0.999, 1e-8, settings.weight_decay),
            data_rng: ChaCha8Rng::seed_from_u64(config.seed),
            dropout_rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
            history: Vec::new(),
            best_epoch: None,
            best_dev: None,
        };
        Ok(Self {
            config,
            settings,
            model,
            vocab,
            state,
            teacher: teacher_model,
            train,
            dev,
            dev_gold,
            beta,
            total_steps,
            best: None,
        })
    }

    pub fn regime(&self) -> Regime {
        self.settings.regime
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        self.beta
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.settings.lr_sched {
            LrSchedule::Const => self.settings.lr,
            LrSchedule::Linear => {
                let frac = step.min(self.total_steps) as f64 / self.total_steps.max(1) as f64;
                self.settings.lr * (1.0 - frac)
            }
        }
    }

    /// Forward and backward on one (micro-)batch; gradients accumulate into
    /// the model store.
    fn accumulate(&mut self, idx: &[usize]) -> Result<StepLosses> {
        let examples: Vec<&Example> = idx.iter().map(|&i| &self.train[i]).collect();
        let mut batch = Batch::new(&examples);
        let masker = MaskingAugmenter::new(self.settings.mask_range)?;
        masker.apply(&mut batch.inputs, &mut self.state.data_rng);
        let beta = beta_at(&self.beta, self.state.step);
        let s = &self.settings;
        let rng = &mut self.state.dropout_rng;
        let mut tape = Tape::new();
        let (loss, losses) = match s.regime {
            Regime::Baseline => baseline_objective(&mut tape, &self.model, &batch, true, rng)?,
            Regime::Glm => glm_objective(&mut tape, &self.model, &batch, true, rng)?,
            Regime::Kd => {
                let t = teacher_logits(self.teacher.as_ref().expect("kd teacher"), &batch)?;
                kd_objective(&mut tape, &self.model, &t, &batch, s.alpha, s.kl_temp, true, rng)?
            }
            Regime::Leakdistill => leakdistill_objective(
                &mut tape,
                &self.model,
                &batch,
                s.alpha,
                beta,
                s.kl_temp,
                s.detach_teacher,
                true,
                rng,
            )?,
        };
        tape.backward(loss, &mut self.model.store)?;
        Ok(losses)
    }

    /// One optimizer step over `micro.len()` accumulated micro-batches.
    pub fn step(&mut self, micro: &[Vec<usize>]) -> Result<StepLosses> {
        self.model.store.zero_grad();
        let mut sum = StepLosses::default();
        for idx in micro {
            let l = self.accumulate(idx)?;
            sum.l_nll += l.l_nll;
            sum.l_leak += l.l_leak;
            sum.l_kl += l.l_kl;
            sum.total += l.total;
            sum.alpha = l.alpha;
            sum.beta = l.beta;
        }
        let k = micro.len() as f64;
        if micro.len() > 1 {
            for p in self.model.store.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g /= k);
            }
        }
        let lr = self.lr_at(self.state.step);
        self.state.adam.update(&mut self.model.store, lr);
        self.state.step += 1;
        Ok(StepLosses {
            l_nll: sum.l_nll / k,
            l_leak: sum.l_leak / k,
            l_kl: sum.l_kl / k,
            total: sum.total / k,
            ..sum
        })
    }

    /// Shuffled mini-batches of one epoch, grouped by gradient accumulation.
    fn epoch_plan(&mut self) -> Vec<Vec<Vec<usize>>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.state.data_rng);
        let batches: Vec<Vec<usize>> = order.chunks(self.settings.batch_size).map(<[usize]>::to_vec).collect();
        batches.chunks(self.settings.grad_accum).map(<[Vec<usize>]>::to_vec).collect()
    }

    /// Trains one epoch, scores the dev split and updates the best snapshot.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let plan = self.epoch_plan();
        let mut sums = StepLosses::default();
        let mut last_beta = beta_at(&self.beta, self.state.step);
        for micro in &plan {
            let l = self.step(micro)?;
            sums.l_nll += l.l_nll;
            sums.l_leak += l.l_leak;
            sums.l_kl += l.l_kl;
            last_beta = l.beta;
        }
        let n = plan.len().max(1) as f64;
        let dev_smatch = self.dev_smatch()?;
        self.state.epoch += 1;
        let m = EpochMetrics {
            epoch: self.state.epoch,
            step: self.state.step,
            l_nll: sums.l_nll / n,
            l_leak: sums.l_leak / n,
            l_kl: sums.l_kl / n,
            beta: if self.settings.regime == Regime::Leakdistill { last_beta } else { 0.0 },
            dev_smatch,
        };
        if self.state.best_dev.is_none_or(|b| dev_smatch > b) {
            self.state.best_dev = Some(dev_smatch);
            self.state.best_epoch = Some(self.state.epoch);
            self.best = Some(self.model.store.clone());
        }
        self.state.history.push(m.clone());
        Ok(m)
    }

    /// Corpus SMATCH of greedy decodes on the dev split. The leakage model is
    /// scored with its dev WAGs leaked; every other regime decodes plainly.
    pub fn dev_smatch(&self) -> Result<f64> {
        let mode = if self.settings.regime == Regime::Glm { LeakMode::Leak } else { LeakMode::Off };
        let preds = decode_all(&self.model, &self.vocab, &self.dev, mode, &DecodeOptions::default())?;
        let pairs: Vec<(AmrGraph, AmrGraph, usize)> = preds
            .into_iter()
            .zip(&self.dev_gold)
            .map(|(p, (g, w))| (p, g.clone(), *w))
            .collect();
        let scores = score_pairs(&pairs, self.config.smatch_restarts, self.config.seed);
        Ok(report(&scores, self.config.bucket_size).corpus_f1)
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Checkpoint of the best dev epoch so far (the current weights before
    /// any epoch has finished).
    pub fn best_checkpoint(&self) -> Result<Checkpoint> {
        let mut model = self.model.clone();
        if let Some(b) = &self.best {
            model.load_values(b)?;
        }
        Ok(Checkpoint {
            model,
            vocab: self.vocab.clone(),
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION,
                regime: self.settings.regime,
                model: self.model.config.clone(),
                train: Some(self.config.clone()),
                epoch: self.state.best_epoch,
                dev_smatch: self.state.best_dev,
            },
        })
    }

    /// Writes the resumable state next to the checkpoint: `state.json`,
    /// `current.bin` (live weights) and `best.bin` (best-dev weights).
    pub fn save_state(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("state.json");
        std::fs::write(&p, serde_json::to_string(&self.state)?).map_err(|e| Error::io(&p, e))?;
        save_params(&self.model.store, &dir.join("current.bin"))?;
        if let Some(b) = &self.best {
            save_params(b, &dir.join("best.bin"))?;
        }
        Ok(())
    }

    /// Restores a state written by [`Trainer::save_state`] into a trainer
    /// freshly built with the same regime, records, config and teacher.
    pub fn restore_state(&mut self, dir: &Path) -> Result<()> {
        let p = dir.join("state.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        self.state = serde_json::from_str(&text)?;
        self.model.load_values(&load_params(&dir.join("current.bin"))?)?;
        let best = dir.join("best.bin");
        self.best = if best.exists() {
            let mut snap = self.model.store.clone();
            let loaded = load_params(&best)?;
            for p in snap.iter_mut() {
                p.value = loaded.by_name(&p.name)?.value.clone();
            }
            Some(snap)
        } else {
            None
        };
        Ok(())
    }

    /// Runs the remaining epochs. With `out`, the best checkpoint, the metric
    /// log and the resumable state are rewritten after every epoch.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Checkpoint> {
        while !self.is_finished() {
            self.run_epoch()?;
            if let Some(dir) = out {
                self.best_checkpoint()?.save(dir)?;
                write_metrics(&dir.join("metrics.jsonl"), &self.state.history)?;
                self.save_state(dir)?;
            }
        }
        self.best_checkpoint()
    }
}

pub fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for m in history {
        writeln!(f, "{}", serde_json::to_string(m)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Trains `regime` on `records` from scratch.
pub fn train(
    regime: Regime,
    records: &[CorpusRecord],
    config: TrainConfig,
    teacher: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<Checkpoint> {
    Trainer::new(regime, records, config, teacher)?.run(out)
}

/// Decodes every example and repairs the output into a graph.
pub fn decode_all(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    examples: &[Example],
    mode: LeakMode,
    opts: &DecodeOptions,
) -> Result<Vec<AmrGraph>> {
    examples
        .iter()
        .map(|ex| {
            let h = model.decode_example(ex, mode, opts)?;
            let lin = LinearizedGraph {
                tokens: vocab.decode(&h.tokens),
            };
            Ok(delinearize(&lin).0)
        })
        .collect()
}

/// Result of checking one loss's gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub value: f64,
}

/// Finite-difference check of the four training objectives on a small batch
/// from the default grammar, with the model shape and loss weights of
/// `config`. Frozen sets follow training: adapters are frozen where unused and
/// the distillation student's decoder is frozen.
pub fn grad_check_losses(config: &TrainConfig, opts: &GradCheckOptions) -> Result<Vec<LossCheck>> {
    config.check()?;
    let mut spec = GrammarSpec::default_spec();
    spec.seed = config.seed;
    spec.max_words = spec.max_words.min(12);
    let records = generate(&spec, 3)?;
    let vocab = build_vocabulary(&records);
    let ld = config.settings(Regime::Leakdistill);
    let kd = config.settings(Regime::Kd);
    let examples = records
        .iter()
        .map(|r| Example::from_record(r, &vocab, Some(ld.wag)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let batch = Batch::new(&refs);
    let mut mc = config.model_config();
    mc.vocab_size = vocab.len();
    let seed = config.seed;
    let fresh = || Seq2Seq::new(mc.clone(), seed);

    let mut out = Vec::with_capacity(4);
    let mut m = fresh()?;
    m.store.set_trainable("adapter.", false);
    out.push(check_one("l_nll", &mut m, opts, seed, |t, m, r| baseline_objective(t, m, &batch, true, r))?);

    let mut m = fresh()?;
    out.push(check_one("l_leak", &mut m, opts, seed, |t, m, r| glm_objective(t, m, &batch, true, r))?);

    let teacher = Seq2Seq::new(mc.clone(), seed.wrapping_add(1))?;
    let tl = teacher_logits(&teacher, &batch)?;
    let mut m = fresh()?;
    m.store.set_trainable("adapter.", false);
    for prefix in KD_FROZEN {
        m.store.set_trainable(prefix, false);
    }
    out.push(check_one("l_kd", &mut m, opts, seed, |t, m, r| {
        kd_objective(t, m, &tl, &batch, kd.alpha, kd.kl_temp, true, r)
    })?);

    let beta = match ld.beta {
        BetaSetting::Fixed(b) => b,
        BetaSetting::Schedule { start, .. } => start,
    };
    let mut m = fresh()?;
    out.push(check_one("l_leakdistill", &mut m, opts, seed, |t, m, r| {
        leakdistill_objective(t, m, &batch, ld.alpha, beta, ld.kl_temp, ld.detach_teacher, true, r)
    })?);
    Ok(out)
}

fn check_one<F>(name: &'static str, model: &mut Seq2Seq, opts: &GradCheckOptions, seed: u64, f: F) -> Result<LossCheck>
where
    F: Fn(&mut Tape, &Seq2Seq, &mut ChaCha8Rng) -> Result<(Var, StepLosses)>,
{
    let shell = Seq2Seq {
        config: model.config.clone(),
        store: ParamStore::new(),
        p: model.p.clone(),
    };
    let mut failure = None;
    let report = grad_check(
        &mut model.store,
        |tape, store| {
            let view = Seq2Seq {
                store: store.clone(),
                ..shell.clone()
            };
            // Same dropout masks at every evaluation.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            f(tape, &view, &mut rng).map(|(v, _)| v).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                leak_nn::NnError::Invalid(msg)
            })
        },
        opts,
    );
    let report = match report {
        Ok(r) => r,
        Err(e) => return Err(failure.unwrap_or_else(|| e.into())),
    };
    Ok(LossCheck {
        loss: name,
        max_rel_error: report.max_rel_error,
        checked: report.checked,
        value: report.loss,
    })
}
