use leakdistill::config::{BetaSetting, DecoderMode, Regime, TrainConfig};
use leakdistill::corpus::{generate, CorpusRecord};
use leakdistill::grammar::GrammarSpec;
use leakdistill::model::{kl_loss, Batch, Checkpoint, Example};
use leakdistill::nn::{ParamStore, Tape, Tensor};
use leakdistill::training::{
    baseline_objective, beta_at, glm_objective, leakdistill_objective, BetaSchedule, MaskingAugmenter, Trainer,
};
use leakdistill::wag::WagVariant;
use leakdistill::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(n: usize) -> Vec<CorpusRecord> {
    let mut spec = GrammarSpec::default_spec();
    spec.max_words = 12;
    generate(&spec, n).unwrap()
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.epochs = 2;
    c.smatch_restarts = 2;
    c.model.hidden = 16;
    c.model.heads = 2;
    c.model.encoder_layers = 2;
    c.model.decoder_layers = 1;
    c.model.ffn = 32;
    c.inherited.batch_size = 8;
    c.inherited.lr = 1e-3;
    c
}

fn values(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

fn grads(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, p)| p.grad.data().to_vec()).collect()
}

#[test]
fn beta_schedule_endpoints_are_exact() {
    let s = BetaSchedule::PUBLISHED;
    assert_eq!(beta_at(&s, 0), 90.0);
    assert_eq!(beta_at(&s, 10_500), 50.0);
    assert_eq!(beta_at(&s, 21_000), 10.0);
    assert_eq!(beta_at(&s, 21_001), 10.0);
    assert_eq!(beta_at(&s, 1_000_000), 10.0);
    let mut prev = f64::INFINITY;
    for step in (0..=21_000).step_by(700) {
        let b = beta_at(&s, step);
        assert!(b <= prev);
        prev = b;
    }
}

#[test]
fn trainer_schedule_spans_the_run_unless_pinned() {
    let recs = records(40);
    let t = Trainer::new(Regime::Leakdistill, &recs, small_config(), None).unwrap();
    let s = t.beta_schedule();
    assert_eq!(s.total_steps, t.total_steps());
    assert_eq!((s.start, s.end), (90.0, 10.0));
    let mut c = small_config();
    c.leakdistill.beta = Some(BetaSetting::Schedule {
        start: 90.0,
        end: 10.0,
        total_steps: Some(21_000),
    });
    let t = Trainer::new(Regime::Leakdistill, &recs, c, None).unwrap();
    assert_eq!(t.beta_schedule(), BetaSchedule::PUBLISHED);
}

fn word_batches(n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(5..500)).collect()).collect()
}

#[test]
fn fixed_rate_masks_that_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inputs = word_batches(200, 100, &mut rng);
    let m = MaskingAugmenter::new([0.15, 0.15]).unwrap();
    assert_eq!(m.apply(&mut inputs, &mut rng), 0.15);
    let masked = inputs.iter().flatten().filter(|&&t| t == 4).count() as f64;
    let frac = masked / 20_000.0;
    assert!((frac - 0.15).abs() < 0.01, "masked {frac}");
}

#[test]
fn zero_range_is_the_identity_and_specials_survive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let original = word_batches(20, 30, &mut rng);
    let mut inputs = original.clone();
    MaskingAugmenter::new([0.0, 0.0]).unwrap().apply(&mut inputs, &mut rng);
    assert_eq!(inputs, original);

    let specials: Vec<Vec<usize>> = (0..50).map(|_| vec![1, 0, 3, 2, 4, 1, 2]).collect();
    let mut inputs = specials.clone();
    MaskingAugmenter::new([1.0, 1.0]).unwrap().apply(&mut inputs, &mut rng);
    assert_eq!(inputs, specials);

    let mut mixed = vec![vec![1, 10, 11, 12, 2]; 100];
    MaskingAugmenter::new([1.0, 1.0]).unwrap().apply(&mut mixed, &mut rng);
    assert!(mixed.iter().all(|s| s == &[1, 4, 4, 4, 2]));
}

#[test]
fn drawn_rate_is_uniform_over_the_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = MaskingAugmenter::new([0.0, 0.15]).unwrap();
    let draws: Vec<f64> = (0..4000).map(|_| m.apply(&mut [vec![7]], &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!(draws.iter().all(|p| (0.0..=0.15).contains(p)));
    assert!((mean - 0.075).abs() < 0.003, "mean {mean}");
}

#[test]
fn bad_mask_ranges_are_config_errors() {
    for r in [[0.2, 0.1], [-0.1, 0.1], [0.0, 1.5]] {
        assert!(matches!(MaskingAugmenter::new(r), Err(Error::Config(_))));
    }
}

fn kl_value(student: &[f64], teacher: &[f64], tau: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&[student.to_vec()]).unwrap()).unwrap();
    let t = tape.constant(Tensor::from_rows(&[teacher.to_vec()]).unwrap()).unwrap();
    let l = kl_loss(&mut tape, s, t, tau, 1).unwrap();
    tape.value(l).item()
}

#[test]
fn kl_is_non_negative_and_zero_only_on_equal_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..8);
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tau = rng.gen_range(0.5..3.0);
        let v = kl_value(&a, &b, tau);
        assert!(v > 0.0, "kl {v} for {a:?} {b:?}");
        assert!(kl_value(&a, &a, tau).abs() < 1e-12);
        // Logits shifted by a constant give the same distribution.
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.7).collect();
        assert!(kl_value(&a, &shifted, tau).abs() < 1e-12);
    }
}

#[test]
fn kl_worked_example() {
    let p = [0.5f64.ln(), 0.5f64.ln()];
    let q = [0.9f64.ln(), 0.1f64.ln()];
    assert!((kl_value(&p, &q, 1.0) - 0.5108).abs() < 1e-4);
}

fn leak_batch_setup(regime: Regime) -> (Trainer, Vec<Example>) {
    let recs = records(12);
    let t = Trainer::new(regime, &recs, small_config(), None).unwrap();
    let ex = recs
        .iter()
        .map(|r| Example::from_record(r, &t.vocab, Some(WagVariant::Full)).unwrap())
        .collect();
    (t, ex)
}

#[test]
fn leakdistill_total_is_the_weighted_sum() {
    let (t, ex) = leak_batch_setup(Regime::Leakdistill);
    let refs: Vec<&Example> = ex.iter().collect();
    let batch = Batch::new(&refs);
    for (alpha, beta, detach) in [(20.0, 90.0, false), (20.0, 10.0, true), (1.5, 0.0, false)] {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, l) = leakdistill_objective(&mut tape, &t.model, &batch, alpha, beta, 1.0, detach, true, &mut rng).unwrap();
        let want = l.l_nll + beta * l.l_leak + alpha * l.l_kl;
        assert!((l.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {want}", l.total);
        assert!(l.l_kl > 0.0);
    }
}

#[test]
fn zero_weights_reduce_leakdistill_to_the_baseline_gradient() {
    let (mut t, ex) = leak_batch_setup(Regime::Leakdistill);
    let refs: Vec<&Example> = ex.iter().collect();
    let batch = Batch::new(&refs);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    t.model.store.zero_grad();
    let mut tape = Tape::new();
    let (l, base) = baseline_objective(&mut tape, &t.model, &batch, false, &mut rng).unwrap();
    tape.backward(l, &mut t.model.store).unwrap();
    let g_base = grads(&t.model.store);

    t.model.store.zero_grad();
    let mut tape = Tape::new();
    let (l, ld) = leakdistill_objective(&mut tape, &t.model, &batch, 0.0, 0.0, 1.0, false, false, &mut rng).unwrap();
    tape.backward(l, &mut t.model.store).unwrap();
    let g_ld = grads(&t.model.store);

    assert_eq!(base.l_nll, ld.l_nll);
    assert_eq!(ld.total, ld.l_nll);
    for (a, b) in g_base.iter().zip(&g_ld) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn leaked_loss_equals_plain_loss_when_adapters_are_silent() {
    let (mut t, ex) = leak_batch_setup(Regime::Glm);
    let refs: Vec<&Example> = ex.iter().collect();
    let batch = Batch::new(&refs);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let (_, leak) = glm_objective(&mut tape, &t.model, &batch, false, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (_, plain) = baseline_objective(&mut tape, &t.model, &batch, false, &mut rng).unwrap();
    assert!((leak.l_leak - plain.l_nll).abs() > 1e-9);

    for p in t.model.store.iter_mut().filter(|p| p.name.ends_with(".w_a")) {
        p.value.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let (_, leak) = glm_objective(&mut tape, &t.model, &batch, false, &mut rng).unwrap();
    assert!((leak.l_leak - plain.l_nll).abs() <= 1e-12);
}

fn glm_teacher(recs: &[CorpusRecord]) -> Checkpoint {
    let mut c = small_config();
    c.epochs = 1;
    Trainer::new(Regime::Glm, recs, c, None).unwrap().run(None).unwrap()
}

#[test]
fn kd_leaves_the_decoder_and_teacher_untouched() {
    let recs = records(40);
    let teacher = glm_teacher(&recs);
    let teacher_before = values(&teacher.model.store, "");
    let mut kd = Trainer::new(Regime::Kd, &recs, small_config(), Some(&teacher)).unwrap();
    let dec_before = values(&kd.model.store, "dec.");
    assert_eq!(dec_before, values(&teacher.model.store, "dec."));
    let enc_before = values(&kd.model.store, "enc.");
    for s in 0..100 {
        let start = (s * 8) % 32;
        kd.step(&[(start..start + 4).collect()]).unwrap();
    }
    assert_eq!(values(&kd.model.store, "dec."), dec_before);
    assert_eq!(values(&kd.model.store, "embed.tokens"), values(&teacher.model.store, "embed.tokens"));
    assert_ne!(values(&kd.model.store, "enc."), enc_before);
    assert_eq!(values(&teacher.model.store, ""), teacher_before);
}

#[test]
fn runs_are_deterministic() {
    let recs = records(40);
    let a = Trainer::new(Regime::Leakdistill, &recs, small_config(), None).unwrap();
    let b = Trainer::new(Regime::Leakdistill, &recs, small_config(), None).unwrap();
    let (mut a, mut b) = (a, b);
    a.run(None).unwrap();
    b.run(None).unwrap();
    assert_eq!(a.state.history, b.state.history);
    assert_eq!(values(&a.model.store, ""), values(&b.model.store, ""));
    let ja = serde_json::to_string(&a.state.history).unwrap();
    let jb = serde_json::to_string(&b.state.history).unwrap();
    assert_eq!(ja, jb);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let recs = records(40);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(Regime::Glm, &recs, small_config(), None).unwrap();
    straight.run(None).unwrap();

    let mut first = Trainer::new(Regime::Glm, &recs, small_config(), None).unwrap();
    first.run_epoch().unwrap();
    first.save_state(dir.path()).unwrap();
    drop(first);
    let mut second = Trainer::new(Regime::Glm, &recs, small_config(), None).unwrap();
    second.restore_state(dir.path()).unwrap();
    second.run(None).unwrap();

    assert_eq!(second.state, straight.state);
    assert_eq!(values(&second.model.store, ""), values(&straight.model.store, ""));
    let (a, b) = (second.best_checkpoint().unwrap(), straight.best_checkpoint().unwrap());
    assert_eq!(values(&a.model.store, ""), values(&b.model.store, ""));
}

#[test]
fn misconfigured_runs_are_rejected() {
    let recs = records(20);
    let cfg = small_config();
    let is_config = |r: Result<Trainer, Error>| matches!(r, Err(Error::Config(_)));
    assert!(is_config(Trainer::new(Regime::Kd, &recs, cfg.clone(), None)));

    let base = {
        let mut c = cfg.clone();
        c.epochs = 0;
        Trainer::new(Regime::Baseline, &recs, c, None).unwrap().run(None).unwrap()
    };
    assert!(is_config(Trainer::new(Regime::Kd, &recs, cfg.clone(), Some(&base))));
    assert!(is_config(Trainer::new(Regime::Baseline, &recs, cfg.clone(), Some(&base))));

    let teacher = {
        let mut c = cfg.clone();
        c.epochs = 0;
        Trainer::new(Regime::Glm, &recs, c, None).unwrap().run(None).unwrap()
    };
    let mut c = cfg.clone();
    c.kd.decoder = Some(DecoderMode::Train);
    assert!(is_config(Trainer::new(Regime::Kd, &recs, c, Some(&teacher))));

    let mut unaligned = recs.clone();
    unaligned[3].alignment.entries.clear();
    assert!(is_config(Trainer::new(Regime::Glm, &unaligned, cfg.clone(), None)));
    assert!(Trainer::new(Regime::Baseline, &unaligned, cfg.clone(), None).is_ok());

    let mut c = cfg.clone();
    c.inherited.optimizer = "sgd".into();
    assert!(is_config(Trainer::new(Regime::Baseline, &recs, c, None)));
    assert!(matches!(
        TrainConfig::from_json(r#"{"seed": 1, "nonsense": true}"#),
        Err(Error::Schema(_) | Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_stays_between_its_endpoints(start in 0.0f64..200.0, end in 0.0f64..200.0, total in 0u64..50_000, step in 0u64..100_000) {
        let s = BetaSchedule { start, end, total_steps: total };
        let b = beta_at(&s, step);
        prop_assert!(b >= start.min(end) - 1e-9 && b <= start.max(end) + 1e-9);
        if step >= total {
            prop_assert_eq!(b, end);
        }
    }

    #[test]
    fn masking_only_ever_writes_the_mask_token(seed in any::<u64>(), lo in 0.0f64..0.5, width in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let original: Vec<Vec<usize>> = (0..4).map(|_| (0..20).map(|_| rng.gen_range(0..50)).collect()).collect();
        let mut inputs = original.clone();
        let p = MaskingAugmenter::new([lo, lo + width]).unwrap().apply(&mut inputs, &mut rng);
        prop_assert!(p >= lo && p <= lo + width);
        for (a, b) in original.iter().flatten().zip(inputs.iter().flatten()) {
            prop_assert!(a == b || (*b == 4 && *a > 4));
        }
    }
}
