use leak_nn::{
    grad_check, kernels, Adam, AttnSegment, AttnSpec, GradCheckOptions, ParamStore, SparseRows, Tape, Tensor,
    LAYER_NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        coords_per_param: 40,
        ..Default::default()
    }
}

#[test]
fn sum_of_squares_is_exact() {
    let mut store = ParamStore::new();
    let w = store.add("w", random(3, 4, 1));
    let report = grad_check(
        &mut store,
        |t, s| {
            // Σ x² as the trace of x·xᵀ, read off the diagonal with nll on −x·xᵀ
            let x = t.param(s, w)?;
            let xx = t.matmul_bt(x, x)?;
            let neg = t.scale(xx, -1.0)?;
            t.nll(neg, &[0, 1, 2], &[true, true, true])
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert!((report.loss - store.get(w).value.data().iter().map(|v| v * v).sum::<f64>()).abs() < 1e-12);
}

#[test]
fn dense_stack_passes_grad_check() {
    let mut store = ParamStore::new();
    let x = store.add("x", random(5, 6, 2));
    let w = store.add("w", random(6, 6, 3));
    let b = store.add("b", random(1, 6, 4));
    let g = store.add("g", random(1, 6, 5));
    let be = store.add("beta", random(1, 6, 6));
    let report = grad_check(
        &mut store,
        |t, s| {
            let xv = t.param(s, x)?;
            let (wv, bv) = (t.param(s, w)?, t.param(s, b)?);
            let h = t.linear(xv, wv, Some(bv))?;
            let h = t.gelu(h)?;
            let gam = t.param(s, g)?;
            let bet = t.param(s, be)?;
            let h = t.layer_norm(h, gam, bet, LAYER_NORM_EPS)?;
            let h = t.add(h, xv)?;
            let sm = t.softmax(h)?;
            let h = t.scale(sm, 3.0)?;
            t.cross_entropy(h, &[0, 1, 2, 3, 4], &[true, false, true, true, true])
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn attn_check(causal: bool, dropout: f64) {
    let mut store = ParamStore::new();
    let q = store.add("q", random(7, 8, 10));
    let k = store.add("k", random(7, 8, 11));
    let v = store.add("v", random(7, 8, 12));
    let spec = AttnSpec {
        segments: vec![
            AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 },
            AttnSegment { q_start: 3, q_len: 4, k_start: 3, k_len: 4 },
        ],
        heads: 2,
        causal,
        dropout,
    };
    let report = grad_check(
        &mut store,
        |t, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (qv, kv, vv) = (t.param(s, q)?, t.param(s, k)?, t.param(s, v)?);
            let o = t.attention(qv, kv, vv, spec.clone(), &mut rng)?;
            t.cross_entropy(o, &[0, 1, 2, 3, 4, 5, 6], &[true; 7])
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn attention_passes_grad_check() {
    attn_check(false, 0.0);
    attn_check(true, 0.0);
    attn_check(true, 0.2);
}

#[test]
fn causal_attention_gives_future_positions_zero_weight() {
    let mut t = Tape::new();
    let q = t.constant(random(4, 4, 20)).unwrap();
    let k = t.constant(random(4, 4, 21)).unwrap();
    let mut vdata = random(4, 4, 22);
    let spec = AttnSpec {
        segments: vec![AttnSegment { q_start: 0, q_len: 4, k_start: 0, k_len: 4 }],
        heads: 1,
        causal: true,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = t.constant(vdata.clone()).unwrap();
    let before = t.attention(q, k, v, spec.clone(), &mut rng).unwrap();
    let before = t.value(before).clone();
    // perturb the last value row: only the last query may change
    vdata.row_mut(3).iter_mut().for_each(|x| *x += 10.0);
    let v2 = t.constant(vdata).unwrap();
    let after = t.attention(q, k, v2, spec, &mut rng).unwrap();
    let after = t.value(after);
    for i in 0..3 {
        assert_eq!(before.row(i), after.row(i));
    }
    assert_ne!(before.row(3), after.row(3));
}

#[test]
fn embedding_gather_scatter_mix_pass_grad_check() {
    let mut store = ParamStore::new();
    let table = store.add("table", random(6, 4, 30));
    let w = store.add("w", random(4, 4, 31));
    let mix = SparseRows {
        rows: vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(2, 0.3), (0, 0.7)]],
    };
    let report = grad_check(
        &mut store,
        |t, s| {
            let tab = t.param(s, table)?;
            let e = t.embedding(tab, &[1, 3, 3, 0])?;
            let m = t.embedding_mean(tab, &[vec![2, 5], vec![4]])?;
            let g = t.concat_rows(e, m)?;
            let nodes = t.gather_rows(g, &[0, 4, 5])?;
            let mixed = t.sparse_mix(nodes, &mix)?;
            let wv = t.param(s, w)?;
            let mixed = t.matmul(mixed, wv)?;
            let mixed = t.gelu(mixed)?;
            let g2 = t.scatter_add_rows(g, &[0, 4, 5], mixed)?;
            let h = t.slice_rows(g2, 1, 5)?;
            let lp = t.log_softmax(h)?;
            let a = t.nll(lp, &[0, 1, 2, 3, 0], &[true; 5])?;
            let sum = t.sum(h)?;
            t.weighted_sum(&[(a, 1.0), (sum, 0.25)])
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn kl_passes_grad_check_in_both_arguments() {
    let mut store = ParamStore::new();
    let a = store.add("a", random(3, 5, 40));
    let b = store.add("b", random(3, 5, 41));
    let report = grad_check(
        &mut store,
        |t, s| {
            let la = t.param(s, a)?;
            let la = t.scale(la, 2.0)?;
            let lp = t.log_softmax(la)?;
            let lb = t.param(s, b)?;
            let lq = t.log_softmax(lb)?;
            t.kl_div(lp, lq, &[true, true, false])
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn frozen_parameter_gets_no_update_despite_nonzero_slope() {
    let mut store = ParamStore::new();
    let w = store.add("w", random(2, 2, 50));
    store.set_trainable("w", false);
    let before = store.get(w).value.clone();
    let mut t = Tape::new();
    let x = t.param(&store, w).unwrap();
    let loss = t.sum(x).unwrap();
    // the objective clearly depends on w: slope 1 in every coordinate
    assert_eq!(t.value(loss).item(), before.data().iter().sum::<f64>());
    t.backward(loss, &mut store).unwrap();
    assert!(store.get(w).grad.data().iter().all(|g| *g == 0.0));
    Adam::default().update(&mut store, 0.1);
    assert_eq!(store.get(w).value, before);
}

#[test]
fn cross_entropy_vanishes_with_growing_margin() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 3, vec![margin, 0.0, 0.0]).unwrap()).unwrap();
        let ce = t.cross_entropy(l, &[0], &[true]).unwrap();
        let v = t.value(ce).item();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn dropout_zero_is_identity_and_seeded_dropout_reproduces() {
    let mut t = Tape::new();
    let x = t.constant(random(4, 5, 60)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
    let a = t.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = t.dropout(x, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(t.value(a), t.value(b));
    assert_ne!(t.value(a), t.value(x));
}

#[test]
fn non_finite_values_are_trapped() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 1, vec![1e308]).unwrap()).unwrap();
    assert!(matches!(t.scale(x, 10.0), Err(leak_nn::NnError::NonFinite { .. })));
}

#[test]
fn shape_mismatch_is_a_structural_error() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(leak_nn::NnError::ShapeMismatch { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 4, vals).unwrap()).unwrap();
        let y = t.softmax(x).unwrap();
        for i in 0..3 {
            let s: f64 = t.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(vals in proptest::collection::vec(-5.0f64..5.0, 16), spread in 0.5f64..4.0) {
        let vals: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v + spread * (i % 4) as f64).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 8, vals).unwrap()).unwrap();
        let g = t.constant(Tensor::full(&[1, 8], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(&[1, 8])).unwrap();
        let y = t.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        for i in 0..2 {
            let r = t.value(y).row(i);
            let mean = r.iter().sum::<f64>() / 8.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn value_level_softmax_matches_tape() {
    let x = random(3, 5, 70);
    let mut t = Tape::new();
    let v = t.constant(x.clone()).unwrap();
    let y = t.softmax(v).unwrap();
    assert_eq!(t.value(y), &kernels::softmax(&x, 1).unwrap());
}
