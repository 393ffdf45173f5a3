use leakdistill::amr::{AmrEdge, AmrGraph, AmrNode};
use leakdistill::smatch::{score, score_exact, score_pairs, score_unlabeled, score_unlabeled_exact};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONCEPTS: [&str; 4] = ["want-01", "boy", "go-02", "girl"];
const ROLES: [&str; 3] = [":ARG0", ":ARG1", ":mod"];

/// A random rooted graph with `n` nodes: a random tree plus a few extra edges,
/// some of them parallel to tree edges.
fn random_graph<R: Rng>(n: usize, rng: &mut R) -> AmrGraph {
    let nodes = (0..n)
        .map(|i| AmrNode {
            id: format!("v{i}"),
            concept: CONCEPTS[rng.gen_range(0..CONCEPTS.len())].to_string(),
        })
        .collect();
    let mut edges = Vec::new();
    let mut add = |s: usize, t: usize, rng: &mut R| {
        edges.push(AmrEdge {
            source: format!("v{s}"),
            relation: ROLES[rng.gen_range(0..ROLES.len())].to_string(),
            target: format!("v{t}"),
        })
    };
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        add(parent, i, rng);
    }
    for _ in 0..rng.gen_range(0..3) {
        let s = rng.gen_range(0..n);
        let t = rng.gen_range(0..n);
        if s < t {
            add(s, t, rng);
        }
    }
    AmrGraph {
        nodes,
        edges,
        root: "v0".into(),
    }
}

fn random_pair(seed: u64) -> (AmrGraph, AmrGraph) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_graph(rng.gen_range(1..=5), &mut rng);
    let b = random_graph(rng.gen_range(1..=5), &mut rng);
    (a, b)
}

#[test]
fn hill_climbing_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..100 {
        let (p, g) = random_pair(seed);
        let exact = score_exact(&p, &g).unwrap();
        let climbed = score(&p, &g, 10, &mut rng);
        assert_eq!(climbed.matched, exact.matched, "pair {seed}");
        assert_eq!(climbed.f1, exact.f1, "pair {seed}");
    }
}

#[test]
fn identical_graphs_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..100 {
        let (g, _) = random_pair(seed);
        assert_eq!(score(&g, &g, 10, &mut rng).f1, 1.0);
        assert_eq!(score_exact(&g, &g).unwrap().f1, 1.0);
    }
}

#[test]
fn unlabeled_never_below_labeled() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..100 {
        let (p, g) = random_pair(seed);
        let l = score(&p, &g, 10, &mut rng);
        let u = score_unlabeled(&p, &g, 10, &mut rng);
        assert!(u.f1 >= l.f1, "pair {seed}: {} < {}", u.f1, l.f1);
        let le = score_exact(&p, &g).unwrap();
        let ue = score_unlabeled_exact(&p, &g).unwrap();
        assert!(ue.f1 >= le.f1, "pair {seed}");
    }
}

#[test]
fn corpus_scoring_is_order_independent_per_pair() {
    let pairs: Vec<_> = (0..20)
        .map(|s| {
            let (p, g) = random_pair(s);
            (p, g, 5)
        })
        .collect();
    let a = score_pairs(&pairs, 10, 9);
    let b = score_pairs(&pairs[10..], 10, 19);
    assert_eq!(a[10..], b[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_bounded_and_symmetric_in_f1(seed in any::<u64>()) {
        let (p, g) = random_pair(seed);
        let pg = score_exact(&p, &g).unwrap();
        let gp = score_exact(&g, &p).unwrap();
        prop_assert!((0.0..=1.0).contains(&pg.f1));
        prop_assert_eq!(pg.matched, gp.matched);
        prop_assert!((pg.f1 - gp.f1).abs() < 1e-12);
        prop_assert!((pg.precision - gp.recall).abs() < 1e-12);
    }

    #[test]
    fn hill_climbing_never_exceeds_the_optimum(seed in any::<u64>(), restarts in 1usize..6) {
        let (p, g) = random_pair(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let climbed = score(&p, &g, restarts, &mut rng);
        prop_assert!(climbed.matched <= score_exact(&p, &g).unwrap().matched);
    }
}
