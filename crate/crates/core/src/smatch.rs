//! SMATCH: F1 over (instance, relation, attribute) triples under the best
//! injective mapping between predicted and gold variables.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amr::AmrGraph;
use crate::error::{Error, Result};

/// Largest graph, in variables, that [`score_exact`] will enumerate.
pub const EXACT_LIMIT: usize = 6;
pub const DEFAULT_RESTARTS: usize = 10;
/// Role written in place of every relation label for the unlabeled score.
pub const UNLABELED_ROLE: &str = ":rel";
const TOP: &str = "TOP";

/// Triples of one graph; variables are node indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripleSet {
    pub variables: usize,
    pub instances: Vec<(usize, String)>,
    pub relations: Vec<(usize, String, usize)>,
    pub attributes: Vec<(usize, String, String)>,
}

impl TripleSet {
    pub fn len(&self) -> usize {
        self.instances.len() + self.relations.len() + self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every role replaced by one placeholder. Parallel edges stay separate
    /// triples, so no mapping matches fewer triples than under labels.
    fn unlabeled(&self) -> Self {
        let mut relations: Vec<_> = self
            .relations
            .iter()
            .map(|(a, _, b)| (*a, UNLABELED_ROLE.to_string(), *b))
            .collect();
        relations.sort();
        Self {
            relations,
            ..self.clone()
        }
    }
}

/// One instance triple per node, one relation triple per distinct edge, and
/// a `(root, TOP, top)` attribute.
pub fn to_triples(graph: &AmrGraph) -> TripleSet {
    if graph.nodes.is_empty() {
        return TripleSet::default();
    }
    let idx = graph.node_index();
    let instances = graph.nodes.iter().enumerate().map(|(i, n)| (i, n.concept.clone())).collect();
    let mut relations: Vec<(usize, String, usize)> = graph
        .edges
        .iter()
        .filter_map(|e| Some((*idx.get(e.source.as_str())?, e.relation.clone(), *idx.get(e.target.as_str())?)))
        .collect();
    relations.sort();
    relations.dedup();
    let attributes = idx
        .get(graph.root.as_str())
        .map(|&r| vec![(r, TOP.to_string(), "top".to_string())])
        .unwrap_or_default();
    TripleSet {
        variables: graph.nodes.len(),
        instances,
        relations,
        attributes,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmatchScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub pred_total: usize,
    pub gold_total: usize,
    /// Gold variable for each predicted variable.
    pub mapping: Vec<Option<usize>>,
}

/// Precision, recall and F1 from triple counts; zero wherever a denominator is.
pub fn prf(matched: usize, pred_total: usize, gold_total: usize) -> (f64, f64, f64) {
    let p = if pred_total == 0 { 0.0 } else { matched as f64 / pred_total as f64 };
    let r = if gold_total == 0 { 0.0 } else { matched as f64 / gold_total as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

impl SmatchScore {
    fn new(matched: usize, pred_total: usize, gold_total: usize, mapping: Vec<Option<usize>>) -> Self {
        let (precision, recall, f1) = prf(matched, pred_total, gold_total);
        Self {
            precision,
            recall,
            f1,
            matched,
            pred_total,
            gold_total,
            mapping,
        }
    }
}

/// Match counts for candidate mappings, with per-variable incremental updates.
struct Matcher {
    np: usize,
    ng: usize,
    /// Instance and attribute matches for mapping `p → g`, at `p * ng + g`.
    unary: Vec<u32>,
    /// Distinct predicted relations `(p1, role id, p2)` with multiplicity.
    rels: Vec<(usize, usize, usize, u32)>,
    incident: Vec<Vec<usize>>,
    gold_rels: HashMap<(usize, usize, usize), u32>,
}

impl Matcher {
    fn new(pred: &TripleSet, gold: &TripleSet) -> Self {
        let (np, ng) = (pred.variables, gold.variables);
        let mut unary = vec![0u32; np * ng];
        let mut gold_inst: HashMap<&str, Vec<usize>> = HashMap::new();
        for (g, c) in &gold.instances {
            gold_inst.entry(c).or_default().push(*g);
        }
        for (p, c) in &pred.instances {
            for &g in gold_inst.get(c.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
                unary[p * ng + g] += 1;
            }
        }
        let gold_attr: HashSet<(usize, &str, &str)> =
            gold.attributes.iter().map(|(g, r, c)| (*g, r.as_str(), c.as_str())).collect();
        for (p, r, c) in &pred.attributes {
            for g in 0..ng {
                if gold_attr.contains(&(g, r.as_str(), c.as_str())) {
                    unary[p * ng + g] += 1;
                }
            }
        }
        let mut roles: HashMap<&str, usize> = HashMap::new();
        for (_, r, _) in gold.relations.iter().chain(&pred.relations) {
            let n = roles.len();
            roles.entry(r.as_str()).or_insert(n);
        }
        let mut gold_rels: HashMap<(usize, usize, usize), u32> = HashMap::new();
        for (a, r, b) in &gold.relations {
            *gold_rels.entry((*a, roles[r.as_str()], *b)).or_default() += 1;
        }
        let mut counted: BTreeMap<(usize, usize, usize), u32> = BTreeMap::new();
        for (a, r, b) in &pred.relations {
            *counted.entry((*a, roles[r.as_str()], *b)).or_default() += 1;
        }
        let rels: Vec<_> = counted.into_iter().map(|((a, r, b), n)| (a, r, b, n)).collect();
        let mut incident = vec![Vec::new(); np];
        for (i, &(a, _, b, _)) in rels.iter().enumerate() {
            incident[a].push(i);
            if b != a {
                incident[b].push(i);
            }
        }
        Self {
            np,
            ng,
            unary,
            rels,
            incident,
            gold_rels,
        }
    }

    fn rel_hit(&self, i: usize, m: &[Option<usize>]) -> u32 {
        let (a, r, b, n) = self.rels[i];
        match (m[a], m[b]) {
            (Some(x), Some(y)) => self.gold_rels.get(&(x, r, y)).map_or(0, |&g| g.min(n)),
            _ => 0,
        }
    }

    fn unary_hit(&self, p: usize, m: &[Option<usize>]) -> u32 {
        m[p].map_or(0, |g| self.unary[p * self.ng + g])
    }

    fn total(&self, m: &[Option<usize>]) -> u32 {
        let u: u32 = (0..self.np).map(|p| self.unary_hit(p, m)).sum();
        let r: u32 = (0..self.rels.len()).map(|i| self.rel_hit(i, m)).sum();
        u + r
    }

    /// Matches involving predicted variables `a` or `b`, each counted once.
    fn local(&self, a: usize, b: Option<usize>, m: &[Option<usize>]) -> u32 {
        let mut s = self.unary_hit(a, m);
        for &i in &self.incident[a] {
            s += self.rel_hit(i, m);
        }
        if let Some(b) = b {
            s += self.unary_hit(b, m);
            for &i in &self.incident[b] {
                let (x, _, y, _) = self.rels[i];
                if x != a && y != a {
                    s += self.rel_hit(i, m);
                }
            }
        }
        s
    }

    /// Steepest-ascent hill climbing from `m` over reassign and swap moves.
    fn climb(&self, m: &mut [Option<usize>]) -> u32 {
        let mut score = self.total(m);
        loop {
            let mut used = vec![false; self.ng];
            for g in m.iter().flatten() {
                used[*g] = true;
            }
            let mut best: (i64, Option<(usize, Option<usize>, Option<usize>)>) = (0, None);
            for p in 0..self.np {
                let old = m[p];
                let before = self.local(p, None, m) as i64;
                for cand in (0..self.ng).filter(|&g| !used[g]).map(Some).chain([None]) {
                    if cand == old {
                        continue;
                    }
                    m[p] = cand;
                    let gain = self.local(p, None, m) as i64 - before;
                    if gain > best.0 {
                        best = (gain, Some((p, cand, None)));
                    }
                }
                m[p] = old;
                for q in p + 1..self.np {
                    if m[p] == m[q] {
                        continue;
                    }
                    let before = self.local(p, Some(q), m) as i64;
                    m.swap(p, q);
                    let gain = self.local(p, Some(q), m) as i64 - before;
                    m.swap(p, q);
                    if gain > best.0 {
                        best = (gain, Some((p, None, Some(q))));
                    }
                }
            }
            match best.1 {
                None => return score,
                Some((p, cand, None)) => m[p] = cand,
                Some((p, _, Some(q))) => m.swap(p, q),
            }
            score += best.0 as u32;
        }
    }

    fn smart_start(&self, pred: &TripleSet) -> Vec<Option<usize>> {
        let mut used = vec![false; self.ng];
        let mut m = vec![None; self.np];
        for (p, _) in &pred.instances {
            if let Some(g) = (0..self.ng).find(|&g| !used[g] && self.unary[p * self.ng + g] > 0) {
                used[g] = true;
                m[*p] = Some(g);
            }
        }
        m
    }

    fn random_start<R: Rng>(&self, rng: &mut R) -> Vec<Option<usize>> {
        let mut gold: Vec<Option<usize>> = (0..self.ng).map(Some).collect();
        gold.extend(std::iter::repeat(None).take(self.np));
        gold.shuffle(rng);
        gold.truncate(self.np);
        gold
    }
}

/// Best mapping by exhaustive search over every injective partial mapping.
pub fn score_exact(pred: &AmrGraph, gold: &AmrGraph) -> Result<SmatchScore> {
    exact_triples(&to_triples(pred), &to_triples(gold))
}

fn exact_triples(pt: &TripleSet, gt: &TripleSet) -> Result<SmatchScore> {
    if pt.variables > EXACT_LIMIT || gt.variables > EXACT_LIMIT {
        return Err(Error::Input(format!(
            "exact search is limited to {EXACT_LIMIT} variables (got {} and {})",
            pt.variables, gt.variables
        )));
    }
    let m = Matcher::new(pt, gt);
    let mut cur = vec![None; m.np];
    let mut used = vec![false; m.ng];
    let mut best = (0u32, cur.clone());
    fn rec(mt: &Matcher, p: usize, cur: &mut Vec<Option<usize>>, used: &mut [bool], best: &mut (u32, Vec<Option<usize>>)) {
        if p == mt.np {
            let s = mt.total(cur);
            if s > best.0 {
                *best = (s, cur.clone());
            }
            return;
        }
        cur[p] = None;
        rec(mt, p + 1, cur, used, best);
        for g in 0..mt.ng {
            if !used[g] {
                used[g] = true;
                cur[p] = Some(g);
                rec(mt, p + 1, cur, used, best);
                used[g] = false;
            }
        }
        cur[p] = None;
    }
    rec(&m, 0, &mut cur, &mut used, &mut best);
    Ok(SmatchScore::new(best.0 as usize, pt.len(), gt.len(), best.1))
}

/// Hill-climbing SMATCH: one start that pairs equal concepts, then
/// `restarts − 1` random starts; the best result wins.
pub fn score<R: Rng>(pred: &AmrGraph, gold: &AmrGraph, restarts: usize, rng: &mut R) -> SmatchScore {
    climb_triples(&to_triples(pred), &to_triples(gold), restarts, None, rng)
}

/// Hill climbing from the concept-pairing start, then from `extra` when
/// given, then from random starts.
fn climb_triples<R: Rng>(
    pt: &TripleSet,
    gt: &TripleSet,
    restarts: usize,
    extra: Option<&[Option<usize>]>,
    rng: &mut R,
) -> SmatchScore {
    let m = Matcher::new(pt, gt);
    let mut best_map = m.smart_start(pt);
    let mut best = m.climb(&mut best_map);
    if let Some(start) = extra.filter(|s| s.len() == m.np) {
        let mut cand = start.to_vec();
        let s = m.climb(&mut cand);
        if s > best {
            best = s;
            best_map = cand;
        }
    }
    for _ in 1..restarts.max(1) {
        if best as usize == pt.len().min(gt.len()) {
            break;
        }
        let mut cand = m.random_start(rng);
        let s = m.climb(&mut cand);
        if s > best {
            best = s;
            best_map = cand;
        }
    }
    SmatchScore::new(best as usize, pt.len(), gt.len(), best_map)
}

/// SMATCH with every relation label replaced by one placeholder role. The
/// labeled optimum is among the starts, so the result never falls below the
/// labeled score.
pub fn score_unlabeled<R: Rng>(pred: &AmrGraph, gold: &AmrGraph, restarts: usize, rng: &mut R) -> SmatchScore {
    let labeled = score(pred, gold, restarts, rng);
    unlabeled_from(pred, gold, &labeled, restarts, rng)
}

fn unlabeled_from<R: Rng>(
    pred: &AmrGraph,
    gold: &AmrGraph,
    labeled: &SmatchScore,
    restarts: usize,
    rng: &mut R,
) -> SmatchScore {
    let (pt, gt) = (to_triples(pred).unlabeled(), to_triples(gold).unlabeled());
    climb_triples(&pt, &gt, restarts, Some(&labeled.mapping), rng)
}

pub fn score_unlabeled_exact(pred: &AmrGraph, gold: &AmrGraph) -> Result<SmatchScore> {
    exact_triples(&to_triples(pred).unlabeled(), &to_triples(gold).unlabeled())
}

/// A scored prediction with the length of its source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub words: usize,
    pub labeled: SmatchScore,
    pub unlabeled: SmatchScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub max_words: usize,
    pub f1: f64,
    pub n: usize,
    #[serde(skip)]
    pub matched: usize,
    #[serde(skip)]
    pub pred_total: usize,
    #[serde(skip)]
    pub gold_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmatchReport {
    pub corpus_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub unlabeled_f1: f64,
    pub buckets: Vec<Bucket>,
}

/// Scores each `(pred, gold, word count)` triple. Pair `i` uses its own
/// generator seeded from `seed` and `i`, so results do not depend on order
/// of evaluation.
pub fn score_pairs(pairs: &[(AmrGraph, AmrGraph, usize)], restarts: usize, seed: u64) -> Vec<PairScore> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (p, g, w))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let labeled = score(p, g, restarts, &mut rng);
            let unlabeled = unlabeled_from(p, g, &labeled, restarts, &mut rng);
            PairScore {
                words: *w,
                labeled,
                unlabeled,
            }
        })
        .collect()
}

/// Micro-averaged score from summed triple counts.
pub fn corpus_score(scores: &[&SmatchScore]) -> (f64, f64, f64) {
    let m = scores.iter().map(|s| s.matched).sum();
    let p = scores.iter().map(|s| s.pred_total).sum();
    let g = scores.iter().map(|s| s.gold_total).sum();
    prf(m, p, g)
}

/// Sorts pairs by sentence length (stable) and scores consecutive groups of
/// `bucket_size`.
pub fn bucket_report(scores: &[PairScore], bucket_size: usize) -> Vec<Bucket> {
    let mut order: Vec<&PairScore> = scores.iter().collect();
    order.sort_by_key(|s| s.words);
    order
        .chunks(bucket_size.max(1))
        .map(|chunk| {
            let labeled: Vec<&SmatchScore> = chunk.iter().map(|s| &s.labeled).collect();
            let (_, _, f1) = corpus_score(&labeled);
            Bucket {
                max_words: chunk.last().map_or(0, |s| s.words),
                f1,
                n: chunk.len(),
                matched: labeled.iter().map(|s| s.matched).sum(),
                pred_total: labeled.iter().map(|s| s.pred_total).sum(),
                gold_total: labeled.iter().map(|s| s.gold_total).sum(),
            }
        })
        .collect()
}

pub fn report(scores: &[PairScore], bucket_size: usize) -> SmatchReport {
    let labeled: Vec<&SmatchScore> = scores.iter().map(|s| &s.labeled).collect();
    let unlabeled: Vec<&SmatchScore> = scores.iter().map(|s| &s.unlabeled).collect();
    let (precision, recall, corpus_f1) = corpus_score(&labeled);
    let (_, _, unlabeled_f1) = corpus_score(&unlabeled);
    SmatchReport {
        corpus_f1,
        precision,
        recall,
        unlabeled_f1,
        buckets: bucket_report(scores, bucket_size),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amr::{AmrEdge, AmrNode};

    fn g(nodes: &[&str], edges: &[(usize, &str, usize)]) -> AmrGraph {
        AmrGraph {
            nodes: nodes
                .iter()
                .enumerate()
                .map(|(i, c)| AmrNode {
                    id: format!("v{i}"),
                    concept: c.to_string(),
                })
                .collect(),
            edges: edges
                .iter()
                .map(|(s, r, t)| AmrEdge {
                    source: format!("v{s}"),
                    relation: r.to_string(),
                    target: format!("v{t}"),
                })
                .collect(),
            root: "v0".into(),
        }
    }

    #[test]
    fn triple_counts() {
        let one = to_triples(&g(&["country"], &[]));
        assert_eq!((one.instances.len(), one.relations.len(), one.attributes.len()), (1, 0, 1));
        let two = to_triples(&g(&["a", "b"], &[(0, ":ARG0", 1)]));
        assert_eq!(two.len(), 4);
    }

    #[test]
    fn missing_edge_in_three_node_gold() {
        // gold: 3 instances + 2 relations + TOP = 6; pred lacks one relation
        let gold = g(&["want-01", "boy", "go-01"], &[(0, ":ARG0", 1), (0, ":ARG1", 2)]);
        let pred = g(&["want-01", "boy", "go-01"], &[(0, ":ARG0", 1)]);
        let s = score_exact(&pred, &gold).unwrap();
        assert_eq!(s.matched, 5);
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn identical_and_disjoint_extremes() {
        let a = g(&["a", "b", "c"], &[(0, ":x", 1), (1, ":y", 2)]);
        assert_eq!(score_exact(&a, &a).unwrap().f1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(score(&a, &a, 10, &mut rng).f1, 1.0);
        let b = g(&["p", "q", "r"], &[(0, ":z", 1), (1, ":w", 2)]);
        // only TOP can still match
        let s = score_exact(&b, &a).unwrap();
        assert_eq!(s.matched, 1);
        let c = g(&["p"], &[]);
        let mut c2 = c.clone();
        c2.root = "nope".into();
        assert_eq!(score_exact(&c2, &a).unwrap().f1, 0.0);
    }

    #[test]
    fn exact_refuses_large_graphs() {
        let big = g(&["a"; 7], &[(0, ":x", 1), (1, ":x", 2), (2, ":x", 3), (3, ":x", 4), (4, ":x", 5), (5, ":x", 6)]);
        assert!(matches!(score_exact(&big, &big), Err(Error::Input(_))));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gold = g(&["a"], &[]);
        let s = score(&AmrGraph::empty(), &gold, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((s.matched, s.f1), (0, 0.0));
    }

    #[test]
    fn unlabeled_ignores_role_names() {
        let a = g(&["a", "b"], &[(0, ":ARG0", 1)]);
        let b = g(&["a", "b"], &[(0, ":ARG1", 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(score(&a, &b, 10, &mut rng).f1 < 1.0);
        assert_eq!(score_unlabeled(&a, &b, 10, &mut rng).f1, 1.0);
    }

    #[test]
    fn one_bucket_when_corpus_is_small() {
        let a = g(&["a", "b"], &[(0, ":ARG0", 1)]);
        let pairs = vec![(a.clone(), a.clone(), 4), (a.clone(), a, 2)];
        let r = report(&score_pairs(&pairs, 10, 0), 200);
        assert_eq!(r.buckets.len(), 1);
        assert_eq!(r.buckets[0].max_words, 4);
        assert_eq!(r.corpus_f1, 1.0);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["buckets"][0]["n"], 2);
        assert!(json["buckets"][0].get("matched").is_none());
    }
}
