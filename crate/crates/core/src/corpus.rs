//! Sentence/graph/alignment records, their JSONL form, and corpus generation.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amr::{AmrEdge, AmrGraph, AmrNode, MAX_VARIABLES};
use crate::error::{Error, Result};
use crate::grammar::{Fragment, Grammar, GrammarSpec};
use crate::vocab::Vocabulary;
use crate::wag::{self, Alignment, Wag, WagVariant};

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub sentence: Vec<String>,
    pub graph: AmrGraph,
    pub alignment: Alignment,
}

impl CorpusRecord {
    /// Graph invariants plus alignment bounds.
    pub fn check(&self) -> Result<()> {
        let v = self.graph.validate();
        if !v.is_empty() {
            return Err(Error::Structural(format!("record {}: {}", self.id, v[0])));
        }
        self.alignment.check(&self.graph, self.sentence.len())
    }

    pub fn wag(&self, variant: WagVariant) -> Result<Wag> {
        wag::build(&self.graph, &self.alignment, self.sentence.len(), variant)
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(line).map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[CorpusRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records)?.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Splits off the last `fraction` of records (at least one) as a dev set.
pub fn split_dev(records: &[CorpusRecord], fraction: f64) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let n_dev = ((records.len() as f64 * fraction).round() as usize).clamp(1, records.len().max(1));
    let cut = records.len().saturating_sub(n_dev);
    (records[..cut].to_vec(), records[cut..].to_vec())
}

/// Vocabulary over every word, concept and relation in `records`.
pub fn build_vocabulary(records: &[CorpusRecord]) -> Vocabulary {
    let relations = records.iter().flat_map(|r| r.graph.edges.iter().map(|e| e.relation.as_str()));
    let symbols = records.iter().flat_map(|r| {
        r.sentence
            .iter()
            .map(String::as_str)
            .chain(r.graph.nodes.iter().map(|n| n.concept.as_str()))
    });
    Vocabulary::build(relations, symbols)
}

fn to_record(id: String, f: Fragment) -> CorpusRecord {
    let ids: Vec<String> = (0..f.concepts.len()).map(|i| format!("n{i:02}")).collect();
    let mut alignment = Alignment::default();
    for (i, t) in f.node_tokens.iter().enumerate() {
        if let Some(t) = t {
            alignment.node(&ids[i], t.clone());
        }
    }
    for (i, e) in f.edges.iter().enumerate() {
        if let Some(t) = &e.3 {
            alignment.edge(i, t.clone());
        }
    }
    CorpusRecord {
        id,
        sentence: f.words,
        graph: AmrGraph {
            nodes: f
                .concepts
                .into_iter()
                .zip(&ids)
                .map(|(concept, id)| AmrNode { id: id.clone(), concept })
                .collect(),
            edges: f
                .edges
                .into_iter()
                .map(|(s, relation, t, _)| AmrEdge {
                    source: ids[s].clone(),
                    relation,
                    target: ids[t].clone(),
                })
                .collect(),
            root: ids[f.root].clone(),
        },
        alignment,
    }
}

/// `n` records sampled from `spec`, deterministic in `spec.seed`.
///
/// Samples are redrawn until they fit the word range, stay within the
/// variable-token budget, validate, and leave at least one element unaligned
/// (so the full and contracted WAGs differ).
pub fn generate(spec: &GrammarSpec, n: usize) -> Result<Vec<CorpusRecord>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    let grammar = Grammar::new(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Config(format!(
                    "no acceptable sample after {MAX_ATTEMPTS} attempts; check word range and templates"
                )));
            }
            let f = grammar.sample(&mut rng)?;
            if f.words.len() < spec.min_words || f.words.len() > spec.max_words || f.concepts.len() > MAX_VARIABLES {
                continue;
            }
            let unaligned = f.node_tokens.iter().any(Option::is_none) || f.edges.iter().any(|e| e.3.is_none());
            if !unaligned {
                continue;
            }
            let rec = to_record(format!("s{i:05}"), f);
            if rec.check().is_err() {
                continue;
            }
            out.push(rec);
            break;
        }
    }
    Ok(out)
}
