//! Model inputs built from corpus records.

use crate::amr::linearize;
use crate::corpus::CorpusRecord;
use crate::error::{Error, Result};
use crate::vocab::{Vocabulary, BOS_ID, EOS_ID};
use crate::wag::{Wag, WagNodeKind, WagVariant};

/// Where a WAG node's state lives in the adapter's concatenated state matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRow {
    /// Sentence token position (0-based, excluding `<s>`).
    Token(usize),
    /// Index into the example's virtual states.
    Virtual(usize),
}

/// A WAG reduced to what the adapters consume.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub nodes: Vec<NodeRow>,
    /// Undirected edges, each pair once with `a < b`.
    pub edges: Vec<(usize, usize)>,
    /// Token-id groups whose mean embedding initializes each virtual node.
    pub virtual_labels: Vec<Vec<usize>>,
}

impl GraphInput {
    pub fn from_wag(wag: &Wag, vocab: &Vocabulary) -> Result<Self> {
        let mut nodes = Vec::with_capacity(wag.nodes.len());
        let mut virtual_labels = Vec::new();
        for kind in &wag.nodes {
            match kind {
                WagNodeKind::Aligned(t) if t.len() == 1 => nodes.push(NodeRow::Token(t[0])),
                WagNodeKind::Aligned(t) => {
                    return Err(Error::Structural(format!("WAG node aligned to {} tokens is unsplit", t.len())))
                }
                WagNodeKind::Virtual(label) => {
                    nodes.push(NodeRow::Virtual(virtual_labels.len()));
                    virtual_labels.push(vocab.tokenize_label(label)?);
                }
            }
        }
        let edges = wag
            .undirected_edges()
            .into_iter()
            .filter(|&(a, b)| a < b)
            .collect();
        Ok(Self {
            nodes,
            edges,
            virtual_labels,
        })
    }

    /// Symmetric-normalized neighborhood weights with self loops:
    /// row `v` lists `(u, 1/sqrt(d_u d_v))` for every `u` in `N(v) ∪ {v}`.
    pub fn mix_weights(&self) -> Result<Vec<Vec<(usize, f64)>>> {
        mix_weights(self.nodes.len(), &self.edges)
    }
}

/// Normalized graph-convolution weights for `n` nodes and undirected `edges`.
pub fn mix_weights(n: usize, edges: &[(usize, usize)]) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut nb: Vec<Vec<usize>> = (0..n).map(|v| vec![v]).collect();
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Structural(format!("edge ({a},{b}) out of range for {n} nodes")));
        }
        if a != b {
            nb[a].push(b);
            nb[b].push(a);
        }
    }
    for l in &mut nb {
        l.sort_unstable();
        l.dedup();
    }
    let deg: Vec<f64> = nb.iter().map(|l| l.len() as f64).collect();
    Ok(nb
        .iter()
        .enumerate()
        .map(|(v, l)| l.iter().map(|&u| (u, 1.0 / (deg[u] * deg[v]).sqrt())).collect())
        .collect())
}

/// One sentence/graph pair as id sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `<s> w_1 .. w_n </s>`.
    pub input: Vec<usize>,
    /// Linearized graph followed by `</s>`; empty for unlabeled inputs.
    pub target: Vec<usize>,
    pub graph: Option<GraphInput>,
}

impl Example {
    pub fn from_sentence(id: impl Into<String>, words: &[String], vocab: &Vocabulary) -> Self {
        let mut input = Vec::with_capacity(words.len() + 2);
        input.push(BOS_ID);
        input.extend(words.iter().map(|w| vocab.id(w)));
        input.push(EOS_ID);
        Self {
            id: id.into(),
            input,
            target: Vec::new(),
            graph: None,
        }
    }

    /// Encodes a record; `variant` attaches its WAG for leak-mode passes.
    pub fn from_record(rec: &CorpusRecord, vocab: &Vocabulary, variant: Option<WagVariant>) -> Result<Self> {
        let mut ex = Self::from_sentence(rec.id.clone(), &rec.sentence, vocab);
        let lin = linearize(&rec.graph)?;
        ex.target = vocab.encode(&lin.tokens);
        ex.target.push(EOS_ID);
        if let Some(v) = variant {
            ex.graph = Some(GraphInput::from_wag(&rec.wag(v)?, vocab)?);
        }
        Ok(ex)
    }

    pub fn words(&self) -> usize {
        self.input.len() - 2
    }

    /// Teacher-forced decoder input: `<s>` followed by the target shifted right.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.target.len());
        d.push(BOS_ID);
        d.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate};
    use crate::grammar::GrammarSpec;

    #[test]
    fn two_connected_nodes_share_weight_one_half() {
        let w = mix_weights(2, &[(0, 1)]).unwrap();
        assert_eq!(w, vec![vec![(0, 0.5), (1, 0.5)], vec![(0, 0.5), (1, 0.5)]]);
        assert_eq!(mix_weights(1, &[]).unwrap(), vec![vec![(0, 1.0)]]);
        assert!(matches!(mix_weights(2, &[(0, 2)]), Err(Error::Structural(_))));
    }

    #[test]
    fn record_encoding_binds_every_wag_node() {
        let recs = generate(&GrammarSpec::default_spec(), 20).unwrap();
        let vocab = build_vocabulary(&recs);
        for r in &recs {
            let ex = Example::from_record(r, &vocab, Some(WagVariant::Full)).unwrap();
            assert_eq!(ex.input.len(), r.sentence.len() + 2);
            assert_eq!(*ex.target.last().unwrap(), EOS_ID);
            assert_eq!(ex.decoder_input().len(), ex.target.len());
            let g = ex.graph.unwrap();
            let wag = r.wag(WagVariant::Full).unwrap();
            assert_eq!(g.nodes.len(), wag.nodes.len());
            assert_eq!(g.virtual_labels.len(), wag.virtual_count());
            for n in &g.nodes {
                if let NodeRow::Token(p) = n {
                    assert!(*p < r.sentence.len());
                }
            }
        }
    }
}
