//! Word-Aligned Graphs: the gold graph re-expressed over sentence token
//! positions, which the structural adapters consume.
//!
//! Construction runs in four steps: relabel graph elements with their aligned
//! token positions, turn every edge into a node, split nodes aligned to
//! several tokens into a parent plus one child per extra token, and
//! optionally contract away the nodes that no token is aligned to.

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::amr::AmrGraph;
use crate::error::{Error, Result};

/// Which graph element an alignment entry points at.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Element {
    Node(String),
    Edge(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    #[serde(flatten)]
    pub element: Element,
    pub tokens: Vec<usize>,
}

/// Gold links from graph elements to sentence token positions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment {
    pub entries: Vec<AlignmentEntry>,
}

impl Alignment {
    pub fn node(&mut self, id: &str, tokens: Vec<usize>) {
        self.entries.push(AlignmentEntry {
            element: Element::Node(id.to_string()),
            tokens,
        });
    }

    pub fn edge(&mut self, index: usize, tokens: Vec<usize>) {
        self.entries.push(AlignmentEntry {
            element: Element::Edge(index),
            tokens,
        });
    }

    /// Checks the entries against `graph` and a sentence of `n_tokens` words:
    /// every element exists and is listed once, every token list is
    /// non-empty, strictly increasing and in bounds, and no token position
    /// is claimed twice.
    pub fn check(&self, graph: &AmrGraph, n_tokens: usize) -> Result<()> {
        let ids: BTreeSet<&str> = graph.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut elements = BTreeSet::new();
        let mut claimed = BTreeSet::new();
        for e in &self.entries {
            match &e.element {
                Element::Node(id) if !ids.contains(id.as_str()) => {
                    return Err(Error::Input(format!("alignment names missing node `{id}`")));
                }
                Element::Edge(i) if *i >= graph.edges.len() => {
                    return Err(Error::Input(format!("alignment names missing edge {i}")));
                }
                _ => {}
            }
            if !elements.insert(&e.element) {
                return Err(Error::Input(format!("{:?} aligned twice", e.element)));
            }
            if e.tokens.is_empty() {
                return Err(Error::Input(format!("{:?} has an empty token list", e.element)));
            }
            if e.tokens.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("{:?} tokens are not strictly increasing", e.element)));
            }
            for &t in &e.tokens {
                if t >= n_tokens {
                    return Err(Error::Input(format!("token {t} out of range for {n_tokens} words")));
                }
                if !claimed.insert(t) {
                    return Err(Error::Input(format!("token {t} aligned to two elements")));
                }
            }
        }
        Ok(())
    }
}

/// Payload of a graph element after relabeling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordPayload {
    Tokens(Vec<usize>),
    Virtual(String),
}

/// The graph with each node and relation carrying either its token positions
/// or, when unaligned, its original label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordGraph {
    pub nodes: Vec<WordPayload>,
    /// `(source, target, payload)` in node-index space.
    pub edges: Vec<(usize, usize, WordPayload)>,
    pub root: usize,
}

pub fn relabel_with_words(graph: &AmrGraph, alignment: &Alignment, n_tokens: usize) -> Result<WordGraph> {
    alignment.check(graph, n_tokens)?;
    if graph.nodes.is_empty() {
        return Err(Error::Input("cannot relabel an empty graph".into()));
    }
    let idx = graph.node_index();
    let mut node_tok: HashMap<&str, &Vec<usize>> = HashMap::new();
    let mut edge_tok: HashMap<usize, &Vec<usize>> = HashMap::new();
    for e in &alignment.entries {
        match &e.element {
            Element::Node(id) => {
                node_tok.insert(id.as_str(), &e.tokens);
            }
            Element::Edge(i) => {
                edge_tok.insert(*i, &e.tokens);
            }
        }
    }
    let payload = |tokens: Option<&&Vec<usize>>, label: &str| match tokens {
        Some(t) => WordPayload::Tokens((*t).clone()),
        None => WordPayload::Virtual(label.to_string()),
    };
    let nodes = graph
        .nodes
        .iter()
        .map(|n| payload(node_tok.get(n.id.as_str()), &n.concept))
        .collect();
    let mut edges = Vec::with_capacity(graph.edges.len());
    for (i, e) in graph.edges.iter().enumerate() {
        let (Some(&s), Some(&t)) = (idx.get(e.source.as_str()), idx.get(e.target.as_str())) else {
            return Err(Error::Structural(format!("edge {i} has a missing endpoint")));
        };
        edges.push((s, t, payload(edge_tok.get(&i), &e.relation)));
    }
    let root = *idx
        .get(graph.root.as_str())
        .ok_or_else(|| Error::Structural(format!("root `{}` is not a node", graph.root)))?;
    Ok(WordGraph { nodes, edges, root })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WagNodeKind {
    /// Token positions; exactly one after splitting.
    Aligned(Vec<usize>),
    Virtual(String),
}

impl WagNodeKind {
    pub fn is_virtual(&self) -> bool {
        matches!(self, WagNodeKind::Virtual(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WagVariant {
    Full,
    Contracted,
}

impl std::str::FromStr for WagVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(WagVariant::Full),
            "contracted" => Ok(WagVariant::Contracted),
            _ => Err(Error::Config(format!("unknown WAG variant `{s}` (full|contracted)"))),
        }
    }
}

/// A word-aligned graph.
///
/// Edges keep the parent→child direction of the source graph, which
/// contraction needs; message passing uses [`Wag::undirected_edges`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wag {
    pub nodes: Vec<WagNodeKind>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    pub variant: WagVariant,
}

impl Wag {
    pub fn virtual_count(&self) -> usize {
        self.nodes.iter().filter(|k| k.is_virtual()).count()
    }

    pub fn aligned_count(&self) -> usize {
        self.nodes.len() - self.virtual_count()
    }

    /// Both orientations of every edge, sorted and without duplicates.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self.edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        set.into_iter().collect()
    }

    /// Sorted neighbor lists of the undirected graph (no self entries).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (a, b) in self.undirected_edges() {
            if a != b {
                out[a].push(b);
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let nb = self.neighbors();
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &nb[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.nodes.len()
    }

    /// Token position of each node; `None` for virtual nodes. Fails before
    /// splitting, when a node can still hold several tokens.
    pub fn token_positions(&self) -> Result<Vec<Option<usize>>> {
        self.nodes
            .iter()
            .map(|k| match k {
                WagNodeKind::Aligned(t) if t.len() == 1 => Ok(Some(t[0])),
                WagNodeKind::Aligned(t) => Err(Error::Structural(format!("node aligned to {} tokens is unsplit", t.len()))),
                WagNodeKind::Virtual(_) => Ok(None),
            })
            .collect()
    }

    /// Labels of virtual nodes in node order.
    pub fn virtual_labels(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|k| match k {
                WagNodeKind::Virtual(l) => Some(l.as_str()),
                WagNodeKind::Aligned(_) => None,
            })
            .collect()
    }

    fn check_indices(&self) -> Result<()> {
        let n = self.nodes.len();
        if let Some(&(a, b)) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Structural(format!("edge ({a},{b}) out of range for {n} nodes")));
        }
        if self.root >= n {
            return Err(Error::Structural(format!("root {} out of range", self.root)));
        }
        Ok(())
    }
}

/// Every edge becomes a node wired between its two former endpoints.
/// Graph nodes keep their indices; edge `i` becomes node `n + i`.
pub fn expand_edges(wg: &WordGraph) -> Wag {
    let n = wg.nodes.len();
    let mut nodes: Vec<WagNodeKind> = wg.nodes.iter().map(to_kind).collect();
    let mut edges = Vec::with_capacity(2 * wg.edges.len());
    for (i, (s, t, p)) in wg.edges.iter().enumerate() {
        nodes.push(to_kind(p));
        edges.push((*s, n + i));
        edges.push((n + i, *t));
    }
    Wag {
        nodes,
        edges,
        root: wg.root,
        variant: WagVariant::Full,
    }
}

fn to_kind(p: &WordPayload) -> WagNodeKind {
    match p {
        WordPayload::Tokens(t) => WagNodeKind::Aligned(t.clone()),
        WordPayload::Virtual(l) => WagNodeKind::Virtual(l.clone()),
    }
}

/// A node aligned to `k > 1` tokens keeps the first token and gains `k − 1`
/// children, one per remaining token, appended after all existing nodes.
pub fn split_multi_token(wag: &Wag) -> Wag {
    let mut out = wag.clone();
    for i in 0..wag.nodes.len() {
        if let WagNodeKind::Aligned(t) = &wag.nodes[i] {
            if t.len() > 1 {
                out.nodes[i] = WagNodeKind::Aligned(vec![t[0]]);
                for &extra in &t[1..] {
                    out.nodes.push(WagNodeKind::Aligned(vec![extra]));
                    out.edges.push((i, out.nodes.len() - 1));
                }
            }
        }
    }
    out
}

/// Merges every virtual node into its closest aligned node and returns the
/// contracted graph.
///
/// The absorber is the nearest aligned ancestor along parent links. Without
/// one, the nearest aligned descendant is used, and failing that the nearest
/// aligned node in the undirected graph. Ties go to the lowest node index.
/// Edges are re-attached to absorbers; self-loops and duplicate pairs are
/// dropped.
pub fn contract(wag: &Wag) -> Result<Wag> {
    wag.check_indices()?;
    if wag.aligned_count() == 0 {
        return Err(Error::Contraction("graph has no aligned node to merge into".into()));
    }
    let n = wag.nodes.len();
    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    for &(a, b) in &wag.edges {
        children[a].push(b);
        parents[b].push(a);
    }
    let undirected = wag.neighbors();
    let mut absorber: Vec<usize> = (0..n).collect();
    for v in 0..n {
        if wag.nodes[v].is_virtual() {
            absorber[v] = nearest_aligned(wag, v, &parents)
                .or_else(|| nearest_aligned(wag, v, &children))
                .or_else(|| nearest_aligned(wag, v, &undirected))
                .ok_or_else(|| Error::Contraction(format!("virtual node {v} is cut off from every aligned node")))?;
        }
    }
    let mut new_index = vec![usize::MAX; n];
    let mut nodes = Vec::new();
    for v in 0..n {
        if !wag.nodes[v].is_virtual() {
            new_index[v] = nodes.len();
            nodes.push(wag.nodes[v].clone());
        }
    }
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for &(a, b) in &wag.edges {
        let (x, y) = (new_index[absorber[a]], new_index[absorber[b]]);
        if x != y && seen.insert((x.min(y), x.max(y))) {
            edges.push((x, y));
        }
    }
    Ok(Wag {
        nodes,
        edges,
        root: new_index[absorber[wag.root]],
        variant: WagVariant::Contracted,
    })
}

/// Breadth-first search from `start` over `links`; returns the lowest-index
/// aligned node at the smallest positive distance.
fn nearest_aligned(wag: &Wag, start: usize, links: &[Vec<usize>]) -> Option<usize> {
    let mut seen = vec![false; wag.nodes.len()];
    seen[start] = true;
    let mut frontier = vec![start];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in &links[u] {
                if !seen[v] {
                    seen[v] = true;
                    next.push(v);
                }
            }
        }
        if let Some(&best) = next.iter().filter(|&&v| !wag.nodes[v].is_virtual()).min() {
            return Some(best);
        }
        frontier = next;
    }
    None
}

/// Relabel, expand, split, and contract when asked for the contracted variant.
pub fn build(graph: &AmrGraph, alignment: &Alignment, n_tokens: usize, variant: WagVariant) -> Result<Wag> {
    let full = split_multi_token(&expand_edges(&relabel_with_words(graph, alignment, n_tokens)?));
    match variant {
        WagVariant::Full => Ok(full),
        WagVariant::Contracted => contract(&full),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amr::{AmrEdge, AmrNode};

    fn graph(nodes: &[(&str, &str)], edges: &[(&str, &str, &str)], root: &str) -> AmrGraph {
        AmrGraph {
            nodes: nodes
                .iter()
                .map(|(i, c)| AmrNode {
                    id: i.to_string(),
                    concept: c.to_string(),
                })
                .collect(),
            edges: edges
                .iter()
                .map(|(s, r, t)| AmrEdge {
                    source: s.to_string(),
                    relation: r.to_string(),
                    target: t.to_string(),
                })
                .collect(),
            root: root.into(),
        }
    }

    /// "Here , it is a country with the freedom of speech".
    fn country() -> (AmrGraph, Alignment, usize) {
        let g = graph(
            &[("c", "country"), ("h", "here"), ("i", "it"), ("f", "free-04"), ("s", "speak-01")],
            &[
                ("c", ":location", "h"),
                ("c", ":domain", "i"),
                ("c", ":ARG1-of", "f"),
                ("f", ":ARG3", "s"),
            ],
            "c",
        );
        let mut a = Alignment::default();
        a.node("h", vec![0]);
        a.node("i", vec![2]);
        a.node("c", vec![5]);
        a.node("f", vec![8]);
        a.node("s", vec![10]);
        a.edge(2, vec![6]);
        (g, a, 11)
    }

    fn kinds_virtual(w: &Wag) -> Vec<bool> {
        w.nodes.iter().map(WagNodeKind::is_virtual).collect()
    }

    #[test]
    fn location_relation_stays_unaligned() {
        let (g, a, n) = country();
        let wg = relabel_with_words(&g, &a, n).unwrap();
        assert_eq!(wg.nodes[0], WordPayload::Tokens(vec![5]));
        assert_eq!(wg.edges[0].2, WordPayload::Virtual(":location".into()));
        assert_eq!(wg.edges[2].2, WordPayload::Tokens(vec![6]));
    }

    #[test]
    fn empty_alignment_makes_every_node_virtual() {
        let (g, _, n) = country();
        let wg = relabel_with_words(&g, &Alignment::default(), n).unwrap();
        assert!(wg.nodes.iter().all(|p| matches!(p, WordPayload::Virtual(_))));
    }

    #[test]
    fn fully_aligned_single_edge_has_aligned_nodes() {
        let g = graph(&[("a", "dog"), ("b", "big")], &[("a", ":mod", "b")], "a");
        let mut al = Alignment::default();
        al.node("a", vec![1]);
        al.node("b", vec![0]);
        let wg = relabel_with_words(&g, &al, 2).unwrap();
        assert!(wg.nodes.iter().all(|p| matches!(p, WordPayload::Tokens(_))));
        let w = expand_edges(&wg);
        assert_eq!((w.nodes.len(), w.edges.len()), (3, 2));
    }

    #[test]
    fn bad_alignments_are_input_errors() {
        let (g, _, n) = country();
        for entries in [
            vec![(Element::Node("zz".into()), vec![0])],
            vec![(Element::Edge(9), vec![0])],
            vec![(Element::Node("c".into()), vec![])],
            vec![(Element::Node("c".into()), vec![3, 1])],
            vec![(Element::Node("c".into()), vec![40])],
            vec![(Element::Node("c".into()), vec![1]), (Element::Node("h".into()), vec![1])],
        ] {
            let al = Alignment {
                entries: entries
                    .into_iter()
                    .map(|(element, tokens)| AlignmentEntry { element, tokens })
                    .collect(),
            };
            assert!(matches!(relabel_with_words(&g, &al, n), Err(Error::Input(_))), "{al:?}");
        }
    }

    #[test]
    fn full_wag_puts_location_between_country_and_here() {
        let (g, a, n) = country();
        let w = build(&g, &a, n, WagVariant::Full).unwrap();
        // edge 0 (:location) is node 5
        assert_eq!(w.nodes[5], WagNodeKind::Virtual(":location".into()));
        assert!(w.edges.contains(&(0, 5)) && w.edges.contains(&(5, 1)));
        assert_eq!(w.virtual_count(), 3);
        assert!(w.is_connected());
    }

    #[test]
    fn contracted_wag_links_country_and_here_directly() {
        let (g, a, n) = country();
        let c = build(&g, &a, n, WagVariant::Contracted).unwrap();
        assert_eq!(c.virtual_count(), 0);
        assert_eq!(c.nodes.len(), 6);
        let pos = c.token_positions().unwrap();
        let at = |t: usize| pos.iter().position(|p| *p == Some(t)).unwrap();
        let und = c.undirected_edges();
        assert!(und.contains(&(at(5), at(0))));
        assert!(und.contains(&(at(5), at(2))));
        assert!(und.contains(&(at(5), at(6))));
        assert!(c.is_connected());
    }

    #[test]
    fn split_makes_parent_at_first_token() {
        let w = Wag {
            nodes: vec![WagNodeKind::Aligned(vec![7, 9]), WagNodeKind::Aligned(vec![1, 2, 3])],
            edges: vec![(0, 1)],
            root: 0,
            variant: WagVariant::Full,
        };
        let s = split_multi_token(&w);
        assert_eq!(
            s.nodes,
            vec![
                WagNodeKind::Aligned(vec![7]),
                WagNodeKind::Aligned(vec![1]),
                WagNodeKind::Aligned(vec![9]),
                WagNodeKind::Aligned(vec![2]),
                WagNodeKind::Aligned(vec![3]),
            ]
        );
        assert_eq!(s.edges, vec![(0, 1), (0, 2), (1, 3), (1, 4)]);
        let single = Wag {
            nodes: vec![WagNodeKind::Aligned(vec![0]), WagNodeKind::Virtual("x".into())],
            ..w
        };
        assert_eq!(split_multi_token(&single), single);
    }

    #[test]
    fn chain_of_virtuals_collapses_to_one_edge() {
        let w = Wag {
            nodes: vec![
                WagNodeKind::Aligned(vec![0]),
                WagNodeKind::Virtual("a".into()),
                WagNodeKind::Virtual("b".into()),
                WagNodeKind::Aligned(vec![1]),
            ],
            edges: vec![(0, 1), (1, 2), (2, 3)],
            root: 0,
            variant: WagVariant::Full,
        };
        let c = contract(&w).unwrap();
        assert_eq!(c.nodes.len(), 2);
        assert_eq!(c.edges, vec![(0, 1)]);
    }

    #[test]
    fn virtual_root_merges_into_lowest_nearest_descendant() {
        let w = Wag {
            nodes: vec![
                WagNodeKind::Virtual("r".into()),
                WagNodeKind::Aligned(vec![4]),
                WagNodeKind::Aligned(vec![2]),
            ],
            edges: vec![(0, 2), (0, 1)],
            root: 0,
            variant: WagVariant::Full,
        };
        let c = contract(&w).unwrap();
        assert_eq!(c.root, 0);
        assert_eq!(c.nodes, vec![WagNodeKind::Aligned(vec![4]), WagNodeKind::Aligned(vec![2])]);
        assert_eq!(c.edges, vec![(0, 1)]);
        assert!(kinds_virtual(&c).iter().all(|v| !v));
    }

    #[test]
    fn no_aligned_nodes_is_a_contraction_error() {
        let (g, _, n) = country();
        assert!(matches!(
            build(&g, &Alignment::default(), n, WagVariant::Contracted),
            Err(Error::Contraction(_))
        ));
    }

    #[test]
    fn contraction_is_idempotent_and_identity_when_fully_aligned() {
        let (g, a, n) = country();
        let c = build(&g, &a, n, WagVariant::Contracted).unwrap();
        assert_eq!(contract(&c).unwrap(), c);
        let full = Wag {
            nodes: vec![WagNodeKind::Aligned(vec![0]), WagNodeKind::Aligned(vec![1])],
            edges: vec![(0, 1)],
            root: 0,
            variant: WagVariant::Full,
        };
        let cf = contract(&full).unwrap();
        assert_eq!((cf.nodes, cf.edges), (full.nodes, full.edges));
    }

    #[test]
    fn alignment_json_shape() {
        let (_, a, _) = country();
        let text = serde_json::to_string(&a).unwrap();
        assert!(text.starts_with(r#"[{"node":"h","tokens":[0]}"#), "{text}");
        assert!(text.contains(r#"{"edge":2,"tokens":[6]}"#));
        assert_eq!(serde_json::from_str::<Alignment>(&text).unwrap(), a);
    }
}
