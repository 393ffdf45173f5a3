//! Rooted, directed acyclic concept graphs and their token linearization.
//!
//! A graph linearizes depth-first from the root. The first visit of a node
//! emits `( <Rk> concept :rel child ... )`; later visits emit the bare
//! variable token `<Rk>`. Children are ordered by relation label, then by
//! target node id.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of distinct variable tokens, `<R0>` through `<R63>`.
pub const MAX_VARIABLES: usize = 64;

pub fn variable_token(k: usize) -> String {
    format!("<R{k}>")
}

/// Parses `<Rk>` into `k`.
pub fn parse_variable(tok: &str) -> Option<usize> {
    tok.strip_prefix("<R")?.strip_suffix('>')?.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmrNode {
    pub id: String,
    pub concept: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmrEdge {
    pub source: String,
    pub relation: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmrGraph {
    pub nodes: Vec<AmrNode>,
    pub edges: Vec<AmrEdge>,
    pub root: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    Empty,
    MissingRoot(String),
    DuplicateNode(String),
    EmptyConcept(String),
    DanglingEdge { edge: usize, endpoint: String },
    BadRelation { edge: usize, relation: String },
    Cycle { node: String },
    Unreachable(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "graph has no nodes"),
            Violation::MissingRoot(r) => write!(f, "root `{r}` is not a node"),
            Violation::DuplicateNode(n) => write!(f, "node id `{n}` appears twice"),
            Violation::EmptyConcept(n) => write!(f, "node `{n}` has an empty concept"),
            Violation::DanglingEdge { edge, endpoint } => {
                write!(f, "edge {edge} references missing node `{endpoint}`")
            }
            Violation::BadRelation { edge, relation } => {
                write!(f, "edge {edge} relation `{relation}` must start with ':'")
            }
            Violation::Cycle { node } => write!(f, "directed cycle through `{node}`"),
            Violation::Unreachable(n) => write!(f, "node `{n}` is unreachable from the root"),
        }
    }
}

impl AmrGraph {
    /// The designated empty graph returned when nothing can be recovered.
    pub fn empty() -> Self {
        Self {
            nodes: Vec::new(),
            edges: Vec::new(),
            root: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    pub fn concept_of(&self, id: &str) -> Option<&str> {
        self.nodes.iter().find(|n| n.id == id).map(|n| n.concept.as_str())
    }

    /// Outgoing `(edge index, target node index)` lists, one per node.
    /// Edges with missing endpoints are skipped.
    pub fn children(&self) -> Vec<Vec<(usize, usize)>> {
        let idx = self.node_index();
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (e, edge) in self.edges.iter().enumerate() {
            if let (Some(&s), Some(&t)) = (idx.get(edge.source.as_str()), idx.get(edge.target.as_str())) {
                out[s].push((e, t));
            }
        }
        out
    }

    /// Number of nodes with more than one incoming edge.
    pub fn reentrant_nodes(&self) -> usize {
        let mut indeg: HashMap<&str, usize> = HashMap::new();
        for e in &self.edges {
            *indeg.entry(e.target.as_str()).or_default() += 1;
        }
        indeg.values().filter(|&&d| d > 1).count()
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.nodes.len() && self.reentrant_nodes() == 0
    }

    /// Every violated invariant; empty iff the graph is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            out.push(Violation::Empty);
            return out;
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                out.push(Violation::DuplicateNode(n.id.clone()));
            }
            if n.concept.trim().is_empty() {
                out.push(Violation::EmptyConcept(n.id.clone()));
            }
        }
        let idx = self.node_index();
        if !idx.contains_key(self.root.as_str()) {
            out.push(Violation::MissingRoot(self.root.clone()));
        }
        for (i, e) in self.edges.iter().enumerate() {
            for end in [&e.source, &e.target] {
                if !idx.contains_key(end.as_str()) {
                    out.push(Violation::DanglingEdge {
                        edge: i,
                        endpoint: end.clone(),
                    });
                }
            }
            if !e.relation.starts_with(':') || e.relation.len() < 2 {
                out.push(Violation::BadRelation {
                    edge: i,
                    relation: e.relation.clone(),
                });
            }
        }
        let children = self.children();
        if let Some(node) = find_cycle(&children) {
            out.push(Violation::Cycle {
                node: self.nodes[node].id.clone(),
            });
        }
        if let Some(&r) = idx.get(self.root.as_str()) {
            let mut reach = vec![false; self.nodes.len()];
            let mut queue = VecDeque::from([r]);
            reach[r] = true;
            while let Some(u) = queue.pop_front() {
                for &(_, v) in &children[u] {
                    if !reach[v] {
                        reach[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            for (i, ok) in reach.iter().enumerate() {
                if !ok {
                    out.push(Violation::Unreachable(self.nodes[i].id.clone()));
                }
            }
        }
        out
    }

    /// Multi-line indented rendering for humans.
    pub fn pretty(&self) -> String {
        match linearize_with_variables(self) {
            Ok((lin, _)) => pretty_tokens(&lin.tokens),
            Err(e) => format!("<invalid graph: {e}>"),
        }
    }
}

fn find_cycle(children: &[Vec<(usize, usize)>]) -> Option<usize> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; children.len()];
    for start in 0..children.len() {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while let Some((u, i)) = stack.pop() {
            if i < children[u].len() {
                stack.push((u, i + 1));
                let v = children[u][i].1;
                match color[v] {
                    0 => {
                        color[v] = 1;
                        stack.push((v, 0));
                    }
                    1 => return Some(v),
                    _ => {}
                }
            } else {
                color[u] = 2;
            }
        }
    }
    None
}

/// Token sequence rendering of a graph; the seq2seq target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearizedGraph {
    pub tokens: Vec<String>,
}

impl LinearizedGraph {
    pub fn parse(text: &str) -> Self {
        Self {
            tokens: text.split_whitespace().map(str::to_string).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for LinearizedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens.join(" "))
    }
}

pub fn linearize(graph: &AmrGraph) -> Result<LinearizedGraph> {
    linearize_with_variables(graph).map(|(l, _)| l)
}

/// Linearizes and also returns the variable index given to each node id.
pub fn linearize_with_variables(graph: &AmrGraph) -> Result<(LinearizedGraph, BTreeMap<String, usize>)> {
    let violations = graph.validate();
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Structural(msg.join("; ")));
    }
    if graph.nodes.len() > MAX_VARIABLES {
        return Err(Error::Structural(format!(
            "{} nodes exceed the {MAX_VARIABLES} variable tokens",
            graph.nodes.len()
        )));
    }
    for n in &graph.nodes {
        if !is_concept_token(&n.concept) {
            return Err(Error::Structural(format!("concept `{}` is not a single token", n.concept)));
        }
    }
    let idx = graph.node_index();
    let mut children = graph.children();
    for list in &mut children {
        list.sort_by(|a, b| {
            let ea = &graph.edges[a.0];
            let eb = &graph.edges[b.0];
            (ea.relation.as_str(), ea.target.as_str()).cmp(&(eb.relation.as_str(), eb.target.as_str()))
        });
    }
    let mut vars: Vec<Option<usize>> = vec![None; graph.nodes.len()];
    let mut next = 0;
    let mut tokens = Vec::new();

    enum Step {
        Enter(usize),
        Child(usize, usize),
    }
    let root = idx[graph.root.as_str()];
    let mut stack = vec![Step::Enter(root)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(u) => {
                if let Some(k) = vars[u] {
                    tokens.push(variable_token(k));
                    continue;
                }
                vars[u] = Some(next);
                tokens.push("(".into());
                tokens.push(variable_token(next));
                tokens.push(graph.nodes[u].concept.clone());
                next += 1;
                stack.push(Step::Child(u, 0));
            }
            Step::Child(u, i) => {
                if let Some(&(e, v)) = children[u].get(i) {
                    tokens.push(graph.edges[e].relation.clone());
                    stack.push(Step::Child(u, i + 1));
                    stack.push(Step::Enter(v));
                } else {
                    tokens.push(")".into());
                }
            }
        }
    }
    let map = graph
        .nodes
        .iter()
        .zip(&vars)
        .map(|(n, k)| (n.id.clone(), k.expect("validated graph is fully reachable")))
        .collect();
    Ok((LinearizedGraph { tokens }, map))
}

fn is_concept_token(s: &str) -> bool {
    !s.is_empty()
        && !s.chars().any(char::is_whitespace)
        && !s.starts_with(':')
        && s != "("
        && s != ")"
        && !(s.starts_with('<') && s.ends_with('>'))
}

/// What `delinearize` had to change to obtain a valid graph.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    pub actions: Vec<String>,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        self.actions.is_empty()
    }

    fn note(&mut self, s: impl Into<String>) {
        self.actions.push(s.into());
    }
}

enum Target {
    Node(usize),
    Ref(usize),
}

struct Frame {
    node: usize,
    pending: Option<String>,
}

#[derive(Default)]
struct Parsed {
    var: Option<usize>,
    concept: Option<String>,
}

/// Best-effort inverse of [`linearize`] that accepts arbitrary model output.
///
/// Unbalanced parentheses are closed, unknown tokens dropped, relations
/// without a resolvable target pruned, and cycle-closing edges removed.
/// Nodes take the id `R<k>` of their variable token when it is unique.
pub fn delinearize(lin: &LinearizedGraph) -> (AmrGraph, RepairReport) {
    let mut report = RepairReport::default();
    let mut nodes: Vec<Parsed> = Vec::new();
    let mut edges: Vec<(usize, String, Target)> = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    let mut root: Option<usize> = None;

    let toks = &lin.tokens;
    let mut i = 0;
    while i < toks.len() {
        let tok = toks[i].as_str();
        i += 1;
        if tok == "(" {
            if stack.is_empty() && root.is_some() {
                report.note(format!("ignored {} tokens after the root closed", toks.len() - i + 1));
                break;
            }
            let id = nodes.len();
            nodes.push(Parsed::default());
            match stack.last_mut() {
                None => root = Some(id),
                Some(top) => match top.pending.take() {
                    Some(rel) => edges.push((top.node, rel, Target::Node(id))),
                    None => report.note("subtree without a relation left unattached"),
                },
            }
            stack.push(Frame { node: id, pending: None });
        } else if tok == ")" {
            match stack.pop() {
                Some(f) => {
                    if let Some(rel) = f.pending {
                        report.note(format!("dangling relation {rel} pruned"));
                    }
                }
                None => report.note("unmatched ) dropped"),
            }
        } else if let Some(k) = parse_variable(tok) {
            let Some(top) = stack.last_mut() else {
                report.note(format!("stray {tok} dropped"));
                continue;
            };
            let node = &mut nodes[top.node];
            if node.var.is_none() && node.concept.is_none() {
                node.var = Some(k);
            } else if let Some(rel) = top.pending.take() {
                edges.push((top.node, rel, Target::Ref(k)));
            } else {
                report.note(format!("stray {tok} dropped"));
            }
        } else if tok.starts_with(':') && tok.len() > 1 {
            match stack.last_mut() {
                Some(top) if nodes[top.node].concept.is_some() => {
                    if let Some(old) = top.pending.replace(tok.to_string()) {
                        report.note(format!("dangling relation {old} pruned"));
                    }
                }
                _ => report.note(format!("misplaced relation {tok} dropped")),
            }
        } else if tok.starts_with('<') && tok.ends_with('>') {
            report.note(format!("special token {tok} dropped"));
        } else {
            let Some(top) = stack.last_mut() else {
                report.note(format!("stray concept {tok} dropped"));
                continue;
            };
            if nodes[top.node].concept.is_none() {
                nodes[top.node].concept = Some(tok.to_string());
            } else if let Some(rel) = top.pending.take() {
                let id = nodes.len();
                nodes.push(Parsed {
                    var: None,
                    concept: Some(tok.to_string()),
                });
                edges.push((top.node, rel, Target::Node(id)));
                report.note(format!("bare concept {tok} promoted to a node"));
            } else {
                report.note(format!("stray concept {tok} dropped"));
            }
        }
    }
    if !stack.is_empty() {
        report.note(format!("closed {} unbalanced parentheses", stack.len()));
        for f in stack.drain(..) {
            if let Some(rel) = f.pending {
                report.note(format!("dangling relation {rel} pruned"));
            }
        }
    }

    let Some(root) = root else {
        if !toks.is_empty() {
            report.note("no root node recovered");
        }
        return (AmrGraph::empty(), report);
    };

    // node ids: R<k> when the variable is unique, fresh ids otherwise
    let mut var_owner: HashMap<usize, usize> = HashMap::new();
    let mut ids: Vec<Option<String>> = vec![None; nodes.len()];
    let mut used: BTreeSet<String> = BTreeSet::new();
    for (n, p) in nodes.iter().enumerate() {
        if p.concept.is_none() {
            continue;
        }
        if let Some(k) = p.var {
            if let std::collections::hash_map::Entry::Vacant(e) = var_owner.entry(k) {
                e.insert(n);
                let id = format!("R{k}");
                used.insert(id.clone());
                ids[n] = Some(id);
            } else {
                report.note(format!("variable <R{k}> redefined; second definition renamed"));
            }
        }
    }
    let mut fresh = 0;
    for (n, p) in nodes.iter().enumerate() {
        if p.concept.is_some() && ids[n].is_none() {
            let id = loop {
                let c = format!("x{fresh}");
                fresh += 1;
                if !used.contains(&c) {
                    break c;
                }
            };
            used.insert(id.clone());
            ids[n] = Some(id);
        } else if p.concept.is_none() {
            report.note("node without a concept removed");
        }
    }
    if ids[root].is_none() {
        report.note("root has no concept");
        return (AmrGraph::empty(), report);
    }

    // resolve targets, then drop edges that would close a cycle
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut kept: Vec<(usize, String, usize)> = Vec::new();
    for (src, rel, tgt) in edges {
        let t = match tgt {
            Target::Node(t) => Some(t),
            Target::Ref(k) => var_owner.get(&k).copied(),
        };
        let Some(t) = t else {
            report.note(format!("relation {rel} to undefined variable pruned"));
            continue;
        };
        if ids[src].is_none() || ids[t].is_none() {
            report.note(format!("relation {rel} touching a removed node pruned"));
            continue;
        }
        if reaches(&children, t, src) {
            report.note(format!("relation {rel} closing a cycle pruned"));
            continue;
        }
        children[src].push(t);
        kept.push((src, rel, t));
    }

    let mut reach = vec![false; nodes.len()];
    let mut queue = VecDeque::from([root]);
    reach[root] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &children[u] {
            if !reach[v] {
                reach[v] = true;
                queue.push_back(v);
            }
        }
    }
    let unreachable = (0..nodes.len()).filter(|&n| ids[n].is_some() && !reach[n]).count();
    if unreachable > 0 {
        report.note(format!("{unreachable} unreachable nodes removed"));
    }
    let graph = AmrGraph {
        nodes: (0..nodes.len())
            .filter(|&n| reach[n] && ids[n].is_some())
            .map(|n| AmrNode {
                id: ids[n].clone().unwrap(),
                concept: nodes[n].concept.clone().unwrap(),
            })
            .collect(),
        edges: kept
            .into_iter()
            .filter(|(s, _, _)| reach[*s])
            .map(|(s, rel, t)| AmrEdge {
                source: ids[s].clone().unwrap(),
                relation: rel,
                target: ids[t].clone().unwrap(),
            })
            .collect(),
        root: ids[root].clone().unwrap(),
    };
    (graph, report)
}

fn reaches(children: &[Vec<usize>], from: usize, to: usize) -> bool {
    if from == to {
        return true;
    }
    let mut seen = vec![false; children.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(u) = stack.pop() {
        for &v in &children[u] {
            if v == to {
                return true;
            }
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    false
}

fn pretty_tokens(tokens: &[String]) -> String {
    let mut out = String::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < tokens.len() {
        let t = tokens[i].as_str();
        match t {
            "(" => {
                out.push('(');
                depth += 1;
            }
            ")" => {
                out.push(')');
                depth = depth.saturating_sub(1);
            }
            _ if t.starts_with(':') => {
                out.push('\n');
                out.push_str(&"    ".repeat(depth));
                out.push_str(t);
                out.push(' ');
            }
            _ => {
                out.push_str(t);
                if tokens.get(i + 1).is_some_and(|n| !n.starts_with(':') && n != ")") {
                    out.push_str(" / ");
                }
            }
        }
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(id: &str, c: &str) -> AmrNode {
        AmrNode {
            id: id.into(),
            concept: c.into(),
        }
    }

    pub(crate) fn edge(s: &str, r: &str, t: &str) -> AmrEdge {
        AmrEdge {
            source: s.into(),
            relation: r.into(),
            target: t.into(),
        }
    }

    /// "You told me to wash the dog".
    fn told_graph() -> AmrGraph {
        AmrGraph {
            nodes: vec![
                node("t", "tell-01"),
                node("y", "you"),
                node("w", "wash-01"),
                node("i", "i"),
                node("d", "dog"),
            ],
            edges: vec![
                edge("t", ":ARG0", "y"),
                edge("t", ":ARG1", "w"),
                edge("t", ":ARG2", "i"),
                edge("w", ":ARG0", "i"),
                edge("w", ":ARG1", "d"),
            ],
            root: "t".into(),
        }
    }

    #[test]
    fn single_node() {
        let g = AmrGraph {
            nodes: vec![node("c0", "country")],
            edges: vec![],
            root: "c0".into(),
        };
        assert_eq!(linearize(&g).unwrap().to_string(), "( <R0> country )");
        let (back, report) = delinearize(&LinearizedGraph::parse("( <R0> country )"));
        assert!(report.is_clean());
        assert_eq!(back.nodes, vec![node("R0", "country")]);
        assert_eq!(back.root, "R0");
    }

    #[test]
    fn reentrant_variable_emitted_once_then_bare() {
        let lin = linearize(&told_graph()).unwrap().to_string();
        assert_eq!(
            lin,
            "( <R0> tell-01 :ARG0 ( <R1> you ) :ARG1 ( <R2> wash-01 :ARG0 ( <R3> i ) :ARG1 ( <R4> dog ) ) :ARG2 <R3> )"
        );
    }

    #[test]
    fn cyclic_graph_is_rejected() {
        let mut g = told_graph();
        g.edges.push(edge("d", ":mod", "t"));
        assert!(matches!(linearize(&g), Err(Error::Structural(_))));
    }

    #[test]
    fn validate_reports_each_violation() {
        assert!(told_graph().validate().is_empty());
        let mut cyc = told_graph();
        cyc.edges.push(edge("d", ":mod", "d"));
        assert_eq!(cyc.validate(), vec![Violation::Cycle { node: "d".into() }]);
        let mut unreach = told_graph();
        unreach.nodes.push(node("z", "zebra"));
        assert_eq!(unreach.validate(), vec![Violation::Unreachable("z".into())]);
        let mut bad = told_graph();
        bad.edges[0].relation = "ARG0".into();
        assert!(matches!(bad.validate()[0], Violation::BadRelation { .. }));
        let mut dangling = told_graph();
        dangling.edges.push(edge("t", ":mod", "nowhere"));
        assert!(matches!(dangling.validate()[0], Violation::DanglingEdge { .. }));
        assert_eq!(AmrGraph::empty().validate(), vec![Violation::Empty]);
    }

    #[test]
    fn truncated_output_is_repaired() {
        let (g, report) = delinearize(&LinearizedGraph::parse("( <R0> country :domain ( <R1> it"));
        assert_eq!(g.nodes, vec![node("R0", "country"), node("R1", "it")]);
        assert_eq!(g.edges, vec![edge("R0", ":domain", "R1")]);
        assert!(g.validate().is_empty());
        assert!(!report.is_clean());
    }

    #[test]
    fn garbage_yields_valid_or_empty_graph() {
        for text in [
            "",
            ")",
            ":ARG0 :ARG1",
            "( ( ( <R0>",
            "( <R0> a :ARG0 <R5> )",
            "( <R0> a :ARG0 ( <R1> b :ARG1 <R0> ) )",
            "( <R0> a :ARG0 ) ( <R1> b )",
            "<s> ( <R0> a <unk> :mod big ) </s>",
            "( <R0> a :ARG0 ( <R0> b ) :ARG1 <R0> )",
        ] {
            let (g, _) = delinearize(&LinearizedGraph::parse(text));
            assert!(g.is_empty() || g.validate().is_empty(), "{text}: {g:?}");
        }
    }

    #[test]
    fn back_reference_cycle_is_pruned() {
        let (g, report) = delinearize(&LinearizedGraph::parse("( <R0> a :ARG0 ( <R1> b :ARG1 <R0> ) )"));
        assert_eq!(g.edges, vec![edge("R0", ":ARG0", "R1")]);
        assert!(report.actions.iter().any(|a| a.contains("cycle")));
    }

    #[test]
    fn pretty_print_indents_relations() {
        let p = told_graph().pretty();
        assert!(p.starts_with("(<R0> / tell-01"));
        assert!(p.contains("\n        :ARG0 <R3>") || p.contains(":ARG2 <R3>"));
    }
}
