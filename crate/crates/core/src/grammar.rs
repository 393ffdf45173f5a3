//! Template grammar for the synthetic corpus.
//!
//! A template pairs a sentence pattern with one or more weighted graph
//! patterns. Sentence patterns mix literal words with slots:
//!
//! * `{v:cat}` fills slot `v` from lexicon category `cat`, or expands the
//!   template category `cat` recursively;
//! * `{v=word}` emits `word` and aligns it to the graph variable `v`.
//!
//! Graph patterns use a small bracketed notation, `(v :ARG0 a :ARG1 (b :mod j))`.
//! A variable bound to a lexical slot takes the entry's concept and is aligned
//! to its words; one bound to a template slot stands for the root of the
//! expanded fragment. `x/concept` declares a concept directly; it is aligned
//! only if the sentence has a matching `{x=word}`. A relation written `:{p}`
//! takes its label from the relation-bearing lexical slot `p` and is aligned
//! to that slot's words. Repeating a variable creates a re-entrancy.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_GRAMMAR: &str = include_str!("default_grammar.json");

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexEntry {
    /// Surface words, whitespace separated; all of them align to the element.
    pub words: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphAlternative {
    pub pattern: String,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub category: String,
    #[serde(default = "one")]
    pub weight: f64,
    pub sentence: String,
    pub graphs: Vec<GraphAlternative>,
    /// Only used when unaligned concepts are enabled.
    #[serde(default)]
    pub requires_unaligned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub seed: u64,
    pub start: String,
    pub min_words: usize,
    pub max_words: usize,
    /// Nesting depth beyond which only non-recursive templates are chosen.
    pub max_depth: usize,
    #[serde(default)]
    pub unaligned_concepts: bool,
    pub lexicon: BTreeMap<String, Vec<LexEntry>>,
    pub templates: Vec<Template>,
}

impl GrammarSpec {
    pub fn default_spec() -> Self {
        serde_json::from_str(DEFAULT_GRAMMAR).expect("embedded grammar parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Item {
    Word(String),
    Slot { var: String, cat: String },
    Aligned { var: String, word: String },
}

#[derive(Clone, Debug, PartialEq)]
enum Rel {
    Fixed(String),
    Slot(String),
}

#[derive(Clone, Debug, PartialEq)]
struct Term {
    var: String,
    concept: Option<String>,
    children: Vec<(Rel, Term)>,
}

#[derive(Clone, Debug)]
struct Compiled {
    category: String,
    weight: f64,
    items: Vec<Item>,
    graphs: Vec<Term>,
    graph_dist: WeightedIndex<f64>,
    recursive: bool,
    requires_unaligned: bool,
}

/// One instantiated template: words plus a graph over them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fragment {
    pub words: Vec<String>,
    pub concepts: Vec<String>,
    /// Aligned token positions per node, `None` when unaligned.
    pub node_tokens: Vec<Option<Vec<usize>>>,
    /// `(source, relation, target, aligned tokens)`.
    pub edges: Vec<(usize, String, usize, Option<Vec<usize>>)>,
    pub root: usize,
}

impl Fragment {
    fn append(&mut self, other: Fragment) -> usize {
        let node_off = self.concepts.len();
        let tok_off = self.words.len();
        let shift = |t: Option<Vec<usize>>| t.map(|v| v.into_iter().map(|x| x + tok_off).collect());
        self.words.extend(other.words);
        self.concepts.extend(other.concepts);
        self.node_tokens.extend(other.node_tokens.into_iter().map(shift));
        self.edges.extend(
            other
                .edges
                .into_iter()
                .map(|(s, r, t, a)| (s + node_off, r, t + node_off, shift(a))),
        );
        other.root + node_off
    }

    fn add_node(&mut self, concept: &str, tokens: Option<Vec<usize>>) -> usize {
        self.concepts.push(concept.to_string());
        self.node_tokens.push(tokens);
        self.concepts.len() - 1
    }
}

/// A validated, ready-to-sample grammar.
#[derive(Clone, Debug)]
pub struct Grammar {
    spec: GrammarSpec,
    templates: Vec<Compiled>,
    lex_dist: HashMap<String, WeightedIndex<f64>>,
}

enum Binding {
    Lex(usize, usize, Vec<usize>),
    Sub(usize),
    Lit(Vec<usize>),
}

impl Grammar {
    pub fn new(spec: GrammarSpec) -> Result<Self> {
        if spec.min_words == 0 || spec.min_words > spec.max_words {
            return Err(Error::Config(format!(
                "word range [{}, {}] is empty",
                spec.min_words, spec.max_words
            )));
        }
        let mut lex_dist = HashMap::new();
        for (cat, entries) in &spec.lexicon {
            let concepts = entries.iter().filter(|e| e.concept.is_some()).count();
            let relations = entries.iter().filter(|e| e.relation.is_some()).count();
            if entries.is_empty() || !(concepts == entries.len() && relations == 0 || relations == entries.len() && concepts == 0) {
                return Err(Error::Config(format!(
                    "lexicon category `{cat}` must be non-empty and all-concept or all-relation"
                )));
            }
            for e in entries {
                if e.words.split_whitespace().next().is_none() {
                    return Err(Error::Config(format!("entry in `{cat}` has no words")));
                }
                if let Some(r) = &e.relation {
                    if !r.starts_with(':') {
                        return Err(Error::Config(format!("relation `{r}` in `{cat}` must start with ':'")));
                    }
                }
                if let Some(c) = &e.concept {
                    if c.is_empty() || c.contains(char::is_whitespace) {
                        return Err(Error::Config(format!("concept `{c}` in `{cat}` must be one token")));
                    }
                }
            }
            let dist = WeightedIndex::new(entries.iter().map(|e| e.weight))
                .map_err(|e| Error::Config(format!("lexicon `{cat}` weights: {e}")))?;
            lex_dist.insert(cat.clone(), dist);
        }
        let categories: BTreeSet<&str> = spec.templates.iter().map(|t| t.category.as_str()).collect();
        let mut templates = Vec::new();
        for (i, t) in spec.templates.iter().enumerate() {
            let ctx = |m: String| Error::Config(format!("template {i} ({}): {m}", t.category));
            let items = parse_sentence(&t.sentence).map_err(ctx)?;
            let mut slot_vars = BTreeMap::new();
            let mut recursive = false;
            for it in &items {
                match it {
                    Item::Slot { var, cat } => {
                        let is_lex = spec.lexicon.contains_key(cat);
                        if !is_lex && !categories.contains(cat.as_str()) {
                            return Err(ctx(format!("unknown category `{cat}`")));
                        }
                        recursive |= !is_lex;
                        if slot_vars.insert(var.clone(), it.clone()).is_some() {
                            return Err(ctx(format!("variable `{var}` bound twice")));
                        }
                    }
                    Item::Aligned { var, .. } => {
                        if slot_vars.insert(var.clone(), it.clone()).is_some() {
                            return Err(ctx(format!("variable `{var}` bound twice")));
                        }
                    }
                    Item::Word(_) => {}
                }
            }
            if t.graphs.is_empty() {
                return Err(ctx("no graph alternatives".into()));
            }
            let mut graphs = Vec::new();
            for g in &t.graphs {
                let term = parse_graph(&g.pattern).map_err(ctx)?;
                check_graph(&term, &slot_vars, &spec.lexicon).map_err(ctx)?;
                graphs.push(term);
            }
            let graph_dist = WeightedIndex::new(t.graphs.iter().map(|g| g.weight))
                .map_err(|e| ctx(format!("graph weights: {e}")))?;
            templates.push(Compiled {
                category: t.category.clone(),
                weight: t.weight,
                items,
                graphs,
                graph_dist,
                recursive,
                requires_unaligned: t.requires_unaligned,
            });
        }
        if !categories.contains(spec.start.as_str()) {
            return Err(Error::Config(format!("start category `{}` has no templates", spec.start)));
        }
        for cat in &categories {
            let ok = templates
                .iter()
                .any(|t| t.category == *cat && !t.recursive && (!t.requires_unaligned || spec.unaligned_concepts));
            if !ok {
                return Err(Error::Config(format!("category `{cat}` has no non-recursive template")));
            }
        }
        Ok(Self {
            spec,
            templates,
            lex_dist,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    /// Expands the start category once.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Fragment> {
        self.expand(&self.spec.start, 0, rng)
    }

    fn expand<R: Rng>(&self, cat: &str, depth: usize, rng: &mut R) -> Result<Fragment> {
        let choices: Vec<&Compiled> = self
            .templates
            .iter()
            .filter(|t| t.category == cat)
            .filter(|t| !t.requires_unaligned || self.spec.unaligned_concepts)
            .filter(|t| depth < self.spec.max_depth || !t.recursive)
            .collect();
        let dist = WeightedIndex::new(choices.iter().map(|t| t.weight))
            .map_err(|e| Error::Config(format!("category `{cat}` weights: {e}")))?;
        let t = choices[dist.sample(rng)];

        let mut frag = Fragment::default();
        let mut bind: HashMap<&str, Binding> = HashMap::new();
        for it in &t.items {
            match it {
                Item::Word(w) => frag.words.push(w.clone()),
                Item::Aligned { var, word } => {
                    bind.insert(var, Binding::Lit(vec![frag.words.len()]));
                    frag.words.push(word.clone());
                }
                Item::Slot { var, cat } => {
                    if let Some(dist) = self.lex_dist.get(cat) {
                        let k = dist.sample(rng);
                        let start = frag.words.len();
                        frag.words.extend(self.spec.lexicon[cat][k].words.split_whitespace().map(str::to_string));
                        let pos = (start..frag.words.len()).collect();
                        let ci = self.spec.lexicon.keys().position(|c| c == cat).unwrap();
                        bind.insert(var, Binding::Lex(ci, k, pos));
                    } else {
                        let sub = self.expand(cat, depth + 1, rng)?;
                        let root = frag.append(sub);
                        bind.insert(var, Binding::Sub(root));
                    }
                }
            }
        }
        let term = &t.graphs[t.graph_dist.sample(rng)];
        let mut nodes: HashMap<String, usize> = HashMap::new();
        frag.root = self.instantiate(term, &bind, &mut nodes, &mut frag);
        Ok(frag)
    }

    fn lex(&self, cat_index: usize, k: usize) -> &LexEntry {
        &self.spec.lexicon.values().nth(cat_index).unwrap()[k]
    }

    fn instantiate(
        &self,
        term: &Term,
        bind: &HashMap<&str, Binding>,
        nodes: &mut HashMap<String, usize>,
        frag: &mut Fragment,
    ) -> usize {
        let me = match nodes.get(&term.var) {
            Some(&n) => n,
            None => {
                let n = match (bind.get(term.var.as_str()), &term.concept) {
                    (Some(Binding::Sub(root)), _) => *root,
                    (Some(Binding::Lex(c, k, pos)), _) => {
                        let concept = self.lex(*c, *k).concept.clone().unwrap();
                        frag.add_node(&concept, Some(pos.clone()))
                    }
                    (Some(Binding::Lit(pos)), Some(concept)) => frag.add_node(concept, Some(pos.clone())),
                    (None, Some(concept)) => frag.add_node(concept, None),
                    _ => unreachable!("checked when the grammar was built"),
                };
                nodes.insert(term.var.clone(), n);
                n
            }
        };
        for (rel, child) in &term.children {
            let c = self.instantiate(child, bind, nodes, frag);
            let (label, tokens) = match rel {
                Rel::Fixed(r) => (r.clone(), None),
                Rel::Slot(p) => match bind.get(p.as_str()) {
                    Some(Binding::Lex(ci, k, pos)) => (self.lex(*ci, *k).relation.clone().unwrap(), Some(pos.clone())),
                    _ => unreachable!("checked when the grammar was built"),
                },
            };
            frag.edges.push((me, label, c, tokens));
        }
        me
    }
}

fn parse_sentence(s: &str) -> std::result::Result<Vec<Item>, String> {
    let mut items = Vec::new();
    for w in s.split_whitespace() {
        if let Some(inner) = w.strip_prefix('{').and_then(|x| x.strip_suffix('}')) {
            if let Some((var, cat)) = inner.split_once(':') {
                items.push(Item::Slot {
                    var: var.to_string(),
                    cat: cat.to_string(),
                });
            } else if let Some((var, word)) = inner.split_once('=') {
                items.push(Item::Aligned {
                    var: var.to_string(),
                    word: word.to_string(),
                });
            } else {
                return Err(format!("bad slot `{w}`"));
            }
        } else if w.contains('{') || w.contains('}') {
            return Err(format!("bad slot `{w}`"));
        } else {
            items.push(Item::Word(w.to_string()));
        }
    }
    if items.is_empty() {
        return Err("empty sentence pattern".into());
    }
    Ok(items)
}

fn graph_tokens(s: &str) -> Vec<String> {
    s.replace('(', " ( ").replace(')', " ) ").split_whitespace().map(str::to_string).collect()
}

fn parse_graph(s: &str) -> std::result::Result<Term, String> {
    let toks = graph_tokens(s);
    let mut pos = 0;
    let t = parse_term(&toks, &mut pos)?;
    if pos != toks.len() {
        return Err(format!("trailing tokens in `{s}`"));
    }
    Ok(t)
}

fn parse_atom(a: &str) -> std::result::Result<(String, Option<String>), String> {
    if a.starts_with(':') || a == "(" || a == ")" {
        return Err(format!("expected a variable, found `{a}`"));
    }
    match a.split_once('/') {
        Some((v, c)) if !v.is_empty() && !c.is_empty() => Ok((v.to_string(), Some(c.to_string()))),
        Some(_) => Err(format!("bad concept declaration `{a}`")),
        None => Ok((a.to_string(), None)),
    }
}

fn parse_term(toks: &[String], pos: &mut usize) -> std::result::Result<Term, String> {
    let Some(first) = toks.get(*pos) else {
        return Err("unexpected end of graph pattern".into());
    };
    *pos += 1;
    if first != "(" {
        let (var, concept) = parse_atom(first)?;
        return Ok(Term {
            var,
            concept,
            children: vec![],
        });
    }
    let head = toks.get(*pos).ok_or("unexpected end of graph pattern")?;
    *pos += 1;
    let (var, concept) = parse_atom(head)?;
    let mut children = Vec::new();
    loop {
        let Some(t) = toks.get(*pos) else {
            return Err("unbalanced parentheses".into());
        };
        if t == ")" {
            *pos += 1;
            break;
        }
        let Some(r) = t.strip_prefix(':') else {
            return Err(format!("expected a relation, found `{t}`"));
        };
        *pos += 1;
        let rel = match r.strip_prefix('{').and_then(|x| x.strip_suffix('}')) {
            Some(slot) => Rel::Slot(slot.to_string()),
            None if !r.is_empty() => Rel::Fixed(t.clone()),
            None => return Err("empty relation".into()),
        };
        children.push((rel, parse_term(toks, pos)?));
    }
    Ok(Term { var, concept, children })
}

/// Static checks: every sentence variable is used, concept declarations are
/// unique and compatible with their bindings, relation slots name relation
/// categories.
fn check_graph(
    term: &Term,
    slots: &BTreeMap<String, Item>,
    lexicon: &BTreeMap<String, Vec<LexEntry>>,
) -> std::result::Result<(), String> {
    let mut used = BTreeSet::new();
    let mut declared = BTreeSet::new();
    let mut stack = vec![term];
    while let Some(t) = stack.pop() {
        used.insert(t.var.clone());
        let slot = slots.get(&t.var);
        let is_rel_cat = |cat: &str| lexicon.get(cat).is_some_and(|e| e[0].relation.is_some());
        match (slot, &t.concept) {
            (Some(Item::Slot { cat, .. }), Some(_)) => {
                return Err(format!("`{}` is bound to `{cat}` and cannot declare a concept", t.var));
            }
            (Some(Item::Slot { cat, .. }), None) if is_rel_cat(cat) => {
                return Err(format!("relation slot `{}` used as a node", t.var));
            }
            (Some(Item::Aligned { .. }) | None, Some(_)) => {
                if !declared.insert(t.var.clone()) {
                    return Err(format!("concept of `{}` declared twice", t.var));
                }
            }
            _ => {}
        }
        for (rel, child) in &t.children {
            if let Rel::Slot(p) = rel {
                match slots.get(p) {
                    Some(Item::Slot { cat, .. }) if is_rel_cat(cat) => {
                        used.insert(p.clone());
                    }
                    _ => return Err(format!("`:{{{p}}}` must name a relation slot")),
                }
            }
            stack.push(child);
        }
    }
    let mut all = vec![term];
    let mut i = 0;
    while i < all.len() {
        let t = all[i];
        if t.concept.is_none() && !slots.contains_key(&t.var) && !declared.contains(&t.var) {
            return Err(format!("variable `{}` has no concept", t.var));
        }
        all.extend(t.children.iter().map(|(_, c)| c));
        i += 1;
    }
    for (v, item) in slots {
        if !used.contains(v) {
            return Err(format!("sentence variable `{v}` is not used in the graph"));
        }
        if let Item::Aligned { .. } = item {
            if !declared.contains(v) {
                return Err(format!("aligned word `{v}` needs a concept declaration"));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(templates: &str) -> GrammarSpec {
        GrammarSpec::from_json(&format!(
            r#"{{"seed":1,"start":"S","min_words":1,"max_words":30,"max_depth":2,
               "lexicon":{{"n":[{{"words":"dog","concept":"dog"}}],
                          "v":[{{"words":"saw","concept":"see-01"}}],
                          "p":[{{"words":"next to","relation":":location"}}]}},
               "templates":{templates}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn default_grammar_compiles() {
        Grammar::new(GrammarSpec::default_spec()).unwrap();
        let mut s = GrammarSpec::default_spec();
        s.unaligned_concepts = true;
        Grammar::new(s).unwrap();
    }

    #[test]
    fn slots_literals_and_relation_slots_instantiate() {
        let g = Grammar::new(spec(
            r#"[{"category":"S","sentence":"the {a:n} {v:v} {b:n} {p:p} {h=here}",
                "graphs":[{"pattern":"(v :ARG0 a :ARG1 (b :{p} h/here))"}]}]"#,
        ))
        .unwrap();
        let f = g.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.words.join(" "), "the dog saw dog next to here");
        assert_eq!(f.concepts, vec!["see-01", "dog", "dog", "here"]);
        assert_eq!(f.node_tokens[0], Some(vec![2]));
        assert_eq!(f.node_tokens[3], Some(vec![6]));
        assert_eq!(f.edges[1], (2, ":location".to_string(), 3, Some(vec![4, 5])));
        assert_eq!(f.root, 0);
    }

    #[test]
    fn repeated_variable_is_a_reentrancy_and_undeclared_concept_is_unaligned() {
        let g = Grammar::new(spec(
            r#"[{"category":"S","sentence":"{a:n} {v:v}",
                "graphs":[{"pattern":"(o/obligate-01 :ARG1 a :ARG2 (v :ARG0 a))"}]}]"#,
        ))
        .unwrap();
        let f = g.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.concepts.len(), 3);
        assert_eq!(f.node_tokens[0], None);
        let into_a = f.edges.iter().filter(|e| e.2 == 1).count();
        assert_eq!(into_a, 2);
    }

    #[test]
    fn recursion_stops_at_max_depth() {
        let g = Grammar::new(spec(
            r#"[{"category":"S","sentence":"{a:n}","graphs":[{"pattern":"(a)"}]},
                {"category":"S","weight":100,"sentence":"{a:S} {x=and} {b:S}",
                 "graphs":[{"pattern":"(x/and :op1 a :op2 b)"}]}]"#,
        ))
        .unwrap();
        let f = g.sample(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(f.words.len() <= 7, "{:?}", f.words);
    }

    #[test]
    fn malformed_templates_are_config_errors() {
        for t in [
            r#"[{"category":"S","sentence":"{a:n} {b:n}","graphs":[{"pattern":"(a)"}]}]"#,
            r#"[{"category":"S","sentence":"{a:zz}","graphs":[{"pattern":"(a)"}]}]"#,
            r#"[{"category":"S","sentence":"{a:n}","graphs":[{"pattern":"(a :ARG0 q)"}]}]"#,
            r#"[{"category":"S","sentence":"{a:n} {p:p}","graphs":[{"pattern":"(a :ARG0 p)"}]}]"#,
            r#"[{"category":"S","sentence":"{a:n}","graphs":[{"pattern":"(a :ARG0 (b/x"}]}]"#,
            r#"[{"category":"S","sentence":"{a:n} {x=it}","graphs":[{"pattern":"(a :mod x)"}]}]"#,
            r#"[{"category":"S","sentence":"{a:S}","graphs":[{"pattern":"(a)"}]}]"#,
        ] {
            assert!(matches!(Grammar::new(spec(t)), Err(Error::Config(_))), "{t}");
        }
    }
}
