//! Joint text/graph vocabulary shared by encoder input and decoder output.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amr::{variable_token, MAX_VARIABLES};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";
pub const OPEN: &str = "(";
pub const CLOSE: &str = ")";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const MASK_ID: usize = 4;
pub const OPEN_ID: usize = 5;
pub const CLOSE_ID: usize = 6;
pub const FIRST_VARIABLE_ID: usize = 7;

/// Count of ids whose meaning never depends on the corpus.
pub const RESERVED: usize = FIRST_VARIABLE_ID + MAX_VARIABLES;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

fn reserved_tokens() -> Vec<String> {
    let mut v: Vec<String> = [PAD, BOS, EOS, UNK, MASK, OPEN, CLOSE].iter().map(|s| s.to_string()).collect();
    v.extend((0..MAX_VARIABLES).map(variable_token));
    v
}

impl Vocabulary {
    /// Reserved symbols, then relations in sorted order, then every other
    /// symbol (words and concepts) in sorted order.
    pub fn build<'a>(relations: impl IntoIterator<Item = &'a str>, symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens = reserved_tokens();
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let rels: BTreeSet<&str> = relations.into_iter().collect();
        let mut index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for r in rels {
            if !index.contains_key(r) {
                index.insert(r.to_string(), tokens.len());
                tokens.push(r.to_string());
            }
        }
        for s in symbols {
            seen.insert(s);
        }
        for s in seen {
            if !index.contains_key(s) {
                index.insert(s.to_string(), tokens.len());
                tokens.push(s.to_string());
            }
        }
        Self { tokens, index }
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = reserved_tokens();
        if tokens.len() < RESERVED || tokens[..RESERVED] != reserved[..] {
            return Err(Error::Schema("vocabulary does not start with the reserved symbols".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Schema(format!("vocabulary repeats `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn is_special(id: usize) -> bool {
        id <= MASK_ID
    }

    /// Vocabulary ids for a free-text label: the label itself when it is a
    /// known symbol, otherwise the known pieces of the label split on
    /// whitespace, `-` and `_` (unknown pieces map to `<unk>`).
    pub fn tokenize_label(&self, label: &str) -> Result<Vec<usize>> {
        if let Some(id) = self.get(label) {
            return Ok(vec![id]);
        }
        let pieces: Vec<usize> = label
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
            .filter(|p| !p.is_empty())
            .map(|p| self.id(p))
            .collect();
        if pieces.is_empty() {
            return Err(Error::Input(format!("label `{label}` has no tokens")));
        }
        Ok(pieces)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&VocabFile {
            version: FORMAT_VERSION,
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        if f.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported vocabulary version {}", f.version)));
        }
        Self::from_tokens(f.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocabulary {
        Vocabulary::build([":location", ":ARG0"], ["country", "here", "it", "country", "tell-01"])
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = small();
        assert_eq!(v.id(PAD), PAD_ID);
        assert_eq!(v.id(BOS), BOS_ID);
        assert_eq!(v.id(EOS), EOS_ID);
        assert_eq!(v.id(MASK), MASK_ID);
        assert_eq!(v.id(OPEN), OPEN_ID);
        assert_eq!(v.id(CLOSE), CLOSE_ID);
        assert_eq!(v.id("<R0>"), FIRST_VARIABLE_ID);
        assert_eq!(v.id("<R63>"), RESERVED - 1);
        assert_eq!(v.id(":ARG0"), RESERVED);
        assert_eq!(v.id("zzz"), UNK_ID);
    }

    #[test]
    fn json_round_trip_keeps_ids() {
        let v = small();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn tampered_file_is_a_schema_error() {
        let mut f: serde_json::Value = serde_json::from_str(&small().to_json().unwrap()).unwrap();
        f["tokens"][0] = "x".into();
        assert!(matches!(Vocabulary::from_json(&f.to_string()), Err(Error::Schema(_))));
    }

    #[test]
    fn labels_tokenize_whole_or_by_pieces() {
        let v = small();
        assert_eq!(v.tokenize_label(":location").unwrap(), vec![v.id(":location")]);
        assert_eq!(v.tokenize_label("tell-01").unwrap(), vec![v.id("tell-01")]);
        assert_eq!(v.tokenize_label("here country").unwrap(), vec![v.id("here"), v.id("country")]);
        assert!(matches!(v.tokenize_label(" - "), Err(Error::Input(_))));
    }
}
