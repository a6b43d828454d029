use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token inventory. The id of a token is its line number (from 0) in the vocab file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    unk_id: usize,
}

impl Vocab {
    pub const UNK: &'static str = "<unk>";

    /// Builds a vocabulary from tokens in id order. Unknown symbols map to
    /// `<unk>` when present and to id 0 otherwise.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        for tok in tokens {
            let tok = tok.into();
            if token_to_id.insert(tok.clone(), id_to_token.len()).is_some() {
                return Err(Error::Input(format!("duplicate token `{tok}`")));
            }
            id_to_token.push(tok);
        }
        if id_to_token.is_empty() {
            return Err(Error::Input("empty vocabulary".into()));
        }
        let unk_id = token_to_id.get(Self::UNK).copied().unwrap_or(0);
        Ok(Vocab {
            id_to_token,
            token_to_id,
            unk_id,
        })
    }

    /// Reads one token per line. A tab ends the token, so `token<TAB>score`
    /// exports are accepted as well.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut tokens = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.split('\t').next().unwrap_or("");
            if tok.is_empty() {
                return Err(parse_err(i + 1, "empty token".into()));
            }
            if let Some(first) = seen.insert(tok, i + 1) {
                return Err(parse_err(i + 1, format!("duplicate token `{tok}` (first on line {first})")));
            }
            tokens.push(tok);
        }
        if tokens.is_empty() {
            return Err(parse_err(0, "empty vocabulary".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Id of `token`, or the unknown id.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk_id)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// SHA-256 (hex) of the tokens joined by newlines. Stored in checkpoints
    /// to catch a model being paired with the wrong vocabulary.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            if i > 0 {
                h.update(b"\n");
            }
            h.update(t.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordered BPE merge rules; earlier rules have priority.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    pairs: Vec<(String, String)>,
    // left -> right -> rank, so lookups need no allocation.
    ranks: HashMap<String, HashMap<String, usize>>,
}

impl MergeTable {
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut table = MergeTable::default();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            if table.rank(&a, &b).is_some() {
                return Err(Error::Input(format!("duplicate merge `{a} {b}`")));
            }
            table.push(a, b);
        }
        Ok(table)
    }

    fn push(&mut self, a: String, b: String) {
        let rank = self.pairs.len();
        self.ranks.entry(a.clone()).or_default().insert(b.clone(), rank);
        self.pairs.push((a, b));
    }

    /// Reads `left right` per line. A leading `#version` header line is skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = MergeTable::default();
        let mut lines_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line.starts_with("#version") {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split(' ').collect();
            let [a, b] = fields[..] else {
                return Err(parse_err(format!("expected `left right`, found {line:?}")));
            };
            if a.is_empty() || b.is_empty() {
                return Err(parse_err(format!("expected `left right`, found {line:?}")));
            }
            if let Some(rank) = table.rank(a, b) {
                return Err(parse_err(format!("duplicate merge (first on line {})", lines_of[rank])));
            }
            table.push(a.to_string(), b.to_string());
            lines_of.push(i + 1);
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left)?.get(right).copied()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    /// Merge products that are missing from `vocab`.
    pub fn unresolved<'a>(&'a self, vocab: &'a Vocab) -> impl Iterator<Item = String> + 'a {
        self.pairs
            .iter()
            .map(|(a, b)| format!("{a}{b}"))
            .filter(|m| vocab.id(m).is_none())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ids_follow_line_order() {
        let f = file("the\ncat\nsat\n");
        let v = Vocab::load(f.path()).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!((v.id("the"), v.id("cat"), v.id("sat")), (Some(0), Some(1), Some(2)));
        assert_eq!(v.unk_id(), 0);
    }

    #[test]
    fn duplicate_token_cites_later_line() {
        let f = file("a\nb\nc\nx\nd\ne\nf\ng\nx\n");
        match Vocab::load(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unk_token_is_used_when_present() {
        let v = Vocab::from_tokens(["a", "<unk>", "b"]).unwrap();
        assert_eq!(v.unk_id(), 1);
        assert_eq!(v.id_or_unk("zzz"), 1);
    }

    #[test]
    fn crlf_and_tab_scores_are_accepted() {
        let v = Vocab::load(file("a\t-1.5\r\nb\t-2\r\n").path()).unwrap();
        assert_eq!(v.tokens(), ["a", "b"]);
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = Vocab::from_tokens(["x", "y"]).unwrap();
        let b = Vocab::from_tokens(["y", "x"]).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn merges_load_in_rank_order() {
        let m = MergeTable::load(file("#version: 0.2\na b\nab c\n").path()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.rank("a", "b"), Some(0));
        assert_eq!(m.rank("ab", "c"), Some(1));
        assert_eq!(m.rank("b", "c"), None);
    }

    #[test]
    fn empty_merges_file_is_valid() {
        assert!(MergeTable::load(file("").path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_merge_line_is_reported() {
        match MergeTable::load(file("a b\nabc\n").path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(MergeTable::load(file("a b\na b\n").path()), Err(Error::Parse { line: 2, .. })));
    }
}
