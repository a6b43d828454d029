use std::path::Path;

use super::vocab::{MergeTable, Vocab};
use crate::error::Result;

/// How word boundaries are written in the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WordMarker {
    /// No marker; words are bare character sequences.
    None,
    /// Suffix glued to the last character of every word (`</w>` style).
    EndOfWord(String),
    /// Separate symbol placed before the first character (`▁` style).
    StartOfWord(String),
}

impl WordMarker {
    pub const END_OF_WORD: &'static str = "</w>";
    pub const START_OF_WORD: &'static str = "\u{2581}";

    /// Picks the convention a vocabulary was built with.
    pub fn detect(vocab: &Vocab) -> Self {
        let tokens = vocab.tokens();
        if tokens.iter().any(|t| t.ends_with(Self::END_OF_WORD)) {
            WordMarker::EndOfWord(Self::END_OF_WORD.into())
        } else if tokens.iter().any(|t| t.starts_with(Self::START_OF_WORD)) {
            WordMarker::StartOfWord(Self::START_OF_WORD.into())
        } else {
            WordMarker::None
        }
    }
}

/// Applies a pre-trained BPE model. Tokenization is a pure function of the
/// vocabulary, the merge table and the two options.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    lowercase: bool,
    marker: WordMarker,
}

impl Tokenizer {
    /// Lowercasing on, word marker detected from the vocabulary.
    pub fn new(vocab: Vocab, merges: MergeTable) -> Self {
        let marker = WordMarker::detect(&vocab);
        Tokenizer {
            vocab,
            merges,
            lowercase: true,
            marker,
        }
    }

    pub fn load(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Vocab::load(vocab)?, MergeTable::load(merges)?))
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn with_marker(mut self, marker: WordMarker) -> Self {
        self.marker = marker;
        self
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn marker(&self) -> &WordMarker {
        &self.marker
    }

    /// Subword symbols of one whitespace-free word.
    pub fn word_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        match &self.marker {
            WordMarker::None => {}
            WordMarker::EndOfWord(m) => {
                if let Some(last) = symbols.last_mut() {
                    last.push_str(m);
                }
            }
            WordMarker::StartOfWord(m) => symbols.insert(0, m.clone()),
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.rank(&w[0], &w[1]).map(|r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols
    }

    /// Subword strings of a text.
    pub fn tokenize_to_strings(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase { text.to_lowercase() } else { text.to_string() };
        text.split_whitespace().flat_map(|w| self.word_symbols(w)).collect()
    }

    /// Token ids of a text; symbols outside the vocabulary map to the unknown id.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenize_to_strings(text)
            .iter()
            .map(|s| self.vocab.id_or_unk(s))
            .collect()
    }

    /// A token as it should appear in human-readable output, without word markers.
    pub fn display(&self, id: usize) -> String {
        let tok = self.vocab.token(id).unwrap_or("<?>");
        let stripped = match &self.marker {
            WordMarker::None => tok,
            WordMarker::EndOfWord(m) => tok.strip_suffix(m.as_str()).unwrap_or(tok),
            WordMarker::StartOfWord(m) => tok.strip_prefix(m.as_str()).unwrap_or(tok),
        };
        if stripped.is_empty() { tok.to_string() } else { stripped.to_string() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(vocab: &[&str], merges: &[(&str, &str)]) -> Tokenizer {
        Tokenizer::new(
            Vocab::from_tokens(vocab.iter().copied()).unwrap(),
            MergeTable::from_pairs(merges.iter().copied()).unwrap(),
        )
    }

    #[test]
    fn merge_applies_to_matching_pair_only() {
        let t = tok(&["a", "b", "ab"], &[("a", "b")]);
        assert_eq!(t.tokenize("ab"), vec![2]);
        assert_eq!(t.tokenize("ba"), vec![1, 0]);
        assert!(t.tokenize("").is_empty());
        assert!(t.tokenize("   \t ").is_empty());
    }

    #[test]
    fn ranks_decide_order() {
        // With (b,c) ranked first, "abc" becomes a + bc, never ab + c.
        let t = tok(&["a", "b", "c", "ab", "bc"], &[("b", "c"), ("a", "b")]);
        assert_eq!(t.tokenize_to_strings("abc"), ["a", "bc"]);
        let t = tok(&["a", "b", "c", "ab", "bc", "abc"], &[("a", "b"), ("ab", "c"), ("b", "c")]);
        assert_eq!(t.tokenize_to_strings("abc"), ["abc"]);
    }

    #[test]
    fn end_of_word_marker() {
        let t = tok(&["<unk>", "l", "o", "w</w>", "lo", "low</w>"], &[("l", "o"), ("lo", "w</w>")]);
        assert_eq!(t.marker(), &WordMarker::EndOfWord("</w>".into()));
        assert_eq!(t.tokenize_to_strings("LOW low lo"), ["low</w>", "low</w>", "l", "o</w>"]);
        assert_eq!(t.tokenize("lo"), vec![1, 0]);
        assert_eq!(t.display(5), "low");
    }

    #[test]
    fn start_of_word_marker() {
        let t = tok(&["\u{2581}", "h", "i", "\u{2581}h", "\u{2581}hi"], &[("\u{2581}", "h"), ("\u{2581}h", "i")]);
        assert_eq!(t.tokenize("hi hi"), vec![4, 4]);
        assert_eq!(t.display(4), "hi");
    }

    #[test]
    fn unknown_symbols_map_to_unk_and_ids_are_in_range() {
        let t = tok(&["x", "<unk>"], &[]);
        assert_eq!(t.tokenize("xyz"), vec![0, 1, 1]);
    }

    #[test]
    fn lowercasing_can_be_disabled() {
        let t = tok(&["<unk>", "A", "a"], &[]).with_lowercase(false);
        assert_eq!(t.tokenize("Aa"), vec![1, 2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ids_in_range_and_deterministic(text in "[a-dA-D ]{0,40}") {
                let t = tok(&["<unk>", "a", "b", "c", "ab", "abc"], &[("a", "b"), ("ab", "c")]);
                let ids = t.tokenize(&text);
                prop_assert!(ids.iter().all(|&i| i < t.vocab().len()));
                prop_assert_eq!(ids, t.tokenize(&text));
            }
        }
    }
}
