use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::path::{Path, PathBuf};

use super::bpe::Tokenizer;
use crate::error::{Error, Result};

/// Sentences longer than this are skipped by default; induction cost grows
/// quadratically with length.
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CorpusStats {
    pub lines: usize,
    pub kept: usize,
    pub too_short: usize,
    pub too_long: usize,
    /// Tokens in the kept sentences.
    pub tokens: usize,
}

/// Streams tokenized sentences, one per line, applying the length filter.
pub struct CorpusReader<'t> {
    tokenizer: &'t Tokenizer,
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    max_len: usize,
    stats: CorpusStats,
}

impl<'t> CorpusReader<'t> {
    pub fn open(path: impl AsRef<Path>, tokenizer: &'t Tokenizer, max_len: usize) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(CorpusReader {
            tokenizer,
            path,
            lines: BufReader::new(file).lines(),
            max_len,
            stats: CorpusStats::default(),
        })
    }

    /// Counts so far; complete once the iterator is exhausted.
    pub fn stats(&self) -> CorpusStats {
        self.stats
    }
}

impl Iterator for CorpusReader<'_> {
    type Item = Result<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.stats.lines += 1;
            let ids = self.tokenizer.tokenize(&line);
            if ids.len() < 2 {
                self.stats.too_short += 1;
            } else if ids.len() > self.max_len {
                self.stats.too_long += 1;
            } else {
                self.stats.kept += 1;
                self.stats.tokens += ids.len();
                return Some(Ok(ids));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<usize>>,
    pub stats: CorpusStats,
}

/// Reads and tokenizes a whole corpus file.
pub fn read_corpus(path: impl AsRef<Path>, tokenizer: &Tokenizer, max_len: usize) -> Result<Corpus> {
    let mut reader = CorpusReader::open(path, tokenizer, max_len)?;
    let sentences = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        sentences,
        stats: reader.stats(),
    })
}
