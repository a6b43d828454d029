//! A small generated language for examples, tests and offline experiments.
//!
//! Words are strings of consonant-vowel syllables. The BPE model merges each
//! consonant with the following vowel, so every syllable is one token and a
//! word is one to three tokens. Content words belong to topics; a sentence
//! draws most of its content words from a single topic and sprinkles in
//! shared function words. Pair datasets score two sentences by how much of
//! the second sentence's content comes from the first one's topic, without
//! reusing the first sentence's words, so lexical overlap alone does not
//! solve them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{MergeTable, PairDataset, PairRow, Tokenizer, Vocab, WordMarker};
use crate::error::{Error, Result};

const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub function_words: usize,
    /// Inclusive range of words per sentence.
    pub sentence_words: (usize, usize),
    /// Probability that a word slot holds a function word.
    pub function_rate: f64,
    /// Probability that a content word comes from a random other topic.
    pub topic_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topics: 6,
            words_per_topic: 20,
            function_words: 10,
            sentence_words: (4, 8),
            function_rate: 0.3,
            topic_noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    config: SyntheticConfig,
    vocab: Vocab,
    merges: MergeTable,
    topics: Vec<Vec<String>>,
    function_words: Vec<String>,
}

/// Paths written by [`SyntheticLanguage::write_files`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub corpus: PathBuf,
    pub pairs: PathBuf,
}

impl SyntheticLanguage {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        if config.topics < 2 || config.words_per_topic == 0 || config.sentence_words.0 == 0 {
            return Err(Error::Config("synthetic language needs 2+ topics and non-empty sentences".into()));
        }
        if config.sentence_words.0 > config.sentence_words.1 {
            return Err(Error::Config("sentence_words range is reversed".into()));
        }
        let syllables: Vec<String> = CONSONANTS
            .chars()
            .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let needed = config.topics * config.words_per_topic + config.function_words;
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(needed);
        while words.len() < needed {
            // Function words are short; content words have one to three syllables.
            let n = if words.len() < config.function_words { 1 } else { rng.random_range(1..=3) };
            let w: String = (0..n).map(|_| syllables.choose(&mut rng).expect("non-empty").as_str()).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let function_words = words[..config.function_words].to_vec();
        let topics = words[config.function_words..]
            .chunks(config.words_per_topic)
            .map(<[String]>::to_vec)
            .collect();

        let eow = WordMarker::END_OF_WORD;
        let mut tokens = vec![Vocab::UNK.to_string()];
        tokens.extend(CONSONANTS.chars().map(String::from));
        tokens.extend(VOWELS.chars().map(String::from));
        tokens.extend(VOWELS.chars().map(|v| format!("{v}{eow}")));
        tokens.extend(syllables.iter().cloned());
        tokens.extend(syllables.iter().map(|s| format!("{s}{eow}")));
        let vocab = Vocab::from_tokens(tokens)?;
        let merges = MergeTable::from_pairs(CONSONANTS.chars().flat_map(|c| {
            VOWELS.chars().flat_map(move |v| {
                [(c.to_string(), v.to_string()), (c.to_string(), format!("{v}{eow}"))]
            })
        }))?;
        Ok(SyntheticLanguage {
            config,
            vocab,
            merges,
            topics,
            function_words,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.vocab.clone(), self.merges.clone())
    }

    pub fn topics(&self) -> &[Vec<String>] {
        &self.topics
    }

    fn other_topic(&self, topic: usize, rng: &mut impl Rng) -> usize {
        let t = rng.random_range(0..self.topics.len() - 1);
        if t >= topic { t + 1 } else { t }
    }

    /// One sentence about `topic`.
    pub fn sentence(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let (lo, hi) = self.config.sentence_words;
        let n = rng.random_range(lo..=hi);
        let words: Vec<&str> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.config.function_rate {
                    self.function_words.choose(rng).expect("non-empty").as_str()
                } else {
                    let t = if rng.random::<f64>() < self.config.topic_noise {
                        self.other_topic(topic, rng)
                    } else {
                        topic
                    };
                    self.topics[t].choose(rng).expect("non-empty").as_str()
                }
            })
            .collect();
        words.join(" ")
    }

    /// `n` sentences with uniformly drawn topics.
    pub fn corpus(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let topic = rng.random_range(0..self.topics.len());
                self.sentence(topic, &mut rng)
            })
            .collect()
    }

    /// Graded pairs. The second sentence takes each content word from the
    /// first sentence's topic with a per-pair probability, otherwise from one
    /// other topic; gold is 5 times the realized share from the first topic.
    /// Content words already used by the first sentence are never reused.
    pub fn pairs(&self, n: usize, seed: u64) -> PairDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(n);
        while rows.len() < n {
            let ta = rng.random_range(0..self.topics.len());
            let tb = self.other_topic(ta, &mut rng);
            let a = self.sentence(ta, &mut rng);
            let used: BTreeSet<&str> = a.split(' ').collect();
            let share = rng.random_range(0..=4) as f64 / 4.0;
            let (lo, hi) = self.config.sentence_words;
            let len = rng.random_range(lo..=hi);
            let mut words = Vec::with_capacity(len);
            let (mut content, mut from_a) = (0usize, 0usize);
            while words.len() < len {
                if rng.random::<f64>() < self.config.function_rate {
                    words.push(self.function_words.choose(&mut rng).expect("non-empty").clone());
                    continue;
                }
                let same = rng.random::<f64>() < share;
                let pool = &self.topics[if same { ta } else { tb }];
                let fresh: Vec<&String> = pool.iter().filter(|w| !used.contains(w.as_str())).collect();
                let Some(w) = fresh.choose(&mut rng) else { continue };
                words.push((*w).clone());
                content += 1;
                from_a += same as usize;
            }
            if content == 0 {
                continue;
            }
            rows.push(PairRow {
                text_a: a,
                text_b: words.join(" "),
                gold: 5.0 * from_a as f64 / content as f64,
            });
        }
        PairDataset {
            name: "synthetic-pairs".into(),
            rows,
        }
    }

    /// Writes `vocab.txt`, `merges.txt`, `corpus.txt` and `pairs.tsv` into `dir`.
    pub fn write_files(&self, dir: &Path, sentences: usize, pairs: usize, seed: u64) -> Result<SyntheticFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SyntheticFiles {
            vocab: dir.join("vocab.txt"),
            merges: dir.join("merges.txt"),
            corpus: dir.join("corpus.txt"),
            pairs: dir.join("pairs.tsv"),
        };
        let write = |path: &Path, text: String| std::fs::write(path, text).map_err(|e| Error::io(path, e));
        write(&files.vocab, self.vocab.tokens().join("\n") + "\n")?;
        let merges: Vec<String> = self.merges.pairs().iter().map(|(a, b)| format!("{a} {b}")).collect();
        write(&files.merges, merges.join("\n") + "\n")?;
        write(&files.corpus, self.corpus(sentences, seed).join("\n") + "\n")?;
        let rows: Vec<String> = self
            .pairs(pairs, seed.wrapping_add(1))
            .rows
            .iter()
            .map(|r| format!("{}\t{}\t{}", r.text_a, r.text_b, r.gold))
            .collect();
        write(&files.pairs, rows.join("\n") + "\n")?;
        Ok(files)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_tokenize_into_syllables() {
        let lang = SyntheticLanguage::generate(SyntheticConfig::default()).unwrap();
        let tok = lang.tokenizer();
        for topic in lang.topics() {
            for w in topic {
                let pieces = tok.tokenize_to_strings(w);
                assert_eq!(pieces.len(), w.len() / 2, "{w}");
                assert!(tok.tokenize(w).iter().all(|&id| id != tok.vocab().unk_id()));
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = SyntheticLanguage::generate(SyntheticConfig::default()).unwrap();
        let b = SyntheticLanguage::generate(SyntheticConfig::default()).unwrap();
        assert_eq!(a.corpus(20, 4), b.corpus(20, 4));
        assert_eq!(a.pairs(10, 4), b.pairs(10, 4));
        assert_ne!(a.corpus(20, 4), a.corpus(20, 5));
    }

    #[test]
    fn pair_gold_is_graded() {
        let lang = SyntheticLanguage::generate(SyntheticConfig::default()).unwrap();
        let data = lang.pairs(200, 1);
        let distinct: BTreeSet<u64> = data.rows.iter().map(|r| r.gold.to_bits()).collect();
        assert!(distinct.len() > 4);
        assert!(data.rows.iter().all(|r| (0.0..=5.0).contains(&r.gold)));
    }

    #[test]
    fn files_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let lang = SyntheticLanguage::generate(SyntheticConfig::default()).unwrap();
        let f = lang.write_files(dir.path(), 30, 10, 2).unwrap();
        let tok = Tokenizer::load(&f.vocab, &f.merges).unwrap();
        assert_eq!(tok.vocab(), lang.vocab());
        let corpus = crate::data::read_corpus(&f.corpus, &tok, 128).unwrap();
        assert_eq!(corpus.stats.lines, 30);
        assert_eq!(crate::data::load_pairs(&f.pairs).unwrap().len(), 10);
    }
}
