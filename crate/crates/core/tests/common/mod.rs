#![allow(dead_code)]

use std::path::{Path, PathBuf};

use selfstrae::data::{save_checkpoint, Checkpoint, CheckpointMeta, MergeTable, Vocab};
use selfstrae::model::{ModelConfig, ModelParams, ParamTensor};
use selfstrae::synthetic::{SyntheticFiles, SyntheticLanguage, SyntheticConfig};

pub fn toy_files(dir: &Path, sentences: usize, pairs: usize) -> SyntheticFiles {
    SyntheticLanguage::generate(SyntheticConfig::default())
        .unwrap()
        .write_files(dir, sentences, pairs, 1)
        .unwrap()
}

pub struct Fixture {
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub checkpoint: PathBuf,
    pub words: Vec<&'static str>,
}

/// A one-channel, width-two model over three whole-word tokens whose leaf
/// embeddings have adjacent cosines 0.4 and 0.6, so the second pair merges first.
pub fn three_word_fixture(dir: &Path) -> Fixture {
    let words = vec!["Homer", "ate", "doughnuts"];
    let mut tokens = vec![Vocab::UNK.to_string()];
    let mut merges = Vec::new();
    for w in &words {
        let chars: Vec<char> = w.chars().collect();
        for c in &chars {
            if !tokens.contains(&c.to_string()) {
                tokens.push(c.to_string());
            }
        }
        for end in 2..=chars.len() {
            let left: String = chars[..end - 1].iter().collect();
            merges.push((left.clone(), chars[end - 1].to_string()));
            let full: String = chars[..end].iter().collect();
            if !tokens.contains(&full) {
                tokens.push(full);
            }
        }
    }
    let vocab = Vocab::from_tokens(tokens.clone()).unwrap();
    MergeTable::from_pairs(merges.clone()).unwrap();

    let config = ModelConfig::new(vocab.len(), 1, 2).unwrap();
    let mut params = ModelParams::new(&config, 0).unwrap();
    let a = 0.4f64.acos();
    let b = a + 0.6f64.acos();
    let emb = params.tensor_mut(ParamTensor::Embedding).unwrap();
    for (w, angle) in words.iter().zip([0.0, a, b]) {
        let id = vocab.id(w).unwrap();
        emb[2 * id] = angle.cos();
        emb[2 * id + 1] = angle.sin();
    }

    let f = Fixture {
        vocab: dir.join("vocab.txt"),
        merges: dir.join("merges.txt"),
        checkpoint: dir.join("fixture.ssae"),
        words,
    };
    std::fs::write(&f.vocab, tokens.join("\n") + "\n").unwrap();
    let lines: Vec<String> = merges.iter().map(|(l, r)| format!("{l} {r}")).collect();
    std::fs::write(&f.merges, lines.join("\n") + "\n").unwrap();
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config,
            vocab_fingerprint: vocab.fingerprint(),
            seed: 0,
            epoch: 0,
            adam: None,
        },
        params,
        optimizer: None,
    };
    save_checkpoint(&f.checkpoint, &ckpt).unwrap();
    f
}
