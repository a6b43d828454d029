//! Sweeping the channel layout at a fixed embedding size: more, narrower
//! channels shrink the shared composition parameters quadratically.
//!
//! Run with `cargo run --release --example channel_sweep -- [EPOCHS]`.

use selfstrae::evaluation::{eval_pairs, EncodeOptions};
use selfstrae::model::{non_embedding_param_count, Objective};
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};
use selfstrae::trainer::{train, TrainConfig};

fn main() -> selfstrae::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
    let tokenizer = lang.tokenizer();
    let corpus: Vec<Vec<usize>> = lang.corpus(300, 1).iter().map(|s| tokenizer.tokenize(s)).collect();
    let pairs = lang.pairs(200, 2);

    println!("{:>4} {:>4} {:>12} {:>14}", "k", "u", "non-embed", "spearman x100");
    for (k, u) in [(8, 32), (32, 8), (64, 4), (128, 2), (256, 1)] {
        let config = TrainConfig {
            objective: Objective::Ceco,
            channels: k,
            channel_width: u,
            dim: k * u,
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&config, tokenizer.vocab().len(), "toy", &corpus, None)?;
        let score = eval_pairs(&out.checkpoint.params, &tokenizer, &pairs, EncodeOptions::default(), 1)
            .map_or(f64::NAN, |r| r.spearman_x100);
        println!("{k:>4} {u:>4} {:>12} {score:>14.2}", non_embedding_param_count(k, u));
    }
    Ok(())
}
