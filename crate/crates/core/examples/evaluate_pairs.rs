//! Zero-shot evaluation: Spearman correlation of root-embedding cosines with
//! gold similarity, and uniformity/alignment of node embeddings.
//!
//! Run with `cargo run --example evaluate_pairs -- [CHECKPOINT VOCAB MERGES PAIRS]`.
//! Without arguments an untrained model is scored on the toy language.

use selfstrae::data::{load_checkpoint, load_pairs, Tokenizer};
use selfstrae::evaluation::{eval_pairs, ua_report, EncodeOptions, DEFAULT_UA_SAMPLE};
use selfstrae::model::{ModelConfig, ModelParams};
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};

fn main() -> selfstrae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (params, config, tokenizer, pairs) = if let [ckpt, vocab, merges, pairs] = args.as_slice() {
        let ckpt = load_checkpoint(ckpt)?;
        let config = ckpt.config().clone();
        (ckpt.params, config, Tokenizer::load(vocab, merges)?, load_pairs(pairs)?)
    } else {
        let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
        let tokenizer = lang.tokenizer();
        let config = ModelConfig::new(tokenizer.vocab().len(), 128, 2)?;
        (ModelParams::new(&config, 0)?, config, tokenizer, lang.pairs(300, 2))
    };
    let opts = EncodeOptions {
        merge_score: config.merge_score,
        raw_single_token: false,
    };
    let report = eval_pairs(&params, &tokenizer, &pairs, opts, 1)?;
    println!(
        "{}: {} pairs, {} skipped, spearman x100 = {:.2}",
        report.dataset, report.n_pairs, report.skipped, report.spearman_x100
    );
    let sentences: Vec<Vec<usize>> = pairs
        .rows
        .iter()
        .flat_map(|r| [tokenizer.tokenize(&r.text_a), tokenizer.tokenize(&r.text_b)])
        .filter(|s| !s.is_empty())
        .collect();
    let ua = ua_report(&params, &config, &pairs.name, &sentences, DEFAULT_UA_SAMPLE, 0)?;
    println!("uniformity {:.4}, alignment {:.4} over {} nodes", ua.uniformity, ua.alignment, ua.nodes);
    Ok(())
}
