//! BPE tokenization with a vocabulary and merge table.
//!
//! Run with `cargo run --example tokenize -- [VOCAB MERGES] [TEXT...]`. Without
//! files, the generated toy language's tokenizer is used.

use selfstrae::data::Tokenizer;
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};

fn main() -> selfstrae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (tokenizer, texts) = if args.len() >= 2 && std::path::Path::new(&args[0]).is_file() {
        (Tokenizer::load(&args[0], &args[1])?, args[2..].to_vec())
    } else {
        let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
        (lang.tokenizer(), lang.corpus(3, 7))
    };
    println!("vocabulary: {} tokens, {} merges", tokenizer.vocab().len(), tokenizer.merges().len());
    println!("fingerprint: {}", tokenizer.vocab().fingerprint());
    for text in texts {
        let pieces = tokenizer.tokenize_to_strings(&text);
        let ids = tokenizer.tokenize(&text);
        println!("{text:?}");
        println!("  pieces: {}", pieces.join(" | "));
        println!("  ids:    {ids:?}");
    }
    Ok(())
}
