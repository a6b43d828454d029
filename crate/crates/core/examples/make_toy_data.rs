//! Writes the toy language's vocabulary, merges, corpus and pair dataset to a
//! directory, ready for the `self-strae` command-line tool.
//!
//! Run with `cargo run --example make_toy_data -- DIR [SENTENCES] [PAIRS]`.

use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};

fn main() -> selfstrae::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "toy-data".into());
    let sentences = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let pairs = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
    let files = lang.write_files(dir.as_ref(), sentences, pairs, 1)?;
    for path in [&files.vocab, &files.merges, &files.corpus, &files.pairs] {
        println!("{}", path.display());
    }
    Ok(())
}
