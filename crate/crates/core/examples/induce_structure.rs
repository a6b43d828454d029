//! Greedy structure induction: the most similar adjacent pair is merged until
//! one root remains, and the merge order defines the tree.

use selfstrae::model::{ModelConfig, ModelParams};
use selfstrae::structure::{adjacent_cosines, decode, induce, to_bracket};
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};

fn main() -> selfstrae::Result<()> {
    let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
    let tokenizer = lang.tokenizer();
    let config = ModelConfig::new(tokenizer.vocab().len(), 16, 4)?;
    let params = ModelParams::new(&config, 3)?;

    for text in lang.corpus(4, 11) {
        let ids = tokenizer.tokenize(&text);
        let words: Vec<String> = ids.iter().map(|&id| tokenizer.display(id)).collect();
        let leaves: Vec<_> = ids.iter().map(|&id| params.embed_leaf(id)).collect::<Result<_, _>>()?;
        let scores: Vec<String> = adjacent_cosines(&leaves).iter().map(|c| format!("{c:.3}")).collect();
        let enc = decode(&params, induce(&params, &ids)?)?;
        println!("{text}");
        println!("  leaf cosines: [{}]", scores.join(", "));
        println!("  tree:         {}", to_bracket(&enc.tree, &words)?);
        for id in enc.tree.internal_ids() {
            let span = enc.tree.span(id);
            let down = &enc.down.as_ref().expect("decoded")[id];
            println!("    node {id} covers {span:?}: |up| {:.3}, |down| {:.3}", enc.up[id].norm(), down.norm());
        }
    }
    Ok(())
}
