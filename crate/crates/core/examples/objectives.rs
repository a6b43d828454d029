//! The four training objectives evaluated on one batch, with their parts.

use selfstrae::model::{ModelConfig, ModelParams, Objective};
use selfstrae::objectives::{batch_loss, encode_batch, BatchOptions};
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};

fn main() -> selfstrae::Result<()> {
    let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
    let tokenizer = lang.tokenizer();
    let batch: Vec<Vec<usize>> = lang.corpus(8, 5).iter().map(|s| tokenizer.tokenize(s)).collect();
    let base = ModelConfig::new(tokenizer.vocab().len(), 32, 2)?;
    let params = ModelParams::new(&base, 0)?;

    let nodes = encode_batch(&params, base.merge_score, &batch)?;
    println!("{} sentences, {} nodes, {} internal", batch.len(), nodes.m(), nodes.i());
    for objective in Objective::ALL {
        let config = base.clone().with_objective(objective);
        let out = batch_loss(&params, &config, &batch, &BatchOptions::default())?;
        let part = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{objective:<12} loss {:.4}  ce {:>7}  contrastive {:>7}",
            out.loss,
            part(out.ce_part),
            part(out.contrastive_part)
        );
    }
    Ok(())
}
