//! Training on the generated toy language with zero-shot pair evaluation
//! after every epoch. Writes checkpoints and a metrics CSV to a temp dir.
//!
//! Run with `cargo run --release --example train_toy -- [OBJECTIVE] [EPOCHS]`.

use selfstrae::evaluation::{eval_pairs, EncodeOptions};
use selfstrae::model::{ModelConfig, ModelParams, Objective};
use selfstrae::synthetic::{SyntheticLanguage, SyntheticConfig};
use selfstrae::trainer::{train, TrainConfig};

fn main() -> selfstrae::Result<()> {
    let mut args = std::env::args().skip(1);
    let objective: Objective = args.next().map_or(Ok(Objective::Ceco), |s| s.parse())?;
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);

    let lang = SyntheticLanguage::generate(SyntheticConfig::default())?;
    let tokenizer = lang.tokenizer();
    let corpus: Vec<Vec<usize>> = lang.corpus(1000, 1).iter().map(|s| tokenizer.tokenize(s)).collect();
    let pairs = lang.pairs(300, 2);
    let out_dir = std::env::temp_dir().join(format!("selfstrae-train-{}", std::process::id()));

    let config = TrainConfig {
        objective,
        epochs,
        batch_size: 16,
        checkpoint_dir: Some(out_dir.clone()),
        metrics_path: Some(out_dir.join("metrics.csv")),
        ..TrainConfig::default()
    };
    let mut hook = |p: &ModelParams, _: &ModelConfig| {
        let report = eval_pairs(p, &tokenizer, &pairs, EncodeOptions::default(), 1)?;
        Ok(vec![(pairs.name.clone(), report.spearman_x100)])
    };
    let outcome = train(
        &config,
        tokenizer.vocab().len(),
        &tokenizer.vocab().fingerprint(),
        &corpus,
        Some(&mut hook),
    )?;
    for m in &outcome.metrics {
        println!("epoch {:>2}  loss {:.4}  spearman x100 {:>6.2}  ({:.1}s)", m.epoch, m.mean_loss, m.evals[0].1, m.seconds);
    }
    println!("checkpoints and metrics in {}", out_dir.display());
    Ok(())
}
