//! Saving and loading a checkpoint with optimizer state.

use selfstrae::data::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use selfstrae::model::{ModelConfig, ModelParams};
use selfstrae::trainer::AdamState;

fn main() -> selfstrae::Result<()> {
    let config = ModelConfig::new(100, 8, 4)?;
    let params = ModelParams::new(&config, 1)?;
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            config: config.clone(),
            vocab_fingerprint: "example".into(),
            seed: 1,
            epoch: 0,
            adam: None,
        },
        optimizer: Some(AdamState::new(&params)),
        params,
    };
    let dir = std::env::temp_dir().join(format!("selfstrae-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| selfstrae::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("model.ssae");
    save_checkpoint(&path, &ckpt)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let back = load_checkpoint(&path)?;
    println!("wrote {} ({bytes} bytes, {} parameters)", path.display(), back.params.total_len());
    println!("config restored: {}", back.config() == &config);
    println!("parameters restored bit-for-bit: {}", back.params == ckpt.params);
    println!("optimizer state present: {}", back.optimizer.is_some());
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
