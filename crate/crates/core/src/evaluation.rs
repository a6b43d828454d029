//! Zero-shot evaluation: pair-similarity correlation and the
//! uniformity/alignment diagnostics.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{PairDataset, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{MergeScore, ModelConfig, ModelParams, Objective};
use crate::objectives::encode_batch;
use crate::structure;

/// Default number of nodes drawn for the uniformity/alignment sample.
pub const DEFAULT_UA_SAMPLE: usize = 2048;

/// Flattened upward root embedding of a token sequence.
pub fn encode_ids(params: &ModelParams, ids: &[usize], score: MergeScore) -> Result<Vec<f64>> {
    let enc = structure::induce_with(params, ids, score)?;
    Ok(enc.root_up().flat().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodeOptions {
    pub merge_score: MergeScore,
    /// Use the embedding row directly for single-token inputs. Encoding a
    /// single token yields that row anyway; the flag only skips the tree.
    pub raw_single_token: bool,
}

/// Tokenizes and encodes a text. `None` when the text has no tokens.
pub fn encode_text(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    text: &str,
    opts: EncodeOptions,
) -> Result<Option<Vec<f64>>> {
    let ids = tokenizer.tokenize(text);
    match ids.len() {
        0 => Ok(None),
        1 if opts.raw_single_token => Ok(Some(params.embed_leaf(ids[0])?.into_flat())),
        _ => encode_ids(params, &ids, opts.merge_score).map(Some),
    }
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j share the mean of ranks i+1..=j+1.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation scaled by 100, with average ranks for ties.
/// Constant input is reported as [`Error::Undefined`].
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predictions for {} gold scores", pred.len(), gold.len())));
    }
    if pred.len() < 2 {
        return Err(Error::Undefined(format!("{} pairs; at least 2 are needed", pred.len())));
    }
    if pred.iter().chain(gold).any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite score".into()));
    }
    let (rp, rg) = (average_ranks(pred), average_ranks(gold));
    let n = rp.len() as f64;
    let (mp, mg) = (rp.iter().sum::<f64>() / n, rg.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vg) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rg) {
        cov += (a - mp) * (b - mg);
        vp += (a - mp) * (a - mp);
        vg += (b - mg) * (b - mg);
    }
    if vp == 0.0 {
        return Err(Error::Undefined("predictions are constant".into()));
    }
    if vg == 0.0 {
        return Err(Error::Undefined("gold scores are constant".into()));
    }
    Ok((100.0 * cov / (vp * vg).sqrt()).clamp(-100.0, 100.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_pairs: usize,
    pub spearman_x100: f64,
    pub skipped: usize,
}

/// Cosine of the two encodings per row, correlated with the gold scores.
/// Rows where either side has no tokens are skipped; more than half skipped
/// is an error.
pub fn eval_pairs(
    params: &ModelParams,
    tokenizer: &Tokenizer,
    dataset: &PairDataset,
    opts: EncodeOptions,
    workers: usize,
) -> Result<EvalReport> {
    let predict = |row: &crate::data::PairRow| -> Result<Option<f64>> {
        let a = encode_text(params, tokenizer, &row.text_a, opts)?;
        let b = encode_text(params, tokenizer, &row.text_b, opts)?;
        Ok(a.zip(b).map(|(a, b)| structure::cosine(&a, &b)))
    };
    let preds: Vec<Option<f64>> = if workers > 1 {
        dataset.rows.par_iter().map(predict).collect::<Result<_>>()?
    } else {
        dataset.rows.iter().map(predict).collect::<Result<_>>()?
    };
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (p, row) in preds.iter().zip(&dataset.rows) {
        if let Some(p) = p {
            pred.push(*p);
            gold.push(row.gold);
        }
    }
    let skipped = dataset.len() - pred.len();
    if 2 * skipped > dataset.len() {
        return Err(Error::Evaluation(format!(
            "{}: {skipped} of {} rows have no tokens",
            dataset.name,
            dataset.len()
        )));
    }
    Ok(EvalReport {
        dataset: dataset.name.clone(),
        n_pairs: pred.len(),
        spearman_x100: spearman(&pred, &gold)?,
        skipped,
    })
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(uniformity, alignment)` of upward/downward views of the same nodes.
///
/// After L2 normalization, alignment is the mean of `|up_i - down_i|^2` and
/// uniformity is `log mean exp(-2 |x - y|^2)` over unordered distinct pairs
/// of the pooled upward and downward points. Lower is better for both.
pub fn uniformity_alignment(up: &[Vec<f64>], down: &[Vec<f64>]) -> Result<(f64, f64)> {
    if up.len() != down.len() {
        return Err(Error::Input(format!("{} upward vs {} downward vectors", up.len(), down.len())));
    }
    let pooled: Vec<Vec<f64>> = up.iter().chain(down).map(|v| normalized(v)).collect();
    if pooled.len() < 2 {
        return Err(Error::Undefined("uniformity needs at least 2 points".into()));
    }
    let n = up.len();
    let alignment = (0..n).map(|i| sq_dist(&pooled[i], &pooled[n + i])).sum::<f64>() / n as f64;
    let row_sums: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .map(|i| {
            pooled[i + 1..]
                .iter()
                .map(|y| (-2.0 * sq_dist(&pooled[i], y)).exp())
                .sum::<f64>()
        })
        .collect();
    let pairs = pooled.len() * (pooled.len() - 1) / 2;
    let uniformity = (row_sums.iter().sum::<f64>() / pairs as f64).ln();
    Ok((uniformity, alignment))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UaReport {
    pub dataset: String,
    pub uniformity: f64,
    pub alignment: f64,
    pub nodes: usize,
    /// Which nodes were pooled; always every node kind (leaves and internal).
    pub pooling: &'static str,
}

/// Uniformity/alignment over a deterministic sample of at most `max_nodes`
/// nodes from the encoded `sentences`.
pub fn ua_report(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &str,
    sentences: &[Vec<usize>],
    max_nodes: usize,
    seed: u64,
) -> Result<UaReport> {
    let nodes = encode_batch(params, config.merge_score, sentences)?;
    let m = nodes.m();
    let picked: Vec<usize> = if m > max_nodes {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), m, max_nodes).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..m).collect()
    };
    let up: Vec<Vec<f64>> = picked.iter().map(|&i| nodes.up[i].clone()).collect();
    let down: Vec<Vec<f64>> = picked.iter().map(|&i| nodes.down[i].clone()).collect();
    let (uniformity, alignment) = uniformity_alignment(&up, &down)?;
    Ok(UaReport {
        dataset: dataset.to_string(),
        uniformity,
        alignment,
        nodes: picked.len(),
        pooling: "all-nodes",
    })
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub objective: Objective,
    pub k: usize,
    pub u: usize,
    pub seed: u64,
    pub score: f64,
}

/// Appends to a CSV with columns `dataset,objective,k,u,seed,score`,
/// writing the header when the file is new or empty.
pub fn append_result(path: impl AsRef<Path>, row: &ResultRow) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("dataset,objective,k,u,seed,score\n");
    }
    text.push_str(&format!(
        "{},{},{},{},{},{}\n",
        row.dataset, row.objective, row.k, row.u, row.seed, row.score
    ));
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
