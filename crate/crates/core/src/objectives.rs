//! Training objectives.
//!
//! The standalone functions (`loss_ce`, `loss_contrastive`, `loss_ceco`)
//! evaluate a loss on plain vectors. [`batch_loss`] runs the whole model on a
//! batch of sentences and returns the loss together with its parameter
//! gradient; it is what the trainer and the gradient checker call.
//!
//! A batch is evaluated in two stages. Each sentence is induced, replayed and
//! decoded on its own tape (these are independent and may run in parallel).
//! The node embeddings are then copied onto a batch tape where the losses
//! join them, and the batch tape's input gradients are fed back into the
//! sentence tapes as seeds. Sentence gradients are summed in input order.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Axis, OpKind, ParamGrads, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ChannelEmbedding, MergeScore, ModelConfig, ModelParams, Objective};
use crate::structure::{self, EncodedSentence, MergeTree};

static CONTRASTIVE_SKIPS: AtomicU64 = AtomicU64::new(0);

/// How many contrastive terms were skipped because they had no rows.
pub fn contrastive_skips() -> u64 {
    CONTRASTIVE_SKIPS.load(Ordering::Relaxed)
}

/// Averaging of the leaf cross-entropy across a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeNormalization {
    /// Mean over every leaf token in the batch.
    #[default]
    Token,
    /// Mean over sentences of each sentence's mean.
    Sentence,
}

/// Mean negative log-likelihood of `targets` under softmax(`logits`).
pub fn loss_ce(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::Input(format!("{} logit rows for {} targets", logits.len(), targets.len())));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let v = logits[0].len();
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Vocabulary { id: bad, vocab_size: v });
    }
    let mut tape = Tape::detached();
    let x = tape.input(logits.len(), v, logits.concat())?;
    let nll = tape.tempered_nll(x, 1.0, Axis::Rows, targets.to_vec())?;
    let s = tape.sum(nll);
    let mean = tape.scale(s, 1.0 / targets.len() as f64);
    tape.scalar(mean)
}

/// Symmetric contrastive loss between aligned `up` and `down` rows.
///
/// Rows are L2-normalized, `A = up * down^T`, and the loss is the mean of
/// the row-wise and column-wise tempered cross-entropies with the diagonal
/// as the positive entry. Empty input scores 0.
pub fn loss_contrastive(up: &[Vec<f64>], down: &[Vec<f64>], tau: f64) -> Result<f64> {
    if up.len() != down.len() {
        return Err(Error::Input(format!("{} upward rows vs {} downward rows", up.len(), down.len())));
    }
    if up.is_empty() {
        CONTRASTIVE_SKIPS.fetch_add(1, Ordering::Relaxed);
        return Ok(0.0);
    }
    let d = up[0].len();
    let mut tape = Tape::detached();
    let u = tape.input(up.len(), d, up.concat())?;
    let w = tape.input(down.len(), d, down.concat())?;
    let loss = contrastive_term(&mut tape, u, w, tau)?;
    tape.scalar(loss)
}

/// Builds the contrastive loss over two `M x E` blocks on a tape.
pub fn contrastive_term(tape: &mut Tape<'_>, up: Var, down: Var, tau: f64) -> Result<Var> {
    let m = tape.shape(up).0;
    let nu = tape.normalize_rows(up)?;
    let nd = tape.normalize_rows(down)?;
    let a = tape.gram(nu, nd)?;
    let rows = tape.tempered_nll(a, tau, Axis::Rows, (0..m).collect())?;
    let cols = tape.tempered_nll(a, tau, Axis::Cols, (0..m).collect())?;
    let (r, c) = (tape.sum(rows), tape.sum(cols));
    let both = tape.add(r, c)?;
    Ok(tape.scale(both, 1.0 / (2 * m) as f64))
}

/// Every node of a batch, flattened, in sentence order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNodes {
    pub up: Vec<Vec<f64>>,
    pub down: Vec<Vec<f64>>,
    /// Token id for leaves, `None` for internal nodes.
    pub leaf_targets: Vec<Option<usize>>,
    pub internal_mask: Vec<bool>,
    pub sentence_spans: Vec<Range<usize>>,
}

impl BatchNodes {
    /// Collects decoded sentences.
    pub fn from_encoded(sentences: &[EncodedSentence]) -> Result<Self> {
        let mut nodes = BatchNodes {
            up: Vec::new(),
            down: Vec::new(),
            leaf_targets: Vec::new(),
            internal_mask: Vec::new(),
            sentence_spans: Vec::new(),
        };
        for enc in sentences {
            let down = enc
                .down
                .as_ref()
                .ok_or_else(|| Error::Input("sentence has not been decoded".into()))?;
            let start = nodes.up.len();
            for (id, node) in enc.tree.nodes().iter().enumerate() {
                nodes.up.push(enc.up[id].flat().to_vec());
                nodes.down.push(down[id].flat().to_vec());
                match *node {
                    structure::TreeNode::Leaf { token_id, .. } => {
                        nodes.leaf_targets.push(Some(token_id));
                        nodes.internal_mask.push(false);
                    }
                    structure::TreeNode::Internal { .. } => {
                        nodes.leaf_targets.push(None);
                        nodes.internal_mask.push(true);
                    }
                }
            }
            nodes.sentence_spans.push(start..nodes.up.len());
        }
        Ok(nodes)
    }

    /// Total node count.
    pub fn m(&self) -> usize {
        self.up.len()
    }

    /// Internal node count.
    pub fn i(&self) -> usize {
        self.internal_mask.iter().filter(|&&b| b).count()
    }

    fn select(&self, rows: &[Vec<f64>], internal: bool) -> Vec<Vec<f64>> {
        rows.iter()
            .zip(&self.internal_mask)
            .filter(|(_, &m)| m == internal)
            .map(|(r, _)| r.clone())
            .collect()
    }

    pub fn internal_up(&self) -> Vec<Vec<f64>> {
        self.select(&self.up, true)
    }

    pub fn internal_down(&self) -> Vec<Vec<f64>> {
        self.select(&self.down, true)
    }

    pub fn leaf_down(&self) -> Vec<Vec<f64>> {
        self.select(&self.down, false)
    }

    pub fn targets(&self) -> Vec<usize> {
        self.leaf_targets.iter().flatten().copied().collect()
    }
}

/// Cross-entropy over the leaves plus contrastive over the internal nodes, halved.
pub fn loss_ceco(batch: &BatchNodes, leaf_logits: &[Vec<f64>], tau: f64) -> Result<f64> {
    let ce = loss_ce(leaf_logits, &batch.targets())?;
    let cont = loss_contrastive(&batch.internal_up(), &batch.internal_down(), tau)?;
    Ok(0.5 * (ce + cont))
}

/// Plain forward pass over a batch: induce then decode every sentence.
pub fn encode_batch(params: &ModelParams, score: MergeScore, sentences: &[Vec<usize>]) -> Result<BatchNodes> {
    let encoded = sentences
        .iter()
        .map(|s| structure::decode(params, structure::induce_with(params, s, score)?))
        .collect::<Result<Vec<_>>>()?;
    BatchNodes::from_encoded(&encoded)
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// More than one enables per-sentence parallelism on the current rayon pool.
    pub workers: usize,
    /// Seeds the dropout masks of the two-pass objective.
    pub dropout_seed: u64,
    pub ce_normalization: CeNormalization,
    /// Negates one op's adjoint on every tape (fault injection for checks).
    pub fault: Option<OpKind>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            workers: 1,
            dropout_seed: 0,
            ce_normalization: CeNormalization::Token,
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub ce_part: Option<f64>,
    pub contrastive_part: Option<f64>,
    pub grads: ParamGrads,
}

struct SentencePass<'p> {
    tape: Tape<'p>,
    tree: MergeTree,
    up: Vec<Var>,
    down: Vec<Var>,
}

impl SentencePass<'_> {
    fn internal(&self) -> Range<usize> {
        self.tree.internal_ids()
    }
}

fn sentence_pass<'p>(
    params: &'p ModelParams,
    tokens: &[usize],
    mask: Option<&[f64]>,
    score: MergeScore,
    fault: Option<OpKind>,
) -> Result<SentencePass<'p>> {
    let (k, u, e) = (params.channels(), params.channel_width(), params.dim());
    let mut tape = Tape::new(params).with_fault(fault);
    let mut up = Vec::with_capacity(2 * tokens.len());
    let mut leaves = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let mut v = tape.lookup(t)?;
        if let Some(mask) = mask {
            v = tape.mask_mul(v, mask[i * e..(i + 1) * e].to_vec())?;
        }
        leaves.push(ChannelEmbedding::from_flat(k, u, tape.value(v).to_vec())?);
        up.push(v);
    }
    // The structure is chosen on plain values and replayed on the tape.
    let enc = structure::induce_frontier(tokens, leaves, score, |a, b| params.compose(a, b))?;
    for (l, r) in enc.tree.merges() {
        let parent = tape.compose(up[l], up[r])?;
        up.push(parent);
    }
    let tree = enc.tree;
    let root = tree.root();
    let mut down = vec![up[root]; tree.len()];
    for id in tree.internal_ids().rev() {
        if let Some((l, r)) = tree.children(id) {
            let (dl, dr) = tape.decompose(down[id])?;
            down[l] = dl;
            down[r] = dr;
        }
    }
    Ok(SentencePass { tape, tree, up, down })
}

fn dropout_mask(seed: u64, pass: usize, sentence: usize, len: usize, p: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((pass as u64) << 48) | sentence as u64);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Rows of a batch-tape input block, remembered so their gradients can be
/// routed back to the sentence tapes.
struct Block {
    var: Var,
    sources: Vec<(usize, usize, Var)>,
}

fn gather_block(
    tape: &mut Tape<'_>,
    passes: &[Vec<SentencePass<'_>>],
    dim: usize,
    rows: impl Iterator<Item = (usize, usize, Var)>,
) -> Result<Block> {
    let sources: Vec<_> = rows.collect();
    let mut data = Vec::with_capacity(sources.len() * dim);
    for &(p, s, v) in &sources {
        data.extend_from_slice(passes[p][s].tape.value(v));
    }
    let var = tape.input(sources.len(), dim, data)?;
    Ok(Block { var, sources })
}

fn map_maybe_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    if workers > 1 {
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Loss and parameter gradient of `config.objective` on a batch of sentences.
pub fn batch_loss(
    params: &ModelParams,
    config: &ModelConfig,
    sentences: &[Vec<usize>],
    opts: &BatchOptions,
) -> Result<BatchLoss> {
    if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
        return Err(Error::Input("batch must contain non-empty sentences".into()));
    }
    let objective = config.objective;
    let e = params.dim();
    let n_passes = if objective == Objective::StrCse { 2 } else { 1 };
    let mut passes = Vec::with_capacity(n_passes);
    for pass in 0..n_passes {
        passes.push(map_maybe_parallel(sentences, opts.workers, |s, tokens| {
            let mask = (objective == Objective::StrCse)
                .then(|| dropout_mask(opts.dropout_seed, pass, s, tokens.len() * e, config.dropout_p));
            sentence_pass(params, tokens, mask.as_deref(), config.merge_score, opts.fault)
        })?);
    }

    let mut tape = Tape::new(params).with_fault(opts.fault);
    let mut blocks = Vec::new();
    let mut ce_var = None;
    let mut cont_var = None;

    if objective.uses_dembedding() {
        let leaves = (0..n_passes).flat_map(|p| {
            passes[p].iter().enumerate().flat_map(move |(s, sp)| {
                (0..sp.tree.sentence_len()).map(move |id| (p, s, sp.down[id]))
            })
        });
        let block = gather_block(&mut tape, &passes, e, leaves)?;
        let targets: Vec<usize> = (0..n_passes)
            .flat_map(|_| sentences.iter().flatten().copied())
            .collect();
        let nll = tape.dembed_nll(block.var, targets)?;
        let ce = match opts.ce_normalization {
            CeNormalization::Token => {
                let s = tape.sum(nll);
                tape.scale(s, 1.0 / block.sources.len() as f64)
            }
            CeNormalization::Sentence => {
                let denom = (n_passes * sentences.len()) as f64;
                let weights: Vec<f64> = (0..n_passes)
                    .flat_map(|_| sentences.iter().flat_map(|s| std::iter::repeat_n(1.0 / (s.len() as f64 * denom), s.len())))
                    .collect();
                let w = tape.input(1, weights.len(), weights)?;
                let weighted = tape.mul(nll, w)?;
                tape.sum(weighted)
            }
        };
        ce_var = Some(ce);
        blocks.push(block);
    }

    let pairs: Option<(Vec<(usize, usize, Var)>, Vec<(usize, usize, Var)>)> = match objective {
        Objective::Ce => None,
        Objective::Contrastive => Some((
            passes[0].iter().enumerate().flat_map(|(s, sp)| sp.up.iter().map(move |&v| (0, s, v))).collect(),
            passes[0].iter().enumerate().flat_map(|(s, sp)| sp.down.iter().map(move |&v| (0, s, v))).collect(),
        )),
        Objective::Ceco => Some((
            passes[0].iter().enumerate().flat_map(|(s, sp)| sp.internal().map(move |id| (0, s, sp.up[id]))).collect(),
            passes[0].iter().enumerate().flat_map(|(s, sp)| sp.internal().map(move |id| (0, s, sp.down[id]))).collect(),
        )),
        // Internal ids are `T + merge_step` in both passes, so equal ids pair by merge step.
        Objective::StrCse => Some((
            passes[0].iter().enumerate().flat_map(|(s, sp)| sp.internal().map(move |id| (0, s, sp.down[id]))).collect(),
            passes[1].iter().enumerate().flat_map(|(s, sp)| sp.internal().map(move |id| (1, s, sp.down[id]))).collect(),
        )),
    };
    let mut contrastive_value = None;
    if let Some((left, right)) = pairs {
        if left.is_empty() {
            CONTRASTIVE_SKIPS.fetch_add(1, Ordering::Relaxed);
            contrastive_value = Some(0.0);
        } else {
            let a = gather_block(&mut tape, &passes, e, left.into_iter())?;
            let b = gather_block(&mut tape, &passes, e, right.into_iter())?;
            cont_var = Some(contrastive_term(&mut tape, a.var, b.var, config.tau)?);
            blocks.push(a);
            blocks.push(b);
        }
    }

    let loss_var = match (objective, ce_var, cont_var) {
        (Objective::Ce, Some(ce), _) => ce,
        (Objective::Contrastive, _, Some(c)) => c,
        (Objective::Contrastive, _, None) => tape.input(1, 1, vec![0.0])?,
        (_, Some(ce), Some(c)) => {
            let s = tape.add(ce, c)?;
            tape.scale(s, 0.5)
        }
        (_, Some(ce), None) => tape.scale(ce, 0.5),
        _ => unreachable!("every objective builds at least one term"),
    };
    let loss = tape.scalar(loss_var)?;
    let ce_part = ce_var.map(|v| tape.scalar(v)).transpose()?;
    let contrastive_part = match cont_var {
        Some(v) => Some(tape.scalar(v)?),
        None => contrastive_value,
    };

    let batch_grads = tape.backward(loss_var)?;
    let mut seeds: Vec<Vec<Vec<(Var, Vec<f64>)>>> = passes
        .iter()
        .map(|p| p.iter().map(|_| Vec::new()).collect())
        .collect();
    for block in &blocks {
        let g = batch_grads.wrt(block.var);
        for (r, &(p, s, v)) in block.sources.iter().enumerate() {
            seeds[p][s].push((v, g[r * e..(r + 1) * e].to_vec()));
        }
    }
    let mut grads = batch_grads.params;
    for (p, pass) in passes.iter().enumerate() {
        let sentence_grads = map_maybe_parallel(pass, opts.workers, |s, sp| {
            let seed_refs: Vec<(Var, &[f64])> = seeds[p][s].iter().map(|(v, g)| (*v, g.as_slice())).collect();
            Ok(sp.tape.backward_seeded(&seed_refs)?.params)
        })?;
        for g in &sentence_grads {
            grads.accumulate(g);
        }
    }
    Ok(BatchLoss {
        loss,
        ce_part,
        contrastive_part,
        grads,
    })
}

/// Two-pass dropout objective on a batch, value only.
pub fn loss_strcse(
    params: &ModelParams,
    config: &ModelConfig,
    sentences: &[Vec<usize>],
    tau: f64,
    dropout_p: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = ModelConfig {
        objective: Objective::StrCse,
        tau,
        dropout_p,
        ..config.clone()
    };
    cfg.validate()?;
    let opts = BatchOptions {
        dropout_seed: seed,
        ..BatchOptions::default()
    };
    Ok(batch_loss(params, &cfg, sentences, &opts)?.loss)
}

/// Outcome of [`gradcheck_objective`].
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ObjectiveCheck {
    pub objective: Objective,
    pub configs: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares [`batch_loss`] gradients with central differences on `configs`
/// random tiny models (V = 20, k = 4, u = 3, one to three sentences of at
/// most six tokens, tied or untied). Dropout masks are frozen per config.
pub fn gradcheck_objective(
    objective: Objective,
    seed: u64,
    configs: usize,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<ObjectiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut passed = true;
    for _ in 0..configs {
        let cfg = ModelConfig::new(20, 4, 3)?
            .with_objective(objective)
            .with_tied(rng.random::<bool>())
            .with_dropout(0.2);
        let params = ModelParams::new(&cfg, rng.random())?;
        let sentences: Vec<Vec<usize>> = (0..rng.random_range(1..=3))
            .map(|_| {
                let len = rng.random_range(1..=6);
                (0..len).map(|_| rng.random_range(0..20)).collect()
            })
            .collect();
        let opts = BatchOptions {
            dropout_seed: rng.random(),
            fault,
            ..BatchOptions::default()
        };
        let report = crate::autograd::grad_check(&params, 1e-6, tol, |q| {
            let out = batch_loss(q, &cfg, &sentences, &opts)?;
            Ok((out.loss, out.grads.to_dense(q)))
        })?;
        max_rel_err = max_rel_err.max(report.max_rel_err);
        passed &= report.passed();
    }
    Ok(ObjectiveCheck {
        objective,
        configs,
        max_rel_err,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::Rng;

    /// Direct transcription: build A entrywise, take each row's and each
    /// column's log-softmax at the diagonal, sum, scale by -1/2M.
    fn contrastive_oracle(up: &[Vec<f64>], down: &[Vec<f64>], tau: f64) -> f64 {
        let m = up.len();
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut a = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let d: f64 = up[i].iter().zip(&down[j]).map(|(x, y)| x * y).sum();
                a[i][j] = d / (norm(&up[i]) * norm(&down[j]));
            }
        }
        let mut total = 0.0;
        for i in 0..m {
            let z: f64 = (0..m).map(|j| (a[i][j] / tau).exp()).sum();
            total += ((a[i][i] / tau).exp() / z).ln();
        }
        for j in 0..m {
            let z: f64 = (0..m).map(|i| (a[i][j] / tau).exp()).sum();
            total += ((a[j][j] / tau).exp() / z).ln();
        }
        -total / (2 * m) as f64
    }

    fn random_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = loss_ce(&[vec![0.3; 4]], &[2]).unwrap();
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let saturated = loss_ce(&[vec![0.0, 1000.0, 0.0]], &[1]).unwrap();
        assert!(saturated.abs() < 1e-12);
        let hand = loss_ce(&[vec![1.0, 2.0, 3.0]], &[2]).unwrap();
        assert!((hand - 0.40760596444438).abs() < 1e-12);
        assert!(matches!(loss_ce(&[vec![0.0; 3]], &[3]), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn contrastive_closed_forms() {
        assert_eq!(loss_contrastive(&[vec![0.2, 0.5]], &[vec![-1.0, 3.0]], 1.2).unwrap(), 0.0);
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = loss_contrastive(&id, &id, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
        let before = contrastive_skips();
        assert_eq!(loss_contrastive(&[], &[], 1.0).unwrap(), 0.0);
        assert!(contrastive_skips() > before);
    }

    #[test]
    fn contrastive_matches_transcription_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = rng.random_range(1..=6);
            let d = rng.random_range(1..=5);
            let tau = rng.random_range(0.3..2.0);
            let (up, down) = (random_rows(&mut rng, m, d), random_rows(&mut rng, m, d));
            let got = loss_contrastive(&up, &down, tau).unwrap();
            assert!((got - contrastive_oracle(&up, &down, tau)).abs() < 1e-10);
        }
    }

    #[test]
    fn contrastive_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (up, down) = (random_rows(&mut rng, 5, 4), random_rows(&mut rng, 5, 4));
        let base = loss_contrastive(&up, &down, 1.2).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let pu: Vec<_> = perm.iter().map(|&i| up[i].clone()).collect();
        let pd: Vec<_> = perm.iter().map(|&i| down[i].clone()).collect();
        assert!((loss_contrastive(&pu, &pd, 1.2).unwrap() - base).abs() < 1e-12);
        let su: Vec<_> = up.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * (i as f64 + 0.5)).collect()).collect();
        assert!((loss_contrastive(&su, &down, 1.2).unwrap() - base).abs() < 1e-12);
        assert!(base >= 0.0);
    }

    fn tiny() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig::new(20, 4, 3).unwrap();
        let p = ModelParams::new(&cfg, 9).unwrap();
        (cfg, p)
    }

    #[test]
    fn ceco_is_mean_of_parts() {
        let (cfg, p) = tiny();
        let sentences = vec![vec![1, 5, 7, 2], vec![3, 3, 9], vec![11]];
        let nodes = encode_batch(&p, cfg.merge_score, &sentences).unwrap();
        assert_eq!(nodes.m(), 7 + 5 + 1);
        assert_eq!(nodes.i(), 3 + 2);
        let logits: Vec<Vec<f64>> = nodes
            .leaf_down()
            .iter()
            .map(|d| p.dembed(&ChannelEmbedding::from_flat(4, 3, d.clone()).unwrap()).unwrap())
            .collect();
        let ce = loss_ce(&logits, &nodes.targets()).unwrap();
        let cont = loss_contrastive(&nodes.internal_up(), &nodes.internal_down(), cfg.tau).unwrap();
        let ceco = loss_ceco(&nodes, &logits, cfg.tau).unwrap();
        assert_eq!(ceco, 0.5 * (ce + cont));

        let batch = batch_loss(&p, &cfg, &sentences, &BatchOptions::default()).unwrap();
        assert!((batch.ce_part.unwrap() - ce).abs() < 1e-12);
        assert!((batch.contrastive_part.unwrap() - cont).abs() < 1e-12);
        assert_eq!(batch.loss, 0.5 * (batch.ce_part.unwrap() + batch.contrastive_part.unwrap()));
    }

    #[test]
    fn single_token_batches_skip_contrastive() {
        let (cfg, p) = tiny();
        let sentences = vec![vec![4], vec![8]];
        let ceco = batch_loss(&p, &cfg, &sentences, &BatchOptions::default()).unwrap();
        assert_eq!(ceco.contrastive_part, Some(0.0));
        assert_eq!(ceco.loss, ceco.ce_part.unwrap() / 2.0);
        let str_cfg = cfg.clone().with_objective(Objective::StrCse);
        let strcse = batch_loss(&p, &str_cfg, &sentences, &BatchOptions::default()).unwrap();
        assert_eq!(strcse.contrastive_part, Some(0.0));
    }

    #[test]
    fn strcse_without_dropout_contrasts_decoder_with_itself() {
        let (cfg, p) = tiny();
        let sentences = vec![vec![1, 2, 3, 4], vec![5, 6, 7]];
        let cfg = cfg.with_objective(Objective::StrCse).with_dropout(0.0);
        let out = batch_loss(&p, &cfg, &sentences, &BatchOptions::default()).unwrap();
        let nodes = encode_batch(&p, cfg.merge_score, &sentences).unwrap();
        let d = nodes.internal_down();
        let expected = loss_contrastive(&d, &d, cfg.tau).unwrap();
        assert!((out.contrastive_part.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn strcse_is_reproducible_for_a_seed() {
        let (cfg, p) = tiny();
        let sentences = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
        let a = loss_strcse(&p, &cfg, &sentences, 1.2, 0.3, 77).unwrap();
        let b = loss_strcse(&p, &cfg, &sentences, 1.2, 0.3, 77).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = loss_strcse(&p, &cfg, &sentences, 1.2, 0.3, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn contrastive_objective_leaves_dembedding_untouched() {
        let (cfg, p) = tiny();
        let cfg = cfg.with_objective(Objective::Contrastive);
        let out = batch_loss(&p, &cfg, &[vec![1, 2, 3]], &BatchOptions::default()).unwrap();
        assert!(out.grads.dembedding.is_none());
        assert!(out.loss >= 0.0);
    }

    #[test]
    fn root_self_similarity_is_one() {
        let (cfg, p) = tiny();
        let sentences = vec![vec![1, 2, 3, 4], vec![9, 8]];
        let nodes = encode_batch(&p, cfg.merge_score, &sentences).unwrap();
        for span in &nodes.sentence_spans {
            let root = span.end - 1;
            let (u, d) = (&nodes.up[root], &nodes.down[root]);
            assert_eq!(u, d);
            let cos = structure::cosine(u, d);
            assert!((cos - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn random_configs_pass_and_faults_are_caught() {
        for objective in Objective::ALL {
            let check = gradcheck_objective(objective, 1, 5, 1e-5, None).unwrap();
            assert!(check.passed, "{check:?}");
            let faulty = gradcheck_objective(objective, 1, 5, 1e-5, Some(OpKind::NormalizeRows)).unwrap();
            assert_eq!(faulty.passed, objective == Objective::Ce, "{faulty:?}");
        }
    }

    #[test]
    fn objectives_match_finite_differences() {
        let (cfg, _) = tiny();
        let sentences = vec![vec![1, 5, 7, 2, 0], vec![3, 3, 9], vec![11, 19]];
        for objective in Objective::ALL {
            for tied in [false, true] {
                let cfg = cfg.clone().with_objective(objective).with_tied(tied).with_dropout(0.2);
                let params = ModelParams::new(&cfg, 21).unwrap();
                let opts = BatchOptions { dropout_seed: 5, ..BatchOptions::default() };
                let report = grad_check(&params, 1e-6, 1e-5, |q| {
                    let out = batch_loss(q, &cfg, &sentences, &opts)?;
                    Ok((out.loss, out.grads.to_dense(q)))
                })
                .unwrap();
                assert!(report.passed(), "{objective} tied={tied}: {:?}", report.failing.first());
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (cfg, p) = tiny();
        let sentences: Vec<Vec<usize>> = (0..12).map(|i| (0..(i % 5 + 1)).map(|j| (i * 3 + j) % 20).collect()).collect();
        let seq = batch_loss(&p, &cfg, &sentences, &BatchOptions::default()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let par = pool
            .install(|| batch_loss(&p, &cfg, &sentences, &BatchOptions { workers: 3, ..BatchOptions::default() }))
            .unwrap();
        assert_eq!(seq.loss.to_bits(), par.loss.to_bits());
        assert_eq!(seq.grads, par.grads);
    }

    #[test]
    fn sentence_normalization_weights_each_sentence_equally() {
        let (cfg, p) = tiny();
        let cfg = cfg.with_objective(Objective::Ce);
        let sentences = vec![vec![1, 2, 3, 4, 5, 6], vec![7]];
        let opts = BatchOptions { ce_normalization: CeNormalization::Sentence, ..BatchOptions::default() };
        let both = batch_loss(&p, &cfg, &sentences, &opts).unwrap().loss;
        let a = batch_loss(&p, &cfg, &sentences[..1], &BatchOptions::default()).unwrap().loss;
        let b = batch_loss(&p, &cfg, &sentences[1..], &BatchOptions::default()).unwrap().loss;
        assert!((both - (a + b) / 2.0).abs() < 1e-12);
    }
}
