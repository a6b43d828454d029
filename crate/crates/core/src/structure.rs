//! Greedy structure induction and the upward/downward passes.
//!
//! The encoder keeps a frontier of embeddings (initially the leaves) and
//! repeatedly merges the adjacent pair with the highest cosine similarity
//! until one embedding remains. The recorded merge history is a binary tree
//! whose internal nodes each span a contiguous run of tokens. The decoder
//! walks that tree from the root down, starting from the encoder's root
//! embedding unchanged.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{dot, ChannelEmbedding, MergeScore, ModelParams};

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations that hit a zero-norm vector (and scored 0).
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

/// Cosine similarity; a zero-norm argument scores 0.
///
/// Taking one square root of the product of squared norms makes the cosine
/// of a vector with itself exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    dot(a, b) / (na * nb).sqrt()
}

/// Similarity used to rank a candidate merge.
pub fn merge_score(a: &ChannelEmbedding, b: &ChannelEmbedding, score: MergeScore) -> f64 {
    match score {
        MergeScore::Flattened => cosine(a.flat(), b.flat()),
        MergeScore::ChannelMean => {
            let k = a.channels();
            a.rows().zip(b.rows()).map(|(x, y)| cosine(x, y)).sum::<f64>() / k as f64
        }
    }
}

/// Cosine between each pair of neighbouring frontier entries (flattened view).
pub fn adjacent_cosines(frontier: &[ChannelEmbedding]) -> Vec<f64> {
    frontier
        .windows(2)
        .map(|w| cosine(w[0].flat(), w[1].flat()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeNode {
    Leaf { position: usize, token_id: usize },
    Internal { left: usize, right: usize, merge_step: usize },
}

/// Binary tree recorded by the merge history.
///
/// Node ids `0..T` are the leaves in input order; id `T + s` is the parent
/// created at merge step `s`. The root is always the last node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeTree {
    nodes: Vec<TreeNode>,
    spans: Vec<Range<usize>>,
    leaves: usize,
}

impl MergeTree {
    fn with_leaves(token_ids: &[usize]) -> Self {
        let t = token_ids.len();
        let mut nodes = Vec::with_capacity(2 * t - 1);
        let mut spans = Vec::with_capacity(2 * t - 1);
        for (position, &token_id) in token_ids.iter().enumerate() {
            nodes.push(TreeNode::Leaf { position, token_id });
            spans.push(position..position + 1);
        }
        MergeTree { nodes, spans, leaves: t }
    }

    fn push_merge(&mut self, left: usize, right: usize) -> usize {
        let merge_step = self.nodes.len() - self.sentence_len();
        let span = self.spans[left].start..self.spans[right].end;
        self.nodes.push(TreeNode::Internal {
            left,
            right,
            merge_step,
        });
        self.spans.push(span);
        self.nodes.len() - 1
    }

    /// Builds a tree from an explicit merge list of `(left, right)` node ids.
    pub fn from_merges(token_ids: &[usize], merges: &[(usize, usize)]) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        if merges.len() + 1 != token_ids.len() {
            return Err(Error::Input(format!(
                "{} merges cannot join {} leaves",
                merges.len(),
                token_ids.len()
            )));
        }
        let mut tree = Self::with_leaves(token_ids);
        let mut used = vec![false; 2 * token_ids.len() - 1];
        for &(l, r) in merges {
            let n = tree.nodes.len();
            if l >= n || r >= n || used[l] || used[r] || tree.spans[l].end != tree.spans[r].start {
                return Err(Error::Input(format!("invalid merge ({l}, {r})")));
            }
            used[l] = true;
            used[r] = true;
            tree.push_merge(l, r);
        }
        Ok(tree)
    }

    pub fn sentence_len(&self) -> usize {
        self.leaves
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, id: usize) -> TreeNode {
        self.nodes[id]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Token positions covered by a node.
    pub fn span(&self, id: usize) -> Range<usize> {
        self.spans[id].clone()
    }

    pub fn internal_ids(&self) -> Range<usize> {
        self.sentence_len()..self.nodes.len()
    }

    pub fn leaf_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match *n {
            TreeNode::Leaf { token_id, .. } => Some(token_id),
            TreeNode::Internal { .. } => None,
        })
    }

    pub fn children(&self, id: usize) -> Option<(usize, usize)> {
        match self.nodes[id] {
            TreeNode::Internal { left, right, .. } => Some((left, right)),
            TreeNode::Leaf { .. } => None,
        }
    }

    /// `(left, right)` child ids in merge order.
    pub fn merges(&self) -> Vec<(usize, usize)> {
        self.internal_ids().filter_map(|id| self.children(id)).collect()
    }
}

/// A sentence after the upward pass, and optionally the downward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub tree: MergeTree,
    /// Encoder embedding per node id.
    pub up: Vec<ChannelEmbedding>,
    /// Decoder embedding per node id, filled by [`decode`].
    pub down: Option<Vec<ChannelEmbedding>>,
}

impl EncodedSentence {
    pub fn root_up(&self) -> &ChannelEmbedding {
        &self.up[self.tree.root()]
    }
}

/// Greedy frontier merge over arbitrary leaves with an arbitrary composition map.
///
/// Ties are broken towards the leftmost pair. Only the (at most two) scores
/// adjacent to a merge are recomputed.
pub fn induce_frontier<F>(
    token_ids: &[usize],
    leaves: Vec<ChannelEmbedding>,
    score: MergeScore,
    mut compose: F,
) -> Result<EncodedSentence>
where
    F: FnMut(&ChannelEmbedding, &ChannelEmbedding) -> Result<ChannelEmbedding>,
{
    if token_ids.is_empty() {
        return Err(Error::Input("cannot induce structure over an empty sentence".into()));
    }
    if leaves.len() != token_ids.len() {
        return Err(Error::Input(format!(
            "{} leaf embeddings for {} tokens",
            leaves.len(),
            token_ids.len()
        )));
    }
    let mut tree = MergeTree::with_leaves(token_ids);
    let mut up = leaves;
    up.reserve(token_ids.len().saturating_sub(1));
    let mut frontier: Vec<usize> = (0..token_ids.len()).collect();
    let mut sims: Vec<f64> = frontier
        .windows(2)
        .map(|w| merge_score(&up[w[0]], &up[w[1]], score))
        .collect();

    while frontier.len() > 1 {
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate().skip(1) {
            if s > sims[best] {
                best = i;
            }
        }
        let (l, r) = (frontier[best], frontier[best + 1]);
        let parent = compose(&up[l], &up[r])?;
        up.push(parent);
        let id = tree.push_merge(l, r);
        frontier[best] = id;
        frontier.remove(best + 1);
        sims.remove(best);
        if best > 0 {
            sims[best - 1] = merge_score(&up[frontier[best - 1]], &up[id], score);
        }
        if best < sims.len() {
            sims[best] = merge_score(&up[id], &up[frontier[best + 1]], score);
        }
    }
    Ok(EncodedSentence {
        tree,
        up,
        down: None,
    })
}

/// Upward pass from token ids using the model's embedding and composition.
pub fn induce(params: &ModelParams, token_ids: &[usize]) -> Result<EncodedSentence> {
    induce_with(params, token_ids, MergeScore::Flattened)
}

pub fn induce_with(params: &ModelParams, token_ids: &[usize], score: MergeScore) -> Result<EncodedSentence> {
    let leaves = token_ids
        .iter()
        .map(|&t| params.embed_leaf(t))
        .collect::<Result<Vec<_>>>()?;
    induce_frontier(token_ids, leaves, score, |a, b| params.compose(a, b))
}

/// Downward pass: the root keeps its encoder embedding, every other node is
/// produced by decomposing its parent.
pub fn decode(params: &ModelParams, mut enc: EncodedSentence) -> Result<EncodedSentence> {
    let tree = &enc.tree;
    let k = params.channels();
    let u = params.channel_width();
    let mut down = vec![ChannelEmbedding::zeros(k, u); tree.len()];
    let root = tree.root();
    down[root] = enc.up[root].clone();
    for id in tree.internal_ids().rev() {
        if let Some((l, r)) = tree.children(id) {
            let (dl, dr) = params.decompose(&down[id])?;
            down[l] = dl;
            down[r] = dr;
        }
    }
    enc.down = Some(down);
    Ok(enc)
}

/// Fully parenthesized bracketing, e.g. `(Homer (ate doughnuts))`.
pub fn to_bracket<S: AsRef<str>>(tree: &MergeTree, tokens: &[S]) -> Result<String> {
    if tokens.len() != tree.sentence_len() {
        return Err(Error::Input(format!(
            "{} tokens for a tree over {} leaves",
            tokens.len(),
            tree.sentence_len()
        )));
    }
    fn walk<S: AsRef<str>>(tree: &MergeTree, id: usize, tokens: &[S], out: &mut String) {
        match tree.node(id) {
            TreeNode::Leaf { position, .. } => out.push_str(tokens[position].as_ref()),
            TreeNode::Internal { left, right, .. } => {
                out.push('(');
                walk(tree, left, tokens, out);
                out.push(' ');
                walk(tree, right, tokens, out);
                out.push(')');
            }
        }
    }
    let mut out = String::new();
    walk(tree, tree.root(), tokens, &mut out);
    Ok(out)
}
