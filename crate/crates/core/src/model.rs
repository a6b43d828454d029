//! Model configuration, parameter storage and the four primitive maps.
//!
//! Every node embedding is a `k x u` matrix: `k` independent channels of
//! width `u`, flattened row-major to a vector of length `E = k * u`. The
//! composition and decomposition maps are affine functions of a single
//! channel and are shared by all `k` channels, so the number of
//! non-embedding parameters depends on `u` alone.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Cross-entropy reconstruction of the leaf tokens.
    Ce,
    /// Contrastive loss between upward and downward views of every node.
    Contrastive,
    /// Cross-entropy over leaves averaged with contrastive over internal nodes.
    Ceco,
    /// Two dropout passes; cross-entropy over leaves, contrastive between the
    /// two passes' decoder embeddings of internal nodes.
    StrCse,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::Ce,
        Objective::Contrastive,
        Objective::Ceco,
        Objective::StrCse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Contrastive => "contrastive",
            Objective::Ceco => "ceco",
            Objective::StrCse => "strcse",
        }
    }

    /// Whether the objective reads the dembedding map.
    pub fn uses_dembedding(self) -> bool {
        !matches!(self, Objective::Contrastive)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" | "cross-entropy" => Ok(Objective::Ce),
            "contrastive" | "cont" => Ok(Objective::Contrastive),
            "ceco" => Ok(Objective::Ceco),
            "strcse" => Ok(Objective::StrCse),
            other => Err(Error::Config(format!("unknown objective `{other}`"))),
        }
    }
}

/// How adjacent frontier entries are scored when choosing the next merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeScore {
    /// Cosine of the flattened `E`-vectors.
    #[default]
    Flattened,
    /// Mean over channels of the per-channel cosine.
    ChannelMean,
}

/// Parameter initialization constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    /// Standard deviation of the zero-mean normal used for the embedding table.
    pub embedding_std: f64,
    /// Multiplier on the Glorot bound `sqrt(6 / (fan_in + fan_out))`.
    pub glorot_gain: f64,
}

impl InitScheme {
    pub const DEFAULT: InitScheme = InitScheme {
        embedding_std: 0.1,
        glorot_gain: 1.0,
    };
}

impl Default for InitScheme {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub channels: usize,
    pub channel_width: usize,
    /// Dembed with the transpose of the embedding table instead of a separate matrix.
    pub tied: bool,
    pub tau: f64,
    pub objective: Objective,
    /// Leaf dropout probability, read by [`Objective::StrCse`] only.
    pub dropout_p: f64,
    #[serde(default)]
    pub merge_score: MergeScore,
    #[serde(default)]
    pub init: InitScheme,
}

impl ModelConfig {
    /// A validated configuration with `E = channels * channel_width` and
    /// defaults for everything else (untied, tau 1.2, CECO).
    pub fn new(vocab_size: usize, channels: usize, channel_width: usize) -> Result<Self> {
        let config = ModelConfig {
            vocab_size,
            dim: channels * channel_width,
            channels,
            channel_width,
            tied: false,
            tau: 1.2,
            objective: Objective::Ceco,
            dropout_p: 0.1,
            merge_score: MergeScore::Flattened,
            init: InitScheme::DEFAULT,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_tied(mut self, tied: bool) -> Self {
        self.tied = tied;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.channels * self.channel_width {
            return Err(Error::Config(format!(
                "embedding dimension must equal channels * channel width (E = k*u): {} != {} * {}",
                self.dim, self.channels, self.channel_width
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocabulary size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.channels == 0 || self.channel_width == 0 {
            return Err(Error::Config("channels and channel width must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Number of composition plus decomposition parameters for channel width `u`.
///
/// `2u*u + u` for composition and `u*2u + 2u` for decomposition; the channel
/// count does not enter because the maps are shared across channels.
pub fn non_embedding_param_count(_channels: usize, channel_width: usize) -> usize {
    let u = channel_width;
    4 * u * u + 3 * u
}

/// Names the learnable tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamTensor {
    Embedding,
    ComposeWeight,
    ComposeBias,
    DecomposeWeight,
    DecomposeBias,
    Dembedding,
}

impl ParamTensor {
    /// Fixed serialization order.
    pub const ALL: [ParamTensor; 6] = [
        ParamTensor::Embedding,
        ParamTensor::ComposeWeight,
        ParamTensor::ComposeBias,
        ParamTensor::DecomposeWeight,
        ParamTensor::DecomposeBias,
        ParamTensor::Dembedding,
    ];
}

impl fmt::Display for ParamTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            ParamTensor::Embedding => "embedding",
            ParamTensor::ComposeWeight => "compose_weight",
            ParamTensor::ComposeBias => "compose_bias",
            ParamTensor::DecomposeWeight => "decompose_weight",
            ParamTensor::DecomposeBias => "decompose_bias",
            ParamTensor::Dembedding => "dembedding",
        })
    }
}

/// The learnable tensors, all row-major.
///
/// | field              | shape     |
/// |--------------------|-----------|
/// | `embedding`        | `V x E`   |
/// | `compose_weight`   | `2u x u`  |
/// | `compose_bias`     | `u`       |
/// | `decompose_weight` | `u x 2u`  |
/// | `decompose_bias`   | `2u`      |
/// | `dembedding`       | `E x V`, absent when tied |
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    vocab_size: usize,
    channels: usize,
    width: usize,
    pub embedding: Vec<f64>,
    pub compose_weight: Vec<f64>,
    pub compose_bias: Vec<f64>,
    pub decompose_weight: Vec<f64>,
    pub decompose_bias: Vec<f64>,
    pub dembedding: Option<Vec<f64>>,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, gain: f64, n: usize) -> Vec<f64> {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    if bound == 0.0 {
        return vec![0.0; n];
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ModelParams {
    /// Seeded initialization. Identical `(config, seed)` gives bitwise-identical tensors.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, e, u) = (config.vocab_size, config.dim, config.channel_width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init.embedding_std)
            .map_err(|err| Error::Config(format!("embedding std: {err}")))?;
        let embedding = (0..v * e).map(|_| normal.sample(&mut rng)).collect();
        let gain = config.init.glorot_gain;
        let compose_weight = glorot(&mut rng, 2 * u, u, gain, 2 * u * u);
        let decompose_weight = glorot(&mut rng, u, 2 * u, gain, 2 * u * u);
        let dembedding = (!config.tied).then(|| glorot(&mut rng, e, v, gain, e * v));
        Ok(ModelParams {
            vocab_size: v,
            channels: config.channels,
            width: u,
            embedding,
            compose_weight,
            compose_bias: vec![0.0; u],
            decompose_weight,
            decompose_bias: vec![0.0; 2 * u],
            dembedding,
        })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::zeros_with(config.vocab_size, config.channels, config.channel_width, config.tied))
    }

    pub(crate) fn zeros_with(vocab_size: usize, channels: usize, width: usize, tied: bool) -> Self {
        let e = channels * width;
        ModelParams {
            vocab_size,
            channels,
            width,
            embedding: vec![0.0; vocab_size * e],
            compose_weight: vec![0.0; 2 * width * width],
            compose_bias: vec![0.0; width],
            decompose_weight: vec![0.0; 2 * width * width],
            decompose_bias: vec![0.0; 2 * width],
            dembedding: (!tied).then(|| vec![0.0; e * vocab_size]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros_with(self.vocab_size, self.channels, self.width, self.is_tied())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn channel_width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.channels * self.width
    }

    pub fn is_tied(&self) -> bool {
        self.dembedding.is_none()
    }

    pub fn tensor(&self, which: ParamTensor) -> Option<&[f64]> {
        match which {
            ParamTensor::Embedding => Some(&self.embedding),
            ParamTensor::ComposeWeight => Some(&self.compose_weight),
            ParamTensor::ComposeBias => Some(&self.compose_bias),
            ParamTensor::DecomposeWeight => Some(&self.decompose_weight),
            ParamTensor::DecomposeBias => Some(&self.decompose_bias),
            ParamTensor::Dembedding => self.dembedding.as_deref(),
        }
    }

    pub fn tensor_mut(&mut self, which: ParamTensor) -> Option<&mut [f64]> {
        match which {
            ParamTensor::Embedding => Some(&mut self.embedding),
            ParamTensor::ComposeWeight => Some(&mut self.compose_weight),
            ParamTensor::ComposeBias => Some(&mut self.compose_bias),
            ParamTensor::DecomposeWeight => Some(&mut self.decompose_weight),
            ParamTensor::DecomposeBias => Some(&mut self.decompose_bias),
            ParamTensor::Dembedding => self.dembedding.as_deref_mut(),
        }
    }

    /// Present tensors in serialization order.
    pub fn tensors(&self) -> impl Iterator<Item = (ParamTensor, &[f64])> {
        ParamTensor::ALL
            .into_iter()
            .filter_map(move |t| self.tensor(t).map(|data| (t, data)))
    }

    pub fn total_len(&self) -> usize {
        self.tensors().map(|(_, data)| data.len()).sum()
    }

    /// Verifies shapes against a configuration.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros_with(
            config.vocab_size,
            config.channels,
            config.channel_width,
            config.tied,
        );
        for t in ParamTensor::ALL {
            let want = expected.tensor(t).map(<[f64]>::len);
            let got = self.tensor(t).map(<[f64]>::len);
            if want != got {
                return Err(Error::shape(
                    format!("{t} with {want:?} entries"),
                    format!("{got:?} entries"),
                ));
            }
        }
        Ok(())
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(ParamTensor, usize)> {
        self.tensors().find_map(|(t, data)| {
            data.iter().position(|x| !x.is_finite()).map(|i| (t, i))
        })
    }

    pub(crate) fn embedding_row(&self, token: usize) -> &[f64] {
        let e = self.dim();
        &self.embedding[token * e..(token + 1) * e]
    }

    fn check_token(&self, token_id: usize) -> Result<()> {
        if token_id >= self.vocab_size {
            return Err(Error::Vocabulary {
                id: token_id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    fn check_embedding(&self, e: &ChannelEmbedding) -> Result<()> {
        if e.channels != self.channels || e.width != self.width {
            return Err(Error::shape(
                format!("{}x{} channel embedding", self.channels, self.width),
                format!("{}x{}", e.channels, e.width),
            ));
        }
        Ok(())
    }

    pub fn embed_leaf(&self, token_id: usize) -> Result<ChannelEmbedding> {
        self.check_token(token_id)?;
        Ok(ChannelEmbedding {
            channels: self.channels,
            width: self.width,
            data: self.embedding_row(token_id).to_vec(),
        })
    }

    pub fn compose(&self, left: &ChannelEmbedding, right: &ChannelEmbedding) -> Result<ChannelEmbedding> {
        self.check_embedding(left)?;
        self.check_embedding(right)?;
        let mut out = ChannelEmbedding::zeros(self.channels, self.width);
        self.compose_into(&left.data, &right.data, &mut out.data);
        Ok(out)
    }

    pub fn decompose(&self, parent: &ChannelEmbedding) -> Result<(ChannelEmbedding, ChannelEmbedding)> {
        self.check_embedding(parent)?;
        let mut left = ChannelEmbedding::zeros(self.channels, self.width);
        let mut right = ChannelEmbedding::zeros(self.channels, self.width);
        self.decompose_into(&parent.data, &mut left.data, &mut right.data);
        Ok((left, right))
    }

    pub fn dembed(&self, e: &ChannelEmbedding) -> Result<Vec<f64>> {
        self.check_embedding(e)?;
        let mut logits = vec![0.0; self.vocab_size];
        self.dembed_into(&e.data, &mut logits);
        Ok(logits)
    }

    /// Per channel `c`: `out_c = [left_c, right_c] * W + b`.
    pub(crate) fn compose_into(&self, left: &[f64], right: &[f64], out: &mut [f64]) {
        let u = self.width;
        let w = &self.compose_weight;
        for c in 0..self.channels {
            let (l, r) = (&left[c * u..(c + 1) * u], &right[c * u..(c + 1) * u]);
            let o = &mut out[c * u..(c + 1) * u];
            o.copy_from_slice(&self.compose_bias);
            for (i, &x) in l.iter().enumerate() {
                for (oj, wij) in o.iter_mut().zip(&w[i * u..(i + 1) * u]) {
                    *oj += x * wij;
                }
            }
            for (i, &x) in r.iter().enumerate() {
                for (oj, wij) in o.iter_mut().zip(&w[(u + i) * u..(u + i + 1) * u]) {
                    *oj += x * wij;
                }
            }
        }
    }

    /// Per channel `c`: `[left_c, right_c] = p_c * W + b`.
    pub(crate) fn decompose_into(&self, parent: &[f64], left: &mut [f64], right: &mut [f64]) {
        let u = self.width;
        let w = &self.decompose_weight;
        let mut buf = vec![0.0; 2 * u];
        for c in 0..self.channels {
            buf.copy_from_slice(&self.decompose_bias);
            for (i, &x) in parent[c * u..(c + 1) * u].iter().enumerate() {
                for (bj, wij) in buf.iter_mut().zip(&w[i * 2 * u..(i + 1) * 2 * u]) {
                    *bj += x * wij;
                }
            }
            left[c * u..(c + 1) * u].copy_from_slice(&buf[..u]);
            right[c * u..(c + 1) * u].copy_from_slice(&buf[u..]);
        }
    }

    pub(crate) fn dembed_into(&self, e: &[f64], logits: &mut [f64]) {
        let v = self.vocab_size;
        match &self.dembedding {
            Some(gamma) => {
                logits.fill(0.0);
                for (i, &x) in e.iter().enumerate() {
                    for (l, g) in logits.iter_mut().zip(&gamma[i * v..(i + 1) * v]) {
                        *l += x * g;
                    }
                }
            }
            None => {
                for (t, l) in logits.iter_mut().enumerate() {
                    *l = dot(e, self.embedding_row(t));
                }
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A `k x u` node embedding, stored row-major (one row per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEmbedding {
    channels: usize,
    width: usize,
    data: Vec<f64>,
}

impl ChannelEmbedding {
    pub fn zeros(channels: usize, width: usize) -> Self {
        ChannelEmbedding {
            channels,
            width,
            data: vec![0.0; channels * width],
        }
    }

    /// Reshapes a flat `E`-vector into `channels` rows.
    pub fn from_flat(channels: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * width {
            return Err(Error::shape(
                format!("{} values for {channels}x{width}", channels * width),
                data.len(),
            ));
        }
        Ok(ChannelEmbedding { channels, width, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Input("ragged channel rows".into()));
        }
        Self::from_flat(rows.len(), width, rows.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, channel: usize) -> &[f64] {
        &self.data[channel * self.width..(channel + 1) * self.width]
    }

    pub fn row_mut(&mut self, channel: usize) -> &mut [f64] {
        &mut self.data[channel * self.width..(channel + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.width.max(1))
    }

    /// The flattened `E`-vector.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}
