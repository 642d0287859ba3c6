//! Synthetic model generation, including "planted-neuron" ground truth.
//!
//! A [`SyntheticSpec`] pins every architectural choice and the seed, and
//! [`generate_synthetic_model`] is a pure function of it: the random stream
//! is consumed in a fixed, documented order (unembedding, embedding, then per
//! layer attention → MLP), and all tensors are quantized through `f32` before
//! returning so an in-memory bundle is bit-identical to its saved-and-reloaded
//! self.
//!
//! A planted neuron `(l, j)` writes `strength · û_t` into the residual stream
//! (`û_t` = normalized unembedding column of `write_token`), optionally plus a
//! small secondary-token component (≤ 1% of `strength`), and its gate/up
//! columns point at the unembedding direction of a trigger token — so the
//! neuron fires precisely when the trigger occurs in context. That gives
//! attribution and intervention experiments an exact, constructed answer key.

use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig, ModelError, Result, TokenId, Vocab, VocabError};
use crate::linalg::Matrix;
use crate::rng::SplitMix64;

/// Vocabulary description: either real token strings (standard layout: 256
/// byte tokens + bos/eos/pad + these words) or an anonymous size for models
/// that are never tokenized against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabSpec {
    Words(Vec<String>),
    Anonymous(usize),
}

impl VocabSpec {
    pub fn size(&self) -> usize {
        match self {
            VocabSpec::Words(words) => 256 + 3 + words.len(),
            VocabSpec::Anonymous(n) => *n,
        }
    }
}

/// Per-layer attention wiring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttentionKind {
    /// `W_q = W_k = 0` (scores all zero ⇒ uniform weights over the prefix),
    /// `W_v = W_o = I`: the block adds a running mean of the normed stream.
    UniformMix,
    /// `W_v = W_o = 0`: the block contributes nothing.
    Passthrough,
    /// All four projections drawn `N(0, sigma)`.
    Random { sigma: f64 },
}

/// MLP background wiring (planted neurons overwrite their own columns/row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MlpKind {
    /// `W_gate`, `W_up`, `W_down` drawn `N(0, sigma)`.
    Random { sigma: f64 },
    /// All-zero: every non-planted neuron is dead by construction.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedNeuron {
    pub layer: usize,
    pub index: usize,
    /// Free-form tag carried through to reports ("White", "Asian", …).
    pub group_label: String,
    /// Unembedding column the neuron writes toward.
    pub write_token: TokenId,
    /// α: norm of the planted `W_down` row.
    pub strength: f64,
    /// Optional second token direction mixed into the write vector at
    /// `secondary_weight · strength`; doubles as the construction's noise
    /// budget, so the weight is capped at 0.01.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_token: Option<TokenId>,
    #[serde(default = "default_secondary_weight")]
    pub secondary_weight: f64,
    /// Token whose unembedding direction keys the gate/up columns; `None`
    /// leaves the background wiring in place (neuron still writes if driven).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_token: Option<TokenId>,
    #[serde(default = "default_gate_gain")]
    pub gate_gain: f64,
}

fn default_secondary_weight() -> f64 {
    0.009
}

fn default_gate_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub seed: u64,
    #[serde(default = "super::default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "super::default_norm_epsilon")]
    pub norm_epsilon: f64,
    pub vocab: VocabSpec,
    /// Construct unembedding columns pairwise orthonormal (requires
    /// `vocab_size <= d_model`).
    #[serde(default)]
    pub orthogonal_unembedding: bool,
    /// `Some(mu)`: embedding row `t` = `mu ·` unembedding column `t` (tied);
    /// `None`: embedding rows drawn `N(0, 1/sqrt(d_model))`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tied_embedding_scale: Option<f64>,
    /// One entry per layer, or a single entry broadcast to all layers.
    pub attention: Vec<AttentionKind>,
    pub mlp: MlpKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub planted_neurons: Vec<PlantedNeuron>,
}

/// The smallest valid spec: one uniform-mix attention layer, dead MLPs, an
/// anonymous 16-token vocabulary. Intended as a base for struct-update
/// syntax, not as a meaningful model on its own.
impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 4,
            seed: 0,
            rope_base: super::default_rope_base(),
            norm_epsilon: super::default_norm_epsilon(),
            vocab: VocabSpec::Anonymous(16),
            orthogonal_unembedding: false,
            tied_embedding_scale: None,
            attention: vec![AttentionKind::UniformMix],
            mlp: MlpKind::Zero,
            planted_neurons: Vec::new(),
        }
    }
}

impl SyntheticSpec {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_mlp: self.d_mlp,
            vocab_size: self.vocab.size(),
            rope_base: self.rope_base,
            norm_epsilon: self.norm_epsilon,
        }
    }

    fn validate(&self) -> Result<()> {
        let config = self.config();
        config.validate()?;
        if self.orthogonal_unembedding && config.vocab_size > config.d_model {
            return Err(ModelError::DimTooSmall {
                vocab_size: config.vocab_size,
                d_model: config.d_model,
            });
        }
        if !(self.attention.len() == 1 || self.attention.len() == self.n_layers) {
            return Err(ModelError::BadConfig(format!(
                "attention must list 1 or n_layers ({}) kinds, got {}",
                self.n_layers,
                self.attention.len()
            )));
        }
        for p in &self.planted_neurons {
            if p.layer >= self.n_layers || p.index >= self.d_mlp {
                return Err(ModelError::PlantedOutOfRange {
                    layer: p.layer,
                    index: p.index,
                });
            }
            let tokens_in_range = p.write_token.as_usize() < config.vocab_size
                && p.secondary_token.is_none_or(|t| t.as_usize() < config.vocab_size)
                && p.trigger_token.is_none_or(|t| t.as_usize() < config.vocab_size);
            if !tokens_in_range {
                return Err(ModelError::BadConfig(format!(
                    "planted neuron ({}, {}) references a token outside the vocab",
                    p.layer, p.index
                )));
            }
            if !p.strength.is_finite() {
                return Err(ModelError::BadConfig(format!(
                    "planted neuron ({}, {}) has non-finite strength",
                    p.layer, p.index
                )));
            }
            if !(0.0..=0.01).contains(&p.secondary_weight) {
                return Err(ModelError::BadConfig(format!(
                    "secondary_weight must lie in [0, 0.01], got {}",
                    p.secondary_weight
                )));
            }
        }
        Ok(())
    }

    fn attention_kind(&self, layer: usize) -> AttentionKind {
        if self.attention.len() == 1 {
            self.attention[0]
        } else {
            self.attention[layer]
        }
    }
}

/// Build the vocab described by the spec (None for anonymous vocabularies).
pub fn synthetic_vocab(spec: &SyntheticSpec) -> std::result::Result<Option<Vocab>, VocabError> {
    match &spec.vocab {
        VocabSpec::Words(words) => Vocab::standard(words.clone()).map(Some),
        VocabSpec::Anonymous(_) => Ok(None),
    }
}

/// Generate a bundle from the spec. Pure: identical specs yield bit-identical
/// bundles.
pub fn generate_synthetic_model(spec: &SyntheticSpec) -> Result<ModelBundle> {
    spec.validate()?;
    let config = spec.config();
    let d = config.d_model;
    let m = config.d_mlp;
    let v = config.vocab_size;
    let mut rng = SplitMix64::new(spec.seed);

    // 1. Unembedding, column by column.
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(v);
    for _ in 0..v {
        let mut col = rng.gaussian_vec(d);
        if spec.orthogonal_unembedding {
            // Two-pass modified Gram–Schmidt for numerically clean columns.
            for _ in 0..2 {
                for prev in &columns {
                    let proj = crate::linalg::dot(&col, prev);
                    for (c, p) in col.iter_mut().zip(prev) {
                        *c -= proj * p;
                    }
                }
            }
            let norm = crate::linalg::norm(&col);
            for c in col.iter_mut() {
                *c /= norm;
            }
        } else {
            let scale = 1.0 / (d as f64).sqrt();
            for c in col.iter_mut() {
                *c *= scale;
            }
        }
        columns.push(col);
    }
    let mut unembed = Matrix::zeros(d, v);
    for (t, col) in columns.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            unembed.set(r, t, x);
        }
    }

    // 2. Embedding.
    let mut embed = Matrix::zeros(v, d);
    match spec.tied_embedding_scale {
        Some(mu) => {
            for (t, col) in columns.iter().enumerate() {
                for (c, &x) in col.iter().enumerate() {
                    embed.set(t, c, mu * x);
                }
            }
        }
        None => {
            let scale = 1.0 / (d as f64).sqrt();
            for t in 0..v {
                let row = rng.gaussian_vec(d);
                for (c, &x) in row.iter().enumerate() {
                    embed.set(t, c, scale * x);
                }
            }
        }
    }

    // 3. Layers: attention then MLP, in layer order.
    let gaussian_mat = |rng: &mut SplitMix64, rows: usize, cols: usize, sigma: f64| {
        let mut mat = Matrix::zeros(rows, cols);
        for val in mat.data_mut() {
            *val = sigma * rng.next_gaussian();
        }
        mat
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let (wq, wk, wv, wo) = match spec.attention_kind(layer) {
            AttentionKind::UniformMix => (
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                Matrix::identity(d),
                Matrix::identity(d),
            ),
            AttentionKind::Passthrough => (
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
                Matrix::zeros(d, d),
            ),
            AttentionKind::Random { sigma } => (
                gaussian_mat(&mut rng, d, d, sigma),
                gaussian_mat(&mut rng, d, d, sigma),
                gaussian_mat(&mut rng, d, d, sigma),
                gaussian_mat(&mut rng, d, d, sigma),
            ),
        };
        let (w_gate, w_up, w_down) = match spec.mlp {
            MlpKind::Random { sigma } => (
                gaussian_mat(&mut rng, d, m, sigma),
                gaussian_mat(&mut rng, d, m, sigma),
                gaussian_mat(&mut rng, m, d, sigma),
            ),
            MlpKind::Zero => (Matrix::zeros(d, m), Matrix::zeros(d, m), Matrix::zeros(m, d)),
        };
        layers.push(LayerScratch { wq, wk, wv, wo, w_gate, w_up, w_down });
    }

    // 4. Planted overwrites (purely deterministic; consumes no randomness).
    let unit_column = |t: TokenId| {
        let col = &columns[t.as_usize()];
        let n = crate::linalg::norm(col);
        col.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    for p in &spec.planted_neurons {
        let scratch = &mut layers[p.layer];
        if let Some(trigger) = p.trigger_token {
            let key = unit_column(trigger);
            for (r, &x) in key.iter().enumerate() {
                scratch.w_gate.set(r, p.index, p.gate_gain * x);
                scratch.w_up.set(r, p.index, p.gate_gain * x);
            }
        }
        let mut write = crate::linalg::scale(&unit_column(p.write_token), p.strength);
        if let Some(secondary) = p.secondary_token {
            let sec = unit_column(secondary);
            for (w, s) in write.iter_mut().zip(&sec) {
                *w += p.strength * p.secondary_weight * s;
            }
        }
        scratch.w_down.row_mut(p.index).copy_from_slice(&write);
    }

    // 5. Quantize everything through f32: in-memory == on-disk, bit for bit.
    let quantize = |mat: &mut Matrix| {
        for val in mat.data_mut() {
            *val = *val as f32 as f64;
        }
    };
    quantize(&mut embed);
    quantize(&mut unembed);
    let layers = layers
        .into_iter()
        .map(|mut s| {
            quantize(&mut s.wq);
            quantize(&mut s.wk);
            quantize(&mut s.wv);
            quantize(&mut s.wo);
            quantize(&mut s.w_gate);
            quantize(&mut s.w_up);
            quantize(&mut s.w_down);
            super::LayerWeights {
                attn_norm: vec![1.0; d],
                wq: s.wq,
                wk: s.wk,
                wv: s.wv,
                wo: s.wo,
                mlp_norm: vec![1.0; d],
                w_gate: s.w_gate,
                w_up: s.w_up,
                w_down: s.w_down,
            }
        })
        .collect();

    let bundle = ModelBundle { config, embed, unembed, layers };
    bundle.validate()?;
    Ok(bundle)
}

struct LayerScratch {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_gate: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}
