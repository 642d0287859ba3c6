//! Forward passes and greedy generation with capture and intervention.
//!
//! The architecture is a pre-norm decoder: per block, RMSNorm → multi-head
//! causal attention with rotary position embeddings → residual add, then
//! RMSNorm → SwiGLU MLP → residual add. Logits are the final residual state
//! times the unembedding; there is no final norm (see `docs/FORMATS.md`).
//!
//! Two things make this engine more than a calculator:
//!
//! - **Capture.** A [`CapturePlan`] requests post-block residual states by
//!   layer and per-position activation scalars `a_j(x)` by neuron. Captured
//!   activations are stored in `f32` (the on-disk precision); enabling
//!   capture never changes the computation.
//! - **Intervention.** An [`InterventionPolicy`] rewrites targeted neuron
//!   activations *before* the `W_down` multiply at every position of every
//!   forward pass: positive values are flipped to `-k·a`, negative values
//!   amplified to `k·a`, zero stays zero — the neuron's contribution becomes
//!   subtractive wherever it was active.
//!
//! Generation is greedy argmax with ties broken by lowest token id, fully
//! recomputing the forward pass each step (no KV cache at these scales).

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};
use crate::model::{LayerWeights, ModelBundle, NeuronRef, TokenId};

#[derive(thiserror::Error, Debug)]
pub enum EngineError {
    #[error("empty input: at least one token is required")]
    EmptyInput,
    #[error("layer {0} was not captured in the plan")]
    LayerNotCaptured(usize),
    #[error("layer {layer} out of range: model has {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("neuron ({layer}, {index}) out of range: model has {n_layers} layers × {d_mlp} neurons")]
    NeuronOutOfRange {
        layer: usize,
        index: usize,
        n_layers: usize,
        d_mlp: usize,
    },
    #[error("token id {id} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("invalid intervention policy: {0}")]
    BadPolicy(String),
    #[error("all positions are padding; nothing to pool")]
    AllPositionsPadded,
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// How pooled vectors are derived from per-position values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Arithmetic mean over non-pad positions.
    MeanAllPositions,
    /// The final non-pad position.
    LastInputToken,
}

/// What to record during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturePlan {
    pub residual_layers: BTreeSet<usize>,
    pub neurons: BTreeSet<NeuronRef>,
    pub pooling: Pooling,
    /// Token id treated as padding by the pooling helpers.
    pub pad_token: Option<TokenId>,
}

impl Default for CapturePlan {
    fn default() -> Self {
        Self {
            residual_layers: BTreeSet::new(),
            neurons: BTreeSet::new(),
            pooling: Pooling::MeanAllPositions,
            pad_token: None,
        }
    }
}

impl CapturePlan {
    pub fn residual_only(layer: usize, pooling: Pooling) -> Self {
        Self {
            residual_layers: [layer].into(),
            pooling,
            ..Self::default()
        }
    }

    pub fn neurons_only<I: IntoIterator<Item = NeuronRef>>(neurons: I, pooling: Pooling) -> Self {
        Self {
            neurons: neurons.into_iter().collect(),
            pooling,
            ..Self::default()
        }
    }
}

/// The negative-forcing activation rewrite applied to targeted neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPolicy {
    pub targets: BTreeSet<NeuronRef>,
    /// Amplification factor `k`; must be positive.
    pub factor: f64,
    pub enabled: bool,
}

impl InterventionPolicy {
    pub fn new<I: IntoIterator<Item = NeuronRef>>(targets: I, factor: f64) -> Self {
        Self {
            targets: targets.into_iter().collect(),
            factor,
            enabled: true,
        }
    }

    /// `f(a) = −k·a` for `a > 0`, `k·a` for `a < 0`, `0` at `a = 0`:
    /// never positive, magnitude exactly `k·|a|`.
    pub fn transform(factor: f64, a: f64) -> f64 {
        if a > 0.0 {
            -factor * a
        } else if a < 0.0 {
            factor * a
        } else {
            0.0
        }
    }
}

/// Everything recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub token_ids: Vec<TokenId>,
    pub pad_token: Option<TokenId>,
    /// `positions × vocab_size`.
    pub logits: Matrix,
    /// Post-block residual states, `positions × d_model`, for each requested
    /// layer.
    pub residual: BTreeMap<usize, Matrix>,
    /// Per-position activation scalars for each requested neuron, stored at
    /// capture precision.
    pub activations: BTreeMap<NeuronRef, Vec<f32>>,
}

impl ForwardTrace {
    pub fn positions(&self) -> usize {
        self.token_ids.len()
    }

    pub fn final_logits(&self) -> &[f64] {
        self.logits.row(self.positions() - 1)
    }

    /// Argmax over the final position; ties break to the lowest token id.
    pub fn argmax_final(&self) -> TokenId {
        argmax_lowest_id(self.final_logits())
    }
}

pub(crate) fn argmax_lowest_id(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    TokenId(best as u32)
}

/// RMS normalization: `x / sqrt(mean(x²) + eps) * scale`.
fn rms_norm(x: &[f64], scale: &[f64], eps: f64) -> Vec<f64> {
    let mean_sq = linalg::dot(x, x) / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

/// Rotate query/key head slices in place: standard RoPE with adjacent pairs
/// `(2i, 2i+1)` and frequencies `base^(-2i/head_dim)`.
fn apply_rope(vec: &mut [f64], pos: usize, n_heads: usize, head_dim: usize, base: f64) {
    for h in 0..n_heads {
        let slice = &mut vec[h * head_dim..(h + 1) * head_dim];
        for i in 0..head_dim / 2 {
            let theta = base.powf(-((2 * i) as f64) / head_dim as f64);
            let angle = pos as f64 * theta;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (slice[2 * i], slice[2 * i + 1]);
            slice[2 * i] = a * cos - b * sin;
            slice[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// One SwiGLU MLP evaluation on an (already normed) input vector.
///
/// Returns `(output, activations)` where `activations[j] =
/// silu(x·W_gate)_j · (x·W_up)_j` and `output = Σ_j a_j · v_j` with `v_j` row
/// `j` of `W_down` — evaluated here as the equivalent matrix product.
pub fn mlp_forward(x: &[f64], layer: &LayerWeights) -> (Vec<f64>, Vec<f64>) {
    let gate = linalg::vec_mat(x, &layer.w_gate);
    let up = linalg::vec_mat(x, &layer.w_up);
    let activations: Vec<f64> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| linalg::silu(*g) * u)
        .collect();
    let output = linalg::vec_mat(&activations, &layer.w_down);
    (output, activations)
}

fn validate_refs(
    model: &ModelBundle,
    tokens: &[TokenId],
    plan: &CapturePlan,
    policy: Option<&InterventionPolicy>,
) -> Result<()> {
    if tokens.is_empty() {
        return Err(EngineError::EmptyInput);
    }
    for &id in tokens {
        if id.as_usize() >= model.vocab_size() {
            return Err(EngineError::TokenOutOfRange {
                id,
                vocab_size: model.vocab_size(),
            });
        }
    }
    for &layer in &plan.residual_layers {
        if layer >= model.n_layers() {
            return Err(EngineError::LayerOutOfRange {
                layer,
                n_layers: model.n_layers(),
            });
        }
    }
    let neuron_refs = plan
        .neurons
        .iter()
        .chain(policy.into_iter().flat_map(|p| p.targets.iter()));
    for &NeuronRef { layer, index } in neuron_refs {
        if layer >= model.n_layers() || index >= model.d_mlp() {
            return Err(EngineError::NeuronOutOfRange {
                layer,
                index,
                n_layers: model.n_layers(),
                d_mlp: model.d_mlp(),
            });
        }
    }
    if let Some(p) = policy {
        if p.enabled && !(p.factor.is_finite() && p.factor > 0.0) {
            return Err(EngineError::BadPolicy(format!(
                "factor must be positive and finite, got {}",
                p.factor
            )));
        }
    }
    Ok(())
}

/// Run the model over `tokens`, recording what the plan requests and applying
/// the policy (if enabled) to targeted neuron activations at every position.
pub fn forward(
    model: &ModelBundle,
    tokens: &[TokenId],
    plan: &CapturePlan,
    policy: Option<&InterventionPolicy>,
) -> Result<ForwardTrace> {
    validate_refs(model, tokens, plan, policy)?;
    let cfg = &model.config;
    let (d, n_heads, head_dim) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
    let n = tokens.len();
    let active_policy = policy.filter(|p| p.enabled && !p.targets.is_empty());

    // Capture bookkeeping, grouped by layer for the inner loop.
    let mut neurons_by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &NeuronRef { layer, index } in &plan.neurons {
        neurons_by_layer.entry(layer).or_default().push(index);
    }
    let mut targets_by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if let Some(p) = active_policy {
        for &NeuronRef { layer, index } in &p.targets {
            targets_by_layer.entry(layer).or_default().push(index);
        }
    }

    let mut states: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| model.embed.row(t.as_usize()).to_vec())
        .collect();
    let mut residual = BTreeMap::new();
    let mut activations: BTreeMap<NeuronRef, Vec<f32>> = BTreeMap::new();

    for (layer_idx, layer) in model.layers.iter().enumerate() {
        // Attention sublayer.
        let normed: Vec<Vec<f64>> = states
            .iter()
            .map(|s| rms_norm(s, &layer.attn_norm, cfg.norm_epsilon))
            .collect();
        let mut queries: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut keys: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (pos, x) in normed.iter().enumerate() {
            let mut q = linalg::vec_mat(x, &layer.wq);
            let mut k = linalg::vec_mat(x, &layer.wk);
            apply_rope(&mut q, pos, n_heads, head_dim, cfg.rope_base);
            apply_rope(&mut k, pos, n_heads, head_dim, cfg.rope_base);
            queries.push(q);
            keys.push(k);
            values.push(linalg::vec_mat(x, &layer.wv));
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        for pos in 0..n {
            let mut mixed = vec![0.0; d];
            for h in 0..n_heads {
                let span = h * head_dim..(h + 1) * head_dim;
                let q = &queries[pos][span.clone()];
                let mut scores: Vec<f64> = (0..=pos)
                    .map(|j| scale * linalg::dot(q, &keys[j][span.clone()]))
                    .collect();
                linalg::softmax_in_place(&mut scores);
                for (j, w) in scores.iter().enumerate() {
                    for (dst, &v) in mixed[span.clone()].iter_mut().zip(&values[j][span.clone()]) {
                        *dst += w * v;
                    }
                }
            }
            let projected = linalg::vec_mat(&mixed, &layer.wo);
            linalg::add_assign(&mut states[pos], &projected);
        }

        // MLP sublayer, with intervention before the W_down multiply.
        let captured_here = neurons_by_layer.get(&layer_idx);
        let targets_here = targets_by_layer.get(&layer_idx);
        for state in states.iter_mut() {
            let x = rms_norm(state, &layer.mlp_norm, cfg.norm_epsilon);
            let gate = linalg::vec_mat(&x, &layer.w_gate);
            let up = linalg::vec_mat(&x, &layer.w_up);
            let mut acts: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| linalg::silu(*g) * u)
                .collect();
            if let (Some(p), Some(targets)) = (active_policy, targets_here) {
                for &j in targets {
                    acts[j] = InterventionPolicy::transform(p.factor, acts[j]);
                }
            }
            if let Some(indices) = captured_here {
                for &j in indices {
                    activations
                        .entry(NeuronRef { layer: layer_idx, index: j })
                        .or_insert_with(|| Vec::with_capacity(n))
                        .push(acts[j] as f32);
                }
            }
            let written = linalg::vec_mat(&acts, &layer.w_down);
            linalg::add_assign(state, &written);
        }

        if plan.residual_layers.contains(&layer_idx) {
            let mut snapshot = Matrix::zeros(n, d);
            for (pos, state) in states.iter().enumerate() {
                snapshot.row_mut(pos).copy_from_slice(state);
            }
            residual.insert(layer_idx, snapshot);
        }
    }

    let mut logits = Matrix::zeros(n, cfg.vocab_size);
    for (pos, state) in states.iter().enumerate() {
        logits
            .row_mut(pos)
            .copy_from_slice(&linalg::vec_mat(state, &model.unembed));
    }

    Ok(ForwardTrace {
        token_ids: tokens.to_vec(),
        pad_token: plan.pad_token,
        logits,
        residual,
        activations,
    })
}

/// Greedy decoding: repeatedly append the argmax token (ties → lowest id) of
/// the final position. Returns exactly `max_new` generated ids — there is no
/// early stop, so outputs are reproducible token for token. The policy, when
/// given, applies at every step (prompt positions included).
pub fn greedy_generate(
    model: &ModelBundle,
    prompt: &[TokenId],
    max_new: usize,
    policy: Option<&InterventionPolicy>,
) -> Result<Vec<TokenId>> {
    let plan = CapturePlan::default();
    validate_refs(model, prompt, &plan, policy)?;
    let mut sequence = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let trace = forward(model, &sequence, &plan, policy)?;
        let next = trace.argmax_final();
        sequence.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Pool a captured residual layer into a single `d_model` vector, skipping
/// pad positions.
pub fn pool_residual(trace: &ForwardTrace, layer: usize, pooling: Pooling) -> Result<Vec<f64>> {
    let states = trace
        .residual
        .get(&layer)
        .ok_or(EngineError::LayerNotCaptured(layer))?;
    let keep: Vec<usize> = (0..trace.positions())
        .filter(|&pos| trace.pad_token != Some(trace.token_ids[pos]))
        .collect();
    if keep.is_empty() {
        return Err(EngineError::AllPositionsPadded);
    }
    match pooling {
        Pooling::MeanAllPositions => {
            let mut pooled = vec![0.0; states.cols()];
            for &pos in &keep {
                linalg::add_assign(&mut pooled, states.row(pos));
            }
            let inv = 1.0 / keep.len() as f64;
            for v in pooled.iter_mut() {
                *v *= inv;
            }
            Ok(pooled)
        }
        Pooling::LastInputToken => Ok(states.row(*keep.last().expect("non-empty")).to_vec()),
    }
}

/// Pool captured per-neuron activations the same way (in capture precision).
pub fn pool_activation(trace: &ForwardTrace, neuron: NeuronRef, pooling: Pooling) -> Option<f64> {
    let acts = trace.activations.get(&neuron)?;
    let keep: Vec<usize> = (0..trace.positions())
        .filter(|&pos| trace.pad_token != Some(trace.token_ids[pos]))
        .collect();
    if keep.is_empty() {
        return None;
    }
    match pooling {
        Pooling::MeanAllPositions => {
            Some(keep.iter().map(|&pos| acts[pos] as f64).sum::<f64>() / keep.len() as f64)
        }
        Pooling::LastInputToken => Some(acts[*keep.last().expect("non-empty")] as f64),
    }
}
