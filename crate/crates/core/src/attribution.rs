//! Locating the neurons that write a probed direction.
//!
//! Three stages, each independently callable:
//!
//! 1. [`logit_lens`] projects any residual-space vector through the
//!    unembedding and reads off the top-k vocabulary tokens.
//! 2. [`score_neurons`] ranks every MLP neuron in the last few layers by the
//!    cosine between its output vector (its row of `W_down`) and a target
//!    direction, e.g. a probe column.
//! 3. [`filter_by_alignment`] keeps the candidates whose own logit-lens
//!    projections land on a configured keyword list, yielding a
//!    [`NeuronGroup`] ready for activation analysis and intervention.
//!
//! All rankings carry an explicit, total tie order so that reruns and
//! independent re-implementations agree bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{GroupLabel, Mention};
use crate::linalg::{cosine, vec_mat};
use crate::model::{ModelBundle, NeuronRef, TokenId, Vocab};

#[derive(thiserror::Error, Debug)]
pub enum AttributionError {
    #[error("direction has {got} components, model residual width is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("keyword list for {0} is empty")]
    EmptyKeywords(GroupLabel),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

/// One unembedding read-out: a token and the logit a vector assigns to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedToken {
    pub token_id: TokenId,
    pub token_str: String,
    pub logit: f64,
}

/// Top-k vocabulary projection of a residual-space vector, in non-increasing
/// logit order; equal logits order by ascending token id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenProjection {
    pub entries: Vec<ProjectedToken>,
}

impl TokenProjection {
    pub fn token_strings(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.token_str.as_str()).collect()
    }
}

/// A scored neuron. `projection`, `retained`, and `matched_keywords` start
/// empty/false out of [`score_neurons`] and are filled by
/// [`filter_by_alignment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronCandidate {
    #[serde(rename = "ref")]
    pub neuron: NeuronRef,
    /// Cosine between the neuron's output vector and the target direction.
    pub score: f64,
    pub projection: TokenProjection,
    pub retained: bool,
    pub matched_keywords: Vec<String>,
}

/// The retained neurons for one demographic group and mention kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronGroup {
    pub group: GroupLabel,
    pub mention: Mention,
    pub members: Vec<NeuronCandidate>,
}

impl NeuronGroup {
    pub fn refs(&self) -> Vec<NeuronRef> {
        self.members.iter().map(|m| m.neuron).collect()
    }

    /// Stable display name used as the row key in activation tables:
    /// `"Asian Direct"`, `"White Indirect"`, or just the group name when
    /// mention kind does not apply.
    pub fn row_label(&self) -> String {
        match self.mention {
            Mention::Direct => format!("{} Direct", self.group.name()),
            Mention::Indirect => format!("{} Indirect", self.group.name()),
            Mention::NotApplicable => self.group.name().to_string(),
        }
    }
}

/// Report-table name for a neuron's output vector: `MLP.v^{l}_{j}` with a
/// 1-based layer superscript (internal layer indices are 0-based) and the
/// neuron's index within the layer.
pub fn neuron_notation(neuron: NeuronRef) -> String {
    format!("MLP.v^{{{}}}_{{{}}}", neuron.layer + 1, neuron.index)
}

fn token_name(vocab: Option<&Vocab>, id: TokenId) -> String {
    match vocab {
        Some(v) => v.token_str(id).to_string(),
        None => format!("<{}>", id.0),
    }
}

/// Project `h` through the unembedding and return the top-k tokens by logit
/// (descending; ties by ascending token id). `k` larger than the vocabulary
/// returns every token.
pub fn logit_lens(
    model: &ModelBundle,
    vocab: Option<&Vocab>,
    h: &[f64],
    k: usize,
) -> Result<TokenProjection> {
    if k == 0 {
        return Err(AttributionError::BadParam("k must be >= 1".into()));
    }
    if h.len() != model.d_model() {
        return Err(AttributionError::DimensionMismatch {
            expected: model.d_model(),
            got: h.len(),
        });
    }
    let logits = vec_mat(h, &model.unembed);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_unstable_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(TokenProjection {
        entries: order
            .into_iter()
            .map(|id| ProjectedToken {
                token_id: TokenId(id as u32),
                token_str: token_name(vocab, TokenId(id as u32)),
                logit: logits[id],
            })
            .collect(),
    })
}

/// Score every MLP neuron in the last `layer_window` layers (clamped to the
/// model depth) by cosine against `direction`, and rank: score descending,
/// ties by (layer ascending, index ascending). Zero-norm vectors score 0.
pub fn score_neurons(
    model: &ModelBundle,
    direction: &[f64],
    layer_window: usize,
) -> Result<Vec<NeuronCandidate>> {
    if layer_window == 0 {
        return Err(AttributionError::BadParam("layer_window must be >= 1".into()));
    }
    if direction.len() != model.d_model() {
        return Err(AttributionError::DimensionMismatch {
            expected: model.d_model(),
            got: direction.len(),
        });
    }
    let window = layer_window.min(model.n_layers());
    let first_layer = model.n_layers() - window;
    let refs: Vec<NeuronRef> = (first_layer..model.n_layers())
        .flat_map(|layer| (0..model.d_mlp()).map(move |index| NeuronRef { layer, index }))
        .collect();
    // Parallel map preserves index order, so the pre-sort list — and hence
    // the sorted ranking — is identical on every run and thread count.
    let mut ranked: Vec<NeuronCandidate> = refs
        .into_par_iter()
        .map(|neuron| NeuronCandidate {
            neuron,
            score: cosine(model.neuron_out(neuron.layer, neuron.index), direction),
            projection: TokenProjection::default(),
            retained: false,
            matched_keywords: Vec::new(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.neuron.layer.cmp(&b.neuron.layer))
            .then(a.neuron.index.cmp(&b.neuron.index))
    });
    Ok(ranked)
}

/// Stable prefix of a ranking: the `top_n` highest-scoring candidates.
pub fn select_candidates(ranked: &[NeuronCandidate], top_n: usize) -> Result<Vec<NeuronCandidate>> {
    if top_n == 0 {
        return Err(AttributionError::BadParam("top_n must be >= 1".into()));
    }
    Ok(ranked[..top_n.min(ranked.len())].to_vec())
}

/// Canonical form used for keyword matching: NFKC, lowercase, leading and
/// trailing non-alphanumeric characters (punctuation, underscores, spaces)
/// stripped.
pub fn normalize_token(s: &str) -> String {
    let folded: String = s.nfkc().collect::<String>().to_lowercase();
    folded
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

/// Keep the candidates whose top-`k` logit-lens tokens hit the group's
/// keyword list at least `min_matches` times (`min_matches = 0` disables the
/// filter). Every candidate gets its projection computed and its `retained` /
/// `matched_keywords` fields filled in place; the returned group holds copies
/// of the retained ones, ranking order preserved.
pub fn filter_by_alignment(
    model: &ModelBundle,
    vocab: Option<&Vocab>,
    candidates: &mut [NeuronCandidate],
    group: GroupLabel,
    mention: Mention,
    keywords: &[String],
    k: usize,
    min_matches: usize,
) -> Result<NeuronGroup> {
    if keywords.is_empty() {
        return Err(AttributionError::EmptyKeywords(group));
    }
    let normalized_keywords: Vec<(String, &String)> = keywords
        .iter()
        .map(|kw| (normalize_token(kw), kw))
        .collect();
    for candidate in candidates.iter_mut() {
        let direction = model.neuron_out(candidate.neuron.layer, candidate.neuron.index);
        candidate.projection = logit_lens(model, vocab, direction, k)?;
        let mut matches = 0usize;
        let mut matched: Vec<String> = Vec::new();
        for entry in &candidate.projection.entries {
            let token = normalize_token(&entry.token_str);
            if token.is_empty() {
                continue;
            }
            if let Some((_, kw)) = normalized_keywords.iter().find(|(n, _)| *n == token) {
                matches += 1;
                if !matched.iter().any(|m| m == *kw) {
                    matched.push((*kw).clone());
                }
            }
        }
        candidate.retained = matches >= min_matches;
        candidate.matched_keywords = matched;
    }
    Ok(NeuronGroup {
        group,
        mention,
        members: candidates.iter().filter(|c| c.retained).cloned().collect(),
    })
}
