//! Model bundles: weight containers, validation, persistence, and synthesis.
//!
//! A bundle is a complete pre-norm decoder transformer with SwiGLU MLP
//! blocks: per layer `{attn norm, W_q, W_k, W_v, W_o, mlp norm, W_gate, W_up,
//! W_down}` plus token embeddings and the unembedding matrix. All projections
//! use the row-vector convention (`x · W`), so e.g. `W_gate` is
//! `d_model × d_mlp` and row `j` of `W_down` is the direction neuron `j`
//! writes into the residual stream.
//!
//! On disk a bundle is a JSON manifest plus one raw little-endian blob (see
//! [`container`] and `docs/FORMATS.md`). Loading validates every declared
//! tensor: presence, dtype, shape, blob bounds, and finiteness.

pub mod container;
pub mod synthetic;
mod vocab;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use container::{BlobBuilder, BlobReader, Dtype, TensorEntry};
pub use synthetic::{
    generate_synthetic_model, synthetic_vocab, AttentionKind, MlpKind, PlantedNeuron,
    SyntheticSpec, VocabSpec,
};
pub use vocab::{SpecialTokens, TokenId, TokenSequence, Vocab, VocabError};

pub const MANIFEST_FORMAT: &str = "neurolens.model";
pub const MANIFEST_VERSION: u32 = 1;

/// Identifies one MLP neuron: `layer` is 0-based internally; the `Display`
/// form uses the 1-based report notation `MLP.v^l_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronRef {
    pub layer: usize,
    pub index: usize,
}

impl std::fmt::Display for NeuronRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MLP.v^{}_{}", self.layer + 1, self.index)
    }
}

#[derive(thiserror::Error, Debug)]
pub enum ModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("manifest format/version mismatch: found {found:?} v{version}")]
    WrongFormat { found: String, version: u32 },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in blob")]
    UnknownTensor(String),
    #[error("shape mismatch for tensor `{tensor}`: expected {expected:?}, declared {declared:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        declared: Vec<usize>,
    },
    #[error("dtype mismatch for tensor `{tensor}`: expected {expected:?}, declared {declared:?}")]
    DtypeMismatch {
        tensor: String,
        expected: Dtype,
        declared: Dtype,
    },
    #[error("tensor `{tensor}` overruns blob: offset {offset} + {len} bytes > blob length {blob}")]
    BlobOverrun {
        tensor: String,
        offset: usize,
        len: usize,
        blob: usize,
    },
    #[error("non-finite weight in tensor `{tensor}` at flat index {index}")]
    NonFiniteWeight { tensor: String, index: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(
        "orthogonal unembedding requires vocab_size <= d_model, got vocab_size {vocab_size} > d_model {d_model}"
    )]
    DimTooSmall { vocab_size: usize, d_model: usize },
    #[error("planted neuron out of range: layer {layer}, index {index}")]
    PlantedOutOfRange { layer: usize, index: usize },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters; shapes of every tensor follow from these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_epsilon")]
    pub norm_epsilon: f64,
}

pub(crate) fn default_rope_base() -> f64 {
    10_000.0
}

pub(crate) fn default_norm_epsilon() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::BadConfig(msg));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon > 0.0) {
            return bad(format!(
                "norm_epsilon must be positive, got {}",
                self.norm_epsilon
            ));
        }
        Ok(())
    }
}

/// One transformer block's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Full weights + config of a decoder transformer. Immutable after load;
/// shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    /// `vocab_size × d_model`
    pub embed: Matrix,
    /// `d_model × vocab_size`
    pub unembed: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl ModelBundle {
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_mlp(&self) -> usize {
        self.config.d_mlp
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Output vector of neuron `(layer, index)`: row `index` of that layer's
    /// `W_down` — the direction the neuron writes into the residual stream.
    pub fn neuron_out(&self, layer: usize, index: usize) -> &[f64] {
        self.layers[layer].w_down.row(index)
    }

    /// Column `t` of the unembedding: the logit direction of token `t`.
    pub fn unembed_column(&self, t: TokenId) -> Vec<f64> {
        self.unembed.column(t.as_usize())
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let m = self.config.d_mlp;
        let v = self.config.vocab_size;
        if self.layers.len() != self.config.n_layers {
            return Err(ModelError::BadConfig(format!(
                "config declares {} layers but bundle has {}",
                self.config.n_layers,
                self.layers.len()
            )));
        }
        let check = |name: String, mat: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if mat.rows() != rows || mat.cols() != cols {
                return Err(ModelError::ShapeMismatch {
                    tensor: name,
                    expected: vec![rows, cols],
                    declared: vec![mat.rows(), mat.cols()],
                });
            }
            if let Some(bad) = mat.data().iter().position(|x| !x.is_finite()) {
                return Err(ModelError::NonFiniteWeight { tensor: name, index: bad });
            }
            Ok(())
        };
        check("embed.tokens".into(), &self.embed, v, d)?;
        check("unembed.w".into(), &self.unembed, d, v)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let t = |suffix: &str| format!("layers.{l}.{suffix}");
            for (name, vec) in [
                (t("attn.norm.scale"), &layer.attn_norm),
                (t("mlp.norm.scale"), &layer.mlp_norm),
            ] {
                if vec.len() != d {
                    return Err(ModelError::ShapeMismatch {
                        tensor: name,
                        expected: vec![d],
                        declared: vec![vec.len()],
                    });
                }
                if let Some(bad) = vec.iter().position(|x| !x.is_finite()) {
                    return Err(ModelError::NonFiniteWeight { tensor: name, index: bad });
                }
            }
            check(t("attn.wq"), &layer.wq, d, d)?;
            check(t("attn.wk"), &layer.wk, d, d)?;
            check(t("attn.wv"), &layer.wv, d, d)?;
            check(t("attn.wo"), &layer.wo, d, d)?;
            check(t("mlp.w_gate"), &layer.w_gate, d, m)?;
            check(t("mlp.w_up"), &layer.w_up, d, m)?;
            check(t("mlp.w_down"), &layer.w_down, m, d)?;
        }
        Ok(())
    }
}

/// Vocab block of the manifest: file name plus the ids the vocab file itself
/// cannot express.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabRef {
    pub file: String,
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub byte_fallback_start: TokenId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    version: u32,
    config: ModelConfig,
    blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<VocabRef>,
    tensors: Vec<TensorEntry>,
}

/// A bundle together with the vocab its manifest referenced (if any).
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: ModelBundle,
    pub vocab: Option<Vocab>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `model.json`, `model.bin`, and (when given) `vocab.txt` into `dir`.
/// Returns the manifest path.
pub fn save_model(bundle: &ModelBundle, vocab: Option<&Vocab>, dir: &Path) -> Result<PathBuf> {
    bundle.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut blob = BlobBuilder::new();
    let d = bundle.config.d_model;
    let m = bundle.config.d_mlp;
    let v = bundle.config.vocab_size;
    blob.push("embed.tokens", Dtype::F32, &[v, d], bundle.embed.data());
    blob.push("unembed.w", Dtype::F32, &[d, v], bundle.unembed.data());
    for (l, layer) in bundle.layers.iter().enumerate() {
        let t = |suffix: &str| format!("layers.{l}.{suffix}");
        blob.push(&t("attn.norm.scale"), Dtype::F32, &[d], &layer.attn_norm);
        blob.push(&t("attn.wq"), Dtype::F32, &[d, d], layer.wq.data());
        blob.push(&t("attn.wk"), Dtype::F32, &[d, d], layer.wk.data());
        blob.push(&t("attn.wv"), Dtype::F32, &[d, d], layer.wv.data());
        blob.push(&t("attn.wo"), Dtype::F32, &[d, d], layer.wo.data());
        blob.push(&t("mlp.norm.scale"), Dtype::F32, &[d], &layer.mlp_norm);
        blob.push(&t("mlp.w_gate"), Dtype::F32, &[d, m], layer.w_gate.data());
        blob.push(&t("mlp.w_up"), Dtype::F32, &[d, m], layer.w_up.data());
        blob.push(&t("mlp.w_down"), Dtype::F32, &[m, d], layer.w_down.data());
    }
    let vocab_ref = match vocab {
        Some(vc) => {
            vc.save(&dir.join("vocab.txt"))?;
            let sp = vc.specials();
            Some(VocabRef {
                file: "vocab.txt".into(),
                bos: sp.bos,
                eos: sp.eos,
                pad: sp.pad,
                byte_fallback_start: sp.byte_fallback_start,
            })
        }
        None => None,
    };
    let manifest = ModelManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: bundle.config,
        blob: "model.bin".into(),
        vocab: vocab_ref,
        tensors: blob.entries,
    };
    write_bytes(&dir.join("model.bin"), &blob.bytes)?;
    let manifest_path = dir.join("model.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    write_bytes(&manifest_path, format!("{json}\n").as_bytes())?;
    Ok(manifest_path)
}

/// Load and fully validate a bundle (and its vocab, when referenced) from a
/// manifest path.
pub fn load_model(manifest_path: &Path) -> Result<LoadedModel> {
    let manifest: ModelManifest = serde_json::from_slice(&read_bytes(manifest_path)?)?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(ModelError::WrongFormat {
            found: manifest.format,
            version: manifest.version,
        });
    }
    manifest.config.validate()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let blob_bytes = read_bytes(&dir.join(&manifest.blob))?;
    let mut reader = BlobReader::new(manifest.tensors, blob_bytes);
    let d = manifest.config.d_model;
    let m = manifest.config.d_mlp;
    let v = manifest.config.vocab_size;
    let take_mat = |reader: &mut BlobReader, name: &str, rows: usize, cols: usize| -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, reader.take(name, Dtype::F32, &[rows, cols])?))
    };
    let embed = take_mat(&mut reader, "embed.tokens", v, d)?;
    let unembed = take_mat(&mut reader, "unembed.w", d, v)?;
    let mut layers = Vec::with_capacity(manifest.config.n_layers);
    for l in 0..manifest.config.n_layers {
        let t = |suffix: &str| format!("layers.{l}.{suffix}");
        layers.push(LayerWeights {
            attn_norm: reader.take(&t("attn.norm.scale"), Dtype::F32, &[d])?,
            wq: take_mat(&mut reader, &t("attn.wq"), d, d)?,
            wk: take_mat(&mut reader, &t("attn.wk"), d, d)?,
            wv: take_mat(&mut reader, &t("attn.wv"), d, d)?,
            wo: take_mat(&mut reader, &t("attn.wo"), d, d)?,
            mlp_norm: reader.take(&t("mlp.norm.scale"), Dtype::F32, &[d])?,
            w_gate: take_mat(&mut reader, &t("mlp.w_gate"), d, m)?,
            w_up: take_mat(&mut reader, &t("mlp.w_up"), d, m)?,
            w_down: take_mat(&mut reader, &t("mlp.w_down"), m, d)?,
        });
    }
    reader.finish()?;
    let bundle = ModelBundle {
        config: manifest.config,
        embed,
        unembed,
        layers,
    };
    bundle.validate()?;
    let vocab = match manifest.vocab {
        Some(vref) => Some(Vocab::load(
            &dir.join(&vref.file),
            SpecialTokens {
                bos: vref.bos,
                eos: vref.eos,
                pad: vref.pad,
                byte_fallback_start: vref.byte_fallback_start,
            },
        )?),
        None => None,
    };
    Ok(LoadedModel { model: bundle, vocab })
}
