//! C ABI over the neurolens inference and attribution library.
//!
//! Conventions:
//!
//! - Handles (`NlModel`, `NlTokens`, `NlPolicy`, `NlProbe`) are opaque;
//!   create them through `nl_*` constructors and release them with the
//!   matching `nl_*_free`. Freeing `NULL` is a no-op.
//! - Fallible calls return an [`NlStatus`]; `NL_STATUS_OK` is zero. The
//!   other codes mirror the CLI's exit codes: invalid argument / config (2),
//!   unreadable or missing data (3), numeric or internal failure (4).
//! - On failure, [`nl_last_error_message`] returns a thread-local,
//!   NUL-terminated description. The pointer stays valid until the next
//!   `nl_*` call on the same thread.
//! - Strings returned through `char **out` parameters are heap-allocated;
//!   release them with [`nl_string_free`].
//! - Panics never unwind across the boundary; they surface as
//!   `NL_STATUS_NUMERIC` with the panic message in the last-error slot.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use neurolens::attribution::logit_lens;
use neurolens::corpus::GroupLabel;
use neurolens::engine::greedy_generate;
use neurolens::model::{
    generate_synthetic_model, load_model, synthetic_vocab, ModelError, NeuronRef,
};
use neurolens::probe::{load_probe, probe_direction, probe_predict_label, ProbeError, ProbeModel};
use neurolens::{InterventionPolicy, ModelBundle, SyntheticSpec, TokenId, Vocab};

/// Result of a fallible `nl_*` call. Matches the CLI's exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NlStatus {
    /// Success.
    Ok = 0,
    /// A null pointer, malformed UTF-8, or out-of-range argument.
    InvalidArgument = 2,
    /// Input files or model data could not be read or validated.
    Data = 3,
    /// A numeric or internal failure (including caught panics).
    Numeric = 4,
}

/// A loaded decoder model plus its optional tokenizer vocabulary.
pub struct NlModel {
    model: ModelBundle,
    vocab: Option<Vocab>,
}

/// An owned token-id sequence produced by [`nl_tokenize`].
pub struct NlTokens(Vec<TokenId>);

/// A suppression policy under construction: an amplification factor and a
/// set of (layer, neuron) targets.
pub struct NlPolicy {
    targets: Vec<NeuronRef>,
    factor: f64,
}

/// A trained linear probe loaded from its on-disk container.
pub struct NlProbe(ProbeModel);

type Failure = (NlStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: String = message.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("NUL bytes stripped above");
    });
}

fn boundary(body: impl FnOnce() -> Result<(), Failure>) -> NlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            NlStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {message}"));
            NlStatus::Numeric
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    (NlStatus::InvalidArgument, message.into())
}

fn data_err(message: impl ToString) -> Failure {
    (NlStatus::Data, message.to_string())
}

fn numeric_err(message: impl ToString) -> Failure {
    (NlStatus::Numeric, message.to_string())
}

fn probe_failure(e: ProbeError) -> Failure {
    match e {
        ProbeError::Io { .. } | ProbeError::Manifest(_) | ProbeError::Container(_) => data_err(e),
        _ => numeric_err(e),
    }
}

/// # Safety contract shared by all functions below
///
/// Pointer arguments must be either null (rejected with
/// `NL_STATUS_INVALID_ARGUMENT`) or valid for the access the parameter
/// implies; handle pointers must come from the matching `nl_*` constructor
/// and must not have been freed.
unsafe fn cstr_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

fn export_string(s: String, what: &str) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| data_err(format!("{what} contains a NUL byte")))
}

/// The library version as a static NUL-terminated string. Never freed.
#[no_mangle]
pub extern "C" fn nl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread ("" after a
/// success). Valid until the next `nl_*` call on the same thread; do not
/// free.
#[no_mangle]
pub extern "C" fn nl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Release a string returned through a `char **out` parameter.
#[no_mangle]
pub unsafe extern "C" fn nl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Models.

/// Load a model (and its vocabulary, if the manifest names one) from a JSON
/// manifest path.
#[no_mangle]
pub unsafe extern "C" fn nl_model_load(
    manifest_path: *const c_char,
    out: *mut *mut NlModel,
) -> NlStatus {
    boundary(|| {
        let path = cstr_arg(manifest_path, "manifest_path")?;
        let out = out_arg(out, "out")?;
        let loaded = load_model(Path::new(path)).map_err(data_err)?;
        *out = Box::into_raw(Box::new(NlModel { model: loaded.model, vocab: loaded.vocab }));
        Ok(())
    })
}

/// Generate a synthetic model from a JSON generator spec (the same schema
/// the CLI's `synth --spec` accepts).
#[no_mangle]
pub unsafe extern "C" fn nl_model_synthesize(
    spec_json: *const c_char,
    out: *mut *mut NlModel,
) -> NlStatus {
    boundary(|| {
        let text = cstr_arg(spec_json, "spec_json")?;
        let out = out_arg(out, "out")?;
        let spec: SyntheticSpec =
            serde_json::from_str(text).map_err(|e| invalid(format!("spec_json: {e}")))?;
        let model = generate_synthetic_model(&spec)
            .map_err(|e: ModelError| invalid(format!("spec rejected: {e}")))?;
        let vocab = synthetic_vocab(&spec).map_err(|e| invalid(format!("spec vocabulary: {e}")))?;
        *out = Box::into_raw(Box::new(NlModel { model, vocab }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nl_model_free(model: *mut NlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model width (`0` if `model` is null; likewise for the three functions
/// below).
#[no_mangle]
pub unsafe extern "C" fn nl_model_d_model(model: *const NlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.d_model())
}

#[no_mangle]
pub unsafe extern "C" fn nl_model_n_layers(model: *const NlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_layers())
}

#[no_mangle]
pub unsafe extern "C" fn nl_model_d_mlp(model: *const NlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.d_mlp())
}

#[no_mangle]
pub unsafe extern "C" fn nl_model_vocab_size(model: *const NlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.vocab_size())
}

/// `1` when the model carries a tokenizer vocabulary (required by
/// [`nl_tokenize`], [`nl_detokenize`], and [`nl_generate`]), else `0`.
#[no_mangle]
pub unsafe extern "C" fn nl_model_has_vocab(model: *const NlModel) -> i32 {
    model.as_ref().map_or(0, |m| i32::from(m.vocab.is_some()))
}

fn vocab_of(handle: &NlModel) -> Result<&Vocab, Failure> {
    handle
        .vocab
        .as_ref()
        .ok_or_else(|| data_err("model has no tokenizer vocabulary"))
}

// ---------------------------------------------------------------------------
// Tokenization.

/// Tokenize UTF-8 text with the model's vocabulary.
#[no_mangle]
pub unsafe extern "C" fn nl_tokenize(
    model: *const NlModel,
    text: *const c_char,
    out: *mut *mut NlTokens,
) -> NlStatus {
    boundary(|| {
        let handle = ref_arg(model, "model")?;
        let text = cstr_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        let ids = vocab_of(handle)?.tokenize(text).ids;
        *out = Box::into_raw(Box::new(NlTokens(ids)));
        Ok(())
    })
}

/// Decode token ids back into text.
#[no_mangle]
pub unsafe extern "C" fn nl_detokenize(
    model: *const NlModel,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> NlStatus {
    boundary(|| {
        let handle = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        if ids.is_null() && len > 0 {
            return Err(invalid("ids is null"));
        }
        let ids: Vec<TokenId> = std::slice::from_raw_parts(ids, len)
            .iter()
            .map(|&id| TokenId(id))
            .collect();
        for &id in &ids {
            if id.as_usize() >= handle.model.vocab_size() {
                return Err(invalid(format!(
                    "token id {} out of range (vocab size {})",
                    id.0,
                    handle.model.vocab_size()
                )));
            }
        }
        let text = vocab_of(handle)?.detokenize(&ids);
        *out = export_string(text, "detokenized text")?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nl_tokens_len(tokens: *const NlTokens) -> usize {
    tokens.as_ref().map_or(0, |t| t.0.len())
}

/// The id at `index`, or `-1` when `tokens` is null or `index` is out of
/// range.
#[no_mangle]
pub unsafe extern "C" fn nl_tokens_get(tokens: *const NlTokens, index: usize) -> i64 {
    tokens
        .as_ref()
        .and_then(|t| t.0.get(index))
        .map_or(-1, |id| i64::from(id.0))
}

#[no_mangle]
pub unsafe extern "C" fn nl_tokens_free(tokens: *mut NlTokens) {
    if !tokens.is_null() {
        drop(Box::from_raw(tokens));
    }
}

// ---------------------------------------------------------------------------
// Suppression policies.

/// Create an empty suppression policy with amplification factor `factor`
/// (must be positive and finite).
#[no_mangle]
pub unsafe extern "C" fn nl_policy_new(factor: f64, out: *mut *mut NlPolicy) -> NlStatus {
    boundary(|| {
        let out = out_arg(out, "out")?;
        if !(factor.is_finite() && factor > 0.0) {
            return Err(invalid(format!("factor must be positive and finite, got {factor}")));
        }
        *out = Box::into_raw(Box::new(NlPolicy { targets: Vec::new(), factor }));
        Ok(())
    })
}

/// Add a (layer, neuron) suppression target. Bounds are checked against the
/// model when the policy is used.
#[no_mangle]
pub unsafe extern "C" fn nl_policy_add_target(
    policy: *mut NlPolicy,
    layer: usize,
    index: usize,
) -> NlStatus {
    boundary(|| {
        let policy = out_arg(policy, "policy")?;
        policy.targets.push(NeuronRef { layer, index });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nl_policy_free(policy: *mut NlPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

// ---------------------------------------------------------------------------
// Generation and the logit lens.

/// Greedy-decode `max_new` tokens after `prompt`, optionally under a
/// suppression policy (`policy` may be null). Writes the detokenized
/// continuation (the new tokens only) to `out`.
#[no_mangle]
pub unsafe extern "C" fn nl_generate(
    model: *const NlModel,
    prompt: *const c_char,
    max_new: usize,
    policy: *const NlPolicy,
    out: *mut *mut c_char,
) -> NlStatus {
    boundary(|| {
        let handle = ref_arg(model, "model")?;
        let text = cstr_arg(prompt, "prompt")?;
        let out = out_arg(out, "out")?;
        if max_new == 0 {
            return Err(invalid("max_new must be >= 1"));
        }
        let vocab = vocab_of(handle)?;
        let ids = vocab.tokenize(text).ids;
        if ids.is_empty() {
            return Err(invalid("prompt produced no tokens"));
        }
        let built;
        let applied = match policy.as_ref() {
            Some(p) => {
                built = InterventionPolicy::new(p.targets.iter().copied(), p.factor);
                Some(&built)
            }
            None => None,
        };
        let new_ids = greedy_generate(&handle.model, &ids, max_new, applied).map_err(numeric_err)?;
        *out = export_string(vocab.detokenize(&new_ids), "generated text")?;
        Ok(())
    })
}

/// Project a residual-space vector (`h`, length `d_model`) through the
/// unembedding and write the top-`k` tokens as a JSON document to `out`.
#[no_mangle]
pub unsafe extern "C" fn nl_logit_lens_json(
    model: *const NlModel,
    h: *const f64,
    len: usize,
    k: usize,
    out: *mut *mut c_char,
) -> NlStatus {
    boundary(|| {
        let handle = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        if h.is_null() {
            return Err(invalid("h is null"));
        }
        if len != handle.model.d_model() {
            return Err(invalid(format!(
                "h has length {len}, expected d_model = {}",
                handle.model.d_model()
            )));
        }
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        let hidden = std::slice::from_raw_parts(h, len);
        let projection =
            logit_lens(&handle.model, handle.vocab.as_ref(), hidden, k).map_err(numeric_err)?;
        let json = serde_json::to_string_pretty(&projection).map_err(numeric_err)?;
        *out = export_string(json, "projection JSON")?;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Probes.

/// Load a trained probe from its JSON manifest path.
#[no_mangle]
pub unsafe extern "C" fn nl_probe_load(
    manifest_path: *const c_char,
    out: *mut *mut NlProbe,
) -> NlStatus {
    boundary(|| {
        let path = cstr_arg(manifest_path, "manifest_path")?;
        let out = out_arg(out, "out")?;
        let probe = load_probe(Path::new(path)).map_err(probe_failure)?;
        *out = Box::into_raw(Box::new(NlProbe(probe)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nl_probe_free(probe: *mut NlProbe) {
    if !probe.is_null() {
        drop(Box::from_raw(probe));
    }
}

/// Feature dimension the probe expects (`0` if `probe` is null).
#[no_mangle]
pub unsafe extern "C" fn nl_probe_dim(probe: *const NlProbe) -> usize {
    probe.as_ref().map_or(0, |p| p.0.w.rows())
}

#[no_mangle]
pub unsafe extern "C" fn nl_probe_num_classes(probe: *const NlProbe) -> usize {
    probe.as_ref().map_or(0, |p| p.0.class_order.len())
}

/// The name of class `index` in the probe's class order.
#[no_mangle]
pub unsafe extern "C" fn nl_probe_class_name(
    probe: *const NlProbe,
    index: usize,
    out: *mut *mut c_char,
) -> NlStatus {
    boundary(|| {
        let probe = ref_arg(probe, "probe")?;
        let out = out_arg(out, "out")?;
        let class = probe
            .0
            .class_order
            .get(index)
            .ok_or_else(|| invalid(format!("class index {index} out of range")))?;
        *out = export_string(class.name().to_string(), "class name")?;
        Ok(())
    })
}

/// Classify a feature vector (length must equal [`nl_probe_dim`]); writes
/// the predicted class name to `out`.
#[no_mangle]
pub unsafe extern "C" fn nl_probe_predict(
    probe: *const NlProbe,
    features: *const f64,
    len: usize,
    out: *mut *mut c_char,
) -> NlStatus {
    boundary(|| {
        let probe = ref_arg(probe, "probe")?;
        let out = out_arg(out, "out")?;
        if features.is_null() {
            return Err(invalid("features is null"));
        }
        if len != probe.0.w.rows() {
            return Err(invalid(format!(
                "features has length {len}, expected {}",
                probe.0.w.rows()
            )));
        }
        let x = std::slice::from_raw_parts(features, len);
        let label = probe_predict_label(&probe.0, x).map_err(probe_failure)?;
        *out = export_string(label.name().to_string(), "predicted label")?;
        Ok(())
    })
}

/// Copy the probe's direction (weight column) for the named class into
/// `out_buf`, which must hold exactly [`nl_probe_dim`] doubles.
#[no_mangle]
pub unsafe extern "C" fn nl_probe_direction(
    probe: *const NlProbe,
    class_name: *const c_char,
    out_buf: *mut f64,
    buf_len: usize,
) -> NlStatus {
    boundary(|| {
        let probe = ref_arg(probe, "probe")?;
        let name = cstr_arg(class_name, "class_name")?;
        if out_buf.is_null() {
            return Err(invalid("out_buf is null"));
        }
        if buf_len != probe.0.w.rows() {
            return Err(invalid(format!(
                "out_buf has length {buf_len}, expected {}",
                probe.0.w.rows()
            )));
        }
        let class = GroupLabel::ALL
            .iter()
            .copied()
            .find(|l| l.name() == name)
            .ok_or_else(|| invalid(format!("unknown class name {name:?}")))?;
        let direction = probe_direction(&probe.0, class).map_err(probe_failure)?;
        std::slice::from_raw_parts_mut(out_buf, buf_len).copy_from_slice(&direction);
        Ok(())
    })
}
