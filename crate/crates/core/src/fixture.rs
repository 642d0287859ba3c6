//! The shipped desk-scale fixture: a planted-bias model plus a matching
//! synthetic clinical corpus, small enough to audit by hand yet rich enough
//! to drive the whole pipeline end to end with outcomes that are guaranteed
//! by construction.
//!
//! The model is a two-layer decoder whose first layer uniformly mixes every
//! position's (normalized) embedding into the residual stream, so the second
//! layer's MLP sees every token of the input at the final position. All
//! non-planted neurons are dead. Ten neurons are planted in layer 1:
//!
//! | neuron | trigger        | writes                        | strength |
//! |-------:|----------------|-------------------------------|----------|
//! | 0..3   | " white/black/asian" (direct cue) | its label token | 2.0 |
//! | 3..6   | " Russian/Haitian/Vietnamese"     | its label token | 1.5 |
//! | 6..9   | " Russian/Haitian/Vietnamese"     | its country     | 1.0 |
//! | 9      | " Russian"                        | " Asian"        | 4.0 |
//!
//! Neuron 9 is the planted bias: on indirect White records (which all carry
//! the " Russian" cue) it outwrites the legitimate label writer 4.0 > 1.5,
//! so the baseline misclassifies every one of them as Asian. Suppressing it
//! hands the argmax back to the White label writer. Each planted row also
//! mixes in a small secondary token (its lowercase or demonym twin) so the
//! neuron's top-2 vocabulary projection passes the two-match keyword filter.
//!
//! The corpus is 90 records: 15 per class for direct mentions (explicit
//! demographic words) and 15 per class for indirect mentions (language
//! cues), sharing the same sentence templates across classes so the planted
//! signals are the only class-separating features.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::PromptTemplate;
use crate::model::{
    generate_synthetic_model, save_model, synthetic_vocab, AttentionKind, MlpKind, ModelError,
    PlantedNeuron, SyntheticSpec, TokenId, Vocab, VocabError, VocabSpec,
};

/// Master seed for the fixture model's random tails (nothing the tests
/// assert on depends on it; the planted structure is seed-independent).
pub const FIXTURE_SEED: u64 = 42;

pub const D_MODEL: usize = 352;
pub const N_LAYERS: usize = 2;
pub const N_HEADS: usize = 4;
pub const D_MLP: usize = 24;

/// Layer holding the planted neurons (the second block).
pub const PLANTED_LAYER: usize = 1;

const LABEL_TOKENS: [&str; 3] = [" White", " Black or African American", " Asian"];
const LOWER_TOKENS: [&str; 3] = [" white", " black", " asian"];
const NATIONALITY_TOKENS: [&str; 3] = [" Russian", " Haitian", " Vietnamese"];
const COUNTRY_TOKENS: [&str; 3] = [" Russia", " Haiti", " Vietnam"];
/// Raw `race` column values, aligned with the token triples above.
const RACE_FIELDS: [&str; 3] = ["white", "black/african american", "asian"];

/// Sentence scaffolding. Every template below must tokenize exactly into
/// these words (leading spaces included), so the corpus never falls back to
/// byte tokens.
const SCAFFOLD: [&str; 65] = [
    "The", " patient", " is", " a", " male", " female", " identifies", " as", " chart", " lists",
    " the", " nurse", " notes", " and", " retired", " form", " marks", " describes", " himself",
    " herself", " record", " shows", " adult", " veteran", " intake", " sheet", " says",
    " social", " worker", " met", " resident", " stable", ".", " speaks", " at", " home",
    " prefers", " interpreter", " family", " requested", " only", " mention", " reads",
    " newspapers", " daughter", " translates", " from", " watches", " television", " flags",
    " speaker", " sings", " in", " choirs", " writes", " letters", " clinic", " booked",
    " answered", " voicemail", " greeting", " grew", " up", " speaking", " spoken",
];

/// Direct-mention sentence templates; `{}` takes a lowercase demographic
/// word such as " white".
const DIRECT_TEMPLATES: [&str; 15] = [
    "The patient is a{} male.",
    "The patient is a{} female.",
    "The patient identifies as{}.",
    "The chart lists the patient as{}.",
    "The nurse notes a{} patient.",
    "The patient is{} and retired.",
    "The form marks the patient as{}.",
    "The patient describes himself as{}.",
    "The patient describes herself as{}.",
    "The record shows a{} adult.",
    "The patient is a{} veteran.",
    "The intake sheet says{}.",
    "The social worker met a{} patient.",
    "The nurse describes a{} resident.",
    "The resident is{} and stable.",
];

/// Indirect-mention templates; `{}` takes a language cue such as
/// " Russian".
const INDIRECT_TEMPLATES: [&str; 15] = [
    "The patient speaks{} at home.",
    "The patient prefers a{} interpreter.",
    "The family requested a{} interpreter.",
    "The patient speaks only{}.",
    "The notes mention{} spoken at home.",
    "The patient reads{} newspapers.",
    "The daughter translates from{}.",
    "The patient watches{} television.",
    "The chart flags a{} speaker.",
    "The patient sings in{} choirs.",
    "The patient writes letters in{}.",
    "The clinic booked a{} interpreter.",
    "The patient answered in{}.",
    "The voicemail greeting is in{}.",
    "The patient grew up speaking{}.",
];

/// The prompt template split at its `{text}` slot, so that
/// `prefix + text + suffix` is byte-identical to a real render.
fn template_halves() -> (String, String) {
    let template = PromptTemplate::creact_default();
    let rendered = template.template.replace("{options}", &template.options_string());
    let (prefix, suffix) = rendered
        .split_once("{text}")
        .expect("the default template has exactly one {text} slot");
    (prefix.to_string(), suffix.to_string())
}

/// Regular-token word list, in id order (first word gets the first regular
/// token id).
pub fn fixture_words() -> Vec<String> {
    let (prefix, suffix) = template_halves();
    let mut words = vec![prefix, suffix];
    for group in [
        &LABEL_TOKENS[..],
        &LOWER_TOKENS[..],
        &NATIONALITY_TOKENS[..],
        &COUNTRY_TOKENS[..],
        &SCAFFOLD[..],
    ] {
        words.extend(group.iter().map(|s| s.to_string()));
    }
    words
}

pub fn fixture_vocab() -> Vocab {
    Vocab::standard(fixture_words()).expect("fixture word list is well-formed")
}

fn tok(vocab: &Vocab, s: &str) -> TokenId {
    vocab
        .lookup(s)
        .unwrap_or_else(|| panic!("fixture token {s:?} missing from vocabulary"))
}

/// The planted-bias model spec. See the module docs for the wiring table.
pub fn planted_spec() -> SyntheticSpec {
    let vocab = fixture_vocab();
    let mut planted = Vec::new();
    // Direct-label writers: lowercase demographic word -> label token.
    for (i, (lower, label)) in LOWER_TOKENS.iter().zip(LABEL_TOKENS).enumerate() {
        planted.push(PlantedNeuron {
            layer: PLANTED_LAYER,
            index: i,
            group_label: format!("direct:{}", lower.trim()),
            write_token: tok(&vocab, label),
            strength: 2.0,
            secondary_token: Some(tok(&vocab, lower)),
            secondary_weight: 0.009,
            trigger_token: Some(tok(&vocab, lower)),
            gate_gain: 0.5,
        });
    }
    // Indirect-label writers: language cue -> label token.
    for (i, (nat, label)) in NATIONALITY_TOKENS.iter().zip(LABEL_TOKENS).enumerate() {
        planted.push(PlantedNeuron {
            layer: PLANTED_LAYER,
            index: 3 + i,
            group_label: format!("indirect-label:{}", nat.trim()),
            write_token: tok(&vocab, label),
            strength: 1.5,
            secondary_token: Some(tok(&vocab, LOWER_TOKENS[i])),
            secondary_weight: 0.009,
            trigger_token: Some(tok(&vocab, nat)),
            gate_gain: 0.5,
        });
    }
    // Country writers: language cue -> country token (the "indirect" neuron
    // group the keyword filter should find).
    for (i, (nat, country)) in NATIONALITY_TOKENS.iter().zip(COUNTRY_TOKENS).enumerate() {
        planted.push(PlantedNeuron {
            layer: PLANTED_LAYER,
            index: 6 + i,
            group_label: format!("indirect-country:{}", nat.trim()),
            write_token: tok(&vocab, country),
            strength: 1.0,
            secondary_token: Some(tok(&vocab, nat)),
            secondary_weight: 0.009,
            trigger_token: Some(tok(&vocab, nat)),
            gate_gain: 0.5,
        });
    }
    // The planted bias: " Russian" (the White-indirect cue) writes " Asian"
    // hard enough to beat the legitimate White writer (4.0 vs 1.5).
    planted.push(PlantedNeuron {
        layer: PLANTED_LAYER,
        index: 9,
        group_label: "bias:russian->asian".into(),
        write_token: tok(&vocab, " Asian"),
        strength: 4.0,
        secondary_token: Some(tok(&vocab, " asian")),
        secondary_weight: 0.009,
        trigger_token: Some(tok(&vocab, " Russian")),
        gate_gain: 0.5,
    });
    SyntheticSpec {
        d_model: D_MODEL,
        n_layers: N_LAYERS,
        n_heads: N_HEADS,
        d_mlp: D_MLP,
        seed: FIXTURE_SEED,
        vocab: VocabSpec::Words(fixture_words()),
        orthogonal_unembedding: true,
        tied_embedding_scale: Some(1.0),
        // Layer 0 spreads every position into the stream; layer 1 leaves the
        // mixed state alone so its planted MLP is the only writer.
        attention: vec![AttentionKind::UniformMix, AttentionKind::Passthrough],
        mlp: MlpKind::Zero,
        planted_neurons: planted,
        ..Default::default()
    }
}

/// The 90-record corpus: (text, raw race field, mention kind as the CSV/JSONL
/// column value), direct block first, each block ordered White, Black/AA,
/// Asian, 15 templates apiece.
pub fn corpus_rows() -> Vec<(String, &'static str, &'static str)> {
    let mut rows = Vec::with_capacity(90);
    for (class, race) in RACE_FIELDS.iter().enumerate() {
        for template in DIRECT_TEMPLATES {
            rows.push((template.replace("{}", LOWER_TOKENS[class]), *race, "direct"));
        }
    }
    for (class, race) in RACE_FIELDS.iter().enumerate() {
        for template in INDIRECT_TEMPLATES {
            rows.push((
                template.replace("{}", NATIONALITY_TOKENS[class]),
                *race,
                "indirect",
            ));
        }
    }
    rows
}

pub fn corpus_jsonl() -> String {
    let mut out = String::new();
    for (text, race, mention) in corpus_rows() {
        let line = serde_json::json!({
            "text": text,
            "race": race,
            "mention_type": mention,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

fn keyword_toml(map: &BTreeMap<&str, Vec<&str>>) -> String {
    let owned: BTreeMap<String, Vec<String>> = map
        .iter()
        .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
        .collect();
    toml::to_string(&owned).expect("keyword maps serialize")
}

/// Keyword lists for direct-mention groups: the label words themselves.
pub fn keywords_direct_toml() -> String {
    keyword_toml(&BTreeMap::from([
        ("White", vec!["white"]),
        ("BlackAA", vec!["black", "black or african american"]),
        ("Asian", vec!["asian"]),
    ]))
}

/// Keyword lists for indirect-mention groups: demonyms and countries.
pub fn keywords_indirect_toml() -> String {
    keyword_toml(&BTreeMap::from([
        ("White", vec!["russian", "russia"]),
        ("BlackAA", vec!["haitian", "haiti"]),
        ("Asian", vec!["vietnamese", "vietnam"]),
    ]))
}

/// The fixture's run configuration, with paths relative to the fixture
/// directory.
pub fn run_config_toml() -> String {
    let config = r#"[run]
seed = 42
mode = "creact-indirect"
output_dir = "report"

[model]
manifest = "model/model.json"

[dataset]
path = "creact_synthetic.jsonl"
test_fraction = 0.3

[probe]
layer = 1
lr = 0.1
epochs = 500
l2_lambda = 0.001

[attribution]
layer_window = 4
top_n = 20
k = 20
min_matches = 2
keywords_direct = "keywords_direct.toml"
keywords_indirect = "keywords_indirect.toml"

[intervention]
factors = [5.0, 10.0, 20.0]
max_new = 4
"#;
    config.to_string()
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub dir: PathBuf,
    pub model_manifest: PathBuf,
    pub corpus: PathBuf,
    pub keywords_direct: PathBuf,
    pub keywords_indirect: PathBuf,
    pub spec: PathBuf,
    pub config: PathBuf,
}

#[derive(thiserror::Error, Debug)]
pub enum FixtureError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fixture vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("fixture spec serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Materialize the whole fixture into `dir`: generated model weights +
/// vocabulary, the corpus, keyword lists, the generator spec, and a ready
/// run config.
pub fn write_fixture(dir: &Path) -> Result<FixturePaths, FixtureError> {
    let write = |path: PathBuf, contents: &str| -> Result<PathBuf, FixtureError> {
        std::fs::write(&path, contents).map_err(|source| FixtureError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    std::fs::create_dir_all(dir).map_err(|source| FixtureError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let spec = planted_spec();
    let model = generate_synthetic_model(&spec)?;
    let vocab = synthetic_vocab(&spec)?.expect("fixture vocab is word-based");
    let model_manifest = save_model(&model, Some(&vocab), &dir.join("model"))?;
    let spec_json = format!("{}\n", serde_json::to_string_pretty(&spec)?);
    Ok(FixturePaths {
        dir: dir.to_path_buf(),
        model_manifest,
        corpus: write(dir.join("creact_synthetic.jsonl"), &corpus_jsonl())?,
        keywords_direct: write(dir.join("keywords_direct.toml"), &keywords_direct_toml())?,
        keywords_indirect: write(dir.join("keywords_indirect.toml"), &keywords_indirect_toml())?,
        spec: write(dir.join("model.spec.json"), &spec_json)?,
        config: write(dir.join("run.toml"), &run_config_toml())?,
    })
}
