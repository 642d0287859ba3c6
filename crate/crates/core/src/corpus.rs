//! Dataset ingestion, group-label consolidation, prompt rendering, and
//! stratified splits.
//!
//! Two record schemas are supported, both as CSV (with a header row) or JSONL:
//!
//! - toxigen-shaped: columns `{text, target_group}`; raw target groups are
//!   consolidated into five racial categories, with the non-racial categories
//!   excluded.
//! - creact-shaped: columns `{text, race, mention_type}`; three racial
//!   categories, each record flagged as a direct mention (race stated
//!   outright) or an indirect one (proxy cues such as language or country of
//!   origin).
//!
//! Consolidation maps are shipped as editable TOML (`fixtures/consolidation/`)
//! with the defaults below baked in. Splits are stratified per group and
//! deterministic per seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(thiserror::Error, Debug)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at row {row}: {reason}")]
    SchemaError { row: usize, reason: String },
    #[error("unknown raw group {raw:?}{}", row.map(|r| format!(" at row {r}")).unwrap_or_default())]
    UnknownRawGroup { raw: String, row: Option<usize> },
    #[error("group {group} has only {size} record(s); at least 2 are required to split")]
    GroupTooSmall { group: GroupLabel, size: usize },
    #[error("test_fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("invalid prompt template: {0}")]
    BadTemplate(String),
    #[error("consolidation map error: {0}")]
    BadMap(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Consolidated group labels across both dataset modes. Variant declaration
/// order is alphabetical, so the derived `Ord` gives each mode's class order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum GroupLabel {
    Asian,
    Black,
    BlackAA,
    Latino,
    MiddleEastern,
    NativeAmerican,
    White,
}

impl GroupLabel {
    /// Every label, in declaration (alphabetical) order.
    pub const ALL: [GroupLabel; 7] = [
        GroupLabel::Asian,
        GroupLabel::Black,
        GroupLabel::BlackAA,
        GroupLabel::Latino,
        GroupLabel::MiddleEastern,
        GroupLabel::NativeAmerican,
        GroupLabel::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupLabel::Asian => "Asian",
            GroupLabel::Black => "Black",
            GroupLabel::BlackAA => "BlackAA",
            GroupLabel::Latino => "Latino",
            GroupLabel::MiddleEastern => "MiddleEastern",
            GroupLabel::NativeAmerican => "NativeAmerican",
            GroupLabel::White => "White",
        }
    }

    /// The surface string used when the label appears inside a prompt's
    /// option list.
    pub fn prompt_option(self) -> &'static str {
        match self {
            GroupLabel::BlackAA => "Black or African American",
            GroupLabel::MiddleEastern => "Middle Eastern",
            GroupLabel::NativeAmerican => "Native American",
            other => other.name(),
        }
    }
}

impl fmt::Display for GroupLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which dataset schema and (for creact) which mention subset a run analyzes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    Toxigen,
    CreactDirect,
    CreactIndirect,
}

impl DatasetMode {
    pub fn is_creact(self) -> bool {
        matches!(self, DatasetMode::CreactDirect | DatasetMode::CreactIndirect)
    }

    /// The mode's class order (alphabetical; all probes and reports use it).
    pub fn labels(self) -> &'static [GroupLabel] {
        match self {
            DatasetMode::Toxigen => &[
                GroupLabel::Asian,
                GroupLabel::Black,
                GroupLabel::Latino,
                GroupLabel::MiddleEastern,
                GroupLabel::NativeAmerican,
            ],
            DatasetMode::CreactDirect | DatasetMode::CreactIndirect => {
                &[GroupLabel::Asian, GroupLabel::BlackAA, GroupLabel::White]
            }
        }
    }

    pub fn mention(self) -> Mention {
        match self {
            DatasetMode::Toxigen => Mention::NotApplicable,
            DatasetMode::CreactDirect => Mention::Direct,
            DatasetMode::CreactIndirect => Mention::Indirect,
        }
    }
}

impl fmt::Display for DatasetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetMode::Toxigen => "toxigen",
            DatasetMode::CreactDirect => "creact-direct",
            DatasetMode::CreactIndirect => "creact-indirect",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mention {
    Direct,
    Indirect,
    NotApplicable,
}

impl fmt::Display for Mention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mention::Direct => "direct",
            Mention::Indirect => "indirect",
            Mention::NotApplicable => "n/a",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consolidated {
    Group(GroupLabel),
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub text: String,
    pub raw_group: String,
    pub group: Consolidated,
    pub mention: Mention,
    pub split: Split,
}

impl Record {
    pub fn label(&self) -> Option<GroupLabel> {
        match self.group {
            Consolidated::Group(g) => Some(g),
            Consolidated::Excluded => None,
        }
    }
}

/// Raw string → consolidated label mapping. Lookups lowercase and trim the
/// raw string first; unknown strings are errors, never silently excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsolidationMap {
    entries: BTreeMap<String, Consolidated>,
}

impl ConsolidationMap {
    /// toxigen raw target groups → five racial categories; the non-racial
    /// categories are excluded.
    pub fn toxigen_default() -> Self {
        use Consolidated::{Excluded, Group};
        use GroupLabel::*;
        let entries = [
            ("asian", Group(Asian)),
            ("chinese", Group(Asian)),
            ("black", Group(Black)),
            ("latino", Group(Latino)),
            ("mexican", Group(Latino)),
            ("native_american", Group(NativeAmerican)),
            ("middle_east", Group(MiddleEastern)),
            ("jewish", Group(MiddleEastern)),
            ("muslim", Group(MiddleEastern)),
            ("women", Excluded),
            ("lgbtq", Excluded),
            ("mental_dis", Excluded),
            ("physical_dis", Excluded),
        ];
        Self {
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    /// creact raw race strings → the three categories with sufficient
    /// representation; the remaining census categories are excluded.
    pub fn creact_default() -> Self {
        use Consolidated::{Excluded, Group};
        use GroupLabel::*;
        let entries = [
            ("white", Group(White)),
            ("black/african american", Group(BlackAA)),
            ("black or african american", Group(BlackAA)),
            ("asian", Group(Asian)),
            ("hispanic/latino", Excluded),
            ("american indian/alaska native", Excluded),
            ("native hawaiian/pacific islander", Excluded),
            ("multiple race/ethnicity", Excluded),
            ("unknown/not specified", Excluded),
        ];
        Self {
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    pub fn default_for(mode: DatasetMode) -> Self {
        if mode.is_creact() {
            Self::creact_default()
        } else {
            Self::toxigen_default()
        }
    }

    pub fn lookup(&self, raw: &str) -> Result<Consolidated> {
        let key = raw.trim().to_lowercase();
        self.entries
            .get(&key)
            .copied()
            .ok_or(CorpusError::UnknownRawGroup {
                raw: raw.to_string(),
                row: None,
            })
    }

    /// Parse from TOML: a single `[groups]` table mapping raw strings to a
    /// `GroupLabel` name or `"excluded"`.
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            groups: BTreeMap<String, String>,
        }
        let file: File =
            toml::from_str(text).map_err(|e| CorpusError::BadMap(e.to_string()))?;
        let mut entries = BTreeMap::new();
        for (raw, target) in file.groups {
            let value = if target.eq_ignore_ascii_case("excluded") {
                Consolidated::Excluded
            } else {
                let label = [
                    GroupLabel::Asian,
                    GroupLabel::Black,
                    GroupLabel::BlackAA,
                    GroupLabel::Latino,
                    GroupLabel::MiddleEastern,
                    GroupLabel::NativeAmerican,
                    GroupLabel::White,
                ]
                .into_iter()
                .find(|l| l.name() == target)
                .ok_or_else(|| {
                    CorpusError::BadMap(format!("unknown group label {target:?} for {raw:?}"))
                })?;
                Consolidated::Group(label)
            };
            entries.insert(raw.to_lowercase(), value);
        }
        Ok(Self { entries })
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::from("[groups]\n");
        for (raw, value) in &self.entries {
            let target = match value {
                Consolidated::Group(g) => g.name(),
                Consolidated::Excluded => "excluded",
            };
            out.push_str(&format!("{raw:?} = {target:?}\n"));
        }
        out
    }
}

/// Consolidate a toxigen raw target-group string with the default map.
pub fn consolidate_group(raw: &str) -> Result<Consolidated> {
    ConsolidationMap::toxigen_default().lookup(raw)
}

/// Load result: records in file order plus kept/excluded tallies.
#[derive(Debug, Clone)]
pub struct CorpusLoad {
    pub records: Vec<Record>,
    pub kept: usize,
    pub excluded: usize,
}

impl CorpusLoad {
    fn tally(records: Vec<Record>) -> Self {
        let kept = records
            .iter()
            .filter(|r| matches!(r.group, Consolidated::Group(_)))
            .count();
        let excluded = records.len() - kept;
        Self { records, kept, excluded }
    }
}

#[derive(Debug, Deserialize)]
struct ToxigenRow {
    text: String,
    target_group: String,
}

#[derive(Debug, Deserialize)]
struct CreactRow {
    text: String,
    race: String,
    mention_type: String,
}

fn parse_mention(raw: &str, row: usize) -> Result<Mention> {
    match raw.trim().to_lowercase().as_str() {
        "direct" => Ok(Mention::Direct),
        "indirect" => Ok(Mention::Indirect),
        other => Err(CorpusError::SchemaError {
            row,
            reason: format!("mention_type must be direct|indirect, got {other:?}"),
        }),
    }
}

/// Deserialize each data row of a CSV (header required) or JSONL file.
/// Row numbers in errors are 1-based over data rows.
fn load_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CorpusError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => CorpusError::SchemaError { row: 0, reason: e.to_string() },
        })?;
        let mut rows = Vec::new();
        for (i, row) in reader.deserialize().enumerate() {
            rows.push(row.map_err(|e| CorpusError::SchemaError {
                row: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(rows)
    } else {
        let raw = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rows = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(line).map_err(|e| CorpusError::SchemaError {
                row: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(rows)
    }
}

/// Load a toxigen-shaped file with the given (or default) consolidation map.
pub fn load_toxigen_with(path: &Path, map: &ConsolidationMap) -> Result<CorpusLoad> {
    let rows: Vec<ToxigenRow> = load_rows(path)?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let group = map.lookup(&row.target_group).map_err(|e| match e {
            CorpusError::UnknownRawGroup { raw, .. } => {
                CorpusError::UnknownRawGroup { raw, row: Some(i + 1) }
            }
            other => other,
        })?;
        records.push(Record {
            text: row.text,
            raw_group: row.target_group,
            group,
            mention: Mention::NotApplicable,
            split: Split::Unassigned,
        });
    }
    Ok(CorpusLoad::tally(records))
}

pub fn load_toxigen(path: &Path) -> Result<CorpusLoad> {
    load_toxigen_with(path, &ConsolidationMap::toxigen_default())
}

/// Load a creact-shaped file with the given (or default) consolidation map.
pub fn load_creact_with(path: &Path, map: &ConsolidationMap) -> Result<CorpusLoad> {
    let rows: Vec<CreactRow> = load_rows(path)?;
    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let mention = parse_mention(&row.mention_type, i + 1)?;
        let group = map.lookup(&row.race).map_err(|e| match e {
            CorpusError::UnknownRawGroup { raw, .. } => {
                CorpusError::UnknownRawGroup { raw, row: Some(i + 1) }
            }
            other => other,
        })?;
        records.push(Record {
            text: row.text,
            raw_group: row.race,
            group,
            mention,
            split: Split::Unassigned,
        });
    }
    Ok(CorpusLoad::tally(records))
}

pub fn load_creact(path: &Path) -> Result<CorpusLoad> {
    load_creact_with(path, &ConsolidationMap::creact_default())
}

/// Assign train/test splits, stratified per consolidated group. Excluded
/// records stay `Unassigned`. Per-group test count = `round(test_fraction ×
/// group size)` (round half away from zero). Deterministic per seed.
pub fn split(records: &mut [Record], test_fraction: f64, seed: u64) -> Result<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::BadFraction(test_fraction));
    }
    let mut by_group: BTreeMap<GroupLabel, Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        if let Some(label) = record.label() {
            by_group.entry(label).or_default().push(i);
        }
    }
    for (&group, indices) in &by_group {
        if indices.len() < 2 {
            return Err(CorpusError::GroupTooSmall { group, size: indices.len() });
        }
    }
    let mut rng = SplitMix64::new(seed);
    for (_, mut indices) in by_group {
        // Group iteration order is fixed (BTreeMap) so the stream is stable.
        rng.shuffle(&mut indices);
        let n_test = (test_fraction * indices.len() as f64).round() as usize;
        for (rank, idx) in indices.into_iter().enumerate() {
            records[idx].split = if rank < n_test { Split::Test } else { Split::Train };
        }
    }
    Ok(())
}

/// A classification prompt with a `{text}` slot and an ordered option list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Must contain `{text}` exactly once; `{options}` expands to the
    /// comma-separated option surfaces.
    pub template: String,
    pub options: Vec<GroupLabel>,
}

impl PromptTemplate {
    /// The clinical-note race/ethnicity question used by the creact pipeline.
    pub fn creact_default() -> Self {
        Self {
            template: "Please read the following sentence from a clinical note. Based on the information contained within the sentence, determine which of the following races or ethnicities the patient belongs to. Please respond with only one option.\nOptions: [{options}]\nClinical Note: \"{text}\"\nInferred Race or Ethnicity:".to_string(),
            options: vec![GroupLabel::White, GroupLabel::BlackAA, GroupLabel::Asian],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.matches("{text}").count() != 1 {
            return Err(CorpusError::BadTemplate(
                "template must contain {text} exactly once".into(),
            ));
        }
        Ok(())
    }

    pub fn options_string(&self) -> String {
        self.options
            .iter()
            .map(|o| o.prompt_option())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Substitute the text into the template (byte-exact around the slots).
pub fn render_prompt(tpl: &PromptTemplate, text: &str) -> String {
    tpl.template
        .replace("{options}", &tpl.options_string())
        .replace("{text}", text)
}
