//! Group-conditioned activation analysis, outcome tabulation, label parsing,
//! and intervention sweeps.
//!
//! This module turns raw traces and generations into the report tables:
//!
//! - [`activation_matrix`]: mean activation of each neuron group on each
//!   demographic slice of the corpus.
//! - [`parse_label`]: maps a free-form generation onto one of the prompt's
//!   options, or `Unknown`.
//! - [`error_pattern`]: label→label misclassification counts with the
//!   dominant pair and its percentage.
//! - [`outcome_buckets`]: mean group activations bucketed by
//!   (actual → predicted) outcome, with `---` markers for empty buckets.
//! - [`intervention_sweep`]: reruns misclassified records under suppression
//!   policies of increasing strength and tabulates where predictions move.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{normalize_token, NeuronGroup};
use crate::corpus::{GroupLabel, Mention};
use crate::engine::{
    self, forward, greedy_generate, CapturePlan, EngineError, InterventionPolicy, Pooling,
};
use crate::model::{ModelBundle, NeuronRef, TokenId, Vocab};

#[derive(thiserror::Error, Debug)]
pub enum AnalysisError {
    #[error("neuron group {0} has no members")]
    EmptyGroup(String),
    #[error("no records to analyze: {0}")]
    NoRecords(&'static str),
    #[error("no baseline errors: the intervention sweep needs at least one misclassified record")]
    NoBaselineErrors,
    #[error("record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("amplification factor {0} must be positive and finite")]
    BadFactor(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// What a generation resolved to: one of the offered labels, or Unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Prediction {
    Label(GroupLabel),
    Unknown,
}

impl Prediction {
    pub fn label(&self) -> Option<GroupLabel> {
        match self {
            Prediction::Label(l) => Some(*l),
            Prediction::Unknown => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Prediction::Label(l) => l.name(),
            Prediction::Unknown => "Unknown",
        }
    }
}

impl std::fmt::Display for Prediction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Prediction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "Unknown" {
            return Ok(Prediction::Unknown);
        }
        GroupLabel::ALL
            .iter()
            .find(|l| l.name() == raw)
            .map(|l| Prediction::Label(*l))
            .ok_or_else(|| serde::de::Error::custom(format!("unknown prediction label {raw:?}")))
    }
}

/// Map a generated string onto the offered options.
///
/// The candidate text is the first `[bracketed]` segment when the trimmed
/// generation opens with `[` (an unterminated bracket yields the rest of the
/// string), otherwise the whole leading text. The candidate matches an option
/// when — after NFKC folding, lowercasing, and stripping edge punctuation —
/// it equals or starts with the option's prompt string or enum name (so both
/// "Black or African American" and "BlackAA" resolve). Exactly one option
/// must match; zero or several yield `Unknown`.
pub fn parse_label(generated: &str, options: &[GroupLabel]) -> Prediction {
    let trimmed = generated.trim_start();
    let candidate = if let Some(rest) = trimmed.strip_prefix('[') {
        match rest.find(']') {
            Some(end) => &rest[..end],
            None => rest,
        }
    } else {
        trimmed
    };
    let candidate = normalize_token(candidate);
    if candidate.is_empty() {
        return Prediction::Unknown;
    }
    let mut matched: Option<GroupLabel> = None;
    for option in options {
        let forms = [
            normalize_token(option.prompt_option()),
            normalize_token(option.name()),
        ];
        if forms
            .iter()
            .any(|form| !form.is_empty() && candidate.starts_with(form.as_str()))
        {
            if matched.is_some() && matched != Some(*option) {
                return Prediction::Unknown; // ambiguous
            }
            matched = Some(*option);
        }
    }
    match matched {
        Some(label) => Prediction::Label(label),
        None => Prediction::Unknown,
    }
}

/// Render an optional mean as a fixed-width table cell: `---` for an empty
/// bucket, otherwise an explicitly signed two-decimal value (`+6.04`,
/// `-0.96`).
pub fn format_cell(mean: Option<f64>) -> String {
    match mean {
        None => "---".to_string(),
        Some(v) => format!("{v:+.2}"),
    }
}

fn union_refs(groups: &[NeuronGroup]) -> Result<std::collections::BTreeSet<NeuronRef>> {
    let mut refs = std::collections::BTreeSet::new();
    for group in groups {
        if group.members.is_empty() {
            return Err(AnalysisError::EmptyGroup(group.row_label()));
        }
        refs.extend(group.refs());
    }
    Ok(refs)
}

/// Mean pooled activation per neuron group for one input, keyed by the
/// group's row label. One forward pass captures the union of all members.
pub fn group_activations(
    model: &ModelBundle,
    tokens: &[TokenId],
    groups: &[NeuronGroup],
    policy: Option<&InterventionPolicy>,
    pooling: Pooling,
    pad_token: Option<TokenId>,
) -> Result<BTreeMap<String, f64>> {
    let plan = CapturePlan {
        neurons: union_refs(groups)?,
        pooling,
        pad_token,
        ..CapturePlan::default()
    };
    let trace = forward(model, tokens, &plan, policy)?;
    let mut out = BTreeMap::new();
    for group in groups {
        let mut sum = 0.0;
        for member in &group.members {
            sum += engine::pool_activation(&trace, member.neuron, pooling)
                .expect("captured via the plan above");
        }
        out.insert(group.row_label(), sum / group.members.len() as f64);
    }
    Ok(out)
}

/// Mean activation of each neuron group (rows) over each demographic slice
/// of the corpus (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<GroupLabel>,
    /// `cells[row][col]`; `None` marks a column with no records.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Records averaged per column.
    pub record_counts: Vec<usize>,
    /// Neurons averaged per row.
    pub member_counts: Vec<usize>,
}

impl ActivationMatrix {
    /// CSV with `---` empty markers and signed two-decimal cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("neuron_group");
        for col in &self.col_labels {
            out.push(',');
            out.push_str(col.name());
        }
        out.push('\n');
        for (row_label, row) in self.row_labels.iter().zip(&self.cells) {
            out.push_str(row_label);
            for cell in row {
                out.push(',');
                out.push_str(&format_cell(*cell));
            }
            out.push('\n');
        }
        out
    }
}

/// Cross every neuron group with every demographic slice: cell (g, h) is the
/// mean over group-h records of the record's mean member activation, pooled
/// per `pooling`/`pad_token`. Columns follow `col_labels`; a column with no
/// records yields empty cells rather than an error.
pub fn activation_matrix(
    model: &ModelBundle,
    records: &[(Vec<TokenId>, GroupLabel)],
    groups: &[NeuronGroup],
    col_labels: &[GroupLabel],
    pooling: Pooling,
    pad_token: Option<TokenId>,
) -> Result<ActivationMatrix> {
    if records.is_empty() {
        return Err(AnalysisError::NoRecords("activation matrix input is empty"));
    }
    union_refs(groups)?; // validates non-empty groups up front
    // One forward pass per record, in parallel; record order within a column
    // is preserved, so accumulation order is stable run to run.
    let per_record: Vec<Result<BTreeMap<String, f64>>> = records
        .par_iter()
        .map(|(tokens, _)| group_activations(model, tokens, groups, None, pooling, pad_token))
        .collect();
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; col_labels.len()]; groups.len()];
    let mut counts = vec![0usize; col_labels.len()];
    for ((_, label), acts) in records.iter().zip(per_record) {
        let acts = acts?;
        let Some(col) = col_labels.iter().position(|c| c == label) else {
            continue; // slice not part of the requested columns
        };
        counts[col] += 1;
        for (row, group) in groups.iter().enumerate() {
            sums[row][col] += acts[&group.row_label()];
        }
    }
    let cells = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .map(|(sum, &n)| if n == 0 { None } else { Some(sum / n as f64) })
                .collect()
        })
        .collect();
    Ok(ActivationMatrix {
        row_labels: groups.iter().map(NeuronGroup::row_label).collect(),
        col_labels: col_labels.to_vec(),
        cells,
        record_counts: counts,
        member_counts: groups.iter().map(|g| g.members.len()).collect(),
    })
}

/// One record's classification outcome, with the evidence used everywhere
/// downstream: the raw generation, the parsed prediction, and the mean
/// last-input-token activation of every neuron group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub record_index: usize,
    pub actual: GroupLabel,
    pub predicted: Prediction,
    pub group_activations: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<InterventionPolicy>,
    pub generation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPairCount {
    pub actual: GroupLabel,
    pub predicted: GroupLabel,
    pub count: usize,
}

/// Label→label misclassification table. Unknown predictions never enter the
/// pair counts or the denominator; they are tracked on the side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPattern {
    /// Every ordered (actual ≠ predicted) pair over the options, zero counts
    /// included, in option order.
    pub pairs: Vec<ErrorPairCount>,
    pub total_errors: usize,
    pub unknown_count: usize,
    pub dominant: Option<ErrorPairCount>,
    /// `100 · dominant count / total_errors`.
    pub dominant_pct: Option<f64>,
}

/// Arithmetic core, callable on published count vectors directly: totals the
/// pairs, picks the dominant one (ties resolve to the earliest pair in the
/// list), and computes its percentage.
pub fn error_pattern_from_counts(pairs: Vec<ErrorPairCount>, unknown_count: usize) -> ErrorPattern {
    let total_errors: usize = pairs.iter().map(|p| p.count).sum();
    let dominant = pairs
        .iter()
        .copied()
        .fold(None::<ErrorPairCount>, |best, p| match best {
            Some(b) if b.count >= p.count => Some(b),
            _ => Some(p),
        })
        .filter(|_| total_errors > 0);
    let dominant_pct = dominant.map(|d| 100.0 * d.count as f64 / total_errors as f64);
    ErrorPattern {
        pairs,
        total_errors,
        unknown_count,
        dominant,
        dominant_pct,
    }
}

/// Tabulate misclassifications over a set of outcomes. `options` fixes the
/// pair enumeration order (all ordered actual ≠ predicted pairs).
pub fn error_pattern(outcomes: &[OutcomeRecord], options: &[GroupLabel]) -> ErrorPattern {
    let mut pairs: Vec<ErrorPairCount> = Vec::new();
    for &actual in options {
        for &predicted in options {
            if actual != predicted {
                pairs.push(ErrorPairCount { actual, predicted, count: 0 });
            }
        }
    }
    let mut unknown_count = 0usize;
    for outcome in outcomes {
        match outcome.predicted {
            Prediction::Unknown => unknown_count += 1,
            Prediction::Label(predicted) if predicted != outcome.actual => {
                if let Some(pair) = pairs
                    .iter_mut()
                    .find(|p| p.actual == outcome.actual && p.predicted == predicted)
                {
                    pair.count += 1;
                }
            }
            Prediction::Label(_) => {} // correct
        }
    }
    error_pattern_from_counts(pairs, unknown_count)
}

/// Mean group activation per (actual → predicted) outcome bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBuckets {
    pub row_labels: Vec<String>,
    /// (actual, predicted) label pairs in option order, diagonal included.
    pub columns: Vec<(GroupLabel, GroupLabel)>,
    /// `cells[row][col]`: mean activation, `None` when the bucket is empty.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Outcomes per bucket (shared by all rows).
    pub bucket_counts: Vec<usize>,
    /// Unknown predictions per actual label, tracked outside the grid.
    pub unknown_counts: Vec<(GroupLabel, usize)>,
}

impl OutcomeBuckets {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("neuron_group");
        for (a, p) in &self.columns {
            out.push_str(&format!(",{}->{}", a.name(), p.name()));
        }
        out.push('\n');
        for (row_label, row) in self.row_labels.iter().zip(&self.cells) {
            out.push_str(row_label);
            for cell in row {
                out.push(',');
                out.push_str(&format_cell(*cell));
            }
            out.push('\n');
        }
        out
    }
}

/// Bucket outcomes by (actual → predicted) pair and average each neuron
/// group's recorded activation within every bucket. Empty buckets stay
/// `None` and render as `---`.
pub fn outcome_buckets(outcomes: &[OutcomeRecord], options: &[GroupLabel]) -> OutcomeBuckets {
    // Row set: every group label seen in any outcome, sorted for stability.
    let mut row_labels: Vec<String> = Vec::new();
    for outcome in outcomes {
        for key in outcome.group_activations.keys() {
            if !row_labels.contains(key) {
                row_labels.push(key.clone());
            }
        }
    }
    row_labels.sort();
    let mut columns: Vec<(GroupLabel, GroupLabel)> = Vec::new();
    for &a in options {
        for &p in options {
            columns.push((a, p));
        }
    }
    let mut sums = vec![vec![0.0f64; columns.len()]; row_labels.len()];
    let mut present = vec![vec![0usize; columns.len()]; row_labels.len()];
    let mut bucket_counts = vec![0usize; columns.len()];
    let mut unknown_counts: Vec<(GroupLabel, usize)> =
        options.iter().map(|&o| (o, 0)).collect();
    for outcome in outcomes {
        match outcome.predicted {
            Prediction::Unknown => {

                if let Some(slot) = unknown_counts.iter_mut().find(|(o, _)| *o == outcome.actual)
                {
                    slot.1 += 1;
                }
            }
            Prediction::Label(predicted) => {
                let Some(col) = columns
                    .iter()
                    .position(|&(a, p)| a == outcome.actual && p == predicted)
                else {
                    continue; // prediction outside the option set cannot happen
                };
                bucket_counts[col] += 1;
                for (row, label) in row_labels.iter().enumerate() {
                    if let Some(&v) = outcome.group_activations.get(label) {
                        sums[row][col] += v;
                        present[row][col] += 1;
                    }
                }
            }
        }
    }
    let cells = sums
        .into_iter()
        .zip(present)
        .map(|(srow, prow)| {
            srow.into_iter()
                .zip(prow)
                .map(|(sum, n)| if n == 0 { None } else { Some(sum / n as f64) })
                .collect()
        })
        .collect();
    OutcomeBuckets {
        row_labels,
        columns,
        cells,
        bucket_counts,
        unknown_counts,
    }
}

/// A record the baseline misclassified, ready for the sweep: the prompt
/// tokens, its true label, and the label the baseline wrongly produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub record_index: usize,
    pub tokens: Vec<TokenId>,
    pub actual: GroupLabel,
    pub baseline_predicted: GroupLabel,
}

/// Outcome rates for one (group kind, amplification factor) sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: Mention,
    pub factor: f64,
    pub correct: f64,
    pub original_bias: f64,
    pub other: f64,
    pub unknown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub n_records: usize,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,factor,correct,original_bias,other,unknown\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                c.kind, c.factor, c.correct, c.original_bias, c.other, c.unknown
            ));
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SweepOutcome {
    Correct,
    OriginalBias,
    Other,
    Unknown,
}

/// Build the per-record suppression policy for one sweep cell: the targets
/// are the members of the `kind` group matching the record's baseline
/// (wrong) prediction. A record whose predicted label has no group gets an
/// empty target set, i.e. runs unmodified.
fn policy_for(
    groups: &[NeuronGroup],
    kind: Mention,
    predicted: GroupLabel,
    factor: f64,
) -> InterventionPolicy {
    let targets: Vec<NeuronRef> = groups
        .iter()
        .filter(|g| g.mention == kind && g.group == predicted)
        .flat_map(NeuronGroup::refs)
        .collect();
    InterventionPolicy::new(targets, factor)
}

/// Rerun every misclassified record under suppression of the neuron group
/// that matches its baseline prediction, for each group kind and each
/// factor, and tabulate where the predictions land. Rates in every cell
/// partition the records: correct + original_bias + other + unknown = 1.
#[allow(clippy::too_many_arguments)]
pub fn intervention_sweep(
    model: &ModelBundle,
    vocab: &Vocab,
    records: &[SweepRecord],
    direct_groups: &[NeuronGroup],
    indirect_groups: &[NeuronGroup],
    factors: &[f64],
    options: &[GroupLabel],
    max_new: usize,
) -> Result<SweepResult> {
    if records.is_empty() {
        return Err(AnalysisError::NoBaselineErrors);
    }
    for record in records {
        if record.actual == record.baseline_predicted {
            return Err(AnalysisError::BadRecord {
                index: record.record_index,
                reason: "not misclassified: actual equals baseline prediction".into(),
            });
        }
    }
    for &k in factors {
        if !(k.is_finite() && k > 0.0) {
            return Err(AnalysisError::BadFactor(k));
        }
    }
    let mut cells = Vec::new();
    for (kind, groups) in [(Mention::Direct, direct_groups), (Mention::Indirect, indirect_groups)]
    {
        for &factor in factors {
            let outcomes: Vec<Result<SweepOutcome>> = records
                .par_iter()
                .map(|record| {
                    let policy = policy_for(groups, kind, record.baseline_predicted, factor);
                    let generated =
                        greedy_generate(model, &record.tokens, max_new, Some(&policy))?;
                    let text = vocab.detokenize(&generated);
                    Ok(match parse_label(&text, options) {
                        Prediction::Label(l) if l == record.actual => SweepOutcome::Correct,
                        Prediction::Label(l) if l == record.baseline_predicted => {
                            SweepOutcome::OriginalBias
                        }
                        Prediction::Label(_) => SweepOutcome::Other,
                        Prediction::Unknown => SweepOutcome::Unknown,
                    })
                })
                .collect();
            let mut tally = [0usize; 4];
            for outcome in outcomes {
                let slot = match outcome? {
                    SweepOutcome::Correct => 0,
                    SweepOutcome::OriginalBias => 1,
                    SweepOutcome::Other => 2,
                    SweepOutcome::Unknown => 3,
                };
                tally[slot] += 1;
            }
            let n = records.len() as f64;
            cells.push(SweepCell {
                kind,
                factor,
                correct: tally[0] as f64 / n,
                original_bias: tally[1] as f64 / n,
                other: tally[2] as f64 / n,
                unknown: tally[3] as f64 / n,
            });
        }
    }
    Ok(SweepResult { cells, n_records: records.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{NeuronCandidate, TokenProjection};
    use crate::model::{
        generate_synthetic_model, synthetic_vocab, AttentionKind, MlpKind, PlantedNeuron,
        SyntheticSpec, VocabSpec,
    };
    use GroupLabel::*;

    const CREACT_OPTIONS: [GroupLabel; 3] = [White, BlackAA, Asian];

    #[test]
    fn bracketed_generations_parse_to_their_option() {
        let cases = [
            ("[White] You are an AI assistant. Provide", Prediction::Label(White)),
            ("[White] You are an AI assistant. User", Prediction::Label(White)),
            ("[Russian] The race or ethnicity that best fits", Prediction::Unknown),
            ("[Yellow] The provided options do not include \"", Prediction::Unknown),
            ("[Russian] Based on the information provided in the", Prediction::Unknown),
            ("[Yellow] [X] [Black or African", Prediction::Unknown),
        ];
        for (text, want) in cases {
            assert_eq!(parse_label(text, &CREACT_OPTIONS), want, "input {text:?}");
        }
    }

    #[test]
    fn leading_text_aliases_and_edge_cases() {
        assert_eq!(parse_label(" White\nsomething", &CREACT_OPTIONS), Prediction::Label(White));
        assert_eq!(
            parse_label("black or african american.", &CREACT_OPTIONS),
            Prediction::Label(BlackAA)
        );
        assert_eq!(parse_label("[BlackAA]", &CREACT_OPTIONS), Prediction::Label(BlackAA));
        assert_eq!(parse_label("[ASIAN] person", &CREACT_OPTIONS), Prediction::Label(Asian));
        assert_eq!(parse_label("", &CREACT_OPTIONS), Prediction::Unknown);
        assert_eq!(parse_label("   ", &CREACT_OPTIONS), Prediction::Unknown);
        assert_eq!(parse_label("[unclosed bracket", &CREACT_OPTIONS), Prediction::Unknown);
        // Unterminated bracket whose remainder begins with an option still
        // resolves: the segment is "the rest of the string".
        assert_eq!(
            parse_label("[White oh no the bracket never closed", &CREACT_OPTIONS),
            Prediction::Label(White)
        );
    }

    fn pair(actual: GroupLabel, predicted: GroupLabel, count: usize) -> ErrorPairCount {
        ErrorPairCount { actual, predicted, count }
    }

    #[test]
    fn published_count_vectors_reproduce_dominant_percentages() {
        // Three historical misclassification tables; dominant percentages
        // must come out 75.0, 76.2, and 95.6 (each within 0.05).
        let table_a = vec![
            pair(White, Asian, 27),
            pair(White, BlackAA, 4),
            pair(BlackAA, White, 4),
            pair(Asian, White, 1),
        ];
        let table_b = vec![
            pair(White, Asian, 4),
            pair(White, BlackAA, 16),
            pair(Asian, White, 1),
        ];
        let table_c = vec![
            pair(White, Asian, 395),
            pair(White, BlackAA, 5),
            pair(BlackAA, Asian, 10),
            pair(Asian, White, 1),
            pair(Asian, BlackAA, 2),
        ];
        let a = error_pattern_from_counts(table_a, 0);
        assert_eq!(a.total_errors, 36);
        assert_eq!(a.dominant.unwrap(), pair(White, Asian, 27));
        assert!((a.dominant_pct.unwrap() - 75.0).abs() < 0.05);

        let b = error_pattern_from_counts(table_b, 0);
        assert_eq!(b.total_errors, 21);
        assert_eq!(b.dominant.unwrap(), pair(White, BlackAA, 16));
        assert!((b.dominant_pct.unwrap() - 76.2).abs() < 0.05);

        let c = error_pattern_from_counts(table_c, 0);
        assert_eq!(c.total_errors, 413);
        assert_eq!(c.dominant.unwrap(), pair(White, Asian, 395));
        assert!((c.dominant_pct.unwrap() - 95.6).abs() < 0.05);
    }

    #[test]
    fn no_errors_has_undefined_dominant() {
        let pattern = error_pattern_from_counts(vec![pair(White, Asian, 0)], 3);
        assert_eq!(pattern.total_errors, 0);
        assert!(pattern.dominant.is_none());
        assert!(pattern.dominant_pct.is_none());
        assert_eq!(pattern.unknown_count, 3);
    }

    fn outcome(
        index: usize,
        actual: GroupLabel,
        predicted: Prediction,
        acts: &[(&str, f64)],
    ) -> OutcomeRecord {
        OutcomeRecord {
            record_index: index,
            actual,
            predicted,
            group_activations: acts
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            policy: None,
            generation: String::new(),
        }
    }

    #[test]
    fn error_pattern_counts_outcomes_and_sidelines_unknown() {
        let outcomes = vec![
            outcome(0, White, Prediction::Label(Asian), &[]),
            outcome(1, White, Prediction::Label(Asian), &[]),
            outcome(2, White, Prediction::Label(White), &[]),
            outcome(3, Asian, Prediction::Unknown, &[]),
            outcome(4, BlackAA, Prediction::Label(White), &[]),
        ];
        let pattern = error_pattern(&outcomes, &CREACT_OPTIONS);
        assert_eq!(pattern.total_errors, 3);
        assert_eq!(pattern.unknown_count, 1);
        assert_eq!(pattern.dominant.unwrap(), pair(White, Asian, 2));
        assert!((pattern.dominant_pct.unwrap() - 100.0 * 2.0 / 3.0).abs() < 1e-9);
        // All 6 ordered pairs present, zeros included.
        assert_eq!(pattern.pairs.len(), 6);
    }

    #[test]
    fn singleton_bucket_is_exact_and_empty_bucket_renders_dashes() {
        let outcomes = vec![
            outcome(0, White, Prediction::Label(Asian), &[("G Direct", 0.62)]),
            outcome(1, White, Prediction::Unknown, &[("G Direct", 9.0)]),
        ];
        let buckets = outcome_buckets(&outcomes, &CREACT_OPTIONS);
        assert_eq!(buckets.row_labels, vec!["G Direct".to_string()]);
        let col = buckets
            .columns
            .iter()
            .position(|&(a, p)| a == White && p == Asian)
            .unwrap();
        assert_eq!(buckets.cells[0][col], Some(0.62));
        assert_eq!(buckets.bucket_counts[col], 1);
        // Unknown tracked separately, not in the grid.
        assert_eq!(buckets.unknown_counts, vec![(White, 1), (BlackAA, 0), (Asian, 0)]);
        let csv = buckets.to_csv();
        assert!(csv.contains("+0.62"));
        assert!(csv.contains("---"));
        assert!(csv.contains("White->Asian"));
    }

    #[test]
    fn cell_formatting_matches_sign_conventions() {
        assert_eq!(format_cell(None), "---");
        assert_eq!(format_cell(Some(6.04)), "+6.04");
        assert_eq!(format_cell(Some(-0.96)), "-0.96");
        assert_eq!(format_cell(Some(0.0)), "+0.00");
        assert_eq!(format_cell(Some(-0.001)), "-0.00");
    }

    fn member(layer: usize, index: usize) -> NeuronCandidate {
        NeuronCandidate {
            neuron: NeuronRef { layer, index },
            score: 1.0,
            projection: TokenProjection::default(),
            retained: true,
            matched_keywords: vec!["planted".into()],
        }
    }

    fn group(label: GroupLabel, mention: Mention, members: Vec<NeuronCandidate>) -> NeuronGroup {
        NeuronGroup { group: label, mention, members }
    }

    /// One-layer model with three planted neurons, all keyed to the same
    /// trigger token: a strong writer toward "Asian" (the bias), a weaker
    /// writer toward "White" (the truth), and a dead neuron.
    fn biased_micro_model() -> (ModelBundle, Vocab) {
        let words: Vec<String> = ["Asian", "White", "cue"].iter().map(|s| s.to_string()).collect();
        let spec = SyntheticSpec {
            d_model: 264,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 4,
            seed: 60,
            vocab: VocabSpec::Words(words),
            orthogonal_unembedding: true,
            tied_embedding_scale: Some(1.0),
            attention: vec![AttentionKind::Passthrough],
            mlp: MlpKind::Zero,
            planted_neurons: vec![
                PlantedNeuron {
                    layer: 0,
                    index: 0,
                    group_label: "Asian".into(),
                    write_token: TokenId(259), // "Asian" — the planted bias
                    strength: 4.0,
                    secondary_token: None,
                    secondary_weight: 0.0,
                    trigger_token: Some(TokenId(261)), // "cue"
                    gate_gain: 1.0,
                },
                PlantedNeuron {
                    layer: 0,
                    index: 1,
                    group_label: "White".into(),
                    write_token: TokenId(260), // "White" — the truth, outgunned
                    strength: 2.0,
                    secondary_token: None,
                    secondary_weight: 0.0,
                    trigger_token: Some(TokenId(261)),
                    gate_gain: 1.0,
                },
                // index 2 left dead (zero MLP background).
            ],
            ..Default::default()
        };
        let model = generate_synthetic_model(&spec).unwrap();
        let vocab = synthetic_vocab(&spec).unwrap().unwrap();
        (model, vocab)
    }

    #[test]
    fn sweep_on_planted_bias_suppresses_it_and_dead_targets_change_nothing() {
        let (model, vocab) = biased_micro_model();
        let options = [Asian, White];
        let cue = vec![TokenId(261)];
        // Baseline really is biased: the strong neuron wins.
        let baseline = greedy_generate(&model, &cue, 2, None).unwrap();
        assert_eq!(
            parse_label(&vocab.detokenize(&baseline), &options),
            Prediction::Label(Asian)
        );
        let records = vec![SweepRecord {
            record_index: 0,
            tokens: cue,
            actual: White,
            baseline_predicted: Asian,
        }];
        let direct = vec![group(Asian, Mention::Direct, vec![member(0, 0)])];
        let indirect = vec![group(Asian, Mention::Indirect, vec![member(0, 2)])];
        let result = intervention_sweep(
            &model,
            &vocab,
            &records,
            &direct,
            &indirect,
            &[5.0, 10.0, 20.0],
            &options,
            2,
        )
        .unwrap();
        assert_eq!(result.cells.len(), 6);
        for cell in &result.cells {
            let sum = cell.correct + cell.original_bias + cell.other + cell.unknown;
            assert!((sum - 1.0).abs() < 1e-9);
            match cell.kind {
                // Suppressing the bias writer hands the argmax to the truth
                // writer at every factor.
                Mention::Direct => {
                    assert_eq!(cell.correct, 1.0, "factor {}", cell.factor);
                    assert_eq!(cell.original_bias, 0.0);
                }
                // The indirect group's only member is dead: f(0) = 0, so the
                // baseline bias must reappear untouched.
                Mention::Indirect => {
                    assert_eq!(cell.original_bias, 1.0, "factor {}", cell.factor);
                }
                Mention::NotApplicable => unreachable!(),
            }
        }
    }

    #[test]
    fn sweep_rejects_bad_inputs() {
        let (model, vocab) = biased_micro_model();
        let options = [Asian, White];
        assert!(matches!(
            intervention_sweep(&model, &vocab, &[], &[], &[], &[5.0], &options, 1),
            Err(AnalysisError::NoBaselineErrors)
        ));
        let not_wrong = vec![SweepRecord {
            record_index: 7,
            tokens: vec![TokenId(261)],
            actual: Asian,
            baseline_predicted: Asian,
        }];
        assert!(matches!(
            intervention_sweep(&model, &vocab, &not_wrong, &[], &[], &[5.0], &options, 1),
            Err(AnalysisError::BadRecord { index: 7, .. })
        ));
        let ok = vec![SweepRecord {
            record_index: 0,
            tokens: vec![TokenId(261)],
            actual: White,
            baseline_predicted: Asian,
        }];
        assert!(matches!(
            intervention_sweep(&model, &vocab, &ok, &[], &[], &[-1.0], &options, 1),
            Err(AnalysisError::BadFactor(_))
        ));
    }

    #[test]
    fn activation_matrix_diagonal_dominates_on_planted_model() {
        let (model, _vocab) = biased_micro_model();
        // Two slices: "Asian" records contain the trigger, "White" records
        // do not — so the bias group's mean activation is high on the Asian
        // column and zero on the White column.
        let records = vec![
            (vec![TokenId(261), TokenId(259)], Asian), // cue present
            (vec![TokenId(261)], Asian),
            (vec![TokenId(260)], White), // no cue
            (vec![TokenId(260), TokenId(260)], White),
        ];
        let groups = vec![
            group(Asian, Mention::Direct, vec![member(0, 0)]),
            group(White, Mention::Direct, vec![member(0, 2)]), // dead neuron row
        ];
        let matrix = activation_matrix(
            &model,
            &records,
            &groups,
            &[Asian, White],
            Pooling::MeanAllPositions,
            None,
        )
        .unwrap();
        assert_eq!(matrix.row_labels, vec!["Asian Direct", "White Direct"]);
        assert_eq!(matrix.record_counts, vec![2, 2]);
        let asian_row = &matrix.cells[0];
        assert!(asian_row[0].unwrap() > asian_row[1].unwrap() + 1.0);
        // Dead row is exactly zero everywhere.
        assert_eq!(matrix.cells[1], vec![Some(0.0), Some(0.0)]);
        let csv = matrix.to_csv();
        assert!(csv.starts_with("neuron_group,Asian,White\n"));
    }

    #[test]
    fn activation_matrix_is_permutation_invariant() {
        let (model, _vocab) = biased_micro_model();
        let mut records = vec![
            (vec![TokenId(261)], Asian),
            (vec![TokenId(261), TokenId(261)], Asian),
            (vec![TokenId(260)], White),
            (vec![TokenId(259), TokenId(261)], White),
        ];
        let groups = vec![group(Asian, Mention::Direct, vec![member(0, 0), member(0, 1)])];
        let a = activation_matrix(
            &model,
            &records,
            &groups,
            &[Asian, White],
            Pooling::LastInputToken,
            None,
        )
        .unwrap();
        records.reverse();
        records.swap(0, 1);
        let b = activation_matrix(
            &model,
            &records,
            &groups,
            &[Asian, White],
            Pooling::LastInputToken,
            None,
        )
        .unwrap();
        for (ra, rb) in a.cells.iter().zip(&b.cells) {
            for (ca, cb) in ra.iter().zip(rb) {
                assert!((ca.unwrap() - cb.unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_groups_and_empty_inputs_error() {
        let (model, _vocab) = biased_micro_model();
        let records = vec![(vec![TokenId(261)], Asian)];
        let empty = vec![group(Asian, Mention::Direct, vec![])];
        assert!(matches!(
            activation_matrix(&model, &records, &empty, &[Asian], Pooling::MeanAllPositions, None),
            Err(AnalysisError::EmptyGroup(_))
        ));
        let ok_groups = vec![group(Asian, Mention::Direct, vec![member(0, 0)])];
        assert!(matches!(
            activation_matrix(&model, &[], &ok_groups, &[Asian], Pooling::MeanAllPositions, None),
            Err(AnalysisError::NoRecords(_))
        ));
    }

    #[test]
    fn group_activations_reports_per_group_means_at_last_token() {
        let (model, _vocab) = biased_micro_model();
        let groups = vec![
            group(Asian, Mention::Direct, vec![member(0, 0)]),
            group(White, Mention::Direct, vec![member(0, 1)]),
        ];
        let acts =
            group_activations(&model, &[TokenId(261)], &groups, None, Pooling::LastInputToken, None)
                .unwrap();
        let asian = acts["Asian Direct"];
        let white = acts["White Direct"];
        // Both planted neurons share the trigger and gate gain, so their
        // activations at the cue position are identical and positive.
        assert!(asian > 1.0);
        assert!((asian - white).abs() < 1e-9);
        // Under suppression the captured activation goes negative.
        let policy = InterventionPolicy::new([NeuronRef { layer: 0, index: 0 }], 5.0);
        let suppressed = group_activations(
            &model,
            &[TokenId(261)],
            &groups,
            Some(&policy),
            Pooling::LastInputToken,
            None,
        )
        .unwrap();
        assert!(suppressed["Asian Direct"] < 0.0);
        assert!((suppressed["Asian Direct"] + 5.0 * asian).abs() < 1e-3);
    }

    #[test]
    fn prediction_serde_round_trips() {
        for p in [Prediction::Label(White), Prediction::Unknown] {
            let json = serde_json::to_string(&p).unwrap();
            let back: Prediction = serde_json::from_str(&json).unwrap();
            assert_eq!(back, p);
        }
        assert_eq!(serde_json::to_string(&Prediction::Unknown).unwrap(), "\"Unknown\"");
        assert_eq!(
            serde_json::to_string(&Prediction::Label(BlackAA)).unwrap(),
            "\"BlackAA\""
        );
    }
}
