//! End-to-end orchestration: config in, report bundle out.
//!
//! The pipeline composes the library modules in a fixed order — load model
//! and corpus, train probes on pooled residuals, attribute neurons to each
//! probe direction, tabulate group-conditioned activations, decode baselines,
//! and sweep interventions over the misclassified records — and writes every
//! stage's artifacts into one self-describing bundle directory.
//!
//! Clinical (`creact-*`) runs train *two* probes, one per mention kind, so
//! both direct-label and proxy-cue neuron groups exist for the sweep; the
//! mode only picks which record slice the baseline and sweep run over.
//! Toxigen runs train a single probe over all records and stop after the
//! activation matrix (there is no prompt/answer protocol to decode).
//!
//! Every command here is deterministic: rerunning with an identical config
//! reproduces each artifact byte for byte. Errors carry the stage that
//! failed and map onto the process exit codes via [`PipelineError::exit_code`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, activation_matrix, error_pattern, group_activations, outcome_buckets, parse_label,
    ActivationMatrix, AnalysisError, ErrorPattern, OutcomeBuckets, OutcomeRecord, Prediction,
    SweepRecord, SweepResult,
};
use crate::attribution::{
    filter_by_alignment, logit_lens, neuron_notation, score_neurons, select_candidates,
    AttributionError, NeuronCandidate, NeuronGroup, TokenProjection,
};
use crate::config::{load_keywords, ConfigError, RunConfig};
use crate::corpus::{
    self, load_creact_with, load_toxigen_with, render_prompt, ConsolidationMap, CorpusError,
    DatasetMode, GroupLabel, Mention, PromptTemplate, Record, Split,
};
use crate::engine::{forward, greedy_generate, pool_residual, CapturePlan, EngineError, Pooling};
use crate::fixture::FixtureError;
use crate::model::{load_model, ModelBundle, ModelError, TokenId, Vocab};
use crate::probe::{
    evaluate_probe, probe_direction, save_probe, train_probe, ProbeError, ProbeMetrics,
    ProbeModel,
};
use crate::report::{self, ReportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// A module failure, wrapped so the pipeline can report which stage it
/// belongs to and which exit-code category it falls in.
#[derive(thiserror::Error, Debug)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    /// An input artifact that parsed but cannot drive this run (e.g. a model
    /// bundle without a vocabulary).
    #[error("{0}")]
    Data(String),
}

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: StageError },
}

impl PipelineError {
    pub fn in_stage<E: Into<StageError>>(stage: &str, source: E) -> Self {
        PipelineError::Stage { stage: stage.to_string(), source: source.into() }
    }

    /// Process exit code: 2 config, 3 data (inputs/artifacts), 4 numeric
    /// (computation-stage failures).
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Stage { source, .. } => match source {
                StageError::Corpus(_)
                | StageError::Model(_)
                | StageError::Report(_)
                | StageError::Fixture(_)
                | StageError::Data(_) => EXIT_DATA,
                StageError::Probe(e) => match e {
                    ProbeError::Io { .. } | ProbeError::Manifest(_) | ProbeError::Container(_) => {
                        EXIT_DATA
                    }
                    _ => EXIT_NUMERIC,
                },
                StageError::Analysis(AnalysisError::NoBaselineErrors) => EXIT_DATA,
                StageError::Engine(_) | StageError::Attribution(_) | StageError::Analysis(_) => {
                    EXIT_NUMERIC
                }
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait Staged<T> {
    fn stage(self, name: &str) -> Result<T>;
}

impl<T, E: Into<StageError>> Staged<T> for std::result::Result<T, E> {
    fn stage(self, name: &str) -> Result<T> {
        self.map_err(|e| PipelineError::in_stage(name, e))
    }
}

fn invalid(msg: String) -> PipelineError {
    PipelineError::Config(ConfigError::Invalid(msg))
}

/// Everything a run needs in memory: the loaded model + vocabulary, the
/// consolidated corpus, and the prompt template for the active mode.
pub struct RunContext {
    pub config: RunConfig,
    pub model: ModelBundle,
    pub vocab: Vocab,
    /// All loaded records, excluded ones included (they carry
    /// `Consolidated::Excluded` and are skipped by every stage).
    pub records: Vec<Record>,
    pub kept: usize,
    pub excluded: usize,
    pub template: PromptTemplate,
}

/// Which probes a mode trains. Clinical runs model direct and indirect
/// mentions separately; toxigen records are unkinded.
pub fn probe_kinds(mode: DatasetMode) -> &'static [Mention] {
    match mode {
        DatasetMode::Toxigen => &[Mention::NotApplicable],
        DatasetMode::CreactDirect | DatasetMode::CreactIndirect => {
            &[Mention::Direct, Mention::Indirect]
        }
    }
}

/// Per-kind train/test split seed. The direct and indirect subsets are
/// disjoint, so sharing a seed would be harmless, but distinct seeds keep
/// the two shuffles visibly independent.
pub fn split_seed(seed: u64, mention: Mention) -> u64 {
    match mention {
        Mention::Direct | Mention::NotApplicable => seed,
        Mention::Indirect => seed.wrapping_add(1),
    }
}

/// Directory slug for a mention kind inside the bundle.
pub fn kind_slug(mention: Mention) -> &'static str {
    match mention {
        Mention::Direct => "direct",
        Mention::Indirect => "indirect",
        Mention::NotApplicable => "all",
    }
}

/// Load and cross-validate everything the stages share.
pub fn load_context(config: RunConfig) -> Result<RunContext> {
    let loaded = load_model(&config.model_manifest_path()).stage("load-model")?;
    let model = loaded.model;
    let vocab = loaded.vocab.ok_or_else(|| {
        PipelineError::in_stage(
            "load-model",
            StageError::Data(format!(
                "model manifest {} declares no vocabulary; the pipeline needs one to tokenize",
                config.model_manifest_path().display()
            )),
        )
    })?;
    if config.probe.layer >= model.n_layers() {
        return Err(invalid(format!(
            "probe.layer {} out of range: model has {} layers",
            config.probe.layer,
            model.n_layers()
        )));
    }

    let mode = config.run.mode;
    let map = match config.consolidation_path() {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|source| CorpusError::Io { path, source })
                .stage("load-corpus")?;
            ConsolidationMap::from_toml(&text).stage("load-corpus")?
        }
        None => ConsolidationMap::default_for(mode),
    };
    let load = match mode {
        DatasetMode::Toxigen => load_toxigen_with(&config.dataset_path(), &map),
        DatasetMode::CreactDirect | DatasetMode::CreactIndirect => {
            load_creact_with(&config.dataset_path(), &map)
        }
    }
    .stage("load-corpus")?;
    if load.kept == 0 {
        return Err(PipelineError::in_stage(
            "load-corpus",
            StageError::Data(format!(
                "{}: every record was excluded by consolidation",
                config.dataset_path().display()
            )),
        ));
    }

    // The clinical template carries its published option list; toxigen reuses
    // the same question shape over the five-group option list.
    let template = match mode {
        DatasetMode::CreactDirect | DatasetMode::CreactIndirect => PromptTemplate::creact_default(),
        DatasetMode::Toxigen => PromptTemplate {
            template: PromptTemplate::creact_default().template,
            options: mode.labels().to_vec(),
        },
    };

    Ok(RunContext {
        config,
        model,
        vocab,
        records: load.records,
        kept: load.kept,
        excluded: load.excluded,
        template,
    })
}

/// Kept records of one mention kind, cloned so the split can assign folds.
fn subset_records(ctx: &RunContext, mention: Mention) -> Vec<Record> {
    ctx.records
        .iter()
        .filter(|r| r.label().is_some() && r.mention == mention)
        .cloned()
        .collect()
}

/// Indices (into `ctx.records`) of the records the analysis stages run over:
/// the active mode's mention slice for clinical runs, every kept record for
/// toxigen.
pub fn analysis_indices(ctx: &RunContext) -> Vec<usize> {
    let mention = ctx.config.run.mode.mention();
    ctx.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label().is_some() && r.mention == mention)
        .map(|(i, _)| i)
        .collect()
}

/// Column order for activation tables: the prompt's option order for
/// clinical runs (mirroring the published tables), class order for toxigen.
fn column_order(ctx: &RunContext) -> Vec<GroupLabel> {
    match ctx.config.run.mode {
        DatasetMode::Toxigen => ctx.config.run.mode.labels().to_vec(),
        DatasetMode::CreactDirect | DatasetMode::CreactIndirect => ctx.template.options.clone(),
    }
}

fn feature_text(ctx: &RunContext, record: &Record) -> String {
    if ctx.config.probe.wrap_prompt {
        render_prompt(&ctx.template, &record.text)
    } else {
        record.text.clone()
    }
}

/// Pooled residual features for a set of records, one forward pass each
/// (parallel over records, order preserved).
fn pooled_features(
    ctx: &RunContext,
    records: &[&Record],
) -> std::result::Result<Vec<(Vec<f64>, GroupLabel)>, EngineError> {
    let layer = ctx.config.probe.layer;
    let plan = CapturePlan::residual_only(layer, ctx.config.effective_pooling());
    records
        .par_iter()
        .map(|record| {
            let text = feature_text(ctx, record);
            let ids = ctx.vocab.tokenize(&text).ids;
            let trace = forward(&ctx.model, &ids, &plan, None)?;
            let x = pool_residual(&trace, layer, plan.pooling)?;
            Ok((x, record.label().expect("subset holds kept records only")))
        })
        .collect()
}

/// A probe direction read back through the unembedding: which tokens the
/// direction most increases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionFingerprint {
    pub class: GroupLabel,
    pub projection: TokenProjection,
}

/// One trained probe with its evaluation and direction fingerprints.
pub struct ProbeArtifacts {
    pub mention: Mention,
    pub probe: ProbeModel,
    pub metrics: ProbeMetrics,
    pub train_count: usize,
    pub test_count: usize,
    pub fingerprints: Vec<DirectionFingerprint>,
}

/// Split one mention subset, extract pooled features, train, and evaluate.
pub fn probe_stage(ctx: &RunContext, mention: Mention) -> Result<ProbeArtifacts> {
    let mut subset = subset_records(ctx, mention);
    if subset.is_empty() {
        return Err(PipelineError::in_stage(
            "probe-split",
            StageError::Data(format!("no kept records with mention kind {mention}")),
        ));
    }
    corpus::split(
        &mut subset,
        ctx.config.dataset.test_fraction,
        split_seed(ctx.config.run.seed, mention),
    )
    .stage("probe-split")?;
    let train: Vec<&Record> = subset.iter().filter(|r| r.split == Split::Train).collect();
    let test: Vec<&Record> = subset.iter().filter(|r| r.split == Split::Test).collect();

    let train_features = pooled_features(ctx, &train).stage("probe-features")?;
    let test_features = pooled_features(ctx, &test).stage("probe-features")?;

    let mut probe = train_probe(&train_features, &ctx.config.probe_hyper()).stage("probe-train")?;
    probe.layer = ctx.config.probe.layer;
    probe.pooling = ctx.config.effective_pooling();
    let metrics = evaluate_probe(&probe, &test_features).stage("probe-eval")?;

    let mut fingerprints = Vec::with_capacity(probe.class_order.len());
    for &class in &probe.class_order {
        let direction = probe_direction(&probe, class).stage("fingerprint")?;
        let projection = logit_lens(
            &ctx.model,
            Some(&ctx.vocab),
            &direction,
            ctx.config.attribution.k,
        )
        .stage("fingerprint")?;
        fingerprints.push(DirectionFingerprint { class, projection });
    }

    Ok(ProbeArtifacts {
        mention,
        probe,
        metrics,
        train_count: train_features.len(),
        test_count: test_features.len(),
        fingerprints,
    })
}

/// One candidate row as reported: the published `MLP.v^{l}_{j}` name plus
/// the scored candidate itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub notation: String,
    #[serde(flatten)]
    pub candidate: NeuronCandidate,
}

/// Scored and filtered candidates for one probe class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCandidates {
    pub class: GroupLabel,
    pub candidates: Vec<CandidateRow>,
}

/// Attribution output for one mention kind: the full candidate tables and
/// the retained neuron groups.
pub struct AttributionArtifacts {
    pub mention: Mention,
    pub classes: Vec<ClassCandidates>,
    pub groups: Vec<NeuronGroup>,
}

/// Rank, select, and keyword-filter neuron candidates for every class of one
/// probe.
pub fn attribution_stage(
    ctx: &RunContext,
    probe: &ProbeArtifacts,
) -> Result<AttributionArtifacts> {
    let att = &ctx.config.attribution;
    let path = ctx
        .config
        .keywords_path_for(probe.mention)
        .ok_or_else(|| invalid(format!("no keyword file configured for {} attribution", probe.mention)))?;
    let keywords = load_keywords(&path)?;

    let mut classes = Vec::new();
    let mut groups = Vec::new();
    for &class in &probe.probe.class_order {
        let words = keywords.get(&class).ok_or_else(|| {
            invalid(format!("keyword file {} lacks group {class}", path.display()))
        })?;
        let direction = probe_direction(&probe.probe, class).stage("attribution")?;
        let ranked = score_neurons(&ctx.model, &direction, att.layer_window).stage("attribution")?;
        let mut selected = select_candidates(&ranked, att.top_n).stage("attribution")?;
        let group = filter_by_alignment(
            &ctx.model,
            Some(&ctx.vocab),
            &mut selected,
            class,
            probe.mention,
            words,
            att.k,
            att.min_matches,
        )
        .stage("attribution")?;
        classes.push(ClassCandidates {
            class,
            candidates: selected
                .into_iter()
                .map(|candidate| CandidateRow {
                    notation: neuron_notation(candidate.neuron),
                    candidate,
                })
                .collect(),
        });
        groups.push(group);
    }
    Ok(AttributionArtifacts { mention: probe.mention, classes, groups })
}

/// Cross every neuron group with the analysis slice's demographic columns.
/// Clinical runs measure activations over rendered prompts (matching the
/// published outcome tables); toxigen measures over the raw statements.
pub fn activation_stage(ctx: &RunContext, groups: &[NeuronGroup]) -> Result<ActivationMatrix> {
    let indices = analysis_indices(ctx);
    let is_creact = ctx.config.run.mode.is_creact();
    let records: Vec<(Vec<TokenId>, GroupLabel)> = indices
        .iter()
        .map(|&i| {
            let record = &ctx.records[i];
            let text = if is_creact {
                render_prompt(&ctx.template, &record.text)
            } else {
                record.text.clone()
            };
            (
                ctx.vocab.tokenize(&text).ids,
                record.label().expect("analysis slice holds kept records"),
            )
        })
        .collect();
    activation_matrix(
        &ctx.model,
        &records,
        groups,
        &column_order(ctx),
        ctx.config.effective_pooling(),
        None,
    )
    .stage("activations")
}

/// Counts distilled from the baseline decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub n_records: usize,
    pub n_correct: usize,
    /// Label-to-label misclassifications (Unknown tracked separately).
    pub n_errors: usize,
    pub n_unknown: usize,
    pub accuracy: f64,
}

/// Baseline decode output: per-record outcomes plus the derived tables.
pub struct BaselineArtifacts {
    pub outcomes: Vec<OutcomeRecord>,
    pub summary: BaselineSummary,
    pub pattern: ErrorPattern,
    pub buckets: OutcomeBuckets,
}

/// Greedy-decode every analysis record without intervention, parse the
/// predicted labels, and record each neuron group's last-input-token
/// activation alongside.
pub fn baseline_stage(ctx: &RunContext, groups: &[NeuronGroup]) -> Result<BaselineArtifacts> {
    let indices = analysis_indices(ctx);
    let options = &ctx.template.options;
    let max_new = ctx.config.intervention.max_new;
    let outcomes: Vec<analysis::Result<OutcomeRecord>> = indices
        .par_iter()
        .map(|&i| {
            let record = &ctx.records[i];
            let prompt = render_prompt(&ctx.template, &record.text);
            let ids = ctx.vocab.tokenize(&prompt).ids;
            let generated = greedy_generate(&ctx.model, &ids, max_new, None)
                .map_err(AnalysisError::Engine)?;
            let generation = ctx.vocab.detokenize(&generated);
            let predicted = parse_label(&generation, options);
            let group_activations =
                group_activations(&ctx.model, &ids, groups, None, Pooling::LastInputToken, None)?;
            Ok(OutcomeRecord {
                record_index: i,
                actual: record.label().expect("analysis slice holds kept records"),
                predicted,
                group_activations,
                policy: None,
                generation,
            })
        })
        .collect();
    let outcomes: Vec<OutcomeRecord> = outcomes
        .into_iter()
        .collect::<analysis::Result<_>>()
        .stage("baseline")?;

    let n_records = outcomes.len();
    let n_correct = outcomes
        .iter()
        .filter(|o| o.predicted == Prediction::Label(o.actual))
        .count();
    let n_unknown = outcomes
        .iter()
        .filter(|o| o.predicted == Prediction::Unknown)
        .count();
    let summary = BaselineSummary {
        n_records,
        n_correct,
        n_errors: n_records - n_correct - n_unknown,
        n_unknown,
        accuracy: n_correct as f64 / n_records as f64,
    };
    let pattern = error_pattern(&outcomes, options);
    let buckets = outcome_buckets(&outcomes, options);
    Ok(BaselineArtifacts { outcomes, summary, pattern, buckets })
}

/// Rerun every misclassified baseline record under suppression of the
/// matching direct / indirect neuron group at each amplification factor.
pub fn sweep_stage(
    ctx: &RunContext,
    outcomes: &[OutcomeRecord],
    groups: &[NeuronGroup],
) -> Result<SweepResult> {
    let records: Vec<SweepRecord> = outcomes
        .iter()
        .filter_map(|o| match o.predicted {
            Prediction::Label(predicted) if predicted != o.actual => {
                let prompt = render_prompt(&ctx.template, &ctx.records[o.record_index].text);
                Some(SweepRecord {
                    record_index: o.record_index,
                    tokens: ctx.vocab.tokenize(&prompt).ids,
                    actual: o.actual,
                    baseline_predicted: predicted,
                })
            }
            _ => None,
        })
        .collect();
    let direct: Vec<NeuronGroup> = groups
        .iter()
        .filter(|g| g.mention == Mention::Direct)
        .cloned()
        .collect();
    let indirect: Vec<NeuronGroup> = groups
        .iter()
        .filter(|g| g.mention == Mention::Indirect)
        .cloned()
        .collect();
    analysis::intervention_sweep(
        &ctx.model,
        &ctx.vocab,
        &records,
        &direct,
        &indirect,
        &ctx.config.intervention.factors,
        &ctx.template.options,
        ctx.config.intervention.max_new,
    )
    .stage("sweep")
}

/// Corpus composition as reported in the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub kept: usize,
    pub excluded: usize,
    /// Kept records per consolidated group.
    pub by_group: BTreeMap<String, usize>,
    /// Kept records per mention kind.
    pub by_mention: BTreeMap<String, usize>,
}

fn corpus_summary(ctx: &RunContext) -> CorpusSummary {
    let mut by_group = BTreeMap::new();
    let mut by_mention = BTreeMap::new();
    for record in &ctx.records {
        if let Some(label) = record.label() {
            *by_group.entry(label.name().to_string()).or_insert(0) += 1;
            *by_mention.entry(record.mention.to_string()).or_insert(0) += 1;
        }
    }
    CorpusSummary {
        total: ctx.records.len(),
        kept: ctx.kept,
        excluded: ctx.excluded,
        by_group,
        by_mention,
    }
}

/// One probe's headline numbers for terminal output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummaryLine {
    pub kind: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub train_count: usize,
    pub test_count: usize,
}

/// What a command reports back to the terminal after writing its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub output_dir: PathBuf,
    pub config_sha256: String,
    pub probes: Vec<ProbeSummaryLine>,
    pub baseline: Option<BaselineSummary>,
    pub sweep_cells: usize,
    pub artifact_count: usize,
}

/// How much of the pipeline a command runs and which artifacts it writes.
/// Later scopes recompute earlier stages in memory (cheap and deterministic)
/// rather than reading prior artifacts back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scope {
    Probe,
    Attribute,
    Activations,
    Intervene,
    Report,
}

/// Pre-flight for the bundle directory. A fresh or empty directory is always
/// fine; an existing bundle (recognized by its provenance record) may be
/// added to, or — for full `report` runs — is cleared for a pristine rebuild.
/// Any other non-empty directory is refused rather than polluted.
fn prepare_output_dir(dir: &Path, wipe_existing_bundle: bool) -> Result<()> {
    if dir.exists() {
        let has_manifest = dir.join(report::RUN_MANIFEST_NAME).exists();
        let is_empty = std::fs::read_dir(dir)
            .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })
            .stage("prepare-output")?
            .next()
            .is_none();
        if !is_empty && !has_manifest {
            return Err(invalid(format!(
                "output dir {} is non-empty and not a report bundle; refusing to write into it",
                dir.display()
            )));
        }
        if wipe_existing_bundle && !is_empty {
            std::fs::remove_dir_all(dir)
                .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })
                .stage("prepare-output")?;
        }
    }
    std::fs::create_dir_all(dir)
        .map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })
        .stage("prepare-output")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    report::write_json(path, value).stage("report-write")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    report::write_text(path, text).stage("report-write")
}

fn run_scoped(config: &RunConfig, scope: Scope) -> Result<ReportSummary> {
    let mode = config.run.mode;
    if scope == Scope::Intervene && !mode.is_creact() {
        return Err(invalid(format!(
            "intervene requires a clinical mode with a decode protocol; mode is {mode}"
        )));
    }
    let out = config.output_dir()?;
    let canonical = config.canonical_toml();
    let config_sha256 = report::sha256_hex(canonical.as_bytes());
    let ctx = load_context(config.clone())?;

    prepare_output_dir(&out, scope == Scope::Report)?;
    write_text(&out.join("effective_config.toml"), &canonical)?;
    write_json(&out.join("corpus_summary.json"), &corpus_summary(&ctx))?;

    let write_probes = matches!(scope, Scope::Probe | Scope::Report);
    let write_attribution = matches!(scope, Scope::Attribute | Scope::Report);
    let need_groups = scope != Scope::Probe;
    let write_matrix = matches!(scope, Scope::Activations | Scope::Report);
    let run_decode = matches!(scope, Scope::Intervene | Scope::Report) && mode.is_creact();

    let mut probes = Vec::new();
    let mut all_groups: Vec<NeuronGroup> = Vec::new();
    for &kind in probe_kinds(mode) {
        let slug = kind_slug(kind);
        let artifacts = probe_stage(&ctx, kind)?;
        if write_probes {
            save_probe(&artifacts.probe, &out.join("probe").join(slug)).stage("probe-save")?;
            write_json(&out.join("probe").join(slug).join("metrics.json"), &artifacts.metrics)?;
            write_json(
                &out.join("fingerprints").join(format!("{slug}.json")),
                &artifacts.fingerprints,
            )?;
        }
        if need_groups {
            let attribution = attribution_stage(&ctx, &artifacts)?;
            if write_attribution {
                write_json(
                    &out.join("attribution").join(format!("{slug}_candidates.json")),
                    &attribution.classes,
                )?;
                write_json(
                    &out.join("attribution").join(format!("{slug}_groups.json")),
                    &attribution.groups,
                )?;
            }
            all_groups.extend(attribution.groups);
        }
        probes.push(ProbeSummaryLine {
            kind: slug.to_string(),
            accuracy: artifacts.metrics.accuracy,
            macro_f1: artifacts.metrics.macro_f1,
            train_count: artifacts.train_count,
            test_count: artifacts.test_count,
        });
    }

    if write_matrix {
        let matrix = activation_stage(&ctx, &all_groups)?;
        write_json(&out.join("activations").join("matrix.json"), &matrix)?;
        write_text(&out.join("activations").join("matrix.csv"), &matrix.to_csv())?;
    }

    let mut baseline_summary = None;
    let mut sweep_cells = 0;
    if run_decode {
        let baseline = baseline_stage(&ctx, &all_groups)?;
        let dir = out.join("baseline");
        write_text(
            &dir.join("generations.jsonl"),
            &report::jsonl_string(&baseline.outcomes).stage("report-write")?,
        )?;
        write_json(&dir.join("outcomes.json"), &baseline.summary)?;
        write_json(&dir.join("error_pattern.json"), &baseline.pattern)?;
        write_json(&dir.join("outcome_buckets.json"), &baseline.buckets)?;
        write_text(&dir.join("outcome_buckets.csv"), &baseline.buckets.to_csv())?;

        let sweep = sweep_stage(&ctx, &baseline.outcomes, &all_groups)?;
        write_json(&out.join("sweep").join("sweep.json"), &sweep)?;
        write_text(&out.join("sweep").join("sweep.csv"), &sweep.to_csv())?;
        sweep_cells = sweep.cells.len();
        baseline_summary = Some(baseline.summary);
    }

    let manifest = report::write_run_manifest(&out, mode, config.run.seed, &config_sha256)
        .stage("report-write")?;

    Ok(ReportSummary {
        output_dir: out,
        config_sha256,
        probes,
        baseline: baseline_summary,
        sweep_cells,
        artifact_count: manifest.artifacts.len(),
    })
}

/// Train and save the mode's probes (clinical runs: both mention kinds).
pub fn run_probe_cmd(config: &RunConfig) -> Result<ReportSummary> {
    run_scoped(config, Scope::Probe)
}

/// Score, select, and keyword-filter neuron candidates; write the tables.
pub fn run_attribute_cmd(config: &RunConfig) -> Result<ReportSummary> {
    run_scoped(config, Scope::Attribute)
}

/// Write the group-conditioned activation matrix.
pub fn run_activations_cmd(config: &RunConfig) -> Result<ReportSummary> {
    run_scoped(config, Scope::Activations)
}

/// Decode baselines and sweep interventions over the misclassified records.
pub fn run_intervene_cmd(config: &RunConfig) -> Result<ReportSummary> {
    run_scoped(config, Scope::Intervene)
}

/// Run everything and emit the full bundle (clearing a stale bundle first).
pub fn run_report_cmd(config: &RunConfig) -> Result<ReportSummary> {
    run_scoped(config, Scope::Report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;
    use crate::fixture;

    #[test]
    fn probe_kinds_per_mode() {
        assert_eq!(probe_kinds(DatasetMode::Toxigen), &[Mention::NotApplicable]);
        assert_eq!(
            probe_kinds(DatasetMode::CreactIndirect),
            &[Mention::Direct, Mention::Indirect]
        );
    }

    #[test]
    fn split_seeds_differ_per_kind() {
        assert_eq!(split_seed(9, Mention::Direct), 9);
        assert_eq!(split_seed(9, Mention::NotApplicable), 9);
        assert_eq!(split_seed(9, Mention::Indirect), 10);
    }

    #[test]
    fn exit_codes_follow_error_category() {
        let config = PipelineError::Config(ConfigError::Invalid("x".into()));
        assert_eq!(config.exit_code(), EXIT_CONFIG);
        let data = PipelineError::in_stage("load-corpus", CorpusError::BadFraction(2.0));
        assert_eq!(data.exit_code(), EXIT_DATA);
        let no_errors = PipelineError::in_stage("sweep", AnalysisError::NoBaselineErrors);
        assert_eq!(no_errors.exit_code(), EXIT_DATA);
        let numeric = PipelineError::in_stage("probe-train", ProbeError::DegenerateData(1));
        assert_eq!(numeric.exit_code(), EXIT_NUMERIC);
        let engine = PipelineError::in_stage("baseline", EngineError::EmptyInput);
        assert_eq!(engine.exit_code(), EXIT_NUMERIC);
        // Failure messages name their stage.
        assert!(data.to_string().starts_with("stage load-corpus:"));
    }

    #[test]
    fn refuses_to_write_into_foreign_directories() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("precious.txt"), "keep me").unwrap();
        let err = prepare_output_dir(dir.path(), true).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
        assert!(dir.path().join("precious.txt").exists());
    }

    /// Full end-to-end run over the planted fixture. The expectations here
    /// are all consequences of the fixture's construction: the bias neuron
    /// drives every White indirect-mention record to Asian at baseline, the
    /// Asian direct-kind group contains that neuron (it writes the Asian
    /// label direction), and the Asian indirect-kind group only contains the
    /// country-token neuron that never fires on Russian-cue text.
    #[test]
    fn report_command_end_to_end_on_the_planted_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture::write_fixture(dir.path()).unwrap();
        let config = RunConfig::load(&paths.config, &Overrides::default()).unwrap();
        let summary = run_report_cmd(&config).unwrap();

        // Both probes separate the three classes essentially perfectly.
        assert_eq!(summary.probes.len(), 2);
        for line in &summary.probes {
            assert!(
                line.accuracy >= 0.99 && line.macro_f1 >= 0.99,
                "probe {} under target: acc {} f1 {}",
                line.kind,
                line.accuracy,
                line.macro_f1
            );
        }

        // Baseline: 45 indirect records; all 15 White records land on Asian.
        let baseline = summary.baseline.expect("clinical run decodes a baseline");
        assert_eq!(baseline.n_records, 45);
        assert_eq!(baseline.n_errors, 15);
        assert_eq!(baseline.n_unknown, 0);
        assert_eq!(baseline.n_correct, 30);

        let out = &summary.output_dir;
        let pattern: ErrorPattern = serde_json::from_str(
            &std::fs::read_to_string(out.join("baseline/error_pattern.json")).unwrap(),
        )
        .unwrap();
        let dominant = pattern.dominant.expect("errors exist");
        assert_eq!(dominant.actual, GroupLabel::White);
        assert_eq!(dominant.predicted, GroupLabel::Asian);
        assert_eq!(dominant.count, 15);
        assert_eq!(pattern.dominant_pct, Some(100.0));

        // Sweep: 2 kinds × 3 factors. Suppressing the direct-kind group
        // (which holds the bias neuron) fixes every record at every factor;
        // the indirect-kind group is dead on these records, so the bias
        // survives untouched.
        let sweep: SweepResult = serde_json::from_str(
            &std::fs::read_to_string(out.join("sweep/sweep.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary.sweep_cells, 6);
        assert_eq!(sweep.n_records, 15);
        for cell in &sweep.cells {
            match cell.kind {
                Mention::Direct => {
                    assert_eq!(cell.original_bias, 0.0, "factor {}", cell.factor);
                    assert!(cell.correct >= 0.99, "factor {}: {}", cell.factor, cell.correct);
                }
                Mention::Indirect => {
                    assert_eq!(cell.original_bias, 1.0, "factor {}", cell.factor);
                }
                Mention::NotApplicable => panic!("unexpected sweep kind"),
            }
        }

        // The bundle is complete and the manifest covers every artifact.
        for artifact in [
            "effective_config.toml",
            "corpus_summary.json",
            "probe/direct/probe.json",
            "probe/direct/probe.bin",
            "probe/direct/metrics.json",
            "probe/indirect/probe.json",
            "fingerprints/direct.json",
            "fingerprints/indirect.json",
            "attribution/direct_candidates.json",
            "attribution/direct_groups.json",
            "attribution/indirect_candidates.json",
            "attribution/indirect_groups.json",
            "activations/matrix.csv",
            "activations/matrix.json",
            "baseline/generations.jsonl",
            "baseline/outcomes.json",
            "baseline/error_pattern.json",
            "baseline/outcome_buckets.json",
            "baseline/outcome_buckets.csv",
            "sweep/sweep.json",
            "sweep/sweep.csv",
            "run_manifest.json",
        ] {
            assert!(out.join(artifact).exists(), "missing artifact {artifact}");
        }
        let manifest: report::RunManifest = serde_json::from_str(
            &std::fs::read_to_string(out.join("run_manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest.config_sha256, summary.config_sha256);
        assert_eq!(manifest.artifacts.len(), summary.artifact_count);
        assert!(manifest.artifacts.contains_key("sweep/sweep.csv"));

        // Candidate tables use the published neuron naming; the bias neuron
        // sits at layer 1 (reported 1-based), index 9.
        let candidates =
            std::fs::read_to_string(out.join("attribution/direct_candidates.json")).unwrap();
        assert!(candidates.contains("MLP.v^{2}_{9}"));
    }

    /// The analysis artifacts are a pure function of the config: a second
    /// run into a different directory reproduces them byte for byte.
    #[test]
    fn reruns_reproduce_artifacts_bytewise() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture::write_fixture(dir.path()).unwrap();
        let out_a = dir.path().join("out_a");
        let out_b = dir.path().join("out_b");
        let config_a = RunConfig::load(
            &paths.config,
            &Overrides { output_dir: Some(out_a.clone()), ..Default::default() },
        )
        .unwrap();
        let config_b = RunConfig::load(
            &paths.config,
            &Overrides { output_dir: Some(out_b.clone()), ..Default::default() },
        )
        .unwrap();
        run_report_cmd(&config_a).unwrap();
        run_report_cmd(&config_b).unwrap();
        // Everything except the embedded config (whose output_dir field
        // legitimately differs here) must match; full-bundle byte identity
        // under one fixed config is covered by the acceptance suite.
        for artifact in [
            "corpus_summary.json",
            "probe/direct/probe.bin",
            "probe/indirect/probe.bin",
            "attribution/indirect_groups.json",
            "activations/matrix.csv",
            "baseline/generations.jsonl",
            "sweep/sweep.csv",
        ] {
            let a = std::fs::read(out_a.join(artifact)).unwrap();
            let b = std::fs::read(out_b.join(artifact)).unwrap();
            assert_eq!(a, b, "artifact {artifact} differs between reruns");
        }
    }
}
