//! The evaluation run matrix: methods × benchmarks × perturbation regimes ×
//! decoding regimes × runs, executed through the debate engine.
//!
//! Every `(cell, item, run)` unit is independent. Units are flattened into
//! one list and mapped over the worker budget in input order, so the archive
//! comes out in matrix order regardless of scheduling. Reports are computed
//! from the archive alone, which lets `metrics` replay them later.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::{load_dataset, BenchmarkItem, SchemaTag};
use super::desk::DeskPanel;
use super::journal::{unit_key, Journal, UnitKey};
use super::perturb::{
    perturb_adversarial, perturb_demographic, perturb_linguistic, DemographicOutcome, SwapTable,
};
use crate::backends::{BackendError, BackendSet, NoRetrieval, RetrievalBackend};
use crate::credit::score_trajectory;
use crate::engine::{run_debate, DebateOptions, PromptTemplates, Timing};
use crate::metrics::{
    cdr, consensus_rate, cost_summary, hrr, relevance_score, roc_points, run_std, top1_accuracy,
    CostSummary, MetricReport, PredictionRecord, RocPoint,
};
use crate::model::{
    message_order, validate_group_config, AgentId, Answer, ConfigError, DecodingParams, GroupConfig,
    Role, SafetyFlag, Trajectory, ValidatedConfig,
};

/// How benchmark items are altered before a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    Clean,
    Linguistic { intensity: f64 },
    Adversarial,
    Demographic { attribute: String },
}

impl Regime {
    /// Short name used in cell keys and report paths.
    pub fn label(&self) -> String {
        match self {
            Regime::Clean => "clean".into(),
            Regime::Linguistic { intensity } => format!("ling{intensity}"),
            Regime::Adversarial => "adv".into(),
            Regime::Demographic { attribute } => format!("demo_{attribute}"),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "clean" {
            return Ok(Regime::Clean);
        }
        if s == "adv" || s == "adversarial" {
            return Ok(Regime::Adversarial);
        }
        if let Some(attr) = s.strip_prefix("demo_") {
            return Ok(Regime::Demographic {
                attribute: attr.to_string(),
            });
        }
        if let Some(x) = s.strip_prefix("ling") {
            let intensity = if x.is_empty() { 0.3 } else { x.parse().map_err(|_| format!("bad intensity in `{s}`"))? };
            return Ok(Regime::Linguistic { intensity });
        }
        Err(format!("unknown regime `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub config: GroupConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub path: PathBuf,
    pub schema: SchemaTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMatrix {
    pub methods: Vec<MethodSpec>,
    pub benchmarks: Vec<BenchmarkSpec>,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Regime>,
    #[serde(default = "default_decoding_regimes")]
    pub decoding_regimes: Vec<DecodingParams>,
    #[serde(default = "default_runs")]
    pub runs_per_cell: u32,
    #[serde(default)]
    pub seed_base: i64,
}

fn default_regimes() -> Vec<Regime> {
    vec![Regime::Clean]
}

fn default_decoding_regimes() -> Vec<DecodingParams> {
    vec![DecodingParams::default()]
}

fn default_runs() -> u32 {
    5
}

impl RunMatrix {
    pub fn validate(&self) -> Result<(), MatrixError> {
        let invalid = |m: &str| Err(MatrixError::InvalidMatrix(m.to_string()));
        if self.methods.is_empty() {
            return invalid("no methods");
        }
        if self.benchmarks.is_empty() {
            return invalid("no benchmarks");
        }
        if self.regimes.is_empty() {
            return invalid("no perturbation regimes");
        }
        if self.decoding_regimes.is_empty() {
            return invalid("no decoding regimes");
        }
        if self.runs_per_cell == 0 {
            return invalid("runs_per_cell must be at least 1");
        }
        let labels: BTreeSet<&str> = self.methods.iter().map(|m| m.label.as_str()).collect();
        if labels.len() != self.methods.len() {
            return invalid("method labels must be unique");
        }
        let names: BTreeSet<&str> = self.benchmarks.iter().map(|b| b.name.as_str()).collect();
        if names.len() != self.benchmarks.len() {
            return invalid("benchmark names must be unique");
        }
        for r in &self.regimes {
            if let Regime::Linguistic { intensity } = r {
                if !(0.0..=1.0).contains(intensity) {
                    return invalid(&format!("linguistic intensity {intensity} outside [0, 1]"));
                }
            }
        }
        for m in &self.methods {
            validate_group_config(m.config.clone()).map_err(|source| MatrixError::Config {
                method: m.label.clone(),
                source,
            })?;
        }
        for d in &self.decoding_regimes {
            d.validate().map_err(|source| MatrixError::Config {
                method: "decoding".into(),
                source,
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("invalid run matrix: {0}")]
    InvalidMatrix(String),
    #[error("configuration of `{method}`: {source}")]
    Config {
        method: String,
        #[source]
        source: ConfigError,
    },
    #[error("journal: {0}")]
    Journal(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Supplies the backends of one method.
pub trait BackendProvider: Sync {
    fn backends(&self, method: &str, cfg: &ValidatedConfig) -> Result<BackendSet, BackendError>;
}

impl<F> BackendProvider for F
where
    F: Fn(&str, &ValidatedConfig) -> Result<BackendSet, BackendError> + Sync,
{
    fn backends(&self, method: &str, cfg: &ValidatedConfig) -> Result<BackendSet, BackendError> {
        self(method, cfg)
    }
}

/// Uses the bindings carried in each method's configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConfigBindings;

impl BackendProvider for ConfigBindings {
    fn backends(&self, _method: &str, cfg: &ValidatedConfig) -> Result<BackendSet, BackendError> {
        let set = BackendSet::from_config(cfg)?;
        match set.missing_for(cfg) {
            Some(agent) => Err(BackendError::Unbound(agent)),
            None => Ok(set),
        }
    }
}

impl BackendProvider for DeskPanel {
    fn backends(&self, _method: &str, cfg: &ValidatedConfig) -> Result<BackendSet, BackendError> {
        Ok(DeskPanel::backends(self, cfg))
    }
}

/// Coordinates of one matrix cell, as labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: String,
    pub benchmark: String,
    pub regime: String,
    pub decoding: String,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}|{}", self.method, self.benchmark, self.regime, self.decoding)
    }
}

/// One archived debate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub cell: CellKey,
    pub item_id: String,
    pub run: u32,
    pub gold: Option<String>,
    pub unsafe_label: Option<bool>,
    /// Whether the chosen option is backed by the item's context passage.
    pub context_supported: Option<bool>,
    /// Demographic attribute → surface text in the (perturbed) stem.
    pub attrs: BTreeMap<String, String>,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: CellKey,
    pub item_id: Option<String>,
    pub run: Option<u32>,
    pub error: String,
}

impl fmt::Display for CellFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.cell)?;
        if let Some(item) = &self.item_id {
            write!(f, " item {item}")?;
        }
        if let Some(run) = self.run {
            write!(f, " run {run}")?;
        }
        write!(f, ": {}", self.error)
    }
}

/// Metrics of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: CellKey,
    pub metrics: BTreeMap<String, f64>,
    pub roc: Vec<RocPoint>,
    pub cost: CostSummary,
    pub skipped: Vec<String>,
    pub failures: Vec<String>,
}

pub struct MatrixOptions {
    pub workers: usize,
    pub timing: Timing,
    pub templates: PromptTemplates,
    pub retrieval: Arc<dyn RetrievalBackend>,
    pub swap_table: SwapTable,
    /// Progress journal; units already in it are not rerun.
    pub journal: Option<PathBuf>,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            timing: Timing::Measured,
            templates: PromptTemplates::default(),
            retrieval: Arc::new(NoRetrieval),
            swap_table: SwapTable::default(),
            journal: None,
        }
    }
}

/// Everything a matrix run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixOutput {
    pub archive: Vec<ArchiveRecord>,
    /// method → agent → parameter count.
    pub params: BTreeMap<String, BTreeMap<AgentId, u64>>,
    pub skipped: Vec<(CellKey, String)>,
    pub failures: Vec<CellFailure>,
    pub cells: Vec<CellReport>,
    pub reports: Vec<MetricReport>,
}

struct Unit<'a> {
    cell: CellKey,
    item: &'a BenchmarkItem,
    run: u32,
    method: usize,
    decoding: usize,
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn apply_regime(
    regime: &Regime,
    item: &BenchmarkItem,
    seed_base: i64,
    swaps: &SwapTable,
) -> Result<Result<BenchmarkItem, String>, String> {
    let seed = (seed_base as u64) ^ fnv1a(&item.id);
    match regime {
        Regime::Clean => Ok(Ok(item.clone())),
        Regime::Linguistic { intensity } => perturb_linguistic(item, seed, *intensity)
            .map(Ok)
            .map_err(|e| e.to_string()),
        Regime::Adversarial => Ok(Ok(perturb_adversarial(item, seed))),
        Regime::Demographic { attribute } => match perturb_demographic(item, attribute, swaps) {
            Ok(DemographicOutcome::Perturbed(p)) => Ok(Ok(p)),
            Ok(DemographicOutcome::Skipped { item_id, reason }) => Ok(Err(format!("{item_id}: {reason}"))),
            Err(e) => Err(e.to_string()),
        },
    }
}

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 4)
        .map(str::to_lowercase)
        .collect()
}

/// Lexical support check: at least half of the chosen option's content
/// words (four or more characters) occur in the context passage. `None`
/// without a context or a labelled answer.
pub fn context_supported(item: &BenchmarkItem, answer: &Answer) -> Option<bool> {
    let context = item.context.as_deref()?;
    let label = answer.label()?;
    let option = item.options.iter().find(|o| o.label == label)?;
    let words = content_words(&option.text);
    if words.is_empty() {
        return Some(false);
    }
    let ctx = content_words(context);
    let hits = words.iter().filter(|w| ctx.contains(*w)).count();
    Some(2 * hits >= words.len())
}

/// Mean unsafe-risk over the safety audits of the last round: a flag of
/// Concern or worse contributes its confidence, no flag contributes
/// `1 − confidence`. `None` when the last round has no safety audit.
pub fn risk_score(trajectory: &Trajectory) -> Option<f64> {
    let last = trajectory.all_messages().iter().map(|m| m.round).max()?;
    let scores: Vec<f64> = trajectory
        .all_messages()
        .iter()
        .filter(|m| m.round == last && m.role == Role::Safety)
        .map(|m| {
            if m.safety_flag >= SafetyFlag::Concern {
                m.confidence
            } else {
                1.0 - m.confidence
            }
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Text of the last final-round message that states the final answer.
fn response_text(trajectory: &Trajectory) -> Option<String> {
    let final_answer = trajectory.final_answer.as_ref()?;
    let last = trajectory.all_messages().iter().map(|m| m.round).max()?;
    let mut msgs: Vec<_> = trajectory
        .all_messages()
        .iter()
        .filter(|m| m.round == last && &m.as_answer() == final_answer)
        .collect();
    msgs.sort_by_key(|m| message_order(m));
    msgs.last().map(|m| format!("{} {}", m.answer, m.rationale).trim().to_string())
}

fn prediction(record: &ArchiveRecord) -> PredictionRecord {
    let t = &record.trajectory;
    PredictionRecord {
        item_id: record.item_id.clone(),
        predicted: t.final_answer.clone(),
        gold: record.gold.clone(),
        group_attrs: record.attrs.clone(),
        risk_score: risk_score(t),
        unsafe_label: record.unsafe_label,
        runs: None,
        regime: Some(record.cell.regime.clone()),
        context_supported: record.context_supported,
        response_text: response_text(t),
    }
}

fn item_attrs(item: &BenchmarkItem) -> BTreeMap<String, String> {
    item.demographics
        .iter()
        .filter_map(|(attr, spans)| {
            let text: Vec<&str> = spans.iter().filter_map(|s| item.span_text(*s)).collect();
            (!text.is_empty()).then(|| (attr.clone(), text.join(" ")))
        })
        .collect()
}

/// Executes every cell of `matrix`. Per-unit failures are collected rather
/// than aborting the run; only an invalid matrix or journal is fatal.
pub fn run_matrix(
    matrix: &RunMatrix,
    provider: &dyn BackendProvider,
    opts: &MatrixOptions,
) -> Result<MatrixOutput, MatrixError> {
    matrix.validate()?;
    let mut failures = Vec::new();
    let mut skipped = Vec::new();

    let cell_key = |m: &MethodSpec, b: &BenchmarkSpec, r: &Regime, d: &DecodingParams| CellKey {
        method: m.label.clone(),
        benchmark: b.name.clone(),
        regime: r.label(),
        decoding: d.cell_label(),
    };

    let mut configs: Vec<Option<(ValidatedConfig, BackendSet)>> = Vec::new();
    let mut params = BTreeMap::new();
    for m in &matrix.methods {
        let cfg = validate_group_config(m.config.clone()).map_err(|source| MatrixError::Config {
            method: m.label.clone(),
            source,
        })?;
        match provider.backends(&m.label, &cfg) {
            Ok(set) => {
                params.insert(m.label.clone(), set.param_counts());
                configs.push(Some((cfg, set)));
            }
            Err(e) => {
                for b in &matrix.benchmarks {
                    for r in &matrix.regimes {
                        for d in &matrix.decoding_regimes {
                            failures.push(CellFailure {
                                cell: cell_key(m, b, r, d),
                                item_id: None,
                                run: None,
                                error: format!("backends unavailable: {e}"),
                            });
                        }
                    }
                }
                configs.push(None);
            }
        }
    }

    // Items per (benchmark, regime), shared by all methods and decodings.
    let mut variants: Vec<Vec<Option<Vec<BenchmarkItem>>>> = Vec::new();
    for b in &matrix.benchmarks {
        let mut per_regime = Vec::new();
        match load_dataset(&b.path, b.schema) {
            Ok(items) => {
                for r in &matrix.regimes {
                    let mut out = Vec::new();
                    let mut error = None;
                    for item in &items {
                        match apply_regime(r, item, matrix.seed_base, &opts.swap_table) {
                            Ok(Ok(p)) => out.push(p),
                            Ok(Err(reason)) => {
                                for m in &matrix.methods {
                                    for d in &matrix.decoding_regimes {
                                        skipped.push((cell_key(m, b, r, d), reason.clone()));
                                    }
                                }
                            }
                            Err(e) => {
                                error = Some(e);
                                break;
                            }
                        }
                    }
                    if let Some(e) = error {
                        for m in &matrix.methods {
                            for d in &matrix.decoding_regimes {
                                failures.push(CellFailure {
                                    cell: cell_key(m, b, r, d),
                                    item_id: None,
                                    run: None,
                                    error: e.clone(),
                                });
                            }
                        }
                        per_regime.push(None);
                    } else {
                        per_regime.push(Some(out));
                    }
                }
            }
            Err(e) => {
                for m in &matrix.methods {
                    for r in &matrix.regimes {
                        for d in &matrix.decoding_regimes {
                            failures.push(CellFailure {
                                cell: cell_key(m, b, r, d),
                                item_id: None,
                                run: None,
                                error: format!("dataset {}: {e}", b.path.display()),
                            });
                        }
                    }
                }
                per_regime = vec![None; matrix.regimes.len()];
            }
        }
        variants.push(per_regime);
    }

    let mut units = Vec::new();
    for (mi, m) in matrix.methods.iter().enumerate() {
        if configs[mi].is_none() {
            continue;
        }
        for (bi, b) in matrix.benchmarks.iter().enumerate() {
            for (ri, r) in matrix.regimes.iter().enumerate() {
                let Some(items) = &variants[bi][ri] else { continue };
                for (di, d) in matrix.decoding_regimes.iter().enumerate() {
                    let cell = cell_key(m, b, r, d);
                    for item in items {
                        for run in 0..matrix.runs_per_cell {
                            units.push(Unit {
                                cell: cell.clone(),
                                item,
                                run,
                                method: mi,
                                decoding: di,
                            });
                        }
                    }
                }
            }
        }
    }

    let (journal, mut done) = match &opts.journal {
        Some(path) => {
            let value = serde_json::to_value(matrix).map_err(|e| MatrixError::Journal(e.to_string()))?;
            let (j, d) = Journal::open(path, &value)?;
            (Some(j), d)
        }
        None => (None, BTreeMap::new()),
    };

    let pending: Vec<&Unit> = units
        .iter()
        .filter(|u| !done.contains_key(&(u.cell.to_string(), u.item.id.clone(), u.run)))
        .collect();
    log::info!("{} of {} units to run", pending.len(), units.len());

    let results = crate::par::map_ordered(&pending, opts.workers, |u| -> Result<ArchiveRecord, CellFailure> {
        let fail = |error: String| CellFailure {
            cell: u.cell.clone(),
            item_id: Some(u.item.id.clone()),
            run: Some(u.run),
            error,
        };
        let (base, backends) = configs[u.method].as_ref().expect("units only for bound methods");
        let mut decoding = matrix.decoding_regimes[u.decoding].clone();
        decoding.seed = matrix.seed_base.wrapping_add(i64::from(u.run));
        let cfg = base.with_decoding(decoding).map_err(|e| fail(e.to_string()))?;
        let debate_opts = DebateOptions {
            templates: opts.templates.clone(),
            timing: opts.timing,
            workers: 1,
            run: u.run,
            conversation: Some(format!("{}/{}/{}", u.cell, u.item.id, u.run)),
        };
        let mut outcome = run_debate(u.item, &cfg, backends, opts.retrieval.as_ref(), &debate_opts)
            .map_err(|e| fail(e.to_string()))?;
        outcome.trajectory.reward_components =
            Some(score_trajectory(&outcome.trajectory, u.item.gold.as_deref()));
        let record = ArchiveRecord {
            cell: u.cell.clone(),
            item_id: u.item.id.clone(),
            run: u.run,
            gold: u.item.gold.clone(),
            unsafe_label: u.item.unsafe_label,
            context_supported: context_supported(u.item, &outcome.final_answer),
            attrs: item_attrs(u.item),
            trajectory: outcome.trajectory,
        };
        if let Some(j) = &journal {
            j.append(&record).map_err(|e| fail(e.to_string()))?;
        }
        Ok(record)
    });

    let mut fresh: BTreeMap<UnitKey, ArchiveRecord> = BTreeMap::new();
    for r in results {
        match r {
            Ok(rec) => {
                fresh.insert(unit_key(&rec), rec);
            }
            Err(f) => failures.push(f),
        }
    }
    let mut archive = Vec::with_capacity(units.len());
    for u in &units {
        let key = (u.cell.to_string(), u.item.id.clone(), u.run);
        if let Some(rec) = fresh.remove(&key).or_else(|| done.remove(&key)) {
            archive.push(rec);
        }
    }

    let (cells, reports) = build_reports(&archive, &params, &skipped, &failures, Some(matrix));
    Ok(MatrixOutput {
        archive,
        params,
        skipped,
        failures,
        cells,
        reports,
    })
}

fn metric_or_skip(
    name: &str,
    value: Result<f64, crate::metrics::MetricError>,
    out: &mut BTreeMap<String, f64>,
) {
    match value {
        Ok(v) => {
            out.insert(name.to_string(), v);
        }
        Err(e) => log::debug!("{name} not reported: {e}"),
    }
}

fn by_run(records: &[&ArchiveRecord]) -> BTreeMap<u32, Vec<PredictionRecord>> {
    let mut runs: BTreeMap<u32, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        runs.entry(r.run).or_default().push(prediction(r));
    }
    runs
}

fn per_run_std(records: &[&ArchiveRecord]) -> Result<f64, crate::metrics::MetricError> {
    let graded: Vec<&ArchiveRecord> = records.iter().copied().filter(|r| r.gold.is_some()).collect();
    let accs = by_run(&graded)
        .values()
        .map(|v| top1_accuracy(v))
        .collect::<Result<Vec<_>, _>>()?;
    run_std(&accs)
}

fn cell_metrics(
    records: &[&ArchiveRecord],
    clean: Option<&[&ArchiveRecord]>,
) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    let preds: Vec<PredictionRecord> = records.iter().map(|r| prediction(r)).collect();
    let items: BTreeSet<&str> = records.iter().map(|r| r.item_id.as_str()).collect();
    let runs: BTreeSet<u32> = records.iter().map(|r| r.run).collect();
    m.insert("items".into(), items.len() as f64);
    m.insert("runs".into(), runs.len() as f64);

    let graded: Vec<PredictionRecord> = preds.iter().filter(|p| p.gold.is_some()).cloned().collect();
    if !graded.is_empty() {
        metric_or_skip("accuracy", top1_accuracy(&graded), &mut m);
        if runs.len() >= 2 {
            metric_or_skip("run_std", per_run_std(records), &mut m);
        }
    }

    // Consensus over items that completed every run.
    let mut per_item: BTreeMap<&str, Vec<(u32, Answer)>> = BTreeMap::new();
    for r in records {
        if let Some(a) = &r.trajectory.final_answer {
            per_item.entry(&r.item_id).or_default().push((r.run, a.clone()));
        }
    }
    let complete: Vec<Vec<Answer>> = per_item
        .into_values()
        .filter(|v| v.len() == runs.len())
        .map(|mut v| {
            v.sort_by_key(|(run, _)| *run);
            v.into_iter().map(|(_, a)| a).collect()
        })
        .collect();
    if !complete.is_empty() {
        metric_or_skip("consensus_rate", consensus_rate(&complete), &mut m);
    }

    if preds.iter().any(|p| p.unsafe_label == Some(true)) {
        metric_or_skip("hrr", hrr(&preds), &mut m);
    }
    let supported: Vec<bool> = preds.iter().filter_map(|p| p.context_supported).collect();
    if !supported.is_empty() {
        metric_or_skip("relevance", relevance_score(&supported), &mut m);
    }
    if let Some(clean) = clean {
        let pairs = cdr_pairs(clean, records);
        if !pairs.is_empty() {
            metric_or_skip("cdr", cdr(&pairs), &mut m);
        }
    }
    m
}

/// Pairs clean and counterfactual final answers by (item, run).
fn cdr_pairs(clean: &[&ArchiveRecord], counterfactual: &[&ArchiveRecord]) -> Vec<(Answer, Answer)> {
    let base: BTreeMap<(&str, u32), &Answer> = clean
        .iter()
        .filter_map(|r| Some(((r.item_id.as_str(), r.run), r.trajectory.final_answer.as_ref()?)))
        .collect();
    counterfactual
        .iter()
        .filter_map(|r| {
            let a = base.get(&(r.item_id.as_str(), r.run))?;
            Some(((*a).clone(), r.trajectory.final_answer.clone()?))
        })
        .collect()
}

fn roc_of(preds: &[PredictionRecord]) -> Vec<RocPoint> {
    let scored: Vec<PredictionRecord> = preds
        .iter()
        .filter(|p| p.risk_score.is_some() && p.unsafe_label.is_some())
        .cloned()
        .collect();
    roc_points(&scored)
        .map(|pts| pts.into_iter().map(|(fpr, tpr)| RocPoint { fpr, tpr }).collect())
        .unwrap_or_default()
}

/// Cell and method reports from an archive. Used both right after a run and
/// when replaying a saved archive. With `matrix`, cells appear in matrix
/// order; otherwise in order of first appearance in the archive.
pub fn build_reports(
    archive: &[ArchiveRecord],
    params: &BTreeMap<String, BTreeMap<AgentId, u64>>,
    skipped: &[(CellKey, String)],
    failures: &[CellFailure],
    matrix: Option<&RunMatrix>,
) -> (Vec<CellReport>, Vec<MetricReport>) {
    let mut order: Vec<CellKey> = Vec::new();
    if let Some(matrix) = matrix {
        for m in &matrix.methods {
            for b in &matrix.benchmarks {
                for r in &matrix.regimes {
                    for d in &matrix.decoding_regimes {
                        order.push(CellKey {
                            method: m.label.clone(),
                            benchmark: b.name.clone(),
                            regime: r.label(),
                            decoding: d.cell_label(),
                        });
                    }
                }
            }
        }
    }
    let mut grouped: BTreeMap<&CellKey, Vec<&ArchiveRecord>> = BTreeMap::new();
    for r in archive {
        if !grouped.contains_key(&r.cell) && !order.contains(&r.cell) {
            order.push(r.cell.clone());
        }
        grouped.entry(&r.cell).or_default().push(r);
    }
    for (cell, _) in skipped {
        if !order.contains(cell) {
            order.push(cell.clone());
        }
    }
    for f in failures {
        if !order.contains(&f.cell) {
            order.push(f.cell.clone());
        }
    }
    let empty = BTreeMap::new();

    let mut cells = Vec::new();
    for key in &order {
        let records = grouped.get(key).cloned().unwrap_or_default();
        let clean_key = CellKey {
            regime: Regime::Clean.label(),
            ..key.clone()
        };
        let clean = if key.regime.starts_with("demo_") {
            grouped.get(&clean_key).map(Vec::as_slice)
        } else {
            None
        };
        let trajectories: Vec<Trajectory> = records.iter().map(|r| r.trajectory.clone()).collect();
        let preds: Vec<PredictionRecord> = records.iter().map(|r| prediction(r)).collect();
        cells.push(CellReport {
            cell: key.clone(),
            metrics: cell_metrics(&records, clean),
            roc: roc_of(&preds),
            cost: cost_summary(&trajectories, params.get(&key.method).unwrap_or(&empty)),
            skipped: skipped.iter().filter(|(c, _)| c == key).map(|(_, s)| s.clone()).collect(),
            failures: failures.iter().filter(|f| &f.cell == key).map(ToString::to_string).collect(),
        });
    }

    let mut methods: Vec<String> = Vec::new();
    for key in &order {
        if !methods.contains(&key.method) {
            methods.push(key.method.clone());
        }
    }
    let reports = methods
        .iter()
        .map(|method| method_report(method, &cells, &grouped, params.get(method).unwrap_or(&empty)))
        .collect();
    (cells, reports)
}

fn method_report(
    method: &str,
    cells: &[CellReport],
    grouped: &BTreeMap<&CellKey, Vec<&ArchiveRecord>>,
    params: &BTreeMap<AgentId, u64>,
) -> MetricReport {
    let mut report = MetricReport {
        method: method.to_string(),
        ..MetricReport::default()
    };
    let mine: Vec<&CellReport> = cells.iter().filter(|c| c.cell.method == method).collect();
    let mut clean_acc = Vec::new();
    for c in &mine {
        let primary = c.cell.regime == "clean" && c.cell.decoding == "base";
        let slot = report.per_benchmark.entry(c.cell.benchmark.clone()).or_default();
        for (name, &v) in &c.metrics {
            let key = if primary {
                name.clone()
            } else if c.cell.decoding == "base" {
                format!("{name}@{}", c.cell.regime)
            } else {
                format!("{name}@{}/{}", c.cell.regime, c.cell.decoding)
            };
            slot.insert(key, v);
        }
        if primary {
            if let Some(&a) = c.metrics.get("accuracy") {
                clean_acc.push(a);
            }
        }
        report.failures.extend(c.failures.iter().cloned());
    }
    report.gap = crate::metrics::benchmark_gap(clean_acc);

    let records: Vec<&ArchiveRecord> = grouped
        .iter()
        .filter(|(k, _)| k.method == method)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();

    // CDR per attribute, pooled over benchmarks and decodings.
    let mut pairs: BTreeMap<String, Vec<(Answer, Answer)>> = BTreeMap::new();
    for (key, recs) in grouped.iter().filter(|(k, _)| k.method == method) {
        if let Some(attr) = key.regime.strip_prefix("demo_") {
            let clean_key = CellKey {
                regime: Regime::Clean.label(),
                ..(*key).clone()
            };
            if let Some(clean) = grouped.get(&clean_key) {
                pairs.entry(attr.to_string()).or_default().extend(cdr_pairs(clean, recs));
            }
        }
    }
    for (attr, p) in pairs {
        if let Ok(v) = cdr(&p) {
            report.cdr.insert(attr, v);
        }
    }

    // Run-to-run spread of clean accuracy, per decoding regime.
    let mut by_decoding: BTreeMap<&str, Vec<&ArchiveRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.cell.regime == "clean") {
        by_decoding.entry(&r.cell.decoding).or_default().push(r);
    }
    for (decoding, recs) in by_decoding {
        if let Ok(v) = per_run_std(&recs) {
            report.consistency.insert(decoding.to_string(), v);
        }
    }

    let preds: Vec<PredictionRecord> = records.iter().map(|r| prediction(r)).collect();
    report.roc = roc_of(&preds);
    let trajectories: Vec<Trajectory> = records.iter().map(|r| r.trajectory.clone()).collect();
    report.cost = cost_summary(&trajectories, params);
    report
}

/// Path-safe rendering of a label: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn path_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

/// Run metadata stored next to the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub matrix: Option<RunMatrix>,
    pub timing: Timing,
    pub params: BTreeMap<String, BTreeMap<AgentId, u64>>,
    pub skipped: Vec<(CellKey, String)>,
    pub failures: Vec<CellFailure>,
}

pub const ARCHIVE_FILE: &str = "archive.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Writes `reports/{method}/{benchmark}/{regime}.json` (with `-{decoding}`
/// appended for non-base decoding), `reports/{method}/report.json`, and
/// `aggregate.csv` under `dir`.
pub fn write_reports(dir: &Path, cells: &[CellReport], reports: &[MetricReport]) -> Result<(), MatrixError> {
    for c in cells {
        let regime = if c.cell.decoding == "base" {
            c.cell.regime.clone()
        } else {
            format!("{}-{}", c.cell.regime, c.cell.decoding)
        };
        let path = dir
            .join("reports")
            .join(path_label(&c.cell.method))
            .join(path_label(&c.cell.benchmark))
            .join(format!("{}.json", path_label(&regime)));
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_json(&path, c)?;
    }
    for r in reports {
        let path = dir.join("reports").join(path_label(&r.method)).join("report.json");
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_json(&path, r)?;
    }
    let file = fs::File::create(dir.join(AGGREGATE_FILE))?;
    MetricReport::write_csv(reports, BufWriter::new(file)).map_err(|e| MatrixError::Archive(e.to_string()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MatrixError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MatrixError::Archive(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_archive(path: &Path, archive: &[ArchiveRecord]) -> Result<(), MatrixError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in archive {
        let line = serde_json::to_string(r).map_err(|e| MatrixError::Archive(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>, MatrixError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| MatrixError::Archive(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

/// Writes archive, manifest and reports of a finished run under `dir`.
pub fn write_outputs(
    dir: &Path,
    matrix: &RunMatrix,
    timing: Timing,
    output: &MatrixOutput,
) -> Result<(), MatrixError> {
    fs::create_dir_all(dir)?;
    write_archive(&dir.join(ARCHIVE_FILE), &output.archive)?;
    let manifest = Manifest {
        matrix: Some(matrix.clone()),
        timing,
        params: output.params.clone(),
        skipped: output.skipped.clone(),
        failures: output.failures.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_reports(dir, &output.cells, &output.reports)
}

/// Recomputes cell and method reports from a directory written by
/// [`write_outputs`].
pub fn replay(dir: &Path) -> Result<(Vec<CellReport>, Vec<MetricReport>), MatrixError> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| MatrixError::Archive(format!("{MANIFEST_FILE}: {e}")))?;
    let archive = read_archive(&dir.join(ARCHIVE_FILE))?;
    Ok(build_reports(
        &archive,
        &manifest.params,
        &manifest.skipped,
        &manifest.failures,
        manifest.matrix.as_ref(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_labels_round_trip() {
        for r in [
            Regime::Clean,
            Regime::Adversarial,
            Regime::Linguistic { intensity: 0.3 },
            Regime::Demographic { attribute: "gender".into() },
        ] {
            assert_eq!(r.label().parse::<Regime>().unwrap(), r);
        }
    }

    #[test]
    fn labels_become_path_safe() {
        assert_eq!(path_label("w/o A_R"), "w_o_A_R");
        assert_eq!(path_label("majority-voting"), "majority-voting");
    }

    #[test]
    fn lexical_support() {
        let item = BenchmarkItem {
            id: "c1".into(),
            stem: "Which drug?".into(),
            options: vec![
                super::super::OptionChoice { label: "A".into(), text: "Metformin therapy".into() },
                super::super::OptionChoice { label: "B".into(), text: "Insulin glargine".into() },
            ],
            gold: Some("A".into()),
            context: Some("First-line therapy is metformin.".into()),
            demographics: BTreeMap::new(),
            unsafe_label: None,
            benchmark_tag: "t".into(),
        };
        assert_eq!(context_supported(&item, &Answer::Label("A".into())), Some(true));
        assert_eq!(context_supported(&item, &Answer::Label("B".into())), Some(false));
        assert_eq!(context_supported(&item, &Answer::Refusal), None);
    }
}
