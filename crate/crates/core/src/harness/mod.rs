//! Reproducible experiments: manifests, run directories, checkpoints, and
//! the operations behind each CLI subcommand.

mod gradcheck_suite;

pub use gradcheck_suite::{model_grad_check, run_grad_check_suite, GradCheckSuite, GRAD_CHECK_EPSILON, GRAD_CHECK_THRESHOLD};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::kernels::Exec;
use crate::data_synth::{
    gen_dataset, synth_vocab, DatasetManifest, DomainDataset, EncodedData, SynthLangSpec, SynthLanguage, SynthSizes,
    UnsupervisedAudit,
};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_test_set, MetricsReport, ReportFormat, SummaryRow};
use crate::model::TransformerModel;
use crate::schedule::{
    adapt, eval_sets_for, expand_config, init_model, model_config_for, AdaptationPlan, ConfigId, Run, RunSpec,
    RunState, StageSpec,
};
use crate::tokenizer::Vocab;

pub const TOOL_VERSION: &str = concat!("quickadapt ", env!("CARGO_PKG_VERSION"));

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

// ---------------------------------------------------------------------------
// Datasets

/// Line, token and type counts of one corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub role: String,
    pub sentences: usize,
    pub tokens: usize,
    pub types: usize,
}

fn both_sides(p: &crate::data_synth::Pairs) -> Vec<&String> {
    p.iter().flat_map(|(a, b)| [a, b]).collect()
}

pub fn dataset_stats(ds: &DomainDataset) -> Vec<CorpusStats> {
    let stat = |role: String, sentences: Vec<&String>| {
        let tokens: Vec<&str> = sentences.iter().flat_map(|s| s.split_whitespace()).collect();
        let types: std::collections::HashSet<&&str> = tokens.iter().collect();
        CorpusStats {
            role,
            sentences: sentences.len(),
            tokens: tokens.len(),
            types: types.len(),
        }
    };
    let mut out = vec![
        stat("general.train".into(), both_sides(&ds.general_train)),
        stat("general.dev".into(), both_sides(&ds.general_dev)),
        stat("general.test".into(), both_sides(&ds.general_test)),
        stat("general.mono.src".into(), ds.general_mono.src.iter().collect()),
        stat("general.mono.tgt".into(), ds.general_mono.tgt.iter().collect()),
    ];
    // Pair corpora count both sides; report pairs as sentences.
    for s in out.iter_mut().take(3) {
        s.sentences /= 2;
    }
    for (d, m) in &ds.domain_mono {
        out.push(stat(format!("{d}.mono.src"), m.src.iter().collect()));
        out.push(stat(format!("{d}.mono.tgt"), m.tgt.iter().collect()));
        let mut t = stat(format!("{d}.test"), both_sides(&ds.domain_test[d]));
        t.sentences /= 2;
        out.push(t);
    }
    out
}

pub fn stats_table(stats: &[CorpusStats]) -> String {
    let mut out = format!("{:<18} {:>9} {:>9} {:>7}\n", "corpus", "sentences", "tokens", "types");
    for s in stats {
        out.push_str(&format!("{:<18} {:>9} {:>9} {:>7}\n", s.role, s.sentences, s.tokens, s.types));
    }
    out
}

/// SHA-256 over a dataset manifest and every file it lists, in role order.
pub fn dataset_hash(manifest_path: &Path) -> Result<String> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(read_text(manifest_path)?.as_bytes());
    for (role, entry) in &manifest.corpora {
        let path = base.join(&entry.path);
        h.update(role.as_bytes());
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    let vocab = base.join(&manifest.vocab_dir).join("vocab.txt");
    h.update(fs::read(&vocab).map_err(|e| Error::io(&vocab, e))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct GenDataOutput {
    pub manifest_path: PathBuf,
    pub stats: Vec<CorpusStats>,
    pub hash: String,
}

/// Generates a synthetic dataset into `out_dir`.
pub fn cmd_gen_data(spec: &SynthLangSpec, sizes: &SynthSizes, out_dir: &Path) -> Result<GenDataOutput> {
    let lang = SynthLanguage::new(spec)?;
    let ds = gen_dataset(spec, sizes)?;
    let manifest_path = ds.save(out_dir, &synth_vocab(&lang), Some((spec, sizes)))?;
    Ok(GenDataOutput {
        stats: dataset_stats(&ds),
        hash: dataset_hash(&manifest_path)?,
        manifest_path,
    })
}

/// Loads and id-encodes the dataset behind a manifest. `tokenizer`
/// overrides the dataset's own vocabulary directory.
pub fn load_encoded(dataset_manifest: &Path, tokenizer: Option<&Path>) -> Result<EncodedData> {
    let (_, ds, vocab) = DomainDataset::load(dataset_manifest)?;
    let vocab = match tokenizer {
        Some(dir) => Vocab::load(dir)?,
        None => vocab,
    };
    EncodedData::new(&ds, vocab)
}

// ---------------------------------------------------------------------------
// Experiment manifests

/// Adaptation of an existing general model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSpec {
    /// e.g. `A->B` (sequential) or `A,B` (simultaneous).
    pub plan: String,
    /// Checkpoint of the general model G (a stage checkpoint of a
    /// Baseline or S4 run).
    pub base_checkpoint: PathBuf,
}

/// Everything that determines a run. Relative paths are resolved against
/// the manifest file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset: PathBuf,
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub config: Option<ConfigId>,
    /// Explicit stages instead of a configuration id.
    #[serde(default)]
    pub stages: Option<Vec<StageSpec>>,
    /// Domains to adapt to (and to evaluate).
    #[serde(default)]
    pub domains: Vec<String>,
    #[serde(default)]
    pub adaptation: Option<AdaptationSpec>,
    /// Check every training batch against the unsupervised contract.
    #[serde(default = "yes")]
    pub audit: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub model: crate::model::TransformerConfig,
    #[serde(default)]
    pub budgets: crate::schedule::Budgets,
    #[serde(default)]
    pub weights: crate::schedule::JointWeights,
    #[serde(default)]
    pub train: crate::schedule::TrainSettings,
}

fn yes() -> bool {
    true
}

fn default_seed() -> u64 {
    RunSpec::default().seed
}

/// A manifest with its paths resolved and its exact source text.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: ExperimentManifest,
    pub text: String,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let manifest: ExperimentManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(LoadedManifest { manifest, text, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.manifest.dataset)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.manifest.output_dir)
    }

    pub fn run_spec(&self) -> RunSpec {
        let m = &self.manifest;
        RunSpec {
            seed: m.seed,
            model: m.model.clone(),
            budgets: m.budgets.clone(),
            weights: m.weights.clone(),
            train: m.train.clone(),
        }
    }

    pub fn config_label(&self) -> String {
        match (&self.manifest.config, &self.manifest.adaptation) {
            (_, Some(a)) => format!("adapt:{}", a.plan),
            (Some(c), None) => c.to_string(),
            (None, None) => "custom".to_string(),
        }
    }

    pub fn run_id(&self) -> String {
        self.manifest.run_id.clone().unwrap_or_else(|| self.config_label())
    }

    pub fn sha256(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }

    pub fn load_data(&self) -> Result<EncodedData> {
        let tok = self.manifest.tokenizer.as_ref().map(|t| self.resolve(t));
        load_encoded(&self.dataset_path(), tok.as_deref())
    }

    /// The stages a `train` run executes.
    pub fn stages(&self, data: &EncodedData) -> Result<Vec<StageSpec>> {
        let m = &self.manifest;
        match (&m.config, &m.stages) {
            (Some(_), Some(_)) => Err(Error::Config("give either `config` or `stages`, not both".into())),
            (None, None) => Err(Error::Config("manifest needs `config` or `stages`".into())),
            (None, Some(stages)) => {
                for (i, s) in stages.iter().enumerate() {
                    if s.id != i {
                        return Err(Error::Config(format!("stage ids must be 0, 1, ...; found {} at {i}", s.id)));
                    }
                    s.validate()?;
                }
                Ok(stages.clone())
            }
            (Some(c), None) => expand_config(*c, &data.corpus_ids(), &m.domains, &m.budgets, &m.weights),
        }
    }
}

/// Identity of a run, written as `run.json` in its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub run_id: String,
    pub config: String,
    pub seed: u64,
    pub manifest_sha256: String,
    pub dataset_sha256: String,
}

/// Counters persisted next to each stage checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stages_done: usize,
    pub train_step: usize,
    pub audit_batches: usize,
    pub audit_examples: usize,
    pub audit_violations: usize,
}

pub fn checkpoint_path(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage{stage}.ckpt"))
}

fn progress_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn report_state_path(run_dir: &Path) -> PathBuf {
    run_dir.join("state").join("report.json")
}

/// Loads a checkpoint together with its progress counters.
pub fn load_checkpoint(path: &Path) -> Result<(RunState, Progress)> {
    let model = TransformerModel::load(path, None)?;
    let progress: Progress = read_json(&progress_path(path))?;
    Ok((
        RunState {
            model,
            train_step: progress.train_step,
            stages_done: progress.stages_done,
        },
        progress,
    ))
}

fn save_checkpoint(path: &Path, state: &RunState, audit: Option<&UnsupervisedAudit>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    state.model.save(path)?;
    write_json(
        &progress_path(path),
        &Progress {
            stages_done: state.stages_done,
            train_step: state.train_step,
            audit_batches: audit.map_or(0, |a| a.batches),
            audit_examples: audit.map_or(0, |a| a.examples),
            audit_violations: audit.map_or(0, |a| a.violations),
        },
    )
}

/// Creates the run directory with the manifest copy and `run.json`. A
/// resumed run must use the identical manifest.
fn prepare_run_dir(m: &LoadedManifest, resume: bool) -> Result<(PathBuf, RunInfo)> {
    let dir = m.output_dir();
    let copy = dir.join("manifest.toml");
    if resume && copy.exists() && read_text(&copy)? != m.text {
        return Err(Error::Config(format!(
            "{}: manifest differs from the one the run was started with",
            dir.display()
        )));
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&copy, &m.text)?;
    let info = RunInfo {
        tool: TOOL_VERSION.to_string(),
        run_id: m.run_id(),
        config: m.config_label(),
        seed: m.manifest.seed,
        manifest_sha256: m.sha256(),
        dataset_sha256: dataset_hash(&m.dataset_path())?,
    };
    write_json(&dir.join("run.json"), &info)?;
    Ok((dir, info))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from the last completed stage in the run directory.
    pub resume: bool,
    /// Stop after this many completed stages (simulates an interruption).
    pub stop_after_stages: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub report: MetricsReport,
    pub completed: bool,
    pub stages_run: usize,
    pub audit: Option<UnsupervisedAudit>,
    pub state: RunState,
}

const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotCsv];

/// Trains the manifest's configuration, checkpointing after every stage.
pub fn cmd_train(manifest_path: &Path, opts: TrainOptions) -> Result<TrainOutput> {
    let m = LoadedManifest::load(manifest_path)?;
    if m.manifest.adaptation.is_some() {
        return Err(Error::Config("manifest describes an adaptation; use `adapt`".into()));
    }
    let data = m.load_data()?;
    let stages = m.stages(&data)?;
    let spec = m.run_spec();
    spec.train.validate()?;
    let (dir, info) = prepare_run_dir(&m, opts.resume)?;
    let eval_domains = if m.manifest.domains.is_empty() { data.domains.clone() } else { m.manifest.domains.clone() };
    let mut run = Run::new(&data, &spec.train, spec.seed, &info.run_id, &info.config, eval_sets_for(&data, &eval_domains)?);
    if m.manifest.audit {
        run.audit = Some(UnsupervisedAudit::new(&data)?);
    }

    let mut state = None;
    if opts.resume {
        let done = (1..=stages.len()).rev().find(|&k| checkpoint_path(&dir, k - 1).exists());
        if let Some(k) = done {
            let (s, progress) = load_checkpoint(&checkpoint_path(&dir, k - 1))?;
            if let Some(a) = run.audit.as_mut() {
                a.batches = progress.audit_batches;
                a.examples = progress.audit_examples;
                a.violations = progress.audit_violations;
            }
            run.report = read_json(&report_state_path(&dir))?;
            log::info!("resuming {} after stage {}", info.run_id, k - 1);
            state = Some(s);
        }
    }
    let mut state = match state {
        Some(s) => s,
        None => RunState {
            model: init_model(&model_config_for(&data, &spec.model), spec.seed)?,
            train_step: 0,
            stages_done: 0,
        },
    };
    let mut stages_run = 0;
    for stage in &stages[state.stages_done..] {
        if opts.stop_after_stages.is_some_and(|n| state.stages_done >= n) {
            break;
        }
        run.run_stage(&mut state, stage)?;
        stages_run += 1;
        save_checkpoint(&checkpoint_path(&dir, stage.id), &state, run.audit.as_ref())?;
        write_json(&report_state_path(&dir), &run.report)?;
    }
    let completed = state.stages_done == stages.len();
    if completed {
        emit_report(&run.report, &ALL_FORMATS, &dir)?;
        if let Some(a) = &run.audit {
            write_json(
                &dir.join("audit.json"),
                &serde_json::json!({ "batches": a.batches, "examples": a.examples, "violations": a.violations }),
            )?;
        }
    }
    Ok(TrainOutput {
        run_dir: dir,
        report: run.report,
        completed,
        stages_run,
        audit: run.audit,
        state,
    })
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub run_dir: PathBuf,
    pub report: MetricsReport,
    pub checkpoints: Vec<PathBuf>,
    pub audit: Option<UnsupervisedAudit>,
    pub states: Vec<RunState>,
}

/// Adapts the manifest's base checkpoint along its plan; one checkpoint per
/// plan step.
pub fn cmd_adapt(manifest_path: &Path) -> Result<AdaptOutput> {
    let m = LoadedManifest::load(manifest_path)?;
    let a = m
        .manifest
        .adaptation
        .clone()
        .ok_or_else(|| Error::Config("manifest has no [adaptation] section".into()))?;
    let plan = AdaptationPlan::parse(&a.plan)?;
    let base_path = m.resolve(&a.base_checkpoint);
    if !base_path.exists() {
        return Err(Error::Checkpoint(format!("base model {} not found", base_path.display())));
    }
    let data = m.load_data()?;
    let (base, _) = load_checkpoint(&base_path)?;
    let spec = m.run_spec();
    let (dir, info) = prepare_run_dir(&m, false)?;
    let (states, report, audit) = adapt(&plan, &base, &data, &spec, &info.run_id, m.manifest.audit)?;
    let mut checkpoints = Vec::new();
    for (k, s) in states.iter().enumerate() {
        let p = dir.join("checkpoints").join(format!("adapt{}.ckpt", k + 1));
        save_checkpoint(&p, s, audit.as_ref())?;
        checkpoints.push(p);
    }
    emit_report(&report, &ALL_FORMATS, &dir)?;
    Ok(AdaptOutput {
        run_dir: dir,
        report,
        checkpoints,
        audit,
        states,
    })
}

/// BLEU of a checkpoint on the named test sets (all when empty).
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset_manifest: &Path,
    test_sets: &[String],
    beam: usize,
    limit: Option<usize>,
) -> Result<BTreeMap<String, f64>> {
    let data = load_encoded(dataset_manifest, None)?;
    let model = TransformerModel::load(checkpoint, None)?;
    if model.config.vocab_size != data.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary {} does not match dataset vocabulary {}",
            model.config.vocab_size,
            data.vocab.len()
        )));
    }
    let ids: Vec<String> = if test_sets.is_empty() { data.tests.keys().cloned().collect() } else { test_sets.to_vec() };
    let mut scores = BTreeMap::new();
    for id in ids {
        let mut test = data.test(&id)?.clone();
        if let Some(n) = limit {
            test.sources.truncate(n);
            test.references.truncate(n);
        }
        scores.insert(id, evaluate_test_set(Exec::Parallel, &model, &data, &test, beam)?);
    }
    Ok(scores)
}

/// One claimed inequality between configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

/// The joint-training orderings: S4 at least matches S1, S2 and S6 on
/// in-domain BLEU, up to `slack`.
pub fn ordering_checks(summary: &[SummaryRow], slack: f64) -> Vec<OrderingCheck> {
    let score = |c: &str| summary.iter().find(|r| r.config == c).and_then(|r| r.in_domain);
    let Some(s4) = score("S4") else { return vec![] };
    ["S1", "S2", "S6"]
        .iter()
        .filter_map(|c| {
            score(c).map(|other| OrderingCheck {
                claim: format!("S4 >= {c} - {slack}"),
                lhs: s4,
                rhs: other,
                passed: s4 >= other - slack,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CompareOutput {
    /// Summary rows ranked by in-domain BLEU (best first).
    pub summary: Vec<SummaryRow>,
    pub checks: Vec<OrderingCheck>,
    pub report: MetricsReport,
}

/// Runs (or reuses finished runs of) every manifest and ranks them. All
/// manifests must share one dataset and seed.
pub fn cmd_compare_configs(manifests: &[PathBuf], check_ordering: bool) -> Result<CompareOutput> {
    if manifests.is_empty() {
        return Err(Error::Config("no manifests to compare".into()));
    }
    let loaded: Vec<LoadedManifest> = manifests.iter().map(|p| LoadedManifest::load(p)).collect::<Result<_>>()?;
    let first_hash = dataset_hash(&loaded[0].dataset_path())?;
    for m in &loaded[1..] {
        if dataset_hash(&m.dataset_path())? != first_hash {
            return Err(Error::Config(format!(
                "manifests use different datasets ({} vs {})",
                loaded[0].dataset_path().display(),
                m.dataset_path().display()
            )));
        }
        if m.manifest.seed != loaded[0].manifest.seed {
            return Err(Error::Config("manifests use different seeds".into()));
        }
    }
    let mut report = MetricsReport::new();
    for (m, path) in loaded.iter().zip(manifests) {
        let dir = m.output_dir();
        let finished = read_json::<RunInfo>(&dir.join("run.json"))
            .is_ok_and(|info| info.manifest_sha256 == m.sha256())
            && dir.join("metrics.csv").exists();
        let r = if finished {
            MetricsReport::from_csv(&read_text(&dir.join("metrics.csv"))?)?
        } else if m.manifest.adaptation.is_some() {
            cmd_adapt(path)?.report
        } else {
            cmd_train(path, TrainOptions::default())?.report
        };
        report.extend(r)?;
    }
    let mut summary = report.summary()?;
    summary.sort_by(|a, b| b.in_domain.unwrap_or(f64::NEG_INFINITY).total_cmp(&a.in_domain.unwrap_or(f64::NEG_INFINITY)));
    let checks = if check_ordering { ordering_checks(&summary, 0.5) } else { vec![] };
    Ok(CompareOutput { summary, checks, report })
}

pub fn summary_table(summary: &[SummaryRow]) -> String {
    let mut out = format!("{:<20} {:<12} {}\n", "run", "config", "in-domain (general)");
    for r in summary {
        out.push_str(&format!("{:<20} {:<12} {}\n", r.run_id, r.config, r.display));
    }
    out
}
