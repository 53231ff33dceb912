//! The training loop: sampled tasks, Adam updates, periodic evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampler::TaskSampler;
use super::spec::{expand_config, AdaptationPlan, Budgets, ConfigId, JointWeights, StageSpec, GENERAL_PARALLEL};
use crate::autodiff::kernels::Exec;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape};
use crate::data_synth::{Direction, EncodedData, UnsupervisedAudit, GENERAL};
use crate::error::{Error, Result};
use crate::eval::{evaluate_test_set, MetricsReport, MetricsRow, StageLog};
use crate::model::{TransformerConfig, TransformerModel};
use crate::objectives::{
    backtranslate_batch, bt_loss, mask_span, mass_loss, supervised_loss, TaskBatch, TaskKind, TranslationExample,
};
use crate::rng::{substream, StreamRng};

/// Hyperparameters shared by every stage of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Evaluate every this many steps within a stage (and at its end).
    pub eval_every: usize,
    pub eval_beam: usize,
    /// Beam width of online back-translation (1 = greedy).
    pub bt_beam: usize,
    pub mask_fraction: f64,
    /// Score only the first this many sentences of each test set.
    pub eval_limit: Option<usize>,
    /// Use the rayon paths for decoding and large kernels.
    pub parallel: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 32,
            adam: AdamConfig::default(),
            eval_every: 500,
            eval_beam: 1,
            bt_beam: 1,
            mask_fraction: 0.5,
            eval_limit: None,
            parallel: true,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_beam == 0 || self.bt_beam == 0 {
            return Err(Error::Config(
                "batch_size, eval_every, eval_beam and bt_beam must be positive".into(),
            ));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::Config(format!("mask_fraction {} not in (0, 1]", self.mask_fraction)));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Parameters plus progress counters threaded from stage to stage.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: TransformerModel,
    /// Optimizer steps taken so far across all stages.
    pub train_step: usize,
    /// Number of completed stages.
    pub stages_done: usize,
}

/// Randomly initialized model for `seed` (stream `init`).
pub fn init_model(config: &TransformerConfig, seed: u64) -> Result<TransformerModel> {
    TransformerModel::new(config.clone(), &mut substream(seed, "init"))
}

/// Model hyperparameters sized to a dataset: vocabulary from the data, and a
/// sequence limit that fits the longest sentence plus tag, eos and the
/// back-translation slack.
pub fn model_config_for(data: &EncodedData, base: &TransformerConfig) -> TransformerConfig {
    TransformerConfig {
        vocab_size: data.vocab.len(),
        max_seq_len: base.max_seq_len.max(data.max_encoded_len() + 6),
        ..base.clone()
    }
}

/// What one stage did.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub losses: Vec<f64>,
    pub task_counts: BTreeMap<String, usize>,
}

/// One run: its identity, data, settings and accumulating report.
pub struct Run<'a> {
    pub data: &'a EncodedData,
    pub settings: &'a TrainSettings,
    pub seed: u64,
    pub run_id: String,
    pub config: String,
    pub adapt_step: usize,
    /// Test sets scored at every evaluation.
    pub eval_sets: Vec<String>,
    pub audit: Option<UnsupervisedAudit>,
    pub report: MetricsReport,
}

/// General test sets plus both directions of every domain in `domains`.
pub fn eval_sets_for(data: &EncodedData, domains: &[String]) -> Result<Vec<String>> {
    let mut sets = Vec::new();
    for d in std::iter::once(GENERAL).chain(domains.iter().map(String::as_str)) {
        for dir in Direction::BOTH {
            let id = crate::data_synth::test_set_id(d, dir);
            data.test(&id)?;
            sets.push(id);
        }
    }
    Ok(sets)
}

fn pick<'v, T>(rng: &mut StreamRng, items: &'v [T], n: usize) -> Vec<&'v T> {
    (0..n).map(|_| &items[rng.random_range(0..items.len())]).collect()
}

impl<'a> Run<'a> {
    pub fn new(
        data: &'a EncodedData,
        settings: &'a TrainSettings,
        seed: u64,
        run_id: &str,
        config: &str,
        eval_sets: Vec<String>,
    ) -> Self {
        Run {
            data,
            settings,
            seed,
            run_id: run_id.to_string(),
            config: config.to_string(),
            adapt_step: 0,
            eval_sets,
            audit: None,
            report: MetricsReport::new(),
        }
    }

    /// Scores every evaluation set and appends the rows.
    pub fn evaluate(&mut self, state: &RunState) -> Result<BTreeMap<String, f64>> {
        let mut scores = BTreeMap::new();
        for id in &self.eval_sets {
            let mut test = self.data.test(id)?.clone();
            if let Some(limit) = self.settings.eval_limit {
                test.sources.truncate(limit);
                test.references.truncate(limit);
            }
            let bleu = evaluate_test_set(self.settings.exec(), &state.model, self.data, &test, self.settings.eval_beam)?;
            self.report.push(MetricsRow {
                run_id: self.run_id.clone(),
                config: self.config.clone(),
                adapt_step: self.adapt_step,
                train_step: state.train_step,
                test_set: id.clone(),
                bleu,
            })?;
            scores.insert(id.clone(), bleu);
        }
        Ok(scores)
    }

    /// Assembles the batch of one sampled task. `turn` picks the direction
    /// round-robin.
    fn assemble(&self, stage: &StageSpec, task: usize, turn: usize, rng: &mut StreamRng, mass_rng: &mut StreamRng) -> Result<TaskBatch> {
        let spec = &stage.tasks[task];
        let dir = spec.directions[turn % spec.directions.len()];
        let (in_lang, out_lang) = dir.langs();
        let n = self.settings.batch_size;
        let data = self.data;
        Ok(match spec.kind {
            TaskKind::SupervisedMT => {
                if data.general_parallel.is_empty() {
                    return Err(Error::Invalid(format!("corpus `{GENERAL_PARALLEL}` is empty")));
                }
                let examples = pick(rng, &data.general_parallel, n)
                    .into_iter()
                    .map(|(s, t)| match dir {
                        Direction::SrcToTgt => TranslationExample { src: s.clone(), tgt: t.clone(), tgt_tag: data.tgt_tag },
                        Direction::TgtToSrc => TranslationExample { src: t.clone(), tgt: s.clone(), tgt_tag: data.src_tag },
                    })
                    .collect();
                TaskBatch::Supervised { examples, domain: spec.domain.clone() }
            }
            TaskKind::Mass => {
                let side = data.mono(&spec.domain)?.side(out_lang);
                if side.is_empty() {
                    return Err(Error::Invalid(format!("corpus `{}.mono` is empty", spec.domain)));
                }
                let examples = pick(rng, side, n)
                    .into_iter()
                    .map(|s| mask_span(s, data.tag(out_lang), self.settings.mask_fraction, mass_rng))
                    .collect::<Result<_>>()?;
                TaskBatch::Mass { examples, domain: spec.domain.clone() }
            }
            TaskKind::OnlineBt => {
                let side = data.mono(&spec.domain)?.side(out_lang);
                if side.is_empty() {
                    return Err(Error::Invalid(format!("corpus `{}.mono` is empty", spec.domain)));
                }
                TaskBatch::OnlineBt {
                    mono: pick(rng, side, n).into_iter().cloned().collect(),
                    source_tag: data.tag(in_lang),
                    target_tag: data.tag(out_lang),
                    domain: spec.domain.clone(),
                }
            }
        })
    }

    /// One forward/backward/update on `batch`; returns the loss.
    fn update(
        &mut self,
        state: &mut RunState,
        adam: &mut AdamState,
        batch: &TaskBatch,
        dropout: &mut StreamRng,
    ) -> Result<f64> {
        let model = &state.model;
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape);
        let dropout = (model.config.dropout_rate > 0.0).then_some(dropout);
        let loss = match batch {
            TaskBatch::Supervised { examples, .. } => {
                if let Some(a) = self.audit.as_mut() {
                    a.inspect(TaskKind::SupervisedMT, examples);
                }
                supervised_loss(model, &mut tape, &params, examples, dropout)?
            }
            TaskBatch::Mass { examples, .. } => {
                if let Some(a) = self.audit.as_mut() {
                    a.inspect_mono(examples.len());
                }
                mass_loss(model, &mut tape, &params, examples, dropout)?
            }
            TaskBatch::OnlineBt { mono, source_tag, target_tag, .. } => {
                // Generation reads the current parameters; the update below
                // is the only thing that changes them.
                let pairs = backtranslate_batch(
                    self.settings.exec(),
                    model,
                    mono,
                    *source_tag,
                    *target_tag,
                    self.settings.bt_beam,
                    state.train_step,
                )?;
                if let Some(a) = self.audit.as_mut() {
                    let examples: Vec<_> = pairs.iter().map(|p| p.to_translation()).collect();
                    a.inspect(TaskKind::OnlineBt, &examples);
                }
                bt_loss(model, &mut tape, &params, &pairs, dropout)?
            }
        };
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: state.train_step + 1,
                loss: value,
            });
        }
        let grads = tape.backward(loss)?;
        let named = params.named_grads(&grads);
        adam_step(&mut state.model.params, &named, adam)?;
        state.train_step += 1;
        Ok(value)
    }

    /// Runs `stage.budget` updates with a fresh optimizer, evaluating every
    /// `eval_every` steps and at the end, and logs the task counts.
    pub fn run_stage(&mut self, state: &mut RunState, stage: &StageSpec) -> Result<StageOutcome> {
        stage.validate()?;
        self.settings.validate()?;
        let name = |part: &str| format!("stage{}.{part}", stage.id);
        let mut sampler_rng = substream(self.seed, &name("sampler"));
        let mut batch_rng = substream(self.seed, &name("batch"));
        let mut mass_rng = substream(self.seed, &name("mass"));
        let mut dropout_rng = substream(self.seed, &name("dropout"));
        let sampler = TaskSampler::for_stage(stage)?;
        let mut adam = AdamState::new(self.settings.adam.clone(), &state.model.params);
        let mut turns = vec![0usize; stage.tasks.len()];
        let mut counts: BTreeMap<String, usize> = stage.tasks.iter().map(|t| (t.label(), 0)).collect();
        let mut losses = Vec::with_capacity(stage.budget);
        for step in 1..=stage.budget {
            let task = sampler.sample(&mut sampler_rng);
            let batch = self.assemble(stage, task, turns[task], &mut batch_rng, &mut mass_rng)?;
            turns[task] += 1;
            *counts.get_mut(&stage.tasks[task].label()).unwrap() += 1;
            losses.push(self.update(state, &mut adam, &batch, &mut dropout_rng)?);
            if step % self.settings.eval_every == 0 || step == stage.budget {
                let scores = self.evaluate(state)?;
                log::info!(
                    "{} stage {} step {}/{} loss {:.4} bleu {:?}",
                    self.run_id,
                    stage.id,
                    step,
                    stage.budget,
                    losses.iter().rev().take(100).sum::<f64>() / losses.len().min(100) as f64,
                    scores
                );
            }
        }
        state.stages_done += 1;
        let tail = losses.len().min(100);
        self.report.push_stage(StageLog {
            run_id: self.run_id.clone(),
            config: self.config.clone(),
            adapt_step: self.adapt_step,
            stage: stage.id,
            steps: stage.budget,
            task_counts: counts.clone(),
            final_loss: losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64,
        });
        Ok(StageOutcome {
            losses,
            task_counts: counts,
        })
    }

    /// Folds [`Self::run_stage`] over `stages`, calling `on_stage_end` after
    /// each (e.g. to checkpoint).
    pub fn run_stages(
        &mut self,
        state: &mut RunState,
        stages: &[StageSpec],
        mut on_stage_end: impl FnMut(&StageSpec, &RunState, &Run<'a>) -> Result<()>,
    ) -> Result<Vec<StageOutcome>> {
        let mut outcomes = Vec::with_capacity(stages.len());
        for stage in stages {
            outcomes.push(self.run_stage(state, stage)?);
            on_stage_end(stage, state, self)?;
        }
        Ok(outcomes)
    }
}

/// Everything a configuration or adaptation run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    pub model: TransformerConfig,
    pub budgets: Budgets,
    pub weights: JointWeights,
    pub train: TrainSettings,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            seed: 1,
            model: TransformerConfig::default(),
            budgets: Budgets::default(),
            weights: JointWeights::default(),
            train: TrainSettings::default(),
        }
    }
}

/// Output of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: RunState,
    pub report: MetricsReport,
    pub audit: Option<UnsupervisedAudit>,
    pub outcomes: Vec<StageOutcome>,
}

/// Expands `config` and trains it from scratch. With `audit`, every
/// training batch is checked against the unsupervised contract.
pub fn run_config(
    config: ConfigId,
    data: &EncodedData,
    domains: &[String],
    spec: &RunSpec,
    run_id: &str,
    audit: bool,
    on_stage_end: impl FnMut(&StageSpec, &RunState, &Run<'_>) -> Result<()>,
) -> Result<RunOutput> {
    let stages = expand_config(config, &data.corpus_ids(), domains, &spec.budgets, &spec.weights)?;
    let model = init_model(&model_config_for(data, &spec.model), spec.seed)?;
    let mut state = RunState {
        model,
        train_step: 0,
        stages_done: 0,
    };
    let mut run = Run::new(data, &spec.train, spec.seed, run_id, &config.to_string(), eval_sets_for(data, domains)?);
    if audit {
        run.audit = Some(UnsupervisedAudit::new(data)?);
    }
    let outcomes = run.run_stages(&mut state, &stages, on_stage_end)?;
    Ok(RunOutput {
        state,
        report: run.report,
        audit: run.audit,
        outcomes,
    })
}

/// Adapts the general model in `base` along `plan`. Step `k` (1-based in
/// the report's `adapt_step`) runs one joint stage on the step's domains;
/// after each step the general and every plan domain's test sets are
/// scored. `base.stages_done` numbers the stages, so a one-domain plan
/// reproduces the final stage of S4 exactly. Returns the state after each
/// step.
pub fn adapt(
    plan: &AdaptationPlan,
    base: &RunState,
    data: &EncodedData,
    spec: &RunSpec,
    run_id: &str,
    audit: bool,
) -> Result<(Vec<RunState>, MetricsReport, Option<UnsupervisedAudit>)> {
    plan.validate()?;
    let available = data.corpus_ids();
    let domains = plan.domains();
    for d in &domains {
        data.mono(d)?;
    }
    let mut run = Run::new(data, &spec.train, spec.seed, run_id, &format!("adapt:{plan}"), eval_sets_for(data, &domains)?);
    if audit {
        run.audit = Some(UnsupervisedAudit::new(data)?);
    }
    let first_stage = base.stages_done;
    let mut state = base.clone();
    run.evaluate(&state)?;
    let mut states = Vec::with_capacity(plan.steps.len());
    for k in 0..plan.steps.len() {
        let stage = plan.stage(k, first_stage, spec.budgets.joint, &spec.weights, &available)?;
        run.adapt_step = k + 1;
        run.run_stage(&mut state, &stage)?;
        states.push(state.clone());
    }
    Ok((states, run.report, run.audit))
}
