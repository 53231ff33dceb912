//! Stages, configurations S1–S6, and adaptation plans as plain data.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_synth::{Direction, GENERAL};
use crate::error::{Error, Result};
use crate::objectives::TaskKind;

/// Corpus id of the general-domain parallel data.
pub const GENERAL_PARALLEL: &str = "general.parallel";

/// Corpus id of a domain's monolingual data (`general.mono`, `A.mono`, ...).
pub fn mono_corpus(domain: &str) -> String {
    format!("{domain}.mono")
}

/// One weighted task of a stage.
///
/// `directions` are the translation directions the task trains; a sampled
/// task cycles through them round-robin. For MASS a direction selects the
/// monolingual side of its output language; for back-translation `X→Y`
/// means sentences in `Y` are translated into `X` and the model is trained
/// on the resulting `X→Y` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTaskSpec {
    pub kind: TaskKind,
    pub domain: String,
    #[serde(default = "both_directions")]
    pub directions: Vec<Direction>,
    pub weight: f64,
}

fn both_directions() -> Vec<Direction> {
    Direction::BOTH.to_vec()
}

impl TrainTaskSpec {
    pub fn new(kind: TaskKind, domain: &str, weight: f64) -> Self {
        TrainTaskSpec {
            kind,
            domain: domain.to_string(),
            directions: both_directions(),
            weight,
        }
    }

    /// The corpus the task reads.
    pub fn corpus(&self) -> String {
        match self.kind {
            TaskKind::SupervisedMT => GENERAL_PARALLEL.to_string(),
            TaskKind::Mass | TaskKind::OnlineBt => mono_corpus(&self.domain),
        }
    }

    /// Short label used in task-count logs, e.g. `bt:A`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind.name(), self.domain)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Position of the stage in the run; also names its random streams.
    pub id: usize,
    pub tasks: Vec<TrainTaskSpec>,
    pub budget: usize,
    /// False only for a run's first stage, which starts from random
    /// initialization.
    pub init_from_previous: bool,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config(format!("stage {}: budget must be at least 1", self.id)));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config(format!("stage {}: no tasks", self.id)));
        }
        for t in &self.tasks {
            if !(t.weight.is_finite() && t.weight >= 0.0) {
                return Err(Error::Config(format!("stage {}: invalid weight {}", self.id, t.weight)));
            }
            if t.directions.is_empty() {
                return Err(Error::Config(format!("stage {}: task {} has no directions", self.id, t.label())));
            }
            if t.kind == TaskKind::SupervisedMT && t.domain != GENERAL {
                return Err(Error::Config(format!(
                    "stage {}: supervised data exists only for the general domain, not `{}`",
                    self.id, t.domain
                )));
            }
        }
        if self.tasks.iter().map(|t| t.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("stage {}: task weights sum to zero", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConfigId {
    /// Stages 1–2 of S4: the general model G without adaptation.
    Baseline,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl ConfigId {
    pub const ALL: [ConfigId; 7] = [
        ConfigId::Baseline,
        ConfigId::S1,
        ConfigId::S2,
        ConfigId::S3,
        ConfigId::S4,
        ConfigId::S5,
        ConfigId::S6,
    ];
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ConfigId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConfigId::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown config `{s}` (expected Baseline or S1..S6)")))
    }
}

/// Step budgets by stage role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    /// Pretraining stages (MASS, and S2's back-translation stage).
    pub pretrain: usize,
    pub supervised: usize,
    pub joint: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            pretrain: 3000,
            supervised: 5000,
            joint: 4000,
        }
    }
}

impl Budgets {
    /// Steps of a full S4 run.
    pub fn total(&self) -> usize {
        self.pretrain + self.supervised + self.joint
    }
}

/// Joint-stage task weights; the MASS and BT weights apply per domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointWeights {
    pub supervised: f64,
    pub mass: f64,
    pub bt: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        JointWeights {
            supervised: 2.0,
            mass: 1.0,
            bt: 1.0,
        }
    }
}

/// Supervised general data plus MASS and back-translation on every domain
/// in `domains`.
pub fn joint_tasks(domains: &[String], weights: &JointWeights) -> Vec<TrainTaskSpec> {
    let mut tasks = vec![TrainTaskSpec::new(TaskKind::SupervisedMT, GENERAL, weights.supervised)];
    for d in domains {
        tasks.push(TrainTaskSpec::new(TaskKind::Mass, d, weights.mass));
        tasks.push(TrainTaskSpec::new(TaskKind::OnlineBt, d, weights.bt));
    }
    tasks
}

fn per_domain(kind: TaskKind, domains: &[String]) -> Vec<TrainTaskSpec> {
    domains.iter().map(|d| TrainTaskSpec::new(kind, d, 1.0)).collect()
}

/// Expands a configuration into its stages for adapting to `domains`.
/// `available` lists the corpus ids present in the dataset.
///
/// | config   | stages |
/// |----------|--------|
/// | Baseline | MASS(general mono) → supervised(general) |
/// | S1       | MASS(domain mono) → supervised(general) |
/// | S2       | MASS(domain mono) → BT(domain mono) → supervised(general) |
/// | S3       | MASS(general mono) → joint |
/// | S4       | MASS(general mono) → supervised(general) → joint |
/// | S5       | supervised(general) → joint |
/// | S6       | joint from random initialization |
///
/// where joint = supervised(general) + MASS(domain) + BT(domain). S6's
/// single stage gets the whole S4 budget so the two are compared at equal
/// compute.
pub fn expand_config(
    config: ConfigId,
    available: &BTreeSet<String>,
    domains: &[String],
    budgets: &Budgets,
    weights: &JointWeights,
) -> Result<Vec<StageSpec>> {
    if domains.is_empty() {
        return Err(Error::Config(format!("{config}: no adaptation domains given")));
    }
    let mass_general = || vec![TrainTaskSpec::new(TaskKind::Mass, GENERAL, 1.0)];
    let supervised = || vec![TrainTaskSpec::new(TaskKind::SupervisedMT, GENERAL, 1.0)];
    let joint = || joint_tasks(domains, weights);
    use ConfigId::*;
    let layout: Vec<(Vec<TrainTaskSpec>, usize)> = match config {
        Baseline => vec![(mass_general(), budgets.pretrain), (supervised(), budgets.supervised)],
        S1 => vec![
            (per_domain(TaskKind::Mass, domains), budgets.pretrain),
            (supervised(), budgets.supervised),
        ],
        S2 => vec![
            (per_domain(TaskKind::Mass, domains), budgets.pretrain),
            (per_domain(TaskKind::OnlineBt, domains), budgets.pretrain),
            (supervised(), budgets.supervised),
        ],
        S3 => vec![(mass_general(), budgets.pretrain), (joint(), budgets.joint)],
        S4 => vec![
            (mass_general(), budgets.pretrain),
            (supervised(), budgets.supervised),
            (joint(), budgets.joint),
        ],
        S5 => vec![(supervised(), budgets.supervised), (joint(), budgets.joint)],
        S6 => vec![(joint(), budgets.total())],
    };
    let stages: Vec<StageSpec> = layout
        .into_iter()
        .enumerate()
        .map(|(id, (tasks, budget))| StageSpec {
            id,
            tasks,
            budget,
            init_from_previous: id > 0,
        })
        .collect();
    for s in &stages {
        for t in &s.tasks {
            let corpus = t.corpus();
            if !available.contains(&corpus) {
                return Err(Error::MissingCorpus {
                    config: config.to_string(),
                    stage: s.id,
                    corpus,
                });
            }
        }
        s.validate()?;
    }
    Ok(stages)
}

/// Adaptation of a general model G: each step jointly adapts to a set of
/// domains, starting from the previous step's parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationPlan {
    pub steps: Vec<Vec<String>>,
}

impl AdaptationPlan {
    /// Parses `A,B` (simultaneous), `A->B` (sequential) or mixtures such as
    /// `A,B->C`.
    pub fn parse(text: &str) -> Result<Self> {
        let steps = text
            .split("->")
            .map(|step| step.split(',').map(|d| d.trim().to_string()).filter(|d| !d.is_empty()).collect())
            .collect();
        let plan = AdaptationPlan { steps };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("adaptation plan has no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::Config(format!("adaptation step {} has no domains", i + 1)));
            }
            let distinct: BTreeSet<&String> = step.iter().collect();
            if distinct.len() != step.len() {
                return Err(Error::Config(format!("adaptation step {} repeats a domain", i + 1)));
            }
            if step.iter().any(|d| d == GENERAL) {
                return Err(Error::Config("the general domain cannot be an adaptation target".into()));
            }
        }
        Ok(())
    }

    /// Every domain mentioned, in first-mention order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for d in self.steps.iter().flatten() {
            if !out.contains(d) {
                out.push(d.clone());
            }
        }
        out
    }

    /// The joint stage of adaptation step `index`. `first_stage_id` is the
    /// number of stages that produced G, so step 0 of a single-domain plan
    /// is exactly the third stage of S4.
    pub fn stage(
        &self,
        index: usize,
        first_stage_id: usize,
        budget: usize,
        weights: &JointWeights,
        available: &BTreeSet<String>,
    ) -> Result<StageSpec> {
        let domains = &self.steps[index];
        for d in domains {
            if !available.contains(&mono_corpus(d)) {
                return Err(Error::UnknownDomain(d.clone()));
            }
        }
        let stage = StageSpec {
            id: first_stage_id + index,
            tasks: joint_tasks(domains, weights),
            budget,
            init_from_previous: true,
        };
        stage.validate()?;
        Ok(stage)
    }
}

impl fmt::Display for AdaptationPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let steps: Vec<String> = self.steps.iter().map(|s| s.join(",")).collect();
        write!(f, "{}", steps.join("->"))
    }
}
