//! Training schedules: stage pipelines S1–S6, the weighted joint objective,
//! and multi-domain adaptation plans.

mod sampler;
mod spec;
mod train;

pub use sampler::TaskSampler;
pub use spec::{
    expand_config, joint_tasks, mono_corpus, AdaptationPlan, Budgets, ConfigId, JointWeights, StageSpec, TrainTaskSpec,
    GENERAL_PARALLEL,
};
pub use train::{
    adapt, eval_sets_for, init_model, model_config_for, run_config, Run, RunOutput, RunSpec, RunState, StageOutcome,
    TrainSettings,
};

#[cfg(test)]
mod tests;
