use std::collections::BTreeSet;

use rand::Rng;

use super::*;
use crate::autodiff::{adam_step, AdamState, Tape};
use crate::data_synth::{gen_dataset, synth_vocab, EncodedData, SynthLangSpec, SynthLanguage, SynthSizes};
use crate::model::TransformerConfig;
use crate::objectives::{supervised_loss, TaskKind, TranslationExample};
use crate::rng::substream;

fn domains(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn all_corpora() -> BTreeSet<String> {
    ["general.parallel", "general.mono", "A.mono", "B.mono"].iter().map(|s| s.to_string()).collect()
}

fn render(config: ConfigId, stages: &[StageSpec]) -> String {
    let mut out = format!("{config}\n");
    for s in stages {
        let tasks: Vec<String> = s.tasks.iter().map(|t| format!("{}={}", t.label(), t.weight)).collect();
        out.push_str(&format!(
            "  stage {} budget {} {}: {}\n",
            s.id,
            s.budget,
            if s.init_from_previous { "chained" } else { "fresh" },
            tasks.join(" ")
        ));
    }
    out
}

#[test]
fn expansions_match_golden_file() {
    let mut text = String::new();
    for c in ConfigId::ALL {
        let stages = expand_config(c, &all_corpora(), &domains(&["A", "B"]), &Budgets::default(), &JointWeights::default()).unwrap();
        text.push_str(&render(c, &stages));
    }
    assert_eq!(text, include_str!("golden_expansions.txt"));
}

#[test]
fn expansion_is_pure_and_reports_missing_corpora() {
    let args = (&all_corpora(), domains(&["A"]), Budgets::default(), JointWeights::default());
    let a = expand_config(ConfigId::S4, args.0, &args.1, &args.2, &args.3).unwrap();
    let b = expand_config(ConfigId::S4, args.0, &args.1, &args.2, &args.3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert_eq!(a[2].tasks.len(), 3);

    let mut missing = all_corpora();
    missing.remove("A.mono");
    match expand_config(ConfigId::S1, &missing, &args.1, &args.2, &args.3) {
        Err(crate::Error::MissingCorpus { config, stage, corpus }) => {
            assert_eq!((config.as_str(), stage, corpus.as_str()), ("S1", 0, "A.mono"));
        }
        other => panic!("expected a missing-corpus error, got {other:?}"),
    }
    assert!(expand_config(ConfigId::S4, &all_corpora(), &[], &args.2, &args.3).is_err());
}

#[test]
fn s4_and_s5_differ_only_by_mass_pretraining() {
    let e = |c| expand_config(c, &all_corpora(), &domains(&["A"]), &Budgets::default(), &JointWeights::default()).unwrap();
    let (s4, s5) = (e(ConfigId::S4), e(ConfigId::S5));
    assert_eq!(s4[0].tasks[0].kind, TaskKind::Mass);
    assert_eq!(s4[1].tasks, s5[0].tasks);
    assert_eq!(s4[2].tasks, s5[1].tasks);
}

#[test]
fn config_ids_parse() {
    assert_eq!("s4".parse::<ConfigId>().unwrap(), ConfigId::S4);
    assert_eq!("Baseline".parse::<ConfigId>().unwrap(), ConfigId::Baseline);
    assert!("S7".parse::<ConfigId>().is_err());
}

fn frequencies(weights: &[f64], n: usize, seed: u64) -> Vec<f64> {
    let s = TaskSampler::new(weights).unwrap();
    let mut rng = substream(seed, "sampler-test");
    let mut counts = vec![0usize; weights.len()];
    for i in s.iter(&mut rng).take(n) {
        counts[i] += 1;
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[test]
fn single_task_is_always_drawn() {
    assert_eq!(frequencies(&[0.3], 500, 1), vec![1.0]);
    assert_eq!(frequencies(&[0.0, 5.0], 500, 1), vec![0.0, 1.0]);
}

#[test]
fn equal_weights_split_evenly() {
    let f = frequencies(&[1.0, 1.0], 10_000, 2);
    assert!(f.iter().all(|&x| (0.485..=0.515).contains(&x)), "{f:?}");
}

#[test]
fn sampler_meets_binomial_bound_across_seeds() {
    let n = 10_000;
    let weights = [3.0, 1.0];
    let mut passes = 0;
    for seed in 0..100 {
        let f = frequencies(&weights, n, seed);
        let ok = [0.75, 0.25].iter().zip(&f).all(|(&p, &x)| (x - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt());
        passes += usize::from(ok);
    }
    assert!(passes >= 99, "{passes}/100 seeds within bound");
}

#[test]
fn invalid_weights_are_rejected() {
    assert!(TaskSampler::new(&[0.0, 0.0]).is_err());
    assert!(TaskSampler::new(&[-1.0, 2.0]).is_err());
    assert!(TaskSampler::new(&[f64::NAN]).is_err());
    assert!(TaskSampler::new(&[]).is_err());
}

#[test]
fn adaptation_plans_parse_and_validate() {
    let p = AdaptationPlan::parse("A->B").unwrap();
    assert_eq!(p.steps, vec![domains(&["A"]), domains(&["B"])]);
    assert_eq!(p.to_string(), "A->B");
    let s = AdaptationPlan::parse("A,B").unwrap();
    let stage = s.stage(0, 2, 10, &JointWeights::default(), &all_corpora()).unwrap();
    assert_eq!(stage.tasks.len(), 5);
    assert_eq!(stage.id, 2);
    assert!(AdaptationPlan { steps: vec![] }.validate().is_err());
    assert!(AdaptationPlan::parse("").is_err());
    assert!(AdaptationPlan::parse("A,A").is_err());
    assert!(AdaptationPlan::parse("general").is_err());
    assert!(matches!(
        AdaptationPlan::parse("C").unwrap().stage(0, 2, 10, &JointWeights::default(), &all_corpora()),
        Err(crate::Error::UnknownDomain(_))
    ));
}

// ---------------------------------------------------------------------------
// Training-loop tests on a tiny task.

fn tiny_data() -> EncodedData {
    let spec = SynthLangSpec {
        v_gen: 20,
        v_dom: 10,
        min_len: 3,
        max_len: 6,
        ..SynthLangSpec::default()
    };
    let sizes = SynthSizes {
        general_parallel: 200,
        general_dev: 10,
        general_test: 10,
        general_mono: 100,
        domain_mono: 100,
        domain_test: 10,
    };
    let ds = gen_dataset(&spec, &sizes).unwrap();
    EncodedData::new(&ds, synth_vocab(&SynthLanguage::new(&spec).unwrap())).unwrap()
}

fn tiny_spec() -> RunSpec {
    RunSpec {
        seed: 3,
        model: TransformerConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            dropout_rate: 0.1,
            vocab_size: 0,
        },
        budgets: Budgets {
            pretrain: 6,
            supervised: 8,
            joint: 10,
        },
        weights: JointWeights::default(),
        train: TrainSettings {
            batch_size: 4,
            eval_every: 5,
            parallel: false,
            ..TrainSettings::default()
        },
    }
}

fn fresh_state(data: &EncodedData, spec: &RunSpec) -> RunState {
    RunState {
        model: init_model(&model_config_for(data, &spec.model), spec.seed).unwrap(),
        train_step: 0,
        stages_done: 0,
    }
}

fn supervised_stage(budget: usize) -> StageSpec {
    StageSpec {
        id: 0,
        tasks: vec![TrainTaskSpec::new(TaskKind::SupervisedMT, "general", 1.0)],
        budget,
        init_from_previous: false,
    }
}

#[test]
fn budget_of_one_performs_one_update_and_zero_is_rejected() {
    let data = tiny_data();
    let spec = tiny_spec();
    let mut state = fresh_state(&data, &spec);
    let before = state.model.params.clone();
    let mut run = Run::new(&data, &spec.train, spec.seed, "r", "test", vec![]);
    let out = run.run_stage(&mut state, &supervised_stage(1)).unwrap();
    assert_eq!(out.losses.len(), 1);
    assert_eq!(state.train_step, 1);
    assert_ne!(state.model.params, before);
    assert!(run.run_stage(&mut state, &supervised_stage(0)).is_err());
}

#[test]
fn supervised_stage_equals_hand_rolled_loop() {
    let data = tiny_data();
    let spec = tiny_spec();
    let budget = 12;
    let mut state = fresh_state(&data, &spec);
    let mut run = Run::new(&data, &spec.train, spec.seed, "r", "test", vec![]);
    let traced = run.run_stage(&mut state, &supervised_stage(budget)).unwrap().losses;

    // Independent loop: same streams, alternating directions.
    let mut model = fresh_state(&data, &spec).model;
    let mut batch_rng = substream(spec.seed, "stage0.batch");
    let mut dropout_rng = substream(spec.seed, "stage0.dropout");
    let mut adam = AdamState::new(spec.train.adam.clone(), &model.params);
    let mut losses = Vec::new();
    for step in 0..budget {
        let examples: Vec<TranslationExample> = (0..spec.train.batch_size)
            .map(|_| {
                let (s, t) = &data.general_parallel[batch_rng.random_range(0..data.general_parallel.len())];
                if step % 2 == 0 {
                    TranslationExample { src: s.clone(), tgt: t.clone(), tgt_tag: data.tgt_tag }
                } else {
                    TranslationExample { src: t.clone(), tgt: s.clone(), tgt_tag: data.src_tag }
                }
            })
            .collect();
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape);
        let loss = supervised_loss(&model, &mut tape, &params, &examples, Some(&mut dropout_rng)).unwrap();
        losses.push(tape.value(loss).data()[0]);
        let grads = params.named_grads(&tape.backward(loss).unwrap());
        adam_step(&mut model.params, &grads, &mut adam).unwrap();
    }
    assert_eq!(traced, losses);
    assert_eq!(state.model.params, model.params);
}

#[test]
fn joint_stage_task_counts_follow_weights() {
    let data = tiny_data();
    let mut spec = tiny_spec();
    spec.train.batch_size = 1;
    spec.model.dropout_rate = 0.0;
    let n = 400;
    let stage = StageSpec {
        id: 2,
        tasks: joint_tasks(&domains(&["A"]), &JointWeights::default()),
        budget: n,
        init_from_previous: true,
    };
    let mut state = fresh_state(&data, &spec);
    let mut run = Run::new(&data, &spec.train, spec.seed, "r", "test", vec![]);
    let out = run.run_stage(&mut state, &stage).unwrap();
    for (label, p) in [("supervised:general", 0.5), ("mass:A", 0.25), ("bt:A", 0.25)] {
        let f = out.task_counts[label] as f64 / n as f64;
        assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{label}: {f}");
    }
    assert_eq!(out.task_counts.values().sum::<usize>(), n);
    assert_eq!(run.report.stages()[0].task_counts, out.task_counts);
}

#[test]
fn stages_chain_and_resume_bit_identically() {
    let data = tiny_data();
    let spec = tiny_spec();
    let stages = expand_config(ConfigId::S4, &data.corpus_ids(), &domains(&["A"]), &spec.budgets, &spec.weights).unwrap();
    let sets = eval_sets_for(&data, &domains(&["A"])).unwrap();

    let mut state = fresh_state(&data, &spec);
    let mut run = Run::new(&data, &spec.train, spec.seed, "r", "S4", sets.clone());
    let mut snapshots = Vec::new();
    run.run_stages(&mut state, &stages, |_, s, _| {
        snapshots.push(s.clone());
        Ok(())
    })
    .unwrap();

    // Resume from the stage-2 snapshot in a new run.
    let mut resumed = snapshots[1].clone();
    let mut run2 = Run::new(&data, &spec.train, spec.seed, "r", "S4", sets);
    run2.run_stage(&mut resumed, &stages[2]).unwrap();
    assert_eq!(resumed.model.params, state.model.params);
    assert_eq!(resumed.train_step, state.train_step);
    let tail: Vec<_> = run.report.rows().iter().filter(|r| r.train_step > snapshots[1].train_step).cloned().collect();
    assert_eq!(run2.report.rows(), &tail[..]);
}

#[test]
fn config_runs_are_deterministic_and_baseline_is_a_prefix_of_s4() {
    let data = tiny_data();
    let spec = tiny_spec();
    let a = domains(&["A"]);
    let s4 = run_config(ConfigId::S4, &data, &a, &spec, "s4", true, |_, _, _| Ok(())).unwrap();
    let again = run_config(ConfigId::S4, &data, &a, &spec, "s4", true, |_, _, _| Ok(())).unwrap();
    assert_eq!(s4.report.to_csv().unwrap(), again.report.to_csv().unwrap());
    assert_eq!(s4.state.model.params, again.state.model.params);
    assert_eq!(s4.state.stages_done, 3);
    let audit = s4.audit.unwrap();
    assert_eq!(audit.violations, 0);
    assert_eq!(audit.batches, spec.budgets.total());

    let base = run_config(ConfigId::Baseline, &data, &a, &spec, "base", false, |_, _, _| Ok(())).unwrap();
    let g_steps = spec.budgets.pretrain + spec.budgets.supervised;
    let prefix: Vec<(usize, String, f64)> = s4
        .report
        .rows()
        .iter()
        .filter(|r| r.train_step <= g_steps)
        .map(|r| (r.train_step, r.test_set.clone(), r.bleu))
        .collect();
    let baseline: Vec<(usize, String, f64)> =
        base.report.rows().iter().map(|r| (r.train_step, r.test_set.clone(), r.bleu)).collect();
    assert_eq!(prefix, baseline);
}

#[test]
fn single_domain_adaptation_reproduces_s4() {
    let data = tiny_data();
    let spec = tiny_spec();
    let a = domains(&["A"]);
    let g = run_config(ConfigId::Baseline, &data, &a, &spec, "g", false, |_, _, _| Ok(())).unwrap();
    let s4 = run_config(ConfigId::S4, &data, &a, &spec, "s4", false, |_, _, _| Ok(())).unwrap();
    let (states, report, audit) = adapt(&AdaptationPlan::parse("A").unwrap(), &g.state, &data, &spec, "ad", true).unwrap();
    assert_eq!(states[0].model.params, s4.state.model.params);
    assert_eq!(audit.unwrap().violations, 0);
    assert_eq!(report.scores_at("ad", Some(1)).unwrap(), s4.report.final_scores("s4").unwrap());
}

#[test]
fn sequential_plans_report_every_domain_after_every_step() {
    let data = tiny_data();
    let spec = tiny_spec();
    let g = run_config(ConfigId::Baseline, &data, &domains(&["A"]), &spec, "g", false, |_, _, _| Ok(())).unwrap();
    let (states, report, _) = adapt(&AdaptationPlan::parse("A->B").unwrap(), &g.state, &data, &spec, "seq", false).unwrap();
    assert_eq!(states.len(), 2);
    for step in 0..=2 {
        let scores = report.scores_at("seq", Some(step)).unwrap();
        let keys: Vec<&str> = scores.keys().map(String::as_str).collect();
        assert_eq!(keys, ["A.src-tgt", "A.tgt-src", "B.src-tgt", "B.tgt-src", "general.src-tgt", "general.tgt-src"]);
    }
    assert!(adapt(&AdaptationPlan::parse("Z").unwrap(), &g.state, &data, &spec, "bad", false).is_err());
}

#[test]
fn non_finite_loss_reports_the_step() {
    let data = tiny_data();
    let mut spec = tiny_spec();
    spec.train.adam.lr = f64::NAN;
    spec.train.adam.warmup_steps = 0;
    let mut state = fresh_state(&data, &spec);
    let mut run = Run::new(&data, &spec.train, spec.seed, "r", "test", vec![]);
    match run.run_stage(&mut state, &supervised_stage(5)) {
        Err(crate::Error::Diverged { step, .. }) => assert_eq!(step, 2),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn sequential_and_parallel_execution_agree() {
    let data = tiny_data();
    let mut spec = tiny_spec();
    let a = domains(&["A"]);
    let seq = run_config(ConfigId::S6, &data, &a, &spec, "x", false, |_, _, _| Ok(())).unwrap();
    spec.train.parallel = true;
    let par = run_config(ConfigId::S6, &data, &a, &spec, "x", false, |_, _, _| Ok(())).unwrap();
    assert_eq!(seq.report.to_csv().unwrap(), par.report.to_csv().unwrap());
    assert_eq!(seq.state.model.params, par.state.model.params);
}
