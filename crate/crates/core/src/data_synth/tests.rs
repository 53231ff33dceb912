use std::fs;

use proptest::prelude::*;

use super::*;
use crate::objectives::{TaskKind, TranslationExample};
use crate::rng::substream;

fn small_sizes() -> SynthSizes {
    SynthSizes {
        general_parallel: 200,
        general_dev: 20,
        general_test: 20,
        general_mono: 100,
        domain_mono: 80,
        domain_test: 20,
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let spec = SynthLangSpec::default();
    let a = gen_dataset(&spec, &small_sizes()).unwrap();
    let b = gen_dataset(&spec, &small_sizes()).unwrap();
    assert_eq!(a, b);
    let c = gen_dataset(&SynthLangSpec { seed: 2, ..spec }, &small_sizes()).unwrap();
    assert_ne!(a.general_train, c.general_train);
}

#[test]
fn general_corpora_contain_no_domain_tokens() {
    let spec = SynthLangSpec::default();
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &small_sizes()).unwrap();
    let general_text = ds
        .general_train
        .iter()
        .chain(&ds.general_dev)
        .chain(&ds.general_test)
        .flat_map(|(s, t)| [s, t])
        .chain(ds.general_mono.src.iter().chain(&ds.general_mono.tgt));
    for sentence in general_text {
        for tok in sentence.split(' ') {
            assert!(!lang.is_domain_token(tok), "{tok} in general data");
        }
    }
}

#[test]
fn domain_sentences_use_only_their_own_new_tokens() {
    let spec = SynthLangSpec::default();
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &small_sizes()).unwrap();
    let a_tokens: std::collections::HashSet<&str> = lang.domain_tokens("A").unwrap().into_iter().collect();
    let mono = &ds.domain_mono["A"];
    let mut seen_new = 0;
    for tok in mono.src.iter().chain(&mono.tgt).flat_map(|s| s.split(' ')) {
        if lang.is_domain_token(tok) {
            assert!(a_tokens.contains(tok), "{tok} leaked into domain A");
            seen_new += 1;
        }
    }
    assert!(seen_new > 0);
}

#[test]
fn new_token_rate_matches_f_new() {
    let spec = SynthLangSpec {
        f_new: 0.3,
        ..SynthLangSpec::default()
    };
    let sizes = SynthSizes {
        domain_mono: 1000,
        domain_test: 200,
        ..small_sizes()
    };
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &sizes).unwrap();
    for d in &spec.domains {
        let (new, total) = ds.domain_token_stats[d];
        let sigma = (total as f64 * spec.f_new * (1.0 - spec.f_new)).sqrt();
        let expected = total as f64 * spec.f_new;
        assert!(
            (new as f64 - expected).abs() <= 3.0 * sigma,
            "{d}: {new} new of {total}, expected {expected} ± {}",
            3.0 * sigma
        );
        // The surface text agrees with the counter on the source side.
        let surface_new: usize = ds.domain_mono[d]
            .src
            .iter()
            .chain(ds.domain_test[d].iter().map(|(s, _)| s))
            .flat_map(|s| s.split(' '))
            .filter(|t| lang.is_domain_token(t))
            .count();
        assert!(surface_new <= new);
    }
}

#[test]
fn oracle_inverse_recovers_the_source() {
    let spec = SynthLangSpec {
        swap_window: 3,
        ..SynthLangSpec::default()
    };
    let lang = SynthLanguage::new(&spec).unwrap();
    let mut rng = substream(5, "test");
    for domain in [GENERAL, "A", "B"] {
        for _ in 0..1000 / 3 + 1 {
            let ((src, tgt), _) = lang.sample_pair(domain, &mut rng).unwrap();
            assert_eq!(lang.oracle_translate(&src).unwrap(), tgt);
            assert_eq!(lang.oracle_inverse(&tgt).unwrap(), src);
        }
    }
}

#[test]
fn oracle_handles_empty_and_single_token_sentences() {
    let lang = SynthLanguage::new(&SynthLangSpec::default()).unwrap();
    assert_eq!(lang.oracle_translate("").unwrap(), "");
    let t = lang.oracle_translate("s0").unwrap();
    assert_eq!(t.split(' ').count(), 1);
    assert!(t.starts_with('t'));
    assert_eq!(lang.oracle_inverse(&t).unwrap(), "s0");
    assert!(matches!(lang.oracle_translate("zz"), Err(crate::Error::UnknownToken(_))));
}

proptest! {
    #[test]
    fn reorder_is_an_involution(v in prop::collection::vec(0u32..100, 0..30), w in 1usize..6) {
        let mut x = v.clone();
        reorder(&mut x, w);
        reorder(&mut x, w);
        prop_assert_eq!(x, v);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SynthLangSpec { min_len: 0, ..Default::default() },
        SynthLangSpec { min_len: 9, max_len: 3, ..Default::default() },
        SynthLangSpec { f_new: 1.5, ..Default::default() },
        SynthLangSpec { swap_window: 0, ..Default::default() },
        SynthLangSpec { domains: vec!["general".into()], ..Default::default() },
        SynthLangSpec { domains: vec!["A".into(), "A".into()], ..Default::default() },
    ];
    for spec in bad {
        assert!(SynthLanguage::new(&spec).is_err(), "{spec:?}");
    }
    assert!(gen_dataset(&SynthLangSpec::default(), &SynthSizes { domain_test: 0, ..small_sizes() }).is_err());
}

#[test]
fn domain_test_sets_are_disjoint_from_monolingual_data() {
    let ds = gen_dataset(&SynthLangSpec::default(), &small_sizes()).unwrap();
    for (d, test) in &ds.domain_test {
        let mono = &ds.domain_mono[d];
        for (s, t) in test {
            assert!(!mono.src.contains(s));
            assert!(!mono.tgt.contains(t));
        }
    }
    let train: std::collections::HashSet<_> = ds.general_train.iter().map(|p| &p.0).collect();
    assert!(ds.general_test.iter().all(|(s, _)| !train.contains(s)));
}

#[test]
fn domain_test_pairs_never_appear_in_general_parallel_data() {
    // Short sentences and a low new-token rate make domain sentences that
    // look general common; they must still never collide with general pairs.
    let spec = SynthLangSpec {
        v_gen: 10,
        v_dom: 10,
        min_len: 1,
        max_len: 2,
        f_new: 0.1,
        ..SynthLangSpec::default()
    };
    let sizes = SynthSizes {
        general_parallel: 60,
        general_dev: 3,
        general_test: 3,
        general_mono: 10,
        domain_mono: 10,
        domain_test: 8,
    };
    for seed in 0..20 {
        let ds = gen_dataset(&SynthLangSpec { seed, ..spec.clone() }, &sizes).unwrap();
        let general: std::collections::HashSet<_> =
            ds.general_train.iter().chain(&ds.general_dev).chain(&ds.general_test).collect();
        for test in ds.domain_test.values() {
            assert!(test.iter().all(|p| !general.contains(p)), "seed {seed}");
        }
    }
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = vec!["a b".into(), "c".into(), "d e f".into()];
    let p = dir.path().join("x/lines.txt");
    save_lines(&p, &lines).unwrap();
    assert_eq!(load_corpus(&p, CorpusFormat::Lines).unwrap(), Corpus::Lines(lines));
    let pairs: Pairs = vec![("a b".into(), "c".into()), ("d".into(), "e f".into())];
    let q = dir.path().join("pairs.tsv");
    save_pairs(&q, &pairs).unwrap();
    assert_eq!(load_corpus(&q, CorpusFormat::TsvPairs).unwrap().into_pairs().unwrap(), pairs);
}

#[test]
fn corpus_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    assert!(load_corpus(&empty, CorpusFormat::Lines).unwrap().is_empty());

    let three = dir.path().join("three.txt");
    fs::write(&three, "one\ntwo  \nthree").unwrap();
    assert_eq!(
        load_corpus(&three, CorpusFormat::Lines).unwrap().into_lines().unwrap(),
        vec!["one", "two", "three"]
    );

    let blank = dir.path().join("blank.txt");
    fs::write(&blank, "one\n\nthree\n").unwrap();
    match load_corpus(&blank, CorpusFormat::Lines) {
        Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }

    let bad = dir.path().join("bad.tsv");
    fs::write(&bad, "a\tb\nc d\n").unwrap();
    match load_corpus(&bad, CorpusFormat::TsvPairs) {
        Err(crate::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(save_pairs(&bad, &[("a\tb".into(), "c".into())]).is_err());
    assert!(load_corpus(&dir.path().join("missing"), CorpusFormat::Lines).is_err());
}

#[test]
fn dataset_directory_round_trips() {
    let spec = SynthLangSpec::default();
    let sizes = small_sizes();
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &sizes).unwrap();
    let vocab = synth_vocab(&lang);
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = ds.save(dir.path(), &vocab, Some((&spec, &sizes))).unwrap();
    let (manifest, loaded, loaded_vocab) = DomainDataset::load(&manifest_path).unwrap();
    assert_eq!(manifest.domains, vec!["A", "B"]);
    assert_eq!(manifest.synth.as_ref(), Some(&spec));
    assert_eq!(loaded.general_train, ds.general_train);
    assert_eq!(loaded.domain_mono, ds.domain_mono);
    assert_eq!(loaded.domain_test, ds.domain_test);
    assert_eq!(loaded_vocab.len(), vocab.len());
    assert_eq!(vocab.len(), 6 + 2 * (spec.v_gen + 2 * spec.v_dom));
}

#[test]
fn encoded_data_exposes_both_directions() {
    let spec = SynthLangSpec::default();
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &small_sizes()).unwrap();
    let data = EncodedData::new(&ds, synth_vocab(&lang)).unwrap();
    let ids: Vec<&str> = data.tests.keys().map(String::as_str).collect();
    assert_eq!(
        ids,
        vec!["A.src-tgt", "A.tgt-src", "B.src-tgt", "B.tgt-src", "general.src-tgt", "general.tgt-src"]
    );
    let t = data.test("A.tgt-src").unwrap();
    assert_eq!(data.vocab.decode(&t.sources[0]).unwrap(), ds.domain_test["A"][0].1);
    assert_eq!(t.references[0], ds.domain_test["A"][0].0);
    assert!(data.test("C.src-tgt").is_err());
    assert!(data.mono("C").is_err());
    assert_eq!(data.max_encoded_len(), spec.max_len + 2);
}

#[test]
fn audit_flags_test_pairs_and_supervised_domain_tokens() {
    let spec = SynthLangSpec::default();
    let lang = SynthLanguage::new(&spec).unwrap();
    let ds = gen_dataset(&spec, &small_sizes()).unwrap();
    let data = EncodedData::new(&ds, synth_vocab(&lang)).unwrap();
    let mut audit = UnsupervisedAudit::new(&data).unwrap();
    let n = audit.domain_token_count();
    // Rare general tokens can be absent from small general corpora, so the
    // count may slightly exceed the true new-token inventory.
    assert!(n >= 2 * spec.v_dom && n <= 2 * 2 * spec.v_dom + 10, "{n} domain ids");

    let general: Vec<TranslationExample> = data
        .general_parallel
        .iter()
        .take(10)
        .map(|(s, t)| TranslationExample { src: s.clone(), tgt: t.clone(), tgt_tag: data.tgt_tag })
        .collect();
    audit.inspect(TaskKind::SupervisedMT, &general);
    assert_eq!(audit.violations, 0);

    // Back-translation on monolingual domain text is fine...
    let mono = &data.mono("A").unwrap().tgt;
    let bt: Vec<TranslationExample> = mono
        .iter()
        .take(10)
        .map(|t| TranslationExample { src: vec![7, 8], tgt: t.clone(), tgt_tag: data.tgt_tag })
        .collect();
    audit.inspect(TaskKind::OnlineBt, &bt);
    assert_eq!(audit.violations, 0);
    // ...but not as supervised data, and never a real test pair.
    audit.inspect(TaskKind::SupervisedMT, &bt[..1]);
    assert_eq!(audit.violations, 1);
    let test = data.test("A.src-tgt").unwrap();
    let leak = TranslationExample {
        src: test.sources[0].clone(),
        tgt: data.vocab.encode(&test.references[0], None).unwrap()[..test.sources[0].len()].to_vec(),
        tgt_tag: data.tgt_tag,
    };
    audit.inspect(TaskKind::OnlineBt, &[leak]);
    assert_eq!(audit.violations, 2);
    assert_eq!(audit.batches, 4);
    assert_eq!(audit.examples, 22);
}
