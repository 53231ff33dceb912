use rand::Rng;

use super::*;
use crate::rng::substream;

/// Independent scorer: n-grams as owned token vectors, clipped counts by
/// linear scans, and the product form of the geometric mean.
fn oracle_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let grams = |s: &str, n: usize| -> Vec<Vec<String>> {
        let t: Vec<String> = s.split_whitespace().map(String::from).collect();
        if t.len() < n {
            return vec![];
        }
        (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
    };
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut h_len, mut r_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        h_len += h.split_whitespace().count();
        r_len += r.split_whitespace().count();
        for n in 1..=4 {
            let hg = grams(h, n);
            let rg = grams(r, n);
            den[n - 1] += hg.len();
            let mut distinct: Vec<&Vec<String>> = Vec::new();
            for g in &hg {
                if !distinct.contains(&g) {
                    distinct.push(g);
                }
            }
            for g in distinct {
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                num[n - 1] += in_h.min(in_r);
            }
        }
    }
    if num.contains(&0) {
        return 0.0;
    }
    let product: f64 = (0..4).map(|i| num[i] as f64 / den[i] as f64).product();
    let bp = if h_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / h_len as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

fn random_sentence(rng: &mut crate::rng::StreamRng) -> String {
    let len = rng.random_range(0..=8);
    (0..len).map(|_| format!("w{}", rng.random_range(0..5))).collect::<Vec<_>>().join(" ")
}

#[test]
fn identity_scores_100() {
    let refs = vec!["a b c d".to_string(), "e f g h i".to_string()];
    assert_eq!(corpus_bleu(&refs, &refs).unwrap(), 100.0);
    assert_eq!(sentence_bleu("a b c d e", "a b c d e"), 100.0);
}

#[test]
fn no_four_gram_match_scores_zero() {
    assert_eq!(corpus_bleu(&["a b c d"], &["a b c e"]).unwrap(), 0.0);
}

#[test]
fn two_sentence_corpus_matches_hand_computation_and_oracle() {
    let hyps = vec!["a b c d e".to_string(), "x y z".to_string()];
    let refs = vec!["a b c d f".to_string(), "x y w q".to_string()];
    // p = 6/8, 4/6, 2/4, 1/2; lengths 8 vs 9.
    let hand = 100.0 * (-0.125f64).exp() * 0.125f64.powf(0.25);
    let main = corpus_bleu(&hyps, &refs).unwrap();
    assert!((main - hand).abs() < 1e-9, "{main} vs {hand}");
    assert!((main - oracle_bleu(&hyps, &refs)).abs() < 1e-9);
}

#[test]
fn main_scorer_matches_oracle_on_random_corpora() {
    let mut rng = substream(11, "bleu");
    let mut nonzero = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=6);
        let refs: Vec<String> = (0..n).map(|_| random_sentence(&mut rng)).collect();
        // Half the corpora perturb the references so that high-order
        // matches occur; the rest are independent draws.
        let hyps: Vec<String> = if rng.random_bool(0.5) {
            refs.iter()
                .map(|r| {
                    r.split(' ')
                        .filter(|t| !t.is_empty())
                        .map(|t| if rng.random_bool(0.2) { format!("w{}", rng.random_range(0..5)) } else { t.to_string() })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect()
        } else {
            (0..n).map(|_| random_sentence(&mut rng)).collect()
        };
        let main = corpus_bleu(&hyps, &refs).unwrap();
        let oracle = oracle_bleu(&hyps, &refs);
        assert!((main - oracle).abs() < 1e-9, "{hyps:?} / {refs:?}: {main} vs {oracle}");
        assert!((0.0..=100.0).contains(&main));
        nonzero += usize::from(main > 0.0);
    }
    assert!(nonzero >= 20, "only {nonzero} corpora had a nonzero score");
}

#[test]
fn stats_are_additive_and_order_free() {
    let mut rng = substream(12, "bleu");
    let hyps: Vec<String> = (0..30).map(|_| random_sentence(&mut rng)).collect();
    let refs: Vec<String> = (0..30).map(|_| random_sentence(&mut rng)).collect();
    let whole = corpus_stats(&hyps, &refs).unwrap();
    let parts = corpus_stats(&hyps[..11], &refs[..11]).unwrap() + corpus_stats(&hyps[11..], &refs[11..]).unwrap();
    assert_eq!(whole, parts);
    assert_eq!(whole.bleu(), parts.bleu());
    for i in 0..4 {
        assert!(whole.matches[i] <= whole.totals[i]);
    }
    let mut idx: Vec<usize> = (0..30).collect();
    idx.reverse();
    idx.swap(3, 17);
    let ph: Vec<&String> = idx.iter().map(|&i| &hyps[i]).collect();
    let pr: Vec<&String> = idx.iter().map(|&i| &refs[i]).collect();
    assert_eq!(corpus_bleu(&ph, &pr).unwrap(), corpus_bleu(&hyps, &refs).unwrap());
}

#[test]
fn invalid_corpora_are_rejected() {
    let empty: [&str; 0] = [];
    assert!(corpus_bleu(&empty, &empty).is_err());
    assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
}

#[test]
fn sentence_bleu_smooths_higher_orders() {
    // p1 = 3/4 unsmoothed; p2..p4 = 3/4, 2/3, 1/2 after add-one.
    let hand = 100.0 * (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    assert!((sentence_bleu("a b c d", "a b c e") - hand).abs() < 1e-9);
    assert_eq!(sentence_bleu("", "a b"), 0.0);
    assert_eq!(sentence_bleu("x", "a b"), 0.0);
}

fn row(run: &str, config: &str, step: usize, set: &str, bleu: f64) -> MetricsRow {
    MetricsRow {
        run_id: run.into(),
        config: config.into(),
        adapt_step: 0,
        train_step: step,
        test_set: set.into(),
        bleu,
    }
}

fn two_config_report() -> MetricsReport {
    let mut r = MetricsReport::new();
    for (run, cfg, a, g) in [("r1", "S4", 30.25, 60.0), ("r2", "Baseline", 10.0, 61.5)] {
        r.push(row(run, cfg, 500, "A.src-tgt", a / 2.0)).unwrap();
        r.push(row(run, cfg, 500, "general.src-tgt", g - 5.0)).unwrap();
        r.push(row(run, cfg, 1000, "A.src-tgt", a)).unwrap();
        r.push(row(run, cfg, 1000, "A.tgt-src", a + 1.0)).unwrap();
        r.push(row(run, cfg, 1000, "general.src-tgt", g)).unwrap();
    }
    r
}

#[test]
fn empty_report_is_header_only() {
    assert_eq!(MetricsReport::new().to_csv().unwrap(), format!("{CSV_HEADER}\n"));
}

#[test]
fn csv_round_trips_exactly() {
    let mut r = two_config_report();
    r.push(row("r3", "S1", 7, "B.src-tgt", 1.0 / 3.0)).unwrap();
    let back = MetricsReport::from_csv(&r.to_csv().unwrap()).unwrap();
    assert_eq!(back.rows(), r.rows());
    assert!(MetricsReport::from_csv("a,b\n").is_err());
}

#[test]
fn duplicate_rows_are_rejected() {
    let mut r = two_config_report();
    assert!(r.push(row("r1", "S4", 1000, "A.src-tgt", 0.0)).is_err());
}

#[test]
fn json_summary_lists_every_config() {
    let r = two_config_report();
    let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    let summary = json["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0]["config"], "S4");
    assert_eq!(summary[0]["display"], "30.8 (60.0)");
    assert_eq!(summary[1]["config"], "Baseline");
    assert_eq!(json["rows"].as_array().unwrap().len(), 10);
}

#[test]
fn forgetting_delta_uses_final_checkpoints() {
    let r = two_config_report();
    let own = r.forgetting_delta("r1", "r1").unwrap();
    assert!(own.values().all(|&d| d == 0.0));
    let d = r.forgetting_delta("r1", "r2").unwrap();
    assert_eq!(d["A.src-tgt"], 20.25);
    assert_eq!(d["general.src-tgt"], -1.5);
    let mut partial = r.clone();
    partial.push(row("r4", "S1", 3, "A.src-tgt", 1.0)).unwrap();
    assert!(matches!(partial.forgetting_delta("r4", "r1"), Err(crate::Error::MissingTestSet(_))));
    assert!(r.forgetting_delta("nope", "r1").is_err());
}

#[test]
fn reports_are_written_in_every_format() {
    let dir = tempfile::tempdir().unwrap();
    let r = two_config_report();
    let paths = emit_report(&r, &[ReportFormat::Csv, ReportFormat::Json, ReportFormat::PlotCsv], dir.path()).unwrap();
    assert_eq!(paths.len(), 3);
    let curves = std::fs::read_to_string(&paths[2]).unwrap();
    assert_eq!(curves.lines().next().unwrap(), "run_id,adapt_step,train_step,A.src-tgt,A.tgt-src,general.src-tgt");
    assert_eq!(curves.lines().count(), 5);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    assert!(emit_report(&r, &[ReportFormat::Csv], &blocker.join("sub")).is_err());
}
