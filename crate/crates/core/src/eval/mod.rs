//! BLEU scoring, translation of test sets, and metrics reports.

mod bleu;
mod report;

pub use bleu::{corpus_bleu, corpus_stats, sentence_bleu, BleuStats, MAX_ORDER};
pub use report::{
    emit_report, is_general_test_set, MetricsReport, MetricsRow, ReportFormat, StageLog, SummaryRow, CSV_HEADER,
};

use crate::autodiff::kernels::Exec;
use crate::data_synth::{EncodedData, TestSet};
use crate::error::Result;
use crate::model::{decode_batch_by, TransformerModel};
use crate::objectives::{bt_max_len, encoder_input};
use crate::tokenizer::EOS_ID;

/// Translates every source of `test` (greedy when `beam == 1`) and returns
/// the detokenized hypotheses.
pub fn translate_test_set(
    exec: Exec,
    model: &TransformerModel,
    data: &EncodedData,
    test: &TestSet,
    beam: usize,
) -> Result<Vec<String>> {
    let (_, out_lang) = test.direction.langs();
    let tag = data.tag(out_lang);
    let inputs: Vec<Vec<usize>> = test.sources.iter().map(|s| encoder_input(tag, s)).collect();
    // Encoder inputs carry a tag and an eos around the sentence.
    let decoded = decode_batch_by(exec, model, &inputs, beam, |src| bt_max_len(model, src.len() - 2))?;
    decoded
        .into_iter()
        .map(|mut ids| {
            if ids.last() == Some(&EOS_ID) {
                ids.pop();
            }
            data.vocab.decode(&ids)
        })
        .collect()
}

/// Corpus BLEU of the model on one test set.
pub fn evaluate_test_set(
    exec: Exec,
    model: &TransformerModel,
    data: &EncodedData,
    test: &TestSet,
    beam: usize,
) -> Result<f64> {
    let hyps = translate_test_set(exec, model, data, test, beam)?;
    corpus_bleu(&hyps, &test.references)
}

#[cfg(test)]
mod tests;
