//! The finite-difference suite behind `grad-check`: every kernel plus a
//! one-layer transformer.

use crate::autodiff::gradcheck::{grad_check_with_fault, kernel_cases};
use crate::autodiff::{Fault, Tape};
use crate::error::Result;
use crate::model::{Seq2SeqBatch, Seq2SeqExample, TransformerConfig, TransformerModel};
use crate::rng::substream;

pub const GRAD_CHECK_EPSILON: f64 = 1e-5;
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSuite {
    /// (case name, max relative error)
    pub cases: Vec<(String, f64)>,
    pub threshold: f64,
}

impl GradCheckSuite {
    pub fn passes(&self) -> bool {
        self.cases.iter().all(|(_, e)| *e < self.threshold)
    }

    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<24} {:>12}  result\n", "case", "max rel err");
        for (name, e) in &self.cases {
            let verdict = if *e < self.threshold { "ok" } else { "FAIL" };
            out.push_str(&format!("{name:<24} {e:>12.3e}  {verdict}\n"));
        }
        out
    }
}

fn seq_example(src: Vec<usize>, tgt: &[usize]) -> Seq2SeqExample {
    let mut dec_in = vec![crate::tokenizer::BOS_ID];
    dec_in.extend_from_slice(tgt);
    let mut targets = tgt.to_vec();
    targets.push(crate::tokenizer::EOS_ID);
    Seq2SeqExample {
        loss_mask: vec![true; targets.len()],
        src,
        dec_in,
        targets,
    }
}

/// Max relative error of a one-layer transformer's full loss gradient.
pub fn model_grad_check(epsilon: f64, fault: Option<Fault>) -> Result<f64> {
    let cfg = TransformerConfig {
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
        dropout_rate: 0.0,
        vocab_size: 7,
    };
    let model = TransformerModel::new(cfg, &mut substream(13, "init"))?;
    let batch = Seq2SeqBatch::from_examples(&[seq_example(vec![4, 5, 6, 1], &[6, 5]), seq_example(vec![5, 6], &[4, 4, 6])])?;
    let report = grad_check_with_fault(
        |tape: &mut Tape, p| {
            let logits = model.forward_on_tape(tape, p, &batch, None)?;
            tape.cross_entropy_masked(logits, &batch.targets, &batch.loss_mask)
        },
        &model.params,
        epsilon,
        fault,
    )?;
    Ok(report.max_error())
}

/// Runs every kernel case and, unless `kernels_only`, the one-layer model.
/// `fault` injects a broken backward rule into every check.
pub fn run_grad_check_suite(threshold: f64, kernels_only: bool, fault: Option<Fault>) -> Result<GradCheckSuite> {
    let mut cases = Vec::new();
    for case in kernel_cases(7) {
        let report = grad_check_with_fault(&case.program, &case.params, GRAD_CHECK_EPSILON, fault)?;
        cases.push((case.name.to_string(), report.max_error()));
    }
    if !kernels_only {
        cases.push(("transformer_1layer".to_string(), model_grad_check(GRAD_CHECK_EPSILON, fault)?));
    }
    Ok(GradCheckSuite { cases, threshold })
}
