//! The three training objectives: supervised translation, MASS masked-span
//! reconstruction, and online back-translation.
//!
//! Sentences are handled as *content* ids (no language tag, no eos). Every
//! objective lowers its examples to [`Seq2SeqExample`]s whose encoder input
//! is `[tag] + source + [eos]`, where `tag` names the language the decoder
//! must produce.

use rand::Rng;

use crate::autodiff::kernels::Exec;
use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{decode_batch_by, Seq2SeqBatch, Seq2SeqExample, TransformerModel};
use crate::rng::StreamRng;
use crate::tokenizer::{BOS_ID, EOS_ID, MASK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum TaskKind {
    SupervisedMT,
    #[serde(rename = "MASS")]
    Mass,
    #[serde(rename = "OnlineBT")]
    OnlineBt,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::SupervisedMT, TaskKind::Mass, TaskKind::OnlineBt];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SupervisedMT => "supervised",
            TaskKind::Mass => "mass",
            TaskKind::OnlineBt => "bt",
        }
    }
}

/// Source/target content ids plus the tag of the target language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationExample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub tgt_tag: usize,
}

/// Encoder input for translating `src` into the language of `tag`.
pub fn encoder_input(tag: usize, src: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(src.len() + 2);
    ids.push(tag);
    ids.extend_from_slice(src);
    ids.push(EOS_ID);
    ids
}

impl TranslationExample {
    /// Teacher forcing: decoder reads `[bos] + tgt`, predicts `tgt + [eos]`.
    pub fn to_seq2seq(&self) -> Seq2SeqExample {
        let mut dec_in = Vec::with_capacity(self.tgt.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(&self.tgt);
        let mut targets = self.tgt.clone();
        targets.push(EOS_ID);
        Seq2SeqExample {
            src: encoder_input(self.tgt_tag, &self.src),
            loss_mask: vec![true; targets.len()],
            dec_in,
            targets,
        }
    }
}

/// One sentence with a contiguous masked span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MassExample {
    /// Content ids with the span replaced by the mask id.
    pub encoder_input: Vec<usize>,
    /// One entry per content position: the mask id outside the span; inside
    /// it, the mask id as start symbol followed by the span shifted right.
    pub decoder_input: Vec<usize>,
    /// The original span tokens.
    pub decoder_target: Vec<usize>,
    /// True exactly at span positions.
    pub loss_mask: Vec<bool>,
    pub span_start: usize,
    pub span_len: usize,
    /// Language tag of the sentence (the decoder reconstructs the same
    /// language).
    pub tag: usize,
}

/// Masks a random contiguous span of `ids` covering
/// `max(1, round(fraction · len))` tokens.
pub fn mask_span(ids: &[usize], tag: usize, mask_fraction: f64, rng: &mut impl Rng) -> Result<MassExample> {
    if ids.is_empty() {
        return Err(Error::Invalid("cannot mask an empty sentence".into()));
    }
    if !(mask_fraction > 0.0 && mask_fraction <= 1.0) {
        return Err(Error::Invalid(format!("mask fraction {mask_fraction} not in (0, 1]")));
    }
    let n = ids.len();
    let span_len = ((mask_fraction * n as f64).round() as usize).clamp(1, n);
    let span_start = rng.random_range(0..=n - span_len);
    Ok(mass_example_at(ids, tag, span_start, span_len))
}

/// Deterministic construction for a given span.
pub fn mass_example_at(ids: &[usize], tag: usize, span_start: usize, span_len: usize) -> MassExample {
    let span = span_start..span_start + span_len;
    let mut encoder_input = ids.to_vec();
    encoder_input[span.clone()].fill(MASK_ID);
    let mut decoder_input = vec![MASK_ID; ids.len()];
    decoder_input[span_start + 1..span.end].copy_from_slice(&ids[span_start..span.end - 1]);
    let loss_mask = (0..ids.len()).map(|i| span.contains(&i)).collect();
    MassExample {
        encoder_input,
        decoder_input,
        decoder_target: ids[span].to_vec(),
        loss_mask,
        span_start,
        span_len,
        tag,
    }
}

impl MassExample {
    /// The original sentence: encoder input with the span filled back in.
    pub fn reconstruct(&self) -> Vec<usize> {
        let mut ids = self.encoder_input.clone();
        ids[self.span_start..self.span_start + self.span_len].copy_from_slice(&self.decoder_target);
        ids
    }

    pub fn to_seq2seq(&self) -> Seq2SeqExample {
        Seq2SeqExample {
            src: encoder_input(self.tag, &self.encoder_input),
            dec_in: self.decoder_input.clone(),
            targets: self.reconstruct(),
            loss_mask: self.loss_mask.clone(),
        }
    }
}

/// A back-translated training pair: model output as source, the original
/// monolingual sentence as target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoPair {
    pub pseudo_source: Vec<usize>,
    pub true_target: Vec<usize>,
    /// Tag of the generated (pseudo-source) language.
    pub source_tag: usize,
    /// Tag of the monolingual sentence's language.
    pub target_tag: usize,
    pub beam: usize,
    /// Optimizer step of the parameters that generated the pair.
    pub model_step: usize,
}

impl PseudoPair {
    pub fn to_translation(&self) -> TranslationExample {
        TranslationExample {
            src: self.pseudo_source.clone(),
            tgt: self.true_target.clone(),
            tgt_tag: self.target_tag,
        }
    }
}

/// One sampled unit of work for a training step.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    Supervised { examples: Vec<TranslationExample>, domain: String },
    Mass { examples: Vec<MassExample>, domain: String },
    /// Monolingual sentences to back-translate online; `source_tag` is the
    /// language to generate, `target_tag` the sentences' own language.
    OnlineBt { mono: Vec<Vec<usize>>, source_tag: usize, target_tag: usize, domain: String },
}

impl TaskBatch {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskBatch::Supervised { .. } => TaskKind::SupervisedMT,
            TaskBatch::Mass { .. } => TaskKind::Mass,
            TaskBatch::OnlineBt { .. } => TaskKind::OnlineBt,
        }
    }

    pub fn domain(&self) -> &str {
        match self {
            TaskBatch::Supervised { domain, .. }
            | TaskBatch::Mass { domain, .. }
            | TaskBatch::OnlineBt { domain, .. } => domain,
        }
    }
}

/// Masked token-level NLL of the teacher-forced model on `examples`.
pub fn seq2seq_nll(
    model: &TransformerModel,
    tape: &mut Tape,
    params: &BoundParams,
    examples: &[Seq2SeqExample],
    dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let batch = Seq2SeqBatch::from_examples(examples)?;
    let logits = model.forward_on_tape(tape, params, &batch, dropout)?;
    tape.cross_entropy_masked(logits, &batch.targets, &batch.loss_mask)
}

/// Teacher-forced NLL over every target token (eos included).
pub fn supervised_loss(
    model: &TransformerModel,
    tape: &mut Tape,
    params: &BoundParams,
    examples: &[TranslationExample],
    dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let lowered: Vec<_> = examples.iter().map(TranslationExample::to_seq2seq).collect();
    seq2seq_nll(model, tape, params, &lowered, dropout)
}

/// NLL of the masked spans only.
pub fn mass_loss(
    model: &TransformerModel,
    tape: &mut Tape,
    params: &BoundParams,
    examples: &[MassExample],
    dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let lowered: Vec<_> = examples.iter().map(MassExample::to_seq2seq).collect();
    seq2seq_nll(model, tape, params, &lowered, dropout)
}

/// Decoding budget for a pseudo source, leaving room for tag and eos.
pub fn bt_max_len(model: &TransformerModel, target_len: usize) -> usize {
    (target_len + 6).min(model.config.max_seq_len.saturating_sub(2)).max(1)
}

/// Translates monolingual `targets` into the `source_tag` language with the
/// given parameters. Decoding reads the parameters only — it never touches a
/// tape — so no gradient can flow through the pseudo sources.
pub fn backtranslate_batch(
    exec: Exec,
    model: &TransformerModel,
    targets: &[Vec<usize>],
    source_tag: usize,
    target_tag: usize,
    beam: usize,
    model_step: usize,
) -> Result<Vec<PseudoPair>> {
    let inputs: Vec<Vec<usize>> = targets.iter().map(|t| encoder_input(source_tag, t)).collect();
    // Encoder inputs carry a tag and an eos around the sentence.
    let decoded = decode_batch_by(exec, model, &inputs, beam, |src| bt_max_len(model, src.len() - 2))?;
    Ok(decoded
        .into_iter()
        .zip(targets)
        .map(|(mut src, tgt)| {
            if src.last() == Some(&EOS_ID) {
                src.pop();
            }
            PseudoPair {
                pseudo_source: src,
                true_target: tgt.clone(),
                source_tag,
                target_tag,
                beam,
                model_step,
            }
        })
        .collect())
}

/// Supervised loss on (pseudo source → true target).
pub fn bt_loss(
    model: &TransformerModel,
    tape: &mut Tape,
    params: &BoundParams,
    pairs: &[PseudoPair],
    dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let examples: Vec<_> = pairs.iter().map(PseudoPair::to_translation).collect();
    supervised_loss(model, tape, params, &examples, dropout)
}
