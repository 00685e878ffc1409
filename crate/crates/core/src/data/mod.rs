//! Dialog records, the synthetic task, JSON I/O and batching.

pub mod batch;
pub mod synthetic;
pub mod visdial;
pub mod vocab;

use crate::tensor::Tensor;
pub use batch::{pad, truncate_and_batch, Batch, Limits, Padded};
pub use synthetic::{gen_scene, gen_synthetic, Scene, SyntheticTaskSpec};
pub use visdial::{load_images, load_visdial_json, save_images, save_visdial_json};
pub use vocab::{build_vocab, tokenize, Vocab};

pub const MAX_ROUNDS: usize = 10;

/// One question/answer exchange in text form.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRound {
    pub question: String,
    pub answer: String,
    pub candidates: Vec<String>,
    pub gt_index: usize,
    /// per-candidate relevance in `[0, 1]`; absent means one-hot on the gt
    pub relevance: Option<Vec<f64>>,
}

/// A dialog before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDialog {
    pub id: u64,
    pub caption: String,
    pub rounds: Vec<RawRound>,
    pub image: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gt_index: usize,
    pub relevance: Vec<f64>,
}

/// A tokenized dialog.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogRecord {
    pub dialog_id: u64,
    pub image: Option<Tensor>,
    pub caption: Vec<usize>,
    pub rounds: Vec<Round>,
}

fn encode_text(vocab: &Vocab, text: &str, limit: usize) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.truncate(limit);
    if ids.is_empty() {
        ids.push(vocab::UNK);
    }
    ids
}

/// Tokenizes `raw` with `vocab`, clipping every sequence to `limits` and
/// keeping at most [`MAX_ROUNDS`] rounds.
pub fn encode_dialogs(raw: &[RawDialog], vocab: &Vocab, limits: Limits) -> Vec<DialogRecord> {
    raw.iter()
        .map(|d| DialogRecord {
            dialog_id: d.id,
            image: d.image.clone(),
            caption: encode_text(vocab, &d.caption, limits.caption),
            rounds: d
                .rounds
                .iter()
                .take(MAX_ROUNDS)
                .map(|r| Round {
                    question: encode_text(vocab, &r.question, limits.question),
                    answer: encode_text(vocab, &r.answer, limits.answer),
                    candidates: r
                        .candidates
                        .iter()
                        .map(|c| encode_text(vocab, c, limits.answer))
                        .collect(),
                    gt_index: r.gt_index,
                    relevance: r.relevance.clone().unwrap_or_else(|| {
                        (0..r.candidates.len())
                            .map(|i| if i == r.gt_index { 1.0 } else { 0.0 })
                            .collect()
                    }),
                })
                .collect(),
        })
        .collect()
}
