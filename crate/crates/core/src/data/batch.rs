use super::vocab::PAD;
use super::DialogRecord;

/// Maximum caption, question and answer lengths in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub caption: usize,
    pub question: usize,
    pub answer: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            caption: 24,
            question: 16,
            answer: 8,
        }
    }
}

/// Right-padded token matrix with the true length of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Padded {
    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

pub fn pad(seqs: &[Vec<usize>]) -> Padded {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    Padded {
        ids: seqs
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, PAD);
                row
            })
            .collect(),
        lengths: seqs.iter().map(Vec::len).collect(),
    }
}

/// Records of one minibatch with padded caption matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<DialogRecord>,
    pub captions: Padded,
}

impl Batch {
    /// Padded questions of round `r` (dialogs lacking it contribute nothing).
    pub fn questions(&self, r: usize) -> Padded {
        let q: Vec<Vec<usize>> = self
            .records
            .iter()
            .filter_map(|d| d.rounds.get(r))
            .map(|x| x.question.clone())
            .collect();
        pad(&q)
    }

    pub fn answers(&self, r: usize) -> Padded {
        let a: Vec<Vec<usize>> = self
            .records
            .iter()
            .filter_map(|d| d.rounds.get(r))
            .map(|x| x.answer.clone())
            .collect();
        pad(&a)
    }
}

fn clip(mut v: Vec<usize>, n: usize) -> Vec<usize> {
    v.truncate(n);
    v
}

/// Clips every sequence to `limits` and groups records into batches of
/// `batch_size` (the last one may be short).
pub fn truncate_and_batch(
    records: &[DialogRecord],
    limits: Limits,
    batch_size: usize,
) -> Vec<Batch> {
    let size = batch_size.max(1);
    records
        .chunks(size)
        .map(|chunk| {
            let recs: Vec<DialogRecord> = chunk
                .iter()
                .map(|d| {
                    let mut d = d.clone();
                    d.caption = clip(d.caption, limits.caption);
                    for r in &mut d.rounds {
                        r.question = clip(std::mem::take(&mut r.question), limits.question);
                        r.answer = clip(std::mem::take(&mut r.answer), limits.answer);
                        for c in &mut r.candidates {
                            c.truncate(limits.answer);
                        }
                    }
                    d
                })
                .collect();
            let captions = pad(&recs.iter().map(|d| d.caption.clone()).collect::<Vec<_>>());
            Batch {
                records: recs,
                captions,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Round;

    fn record(answer_len: usize) -> DialogRecord {
        DialogRecord {
            dialog_id: 0,
            image: None,
            caption: vec![5; 3],
            rounds: vec![Round {
                question: vec![6; 20],
                answer: vec![7; answer_len],
                candidates: vec![vec![7; answer_len]],
                gt_index: 0,
                relevance: vec![1.0],
            }],
        }
    }

    #[test]
    fn answer_clipping() {
        let b = truncate_and_batch(&[record(8), record(9)], Limits::default(), 4);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].records[0].rounds[0].answer.len(), 8);
        assert_eq!(b[0].records[1].rounds[0].answer.len(), 8);
        assert_eq!(b[0].records[0].rounds[0].question.len(), 16);
    }

    #[test]
    fn padding_records_lengths() {
        let p = pad(&[vec![4, 5, 6], vec![7, 8, 9, 10, 11]]);
        assert_eq!(p.lengths, [3, 5]);
        assert_eq!(p.ids[0], [4, 5, 6, PAD, PAD]);
        assert_eq!(p.width(), 5);
    }

    #[test]
    fn batch_sizes() {
        let recs: Vec<DialogRecord> = (0..5).map(|_| record(2)).collect();
        let b = truncate_and_batch(&recs, Limits::default(), 2);
        assert_eq!(
            b.iter().map(|x| x.records.len()).collect::<Vec<_>>(),
            [2, 2, 1]
        );
    }
}
