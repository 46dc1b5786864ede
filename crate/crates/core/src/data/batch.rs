use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{Step, StudentSequence};
use crate::error::{KtError, Result};

/// Id stored in padded cells.
pub const PAD_ID: usize = usize::MAX;

/// The most recent `history` steps of a sequence.
pub fn window(steps: &[Step], history: usize) -> &[Step] {
    &steps[steps.len().saturating_sub(history)..]
}

/// Right-padded `rows x len` arrays, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceBatch {
    pub rows: usize,
    pub len: usize,
    pub students: Vec<u64>,
    pub questions: Vec<usize>,
    pub concepts: Vec<usize>,
    pub responses: Vec<u8>,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Pads every sequence to `len` columns. Sequences longer than `len` are an error.
    pub fn from_steps(students: Vec<u64>, seqs: &[&[Step]], len: usize) -> Result<Self> {
        if students.len() != seqs.len() {
            return Err(KtError::contract("one student id per sequence"));
        }
        let rows = seqs.len();
        let mut batch = SequenceBatch {
            rows,
            len,
            students,
            questions: vec![PAD_ID; rows * len],
            concepts: vec![PAD_ID; rows * len],
            responses: vec![0; rows * len],
            lengths: Vec::with_capacity(rows),
        };
        for (r, seq) in seqs.iter().enumerate() {
            if seq.len() > len {
                return Err(KtError::contract(format!(
                    "sequence of length {} does not fit {len} columns",
                    seq.len()
                )));
            }
            for (t, st) in seq.iter().enumerate() {
                batch.questions[r * len + t] = st.question;
                batch.concepts[r * len + t] = st.concept;
                batch.responses[r * len + t] = st.response;
            }
            batch.lengths.push(seq.len());
        }
        Ok(batch)
    }

    pub fn valid(&self, row: usize, t: usize) -> bool {
        t < self.lengths[row]
    }

    pub fn mask_row(&self, row: usize) -> Vec<bool> {
        (0..self.len).map(|t| self.valid(row, t)).collect()
    }

    pub fn question_column(&self, t: usize) -> Vec<usize> {
        self.column(&self.questions, t)
    }

    pub fn concept_column(&self, t: usize) -> Vec<usize> {
        self.column(&self.concepts, t)
    }

    pub fn response_column(&self, t: usize) -> Vec<u8> {
        self.column(&self.responses, t)
    }

    fn column<T: Copy>(&self, data: &[T], t: usize) -> Vec<T> {
        (0..self.rows).map(|r| data[r * self.len + t]).collect()
    }

    pub fn at(&self, row: usize, t: usize) -> Option<Step> {
        self.valid(row, t).then(|| Step {
            question: self.questions[row * self.len + t],
            concept: self.concepts[row * self.len + t],
            response: self.responses[row * self.len + t],
            timestamp: 0,
        })
    }
}

/// Windows each sequence to its last `history` steps and cuts batches of
/// `batch_size` rows padded to `history` columns. With `shuffle`, the student
/// order is permuted by a generator seeded with that value.
pub fn batches(
    seqs: &[StudentSequence],
    history: usize,
    batch_size: usize,
    shuffle: Option<u64>,
) -> Result<Vec<SequenceBatch>> {
    if history < 2 {
        return Err(KtError::contract(format!("history length must be at least 2, got {history}")));
    }
    if batch_size == 0 {
        return Err(KtError::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if let Some(seed) = shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let students = chunk.iter().map(|&i| seqs[i].student).collect();
            let windows: Vec<&[Step]> = chunk.iter().map(|&i| window(&seqs[i].steps, history)).collect();
            SequenceBatch::from_steps(students, &windows, history)
        })
        .collect()
}
