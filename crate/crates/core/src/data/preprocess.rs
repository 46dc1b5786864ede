use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ingest::{RawData, RawInteraction};
use crate::error::{KtError, Result};

/// Students with fewer interactions than this are removed.
pub const MIN_INTERACTIONS: usize = 5;

/// One interaction after remapping to dense indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub question: usize,
    pub concept: usize,
    pub response: u8,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSequence {
    pub student: u64,
    pub steps: Vec<Step>,
}

/// Dense index to raw id. A concept index stands for a sorted set of raw
/// concept ids; singletons map one to one.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub questions: Vec<u64>,
    pub concepts: Vec<Vec<u64>>,
}

impl Vocab {
    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// Maps a raw interaction onto known indices. Interactions with no named
    /// concept give `None`; ids outside the vocabulary are errors.
    pub fn encode(&self, it: &RawInteraction) -> Result<Option<Step>> {
        if it.concepts.is_empty() {
            return Ok(None);
        }
        let question = self
            .questions
            .iter()
            .position(|&q| q == it.question)
            .ok_or_else(|| KtError::Vocabulary {
                kind: "question",
                id: it.question.to_string(),
            })?;
        let mut key = it.concepts.clone();
        key.sort_unstable();
        key.dedup();
        let concept = self.concepts.iter().position(|c| *c == key).ok_or_else(|| KtError::Vocabulary {
            kind: "concept set",
            id: key.iter().map(u64::to_string).collect::<Vec<_>>().join("|"),
        })?;
        Ok(Some(Step {
            question,
            concept,
            response: it.response,
            timestamp: it.timestamp,
        }))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
    pub interactions: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub students: Vec<StudentSequence>,
    pub vocab: Vocab,
    pub stats: DatasetStats,
}

/// Filters and remaps raw interactions.
///
/// Interactions without a named concept go first, then students left with
/// fewer than [`MIN_INTERACTIONS`]. Question ids and distinct concept sets
/// are numbered by first appearance, visiting students in id order.
pub fn preprocess(raw: &RawData) -> Result<Dataset> {
    let mut kept: BTreeMap<u64, Vec<&RawInteraction>> = BTreeMap::new();
    for (&student, list) in &raw.students {
        let named: Vec<&RawInteraction> = list.iter().filter(|it| !it.concepts.is_empty()).collect();
        if named.len() >= MIN_INTERACTIONS {
            kept.insert(student, named);
        }
    }
    if kept.is_empty() {
        return Err(KtError::contract(format!(
            "zero students survive preprocessing (each needs at least {MIN_INTERACTIONS} interactions with a named concept)"
        )));
    }

    let mut vocab = Vocab::default();
    let mut question_index: HashMap<u64, usize> = HashMap::new();
    let mut concept_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut students = Vec::with_capacity(kept.len());
    for (student, list) in kept {
        let steps = list
            .into_iter()
            .map(|it| {
                let question = *question_index.entry(it.question).or_insert_with(|| {
                    vocab.questions.push(it.question);
                    vocab.questions.len() - 1
                });
                let mut key = it.concepts.clone();
                key.sort_unstable();
                key.dedup();
                let concept = match concept_index.get(&key) {
                    Some(&c) => c,
                    None => {
                        vocab.concepts.push(key.clone());
                        concept_index.insert(key, vocab.concepts.len() - 1);
                        vocab.concepts.len() - 1
                    }
                };
                Step {
                    question,
                    concept,
                    response: it.response,
                    timestamp: it.timestamp,
                }
            })
            .collect();
        students.push(StudentSequence { student, steps });
    }

    let stats = DatasetStats {
        students: students.len(),
        questions: vocab.num_questions(),
        concepts: vocab.num_concepts(),
        interactions: students.iter().map(|s| s.steps.len()).sum(),
    };
    Ok(Dataset { students, vocab, stats })
}

impl Dataset {
    /// Maps back to raw ids. `preprocess(&ds.to_raw())` reproduces `ds`.
    pub fn to_raw(&self) -> RawData {
        let mut raw = RawData::default();
        for s in &self.students {
            let list = s
                .steps
                .iter()
                .map(|st| RawInteraction {
                    question: self.vocab.questions[st.question],
                    concepts: self.vocab.concepts[st.concept].clone(),
                    response: st.response,
                    timestamp: st.timestamp,
                })
                .collect();
            raw.students.insert(s.student, list);
        }
        raw
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| KtError::Json {
            context: "serializing dataset".into(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| KtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KtError::io(path, e))?;
        let ds: Dataset = serde_json::from_str(&text).map_err(|source| KtError::Json {
            context: format!("reading dataset {}", path.display()),
            source,
        })?;
        ds.validate()?;
        Ok(ds)
    }

    /// Checks indices against the vocabulary and the minimum length rule.
    pub fn validate(&self) -> Result<()> {
        for s in &self.students {
            if s.steps.len() < MIN_INTERACTIONS {
                return Err(KtError::contract(format!(
                    "student {} has {} interactions, fewer than {MIN_INTERACTIONS}",
                    s.student,
                    s.steps.len()
                )));
            }
            for st in &s.steps {
                if st.question >= self.vocab.num_questions() {
                    return Err(KtError::Vocabulary {
                        kind: "question",
                        id: st.question.to_string(),
                    });
                }
                if st.concept >= self.vocab.num_concepts() {
                    return Err(KtError::Vocabulary {
                        kind: "concept",
                        id: st.concept.to_string(),
                    });
                }
                if st.response > 1 {
                    return Err(KtError::contract(format!("response {} is not a bit", st.response)));
                }
            }
        }
        Ok(())
    }

    /// The students at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Vec<StudentSequence> {
        indices.iter().map(|&i| self.students[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[(u64, u64, &[u64], u8, i64)]) -> RawData {
        let mut data = RawData::default();
        for &(s, q, c, r, t) in rows {
            data.students.entry(s).or_default().push(RawInteraction {
                question: q,
                concepts: c.to_vec(),
                response: r,
                timestamp: t,
            });
        }
        data
    }

    #[test]
    fn short_students_are_removed() {
        let mut rows: Vec<(u64, u64, &[u64], u8, i64)> = (0..4).map(|t| (1, t, &[1u64][..], 1, t as i64)).collect();
        rows.extend((0..5).map(|t| (2, t, &[1u64][..], 0, t as i64)));
        let ds = preprocess(&raw(&rows)).unwrap();
        assert_eq!(ds.students.len(), 1);
        assert_eq!(ds.students[0].student, 2);
    }

    #[test]
    fn unnamed_concepts_count_against_threshold() {
        let rows: Vec<(u64, u64, &[u64], u8, i64)> = vec![
            (1, 1, &[2], 1, 0),
            (1, 2, &[], 1, 1),
            (1, 3, &[2], 0, 2),
            (1, 4, &[2], 1, 3),
            (1, 5, &[2], 1, 4),
        ];
        let err = preprocess(&raw(&rows)).unwrap_err();
        assert!(err.to_string().contains("zero students survive"), "{err}");
    }

    #[test]
    fn concept_sets_share_ids() {
        let rows: Vec<(u64, u64, &[u64], u8, i64)> = vec![
            (1, 10, &[3, 5], 1, 0),
            (1, 11, &[5, 3], 1, 1),
            (1, 12, &[3], 1, 2),
            (1, 13, &[5], 1, 3),
            (1, 10, &[3, 5, 3], 1, 4),
        ];
        let ds = preprocess(&raw(&rows)).unwrap();
        let cs: Vec<usize> = ds.students[0].steps.iter().map(|s| s.concept).collect();
        assert_eq!(cs, vec![0, 0, 1, 2, 0]);
        assert_eq!(ds.vocab.concepts, vec![vec![3, 5], vec![3], vec![5]]);
        let qs: Vec<usize> = ds.students[0].steps.iter().map(|s| s.question).collect();
        assert_eq!(qs, vec![0, 1, 2, 3, 0]);
        assert_eq!(
            ds.stats,
            DatasetStats {
                students: 1,
                questions: 4,
                concepts: 3,
                interactions: 5
            }
        );
    }
}
