//! Synthetic students answering from an item-response model.
//!
//! Student `s` answers question `q` correctly with probability
//! `sigmoid(ability_s + mean_c(skill_sc) - difficulty_q)` over the concepts
//! `c` of `q`. After a correct answer the skills of those concepts grow by
//! `drift`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ingest::{RawData, RawInteraction};
use crate::error::{KtError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_students: usize,
    pub n_concepts: usize,
    pub n_questions: usize,
    pub seed: u64,
    /// Sequence lengths are uniform in `min_steps..=max_steps`.
    pub min_steps: usize,
    pub max_steps: usize,
    pub ability_mean: f64,
    pub ability_std: f64,
    /// Spread of per-concept skill around a student's ability.
    pub concept_ability_std: f64,
    pub difficulty_std: f64,
    /// Skill gain per correct answer; 0 keeps abilities static.
    pub drift: f64,
    /// Share of questions tagged with a second concept.
    pub multi_concept_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_students: 200,
            n_concepts: 50,
            n_questions: 300,
            seed: 12405,
            min_steps: 50,
            max_steps: 120,
            ability_mean: 0.0,
            ability_std: 2.0,
            concept_ability_std: 0.5,
            difficulty_std: 2.5,
            drift: 0.05,
            multi_concept_fraction: 0.0,
        }
    }
}

/// Generating parameters, saved next to the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub student_ability: Vec<f64>,
    /// Initial per-concept skill offsets, `[student][concept]`.
    pub concept_skill: Vec<Vec<f64>>,
    pub question_difficulty: Vec<f64>,
    pub question_concepts: Vec<Vec<u64>>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_students", self.n_students),
            ("n_concepts", self.n_concepts),
            ("n_questions", self.n_questions),
            ("min_steps", self.min_steps),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(KtError::Config {
                    field: format!("synth.{field}"),
                    msg: "must be positive".into(),
                });
            }
        }
        if self.max_steps < self.min_steps {
            return Err(KtError::Config {
                field: "synth.max_steps".into(),
                msg: "must be at least min_steps".into(),
            });
        }
        for (field, v) in [
            ("ability_std", self.ability_std),
            ("concept_ability_std", self.concept_ability_std),
            ("difficulty_std", self.difficulty_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(KtError::Config {
                    field: format!("synth.{field}"),
                    msg: "must be finite and non-negative".into(),
                });
            }
        }
        if !self.ability_mean.is_finite() || !self.drift.is_finite() {
            return Err(KtError::Config {
                field: "synth.ability_mean".into(),
                msg: "ability_mean and drift must be finite".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.multi_concept_fraction) {
            return Err(KtError::Config {
                field: "synth.multi_concept_fraction".into(),
                msg: "must lie in [0, 1]".into(),
            });
        }
        if self.multi_concept_fraction > 0.0 && self.n_concepts < 2 {
            return Err(KtError::Config {
                field: "synth.multi_concept_fraction".into(),
                msg: "needs at least two concepts".into(),
            });
        }
        Ok(())
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated spread")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate(cfg: &SynthConfig) -> Result<(RawData, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let difficulty_dist = normal(0.0, cfg.difficulty_std);
    let mut question_concepts = Vec::with_capacity(cfg.n_questions);
    let mut question_difficulty = Vec::with_capacity(cfg.n_questions);
    for q in 0..cfg.n_questions {
        let primary = if q < cfg.n_concepts {
            q
        } else {
            rng.random_range(0..cfg.n_concepts)
        };
        let mut concepts = vec![primary as u64];
        if cfg.multi_concept_fraction > 0.0 && rng.random_bool(cfg.multi_concept_fraction) {
            let mut second = rng.random_range(0..cfg.n_concepts - 1);
            if second >= primary {
                second += 1;
            }
            concepts.push(second as u64);
            concepts.sort_unstable();
        }
        question_concepts.push(concepts);
        question_difficulty.push(difficulty_dist.sample(&mut rng));
    }

    let ability_dist = normal(cfg.ability_mean, cfg.ability_std);
    let skill_dist = normal(0.0, cfg.concept_ability_std);
    let mut data = RawData::default();
    let mut student_ability = Vec::with_capacity(cfg.n_students);
    let mut concept_skill = Vec::with_capacity(cfg.n_students);
    for s in 0..cfg.n_students {
        let ability = ability_dist.sample(&mut rng);
        let initial: Vec<f64> = (0..cfg.n_concepts).map(|_| skill_dist.sample(&mut rng)).collect();
        let mut skill = initial.clone();
        let steps = rng.random_range(cfg.min_steps..=cfg.max_steps);
        let mut list = Vec::with_capacity(steps);
        for t in 0..steps {
            let q = rng.random_range(0..cfg.n_questions);
            let concepts = &question_concepts[q];
            let mean_skill =
                concepts.iter().map(|&c| skill[c as usize]).sum::<f64>() / concepts.len() as f64;
            let p = sigmoid(ability + mean_skill - question_difficulty[q]);
            let correct = rng.random_bool(p);
            if correct {
                for &c in concepts {
                    skill[c as usize] += cfg.drift;
                }
            }
            list.push(RawInteraction {
                question: q as u64,
                concepts: concepts.clone(),
                response: u8::from(correct),
                timestamp: 60 * t as i64,
            });
        }
        data.students.insert(s as u64, list);
        student_ability.push(ability);
        concept_skill.push(initial);
    }

    let truth = GroundTruth {
        config: cfg.clone(),
        student_ability,
        concept_skill,
        question_difficulty,
        question_concepts,
    };
    Ok((data, truth))
}
