//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xkt_autograd::Real;

use crate::data::synth::SynthConfig;
use crate::error::{KtError, Result};
use crate::model::{Ablation, MLstmForm, ModelConfig, ModelKind};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OneStep,
    MultiStep,
    Masked,
    MultiConcept,
    VaryingHistory,
}

/// What is hidden in the last `mask_horizon` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSetting {
    /// Questions, concepts and responses.
    AllMasked,
    /// Responses only.
    ResponsesMasked,
    Unmasked,
}

impl MaskSetting {
    pub fn label(self) -> &'static str {
        match self {
            MaskSetting::AllMasked => "all_masked",
            MaskSetting::ResponsesMasked => "responses_masked",
            MaskSetting::Unmasked => "unmasked",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// Evaluate the trained checkpoint at every window length.
    #[default]
    Shared,
    /// Train a fresh model per window length.
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocols: Vec<Protocol>,
    pub steps: Vec<usize>,
    pub mask_settings: Vec<MaskSetting>,
    pub mask_horizon: usize,
    pub history_grid: Vec<usize>,
    pub history_mode: HistoryMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocols: vec![
                Protocol::OneStep,
                Protocol::MultiStep,
                Protocol::Masked,
                Protocol::MultiConcept,
                Protocol::VaryingHistory,
            ],
            steps: vec![5, 10, 15, 20],
            mask_settings: vec![MaskSetting::AllMasked, MaskSetting::ResponsesMasked, MaskSetting::Unmasked],
            mask_horizon: 5,
            history_grid: vec![25, 50, 75, 100],
            history_mode: HistoryMode::Shared,
        }
    }
}

/// Files read and written. Relative paths resolve against the working
/// directory. Paths do not enter the config hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Interaction CSV.
    pub raw: Option<PathBuf>,
    /// Preprocessed dataset JSON; preferred over `raw` when both are set.
    pub dataset: Option<PathBuf>,
    /// Checkpoint to evaluate or predict with; defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            raw: None,
            dataset: None,
            checkpoint: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub threshold: f64,
    pub eps: f64,
    pub students: usize,
    pub steps: usize,
    pub dim: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    /// Redraw every parameter uniformly in `[-s, s]`; absent keeps the
    /// model's own initialization.
    pub param_scale: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-4,
            eps: 1e-5,
            students: 2,
            steps: 8,
            dim: 8,
            n_questions: 6,
            n_concepts: 4,
            param_scale: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub dropout: Real,
    pub max_epochs: usize,
    pub patience: usize,
    pub history_len: usize,
    pub seed: u64,
    pub folds: usize,
    /// Which fold is held out as the test set.
    pub fold: usize,
    pub val_fraction: f64,
    pub grad_clip: Real,
    pub mlstm_form: MLstmForm,
    pub ablation: Ablation,
    pub protocol: ProtocolConfig,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: ModelKind::Dkt2,
            dim: 64,
            batch_size: t.batch_size,
            lr: t.lr,
            dropout: t.dropout,
            max_epochs: t.max_epochs,
            patience: t.patience,
            history_len: t.history_len,
            seed: t.seed,
            folds: 5,
            fold: 0,
            val_fraction: 0.1,
            grad_clip: t.grad_clip,
            mlstm_form: MLstmForm::Parallel,
            ablation: Ablation::default(),
            protocol: ProtocolConfig::default(),
            paths: Paths::default(),
            synth: SynthConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn bad(field: &str, msg: impl Into<String>) -> KtError {
    KtError::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Parses JSON, naming the offending key on failure, and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            bad(if path == "." { "<root>" } else { &path }, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KtError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            max_epochs: self.max_epochs,
            patience: self.patience,
            history_len: self.history_len,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    pub fn model_config(&self, n_questions: usize, n_concepts: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.model, self.dim, n_questions, n_concepts);
        m.ablation = self.ablation;
        m.mlstm_form = self.mlstm_form;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.dim == 0 {
            return Err(bad("dim", "must be positive"));
        }
        if self.folds < 2 {
            return Err(bad("folds", "must be at least 2"));
        }
        if self.fold >= self.folds {
            return Err(bad("fold", format!("must be below folds ({})", self.folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(bad("val_fraction", "must lie in (0, 1)"));
        }
        let p = &self.protocol;
        if p.steps.iter().any(|&n| n == 0) {
            return Err(bad("protocol.steps", "horizons must be positive"));
        }
        if p.mask_horizon == 0 {
            return Err(bad("protocol.mask_horizon", "must be positive"));
        }
        if p.history_grid.iter().any(|&l| l < 2) {
            return Err(bad("protocol.history_grid", "lengths must be at least 2"));
        }
        let g = &self.gradcheck;
        if !(g.eps > 0.0 && g.threshold > 0.0) {
            return Err(bad("gradcheck", "eps and threshold must be positive"));
        }
        if g.students == 0 || g.steps < 2 || g.dim == 0 || g.n_questions == 0 || g.n_concepts == 0 {
            return Err(bad("gradcheck", "needs at least one student, two steps and positive sizes"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything but `paths`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths = Paths::default();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("checkpoint.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.batch_size, cfg.dim, cfg.max_epochs, cfg.seed), (512, 64, 300, 12405));
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = RunConfig::from_json(r#"{"lr": "fast"}"#).unwrap_err();
        assert!(matches!(&err, KtError::Config { field, .. } if field == "lr"), "{err}");
        let err = RunConfig::from_json(r#"{"protocol": {"steps": [5, "x"]}}"#).unwrap_err();
        assert!(err.to_string().contains("protocol.steps"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"ablation": {"no_lstm": true}}"#).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("ablation") && text.contains("no_lstm"), "{text}");
        assert!(RunConfig::from_json(r#"{"learning_rate": 0.1}"#).is_err());
    }

    #[test]
    fn nested_ablation_flags_parse() {
        let cfg = RunConfig::from_json(r#"{"ablation": {"no_mlstm": true}}"#).unwrap();
        assert!(cfg.ablation.no_mlstm && !cfg.ablation.no_slstm);
        assert!(cfg.model_config(3, 2).ablation.no_mlstm);
    }

    #[test]
    fn validation_names_the_field() {
        let err = RunConfig::from_json(r#"{"patience": 400}"#).unwrap_err();
        assert!(matches!(&err, KtError::Config { field, .. } if field == "patience"));
        let err = RunConfig::from_json(r#"{"fold": 5}"#).unwrap_err();
        assert!(matches!(&err, KtError::Config { field, .. } if field == "fold"));
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.lr = 0.002;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
