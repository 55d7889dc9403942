use serde::{Deserialize, Serialize};

use super::report::{align, ConfusionKey, EvalReport, ReportRow};
use super::{mean_char_accuracy, word_accuracy};
use crate::countermeasure::{render_countermeasure, ShaderParams};
use crate::imagegen::{
    sample_plan, Canvas, ComposeParams, DatasetConfig, GrayImage, LabeledImage, PatternSpec, Split,
    standard_patterns,
};
use crate::lexicon::{correct_domain, correct_general, domain_wordlist, CorrectionConfig, Lexicon};
use crate::model::Prediction;
use crate::rng::derive_seed;
use crate::training::{train_loop, Start, TrainConfig, TrainLog};
use crate::{Error, ModelConfig, ModelParams, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correction {
    None,
    General,
    Domain,
}

impl Correction {
    pub fn label(self) -> &'static str {
        match self {
            Correction::None => "none",
            Correction::General => "general",
            Correction::Domain => "domain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Countermeasure {
    Off,
    /// Content-aware shader from [`ExperimentConfig::shader`], misaligned by
    /// `jitter`.
    Shader {
        #[serde(default)]
        jitter: (i64, i64),
    },
    /// A darker envelope: only the transparency `beta` changes.
    BlackEnvelope { beta: f64 },
}

impl Countermeasure {
    pub fn label(&self) -> String {
        match self {
            Countermeasure::Off => "off".into(),
            Countermeasure::Shader { jitter: (0, 0) } => "shader".into(),
            Countermeasure::Shader { jitter: (dx, dy) } => format!("shader-j{dx}x{dy}"),
            Countermeasure::BlackEnvelope { beta } => format!("black-beta{beta}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Vocabulary of every dataset; also the domain lexicon.
    pub wordlist: Vec<String>,
    pub canvas: Canvas,
    pub pretrain_samples: usize,
    pub finetune_samples: usize,
    /// Samples per test cell.
    pub test_samples: usize,
    /// Train fraction of the pretrain and fine-tune sets; the rest is the
    /// held-out set logged during training.
    pub split_fraction: f64,
    pub patterns: Vec<PatternSpec>,
    pub compose: ComposeParams,
    pub train_pattern: u32,
    pub test_patterns: Vec<u32>,
    pub corrections: Vec<Correction>,
    pub countermeasures: Vec<Countermeasure>,
    pub shader: ShaderParams,
    pub correction: CorrectionConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Also evaluate the clean-only model (train pattern `none`).
    pub baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        Self {
            seed: 1,
            wordlist: domain_wordlist(),
            canvas: Canvas::default(),
            pretrain_samples: 2000,
            finetune_samples: 1000,
            test_samples: 200,
            split_fraction: 0.9,
            patterns: standard_patterns(),
            compose: ComposeParams::default(),
            train_pattern: 1,
            test_patterns: vec![1, 2, 3],
            corrections: vec![Correction::None, Correction::General, Correction::Domain],
            countermeasures: vec![Countermeasure::Off],
            shader: ShaderParams::default(),
            correction: CorrectionConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                iterations: 1000,
                ..desk.clone()
            },
            finetune: desk,
            baseline: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_patterns.is_empty() {
            return Err(Error::Config("test_patterns must not be empty".into()));
        }
        if self.corrections.is_empty() || self.countermeasures.is_empty() {
            return Err(Error::Config("corrections and countermeasures must not be empty".into()));
        }
        if self.test_samples == 0 {
            return Err(Error::Config("test_samples must be at least 1".into()));
        }
        if self.model.canvas != self.canvas {
            return Err(Error::Config("model canvas differs from dataset canvas".into()));
        }
        for id in std::iter::once(&self.train_pattern).chain(&self.test_patterns) {
            self.pattern(*id)?;
        }
        for c in &self.countermeasures {
            if let Countermeasure::BlackEnvelope { beta } = c {
                ComposeParams { beta: *beta, ..self.compose }.validate()?;
            }
        }
        self.shader.validate()?;
        self.correction.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()
    }

    pub fn pattern(&self, id: u32) -> Result<&PatternSpec> {
        self.patterns
            .iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::Config(format!("no pattern with id {id}")))
    }

    fn dataset(&self, n: usize, patterns: Vec<PatternSpec>, stream: u64) -> DatasetConfig {
        DatasetConfig {
            wordlist: self.wordlist.clone(),
            n_samples: n,
            split_fraction: self.split_fraction,
            canvas: self.canvas,
            patterns,
            compose: self.compose,
            seed: derive_seed(self.seed, stream),
        }
    }

    /// Clean pretraining set.
    pub fn pretrain_config(&self) -> DatasetConfig {
        self.dataset(self.pretrain_samples, vec![], 1)
    }

    /// Fine-tuning set on the training pattern.
    pub fn finetune_config(&self) -> DatasetConfig {
        let p = self.pattern(self.train_pattern).cloned().into_iter().collect();
        self.dataset(self.finetune_samples, p, 2)
    }

    /// Shader parameters of a countermeasure cell; the seed is derived from
    /// both the shader seed and the experiment seed.
    pub fn shader_params(&self, jitter: (i64, i64)) -> ShaderParams {
        ShaderParams {
            jitter,
            seed: derive_seed(self.shader.seed ^ self.seed, 3),
            ..self.shader.clone()
        }
    }

    /// Test set for one pattern. Its seed stream differs from the training
    /// sets, so phases, noise and word draws are fresh.
    pub fn test_config(&self, pattern: u32) -> Result<DatasetConfig> {
        let p = self.pattern(pattern)?.clone();
        Ok(self.dataset(self.test_samples, vec![p], 100 + pattern as u64))
    }
}

/// Report plus the trained models and their logs.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub pretrained: ModelParams<f32>,
    pub finetuned: ModelParams<f32>,
    pub pretrain_log: TrainLog,
    pub finetune_log: TrainLog,
}

/// Renders every sample of a dataset config in memory.
pub fn render_dataset(cfg: &DatasetConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for i in 0..cfg.n_samples as u64 {
        let plan = sample_plan(cfg, i);
        let item = LabeledImage {
            id: i,
            label: plan.label.clone(),
            image: plan.render(cfg)?,
        };
        match plan.split {
            Split::Train => train.push(item),
            Split::Eval => eval.push(item),
        }
    }
    Ok((train, eval))
}

/// Test images for one (pattern, countermeasure) cell.
pub fn render_test_set(
    cfg: &ExperimentConfig,
    pattern: u32,
    cm: &Countermeasure,
) -> Result<Vec<LabeledImage>> {
    let ds = cfg.test_config(pattern)?;
    (0..ds.n_samples as u64)
        .map(|i| {
            let plan = sample_plan(&ds, i);
            let image = match cm {
                Countermeasure::Off => plan.render(&ds)?,
                Countermeasure::Shader { jitter } => {
                    render_countermeasure(&plan, &ds, &cfg.shader_params(*jitter))?
                }
                Countermeasure::BlackEnvelope { beta } => {
                    plan.render_with(&ds, &ComposeParams { beta: *beta, ..ds.compose })?
                }
            };
            Ok(LabeledImage {
                id: i,
                label: plan.label,
                image,
            })
        })
        .collect()
}

/// Pretrains on clean samples and fine-tunes on the training pattern.
/// Training seeds are derived from `cfg.seed`; the seeds inside the two
/// train configs are ignored.
pub fn train_models(cfg: &ExperimentConfig) -> Result<(ModelParams<f32>, TrainLog, ModelParams<f32>, TrainLog)> {
    let (pre_train, pre_eval) = render_dataset(&cfg.pretrain_config())?;
    let pre_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 11),
        ..cfg.pretrain.clone()
    };
    let start = Start::Init {
        model: cfg.model.clone(),
        seed: derive_seed(cfg.seed, 10),
    };
    let (pretrained, pre_log) = train_loop(&pre_train, &pre_eval, &pre_cfg, start)?;

    let (ft_train, ft_eval) = render_dataset(&cfg.finetune_config())?;
    let ft_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 12),
        ..cfg.finetune.clone()
    };
    let (finetuned, ft_log) =
        train_loop(&ft_train, &ft_eval, &ft_cfg, Start::Checkpoint(pretrained.clone()))?;
    Ok((pretrained, pre_log, finetuned, ft_log))
}

/// Applies one correction mode to a batch of predictions.
pub fn apply_correction(
    preds: &[Prediction],
    mode: Correction,
    general: &Lexicon,
    domain: &Lexicon,
    cfg: &CorrectionConfig,
) -> Result<Vec<String>> {
    preds
        .iter()
        .map(|p| match mode {
            Correction::None => Ok(p.text.clone()),
            Correction::General => Ok(correct_general(&p.text, general, cfg)),
            Correction::Domain => {
                let conf: Vec<f64> = p.confidences.iter().map(|&c| c as f64).collect();
                correct_domain(&p.text, &conf, domain, cfg)
            }
        })
        .collect()
}

/// Scores `model` on every configured cell and appends rows in cell order:
/// test pattern, then correction, then countermeasure.
pub fn evaluate_cells(
    cfg: &ExperimentConfig,
    model: &ModelParams<f32>,
    train_pattern: &str,
    report: &mut EvalReport,
) -> Result<()> {
    let general = Lexicon::general();
    let domain = Lexicon::from_words(&cfg.wordlist)?;
    for &tp in &cfg.test_patterns {
        let mut preds = Vec::with_capacity(cfg.countermeasures.len());
        for cm in &cfg.countermeasures {
            let set = render_test_set(cfg, tp, cm)?;
            let images: Vec<&GrayImage> = set.iter().map(|s| &s.image).collect();
            let p = model.predict_batch(&images)?;
            preds.push((p, set.iter().map(|s| s.label.clone()).collect::<Vec<_>>()));
        }
        for &corr in &cfg.corrections {
            for (cm, (p, labels)) in cfg.countermeasures.iter().zip(&preds) {
                let texts = apply_correction(p, corr, &general, &domain, &cfg.correction)?;
                let pairs: Vec<(&str, &str)> =
                    texts.iter().map(String::as_str).zip(labels.iter().map(String::as_str)).collect();
                if corr == Correction::None {
                    for (pred, truth) in &pairs {
                        for (t, q) in align(pred, truth) {
                            let key = ConfusionKey {
                                train_pattern: train_pattern.to_string(),
                                test_pattern: tp.to_string(),
                                countermeasure: cm.label(),
                                truth: t,
                                pred: q,
                            };
                            *report.confusion.entry(key).or_insert(0) += 1;
                        }
                    }
                }
                report.rows.push(ReportRow {
                    train_pattern: train_pattern.to_string(),
                    test_pattern: tp.to_string(),
                    correction: corr.label().to_string(),
                    countermeasure: cm.label(),
                    char_acc: mean_char_accuracy(&pairs)?,
                    word_acc: word_accuracy(&pairs)?,
                    n: pairs.len(),
                    seed: cfg.seed,
                });
            }
        }
    }
    Ok(())
}

pub fn run_experiment_full(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (pretrained, pretrain_log, finetuned, finetune_log) = train_models(cfg)?;
    let mut report = EvalReport::default();
    evaluate_cells(cfg, &finetuned, &cfg.train_pattern.to_string(), &mut report)?;
    if cfg.baseline {
        evaluate_cells(cfg, &pretrained, "none", &mut report)?;
    }
    Ok(ExperimentOutcome {
        report,
        pretrained,
        finetuned,
        pretrain_log,
        finetune_log,
    })
}

/// Generate, pretrain on clean samples, fine-tune on the training pattern,
/// and evaluate every configured cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    Ok(run_experiment_full(cfg)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small enough to train in well under a second.
    pub(crate) fn tiny_experiment() -> ExperimentConfig {
        let canvas = Canvas { width: 32, height: 16 };
        let train = TrainConfig {
            batch_size: 4,
            iterations: 3,
            eval_every: 2,
            eval_samples: 4,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            wordlist: vec!["AB".into(), "C1".into(), "Z".into()],
            canvas,
            pretrain_samples: 12,
            finetune_samples: 12,
            test_samples: 5,
            split_fraction: 0.75,
            model: ModelConfig { canvas, ..ModelConfig::tiny() },
            pretrain: train.clone(),
            finetune: train,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn nine_cells() {
        let report = run_experiment(&tiny_experiment()).unwrap();
        assert_eq!(report.rows.len(), 9);
        let cells: Vec<(&str, &str)> = report
            .rows
            .iter()
            .map(|r| (r.test_pattern.as_str(), r.correction.as_str()))
            .collect();
        assert_eq!(cells[0], ("1", "none"));
        assert_eq!(cells[1], ("1", "general"));
        assert_eq!(cells[5], ("2", "domain"));
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.char_acc) && (0.0..=1.0).contains(&r.word_acc));
            assert_eq!(r.n, 5);
            assert_eq!(r.countermeasure, "off");
        }
        assert!(!report.confusion.is_empty());
    }

    #[test]
    fn countermeasures_and_baseline_add_rows() {
        let cfg = ExperimentConfig {
            test_patterns: vec![1],
            corrections: vec![Correction::None],
            countermeasures: vec![
                Countermeasure::Off,
                Countermeasure::Shader { jitter: (2, 0) },
                Countermeasure::BlackEnvelope { beta: 0.9 },
            ],
            baseline: true,
            ..tiny_experiment()
        };
        let report = run_experiment(&cfg).unwrap();
        let labels: Vec<(String, String)> = report
            .rows
            .iter()
            .map(|r| (r.train_pattern.clone(), r.countermeasure.clone()))
            .collect();
        let expect = [
            ("1", "off"),
            ("1", "shader-j2x0"),
            ("1", "black-beta0.9"),
            ("none", "off"),
            ("none", "shader-j2x0"),
            ("none", "black-beta0.9"),
        ];
        assert_eq!(labels.len(), expect.len());
        for (got, want) in labels.iter().zip(expect) {
            assert_eq!((got.0.as_str(), got.1.as_str()), want);
        }
    }

    #[test]
    fn identical_reports_on_rerun() {
        let cfg = tiny_experiment();
        assert_eq!(run_experiment(&cfg).unwrap(), run_experiment(&cfg).unwrap());
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny_experiment();
        cfg.test_patterns.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.test_patterns = vec![9];
        assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
        let cfg = ExperimentConfig { canvas: Canvas::default(), ..tiny_experiment() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig {
            countermeasures: vec![
                Countermeasure::Off,
                Countermeasure::Shader { jitter: (4, 4) },
                Countermeasure::BlackEnvelope { beta: 0.5 },
            ],
            ..ExperimentConfig::default()
        };
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 7, "countermeasures": [{"kind": "shader"}]}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.countermeasures, vec![Countermeasure::Shader { jitter: (0, 0) }]);
        assert_eq!(partial.test_patterns, vec![1, 2, 3]);
    }
}
