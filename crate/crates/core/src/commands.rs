//! The operations behind each command-line subcommand, driven by one JSON
//! run config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{self, BenchConfig};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::HcsaConfig;
use crate::data::{self, DataError, SyntheticTaskConfig};
use crate::error::ModelError;
use crate::metrics::{self, AnswerRecord, EvalReport, MetricError, SimilarityOracle, Taxonomy};
use crate::model::HcsaModel;
use crate::training::{self, GradCheckReport, TrainConfig, TrainError, TrainReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.hcsm";
pub const REPORT_FILE: &str = "train_report.json";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CommandError {
    /// Missing, unreadable or malformed input.
    #[error("input error: {0}")]
    Input(String),
    /// Well-formed input that violates a constraint.
    #[error("validation error: {0}")]
    Validation(String),
    /// Failure while running, including a failed gradient check.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Validation(_) => 3,
            Self::Runtime(_) => 4,
        }
    }
}

impl From<DataError> for CommandError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Self::Validation(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<MetricError> for CommandError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Gamma(_) | MetricError::Mismatch(_) => Self::Validation(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CommandError {
    fn from(e: CheckpointError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<ModelError> for CommandError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Validation(e.to_string()),
            ModelError::Input(_) => Self::Input(e.to_string()),
            ModelError::Tensor(_) => Self::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CommandError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::EmptyDataset => Self::Input(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> CommandError {
    CommandError::Input(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CommandError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CommandError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CommandError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            lengths: b.lengths,
            warmup: b.warmup,
            reps: b.reps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: HcsaConfig,
    pub task: SyntheticTaskConfig,
    pub train: TrainConfig,
    pub bench: BenchSection,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// `gen-data` writes `train/` and `eval/` here; `train` reads `train/`.
    pub data_dir: PathBuf,
    /// Checkpoint and training report destination.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: HcsaConfig::desk(),
            task: SyntheticTaskConfig::default(),
            train: TrainConfig::default(),
            bench: BenchSection::default(),
            train_samples: 2000,
            eval_samples: 2000,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON config. Unknown keys are rejected by name.
    pub fn from_json(text: &str) -> Result<Self, CommandError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CommandError::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CommandError::Input(m) => CommandError::Input(format!("{}: {m}", path.display())),
            CommandError::Validation(m) => CommandError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Sets both the model and task seeds.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model.seed = s;
            self.task.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        let bad = |m: String| Err(CommandError::Validation(m));
        self.model.validate().map_err(|e| CommandError::Validation(e.to_string()))?;
        self.task.validate()?;
        let words = self.task.vocab().len();
        if self.model.question_vocab < words || self.model.answer_vocab < words {
            return bad(format!(
                "model vocabularies ({} question, {} answer) must hold the task's {words} words",
                self.model.question_vocab, self.model.answer_vocab
            ));
        }
        if self.model.video_dim != self.task.feature_dim {
            return bad(format!(
                "model.video_dim {} differs from task.feature_dim {}",
                self.model.video_dim, self.task.feature_dim
            ));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.train.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("train.clip_norm must be positive".into());
        }
        if !(self.model.learning_rate > 0.0 && self.model.learning_rate.is_finite()) {
            return bad("model.learning_rate must be positive".into());
        }
        if self.bench.reps < 5 || self.bench.lengths.contains(&0) {
            return bad("bench needs reps >= 5 and positive lengths".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Writes `train_samples` and `eval_samples` synthetic samples under
/// `out/train` and `out/eval`. Evaluation samples use indices past the
/// training range, so the sets never overlap.
pub fn cmd_gen_data(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf, CommandError> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.clone());
    let vocab = cfg.task.vocab();
    let train = data::generate_synthetic_range(&cfg.task, 0, cfg.train_samples)?;
    let eval = data::generate_synthetic_range(&cfg.task, cfg.train_samples as u64, cfg.eval_samples)?;
    data::save_dataset(&train, &dir.join("train"), &vocab).map_err(|e| CommandError::Runtime(e.to_string()))?;
    data::save_dataset(&eval, &dir.join("eval"), &vocab).map_err(|e| CommandError::Runtime(e.to_string()))?;
    log::info!("wrote {} + {} samples to {}", train.len(), eval.len(), dir.display());
    Ok(dir)
}

/// Trains on `data_dir/train`, writing the checkpoint after every epoch
/// and the report at the end.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<(Checkpoint, TrainReport), CommandError> {
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone());
    let vocab = cfg.task.vocab();
    let samples = data::load_dataset(&cfg.data_dir.join("train"), &vocab)?;
    let mut model = HcsaModel::new(cfg.model.clone())?;
    log::info!("training {} parameters on {} samples", model.count_params(), samples.len());
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let snapshot = |model: &HcsaModel, step: usize| Checkpoint {
        config: cfg.clone(),
        vocab: vocab.clone(),
        step: step as u64,
        model: model.clone(),
    };
    let report = training::train(&mut model, &samples, &cfg.train, |_, m, r| {
        write(&ckpt_path, snapshot(m, r.steps()).to_bytes()).map_err(|e| TrainError::Model(ModelError::Input(e.to_string())))
    })?;
    let ckpt = snapshot(&model, report.steps());
    write(&ckpt_path, ckpt.to_bytes())?;
    write(
        &out_dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    Ok((ckpt, report))
}

/// Greedy answers for every sample in `dataset`, one JSON line each.
pub fn cmd_infer(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Vec<AnswerRecord>, CommandError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let samples = data::load_dataset(dataset, &ckpt.vocab)?;
    let mut lines = String::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let answer = ckpt.model.predict(s)?;
        let rec = AnswerRecord {
            id: s.id.clone(),
            answer: ckpt.vocab.decode(&answer).join(" "),
            type_tag: Some(s.type_tag.clone()),
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
        records.push(rec);
    }
    write(out, lines)?;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OracleKind {
    #[default]
    Exact,
    Synonyms,
    Taxonomy,
}

/// Builds the similarity oracle; the synonym and taxonomy modes need a file.
pub fn build_oracle(kind: OracleKind, file: Option<&Path>) -> Result<SimilarityOracle, CommandError> {
    let need = |what: &str| CommandError::Input(format!("the {what} oracle needs a file (--taxonomy PATH)"));
    Ok(match kind {
        OracleKind::Exact => SimilarityOracle::Exact,
        OracleKind::Synonyms => SimilarityOracle::load_synonyms(file.ok_or_else(|| need("synonym"))?)?,
        OracleKind::Taxonomy => SimilarityOracle::Taxonomy(Taxonomy::load(file.ok_or_else(|| need("taxonomy"))?)?),
    })
}

/// References from a JSONL answers file, or from a dataset directory's
/// manifest.
pub fn load_references(path: &Path) -> Result<Vec<AnswerRecord>, CommandError> {
    if path.is_dir() {
        Ok(data::load_manifest(path)?
            .into_iter()
            .map(|e| AnswerRecord {
                id: e.id,
                answer: e.answer.join(" "),
                type_tag: e.type_tag,
            })
            .collect())
    } else {
        Ok(metrics::read_answers(path)?)
    }
}

/// Scores predictions against references and writes the report as JSON.
pub fn cmd_eval(predictions: &Path, references: &Path, oracle: &SimilarityOracle, out: Option<&Path>) -> Result<EvalReport, CommandError> {
    let preds = metrics::read_answers(predictions)?;
    let refs = load_references(references)?;
    let report = metrics::evaluate(&preds, &refs, oracle)?;
    if let Some(out) = out {
        write(out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report)
}

/// Runs the encoder benchmark and writes the CSV.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<Vec<bench::BenchResult>, CommandError> {
    let bc = BenchConfig {
        lengths: cfg.bench.lengths.clone(),
        warmup: cfg.bench.warmup,
        reps: cfg.bench.reps,
        seed: cfg.model.seed,
    };
    let mut model_cfg = cfg.model.clone();
    model_cfg.max_video_len = model_cfg.max_video_len.max(bc.lengths.iter().copied().max().unwrap_or(1));
    let results = bench::run_bench(&model_cfg, &bc)?;
    write(out, bench::to_csv(&results))?;
    Ok(results)
}

/// Gradient check of the configured model on the first synthetic sample.
/// Fails when the worst relative error reaches the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig, eps: f64) -> Result<GradCheckReport, CommandError> {
    let model = HcsaModel::new(cfg.model.clone())?;
    if model.count_params() > 50_000 {
        log::warn!("gradient check over {} parameters will be slow", model.count_params());
    }
    let sample = data::generate_synthetic_range(&cfg.task, 0, 1)?.remove(0);
    let report = training::gradient_check(&model, &sample, eps)?;
    if report.max_relative_error >= GRADCHECK_TOLERANCE {
        return Err(CommandError::Runtime(format!(
            "max relative error {:.3e} at {}[{}] exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_relative_error, report.worst_parameter, report.worst_index
        )));
    }
    Ok(report)
}
