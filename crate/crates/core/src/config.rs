//! Model hyperparameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config: {0}")]
pub struct ConfigError(pub String);

/// Which video encoder feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Hierarchical convolutional self-attention stack.
    #[default]
    Hcsa,
    /// Order-free baseline: the projected features averaged into one vector.
    MeanPool,
}

/// Component switches used for ablation runs. All off is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Segment attention replaced by uniform (mean-pool) weights.
    pub asu_mean_pool: bool,
    /// Question-aware self-attention replaced by plain pairwise self-attention.
    pub qsu_plain_self_attention: bool,
    /// Self-attention unit removed entirely.
    pub without_qsu: bool,
    /// Decoder attends only the top encoder layer.
    pub top_layer_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HcsaConfig {
    /// Number of convolutional self-attention layers (L).
    pub layers: usize,
    /// Segmentation factor (H): each layer shrinks the sequence by this factor.
    pub segment_factor: usize,
    /// Decoder attends the top `top_k` encoder layers (K).
    pub top_k: usize,
    /// Convolution kernel width (k), odd.
    pub kernel_width: usize,
    /// Width of every encoder element and of the decoder hidden state (d).
    pub model_dim: usize,
    /// Input video feature width.
    pub video_dim: usize,
    /// Per-direction hidden width of the question BiGRU.
    pub question_dim: usize,
    /// Word embedding width for question and answer tokens.
    pub word_dim: usize,
    /// Inner width of all additive attention scorers.
    pub attn_dim: usize,
    pub question_vocab: usize,
    pub answer_vocab: usize,
    pub max_video_len: usize,
    pub max_question_len: usize,
    /// Upper bound on generated answer length.
    pub max_answer_len: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub encoder: EncoderKind,
    pub ablation: Ablation,
}

impl Default for HcsaConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            segment_factor: 4,
            top_k: 2,
            kernel_width: 5,
            model_dim: 256,
            video_dim: 500,
            question_dim: 256,
            word_dim: 300,
            attn_dim: 256,
            question_vocab: 10_000,
            answer_vocab: 10_000,
            max_video_len: 512,
            max_question_len: 32,
            max_answer_len: 8,
            learning_rate: 0.001,
            seed: 0,
            encoder: EncoderKind::Hcsa,
            ablation: Ablation::default(),
        }
    }
}

impl HcsaConfig {
    /// Desk-scale widths for CPU training on the synthetic task.
    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            video_dim: 32,
            question_dim: 32,
            word_dim: 32,
            attn_dim: 64,
            question_vocab: 64,
            answer_vocab: 64,
            ..Self::default()
        }
    }

    /// Tiny configuration used for finite-difference gradient checks.
    pub fn micro() -> Self {
        Self {
            layers: 2,
            segment_factor: 2,
            top_k: 2,
            kernel_width: 3,
            model_dim: 8,
            video_dim: 8,
            question_dim: 4,
            word_dim: 6,
            attn_dim: 8,
            question_vocab: 20,
            answer_vocab: 20,
            max_video_len: 64,
            ..Self::default()
        }
    }

    /// Number of encoder layers the decoder actually attends.
    pub fn attended_layers(&self) -> usize {
        match self.encoder {
            EncoderKind::MeanPool => 1,
            EncoderKind::Hcsa if self.ablation.top_layer_only => 1,
            EncoderKind::Hcsa => self.top_k,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.layers < 1 {
            return err("layers must be >= 1".into());
        }
        if self.segment_factor < 1 {
            return err("segment_factor must be >= 1".into());
        }
        if self.top_k < 1 || self.top_k > self.layers {
            return err(format!("top_k must lie in 1..={}, got {}", self.layers, self.top_k));
        }
        if self.kernel_width % 2 == 0 {
            return err(format!("kernel_width must be odd, got {}", self.kernel_width));
        }
        let dims = [
            ("model_dim", self.model_dim),
            ("video_dim", self.video_dim),
            ("question_dim", self.question_dim),
            ("word_dim", self.word_dim),
            ("attn_dim", self.attn_dim),
            ("max_video_len", self.max_video_len),
            ("max_question_len", self.max_question_len),
            ("max_answer_len", self.max_answer_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return err(format!("{name} must be >= 1"));
        }
        if self.model_dim % 2 != 0 {
            return err(format!("model_dim must be even for position encoding, got {}", self.model_dim));
        }
        // four reserved answer ids plus at least one word
        if self.answer_vocab < 5 || self.question_vocab < 1 {
            return err("vocabularies too small".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}
