//! GRU answer generator with multi-scale attention over the top encoder layers.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::HcsaConfig;
use crate::encoder::{EncoderOutput, QuestionEncoding};
use crate::error::{ModelError, ModelResult};
use crate::nn::{Gru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};
use crate::vocab::{BOS, EOS};

/// `β_i = w^T tanh(W¹ h^l_i + W² h^a + W³ h^Q + b)` over one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub element: ParamId,
    pub hidden: ParamId,
    pub question: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
}

/// An encoder layer with its element projections `h^l·W¹` computed once.
#[derive(Debug, Clone, Copy)]
pub struct PreparedLayer {
    pub seq: Var,
    keys: Var,
}

impl LayerAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &HcsaConfig) -> Self {
        let (d, a, dq2) = (cfg.model_dim, cfg.attn_dim, 2 * cfg.question_dim);
        Self {
            element: store.add_uniform(format!("{name}.element"), &[d, a], d, rng),
            hidden: store.add_uniform(format!("{name}.hidden"), &[d, a], d, rng),
            question: store.add_uniform(format!("{name}.question"), &[dq2, a], dq2, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[a]),
            score: store.add_uniform(format!("{name}.score"), &[a, 1], a, rng),
        }
    }

    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<PreparedLayer> {
        let w = self.element.var(tape, store);
        let keys = tape.matmul(seq, w)?;
        Ok(PreparedLayer { seq, keys })
    }

    /// Returns `v^l = Σ_i softmax(β)_i h^l_i` as `[1×d]` and the weights `[n×1]`.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, layer: &PreparedLayer, hidden: Var, global: Var) -> Result<(Var, Var)> {
        let n = tape.value(layer.seq).rows();
        let wh = self.hidden.var(tape, store);
        let wq = self.question.var(tape, store);
        let b = self.bias.var(tape, store);
        let hp = tape.matmul(hidden, wh)?;
        let qp = tape.matmul(global, wq)?;
        let ctx = tape.add(hp, qp)?;
        let width = tape.value(b).numel();
        let b = tape.reshape(b, &[1, width])?;
        let ctx = tape.add(ctx, b)?;
        let ctx = tape.repeat_rows(ctx, n)?;
        let pre = tape.add(layer.keys, ctx)?;
        let act = tape.tanh(pre)?;
        let w = self.score.var(tape, store);
        let scores = tape.matmul(act, w)?;
        let weights = tape.softmax(scores, 0)?;
        let wt = tape.transpose(weights)?;
        let v = tape.matmul(wt, layer.seq)?;
        Ok((v, weights))
    }
}

/// Decoder recurrence state `h^a_t`.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: Var,
    pub step: usize,
}

/// Logits over the answer vocabulary with derived probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerDistribution {
    pub logits: Vec<f64>,
}

impl AnswerDistribution {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            logits: t.data().to_vec(),
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    /// Highest logit, lowest id on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Everything a decode step reads from the encoder side.
#[derive(Debug, Clone)]
pub struct DecoderContext {
    /// Attended layers, lowest first.
    pub layers: Vec<PreparedLayer>,
    pub global: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `[1×T]`.
    pub logits: Var,
    pub state: DecoderState,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embedding: ParamId,
    /// One attention block per attended layer, lowest first.
    pub attention: Vec<LayerAttention>,
    pub gru: Gru,
    pub output: Linear,
    vocab: usize,
    model_dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &HcsaConfig) -> Self {
        let embedding = store.add_uniform("decoder.embedding", &[cfg.answer_vocab, cfg.word_dim], cfg.word_dim, rng);
        let attention = (0..cfg.attended_layers())
            .map(|i| LayerAttention::new(store, rng, &format!("decoder.attention{i}"), cfg))
            .collect();
        let input = cfg.word_dim + 2 * cfg.question_dim + cfg.model_dim;
        Self {
            embedding,
            attention,
            gru: Gru::new(store, rng, "decoder.gru", input, cfg.model_dim),
            output: Linear::new(store, rng, "decoder.output", cfg.model_dim, cfg.answer_vocab, true),
            vocab: cfg.answer_vocab,
            model_dim: cfg.model_dim,
        }
    }

    pub fn top_k(&self) -> usize {
        self.attention.len()
    }

    /// Selects the top `K` encoder layers and precomputes their projections.
    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, enc: &EncoderOutput, q: &QuestionEncoding) -> ModelResult<DecoderContext> {
        let k = self.top_k();
        let total = enc.layers.len();
        if k == 0 || k > total {
            return Err(crate::config::ConfigError(format!("top_k {k} out of range for {total} encoder layers")).into());
        }
        let layers = enc.layers[total - k..]
            .iter()
            .zip(&self.attention)
            .map(|(&seq, att)| att.prepare(tape, store, seq))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderContext { layers, global: q.global })
    }

    pub fn initial_state(&self, tape: &mut Tape) -> DecoderState {
        DecoderState {
            hidden: tape.constant(Tensor::zeros(&[1, self.model_dim])),
            step: 0,
        }
    }

    /// `h^v = (1/K) Σ v^l` over the attended layers, using the pre-update
    /// hidden state. Also returns each layer's attention weights.
    pub fn multiscale_context(&self, tape: &mut Tape, store: &ParamStore, ctx: &DecoderContext, hidden: Var) -> Result<(Var, Vec<Var>)> {
        let mut vs = Vec::with_capacity(ctx.layers.len());
        let mut betas = Vec::with_capacity(ctx.layers.len());
        for (layer, att) in ctx.layers.iter().zip(&self.attention) {
            let (v, w) = att.attend(tape, store, layer, hidden, ctx.global)?;
            vs.push(v);
            betas.push(w);
        }
        let stacked = tape.concat(&vs, 0)?;
        let mean = tape.mean(stacked, 0)?;
        Ok((tape.reshape(mean, &[1, self.model_dim])?, betas))
    }

    /// `x_t = [w_t ; h^Q ; h^v_t]`, `h^a_t = GRU(x_t, h^a_{t-1})`, logits `W_a h^a_t + b_a`.
    pub fn decode_step(&self, tape: &mut Tape, store: &ParamStore, prev_token: usize, state: DecoderState, ctx: &DecoderContext) -> ModelResult<StepOutput> {
        if prev_token >= self.vocab {
            return Err(ModelError::Input(format!(
                "answer token {prev_token} outside vocabulary of {}",
                self.vocab
            )));
        }
        let table = self.embedding.var(tape, store);
        let word = tape.gather(table, &[prev_token])?;
        let (video, _) = self.multiscale_context(tape, store, ctx, state.hidden)?;
        let x = tape.concat(&[word, ctx.global, video], 1)?;
        let xp = self.gru.project_inputs(tape, store, x)?;
        let hidden = self.gru.step(tape, store, xp, state.hidden)?;
        let logits = self.output.forward(tape, store, hidden)?;
        Ok(StepOutput {
            logits,
            state: DecoderState {
                hidden,
                step: state.step + 1,
            },
        })
    }

    /// Feeds `BOS, targets[..r-1]` and returns the `[r×T]` logits aligned
    /// with `targets`.
    pub fn teacher_forced_logits(&self, tape: &mut Tape, store: &ParamStore, ctx: &DecoderContext, targets: &[usize]) -> ModelResult<Var> {
        if targets.is_empty() {
            return Err(ModelError::Input("empty answer".into()));
        }
        let mut state = self.initial_state(tape);
        let mut rows = Vec::with_capacity(targets.len());
        let mut prev = BOS;
        for &t in targets {
            let out = self.decode_step(tape, store, prev, state, ctx)?;
            rows.push(out.logits);
            state = out.state;
            prev = t;
        }
        Ok(tape.concat(&rows, 0)?)
    }

    /// Greedy decoding from `BOS` until `EOS` or `max_len` tokens.
    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, ctx: &DecoderContext, max_len: usize) -> ModelResult<Vec<usize>> {
        let mut state = self.initial_state(tape);
        let mut prev = BOS;
        let mut answer = Vec::new();
        while answer.len() < max_len {
            let out = self.decode_step(tape, store, prev, state, ctx)?;
            let next = AnswerDistribution::from_tensor(tape.value(out.logits)).argmax();
            if next == EOS {
                break;
            }
            answer.push(next);
            state = out.state;
            prev = next;
        }
        Ok(answer)
    }
}
