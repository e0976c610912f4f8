//! Question BiGRU and the hierarchical convolutional self-attention video
//! encoder.
//!
//! Each encoder layer applies two gated convolution units, collapses every
//! run of `H` consecutive elements into one through question-guided
//! attention, then mixes the shortened sequence with self-attention whose
//! affinities are routed through the question words. Layer `l` therefore
//! holds `ceil(n_{l-1} / H)` elements.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{EncoderKind, HcsaConfig};
use crate::error::{ModelError, ModelResult};
use crate::nn::{Gru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor};

/// Per-word contexts `[m × 2d_q]` and the global question vector `[1 × 2d_q]`.
#[derive(Debug, Clone, Copy)]
pub struct QuestionEncoding {
    pub contexts: Var,
    pub global: Var,
}

#[derive(Debug, Clone)]
pub struct QuestionEncoder {
    pub embedding: ParamId,
    pub forward: Gru,
    pub backward: Gru,
    vocab: usize,
    max_len: usize,
}

impl QuestionEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &HcsaConfig) -> Self {
        let embedding = store.add_uniform(
            "question.embedding",
            &[cfg.question_vocab, cfg.word_dim],
            cfg.word_dim,
            rng,
        );
        Self {
            embedding,
            forward: Gru::new(store, rng, "question.gru_forward", cfg.word_dim, cfg.question_dim),
            backward: Gru::new(store, rng, "question.gru_backward", cfg.word_dim, cfg.question_dim),
            vocab: cfg.question_vocab,
            max_len: cfg.max_question_len,
        }
    }

    /// `contexts[i] = [forward_i ; backward_i]`, `global = [forward_m ; backward_1]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> ModelResult<QuestionEncoding> {
        if tokens.is_empty() {
            return Err(ModelError::Input("empty question".into()));
        }
        if tokens.len() > self.max_len {
            return Err(ModelError::Input(format!(
                "question has {} tokens, limit is {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(ModelError::Input(format!(
                "question token {bad} outside vocabulary of {}",
                self.vocab
            )));
        }
        let table = self.embedding.var(tape, store);
        let words = tape.gather(table, tokens)?;
        let fwd = self.forward.run(tape, store, words, false)?;
        let bwd = self.backward.run(tape, store, words, true)?;
        let f = tape.concat(&fwd, 0)?;
        let b = tape.concat(&bwd, 0)?;
        let contexts = tape.concat(&[f, b], 1)?;
        let global = tape.concat(&[fwd[fwd.len() - 1], bwd[0]], 1)?;
        Ok(QuestionEncoding { contexts, global })
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^{2i/d})`, `PE[p, 2i+1] = cos(…)`.
pub fn position_encoding(n: usize, d: usize) -> ModelResult<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(ModelError::Input(format!("position encoding width must be even, got {d}")));
    }
    if n == 0 {
        return Err(ModelError::Input("position encoding length must be positive".into()));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Width-`k` convolution to `2d` channels, GLU gate, residual.
#[derive(Debug, Clone)]
pub struct ConvGluUnit {
    pub conv: Linear,
    kernel: usize,
    dim: usize,
}

impl ConvGluUnit {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, kernel: usize, dim: usize) -> Self {
        Self {
            conv: Linear::new(store, rng, name, kernel * dim, 2 * dim, true),
            kernel,
            dim,
        }
    }

    /// `o_i = A ⊗ σ(B) + h_i` with `[A; B] = W[h_{i-k/2}; …; h_{i+k/2}] + b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let windows = tape.im2col(seq, self.kernel)?;
        let y = self.conv.forward(tape, store, windows)?;
        let a = tape.slice(y, 1, 0..self.dim)?;
        let b = tape.slice(y, 1, self.dim..2 * self.dim)?;
        let gate = tape.sigmoid(b)?;
        let glu = tape.mul(a, gate)?;
        tape.add(glu, seq)
    }
}

/// Additive scorer parameters `w^T tanh(W¹ x + W² c + b)`.
#[derive(Debug, Clone)]
pub struct AdditiveScorer {
    pub element: ParamId,
    pub context: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
}

impl AdditiveScorer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, element: usize, context: usize, attn: usize) -> Self {
        Self {
            element: store.add_uniform(format!("{name}.element"), &[element, attn], element, rng),
            context: store.add_uniform(format!("{name}.context"), &[context, attn], context, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[attn]),
            score: store.add_uniform(format!("{name}.score"), &[attn, 1], attn, rng),
        }
    }

    /// Projects context rows and folds in the bias: `[r×c] -> [r×a]`.
    fn context_rows(&self, tape: &mut Tape, store: &ParamStore, ctx: Var) -> Result<Var> {
        let w = self.context.var(tape, store);
        let proj = tape.matmul(ctx, w)?;
        let rows = tape.value(proj).rows();
        let b = self.bias.var(tape, store);
        let bb = tape.repeat_rows(b, rows)?;
        tape.add(proj, bb)
    }

    /// `tanh(pre) · w`, flattened to one score per row.
    fn score_rows(&self, tape: &mut Tape, store: &ParamStore, pre: Var) -> Result<Var> {
        let act = tape.tanh(pre)?;
        let w = self.score.var(tape, store);
        let s = tape.matmul(act, w)?;
        let n = tape.value(s).rows();
        tape.reshape(s, &[n])
    }
}

/// Output of attentive segmentation with the per-element weights used.
#[derive(Debug, Clone, Copy)]
pub struct Segmented {
    pub output: Var,
    /// Flat `[n_{l-1}]`; each consecutive run of `H` sums to one.
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct AttentiveSegmentation {
    /// `None` in the mean-pool ablation.
    pub scorer: Option<AdditiveScorer>,
    pub factor: usize,
}

impl AttentiveSegmentation {
    /// `s_i = Σ_j softmax_j(α_ij) o_j` over segment `i`; the last segment may
    /// hold fewer than `H` elements.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var, global: Var) -> Result<Segmented> {
        let n = tape.value(seq).rows();
        let scores = match &self.scorer {
            Some(sc) => {
                let we = sc.element.var(tape, store);
                let keys = tape.matmul(seq, we)?;
                let q = sc.context_rows(tape, store, global)?;
                let qq = tape.repeat_rows(q, n)?;
                let pre = tape.add(keys, qq)?;
                sc.score_rows(tape, store, pre)?
            }
            None => tape.constant(Tensor::zeros(&[n])),
        };
        let weights = tape.segment_softmax(scores, self.factor)?;
        let output = tape.segment_weighted_sum(weights, seq, self.factor)?;
        Ok(Segmented { output, weights })
    }
}

/// Output of the self-attention unit with its row-softmaxed affinity matrix.
#[derive(Debug, Clone, Copy)]
pub struct SelfAttended {
    pub output: Var,
    /// `[n_l × n_l]`, rows sum to one.
    pub attention: Var,
}

#[derive(Debug, Clone)]
pub struct QuestionAwareSelfAttention {
    pub scorer: AdditiveScorer,
    /// Plain pairwise self-attention that ignores the question.
    pub plain: bool,
}

impl QuestionAwareSelfAttention {
    /// `M_ij = w^T tanh(W¹ s_i + W² h^q_j + b)`, `D = M Mᵀ`,
    /// `h_i = s_i + Σ_j softmax_j(D_ij) s_j`.
    ///
    /// In plain mode `D_ij = w^T tanh(W¹ s_i + W² s_j + b)` directly.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var, contexts: Var) -> Result<SelfAttended> {
        let n = tape.value(seq).rows();
        let sc = &self.scorer;
        let we = sc.element.var(tape, store);
        let keys = tape.matmul(seq, we)?;
        let affinity = if self.plain {
            let others = sc.context_rows(tape, store, seq)?;
            let pre = tape.pairwise_add(keys, others)?;
            let d = sc.score_rows(tape, store, pre)?;
            tape.reshape(d, &[n, n])?
        } else {
            let m = tape.value(contexts).rows();
            let words = sc.context_rows(tape, store, contexts)?;
            let pre = tape.pairwise_add(keys, words)?;
            let flat = sc.score_rows(tape, store, pre)?;
            let mm = tape.reshape(flat, &[n, m])?;
            let mt = tape.transpose(mm)?;
            tape.matmul(mm, mt)?
        };
        let attention = tape.softmax(affinity, 1)?;
        let mixed = tape.matmul(attention, seq)?;
        let output = tape.add(seq, mixed)?;
        Ok(SelfAttended { output, attention })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub conv: [ConvGluUnit; 2],
    pub segmentation: AttentiveSegmentation,
    pub self_attention: Option<QuestionAwareSelfAttention>,
}

/// All `L` layer outputs plus the attention weights used to build them.
#[derive(Debug, Clone, Default)]
pub struct EncoderOutput {
    /// `layers[l]` is `[n_l × d]`.
    pub layers: Vec<Var>,
    pub segment_weights: Vec<Var>,
    pub self_attention: Vec<Var>,
}

impl EncoderOutput {
    pub fn lengths(&self, tape: &Tape) -> Vec<usize> {
        self.layers.iter().map(|&l| tape.value(l).rows()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub projection: Linear,
    pub layers: Vec<EncoderLayer>,
    kind: EncoderKind,
    model_dim: usize,
    video_dim: usize,
    max_len: usize,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &HcsaConfig) -> Self {
        let (d, a, dq2) = (cfg.model_dim, cfg.attn_dim, 2 * cfg.question_dim);
        let projection = Linear::new(store, rng, "video.projection", cfg.video_dim, d, true);
        let mut layers = Vec::new();
        if cfg.encoder == EncoderKind::Hcsa {
            for l in 0..cfg.layers {
                let p = format!("video.layer{l}");
                let conv = [
                    ConvGluUnit::new(store, rng, &format!("{p}.conv0"), cfg.kernel_width, d),
                    ConvGluUnit::new(store, rng, &format!("{p}.conv1"), cfg.kernel_width, d),
                ];
                let scorer = (!cfg.ablation.asu_mean_pool)
                    .then(|| AdditiveScorer::new(store, rng, &format!("{p}.segment"), d, dq2, a));
                let self_attention = (!cfg.ablation.without_qsu).then(|| {
                    let plain = cfg.ablation.qsu_plain_self_attention;
                    let ctx = if plain { d } else { dq2 };
                    QuestionAwareSelfAttention {
                        scorer: AdditiveScorer::new(store, rng, &format!("{p}.self_attention"), d, ctx, a),
                        plain,
                    }
                });
                layers.push(EncoderLayer {
                    conv,
                    segmentation: AttentiveSegmentation {
                        scorer,
                        factor: cfg.segment_factor,
                    },
                    self_attention,
                });
            }
        }
        Self {
            projection,
            layers,
            kind: cfg.encoder,
            model_dim: d,
            video_dim: cfg.video_dim,
            max_len: cfg.max_video_len,
        }
    }

    /// Projects `features [n × d_v]`, adds position encoding and runs every
    /// layer. The mean-pool baseline instead returns a single layer holding
    /// the average projected frame.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, features: &Tensor, q: &QuestionEncoding) -> ModelResult<EncoderOutput> {
        if features.rank() != 2 || features.cols() != self.video_dim {
            return Err(ModelError::Input(format!(
                "video features must be [n x {}], got {:?}",
                self.video_dim,
                features.shape()
            )));
        }
        let n = features.rows();
        if n > self.max_len {
            return Err(ModelError::Input(format!("video length {n} exceeds limit {}", self.max_len)));
        }
        let x = tape.constant(features.clone());
        let projected = self.projection.forward(tape, store, x)?;
        let mut out = EncoderOutput::default();
        if self.kind == EncoderKind::MeanPool {
            let mean = tape.mean(projected, 0)?;
            out.layers.push(tape.reshape(mean, &[1, self.model_dim])?);
            return Ok(out);
        }
        let pe = tape.constant(position_encoding(n, self.model_dim)?);
        let mut h = tape.add(projected, pe)?;
        for layer in &self.layers {
            let mut o = h;
            for unit in &layer.conv {
                o = unit.forward(tape, store, o)?;
            }
            let seg = layer.segmentation.forward(tape, store, o, q.global)?;
            out.segment_weights.push(seg.weights);
            h = match &layer.self_attention {
                Some(sa) => {
                    let att = sa.forward(tape, store, seg.output, q.contexts)?;
                    out.self_attention.push(att.attention);
                    att.output
                }
                None => seg.output,
            };
            out.layers.push(h);
        }
        Ok(out)
    }
}
