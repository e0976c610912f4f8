//! The full question-answering network: question encoder, video encoder and
//! answer decoder sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::HcsaConfig;
use crate::data::{downsample, Sample};
use crate::decoder::{Decoder, DecoderContext};
use crate::encoder::{EncoderOutput, QuestionEncoder, QuestionEncoding, VideoEncoder};
use crate::error::{ModelError, ModelResult};
use crate::params::ParamStore;
use crate::vocab::EOS;

/// Everything one forward pass produces before decoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub question: QuestionEncoding,
    pub video: EncoderOutput,
    pub context: DecoderContext,
}

#[derive(Debug, Clone)]
pub struct HcsaModel {
    pub config: HcsaConfig,
    pub params: ParamStore,
    pub question: QuestionEncoder,
    pub video: VideoEncoder,
    pub decoder: Decoder,
}

impl HcsaModel {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: HcsaConfig) -> ModelResult<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let question = QuestionEncoder::new(&mut params, &mut rng, &config);
        let video = VideoEncoder::new(&mut params, &mut rng, &config);
        let decoder = Decoder::new(&mut params, &mut rng, &config);
        Ok(Self {
            config,
            params,
            question,
            video,
            decoder,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Runs both encoders and prepares the decoder's per-layer keys.
    pub fn encode(&self, tape: &mut Tape, sample: &Sample) -> ModelResult<Encoded> {
        let features = downsample(&sample.features, self.config.max_video_len);
        let question = self.question.encode(tape, &self.params, &sample.question)?;
        let video = self.video.encode(tape, &self.params, &features, &question)?;
        let context = self.decoder.prepare(tape, &self.params, &video, &question)?;
        Ok(Encoded {
            question,
            video,
            context,
        })
    }

    /// Decoder targets for a sample: the answer followed by `EOS`.
    pub fn targets(&self, sample: &Sample) -> ModelResult<Vec<usize>> {
        if sample.answer.is_empty() {
            return Err(ModelError::Input(format!("sample {} has an empty answer", sample.id)));
        }
        if let Some(&bad) = sample.answer.iter().find(|&&t| t >= self.config.answer_vocab) {
            return Err(ModelError::Input(format!(
                "sample {}: answer token {bad} outside vocabulary of {}",
                sample.id, self.config.answer_vocab
            )));
        }
        let mut t = sample.answer.clone();
        t.push(EOS);
        Ok(t)
    }

    /// Summed negative log-likelihood of the answer (plus `EOS`) under
    /// teacher forcing, as a scalar on `tape`.
    pub fn sample_loss(&self, tape: &mut Tape, sample: &Sample) -> ModelResult<Var> {
        let targets = self.targets(sample)?;
        let enc = self.encode(tape, sample)?;
        let logits = self.decoder.teacher_forced_logits(tape, &self.params, &enc.context, &targets)?;
        let t: Vec<Option<usize>> = targets.into_iter().map(Some).collect();
        Ok(tape.cross_entropy(logits, &t)?)
    }

    /// Mean of `sample_loss` over `batch`.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[Sample]) -> ModelResult<Var> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let mut total = self.sample_loss(tape, &batch[0])?;
        for s in &batch[1..] {
            let l = self.sample_loss(tape, s)?;
            total = tape.add(total, l)?;
        }
        Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
    }

    /// Greedy answer for one sample.
    pub fn predict(&self, sample: &Sample) -> ModelResult<Vec<usize>> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, sample)?;
        self.decoder
            .generate(&mut tape, &self.params, &enc.context, self.config.max_answer_len)
    }
}
