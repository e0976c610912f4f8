//! Wallclock comparison of the hierarchical convolutional encoder against a
//! parameter-matched recurrent encoder.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::HcsaConfig;
use crate::encoder::{QuestionEncoding, VideoEncoder};
use crate::error::{ModelError, ModelResult};
use crate::nn::{Gru, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "encoder,length,mode,mean_ms,stddev_ms,params";

/// Stacked GRU layers of width `d` over the projected video sequence.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    pub projection: Linear,
    pub layers: Vec<Gru>,
}

impl RecurrentEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, video_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            projection: Linear::new(store, rng, "gru_encoder.projection", video_dim, width, true),
            layers: (0..depth)
                .map(|i| Gru::new(store, rng, &format!("gru_encoder.layer{i}"), width, width))
                .collect(),
        }
    }

    /// Parameters of one `d → d` GRU layer.
    pub fn layer_params(width: usize) -> usize {
        2 * (width * 3 * width + 3 * width)
    }

    /// Depth whose parameter count lands closest to `target`.
    pub fn matched_depth(video_dim: usize, width: usize, target: usize) -> usize {
        let base = video_dim * width + width;
        let per = Self::layer_params(width) as f64;
        ((target.saturating_sub(base)) as f64 / per).round().max(1.0) as usize
    }

    /// Hidden states of the top layer, `[n × d]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, features: &Tensor) -> ModelResult<Var> {
        let x = tape.constant(features.clone());
        let mut h = self.projection.forward(tape, store, x)?;
        for gru in &self.layers {
            let states = gru.run(tape, store, h, false)?;
            h = tape.concat(&states, 0)?;
        }
        Ok(h)
    }
}

/// Trimmed timing statistics in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub reps: usize,
}

impl Timing {
    /// Drops the fastest and slowest run (when at least three) and reports
    /// the mean and sample standard deviation of the rest.
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let kept = if s.len() >= 3 { &s[1..s.len() - 1] } else { &s[..] };
        let n = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / n;
        let var = if kept.len() > 1 {
            kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_ms: mean,
            stddev_ms: var.sqrt(),
            reps: samples_ms.len(),
        }
    }

    /// `sqrt((σ_a² + σ_b²) / 2)`.
    pub fn pooled_stddev(&self, other: &Timing) -> f64 {
        ((self.stddev_ms.powi(2) + other.stddev_ms.powi(2)) / 2.0).sqrt()
    }

    /// True when the means differ by more than two pooled deviations.
    pub fn separated_from(&self, other: &Timing) -> bool {
        (self.mean_ms - other.mean_ms).abs() > 2.0 * self.pooled_stddev(other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub encoder: String,
    pub length: usize,
    pub params: usize,
    pub forward: Timing,
    pub forward_backward: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![64, 128, 256, 512],
            warmup: 3,
            reps: 10,
            seed: 0,
        }
    }
}

/// The two encoders under comparison, built with their own parameter
/// stores so each count covers only the video encoder.
pub struct BenchModels {
    pub hcsa: VideoEncoder,
    pub hcsa_params: ParamStore,
    pub gru: RecurrentEncoder,
    pub gru_params: ParamStore,
    question: (Tensor, Tensor),
}

impl BenchModels {
    pub fn new(cfg: &HcsaConfig, seed: u64) -> ModelResult<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hcsa_params = ParamStore::new();
        let hcsa = VideoEncoder::new(&mut hcsa_params, &mut rng, cfg);
        let depth = RecurrentEncoder::matched_depth(cfg.video_dim, cfg.model_dim, hcsa_params.count());
        let mut gru_params = ParamStore::new();
        let gru = RecurrentEncoder::new(&mut gru_params, &mut rng, cfg.video_dim, cfg.model_dim, depth);
        let dq = 2 * cfg.question_dim;
        let mut rand_t = |rows: usize| {
            Tensor::new(vec![rows, dq], (0..rows * dq).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
        };
        let question = (rand_t(6), rand_t(1));
        Ok(Self {
            hcsa,
            hcsa_params,
            gru,
            gru_params,
            question,
        })
    }

    fn features(&self, n: usize, seed: u64) -> Tensor {
        let d = self.hcsa_params.get(self.hcsa.projection.weight).rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
    }

    /// One HCSA pass; the probe loss sums every layer's output.
    pub fn run_hcsa(&self, features: &Tensor, backward: bool) -> ModelResult<()> {
        let mut tape = Tape::new();
        let q = QuestionEncoding {
            contexts: tape.constant(self.question.0.clone()),
            global: tape.constant(self.question.1.clone()),
        };
        let out = self.hcsa.encode(&mut tape, &self.hcsa_params, features, &q)?;
        if backward {
            let mut total = tape.sum(out.layers[0])?;
            for &l in &out.layers[1..] {
                let s = tape.sum(l)?;
                total = tape.add(total, s)?;
            }
            tape.backward(total)?;
        }
        Ok(())
    }

    /// One recurrent pass; the probe loss sums the top layer's states.
    pub fn run_gru(&self, features: &Tensor, backward: bool) -> ModelResult<()> {
        let mut tape = Tape::new();
        let h = self.gru.encode(&mut tape, &self.gru_params, features)?;
        if backward {
            let s = tape.sum(h)?;
            tape.backward(s)?;
        }
        Ok(())
    }
}

fn time(warmup: usize, reps: usize, mut f: impl FnMut() -> ModelResult<()>) -> ModelResult<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing::from_samples(&samples))
}

/// Times both encoders at every length. Feature generation happens outside
/// the timed region.
pub fn run_bench(cfg: &HcsaConfig, bench: &BenchConfig) -> ModelResult<Vec<BenchResult>> {
    if bench.reps < 5 {
        return Err(ModelError::Input(format!("at least 5 repetitions required, got {}", bench.reps)));
    }
    if bench.lengths.iter().any(|&n| n == 0) {
        return Err(ModelError::Input("benchmark lengths must be positive".into()));
    }
    let models = BenchModels::new(cfg, bench.seed)?;
    let mut out = Vec::with_capacity(2 * bench.lengths.len());
    for &n in &bench.lengths {
        let features = models.features(n, bench.seed);
        log::info!("benchmarking length {n}");
        out.push(BenchResult {
            encoder: "hcsa".into(),
            length: n,
            params: models.hcsa_params.count(),
            forward: time(bench.warmup, bench.reps, || models.run_hcsa(&features, false))?,
            forward_backward: time(bench.warmup, bench.reps, || models.run_hcsa(&features, true))?,
        });
        out.push(BenchResult {
            encoder: "gru".into(),
            length: n,
            params: models.gru_params.count(),
            forward: time(bench.warmup, bench.reps, || models.run_gru(&features, false))?,
            forward_backward: time(bench.warmup, bench.reps, || models.run_gru(&features, true))?,
        });
    }
    Ok(out)
}

/// One CSV row per encoder, length and mode.
pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        for (mode, t) in [("forward", r.forward), ("forward_backward", r.forward_backward)] {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{}",
                r.encoder, r.length, mode, t.mean_ms, t.stddev_ms, r.params
            );
        }
    }
    s
}

/// Fixed-width table for terminal output.
pub fn summary_table(results: &[BenchResult]) -> String {
    let mut s = format!(
        "{:<8} {:>7} {:>10} {:>16} {:>22}\n",
        "encoder", "length", "params", "forward ms", "forward+backward ms"
    );
    for r in results {
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>10} {:>9.3} ±{:>5.3} {:>15.3} ±{:>5.3}",
            r.encoder,
            r.length,
            r.params,
            r.forward.mean_ms,
            r.forward.stddev_ms,
            r.forward_backward.mean_ms,
            r.forward_backward.stddev_ms
        );
    }
    s
}
