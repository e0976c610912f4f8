//! Samples, the synthetic event-order task, and dataset I/O.
//!
//! On disk a dataset is a directory holding `manifest.jsonl` (one sample per
//! line) and one binary feature file per sample:
//!
//! ```text
//! "HCSF" | u32 version = 1 | u32 n | u32 d_v | n·d_v × f32   (little endian)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const FEATURE_MAGIC: &[u8; 4] = b"HCSF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub const QUESTION_TYPES: [&str; 5] = ["object", "number", "color", "location", "action"];
pub const SYNTHETIC_TYPE: &str = "synthetic";

/// Event names double as answer words; their count bounds `event_types`.
pub const EVENT_NAMES: [&str; 16] = [
    "jump", "run", "swim", "climb", "throw", "catch", "dance", "sing", "cook", "read", "write", "paint", "ride", "kick",
    "push", "pull",
];

const TEMPLATES: [&[&str]; 4] = [
    &["what", "happens", "after", "{}"],
    &["what", "does", "the", "person", "do", "after", "{}", "?"],
    &["which", "event", "comes", "next", "after", "the", "{}", "?"],
    &["after", "the", "{}", "what", "follows", "?"],
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt feature file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: unsupported feature file version {found} (expected {FEATURE_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}: feature width {found} does not match expected {expected}")]
    Shape { path: PathBuf, expected: usize, found: usize },
    #[error("{path}:{line}: bad manifest entry: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("invalid synthetic task config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

/// One (video, question, answer) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[n × d_v]`.
    pub features: Tensor,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub type_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub seq_len: usize,
    pub feature_dim: usize,
    pub event_types: usize,
    pub events_per_sequence: usize,
    pub min_span: usize,
    pub max_span: usize,
    /// Standard deviation of the Gaussian background and per-event noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            seq_len: 48,
            feature_dim: 32,
            event_types: 5,
            events_per_sequence: 5,
            min_span: 4,
            max_span: 8,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.event_types < 2 || self.event_types > EVENT_NAMES.len() {
            return bad(format!("event_types must lie in 2..={}, got {}", EVENT_NAMES.len(), self.event_types));
        }
        if self.events_per_sequence < 2 || self.events_per_sequence > self.event_types {
            return bad(format!(
                "events_per_sequence must lie in 2..={} (distinct types), got {}",
                self.event_types, self.events_per_sequence
            ));
        }
        if self.min_span == 0 || self.min_span > self.max_span {
            return bad(format!("bad span range {}..={}", self.min_span, self.max_span));
        }
        if self.events_per_sequence * self.max_span > self.seq_len {
            return bad(format!(
                "cannot place {} events of up to {} frames in {} frames",
                self.events_per_sequence, self.max_span, self.seq_len
            ));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }

    /// Specials, template words, then the event names in use.
    pub fn vocab(&self) -> Vocab {
        let template = TEMPLATES.iter().flat_map(|t| t.iter()).filter(|w| **w != "{}").copied();
        Vocab::new(template.chain(EVENT_NAMES[..self.event_types.min(EVENT_NAMES.len())].iter().copied()))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// One prototype feature vector per event type, shared by every sample
    /// generated under this seed.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = self.rng(u64::MAX);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.event_types)
            .map(|_| (0..self.feature_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }
}

/// Samples `start..start+count` of the task defined by `cfg`. Sample `i`
/// draws from its own RNG stream, so any index range is reproducible on
/// its own.
pub fn generate_synthetic_range(cfg: &SyntheticTaskConfig, start: u64, count: usize) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let vocab = cfg.vocab();
    let protos = cfg.prototypes();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| DataError::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for index in start..start + count as u64 {
        let mut rng = cfg.rng(index);
        let mut types: Vec<usize> = (0..cfg.event_types).collect();
        types.shuffle(&mut rng);
        types.truncate(cfg.events_per_sequence);
        let spans: Vec<usize> = types.iter().map(|_| rng.gen_range(cfg.min_span..=cfg.max_span)).collect();

        // free frames split into k+1 gaps by sorted cut points
        let free = cfg.seq_len - spans.iter().sum::<usize>();
        let mut cuts: Vec<usize> = (0..types.len()).map(|_| rng.gen_range(0..=free)).collect();
        cuts.sort_unstable();

        let (n, d) = (cfg.seq_len, cfg.feature_dim);
        let mut data: Vec<f64> = (0..n * d).map(|_| noise.sample(&mut rng)).collect();
        let mut pos = 0;
        let mut prev_cut = 0;
        for (e, (&ty, &span)) in types.iter().zip(&spans).enumerate() {
            pos += cuts[e] - prev_cut;
            prev_cut = cuts[e];
            for frame in pos..pos + span {
                for (v, p) in data[frame * d..(frame + 1) * d].iter_mut().zip(&protos[ty]) {
                    *v += p;
                }
            }
            pos += span;
        }
        // stored as f32 on disk; keep memory and disk identical
        data.iter_mut().for_each(|v| *v = *v as f32 as f64);

        let asked = rng.gen_range(0..types.len() - 1);
        let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
        let question: Vec<&str> = template
            .iter()
            .map(|w| if *w == "{}" { EVENT_NAMES[types[asked]] } else { w })
            .collect();
        let answer = [EVENT_NAMES[types[asked + 1]]];
        out.push(Sample {
            id: format!("syn{index:06}"),
            features: Tensor::new(vec![n, d], data).map_err(|e| DataError::Config(e.to_string()))?,
            question: vocab.encode(&question),
            answer: vocab.encode(&answer),
            type_tag: SYNTHETIC_TYPE.to_owned(),
        });
    }
    Ok(out)
}

pub fn generate_synthetic_dataset(cfg: &SyntheticTaskConfig, count: usize) -> Result<Vec<Sample>, DataError> {
    generate_synthetic_range(cfg, 0, count)
}

/// Keeps rows `floor(i·n/max_len)` when `n > max_len`.
pub fn downsample(features: &Tensor, max_len: usize) -> Tensor {
    let n = features.rows();
    if n <= max_len {
        return features.clone();
    }
    let idx: Vec<usize> = (0..max_len).map(|i| i * n / max_len).collect();
    features.select_rows(&idx)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<(), DataError> {
    let (n, d) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(16 + 4 * n * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a feature file; `expected_dim` enforces the row width.
pub fn read_features(path: &Path, expected_dim: Option<usize>) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| DataError::Corrupt {
        path: path.to_owned(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(corrupt(format!("header needs 16 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(DataError::Version {
            path: path.to_owned(),
            found: version,
        });
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    if n == 0 || d == 0 {
        return Err(corrupt(format!("empty shape {n}x{d}")));
    }
    if let Some(expected) = expected_dim {
        if d != expected {
            return Err(DataError::Shape {
                path: path.to_owned(),
                expected,
                found: d,
            });
        }
    }
    let payload = &bytes[16..];
    if payload.len() != 4 * n * d {
        return Err(corrupt(format!("expected {} payload bytes, found {}", 4 * n * d, payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![n, d], data).map_err(|e| corrupt(e.to_string()))
}

/// One manifest line. Keys beyond these are kept in `extra` and ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub features_file: String,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    #[serde(rename = "type", default)]
    pub type_tag: Option<String>,
    #[serde(flatten, skip_serializing)]
    pub extra: HashMap<String, serde_json::Value>,
}

pub fn save_dataset(samples: &[Sample], dir: &Path, vocab: &Vocab) -> Result<(), DataError> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(io_err(&feat_dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    for s in samples {
        let rel = format!("features/{}.hcsf", s.id);
        write_features(&dir.join(&rel), &s.features)?;
        let entry = ManifestEntry {
            id: s.id.clone(),
            features_file: rel,
            question: vocab.decode(&s.question),
            answer: vocab.decode(&s.answer),
            type_tag: Some(s.type_tag.clone()),
            extra: HashMap::new(),
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(manifest, "{line}").map_err(io_err(&manifest_path))?;
    }
    Ok(())
}

/// Parses `dir/manifest.jsonl` without touching the feature files. Unknown
/// keys are ignored with a warning.
pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::open(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&manifest_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DataError::Manifest {
            path: manifest_path.clone(),
            line: i + 1,
            reason,
        };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !entry.extra.is_empty() {
            let mut keys: Vec<&String> = entry.extra.keys().collect();
            keys.sort();
            log::warn!("{}:{}: ignoring unknown keys {keys:?}", manifest_path.display(), i + 1);
        }
        if entry.question.is_empty() || entry.answer.is_empty() {
            return Err(bad("question and answer must be non-empty".into()));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every sample listed in `dir/manifest.jsonl`. All feature files
/// must share one row width.
pub fn load_dataset(dir: &Path, vocab: &Vocab) -> Result<Vec<Sample>, DataError> {
    let mut samples = Vec::new();
    let mut dim = None;
    for entry in load_manifest(dir)? {
        let features = read_features(&dir.join(&entry.features_file), dim)?;
        dim = Some(features.cols());
        samples.push(Sample {
            id: entry.id,
            features,
            question: vocab.encode(&entry.question),
            answer: vocab.encode(&entry.answer),
            type_tag: entry.type_tag.unwrap_or_else(|| SYNTHETIC_TYPE.to_owned()),
        });
    }
    Ok(samples)
}
