//! Answer-quality metrics: sentence-level BLEU-1 and WUPS@γ over a
//! pluggable word-similarity oracle.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
}

/// Lowercases, splits on whitespace and strips punctuation from each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// A concept tree given as child → parent links. Roots sit at depth 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Taxonomy {
    parent: HashMap<String, String>,
    depth: HashMap<String, usize>,
}

impl Taxonomy {
    pub fn from_edges<S: AsRef<str>>(edges: impl IntoIterator<Item = (S, S)>) -> Result<Self, MetricError> {
        let mut parent = HashMap::new();
        for (child, par) in edges {
            let (child, par) = (child.as_ref().to_lowercase(), par.as_ref().to_lowercase());
            if child == par {
                return Err(MetricError::Taxonomy(format!("{child} is its own parent")));
            }
            if let Some(old) = parent.insert(child.clone(), par.clone()) {
                if old != par {
                    return Err(MetricError::Taxonomy(format!("{child} has two parents: {old} and {par}")));
                }
            }
        }
        let terms: HashSet<&String> = parent.keys().chain(parent.values()).collect();
        let mut depth = HashMap::new();
        for term in terms {
            let mut d = 1;
            let mut cur = term;
            while let Some(p) = parent.get(cur) {
                d += 1;
                if d > parent.len() + 1 {
                    return Err(MetricError::Taxonomy(format!("cycle through {term}")));
                }
                cur = p;
            }
            depth.insert(term.clone(), d);
        }
        Ok(Self { parent, depth })
    }

    /// Reads `term<TAB>parent` lines; blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self, MetricError> {
        Self::from_edges(read_pairs(path)?)
    }

    pub fn depth(&self, term: &str) -> Option<usize> {
        self.depth.get(term).copied()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.depth.contains_key(term)
    }

    fn ancestors<'a>(&'a self, term: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        std::iter::successors(Some(term), move |t| self.parent.get(*t).map(String::as_str))
    }

    /// Deepest common ancestor (a term counts as its own ancestor).
    pub fn lowest_common_subsumer<'a>(&'a self, a: &'a str, b: &'a str) -> Option<&'a str> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        let up: HashSet<&str> = self.ancestors(a).collect();
        self.ancestors(b).find(|t| up.contains(t))
    }

    /// `2·depth(lcs) / (depth(a) + depth(b))`, zero when either word is
    /// missing or the two share no ancestor.
    pub fn wu_palmer(&self, a: &str, b: &str) -> f64 {
        match (self.depth(a), self.depth(b), self.lowest_common_subsumer(a, b)) {
            (Some(da), Some(db), Some(lcs)) => 2.0 * self.depth[lcs] as f64 / (da + db) as f64,
            _ => 0.0,
        }
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, MetricError> {
    let file = fs::File::open(path).map_err(|source| MetricError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetricError::Io {
            path: path.to_owned(),
            source,
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [a, b] if !a.trim().is_empty() && !b.trim().is_empty() => {
                pairs.push((a.trim().to_owned(), b.trim().to_owned()))
            }
            _ => {
                return Err(MetricError::Malformed {
                    path: path.to_owned(),
                    line: i + 1,
                    reason: "expected two tab-separated fields".into(),
                })
            }
        }
    }
    Ok(pairs)
}

/// Word similarity in `[0, 1]`, symmetric, with `sim(a, a) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityOracle {
    Exact,
    Synonyms(HashSet<(String, String)>),
    Taxonomy(Taxonomy),
}

impl SimilarityOracle {
    pub fn synonyms<S: AsRef<str>>(pairs: impl IntoIterator<Item = (S, S)>) -> Self {
        let mut set = HashSet::new();
        for (a, b) in pairs {
            let (a, b) = (a.as_ref().to_lowercase(), b.as_ref().to_lowercase());
            set.insert((b.clone(), a.clone()));
            set.insert((a, b));
        }
        Self::Synonyms(set)
    }

    /// Reads `a<TAB>b` synonym lines.
    pub fn load_synonyms(path: &Path) -> Result<Self, MetricError> {
        Ok(Self::synonyms(read_pairs(path)?))
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        match self {
            Self::Exact => 0.0,
            Self::Synonyms(set) => {
                if set.contains(&(a.to_owned(), b.to_owned())) {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Taxonomy(t) => t.wu_palmer(a, b),
        }
    }
}

/// The similarity itself when it reaches `gamma`, otherwise a tenth of it.
pub fn wup_gamma(a: &str, b: &str, gamma: f64, oracle: &SimilarityOracle) -> f64 {
    threshold(oracle.similarity(a, b), gamma)
}

fn threshold(s: f64, gamma: f64) -> f64 {
    if s >= gamma {
        s
    } else {
        0.1 * s
    }
}

fn check_gamma(gamma: f64) -> Result<(), MetricError> {
    if (0.0..=1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(MetricError::Gamma(gamma))
    }
}

/// One question's WUPS: the smaller of the reference-side and
/// prediction-side soft recalls, each averaged over its own length.
pub fn wups_sentence<S: AsRef<str>>(pred: &[S], reference: &[S], gamma: f64, oracle: &SimilarityOracle) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        log::warn!("empty answer scores 0 under WUPS");
        return 0.0;
    }
    let side = |xs: &[S], ys: &[S]| {
        xs.iter()
            .map(|x| {
                ys.iter()
                    .map(|y| wup_gamma(x.as_ref(), y.as_ref(), gamma, oracle))
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / xs.len() as f64
    };
    side(reference, pred).min(side(pred, reference))
}

/// Mean per-question WUPS@γ over aligned prediction/reference lists.
pub fn wups<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>], gamma: f64, oracle: &SimilarityOracle) -> Result<f64, MetricError> {
    check_gamma(gamma)?;
    aligned(preds.len(), refs.len())?;
    Ok(preds.iter().zip(refs).map(|(p, r)| wups_sentence(p, r, gamma, oracle)).sum::<f64>() / preds.len() as f64)
}

/// Clipped unigram precision times `min(1, exp(1 − r/c))`.
pub fn bleu1<S: AsRef<str>>(pred: &[S], reference: &[S]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w.as_ref()).or_default() += 1;
    }
    let mut matched = 0;
    for w in pred {
        if let Some(c) = counts.get_mut(w.as_ref()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = (1.0 - r / c).exp().min(1.0);
    bp * matched as f64 / c
}

/// Sentence-level BLEU-1 averaged over the corpus.
pub fn corpus_bleu1<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, MetricError> {
    aligned(preds.len(), refs.len())?;
    Ok(preds.iter().zip(refs).map(|(p, r)| bleu1(p, r)).sum::<f64>() / preds.len() as f64)
}

fn aligned(p: usize, r: usize) -> Result<(), MetricError> {
    if p != r {
        return Err(MetricError::Mismatch(format!("{p} predictions for {r} references")));
    }
    if p == 0 {
        return Err(MetricError::Mismatch("no answers to score".into()));
    }
    Ok(())
}

/// One line of a predictions or references file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub id: String,
    pub answer: String,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub type_tag: Option<String>,
}

pub fn read_answers(path: &Path) -> Result<Vec<AnswerRecord>, MetricError> {
    let text = fs::read_to_string(path).map_err(|source| MetricError::Io {
        path: path.to_owned(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricError::Malformed {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub count: usize,
    pub bleu1: f64,
    pub wups_0: f64,
    pub wups_09: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scores,
    /// Keyed by question type; records without one fall under `untyped`.
    pub by_type: BTreeMap<String, Scores>,
}

/// Scores predictions against references matched by id. Every reference
/// needs a prediction; extra predictions are an error too.
pub fn evaluate(preds: &[AnswerRecord], refs: &[AnswerRecord], oracle: &SimilarityOracle) -> Result<EvalReport, MetricError> {
    aligned(preds.len(), refs.len())?;
    let by_id: HashMap<&str, &AnswerRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    if by_id.len() != preds.len() {
        return Err(MetricError::Mismatch("duplicate prediction ids".into()));
    }
    let mut sums: BTreeMap<String, Scores> = BTreeMap::new();
    let mut total = Scores::default();
    for r in refs {
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| MetricError::Mismatch(format!("no prediction for id {}", r.id)))?;
        let (pt, rt) = (tokenize(&p.answer), tokenize(&r.answer));
        let s = Scores {
            count: 1,
            bleu1: bleu1(&pt, &rt),
            wups_0: wups_sentence(&pt, &rt, 0.0, oracle),
            wups_09: wups_sentence(&pt, &rt, 0.9, oracle),
        };
        let tag = r.type_tag.clone().unwrap_or_else(|| "untyped".to_owned());
        for acc in [sums.entry(tag).or_default(), &mut total] {
            acc.count += 1;
            acc.bleu1 += s.bleu1;
            acc.wups_0 += s.wups_0;
            acc.wups_09 += s.wups_09;
        }
    }
    let mean = |s: Scores| Scores {
        count: s.count,
        bleu1: s.bleu1 / s.count as f64,
        wups_0: s.wups_0 / s.count as f64,
        wups_09: s.wups_09 / s.count as f64,
    };
    Ok(EvalReport {
        overall: mean(total),
        by_type: sums.into_iter().map(|(k, v)| (k, mean(v))).collect(),
    })
}
