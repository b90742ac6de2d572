//! Caption metrics: corpus BLEU, CIDEr and ROUGE-L.
//!
//! Text is lowercased, stripped of ASCII punctuation and split on
//! whitespace before any n-gram is counted.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MacCapError, Result};
use crate::tokenizer::normalize_words;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
            return Err(MacCapError::invalid(format!("item {i} has no references")));
        }
        Ok(Self { items })
    }

    pub fn from_pairs<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, Vec<R>)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(c, refs)| EvalItem {
                    candidate: c.as_ref().to_string(),
                    references: refs.iter().map(|r| r.as_ref().to_string()).collect(),
                })
                .collect(),
        )
    }

    /// `{"candidate", "references": [...]}` per line.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| MacCapError::io(path, e))?;
        let items = raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| MacCapError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

type Counts = BTreeMap<Vec<String>, usize>;

fn ngrams(words: &[String], n: usize) -> Counts {
    let mut c = Counts::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *c.entry(w.to_vec()).or_default() += 1;
        }
    }
    c
}

/// Corpus BLEU over n-gram orders `1..=max_n` with the brevity penalty.
pub fn bleu(set: &EvalSet, max_n: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(MacCapError::invalid("empty evaluation set"));
    }
    if !(1..=4).contains(&max_n) {
        return Err(MacCapError::invalid(format!("max_n must be in 1..=4, got {max_n}")));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for item in &set.items {
        let cand = normalize_words(&item.candidate);
        let refs: Vec<Vec<String>> = item.references.iter().map(|r| normalize_words(r)).collect();
        cand_len += cand.len();
        // Closest reference length; the shorter one on a tie.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("references checked non-empty");
        for n in 1..=max_n {
            let c = ngrams(&cand, n);
            let mut max_ref = Counts::new();
            for r in &refs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &c {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiderConfig {
    /// Clip candidate weights by reference weights (the D variant).
    pub cider_d: bool,
    /// Multiply the score by 10.
    pub scale_by_ten: bool,
    pub sigma: f64,
    pub max_n: usize,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self {
            cider_d: false,
            scale_by_ten: false,
            sigma: 6.0,
            max_n: 4,
        }
    }
}

struct TfIdf {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

/// Per-item scores; the corpus score is their mean.
pub fn cider_scores(set: &EvalSet, cfg: &CiderConfig) -> Result<Vec<f64>> {
    if set.len() < 2 {
        return Err(MacCapError::InsufficientCorpus(format!(
            "CIDEr needs at least 2 items for document frequencies, got {}",
            set.len()
        )));
    }
    let items: Vec<(Vec<String>, Vec<Vec<String>>)> = set
        .items
        .iter()
        .map(|it| {
            (
                normalize_words(&it.candidate),
                it.references.iter().map(|r| normalize_words(r)).collect(),
            )
        })
        .collect();

    // Document frequency: number of items whose references contain g.
    let mut df: HashMap<Vec<String>, usize> = HashMap::new();
    for (_, refs) in &items {
        let mut seen = HashSet::new();
        for r in refs {
            for n in 1..=cfg.max_n {
                seen.extend(ngrams(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    let log_n = (items.len() as f64).ln();
    let tfidf = |words: &[String]| -> TfIdf {
        let mut vecs = Vec::with_capacity(cfg.max_n);
        let mut norms = Vec::with_capacity(cfg.max_n);
        for n in 1..=cfg.max_n {
            let v: BTreeMap<Vec<String>, f64> = ngrams(words, n)
                .into_iter()
                .map(|(g, tf)| {
                    let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
                    (g, tf as f64 * (log_n - d.ln()))
                })
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        TfIdf {
            vecs,
            norms,
            len: words.len(),
        }
    };

    let scale = if cfg.scale_by_ten { 10.0 } else { 1.0 };
    Ok(items
        .iter()
        .map(|(cand, refs)| {
            let c = tfidf(cand);
            let mut per_n = vec![0.0; cfg.max_n];
            for r in refs {
                let r = tfidf(r);
                let delta = c.len as f64 - r.len as f64;
                let penalty = (-(delta * delta) / (2.0 * cfg.sigma * cfg.sigma)).exp();
                for (n, acc) in per_n.iter_mut().enumerate() {
                    if c.norms[n] == 0.0 || r.norms[n] == 0.0 {
                        continue;
                    }
                    let dot: f64 = c.vecs[n]
                        .iter()
                        .filter_map(|(g, &w)| {
                            r.vecs[n].get(g).map(|&rw| if cfg.cider_d { w.min(rw) * rw } else { w * rw })
                        })
                        .sum();
                    *acc += penalty * dot / (c.norms[n] * r.norms[n]);
                }
            }
            scale * per_n.iter().sum::<f64>() / cfg.max_n as f64 / refs.len() as f64
        })
        .collect())
}

pub fn cider_with(set: &EvalSet, cfg: &CiderConfig) -> Result<f64> {
    let s = cider_scores(set, cfg)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

pub fn cider(set: &EvalSet) -> Result<f64> {
    cider_with(set, &CiderConfig::default())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Mean LCS-based F-measure (β = 1.2) using the best precision and recall
/// over each item's references.
pub fn rouge_l(set: &EvalSet) -> Result<f64> {
    if set.is_empty() {
        return Err(MacCapError::invalid("empty evaluation set"));
    }
    let beta2 = 1.2f64 * 1.2;
    let total: f64 = set
        .items
        .iter()
        .map(|it| {
            let cand = normalize_words(&it.candidate);
            let (mut p, mut r) = (0.0f64, 0.0f64);
            for reference in &it.references {
                let reference = normalize_words(reference);
                let l = lcs(&cand, &reference) as f64;
                if !cand.is_empty() {
                    p = p.max(l / cand.len() as f64);
                }
                if !reference.is_empty() {
                    r = r.max(l / reference.len() as f64);
                }
            }
            if p == 0.0 || r == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * p * r / (r + beta2 * p)
            }
        })
        .sum();
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: Option<f64>,
    pub rouge_l: f64,
    pub n_items: usize,
}

/// All metrics; CIDEr is omitted for single-item sets.
pub fn evaluate(set: &EvalSet, cider_cfg: &CiderConfig) -> Result<MetricReport> {
    let cider = match cider_with(set, cider_cfg) {
        Ok(v) => Some(v),
        Err(MacCapError::InsufficientCorpus(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        bleu1: bleu(set, 1)?,
        bleu4: bleu(set, 4)?,
        cider,
        rouge_l: rouge_l(set)?,
        n_items: set.len(),
    })
}
