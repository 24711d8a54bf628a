//! Intrinsic BLEU and a bag-of-n-grams downstream classifier.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{words, LabeledDocument};
use crate::error::{invalid_arg, Result};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuResult {
    pub score: f64,
    pub ngram_precisions: [f64; 4],
    pub brevity_penalty: f64,
}

fn ngram_counts<T: Eq + std::hash::Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4. Unigram precision is unsmoothed; orders 2 to 4 use
/// `(matches + 1) / (candidates + 1)`. Brevity penalty `exp(1 − r/c)` when the
/// hypotheses are not longer than the references.
pub fn corpus_bleu<T: Eq + std::hash::Hash>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<BleuResult> {
    if references.len() != hypotheses.len() {
        return invalid_arg(format!(
            "{} references but {} hypotheses",
            references.len(),
            hypotheses.len()
        ));
    }
    if references.is_empty() {
        return invalid_arg("BLEU needs at least one pair");
    }
    let mut matches = [0usize; 4];
    let mut cands = [0usize; 4];
    let (mut r, mut c) = (0usize, 0usize);
    for (rf, hy) in references.iter().zip(hypotheses) {
        r += rf.len();
        c += hy.len();
        for n in 1..=4 {
            let rc = ngram_counts(rf, n);
            let hc = ngram_counts(hy, n);
            cands[n - 1] += hc.values().sum::<usize>();
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut p = [0.0; 4];
    p[0] = if cands[0] == 0 { 0.0 } else { matches[0] as f64 / cands[0] as f64 };
    for n in 1..4 {
        p[n] = (matches[n] + 1) as f64 / (cands[n] + 1) as f64;
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let score = if p[0] == 0.0 || bp == 0.0 {
        0.0
    } else {
        bp * (p.iter().map(|v| v.ln()).sum::<f64>() / 4.0).exp() * 100.0
    };
    Ok(BleuResult {
        score,
        ngram_precisions: p,
        brevity_penalty: bp,
    })
}

/// BLEU over raw texts, tokenised with the corpus word splitter.
pub fn text_bleu(references: &[String], hypotheses: &[String]) -> Result<BleuResult> {
    let tok = |v: &[String]| v.iter().map(|s| words(s)).collect::<Vec<_>>();
    corpus_bleu(&tok(references), &tok(hypotheses))
}

fn features(text: &str) -> Vec<String> {
    let w = words(text);
    let mut f: Vec<String> = w.clone();
    f.extend(w.windows(2).map(|p| format!("{} {}", p[0], p[1])));
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            max_epochs: 50,
            patience: 5,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression over unigram and bigram counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub classes: Vec<String>,
    pub vocabulary: HashMap<String, usize>,
    /// `classes × (features + 1)`, bias in the last column.
    pub weights: Vec<Vec<f64>>,
    pub epochs_trained: usize,
    pub best_val_f1: f64,
}

type Sparse = Vec<(usize, f64)>;

impl ClassifierModel {
    fn encode(&self, text: &str) -> Sparse {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for f in features(text) {
            if let Some(&i) = self.vocabulary.get(&f) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut v: Sparse = counts.into_iter().collect();
        v.sort_by_key(|e| e.0);
        v
    }

    fn scores(&self, x: &Sparse) -> Vec<f64> {
        let bias = self.vocabulary.len();
        self.weights
            .iter()
            .map(|w| w[bias] + x.iter().map(|&(i, c)| w[i] * c).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, text: &str) -> &str {
        let s = self.scores(&self.encode(text));
        let mut best = 0;
        for (k, v) in s.iter().enumerate() {
            if *v > s[best] {
                best = k;
            }
        }
        &self.classes[best]
    }
}

pub fn train_classifier(
    train: &[LabeledDocument],
    val: &[LabeledDocument],
    config: &ClassifierConfig,
) -> Result<ClassifierModel> {
    let classes: Vec<String> = train.iter().map(|d| d.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return invalid_arg(format!("training set has {} class(es); need at least 2", classes.len()));
    }
    let mut feats: BTreeSet<String> = BTreeSet::new();
    for d in train {
        feats.extend(features(&d.text));
    }
    let vocabulary: HashMap<String, usize> = feats.into_iter().enumerate().map(|(i, f)| (f, i)).collect();
    let dim = vocabulary.len() + 1;
    let mut model = ClassifierModel {
        weights: vec![vec![0.0; dim]; classes.len()],
        classes,
        vocabulary,
        epochs_trained: 0,
        best_val_f1: f64::NEG_INFINITY,
    };
    let class_of: HashMap<&str, usize> = model.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let data: Vec<(Sparse, usize)> = train.iter().map(|d| (model.encode(&d.text), class_of[d.label.as_str()])).collect();
    let mut rng = stream(config.seed, purpose::CLASSIFIER);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut best = model.weights.clone();
    let mut since_best = 0;
    let bias = dim - 1;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &data[i];
            let s = model.scores(x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for (k, w) in model.weights.iter_mut().enumerate() {
                let g = (s[k] - m).exp() / z - f64::from(u8::from(k == *y));
                let step = config.learning_rate * g;
                for &(j, c) in x {
                    w[j] -= step * c + config.learning_rate * config.l2 * w[j];
                }
                w[bias] -= step;
            }
        }
        model.epochs_trained = epoch + 1;
        let f1 = if val.is_empty() { 0.0 } else { macro_f1(&model, val)? };
        if f1 > model.best_val_f1 {
            model.best_val_f1 = f1;
            best = model.weights.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.weights = best;
    Ok(model)
}

/// Unweighted mean of per-class F1 over the classes seen in `truth` or
/// `predicted`; a class never predicted scores 0.
pub fn macro_f1_labels(truth: &[String], predicted: &[String]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return invalid_arg("macro-F1 needs equal, nonzero numbers of labels and predictions");
    }
    let classes: BTreeSet<&String> = truth.iter().chain(predicted).collect();
    let mut total = 0.0;
    for c in &classes {
        let tp = truth.iter().zip(predicted).filter(|(t, p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(predicted).filter(|(t, p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(predicted).filter(|(t, p)| t == c && p != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / classes.len() as f64)
}

pub fn macro_f1(model: &ClassifierModel, test: &[LabeledDocument]) -> Result<f64> {
    let truth: Vec<String> = test.iter().map(|d| d.label.clone()).collect();
    let pred: Vec<String> = test.iter().map(|d| model.predict(&d.text).to_string()).collect();
    macro_f1_labels(&truth, &pred)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid_arg("Spearman correlation needs two equal-length samples of size >= 2");
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
