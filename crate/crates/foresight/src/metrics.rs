//! Evaluation metrics: multi-class precision/recall with top-k accuracy for
//! the label predictions, and BLEU, ROUGE-L and CIDEr for the captions.
//!
//! Every metric here is a pure function of its inputs and is held to an
//! independent brute-force oracle in the test suite. Tokenization for caption
//! metrics is lowercase, punctuation stripped, whitespace split, so scores
//! are reproducible bit for bit.

use std::collections::HashMap;

use thiserror::Error;

use crate::predictor::top_k;

/// F-measure beta for ROUGE-L (recall-weighted).
pub const ROUGE_L_BETA: f64 = 1.2;
/// Scale factor applied to CIDEr cosine similarities.
pub const CIDER_SCALE: f64 = 10.0;
/// Floor applied to zeroed n-gram precisions in sentence-level BLEU.
pub const BLEU_SENT_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("candidates and references must align: {candidates} vs {references}")]
    Misaligned {
        candidates: usize,
        references: usize,
    },
    #[error("candidate {0} has no references")]
    NoReferences(usize),
    #[error("CIDEr needs a corpus of at least two candidates for a usable idf")]
    DegenerateIdf,
    #[error("prediction {index} is malformed: {reason}")]
    BadPrediction { index: usize, reason: String },
}

/// Multi-class precision/recall plus top-k accuracies from probability
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Macro averages over classes with nonzero support.
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// (k, accuracy) pairs in the order requested.
    pub topk_accuracy: Vec<(usize, f64)>,
    /// confusion[gold][predicted] over top-1 decisions.
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
    pub examples: usize,
}

impl ClassificationReport {
    pub fn top_accuracy(&self, k: usize) -> Option<f64> {
        self.topk_accuracy
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, acc)| *acc)
    }
}

/// Score probability predictions against gold classes. `ks` are clamped to
/// the number of classes so a 3-class problem still reports top-5.
pub fn classification_report(
    preds: &[Vec<f64>],
    golds: &[usize],
    ks: &[usize],
) -> Result<ClassificationReport, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty("predictions"));
    }
    if preds.len() != golds.len() {
        return Err(MetricError::Misaligned {
            candidates: preds.len(),
            references: golds.len(),
        });
    }
    let c = preds[0].len();
    for (i, p) in preds.iter().enumerate() {
        if p.len() != c {
            return Err(MetricError::BadPrediction {
                index: i,
                reason: format!("expected {c} classes, got {}", p.len()),
            });
        }
        if golds[i] >= c {
            return Err(MetricError::BadPrediction {
                index: i,
                reason: format!("gold class {} out of range", golds[i]),
            });
        }
    }

    let mut confusion = vec![vec![0usize; c]; c];
    for (p, &g) in preds.iter().zip(golds) {
        let pred = top_k(p, 1).expect("k=1 is valid")[0].0;
        confusion[g][pred] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
    let mut per_class_precision = vec![0.0; c];
    let mut per_class_recall = vec![0.0; c];
    for j in 0..c {
        let tp = confusion[j][j];
        let predicted: usize = (0..c).map(|g| confusion[g][j]).sum();
        per_class_precision[j] = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        per_class_recall[j] = if support[j] > 0 {
            tp as f64 / support[j] as f64
        } else {
            0.0
        };
    }
    let scored: Vec<usize> = (0..c).filter(|&j| support[j] > 0).collect();
    let macro_precision =
        scored.iter().map(|&j| per_class_precision[j]).sum::<f64>() / scored.len() as f64;
    let macro_recall =
        scored.iter().map(|&j| per_class_recall[j]).sum::<f64>() / scored.len() as f64;

    let mut topk_accuracy = Vec::with_capacity(ks.len());
    for &k in ks {
        let kk = k.min(c).max(1);
        let mut hits = 0usize;
        for (p, &g) in preds.iter().zip(golds) {
            if top_k(p, kk)
                .expect("clamped k is valid")
                .iter()
                .any(|&(cls, _)| cls == g)
            {
                hits += 1;
            }
        }
        topk_accuracy.push((k, hits as f64 / preds.len() as f64));
    }

    Ok(ClassificationReport {
        per_class_precision,
        per_class_recall,
        macro_precision,
        macro_recall,
        topk_accuracy,
        confusion,
        support,
        examples: preds.len(),
    })
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize_caption(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|ch| {
            if ch.is_alphanumeric() || ch.is_whitespace() {
                ch
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped (modified) n-gram precision counts of one candidate against its
/// references: (matched, total candidate n-grams).
pub fn modified_precision(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    let mut matched = 0usize;
    for (gram, &count) in &cand {
        let max_ref = references
            .iter()
            .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched, total)
}

fn closest_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| {
            let diff = (rl as isize - cand_len as isize).unsigned_abs();
            (diff, rl)
        })
        .unwrap_or(0)
}

fn bleu_from_counts(
    matched: &[usize],
    total: &[usize],
    cand_len: usize,
    ref_len: usize,
    floor: Option<f64>,
) -> f64 {
    let max_n = matched.len();
    let mut log_sum = 0.0;
    for i in 0..max_n {
        let p = if total[i] == 0 {
            0.0
        } else {
            matched[i] as f64 / total[i] as f64
        };
        let p = match floor {
            Some(f) if p == 0.0 => f,
            _ => p,
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / max_n as f64;
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Corpus-level BLEU: clipped n-gram precisions pooled over the corpus for
/// n = 1..=max_n with uniform weights, times the brevity penalty
/// exp(min(0, 1 - r/c)). Returns 0 when any pooled precision is zero.
pub fn bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<f64, MetricError> {
    validate_caption_corpus(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let (m, t) = modified_precision(cand, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), refs);
    }
    Ok(bleu_from_counts(&matched, &total, cand_len, ref_len, None))
}

/// Sentence-level BLEU with zeroed precisions floored at
/// [`BLEU_SENT_FLOOR`], so short sentences with no higher-order matches keep
/// a nonzero comparable score.
pub fn bleu_sentence(
    candidate: &[String],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::Empty("candidate"));
    }
    if references.is_empty() {
        return Err(MetricError::NoReferences(0));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for n in 1..=max_n {
        let (m, t) = modified_precision(candidate, references, n);
        matched[n - 1] = m;
        total[n - 1] = t;
    }
    Ok(bleu_from_counts(
        &matched,
        &total,
        candidate.len(),
        closest_ref_len(candidate.len(), references),
        Some(BLEU_SENT_FLOOR),
    ))
}

/// Mean sentence-level BLEU over a corpus.
pub fn bleu_sentence_mean(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<f64, MetricError> {
    validate_caption_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        sum += bleu_sentence(cand, refs, max_n)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Length of the longest common subsequence, by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L of one candidate: LCS-based F-measure with beta =
/// [`ROUGE_L_BETA`], maximized over the references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64, MetricError> {
    if candidate.is_empty() {
        return Err(MetricError::Empty("candidate"));
    }
    if references.is_empty() {
        return Err(MetricError::NoReferences(0));
    }
    let beta2 = ROUGE_L_BETA * ROUGE_L_BETA;
    let mut best = 0.0f64;
    for r in references {
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let f = if p + rec > 0.0 {
            ((1.0 + beta2) * p * rec) / (rec + beta2 * p)
        } else {
            0.0
        };
        best = best.max(f);
    }
    Ok(best)
}

/// Mean ROUGE-L over a corpus.
pub fn rouge_l_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    validate_caption_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        sum += rouge_l(cand, refs)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// CIDEr consensus score. Candidate and reference sentences become TF-IDF
/// n-gram vectors (n = 1..=4, idf over the reference corpus, one document
/// per candidate's reference set); the score per candidate is the cosine
/// similarity averaged over its references and over n, scaled by
/// [`CIDER_SCALE`]. The corpus score is the mean over candidates.
pub fn cider(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<f64, MetricError> {
    let per = cider_per_candidate(candidates, references)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn cider_per_candidate(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<Vec<f64>, MetricError> {
    validate_caption_corpus(candidates, references)?;
    if candidates.len() < 2 {
        return Err(MetricError::DegenerateIdf);
    }
    const MAX_N: usize = 4;
    let n_docs = candidates.len() as f64;

    // Document frequency per n-gram: number of candidates whose reference
    // set contains it.
    let mut doc_freq: Vec<HashMap<Vec<String>, f64>> = vec![HashMap::new(); MAX_N];
    for refs in references {
        for n in 1..=MAX_N {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in refs {
                for gram in r.windows(n).filter(|w| w.len() == n) {
                    seen.entry(gram).or_insert(());
                }
            }
            for gram in seen.keys() {
                *doc_freq[n - 1].entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, gram: &[String]| -> f64 {
        let df = doc_freq[n - 1].get(gram).copied().unwrap_or(0.0).max(1.0);
        (n_docs / df).ln()
    };

    let tfidf = |n: usize, tokens: &[String]| -> HashMap<Vec<String>, f64> {
        let mut vec: HashMap<Vec<String>, f64> = HashMap::new();
        if tokens.len() >= n {
            for gram in tokens.windows(n) {
                *vec.entry(gram.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        for (gram, tf) in vec.iter_mut() {
            *tf *= idf(n, gram);
        }
        vec
    };
    let cosine = |a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>| -> f64 {
        let dot: f64 = a
            .iter()
            .map(|(g, &av)| av * b.get(g).copied().unwrap_or(0.0))
            .sum();
        let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };

    let mut scores = Vec::with_capacity(candidates.len());
    for (cand, refs) in candidates.iter().zip(references) {
        let mut mean_over_n = 0.0;
        for n in 1..=MAX_N {
            let cv = tfidf(n, cand);
            let mut sim = 0.0;
            for r in refs {
                sim += cosine(&cv, &tfidf(n, r));
            }
            mean_over_n += sim / refs.len() as f64;
        }
        scores.push(CIDER_SCALE * mean_over_n / MAX_N as f64);
    }
    Ok(scores)
}

fn validate_caption_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::Empty("candidates"));
    }
    if candidates.len() != references.len() {
        return Err(MetricError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        if c.is_empty() {
            return Err(MetricError::Empty("candidate"));
        }
        if r.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
    }
    Ok(())
}

/// Bundle of caption metrics with the fixed report field names.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CaptionScores {
    pub bleu4: f64,
    pub bleu4_sent: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub pairs: usize,
}

/// Score a caption corpus with every supported metric. CIDEr needs at least
/// two candidates; with fewer it is reported as 0.
pub fn caption_scores(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> Result<CaptionScores, MetricError> {
    validate_caption_corpus(candidates, references)?;
    let cider_score = if candidates.len() >= 2 {
        cider(candidates, references)?
    } else {
        0.0
    };
    Ok(CaptionScores {
        bleu4: bleu(candidates, references, 4)?,
        bleu4_sent: bleu_sentence_mean(candidates, references, 4)?,
        rouge_l: rouge_l_corpus(candidates, references)?,
        cider: cider_score,
        pairs: candidates.len(),
    })
}
