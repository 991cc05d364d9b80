//! Corpus BLEU, ROUGE-2 and embedding cosine similarity.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::backbones::Backbones;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

const MAX_ORDER: usize = 4;

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl ScoreReport {
    pub fn new(metric: &str, value: f64, n: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            n,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Lowercases, splits punctuation off words, then splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.to_lowercase().chars() {
        if c.is_ascii_punctuation() {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(String::from).collect()
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matches clipped by the reference count.
fn clipped_overlap(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU in `[0, 100]` with exponential smoothing: the z-th
/// order with no matches gets precision `1 / (2^z · total)`. If some order
/// has no hypothesis n-grams at all the score is 0.
pub fn sacrebleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one sentence pair".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h = tokenize(h.as_ref());
        let r = tokenize(r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hg = ngrams(&h, n);
            matches[n - 1] += clipped_overlap(&hg, &ngrams(&r, n));
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || totals.contains(&0) {
        return Ok(0.0);
    }
    let mut zeros = 0;
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matches[n] == 0 {
            zeros += 1;
            1.0 / (2f64.powi(zeros) * totals[n] as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Bigram overlap. Any empty denominator gives 0 for that component.
pub fn rouge2(hypothesis: &str, reference: &str) -> Rouge {
    let h = tokenize(hypothesis);
    let r = tokenize(reference);
    let hg = ngrams(&h, 2);
    let rg = ngrams(&r, 2);
    let overlap = clipped_overlap(&hg, &rg) as f64;
    let nh = h.len().saturating_sub(1) as f64;
    let nr = r.len().saturating_sub(1) as f64;
    let precision = if nh > 0.0 { overlap / nh } else { 0.0 };
    let recall = if nr > 0.0 { overlap / nr } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Rouge {
        precision,
        recall,
        f1,
    }
}

/// Cosine between the visual encodings of two images.
pub fn clip_similarity<T: Scalar>(backbones: &Backbones<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let ea = backbones.visual_encode(a)?;
    let eb = backbones.visual_encode(b)?;
    Ok(ea.cosine(&eb)?.as_f64())
}
