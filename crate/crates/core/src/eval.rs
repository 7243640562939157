//! Reconstruction and retrieval scores.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::metrics::average_ranks;
use crate::vae::VaeModel;
use crate::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Unsmoothed sentence BLEU with orders capped at the candidate length.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], max_n: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let orders = max_n.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / (candidate.len() + 1 - n) as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).min(0.0);
    (log_sum / orders as f64 + bp).exp().min(1.0)
}

/// BLEU over whitespace tokens.
pub fn bleu_text(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    bleu(&c, &r, 4)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::data(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::data("cosine with a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of tie-averaged ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::data(format!("spearman needs two equal-length sequences of at least 2, got {} and {}", xs.len(), ys.len())));
    }
    pearson(&average_ranks(xs), &average_ranks(ys)).ok_or_else(|| Error::data("spearman of a constant sequence is undefined"))
}

/// Share of the other gold embeddings that are more cosine-similar to the
/// prediction than its own gold. 0 is best.
pub fn ranking_metric(predicted: &[f64], gold_index: usize, golds: &[Vec<f64>]) -> Result<f64> {
    if golds.len() < 2 {
        return Err(Error::data("ranking needs at least two gold embeddings"));
    }
    if gold_index >= golds.len() {
        return Err(Error::data(format!("gold index {gold_index} out of {}", golds.len())));
    }
    let own = cosine(predicted, &golds[gold_index])?;
    let mut above = 0usize;
    for (i, g) in golds.iter().enumerate() {
        if i != gold_index && cosine(predicted, g)? > own {
            above += 1;
        }
    }
    Ok(above as f64 / (golds.len() - 1) as f64)
}

/// Mean ranking metric where `predicted[i]` belongs to `golds[i]`.
pub fn mean_ranking(predicted: &[Vec<f64>], golds: &[Vec<f64>]) -> Result<f64> {
    if predicted.len() != golds.len() {
        return Err(Error::data(format!("{} predictions for {} golds", predicted.len(), golds.len())));
    }
    let mut acc = 0.0;
    for (i, p) in predicted.iter().enumerate() {
        acc += ranking_metric(p, i, golds)?;
    }
    Ok(acc / predicted.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceEval {
    pub index: usize,
    pub original: String,
    pub reconstruction: String,
    pub bleu: f64,
    pub cosine: f64,
    pub loss: f64,
}

/// BLEU is the mean of sentence-level scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub bleu: f64,
    pub cosine: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranking: Option<f64>,
    #[serde(skip)]
    pub sentences: Vec<SentenceEval>,
}

impl EvalReport {
    pub fn per_sentence_csv(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
        let mut out = String::from("index,original,reconstruction,bleu,cosine,loss\n");
        for s in &self.sentences {
            out.push_str(&format!("{},{},{},{},{},{}\n", s.index, quote(&s.original), quote(&s.reconstruction), s.bleu, s.cosine, s.loss));
        }
        out
    }
}

/// Encode each sentence, decode greedily and score against the original.
/// A reconstruction whose latent is the zero vector gets cosine 0; one
/// that ran to the length limit is clipped before re-encoding.
pub fn reconstruction_report<S: AsRef<str>>(model: &VaeModel, corpus: &[S]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::data("empty evaluation corpus"));
    }
    let mut sentences = Vec::with_capacity(corpus.len());
    for (index, s) in corpus.iter().enumerate() {
        let original = s.as_ref();
        let z = model.latent_of(original)?;
        let reconstruction = model.generate_text(&z)?;
        let cos = cosine(&z, &model.latent_of_clipped(&reconstruction)?).unwrap_or(0.0);
        let loss = model.reconstruction_loss_from(&model.vocab().encode(original), &z)?;
        sentences.push(SentenceEval {
            index,
            original: original.to_string(),
            bleu: bleu_text(&reconstruction, original),
            reconstruction,
            cosine: cos,
            loss,
        });
    }
    let n = sentences.len() as f64;
    let mean = |f: fn(&SentenceEval) -> f64| sentences.iter().map(f).sum::<f64>() / n;
    let (b, c, l) = (mean(|s| s.bleu), mean(|s| s.cosine), mean(|s| s.loss));
    if !(b.is_finite() && c.is_finite() && l.is_finite()) {
        return Err(Error::numeric("non-finite evaluation score"));
    }
    Ok(EvalReport { count: sentences.len(), bleu: b, cosine: c, loss: l, spearman: None, ranking: None, sentences })
}

/// Spearman correlation between latent cosine similarity of sentence pairs
/// and gold similarity scores.
pub fn similarity_spearman(model: &VaeModel, pairs: &[(String, String, f64)]) -> Result<f64> {
    let mut pred = Vec::with_capacity(pairs.len());
    for (a, b, _) in pairs {
        pred.push(cosine(&model.latent_of(a)?, &model.latent_of(b)?)?);
    }
    let gold: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    spearman(&pred, &gold)
}

/// `sentence1<TAB>sentence2<TAB>score` per line.
pub fn parse_similarity_tsv(text: &str) -> Result<Vec<(String, String, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split('\t').collect();
            if cells.len() != 3 {
                return Err(Error::data(format!("similarity line {} has {} fields, expected 3", i + 1, cells.len())));
            }
            let score =
                cells[2].trim().parse::<f64>().map_err(|_| Error::data(format!("similarity line {}: bad score {:?}", i + 1, cells[2])))?;
            Ok((cells[0].trim().to_string(), cells[1].trim().to_string(), score))
        })
        .collect()
}
