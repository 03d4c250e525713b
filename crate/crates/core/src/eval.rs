//! Corpus BLEU and perplexity.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::masking::MaskedExample;
use crate::model::Transformer;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Bleu {
    /// In [0, 1].
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'w>(words: &'w [&str], n: usize) -> HashMap<&'w [&'w str], usize> {
    let mut counts = HashMap::new();
    for w in words.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU over whitespace-separated words with one reference per
/// hypothesis. Without smoothing any zero n-gram precision gives 0; with
/// `smooth`, orders above one use add-one counts.
pub fn corpus_bleu(hypotheses: &[String], references: &[String], smooth: bool) -> Result<Bleu> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU over an empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += hw.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth && n > 0 {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * mean_log.exp()
    };
    Ok(Bleu {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Perplexity from a summed negative log-likelihood over `tokens` targets.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Input("perplexity over zero tokens".into()));
    }
    Ok((total_nll / tokens as f64).exp())
}

/// Summed target negative log-likelihood and token count over `examples`.
pub fn total_nll(model: &Transformer, examples: &[MaskedExample]) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut count = 0;
    for ex in examples {
        let n = ex.num_targets();
        if n == 0 {
            continue;
        }
        let mut s = model.eval_session();
        let loss = s.example_loss(ex)?;
        nll += s.value(loss).item() * n as f64;
        count += n;
    }
    Ok((nll, count))
}
