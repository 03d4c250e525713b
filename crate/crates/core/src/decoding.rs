//! Greedy and beam-search generation.

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tape::log_softmax;
use crate::tokenizer::{TokenId, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Cap on generated tokens, EOS included.
    pub max_len: usize,
    /// Ids below this (other than EOS) are never generated.
    pub first_ordinary: TokenId,
}

impl DecodeOptions {
    pub fn new(first_ordinary: TokenId) -> Self {
        DecodeOptions {
            beam: 4,
            max_len: 48,
            first_ordinary,
        }
    }

    pub fn with_beam(mut self, beam: usize) -> Self {
        self.beam = beam;
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens after BOS, ending in EOS if one was emitted.
    pub tokens: Vec<TokenId>,
    /// Sum of the per-step log-probabilities.
    pub log_prob: f64,
    /// Set once EOS is emitted or the length cap is reached.
    pub finished: bool,
}

impl Hypothesis {
    fn empty() -> Self {
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Generated tokens without the trailing EOS.
    pub fn output(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    /// Length-normalised score: mean log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

/// Next-token log-probabilities for each prefix, with disallowed ids at -inf.
fn next_log_probs(
    model: &Transformer,
    source: &[TokenId],
    source_language: usize,
    target_language: usize,
    prefixes: &[&[TokenId]],
    first_ordinary: TokenId,
) -> Result<Vec<Vec<f64>>> {
    let mut s = model.eval_session();
    let memory = s.encode(source, source_language)?;
    let mut out = Vec::with_capacity(prefixes.len());
    for prefix in prefixes {
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(prefix);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let logits = s.decode(&inputs, &positions, memory, target_language, None)?;
        let mut row = s.value(logits).row(inputs.len() - 1).to_vec();
        for (id, v) in row.iter_mut().enumerate().take(first_ordinary) {
            if id != EOS {
                *v = f64::NEG_INFINITY;
            }
        }
        out.push(log_softmax(&row));
    }
    Ok(out)
}

fn check(model: &Transformer, source: &[TokenId], opts: &DecodeOptions) -> Result<()> {
    if source.is_empty() {
        return Err(Error::Input("cannot translate an empty sentence".into()));
    }
    if opts.beam == 0 {
        return Err(Error::Config("beam must be positive".into()));
    }
    if opts.max_len >= model.config().max_positions {
        return Err(Error::Config(format!(
            "max_len {} must be below max_positions {}",
            opts.max_len,
            model.config().max_positions
        )));
    }
    Ok(())
}

/// Picks the most probable token at each step; ties go to the lower id.
pub fn greedy_decode(
    model: &Transformer,
    source: &[TokenId],
    source_language: usize,
    target_language: usize,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    check(model, source, opts)?;
    let mut hyp = Hypothesis::empty();
    while !hyp.finished {
        if hyp.tokens.len() == opts.max_len {
            hyp.finished = true;
            break;
        }
        let lp = next_log_probs(
            model,
            source,
            source_language,
            target_language,
            &[&hyp.tokens],
            opts.first_ordinary,
        )?
        .pop()
        .expect("one prefix");
        let mut best = 0;
        for (i, &p) in lp.iter().enumerate() {
            if p > lp[best] {
                best = i;
            }
        }
        hyp.log_prob += lp[best];
        hyp.tokens.push(best);
        hyp.finished = best == EOS;
    }
    Ok(hyp)
}

/// Beam search keeping the `beam` most probable prefixes per step. Among
/// completed hypotheses (and the greedy one, so the result never scores
/// below greedy) the highest [`Hypothesis::score`] wins.
pub fn beam_decode(
    model: &Transformer,
    source: &[TokenId],
    source_language: usize,
    target_language: usize,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    let greedy = greedy_decode(model, source, source_language, target_language, opts)?;
    let mut live = vec![Hypothesis::empty()];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = next_log_probs(
            model,
            source,
            source_language,
            target_language,
            &prefixes,
            opts.first_ordinary,
        )?;
        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::new();
        for (b, lp) in lps.iter().enumerate() {
            for (id, &p) in lp.iter().enumerate() {
                if p.is_finite() {
                    candidates.push((live[b].log_prob + p, b, id));
                }
            }
        }
        // Stable sort keeps beam order then id order among ties.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for &(log_prob, b, id) in candidates.iter().take(opts.beam) {
            let mut tokens = live[b].tokens.clone();
            tokens.push(id);
            let finished = id == EOS || tokens.len() == opts.max_len;
            let h = Hypothesis {
                tokens,
                log_prob,
                finished,
            };
            if finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() || done.len() >= opts.beam {
            break;
        }
    }
    if opts.max_len == 0 {
        return Ok(greedy);
    }
    let mut best = greedy;
    for h in done {
        if h.score() > best.score() {
            best = h;
        }
    }
    Ok(best)
}

/// Greedy when `opts.beam == 1`, beam search otherwise.
pub fn translate(
    model: &Transformer,
    source: &[TokenId],
    source_language: usize,
    target_language: usize,
    opts: &DecodeOptions,
) -> Result<Hypothesis> {
    if opts.beam == 1 {
        greedy_decode(model, source, source_language, target_language, opts)
    } else {
        beam_decode(model, source, source_language, target_language, opts)
    }
}
