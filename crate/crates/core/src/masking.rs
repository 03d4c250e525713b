//! Training-instance construction: span selection, encoder corruption, and
//! the compacted decoder with preserved positions.
//!
//! Indices are 0-based. A span `(u, v)` covers `tokens[u..=v]`, so the
//! fragment `x3 x4 x5 x6` of an 8-token sentence in 1-based numbering is
//! `Span { u: 2, v: 5 }` here.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, BOS, EOS, MASK, PAD};

/// Target id excluded from the loss.
pub const IGNORE: TokenId = PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub u: usize,
    pub v: usize,
}

impl Span {
    pub fn new(u: usize, v: usize, m: usize) -> Result<Self> {
        if u > v || v >= m {
            return Err(Error::Contract(format!(
                "span ({u}, {v}) invalid for length {m}"
            )));
        }
        Ok(Span { u, v })
    }

    /// Number of masked tokens, `v - u + 1`.
    pub fn len(&self) -> usize {
        self.v - self.u + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.u..=self.v).contains(&i)
    }
}

/// How the fragment length is chosen for a sentence of length `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpanLength {
    /// `k = clamp(round(ratio * m), 1, m)`, rounding half up.
    Ratio(f64),
    /// `k = 1` whatever the sentence length.
    Single,
}

impl SpanLength {
    pub fn k(&self, m: usize) -> usize {
        match *self {
            SpanLength::Single => 1,
            SpanLength::Ratio(r) => ((r * m as f64 + 0.5).floor() as usize).clamp(1, m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SpanLength::Ratio(r) if !(r > 0.0 && r <= 1.0) => Err(Error::Config(format!(
                "mask ratio {r} outside (0, 1]"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SpanLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpanLength::Single => f.write_str("1/m"),
            SpanLength::Ratio(r) if *r == 1.0 => f.write_str("m"),
            SpanLength::Ratio(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for SpanLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parsed = match s.trim() {
            "1/m" | "k1" => SpanLength::Single,
            "m" => SpanLength::Ratio(1.0),
            other => SpanLength::Ratio(
                other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad mask ratio {other:?}")))?,
            ),
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

/// Picks `k` from `length` and a uniformly random start `u` in `0..=m-k`.
pub fn sample_span<R: Rng + ?Sized>(m: usize, length: SpanLength, rng: &mut R) -> Span {
    assert!(m >= 1, "cannot sample a span from an empty sentence");
    let k = length.k(m);
    let u = rng.gen_range(0..=m - k);
    Span { u, v: u + k - 1 }
}

/// Example construction variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Contiguous fragment, compacted decoder.
    Mass,
    /// `k` scattered positions instead of a span.
    Discrete,
    /// Decoder sees the whole original sentence.
    Feed,
    /// Denoising auto-encoder over the full sentence.
    Dae,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mass, Mode::Discrete, Mode::Feed, Mode::Dae];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Mass => "mass",
            Mode::Discrete => "discrete",
            Mode::Feed => "feed",
            Mode::Dae => "dae",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown masking mode {s:?}")))
    }
}

/// Replacement probabilities for a selected encoder position; the remainder
/// leaves the token unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionPolicy {
    pub mask: f64,
    pub random: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        CorruptionPolicy {
            mask: 0.8,
            random: 0.1,
        }
    }
}

impl CorruptionPolicy {
    /// Always substitutes the mask symbol.
    pub const ALWAYS_MASK: CorruptionPolicy = CorruptionPolicy {
        mask: 1.0,
        random: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaeNoise {
    pub drop: f64,
    pub mask: f64,
    /// Swap adjacent tokens with this probability per position pair; 0 disables.
    pub swap: f64,
}

impl Default for DaeNoise {
    fn default() -> Self {
        DaeNoise {
            drop: 0.1,
            mask: 0.1,
            swap: 0.0,
        }
    }
}

/// One training instance.
///
/// For the compacted layout `decoder_input[0]` is [`MASK`], the remaining
/// inputs are the fragment shifted right by one, and `decoder_positions`
/// holds each target's original index in the sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub encoder_input: Vec<TokenId>,
    pub decoder_input: Vec<TokenId>,
    pub decoder_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub span: Span,
    pub language: usize,
    pub decoder_language: usize,
    /// Decoder keys other positions may attend to; `None` means all.
    pub decoder_keys: Option<Vec<bool>>,
}

impl MaskedExample {
    /// Supervised pair: BOS-shifted decoder inputs, EOS-terminated targets.
    pub fn translation(
        source: &[TokenId],
        source_language: usize,
        target: &[TokenId],
        target_language: usize,
    ) -> Self {
        let mut decoder_input = Vec::with_capacity(target.len() + 1);
        decoder_input.push(BOS);
        decoder_input.extend_from_slice(target);
        let mut targets = target.to_vec();
        targets.push(EOS);
        MaskedExample {
            encoder_input: source.to_vec(),
            decoder_positions: (0..decoder_input.len()).collect(),
            decoder_input,
            targets,
            span: Span {
                u: 0,
                v: target.len(),
            },
            language: source_language,
            decoder_language: target_language,
            decoder_keys: None,
        }
    }

    /// Number of targets that count towards the loss.
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE).count()
    }

    /// Expands a compacted example to full decoder length `m`: non-fragment
    /// slots get [`MASK`] inputs and ignored targets, and are hidden from
    /// the fragment's self-attention.
    pub fn to_keep_padding(&self) -> MaskedExample {
        let m = self.encoder_input.len();
        let mut decoder_input = vec![MASK; m];
        let mut targets = vec![IGNORE; m];
        let mut keys = vec![false; m];
        for (i, &p) in self.decoder_positions.iter().enumerate() {
            decoder_input[p] = self.decoder_input[i];
            targets[p] = self.targets[i];
            keys[p] = true;
        }
        MaskedExample {
            encoder_input: self.encoder_input.clone(),
            decoder_input,
            decoder_positions: (0..m).collect(),
            targets,
            span: self.span,
            language: self.language,
            decoder_language: self.decoder_language,
            decoder_keys: Some(keys),
        }
    }
}

/// Builds [`MaskedExample`]s; random replacements are drawn from `ordinary`.
#[derive(Debug, Clone)]
pub struct Masker {
    pub policy: CorruptionPolicy,
    pub dae: DaeNoise,
    ordinary: std::ops::Range<TokenId>,
}

impl Masker {
    pub fn new(ordinary: std::ops::Range<TokenId>) -> Self {
        assert!(!ordinary.is_empty(), "no ordinary tokens to sample from");
        Masker {
            policy: CorruptionPolicy::default(),
            dae: DaeNoise::default(),
            ordinary,
        }
    }

    pub fn with_policy(mut self, policy: CorruptionPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn draw_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> Branch {
        let r: f64 = rng.gen();
        if r < self.policy.mask {
            Branch::Mask
        } else if r < self.policy.mask + self.policy.random {
            Branch::Random
        } else {
            Branch::Keep
        }
    }

    fn corrupt_at<R: Rng + ?Sized>(&self, tokens: &mut [TokenId], i: usize, rng: &mut R) {
        match self.draw_branch(rng) {
            Branch::Mask => tokens[i] = MASK,
            Branch::Random => tokens[i] = rng.gen_range(self.ordinary.clone()),
            Branch::Keep => {}
        }
    }

    /// Applies the corruption policy independently to every position in the span.
    pub fn corrupt_encoder<R: Rng + ?Sized>(
        &self,
        tokens: &[TokenId],
        span: Span,
        rng: &mut R,
    ) -> Vec<TokenId> {
        let mut out = tokens.to_vec();
        for i in span.u..=span.v {
            self.corrupt_at(&mut out, i, rng);
        }
        out
    }

    pub fn build<R: Rng + ?Sized>(
        &self,
        tokens: &[TokenId],
        span: Span,
        mode: Mode,
        language: usize,
        rng: &mut R,
    ) -> Result<MaskedExample> {
        let m = tokens.len();
        Span::new(span.u, span.v, m)?;
        let example = match mode {
            Mode::Mass => {
                let encoder_input = self.corrupt_encoder(tokens, span, rng);
                let positions: Vec<usize> = (span.u..=span.v).collect();
                compacted(tokens, encoder_input, positions, span, language)
            }
            Mode::Discrete => {
                let mut positions = index::sample(rng, m, span.len()).into_vec();
                positions.sort_unstable();
                let mut encoder_input = tokens.to_vec();
                for &p in &positions {
                    self.corrupt_at(&mut encoder_input, p, rng);
                }
                compacted(tokens, encoder_input, positions, span, language)
            }
            Mode::Feed => {
                let encoder_input = self.corrupt_encoder(tokens, span, rng);
                let mut decoder_input = vec![BOS];
                decoder_input.extend_from_slice(&tokens[..m - 1]);
                let targets = (0..m)
                    .map(|i| if span.contains(i) { tokens[i] } else { IGNORE })
                    .collect();
                MaskedExample {
                    encoder_input,
                    decoder_input,
                    decoder_positions: (0..m).collect(),
                    targets,
                    span,
                    language,
                    decoder_language: language,
                    decoder_keys: None,
                }
            }
            Mode::Dae => {
                let noised = self.dae_noise(tokens, rng);
                let mut ex = MaskedExample::translation(&noised, language, tokens, language);
                ex.span = Span { u: 0, v: m - 1 };
                ex
            }
        };
        Ok(example)
    }

    fn dae_noise<R: Rng + ?Sized>(&self, tokens: &[TokenId], rng: &mut R) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let r: f64 = rng.gen();
            if r < self.dae.drop {
                continue;
            } else if r < self.dae.drop + self.dae.mask {
                out.push(MASK);
            } else {
                out.push(t);
            }
        }
        if self.dae.swap > 0.0 {
            let mut i = 0;
            while i + 1 < out.len() {
                if rng.gen::<f64>() < self.dae.swap {
                    out.swap(i, i + 1);
                    i += 2;
                } else {
                    i += 1;
                }
            }
        }
        if out.is_empty() {
            out.push(MASK);
        }
        out
    }
}

fn compacted(
    tokens: &[TokenId],
    encoder_input: Vec<TokenId>,
    positions: Vec<usize>,
    span: Span,
    language: usize,
) -> MaskedExample {
    let targets: Vec<TokenId> = positions.iter().map(|&p| tokens[p]).collect();
    let mut decoder_input = Vec::with_capacity(targets.len());
    decoder_input.push(MASK);
    decoder_input.extend_from_slice(&targets[..targets.len() - 1]);
    MaskedExample {
        encoder_input,
        decoder_input,
        decoder_positions: positions,
        targets,
        span,
        language,
        decoder_language: language,
        decoder_keys: None,
    }
}
