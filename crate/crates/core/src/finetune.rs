//! Supervised fine-tuning, back-translation, and the synthetic cipher
//! language pair used to evaluate them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::SyntheticGrammar;
use crate::decoding::{translate, DecodeOptions};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::masking::{MaskedExample, Masker, Mode};
use crate::model::{Metadata, Transformer};
use crate::report::Record;
use crate::tokenizer::{Bpe, TokenId, Vocab};
use crate::training::{make_example, mass_step, AdamState, StepOptions, TrainConfig};

/// Metadata key holding the vocabulary fingerprint in checkpoints.
pub const VOCAB_KEY: &str = "vocab_fingerprint";

/// Rejects a checkpoint whose vocabulary differs from `vocab`.
pub fn check_vocab(model: &Transformer, metadata: &Metadata, vocab: &Vocab) -> Result<()> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} vocabulary entries but the tokenizer has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    match metadata.get(VOCAB_KEY) {
        Some(f) if *f != vocab.fingerprint() => Err(Error::Config(format!(
            "checkpoint vocabulary {f} does not match tokenizer vocabulary {}",
            vocab.fingerprint()
        ))),
        _ => Ok(()),
    }
}

const CIPHER_CONSONANTS: &[char] = &['c', 'h', 'j', 'q', 'w', 'x', 'y'];
const CIPHER_VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Language B derived from language A by a seeded word bijection followed by
/// swapping each adjacent (even, odd) word pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: BTreeMap<String, String>,
    backward: BTreeMap<String, String>,
}

impl Cipher {
    /// Maps every lexicon word to a distinct invented word whose letters do
    /// not overlap language A's consonants.
    pub fn new(lexicon: &[&str], seed: u64) -> Result<Self> {
        let words: BTreeSet<&str> = lexicon.iter().copied().collect();
        let is_image = |w: &str| {
            let c: Vec<char> = w.chars().collect();
            c.len() == 4
                && c.iter().enumerate().all(|(i, ch)| {
                    if i % 2 == 0 {
                        CIPHER_CONSONANTS.contains(ch)
                    } else {
                        CIPHER_VOWELS.contains(ch)
                    }
                })
        };
        let capacity = (CIPHER_CONSONANTS.len() * CIPHER_VOWELS.len()).pow(2)
            - words.iter().filter(|w| is_image(w)).count();
        if words.len() > capacity {
            return Err(Error::Config(format!(
                "lexicon of {} words exceeds the {capacity} cipher words available",
                words.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = BTreeSet::new();
        while images.len() < words.len() {
            let w: String = (0..2)
                .flat_map(|_| {
                    [
                        *CIPHER_CONSONANTS.choose(&mut rng).unwrap(),
                        *CIPHER_VOWELS.choose(&mut rng).unwrap(),
                    ]
                })
                .collect();
            if !words.contains(w.as_str()) {
                images.insert(w);
            }
        }
        let mut images: Vec<String> = images.into_iter().collect();
        images.shuffle(&mut rng);
        let mut forward = BTreeMap::new();
        let mut backward = BTreeMap::new();
        for (a, b) in words.into_iter().zip(images) {
            forward.insert(a.to_string(), b.clone());
            backward.insert(b, a.to_string());
        }
        Ok(Cipher { forward, backward })
    }

    fn apply(map: &BTreeMap<String, String>, sentence: &str) -> Result<String> {
        let mut words = sentence
            .split_whitespace()
            .map(|w| {
                map.get(w)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Input(format!("word {w:?} is outside the cipher lexicon")))
            })
            .collect::<Result<Vec<_>>>()?;
        for pair in words.chunks_mut(2) {
            pair.reverse();
        }
        Ok(words.join(" "))
    }

    /// Ground-truth translation from A to B.
    pub fn encipher(&self, sentence: &str) -> Result<String> {
        Self::apply(&self.forward, sentence)
    }

    /// Ground-truth translation from B to A.
    pub fn decipher(&self, sentence: &str) -> Result<String> {
        Self::apply(&self.backward, sentence)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Sizes of the generated cipher task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherSizes {
    /// Monolingual sentences per language (drawn from disjoint pools).
    pub mono: usize,
    /// Held-out monolingual sentences per language, for validation.
    pub valid: usize,
    pub pairs: usize,
    pub test: usize,
}

impl CipherSizes {
    pub fn total(&self) -> usize {
        2 * self.mono + 2 * self.valid + self.pairs + self.test
    }

    /// Splits of a corpus of `n` sentences: 38% monolingual per language,
    /// 2% validation per language, 15% pairs, the rest test.
    pub fn for_corpus(n: usize) -> Self {
        let mono = n * 38 / 100;
        let valid = n / 50;
        let pairs = n * 15 / 100;
        CipherSizes {
            mono,
            valid,
            pairs,
            test: n - 2 * mono - 2 * valid - pairs,
        }
    }
}

impl Default for CipherSizes {
    fn default() -> Self {
        CipherSizes {
            mono: 400,
            valid: 25,
            pairs: 500,
            test: 50,
        }
    }
}

/// Language A text, its cipher, and the derived splits.
#[derive(Debug, Clone)]
pub struct CipherTask {
    pub cipher: Cipher,
    pub mono_a: Vec<String>,
    pub mono_b: Vec<String>,
    pub valid_a: Vec<String>,
    pub valid_b: Vec<String>,
    /// (A, B) training pairs.
    pub pairs: Vec<(String, String)>,
    /// (A, B) held-out pairs.
    pub test: Vec<(String, String)>,
}

impl CipherTask {
    /// Every split is drawn from a separate block of generated sentences,
    /// so no sentence is seen in two splits by position.
    pub fn generate(seed: u64, sizes: CipherSizes) -> Result<Self> {
        let grammar = SyntheticGrammar::new(seed);
        let cipher = Cipher::new(&grammar.lexicon(), seed ^ 0xc1f3)?;
        let all = grammar.generate(sizes.total(), seed.wrapping_add(1));
        Self::from_sentences(&all, cipher, sizes)
    }

    /// Splits language-A `sentences` in order: mono A, mono B (enciphered),
    /// valid A, valid B, pairs, test.
    pub fn from_sentences(sentences: &[String], cipher: Cipher, sizes: CipherSizes) -> Result<Self> {
        if sentences.len() < sizes.total() {
            return Err(Error::Input(format!(
                "{} sentences cannot fill splits totalling {}",
                sentences.len(),
                sizes.total()
            )));
        }
        let mut rest = sentences;
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a.to_vec()
        };
        let mono_a = take(sizes.mono);
        let mono_b_src = take(sizes.mono);
        let valid_a = take(sizes.valid);
        let valid_b_src = take(sizes.valid);
        let pairs_a = take(sizes.pairs);
        let test_a = take(sizes.test);
        let enc = |v: Vec<String>| -> Result<Vec<String>> {
            v.iter().map(|s| cipher.encipher(s)).collect()
        };
        let with_b = |v: Vec<String>| -> Result<Vec<(String, String)>> {
            v.into_iter()
                .map(|a| cipher.encipher(&a).map(|b| (a, b)))
                .collect()
        };
        Ok(CipherTask {
            mono_b: enc(mono_b_src)?,
            valid_b: enc(valid_b_src)?,
            pairs: with_b(pairs_a)?,
            test: with_b(test_a)?,
            mono_a,
            valid_a,
            cipher,
        })
    }

    /// Text to learn BPE codes from: both monolingual corpora.
    pub fn bpe_corpus(&self) -> Vec<&str> {
        self.mono_a
            .iter()
            .chain(&self.mono_b)
            .map(String::as_str)
            .collect()
    }
}

/// Tokenised sentence pair with language indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPair {
    pub source: Vec<TokenId>,
    pub source_language: usize,
    pub target: Vec<TokenId>,
    pub target_language: usize,
}

impl TokenPair {
    pub fn example(&self) -> MaskedExample {
        MaskedExample::translation(
            &self.source,
            self.source_language,
            &self.target,
            self.target_language,
        )
    }
}

/// Both directions of every pair: all A→B examples, then all B→A.
pub fn bidirectional(pairs: &[(Vec<TokenId>, Vec<TokenId>)], a: usize, b: usize) -> Vec<TokenPair> {
    let forward = pairs.iter().map(|(x, y)| TokenPair {
        source: x.clone(),
        source_language: a,
        target: y.clone(),
        target_language: b,
    });
    let backward = pairs.iter().map(|(x, y)| TokenPair {
        source: y.clone(),
        source_language: b,
        target: x.clone(),
        target_language: a,
    });
    forward.chain(backward).collect()
}

/// Held-out sentences translated and scored with corpus BLEU.
#[derive(Debug, Clone)]
pub struct BleuProbe<'a> {
    pub bpe: &'a Bpe,
    pub sources: Vec<Vec<TokenId>>,
    pub references: Vec<String>,
    pub source_language: usize,
    pub target_language: usize,
    pub decode: DecodeOptions,
    pub smooth: bool,
}

impl<'a> BleuProbe<'a> {
    pub fn new(
        bpe: &'a Bpe,
        test: &[(String, String)],
        source_language: usize,
        target_language: usize,
        decode: DecodeOptions,
    ) -> Self {
        BleuProbe {
            bpe,
            sources: test.iter().map(|(s, _)| bpe.encode(s)).collect(),
            references: test.iter().map(|(_, t)| t.clone()).collect(),
            source_language,
            target_language,
            decode,
            smooth: false,
        }
    }

    pub fn hypotheses(&self, model: &Transformer) -> Result<Vec<String>> {
        self.sources
            .iter()
            .map(|s| {
                let h = translate(model, s, self.source_language, self.target_language, &self.decode)?;
                Ok(self.bpe.decode(h.output()))
            })
            .collect()
    }

    pub fn bleu(&self, model: &Transformer) -> Result<f64> {
        let hyps = self.hypotheses(model)?;
        Ok(corpus_bleu(&hyps, &self.references, self.smooth)?.score)
    }
}

/// One row of a fine-tuning report.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub step: usize,
    pub round: usize,
    /// Mean loss since the previous row; NaN on the initial row.
    pub train_loss: f64,
    /// NaN when no probe was given.
    pub bleu: f64,
    pub seed: u64,
}

impl FinetuneRow {
    pub fn record(&self) -> Record {
        Record::new()
            .with("step", self.step)
            .with("round", self.round)
            .with("train_loss", self.train_loss)
            .with("bleu", self.bleu)
            .with("seed", self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Transformer,
    pub rows: Vec<FinetuneRow>,
    /// Pre-update loss of every step, in order.
    pub losses: Vec<f64>,
}

/// Teacher-forced training on a fixed example list. Batches are drawn from a
/// seeded shuffle of `examples` under the token budget.
pub fn train_examples(
    mut model: Transformer,
    examples: &[MaskedExample],
    cfg: &TrainConfig,
    probe: Option<&BleuProbe<'_>>,
    round: usize,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let evaluate = |model: &Transformer, step: usize, acc: (f64, usize)| -> Result<FinetuneRow> {
        let row = FinetuneRow {
            step,
            round,
            train_loss: if acc.1 == 0 { f64::NAN } else { acc.0 / acc.1 as f64 },
            bleu: probe.map_or(Ok(f64::NAN), |p| p.bleu(model))?,
            seed: cfg.seed,
        };
        log::info!("{}", row.record());
        Ok(row)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut next = 0;
    let mut adam = AdamState::new(model.params(), cfg.adam);
    let mut rows = vec![evaluate(&model, 0, (0.0, 0))?];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut acc = (0.0, 0);
    for step in 0..cfg.steps {
        let mut batch = Vec::new();
        let mut used = 0;
        loop {
            if next == order.len() {
                order.shuffle(&mut rng);
                next = 0;
            }
            let ex = &examples[order[next]];
            let len = ex.encoder_input.len().max(ex.decoder_input.len());
            if !batch.is_empty() && used + len > cfg.batch_tokens {
                break;
            }
            batch.push(ex.clone());
            used += len;
            next += 1;
            if used >= cfg.batch_tokens || batch.len() == examples.len() {
                break;
            }
        }
        let out = mass_step(
            &mut model,
            &batch,
            &mut adam,
            StepOptions {
                step,
                clip_norm: cfg.clip_norm,
                freeze_encoder: false,
                dropout_seed: Some(rng.gen()),
            },
        )?;
        losses.push(out.loss);
        acc.0 += out.loss;
        acc.1 += 1;
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            rows.push(evaluate(&model, step + 1, acc)?);
            acc = (0.0, 0);
        }
    }
    if acc.1 > 0 {
        rows.push(evaluate(&model, cfg.steps, acc)?);
    }
    Ok(FinetuneOutcome {
        model,
        rows,
        losses,
    })
}

/// Supervised fine-tuning on tokenised pairs.
pub fn finetune_supervised(
    model: Transformer,
    pairs: &[TokenPair],
    cfg: &TrainConfig,
    probe: Option<&BleuProbe<'_>>,
) -> Result<FinetuneOutcome> {
    let examples: Vec<MaskedExample> = pairs.iter().map(TokenPair::example).collect();
    train_examples(model, &examples, cfg, probe, 0)
}

/// Produces pseudo-sources for back-translation.
pub trait Translator {
    fn translate(
        &self,
        model: &Transformer,
        source: &[TokenId],
        source_language: usize,
        target_language: usize,
    ) -> Result<Vec<TokenId>>;
}

/// Decodes with the model being trained.
#[derive(Debug, Clone, Copy)]
pub struct ModelTranslator(pub DecodeOptions);

impl Translator for ModelTranslator {
    fn translate(
        &self,
        model: &Transformer,
        source: &[TokenId],
        source_language: usize,
        target_language: usize,
    ) -> Result<Vec<TokenId>> {
        Ok(translate(model, source, source_language, target_language, &self.0)?
            .output()
            .to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtConfig {
    pub rounds: usize,
    /// Monolingual sentences per language translated each round.
    pub pairs_per_round: usize,
    /// Training settings for each round; the seed is offset by the round.
    pub train: TrainConfig,
    /// Also train on the masked objective over the monolingual sentences.
    pub mix_mass: bool,
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("back-translation needs at least one round".into()));
        }
        if self.pairs_per_round == 0 {
            return Err(Error::Config("pairs_per_round must be positive".into()));
        }
        self.train.validate()
    }
}

/// Monolingual corpora of the two languages, tokenised.
#[derive(Debug, Clone, Copy)]
pub struct MonoPair<'a> {
    pub a: &'a [Vec<TokenId>],
    pub b: &'a [Vec<TokenId>],
    pub lang_a: usize,
    pub lang_b: usize,
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Clone)]
pub struct BtRound {
    pub outcome: FinetuneOutcome,
    pub pseudo: Vec<TokenPair>,
}

/// One round: pseudo-sources for B sentences (A→B pairs) and for A sentences
/// (B→A pairs), then training on the pseudo pairs.
pub fn backtranslate_round(
    model: Transformer,
    mono: MonoPair<'_>,
    cfg: &BtConfig,
    round: usize,
    translator: &dyn Translator,
    masker: &Masker,
    probe: Option<&BleuProbe<'_>>,
) -> Result<BtRound> {
    cfg.validate()?;
    if mono.a.is_empty() || mono.b.is_empty() {
        return Err(Error::Input("back-translation needs both monolingual corpora".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(round as u64));
    let pick_b = pick(mono.b.len(), cfg.pairs_per_round, &mut rng);
    let pick_a = pick(mono.a.len(), cfg.pairs_per_round, &mut rng);
    let mut pseudo = Vec::with_capacity(pick_a.len() + pick_b.len());
    for &i in &pick_b {
        let y = &mono.b[i];
        let x = translator.translate(&model, y, mono.lang_b, mono.lang_a)?;
        if !x.is_empty() {
            pseudo.push(TokenPair {
                source: x,
                source_language: mono.lang_a,
                target: y.clone(),
                target_language: mono.lang_b,
            });
        }
    }
    for &i in &pick_a {
        let x = &mono.a[i];
        let y = translator.translate(&model, x, mono.lang_a, mono.lang_b)?;
        if !y.is_empty() {
            pseudo.push(TokenPair {
                source: y,
                source_language: mono.lang_b,
                target: x.clone(),
                target_language: mono.lang_a,
            });
        }
    }
    if pseudo.is_empty() {
        return Err(Error::Input("every pseudo-source decoded to an empty sentence".into()));
    }
    let mut examples: Vec<MaskedExample> = pseudo.iter().map(TokenPair::example).collect();
    if cfg.mix_mass {
        let span = cfg.train.span;
        for (lang, idx, corpus) in [(mono.lang_a, &pick_a, mono.a), (mono.lang_b, &pick_b, mono.b)] {
            for &i in idx {
                examples.push(make_example(masker, &corpus[i], Mode::Mass, span, lang, rng.gen(), false)?);
            }
        }
    }
    let train = TrainConfig {
        seed: cfg.train.seed.wrapping_add(round as u64),
        ..cfg.train.clone()
    };
    let outcome = train_examples(model, &examples, &train, probe, round)?;
    Ok(BtRound { outcome, pseudo })
}

/// Runs `cfg.rounds` rounds, concatenating their reports.
pub fn backtranslate(
    mut model: Transformer,
    mono: MonoPair<'_>,
    cfg: &BtConfig,
    translator: &dyn Translator,
    masker: &Masker,
    probe: Option<&BleuProbe<'_>>,
) -> Result<(Transformer, Vec<FinetuneRow>)> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for round in 0..cfg.rounds {
        let r = backtranslate_round(model, mono, cfg, round, translator, masker, probe)?;
        rows.extend(r.outcome.rows);
        model = r.outcome.model;
    }
    Ok((model, rows))
}
