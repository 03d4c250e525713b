//! Corpus ingestion, tab-separated pair files, and the bundled synthetic
//! sentence generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Bpe, TokenId};

/// Default cap on the post-BPE length of an ingested sentence.
pub const DEFAULT_MAX_TOKENS: usize = 64;

/// Non-empty, whitespace-normalised lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| match l.split_once('\t') {
            Some((s, t)) if !t.contains('\t') => Ok((s.to_string(), t.to_string())),
            _ => Err(Error::format(
                "pairs",
                format!("line {}: expected \"source<TAB>target\"", n + 1),
            )),
        })
        .collect()
}

pub fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect()
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ingested {
    pub sentences: Vec<Vec<TokenId>>,
    /// Lines dropped for being empty after encoding or longer than the cap.
    pub dropped: usize,
    pub unknown: usize,
}

/// Encodes `lines`, dropping any whose token count exceeds `max_tokens`.
pub fn ingest(bpe: &Bpe, lines: &[String], max_tokens: usize) -> Ingested {
    let mut out = Ingested::default();
    for line in lines {
        let enc = bpe.encode_counted(line);
        out.unknown += enc.unknown;
        if enc.ids.is_empty() || enc.ids.len() > max_tokens {
            out.dropped += 1;
        } else {
            out.sentences.push(enc.ids);
        }
    }
    out
}

const CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Prep,
}

const CLASS_SIZES: [(Class, usize); 6] = [
    (Class::Det, 4),
    (Class::Adj, 10),
    (Class::Noun, 18),
    (Class::Verb, 12),
    (Class::Adv, 5),
    (Class::Prep, 4),
];

/// Seeded pseudo-language: a small lexicon of invented words and a phrase
/// grammar with noun-class agreement, so sentences carry learnable structure.
#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    words: Vec<(Class, String)>,
}

impl SyntheticGrammar {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        let mut words = Vec::new();
        for (class, n) in CLASS_SIZES {
            let syllables = match class {
                Class::Det | Class::Prep => 1,
                Class::Adv => 3,
                _ => 2,
            };
            let mut made = 0;
            while made < n {
                let w: String = (0..syllables)
                    .map(|_| {
                        format!(
                            "{}{}",
                            CONSONANTS.choose(&mut rng).unwrap(),
                            VOWELS.choose(&mut rng).unwrap()
                        )
                    })
                    .collect();
                if seen.insert(w.clone()) {
                    words.push((class, w));
                    made += 1;
                }
            }
        }
        SyntheticGrammar { words }
    }

    fn class_words(&self, class: Class) -> Vec<&str> {
        self.words
            .iter()
            .filter(|(c, _)| *c == class)
            .map(|(_, w)| w.as_str())
            .collect()
    }

    pub fn lexicon(&self) -> Vec<&str> {
        self.words.iter().map(|(_, w)| w.as_str()).collect()
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, out: &mut Vec<String>) -> usize {
        let dets = self.class_words(Class::Det);
        let adjs = self.class_words(Class::Adj);
        let nouns = self.class_words(Class::Noun);
        let noun = rng.gen_range(0..nouns.len());
        // Determiner agrees with the noun's class.
        out.push(dets[noun % dets.len()].to_string());
        if rng.gen_bool(0.4) {
            out.push(adjs.choose(rng).unwrap().to_string());
        }
        out.push(nouns[noun].to_string());
        noun
    }

    pub fn sentence<R: Rng>(&self, rng: &mut R) -> String {
        let verbs = self.class_words(Class::Verb);
        let advs = self.class_words(Class::Adv);
        let preps = self.class_words(Class::Prep);
        let mut out = Vec::new();
        let subject = self.noun_phrase(rng, &mut out);
        // Verb choice depends on the subject's noun class.
        let verb = (subject % 3) * 4 + rng.gen_range(0..4);
        out.push(verbs[verb % verbs.len()].to_string());
        if rng.gen_bool(0.7) {
            self.noun_phrase(rng, &mut out);
        }
        if rng.gen_bool(0.35) {
            out.push(preps.choose(rng).unwrap().to_string());
            self.noun_phrase(rng, &mut out);
        }
        if rng.gen_bool(0.3) {
            out.push(advs.choose(rng).unwrap().to_string());
        }
        out.join(" ")
    }

    pub fn generate(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sentence(&mut rng)).collect()
    }
}
