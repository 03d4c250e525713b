//! Byte-pair-encoding subwords with reserved special symbols.
//!
//! Text is split on whitespace; every word becomes a sequence of characters
//! whose last symbol carries the `</w>` end-of-word marker. Learning greedily
//! merges the most frequent adjacent pair, breaking count ties by the
//! lexicographically smallest `(left, right)` pair, so the result depends
//! only on the multiset of words in the corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const UNK: TokenId = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<mask>", "<s>", "</s>", "<unk>"];
pub const END_OF_WORD: &str = "</w>";
/// How an unknown token is rendered by [`Bpe::decode`].
pub const UNK_MARK: &str = "⟨unk⟩";

const LANG_PREFIX: &str = "<lang:";

/// Bijection between token ids and symbol strings.
///
/// Ids `0..5` are the special symbols, followed by one tag per language,
/// followed by ordinary subwords.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    languages: Vec<String>,
}

impl Vocab {
    fn with_reserved(languages: &[String]) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            languages: languages.to_vec(),
        };
        for s in SPECIAL_TOKENS {
            v.insert(s.to_string());
        }
        for lang in languages {
            v.insert(format!("{LANG_PREFIX}{lang}>"));
        }
        v
    }

    fn insert(&mut self, token: String) -> bool {
        if self.index.contains_key(&token) {
            return false;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        true
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of reserved ids (specials plus language tags).
    pub fn num_reserved(&self) -> usize {
        SPECIAL_TOKENS.len() + self.languages.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < self.num_reserved()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn language_tag(&self, lang: usize) -> Option<TokenId> {
        (lang < self.languages.len()).then_some(SPECIAL_TOKENS.len() + lang)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that may stand in as a random replacement token.
    pub fn ordinary_ids(&self) -> std::ops::Range<TokenId> {
        self.num_reserved()..self.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::format("vocab", "missing reserved special tokens"));
        }
        let languages: Vec<String> = lines[SPECIAL_TOKENS.len()..]
            .iter()
            .map_while(|l| {
                l.strip_prefix(LANG_PREFIX)
                    .and_then(|r| r.strip_suffix('>'))
                    .map(str::to_string)
            })
            .collect();
        let mut v = Vocab::with_reserved(&languages);
        for (n, line) in lines.iter().enumerate().skip(v.len()) {
            if line.is_empty() || !v.insert(line.to_string()) {
                return Err(Error::format(
                    "vocab",
                    format!("line {}: empty or duplicate token {line:?}", n + 1),
                ));
            }
        }
        Ok(v)
    }

    /// Short digest identifying this vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Ordered merge rules; rank is the position in the list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    rules: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    fn push(&mut self, left: String, right: String) -> Result<()> {
        let key = (left, right);
        if self.ranks.contains_key(&key) {
            return Err(Error::format(
                "merges",
                format!("duplicate rule {} {}", key.0, key.1),
            ));
        }
        self.ranks.insert(key.clone(), self.rules.len());
        self.rules.push(key);
        Ok(())
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // TODO: avoid the two allocations per lookup with a borrowed key type.
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    pub fn to_text(&self) -> String {
        self.rules.iter().map(|(l, r)| format!("{l} {r}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut table = MergeTable::default();
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    table.push(l.to_string(), r.to_string())?
                }
                _ => {
                    return Err(Error::format(
                        "merges",
                        format!("line {}: expected \"left right\", got {line:?}", n + 1),
                    ))
                }
            }
        }
        Ok(table)
    }
}

/// Learned subword model: vocabulary plus merge rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bpe {
    vocab: Vocab,
    merges: MergeTable,
}

/// Token ids plus how many symbols fell back to [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub unknown: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl Bpe {
    /// Learns `num_merges` rules jointly over every line of `corpus`.
    /// Stops early when no adjacent pair remains.
    pub fn learn<'a, I>(corpus: I, num_merges: usize, languages: &[String]) -> Result<Bpe>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
        }
        let mut words: Vec<(Vec<String>, usize)> =
            counts.iter().map(|(w, &c)| (word_symbols(w), c)).collect();

        let mut vocab = Vocab::with_reserved(languages);
        let alphabet: BTreeSet<&String> = words.iter().flat_map(|(s, _)| s.iter()).collect();
        for s in alphabet {
            vocab.insert(s.clone());
        }

        let mut merges = MergeTable::default();
        for _ in 0..num_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
            let Some(((l, r), _)) = pairs
                .into_iter()
                .fold(None, |best: Option<((&str, &str), usize)>, (p, c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
            else {
                break;
            };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                *syms = merge_pair(syms, &l, &r);
            }
            vocab.insert(format!("{l}{r}"));
            merges.push(l, r)?;
        }
        Ok(Bpe { vocab, merges })
    }

    pub fn from_parts(vocab: Vocab, merges: MergeTable) -> Result<Bpe> {
        for (l, r) in merges.rules() {
            if vocab.id(&format!("{l}{r}")).is_none() {
                return Err(Error::format(
                    "merges",
                    format!("merge result {l}{r} missing from vocab"),
                ));
            }
        }
        Ok(Bpe { vocab, merges })
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Bpe> {
        let v = fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let m = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Bpe::from_parts(Vocab::from_text(&v)?, MergeTable::from_text(&m)?)
    }

    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        fs::write(vocab_path, self.vocab.to_text()).map_err(|e| Error::io(vocab_path, e))?;
        fs::write(merges_path, self.merges.to_text()).map_err(|e| Error::io(merges_path, e))
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merges.rank(&w[0], &w[1]).map(|r| (r, w)))
                .min_by_key(|(r, _)| *r);
            let Some((_, w)) = best else {
                return syms;
            };
            let (l, r) = (w[0].clone(), w[1].clone());
            syms = merge_pair(&syms, &l, &r);
        }
    }

    pub fn encode_counted(&self, text: &str) -> Encoding {
        let mut ids = Vec::new();
        let mut unknown = 0;
        for word in text.split_whitespace() {
            for sym in self.segment_word(word) {
                match self.vocab.id(&sym) {
                    Some(id) if !self.vocab.is_special(id) => ids.push(id),
                    _ => {
                        unknown += 1;
                        ids.push(UNK);
                    }
                }
            }
        }
        Encoding { ids, unknown }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_counted(text).ids
    }

    /// Inverse of [`Bpe::encode`]. Reserved ids other than [`UNK`] and
    /// [`MASK`] produce no text.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                UNK => out.push_str(UNK_MARK),
                MASK => out.push_str("<mask> "),
                _ if self.vocab.is_special(id) => {}
                _ => match self.vocab.token(id) {
                    Some(tok) => match tok.strip_suffix(END_OF_WORD) {
                        Some(stem) => {
                            out.push_str(stem);
                            out.push(' ');
                        }
                        None => out.push_str(tok),
                    },
                    None => out.push_str(UNK_MARK),
                },
            }
        }
        out.truncate(out.trim_end().len());
        out
    }
}
