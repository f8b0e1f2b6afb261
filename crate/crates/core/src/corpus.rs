//! Synthetic parallel corpus: tokenization, vocabulary, stopword removal,
//! probabilistic shuffling and packing of source/target pairs.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const UNK: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const PAD: usize = 3;
pub const RESERVED: usize = 4;

pub const UNK_SURFACE: &str = "<unk>";
const RESERVED_SURFACES: [&str; RESERVED] = [UNK_SURFACE, "\n", "</s>", "<pad>"];

const VOCAB_HEADER: &str = "# lampat vocab v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Whitespace,
    Char,
}

impl FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizeMode::Whitespace),
            "char" => Ok(TokenizeMode::Char),
            other => Err(Error::InvalidConfig(format!("unknown tokenize mode {other:?}"))),
        }
    }
}

impl fmt::Display for TokenizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizeMode::Whitespace => "whitespace",
            TokenizeMode::Char => "char",
        })
    }
}

/// Bidirectional token map. Ids 0..4 are reserved for UNK, SEP, EOS and PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from non-reserved surfaces, in id order.
    pub fn from_surfaces<I, S>(surfaces: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_SURFACES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            all.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        for s in surfaces {
            let s = s.into();
            if s.is_empty() || index.contains_key(&s) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate or empty vocabulary surface {s:?}"
                )));
            }
            index.insert(s.clone(), all.len());
            all.push(s);
        }
        if all.len() <= RESERVED {
            return Err(Error::InvalidConfig(
                "vocabulary needs at least one non-reserved surface".into(),
            ));
        }
        Ok(Vocab {
            surfaces: all,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> usize {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn surface(&self, id: usize) -> Option<&str> {
        self.surfaces.get(id).map(String::as_str)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    /// Non-reserved surfaces in id order.
    pub fn entries(&self) -> &[String] {
        &self.surfaces[RESERVED..]
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for s in self.entries() {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(VOCAB_HEADER) => {}
            _ => {
                return Err(Error::MalformedData {
                    line: 1,
                    message: "missing vocabulary header".into(),
                })
            }
        }
        Vocab::from_surfaces(lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_file_str(&text)
    }
}

/// A sentence as token ids, with the surface each id came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub surfaces: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token sequence from ids, taking surfaces from the vocabulary.
    pub fn from_ids(ids: Vec<usize>, vocab: &Vocab) -> Self {
        let surfaces = ids
            .iter()
            .map(|&id| vocab.surface(id).unwrap_or(UNK_SURFACE).to_string())
            .collect();
        TokenSeq { ids, surfaces }
    }
}

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '。' | '，' | '、' | '！' | '？' | '；' | '：' | '…' | '«' | '»' | '¿' | '¡' | '“'
                | '”' | '‘' | '’' | '「' | '」' | '（' | '）'
        )
}

/// Splits text into surface pieces without consulting a vocabulary.
pub fn split_surfaces(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        TokenizeMode::Whitespace => {
            let mut out = Vec::new();
            for chunk in text.split_whitespace() {
                let chars: Vec<char> = chunk.chars().collect();
                let start = chars.iter().position(|&c| !is_punct(c));
                let Some(start) = start else {
                    out.extend(chars.iter().map(|c| c.to_string()));
                    continue;
                };
                let end = chars.iter().rposition(|&c| !is_punct(c)).unwrap() + 1;
                out.extend(chars[..start].iter().map(|c| c.to_string()));
                out.push(chars[start..end].iter().collect());
                out.extend(chars[end..].iter().map(|c| c.to_string()));
            }
            out
        }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, mode: TokenizeMode) -> Result<TokenSeq> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let surfaces = split_surfaces(text, mode);
    let ids = surfaces.iter().map(|s| vocab.id(s)).collect();
    Ok(TokenSeq { ids, surfaces })
}

/// Keeps the `max_size - 4` most frequent surfaces; equal counts fall back to
/// lexicographic order.
pub fn build_vocab<I, S>(lines: I, mode: TokenizeMode, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size <= RESERVED {
        return Err(Error::InvalidConfig(format!(
            "max_size must be at least {}, got {max_size}",
            RESERVED + 1
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_line = false;
    for line in lines {
        let line = line.as_ref();
        if line.trim().is_empty() {
            continue;
        }
        seen_line = true;
        for s in split_surfaces(line, mode) {
            if RESERVED_SURFACES.contains(&s.as_str()) {
                continue;
            }
            *counts.entry(s).or_default() += 1;
        }
    }
    if !seen_line || counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED);
    Vocab::from_surfaces(ranked.into_iter().map(|(s, _)| s))
}

/// Stopword lists keyed by language code; lookups are case-insensitive.
#[derive(Debug, Clone, Default)]
pub struct StopwordSet {
    by_lang: HashMap<String, HashSet<String>>,
}

impl StopwordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<I, S>(&mut self, lang: &str, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set = self.by_lang.entry(lang.to_string()).or_default();
        for w in words {
            let w = w.as_ref().trim();
            if !w.is_empty() {
                set.insert(w.to_lowercase());
            }
        }
    }

    pub fn with_lang<I, S>(lang: &str, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = Self::new();
        set.insert(lang, words);
        set
    }

    /// Reads every `<lang>.txt` file in `dir`, one surface per line.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut set = Self::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for path in files {
            let lang = path.file_stem().unwrap().to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            set.insert(&lang, text.lines());
        }
        Ok(set)
    }

    pub fn is_stopword(&self, lang: &str, surface: &str) -> bool {
        self.by_lang
            .get(lang)
            .is_some_and(|set| set.contains(&surface.to_lowercase()))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.by_lang.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub shuffle_prob: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            shuffle_prob: 0.33,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return Err(Error::InvalidConfig(format!(
                "shuffle_prob must lie in [0, 1], got {}",
                self.shuffle_prob
            )));
        }
        Ok(())
    }
}

/// Removes stopwords, then shuffles the whole remainder with probability
/// `shuffle_prob`. A sentence made only of stopwords is returned unchanged.
pub fn corrupt(
    target: &TokenSeq,
    stopwords: &StopwordSet,
    lang: &str,
    config: &CorruptionConfig,
    rng: &mut Rng,
) -> TokenSeq {
    let shuffle = rng.random_bool(config.shuffle_prob);
    let keep: Vec<usize> = (0..target.len())
        .filter(|&i| !stopwords.is_stopword(lang, &target.surfaces[i]))
        .collect();
    if keep.is_empty() {
        return target.clone();
    }
    let mut order = keep;
    if shuffle {
        order.shuffle(rng);
    }
    TokenSeq {
        ids: order.iter().map(|&i| target.ids[i]).collect(),
        surfaces: order.iter().map(|&i| target.surfaces[i].clone()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
}

/// `source ⊕ SEP ⊕ target ⊕ EOS` with the loss mask over the target side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub tokens: Vec<usize>,
    pub sep_index: usize,
    /// True on positions whose token the model must predict.
    pub mask: Vec<bool>,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Source tokens followed by the separator: the inference-time prompt.
    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..=self.sep_index]
    }

    pub fn source(&self) -> &[usize] {
        &self.tokens[..self.sep_index]
    }

    /// Target tokens, without the trailing EOS.
    pub fn target(&self) -> &[usize] {
        &self.tokens[self.sep_index + 1..self.tokens.len() - 1]
    }
}

pub fn pack(pair: &TrainingPair, max_len: usize) -> Result<PackedSequence> {
    let required = pair.source.len() + pair.target.len() + 2;
    if required > max_len {
        return Err(Error::SequenceTooLong {
            required,
            limit: max_len,
        });
    }
    let k = pair.source.len();
    let mut tokens = Vec::with_capacity(required);
    tokens.extend_from_slice(&pair.source.ids);
    tokens.push(SEP);
    tokens.extend_from_slice(&pair.target.ids);
    tokens.push(EOS);
    let mask = (0..required).map(|i| i > k).collect();
    Ok(PackedSequence {
        tokens,
        sep_index: k,
        mask,
    })
}

/// One line of the corrupted-pair dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: String,
    pub target: String,
    pub lang: String,
}
