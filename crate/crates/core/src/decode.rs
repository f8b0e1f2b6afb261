//! Inference: corrupt the input, prompt with `source ⊕ SEP`, decode the
//! continuation and turn it back into text.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    corrupt, is_punct, tokenize, CorruptionConfig, StopwordSet, TokenSeq, TokenizeMode, Vocab, EOS,
    PAD, SEP, UNK, UNK_SURFACE,
};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tinylm::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    TopK,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::TopK => "top-k",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "top-k" => Ok(Strategy::TopK),
            other => Err(Error::InvalidConfig(format!("unknown decoding strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            k: 5,
            temperature: 1.0,
            max_new_tokens: 16,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("decode: k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("decode: temperature must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("decode: max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

fn banned(id: usize) -> bool {
    id == SEP || id == PAD
}

/// Highest logit among allowed ids; ties go to the lowest id.
fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = None::<(usize, F)>;
    for (i, &v) in row.iter().enumerate() {
        if banned(i) {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(EOS, |(i, _)| i)
}

fn sample_top_k<F: Scalar>(row: &[F], k: usize, temperature: f64, rng: &mut Rng) -> usize {
    let mut ids: Vec<usize> = (0..row.len()).filter(|&i| !banned(i)).collect();
    ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    let top = row[ids[0]].as_f64();
    let weights: Vec<f64> = ids
        .iter()
        .map(|&i| ((row[i].as_f64() - top) / temperature).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => ids[dist.sample(rng)],
        Err(_) => ids[0],
    }
}

/// Extends `prompt` until EOS or the token budget runs out and returns the
/// continuation without the EOS. `rng` is only drawn from when sampling.
pub fn generate<F: Scalar>(
    params: &Parameters<F>,
    adapters: Option<&AdapterSet<F>>,
    prompt: &[usize],
    config: &DecodeConfig,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::EmptySequence);
    }
    let limit = params.config().max_len;
    let required = prompt.len() + config.max_new_tokens;
    if required > limit {
        return Err(Error::SequenceTooLong { required, limit });
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < config.max_new_tokens {
        let (logits, _) = params.forward_tokens(&tokens, None, adapters)?;
        let last = logits.row(logits.nrows() - 1).to_vec();
        let next = match config.strategy {
            Strategy::Greedy => argmax(&last),
            Strategy::TopK => sample_top_k(&last, config.k, config.temperature, rng),
        };
        if next == EOS {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

fn opens(s: &str) -> bool {
    matches!(s, "(" | "[" | "{" | "¿" | "¡" | "«" | "“" | "‘" | "「" | "（")
}

fn closes(s: &str) -> bool {
    let mut chars = s.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if is_punct(c)) && !opens(s)
}

/// Joins token surfaces back into text. Unknown ids render as `<unk>`.
pub fn detokenize(ids: &[usize], vocab: &Vocab, mode: TokenizeMode) -> String {
    let surface = |id: usize| {
        if id == UNK {
            UNK_SURFACE
        } else {
            vocab.surface(id).unwrap_or(UNK_SURFACE)
        }
    };
    let mut out = String::new();
    let mut glue = true;
    for &id in ids {
        let s = surface(id);
        if mode == TokenizeMode::Whitespace && !glue && !closes(s) {
            out.push(' ');
        }
        out.push_str(s);
        glue = opens(s);
    }
    out
}

/// Everything needed to turn one line of text into a paraphrase.
pub struct Paraphraser<'a, F> {
    pub params: &'a Parameters<F>,
    pub adapters: Option<&'a AdapterSet<F>>,
    pub vocab: &'a Vocab,
    pub mode: TokenizeMode,
    pub stopwords: &'a StopwordSet,
    pub corruption: &'a CorruptionConfig,
    pub decode: &'a DecodeConfig,
}

impl<F: Scalar> Paraphraser<'_, F> {
    /// Tokenize, corrupt, prompt, generate, detokenize. The token budget is
    /// cut to the room left after the prompt.
    pub fn paraphrase(&self, text: &str, lang: &str, rng: &mut Rng) -> Result<String> {
        let target = tokenize(text, self.vocab, self.mode)?;
        let source: TokenSeq = corrupt(&target, self.stopwords, lang, self.corruption, rng);
        let mut prompt = source.ids;
        prompt.push(SEP);
        let limit = self.params.config().max_len;
        if prompt.len() >= limit {
            return Err(Error::SequenceTooLong {
                required: prompt.len() + 1,
                limit,
            });
        }
        let config = DecodeConfig {
            max_new_tokens: self.decode.max_new_tokens.min(limit - prompt.len()),
            ..*self.decode
        };
        let ids = generate(self.params, self.adapters, &prompt, &config, rng)?;
        Ok(detokenize(&ids, self.vocab, self.mode))
    }
}
