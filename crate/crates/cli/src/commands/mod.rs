pub mod corrupt;
pub mod evaluate;
pub mod paraphrase;
pub mod report;
pub mod train;
pub mod vocab;

use std::path::Path;

use lampat::config::RunConfig;
use lampat::corpus::{
    corrupt, pack, split_surfaces, tokenize, PackedSequence, PairRecord, StopwordSet, TokenSeq, TrainingPair,
    Vocab, EOS, SEP, UNK,
};
use lampat::pretrain::lm_sequence;
use lampat::rng::component_rng;

use crate::io;
use crate::Result;

/// Token sequence carrying surfaces only, for steps that never look at ids.
fn surfaces_only(text: &str, cfg: &RunConfig) -> TokenSeq {
    let surfaces = split_surfaces(text, cfg.data.mode);
    TokenSeq {
        ids: vec![UNK; surfaces.len()],
        surfaces,
    }
}

fn too_long(line: usize, e: lampat::Error) -> lampat::Error {
    match e {
        lampat::Error::SequenceTooLong { required, limit } => lampat::Error::MalformedData {
            line,
            message: format!("sequence needs {required} positions but the model holds {limit}"),
        },
        other => other,
    }
}

/// Corrupts plain lines into pairs, one output record per input line.
pub fn corrupt_lines(lines: &[String], stopwords: &StopwordSet, cfg: &RunConfig) -> Vec<PairRecord> {
    let mut rng = component_rng(cfg.seed, "corruption");
    let lang = &cfg.data.lang;
    lines
        .iter()
        .map(|line| {
            let target = surfaces_only(line, cfg);
            let source = corrupt(&target, stopwords, lang, &cfg.corruption, &mut rng);
            PairRecord {
                source: source.surfaces.join(" "),
                target: line.trim().to_string(),
                lang: lang.clone(),
            }
        })
        .collect()
}

/// Training sequences from a pair file, or from plain lines corrupted on
/// the fly. Blank lines are skipped.
pub fn training_data(path: &Path, vocab: &Vocab, stopwords: &StopwordSet, cfg: &RunConfig) -> Result<Vec<PackedSequence>> {
    let pairs = if io::is_jsonl(path) {
        io::read_jsonl::<PairRecord>(path)?
    } else {
        corrupt_lines(&io::read_lines(path)?, stopwords, cfg)
    };
    let max_len = cfg.model.max_len;
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        if p.target.trim().is_empty() || p.source.trim().is_empty() {
            continue;
        }
        let pair = TrainingPair {
            source: tokenize(&p.source, vocab, cfg.data.mode)?,
            target: tokenize(&p.target, vocab, cfg.data.mode)?,
        };
        out.push(pack(&pair, max_len).map_err(|e| too_long(i + 1, e))?);
    }
    Ok(out)
}

/// Language-model sequences for base pretraining. Pair records become
/// `source SEP target EOS`, plain lines `line EOS`; the loss covers every
/// position after the first.
pub fn pretrain_data(path: &Path, vocab: &Vocab, cfg: &RunConfig) -> Result<Vec<PackedSequence>> {
    let mode = cfg.data.mode;
    let max_len = cfg.model.max_len;
    let mut out = Vec::new();
    for (i, p) in io::read_pairs(path, &cfg.data.lang)?.iter().enumerate() {
        if p.target.trim().is_empty() {
            continue;
        }
        let mut tokens = Vec::new();
        if io::is_jsonl(path) && !p.source.trim().is_empty() {
            tokens.extend(tokenize(&p.source, vocab, mode)?.ids);
            tokens.push(SEP);
        }
        tokens.extend(tokenize(&p.target, vocab, mode)?.ids);
        tokens.push(EOS);
        if tokens.len() > max_len {
            return Err(too_long(
                i + 1,
                lampat::Error::SequenceTooLong {
                    required: tokens.len(),
                    limit: max_len,
                },
            )
            .into());
        }
        out.push(lm_sequence(tokens));
    }
    Ok(out)
}

/// All text a vocabulary should cover: plain lines, or both sides of pairs.
pub fn corpus_texts(path: &Path) -> Result<Vec<String>> {
    if io::is_jsonl(path) {
        Ok(io::read_jsonl::<PairRecord>(path)?
            .into_iter()
            .flat_map(|p| [p.source, p.target])
            .collect())
    } else {
        io::read_lines(path)
    }
}
