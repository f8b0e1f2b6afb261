//! Paraphrase evaluation: BLEU and TER against references or the input,
//! iBLEU, and composites built on the model's own hidden states.
//!
//! Scores are kept in `[0, 1]`; only [`MetricReport::render_table`] scales by 100.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;
use std::io;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_surfaces, tokenize, TokenizeMode, Vocab};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::scalar::Scalar;
use crate::tinylm::Parameters;

pub const MAX_NGRAM: usize = 4;
/// Longest block the TER shift search will move.
pub const MAX_SHIFT_LEN: usize = 10;

/// Counts of every n-gram of order `n`.
pub fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if n > 0 {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with clipped counts, closest-reference brevity penalty and
/// add-one smoothing of orders ≥ 2 once any precision is zero.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.as_ref().is_empty()) {
        return Err(Error::EmptySequence);
    }
    let mut stats = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matches: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len().saturating_sub(n - 1);
        stats.push((matches, total));
    }
    if stats[0].0 == 0 {
        return Ok(0.0);
    }
    let smooth = stats.iter().any(|&(m, _)| m == 0);
    let log_mean = stats
        .iter()
        .enumerate()
        .map(|(i, &(m, t))| {
            let p = if smooth && i > 0 {
                (m as f64 + 1.0) / (t as f64 + 1.0)
            } else {
                m as f64 / t as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;

    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_mean.exp())
}

/// BLEU of the candidate against its own input; lower is more diverse.
pub fn self_bleu<T: Eq + Hash>(candidate: &[T], input: &[T]) -> Result<f64> {
    bleu(candidate, &[input], MAX_NGRAM)
}

/// Unit-cost edit distance between token sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Moves `seq[start..end]` so that it begins at `dest` in the result.
pub fn shift<T: Clone>(seq: &[T], start: usize, end: usize, dest: usize) -> Vec<T> {
    let mut rest: Vec<T> = seq[..start].iter().chain(&seq[end..]).cloned().collect();
    let tail = rest.split_off(dest);
    rest.extend_from_slice(&seq[start..end]);
    rest.extend(tail);
    rest
}

/// Arrangements the exact shift search may visit before settling for the
/// best total found so far.
pub const TER_SEARCH_BUDGET: usize = 20_000;

/// Edits left once the multiset overlap is matched. Shifts never change it,
/// so it bounds the edit distance of every rearrangement from below.
fn shift_invariant_bound<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut used = vec![false; b.len()];
    let mut common = 0;
    for x in a {
        if let Some(j) = (0..b.len()).find(|&j| !used[j] && b[j] == *x) {
            used[j] = true;
            common += 1;
        }
    }
    a.len().max(b.len()) - common
}

/// Every distinct result of one block shift.
fn shifted<T: Clone>(hyp: &[T]) -> impl Iterator<Item = Vec<T>> + '_ {
    let n = hyp.len();
    (0..n).flat_map(move |start| {
        (start + 1..=(start + MAX_SHIFT_LEN).min(n)).flat_map(move |end| {
            (0..=n - (end - start))
                .filter(move |&dest| dest != start)
                .map(move |dest| shift(hyp, start, end, dest))
        })
    })
}

/// Repeatedly applies the shift that lowers the total cost the most.
fn greedy_ter_edits<T: Clone + PartialEq>(candidate: &[T], reference: &[T]) -> usize {
    let mut hyp = candidate.to_vec();
    let mut dist = levenshtein(&hyp, reference);
    let mut shifts = 0;
    loop {
        let mut best: Option<(usize, Vec<T>)> = None;
        for moved in shifted(&hyp) {
            let d = levenshtein(&moved, reference);
            let bound = best.as_ref().map_or(dist, |b| b.0 + 1);
            if d + 1 < bound {
                best = Some((d, moved));
            }
        }
        match best {
            Some((d, moved)) => {
                hyp = moved;
                dist = d;
                shifts += 1;
            }
            None => return dist + shifts,
        }
    }
}

/// Fewest edits turning `candidate` into `reference`, where moving a block
/// of up to `MAX_SHIFT_LEN` tokens costs one edit. Breadth-first search over
/// shift sequences, starting from the greedy total and pruned by a bound
/// that shifts cannot lower; exact unless more than `TER_SEARCH_BUDGET`
/// arrangements would be needed.
pub fn ter_edits<T: Clone + Eq + Hash>(candidate: &[T], reference: &[T]) -> usize {
    let mut best = greedy_ter_edits(candidate, reference);
    let floor = shift_invariant_bound(candidate, reference);
    let mut seen: HashSet<Vec<T>> = HashSet::from([candidate.to_vec()]);
    let mut frontier = vec![candidate.to_vec()];
    let mut shifts = 0;
    while shifts + 1 + floor < best && !frontier.is_empty() {
        let mut next = Vec::new();
        'expand: for hyp in &frontier {
            for moved in shifted(hyp) {
                if seen.len() >= TER_SEARCH_BUDGET {
                    break 'expand;
                }
                if seen.insert(moved.clone()) {
                    best = best.min(shifts + 1 + levenshtein(&moved, reference));
                    next.push(moved);
                }
            }
        }
        frontier = next;
        shifts += 1;
        if seen.len() >= TER_SEARCH_BUDGET {
            break;
        }
    }
    best
}

/// Translation edit rate: edits (block shifts included) per reference token.
pub fn ter<T: Clone + Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(ter_edits(candidate, reference) as f64 / reference.len() as f64)
}

/// TER against the input; higher is more diverse.
pub fn self_ter<T: Clone + Eq + Hash>(candidate: &[T], input: &[T]) -> Result<f64> {
    ter(candidate, input)
}

pub fn ibleu<T: Eq + Hash, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    input: &[T],
    alpha: f64,
) -> Result<f64> {
    Ok(alpha * bleu(candidate, references, MAX_NGRAM)? - (1.0 - alpha) * self_bleu(candidate, input)?)
}

/// Weighted harmonic mean of similarity and diversity `1 − self_bleu`.
pub fn bert_ibleu(sim: f64, self_bleu: f64, beta: f64) -> f64 {
    let sim = sim.clamp(0.0, 1.0);
    let diversity = 1.0 - self_bleu;
    if sim <= 0.0 || diversity <= 0.0 {
        return 0.0;
    }
    (beta + 1.0) / (beta / sim + 1.0 / diversity)
}

/// Edit distance scaled by the longer length, in `[0, 1]`.
pub fn normalized_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / longest as f64
    }
}

/// Produces one vector per token of a sentence.
pub trait Encoder {
    fn encode(&self, text: &str) -> Result<Array2<f64>>;
}

/// Encodes with the final hidden states of a model; inputs longer than the
/// context window are truncated.
pub struct ModelEncoder<'a, F> {
    pub params: &'a Parameters<F>,
    pub adapters: Option<&'a AdapterSet<F>>,
    pub vocab: &'a Vocab,
    pub mode: TokenizeMode,
}

impl<F: Scalar> Encoder for ModelEncoder<'_, F> {
    fn encode(&self, text: &str) -> Result<Array2<f64>> {
        let mut ids = tokenize(text, self.vocab, self.mode)?.ids;
        ids.truncate(self.params.config().max_len);
        let h = self.params.hidden_states(&ids, self.adapters)?;
        Ok(h.mapv(|v| v.as_f64()))
    }
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Greedy-matching F1 over token cosine similarities.
pub fn embed_sim(a: &str, b: &str, encoder: &dyn Encoder) -> Result<f64> {
    let ea = unit_rows(&encoder.encode(a)?);
    let eb = unit_rows(&encoder.encode(b)?);
    if ea.nrows() == 0 || eb.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    let cos = ea.dot(&eb.t());
    let precision = cos.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).sum::<f64>()
        / cos.nrows() as f64;
    let recall = cos.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).sum::<f64>()
        / cos.ncols() as f64;
    let denom = precision + recall;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / denom).clamp(-1.0, 1.0))
}

/// `sim + ω·DS`, with `sim` taken against the best reference when any exist.
pub fn parascore(
    input: &str,
    candidate: &str,
    references: &[String],
    encoder: &dyn Encoder,
    mode: TokenizeMode,
    omega: f64,
) -> Result<f64> {
    let sim = if references.is_empty() {
        embed_sim(candidate, input, encoder)?
    } else {
        let mut best = f64::NEG_INFINITY;
        for r in references {
            best = best.max(embed_sim(candidate, r, encoder)?);
        }
        best
    };
    let ds = normalized_levenshtein(&split_surfaces(input, mode), &split_surfaces(candidate, mode));
    Ok(sim + omega * ds)
}

/// One line of an evaluation set. A missing candidate is generated first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub input: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    #[serde(default)]
    pub references: Vec<String>,
    pub lang: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub ibleu_alpha: f64,
    pub bert_ibleu_beta: f64,
    pub parascore_omega: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ibleu_alpha: 0.7,
            bert_ibleu_beta: 4.0,
            parascore_omega: 0.05,
        }
    }
}

/// Every metric for one record, or the mean over a group of records.
/// Reference-based scores are absent when no reference was available.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Scores {
    pub bleu: Option<f64>,
    pub self_bleu: f64,
    pub ter: Option<f64>,
    pub self_ter: f64,
    pub ibleu: Option<f64>,
    pub sim_proxy: f64,
    pub bert_ibleu_proxy: f64,
    pub parascore_proxy: f64,
}

pub const COLUMNS: [&str; 8] = [
    "bleu",
    "self_bleu",
    "ter",
    "self_ter",
    "ibleu",
    "sim_proxy",
    "bert_ibleu_proxy",
    "parascore_proxy",
];

impl Scores {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            self.bleu,
            Some(self.self_bleu),
            self.ter,
            Some(self.self_ter),
            self.ibleu,
            Some(self.sim_proxy),
            Some(self.bert_ibleu_proxy),
            Some(self.parascore_proxy),
        ]
    }

    fn mean(all: &[Scores]) -> Scores {
        let n = all.len() as f64;
        let opt = |f: fn(&Scores) -> Option<f64>| {
            let v: Vec<f64> = all.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let avg = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        Scores {
            bleu: opt(|s| s.bleu),
            self_bleu: avg(|s| s.self_bleu),
            ter: opt(|s| s.ter),
            self_ter: avg(|s| s.self_ter),
            ibleu: opt(|s| s.ibleu),
            sim_proxy: avg(|s| s.sim_proxy),
            bert_ibleu_proxy: avg(|s| s.bert_ibleu_proxy),
            parascore_proxy: avg(|s| s.parascore_proxy),
        }
    }
}

pub fn score_record(
    input: &str,
    candidate: &str,
    references: &[String],
    encoder: &dyn Encoder,
    mode: TokenizeMode,
    config: &MetricsConfig,
) -> Result<Scores> {
    let inp = split_surfaces(input, mode);
    let cand = split_surfaces(candidate, mode);
    let refs: Vec<Vec<String>> = references.iter().map(|r| split_surfaces(r, mode)).collect();
    let self_bleu = self_bleu(&cand, &inp)?;
    let sim = embed_sim(candidate, input, encoder)?;
    let (bleu, ter, ibleu) = if refs.is_empty() {
        (None, None, None)
    } else {
        let b = bleu(&cand, &refs, MAX_NGRAM)?;
        let t = refs
            .iter()
            .map(|r| ter(&cand, r))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        let a = config.ibleu_alpha;
        (Some(b), Some(t), Some(a * b - (1.0 - a) * self_bleu))
    };
    Ok(Scores {
        bleu,
        self_bleu,
        ter,
        self_ter: self_ter(&cand, &inp)?,
        ibleu,
        sim_proxy: sim,
        bert_ibleu_proxy: bert_ibleu(sim, self_bleu, config.bert_ibleu_beta),
        parascore_proxy: parascore(input, candidate, references, encoder, mode, config.parascore_omega)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageRow {
    pub lang: String,
    pub count: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub records: Vec<Scores>,
    /// Per-language means, sorted by language code.
    pub languages: Vec<LanguageRow>,
}

impl MetricReport {
    pub fn from_scores(langs: &[&str], records: Vec<Scores>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut groups: BTreeMap<&str, Vec<Scores>> = BTreeMap::new();
        for (l, s) in langs.iter().zip(&records) {
            groups.entry(l).or_default().push(*s);
        }
        let languages = groups
            .into_iter()
            .map(|(lang, g)| LanguageRow {
                lang: lang.to_string(),
                count: g.len(),
                scores: Scores::mean(&g),
            })
            .collect();
        Ok(MetricReport { records, languages })
    }

    /// Aggregate rows as CSV, one per language, prefixed by `label`.
    pub fn write_csv<W: io::Write>(&self, label: &str, out: &mut csv::Writer<W>) -> Result<()> {
        for row in &self.languages {
            let mut line = vec![label.to_string(), row.lang.clone(), row.count.to_string()];
            line.extend(row.scores.values().iter().map(|v| v.map_or(String::new(), |v| format!("{v:.6}"))));
            out.write_record(&line).map_err(csv_error)?;
        }
        Ok(())
    }

    pub fn csv_header() -> Vec<&'static str> {
        let mut h = vec!["label", "lang", "count"];
        h.extend(COLUMNS);
        h
    }

    /// Aggregate rows as an aligned text table, scores × 100.
    pub fn render_table(rows: &[(String, &MetricReport)]) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:<6} {:>5}", "label", "lang", "n");
        for c in COLUMNS {
            let _ = write!(out, " {c:>16}");
        }
        out.push('\n');
        for (label, report) in rows {
            for row in &report.languages {
                let _ = write!(out, "{label:<12} {:<6} {:>5}", row.lang, row.count);
                for v in row.scores.values() {
                    match v {
                        Some(v) => {
                            let _ = write!(out, " {:>16.2}", v * 100.0);
                        }
                        None => {
                            let _ = write!(out, " {:>16}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::MalformedData {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

/// Scores every record; each must already carry a candidate.
pub fn evaluate_corpus(
    records: &[EvalRecord],
    encoder: &dyn Encoder,
    mode: TokenizeMode,
    config: &MetricsConfig,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scores = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let Some(candidate) = r.candidate.as_deref() else {
            return Err(Error::MalformedData {
                line: i + 1,
                message: "record has no candidate".into(),
            });
        };
        scores.push(score_record(&r.input, candidate, &r.references, encoder, mode, config)?);
    }
    let langs: Vec<&str> = records.iter().map(|r| r.lang.as_str()).collect();
    MetricReport::from_scores(&langs, scores)
}
