//! Key-value linearization, templated semantic time-series, a closed
//! word-level vocabulary with `[MASK]` tracking, and domain instructions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::dataset::{FeatureSchema, Record};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("sequence of {len} tokens exceeds {max} and truncation would drop a [MASK] at {position}")]
    MaskTruncation { len: usize, max: usize, position: usize },
    #[error("malformed vocabulary line {line}: {msg}")]
    VocabFormat { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TextError>;

pub const MASK: &str = "[MASK]";
pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const CLS_ID: usize = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[MASK]", "[SEP]", "[CLS]"];
pub const START_PROMPT: &str = "<|start_prompt|>";
pub const END_PROMPT: &str = "<|end_prompt|>";
const MULTI_CHAR: [&str; 6] = ["[PAD]", "[MASK]", "[SEP]", "[CLS]", START_PROMPT, END_PROMPT];
/// Prefix marking a token that starts a whitespace-separated word.
const WORD_START: char = '\u{2581}';

/// Renders with five significant digits in fixed notation.
pub fn format_sig5(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return "0.0000".into();
    }
    let mut exp = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (e.g. 9.99996 -> 10.000).
    let scaled = (x.abs() / 10f64.powi(exp - 4)).round();
    if scaled >= 100_000.0 {
        exp += 1;
    }
    let out = if exp >= 4 {
        let q = 10f64.powi(exp - 4);
        format!("{:.0}", (x / q).round() * q)
    } else {
        format!("{:.*}", (4 - exp) as usize, x)
    };
    if out.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        out.trim_start_matches('-').to_string()
    } else {
        out
    }
}

/// Five significant digits with trailing zeros and a bare decimal point removed.
pub fn format_value(x: f64) -> String {
    let s = format_sig5(x);
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t.is_empty() || t == "-" {
            "0".into()
        } else {
            t.to_string()
        }
    } else {
        s
    }
}

/// Ordered (description, value) pairs; absent values read `[MASK]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Linearization {
    pub pairs: Vec<(String, String)>,
}

pub fn linearize(record: &Record, schema: &FeatureSchema) -> Linearization {
    let pairs = schema
        .names()
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let value = match record.feature(k) {
                Some(v) => format_value(v),
                None => MASK.to_string(),
            };
            (name.clone(), value)
        })
        .collect();
    Linearization { pairs }
}

fn header_sentence(region: &str, day: i64) -> String {
    format!("On day {day} in region {region}.")
}

fn pair_sentence(key: &str, value: &str) -> String {
    format!(" the {key} was {value}.")
}

/// Deterministic sentence rendering of one linearized record.
pub fn render_semantic(lin: &Linearization, region: &str, day: i64) -> String {
    let mut s = header_sentence(region, day);
    for (k, v) in &lin.pairs {
        s.push_str(&pair_sentence(k, v));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.mask_positions.len()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '\''
}

/// Splits text into vocabulary pieces. Words are letter runs, every digit and
/// punctuation mark stands alone, and a piece that follows whitespace carries
/// the word-start prefix. Special tokens are kept whole.
fn pieces(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = false;
    let mut rest = s;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            start = true;
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let (piece, len) = if let Some(sp) = MULTI_CHAR.iter().find(|sp| rest.starts_with(**sp)) {
            (sp.to_string(), sp.len())
        } else if is_word_char(c) {
            let len = rest
                .char_indices()
                .find(|(_, ch)| !is_word_char(*ch))
                .map(|(i, _)| i)
                .unwrap_or(rest.len());
            (rest[..len].to_string(), len)
        } else {
            (c.to_string(), c.len_utf8())
        };
        let is_special = SPECIALS.contains(&piece.as_str());
        if start && !out.is_empty() && !is_special {
            out.push(format!("{WORD_START}{piece}"));
        } else {
            out.push(piece);
        }
        start = false;
        rest = &rest[len..];
    }
    out
}

/// Closed vocabulary. Specials hold ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from the schema, region ids, and the instruction
    /// texts that will be tokenized, plus every digit and sign mark.
    pub fn build(schema: &FeatureSchema, regions: &[String], texts: &[String]) -> Self {
        let mut set = BTreeSet::new();
        let mut corpus: Vec<String> = Vec::new();
        for r in regions {
            corpus.push(header_sentence(r, -1234567890));
        }
        corpus.push(header_sentence("x", 0));
        for name in schema.names() {
            corpus.push(pair_sentence(name, MASK));
            corpus.push(pair_sentence(name, "-0.5"));
        }
        corpus.push(domain_instruction("", "", &[]));
        corpus.push(domain_instruction("", "", &[1.0, 2.0]));
        corpus.push(domain_instruction("", "", &[2.0, 1.0]));
        corpus.push(domain_instruction("", "", &[1.0]));
        corpus.extend(texts.iter().cloned());
        for text in &corpus {
            set.extend(pieces(text));
            set.extend(pieces(&format!("x {text}")));
        }
        for c in "0123456789-.,".chars() {
            set.insert(c.to_string());
            set.insert(format!("{WORD_START}{c}"));
        }
        for s in SPECIALS {
            set.remove(s);
        }
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// `token<TAB>id` per line.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| TextError::VocabFormat {
                line: n + 1,
                msg: "missing tab".into(),
            })?;
            let id: usize = id.parse().map_err(|_| TextError::VocabFormat {
                line: n + 1,
                msg: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(TextError::VocabFormat {
                    line: n + 1,
                    msg: "ids must be dense and ordered".into(),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(TextError::VocabFormat {
                line: 1,
                msg: "reserved special tokens missing".into(),
            });
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or("[PAD]");
            if let Some(rest) = tok.strip_prefix(WORD_START) {
                s.push(' ');
                s.push_str(rest);
            } else if SPECIALS.contains(&tok) && !s.is_empty() {
                s.push(' ');
                s.push_str(tok);
            } else {
                s.push_str(tok);
            }
        }
        s
    }
}

/// Word-level tokenization with `[MASK]` bookkeeping. Sequences longer than
/// `max_len` are truncated unless that would drop a `[MASK]`.
pub fn tokenize(s: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSeq> {
    let mut ids = Vec::new();
    let mut mask_positions = Vec::new();
    for p in pieces(s) {
        let id = vocab.id(&p).ok_or_else(|| TextError::UnknownToken(p.clone()))?;
        if id == MASK_ID {
            mask_positions.push(ids.len());
        }
        ids.push(id);
    }
    if ids.len() > max_len {
        if let Some(&position) = mask_positions.iter().find(|&&p| p >= max_len) {
            return Err(TextError::MaskTruncation {
                len: ids.len(),
                max: max_len,
                position,
            });
        }
        ids.truncate(max_len);
    }
    Ok(TokenSeq { ids, mask_positions })
}

/// Tokens of a rendered record together with the token span of every value.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokens {
    pub seq: TokenSeq,
    /// `value_spans[k]` covers the value tokens of feature `k`.
    pub value_spans: Vec<std::ops::Range<usize>>,
}

/// Equivalent to `tokenize(render_semantic(..))`, additionally reporting
/// where each feature value landed.
pub fn tokenize_semantic(
    lin: &Linearization,
    region: &str,
    day: i64,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<SemanticTokens> {
    let mut text = header_sentence(region, day);
    let mut spans = Vec::with_capacity(lin.pairs.len());
    let mut count = pieces(&text).len();
    for (k, v) in &lin.pairs {
        text.push_str(&format!(" the {k} was"));
        let before = pieces(&text).len();
        text.push(' ');
        text.push_str(v);
        let after = pieces(&text).len();
        text.push('.');
        spans.push(before..after);
        count = after + 1;
    }
    debug_assert_eq!(count, pieces(&text).len());
    let seq = tokenize(&text, vocab, max_len)?;
    if seq.len() < count {
        spans.retain(|r| r.end <= seq.len());
    }
    Ok(SemanticTokens { seq, value_spans: spans })
}

/// Canned dataset and task descriptions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainDescription {
    pub dataset: String,
    pub task: String,
}

impl DomainDescription {
    pub fn preset(name: &str, n_regions: usize) -> Option<Self> {
        let (dataset, task) = match name {
            "crw-temp" => (
                "The Christina River Watershed Temperature (CRW-Temp) is a dataset containing stream water temperature observations from 42 river segments.".to_string(),
                "predict the stream water temperature given the observed meteorological features represented in the image and text spaces;",
            ),
            "crw-flow" => (
                "The Christina River Watershed Flow (CRW-Flow) is a dataset containing streamflow observations from 16 river segments. It is worth noting that the streamflow becomes hundreds of times higher than usual when it rains.".to_string(),
                "predict the streamflow given the observed meteorological features represented in the image and text spaces;",
            ),
            "agr" => (
                "The Agriculture nitrous oxide (AGR) is a dataset containing agricultural nitrous oxide emission observations from 6 chambers.".to_string(),
                "predict the nitrous oxide emission given the observed meteorological features represented in the image and text spaces;",
            ),
            "synthetic" => (
                format!("The Synthetic Watershed (SYN) is a dataset containing stream water temperature observations from {n_regions} regions."),
                "predict the stream water temperature given the observed meteorological features represented in the image and text spaces;",
            ),
            _ => return None,
        };
        Some(Self {
            dataset,
            task: task.to_string(),
        })
    }
}

pub const DOMAIN_PRESETS: [&str; 4] = ["crw-temp", "crw-flow", "agr", "synthetic"];

/// Summary statistics of a chronological target window.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSummary {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub trend: Trend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Stable,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Increasing => "increasing",
            Trend::Decreasing => "decreasing",
            Trend::Stable => "stable",
        }
    }
}

/// Min, max, median and least-squares trend over index position; `None`
/// for an empty window.
pub fn summarize_targets(window: &[f64]) -> Option<TargetSummary> {
    if window.is_empty() {
        return None;
    }
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let nf = n as f64;
    let mean = window.iter().sum::<f64>() / nf;
    let std = (window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf).sqrt();
    let xm = (nf - 1.0) / 2.0;
    let sxx: f64 = (0..n).map(|i| (i as f64 - xm).powi(2)).sum();
    let slope = if sxx > 0.0 {
        window
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - xm) * (y - mean))
            .sum::<f64>()
            / sxx
    } else {
        0.0
    };
    let trend = if slope > 0.01 * std {
        Trend::Increasing
    } else if slope < -0.01 * std {
        Trend::Decreasing
    } else {
        Trend::Stable
    };
    Some(TargetSummary {
        min: sorted[0],
        max: sorted[n - 1],
        median,
        trend,
    })
}

/// Instruction text: dataset description, task description, then target
/// statistics of the look-back window.
pub fn domain_instruction(dataset_desc: &str, task_desc: &str, target_window: &[f64]) -> String {
    let (min, max, median, trend) = match summarize_targets(target_window) {
        Some(s) => (
            format_sig5(s.min),
            format_sig5(s.max),
            format_sig5(s.median),
            s.trend.as_str().to_string(),
        ),
        None => ("unknown".into(), "unknown".into(), "unknown".into(), "unknown".into()),
    };
    format!(
        "{START_PROMPT} Dataset description: {dataset_desc} Task description: {task_desc} Target statistics: min value {min}, max value {max}, median value {median}, the trend of input is {trend} {END_PROMPT}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let d = DomainDescription::preset("crw-flow", 16).unwrap();
        Vocabulary::build(
            &FeatureSchema::hydrology(),
            &["seg1".into()],
            &[d.dataset, d.task],
        )
    }

    #[test]
    fn sig5_formatting() {
        assert_eq!(format_sig5(1.0), "1.0000");
        assert_eq!(format_sig5(2.5), "2.5000");
        assert_eq!(format_sig5(125.31325), "125.31");
        assert_eq!(format_sig5(0.00152), "0.0015200");
        assert_eq!(format_sig5(-4.56789), "-4.5679");
        assert_eq!(format_sig5(9.99996), "10.000");
        assert_eq!(format_sig5(1234567.0), "1234600");
        assert_eq!(format_value(0.00152), "0.00152");
        assert_eq!(format_value(0.4352), "0.4352");
        assert_eq!(format_value(125.31325), "125.31");
        assert_eq!(format_value(0.0), "0");
        assert_eq!(format_value(-1e-12), "-0.000000000001");
    }

    #[test]
    fn linearize_present_and_missing() {
        let schema = FeatureSchema::hydrology();
        let mut r = Record::pad("seg1", 0, 8);
        r.features[1] = 0.00152;
        r.present[1] = true;
        let lin = linearize(&r, &schema);
        assert_eq!(lin.pairs.len(), 8);
        assert_eq!(lin.pairs[1], ("rainfall".to_string(), "0.00152".to_string()));
        assert_eq!(lin.pairs[2], ("daily average air temperature".to_string(), MASK.to_string()));
        let all = linearize(&Record::pad("seg1", 0, 8), &schema);
        assert!(all.pairs.iter().all(|(_, v)| v == MASK));
    }

    #[test]
    fn render_template() {
        let lin = Linearization {
            pairs: vec![("rainfall".into(), "0.00152".into())],
        };
        let s = render_semantic(&lin, "seg1", 4);
        assert_eq!(s, "On day 4 in region seg1. the rainfall was 0.00152.");
        assert!(s.ends_with("the rainfall was 0.00152."));
        assert_eq!(render_semantic(&Linearization { pairs: vec![] }, "seg1", 4), "On day 4 in region seg1.");
        assert_eq!(s, render_semantic(&lin, "seg1", 4));
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let t = tokenize("the rainfall was [MASK] .", &v, 256).unwrap();
        assert_eq!(t.mask_positions, vec![3]);
        assert_eq!(t.ids[3], MASK_ID);

        let t = tokenize("0.00152", &v, 256).unwrap();
        let toks: Vec<&str> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["0", ".", "0", "0", "1", "5", "2"]);

        assert!(matches!(tokenize("the aardvark", &v, 256), Err(TextError::UnknownToken(_))));
    }

    #[test]
    fn truncation_never_drops_a_mask() {
        let v = vocab();
        let t = tokenize("the rainfall was 1 2 3", &v, 4).unwrap();
        assert_eq!(t.len(), 4);
        assert!(matches!(
            tokenize("the rainfall was 1 [MASK]", &v, 4),
            Err(TextError::MaskTruncation { position: 4, .. })
        ));
    }

    #[test]
    fn specials_have_reserved_ids_and_vocab_round_trips() {
        let v = vocab();
        assert_eq!(v.id("[PAD]"), Some(PAD_ID));
        assert_eq!(v.id("[MASK]"), Some(MASK_ID));
        assert_eq!(v.id("[SEP]"), Some(SEP_ID));
        assert_eq!(v.id("[CLS]"), Some(CLS_ID));
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("a\t0\n").is_err());
    }

    #[test]
    fn semantic_spans_align_with_plain_tokenization() {
        let v = vocab();
        let schema = FeatureSchema::hydrology();
        let mut r = Record::pad("seg1", 17, 8);
        for k in [0, 1, 3, 6] {
            r.features[k] = -12.3456 * k as f64 + 0.5;
            r.present[k] = true;
        }
        let lin = linearize(&r, &schema);
        let st = tokenize_semantic(&lin, "seg1", 17, &v, 256).unwrap();
        let plain = tokenize(&render_semantic(&lin, "seg1", 17), &v, 256).unwrap();
        assert_eq!(st.seq, plain);
        for (k, span) in st.value_spans.iter().enumerate() {
            let text = v.detokenize(&st.seq.ids[span.clone()]);
            assert_eq!(text.trim(), lin.pairs[k].1);
        }
        let masked: Vec<usize> = st
            .value_spans
            .iter()
            .enumerate()
            .filter(|(k, _)| !r.present[*k])
            .map(|(_, s)| s.start)
            .collect();
        assert_eq!(masked, st.seq.mask_positions);
    }

    #[test]
    fn instruction_layout() {
        let d = DomainDescription::preset("crw-flow", 16).unwrap();
        let s = domain_instruction(&d.dataset, &d.task, &[1.0, 2.0, 3.0, 4.0]);
        assert!(s.contains("the streamflow becomes hundreds of times higher than usual when it rains"));
        assert!(s.contains("min value 1.0000, max value 4.0000, median value 2.5000, the trend of input is increasing"));
        assert!(s.starts_with(START_PROMPT) && s.ends_with(END_PROMPT));
        let a = s.find("Dataset description:").unwrap();
        let b = s.find("Task description:").unwrap();
        let c = s.find("Target statistics:").unwrap();
        assert!(a < b && b < c);
        assert_eq!(s.matches("Dataset description:").count(), 1);

        let e = domain_instruction(&d.dataset, &d.task, &[]);
        assert!(e.contains("min value unknown, max value unknown, median value unknown, the trend of input is unknown"));
        let v = vocab();
        let t = tokenize(&s, &v, 512).unwrap();
        assert_eq!(v.detokenize(&t.ids), s);
        assert!(tokenize(&e, &v, 512).is_ok());
    }

    #[test]
    fn trend_rules() {
        assert_eq!(summarize_targets(&[4.0, 3.0, 2.0]).unwrap().trend, Trend::Decreasing);
        assert_eq!(summarize_targets(&[2.0, 2.0, 2.0]).unwrap().trend, Trend::Stable);
        assert_eq!(summarize_targets(&[5.0]).unwrap().trend, Trend::Stable);
        assert_eq!(summarize_targets(&[3.0, 1.0, 2.0]).unwrap().median, 2.0);
    }
}
