//! Parallel corpora and the operations that turn them into multilingual and
//! multi-task training sets.
//!
//! All operations are pure: they take corpora by reference and return new
//! ones. Anything random is driven by an explicit seed, and shuffles are a
//! single sequential pass so results never depend on how callers schedule
//! work.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::g2p::G2PRuleSet;
use crate::rng;

/// Default separator between a translation and its phonemic rendering.
pub const DEFAULT_SEP: &str = "<sep>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language code {0:?}")]
    InvalidLangCode(String),
    #[error("{0:?} is already a phoneme-task code")]
    NestedPhonemeTask(String),
    #[error("sentence pair has an empty {side} side")]
    EmptySide { side: &'static str },
    #[error("origin phoneme_task requires a phoneme-task target language, got {0}")]
    PhonemeTargetRequired(LangCode),
    #[error("source is already tagged: {0:?}")]
    AlreadyTagged(String),
    #[error("pair {index} of corpus {corpus:?} has no language tag")]
    UntaggedPair { corpus: String, index: usize },
    #[error("corpus {0:?} is empty")]
    EmptyCorpus(String),
    #[error("need at least one corpus")]
    NoCorpora,
    #[error("direction mismatch: {left} vs {right}")]
    DirectionMismatch { left: String, right: String },
    #[error("corpus {0:?} mixes language directions but is not marked mixed")]
    MixedDirections(String),
    #[error("pair {index} of backtranslated corpus has origin {found}, expected backtranslated")]
    OriginMismatch { index: usize, found: Origin },
    #[error("G2P rules are for {expected}, but source language is {found}")]
    G2PLanguageMismatch { expected: String, found: LangCode },
    #[error("separator {sep:?} already occurs in pair {index}")]
    SepCollision { sep: String, index: usize },
    #[error("invalid ratio {0:?}")]
    InvalidRatio(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Collapses runs of whitespace into single spaces and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A language (or phoneme-task) identifier such as `oc` or `ca_p`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangCode(String);

impl LangCode {
    const TASK_SUFFIX: &'static str = "_p";

    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let valid = !code.is_empty()
            && code
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            && !code.starts_with('_');
        if !valid {
            return Err(CorpusError::InvalidLangCode(code));
        }
        Ok(LangCode(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_phoneme_task(&self) -> bool {
        self.0.len() > Self::TASK_SUFFIX.len() && self.0.ends_with(Self::TASK_SUFFIX)
    }

    /// The language without any task suffix.
    pub fn base(&self) -> &str {
        if self.is_phoneme_task() {
            &self.0[..self.0.len() - Self::TASK_SUFFIX.len()]
        } else {
            &self.0
        }
    }

    /// `ca` → `ca_p`.
    pub fn phoneme_task(&self) -> Result<LangCode> {
        if self.is_phoneme_task() {
            return Err(CorpusError::NestedPhonemeTask(self.0.clone()));
        }
        Ok(LangCode(format!("{}{}", self.0, Self::TASK_SUFFIX)))
    }

    /// The source-side token selecting this language, e.g. `<oc>`.
    pub fn tag(&self) -> String {
        format!("<{}>", self.0)
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LangCode {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        LangCode::new(s)
    }
}

impl TryFrom<String> for LangCode {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self> {
        LangCode::new(s)
    }
}

impl From<LangCode> for String {
    fn from(code: LangCode) -> String {
        code.0
    }
}

/// Where a sentence pair came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Parallel,
    Backtranslated,
    PhonemeTask,
    HorizontalMultitask,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Parallel => "parallel",
            Origin::Backtranslated => "backtranslated",
            Origin::PhonemeTask => "phoneme_task",
            Origin::HorizontalMultitask => "horizontal_multitask",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Origin {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Origin::Parallel),
            "backtranslated" => Ok(Origin::Backtranslated),
            "phoneme_task" => Ok(Origin::PhonemeTask),
            "horizontal_multitask" => Ok(Origin::HorizontalMultitask),
            other => Err(CorpusError::Format(format!("unknown origin {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub origin: Origin,
}

impl SentencePair {
    /// Builds a pair with whitespace-normalised sides.
    pub fn new(
        source: &str,
        target: &str,
        src_lang: LangCode,
        tgt_lang: LangCode,
        origin: Origin,
    ) -> Result<Self> {
        let source = normalize_whitespace(source);
        let target = normalize_whitespace(target);
        if source.is_empty() {
            return Err(CorpusError::EmptySide { side: "source" });
        }
        if target.is_empty() {
            return Err(CorpusError::EmptySide { side: "target" });
        }
        if origin == Origin::PhonemeTask && !tgt_lang.is_phoneme_task() {
            return Err(CorpusError::PhonemeTargetRequired(tgt_lang));
        }
        Ok(SentencePair {
            source,
            target,
            src_lang,
            tgt_lang,
            origin,
        })
    }

    pub fn direction(&self) -> (&LangCode, &LangCode) {
        (&self.src_lang, &self.tgt_lang)
    }

    pub fn is_tagged(&self) -> bool {
        leading_tag(&self.source).is_some()
    }
}

/// Returns the tag at the start of `text` (`<oc>` → `oc`), if there is one.
pub fn leading_tag(text: &str) -> Option<&str> {
    let first = text.split_whitespace().next()?;
    let inner = first.strip_prefix('<')?.strip_suffix('>')?;
    LangCode::new(inner).ok().map(|_| inner)
}

/// Removes a leading tag token, if present.
pub fn strip_tag(text: &str) -> &str {
    match leading_tag(text) {
        Some(tag) => text[tag.len() + 2..].trim_start(),
        None => text,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub name: String,
    pub pairs: Vec<SentencePair>,
    mixed: bool,
}

impl ParallelCorpus {
    /// A single-direction corpus. Fails if the pairs disagree on direction.
    pub fn new(name: impl Into<String>, pairs: Vec<SentencePair>) -> Result<Self> {
        let name = name.into();
        if let Some(first) = pairs.first() {
            if pairs.iter().any(|p| p.direction() != first.direction()) {
                return Err(CorpusError::MixedDirections(name));
            }
        }
        Ok(ParallelCorpus {
            name,
            pairs,
            mixed: false,
        })
    }

    /// A corpus that may contain several directions (after concatenation).
    pub fn mixed(name: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            name: name.into(),
            pairs,
            mixed: true,
        }
    }

    /// Builds a single-direction corpus from aligned source/target lines.
    /// Lines where either side is empty are dropped; the number dropped is
    /// returned alongside.
    pub fn from_lines<'a>(
        name: impl Into<String>,
        src_lang: &LangCode,
        tgt_lang: &LangCode,
        origin: Origin,
        lines: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(Self, usize)> {
        let mut pairs = Vec::new();
        let mut dropped = 0;
        for (src, tgt) in lines {
            match SentencePair::new(src, tgt, src_lang.clone(), tgt_lang.clone(), origin) {
                Ok(pair) => pairs.push(pair),
                Err(CorpusError::EmptySide { .. }) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((ParallelCorpus::new(name, pairs)?, dropped))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_mixed(&self) -> bool {
        self.mixed
    }

    /// The shared direction of a non-mixed, nonempty corpus.
    pub fn direction(&self) -> Option<(&LangCode, &LangCode)> {
        if self.mixed {
            return None;
        }
        self.pairs.first().map(SentencePair::direction)
    }

    fn direction_label(&self) -> String {
        match self.direction() {
            Some((s, t)) => format!("{}({s}->{t})", self.name),
            None => format!("{}(mixed)", self.name),
        }
    }
}

/// How a corpus participates in a mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BalancePolicy {
    #[default]
    AsIs,
    OversampleToMax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixEntry {
    pub corpus: String,
    #[serde(default)]
    pub policy: BalancePolicy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixSpec {
    pub entries: Vec<MixEntry>,
    pub shuffle_seed: u64,
}

/// Prepends `<tgt_lang> ` to the source.
pub fn tag_source(pair: &SentencePair) -> Result<SentencePair> {
    if pair.is_tagged() {
        return Err(CorpusError::AlreadyTagged(pair.source.clone()));
    }
    Ok(SentencePair {
        source: format!("{} {}", pair.tgt_lang.tag(), pair.source),
        ..pair.clone()
    })
}

/// Tags every pair of a corpus.
pub fn tag_corpus(corpus: &ParallelCorpus) -> Result<ParallelCorpus> {
    let pairs = corpus.pairs.iter().map(tag_source).collect::<Result<_>>()?;
    Ok(ParallelCorpus {
        name: corpus.name.clone(),
        pairs,
        mixed: corpus.mixed,
    })
}

fn require_tagged(corpus: &ParallelCorpus) -> Result<()> {
    match corpus.pairs.iter().position(|p| !p.is_tagged()) {
        Some(index) => Err(CorpusError::UntaggedPair {
            corpus: corpus.name.clone(),
            index,
        }),
        None => Ok(()),
    }
}

fn shuffled<T>(mut items: Vec<T>, seed: u64) -> Vec<T> {
    items.shuffle(&mut rng::seeded(seed));
    items
}

/// Concatenates tagged corpora and shuffles the result with `seed`.
pub fn concat_multilingual(corpora: &[ParallelCorpus], seed: u64) -> Result<ParallelCorpus> {
    for corpus in corpora {
        require_tagged(corpus)?;
    }
    let pairs: Vec<SentencePair> = corpora
        .iter()
        .flat_map(|c| c.pairs.iter().cloned())
        .collect();
    let name = corpora
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    Ok(ParallelCorpus::mixed(name, shuffled(pairs, seed)))
}

/// Oversamples every corpus to the size of the largest one.
///
/// A corpus of size `s` balanced to `m` holds `m / s` whole copies followed
/// by `m % s` distinct pairs drawn without replacement, so duplication
/// counts within a corpus differ by at most one. The largest corpus (and any
/// corpus already at the maximum) passes through unchanged.
pub fn balance_oversample(corpora: &[ParallelCorpus], seed: u64) -> Result<Vec<ParallelCorpus>> {
    if corpora.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    if let Some(empty) = corpora.iter().find(|c| c.is_empty()) {
        return Err(CorpusError::EmptyCorpus(empty.name.clone()));
    }
    let max = corpora.iter().map(ParallelCorpus::len).max().unwrap_or(0);
    Ok(corpora
        .iter()
        .enumerate()
        .map(|(i, corpus)| oversample_to(corpus, max, rng::derive(seed, i as u64)))
        .collect())
}

fn oversample_to(corpus: &ParallelCorpus, size: usize, seed: u64) -> ParallelCorpus {
    let n = corpus.len();
    if n >= size {
        return corpus.clone();
    }
    let mut pairs = Vec::with_capacity(size);
    for _ in 0..size / n {
        pairs.extend(corpus.pairs.iter().cloned());
    }
    let remainder = size % n;
    if remainder > 0 {
        let picks = shuffled((0..n).collect::<Vec<_>>(), seed);
        pairs.extend(picks[..remainder].iter().map(|&i| corpus.pairs[i].clone()));
    }
    ParallelCorpus {
        name: corpus.name.clone(),
        pairs,
        mixed: corpus.mixed,
    }
}

/// Parses a non-negative rational from `3/4`, `0.25` or `2`.
pub fn parse_ratio(text: &str) -> Result<Ratio<u64>> {
    let bad = || CorpusError::InvalidRatio(text.to_string());
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num: u64 = num.trim().parse().map_err(|_| bad())?;
        let den: u64 = den.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(num, den));
    }
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if (int.is_empty() && frac.is_empty()) || frac.len() > 18 {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    if !digits.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let num: u64 = digits.parse().map_err(|_| bad())?;
    Ok(Ratio::new(num, 10u64.pow(frac.len() as u32)))
}

/// Adds a seeded sample of backtranslated pairs to a parallel corpus.
///
/// The sample holds `floor(ratio * |parallel|)` pairs, capped at `|bt|`.
/// With an empty sample the parallel corpus is returned as is; otherwise the
/// union is shuffled.
pub fn mix_backtranslation(
    parallel: &ParallelCorpus,
    bt: &ParallelCorpus,
    ratio: Ratio<u64>,
    seed: u64,
) -> Result<ParallelCorpus> {
    require_tagged(parallel)?;
    require_tagged(bt)?;
    if !bt.is_empty() && (parallel.is_mixed() || bt.is_mixed() || parallel.direction() != bt.direction())
    {
        return Err(CorpusError::DirectionMismatch {
            left: parallel.direction_label(),
            right: bt.direction_label(),
        });
    }
    if let Some((index, pair)) = bt
        .pairs
        .iter()
        .enumerate()
        .find(|(_, p)| p.origin != Origin::Backtranslated)
    {
        return Err(CorpusError::OriginMismatch {
            index,
            found: pair.origin,
        });
    }
    let wanted = (ratio * Ratio::from_integer(parallel.len() as u64)).to_integer() as usize;
    let take = wanted.min(bt.len());
    if take == 0 {
        return Ok(parallel.clone());
    }
    let picks = shuffled((0..bt.len()).collect::<Vec<_>>(), rng::derive(seed, 1));
    let mut pairs = parallel.pairs.clone();
    pairs.extend(picks[..take].iter().map(|&i| bt.pairs[i].clone()));
    Ok(ParallelCorpus {
        name: format!("{}+{}", parallel.name, bt.name),
        pairs: shuffled(pairs, rng::derive(seed, 2)),
        mixed: false,
    })
}

fn check_g2p_language(pair: &SentencePair, g2p: &G2PRuleSet) -> Result<()> {
    match g2p.language() {
        Some(lang) if lang == &pair.src_lang => Ok(()),
        other => Err(CorpusError::G2PLanguageMismatch {
            expected: other.map_or_else(|| "<unspecified>".to_string(), |l| l.to_string()),
            found: pair.src_lang.clone(),
        }),
    }
}

/// Appends a G2P task copy of the bitext: same sources re-tagged with the
/// source language's phoneme-task tag, phonemised sources as targets.
///
/// The original pairs come first, in order, followed by the task pairs.
pub fn make_g2p_vertical(bitext: &ParallelCorpus, g2p: &G2PRuleSet) -> Result<ParallelCorpus> {
    require_tagged(bitext)?;
    let mut task_pairs = Vec::with_capacity(bitext.len());
    for pair in &bitext.pairs {
        check_g2p_language(pair, g2p)?;
        let text = strip_tag(&pair.source);
        let task_lang = pair.src_lang.phoneme_task()?;
        task_pairs.push(SentencePair::new(
            &format!("{} {}", task_lang.tag(), text),
            &g2p.phonemize(text),
            pair.src_lang.clone(),
            task_lang,
            Origin::PhonemeTask,
        )?);
    }
    let mut pairs = bitext.pairs.clone();
    pairs.extend(task_pairs);
    Ok(ParallelCorpus::mixed(format!("{}+g2p", bitext.name), pairs))
}

/// Extends each target with ` <sep> ` and the phonemised source.
pub fn make_g2p_horizontal(
    bitext: &ParallelCorpus,
    g2p: &G2PRuleSet,
    sep_token: &str,
) -> Result<ParallelCorpus> {
    require_tagged(bitext)?;
    let mut pairs = Vec::with_capacity(bitext.len());
    for (index, pair) in bitext.pairs.iter().enumerate() {
        check_g2p_language(pair, g2p)?;
        let phonemes = g2p.phonemize(strip_tag(&pair.source));
        if pair.target.contains(sep_token) || phonemes.contains(sep_token) {
            return Err(CorpusError::SepCollision {
                sep: sep_token.to_string(),
                index,
            });
        }
        pairs.push(SentencePair::new(
            &pair.source,
            &format!("{} {sep_token} {phonemes}", pair.target),
            pair.src_lang.clone(),
            pair.tgt_lang.clone(),
            Origin::HorizontalMultitask,
        )?);
    }
    Ok(ParallelCorpus {
        name: format!("{}+g2p-h", bitext.name),
        pairs,
        mixed: bitext.mixed,
    })
}

/// Cuts everything from the first `sep_token` on and trims trailing space.
pub fn strip_phoneme_suffix<'a>(text: &'a str, sep_token: &str) -> &'a str {
    match text.find(sep_token) {
        Some(at) => text[..at].trim_end(),
        None => text,
    }
}

/// Resolves a [`MixSpec`] against named corpora: oversampled entries are
/// brought up to the largest entry, then everything is concatenated.
pub fn apply_mix(spec: &MixSpec, corpora: &[ParallelCorpus]) -> Result<ParallelCorpus> {
    if spec.entries.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    let selected = spec
        .entries
        .iter()
        .map(|entry| {
            corpora
                .iter()
                .find(|c| c.name == entry.corpus)
                .ok_or_else(|| CorpusError::Format(format!("unknown corpus {:?}", entry.corpus)))
        })
        .collect::<Result<Vec<_>>>()?;
    let max = selected.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut prepared = Vec::with_capacity(selected.len());
    for (i, (entry, corpus)) in spec.entries.iter().zip(&selected).enumerate() {
        prepared.push(match entry.policy {
            BalancePolicy::AsIs => (*corpus).clone(),
            BalancePolicy::OversampleToMax => {
                if corpus.is_empty() {
                    return Err(CorpusError::EmptyCorpus(corpus.name.clone()));
                }
                oversample_to(corpus, max, rng::derive(spec.shuffle_seed, i as u64))
            }
        });
    }
    concat_multilingual(&prepared, spec.shuffle_seed)
}

// ---------------------------------------------------------------------------
// On-disk format: <base>.src / <base>.tgt, one sentence per line, plus a JSON
// manifest <base>.json. Mixed corpora carry per-line provenance in <base>.meta
// as `src_lang<TAB>tgt_lang<TAB>origin`.

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_lang: Option<LangCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_lang: Option<LangCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
    #[serde(default)]
    pub mixed: bool,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads one sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_file(path)?.lines().map(str::to_string).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for line in lines {
        out.push_str(line.as_ref());
        out.push('\n');
    }
    write_file(path, &out)
}

/// Loads `<base>.{src,tgt,json}` (and `.meta` for mixed corpora). Returns the
/// corpus and the number of dropped empty lines.
pub fn read_corpus(base: &Path) -> Result<(ParallelCorpus, usize)> {
    let manifest_path = with_ext(base, "json");
    let manifest: CorpusManifest = serde_json::from_str(&read_file(&manifest_path)?)
        .map_err(|source| CorpusError::Manifest {
            path: manifest_path.clone(),
            source,
        })?;
    let src = read_lines(&with_ext(base, "src"))?;
    let tgt = read_lines(&with_ext(base, "tgt"))?;
    if src.len() != tgt.len() {
        return Err(CorpusError::Format(format!(
            "{}: {} source lines vs {} target lines",
            base.display(),
            src.len(),
            tgt.len()
        )));
    }
    let (corpus, dropped) = if manifest.mixed {
        let meta = read_lines(&with_ext(base, "meta"))?;
        if meta.len() != src.len() {
            return Err(CorpusError::Format(format!(
                "{}: meta has {} lines, expected {}",
                base.display(),
                meta.len(),
                src.len()
            )));
        }
        let mut pairs = Vec::with_capacity(src.len());
        let mut dropped = 0;
        for ((s, t), m) in src.iter().zip(&tgt).zip(&meta) {
            let fields: Vec<&str> = m.split('\t').collect();
            let [sl, tl, origin] = fields[..] else {
                return Err(CorpusError::Format(format!("bad meta line {m:?}")));
            };
            match SentencePair::new(s, t, sl.parse()?, tl.parse()?, origin.parse()?) {
                Ok(pair) => pairs.push(pair),
                Err(CorpusError::EmptySide { .. }) => dropped += 1,
                Err(e) => return Err(e),
            }
        }
        (ParallelCorpus::mixed(manifest.name, pairs), dropped)
    } else {
        let missing = |field: &str| CorpusError::Format(format!("manifest lacks {field}"));
        let src_lang = manifest.src_lang.ok_or_else(|| missing("src_lang"))?;
        let tgt_lang = manifest.tgt_lang.ok_or_else(|| missing("tgt_lang"))?;
        let origin = manifest.origin.unwrap_or(Origin::Parallel);
        ParallelCorpus::from_lines(
            manifest.name,
            &src_lang,
            &tgt_lang,
            origin,
            src.iter().map(String::as_str).zip(tgt.iter().map(String::as_str)),
        )?
    };
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} empty line(s)", base.display());
    }
    Ok((corpus, dropped))
}

/// Writes `<base>.{src,tgt,json}` (plus `.meta` when mixed).
pub fn write_corpus(base: &Path, corpus: &ParallelCorpus) -> Result<()> {
    let src: Vec<&str> = corpus.pairs.iter().map(|p| p.source.as_str()).collect();
    let tgt: Vec<&str> = corpus.pairs.iter().map(|p| p.target.as_str()).collect();
    write_lines(&with_ext(base, "src"), &src)?;
    write_lines(&with_ext(base, "tgt"), &tgt)?;
    let first = corpus.pairs.first();
    let manifest = if corpus.mixed {
        let meta: Vec<String> = corpus
            .pairs
            .iter()
            .map(|p| format!("{}\t{}\t{}", p.src_lang, p.tgt_lang, p.origin))
            .collect();
        write_lines(&with_ext(base, "meta"), &meta)?;
        CorpusManifest {
            name: corpus.name.clone(),
            src_lang: None,
            tgt_lang: None,
            origin: None,
            mixed: true,
        }
    } else {
        CorpusManifest {
            name: corpus.name.clone(),
            src_lang: first.map(|p| p.src_lang.clone()),
            tgt_lang: first.map(|p| p.tgt_lang.clone()),
            origin: first.map(|p| p.origin),
            mixed: false,
        }
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_file(&with_ext(base, "json"), &(json + "\n"))
}
