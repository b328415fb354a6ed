//! Subword segmentation: byte-pair-encoding merges over characters, or plain
//! character units.
//!
//! Text is NFC-normalised and whitespace-collapsed before anything else.
//! Each word becomes a sequence of characters whose first character carries
//! the boundary marker `▁` (so `ab cd` in character mode is `▁a b ▁c d`).
//! Reserved tokens (control symbols, `<sep>` and language tags) are never
//! split and never take part in merges.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const MARKER: char = '\u{2581}';

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";
pub const SEP: &str = "<sep>";

pub const UNK_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

const CONTROL: [&str; 5] = [UNK, BOS, EOS, PAD, SEP];

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("vocabulary size {requested} is below the minimum {minimum} (reserved + base symbols)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SubwordError> = std::result::Result<T, E>;

/// NFC plus whitespace collapsing.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterMode {
    Bpe { vocab_size: usize },
    Char,
}

/// Token inventory. Reserved tokens occupy the lowest ids: the five control
/// symbols, then tags in the order given at training time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    reserved: usize,
}

impl Vocab {
    fn new(tokens: Vec<String>, reserved: usize) -> Result<Self> {
        if reserved < CONTROL.len() || reserved > tokens.len() {
            return Err(SubwordError::Invalid(format!("bad reserved count {reserved}")));
        }
        if tokens[..CONTROL.len()] != CONTROL {
            return Err(SubwordError::Invalid("control tokens out of place".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(SubwordError::Invalid(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            reserved,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.reserved
    }

    pub fn reserved_count(&self) -> usize {
        self.reserved
    }

    /// Tags (language and task tokens) in reserved order.
    pub fn tags(&self) -> &[String] {
        &self.tokens[CONTROL.len()..self.reserved]
    }
}

/// A single-character unit, with or without the boundary marker.
fn is_char_unit(token: &str) -> bool {
    let mut chars = token.strip_prefix(MARKER).unwrap_or(token).chars();
    chars.next().is_some() && chars.next().is_none()
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                format!("{MARKER}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    mode: SegmenterMode,
    vocab: Vocab,
    merges: Vec<(String, String)>,
    /// (left id, right id) → (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
    unk_glyph: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    mode: SegmenterMode,
    reserved: usize,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    unk_glyph: String,
}

impl SubwordModel {
    fn assemble(
        mode: SegmenterMode,
        vocab: Vocab,
        merges: Vec<(String, String)>,
        unk_glyph: String,
    ) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab
                    .id(t)
                    .ok_or_else(|| SubwordError::Invalid(format!("merge operand {t:?} not in vocab")))
            };
            let (left, right) = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            if merged <= left.max(right) {
                return Err(SubwordError::Invalid(format!("merge {rank} uses a later token")));
            }
            ranks.insert((left, right), (rank, merged));
        }
        Ok(SubwordModel {
            mode,
            vocab,
            merges,
            ranks,
            unk_glyph,
        })
    }

    /// Trains a segmentation model.
    ///
    /// `tags` become reserved atomic tokens (e.g. `<oc>`, `<ca_p>`); they are
    /// also skipped when collecting training statistics. BPE repeatedly
    /// merges the most frequent adjacent pair, breaking count ties by the
    /// lexicographic order of the pair's strings, until the vocabulary holds
    /// `vocab_size` tokens or no pair is left.
    pub fn train<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        mode: SegmenterMode,
        tags: &[String],
    ) -> Result<Self> {
        let mut reserved: Vec<String> = CONTROL.iter().map(|s| s.to_string()).collect();
        for tag in tags {
            if !reserved.contains(tag) {
                reserved.push(tag.clone());
            }
        }
        let n_reserved = reserved.len();

        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in lines {
            for word in normalize(line).split(' ').filter(|w| !w.is_empty()) {
                if !reserved.iter().any(|r| r == word) {
                    *word_freq.entry(word.to_string()).or_default() += 1;
                }
            }
        }
        if word_freq.is_empty() {
            return Err(SubwordError::EmptyCorpus);
        }

        // every character in both its word-initial and word-internal form
        let base: BTreeSet<String> = word_freq
            .keys()
            .flat_map(|w| w.chars())
            .flat_map(|c| [c.to_string(), format!("{MARKER}{c}")])
            .collect();
        let mut tokens = reserved;
        tokens.extend(base.iter().cloned());
        let minimum = tokens.len();

        let merges = match mode {
            SegmenterMode::Char => Vec::new(),
            SegmenterMode::Bpe { vocab_size } => {
                if vocab_size < minimum {
                    return Err(SubwordError::VocabTooSmall {
                        requested: vocab_size,
                        minimum,
                    });
                }
                learn_merges(&mut tokens, &word_freq, vocab_size)
            }
        };
        let vocab = Vocab::new(tokens, n_reserved)?;
        SubwordModel::assemble(mode, vocab, merges, "\u{2047}".to_string())
    }

    pub fn mode(&self) -> SegmenterMode {
        self.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn unk_glyph(&self) -> &str {
        &self.unk_glyph
    }

    pub fn set_unk_glyph(&mut self, glyph: impl Into<String>) {
        self.unk_glyph = glyph.into();
    }

    /// Token ids of `text`. Unknown characters become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            match self.vocab.id(word) {
                Some(id) if self.vocab.is_reserved(id) => ids.push(id),
                _ => self.encode_word(word, &mut ids),
            }
        }
        ids
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word_symbols(word)
            .iter()
            .map(|s| match self.vocab.id(s) {
                Some(id) if !self.vocab.is_reserved(id) => id,
                _ => UNK_ID,
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, i, m)))
                .min();
            match best {
                Some((_, i, merged)) => {
                    syms[i] = merged;
                    syms.remove(i + 1);
                }
                None => break,
            }
        }
        out.extend(syms);
    }

    /// Token strings of `text`.
    pub fn encode_pieces(&self, text: &str) -> Vec<&str> {
        self.encode(text)
            .into_iter()
            .map(|id| self.vocab.token(id).unwrap_or(UNK))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode). `<s>`, `</s>` and `<pad>` are
    /// dropped; `<unk>` renders as the unknown glyph.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(SubwordError::UnknownId(id))?;
            match id {
                BOS_ID | EOS_ID | PAD_ID => {}
                UNK_ID => out.push_str(&self.unk_glyph),
                _ if self.vocab.is_reserved(id) => {
                    out.push(' ');
                    out.push_str(tok);
                }
                _ => match tok.strip_prefix(MARKER) {
                    Some(rest) => {
                        out.push(' ');
                        out.push_str(rest);
                    }
                    None => out.push_str(tok),
                },
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            mode: self.mode,
            reserved: self.vocab.reserved,
            vocab: self.vocab.tokens.clone(),
            merges: self.merges.clone(),
            unk_glyph: self.unk_glyph.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let vocab = Vocab::new(file.vocab, file.reserved)?;
        SubwordModel::assemble(file.mode, vocab, file.merges, file.unk_glyph)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        SubwordModel::from_json(&std::fs::read_to_string(path)?)
    }
}

fn learn_merges(
    tokens: &mut Vec<String>,
    word_freq: &BTreeMap<String, u64>,
    vocab_size: usize,
) -> Vec<(String, String)> {
    let mut ids: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    let mut words: Vec<(Vec<u32>, i64)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w).iter().map(|s| ids[s]).collect(), f as i64))
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, freq)) in words.iter().enumerate() {
        for pair in syms.windows(2) {
            let pair = (pair[0], pair[1]);
            *counts.entry(pair).or_default() += freq;
            occurs.entry(pair).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while tokens.len() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[a.0 as usize], &tokens[a.1 as usize]);
                    let kb = (&tokens[b.0 as usize], &tokens[b.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some(pair) = best else { break };

        let merged = format!("{}{}", tokens[pair.0 as usize], tokens[pair.1 as usize]);
        let new_id = tokens.len() as u32;
        tokens.push(merged.clone());
        ids.insert(merged, new_id);
        merges.push((tokens[pair.0 as usize].clone(), tokens[pair.1 as usize].clone()));

        let affected = occurs.remove(&pair).unwrap_or_default();
        for wi in affected {
            let (syms, freq) = &mut words[wi];
            for w in syms.windows(2) {
                *counts.get_mut(&(w[0], w[1])).expect("counted pair") -= *freq;
            }
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            *syms = next;
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += *freq;
                occurs.entry(p).or_default().insert(wi);
            }
        }
        counts.retain(|_, c| *c > 0);
    }
    merges
}

/// For each token of `to`, the row of `from`'s embedding table it should be
/// initialised from, or `None` for a fresh row. Reserved tokens and
/// single-character units present in both vocabularies are carried across.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingTransfer {
    pub rows: Vec<Option<u32>>,
}

impl EmbeddingTransfer {
    pub fn mapped(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    pub fn fresh(&self) -> usize {
        self.rows.iter().filter(|r| r.is_none()).count()
    }
}

pub fn transfer_map(from: &SubwordModel, to: &SubwordModel) -> EmbeddingTransfer {
    let rows = to
        .vocab
        .tokens
        .iter()
        .enumerate()
        .map(|(i, tok)| {
            let keep = to.vocab.is_reserved(i as u32) || is_char_unit(tok);
            if keep {
                from.vocab.id(tok)
            } else {
                None
            }
        })
        .collect();
    EmbeddingTransfer { rows }
}

/// Derives a character model from a subword model (same reserved tokens,
/// the subword model's base alphabet) together with the row mapping used to
/// initialise it from the subword model's embeddings.
pub fn char_transfer(subword: &SubwordModel) -> (SubwordModel, EmbeddingTransfer) {
    let tokens: Vec<String> = subword
        .vocab
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, tok)| subword.vocab.is_reserved(*i as u32) || is_char_unit(tok))
        .map(|(_, t)| t.clone())
        .collect();
    let vocab = Vocab::new(tokens, subword.vocab.reserved).expect("subset of a valid vocab");
    let char_model =
        SubwordModel::assemble(SegmenterMode::Char, vocab, Vec::new(), subword.unk_glyph.clone())
            .expect("no merges");
    let transfer = transfer_map(subword, &char_model);
    (char_model, transfer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags() -> Vec<String> {
        vec!["<oc>".into(), "<it>".into(), "<ca_p>".into()]
    }

    fn bpe(lines: &[&str], size: usize) -> SubwordModel {
        SubwordModel::train(lines.iter().copied(), SegmenterMode::Bpe { vocab_size: size }, &tags())
            .unwrap()
    }

    #[test]
    fn reserved_layout() {
        let m = bpe(&["ab"], 12);
        let v = m.vocab();
        assert_eq!(&v.tokens()[..8], &["<unk>", "<s>", "</s>", "<pad>", "<sep>", "<oc>", "<it>", "<ca_p>"]);
        assert_eq!(v.id("<sep>"), Some(SEP_ID));
        assert_eq!(v.tags(), &["<oc>", "<it>", "<ca_p>"]);
    }

    #[test]
    fn single_merge_on_tiny_corpus() {
        // "aa aa aa": symbols ▁a a; the only pair is (▁a, a) with count 3
        let base = 8 + 2;
        let m = bpe(&["aa aa aa"], base + 1);
        assert_eq!(m.merges(), &[(format!("{MARKER}a"), "a".to_string())]);
        assert_eq!(m.encode("aa").len(), 1);
        assert_eq!(m.decode(&m.encode("aa")).unwrap(), "aa");
    }

    #[test]
    fn tie_break_is_lexicographic() {
        // pairs (▁a,b) (b,c) (▁x,y) (y,z) each once; (b,c) is smallest
        let m = bpe(&["abc xyz"], 8 + 12 + 1);
        assert_eq!(m.merges()[0], ("b".to_string(), "c".to_string()));
    }

    #[test]
    fn vocab_too_small_and_degenerate() {
        assert!(matches!(
            SubwordModel::train(["abc"], SegmenterMode::Bpe { vocab_size: 5 }, &tags()),
            Err(SubwordError::VocabTooSmall { minimum: 14, .. })
        ));
        let m = bpe(&["abc"], 14);
        assert!(m.merges().is_empty());
        assert_eq!(m.encode_pieces("cab"), vec!["▁c", "a", "b"]);
        assert!(matches!(
            SubwordModel::train([" "], SegmenterMode::Char, &[]),
            Err(SubwordError::EmptyCorpus)
        ));
    }

    #[test]
    fn tags_are_atomic() {
        let m = bpe(&["<oc> abc abd", "<it> abc"], 30);
        let ids = m.encode("<oc> x");
        assert_eq!(ids[0], m.vocab().id("<oc>").unwrap());
        assert_eq!(ids[1], UNK_ID);
        assert_eq!(m.encode("a <sep> b")[1], SEP_ID);
        assert!(!m.vocab().tokens().iter().any(|t| t.contains("oc>") && t != "<oc>"));
    }

    #[test]
    fn char_mode() {
        let m = SubwordModel::train(["ab cd"], SegmenterMode::Char, &[]).unwrap();
        assert_eq!(m.encode_pieces("ab cd"), vec!["▁a", "b", "▁c", "d"]);
        assert_eq!(m.decode(&m.encode("ab cd")).unwrap(), "ab cd");
    }

    #[test]
    fn decode_edge_cases() {
        let mut m = bpe(&["ab"], 12);
        assert_eq!(m.decode(&[]).unwrap(), "");
        assert_eq!(m.decode(&[UNK_ID]).unwrap(), "\u{2047}");
        m.set_unk_glyph("?");
        assert_eq!(m.decode(&[UNK_ID]).unwrap(), "?");
        assert!(matches!(m.decode(&[999]), Err(SubwordError::UnknownId(999))));
        assert_eq!(m.decode(&[BOS_ID, EOS_ID, PAD_ID]).unwrap(), "");
        let ids = m.encode("<oc> ab <sep> ba");
        assert_eq!(m.decode(&ids).unwrap(), "<oc> ab <sep> ba");
    }

    #[test]
    fn nfc_normalisation() {
        let m = SubwordModel::train(["caf\u{e9}"], SegmenterMode::Char, &[]).unwrap();
        assert_eq!(m.encode("cafe\u{301}"), m.encode("caf\u{e9}"));
    }

    #[test]
    fn json_round_trip_is_stable() {
        let m = bpe(&["the cat sat on the mat", "the hat"], 40);
        let json = m.to_json();
        let back = SubwordModel::from_json(&json).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), json);
    }

    #[test]
    fn transfer_partitions_char_vocab() {
        let sub = bpe(&["abab abba", "ba"], 20);
        assert!(sub.vocab().tokens().iter().any(|t| t == "ab" || t == "▁ab" || t == "ba"));
        let (chars, transfer) = char_transfer(&sub);
        assert_eq!(transfer.rows.len(), chars.vocab().len());
        assert_eq!(transfer.mapped() + transfer.fresh(), chars.vocab().len());
        let a = chars.vocab().id("a").unwrap();
        assert_eq!(transfer.rows[a as usize], sub.vocab().id("a"));
        assert!(chars.vocab().tokens().iter().all(|t| t.chars().filter(|c| *c != MARKER).count() <= 1
            || chars.vocab().id(t).is_some_and(|id| chars.vocab().is_reserved(id))));

        // a character model over a wider alphabet gets fresh rows for new symbols
        let wide = SubwordModel::train(["abz"], SegmenterMode::Char, &tags()).unwrap();
        let t = transfer_map(&sub, &wide);
        let z = wide.vocab().id("z").unwrap();
        assert_eq!(t.rows[z as usize], None);
        assert_eq!(t.rows[EOS_ID as usize], Some(EOS_ID));
        assert_eq!(t.mapped() + t.fresh(), wide.vocab().len());
    }

    const CORPUS: &[&str] = &[
        "la casa blanca de la plaça",
        "les cases blanques",
        "una plaça gran i blanca",
        "quatre cases a la plaça",
    ];

    #[test]
    fn training_is_deterministic() {
        let a = SubwordModel::train(CORPUS.iter().copied(), SegmenterMode::Bpe { vocab_size: 70 }, &tags()).unwrap();
        let b = SubwordModel::train(CORPUS.iter().copied(), SegmenterMode::Bpe { vocab_size: 70 }, &tags()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn granularity_is_monotone() {
        let base = SubwordModel::train(CORPUS.iter().copied(), SegmenterMode::Char, &tags()).unwrap();
        let min = base.vocab().len();
        let mut previous: Vec<usize> = CORPUS.iter().map(|t| base.encode(t).len()).collect();
        for size in min..min + 60 {
            let m = SubwordModel::train(CORPUS.iter().copied(), SegmenterMode::Bpe { vocab_size: size }, &tags()).unwrap();
            let counts: Vec<usize> = CORPUS.iter().map(|t| m.encode(t).len()).collect();
            for (now, before) in counts.iter().zip(&previous) {
                assert!(now <= before, "size {size}");
            }
            previous = counts;
        }
    }

    proptest! {
        #[test]
        fn round_trip_over_alphabet(words in prop::collection::vec("[a-zçà]{1,8}", 0..8)) {
            let text = words.join(" ");
            let m = SubwordModel::train(CORPUS.iter().copied().chain(["à z y x w v u t s r q p o n m l k j i h g f e d c b"]), SegmenterMode::Bpe { vocab_size: 90 }, &tags()).unwrap();
            prop_assert_eq!(m.decode(&m.encode(&text)).unwrap(), text);
        }
    }
}
