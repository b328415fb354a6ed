//! A synthetic language family for end-to-end runs.
//!
//! The base language `xa` is generated from a seeded syllable grammar; the
//! sister languages `xb` and `xc` are deterministic spelling rewrites of it,
//! written in the G2P rule format and applied with the same engine.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, CorpusError, LangCode, Origin, ParallelCorpus, SentencePair};
use crate::g2p::G2PRuleSet;
use crate::rng;

pub const XB_RULES: &str = include_str!("../../fixtures/family/xb.rules");
pub const XC_RULES: &str = include_str!("../../fixtures/family/xc.rules");
pub const XA_G2P: &str = include_str!("../../fixtures/family/xa.g2p");

const ONSETS: &[&str] = &[
    "p", "t", "c", "qu", "b", "d", "g", "m", "n", "ny", "l", "ll", "r", "s", "v", "j", "f",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "au"];
const CODAS: &[&str] = &["", "", "", "", "l", "r", "n", "s"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub seed: u64,
    pub lexicon: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Training pairs per sister language, e.g. `[("xb", 5000), ("xc", 1500)]`.
    pub train: Vec<(String, usize)>,
    pub dev: usize,
    pub test: usize,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            seed: 7,
            lexicon: 400,
            min_words: 2,
            max_words: 5,
            train: vec![("xb".into(), 5000), ("xc".into(), 1500)],
            dev: 100,
            test: 200,
        }
    }
}

pub struct Family {
    pub base: LangCode,
    pub sisters: Vec<(LangCode, G2PRuleSet)>,
    /// Pronunciation rules of the base language.
    pub g2p: G2PRuleSet,
    lexicon: Vec<String>,
    weights: WeightedIndex<f64>,
    spec: FamilySpec,
}

fn compile(rules: &str) -> G2PRuleSet {
    G2PRuleSet::compile(rules).expect("shipped rules parse").0
}

impl Family {
    pub fn new(spec: FamilySpec) -> Self {
        let mut r = rng::seeded(rng::derive(spec.seed, 0));
        let mut seen = HashSet::new();
        let mut lexicon = Vec::with_capacity(spec.lexicon);
        while lexicon.len() < spec.lexicon {
            let syllables = r.gen_range(1..=3);
            let mut word = String::new();
            for _ in 0..syllables {
                word.push_str(ONSETS[r.gen_range(0..ONSETS.len())]);
                word.push_str(VOWELS[r.gen_range(0..VOWELS.len())]);
            }
            word.push_str(CODAS[r.gen_range(0..CODAS.len())]);
            if seen.insert(word.clone()) {
                lexicon.push(word);
            }
        }
        // Zipf-like word frequencies
        let weights = WeightedIndex::new((0..lexicon.len()).map(|i| 1.0 / (i as f64 + 2.0).powf(0.8)))
            .expect("positive weights");
        Family {
            base: LangCode::new("xa").expect("valid code"),
            sisters: vec![
                (LangCode::new("xb").expect("valid code"), compile(XB_RULES)),
                (LangCode::new("xc").expect("valid code"), compile(XC_RULES)),
            ],
            g2p: compile(XA_G2P),
            lexicon,
            weights,
            spec,
        }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    pub fn rules(&self, lang: &str) -> Option<&G2PRuleSet> {
        self.sisters.iter().find(|(l, _)| l.as_str() == lang).map(|(_, r)| r)
    }

    pub fn translate(&self, lang: &str, text: &str) -> Option<String> {
        self.rules(lang).map(|r| r.phonemize(text))
    }

    /// `n` distinct base-language sentences.
    pub fn sentences(&self, n: usize, salt: u64) -> Vec<String> {
        let mut r = rng::seeded(rng::derive(self.spec.seed, salt));
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let len = r.gen_range(self.spec.min_words..=self.spec.max_words);
            let words: Vec<&str> = (0..len)
                .map(|_| self.lexicon[self.weights.sample(&mut r)].as_str())
                .collect();
            let s = words.join(" ");
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    }

    fn corpus(&self, name: &str, lang: &LangCode, sources: &[String]) -> Result<ParallelCorpus, CorpusError> {
        let rules = self.rules(lang.as_str()).expect("known sister");
        let pairs = sources
            .iter()
            .map(|s| SentencePair::new(s, &rules.phonemize(s), self.base.clone(), lang.clone(), Origin::Parallel))
            .collect::<Result<Vec<_>, _>>()?;
        ParallelCorpus::new(name, pairs)
    }

    /// Writes `train.xa-<l>`, `dev.xa-<l>` and `test.xa-<l>` corpora for each
    /// sister in the spec, plus the rule files, into `dir`. Sentences are
    /// disjoint across all sets. Returns the corpus base paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|e| CorpusError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let total: usize = self
            .spec
            .train
            .iter()
            .map(|(_, n)| n + self.spec.dev + self.spec.test)
            .sum();
        let pool = self.sentences(total, 1);
        let mut cursor = 0;
        let mut take = |n: usize| {
            let s = &pool[cursor..cursor + n];
            cursor += n;
            s.to_vec()
        };
        let mut written = Vec::new();
        for (lang, n) in &self.spec.train {
            let code = LangCode::new(lang.as_str())?;
            if self.rules(lang).is_none() {
                return Err(CorpusError::Format(format!("no rules for sister language {lang}")));
            }
            for (split, count) in [("train", *n), ("dev", self.spec.dev), ("test", self.spec.test)] {
                let name = format!("{split}.{}-{lang}", self.base);
                let corpus = self.corpus(&name, &code, &take(count))?;
                let base = dir.join(&name);
                corpus::write_corpus(&base, &corpus)?;
                written.push(base);
            }
        }
        for (file, text) in [("xb.rules", XB_RULES), ("xc.rules", XC_RULES), ("xa.g2p", XA_G2P)] {
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|e| CorpusError::Io { path, source: e })?;
        }
        Ok(written)
    }
}
