//! Rule-based grapheme-to-phoneme conversion.
//!
//! A rule file holds one rewrite per line:
//!
//! ```text
//! @language ca
//! # comment
//! qu -> k
//! c / _ e -> s        # right context
//! s / # _ -> s        # word-initial
//! h ->                # deletion
//! ```
//!
//! Contexts are literal strings; `#` at the outer edge of a context stands
//! for a word boundary (start or end of a whitespace-delimited token).
//! Application is a single left-to-right pass over the input: at each
//! position the first rule in file order whose pattern and contexts match is
//! applied and the cursor skips the consumed pattern. Contexts are checked
//! against the input, never against already rewritten output. Characters no
//! rule matches are copied through.

use std::fmt;

use thiserror::Error;

use crate::corpus::LangCode;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum G2pError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleWarning {
    DuplicateExactRule { line: usize, first_line: usize },
}

impl fmt::Display for RuleWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleWarning::DuplicateExactRule { line, first_line } => {
                write!(f, "line {line}: duplicate of the rule on line {first_line}")
            }
        }
    }
}

/// A context: a literal, optionally anchored at a word boundary on its
/// outer side.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Context {
    pub literal: Vec<char>,
    pub boundary: bool,
}

impl Context {
    fn parse_left(text: &str) -> Option<Context> {
        if text.is_empty() {
            return None;
        }
        let (boundary, rest) = match text.strip_prefix('#') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        Some(Context {
            literal: rest.chars().collect(),
            boundary,
        })
    }

    fn parse_right(text: &str) -> Option<Context> {
        if text.is_empty() {
            return None;
        }
        let (boundary, rest) = match text.strip_suffix('#') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        Some(Context {
            literal: rest.chars().collect(),
            boundary,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct G2PRule {
    pub pattern: Vec<char>,
    pub replacement: String,
    pub left: Option<Context>,
    pub right: Option<Context>,
}

impl G2PRule {
    pub fn new(pattern: &str, replacement: &str) -> Self {
        assert!(!pattern.is_empty(), "G2P pattern must be nonempty");
        G2PRule {
            pattern: pattern.chars().collect(),
            replacement: replacement.to_string(),
            left: None,
            right: None,
        }
    }

    /// Left context in file syntax, e.g. `#` or `#a` or `a`.
    pub fn with_left(mut self, ctx: &str) -> Self {
        self.left = Context::parse_left(ctx);
        self
    }

    /// Right context in file syntax, e.g. `e` or `#`.
    pub fn with_right(mut self, ctx: &str) -> Self {
        self.right = Context::parse_right(ctx);
        self
    }

    fn matches_at(&self, text: &[char], pos: usize) -> bool {
        let end = pos + self.pattern.len();
        if end > text.len() || text[pos..end] != self.pattern[..] {
            return false;
        }
        if let Some(left) = &self.left {
            let n = left.literal.len();
            if n > pos || text[pos - n..pos] != left.literal[..] {
                return false;
            }
            if left.boundary && !is_boundary_before(text, pos - n) {
                return false;
            }
        }
        if let Some(right) = &self.right {
            let n = right.literal.len();
            if end + n > text.len() || text[end..end + n] != right.literal[..] {
                return false;
            }
            if right.boundary && !is_boundary_after(text, end + n) {
                return false;
            }
        }
        true
    }
}

/// `pos` starts a token.
fn is_boundary_before(text: &[char], pos: usize) -> bool {
    pos == 0 || text[pos - 1].is_whitespace()
}

/// `pos` ends a token.
fn is_boundary_after(text: &[char], pos: usize) -> bool {
    pos == text.len() || text[pos].is_whitespace()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct G2PRuleSet {
    language: Option<LangCode>,
    rules: Vec<G2PRule>,
    preserve_case: bool,
}

impl G2PRuleSet {
    pub fn new(language: Option<LangCode>, rules: Vec<G2PRule>) -> Self {
        G2PRuleSet {
            language,
            rules,
            preserve_case: false,
        }
    }

    /// Match against the text as given instead of its lowercase form.
    pub fn preserving_case(mut self, preserve: bool) -> Self {
        self.preserve_case = preserve;
        self
    }

    pub fn language(&self) -> Option<&LangCode> {
        self.language.as_ref()
    }

    pub fn rules(&self) -> &[G2PRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Parses a rule file. Exact duplicate rules are kept (they can never
    /// fire) but reported.
    pub fn compile(text: &str) -> Result<(G2PRuleSet, Vec<RuleWarning>), G2pError> {
        let mut set = G2PRuleSet::default();
        let mut warnings = Vec::new();
        let mut lines_of: Vec<usize> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| G2pError::Parse { line, message };
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            if let Some(directive) = content.strip_prefix('@') {
                let mut parts = directive.split_whitespace();
                match (parts.next(), parts.next(), parts.next()) {
                    (Some("language"), Some(code), None) => {
                        set.language =
                            Some(LangCode::new(code).map_err(|e| err(e.to_string()))?);
                    }
                    (Some("preserve_case"), None, None) => set.preserve_case = true,
                    _ => return Err(err(format!("unknown directive {content:?}"))),
                }
                continue;
            }
            let rule = parse_rule(content).map_err(err)?;
            if let Some(first) = set.rules.iter().position(|r| r == &rule) {
                let warning = RuleWarning::DuplicateExactRule {
                    line,
                    first_line: lines_of[first],
                };
                log::warn!("{warning}");
                warnings.push(warning);
            }
            set.rules.push(rule);
            lines_of.push(line);
        }
        Ok((set, warnings))
    }

    /// Rewrites `text` in one left-to-right pass.
    pub fn phonemize(&self, text: &str) -> String {
        let chars: Vec<char> = if self.preserve_case {
            text.chars().collect()
        } else {
            text.to_lowercase().chars().collect()
        };
        let mut out = String::with_capacity(text.len());
        let mut pos = 0;
        while pos < chars.len() {
            match self.rules.iter().find(|r| r.matches_at(&chars, pos)) {
                Some(rule) => {
                    out.push_str(&rule.replacement);
                    pos += rule.pattern.len();
                }
                None => {
                    out.push(chars[pos]);
                    pos += 1;
                }
            }
        }
        out
    }
}

fn parse_rule(content: &str) -> Result<G2PRule, String> {
    let (lhs, rhs) = content
        .split_once("->")
        .ok_or_else(|| "expected `pattern -> replacement`".to_string())?;
    let mut rhs_parts = rhs.split_whitespace();
    let replacement = match rhs_parts.next() {
        Some(first) if first.starts_with('#') => "",
        Some(first) => first,
        None => "",
    };
    let trailing = rhs_parts.next();
    if trailing.is_some_and(|t| !t.starts_with('#')) && !replacement.is_empty() {
        return Err(format!("replacement {:?} may not contain whitespace", rhs.trim()));
    }
    let (pattern, ctx) = match lhs.split_once('/') {
        Some((p, c)) => (p.trim(), Some(c.trim())),
        None => (lhs.trim(), None),
    };
    if pattern.is_empty() {
        return Err("empty pattern".into());
    }
    if pattern.chars().any(|c| c.is_whitespace() || c == '#') {
        return Err(format!("pattern {pattern:?} may not contain whitespace or `#`"));
    }
    let mut rule = G2PRule::new(pattern, replacement);
    if let Some(ctx) = ctx {
        let (left, right) = ctx
            .split_once('_')
            .ok_or_else(|| "context needs `_` for the target position".to_string())?;
        let (left, right) = (left.trim(), right.trim());
        if right.contains('_') {
            return Err("context has more than one `_`".into());
        }
        let inner_hash = |s: &str, edge: fn(&str) -> &str| edge(s).contains('#');
        if inner_hash(left, |s| s.strip_prefix('#').unwrap_or(s))
            || inner_hash(right, |s| s.strip_suffix('#').unwrap_or(s))
        {
            return Err("`#` is only allowed at the outer edge of a context".into());
        }
        rule.left = Context::parse_left(left);
        rule.right = Context::parse_right(right);
    }
    Ok(rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(rules: Vec<G2PRule>) -> G2PRuleSet {
        G2PRuleSet::new(None, rules)
    }

    /// Independent reference: at each offset, try rules in order by slicing
    /// strings; contexts are tested with `ends_with`/`starts_with` on the
    /// untouched input.
    fn oracle(rules: &[(String, String, String, String)], text: &str) -> String {
        let text = text.to_lowercase();
        let bytes_at: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        let mut out = String::new();
        let mut k = 0;
        'outer: while k < bytes_at.len() {
            let at = bytes_at[k];
            let before = &text[..at];
            let after = &text[at..];
            for (pat, left, right, rep) in rules {
                if !after.starts_with(pat.as_str()) {
                    continue;
                }
                let rest = &after[pat.len()..];
                let left_ok = match left.strip_prefix('#') {
                    Some(lit) => {
                        before.ends_with(lit)
                            && before[..before.len() - lit.len()]
                                .chars()
                                .last()
                                .is_none_or(char::is_whitespace)
                    }
                    None => before.ends_with(left.as_str()),
                };
                let right_ok = match right.strip_suffix('#') {
                    Some(lit) => {
                        rest.starts_with(lit)
                            && rest[lit.len()..].chars().next().is_none_or(char::is_whitespace)
                    }
                    None => rest.starts_with(right.as_str()),
                };
                if left_ok && right_ok {
                    out.push_str(rep);
                    k += pat.chars().count();
                    continue 'outer;
                }
            }
            out.push_str(&after[..after.chars().next().unwrap().len_utf8()]);
            k += 1;
        }
        out
    }

    #[test]
    fn compile_examples() {
        let (rs, w) = G2PRuleSet::compile("qu -> k").unwrap();
        assert_eq!(rs.len(), 1);
        assert!(w.is_empty());

        let (rs, _) = G2PRuleSet::compile("c / _ e -> s").unwrap();
        let rule = &rs.rules()[0];
        assert_eq!(rule.right, Some(Context { literal: vec!['e'], boundary: false }));
        assert_eq!(rule.left, None);

        assert_eq!(
            G2PRuleSet::compile("->x").unwrap_err(),
            G2pError::Parse { line: 1, message: "empty pattern".into() }
        );
        assert!(matches!(
            G2PRuleSet::compile("# c\n\nab").unwrap_err(),
            G2pError::Parse { line: 3, .. }
        ));
    }

    #[test]
    fn compile_directives_contexts_and_duplicates() {
        let src = "@language ca\n# header\ns / # _ -> z\nh ->\nx / a_# -> ks # trailing note\nh ->\n";
        let (rs, warnings) = G2PRuleSet::compile(src).unwrap();
        assert_eq!(rs.language().unwrap().as_str(), "ca");
        assert_eq!(rs.len(), 4);
        assert_eq!(rs.rules()[0].left, Some(Context { literal: vec![], boundary: true }));
        assert_eq!(rs.rules()[1].replacement, "");
        assert_eq!(rs.rules()[2].right, Some(Context { literal: vec![], boundary: true }));
        assert_eq!(warnings, vec![RuleWarning::DuplicateExactRule { line: 6, first_line: 4 }]);
        assert!(G2PRuleSet::compile("a / b -> c").is_err());
        assert!(G2PRuleSet::compile("a / b#_ -> c").is_err());
        assert!(G2PRuleSet::compile("@bogus").is_err());
    }

    #[test]
    fn phonemize_examples() {
        assert_eq!(set(vec![]).phonemize("hola"), "hola");
        let r1 = set(vec![G2PRule::new("qu", "k")]);
        assert_eq!(r1.phonemize("quatre"), "katre");
        let r2 = set(vec![G2PRule::new("c", "s").with_right("e"), G2PRule::new("c", "k")]);
        assert_eq!(r2.phonemize("cec"), "sek");
        let swapped = set(vec![G2PRule::new("c", "k"), G2PRule::new("c", "s").with_right("e")]);
        assert_eq!(swapped.phonemize("cec"), "kek");
    }

    #[test]
    fn oracle_agrees_on_examples() {
        let r2 = vec![
            ("c".to_string(), String::new(), "e".to_string(), "s".to_string()),
            ("c".to_string(), String::new(), String::new(), "k".to_string()),
        ];
        assert_eq!(oracle(&r2, "cec"), "sek");
        let r1 = vec![("qu".to_string(), String::new(), String::new(), "k".to_string())];
        assert_eq!(oracle(&r1, "quatre"), "katre");
    }

    #[test]
    fn boundaries_and_case() {
        let rs = set(vec![
            G2PRule::new("s", "z").with_left("#"),
            G2PRule::new("a", "A").with_right("#"),
        ]);
        assert_eq!(rs.phonemize("sa as sas"), "zA as zas");
        assert_eq!(rs.phonemize("Sa"), "zA");
        let keep = rs.clone().preserving_case(true);
        assert_eq!(keep.phonemize("Sa"), "SA");
    }

    #[test]
    fn single_pass_does_not_cascade() {
        let rs = set(vec![G2PRule::new("a", "b"), G2PRule::new("b", "c")]);
        assert_eq!(rs.phonemize("ab"), "bc");
    }

    #[test]
    fn shipped_fixture_compiles() {
        let text = include_str!("../fixtures/g2p/ca.rules");
        let (rs, warnings) = G2PRuleSet::compile(text).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(rs.language().unwrap().as_str(), "ca");
        assert_eq!(rs.phonemize("quatre"), "katrə");
    }

    fn rule_strategy() -> impl Strategy<Value = (String, String, String, String)> {
        (
            "[abc]{1,2}",
            prop_oneof!["", "#", "[abc]", "#[abc]"],
            prop_oneof!["", "#", "[abc]", "[abc]#"],
            "[xyz]{0,3}",
        )
    }

    proptest! {
        #[test]
        fn engine_matches_oracle(
            rules in prop::collection::vec(rule_strategy(), 0..5),
            text in "[abcd ]{0,16}",
        ) {
            let compiled = set(rules
                .iter()
                .map(|(p, l, r, rep)| G2PRule::new(p, rep).with_left(l).with_right(r))
                .collect());
            prop_assert_eq!(compiled.phonemize(&text), oracle(&rules, &text));
        }

        #[test]
        fn output_length_bound(
            rules in prop::collection::vec(rule_strategy(), 0..5),
            text in "[abcd ]{0,16}",
        ) {
            let compiled = set(rules
                .iter()
                .map(|(p, l, r, rep)| G2PRule::new(p, rep).with_left(l).with_right(r))
                .collect());
            let ratio = rules
                .iter()
                .map(|(p, _, _, rep)| rep.chars().count() as f64 / p.chars().count() as f64)
                .fold(1.0, f64::max);
            let out = compiled.phonemize(&text).chars().count() as f64;
            prop_assert!(out <= text.chars().count() as f64 * ratio + 1e-9);
        }

        #[test]
        fn disjoint_alphabet_is_identity(text in "[defg ]{0,20}") {
            let rs = set(vec![G2PRule::new("a", "b"), G2PRule::new("bc", "x").with_left("#")]);
            prop_assert_eq!(rs.phonemize(&text), text.clone());
            prop_assert_eq!(set(vec![]).phonemize(&text), text);
        }
    }
}
