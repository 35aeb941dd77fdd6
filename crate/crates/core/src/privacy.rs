//! Rule-based redaction producing the retrieval view of private records.
//!
//! Rules run in list order. Within one rule, matches are taken leftmost-longest
//! and never overlap. A rule may name a capture group `redact`; then only that
//! group is replaced and the rest of the match is kept as context. Passes repeat
//! until no rule matches, so the output has no residual match for any rule.

use std::collections::HashSet;
use std::path::Path;

use regex_automata::meta::Regex;
use regex_automata::{Anchored, Input, MatchKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{digest, Digest};
use crate::store::{CommunityRecord, RecordId, Visibility};

const MAX_PASSES: usize = 8;
const REDACT_GROUP: &str = "redact";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrivacyError {
    #[error("rule {rule}: pattern does not compile: {detail}")]
    Pattern { rule: String, detail: String },
    #[error("rule {rule}: pattern matches the empty string")]
    EmptyMatch { rule: String },
    #[error("duplicate rule name {0}")]
    DuplicateName(String),
    #[error("rule name {0:?} is not an identifier")]
    BadName(String),
    #[error("rule {rule}: replacement tag {tag:?} is matched by rule {by}")]
    TagMatched { rule: String, tag: String, by: String },
    #[error("rules file line {line}: {detail}")]
    RulesFile { line: usize, detail: String },
    #[error("rules file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionRule {
    pub name: String,
    pub pattern: String,
    pub replacement_tag: String,
}

impl RedactionRule {
    pub fn new(name: &str, pattern: &str, replacement_tag: &str) -> Self {
        RedactionRule {
            name: name.to_string(),
            pattern: pattern.to_string(),
            replacement_tag: replacement_tag.to_string(),
        }
    }
}

/// Demo pack: emails, SSN-shaped numbers, phone numbers, and capitalized name
/// runs that follow a lowercase word or an honorific. Not a privacy guarantee;
/// sentence-initial names are left alone.
pub fn default_rules() -> Vec<RedactionRule> {
    vec![
        RedactionRule::new("email", r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}", "[EMAIL]"),
        RedactionRule::new("ssn", r"\b\d{3}-\d{2}-\d{4}\b", "[SSN]"),
        RedactionRule::new(
            "phone",
            r"(?:\+?1[ .-]?)?(?:\(\d{3}\) ?|\b\d{3}[ .-])?\b\d{3}[ .-]\d{4}\b",
            "[PHONE]",
        ),
        RedactionRule::new(
            "name",
            r"(?:[a-z0-9,;:]\s+|\b(?:Mr|Mrs|Ms|Dr|Prof)\.?\s+)(?P<redact>[A-Z][a-z]+(?:\s+[A-Z][a-z]+)+)",
            "[NAME]",
        ),
    ]
}

/// Parse a rules file: one rule per line, `name<TAB>pattern<TAB>tag`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_rules(text: &str) -> Result<Vec<RedactionRule>, PrivacyError> {
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(PrivacyError::RulesFile {
                line: i + 1,
                detail: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        rules.push(RedactionRule::new(cols[0], cols[1], cols[2]));
    }
    Ok(rules)
}

pub fn render_rules(rules: &[RedactionRule]) -> String {
    rules
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.name, r.pattern, r.replacement_tag))
        .collect()
}

pub fn load_rules_file(path: &Path) -> Result<Vec<RedactionRule>, PrivacyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PrivacyError::Io(format!("{}: {e}", path.display())))?;
    parse_rules(&text)
}

#[derive(Debug)]
struct CompiledRule {
    rule: RedactionRule,
    leftmost: Regex,
    longest: Regex,
    has_group: bool,
}

impl CompiledRule {
    fn compile(rule: &RedactionRule) -> Result<Self, PrivacyError> {
        let err = |e: regex_automata::meta::BuildError| PrivacyError::Pattern {
            rule: rule.name.clone(),
            detail: e.to_string(),
        };
        let leftmost = Regex::new(&rule.pattern).map_err(err)?;
        let longest = Regex::builder()
            .configure(Regex::config().match_kind(MatchKind::All))
            .build(&rule.pattern)
            .map_err(err)?;
        if leftmost.is_match("") {
            return Err(PrivacyError::EmptyMatch { rule: rule.name.clone() });
        }
        let has_group = leftmost.group_info().to_index(Default::default(), REDACT_GROUP).is_some();
        Ok(CompiledRule { rule: rule.clone(), leftmost, longest, has_group })
    }

    fn is_match(&self, text: &str) -> bool {
        self.leftmost.is_match(text)
    }

    /// One left-to-right sweep. Returns the rewritten text and the match count.
    fn apply(&self, text: &str) -> (String, usize) {
        let mut out = String::with_capacity(text.len());
        let mut caps = self.longest.create_captures();
        let mut pos = 0;
        let mut count = 0;
        while pos < text.len() {
            let Some(first) = self.leftmost.search(&Input::new(text).range(pos..)) else {
                break;
            };
            let start = first.start();
            self.longest
                .search_captures(&Input::new(text).range(start..).anchored(Anchored::Yes), &mut caps);
            let (end, target) = match caps.get_match() {
                Some(m) => {
                    let group = if self.has_group { caps.get_group_by_name(REDACT_GROUP) } else { None };
                    (m.end(), group.map(|g| g.range()).unwrap_or(m.range()))
                }
                None => (first.end(), first.range()),
            };
            if end == start {
                // Context-only empty match; step past one character.
                let step = text[start..].chars().next().map_or(1, char::len_utf8);
                out.push_str(&text[pos..start + step]);
                pos = start + step;
                continue;
            }
            out.push_str(&text[pos..target.start]);
            out.push_str(&self.rule.replacement_tag);
            out.push_str(&text[target.end..end]);
            pos = end;
            count += 1;
        }
        out.push_str(&text[pos.min(text.len())..]);
        (out, count)
    }
}

/// Compiled, immutable rule set.
#[derive(Debug)]
pub struct Redactor {
    rules: Vec<CompiledRule>,
    rules_digest: Digest,
}

pub fn compile_rules(rules: &[RedactionRule]) -> Result<Redactor, PrivacyError> {
    let mut names = HashSet::new();
    let mut compiled = Vec::with_capacity(rules.len());
    for rule in rules {
        let valid_name = !rule.name.is_empty()
            && rule.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid_name {
            return Err(PrivacyError::BadName(rule.name.clone()));
        }
        if !names.insert(rule.name.as_str()) {
            return Err(PrivacyError::DuplicateName(rule.name.clone()));
        }
        compiled.push(CompiledRule::compile(rule)?);
    }
    for rule in &compiled {
        for other in &compiled {
            if other.is_match(&rule.rule.replacement_tag) {
                return Err(PrivacyError::TagMatched {
                    rule: rule.rule.name.clone(),
                    tag: rule.rule.replacement_tag.clone(),
                    by: other.rule.name.clone(),
                });
            }
        }
    }
    Ok(Redactor { rules: compiled, rules_digest: digest(render_rules(rules).as_bytes()) })
}

impl Redactor {
    pub fn identity() -> Self {
        compile_rules(&[]).expect("empty rule set compiles")
    }

    pub fn default_pack() -> Self {
        compile_rules(&default_rules()).expect("default rules compile")
    }

    pub fn rules(&self) -> impl Iterator<Item = &RedactionRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    /// Digest of the rules in rules-file form; identifies the rule set in audits.
    pub fn rules_digest(&self) -> Digest {
        self.rules_digest
    }

    pub fn redact_text(&self, text: &str) -> (String, Vec<(String, usize)>) {
        let mut counts = vec![0usize; self.rules.len()];
        let mut current = text.to_string();
        for _ in 0..MAX_PASSES {
            let mut changed = false;
            for (i, rule) in self.rules.iter().enumerate() {
                let (next, n) = rule.apply(&current);
                if n > 0 {
                    counts[i] += n;
                    current = next;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let hits = self
            .rules
            .iter()
            .zip(counts)
            .filter(|(_, n)| *n > 0)
            .map(|(r, n)| (r.rule.name.clone(), n))
            .collect();
        (current, hits)
    }

    /// Names of rules that still match `text`. Empty for any redactor output.
    pub fn residual_matches(&self, text: &str) -> Vec<&str> {
        self.rules.iter().filter(|r| r.is_match(text)).map(|r| r.rule.name.as_str()).collect()
    }
}

/// C^safe view of one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafeRecord {
    pub record_id: RecordId,
    pub redacted_text: String,
    pub rule_hits: Vec<(String, usize)>,
    pub source_digest: Digest,
}

/// Private records are redacted; open records pass through untouched.
pub fn redact_record(redactor: &Redactor, record: &CommunityRecord) -> SafeRecord {
    let (redacted_text, rule_hits) = match record.visibility {
        Visibility::Private => redactor.redact_text(&record.text),
        Visibility::Open => (record.text.clone(), Vec::new()),
    };
    SafeRecord {
        record_id: record.record_id.clone(),
        redacted_text,
        rule_hits,
        source_digest: digest(record.text.as_bytes()),
    }
}

pub fn batch_sanitize(redactor: &Redactor, records: &[CommunityRecord]) -> Vec<SafeRecord> {
    records.iter().map(|r| redact_record(redactor, r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn private(id: &str, text: &str) -> CommunityRecord {
        CommunityRecord::new(id, text, Visibility::Private, "alice").unwrap()
    }

    fn name_phone() -> Redactor {
        let rules: Vec<_> =
            default_rules().into_iter().filter(|r| r.name == "name" || r.name == "phone").collect();
        compile_rules(&rules).unwrap()
    }

    #[test]
    fn redacts_the_documented_example() {
        let safe = redact_record(&name_phone(), &private("r1", "Call John Smith at 555-0100"));
        assert_eq!(safe.redacted_text, "Call [NAME] at [PHONE]");
        assert_eq!(safe.rule_hits, vec![("phone".to_string(), 1), ("name".to_string(), 1)]);
        assert_eq!(safe.source_digest, digest(b"Call John Smith at 555-0100"));
    }

    #[test]
    fn no_match_leaves_text() {
        let safe = redact_record(&Redactor::default_pack(), &private("r1", "the pantry opens at noon"));
        assert_eq!(safe.redacted_text, "the pantry opens at noon");
        assert!(safe.rule_hits.is_empty());
    }

    #[test]
    fn empty_rule_list_is_identity() {
        let r = compile_rules(&[]).unwrap();
        assert_eq!(r.redact_text("Mail bob@example.org").0, "Mail bob@example.org");
    }

    #[test]
    fn duplicate_names_and_bad_patterns_rejected() {
        let dup = [RedactionRule::new("a", "x", "[A]"), RedactionRule::new("a", "y", "[B]")];
        assert_eq!(compile_rules(&dup).unwrap_err(), PrivacyError::DuplicateName("a".into()));
        let bad = [RedactionRule::new("broken", "(", "[B]")];
        assert!(matches!(compile_rules(&bad), Err(PrivacyError::Pattern { rule, .. }) if rule == "broken"));
        let empty = [RedactionRule::new("star", "a*", "[S]")];
        assert!(matches!(compile_rules(&empty), Err(PrivacyError::EmptyMatch { .. })));
        let self_match = [RedactionRule::new("caps", "[A-Z]+", "[CAPS]")];
        assert!(matches!(compile_rules(&self_match), Err(PrivacyError::TagMatched { .. })));
    }

    #[test]
    fn rule_order_matters() {
        // "digits" first eats the number before "code" can see "code 123".
        let a = RedactionRule::new("digits", r"\d+", "[N]");
        let b = RedactionRule::new("code", r"code \d+", "[CODE]");
        let c = RedactionRule::new("word", r"\bsecret\b", "[W]");
        let text = "secret code 123";
        let ab = compile_rules(&[a.clone(), b.clone(), c.clone()]).unwrap().redact_text(text).0;
        let ba = compile_rules(&[b, a, c]).unwrap().redact_text(text).0;
        assert_eq!(ab, "[W] code [N]");
        assert_eq!(ba, "[W] [CODE]");
    }

    #[test]
    fn leftmost_longest_within_rule() {
        let r = compile_rules(&[RedactionRule::new("who", "Sam|Samantha", "[W]")]).unwrap();
        assert_eq!(r.redact_text("hi Samantha").0, "hi [W]");
    }

    #[test]
    fn open_records_bypass() {
        let open = CommunityRecord::new("o1", "Call John Smith at 555-0100", Visibility::Open, "bob").unwrap();
        let safe = redact_record(&Redactor::default_pack(), &open);
        assert_eq!(safe.redacted_text, open.text);
        assert!(safe.rule_hits.is_empty());
    }

    #[test]
    fn default_pack_examples() {
        let r = Redactor::default_pack();
        let (out, _) = r.redact_text(
            "Contact jane.doe@mail.com or 212-555-0199; ask for Dr. Maria Lopez, SSN 123-45-6789.",
        );
        assert_eq!(out, "Contact [EMAIL] or [PHONE]; ask for Dr. [NAME], SSN [SSN].");
        assert!(r.residual_matches(&out).is_empty());
    }

    #[test]
    fn batch_matches_elementwise() {
        let r = Redactor::default_pack();
        let recs = vec![private("a", "met Ann Lee"), private("b", "no pii"), private("c", "x@y.io")];
        let batch = batch_sanitize(&r, &recs);
        assert_eq!(batch.len(), 3);
        for (rec, safe) in recs.iter().zip(&batch) {
            assert_eq!(*safe, redact_record(&r, rec));
        }
        assert!(batch_sanitize(&r, &[]).is_empty());
    }

    #[test]
    fn rules_file_round_trip() {
        let text = render_rules(&default_rules());
        assert_eq!(parse_rules(&text).unwrap(), default_rules());
        assert!(matches!(parse_rules("a\tb\n"), Err(PrivacyError::RulesFile { line: 1, .. })));
        assert_eq!(parse_rules("# comment\n\n").unwrap(), vec![]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn fragment() -> impl Strategy<Value = String> {
            prop_oneof![
                "[a-z]{1,8}",
                "[A-Z][a-z]{2,6}",
                "[a-z]{1,5}@[a-z]{1,5}\\.(com|org)",
                "[0-9]{3}-[0-9]{4}",
                "[0-9]{3}-[0-9]{2}-[0-9]{4}",
                "(Dr|Ms)\\. [A-Z][a-z]{2,5} [A-Z][a-z]{2,5}",
                "[.,;:]",
            ]
        }

        proptest! {
            #[test]
            fn output_has_no_residual_matches_and_is_idempotent(
                parts in proptest::collection::vec(fragment(), 0..20)
            ) {
                let r = Redactor::default_pack();
                let text = parts.join(" ");
                let (once, _) = r.redact_text(&text);
                prop_assert!(r.residual_matches(&once).is_empty(), "{once:?}");
                let (twice, hits) = r.redact_text(&once);
                prop_assert_eq!(&twice, &once);
                prop_assert!(hits.is_empty());
            }
        }
    }
}
