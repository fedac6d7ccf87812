//! Landmark phrase extraction from Universal Dependencies parses.
//!
//! Parses are read from CoNLL-U. Character offsets and word timestamps ride
//! along in the MISC column as `StartChar=..|EndChar=..|TimeS=..`, and the
//! owning instruction is named by a `# instruction_id = ..` sentence comment.
//!
//! A landmark phrase is a nominal head together with its non-clausal
//! modifiers, rendered as the contiguous span from the leftmost to the
//! rightmost absorbed token.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Language, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedToken {
    /// 1-based position in the sentence.
    pub index: usize,
    pub text: String,
    pub lemma: String,
    pub upos: String,
    /// Governor index, 0 for the root.
    pub head: usize,
    pub deprel: String,
    pub start_char: usize,
    pub end_char: usize,
    pub time_s: f64,
}

impl ParsedToken {
    fn relation(&self) -> &str {
        self.deprel.split(':').next().unwrap_or("")
    }

    fn lemma_lower(&self) -> String {
        if self.lemma.is_empty() || self.lemma == "_" {
            self.text.to_lowercase()
        } else {
            self.lemma.to_lowercase()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedSentence {
    pub instruction_id: Option<String>,
    pub sent_id: Option<String>,
    pub tokens: Vec<ParsedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPhrase {
    pub instruction_id: String,
    pub order: usize,
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    pub time_s: f64,
    pub head_token: usize,
}

/// Which tokens count as mentions and which dependents they absorb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRules {
    pub head_upos: Vec<String>,
    /// Relations (matched on the part before any `:` subtype) whose
    /// dependents join the phrase, recursively.
    pub absorb: Vec<String>,
}

impl Default for ExtractionRules {
    fn default() -> Self {
        ExtractionRules {
            head_upos: vec!["NOUN".into(), "PROPN".into()],
            absorb: ["amod", "nummod", "advmod", "compound", "flat", "fixed"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// Lowercased phrases that are never emitted as landmarks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stoplist {
    entries: HashSet<String>,
}

impl Stoplist {
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Stoplist { entries }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// The starter list shipped for `language`.
    pub fn builtin(language: Language) -> Self {
        Self::parse(match language {
            Language::En => include_str!("../data/stoplist.en.txt"),
            Language::Hi => include_str!("../data/stoplist.hi.txt"),
            Language::Te => include_str!("../data/stoplist.te.txt"),
        })
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.entries.contains(&phrase.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parses a CoNLL-U document. Multiword-token ranges and empty nodes are
/// skipped.
pub fn parse_conllu(text: &str) -> Result<Vec<ParsedSentence>> {
    let mut sentences = Vec::new();
    let mut current = ParsedSentence::default();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !current.tokens.is_empty() {
                sentences.push(std::mem::take(&mut current));
            } else {
                current = ParsedSentence::default();
            }
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "instruction_id" => current.instruction_id = Some(value.trim().to_owned()),
                    "sent_id" => current.sent_id = Some(value.trim().to_owned()),
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Conllu {
                line: line_no,
                message: format!("expected 10 columns, found {}", cols.len()),
            });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let bad = |what: &str| Error::Conllu {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let index: usize = cols[0].parse().map_err(|_| bad("ID"))?;
        let head: usize = cols[6].parse().map_err(|_| bad("HEAD"))?;
        let misc = parse_misc(cols[9]);
        let field = |name: &str| {
            misc.get(name)
                .ok_or_else(|| Error::Conllu {
                    line: line_no,
                    message: format!("MISC is missing {name}"),
                })
                .map(|v| v.to_string())
        };
        let start_char: usize = field("StartChar")?.parse().map_err(|_| bad("StartChar"))?;
        let end_char: usize = field("EndChar")?.parse().map_err(|_| bad("EndChar"))?;
        let time_s: f64 = field("TimeS")?.parse().map_err(|_| bad("TimeS"))?;
        current.tokens.push(ParsedToken {
            index,
            text: cols[1].to_owned(),
            lemma: cols[2].to_owned(),
            upos: cols[3].to_owned(),
            head,
            deprel: cols[7].to_owned(),
            start_char,
            end_char,
            time_s,
        });
    }
    if !current.tokens.is_empty() {
        sentences.push(current);
    }
    Ok(sentences)
}

fn parse_misc(misc: &str) -> BTreeMap<&str, &str> {
    if misc == "_" {
        return BTreeMap::new();
    }
    misc.split('|')
        .filter_map(|kv| kv.split_once('='))
        .collect()
}

/// Renders sentences back to CoNLL-U, with the MISC conventions above.
pub fn write_conllu(sentences: &[ParsedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        if let Some(id) = &s.instruction_id {
            out.push_str(&format!("# instruction_id = {id}\n"));
        }
        if let Some(id) = &s.sent_id {
            out.push_str(&format!("# sent_id = {id}\n"));
        }
        for t in &s.tokens {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\tStartChar={}|EndChar={}|TimeS={}\n",
                t.index,
                t.text,
                t.lemma,
                t.upos,
                t.head,
                t.deprel,
                t.start_char,
                t.end_char,
                t.time_s
            ));
        }
        out.push('\n');
    }
    out
}

/// Checks indices run 1..=n, heads are in range and not self-loops, and
/// every token reaches the root.
pub fn validate_tree(tokens: &[ParsedToken]) -> Result<()> {
    let n = tokens.len();
    for (k, t) in tokens.iter().enumerate() {
        if t.index != k + 1 {
            return Err(Error::Invariant(format!(
                "token indices are not contiguous at position {}",
                k + 1
            )));
        }
        if t.head == t.index || t.head > n {
            return Err(Error::Invariant(format!(
                "token {} has an invalid head",
                t.index
            )));
        }
    }
    for t in tokens {
        let mut cur = t.index;
        for _ in 0..=n {
            cur = tokens[cur - 1].head;
            if cur == 0 {
                break;
            }
        }
        if cur != 0 {
            return Err(Error::CyclicTree { token: t.index });
        }
    }
    Ok(())
}

/// A phrase span inside one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseSpan {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
    pub time_s: f64,
    pub head_token: usize,
}

/// Extracts the landmark phrases of one parsed sentence, ordered by span
/// start.
pub fn extract_landmark_phrases(
    sentence: &[ParsedToken],
    stoplist: &Stoplist,
    rules: &ExtractionRules,
) -> Result<Vec<PhraseSpan>> {
    validate_tree(sentence)?;
    let n = sentence.len();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for t in sentence {
        children[t.head].push(t.index);
    }
    let tok = |i: usize| &sentence[i - 1];
    let absorbs = |child: usize| {
        let c = tok(child);
        let rel = c.relation();
        if rules.absorb.iter().any(|r| r == rel) {
            return true;
        }
        // Determiners only as part of a fixed multiword expression.
        rel == "det"
            && children[child]
                .iter()
                .any(|&g| tok(g).relation() == "fixed")
    };

    let candidates: Vec<usize> = sentence
        .iter()
        .filter(|t| rules.head_upos.contains(&t.upos))
        .map(|t| t.index)
        .collect();

    let mut absorbed_sets: Vec<(usize, Vec<usize>)> = Vec::new();
    for &head in &candidates {
        let mut set = vec![head];
        let mut stack = vec![head];
        while let Some(i) = stack.pop() {
            for &c in &children[i] {
                if absorbs(c) {
                    set.push(c);
                    stack.push(c);
                }
            }
        }
        set.sort_unstable();
        absorbed_sets.push((head, set));
    }
    let absorbed_elsewhere: HashSet<usize> = absorbed_sets
        .iter()
        .flat_map(|(h, set)| set.iter().copied().filter(move |i| i != h))
        .collect();

    let mut spans = Vec::new();
    for (head, set) in &absorbed_sets {
        if absorbed_elsewhere.contains(head) {
            continue;
        }
        let (lo, hi) = (set[0], set[set.len() - 1]);
        let span = render_span(sentence, lo, hi);
        // Determiners and possessors widen the match key, not the span.
        let ext_lo = children[*head]
            .iter()
            .copied()
            .filter(|&c| matches!(tok(c).deprel.as_str(), "det" | "nmod:poss"))
            .chain(std::iter::once(lo))
            .min()
            .unwrap_or(lo);
        let extended = render_span(sentence, ext_lo, hi);
        let h = tok(*head);
        let stopped = stoplist.contains(&h.lemma_lower())
            || stoplist.contains(&h.text)
            || stoplist.contains(&span)
            || stoplist.contains(&extended);
        if stopped {
            continue;
        }
        spans.push(PhraseSpan {
            text: span,
            start_char: tok(lo).start_char,
            end_char: tok(hi).end_char,
            time_s: h.time_s,
            head_token: *head,
        });
    }
    spans.sort_by_key(|s| s.start_char);
    Ok(remove_overlaps(spans))
}

fn remove_overlaps(spans: Vec<PhraseSpan>) -> Vec<PhraseSpan> {
    let mut out: Vec<PhraseSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        match out.last_mut() {
            Some(prev) if prev.end_char > s.start_char => {
                if s.end_char - s.start_char > prev.end_char - prev.start_char {
                    *prev = s;
                }
            }
            _ => out.push(s),
        }
    }
    out
}

/// Joins tokens `lo..=hi` (1-based), inserting a single space wherever the
/// source text had a gap.
fn render_span(sentence: &[ParsedToken], lo: usize, hi: usize) -> String {
    let mut out = String::new();
    let mut prev_end: Option<usize> = None;
    for t in &sentence[lo - 1..hi] {
        if let Some(end) = prev_end {
            if t.start_char > end {
                out.push(' ');
            }
        }
        out.push_str(&t.text);
        prev_end = Some(t.end_char);
    }
    out
}

/// The timestamp of a phrase is the time its head word was spoken.
pub fn phrase_timestamp(tokens: &[Token], head: usize) -> f64 {
    tokens[head].time_s
}

/// Extracts every phrase of one instruction across its sentences. When the
/// instruction text is given, phrase text is sliced from it verbatim.
pub fn extract_instruction_phrases(
    instruction_id: &str,
    sentences: &[&ParsedSentence],
    text: Option<&str>,
    stoplist: &Stoplist,
    rules: &ExtractionRules,
) -> Result<Vec<LandmarkPhrase>> {
    let mut spans = Vec::new();
    for s in sentences {
        spans.extend(extract_landmark_phrases(&s.tokens, stoplist, rules)?);
    }
    spans.sort_by_key(|s| s.start_char);
    spans
        .into_iter()
        .enumerate()
        .map(|(order, s)| {
            let text = match text {
                Some(t) => t
                    .get(s.start_char..s.end_char)
                    .ok_or_else(|| {
                        Error::Invariant(format!(
                            "phrase span {}..{} is outside instruction `{instruction_id}`",
                            s.start_char, s.end_char
                        ))
                    })?
                    .to_owned(),
                None => s.text,
            };
            Ok(LandmarkPhrase {
                instruction_id: instruction_id.to_owned(),
                order,
                text,
                start_char: s.start_char,
                end_char: s.end_char,
                time_s: s.time_s,
                head_token: s.head_token,
            })
        })
        .collect()
}

/// Groups sentences by their `instruction_id` comment, keeping file order.
pub fn group_by_instruction(
    sentences: &[ParsedSentence],
) -> Result<BTreeMap<String, Vec<&ParsedSentence>>> {
    let mut out: BTreeMap<String, Vec<&ParsedSentence>> = BTreeMap::new();
    for (k, s) in sentences.iter().enumerate() {
        let id = s.instruction_id.clone().ok_or_else(|| {
            Error::Invariant(format!("sentence {} has no instruction_id comment", k + 1))
        })?;
        out.entry(id).or_default().push(s);
    }
    Ok(out)
}
