//! Streaming ingestion of newline-delimited post/comment dumps.
//!
//! Parsing and filtering are separate, pure, per-line steps: a malformed
//! line is counted and skipped (never fatal), and every drop is attributed
//! to exactly one reason so the stats identity
//! `read = malformed + explicit + non_text + non_english + kept` holds.

use crate::KarmaError;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fmt;
use std::io::BufRead;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Post,
    Comment,
}

/// One validated dump record. For posts `text` is the title joined with the
/// self-text and `link_id` is the post's own id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub kind: RecordKind,
    pub id: String,
    pub parent_id: Option<String>,
    pub link_id: String,
    pub subreddit: String,
    pub author: String,
    pub created_utc: i64,
    pub text: String,
    pub score: i64,
    pub over_18: bool,
    pub tombstone: bool,
}

/// Why a parsed line was rejected. Only used for diagnostics; counting is
/// the contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseDefect {
    BadSyntax,
    MissingField(&'static str),
    BadValue(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub read: u64,
    pub malformed: u64,
    pub explicit: u64,
    pub non_text: u64,
    pub non_english: u64,
    pub kept: u64,
}

impl FilterStats {
    pub fn checks_out(&self) -> bool {
        self.read == self.malformed + self.explicit + self.non_text + self.non_english + self.kept
    }

    pub fn merge(&mut self, other: &FilterStats) {
        self.read += other.read;
        self.malformed += other.malformed;
        self.explicit += other.explicit;
        self.non_text += other.non_text;
        self.non_english += other.non_english;
        self.kept += other.kept;
    }

    pub fn record_drop(&mut self, reason: DropReason) {
        match reason {
            DropReason::Explicit => self.explicit += 1,
            DropReason::NonText => self.non_text += 1,
            DropReason::NonEnglish => self.non_english += 1,
        }
    }
}

impl fmt::Display for FilterStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>12}  {}", "read", self.read)?;
        writeln!(f, "{:>12}  {}", "malformed", self.malformed)?;
        writeln!(f, "{:>12}  {}", "explicit", self.explicit)?;
        writeln!(f, "{:>12}  {}", "non_text", self.non_text)?;
        writeln!(f, "{:>12}  {}", "non_english", self.non_english)?;
        write!(f, "{:>12}  {}", "kept", self.kept)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    Explicit,
    NonText,
    NonEnglish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

#[derive(Clone, Debug)]
pub struct FilterConfig {
    /// Minimum whitespace tokens for text to count as substantive.
    pub min_tokens: usize,
    /// Lowercased terms; a substring hit marks the record explicit.
    pub blocklist: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_tokens: 5,
            blocklist: Vec::new(),
        }
    }
}

/// Fixed 50-word English stopword list used by the language heuristic.
/// Sorted so membership is a binary search.
pub const STOPWORDS: [&str; 50] = [
    "a", "about", "all", "an", "and", "as", "at", "be", "but", "by", "do", "for", "from", "get",
    "go", "have", "he", "her", "his", "i", "if", "in", "it", "me", "my", "not", "of", "on", "one",
    "or", "out", "say", "she", "so", "that", "the", "their", "there", "they", "this", "to", "up",
    "we", "what", "which", "who", "will", "with", "would", "you",
];

/// Parses one dump line into a [`RawRecord`].
///
/// Required comment fields: id, parent_id, link_id, subreddit, author,
/// created_utc, body, score. Required post fields: id, subreddit, author,
/// created_utc, title, selftext, score, over_18. Pushshift-style `t1_`/`t3_`
/// prefixes on parent/link ids are stripped so linkage works on plain ids.
pub fn parse_line(line: &str, kind: RecordKind) -> Result<RawRecord, ParseDefect> {
    let value: Value = serde_json::from_str(line).map_err(|_| ParseDefect::BadSyntax)?;
    let obj = value.as_object().ok_or(ParseDefect::BadSyntax)?;

    let id = required_str(obj, "id")?;
    if id.is_empty() {
        return Err(ParseDefect::BadValue("id"));
    }
    let subreddit = required_str(obj, "subreddit")?;
    let author = required_str(obj, "author")?;
    let created_utc = required_int(obj, "created_utc")?;
    if created_utc <= 0 {
        return Err(ParseDefect::BadValue("created_utc"));
    }
    let score = required_int(obj, "score")?;

    match kind {
        RecordKind::Comment => {
            let body = required_str(obj, "body")?;
            let parent_id = strip_thing_prefix(&required_str(obj, "parent_id")?);
            let link_id = strip_thing_prefix(&required_str(obj, "link_id")?);
            if parent_id.is_empty() || link_id.is_empty() {
                return Err(ParseDefect::BadValue("parent_id/link_id"));
            }
            let tombstone = is_tombstone(&body);
            Ok(RawRecord {
                kind,
                id,
                parent_id: Some(parent_id),
                link_id,
                subreddit,
                author,
                created_utc,
                text: body,
                score,
                over_18: obj.get("over_18").and_then(Value::as_bool).unwrap_or(false),
                tombstone,
            })
        }
        RecordKind::Post => {
            let title = required_str(obj, "title")?;
            let selftext = required_str(obj, "selftext")?;
            let over_18 = obj
                .get("over_18")
                .ok_or(ParseDefect::MissingField("over_18"))?
                .as_bool()
                .ok_or(ParseDefect::BadValue("over_18"))?;
            let tombstone = is_tombstone(&selftext);
            let text = if selftext.trim().is_empty() || tombstone {
                title.clone()
            } else {
                format!("{title}\n{selftext}")
            };
            Ok(RawRecord {
                kind,
                id: id.clone(),
                parent_id: None,
                link_id: id,
                subreddit,
                author,
                created_utc,
                text,
                score,
                over_18,
                tombstone,
            })
        }
    }
}

fn required_str(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<String, ParseDefect> {
    obj.get(key)
        .ok_or(ParseDefect::MissingField(key))?
        .as_str()
        .map(str::to_string)
        .ok_or(ParseDefect::BadValue(key))
}

fn required_int(obj: &serde_json::Map<String, Value>, key: &'static str) -> Result<i64, ParseDefect> {
    let v = obj.get(key).ok_or(ParseDefect::MissingField(key))?;
    if let Some(i) = v.as_i64() {
        return Ok(i);
    }
    // Dumps sometimes carry integral floats or quoted numbers.
    if let Some(f) = v.as_f64() {
        if f.fract() == 0.0 && f.abs() < 9e15 {
            return Ok(f as i64);
        }
    }
    if let Some(s) = v.as_str() {
        if let Ok(i) = s.parse::<i64>() {
            return Ok(i);
        }
    }
    Err(ParseDefect::BadValue(key))
}

fn strip_thing_prefix(id: &str) -> String {
    id.strip_prefix("t1_")
        .or_else(|| id.strip_prefix("t3_"))
        .unwrap_or(id)
        .to_string()
}

fn is_tombstone(body: &str) -> bool {
    matches!(body.trim(), "[deleted]" | "[removed]")
}

/// Streaming reader over a newline-delimited dump.
///
/// Yields well-formed records in input order; malformed lines are counted
/// and skipped. I/O failures are fatal and carry the byte offset reached.
pub struct DumpReader<R: BufRead> {
    reader: R,
    kind: RecordKind,
    read: u64,
    malformed: u64,
    offset: u64,
    failed: bool,
    line: String,
}

impl<R: BufRead> DumpReader<R> {
    pub fn new(reader: R, kind: RecordKind) -> Self {
        DumpReader {
            reader,
            kind,
            read: 0,
            malformed: 0,
            offset: 0,
            failed: false,
            line: String::new(),
        }
    }

    /// (lines read, lines counted malformed) so far.
    pub fn counts(&self) -> (u64, u64) {
        (self.read, self.malformed)
    }
}

impl<R: BufRead> Iterator for DumpReader<R> {
    type Item = Result<RawRecord, KarmaError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.line.clear();
            match self.reader.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(n) => {
                    self.offset += n as u64;
                    let trimmed = self.line.trim_end_matches(['\n', '\r']);
                    if trimmed.trim().is_empty() {
                        continue; // blank separators are not records
                    }
                    self.read += 1;
                    match parse_line(trimmed, self.kind) {
                        Ok(rec) => return Some(Ok(rec)),
                        Err(_) => {
                            self.malformed += 1;
                            continue;
                        }
                    }
                }
                Err(e) => {
                    self.failed = true;
                    return Some(Err(KarmaError::Io {
                        offset: self.offset,
                        source: e,
                    }));
                }
            }
        }
    }
}

pub fn parse_dump<R: BufRead>(reader: R, kind: RecordKind) -> DumpReader<R> {
    DumpReader::new(reader, kind)
}

/// Applies the drop rules to one record. Total and side-effect free.
pub fn filter_record(record: &RawRecord, cfg: &FilterConfig) -> FilterDecision {
    // Explicit content: the flag, or any blocklist term in the text.
    if record.over_18 || hits_blocklist(&record.text, &cfg.blocklist) {
        return FilterDecision::Drop(DropReason::Explicit);
    }

    // Non-text: tombstones, empty or tiny text, or no letters at all.
    let trimmed = record.text.trim();
    if record.tombstone || trimmed.is_empty() {
        return FilterDecision::Drop(DropReason::NonText);
    }
    let token_count = trimmed.split_whitespace().count();
    if token_count < cfg.min_tokens {
        return FilterDecision::Drop(DropReason::NonText);
    }
    if !trimmed.chars().any(char::is_alphabetic) {
        return FilterDecision::Drop(DropReason::NonText);
    }

    if !looks_english(trimmed, token_count) {
        return FilterDecision::Drop(DropReason::NonEnglish);
    }
    FilterDecision::Keep
}

fn hits_blocklist(text: &str, blocklist: &[String]) -> bool {
    if blocklist.is_empty() {
        return false;
    }
    let lowered = text.to_lowercase();
    blocklist.iter().any(|term| lowered.contains(term.as_str()))
}

/// Texts of >= 10 tokens need >= 2 distinct stopword hits; shorter texts
/// need >= 90% of their letters to be ASCII.
fn looks_english(text: &str, token_count: usize) -> bool {
    if token_count >= 10 {
        let mut hits: Vec<usize> = Vec::new();
        for token in text.split_whitespace() {
            let word = token
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if let Ok(pos) = STOPWORDS.binary_search(&word.as_str()) {
                if !hits.contains(&pos) {
                    hits.push(pos);
                    if hits.len() >= 2 {
                        return true;
                    }
                }
            }
        }
        false
    } else {
        let mut letters = 0u64;
        let mut ascii_letters = 0u64;
        for c in text.chars() {
            if c.is_alphabetic() {
                letters += 1;
                if c.is_ascii_alphabetic() {
                    ascii_letters += 1;
                }
            }
        }
        letters == 0 || (ascii_letters as f64) / (letters as f64) >= 0.9
    }
}
