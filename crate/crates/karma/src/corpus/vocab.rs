//! Word-level vocabulary with a frequency cutoff.

use super::{ChatSequence, Role};
use crate::tensor::checkpoint::fnv1a64;
use crate::KarmaError;
use std::collections::HashMap;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const ROLE_USER_ID: u32 = 4;
pub const ROLE_CONTEXT_ID: u32 = 5;
pub const ROLE_CANDIDATE_ID: u32 = 6;
pub const ROLE_META_ID: u32 = 7;

pub const SPECIAL_TOKENS: [&str; 8] = [
    "<pad>",
    "<unk>",
    "<bos>",
    "<eos>",
    "<user>",
    "<context>",
    "<candidate>",
    "<meta>",
];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

/// Lowercased words split on anything non-alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token table: a fixed special block followed by the most frequent corpus
/// tokens (ties broken lexicographically), ids dense from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from raw texts, keeping at most `cap` corpus tokens.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, cap: usize) -> Result<Self, KarmaError> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for token in tokenize(text) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(KarmaError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, token_to_id }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Encodes text; out-of-vocabulary tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .into_iter()
            .map(|t| self.token_to_id.get(&t).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Space-joined tokens; the inverse of `encode` on in-vocabulary text.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn role_id(role: Role) -> u32 {
        match role {
            Role::User => ROLE_USER_ID,
            Role::Context => ROLE_CONTEXT_ID,
            Role::Candidate => ROLE_CANDIDATE_ID,
            Role::Meta => ROLE_META_ID,
        }
    }

    /// Role index in the role-embedding table (0..4).
    pub fn role_index(role: Role) -> usize {
        match role {
            Role::User => 0,
            Role::Context => 1,
            Role::Candidate => 2,
            Role::Meta => 3,
        }
    }

    /// File form: one corpus token per line; line number = id after the
    /// fixed special block.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens[NUM_SPECIALS..] {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(contents: &str) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(contents.lines().map(str::to_string));
        Vocabulary::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), KarmaError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KarmaError> {
        let contents = std::fs::read_to_string(path)?;
        Ok(Vocabulary::from_file_string(&contents))
    }

    /// Checksum over the file form; model checkpoints pin this.
    pub fn checksum(&self) -> u64 {
        fnv1a64(self.to_file_string().as_bytes())
    }
}

/// Vocabulary over every turn of the given (train-side) sequences.
pub fn build_vocab(sequences: &[ChatSequence], cap: usize) -> Result<Vocabulary, KarmaError> {
    Vocabulary::build(
        sequences
            .iter()
            .flat_map(|s| s.turns.iter().map(|t| t.text.as_str())),
        cap,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("The cat, the DOG—and 2 fish!"),
            vec!["the", "cat", "the", "dog", "and", "2", "fish"]
        );
        assert!(tokenize("?!...").is_empty());
    }

    #[test]
    fn build_keeps_frequent_tokens_and_encodes() {
        let vocab = Vocabulary::build(["a b b"].into_iter(), 10).unwrap();
        assert_eq!(vocab.size(), NUM_SPECIALS + 2);
        let b = vocab.id_of("b").unwrap();
        let a = vocab.id_of("a").unwrap();
        assert!(b < a, "b is more frequent so it gets the smaller id");
        assert_eq!(vocab.encode("b a"), vec![b, a]);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let vocab = Vocabulary::build(["a b b"].into_iter(), 10).unwrap();
        assert_eq!(vocab.encode("zzzz-unknown"), vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn cap_tie_breaks_lexicographically() {
        // cap 1, "cat" and "bat" both appear once: "bat" survives.
        let vocab = Vocabulary::build(["cat bat"].into_iter(), 1).unwrap();
        assert!(vocab.id_of("bat").is_some());
        assert!(vocab.id_of("cat").is_none());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            Vocabulary::build(["?!"].into_iter(), 5).unwrap_err(),
            KarmaError::EmptyCorpus
        ));
    }

    #[test]
    fn encode_decode_round_trips_in_vocab_text() {
        let vocab = Vocabulary::build(["the quick brown fox jumps"].into_iter(), 10).unwrap();
        let text = "the brown fox";
        assert_eq!(vocab.decode(&vocab.encode(text)), text);
    }

    #[test]
    fn file_round_trip_preserves_ids_and_checksum() {
        let vocab = Vocabulary::build(["alpha beta beta gamma"].into_iter(), 10).unwrap();
        let restored = Vocabulary::from_file_string(&vocab.to_file_string());
        assert_eq!(vocab, restored);
        assert_eq!(vocab.checksum(), restored.checksum());
    }
}
