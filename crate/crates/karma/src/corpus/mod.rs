//! Thread reconstruction, relative-karma labeling, chat serialization,
//! dataset splitting, and the vocabulary.
//!
//! A comment is *rewarding* when its score reaches the configured fraction
//! of its parent's score; the comparison is exact integer arithmetic. For
//! top-level comments the parent score is the post score. Nonpositive
//! parent scores fall back to an absolute minimum score, since a fraction
//! of a nonpositive number is not a usable quality bar.

pub mod synth;
mod vocab;

pub use vocab::{
    build_vocab, tokenize, Vocabulary, BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID, ROLE_CANDIDATE_ID,
    ROLE_CONTEXT_ID, ROLE_META_ID, ROLE_USER_ID, SPECIAL_TOKENS, UNK_ID,
};

use crate::ingest::RawRecord;
use crate::KarmaError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SerializationMode {
    Generalized,
    Conditioned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Context,
    Candidate,
    Meta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

/// Linearized conversational context. Exactly one candidate turn, always
/// last; a meta turn appears only in conditioned mode and only first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatSequence {
    pub turns: Vec<Turn>,
}

impl ChatSequence {
    pub fn has_meta(&self) -> bool {
        self.turns.first().map(|t| t.role == Role::Meta).unwrap_or(false)
    }

    pub fn candidate_text(&self) -> Option<&str> {
        self.turns
            .last()
            .filter(|t| t.role == Role::Candidate)
            .map(|t| t.text.as_str())
    }

    /// The sequence without its candidate turn (a prompt).
    pub fn without_candidate(&self) -> ChatSequence {
        let turns = self
            .turns
            .iter()
            .filter(|t| t.role != Role::Candidate)
            .cloned()
            .collect();
        ChatSequence { turns }
    }
}

/// Exact rational reward threshold. `met(target, parent)` decides
/// `target >= threshold * parent` without floating point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RewardThreshold {
    num: u32,
    den: u32,
}

impl RewardThreshold {
    pub fn from_ratio(num: u32, den: u32) -> Result<Self, KarmaError> {
        if num == 0 || den == 0 || num > den {
            return Err(KarmaError::DegenerateConfig {
                detail: format!("reward threshold {num}/{den} must be in (0, 1]"),
            });
        }
        Ok(RewardThreshold { num, den })
    }

    /// Converts a decimal fraction (up to six places) to its exact rational.
    pub fn from_f64(x: f64) -> Result<Self, KarmaError> {
        if !(x > 0.0 && x <= 1.0) {
            return Err(KarmaError::DegenerateConfig {
                detail: format!("reward threshold {x} must be in (0, 1]"),
            });
        }
        let mut den: u64 = 1;
        for _ in 0..=6 {
            let scaled = x * den as f64;
            if (scaled - scaled.round()).abs() < 1e-9 {
                return RewardThreshold::from_ratio(scaled.round() as u32, den as u32);
            }
            den *= 10;
        }
        Err(KarmaError::DegenerateConfig {
            detail: format!("reward threshold {x} is not a short decimal"),
        })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn met(self, target_score: i64, parent_score: i64) -> bool {
        (self.den as i128) * (target_score as i128) >= (self.num as i128) * (parent_score as i128)
    }

    /// Smallest target score labeled rewarding against `parent_score > 0`.
    pub fn min_rewarding(self, parent_score: i64) -> i64 {
        debug_assert!(parent_score > 0);
        let num = self.num as i128 * parent_score as i128;
        let den = self.den as i128;
        (num.div_euclid(den) + if num.rem_euclid(den) == 0 { 0 } else { 1 }) as i64
    }
}

impl Default for RewardThreshold {
    fn default() -> Self {
        RewardThreshold { num: 2, den: 5 }
    }
}

impl Serialize for RewardThreshold {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for RewardThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let x = f64::deserialize(deserializer)?;
        RewardThreshold::from_f64(x).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub reward_threshold: RewardThreshold,
    pub nonpositive_parent_min_score: i64,
    pub sibling_count: usize,
    pub min_tokens: usize,
    pub split_fraction: f64,
    pub vocab_cap: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            reward_threshold: RewardThreshold::default(),
            nonpositive_parent_min_score: 1,
            sibling_count: 2,
            min_tokens: 5,
            split_fraction: 0.9,
            vocab_cap: 8192,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ThreadNode {
    pub record: RawRecord,
    pub children: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ThreadTree {
    pub post: RawRecord,
    pub nodes: BTreeMap<String, ThreadNode>,
    pub top_level: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub subreddit: String,
    pub created_utc: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub instance_id: String,
    /// Root post id; the split key. All instances of one thread stay on one
    /// side of any split.
    pub thread_id: String,
    pub post_text: String,
    pub parent_chain: Vec<String>,
    pub siblings: Vec<String>,
    pub response: String,
    pub label: u8,
    pub meta: Option<InstanceMeta>,
}

/// One serialized dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub instance_id: String,
    pub turns: Vec<Turn>,
    pub label: u8,
    pub meta: Option<InstanceMeta>,
}

impl DatasetRecord {
    pub fn sequence(&self) -> ChatSequence {
        ChatSequence {
            turns: self.turns.clone(),
        }
    }
}

/// Groups filtered records into per-post trees.
///
/// Comments whose parent chain cannot be resolved to a surviving record are
/// counted as orphans and excluded. Children are ordered by ascending
/// `created_utc`, ties by id. Duplicate ids are fatal.
pub fn build_threads(
    posts: &[RawRecord],
    comments: &[RawRecord],
) -> Result<(Vec<ThreadTree>, u64), KarmaError> {
    let mut seen: HashSet<&str> = HashSet::with_capacity(posts.len() + comments.len());
    for rec in posts.iter().chain(comments.iter()) {
        if !seen.insert(rec.id.as_str()) {
            return Err(KarmaError::DuplicateId { id: rec.id.clone() });
        }
    }

    let post_ids: HashSet<&str> = posts.iter().map(|p| p.id.as_str()).collect();
    let mut by_link: HashMap<&str, Vec<&RawRecord>> = HashMap::new();
    let mut orphans = 0u64;
    for c in comments {
        if post_ids.contains(c.link_id.as_str()) {
            by_link.entry(c.link_id.as_str()).or_default().push(c);
        } else {
            orphans += 1;
        }
    }

    let mut trees = Vec::new();
    for post in posts {
        let Some(mut pending) = by_link.remove(post.id.as_str()) else {
            continue;
        };
        let mut nodes: BTreeMap<String, ThreadNode> = BTreeMap::new();
        let mut top_level: Vec<String> = Vec::new();

        // Fixpoint attachment: a comment joins once its parent is the post
        // or an already attached comment.
        loop {
            let mut progressed = false;
            let mut still_pending = Vec::with_capacity(pending.len());
            for c in pending {
                let parent = c.parent_id.as_deref().unwrap_or_default();
                let attaches = parent == post.id || nodes.contains_key(parent);
                if !attaches {
                    still_pending.push(c);
                    continue;
                }
                if parent == post.id {
                    top_level.push(c.id.clone());
                }
                nodes.insert(
                    c.id.clone(),
                    ThreadNode {
                        record: c.clone(),
                        children: Vec::new(),
                    },
                );
                progressed = true;
            }
            pending = still_pending;
            if pending.is_empty() || !progressed {
                break;
            }
        }
        orphans += pending.len() as u64;

        if nodes.is_empty() {
            continue;
        }

        // Fill child lists and order everything by (created_utc, id).
        let ids: Vec<String> = nodes.keys().cloned().collect();
        for id in &ids {
            let parent = nodes[id].record.parent_id.clone().unwrap_or_default();
            if parent != post.id {
                nodes.get_mut(&parent).unwrap().children.push(id.clone());
            }
        }
        let sort_key = |nodes: &BTreeMap<String, ThreadNode>, id: &String| {
            (nodes[id].record.created_utc, id.clone())
        };
        top_level.sort_by_key(|id| sort_key(&nodes, id));
        for id in &ids {
            let mut children = std::mem::take(&mut nodes.get_mut(id).unwrap().children);
            children.sort_by_key(|cid| sort_key(&nodes, cid));
            nodes.get_mut(id).unwrap().children = children;
        }

        trees.push(ThreadTree {
            post: post.clone(),
            nodes,
            top_level,
        });
    }
    Ok((trees, orphans))
}

/// The relative-karma labeling rule.
///
/// Positive parent: rewarding iff `target >= threshold * parent`, decided
/// exactly. Nonpositive parent: rewarding iff `target >= min_score`.
pub fn label_instance(target_score: i64, parent_score: i64, cfg: &CorpusConfig) -> u8 {
    let rewarding = if parent_score > 0 {
        cfg.reward_threshold.met(target_score, parent_score)
    } else {
        target_score >= cfg.nonpositive_parent_min_score
    };
    rewarding as u8
}

/// Emits one labeled instance per comment of an eligible tree.
///
/// A tree is eligible when its post has at least two top-level comments
/// (local competition between responses). Siblings are the highest-scoring
/// other replies to the same parent, ties broken by id, capped at
/// `sibling_count`. Metadata is attached only when building for the
/// conditioned serialization.
pub fn extract_instances(
    tree: &ThreadTree,
    cfg: &CorpusConfig,
    mode: SerializationMode,
) -> Vec<TrainingInstance> {
    if tree.top_level.len() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    // Preorder walk: (comment id, parent texts root..parent, parent score).
    let mut stack: Vec<(String, Vec<String>, i64)> = tree
        .top_level
        .iter()
        .rev()
        .map(|id| (id.clone(), Vec::new(), tree.post.score))
        .collect();

    while let Some((id, chain, parent_score)) = stack.pop() {
        let node = &tree.nodes[&id];
        let level_ids: &[String] = if chain.is_empty() {
            &tree.top_level
        } else {
            // A non-empty chain means this node has a comment parent.
            let parent_id = node.record.parent_id.as_deref().unwrap();
            &tree.nodes[parent_id].children
        };
        let mut sibling_ids: Vec<&String> = level_ids.iter().filter(|s| *s != &id).collect();
        sibling_ids.sort_by(|a, b| {
            let (sa, sb) = (tree.nodes[*a].record.score, tree.nodes[*b].record.score);
            sb.cmp(&sa).then_with(|| a.cmp(b))
        });
        let siblings: Vec<String> = sibling_ids
            .into_iter()
            .take(cfg.sibling_count)
            .map(|sid| tree.nodes[sid].record.text.clone())
            .collect();

        out.push(TrainingInstance {
            instance_id: id.clone(),
            thread_id: tree.post.id.clone(),
            post_text: tree.post.text.clone(),
            parent_chain: chain.clone(),
            siblings,
            response: node.record.text.clone(),
            label: label_instance(node.record.score, parent_score, cfg),
            meta: match mode {
                SerializationMode::Conditioned => Some(InstanceMeta {
                    subreddit: tree.post.subreddit.clone(),
                    created_utc: node.record.created_utc,
                }),
                SerializationMode::Generalized => None,
            },
        });

        let mut child_chain = chain;
        child_chain.push(node.record.text.clone());
        for child in node.children.iter().rev() {
            stack.push((child.clone(), child_chain.clone(), node.record.score));
        }
    }
    out
}

/// Renders a unix timestamp as ISO-8601 UTC at minute precision.
pub fn format_timestamp_minute(created_utc: i64) -> String {
    chrono::DateTime::from_timestamp(created_utc, 0)
        .map(|dt| dt.format("%Y-%m-%dT%H:%MZ").to_string())
        .unwrap_or_else(|| format!("@{created_utc}"))
}

/// Flattens an instance into a chat sequence.
///
/// Generalized mode serializes only conversational text; author names are
/// never serialized in either mode. Conditioned mode prepends a meta turn
/// with the subreddit and the posting timestamp.
pub fn linearize(inst: &TrainingInstance, mode: SerializationMode) -> Result<ChatSequence, KarmaError> {
    let mut turns = Vec::with_capacity(3 + inst.parent_chain.len() + inst.siblings.len());
    if mode == SerializationMode::Conditioned {
        let meta = inst.meta.as_ref().ok_or(KarmaError::MissingMetadata)?;
        turns.push(Turn {
            role: Role::Meta,
            text: format!(
                "subreddit={} ts={}",
                meta.subreddit,
                format_timestamp_minute(meta.created_utc)
            ),
        });
    }
    turns.push(Turn {
        role: Role::User,
        text: inst.post_text.clone(),
    });
    for text in &inst.parent_chain {
        turns.push(Turn {
            role: Role::Context,
            text: text.clone(),
        });
    }
    for text in &inst.siblings {
        turns.push(Turn {
            role: Role::Context,
            text: text.clone(),
        });
    }
    turns.push(Turn {
        role: Role::Candidate,
        text: inst.response.clone(),
    });
    Ok(ChatSequence { turns })
}

/// Splits instances by thread so no context leaks across the boundary.
///
/// The train side holds the number of threads nearest
/// `split_fraction * n_threads` (clamped so both sides are non-empty).
/// Instance order within each side follows the input.
pub fn split_dataset(
    instances: &[TrainingInstance],
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<(Vec<TrainingInstance>, Vec<TrainingInstance>), KarmaError> {
    let mut thread_ids: Vec<&str> = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    for inst in instances {
        if seen.insert(inst.thread_id.as_str()) {
            thread_ids.push(inst.thread_id.as_str());
        }
    }
    if thread_ids.len() < 2 {
        return Err(KarmaError::TooSmall {
            detail: format!(
                "need at least 2 threads to split, found {}",
                thread_ids.len()
            ),
        });
    }
    let n = thread_ids.len();
    let n_train = ((cfg.split_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    thread_ids.shuffle(&mut rng);
    let train_ids: HashSet<&str> = thread_ids[..n_train].iter().copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for inst in instances {
        if train_ids.contains(inst.thread_id.as_str()) {
            train.push(inst.clone());
        } else {
            test.push(inst.clone());
        }
    }
    Ok((train, test))
}

/// Instances linearized into dataset records.
pub fn to_records(
    instances: &[TrainingInstance],
    mode: SerializationMode,
) -> Result<Vec<DatasetRecord>, KarmaError> {
    instances
        .iter()
        .map(|inst| {
            Ok(DatasetRecord {
                instance_id: inst.instance_id.clone(),
                turns: linearize(inst, mode)?.turns,
                label: inst.label,
                meta: inst.meta.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RecordKind;

    fn post(id: &str, score: i64) -> RawRecord {
        RawRecord {
            kind: RecordKind::Post,
            id: id.into(),
            parent_id: None,
            link_id: id.into(),
            subreddit: "meadow".into(),
            author: "op".into(),
            created_utc: 1000,
            text: format!("post {id} asks about the thing and what it does"),
            score,
            over_18: false,
            tombstone: false,
        }
    }

    fn comment(id: &str, parent: &str, link: &str, score: i64, ts: i64) -> RawRecord {
        RawRecord {
            kind: RecordKind::Comment,
            id: id.into(),
            parent_id: Some(parent.into()),
            link_id: link.into(),
            subreddit: "meadow".into(),
            author: format!("author_{id}"),
            created_utc: ts,
            text: format!("reply {id} says something about all of it"),
            score,
            over_18: false,
            tombstone: false,
        }
    }

    #[test]
    fn one_post_two_top_level_comments() {
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("c1", "p1", "p1", 5, 1100),
            comment("c2", "p1", "p1", 3, 1050),
        ];
        let (trees, orphans) = build_threads(&posts, &comments).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(orphans, 0);
        // Ordered by created_utc: c2 first.
        assert_eq!(trees[0].top_level, vec!["c2".to_string(), "c1".to_string()]);
    }

    #[test]
    fn dangling_parent_is_an_orphan() {
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("c1", "p1", "p1", 5, 1100),
            comment("c2", "gone", "p1", 3, 1200),
            comment("c3", "c2", "p1", 1, 1300), // transitively dangling
            comment("c4", "p9", "p9", 1, 1400), // no such post
        ];
        let (trees, orphans) = build_threads(&posts, &comments).unwrap();
        assert_eq!(trees.len(), 1);
        assert_eq!(orphans, 3);
        assert_eq!(trees[0].nodes.len(), 1);
    }

    #[test]
    fn duplicate_id_is_fatal() {
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("c1", "p1", "p1", 5, 1100),
            comment("c1", "p1", "p1", 3, 1200),
        ];
        let err = build_threads(&posts, &comments).unwrap_err();
        assert!(matches!(err, KarmaError::DuplicateId { id } if id == "c1"));
    }

    #[test]
    fn tie_on_timestamp_breaks_by_id() {
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("cb", "p1", "p1", 1, 1100),
            comment("ca", "p1", "p1", 1, 1100),
        ];
        let (trees, _) = build_threads(&posts, &comments).unwrap();
        assert_eq!(trees[0].top_level, vec!["ca".to_string(), "cb".to_string()]);
    }

    #[test]
    fn labeling_boundary_cases() {
        let cfg = CorpusConfig::default();
        assert_eq!(label_instance(40, 100, &cfg), 1); // boundary inclusive
        assert_eq!(label_instance(39, 100, &cfg), 0);
        assert_eq!(label_instance(1, -3, &cfg), 1); // nonpositive fallback
        assert_eq!(label_instance(0, -3, &cfg), 0);
        assert_eq!(label_instance(0, 0, &cfg), 0);
        assert_eq!(label_instance(2, 5, &cfg), 1); // 2 >= 0.4*5 exactly
    }

    #[test]
    fn threshold_closed_form_matches_spelled_out_products() {
        let cfg = CorpusConfig::default();
        for t in -50..=50 {
            for p in 1..=50 {
                let expected = (10 * t >= 4 * p) as u8;
                assert_eq!(label_instance(t, p, &cfg), expected, "t={t} p={p}");
            }
        }
    }

    #[test]
    fn min_rewarding_is_the_exact_boundary() {
        let th = RewardThreshold::default();
        for p in 1..200 {
            let m = th.min_rewarding(p);
            assert!(th.met(m, p));
            assert!(!th.met(m - 1, p));
        }
    }

    #[test]
    fn threshold_from_f64_is_exact() {
        let th = RewardThreshold::from_f64(0.4).unwrap();
        assert_eq!(th, RewardThreshold { num: 4, den: 10 });
        assert!(th.met(2, 5));
        assert!(!th.met(199_999_999, 500_000_000));
        assert!(th.met(200_000_000, 500_000_000));
    }

    #[test]
    fn single_top_level_comment_yields_nothing() {
        let posts = vec![post("p1", 10)];
        let comments = vec![comment("c1", "p1", "p1", 5, 1100)];
        let (trees, _) = build_threads(&posts, &comments).unwrap();
        let cfg = CorpusConfig::default();
        assert!(extract_instances(&trees[0], &cfg, SerializationMode::Generalized).is_empty());
    }

    #[test]
    fn nested_instance_gets_parent_chain_and_sibling() {
        // post -> {parent, other}; parent -> {target, sib}
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("parent", "p1", "p1", 8, 1100),
            comment("other", "p1", "p1", 2, 1200),
            comment("target", "parent", "p1", 4, 1300),
            comment("sib", "parent", "p1", 6, 1400),
        ];
        let (trees, _) = build_threads(&posts, &comments).unwrap();
        let cfg = CorpusConfig::default();
        let instances = extract_instances(&trees[0], &cfg, SerializationMode::Generalized);
        assert_eq!(instances.len(), 4);
        let target = instances
            .iter()
            .find(|i| i.instance_id == "target")
            .unwrap();
        assert_eq!(target.parent_chain.len(), 1);
        assert!(target.parent_chain[0].contains("reply parent"));
        assert_eq!(target.siblings.len(), 1);
        assert!(target.siblings[0].contains("reply sib"));
        // score 4 vs parent 8: 4 >= 3.2, rewarding
        assert_eq!(target.label, 1);
    }

    #[test]
    fn sibling_selection_by_score_then_id() {
        let posts = vec![post("p1", 10)];
        let comments = vec![
            comment("target", "p1", "p1", 1, 1000),
            comment("s_a", "p1", "p1", 9, 1001),
            comment("s_c", "p1", "p1", 7, 1002),
            comment("s_b", "p1", "p1", 7, 1003),
            comment("s_d", "p1", "p1", 2, 1004),
            comment("s_e", "p1", "p1", 1, 1005),
        ];
        let (trees, _) = build_threads(&posts, &comments).unwrap();
        let cfg = CorpusConfig::default();
        let instances = extract_instances(&trees[0], &cfg, SerializationMode::Generalized);
        let target = instances
            .iter()
            .find(|i| i.instance_id == "target")
            .unwrap();
        // score 9 first, then the lower-id of the two score-7 comments.
        assert_eq!(target.siblings.len(), 2);
        assert!(target.siblings[0].contains("reply s_a"));
        assert!(target.siblings[1].contains("reply s_b"));
    }

    fn sample_instance(meta: Option<InstanceMeta>) -> TrainingInstance {
        TrainingInstance {
            instance_id: "c1".into(),
            thread_id: "p1".into(),
            post_text: "what do you think about this".into(),
            parent_chain: vec!["the parent reply".into()],
            siblings: vec!["a sibling reply".into()],
            response: "the candidate answer".into(),
            label: 1,
            meta,
        }
    }

    #[test]
    fn generalized_linearization_has_four_turns_and_no_metadata() {
        let seq = linearize(&sample_instance(None), SerializationMode::Generalized).unwrap();
        assert_eq!(seq.turns.len(), 4);
        let roles: Vec<Role> = seq.turns.iter().map(|t| t.role).collect();
        assert_eq!(
            roles,
            vec![Role::User, Role::Context, Role::Context, Role::Candidate]
        );
        for turn in &seq.turns {
            assert!(!turn.text.contains("meadow"));
            assert!(!turn.text.contains("subreddit"));
        }
    }

    #[test]
    fn conditioned_linearization_prepends_meta_turn() {
        let meta = InstanceMeta {
            subreddit: "meadow".into(),
            created_utc: 1_600_000_000,
        };
        let seq = linearize(&sample_instance(Some(meta)), SerializationMode::Conditioned).unwrap();
        assert_eq!(seq.turns.len(), 5);
        assert_eq!(seq.turns[0].role, Role::Meta);
        assert_eq!(seq.turns[0].text, "subreddit=meadow ts=2020-09-13T12:26Z");
    }

    #[test]
    fn conditioned_without_meta_is_an_error() {
        let err = linearize(&sample_instance(None), SerializationMode::Conditioned).unwrap_err();
        assert!(matches!(err, KarmaError::MissingMetadata));
    }

    #[test]
    fn empty_parent_chain_goes_user_context_candidate() {
        let mut inst = sample_instance(None);
        inst.parent_chain.clear();
        let seq = linearize(&inst, SerializationMode::Generalized).unwrap();
        let roles: Vec<Role> = seq.turns.iter().map(|t| t.role).collect();
        assert_eq!(roles, vec![Role::User, Role::Context, Role::Candidate]);
    }

    fn instances_for_threads(n_threads: usize, per_thread: usize) -> Vec<TrainingInstance> {
        let mut out = Vec::new();
        for t in 0..n_threads {
            for i in 0..per_thread {
                let mut inst = sample_instance(None);
                inst.thread_id = format!("p{t}");
                inst.instance_id = format!("p{t}_c{i}");
                out.push(inst);
            }
        }
        out
    }

    #[test]
    fn split_is_by_thread_and_deterministic() {
        let cfg = CorpusConfig::default();
        let instances = instances_for_threads(10, 7);
        let (train_a, test_a) = split_dataset(&instances, &cfg, 99).unwrap();
        let (train_b, test_b) = split_dataset(&instances, &cfg, 99).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);

        let train_threads: HashSet<&str> = train_a.iter().map(|i| i.thread_id.as_str()).collect();
        let test_threads: HashSet<&str> = test_a.iter().map(|i| i.thread_id.as_str()).collect();
        assert_eq!(train_threads.len(), 9);
        assert_eq!(test_threads.len(), 1);
        assert!(train_threads.is_disjoint(&test_threads));
        // every instance of the held-out thread lands on the test side
        assert_eq!(test_a.len(), 7);
    }

    #[test]
    fn split_needs_two_threads() {
        let cfg = CorpusConfig::default();
        let instances = instances_for_threads(1, 3);
        assert!(matches!(
            split_dataset(&instances, &cfg, 1).unwrap_err(),
            KarmaError::TooSmall { .. }
        ));
    }
}
