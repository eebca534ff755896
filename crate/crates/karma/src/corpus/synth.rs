//! Deterministic synthetic dump generator.
//!
//! Each post draws a latent topic and a disposition. Replies are on- or
//! off-topic relative to the post topic (disposition sets the mix) and
//! carry a style-marker token loosely coupled to topicality. Scores are
//! `base + a*topic_match + b*style + integer noise`, laid out so on-topic
//! replies clear the default relative-karma threshold and off-topic ones
//! miss it; `noise` controls how often that mapping flips. The subreddit
//! name encodes the post's realized majority label with probability
//! `metadata_label_correlation`, which makes metadata an adjustable
//! shortcut feature.
//!
//! The generator targets the default `CorpusConfig` labeling rule and its
//! texts always survive the default ingest filters.

use super::{label_instance, ChatSequence, CorpusConfig, Role, Turn};
use crate::ingest::{RawRecord, RecordKind};
use crate::KarmaError;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_posts: usize,
    pub replies_per_post: usize,
    pub n_topics: usize,
    /// Probability that a post's subreddit name encodes its realized
    /// majority reply label.
    pub metadata_label_correlation: f64,
    /// Half-width of the integer score noise; also scales topic impurity.
    pub noise: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_posts: 200,
            replies_per_post: 6,
            n_topics: 8,
            metadata_label_correlation: 0.9,
            noise: 14,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub posts: Vec<RawRecord>,
    pub comments: Vec<RawRecord>,
}

const POST_SCORE: i64 = 100;
const SCORE_BASE: i64 = 28;
const TOPIC_BONUS: i64 = 16;
const STYLE_BONUS: i64 = 8;
const NESTED_MARGIN: i64 = 2;
const STYLE_FLIP: f64 = 0.25;
const NEST_PROB: f64 = 0.25;
const IMPURITY_PER_NOISE: f64 = 0.015;
const BASE_TS: i64 = 1_609_459_200; // 2021-01-01T00:00Z

const TOPIC_WORDS: [[&str; 6]; 16] = [
    ["orbit", "rocket", "comet", "nebula", "thruster", "stardust"],
    ["sourdough", "yeast", "crust", "crumb", "ferment", "bakery"],
    ["violin", "cello", "sonata", "tempo", "chord", "maestro"],
    ["glacier", "tundra", "permafrost", "moraine", "icefield", "crevasse"],
    ["sketch", "easel", "charcoal", "canvas", "palette", "fresco"],
    ["marathon", "sprint", "stride", "pacing", "stamina", "hurdle"],
    ["circuit", "resistor", "voltage", "capacitor", "solder", "transistor"],
    ["orchid", "fern", "moss", "bonsai", "trellis", "mulch"],
    ["chess", "gambit", "rook", "endgame", "castling", "blunder"],
    ["kayak", "paddle", "rapids", "portage", "eddy", "riverbank"],
    ["telescope", "eyepiece", "tripod", "finder", "mirror", "aperture"],
    ["espresso", "roast", "grinder", "crema", "barista", "tamper"],
    ["lighthouse", "harbor", "buoy", "tideline", "seawall", "mooring"],
    ["quilt", "stitch", "bobbin", "applique", "patchwork", "seam"],
    ["fossil", "stratum", "trilobite", "sediment", "excavation", "bedrock"],
    ["falcon", "talon", "plumage", "aerie", "raptor", "fledgling"],
];

const POSITIVE_MARKERS: [&str; 4] = ["brilliant", "delightful", "superb", "charming"];
const NEGATIVE_MARKERS: [&str; 4] = ["dreary", "tedious", "dismal", "grating"];

const POSITIVE_SUBS: [&str; 4] = ["brightharbor", "sunnymeadow", "gladspring", "merrivale"];
const NEGATIVE_SUBS: [&str; 4] = ["grimholt", "dourfen", "bleakmoor", "sournest"];

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SynthCorpus, KarmaError> {
    if cfg.n_topics < 2 || cfg.n_topics > TOPIC_WORDS.len() {
        return Err(KarmaError::DegenerateConfig {
            detail: format!(
                "n_topics must be in 2..={}, got {}",
                TOPIC_WORDS.len(),
                cfg.n_topics
            ),
        });
    }
    if cfg.n_posts == 0 || cfg.replies_per_post < 2 {
        return Err(KarmaError::DegenerateConfig {
            detail: "need n_posts >= 1 and replies_per_post >= 2".to_string(),
        });
    }
    if !(0.0..=1.0).contains(&cfg.metadata_label_correlation) {
        return Err(KarmaError::DegenerateConfig {
            detail: format!(
                "metadata_label_correlation {} outside [0, 1]",
                cfg.metadata_label_correlation
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let label_cfg = CorpusConfig::default();
    let impurity = (cfg.noise as f64 * IMPURITY_PER_NOISE).min(0.45);

    let mut posts = Vec::with_capacity(cfg.n_posts);
    let mut comments = Vec::new();
    let mut comment_counter = 0usize;

    for post_idx in 0..cfg.n_posts {
        let topic = rng.gen_range(0..cfg.n_topics);
        let disposition = rng.gen_bool(0.5);
        let post_id = format!("p{post_idx:05}");
        let post_ts = BASE_TS + post_idx as i64 * 7200;
        let post_text = post_text(&mut rng, topic);
        let post_author = author(&mut rng);

        // (id, score, depth) of this post's replies, for nesting and labels.
        let mut reply_info: Vec<(String, i64)> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        let mut post_comments: Vec<RawRecord> = Vec::new();

        for j in 0..cfg.replies_per_post {
            // The first two replies stay top-level so every thread is
            // eligible for instance extraction.
            let parent: Option<usize> = if j >= 2 && rng.gen_bool(NEST_PROB) {
                Some(rng.gen_range(0..reply_info.len()))
            } else {
                None
            };
            let topic_match = disposition ^ rng.gen_bool(impurity);
            let style = topic_match ^ rng.gen_bool(STYLE_FLIP);
            let reply_topic = if topic_match {
                topic
            } else {
                let other = rng.gen_range(0..cfg.n_topics - 1);
                if other >= topic {
                    other + 1
                } else {
                    other
                }
            };
            let text = reply_text(&mut rng, reply_topic, style);
            let noise = if cfg.noise > 0 {
                rng.gen_range(-(cfg.noise as i64)..=cfg.noise as i64)
            } else {
                0
            };

            let parent_score = parent.map(|p| reply_info[p].1).unwrap_or(POST_SCORE);
            let score = if parent.is_none() {
                SCORE_BASE
                    + TOPIC_BONUS * topic_match as i64
                    + STYLE_BONUS * style as i64
                    + noise
            } else {
                // Same shape, anchored at the exact rewarding boundary of
                // the realized parent score.
                let boundary = if parent_score > 0 {
                    label_cfg.reward_threshold.min_rewarding(parent_score)
                } else {
                    label_cfg.nonpositive_parent_min_score
                };
                if topic_match {
                    boundary + NESTED_MARGIN + STYLE_BONUS / 4 * style as i64 + noise
                } else {
                    boundary - 1 - NESTED_MARGIN - STYLE_BONUS / 4 * (1 - style as i64) + noise
                }
            };

            let reply_id = format!("c{comment_counter:07}");
            comment_counter += 1;
            let parent_id = parent
                .map(|p| reply_info[p].0.clone())
                .unwrap_or_else(|| post_id.clone());
            labels.push(label_instance(score, parent_score, &label_cfg));
            reply_info.push((reply_id.clone(), score));
            post_comments.push(RawRecord {
                kind: RecordKind::Comment,
                id: reply_id,
                parent_id: Some(parent_id),
                link_id: post_id.clone(),
                subreddit: String::new(), // filled once the name is drawn
                author: author(&mut rng),
                created_utc: post_ts + 60 * (j as i64 + 1),
                text,
                score,
                over_18: false,
                tombstone: false,
            });
        }

        let positives = labels.iter().filter(|&&l| l == 1).count();
        let majority = 2 * positives >= labels.len();
        let encode_majority = rng.gen_bool(cfg.metadata_label_correlation);
        let bit = if encode_majority {
            majority
        } else {
            rng.gen_bool(0.5)
        };
        let pool = if bit { POSITIVE_SUBS } else { NEGATIVE_SUBS };
        let subreddit = pool[rng.gen_range(0..pool.len())].to_string();

        for c in &mut post_comments {
            c.subreddit = subreddit.clone();
        }
        posts.push(RawRecord {
            kind: RecordKind::Post,
            id: post_id,
            parent_id: None,
            link_id: format!("p{post_idx:05}"),
            subreddit,
            author: post_author,
            created_utc: post_ts,
            text: post_text,
            score: POST_SCORE,
            over_18: false,
            tombstone: false,
        });
        comments.extend(post_comments);
    }

    Ok(SynthCorpus { posts, comments })
}

/// Clean single-turn chat prompts (no candidate turn), for the benign PPO
/// regime and held-out policy evaluation.
pub fn generate_benign_prompts(n: usize, n_topics: usize, seed: u64) -> Vec<ChatSequence> {
    let n_topics = n_topics.clamp(2, TOPIC_WORDS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic = rng.gen_range(0..n_topics);
            let idx = sample(&mut rng, 6, 3);
            let w: Vec<&str> = idx.iter().map(|i| TOPIC_WORDS[topic][i]).collect();
            let text = if rng.gen_bool(0.5) {
                format!(
                    "could you kindly explain how the {} relates to the {} and what makes the {} special",
                    w[0], w[1], w[2]
                )
            } else {
                format!(
                    "i would love a simple walkthrough of the {} and the {} for a beginner",
                    w[0], w[1]
                )
            };
            ChatSequence {
                turns: vec![Turn {
                    role: Role::User,
                    text,
                }],
            }
        })
        .collect()
}

fn post_text<R: Rng>(rng: &mut R, topic: usize) -> String {
    let idx = sample(rng, 6, 3);
    let w: Vec<&str> = idx.iter().map(|i| TOPIC_WORDS[topic][i]).collect();
    match rng.gen_range(0..3) {
        0 => format!(
            "why does the {} {} always drift when it is near the {}",
            w[0], w[1], w[2]
        ),
        1 => format!(
            "my {} keeps confusing me so what should i do about the {}",
            w[0], w[1]
        ),
        _ => format!(
            "an honest question about the {} and the {} from a curious novice",
            w[0], w[1]
        ),
    }
}

fn reply_text<R: Rng>(rng: &mut R, topic: usize, style: bool) -> String {
    let idx = sample(rng, 6, 2);
    let w: Vec<&str> = idx.iter().map(|i| TOPIC_WORDS[topic][i]).collect();
    let markers = if style { POSITIVE_MARKERS } else { NEGATIVE_MARKERS };
    let m = markers[rng.gen_range(0..markers.len())];
    match rng.gen_range(0..3) {
        0 => format!(
            "{m} point because the {} and the {} really matter here",
            w[0], w[1]
        ),
        1 => format!(
            "{m} take since my {} taught me about the {} for years",
            w[0], w[1]
        ),
        _ => format!("honestly a {m} view of the {} with the {} in mind", w[0], w[1]),
    }
}

fn author<R: Rng>(rng: &mut R) -> String {
    format!("writer{:03}", rng.gen_range(0..300))
}

/// True when the subreddit name belongs to the positive-majority pool.
pub fn subreddit_signals_positive(name: &str) -> bool {
    POSITIVE_SUBS.contains(&name)
}

/// Serializes records back into the newline-delimited dump schema. Posts
/// come out title-only, which matches how the generator builds them.
pub fn to_dump_lines(records: &[RawRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let value = match rec.kind {
            RecordKind::Post => json!({
                "id": rec.id,
                "subreddit": rec.subreddit,
                "author": rec.author,
                "created_utc": rec.created_utc,
                "title": rec.text,
                "selftext": "",
                "score": rec.score,
                "over_18": rec.over_18,
            }),
            RecordKind::Comment => json!({
                "id": rec.id,
                "parent_id": rec.parent_id.as_deref().unwrap_or_default(),
                "link_id": rec.link_id,
                "subreddit": rec.subreddit,
                "author": rec.author,
                "created_utc": rec.created_utc,
                "body": rec.text,
                "score": rec.score,
            }),
        };
        out.push_str(&value.to_string());
        out.push('\n');
    }
    out
}
