//! Desk-scale pipeline for learning conversational reward from engagement data.
//!
//! The crate covers the full loop: streaming ingestion of newline-delimited
//! post/comment dumps, thread reconstruction and relative-karma labeling,
//! a small tensor engine with reverse-mode autodiff, a pooled-embedding
//! reward model, an n-gram language policy, PPO fine-tuning against the
//! reward model with a KL penalty toward a frozen reference, and the
//! evaluation harness (ROC AUC, Wilcoxon signed-rank, metadata-shortcut
//! diagnostics).

pub mod corpus;
pub mod error;
pub mod evalstat;
pub mod ingest;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod tensor;

pub use error::KarmaError;

/// Build identification embedded into experiment reports.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BuildInfo {
    pub version: String,
    pub git: String,
}

impl BuildInfo {
    pub fn current() -> Self {
        BuildInfo {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: env!("KARMA_GIT_DESCRIBE").to_string(),
        }
    }
}

/// Mixes two seeds into a fresh stream seed (splitmix64 finalizer).
///
/// Used to derive independent per-epoch / per-rollout RNG streams from one
/// run seed so that runs stay reproducible under any interleaving.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
