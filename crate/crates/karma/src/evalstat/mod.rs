//! Experiment harness: held-out policy evaluation and the metadata
//! shortcut diagnostic contrasting generalized and conditioned reward
//! models.

mod wilcoxon;

pub use wilcoxon::{
    wilcoxon_signed_rank, WilcoxonMethod, WilcoxonResult, DEFAULT_ALPHA, EXACT_LIMIT,
};

use crate::corpus::synth::{generate_synthetic_corpus, SynthConfig};
use crate::corpus::{
    build_threads, build_vocab, extract_instances, split_dataset, to_records, CorpusConfig,
    DatasetRecord, SerializationMode, TrainingInstance, Vocabulary,
};
use crate::policy::{PolicyConfig, PolicyModel};
use crate::ppo::{score_rollout, PreparedPrompt};
use crate::reward::{compute_auc, rm_train, RMConfig, RewardModel};
use crate::{derive_seed, BuildInfo, KarmaError};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Held-out evaluation of a policy: reward-model score, drift from the
/// reference, and a bigram-diversity degeneracy monitor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyEvalReport {
    pub mean_rm_reward: f64,
    /// Mean per-token `log pi - log pi_ref` under the policy's samples.
    pub mean_kl: f64,
    /// Unique bigram fraction across all sampled responses.
    pub distinct_2: f64,
    pub n_prompts: usize,
    pub seed: u64,
    pub per_prompt_rewards: Vec<f64>,
}

pub fn eval_policy(
    policy: &PolicyModel,
    reference: &PolicyModel,
    rm: &RewardModel,
    prompts: &[PreparedPrompt],
    policy_cfg: &PolicyConfig,
    seed: u64,
) -> Result<PolicyEvalReport, KarmaError> {
    if prompts.is_empty() {
        return Err(KarmaError::EmptyPrompts);
    }
    let mut rewards = Vec::with_capacity(prompts.len());
    let mut kl_sum = 0.0f64;
    let mut token_count = 0usize;
    let mut bigrams: HashSet<(u32, u32)> = HashSet::new();
    let mut bigram_count = 0usize;

    for (i, prompt) in prompts.iter().enumerate() {
        let (response, logprobs) =
            policy.sample(&prompt.policy_tokens, policy_cfg, derive_seed(seed, 5, i as u64))?;
        let ref_lp = reference.sequence_logprobs(&prompt.policy_tokens, &response)?;
        for (&lp, &rlp) in logprobs.iter().zip(ref_lp.iter()) {
            kl_sum += (lp - rlp) as f64;
        }
        token_count += response.len();
        for w in response.windows(2) {
            bigrams.insert((w[0], w[1]));
            bigram_count += 1;
        }
        rewards.push(score_rollout(rm, prompt, &response) as f64);
    }

    Ok(PolicyEvalReport {
        mean_rm_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        mean_kl: kl_sum / token_count.max(1) as f64,
        distinct_2: if bigram_count == 0 {
            0.0
        } else {
            bigrams.len() as f64 / bigram_count as f64
        },
        n_prompts: prompts.len(),
        seed,
        per_prompt_rewards: rewards,
    })
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ModePair {
    pub auc_generalized: f64,
    pub auc_conditioned: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub in_domain: ModePair,
    pub transfer: ModePair,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShortcutDeltas {
    /// Mean in-domain AUC advantage of the conditioned model.
    pub in_domain_conditioned_minus_generalized: f64,
    /// Mean transfer AUC advantage of the generalized model.
    pub transfer_generalized_minus_conditioned: f64,
    /// Seeds where the generalized model matches or beats the conditioned
    /// one on the transfer set.
    pub transfer_reversals: usize,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShortcutReport {
    pub rho_train: f64,
    pub seeds: Vec<u64>,
    pub in_domain: ModePair,
    pub transfer: ModePair,
    pub deltas: ShortcutDeltas,
    pub per_seed: Vec<SeedOutcome>,
    pub synth_config: SynthConfig,
    pub rm_config: RMConfig,
    pub build: BuildInfo,
}

/// Builds matched record sets from one synthetic corpus: identical
/// underlying threads, serialized both ways, split by thread.
struct ArmData {
    gen_train: Vec<DatasetRecord>,
    gen_valid: Vec<DatasetRecord>,
    gen_test: Vec<DatasetRecord>,
    cond_train: Vec<DatasetRecord>,
    cond_valid: Vec<DatasetRecord>,
    cond_test: Vec<DatasetRecord>,
    vocab: Vocabulary,
}

fn strip_meta(instances: &[TrainingInstance]) -> Vec<TrainingInstance> {
    instances
        .iter()
        .map(|inst| TrainingInstance {
            meta: None,
            ..inst.clone()
        })
        .collect()
}

fn prepare_arm(synth_cfg: &SynthConfig, split_seed: u64, vocab_cap: usize) -> Result<ArmData, KarmaError> {
    let corpus = generate_synthetic_corpus(synth_cfg)?;
    let (trees, _) = build_threads(&corpus.posts, &corpus.comments)?;
    let corpus_cfg = CorpusConfig {
        vocab_cap,
        ..CorpusConfig::default()
    };
    let mut instances = Vec::new();
    for tree in &trees {
        instances.extend(extract_instances(tree, &corpus_cfg, SerializationMode::Conditioned));
    }
    let (fit_all, test) = split_dataset(&instances, &corpus_cfg, derive_seed(split_seed, 7, 0))?;
    let (fit, valid) = split_dataset(&fit_all, &corpus_cfg, derive_seed(split_seed, 7, 1))?;

    let cond_train = to_records(&fit, SerializationMode::Conditioned)?;
    let cond_valid = to_records(&valid, SerializationMode::Conditioned)?;
    let cond_test = to_records(&test, SerializationMode::Conditioned)?;
    let gen_train = to_records(&strip_meta(&fit), SerializationMode::Generalized)?;
    let gen_valid = to_records(&strip_meta(&valid), SerializationMode::Generalized)?;
    let gen_test = to_records(&strip_meta(&test), SerializationMode::Generalized)?;

    // One shared vocabulary (built from the conditioned train side, the
    // superset) keeps the two models comparable token for token.
    let seqs: Vec<_> = cond_train.iter().map(|r| r.sequence()).collect();
    let vocab = build_vocab(&seqs, vocab_cap)?;

    Ok(ArmData {
        gen_train,
        gen_valid,
        gen_test,
        cond_train,
        cond_valid,
        cond_test,
        vocab,
    })
}

fn auc_of(model: &RewardModel, records: &[DatasetRecord], vocab: &Vocabulary) -> Result<f64, KarmaError> {
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        scores.push(model.forward(&rec.sequence(), vocab)? as f64);
        labels.push(rec.label);
    }
    compute_auc(&scores, &labels)
}

/// Per seed: generate an in-domain corpus at `rho_train` and a transfer
/// corpus at rho = 0, train one generalized and one conditioned reward
/// model on the same threads, and evaluate both on both test sets.
pub fn shortcut_experiment(
    rho_train: f64,
    seeds: &[u64],
    rm_cfg: &RMConfig,
    synth_cfg: &SynthConfig,
) -> Result<ShortcutReport, KarmaError> {
    if seeds.len() < 5 {
        return Err(KarmaError::TooSmall {
            detail: format!("shortcut diagnostic needs >= 5 seeds, got {}", seeds.len()),
        });
    }
    if !(0.0..=1.0).contains(&rho_train) {
        return Err(KarmaError::DegenerateConfig {
            detail: format!("rho_train {rho_train} outside [0, 1]"),
        });
    }

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let in_domain_cfg = SynthConfig {
            metadata_label_correlation: rho_train,
            seed: derive_seed(seed, 8, 0),
            ..synth_cfg.clone()
        };
        let transfer_cfg = SynthConfig {
            metadata_label_correlation: 0.0,
            seed: derive_seed(seed, 8, 1),
            ..synth_cfg.clone()
        };
        let arm = prepare_arm(&in_domain_cfg, seed, 8192)?;
        let transfer = prepare_arm(&transfer_cfg, seed.wrapping_add(1), 8192)?;

        let gen_cfg = RMConfig {
            mode: SerializationMode::Generalized,
            seed: derive_seed(seed, 9, 0),
            ..rm_cfg.clone()
        };
        let cond_cfg = RMConfig {
            mode: SerializationMode::Conditioned,
            seed: derive_seed(seed, 9, 1),
            ..rm_cfg.clone()
        };
        let (gen_model, _) = rm_train(&arm.gen_train, &arm.gen_valid, &gen_cfg, &arm.vocab)?;
        let (cond_model, _) = rm_train(&arm.cond_train, &arm.cond_valid, &cond_cfg, &arm.vocab)?;

        // Transfer evaluation re-encodes with the in-domain vocabulary:
        // the models only know their own token table.
        let mut transfer_gen = transfer.gen_test.clone();
        transfer_gen.extend(transfer.gen_train.iter().cloned());
        transfer_gen.extend(transfer.gen_valid.iter().cloned());
        let mut transfer_cond = transfer.cond_test.clone();
        transfer_cond.extend(transfer.cond_train.iter().cloned());
        transfer_cond.extend(transfer.cond_valid.iter().cloned());

        per_seed.push(SeedOutcome {
            seed,
            in_domain: ModePair {
                auc_generalized: auc_of(&gen_model, &arm.gen_test, &arm.vocab)?,
                auc_conditioned: auc_of(&cond_model, &arm.cond_test, &arm.vocab)?,
            },
            transfer: ModePair {
                auc_generalized: auc_of(&gen_model, &transfer_gen, &arm.vocab)?,
                auc_conditioned: auc_of(&cond_model, &transfer_cond, &arm.vocab)?,
            },
        });
    }

    let n = per_seed.len() as f64;
    let in_domain = ModePair {
        auc_generalized: per_seed.iter().map(|s| s.in_domain.auc_generalized).sum::<f64>() / n,
        auc_conditioned: per_seed.iter().map(|s| s.in_domain.auc_conditioned).sum::<f64>() / n,
    };
    let transfer = ModePair {
        auc_generalized: per_seed.iter().map(|s| s.transfer.auc_generalized).sum::<f64>() / n,
        auc_conditioned: per_seed.iter().map(|s| s.transfer.auc_conditioned).sum::<f64>() / n,
    };
    let deltas = ShortcutDeltas {
        in_domain_conditioned_minus_generalized: in_domain.auc_conditioned
            - in_domain.auc_generalized,
        transfer_generalized_minus_conditioned: transfer.auc_generalized
            - transfer.auc_conditioned,
        transfer_reversals: per_seed
            .iter()
            .filter(|s| s.transfer.auc_generalized >= s.transfer.auc_conditioned)
            .count(),
        n_seeds: per_seed.len(),
    };

    Ok(ShortcutReport {
        rho_train,
        seeds: seeds.to_vec(),
        in_domain,
        transfer,
        deltas,
        per_seed,
        synth_config: synth_cfg.clone(),
        rm_config: rm_cfg.clone(),
        build: BuildInfo::current(),
    })
}
