//! PPO fine-tuning of the policy against the reward model, with a KL
//! penalty toward a frozen reference policy.
//!
//! The terminal reward-model probability lands on the last response token;
//! every token additionally receives `-kl_coef * (log pi - log pi_ref)` as
//! shaped reward. Sequence advantage is total shaped reward minus an
//! exponential-moving-average baseline, broadcast to all tokens. Updates
//! maximize the clipped surrogate `min(rho*A, clip(rho)*A)`; the gradient
//! is taken through `log pi` with the active-branch weight held constant,
//! which is exactly the surrogate's gradient.

use crate::corpus::{ChatSequence, DatasetRecord, Vocabulary, EOS_ID};
use crate::policy::{encode_prompt, PolicyConfig, PolicyModel};
use crate::reward::{encode_sequence, EncodedSequence, RewardModel};
use crate::tensor::checkpoint as krma;
use crate::tensor::{adamw_step, AdamWState, Graph, ParamStore, Tensor};
use crate::{derive_seed, KarmaError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Clean synthetic chat prompts (no dump-derived content).
    Benign,
    /// Contexts drawn from the pipeline-built conversation corpus.
    Reddit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PPOConfig {
    /// Desk default 1e-4; the published 9e-6 is sized for much larger
    /// policies.
    pub lr: f32,
    pub batch_size: usize,
    pub kl_coef: f32,
    pub clip_epsilon: f32,
    pub baseline_decay: f32,
    pub updates_per_batch: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub prompt_source: PromptKind,
    /// Persist a resumable snapshot every N steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            lr: 1e-4,
            batch_size: 10,
            kl_coef: 0.5,
            clip_epsilon: 0.2,
            baseline_decay: 0.9,
            updates_per_batch: 4,
            total_steps: 40,
            seed: 0,
            prompt_source: PromptKind::Benign,
            checkpoint_every: 0,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<(), KarmaError> {
        if self.kl_coef < 0.0 || !(0.0..1.0).contains(&self.clip_epsilon) || self.clip_epsilon == 0.0
        {
            return Err(KarmaError::DegenerateConfig {
                detail: format!(
                    "kl_coef must be >= 0 and clip_epsilon in (0, 1): got {} / {}",
                    self.kl_coef, self.clip_epsilon
                ),
            });
        }
        if self.batch_size == 0 || self.updates_per_batch == 0 {
            return Err(KarmaError::DegenerateConfig {
                detail: "batch_size and updates_per_batch must be positive".to_string(),
            });
        }
        Ok(())
    }
}

/// A prompt pre-encoded for both consumers: token stream for the policy,
/// (token, role) pairs for the reward model.
#[derive(Clone, Debug)]
pub struct PreparedPrompt {
    pub policy_tokens: Vec<u32>,
    pub rm_context: EncodedSequence,
    pub has_meta: bool,
}

impl PreparedPrompt {
    pub fn from_sequence(seq: &ChatSequence, vocab: &Vocabulary) -> Self {
        let prompt_only = seq.without_candidate();
        PreparedPrompt {
            policy_tokens: encode_prompt(vocab, &prompt_only),
            rm_context: encode_sequence(vocab, &prompt_only),
            has_meta: prompt_only.has_meta(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptSource {
    pub kind: PromptKind,
    pub prompts: Vec<PreparedPrompt>,
}

impl PromptSource {
    pub fn benign(n: usize, n_topics: usize, seed: u64, vocab: &Vocabulary) -> Result<Self, KarmaError> {
        let seqs = crate::corpus::synth::generate_benign_prompts(n, n_topics, seed);
        PromptSource::from_sequences(PromptKind::Benign, &seqs, vocab)
    }

    pub fn reddit(records: &[DatasetRecord], vocab: &Vocabulary) -> Result<Self, KarmaError> {
        let seqs: Vec<ChatSequence> = records.iter().map(|r| r.sequence()).collect();
        PromptSource::from_sequences(PromptKind::Reddit, &seqs, vocab)
    }

    pub fn from_sequences(
        kind: PromptKind,
        seqs: &[ChatSequence],
        vocab: &Vocabulary,
    ) -> Result<Self, KarmaError> {
        if seqs.is_empty() {
            return Err(KarmaError::EmptyPrompts);
        }
        Ok(PromptSource {
            kind,
            prompts: seqs
                .iter()
                .map(|s| PreparedPrompt::from_sequence(s, vocab))
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Acting-policy log-probabilities recorded at sampling time.
    pub logprobs: Vec<f32>,
    pub ref_logprobs: Vec<f32>,
    /// Terminal reward-model probability.
    pub reward: f32,
    /// Per-token shaped rewards (KL penalty, terminal reward on the last).
    pub shaped: Vec<f32>,
    /// Sequence advantage, broadcast to every token.
    pub advantage: f32,
}

impl Rollout {
    pub fn total_shaped_reward(&self) -> f32 {
        self.shaped.iter().sum()
    }
}

/// Per-step training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PPOStats {
    pub step: usize,
    pub mean_rm_reward: f64,
    pub mean_kl_to_ref: f64,
    pub clip_fraction: f64,
    pub baseline_value: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct UpdateEpochStats {
    pub loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

fn check_compatible(policy: &PolicyModel, rm: &RewardModel) -> Result<(), KarmaError> {
    if policy.vocab_size() != rm.vocab_size() {
        return Err(KarmaError::VocabMismatch {
            detail: format!(
                "policy vocabulary {} vs reward model vocabulary {}",
                policy.vocab_size(),
                rm.vocab_size()
            ),
        });
    }
    Ok(())
}

fn check_prompt_mode(rm: &RewardModel, prompt: &PreparedPrompt) -> Result<(), KarmaError> {
    use crate::corpus::SerializationMode;
    match (rm.mode(), prompt.has_meta) {
        (SerializationMode::Generalized, true) => Err(KarmaError::ModeMismatch {
            detail: "prompt with metadata fed to a generalized reward model".to_string(),
        }),
        (SerializationMode::Conditioned, false) => Err(KarmaError::ModeMismatch {
            detail: "conditioned reward model needs metadata in prompts".to_string(),
        }),
        _ => Ok(()),
    }
}

/// Scores a sampled response in its prompt context.
pub fn score_rollout(rm: &RewardModel, prompt: &PreparedPrompt, response: &[u32]) -> f32 {
    let mut tokens = prompt.rm_context.clone();
    let candidate_role = Vocabulary::role_index(crate::corpus::Role::Candidate);
    for &t in response {
        if t == EOS_ID {
            break;
        }
        tokens.push((t, candidate_role));
    }
    rm.forward_tokens(&tokens)
}

/// Samples one batch of rollouts and assigns shaped rewards and
/// advantages. Advances the EMA `baseline` through the batch.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &PolicyModel,
    reference: &PolicyModel,
    rm: &RewardModel,
    prompts: &[PreparedPrompt],
    policy_cfg: &PolicyConfig,
    cfg: &PPOConfig,
    step: usize,
    baseline: &mut f32,
) -> Result<Vec<Rollout>, KarmaError> {
    cfg.validate()?;
    check_compatible(policy, rm)?;
    if prompts.is_empty() {
        return Err(KarmaError::EmptyPrompts);
    }

    let mut rollouts = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let prompt = &prompts[(step * cfg.batch_size + i) % prompts.len()];
        check_prompt_mode(rm, prompt)?;
        let rollout_seed = derive_seed(cfg.seed, 4, (step * cfg.batch_size + i) as u64);
        let (response, logprobs) = policy.sample(&prompt.policy_tokens, policy_cfg, rollout_seed)?;
        let ref_logprobs = reference.sequence_logprobs(&prompt.policy_tokens, &response)?;
        let reward = score_rollout(rm, prompt, &response);

        let mut shaped: Vec<f32> = logprobs
            .iter()
            .zip(ref_logprobs.iter())
            .map(|(&lp, &rlp)| -cfg.kl_coef * (lp - rlp))
            .collect();
        if let Some(last) = shaped.last_mut() {
            *last += reward;
        }
        let total: f32 = shaped.iter().sum();
        let advantage = total - *baseline;
        *baseline = cfg.baseline_decay * *baseline + (1.0 - cfg.baseline_decay) * total;

        rollouts.push(Rollout {
            prompt: prompt.policy_tokens.clone(),
            response,
            logprobs,
            ref_logprobs,
            reward,
            shaped,
            advantage,
        });
    }
    Ok(rollouts)
}

/// The clipped surrogate objective for one token.
pub(crate) fn clipped_objective(rho: f32, advantage: f32, epsilon: f32) -> f32 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * advantage).min(clipped * advantage)
}

/// One surrogate evaluation over the batch: loss value, gradients, and the
/// epoch statistics. The loss is `-mean_t min(rho A, clip(rho) A)`; its
/// gradient flows through `log pi` wherever the unclipped branch is
/// active.
fn surrogate_pass(
    policy: &PolicyModel,
    rollouts: &[Rollout],
    cfg: &PPOConfig,
) -> Result<(UpdateEpochStats, BTreeMap<String, Tensor>), KarmaError> {
    let mut g = Graph::new();
    let handles = policy.register_params(&mut g)?;
    let mut ce_nodes = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        ce_nodes.push(g_ce(policy, &mut g, &handles, r)?);
    }
    let ce_all = g.concat(&ce_nodes, 0)?;

    let new_logprobs: Vec<f32> = g.value(ce_all).data().iter().map(|&c| -c).collect();
    let mut old = Vec::with_capacity(new_logprobs.len());
    let mut advantages = Vec::with_capacity(new_logprobs.len());
    for r in rollouts {
        old.extend_from_slice(&r.logprobs);
        advantages.extend(std::iter::repeat(r.advantage).take(r.response.len()));
    }

    let n = new_logprobs.len();
    let mut weights = Vec::with_capacity(n);
    let mut objective = 0.0f64;
    let mut approx_kl = 0.0f64;
    let mut clipped_count = 0usize;
    for t in 0..n {
        let rho = (new_logprobs[t] - old[t]).exp();
        let a = advantages[t];
        objective += clipped_objective(rho, a, cfg.clip_epsilon) as f64;
        approx_kl += (old[t] - new_logprobs[t]) as f64;
        let clip_binds =
            (a > 0.0 && rho > 1.0 + cfg.clip_epsilon) || (a < 0.0 && rho < 1.0 - cfg.clip_epsilon);
        if clip_binds {
            clipped_count += 1;
            weights.push(0.0);
        } else {
            // d/d theta [rho * A] = A * rho * d log pi; the CE node is
            // -log pi, so the weight enters the loss positively.
            weights.push(a * rho);
        }
    }

    let weight_node = g.constant(Tensor::vector(weights));
    let weighted = g.multiply(ce_all, weight_node)?;
    let loss = g.mean_pool(weighted, 0)?;
    let grads = g.backward(loss)?;

    let stats = UpdateEpochStats {
        loss: -(objective / n as f64),
        approx_kl: approx_kl / n as f64,
        clip_fraction: clipped_count as f64 / n as f64,
    };
    Ok((stats, grads.into_named()))
}

fn g_ce(
    policy: &PolicyModel,
    g: &mut Graph,
    handles: &crate::policy::PolicyParamNodes,
    r: &Rollout,
) -> Result<crate::tensor::NodeId, KarmaError> {
    policy.sequence_ce_graph(g, handles, &r.prompt, &r.response)
}

/// Runs `updates_per_batch` clipped-surrogate epochs over the batch.
pub fn ppo_update(
    policy: &mut PolicyModel,
    opt: &mut AdamWState,
    rollouts: &[Rollout],
    cfg: &PPOConfig,
) -> Result<Vec<UpdateEpochStats>, KarmaError> {
    cfg.validate()?;
    if rollouts.is_empty() {
        return Err(KarmaError::EmptyPrompts);
    }
    let mut epochs = Vec::with_capacity(cfg.updates_per_batch);
    for epoch in 0..cfg.updates_per_batch {
        let (stats, grads) = surrogate_pass(policy, rollouts, cfg)?;
        if !stats.loss.is_finite() {
            return Err(KarmaError::AbortTraining {
                detail: format!("non-finite surrogate loss at update epoch {epoch}"),
            });
        }
        adamw_step(policy.params_mut(), &grads, opt, cfg.lr, 0.0)?;
        epochs.push(stats);
    }
    Ok(epochs)
}

/// Mutable training state; checkpointable and resumable.
#[derive(Clone, Debug)]
pub struct PPORun {
    pub policy: PolicyModel,
    pub opt: AdamWState,
    pub baseline: f32,
    pub next_step: usize,
}

impl PPORun {
    pub fn fresh(policy: PolicyModel) -> Self {
        PPORun {
            policy,
            opt: AdamWState::new(),
            baseline: 0.0,
            next_step: 0,
        }
    }
}

/// Alternates rollout collection and surrogate updates until
/// `total_steps`, invoking `on_step` per step and `on_checkpoint` every
/// `checkpoint_every` steps. Fully determined by the config seed.
pub fn train_ppo(
    run: &mut PPORun,
    reference: &PolicyModel,
    rm: &RewardModel,
    source: &PromptSource,
    policy_cfg: &PolicyConfig,
    cfg: &PPOConfig,
    mut on_step: impl FnMut(&PPOStats),
    mut on_checkpoint: impl FnMut(&PPORun) -> Result<(), KarmaError>,
) -> Result<Vec<PPOStats>, KarmaError> {
    cfg.validate()?;
    let mut history = Vec::new();
    for step in run.next_step..cfg.total_steps {
        let rollouts = collect_rollouts(
            &run.policy,
            reference,
            rm,
            &source.prompts,
            policy_cfg,
            cfg,
            step,
            &mut run.baseline,
        )?;
        let epochs = ppo_update(&mut run.policy, &mut run.opt, &rollouts, cfg)?;

        let token_count: usize = rollouts.iter().map(|r| r.response.len()).sum();
        let kl_sum: f64 = rollouts
            .iter()
            .flat_map(|r| r.logprobs.iter().zip(r.ref_logprobs.iter()))
            .map(|(&lp, &rlp)| (lp - rlp) as f64)
            .sum();
        let stats = PPOStats {
            step,
            mean_rm_reward: rollouts.iter().map(|r| r.reward as f64).sum::<f64>()
                / rollouts.len() as f64,
            mean_kl_to_ref: kl_sum / token_count.max(1) as f64,
            clip_fraction: epochs.iter().map(|e| e.clip_fraction).sum::<f64>()
                / epochs.len() as f64,
            baseline_value: run.baseline as f64,
            loss: epochs.iter().map(|e| e.loss).sum::<f64>() / epochs.len() as f64,
        };
        run.next_step = step + 1;
        on_step(&stats);
        history.push(stats);

        if cfg.checkpoint_every > 0 && run.next_step % cfg.checkpoint_every == 0 {
            on_checkpoint(run)?;
        }
    }
    Ok(history)
}

/// Serializes the full resumable state (policy, optimizer moments,
/// baseline, step counter) into one KRMA container.
pub fn save_ppo_run(run: &PPORun, vocab: &Vocabulary, path: &Path) -> Result<(), KarmaError> {
    let mut store = ParamStore::new();
    for (name, t) in run.policy.params().iter() {
        store.insert(format!("policy.{name}"), t.clone());
    }
    for (name, t) in run.opt.export() {
        store.insert(format!("opt.{name}"), t);
    }
    store.insert("run.baseline", Tensor::scalar(run.baseline));
    store.insert("run.next_step", Tensor::scalar(run.next_step as f32));
    store.insert("run.opt_steps", Tensor::scalar(run.opt.step_count() as f32));
    krma::save_to_path(&store, path)?;
    let header = crate::reward::ModelHeader {
        kind: "ppo-run".to_string(),
        mode: None,
        vocab_checksum: vocab.checksum(),
        config: serde_json::Value::Null,
    };
    std::fs::write(
        crate::reward::header_path(path),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

pub fn load_ppo_run(path: &Path, vocab: &Vocabulary) -> Result<PPORun, KarmaError> {
    let header: crate::reward::ModelHeader =
        serde_json::from_str(&std::fs::read_to_string(crate::reward::header_path(path))?)?;
    if header.kind != "ppo-run" {
        return Err(krma::CheckpointError::Incompatible {
            detail: format!("expected a ppo-run checkpoint, found `{}`", header.kind),
        }
        .into());
    }
    if header.vocab_checksum != vocab.checksum() {
        return Err(krma::CheckpointError::Incompatible {
            detail: "vocabulary checksum does not match the checkpoint".to_string(),
        }
        .into());
    }
    let store = krma::load_from_path(path)?;
    let mut policy_params = ParamStore::new();
    let mut opt_entries = Vec::new();
    let mut baseline = 0.0f32;
    let mut next_step = 0usize;
    let mut opt_steps = 0u64;
    for (name, t) in store.iter() {
        if let Some(p) = name.strip_prefix("policy.") {
            policy_params.insert(p, t.clone());
        } else if let Some(o) = name.strip_prefix("opt.") {
            opt_entries.push((o.to_string(), t.clone()));
        } else if name == "run.baseline" {
            baseline = t.item()?;
        } else if name == "run.next_step" {
            next_step = t.item()? as usize;
        } else if name == "run.opt_steps" {
            opt_steps = t.item()? as u64;
        }
    }
    let policy = crate::policy::policy_from_params(policy_params, vocab.size())?;
    Ok(PPORun {
        policy,
        opt: AdamWState::import(opt_entries, opt_steps),
        baseline,
        next_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Role, SerializationMode, Turn};
    use crate::reward::{RMConfig, RewardModel};

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["alpha beta gamma delta epsilon zeta eta theta iota kappa"].into_iter(),
            32,
        )
        .unwrap()
    }

    fn policy_cfg() -> PolicyConfig {
        PolicyConfig {
            context_window: 4,
            embed_dim: 8,
            hidden_dim: 16,
            max_response_len: 6,
            temperature: 1.0,
            seed: 3,
        }
    }

    fn prompts(vocab: &Vocabulary) -> Vec<PreparedPrompt> {
        let seqs: Vec<ChatSequence> = (0..4)
            .map(|i| ChatSequence {
                turns: vec![Turn {
                    role: Role::User,
                    text: format!("question about alpha beta {i}"),
                }],
            })
            .collect();
        seqs.iter()
            .map(|s| PreparedPrompt::from_sequence(s, vocab))
            .collect()
    }

    /// Reward model whose output is a constant probability: zero encoder
    /// and zero w2 leave only the output bias.
    fn constant_rm(vocab: &Vocabulary, p: f32) -> RewardModel {
        let mut rm = RewardModel::zero_init(
            &RMConfig::desk(SerializationMode::Generalized),
            vocab.size(),
        );
        let logit = (p / (1.0 - p)).ln();
        rm.params_mut().get_mut("head.b2").unwrap().data_mut()[0] = logit;
        rm
    }

    #[test]
    fn zero_kl_constant_rm_total_reward_is_the_constant() {
        let v = vocab();
        let pcfg = policy_cfg();
        let policy = PolicyModel::init(&pcfg, v.size());
        let rm = constant_rm(&v, 0.7);
        let cfg = PPOConfig {
            kl_coef: 0.0,
            batch_size: 6,
            ..PPOConfig::default()
        };
        let mut baseline = 0.0;
        let rollouts = collect_rollouts(
            &policy, &policy, &rm, &prompts(&v), &pcfg, &cfg, 0, &mut baseline,
        )
        .unwrap();
        for r in &rollouts {
            assert!((r.reward - 0.7).abs() < 1e-4, "reward {}", r.reward);
            assert!(
                (r.total_shaped_reward() - r.reward).abs() < 1e-6,
                "shaped total should equal the terminal reward"
            );
        }
    }

    #[test]
    fn policy_equal_to_reference_has_zero_kl_terms() {
        let v = vocab();
        let pcfg = policy_cfg();
        let policy = PolicyModel::init(&pcfg, v.size());
        let rm = constant_rm(&v, 0.5);
        let cfg = PPOConfig {
            kl_coef: 0.5,
            batch_size: 4,
            ..PPOConfig::default()
        };
        let mut baseline = 0.0;
        let rollouts = collect_rollouts(
            &policy, &policy, &rm, &prompts(&v), &pcfg, &cfg, 0, &mut baseline,
        )
        .unwrap();
        for r in &rollouts {
            for (i, &s) in r.shaped.iter().enumerate() {
                if i + 1 < r.shaped.len() {
                    assert_eq!(s, 0.0, "non-terminal shaped reward must be exactly 0");
                }
            }
            let last = *r.shaped.last().unwrap();
            assert_eq!(last, r.reward);
        }
    }

    #[test]
    fn zero_advantage_leaves_parameters_unchanged() {
        let v = vocab();
        let pcfg = policy_cfg();
        let mut policy = PolicyModel::init(&pcfg, v.size());
        let before = policy.params().clone();
        let rollout = Rollout {
            prompt: vec![1, 2],
            response: vec![3, 4, EOS_ID],
            logprobs: vec![-1.0, -1.2, -0.8],
            ref_logprobs: vec![-1.0, -1.2, -0.8],
            reward: 0.5,
            shaped: vec![0.0, 0.0, 0.5],
            advantage: 0.0,
        };
        let mut opt = AdamWState::new();
        let cfg = PPOConfig::default();
        ppo_update(&mut policy, &mut opt, &[rollout], &cfg).unwrap();
        assert_eq!(&before, policy.params());
    }

    #[test]
    fn clipped_objective_picks_the_clipped_branch() {
        // rho = e^0.8 ~ 2.23, eps = 0.2, A = 1: min(2.23, 1.2) = 1.2
        let val = clipped_objective(0.8f32.exp(), 1.0, 0.2);
        assert!((val - 1.2).abs() < 1e-6, "{val}");
        // A = -1, rho small: clip binds from below
        let val = clipped_objective(0.5, -1.0, 0.2);
        assert!((val - -0.8).abs() < 1e-6, "{val}");
        // inside the trust region both branches agree
        let val = clipped_objective(1.1, 2.0, 0.2);
        assert!((val - 2.2).abs() < 1e-6, "{val}");
    }

    #[test]
    fn first_update_epoch_has_zero_clip_fraction() {
        let v = vocab();
        let pcfg = policy_cfg();
        let policy = PolicyModel::init(&pcfg, v.size());
        let rm = constant_rm(&v, 0.6);
        let cfg = PPOConfig {
            batch_size: 5,
            updates_per_batch: 3,
            lr: 5e-2, // big enough that later epochs do clip
            ..PPOConfig::default()
        };
        let mut baseline = 0.0;
        let rollouts = collect_rollouts(
            &policy, &policy, &rm, &prompts(&v), &pcfg, &cfg, 0, &mut baseline,
        )
        .unwrap();
        let mut trained = policy.clone();
        let mut opt = AdamWState::new();
        let epochs = ppo_update(&mut trained, &mut opt, &rollouts, &cfg).unwrap();
        assert_eq!(epochs[0].clip_fraction, 0.0);
        assert_eq!(epochs[0].approx_kl, 0.0);
    }

    #[test]
    fn surrogate_gradient_matches_analytic_form_on_three_token_vocab() {
        // One rollout, one response token, vocab {0, 1, 2}. The surrogate
        // gradient w.r.t. the output bias row is -(1/N) A rho (onehot - p).
        let pcfg = PolicyConfig {
            context_window: 2,
            embed_dim: 4,
            hidden_dim: 4,
            max_response_len: 4,
            temperature: 1.0,
            seed: 9,
        };
        let policy = PolicyModel::init(&pcfg, 3);
        let prompt = vec![0u32];
        let response = vec![1u32];
        let lp_new = policy.sequence_logprobs(&prompt, &response).unwrap()[0];
        let old_lp = lp_new - 0.1; // pretend the acting policy was slightly different
        let advantage = 0.7f32;
        let rollout = Rollout {
            prompt: prompt.clone(),
            response: response.clone(),
            logprobs: vec![old_lp],
            ref_logprobs: vec![old_lp],
            reward: 0.0,
            shaped: vec![0.0],
            advantage,
        };
        let cfg = PPOConfig::default();
        let (_, grads) = surrogate_pass(&policy, &[rollout], &cfg).unwrap();

        let logits = policy.logits_at(&prompt);
        let mut probs = vec![0.0f32; 3];
        crate::tensor::kernels::softmax_row(&logits, &mut probs);
        let rho = (lp_new - old_lp).exp();
        let g_b2 = grads.get("ff.b2").unwrap().data();
        for j in 0..3 {
            let onehot = if j == 1 { 1.0 } else { 0.0 };
            let expected = -advantage * rho * (onehot - probs[j]);
            assert!(
                (g_b2[j] - expected).abs() < 1e-5,
                "j={j}: {} vs {expected}",
                g_b2[j]
            );
        }
    }

    #[test]
    fn train_ppo_is_deterministic() {
        let v = vocab();
        let pcfg = policy_cfg();
        let rm = constant_rm(&v, 0.6);
        let source = PromptSource {
            kind: PromptKind::Benign,
            prompts: prompts(&v),
        };
        let cfg = PPOConfig {
            total_steps: 3,
            batch_size: 4,
            ..PPOConfig::default()
        };
        let run_once = || {
            let mut run = PPORun::fresh(PolicyModel::init(&pcfg, v.size()));
            let reference = PolicyModel::init(&pcfg, v.size());
            let stats = train_ppo(
                &mut run, &reference, &rm, &source, &pcfg, &cfg,
                |_| {},
                |_| Ok(()),
            )
            .unwrap();
            (stats, run.policy)
        };
        let (stats_a, policy_a) = run_once();
        let (stats_b, policy_b) = run_once();
        assert_eq!(stats_a, stats_b);
        assert_eq!(policy_a, policy_b);
    }

    #[test]
    fn ppo_run_checkpoint_resumes_identically() {
        let v = vocab();
        let pcfg = policy_cfg();
        let rm = constant_rm(&v, 0.6);
        let source = PromptSource {
            kind: PromptKind::Benign,
            prompts: prompts(&v),
        };
        let cfg = PPOConfig {
            total_steps: 4,
            batch_size: 3,
            ..PPOConfig::default()
        };
        // uninterrupted
        let mut full = PPORun::fresh(PolicyModel::init(&pcfg, v.size()));
        let reference = PolicyModel::init(&pcfg, v.size());
        train_ppo(&mut full, &reference, &rm, &source, &pcfg, &cfg, |_| {}, |_| Ok(())).unwrap();

        // interrupted at step 2, checkpointed, resumed
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.krma");
        let mut half = PPORun::fresh(PolicyModel::init(&pcfg, v.size()));
        let cfg_half = PPOConfig {
            total_steps: 2,
            ..cfg.clone()
        };
        train_ppo(&mut half, &reference, &rm, &source, &pcfg, &cfg_half, |_| {}, |_| Ok(()))
            .unwrap();
        save_ppo_run(&half, &v, &ckpt).unwrap();

        let mut resumed = load_ppo_run(&ckpt, &v).unwrap();
        assert_eq!(resumed.next_step, 2);
        train_ppo(&mut resumed, &reference, &rm, &source, &pcfg, &cfg, |_| {}, |_| Ok(()))
            .unwrap();
        assert_eq!(resumed.policy, full.policy);
        assert_eq!(resumed.baseline, full.baseline);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let v = vocab();
        let pcfg = policy_cfg();
        let policy = PolicyModel::init(&pcfg, v.size());
        let rm = constant_rm(&v, 0.5);
        let small = PolicyModel::init(&pcfg, v.size() - 1);
        let cfg = PPOConfig::default();
        let mut baseline = 0.0;
        let err = collect_rollouts(
            &small, &policy, &rm, &prompts(&v), &pcfg, &cfg, 0, &mut baseline,
        )
        .unwrap_err();
        assert!(matches!(err, KarmaError::VocabMismatch { .. }));
    }
}
