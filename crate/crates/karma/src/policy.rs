//! A compact autoregressive language policy with exact per-token
//! log-probabilities.
//!
//! The next-token head is a feed-forward net over the concatenated
//! embeddings of the previous `context_window` tokens (BOS-padded at the
//! start). That is deliberately small: it exposes everything PPO needs —
//! temperature sampling, exact differentiable log-probabilities, and a
//! frozen reference copy — without an attention stack.

use crate::corpus::{ChatSequence, Vocabulary, BOS_ID, EOS_ID, ROLE_CANDIDATE_ID};
use crate::tensor::checkpoint as krma;
use crate::tensor::kernels;
use crate::tensor::{adamw_step, AdamWState, Graph, NodeId, ParamStore, Tensor};
use crate::{derive_seed, KarmaError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Number of previous tokens visible to the next-token head.
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_response_len: usize,
    pub temperature: f32,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            context_window: 8,
            embed_dim: 64,
            hidden_dim: 256,
            max_response_len: 32,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Maximum-likelihood pretraining knobs for the reference policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-2,
            epochs: 10,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    params: ParamStore,
    context_window: usize,
    embed_dim: usize,
    hidden_dim: usize,
    vocab_size: usize,
}

impl PolicyModel {
    /// Seeded init. The output layer starts at zero so the untrained
    /// next-token distribution is exactly uniform.
    pub fn init(cfg: &PolicyConfig, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
        let (k, e, h) = (cfg.context_window, cfg.embed_dim, cfg.hidden_dim);
        let mut params = ParamStore::new();
        params.insert("token_emb", Tensor::uniform(vec![vocab_size, e], 0.1, &mut rng));
        let w1_scale = (6.0 / (k * e + h) as f32).sqrt();
        params.insert("ff.w1", Tensor::uniform(vec![k * e, h], w1_scale, &mut rng));
        params.insert("ff.b1", Tensor::zeros(vec![1, h]));
        params.insert("ff.w2", Tensor::zeros(vec![h, vocab_size]));
        params.insert("ff.b2", Tensor::zeros(vec![1, vocab_size]));
        PolicyModel {
            params,
            context_window: k,
            embed_dim: e,
            hidden_dim: h,
            vocab_size,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), KarmaError> {
        for &t in tokens {
            if t as usize >= self.vocab_size {
                return Err(KarmaError::OutOfVocab {
                    id: t,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// BOS-padded window of the last `context_window` tokens.
    fn window(&self, history: &[u32]) -> Vec<u32> {
        let k = self.context_window;
        let mut w = vec![BOS_ID; k.saturating_sub(history.len())];
        let start = history.len().saturating_sub(k);
        w.extend_from_slice(&history[start..]);
        w
    }

    /// Raw next-token logits given the history (plain scoring path).
    pub fn logits_at(&self, history: &[u32]) -> Vec<f32> {
        let (k, e, h, v) = (
            self.context_window,
            self.embed_dim,
            self.hidden_dim,
            self.vocab_size,
        );
        let emb = self.params.get("token_emb").unwrap().data();
        let w1 = self.params.get("ff.w1").unwrap().data();
        let b1 = self.params.get("ff.b1").unwrap().data();
        let w2 = self.params.get("ff.w2").unwrap().data();
        let b2 = self.params.get("ff.b2").unwrap().data();

        let mut x = Vec::with_capacity(k * e);
        for t in self.window(history) {
            x.extend_from_slice(&emb[t as usize * e..(t as usize + 1) * e]);
        }
        let mut hidden = kernels::matmul(&x, w1, 1, k * e, h);
        for (hv, &b) in hidden.iter_mut().zip(b1) {
            *hv = (*hv + b).tanh();
        }
        let mut logits = kernels::matmul(&hidden, w2, 1, h, v);
        for (l, &b) in logits.iter_mut().zip(b2) {
            *l += b;
        }
        logits
    }

    /// Samples a response: draws from `softmax(logits / temperature)` until
    /// EOS or `max_response_len`. Recorded log-probabilities are always the
    /// temperature-1 values (the evaluation measure), so they match
    /// [`PolicyModel::sequence_logprobs`] exactly. `temperature <= 0` means
    /// greedy argmax.
    pub fn sample(
        &self,
        prompt: &[u32],
        cfg: &PolicyConfig,
        seed: u64,
    ) -> Result<(Vec<u32>, Vec<f32>), KarmaError> {
        self.check_tokens(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut lp = vec![0.0f32; self.vocab_size];

        for _ in 0..cfg.max_response_len {
            let logits = self.logits_at(&history);
            kernels::log_softmax_row(&logits, &mut lp);

            let next = if cfg.temperature <= 0.0 {
                argmax(&logits)
            } else {
                let scaled: Vec<f32> = logits.iter().map(|&z| z / cfg.temperature).collect();
                let mut probs = vec![0.0f32; self.vocab_size];
                kernels::softmax_row(&scaled, &mut probs);
                draw_categorical(&probs, &mut rng)
            };

            tokens.push(next as u32);
            logprobs.push(lp[next]);
            history.push(next as u32);
            if next as u32 == EOS_ID {
                break;
            }
        }
        Ok((tokens, logprobs))
    }

    /// Exact log softmax value of each response token given its prefix.
    pub fn sequence_logprobs(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f32>, KarmaError> {
        self.check_tokens(prompt)?;
        self.check_tokens(response)?;
        let mut history = prompt.to_vec();
        let mut out = Vec::with_capacity(response.len());
        let mut lp = vec![0.0f32; self.vocab_size];
        for &t in response {
            let logits = self.logits_at(&history);
            kernels::log_softmax_row(&logits, &mut lp);
            out.push(lp[t as usize]);
            history.push(t);
        }
        Ok(out)
    }

    /// Differentiable per-token cross entropy `-log pi(target_t | prefix)`
    /// over every target position, as one graph node of shape `(T)`.
    pub fn sequence_ce_graph(
        &self,
        g: &mut Graph,
        handles: &PolicyParamNodes,
        prompt: &[u32],
        targets: &[u32],
    ) -> Result<NodeId, KarmaError> {
        self.check_tokens(prompt)?;
        self.check_tokens(targets)?;
        let k = self.context_window;
        let span = targets.len();

        // Column block j of the (T x kE) input holds window slot j for
        // every position, so one gather per slot covers the whole span.
        let mut full: Vec<u32> = prompt.to_vec();
        full.extend_from_slice(targets);
        let prompt_len = prompt.len();
        let mut slot_columns = Vec::with_capacity(k);
        for j in 0..k {
            let indices: Vec<usize> = (0..span)
                .map(|t| {
                    let pos = (prompt_len + t) as i64; // predicting full[pos]
                    let idx = pos - (k - j) as i64;
                    if idx < 0 {
                        BOS_ID as usize
                    } else {
                        full[idx as usize] as usize
                    }
                })
                .collect();
            slot_columns.push(g.embedding_gather(handles.token_emb, &indices)?);
        }
        let x = g.concat(&slot_columns, 1)?;
        let pre = g.matmul(x, handles.w1)?;
        let pre = g.add(pre, handles.b1)?;
        let hidden = g.tanh(pre)?;
        let logits = g.matmul(hidden, handles.w2)?;
        let logits = g.add(logits, handles.b2)?;
        let target_ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy_with_logits(logits, &target_ids)?)
    }

    /// Registers the policy parameters as graph leaves.
    pub fn register_params(&self, g: &mut Graph) -> Result<PolicyParamNodes, KarmaError> {
        Ok(PolicyParamNodes {
            token_emb: g.param("token_emb", self.params.get("token_emb")?.clone()),
            w1: g.param("ff.w1", self.params.get("ff.w1")?.clone()),
            b1: g.param("ff.b1", self.params.get("ff.b1")?.clone()),
            w2: g.param("ff.w2", self.params.get("ff.w2")?.clone()),
            b2: g.param("ff.b2", self.params.get("ff.b2")?.clone()),
        })
    }
}

#[derive(Clone, Copy)]
pub struct PolicyParamNodes {
    token_emb: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn draw_categorical<R: Rng>(probs: &[f32], rng: &mut R) -> usize {
    let u: f32 = rng.gen();
    let mut acc = 0.0f32;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Token stream a policy is conditioned on: each turn opens with its role
/// marker, and the stream ends with the candidate marker as the cue to
/// respond.
pub fn encode_prompt(vocab: &Vocabulary, seq: &ChatSequence) -> Vec<u32> {
    let mut out = Vec::new();
    for turn in &seq.turns {
        if turn.role == crate::corpus::Role::Candidate {
            continue;
        }
        out.push(Vocabulary::role_id(turn.role));
        out.extend(vocab.encode(&turn.text));
    }
    out.push(ROLE_CANDIDATE_ID);
    out
}

/// Response text as a pretraining sequence: candidate marker, tokens, EOS.
pub fn response_training_sequence(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let mut out = vec![ROLE_CANDIDATE_ID];
    out.extend(vocab.encode(text));
    out.push(EOS_ID);
    out
}

/// Next-token maximum likelihood over the given sequences; returns the
/// frozen reference policy. Each sequence's first token is treated as
/// given, the rest are prediction targets.
pub fn pretrain_reference(
    sequences: &[Vec<u32>],
    cfg: &PolicyConfig,
    pretrain: &PretrainConfig,
    vocab_size: usize,
) -> Result<PolicyModel, KarmaError> {
    let usable: Vec<&Vec<u32>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(KarmaError::TooSmall {
            detail: "pretraining corpus has no sequence of length >= 2".to_string(),
        });
    }

    let mut model = PolicyModel::init(cfg, vocab_size);
    let mut opt = AdamWState::new();
    let mut indices: Vec<usize> = (0..usable.len()).collect();

    for epoch in 0..pretrain.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, epoch as u64));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(pretrain.batch_size.max(1)) {
            let mut g = Graph::new();
            let handles = model.register_params(&mut g)?;
            let mut ce_nodes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seq = usable[i];
                ce_nodes.push(model.sequence_ce_graph(&mut g, &handles, &seq[..1], &seq[1..])?);
            }
            let all = g.concat(&ce_nodes, 0)?;
            let loss = g.mean_pool(all, 0)?;
            let loss_value = g.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(KarmaError::AbortTraining {
                    detail: format!("non-finite pretraining loss at epoch {epoch}"),
                });
            }
            let grads = g.backward(loss)?;
            adamw_step(&mut model.params, &grads.into_named(), &mut opt, pretrain.lr, 0.0)?;
        }
    }
    Ok(model)
}

/// Mean per-token perplexity of the sequences under the model.
pub fn perplexity(model: &PolicyModel, sequences: &[Vec<u32>]) -> Result<f64, KarmaError> {
    let mut total_lp = 0.0f64;
    let mut count = 0usize;
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        for lp in model.sequence_logprobs(&seq[..1], &seq[1..])? {
            total_lp += lp as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(KarmaError::TooSmall {
            detail: "no scorable tokens".to_string(),
        });
    }
    Ok((-total_lp / count as f64).exp())
}

pub fn save_policy_model(
    model: &PolicyModel,
    cfg: &PolicyConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<(), KarmaError> {
    krma::save_to_path(&model.params, path)?;
    let header = crate::reward::ModelHeader {
        kind: "policy".to_string(),
        mode: None,
        vocab_checksum: vocab.checksum(),
        config: serde_json::to_value(cfg)?,
    };
    std::fs::write(
        crate::reward::header_path(path),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

pub fn load_policy_model(path: &Path, vocab: &Vocabulary) -> Result<PolicyModel, KarmaError> {
    let header: crate::reward::ModelHeader =
        serde_json::from_str(&std::fs::read_to_string(crate::reward::header_path(path))?)?;
    if header.kind != "policy" {
        return Err(krma::CheckpointError::Incompatible {
            detail: format!("expected a policy checkpoint, found `{}`", header.kind),
        }
        .into());
    }
    if header.vocab_checksum != vocab.checksum() {
        return Err(krma::CheckpointError::Incompatible {
            detail: "vocabulary checksum does not match the checkpoint".to_string(),
        }
        .into());
    }
    let params = krma::load_from_path(path)?;
    policy_from_params(params, vocab.size())
}

pub(crate) fn policy_from_params(params: ParamStore, vocab_size: usize) -> Result<PolicyModel, KarmaError> {
    let emb_dims = params.get("token_emb")?.dims().to_vec();
    let w1_dims = params.get("ff.w1")?.dims().to_vec();
    if emb_dims[0] != vocab_size {
        return Err(KarmaError::VocabMismatch {
            detail: format!(
                "checkpoint embeds {} tokens, vocabulary has {vocab_size}",
                emb_dims[0]
            ),
        });
    }
    let embed_dim = emb_dims[1];
    Ok(PolicyModel {
        context_window: w1_dims[0] / embed_dim,
        embed_dim,
        hidden_dim: w1_dims[1],
        vocab_size,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig {
            context_window: 3,
            embed_dim: 8,
            hidden_dim: 16,
            max_response_len: 12,
            temperature: 1.0,
            seed: 21,
        }
    }

    #[test]
    fn untrained_model_is_uniform() {
        let cfg = small_cfg();
        let v = 11usize;
        let model = PolicyModel::init(&cfg, v);
        let lp = model.sequence_logprobs(&[4], &[5, 6]).unwrap();
        for x in lp {
            assert!((x - (-(v as f32).ln())).abs() < 1e-6, "{x}");
        }
    }

    #[test]
    fn distributions_sum_to_one() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 17);
        let logits = model.logits_at(&[1, 2, 3, 4]);
        let mut probs = vec![0.0; logits.len()];
        kernels::softmax_row(&logits, &mut probs);
        let s: f32 = probs.iter().sum();
        assert!((s - 1.0).abs() <= 1e-5);
        assert!(probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn greedy_sampling_is_argmax() {
        let mut cfg = small_cfg();
        cfg.temperature = 0.0;
        cfg.max_response_len = 5;
        let model = PolicyModel::init(&cfg, 9);
        let (tokens, _) = model.sample(&[1, 2], &cfg, 77).unwrap();
        assert!(!tokens.is_empty());
        let mut history = vec![1u32, 2];
        for &t in &tokens {
            let logits = model.logits_at(&history);
            assert_eq!(t as usize, argmax(&logits));
            history.push(t);
        }
    }

    #[test]
    fn fixed_seed_reproduces_tokens() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 9);
        let a = model.sample(&[1, 2, 3], &cfg, 123).unwrap();
        let b = model.sample(&[1, 2, 3], &cfg, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recorded_logprobs_match_scoring_path() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 13);
        for seed in 0..20 {
            let (tokens, lps) = model.sample(&[5, 6], &cfg, seed).unwrap();
            let rescored = model.sequence_logprobs(&[5, 6], &tokens).unwrap();
            for (a, b) in lps.iter().zip(rescored.iter()) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn logprob_additivity() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 13);
        let response = [1u32, 2, 3, 4];
        let lps = model.sequence_logprobs(&[0], &response).unwrap();
        let total: f32 = lps.iter().sum();
        // prefix + suffix scored separately stitch to the same total
        let first = model.sequence_logprobs(&[0], &response[..2]).unwrap();
        let second = model.sequence_logprobs(&[0, 1, 2], &response[2..]).unwrap();
        let stitched: f32 = first.iter().chain(second.iter()).sum();
        assert!((total - stitched).abs() <= 1e-5);
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 9);
        assert!(matches!(
            model.sequence_logprobs(&[1], &[9]).unwrap_err(),
            KarmaError::OutOfVocab { id: 9, size: 9 }
        ));
    }

    #[test]
    fn graph_ce_matches_plain_logprobs() {
        let cfg = small_cfg();
        let model = PolicyModel::init(&cfg, 13);
        let prompt = [1u32, 2, 3];
        let response = [4u32, 5, 3, EOS_ID];
        let plain = model.sequence_logprobs(&prompt, &response).unwrap();

        let mut g = Graph::new();
        let handles = model.register_params(&mut g).unwrap();
        let ce = model
            .sequence_ce_graph(&mut g, &handles, &prompt, &response)
            .unwrap();
        let ce_vals = g.value(ce).data();
        for (lp, ce) in plain.iter().zip(ce_vals.iter()) {
            assert!((lp + ce).abs() <= 1e-5, "lp={lp} ce={ce}");
        }
    }

    #[test]
    fn repeated_sentence_reaches_unit_perplexity() {
        // one sentence, 50 epochs: the head should memorize it
        let seqs: Vec<Vec<u32>> = vec![vec![ROLE_CANDIDATE_ID, 8, 9, 10, 11, 12, EOS_ID]; 8];
        let cfg = small_cfg();
        let pt = PretrainConfig {
            lr: 1e-2,
            epochs: 50,
            batch_size: 4,
        };
        let model = pretrain_reference(&seqs, &cfg, &pt, 16).unwrap();
        let ppl = perplexity(&model, &seqs).unwrap();
        assert!(ppl <= 1.1, "perplexity {ppl}");
    }

    #[test]
    fn zero_lr_pretraining_changes_nothing() {
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4], vec![2, 3, 4, 5]];
        let cfg = small_cfg();
        let pt = PretrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
        };
        let init = PolicyModel::init(&cfg, 9);
        let trained = pretrain_reference(&seqs, &cfg, &pt, 9).unwrap();
        assert_eq!(init, trained);
    }

    #[test]
    fn same_seed_pretraining_is_bit_identical() {
        let seqs: Vec<Vec<u32>> = (0..10)
            .map(|i| vec![ROLE_CANDIDATE_ID, 4 + (i % 5) as u32, 5, 6 + (i % 3) as u32, EOS_ID])
            .collect();
        let cfg = small_cfg();
        let pt = PretrainConfig::default();
        let a = pretrain_reference(&seqs, &cfg, &pt, 12).unwrap();
        let b = pretrain_reference(&seqs, &cfg, &pt, 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(["alpha beta gamma delta"].into_iter(), 8).unwrap();
        let cfg = PolicyConfig {
            embed_dim: 8,
            hidden_dim: 16,
            ..PolicyConfig::default()
        };
        let model = PolicyModel::init(&cfg, vocab.size());
        let path = dir.path().join("policy.krma");
        save_policy_model(&model, &cfg, &vocab, &path).unwrap();
        let loaded = load_policy_model(&path, &vocab).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.context_window(), cfg.context_window);
    }
}
