//! The reward model: a pooled-embedding encoder with a two-layer head that
//! scores how likely a candidate response is to be rewarding in context.
//!
//! The encoder mean-pools token plus role embeddings across every turn of
//! the serialized conversation; the head maps the pooled vector through
//! tanh to a single logit. Training is binary cross entropy with AdamW,
//! seeded shuffling, and early stopping on validation AUC.

mod metrics;

pub use metrics::{compute_auc, confusion_at_half, ConfusionCounts};

use crate::corpus::{ChatSequence, DatasetRecord, SerializationMode, Vocabulary};
use crate::tensor::checkpoint as krma;
use crate::tensor::{adamw_step, AdamWState, Graph, ParamStore, Tensor};
use crate::{derive_seed, KarmaError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const NUM_ROLES: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RMConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mode: SerializationMode,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl RMConfig {
    /// Published full-scale recipe values (lr 2e-5 is sized for a large
    /// encoder; see [`RMConfig::desk`] for something that moves at this
    /// model size).
    pub fn reference(mode: SerializationMode) -> Self {
        RMConfig {
            embed_dim: 64,
            hidden_dim: 128,
            mode,
            lr: 2e-5,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 20,
            patience: 3,
            seed: 0,
        }
    }

    /// Desk-scale defaults: same shape, a learning rate that converges in
    /// minutes on a CPU.
    pub fn desk(mode: SerializationMode) -> Self {
        RMConfig {
            lr: 5e-3,
            ..RMConfig::reference(mode)
        }
    }
}

#[derive(Clone, Debug)]
pub struct RewardModel {
    params: ParamStore,
    mode: SerializationMode,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
}

/// Sequence encoded for the reward model: token id + role-table index.
pub type EncodedSequence = Vec<(u32, usize)>;

/// Flattens a chat sequence into (token, role) pairs. Empty text encodes
/// as a single `<unk>` so pooling always has at least one row.
pub fn encode_sequence(vocab: &Vocabulary, seq: &ChatSequence) -> EncodedSequence {
    let mut out = Vec::new();
    for turn in &seq.turns {
        let role = Vocabulary::role_index(turn.role);
        for id in vocab.encode(&turn.text) {
            out.push((id, role));
        }
    }
    if out.is_empty() {
        out.push((crate::corpus::UNK_ID, 0));
    }
    out
}

impl RewardModel {
    /// Seeded random initialization. The head's output layer starts at
    /// zero, so an untrained model scores everything exactly 0.5.
    pub fn init(cfg: &RMConfig, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 0));
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let mut params = ParamStore::new();
        params.insert("token_emb", Tensor::uniform(vec![vocab_size, e], 0.1, &mut rng));
        params.insert("role_emb", Tensor::uniform(vec![NUM_ROLES, e], 0.1, &mut rng));
        let w1_scale = (6.0 / (e + h) as f32).sqrt();
        params.insert("head.w1", Tensor::uniform(vec![e, h], w1_scale, &mut rng));
        params.insert("head.b1", Tensor::zeros(vec![1, h]));
        params.insert("head.w2", Tensor::zeros(vec![h, 1]));
        params.insert("head.b2", Tensor::zeros(vec![1, 1]));
        RewardModel {
            params,
            mode: cfg.mode,
            vocab_size,
            embed_dim: e,
            hidden_dim: h,
        }
    }

    /// All-zero weights; doubles as a constant-0.5 reward for tests.
    pub fn zero_init(cfg: &RMConfig, vocab_size: usize) -> Self {
        let mut model = RewardModel::init(cfg, vocab_size);
        for name in ["token_emb", "role_emb", "head.w1"] {
            let t = model.params.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model
    }

    pub fn mode(&self) -> SerializationMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_mode(&self, seq: &ChatSequence) -> Result<(), KarmaError> {
        match (self.mode, seq.has_meta()) {
            (SerializationMode::Generalized, true) => Err(KarmaError::ModeMismatch {
                detail: "meta turn fed to a generalized-mode model".to_string(),
            }),
            (SerializationMode::Conditioned, false) => Err(KarmaError::ModeMismatch {
                detail: "conditioned-mode model needs a leading meta turn".to_string(),
            }),
            _ => Ok(()),
        }
    }

    /// Probability in (0, 1) that the candidate response is rewarding.
    pub fn forward(&self, seq: &ChatSequence, vocab: &Vocabulary) -> Result<f32, KarmaError> {
        self.check_mode(seq)?;
        Ok(self.forward_tokens(&encode_sequence(vocab, seq)))
    }

    /// Mean over tokens of (token embedding + role embedding).
    pub fn pooled_encoding(&self, tokens: &EncodedSequence) -> Vec<f32> {
        let e = self.embed_dim;
        let tok = self.params.get("token_emb").unwrap().data();
        let role = self.params.get("role_emb").unwrap().data();
        let mut pooled = vec![0.0f32; e];
        for &(t, r) in tokens {
            let trow = &tok[t as usize * e..(t as usize + 1) * e];
            let rrow = &role[r * e..(r + 1) * e];
            for ((p, &a), &b) in pooled.iter_mut().zip(trow).zip(rrow) {
                *p += a + b;
            }
        }
        let n = tokens.len() as f32;
        pooled.iter_mut().for_each(|p| *p /= n);
        pooled
    }

    /// Scoring path on pre-encoded tokens (no graph construction).
    pub fn forward_tokens(&self, tokens: &EncodedSequence) -> f32 {
        use crate::tensor::kernels;
        let (e, h) = (self.embed_dim, self.hidden_dim);
        let pooled = self.pooled_encoding(tokens);
        let w1 = self.params.get("head.w1").unwrap().data();
        let b1 = self.params.get("head.b1").unwrap().data();
        let w2 = self.params.get("head.w2").unwrap().data();
        let b2 = self.params.get("head.b2").unwrap().data();

        let mut hidden = kernels::matmul(&pooled, w1, 1, e, h);
        for (v, &b) in hidden.iter_mut().zip(b1) {
            *v = (*v + b).tanh();
        }
        let logit = kernels::matmul(&hidden, w2, 1, h, 1)[0] + b2[0];
        kernels::stable_sigmoid(logit).clamp(1e-7, 1.0 - 1e-7)
    }
}

/// One epoch of the training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

struct EncodedExample {
    tokens: EncodedSequence,
    label: u8,
}

fn encode_records(
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    mode: SerializationMode,
) -> Result<Vec<EncodedExample>, KarmaError> {
    records
        .iter()
        .map(|rec| {
            let seq = rec.sequence();
            match (mode, seq.has_meta()) {
                (SerializationMode::Generalized, true) => Err(KarmaError::ModeMismatch {
                    detail: format!("instance {} carries a meta turn", rec.instance_id),
                }),
                (SerializationMode::Conditioned, false) => Err(KarmaError::ModeMismatch {
                    detail: format!("instance {} is missing its meta turn", rec.instance_id),
                }),
                _ => Ok(EncodedExample {
                    tokens: encode_sequence(vocab, &seq),
                    label: rec.label,
                }),
            }
        })
        .collect()
}

fn has_both_classes(examples: &[EncodedExample]) -> bool {
    examples.iter().any(|e| e.label == 1) && examples.iter().any(|e| e.label == 0)
}

/// Mean binary cross entropy over one mini-batch, with gradients.
///
/// The scalar head logit `z` becomes the two-class logit row `[0, z]`:
/// softmax of that row is `[1-sigmoid(z), sigmoid(z)]`, so categorical
/// cross entropy on it equals BCE of the sigmoid.
fn batch_loss(
    model: &RewardModel,
    batch: &[&EncodedExample],
) -> Result<(f32, BTreeMap<String, Tensor>), KarmaError> {
    let mut g = Graph::new();
    let tok = g.param("token_emb", model.params.get("token_emb")?.clone());
    let role = g.param("role_emb", model.params.get("role_emb")?.clone());
    let w1 = g.param("head.w1", model.params.get("head.w1")?.clone());
    let b1 = g.param("head.b1", model.params.get("head.b1")?.clone());
    let w2 = g.param("head.w2", model.params.get("head.w2")?.clone());
    let b2 = g.param("head.b2", model.params.get("head.b2")?.clone());

    let mut pooled_rows = Vec::with_capacity(batch.len());
    for ex in batch {
        let token_ids: Vec<usize> = ex.tokens.iter().map(|&(t, _)| t as usize).collect();
        let role_ids: Vec<usize> = ex.tokens.iter().map(|&(_, r)| r).collect();
        let te = g.embedding_gather(tok, &token_ids)?;
        let re = g.embedding_gather(role, &role_ids)?;
        let summed = g.add(te, re)?;
        pooled_rows.push(g.mean_pool(summed, 0)?);
    }
    let pooled = g.concat(&pooled_rows, 0)?;
    let pre = g.matmul(pooled, w1)?;
    let pre = g.add(pre, b1)?;
    let hidden = g.tanh(pre)?;
    let logits = g.matmul(hidden, w2)?;
    let logits = g.add(logits, b2)?;

    let zeros = g.constant(Tensor::zeros(vec![batch.len(), 1]));
    let two_class = g.concat(&[zeros, logits], 1)?;
    let targets: Vec<usize> = batch.iter().map(|ex| ex.label as usize).collect();
    let ce = g.cross_entropy_with_logits(two_class, &targets)?;
    let loss = g.mean_pool(ce, 0)?;

    let loss_value = g.value(loss).item()?;
    let grads = g.backward(loss)?;
    Ok((loss_value, grads.into_named()))
}

/// Trains a reward model, returning the checkpoint with the best
/// validation AUC and the per-epoch history.
pub fn rm_train(
    train: &[DatasetRecord],
    valid: &[DatasetRecord],
    cfg: &RMConfig,
    vocab: &Vocabulary,
) -> Result<(RewardModel, Vec<EpochStats>), KarmaError> {
    let train_ex = encode_records(train, vocab, cfg.mode)?;
    let valid_ex = encode_records(valid, vocab, cfg.mode)?;
    if train_ex.is_empty() || valid_ex.is_empty() {
        return Err(KarmaError::TooSmall {
            detail: "empty train or validation set".to_string(),
        });
    }
    if !has_both_classes(&train_ex) || !has_both_classes(&valid_ex) {
        return Err(KarmaError::DegenerateLabels);
    }

    let mut model = RewardModel::init(cfg, vocab.size());
    let mut opt = AdamWState::new();
    let mut history = Vec::new();
    let mut best_params = model.params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;

    let mut indices: Vec<usize> = (0..train_ex.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        indices.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&EncodedExample> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let (loss, grads) = batch_loss(&model, &batch)?;
            if !loss.is_finite() {
                return Err(KarmaError::AbortTraining {
                    detail: format!("non-finite loss at epoch {epoch}"),
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            adamw_step(&mut model.params, &grads, &mut opt, cfg.lr, cfg.weight_decay)?;
        }

        let val_auc = validation_auc(&model, &valid_ex)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64,
            val_auc,
        });

        if val_auc > best_auc {
            best_auc = val_auc;
            best_params = model.params.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    model.params = best_params;
    Ok((model, history))
}

fn validation_auc(model: &RewardModel, examples: &[EncodedExample]) -> Result<f64, KarmaError> {
    let scores: Vec<f64> = examples
        .iter()
        .map(|ex| model.forward_tokens(&ex.tokens) as f64)
        .collect();
    let labels: Vec<u8> = examples.iter().map(|ex| ex.label).collect();
    compute_auc(&scores, &labels)
}

/// Evaluation record: accuracy and F1 at the 0.5 threshold; AUC is null
/// when the test set has a single class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub n: usize,
    pub class_balance: f64,
}

pub fn rm_evaluate(
    model: &RewardModel,
    test: &[DatasetRecord],
    vocab: &Vocabulary,
) -> Result<EvalReport, KarmaError> {
    if test.is_empty() {
        return Err(KarmaError::TooSmall {
            detail: "empty test set".to_string(),
        });
    }
    let examples = encode_records(test, vocab, model.mode)?;
    let scores: Vec<f64> = examples
        .iter()
        .map(|ex| model.forward_tokens(&ex.tokens) as f64)
        .collect();
    let labels: Vec<u8> = examples.iter().map(|ex| ex.label).collect();
    let confusion = confusion_at_half(&scores, &labels);
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        auc: compute_auc(&scores, &labels).ok(),
        n: labels.len(),
        class_balance: positives as f64 / labels.len() as f64,
    })
}

/// Sidecar header written next to a model checkpoint: binds the weights to
/// a serialization mode and a vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub mode: Option<SerializationMode>,
    pub vocab_checksum: u64,
    pub config: serde_json::Value,
}

pub fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

pub fn save_reward_model(
    model: &RewardModel,
    cfg: &RMConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<(), KarmaError> {
    krma::save_to_path(&model.params, path)?;
    let header = ModelHeader {
        kind: "reward".to_string(),
        mode: Some(model.mode),
        vocab_checksum: vocab.checksum(),
        config: serde_json::to_value(cfg)?,
    };
    std::fs::write(header_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_reward_model(path: &Path, vocab: &Vocabulary) -> Result<RewardModel, KarmaError> {
    let header: ModelHeader = serde_json::from_str(&std::fs::read_to_string(header_path(path))?)?;
    if header.kind != "reward" {
        return Err(krma::CheckpointError::Incompatible {
            detail: format!("expected a reward checkpoint, found `{}`", header.kind),
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
    let token_dims = params.get("token_emb")?.dims().to_vec();
    let hidden = params.get("head.w1")?.dims()[1];
    if token_dims[0] != vocab.size() {
        return Err(KarmaError::VocabMismatch {
            detail: format!(
                "checkpoint embeds {} tokens, vocabulary has {}",
                token_dims[0],
                vocab.size()
            ),
        });
    }
    Ok(RewardModel {
        params,
        mode: header.mode.ok_or(KarmaError::ModeMismatch {
            detail: "reward checkpoint header lacks a mode".to_string(),
        })?,
        vocab_size: token_dims[0],
        embed_dim: token_dims[1],
        hidden_dim: hidden,
    })
}
