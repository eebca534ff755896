//! Scratch calibration harness (dev aid, run with --release).

use karma::corpus::synth::{generate_synthetic_corpus, SynthConfig};
use karma::corpus::{
    build_threads, build_vocab, extract_instances, split_dataset, to_records, CorpusConfig,
    SerializationMode,
};
use karma::evalstat::shortcut_experiment;
use karma::policy::{pretrain_reference, PolicyConfig, PretrainConfig};
use karma::ppo::{train_ppo, PPOConfig, PPORun, PromptSource};
use karma::reward::{rm_evaluate, rm_train, RMConfig};
use std::time::Instant;

fn rm_learnability() {
    let t0 = Instant::now();
    let synth = SynthConfig {
        n_posts: 1700,
        replies_per_post: 6,
        n_topics: 8,
        metadata_label_correlation: 0.9,
        noise: 14,
        seed: 1234,
    };
    let corpus = generate_synthetic_corpus(&synth).unwrap();
    let (trees, _) = build_threads(&corpus.posts, &corpus.comments).unwrap();
    let cfg = CorpusConfig::default();
    let mut instances = Vec::new();
    for tree in &trees {
        instances.extend(extract_instances(tree, &cfg, SerializationMode::Generalized));
    }
    println!("instances: {}", instances.len());
    let (fit_all, test) = split_dataset(&instances, &cfg, 11).unwrap();
    let (fit, valid) = split_dataset(&fit_all, &cfg, 12).unwrap();
    let train_recs = to_records(&fit, SerializationMode::Generalized).unwrap();
    let valid_recs = to_records(&valid, SerializationMode::Generalized).unwrap();
    let test_recs = to_records(&test, SerializationMode::Generalized).unwrap();
    let seqs: Vec<_> = train_recs.iter().map(|r| r.sequence()).collect();
    let vocab = build_vocab(&seqs, cfg.vocab_cap).unwrap();
    println!("vocab: {}", vocab.size());

    let rm_cfg = RMConfig {
        seed: 5,
        ..RMConfig::desk(SerializationMode::Generalized)
    };
    let (model, history) = rm_train(&train_recs, &valid_recs, &rm_cfg, &vocab).unwrap();
    for h in &history {
        println!("epoch {} loss {:.4} val_auc {:.4}", h.epoch, h.train_loss, h.val_auc);
    }
    let report = rm_evaluate(&model, &test_recs, &vocab).unwrap();
    println!(
        "RM learnability: test auc {:?} acc {:.3} f1 {:.3} in {:?}",
        report.auc,
        report.accuracy,
        report.f1,
        t0.elapsed()
    );
}

fn shortcut() {
    let t0 = Instant::now();
    let args: Vec<String> = std::env::args().collect();
    let n_posts: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let noise: u32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(14);
    let synth = SynthConfig {
        n_posts,
        replies_per_post: 6,
        n_topics: 8,
        metadata_label_correlation: 0.9,
        noise,
        seed: 0,
    };
    let rm_cfg = RMConfig {
        max_epochs: 15,
        ..RMConfig::desk(SerializationMode::Generalized)
    };
    let rho: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let report = shortcut_experiment(rho, &[101, 202, 303, 404, 505], &rm_cfg, &synth).unwrap();
    for s in &report.per_seed {
        println!(
            "seed {}: in gen {:.3} cond {:.3} | transfer gen {:.3} cond {:.3}",
            s.seed,
            s.in_domain.auc_generalized,
            s.in_domain.auc_conditioned,
            s.transfer.auc_generalized,
            s.transfer.auc_conditioned
        );
    }
    println!(
        "deltas: in-domain +{:.4}, transfer +{:.4}, reversals {}/{} in {:?}",
        report.deltas.in_domain_conditioned_minus_generalized,
        report.deltas.transfer_generalized_minus_conditioned,
        report.deltas.transfer_reversals,
        report.deltas.n_seeds,
        t0.elapsed()
    );
}

fn ppo_ascent(seed: u64, kl: f32, steps: usize) {
    let t0 = Instant::now();
    let synth = SynthConfig {
        n_posts: 400,
        replies_per_post: 6,
        n_topics: 8,
        metadata_label_correlation: 0.9,
        noise: 14,
        seed: 77,
    };
    let corpus = generate_synthetic_corpus(&synth).unwrap();
    let (trees, _) = build_threads(&corpus.posts, &corpus.comments).unwrap();
    let cfg = CorpusConfig::default();
    let mut instances = Vec::new();
    for tree in &trees {
        instances.extend(extract_instances(tree, &cfg, SerializationMode::Generalized));
    }
    let (fit_all, _test) = split_dataset(&instances, &cfg, 11).unwrap();
    let (fit, valid) = split_dataset(&fit_all, &cfg, 12).unwrap();
    let train_recs = to_records(&fit, SerializationMode::Generalized).unwrap();
    let valid_recs = to_records(&valid, SerializationMode::Generalized).unwrap();
    let seqs: Vec<_> = train_recs.iter().map(|r| r.sequence()).collect();
    let vocab = build_vocab(&seqs, cfg.vocab_cap).unwrap();

    let rm_cfg = RMConfig {
        seed: 5,
        max_epochs: 12,
        patience: 12,
        ..RMConfig::desk(SerializationMode::Generalized)
    };
    let (rm, _) = rm_train(&train_recs, &valid_recs, &rm_cfg, &vocab).unwrap();

    let pcfg = PolicyConfig {
        embed_dim: 32,
        hidden_dim: 64,
        max_response_len: 8,
        seed,
        ..PolicyConfig::default()
    };
    let pretrain_seqs: Vec<Vec<u32>> = train_recs
        .iter()
        .filter_map(|r| r.sequence().candidate_text().map(|t| karma::policy::response_training_sequence(&vocab, t)))
        .collect();
    let reference = pretrain_reference(
        &pretrain_seqs,
        &pcfg,
        &PretrainConfig {
            epochs: 4,
            ..PretrainConfig::default()
        },
        vocab.size(),
    )
    .unwrap();
    println!("pretrain done at {:?}", t0.elapsed());

    let source = PromptSource::benign(200, 8, 42, &vocab).unwrap();
    let lr: f32 = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let ppo_cfg = PPOConfig {
        total_steps: steps,
        kl_coef: kl,
        seed,
        lr,
        ..PPOConfig::default()
    };
    let mut run = PPORun::fresh(reference.clone());
    let stats = train_ppo(
        &mut run,
        &reference,
        &rm,
        &source,
        &pcfg,
        &ppo_cfg,
        |s| {
            if s.step % 5 == 0 {
                println!(
                    "step {} reward {:.3} kl {:.4} clip {:.3} baseline {:.3}",
                    s.step, s.mean_rm_reward, s.mean_kl_to_ref, s.clip_fraction, s.baseline_value
                );
            }
        },
        |_| Ok(()),
    )
    .unwrap();

    let tenth = (stats.len() / 10).max(1);
    let first: f64 = stats[..tenth].iter().map(|s| s.mean_rm_reward).sum::<f64>() / tenth as f64;
    let last: f64 = stats[stats.len() - tenth..]
        .iter()
        .map(|s| s.mean_rm_reward)
        .sum::<f64>()
        / tenth as f64;
    let final_kl = stats[stats.len() - tenth..]
        .iter()
        .map(|s| s.mean_kl_to_ref)
        .sum::<f64>()
        / tenth as f64;
    println!(
        "PPO seed {seed} kl {kl}: first10% {first:.3} last10% {last:.3} delta {:.3} final_kl {final_kl:.4} in {:?}",
        last - first,
        t0.elapsed()
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("rm") => rm_learnability(),
        Some("shortcut") => shortcut(),
        Some("ppo") => {
            let seed = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1);
            let kl = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.5);
            let steps = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(40);
            ppo_ascent(seed, kl, steps);
        }
        _ => {
            rm_learnability();
            shortcut();
            ppo_ascent(1, 0.5, 40);
        }
    }
}
