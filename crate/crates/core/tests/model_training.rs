mod common;

use pwguess::corpus::{Corpus, FilterPolicy};
use pwguess::mc_estimator::SampleStatus;
use pwguess::model::{checkpoint, DecoderWeights, ModelConfig};
use pwguess::training::{cross_entropy, finetune, finetune_checkpoint, pretrain, TrainingConfig};
use pwguess::Error;

const FOUR: [(&str, usize); 4] = [("aabbcc", 400), ("abcabc", 300), ("ccbbaa", 200), ("bcabca", 100)];

fn four_string_corpus() -> Corpus {
    let pws = FOUR
        .iter()
        .flat_map(|&(s, n)| std::iter::repeat_n(s.as_bytes().to_vec(), n));
    Corpus::from_passwords(pws, "four", FilterPolicy::default()).unwrap().0
}

fn four_string_model() -> DecoderWeights<f32> {
    let tc = TrainingConfig {
        epochs: 30,
        batch_size: 32,
        learning_rate: 3e-3,
        seed: 3,
        ..TrainingConfig::pretrain()
    };
    let cfg = ModelConfig {
        attention_dropout: 0.0,
        ..ModelConfig::toy()
    };
    pretrain(&cfg, &four_string_corpus(), &tc).unwrap().0
}

#[test]
fn converged_toy_model_matches_training_frequencies() {
    let w = four_string_model();
    let mut tv = 0.0;
    let mut covered = 0.0;
    for &(s, n) in &FOUR {
        let p = w.log_prob(s.as_bytes()).unwrap().exp();
        let target = n as f64 / 1000.0;
        assert!((p - target).abs() <= 0.02, "{s}: model {p:.4} vs empirical {target}");
        tv += (p - target).abs();
        covered += p;
    }
    tv = 0.5 * (tv + (1.0 - covered));
    assert!(tv < 0.05, "total variation {tv}");

    let n = 100_000;
    let samples = w.sample(n, 9).unwrap();
    assert_eq!(samples[..1000], w.sample(1000, 9).unwrap()[..]);
    let mut counts = std::collections::HashMap::new();
    for s in samples.iter().filter(|s| s.status == SampleStatus::Complete) {
        *counts.entry(s.password.clone()).or_insert(0usize) += 1;
    }
    let mut top: Vec<(Vec<u8>, usize)> = counts.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (pw, c) in top.iter().take(10) {
        let p = w.log_prob(pw).unwrap().exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = *c as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * se.max(1.0 / n as f64), "{:?}: {freq} vs {p}", String::from_utf8_lossy(pw));
    }
}

#[test]
fn frequent_password_outscores_its_neighbour() {
    let mut pws = common::mixture(2000, 0.0, 4);
    pws.extend(std::iter::repeat_n("q1w2e3".to_string(), 300));
    let tc = TrainingConfig {
        epochs: 3,
        batch_size: 64,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainingConfig::pretrain()
    };
    let (w, _) = pretrain(&ModelConfig::toy(), &common::corpus(pws, "q"), &tc).unwrap();
    assert!(w.log_prob(b"q1w2e3").unwrap() > w.log_prob(b"q1w2e7").unwrap());
}

#[test]
fn memorization_loss_is_non_increasing_after_epoch_two() {
    let data = common::corpus(vec!["letmein99".into(); 512], "single");
    let tc = TrainingConfig {
        batch_size: 64,
        learning_rate: 1e-2,
        seed: 6,
        ..TrainingConfig::pretrain()
    };
    let (_, report) = pretrain(&ModelConfig::toy(), &data, &tc).unwrap();
    assert_eq!(report.epoch_losses.len(), 10);
    for w in report.epoch_losses.windows(2).skip(1) {
        assert!(w[1] <= w[0], "{:?}", report.epoch_losses);
    }
}

#[test]
fn finetuning_with_vanishing_rate_is_a_no_op() {
    let data = common::corpus(common::mixture(600, 0.1, 7), "mix");
    let heldout = common::corpus(common::mixture(200, 0.1, 8), "heldout");
    let tc = TrainingConfig {
        epochs: 1,
        batch_size: 64,
        seed: 7,
        ..TrainingConfig::pretrain()
    };
    let (base, _) = pretrain(&ModelConfig::toy(), &data, &tc).unwrap();
    let ft = TrainingConfig {
        learning_rate: 1e-12,
        epochs: 1,
        batch_size: 64,
        ..TrainingConfig::finetune()
    };
    let (tuned, report) = finetune(base.clone(), &data, &ft, Some(&heldout)).unwrap();
    let (before, after) = (report.eval_before.unwrap(), report.eval_after.unwrap());
    assert!((before - after).abs() <= 1e-6, "{before} vs {after}");
    assert_eq!(before, cross_entropy(&base, &heldout).unwrap());
    assert_eq!(tuned.config(), base.config());
}

#[test]
fn finetune_from_checkpoint_checks_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let w = DecoderWeights::<f32>::init(ModelConfig::toy(), 1).unwrap();
    checkpoint::save(&w, &path).unwrap();
    let data = common::corpus(common::mixture(8, 0.5, 9), "ft");
    let ft = TrainingConfig {
        epochs: 1,
        batch_size: 4,
        ..TrainingConfig::finetune()
    };
    let (tuned, _) = finetune_checkpoint(&path, Some(&ModelConfig::toy()), &data, &ft, None).unwrap();
    assert_eq!(tuned.config(), &ModelConfig::toy());
    let err = finetune_checkpoint(&path, Some(&ModelConfig::small()), &data, &ft, None).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)));
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let data = common::corpus(common::mixture(256, 0.2, 10), "det");
    let tc = TrainingConfig {
        epochs: 2,
        batch_size: 32,
        seed: 10,
        ..TrainingConfig::pretrain()
    };
    let (a, _) = pretrain(&ModelConfig::toy(), &data, &tc).unwrap();
    let (b, _) = pretrain(&ModelConfig::toy(), &data, &tc).unwrap();
    assert_eq!(checkpoint::to_bytes(&a).unwrap(), checkpoint::to_bytes(&b).unwrap());
}
