use std::fs;
use std::path::Path;

use declutr_core::corpus::{Document, DocumentStore, Vocab};
use declutr_core::encoder::{load_checkpoint, EncoderConfig};
use declutr_core::sampler::SamplerConfig;
use declutr_core::trainer::{epoch_checkpoint_name, read_metrics, Objective, TrainConfig, Trainer};
use declutr_core::Error;

fn vocab() -> Vocab {
    Vocab::from_tokens((0..24).map(|i| format!("w{i}"))).unwrap()
}

fn store(vocab: &Vocab, docs: usize) -> DocumentStore {
    let documents = (0..docs)
        .map(|k| {
            let tokens = (0..40).map(|t| 3 + ((t * 7 + k * 11 + t / 3) % 24) as u32).collect();
            Document::new(format!("doc{k}"), tokens)
        })
        .collect();
    DocumentStore::from_documents(documents, vocab, 0).unwrap()
}

fn trainer<'a>(store: &'a DocumentStore, vocab: &Vocab, train: TrainConfig) -> Trainer<'a> {
    Trainer {
        store,
        vocab_fingerprint: vocab.fingerprint(),
        sampler: SamplerConfig {
            min_span_len: 3,
            max_span_len: 6,
            ..SamplerConfig::default()
        },
        encoder: EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            max_positions: 6,
            vocab_size: vocab.len(),
            dropout: 0.0,
        },
        train,
    }
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        lr_max: 1e-3,
        seed: 17,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn metrics_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn thirty_two_docs_batch_sixteen_is_two_steps() {
    let v = vocab();
    let s = store(&v, 32);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer(&s, &v, TrainConfig { batch_size: 16, ..config(1) }).run(dir.path(), None).unwrap();
    assert_eq!(out.total_steps, 2);
    assert_eq!(read_metrics(&out.metrics_path).unwrap().len(), 2);
    assert!(dir.path().join("final.ckpt").exists());
}

#[test]
fn trailing_partial_batch_is_kept() {
    let v = vocab();
    let s = store(&v, 10);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer(&s, &v, config(1)).run(dir.path(), None).unwrap();
    assert_eq!(out.total_steps, 3);
    let spans: Vec<usize> = out.records.iter().map(|r| r.spans).collect();
    // 2 anchors and 2 positives per anchor: 6 spans per document
    assert_eq!(spans.iter().sum::<usize>(), 10 * 6);
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let v = vocab();
    let s = store(&v, 12);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    trainer(&s, &v, config(2)).run(a.path(), None).unwrap();
    trainer(&s, &v, config(2)).run(b.path(), None).unwrap();
    assert_eq!(
        fs::read(a.path().join("metrics.jsonl")).unwrap(),
        fs::read(b.path().join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(a.path().join("final.ckpt")).unwrap(),
        fs::read(b.path().join("final.ckpt")).unwrap()
    );
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let v = vocab();
    let s = store(&v, 12);
    let full = tempfile::tempdir().unwrap();
    let outcome = trainer(&s, &v, config(3)).run(full.path(), None).unwrap();
    let all = metrics_lines(&outcome.metrics_path);
    assert_eq!(all.len(), 9);

    let ckpt = load_checkpoint(&full.path().join(epoch_checkpoint_name(1))).unwrap();
    assert_eq!(ckpt.step, 3);
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = trainer(&s, &v, config(3)).run(resumed_dir.path(), Some(ckpt)).unwrap();
    assert_eq!(metrics_lines(&resumed.metrics_path), all[3..]);
    assert_eq!(
        fs::read(resumed_dir.path().join("final.ckpt")).unwrap(),
        fs::read(full.path().join("final.ckpt")).unwrap()
    );
}

#[test]
fn resume_rejects_other_vocabulary_and_horizon() {
    let v = vocab();
    let s = store(&v, 8);
    let dir = tempfile::tempdir().unwrap();
    trainer(&s, &v, config(2)).run(dir.path(), None).unwrap();
    let ckpt = load_checkpoint(&dir.path().join(epoch_checkpoint_name(1))).unwrap();

    let mut t = trainer(&s, &v, config(2));
    t.vocab_fingerprint = "other".into();
    let other = tempfile::tempdir().unwrap();
    assert!(matches!(t.run(other.path(), Some(ckpt.clone())), Err(Error::FingerprintMismatch { .. })));

    let t = trainer(&s, &v, config(3));
    assert!(matches!(t.run(other.path(), Some(ckpt)), Err(Error::InvalidConfig(_))));
}

#[test]
fn logged_loss_is_exact_sum_and_norms_bounded() {
    let v = vocab();
    let s = store(&v, 12);
    for objective in [Objective::ContrastiveAndMlm, Objective::ContrastiveOnly, Objective::MlmOnly] {
        let dir = tempfile::tempdir().unwrap();
        let out = trainer(&s, &v, TrainConfig { objective, ..config(2) }).run(dir.path(), None).unwrap();
        for r in read_metrics(&out.metrics_path).unwrap() {
            assert_eq!(r.loss, r.loss_contrastive.unwrap_or(0.0) + r.loss_mlm.unwrap_or(0.0));
            assert_eq!(r.loss_contrastive.is_some(), objective.uses_contrastive());
            assert_eq!(r.loss_mlm.is_some(), objective.uses_mlm());
            assert!(r.grad_norm_rescaled <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn contrastive_only_leaves_mlm_bias_untouched() {
    let v = vocab();
    let s = store(&v, 8);
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(&s, &v, TrainConfig { objective: Objective::ContrastiveOnly, ..config(1) });
    let out = t.run(dir.path(), None).unwrap();
    // zero init and zero gradient; bias has no weight decay
    assert!(out.params.mlm_bias.iter().all(|&b| b == 0.0));
}

#[test]
fn always_rescale_pins_norm_to_one() {
    let v = vocab();
    let s = store(&v, 8);
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(&s, &v, TrainConfig { always_rescale: true, ..config(1) });
    for r in t.run(dir.path(), None).unwrap().records {
        assert!((r.grad_norm_rescaled - 1.0).abs() < 1e-12);
    }
}

#[test]
fn total_steps_override_sets_horizon() {
    let v = vocab();
    let s = store(&v, 8);
    let dir = tempfile::tempdir().unwrap();
    let out = trainer(&s, &v, TrainConfig { total_steps: Some(3), ..config(5) }).run(dir.path(), None).unwrap();
    assert_eq!((out.steps, out.total_steps), (3, 3));
    let last = out.records.last().unwrap();
    assert_eq!(last.step, 3);
}

#[test]
fn dropout_runs_are_seeded() {
    let v = vocab();
    let s = store(&v, 8);
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer(&s, &v, TrainConfig { seed, ..config(1) });
        t.encoder.dropout = 0.1;
        let out = t.run(dir.path(), None).unwrap();
        fs::read(out.metrics_path).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn invalid_config_is_rejected() {
    let v = vocab();
    let s = store(&v, 8);
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(&s, &v, TrainConfig { temperature: 0.0, ..config(1) });
    assert!(matches!(t.run(dir.path(), None), Err(Error::InvalidConfig(_))));
}
