use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::text::{BOS, EOS};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        vocab_size: 9,
        grid_h: 2,
        grid_w: 2,
        d_patch: 4,
        max_len: 7,
        use_patch_self_attention: true,
        patch_attn_layers: 1,
    }
}

fn data(seed: u64, nc: usize, nr: usize) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny();
    let mut patches = || {
        Mat::from_vec(
            cfg.num_patches(),
            cfg.d_patch,
            (0..cfg.num_patches() * cfg.d_patch)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    };
    let captions = (0..nc)
        .map(|i| CaptionExample {
            patches: patches(),
            tokens: TokenSequence(vec![BOS, 4 + i % 5, 4 + (i + 2) % 5, EOS]),
        })
        .collect();
    let replay = (0..nr)
        .map(|i| ReplayExample {
            patches: patches(),
            keyword: Keyword {
                surface: String::new(),
                subword_ids: vec![4 + i % 5, 5 + i % 4],
            },
        })
        .collect();
    TrainData { captions, replay }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 3,
        beam_width: 2,
        pseudo_max_len: 6,
        distill_temperature: 2.0,
        ..TrainConfig::default()
    }
}

fn no_val(_: &Model) -> Result<ValMetrics> {
    Ok(ValMetrics {
        generic_cider: 0.0,
        concept_rec: 0.0,
    })
}

#[test]
fn branch_absence_zeroes_losses() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let d = data(0, 3, 3);
    let mut t = Trainer::new(Model::init(tiny(), 2).unwrap(), Some(&teacher), cfg(), 3, 10).unwrap();
    let caps = [TrainItem::Caption(0), TrainItem::Caption(1)];
    let r = t.train_step(&caps, &d).unwrap();
    assert_eq!((r.bundle.l_kpred, r.bundle.l_distill), (0.0, 0.0));
    assert!(r.bundle.l_ce > 0.0);
    let reps = [TrainItem::Replay(0), TrainItem::Replay(2)];
    let r = t.train_step(&reps, &d).unwrap();
    assert_eq!(r.bundle.l_ce, 0.0);
    assert!(r.bundle.l_kpred > 0.0 && r.bundle.l_distill >= 0.0);
    assert_eq!(r.bundle.replay_samples, 2);
}

#[test]
fn zero_weights_reduce_to_caption_step() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let d = data(0, 3, 3);
    let c = TrainConfig {
        lambda_k: 0.0,
        lambda_d: 0.0,
        ..cfg()
    };
    let mut mixed = Trainer::new(Model::init(tiny(), 2).unwrap(), Some(&teacher), c, 3, 10).unwrap();
    let mut plain = Trainer::new(Model::init(tiny(), 2).unwrap(), None, c, 0, 10).unwrap();
    mixed
        .train_step(&[TrainItem::Caption(0), TrainItem::Replay(1), TrainItem::Caption(2)], &d)
        .unwrap();
    plain
        .train_step(&[TrainItem::Caption(0), TrainItem::Caption(2)], &d)
        .unwrap();
    assert_eq!(mixed.student().params().tensors(), plain.student().params().tensors());
}

#[test]
fn replay_without_teacher_is_refused() {
    let d = data(0, 1, 1);
    assert!(Trainer::new(Model::init(tiny(), 2).unwrap(), None, cfg(), 1, 4).is_err());
    let mut t = Trainer::new(Model::init(tiny(), 2).unwrap(), None, cfg(), 0, 4).unwrap();
    assert!(t.train_step(&[TrainItem::Replay(0)], &d).is_err());
    let frozen = Model::init(tiny(), 2).unwrap().clone_frozen();
    assert!(matches!(Trainer::new(frozen, None, cfg(), 0, 4), Err(Error::Frozen)));
}

#[test]
fn gradient_spot_check() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let student = Model::init(tiny(), 2).unwrap();
    let d = data(3, 2, 2);
    let c = TrainConfig {
        lambda_k: 0.7,
        lambda_d: 1.3,
        ..cfg()
    };
    let targets: Vec<Option<PseudoTarget>> = d
        .replay
        .iter()
        .map(|r| Some(pseudo_target(&teacher, &teacher, &r.patches, &c).unwrap()))
        .collect();
    let batch = [TrainItem::Caption(0), TrainItem::Replay(0), TrainItem::Caption(1), TrainItem::Replay(1)];
    let (_, grads) = loss_and_gradients(&student, &batch, &d, &targets, &c).unwrap();
    let loss = |m: &Model| loss_and_gradients(m, &batch, &d, &targets, &c).unwrap().0.l_total;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..25 {
        let pi = rng.random_range(0..student.params().len());
        let k = rng.random_range(0..student.params().tensors()[pi].data.len());
        let h = 1e-5;
        let mut plus = student.clone();
        plus.params_mut().unwrap().tensors_mut()[pi].data[k] += h;
        let mut minus = student.clone();
        minus.params_mut().unwrap().tensors_mut()[pi].data[k] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = grads.0[pi].data[k];
        assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "param {pi}[{k}]: {fd} vs {an}");
    }
}

#[test]
fn run_accounting_and_determinism() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let before = teacher.clone();
    let d = data(0, 7, 4);
    let c = cfg();
    let run = || run_training(Model::init(tiny(), 2).unwrap(), Some(&teacher), &d, &c, no_val, None).unwrap();
    let a = run();
    // 11 samples in batches of 3: 4 batches per epoch
    assert_eq!(a.log.len(), 8);
    assert!((a.final_lr - c.lr_min).abs() < 1e-15);
    assert!(a.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert_eq!(a.log[0].lr, c.lr_max);
    assert_eq!(a.checkpoints.len(), 2);
    let b = run();
    assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
    assert_eq!(a.final_model.to_bytes(), b.final_model.to_bytes());
    assert_eq!(teacher.to_bytes(), before.to_bytes());
}

#[test]
fn empty_replay_matches_plain_finetune() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let d = data(0, 5, 0);
    let c = cfg();
    let with = run_training(Model::init(tiny(), 2).unwrap(), Some(&teacher), &d, &c, no_val, None).unwrap();
    let without = run_training(Model::init(tiny(), 2).unwrap(), None, &d, &c, no_val, None).unwrap();
    assert_eq!(with.final_model.to_bytes(), without.final_model.to_bytes());
}

#[test]
fn student_pseudo_captions_refresh() {
    let teacher = Model::init(tiny(), 1).unwrap().clone_frozen();
    let d = data(0, 2, 2);
    let c = TrainConfig {
        pseudo_caption_source: PseudoSource::Student,
        pseudo_caption_method: DecodeMethod::Greedy,
        ..cfg()
    };
    let out = run_training(Model::init(tiny(), 2).unwrap(), Some(&teacher), &d, &c, no_val, None).unwrap();
    assert!(out.log.iter().all(|r| r.bundle.is_finite()));
}

#[test]
fn divergence_is_reported() {
    let d = data(0, 4, 0);
    let c = TrainConfig {
        lr_max: 1e300,
        lr_min: 1e300,
        optimizer: AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        ..cfg()
    };
    let err = run_training(Model::init(tiny(), 2).unwrap(), None, &d, &c, no_val, None).err().unwrap();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(err.exit_code(), 5);
}

#[test]
fn checkpoint_selection() {
    let meta = |step, rec, cider| CheckpointMeta {
        step,
        epoch: step,
        metrics: ValMetrics {
            generic_cider: cider,
            concept_rec: rec,
        },
        path: String::new(),
    };
    assert!(select_best_checkpoint(&[], SelectBy::Recognition).is_err());
    assert_eq!(select_best_checkpoint(&[meta(1, 0.2, 0.1)], SelectBy::Recognition).unwrap(), 0);
    let ms = [meta(1, 0.40, 1.0), meta(2, 0.55, 0.80), meta(3, 0.55, 0.90)];
    assert_eq!(select_best_checkpoint(&ms, SelectBy::Recognition).unwrap(), 2);
    assert_eq!(select_best_checkpoint(&ms, SelectBy::Cider).unwrap(), 0);
    assert_eq!(select_best_checkpoint(&ms, SelectBy::Last).unwrap(), 2);
    let tied = [meta(1, 0.5, 0.5), meta(2, 0.5, 0.5)];
    assert_eq!(select_best_checkpoint(&tied, SelectBy::Recognition).unwrap(), 0);
}

#[test]
fn outputs_written() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(0, 4, 0);
    run_training(Model::init(tiny(), 2).unwrap(), None, &d, &cfg(), no_val, Some(dir.path())).unwrap();
    for f in ["best.ckpt", "epoch-1.ckpt", "epoch-2.ckpt", "checkpoints.json", "loss.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(csv.starts_with(LOSS_CSV_HEADER));
}
