use std::sync::atomic::{AtomicUsize, Ordering};

use dlm_core::corpus::{gen_corpus, TokenSeq};
use dlm_core::denoiser::{Checkpoint, ModelConfig};
use dlm_core::objectives::{constrained_loss, Verifier};
use dlm_core::pipeline::{
    build_pool, distill_trajectories, pool_pairs, read_onpolicy_log, select_top, train_onpolicy, train_tsc,
    train_tsc_from, write_onpolicy_log, CurriculumConfig, DistillConfig, OnPolicyConfig,
};
use dlm_core::rng::stream_rng;
use dlm_core::Error;
use proptest::prelude::*;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        model_dim: 16,
        heads: 2,
        ff_dim: 32,
        max_len: 24,
        ..ModelConfig::default()
    }
}

fn short_run(steps: usize) -> CurriculumConfig {
    CurriculumConfig {
        total_steps: steps,
        batch_size: 4,
        log_every: 1,
        seed: 5,
        ..CurriculumConfig::default()
    }
}

fn trained(steps: usize) -> Checkpoint {
    let corpus = gen_corpus(2, 64, 1);
    train_tsc(&tiny_model(), &short_run(steps), &corpus).unwrap().checkpoint
}

#[test]
fn resumed_training_is_bit_identical() {
    let corpus = gen_corpus(1, 32, 1);
    let model = tiny_model();
    let cfg = short_run(40);
    let full = train_tsc(&model, &cfg, &corpus).unwrap();
    let first = train_tsc_from(&model, &cfg, &corpus, None, 20).unwrap();
    assert_eq!(first.checkpoint.step, 20);
    let bytes = first.checkpoint.to_bytes();
    let restored = Checkpoint::from_bytes(&bytes).unwrap();
    let second = train_tsc_from(&model, &cfg, &corpus, Some(restored), 40).unwrap();
    assert_eq!(second.checkpoint.to_bytes(), full.checkpoint.to_bytes());
    let mut log = first.log.clone();
    log.extend(second.log);
    assert_eq!(log, full.log);
}

#[test]
fn phase_boundary_is_exact() {
    let corpus = gen_corpus(1, 16, 1);
    let cfg = short_run(20);
    assert_eq!(cfg.phase_boundary(), 16);
    let out = train_tsc(&tiny_model(), &cfg, &corpus).unwrap();
    assert_eq!(out.log.len(), 20);
    for row in &out.log {
        if row.step < 16 {
            assert_eq!(row.phase, 1);
            assert_eq!(row.loss_edit, 0.0);
            assert_eq!(row.loss_total, row.loss_mask);
        } else {
            assert_eq!(row.phase, 2);
            assert!(row.loss_edit > 0.0);
        }
        assert!((row.loss_total - row.loss_edit - row.loss_mask).abs() < 1e-6);
    }
}

#[test]
fn mask_only_ablation_never_trains_the_edit_term() {
    let corpus = gen_corpus(1, 16, 1);
    let cfg = CurriculumConfig {
        mask_only_fraction: 1.0,
        ..short_run(12)
    };
    let out = train_tsc(&tiny_model(), &cfg, &corpus).unwrap();
    assert!(out.log.iter().all(|r| r.phase == 1 && r.loss_edit == 0.0));
}

#[test]
fn invalid_curricula_are_rejected() {
    let corpus = gen_corpus(1, 4, 1);
    for cfg in [
        CurriculumConfig { mask_only_fraction: 0.0, ..short_run(4) },
        CurriculumConfig { batch_size: 0, ..short_run(4) },
        CurriculumConfig { alpha_max: 0.5, ..short_run(4) },
    ] {
        assert!(matches!(train_tsc(&tiny_model(), &cfg, &corpus), Err(Error::InvalidConfig(_))));
    }
    assert!(matches!(train_tsc(&tiny_model(), &short_run(4), &[]), Err(Error::InvalidCorpus(_))));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let corpus = gen_corpus(1, 8, 1);
    let cfg = CurriculumConfig {
        learning_rate: 1e30,
        ..short_run(10)
    };
    match train_tsc(&tiny_model(), &cfg, &corpus) {
        Err(Error::DivergenceDetected { step, last_good }) => {
            assert!(step > 0);
            assert_eq!(last_good.step, step as u64);
            assert!(last_good.params.all_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn small_corpus_loss_falls_below_a_quarter() {
    let corpus = gen_corpus(3, 64, 1);
    let cfg = CurriculumConfig {
        total_steps: 2000,
        batch_size: 8,
        seed: 1,
        ..CurriculumConfig::default()
    };
    let out = train_tsc(&tiny_model(), &cfg, &corpus).unwrap();
    let head: Vec<f64> = out.log.iter().take(3).map(|r| r.loss_total).collect();
    let tail: Vec<f64> = out.log.iter().rev().take(5).map(|r| r.loss_total).collect();
    let initial = head.iter().sum::<f64>() / head.len() as f64;
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(last < 0.25 * initial, "{initial} -> {last}");
}

#[test]
fn degenerate_pool_still_fine_tunes() {
    let ckpt = trained(30);
    let corpus = gen_corpus(2, 64, 1);
    let cfg = DistillConfig {
        group_size: 1,
        keep_top: 1,
        samples: 6,
        block_size: 4,
        finetune_steps: 3,
        batch_size: 4,
        ..DistillConfig::default()
    };
    let out = distill_trajectories(&ckpt, &corpus, &cfg).unwrap();
    assert_eq!(out.pool.entries.len(), 6);
    assert!(out.pool.entries.iter().all(|e| e.kept == vec![0]));
    assert_eq!(out.losses.len(), 3);
    assert_ne!(out.checkpoint.params, ckpt.params);
}

#[test]
fn kept_trajectories_score_at_least_as_well_as_discarded() {
    let ckpt = trained(60);
    let corpus = gen_corpus(2, 64, 1);
    let cfg = DistillConfig {
        group_size: 6,
        keep_top: 2,
        samples: 10,
        block_size: 8,
        ..DistillConfig::default()
    };
    let pool = build_pool(&ckpt.params, &corpus, &cfg).unwrap();
    for e in &pool.entries {
        let scores: Vec<f64> = e.candidates.iter().map(|c| c.elbo_score).collect();
        assert!(scores.iter().all(|s| s.is_finite()));
        assert_eq!(e.kept, select_top(&scores, 2));
        let mean = |idx: Vec<usize>| idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64;
        let discarded: Vec<usize> = (0..scores.len()).filter(|i| !e.kept.contains(i)).collect();
        assert!(mean(e.kept.clone()) >= mean(discarded));
    }
    let again = build_pool(&ckpt.params, &corpus, &cfg).unwrap();
    for (a, b) in pool.entries.iter().zip(&again.entries) {
        assert_eq!(a.kept, b.kept);
    }
    let pairs = pool_pairs(&pool, &corpus, ckpt.params.config.max_len).unwrap();
    assert!(!pairs.is_empty());
    let edit = dlm_core::corruption::EditSchedule::default();
    for (i, pair) in pairs.iter().enumerate() {
        let mut rng = stream_rng(0, 400, i as u64);
        let (loss, _) = constrained_loss(&ckpt.params, pair, Some(&edit), &mut rng, false).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }
}

#[test]
fn zero_updates_return_the_input_checkpoint() {
    let ckpt = trained(5);
    let corpus = gen_corpus(2, 8, 1);
    let cfg = OnPolicyConfig {
        updates: 0,
        ..OnPolicyConfig::default()
    };
    let out = train_onpolicy(&ckpt, &corpus, &Verifier::exact(), &cfg).unwrap();
    assert_eq!(out.checkpoint.to_bytes(), ckpt.to_bytes());
    assert!(out.log.is_empty());
}

#[test]
fn onpolicy_log_follows_the_ramp_and_round_trips() {
    let ckpt = trained(20);
    let corpus = gen_corpus(2, 16, 1);
    let cfg = OnPolicyConfig {
        updates: 4,
        prompts_per_update: 2,
        block_size: 8,
        start_unmask_fraction: 0.125,
        end_unmask_fraction: 0.5,
        ..OnPolicyConfig::default()
    };
    let out = train_onpolicy(&ckpt, &corpus, &Verifier::exact(), &cfg).unwrap();
    assert_eq!(out.log.len(), 4);
    let budgets: Vec<usize> = (0..4).map(|u| cfg.sampler_at(u).steps_per_block).collect();
    assert_eq!(budgets.first(), Some(&8));
    assert_eq!(budgets.last(), Some(&2));
    assert!(budgets.windows(2).all(|w| w[1] <= w[0]));
    for row in &out.log {
        assert!((0.0..=1.0).contains(&row.pass_rate));
        assert!(row.speedup_ratio >= 1.0);
    }
    let again = train_onpolicy(&ckpt, &corpus, &Verifier::exact(), &cfg).unwrap();
    assert_eq!(again.log, out.log);
    assert_eq!(again.checkpoint, out.checkpoint);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("onpolicy_log.csv");
    write_onpolicy_log(&path, &out.log).unwrap();
    let back = read_onpolicy_log(&path).unwrap();
    assert_eq!(back.len(), out.log.len());
    for (a, b) in back.iter().zip(&out.log) {
        assert_eq!(a.update, b.update);
        assert!((a.mean_steps - b.mean_steps).abs() < 1e-6);
        assert!((a.speedup_ratio - b.speedup_ratio).abs() < 1e-6);
    }
}

#[test]
fn vanishing_rewards_trigger_collapse() {
    let ckpt = trained(5);
    let corpus = gen_corpus(2, 8, 1);
    let cfg = OnPolicyConfig {
        updates: 10,
        prompts_per_update: 2,
        block_size: 8,
        collapse_window: 3,
        ..OnPolicyConfig::default()
    };
    let calls = AtomicUsize::new(0);
    let first_update_only = |_: &TokenSeq| u8::from(calls.fetch_add(1, Ordering::SeqCst) < 2);
    match train_onpolicy(&ckpt, &corpus, &first_update_only, &cfg) {
        Err(Error::CollapseDetected { update, start, .. }) => {
            assert_eq!(update, 3);
            assert_eq!(start, 1.0);
        }
        other => panic!("expected collapse, got {:?}", other.map(|o| o.log)),
    }
}

proptest! {
    #[test]
    fn selection_keeps_the_best_scores(scores in prop::collection::vec(-100.0f64..0.0, 1..12), m in 1usize..12) {
        let m = m.min(scores.len());
        let kept = select_top(&scores, m);
        prop_assert_eq!(kept.len(), m);
        let worst_kept = kept.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !kept.contains(i)) {
            prop_assert!(scores[i] <= worst_kept);
        }
        let mut shuffled_copy = scores.clone();
        shuffled_copy.reverse();
        shuffled_copy.reverse();
        prop_assert_eq!(select_top(&shuffled_copy, m), kept);
    }
}
