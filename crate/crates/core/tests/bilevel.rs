mod common;

use common::*;
use focusft::bilevel::*;
use focusft::fastweights::{init_adapters, AdapterConfig, AdapterSet};
use focusft::masking::{build_causal_mask, build_focusft_mask, focusft_masks_built, Segmentation};
use focusft::model::{init_model, ModelConfig, ModelWeights};
use focusft::taskgen::{gen_single_fact, make_splits, Sample, TaskConfig, TaskKind, Vocab};
use focusft::Float;

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 24,
        max_seq_len: 64,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn small_adapters() -> AdapterConfig {
    AdapterConfig {
        rank: 4,
        alpha: 8.0,
        layer_fraction: 0.5,
        targets: None,
        seed: 11,
    }
}

fn tiny_task() -> TaskConfig {
    TaskConfig {
        seq_len: 48,
        vocab_size: 24,
        ..TaskConfig::default()
    }
}

fn setup(mode: Mode, k: usize, epochs: usize) -> TrainSetup {
    TrainSetup {
        trainer: TrainerConfig {
            mode,
            k,
            epochs,
            lr: 3e-3,
            eta_in: 0.5,
            ..TrainerConfig::default()
        },
        adapters: small_adapters(),
    }
}

/// An adapter set that has moved away from the zero-effect init.
fn adapted(w: &ModelWeights, sample: &Sample, mask: &focusft::Tensor) -> AdapterSet {
    let phi0 = init_adapters(&small_adapters(), &w.config).unwrap();
    let r = inner_loop(
        w,
        phi0,
        &sample.tokens,
        &sample.segmentation.response_positions(),
        mask,
        2,
        1.0,
        10.0,
    )
    .unwrap();
    assert!(r.adapters.max_abs_delta().unwrap() > 0.0);
    r.adapters
}

#[test]
fn k_zero_inner_loop_is_a_no_op() {
    let w = init_model(&small_model()).unwrap();
    let s = gen_single_fact(&Vocab::new(24).unwrap(), 48, 0.3, 1).unwrap();
    let r_pos = s.segmentation.response_positions();
    let mask = build_focusft_mask(&s.segmentation);
    let phi0 = init_adapters(&small_adapters(), &w.config).unwrap();
    let r = inner_loop(&w, phi0.clone(), &s.tokens, &r_pos, &mask, 0, 0.5, 1.0).unwrap();
    assert_eq!(r.adapters, phi0);
    assert_eq!(r.losses.len(), 1);
    let (outer, _) = outer_gradients(&w, None, &s.tokens, &r_pos, &mask).unwrap();
    assert_eq!(r.losses[0], outer);
}

#[test]
fn zero_inner_rate_leaves_phi_unchanged_and_theta_is_never_touched() {
    let w = init_model(&small_model()).unwrap();
    let before = w.clone();
    let s = gen_single_fact(&Vocab::new(24).unwrap(), 48, 0.6, 2).unwrap();
    let r_pos = s.segmentation.response_positions();
    let mask = build_focusft_mask(&s.segmentation);
    let phi0 = init_adapters(&small_adapters(), &w.config).unwrap();
    let r = inner_loop(&w, phi0.clone(), &s.tokens, &r_pos, &mask, 3, 0.0, 1.0).unwrap();
    assert_eq!(r.adapters, phi0);
    assert_eq!(r.losses.len(), 4);
    assert_eq!(r.grad_norms.len(), 3);
    let r = inner_loop(&w, phi0, &s.tokens, &r_pos, &mask, 3, 1.0, 1.0).unwrap();
    assert_ne!(r.losses[0], r.losses[3]);
    assert_eq!(w, before);
}

#[test]
fn prefix_cache_matches_full_forward() {
    let w = init_model(&small_model()).unwrap();
    let s = gen_single_fact(&Vocab::new(24).unwrap(), 48, 0.5, 4).unwrap();
    let r_pos = s.segmentation.response_positions();
    let mask = build_focusft_mask(&s.segmentation);
    let phi = adapted(&w, &s, &mask);
    // The first loss of a trajectory comes from the cached prefix.
    let steps = inner_steps(&w, phi.clone(), &s.tokens, &r_pos, &mask, 1, 1.0, 10.0).unwrap();
    assert_eq!(steps.losses[0], loss_value(&w, Some(&phi), &s.tokens, &mask, &r_pos));
}

#[test]
fn outer_gradient_with_fresh_adapters_equals_plain_sft() {
    let w = init_model(&small_model()).unwrap();
    let s = gen_single_fact(&Vocab::new(24).unwrap(), 48, 0.5, 5).unwrap();
    let r_pos = s.segmentation.response_positions();
    let mask = build_causal_mask(s.len()).unwrap();
    let phi0 = init_adapters(&small_adapters(), &w.config).unwrap();
    let (l0, g0) = outer_gradients(&w, None, &s.tokens, &r_pos, &mask).unwrap();
    let (l1, g1) = outer_gradients(&w, Some(&phi0), &s.tokens, &r_pos, &mask).unwrap();
    assert_eq!(l0, l1);
    for (a, b) in g0.iter().zip(&g1) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{x} vs {y}");
        }
    }
}

#[test]
fn outer_gradient_with_adapted_phi_matches_finite_differences() {
    let cfg = grad_model_config();
    let w = init_model(&cfg).unwrap();
    let seg = Segmentation::from_compact("CCCCCCCRRCRR").unwrap();
    let tokens: Vec<usize> = (0..12).map(|i| (5 * i + 1) % cfg.vocab_size).collect();
    let r_pos = seg.response_positions();
    let mask = build_focusft_mask(&seg);
    let ad_cfg = AdapterConfig { rank: 2, alpha: 4.0, ..small_adapters() };
    let phi0 = init_adapters(&ad_cfg, &cfg).unwrap();
    let phi = inner_loop(&w, phi0, &tokens, &r_pos, &mask, 2, 1.0, 10.0).unwrap().adapters;
    let (_, analytic) = outer_gradients(&w, Some(&phi), &tokens, &r_pos, &mask).unwrap();
    let numeric = fd_theta_grads(&w, Some(&phi), &tokens, &mask, &r_pos, 1e-5);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn outer_graph_holds_adapters_as_constants() {
    let w = init_model(&small_model()).unwrap();
    let s = gen_single_fact(&Vocab::new(24).unwrap(), 48, 0.5, 6).unwrap();
    let mask = build_focusft_mask(&s.segmentation);
    let phi = adapted(&w, &s, &mask);
    let og = build_outer_graph(&w, Some(&phi), &s.tokens, &s.segmentation.response_positions(), &mask).unwrap();
    let adapters = og.adapters.as_ref().unwrap();
    for v in adapters.vars() {
        assert!(!og.graph.requires_grad(v));
        assert!(og.graph.parents(v).is_empty());
    }
    for v in og.model.vars() {
        assert!(og.graph.requires_grad(v));
    }
}

#[test]
fn training_is_deterministic() {
    let (train_set, _) = make_splits(&tiny_task(), 6, 0, 1).unwrap();
    let run = || {
        let mut w = init_model(&small_model()).unwrap();
        let reps = train(&mut w, &train_set, &setup(Mode::FocuSFT, 2, 2), |_, _| Ok(())).unwrap();
        (w, reps.iter().map(|r| r.metrics_line(false).unwrap()).collect::<Vec<_>>())
    };
    let (w1, m1) = run();
    let (w2, m2) = run();
    assert_eq!(w1, w2);
    assert_eq!(m1, m2);
}

#[test]
fn mode_algebra_at_k_zero() {
    let (train_set, _) = make_splits(&tiny_task(), 5, 0, 2).unwrap();
    let curve = |mode: Mode| {
        let mut w = init_model(&small_model()).unwrap();
        train(&mut w, &train_set, &setup(mode, 0, 2), |_, _| Ok(()))
            .unwrap()
            .iter()
            .map(|r| r.outer_loss)
            .collect::<Vec<Float>>()
    };
    assert_eq!(curve(Mode::FocuSFT), curve(Mode::SFTBidir));
    assert_eq!(curve(Mode::CausalBilevel), curve(Mode::StandardSFT));
    assert_ne!(curve(Mode::FocuSFT), curve(Mode::StandardSFT));
}

#[test]
fn reports_have_expected_shape_and_fresh_adapters() {
    let (train_set, _) = make_splits(&tiny_task(), 4, 0, 3).unwrap();
    let mut w = init_model(&small_model()).unwrap();
    let reps = train(&mut w, &train_set, &setup(Mode::CausalBilevel, 2, 1), |_, _| Ok(())).unwrap();
    assert_eq!(reps.len(), 4);
    for r in &reps {
        assert_eq!(r.inner_losses.len(), 3);
        assert_eq!(r.grad_norm_inner.len(), 2);
        assert_eq!(r.inner_losses[2], r.outer_loss);
    }
    let mut w = init_model(&small_model()).unwrap();
    let reps = train(&mut w, &train_set, &setup(Mode::StandardSFT, 2, 1), |_, _| Ok(())).unwrap();
    assert!(reps.iter().all(|r| r.inner_losses.is_empty()));
}

#[test]
fn gradient_accumulation_runs_ceil_steps() {
    let (train_set, _) = make_splits(&tiny_task(), 5, 0, 4).unwrap();
    let mut w = init_model(&small_model()).unwrap();
    let mut s = setup(Mode::FocuSFT, 1, 1);
    s.trainer.batch_size = 2;
    let reps = train(&mut w, &train_set, &s, |_, _| Ok(())).unwrap();
    assert_eq!(reps.len(), 3);
}

#[test]
fn non_finite_loss_aborts_and_keeps_theta() {
    let (train_set, _) = make_splits(&tiny_task(), 3, 0, 5).unwrap();
    let mut w = init_model(&small_model()).unwrap();
    w.layers[0].wq.data_mut()[0] = Float::NAN;
    let before = w.clone();
    let err = train(&mut w, &train_set, &setup(Mode::StandardSFT, 0, 1), |_, _| Ok(())).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(err.to_string().contains("step 1"));
    assert_eq!(format!("{w:?}"), format!("{before:?}"));
}

#[test]
fn empty_dataset_is_rejected() {
    let mut w = init_model(&small_model()).unwrap();
    assert!(train(&mut w, &[], &setup(Mode::StandardSFT, 0, 1), |_, _| Ok(())).is_err());
}

#[test]
fn memorized_single_sample_scores_one() {
    let (train_set, _) = make_splits(&tiny_task(), 1, 0, 6).unwrap();
    let mut w = init_model(&small_model()).unwrap();
    let mut s = setup(Mode::StandardSFT, 0, 150);
    s.trainer.lr = 1e-2;
    s.trainer.schedule = Schedule::Constant;
    train(&mut w, &train_set, &s, |_, _| Ok(())).unwrap();
    let before = focusft_masks_built();
    let report = evaluate(&w, &train_set).unwrap();
    assert_eq!(focusft_masks_built(), before, "evaluation built a bidirectional mask");
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn untrained_model_is_near_chance_on_uniform_answers() {
    // Answers drawn uniformly over the whole vocabulary: an untrained model's
    // argmax is unrelated to them, so accuracy should sit near 1/V.
    let cfg = ModelConfig::default();
    let w = init_model(&cfg).unwrap();
    let vocab = Vocab::new(64).unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    let samples: Vec<Sample> = (0..500)
        .map(|i| {
            let mut s = gen_single_fact(&vocab, 48, 0.5, i).unwrap();
            let p = s.answer_span[0];
            s.tokens[p] = rand::Rng::random_range(&mut rng, 0..64);
            s
        })
        .collect();
    let acc = evaluate(&w, &samples).unwrap().accuracy;
    let p: Float = 1.0 / 64.0;
    let ci = 3.0 * (p * (1.0 - p) / 500.0).sqrt();
    assert!((acc - p).abs() <= ci, "accuracy {acc} outside {p} ± {ci}");
}

#[test]
fn inference_adaptation_contracts() {
    let task = TaskConfig { kind: TaskKind::Agentic, seq_len: 64, n_turns: 3, ..tiny_task() };
    let (samples, _) = make_splits(&task, 4, 0, 8).unwrap();
    let w = init_model(&small_model()).unwrap();
    let cfg = AdaptConfig {
        adapters: small_adapters(),
        steps: 1,
        eta_in: 0.0,
        clip: 1.0,
        bidirectional: true,
        seed: 3,
    };
    let frozen = evaluate_adapted(&w, &samples, &cfg).unwrap();
    assert!(frozen.skipped.is_empty());
    assert_eq!(frozen.adapted.records, frozen.base_on_adapted.records);

    let cfg = AdaptConfig { eta_in: 1.0, ..cfg };
    let a = evaluate_adapted(&w, &samples, &cfg).unwrap();
    let b = evaluate_adapted(&w, &samples, &cfg).unwrap();
    assert_eq!(a, b);

    // Single-turn samples have no earlier response to adapt on.
    let (single, _) = make_splits(&tiny_task(), 2, 0, 9).unwrap();
    let r = evaluate_adapted(&w, &single, &cfg).unwrap();
    assert_eq!(r.skipped, vec![0, 1]);
}
