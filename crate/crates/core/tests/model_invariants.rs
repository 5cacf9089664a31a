mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temt::model::Model;
use temt::sampling::{make_batch, sample_window, window_from_indices, PostWindow, TauOrigin};
use temt::temporal::PositionalMode;

fn eval_logit(model: &Model, w: &PostWindow) -> f64 {
    model.window_logit(w, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let cfg = random_tiny_config(&mut rng);
        let model = Model::init(cfg.clone(), &mut rng).unwrap();
        let windows = (0..2)
            .map(|i| {
                let n = rng.gen_range(1..cfg.window + 3);
                let tl = random_timeline(&mut rng, &format!("u{i}"), n, cfg.text_dim, cfg.image_dim, 0.6);
                sample_window(&tl, cfg.window, cfg.positional.sampling(), TauOrigin::FirstPost, &mut rng).unwrap()
            })
            .collect();
        let batch = make_batch(windows).unwrap();
        let err = model_gradient_error(&model, &batch, 1e-5, 1e-6);
        assert!(err < 1e-4, "case {case} {cfg:?}: relative error {err:e}");
    }
}

#[test]
fn zero_mode_logit_ignores_slot_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = tiny_config(PositionalMode::Zero, 8, 2, 10);
    let model = Model::init(cfg, &mut rng).unwrap();
    for trial in 0..5 {
        let tl = random_timeline(&mut rng, "u", 6 + trial, 4, 3, 0.5);
        let idx: Vec<usize> = (0..tl.posts.len()).collect();
        let w = window_from_indices(&tl, &idx, 10, TauOrigin::FirstPost).unwrap();
        let base = eval_logit(&model, &w);
        let real = w.real_count();
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..real).collect();
            perm.shuffle(&mut rng);
            perm.extend(real..10);
            let d = (eval_logit(&model, &w.permuted(&perm)) - base).abs();
            assert!(d < 1e-10, "{d:e}");
        }
    }
}

#[test]
fn time2vec_logit_depends_on_posting_times() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = Model::init(tiny_config(PositionalMode::Time2Vec, 8, 2, 6), &mut rng).unwrap();
    let mut tl = random_timeline(&mut rng, "u", 5, 4, 3, 0.5);
    let w1 = window_from_indices(&tl, &[0, 1, 2, 3, 4], 6, TauOrigin::FirstPost).unwrap();
    for (i, p) in tl.posts.iter_mut().enumerate() {
        p.timestamp = 1.6e9 + i as f64 * 60.0;
    }
    let w2 = window_from_indices(&tl, &[0, 1, 2, 3, 4], 6, TauOrigin::FirstPost).unwrap();
    assert!((eval_logit(&model, &w1) - eval_logit(&model, &w2)).abs() > 1e-6);
}

fn scramble_masked(w: &PostWindow, rng: &mut ChaCha8Rng) -> PostWindow {
    let mut out = w.clone();
    for s in 0..w.k {
        if !w.pad_mask[s] {
            out.text[s * w.text_dim..(s + 1) * w.text_dim].iter_mut().for_each(|v| *v = rng.gen_range(-1e3..1e3));
            out.tau[s] = rng.gen_range(0.0..100.0);
            out.timestamps[s] = rng.gen_range(0.0..1e9);
        }
        if !w.image_mask[s] {
            out.image[s * w.image_dim..(s + 1) * w.image_dim].iter_mut().for_each(|v| *v = rng.gen_range(-1e3..1e3));
        }
    }
    out
}

#[test]
fn padded_and_imageless_slots_are_opaque() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mode in PositionalMode::ALL {
        let model = Model::init(tiny_config(mode, 8, 2, 8), &mut rng).unwrap();
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let tl = random_timeline(&mut rng, "u", n, 4, 3, 0.5);
            let w = sample_window(&tl, 8, mode.sampling(), TauOrigin::FirstPost, &mut rng).unwrap();
            let w = if w.image_dim == 0 { w.padded_to(8) } else { w };
            let base = eval_logit(&model, &w);
            for _ in 0..5 {
                assert_eq!(eval_logit(&model, &scramble_masked(&w, &mut rng)), base, "{mode:?}");
            }
        }
    }
}

#[test]
fn extra_padding_leaves_logit_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for mode in PositionalMode::ALL {
        let model = Model::init(tiny_config(mode, 8, 4, 5), &mut rng).unwrap();
        for _ in 0..10 {
            let n = rng.gen_range(1..6);
            let tl = random_timeline(&mut rng, "u", n, 4, 3, 0.5);
            let w = sample_window(&tl, 5, mode.sampling(), TauOrigin::FirstPost, &mut rng).unwrap();
            let a = eval_logit(&model, &w);
            let b = eval_logit(&model, &w.padded_to(8));
            assert!((a - b).abs() < 1e-12, "{mode:?}: {a} vs {b}");
        }
    }
}

#[test]
fn batch_members_do_not_interact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::init(tiny_config(PositionalMode::Time2Vec, 8, 2, 6), &mut rng).unwrap();
    let windows: Vec<PostWindow> = (0..4)
        .map(|i| {
            let tl = random_timeline(&mut rng, &format!("u{i}"), 4 + i, 4, 3, 0.5);
            sample_window(&tl, 6, model.config.positional.sampling(), TauOrigin::FirstPost, &mut rng).unwrap()
        })
        .collect();
    let single: Vec<f64> = windows.iter().map(|w| eval_logit(&model, w)).collect();
    let batch = make_batch(windows.clone()).unwrap();
    let together = model.forward(&batch, false, &mut rng).unwrap();
    assert_eq!(single, together);
    let mut reversed = windows;
    reversed.reverse();
    let rev = model.forward(&make_batch(reversed).unwrap(), false, &mut rng).unwrap();
    assert_eq!(rev.into_iter().rev().collect::<Vec<_>>(), single);
}

#[test]
fn summed_batch_gradient_equals_mean_of_single_window_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = Model::init(tiny_config(PositionalMode::Learned, 8, 2, 5), &mut rng).unwrap();
    let windows: Vec<PostWindow> = (0..3)
        .map(|i| {
            let tl = random_timeline(&mut rng, &format!("u{i}"), 3 + i, 4, 3, 0.5);
            sample_window(&tl, 5, model.config.positional.sampling(), TauOrigin::FirstPost, &mut rng).unwrap()
        })
        .collect();
    let (loss, grads) = model.loss_and_grads(&make_batch(windows.clone()).unwrap(), false, &mut rng).unwrap();
    let mut mean_loss = 0.0;
    let mut mean = vec![Vec::new(); grads.len()];
    for w in windows {
        let (l, g) = model.loss_and_grads(&make_batch(vec![w]).unwrap(), false, &mut rng).unwrap();
        mean_loss += l / 3.0;
        for (m, g) in mean.iter_mut().zip(g) {
            if m.is_empty() {
                *m = vec![0.0; g.len()];
            }
            m.iter_mut().zip(g).for_each(|(a, b)| *a += b / 3.0);
        }
    }
    assert!((loss - mean_loss).abs() < 1e-12);
    for (a, b) in grads.iter().flatten().zip(mean.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}
