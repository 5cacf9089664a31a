//! Integrated Gradients over the projected per-post stream inputs.
//!
//! The baseline zeroes both projected streams while keeping the window's
//! masks and τ values, so the positional terms stay on the whole path. The
//! target is the classifier logit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{sigmoid, Tensor};
use crate::sampling::{sample_window, PostWindow};
use crate::store::UserTimeline;
use crate::stream_rng;

pub const MIN_STEPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostAttribution {
    /// Slot in the window.
    pub slot: usize,
    /// Index of the post in the user's timeline.
    pub post_index: usize,
    pub timestamp: f64,
    pub text: f64,
    pub image: f64,
    /// Sum of the text and image contributions.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub user_id: String,
    pub steps: usize,
    /// One entry per real slot, in slot order.
    pub posts: Vec<PostAttribution>,
    /// Positions into `posts`, highest score first.
    pub ranking: Vec<usize>,
    pub logit: f64,
    pub baseline_logit: f64,
    pub probability: f64,
    /// `|sum(scores) - (logit - baseline_logit)|`.
    pub completeness_residual: f64,
    /// Residual relative to `|logit - baseline_logit|`.
    pub relative_residual: f64,
    /// Set when the parameters have never been trained.
    pub untrained: bool,
}

/// Per-slot scores for a window, including padded slots (which are always 0).
/// Returns `(text, image, logit, baseline_logit)`.
pub fn slot_attributions(model: &Model, window: &PostWindow, steps: usize) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_STEPS} steps, got {steps}")));
    }
    let (text, image) = model.project_window(window)?;
    let (k, d) = text.rows_cols();
    // Zero inputs in slots the model cannot see so their score is exactly 0.
    let mut text = text.into_data();
    let mut image = image.into_data();
    for s in 0..k {
        if !window.pad_mask[s] {
            text[s * d..(s + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
        if !window.image_mask[s] {
            image[s * d..(s + 1) * d].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let mut avg_t = vec![0.0; k * d];
    let mut avg_i = vec![0.0; k * d];
    let mut logit = 0.0;
    let mut baseline_logit = 0.0;
    for j in 0..=steps {
        let alpha = j as f64 / steps as f64;
        let xt = Tensor::new(vec![k, d], text.iter().map(|v| alpha * v).collect())?;
        let xi = Tensor::new(vec![k, d], image.iter().map(|v| alpha * v).collect())?;
        let (z, gt, gi) = model.logit_with_inputs(window, &xt, &xi)?;
        if gt.iter().chain(&gi).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "integrated_gradients" });
        }
        if j == 0 {
            baseline_logit = z;
        }
        if j == steps {
            logit = z;
        }
        let w = if j == 0 || j == steps { 0.5 } else { 1.0 } / steps as f64;
        avg_t.iter_mut().zip(&gt).for_each(|(a, g)| *a += w * g);
        avg_i.iter_mut().zip(&gi).for_each(|(a, g)| *a += w * g);
    }
    let per_slot = |x: &[f64], g: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|s| (s * d..(s + 1) * d).map(|c| x[c] * g[c]).sum())
            .collect()
    };
    Ok((per_slot(&text, &avg_t), per_slot(&image, &avg_i), logit, baseline_logit))
}

pub fn integrated_gradients(model: &Model, window: &PostWindow, steps: usize) -> Result<AttributionReport> {
    let (t, i, logit, baseline_logit) = slot_attributions(model, window, steps)?;
    let posts: Vec<PostAttribution> = (0..window.k)
        .filter(|&s| window.pad_mask[s])
        .map(|s| PostAttribution {
            slot: s,
            post_index: window.source[s].unwrap_or(s),
            timestamp: window.timestamps[s],
            text: t[s],
            image: i[s],
            score: t[s] + i[s],
        })
        .collect();
    let mut ranking: Vec<usize> = (0..posts.len()).collect();
    ranking.sort_by(|a, b| posts[*b].score.total_cmp(&posts[*a].score).then(a.cmp(b)));
    let total: f64 = posts.iter().map(|p| p.score).sum();
    let delta = logit - baseline_logit;
    let residual = (total - delta).abs();
    Ok(AttributionReport {
        user_id: window.user_id.clone(),
        steps,
        posts,
        ranking,
        logit,
        baseline_logit,
        probability: sigmoid(logit),
        completeness_residual: residual,
        relative_residual: if delta == 0.0 { residual } else { residual / delta.abs() },
        untrained: model.trained_steps == 0,
    })
}

/// Attributes one window drawn with the model's sampler from stream 0 of
/// `seed`.
pub fn attribute_user(model: &Model, timeline: &UserTimeline, steps: usize, seed: u64) -> Result<AttributionReport> {
    let cfg = &model.config;
    let mut rng = stream_rng(seed, 0);
    let w = sample_window(timeline, cfg.window, cfg.positional.sampling(), cfg.tau_origin, &mut rng)?;
    integrated_gradients(model, &w, steps)
}

/// Ranked table of post index, timestamp and score.
pub fn render_table(report: &AttributionReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "user {}  p={:.4}  logit={:.6}  residual={:.3e}{}",
        report.user_id,
        report.probability,
        report.logit,
        report.completeness_residual,
        if report.untrained { "  (untrained parameters)" } else { "" }
    );
    let _ = writeln!(out, "{:>5} {:>10} {:>18} {:>14}", "rank", "post", "timestamp", "score");
    for (r, &p) in report.ranking.iter().enumerate() {
        let a = &report.posts[p];
        let _ = writeln!(out, "{:>5} {:>10} {:>18.1} {:>14.6e}", r + 1, a.post_index, a.timestamp, a.score);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampling::{window_from_indices, TauOrigin};
    use crate::store::{Label, PostRecord};
    use crate::temporal::PositionalMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            cross_layers: 1,
            cross_heads: 2,
            self_layers: 1,
            self_heads: 2,
            ffn_multiplier: 2,
            dropout: 0.0,
            positional: PositionalMode::Time2Vec,
            text_dim: 4,
            image_dim: 3,
            window: 6,
            max_window: 8,
            ..ModelConfig::default()
        }
    }

    fn window(n: usize, seed: u64) -> PostWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let posts = (0..n)
            .map(|i| PostRecord {
                timestamp: i as f64 * 3600.0 * rng.gen_range(0.5..2.0),
                text_embedding: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                image_embedding: (i % 2 == 0).then(|| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            })
            .collect();
        let tl = UserTimeline {
            user_id: "u".into(),
            label: Label::Positive,
            posts,
        };
        window_from_indices(&tl, &(0..n).collect::<Vec<_>>(), 6, TauOrigin::FirstPost).unwrap()
    }

    #[test]
    fn completeness_and_padding() {
        let m = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = window(4, 2);
        let r = integrated_gradients(&m, &w, 256).unwrap();
        assert_eq!(r.posts.len(), 4);
        assert!(r.untrained);
        assert!(r.relative_residual < 0.01, "{}", r.relative_residual);
        let (t, i, _, _) = slot_attributions(&m, &w, 32).unwrap();
        assert_eq!((t[4], t[5], i[4], i[5]), (0.0, 0.0, 0.0, 0.0));
        // Posts without images get no image attribution.
        assert_eq!((i[1], i[3]), (0.0, 0.0));
        assert!(r.ranking.windows(2).all(|p| r.posts[p[0]].score >= r.posts[p[1]].score));
    }

    #[test]
    fn too_few_steps_is_rejected() {
        let m = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(integrated_gradients(&m, &window(3, 0), 8).is_err());
    }

    #[test]
    fn zero_text_post_has_zero_score() {
        let mut cfg = config();
        cfg.image_dim = 3;
        let mut m = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Zero bias so zero raw text projects to the baseline.
        m.params.get_mut("text_proj.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut w = window(3, 5);
        w.text[4..8].iter_mut().for_each(|v| *v = 0.0);
        let (t, _, _, _) = slot_attributions(&m, &w, 16).unwrap();
        assert_eq!(t[1], 0.0);
        assert!(t[0] != 0.0);
    }

    #[test]
    fn table_lists_every_real_post() {
        let m = Model::init(config(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let r = integrated_gradients(&m, &window(3, 9), 16).unwrap();
        let s = render_table(&r);
        assert_eq!(s.lines().count(), 2 + 3);
    }
}
