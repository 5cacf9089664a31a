//! Majority-vote inference over repeated window samples, and classification
//! metrics for the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::sigmoid;
use crate::sampling::sample_window;
use crate::store::{Label, UserTimeline};
use crate::stream_rng;

/// Windows drawn per user at test time.
pub const DEFAULT_VOTE_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub user_id: String,
    pub label: Label,
    pub probabilities: Vec<f64>,
    pub votes_positive: usize,
    pub votes_negative: usize,
    pub predicted: Label,
    pub mean_probability: f64,
    /// True when the vote was split evenly and the mean probability decided.
    pub tie_broken: bool,
}

/// Positive when more than half the windows exceed 0.5. An even split is
/// settled by the mean probability, and an exact 0.5 mean goes positive.
pub fn majority_vote(user_id: &str, label: Label, probabilities: Vec<f64>) -> VoteResult {
    let pos = probabilities.iter().filter(|p| **p > 0.5).count();
    let neg = probabilities.len() - pos;
    let mean = if probabilities.is_empty() {
        0.5
    } else {
        probabilities.iter().sum::<f64>() / probabilities.len() as f64
    };
    let tie = pos == neg;
    let predicted = if tie { Label::from(mean >= 0.5) } else { Label::from(pos > neg) };
    VoteResult {
        user_id: user_id.to_owned(),
        label,
        probabilities,
        votes_positive: pos,
        votes_negative: neg,
        predicted,
        mean_probability: mean,
        tie_broken: tie,
    }
}

/// Draws `samples` windows with the model's sampling regime and votes.
/// Dropout is off.
pub fn predict_user<R: rand::Rng + ?Sized>(
    model: &Model,
    timeline: &UserTimeline,
    samples: usize,
    rng: &mut R,
) -> Result<VoteResult> {
    if timeline.posts.is_empty() {
        return Err(Error::Empty(format!("timeline {}", timeline.user_id)));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one vote sample is required".into()));
    }
    let cfg = &model.config;
    let mode = cfg.positional.sampling();
    let mut probs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let w = sample_window(timeline, cfg.window, mode, cfg.tau_origin, rng)?;
        probs.push(sigmoid(model.window_logit(&w, false, rng)?));
    }
    Ok(majority_vote(&timeline.user_id, timeline.label, probs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    /// Precision, recall and F1 are 0 when their denominators vanish.
    pub fn from_confusion(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // Harmonic mean of precision and recall, rounded once.
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self {
            f1,
            precision,
            recall,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            auc: None,
            tp,
            fp,
            tn,
            fn_,
        }
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
pub fn auc(scores: &[f64], labels: &[Label]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| labels[o].is_positive()).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

pub fn compute_metrics(predictions: &[Label], labels: &[Label], scores: &[f64]) -> Result<Metrics> {
    if predictions.len() != labels.len() || scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions, {} labels, {} scores",
            predictions.len(),
            labels.len(),
            scores.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, l) in predictions.iter().zip(labels) {
        match (p.is_positive(), l.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut m = Metrics::from_confusion(tp, fp, tn, fn_);
    m.auc = auc(scores, labels);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub votes: Vec<VoteResult>,
}

/// Votes on every timeline. User `i` draws from RNG stream `i` of `seed`,
/// so results do not depend on evaluation order.
pub fn evaluate(model: &Model, timelines: &[&UserTimeline], samples: usize, seed: u64) -> Result<Evaluation> {
    if timelines.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let votes = timelines
        .iter()
        .enumerate()
        .map(|(i, t)| predict_user(model, t, samples, &mut stream_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Label> = votes.iter().map(|v| v.predicted).collect();
    let labels: Vec<Label> = votes.iter().map(|v| v.label).collect();
    let scores: Vec<f64> = votes.iter().map(|v| v.mean_probability).collect();
    let metrics = compute_metrics(&preds, &labels, &scores)?;
    Ok(Evaluation { metrics, votes })
}
