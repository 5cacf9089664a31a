//! Binary cross-entropy training with Adam under a triangular cyclical
//! learning rate, plus a stratified k-fold harness.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Metrics, DEFAULT_VOTE_SAMPLES};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::numerics::bce_term;
use crate::sampling::{make_batch, sample_window};
use crate::store::{select_split, CorpusManifest, Label, Split, UserTimeline};
use crate::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Length of one full up-and-down learning-rate cycle.
    pub cycle_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Windows per user when voting on the validation split.
    pub val_samples: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many validations without a better F1.
    pub patience: Option<usize>,
    /// Abort on non-finite gradients instead of skipping the check.
    pub strict: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            max_lr: 1e-4,
            cycle_epochs: 10,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            eval_every: 1,
            val_samples: DEFAULT_VOTE_SAMPLES,
            clip_norm: Some(1.0),
            patience: None,
            strict: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr < self.max_lr) || self.base_lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= base_lr < max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        if self.cycle_epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.val_samples == 0 {
            return Err(Error::InvalidArgument(
                "cycle_epochs, batch_size, eval_every and val_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy in the stable log-sum-exp form.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    Ok(logits.iter().zip(labels).map(|(z, y)| bce_term(*z, *y)).sum::<f64>() / logits.len() as f64)
}

/// Triangular cyclical learning rate: linear from `base_lr` up to `max_lr`
/// over the first half of each cycle and back down over the second half.
pub fn cyclical_lr(step: u64, steps_per_epoch: u64, config: &TrainConfig) -> f64 {
    let cycle = (config.cycle_epochs as u64 * steps_per_epoch).max(1);
    let t = step % cycle;
    let rise = if 2 * t <= cycle { 2 * t } else { 2 * (cycle - t) };
    let frac = rise as f64 / cycle as f64;
    config.base_lr * (1.0 - frac) + config.max_lr * frac
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64, strict: bool) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", "gradient list does not match parameters"));
    }
    if strict && grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "adam_step" });
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((t, g), m), v) in params.tensors_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if g.len() != t.len() {
            return Err(Error::shape("adam_step", "gradient length differs from parameter"));
        }
        for (((p, g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_last: f64,
    pub val_f1: Option<f64>,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

pub fn append_log(path: &Path, record: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation F1 (the last one without a
    /// validation split).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Trains a fresh model. Every epoch draws one window per training user via
/// the positional mode's sampler.
pub fn train(
    train_set: &[&UserTimeline],
    val_set: &[&UserTimeline],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    let mut init_rng = stream_rng(config.seed, 0);
    let mut model = Model::init(model_config.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(&model.params, config.beta1, config.beta2, config.adam_eps);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size) as u64;
    let mode = model_config.positional.sampling();

    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut rng = stream_rng(config.seed, epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.base_lr;
        for chunk in order.chunks(config.batch_size) {
            let windows = chunk
                .iter()
                .map(|&i| sample_window(train_set[i], model_config.window, mode, model_config.tau_origin, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(windows)?;
            let (loss, mut grads) = model.loss_and_grads(&batch, true, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {loss} at step {step}"),
                });
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            lr = cyclical_lr(step, steps_per_epoch, config);
            adam_step(&mut model.params, &grads, &mut adam, lr, config.strict)?;
            if !model.params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite parameters after step {step}"),
                });
            }
            step += 1;
            model.trained_steps = step;
            loss_sum += loss * batch.len() as f64;
        }

        let mut record = EpochLog {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            lr_last: lr,
            val_f1: None,
            val_auc: None,
            seconds: 0.0,
        };
        let mut stop = false;
        if !val_set.is_empty() && epoch % config.eval_every == 0 {
            let ev = evaluate(&model, val_set, config.val_samples, config.seed ^ 0x5EED_0000)?;
            record.val_f1 = Some(ev.metrics.f1);
            record.val_auc = ev.metrics.auc;
            let improved = best.as_ref().map_or(true, |(f1, _, _)| ev.metrics.f1 > *f1);
            if improved {
                best = Some((ev.metrics.f1, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                stop = config.patience.is_some_and(|p| since_best >= p);
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        on_epoch(&record);
        log.push(record);
        if stop {
            break;
        }
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (log.len(), model.clone()),
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        log,
        steps: step,
    })
}

/// Trains on the manifest's train split, selecting on its val split.
pub fn train_corpus(
    timelines: &[UserTimeline],
    manifest: &CorpusManifest,
    model_config: &ModelConfig,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let tr = select_split(timelines, manifest, Split::Train);
    let va = select_split(timelines, manifest, Split::Val);
    if va.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    train(&tr, &va, model_config, config, on_epoch)
}

/// Stratified fold index for every timeline: each class is shuffled and
/// dealt round-robin, so per-fold class counts differ by at most one.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument("k-fold needs k >= 2".into()));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!("{} users for {k} folds", labels.len())));
    }
    let mut rng = stream_rng(seed, 0xF01D);
    let mut folds = vec![0; labels.len()];
    for class in [Label::Control, Label::Positive] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::InvalidArgument(format!(
                "class {class:?} has {} users, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            folds[i] = j % k;
        }
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_users: Vec<String>,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub k: usize,
    pub folds: Vec<FoldResult>,
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub accuracy: MeanStd,
    pub auc: Option<MeanStd>,
}

/// Share of each fold's training part held out for checkpoint selection.
pub const KFOLD_VAL_FRACTION: f64 = 0.15;

/// Each fold trains on the other k-1 parts (minus a stratified validation
/// slice) and is scored on its own part with majority voting.
pub fn kfold(
    timelines: &[UserTimeline],
    k: usize,
    model_config: &ModelConfig,
    config: &TrainConfig,
    eval_samples: usize,
) -> Result<KFoldReport> {
    let labels: Vec<Label> = timelines.iter().map(|t| t.label).collect();
    let folds = stratified_folds(&labels, k, config.seed)?;
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        let test: Vec<&UserTimeline> = (0..timelines.len()).filter(|&i| folds[i] == fold).map(|i| &timelines[i]).collect();
        let rest: Vec<usize> = (0..timelines.len()).filter(|&i| folds[i] != fold).collect();
        let mut rng = stream_rng(config.seed, 0xF01D_0000 + fold as u64);
        let mut train_part = Vec::new();
        let mut val_part = Vec::new();
        for class in [Label::Control, Label::Positive] {
            let mut idx: Vec<usize> = rest.iter().copied().filter(|&i| labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n_val = ((idx.len() as f64 * KFOLD_VAL_FRACTION).round() as usize).min(idx.len().saturating_sub(1));
            val_part.extend(idx[..n_val].iter().map(|&i| &timelines[i]));
            train_part.extend(idx[n_val..].iter().map(|&i| &timelines[i]));
        }
        let mut fold_cfg = config.clone();
        fold_cfg.seed = config.seed.wrapping_add(fold as u64);
        let outcome = train(&train_part, &val_part, model_config, &fold_cfg, |_| {})?;
        let ev = evaluate(&outcome.best, &test, eval_samples, fold_cfg.seed ^ 0x7E57)?;
        results.push(FoldResult {
            fold,
            test_users: test.iter().map(|t| t.user_id.clone()).collect(),
            best_epoch: outcome.best_epoch,
            metrics: ev.metrics,
        });
    }
    let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&results.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let aucs: Option<Vec<f64>> = results.iter().map(|r| r.metrics.auc).collect();
    Ok(KFoldReport {
        k,
        f1: pick(|m| m.f1),
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        accuracy: pick(|m| m.accuracy),
        auc: aucs.map(|a| MeanStd::of(&a)),
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.0], &[1.0]).unwrap() - 0.693_147).abs() < 1e-6);
        let l = bce_loss(&[100.0], &[1.0]).unwrap();
        assert!(l.is_finite() && l < 1e-40);
        assert!(bce_loss(&[0.0], &[]).is_err());
        // Duplicated windows do not change the mean.
        assert_eq!(bce_loss(&[0.3, 0.3], &[1.0, 1.0]).unwrap(), bce_loss(&[0.3], &[1.0]).unwrap());
    }

    #[test]
    fn bce_matches_naive_formula() {
        let mut rng = stream_rng(8, 0);
        use rand::Rng;
        let z: Vec<f64> = (0..64).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let naive = z
            .iter()
            .zip(&y)
            .map(|(z, y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 64.0;
        assert!((bce_loss(&z, &y).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn schedule_landmarks() {
        let c = TrainConfig::default();
        let spe = 7;
        assert_eq!(cyclical_lr(0, spe, &c), 1e-5);
        assert_eq!(cyclical_lr(5 * spe, spe, &c), 1e-4);
        assert_eq!(cyclical_lr(10 * spe, spe, &c), 1e-5);
        assert!(cyclical_lr(2 * spe, spe, &c) > cyclical_lr(spe, spe, &c));
        assert!(cyclical_lr(8 * spe, spe, &c) < cyclical_lr(7 * spe, spe, &c));
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, 0.9, 0.999, 1e-8);
        st.m[0][0] = 0.5;
        adam_step(&mut s, &[vec![0.0]], &mut st, 1e-3, true).unwrap();
        assert!((st.m[0][0] - 0.45).abs() < 1e-15);
        // The decayed first moment still moves theta; a fresh state does not.
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, 0.9, 0.999, 1e-8);
        adam_step(&mut s, &[vec![0.0]], &mut st, 1e-3, true).unwrap();
        assert_eq!(s.get("theta").unwrap().data()[0], 0.7);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s, 0.9, 0.999, 1e-8);
        let lr = 1e-3;
        adam_step(&mut s, &[vec![1.0]], &mut st, lr, true).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let want = 2.0 - lr * 1.0 / (1.0 + 1e-8);
        assert!((s.get("theta").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, 0.9, 0.999, 1e-8);
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let th = s.get("theta").unwrap().data()[0];
            adam_step(&mut s, &[vec![2.0 * th]], &mut st, 1e-2, true).unwrap();
            let now = s.get("theta").unwrap().data()[0].abs();
            if i >= 5 {
                assert!(now < prev, "step {i}: {now} >= {prev}");
            }
            prev = now;
        }
    }

    #[test]
    fn adam_strict_rejects_nan() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, 0.9, 0.999, 1e-8);
        assert!(adam_step(&mut s, &[vec![f64::NAN]], &mut st, 1e-3, true).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn folds_cover_each_user_once_and_stratify() {
        let labels: Vec<Label> = (0..10).map(|i| Label::from(i < 5)).collect();
        let f = stratified_folds(&labels, 5, 3).unwrap();
        assert_eq!(f, stratified_folds(&labels, 5, 3).unwrap());
        for fold in 0..5 {
            let members: Vec<usize> = (0..10).filter(|&i| f[i] == fold).collect();
            assert_eq!(members.len(), 2);
        }
        let labels: Vec<Label> = (0..23).map(|i| Label::from(i % 3 == 0)).collect();
        let f = stratified_folds(&labels, 4, 1).unwrap();
        let ratio = 8.0 / 23.0;
        for fold in 0..4 {
            let members: Vec<usize> = (0..23).filter(|&i| f[i] == fold).collect();
            let pos = members.iter().filter(|&&i| labels[i].is_positive()).count() as f64;
            assert!((pos - ratio * members.len() as f64).abs() <= 1.0);
        }
        assert!(stratified_folds(&labels, 1, 0).is_err());
        let few: Vec<Label> = (0..10).map(|i| Label::from(i == 0)).collect();
        assert!(stratified_folds(&few, 5, 0).is_err());
    }
}
