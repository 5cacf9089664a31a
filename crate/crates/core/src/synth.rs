//! Synthetic labelled corpora with controllable content and timing signals.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{CorpusManifest, Label, PostRecord, Split, UserTimeline};
use crate::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalMode {
    /// Positive users carry a mean shift on a few of their posts.
    Content,
    /// Classes differ only in how often they post.
    Temporal,
    Mixed,
    Null,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(Self::Content),
            "temporal" => Ok(Self::Temporal),
            "mixed" => Ok(Self::Mixed),
            "null" => Ok(Self::Null),
            _ => Err(Error::InvalidArgument(format!("unknown signal mode {s}"))),
        }
    }
}

impl SignalMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Content => "content",
            Self::Temporal => "temporal",
            Self::Mixed => "mixed",
            Self::Null => "null",
        }
    }
}

/// Log-normal inter-post gap, parameterised by its mean in hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapDistribution {
    pub mean_hours: f64,
    /// Standard deviation of the underlying normal.
    pub sigma: f64,
}

impl GapDistribution {
    fn sampler(&self) -> Result<LogNormal<f64>> {
        if !(self.mean_hours > 0.0) || !(self.sigma >= 0.0) || !self.mean_hours.is_finite() || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate gap distribution {self:?}")));
        }
        let mu = self.mean_hours.ln() - self.sigma * self.sigma / 2.0;
        LogNormal::new(mu, self.sigma).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users_per_class: usize,
    pub min_posts: usize,
    pub max_posts: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub image_probability: f64,
    pub mode: SignalMode,
    /// Length of the content shift along a fixed unit direction.
    pub strength: f64,
    /// Share of a positive user's posts that carry the content shift.
    pub informative_fraction: f64,
    /// Gaps of positive users in temporal and mixed modes.
    pub positive_gap: GapDistribution,
    /// Gaps of control users, and of everyone in content and null modes.
    pub control_gap: GapDistribution,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users_per_class: 200,
            min_posts: 20,
            max_posts: 120,
            text_dim: 16,
            image_dim: 8,
            image_probability: 0.5,
            mode: SignalMode::Temporal,
            strength: 3.0,
            informative_fraction: 0.1,
            positive_gap: GapDistribution {
                mean_hours: 0.5,
                sigma: 1.0,
            },
            control_gap: GapDistribution {
                mean_hours: 12.0,
                sigma: 1.0,
            },
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.users_per_class == 0 {
            return bad("users_per_class must be positive");
        }
        if self.min_posts == 0 || self.min_posts > self.max_posts {
            return bad("need 1 <= min_posts <= max_posts");
        }
        if self.text_dim == 0 || self.image_dim == 0 {
            return bad("text_dim and image_dim must be positive");
        }
        for (name, p) in [
            ("image_probability", self.image_probability),
            ("informative_fraction", self.informative_fraction),
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.train_fraction + self.val_fraction > 1.0 {
            return bad("train_fraction + val_fraction exceeds 1");
        }
        if !(self.strength >= 0.0) || !self.strength.is_finite() {
            return bad("strength must be finite and non-negative");
        }
        self.positive_gap.sampler()?;
        self.control_gap.sampler()?;
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Timelines (controls first, then positives) and a stratified split
/// manifest. User `i` draws from its own RNG stream.
pub fn generate(config: &SynthConfig) -> Result<(Vec<UserTimeline>, CorpusManifest)> {
    config.validate()?;
    let content = matches!(config.mode, SignalMode::Content | SignalMode::Mixed);
    let temporal = matches!(config.mode, SignalMode::Temporal | SignalMode::Mixed);
    let strength = if content { config.strength } else { 0.0 };

    let mut rng = stream_rng(config.seed, 0);
    let mut direction = gaussian(config.text_dim, &mut rng);
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let control_gap = config.control_gap.sampler()?;
    let positive_gap = if temporal { config.positive_gap.sampler()? } else { control_gap };

    let n = config.users_per_class;
    let mut timelines = Vec::with_capacity(2 * n);
    for u in 0..2 * n {
        let label = Label::from(u >= n);
        let mut rng = stream_rng(config.seed, u as u64 + 1);
        let count = rng.gen_range(config.min_posts..=config.max_posts);
        let mut informative = vec![false; count];
        let n_inf = ((count as f64 * config.informative_fraction).round() as usize).min(count);
        for i in rand::seq::index::sample(&mut rng, count, n_inf) {
            informative[i] = true;
        }
        let gaps = if label.is_positive() { positive_gap } else { control_gap };
        let mut t = 1.6e9 + rng.gen_range(0.0..30.0 * 86_400.0);
        let mut posts = Vec::with_capacity(count);
        for inf in informative {
            let mut text = gaussian(config.text_dim, &mut rng);
            if inf && label.is_positive() {
                text.iter_mut().zip(&direction).for_each(|(v, d)| *v += strength * d);
            }
            let image = (rng.gen::<f64>() < config.image_probability)
                .then(|| gaussian(config.image_dim, &mut rng).into_iter().map(|v| v as f32).collect());
            posts.push(PostRecord {
                timestamp: t,
                text_embedding: text.into_iter().map(|v| v as f32).collect(),
                image_embedding: image,
            });
            t += 3600.0 * gaps.sample(&mut rng);
        }
        timelines.push(UserTimeline {
            user_id: format!("u{u:05}"),
            label,
            posts,
        });
    }

    let mut splits = BTreeMap::new();
    let mut rng = stream_rng(config.seed, u64::MAX);
    for class in 0..2 {
        let mut idx: Vec<usize> = (class * n..(class + 1) * n).collect();
        idx.shuffle(&mut rng);
        let n_train = (n as f64 * config.train_fraction).round() as usize;
        let n_val = ((n as f64 * config.val_fraction).round() as usize).min(n - n_train);
        for (j, i) in idx.into_iter().enumerate() {
            let s = if j < n_train {
                Split::Train
            } else if j < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            splits.insert(timelines[i].user_id.clone(), s);
        }
    }
    let mut manifest = CorpusManifest::new(config.text_dim, config.image_dim, splits);
    manifest.metadata.insert("generator".into(), serde_json::json!("synthgen"));
    manifest.metadata.insert("synth_config".into(), serde_json::to_value(config)?);
    Ok((timelines, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: SignalMode) -> SynthConfig {
        SynthConfig {
            users_per_class: 20,
            min_posts: 5,
            max_posts: 30,
            mode,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let c = small(SignalMode::Mixed);
        let (a, m) = generate(&c).unwrap();
        let (b, _) = generate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        for t in &a {
            t.validate(c.text_dim, c.image_dim).unwrap();
        }
        let counts = m.counts();
        assert_eq!(counts.train + counts.val + counts.test, 40);
        let other = generate(&SynthConfig { seed: 1, ..c }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn zero_strength_content_equals_null() {
        let mut c = small(SignalMode::Content);
        c.strength = 0.0;
        let (a, _) = generate(&c).unwrap();
        let (b, _) = generate(&small(SignalMode::Null)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn content_shift_only_touches_positive_minority() {
        let mut c = small(SignalMode::Content);
        c.strength = 50.0;
        let (tl, _) = generate(&c).unwrap();
        let big = |p: &PostRecord| p.text_embedding.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() > 25.0;
        for t in &tl {
            let shifted = t.posts.iter().filter(|p| big(p)).count();
            let want = (t.posts.len() as f64 * 0.1).round() as usize;
            assert_eq!(shifted, if t.label.is_positive() { want } else { 0 });
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut c = small(SignalMode::Null);
        c.control_gap.mean_hours = 0.0;
        assert!(generate(&c).is_err());
        let mut c = small(SignalMode::Null);
        c.image_probability = 1.5;
        assert!(c.validate().is_err());
        let mut c = small(SignalMode::Null);
        c.min_posts = 40;
        assert!(c.validate().is_err());
    }

    #[test]
    fn imageless_corpus() {
        let mut c = small(SignalMode::Null);
        c.image_probability = 0.0;
        let (tl, _) = generate(&c).unwrap();
        assert!(tl.iter().flat_map(|t| &t.posts).all(|p| p.image_embedding.is_none()));
    }
}
