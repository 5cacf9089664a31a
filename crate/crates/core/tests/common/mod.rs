#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temt::model::{Model, ModelConfig};
use temt::numerics::gradcheck::{central_difference, max_relative_error};
use temt::sampling::Batch;
use temt::store::{CorpusManifest, Label, PostRecord, Split, UserTimeline};
use temt::temporal::PositionalMode;

pub fn random_timeline<R: Rng>(
    rng: &mut R,
    user_id: &str,
    n: usize,
    text_dim: usize,
    image_dim: usize,
    image_prob: f64,
) -> UserTimeline {
    let mut t = 1.6e9 + rng.gen_range(0.0..1e6);
    let posts = (0..n)
        .map(|_| {
            t += rng.gen_range(0.0..50.0) * 3600.0;
            PostRecord {
                timestamp: t,
                text_embedding: (0..text_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                image_embedding: (image_dim > 0 && rng.gen_bool(image_prob))
                    .then(|| (0..image_dim).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            }
        })
        .collect();
    UserTimeline {
        user_id: user_id.to_owned(),
        label: Label::from(rng.gen_bool(0.5)),
        posts,
    }
}

pub fn tiny_config(mode: PositionalMode, d_model: usize, heads: usize, window: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        cross_layers: 1,
        cross_heads: heads,
        self_layers: 1,
        self_heads: heads,
        ffn_multiplier: 2,
        dropout: 0.0,
        positional: mode,
        text_dim: 4,
        image_dim: 3,
        window,
        max_window: window.max(8),
        ..ModelConfig::default()
    }
}

/// A random small architecture for gradient checks.
pub fn random_tiny_config<R: Rng>(rng: &mut R) -> ModelConfig {
    let d = [4, 6, 8][rng.gen_range(0..3)];
    let heads: Vec<usize> = (1..=d).filter(|h| d % h == 0 && *h <= 4).collect();
    ModelConfig {
        d_model: d,
        cross_layers: rng.gen_range(1..3),
        cross_heads: heads[rng.gen_range(0..heads.len())],
        self_layers: rng.gen_range(1..3),
        self_heads: heads[rng.gen_range(0..heads.len())],
        ffn_multiplier: rng.gen_range(1..3),
        dropout: 0.0,
        positional: PositionalMode::ALL[rng.gen_range(0..3)],
        text_dim: rng.gen_range(2..5),
        image_dim: rng.gen_range(2..4),
        window: rng.gen_range(2..5),
        max_window: 6,
        ..ModelConfig::default()
    }
}

/// Worst relative error between the analytic loss gradient and central
/// differences over every parameter coordinate.
pub fn model_gradient_error(model: &Model, batch: &Batch, h: f64, floor: f64) -> f64 {
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let (_, grads) = model.loss_and_grads(batch, false, &mut rng).unwrap();
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_owned()).collect();
    let mut worst: f64 = 0.0;
    for (j, name) in names.iter().enumerate() {
        let base = model.params.get(name).unwrap().data().to_vec();
        let mut probe_model = model.clone();
        let numeric = central_difference(&base, h, |x| {
            probe_model.params.get_mut(name).unwrap().data_mut().copy_from_slice(x);
            probe_model.loss(batch, &mut rand::rngs::mock::StepRng::new(0, 1))
        })
        .unwrap();
        worst = worst.max(max_relative_error(&grads[j], &numeric, floor));
    }
    worst
}

/// A corpus with random dims, split assignment and image presence.
pub fn random_corpus(seed: u64) -> (Vec<UserTimeline>, CorpusManifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text_dim = rng.gen_range(1..20);
    let image_dim = rng.gen_range(1..10);
    let users = rng.gen_range(1..15);
    let mut splits = BTreeMap::new();
    let timelines: Vec<UserTimeline> = (0..users)
        .map(|u| {
            let id = format!("user-{seed}-{u}-é");
            splits.insert(id.clone(), [Split::Train, Split::Val, Split::Test][u % 3]);
            let n = rng.gen_range(1..25);
            let p = rng.gen_range(0.0..1.0);
            let mut t = random_timeline(&mut rng, &id, n, text_dim, image_dim, p);
            // Exercise awkward but valid float values.
            if let Some(post) = t.posts.first_mut() {
                post.text_embedding[0] = f32::MIN_POSITIVE / 2.0;
                post.timestamp = -0.0;
            }
            t
        })
        .collect();
    (timelines, CorpusManifest::new(text_dim, image_dim, splits))
}

