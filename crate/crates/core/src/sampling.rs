//! Fixed-size post windows drawn from timelines, and padded batches of them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::store::{Label, UserTimeline};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// How posts are chosen from a timeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// K chronologically consecutive posts from a uniform start index.
    Subsequence,
    /// K distinct posts uniformly without replacement, in draw order.
    RandomSet,
}

/// Origin of each slot's relative time τ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauOrigin {
    /// Hours since the chronologically first real post in the window.
    #[default]
    FirstPost,
    /// Hours since the chronologically preceding real post in the window.
    PreviousPost,
}

/// K sampled posts of one user with masks and relative times.
#[derive(Clone, Debug, PartialEq)]
pub struct PostWindow {
    pub user_id: String,
    pub label: Label,
    pub k: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// `k * text_dim`, zero on padded slots.
    pub text: Vec<f64>,
    /// `k * image_dim`, zero where `image_mask` is false.
    pub image: Vec<f64>,
    /// Relative time in hours; 0 on padded slots.
    pub tau: Vec<f64>,
    pub position: Vec<usize>,
    /// True for real posts.
    pub pad_mask: Vec<bool>,
    /// True where an image is present on a real post.
    pub image_mask: Vec<bool>,
    /// Index of the post in the source timeline.
    pub source: Vec<Option<usize>>,
    /// Post timestamp in seconds; 0 on padded slots.
    pub timestamps: Vec<f64>,
}

impl PostWindow {
    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }

    pub fn image_count(&self) -> usize {
        self.image_mask.iter().filter(|m| **m).count()
    }

    pub fn text_row(&self, slot: usize) -> &[f64] {
        &self.text[slot * self.text_dim..(slot + 1) * self.text_dim]
    }

    pub fn image_row(&self, slot: usize) -> &[f64] {
        &self.image[slot * self.image_dim..(slot + 1) * self.image_dim]
    }

    /// Reorders slots by `perm` (slot `i` of the result is slot `perm[i]`).
    /// Position indices stay attached to slot positions, not to posts.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (dst, &src) in perm.iter().enumerate() {
            out.text[dst * self.text_dim..(dst + 1) * self.text_dim]
                .copy_from_slice(self.text_row(src));
            out.image[dst * self.image_dim..(dst + 1) * self.image_dim]
                .copy_from_slice(self.image_row(src));
            out.tau[dst] = self.tau[src];
            out.pad_mask[dst] = self.pad_mask[src];
            out.image_mask[dst] = self.image_mask[src];
            out.source[dst] = self.source[src];
            out.timestamps[dst] = self.timestamps[src];
        }
        out
    }

    /// Appends `extra` fully padded slots.
    pub fn padded_to(&self, k: usize) -> Self {
        assert!(k >= self.k);
        let mut out = self.clone();
        let extra = k - self.k;
        out.k = k;
        out.text.extend(std::iter::repeat(0.0).take(extra * self.text_dim));
        out.image.extend(std::iter::repeat(0.0).take(extra * self.image_dim));
        out.tau.extend(std::iter::repeat(0.0).take(extra));
        out.position = (0..k).collect();
        out.pad_mask.extend(std::iter::repeat(false).take(extra));
        out.image_mask.extend(std::iter::repeat(false).take(extra));
        out.source.extend(std::iter::repeat(None).take(extra));
        out.timestamps.extend(std::iter::repeat(0.0).take(extra));
        out
    }
}

/// Builds a window from explicit post indices, in the given slot order.
pub fn window_from_indices(
    timeline: &UserTimeline,
    indices: &[usize],
    k: usize,
    origin: TauOrigin,
) -> Result<PostWindow> {
    if k < 1 {
        return Err(Error::InvalidArgument("window size K must be at least 1".into()));
    }
    if indices.is_empty() || indices.len() > k {
        return Err(Error::InvalidArgument(format!(
            "{} posts do not fit a window of {k}",
            indices.len()
        )));
    }
    let first = timeline
        .posts
        .first()
        .ok_or_else(|| Error::Empty(format!("timeline {}", timeline.user_id)))?;
    let text_dim = first.text_embedding.len();
    let image_dim = timeline
        .posts
        .iter()
        .find_map(|p| p.image_embedding.as_ref().map(Vec::len))
        .unwrap_or(0);

    let mut w = PostWindow {
        user_id: timeline.user_id.clone(),
        label: timeline.label,
        k,
        text_dim,
        image_dim,
        text: vec![0.0; k * text_dim],
        image: vec![0.0; k * image_dim],
        tau: vec![0.0; k],
        position: (0..k).collect(),
        pad_mask: vec![false; k],
        image_mask: vec![false; k],
        source: vec![None; k],
        timestamps: vec![0.0; k],
    };
    for (slot, &idx) in indices.iter().enumerate() {
        let post = timeline.posts.get(idx).ok_or_else(|| {
            Error::InvalidArgument(format!("post index {idx} out of range"))
        })?;
        for (dst, v) in w.text[slot * text_dim..(slot + 1) * text_dim]
            .iter_mut()
            .zip(&post.text_embedding)
        {
            *dst = f64::from(*v);
        }
        if let Some(img) = &post.image_embedding {
            for (dst, v) in w.image[slot * image_dim..(slot + 1) * image_dim].iter_mut().zip(img) {
                *dst = f64::from(*v);
            }
            w.image_mask[slot] = true;
        }
        w.pad_mask[slot] = true;
        w.source[slot] = Some(idx);
        w.timestamps[slot] = post.timestamp;
    }
    assign_tau(&mut w, indices.len(), origin);
    Ok(w)
}

fn assign_tau(w: &mut PostWindow, real: usize, origin: TauOrigin) {
    match origin {
        TauOrigin::FirstPost => {
            let t0 = w.timestamps[..real].iter().copied().fold(f64::INFINITY, f64::min);
            for slot in 0..real {
                w.tau[slot] = (w.timestamps[slot] - t0) / SECONDS_PER_HOUR;
            }
        }
        TauOrigin::PreviousPost => {
            let mut order: Vec<usize> = (0..real).collect();
            order.sort_by(|a, b| w.timestamps[*a].total_cmp(&w.timestamps[*b]).then(a.cmp(b)));
            w.tau[order[0]] = 0.0;
            for pair in order.windows(2) {
                w.tau[pair[1]] = (w.timestamps[pair[1]] - w.timestamps[pair[0]]) / SECONDS_PER_HOUR;
            }
        }
    }
}

pub fn sample_subsequence<R: Rng + ?Sized>(
    timeline: &UserTimeline,
    k: usize,
    origin: TauOrigin,
    rng: &mut R,
) -> Result<PostWindow> {
    if k < 1 {
        return Err(Error::InvalidArgument("window size K must be at least 1".into()));
    }
    let n = timeline.posts.len();
    if n == 0 {
        return Err(Error::Empty(format!("timeline {}", timeline.user_id)));
    }
    let indices: Vec<usize> = if n > k {
        let start = rng.gen_range(0..=n - k);
        (start..start + k).collect()
    } else {
        (0..n).collect()
    };
    window_from_indices(timeline, &indices, k, origin)
}

pub fn sample_random_set<R: Rng + ?Sized>(
    timeline: &UserTimeline,
    k: usize,
    origin: TauOrigin,
    rng: &mut R,
) -> Result<PostWindow> {
    if k < 1 {
        return Err(Error::InvalidArgument("window size K must be at least 1".into()));
    }
    let n = timeline.posts.len();
    if n == 0 {
        return Err(Error::Empty(format!("timeline {}", timeline.user_id)));
    }
    let indices: Vec<usize> = if n > k {
        let mut all: Vec<usize> = (0..n).collect();
        let (chosen, _) = all.partial_shuffle(rng, k);
        chosen.to_vec()
    } else {
        (0..n).collect()
    };
    window_from_indices(timeline, &indices, k, origin)
}

pub fn sample_window<R: Rng + ?Sized>(
    timeline: &UserTimeline,
    k: usize,
    mode: SamplingMode,
    origin: TauOrigin,
    rng: &mut R,
) -> Result<PostWindow> {
    match mode {
        SamplingMode::Subsequence => sample_subsequence(timeline, k, origin, rng),
        SamplingMode::RandomSet => sample_random_set(timeline, k, origin, rng),
    }
}

/// Windows stacked for one forward pass. All share `k` and embedding dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub windows: Vec<PostWindow>,
    pub k: usize,
    pub text_dim: usize,
    pub image_dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.label.as_f64()).collect()
    }

    /// `[n, k, text_dim]`.
    pub fn text_tensor(&self) -> Tensor {
        let data = self.windows.iter().flat_map(|w| w.text.iter().copied()).collect();
        Tensor::new(vec![self.len(), self.k, self.text_dim], data).expect("consistent batch")
    }

    /// `[n, k, image_dim]`.
    pub fn image_tensor(&self) -> Tensor {
        let data = self.windows.iter().flat_map(|w| w.image.iter().copied()).collect();
        Tensor::new(vec![self.len(), self.k, self.image_dim], data).expect("consistent batch")
    }

    /// `[n, k]` with 1 on real slots.
    pub fn pad_mask_tensor(&self) -> Tensor {
        self.mask_tensor(|w| &w.pad_mask)
    }

    /// `[n, k]` with 1 on image-present slots.
    pub fn image_mask_tensor(&self) -> Tensor {
        self.mask_tensor(|w| &w.image_mask)
    }

    fn mask_tensor(&self, pick: impl Fn(&PostWindow) -> &Vec<bool>) -> Tensor {
        let data = self
            .windows
            .iter()
            .flat_map(|w| pick(w).iter().map(|m| f64::from(u8::from(*m))))
            .collect();
        Tensor::new(vec![self.len(), self.k], data).expect("consistent batch")
    }
}

/// Stacks windows; padded slots and absent images carry zero values.
pub fn make_batch(windows: Vec<PostWindow>) -> Result<Batch> {
    let first = windows.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let (k, text_dim) = (first.k, first.text_dim);
    let image_dim = windows.iter().map(|w| w.image_dim).max().unwrap_or(0);
    let mut windows = windows;
    for w in &mut windows {
        if w.k != k || w.text_dim != text_dim {
            return Err(Error::shape(
                "make_batch",
                format!(
                    "window ({}, {}) differs from ({k}, {text_dim})",
                    w.k, w.text_dim
                ),
            ));
        }
        if w.image_dim != image_dim {
            // Windows without any image carry no image dimension of their own.
            if w.image_count() == 0 {
                w.image_dim = image_dim;
                w.image = vec![0.0; k * image_dim];
            } else {
                return Err(Error::shape(
                    "make_batch",
                    format!("image dim {} differs from {image_dim}", w.image_dim),
                ));
            }
        }
    }
    Ok(Batch {
        windows,
        k,
        text_dim,
        image_dim,
    })
}
