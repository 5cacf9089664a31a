//! On-disk corpus of user timelines with precomputed post embeddings.
//!
//! A corpus directory holds `manifest.json` (dimensions and split
//! assignment) and `corpus.bin`, a little-endian stream:
//!
//! ```text
//! b"TEMT" | u32 version=1 | u32 text_dim | u32 image_dim | u32 user_count
//! per user: u16 id_len | id (UTF-8) | u8 label | u32 post_count
//! per post: f64 timestamp_seconds | u8 has_image | f32[text_dim] | f32[image_dim] iff has_image
//! ```
//!
//! Missing images are stored as absent (a zero presence byte), never as a
//! zero vector.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TEMT";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.bin";

/// Binary class label. `Positive` is the class of interest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Control,
    Positive,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Control => 0.0,
            Label::Positive => 1.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Control
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Positive),
            other => Err(format!("label byte {other} is not 0 or 1")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostRecord {
    /// Seconds since the epoch.
    pub timestamp: f64,
    pub text_embedding: Vec<f32>,
    pub image_embedding: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserTimeline {
    pub user_id: String,
    pub label: Label,
    /// Sorted by timestamp, ascending.
    pub posts: Vec<PostRecord>,
}

impl UserTimeline {
    pub fn validate(&self, text_dim: usize, image_dim: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidTimeline {
            user_id: self.user_id.clone(),
            reason,
        };
        if self.posts.is_empty() {
            return Err(bad("no posts".into()));
        }
        if self.user_id.len() > u16::MAX as usize {
            return Err(bad("user_id longer than 65535 bytes".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, post) in self.posts.iter().enumerate() {
            if !post.timestamp.is_finite() {
                return Err(bad(format!("post {i} has a non-finite timestamp")));
            }
            if post.timestamp < prev {
                return Err(bad("unsorted timestamps".into()));
            }
            prev = post.timestamp;
            if post.text_embedding.len() != text_dim {
                return Err(Error::DimensionMismatch(format!(
                    "user {} post {i}: text embedding has {} components, expected {text_dim}",
                    self.user_id,
                    post.text_embedding.len()
                )));
            }
            if post.text_embedding.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("post {i} has a non-finite text embedding component")));
            }
            if let Some(img) = &post.image_embedding {
                if img.len() != image_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "user {} post {i}: image embedding has {} components, expected {image_dim}",
                        self.user_id,
                        img.len()
                    )));
                }
                if img.iter().any(|v| !v.is_finite()) {
                    return Err(bad(format!("post {i} has a non-finite image embedding component")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub text_dim: usize,
    pub image_dim: usize,
    pub splits: BTreeMap<String, Split>,
    /// Free-form producer metadata (encoder names, pooling, generator config).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl CorpusManifest {
    pub fn new(text_dim: usize, image_dim: usize, splits: BTreeMap<String, Split>) -> Self {
        Self {
            version: FORMAT_VERSION,
            text_dim,
            image_dim,
            splits,
            metadata: BTreeMap::new(),
        }
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for s in self.splits.values() {
            match s {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    pub fn split_of(&self, user_id: &str) -> Option<Split> {
        self.splits.get(user_id).copied()
    }
}

/// Timelines of one split, in corpus order.
pub fn select_split<'a>(
    timelines: &'a [UserTimeline],
    manifest: &CorpusManifest,
    split: Split,
) -> Vec<&'a UserTimeline> {
    timelines
        .iter()
        .filter(|t| manifest.split_of(&t.user_id) == Some(split))
        .collect()
}

fn validate_corpus(timelines: &[UserTimeline], manifest: &CorpusManifest) -> Result<()> {
    if manifest.text_dim == 0 || manifest.image_dim == 0 {
        return Err(Error::DimensionMismatch(
            "text_dim and image_dim must be positive".into(),
        ));
    }
    let mut seen = HashSet::new();
    for t in timelines {
        if !seen.insert(t.user_id.as_str()) {
            return Err(Error::DuplicateUser(t.user_id.clone()));
        }
        t.validate(manifest.text_dim, manifest.image_dim)?;
        if !manifest.splits.contains_key(&t.user_id) {
            return Err(Error::Corrupt(format!(
                "user {} has no split assignment",
                t.user_id
            )));
        }
    }
    if let Some(extra) = manifest.splits.keys().find(|id| !seen.contains(id.as_str())) {
        return Err(Error::Corrupt(format!(
            "manifest assigns a split to unknown user {extra}"
        )));
    }
    Ok(())
}

/// Serialises the corpus body (everything in `corpus.bin`).
pub fn encode_corpus(timelines: &[UserTimeline], manifest: &CorpusManifest) -> Result<Vec<u8>> {
    validate_corpus(timelines, manifest)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(manifest.text_dim).map_err(|_| dim_overflow())?.to_le_bytes());
    buf.extend_from_slice(&u32::try_from(manifest.image_dim).map_err(|_| dim_overflow())?.to_le_bytes());
    buf.extend_from_slice(&(timelines.len() as u32).to_le_bytes());
    for t in timelines {
        buf.extend_from_slice(&(t.user_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.user_id.as_bytes());
        buf.push(t.label.into());
        buf.extend_from_slice(&(t.posts.len() as u32).to_le_bytes());
        for p in &t.posts {
            buf.extend_from_slice(&p.timestamp.to_le_bytes());
            buf.push(u8::from(p.image_embedding.is_some()));
            for v in &p.text_embedding {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(img) = &p.image_embedding {
                for v in img {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

fn dim_overflow() -> Error {
    Error::DimensionMismatch("dimension does not fit in u32".into())
}

pub fn write_corpus(timelines: &[UserTimeline], manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let body = encode_corpus(timelines, manifest)?;
    fs::create_dir_all(path)?;
    let mut f = BufWriter::new(fs::File::create(path.join(CORPUS_FILE))?);
    f.write_all(&body)?;
    f.flush()?;
    let manifest_json = serde_json::to_string_pretty(manifest)?;
    fs::write(path.join(MANIFEST_FILE), manifest_json)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses a `corpus.bin` body, checking it against the manifest.
pub fn decode_corpus(bytes: &[u8], manifest: &CorpusManifest) -> Result<Vec<UserTimeline>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let text_dim = r.u32("text_dim")? as usize;
    let image_dim = r.u32("image_dim")? as usize;
    if text_dim != manifest.text_dim || image_dim != manifest.image_dim {
        return Err(Error::DimensionMismatch(format!(
            "corpus.bin declares ({text_dim}, {image_dim}), manifest declares ({}, {})",
            manifest.text_dim, manifest.image_dim
        )));
    }
    let users = r.u32("user_count")? as usize;
    let mut timelines = Vec::with_capacity(users.min(1 << 16));
    for _ in 0..users {
        let id_len = r.u16("id_length")? as usize;
        let user_id = std::str::from_utf8(r.take(id_len, "user_id")?)
            .map_err(|_| Error::Corrupt("user_id is not UTF-8".into()))?
            .to_owned();
        let label = Label::try_from(r.u8("label")?).map_err(Error::Corrupt)?;
        let post_count = r.u32("post_count")? as usize;
        let mut posts = Vec::with_capacity(post_count.min(1 << 16));
        for _ in 0..post_count {
            let timestamp = r.f64("timestamp")?;
            let has_image = match r.u8("has_image")? {
                0 => false,
                1 => true,
                other => return Err(Error::Corrupt(format!("has_image byte {other}"))),
            };
            let text_embedding = r.f32s(text_dim, "text embedding")?;
            let image_embedding = if has_image {
                Some(r.f32s(image_dim, "image embedding")?)
            } else {
                None
            };
            posts.push(PostRecord {
                timestamp,
                text_embedding,
                image_embedding,
            });
        }
        timelines.push(UserTimeline {
            user_id,
            label,
            posts,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last user",
            bytes.len() - r.pos
        )));
    }
    validate_corpus(&timelines, manifest)?;
    Ok(timelines)
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let mpath = path.join(MANIFEST_FILE);
    if !mpath.is_file() {
        return Err(Error::ManifestNotFound(path.to_path_buf()));
    }
    let manifest: CorpusManifest = serde_json::from_str(&fs::read_to_string(mpath)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    Ok(manifest)
}

pub fn read_corpus(path: &Path) -> Result<(Vec<UserTimeline>, CorpusManifest)> {
    let manifest = read_manifest(path)?;
    let bytes = fs::read(path.join(CORPUS_FILE))?;
    let timelines = decode_corpus(&bytes, &manifest)?;
    Ok((timelines, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub posts: usize,
    pub posts_per_user_min: usize,
    pub posts_per_user_max: usize,
    pub posts_per_user_mean: f64,
    pub posts_per_user_median: f64,
    /// Mean gap between consecutive posts, averaged first within each user
    /// and then across users with at least two posts.
    pub mean_gap_hours: Option<f64>,
    pub image_fraction: f64,
}

/// Mean gap in hours between consecutive posts, `None` for single-post users.
pub fn user_mean_gap_hours(timeline: &UserTimeline) -> Option<f64> {
    let p = &timeline.posts;
    if p.len() < 2 {
        return None;
    }
    Some((p[p.len() - 1].timestamp - p[0].timestamp) / 3600.0 / (p.len() - 1) as f64)
}

pub fn corpus_stats(timelines: &[UserTimeline]) -> Result<CorpusStats> {
    if timelines.is_empty() {
        return Err(Error::Empty("corpus".into()));
    }
    let mut counts: Vec<usize> = timelines.iter().map(|t| t.posts.len()).collect();
    counts.sort_unstable();
    let posts: usize = counts.iter().sum();
    let n = counts.len();
    let median = if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    let gaps: Vec<f64> = timelines.iter().filter_map(user_mean_gap_hours).collect();
    let mean_gap_hours = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    let images = timelines
        .iter()
        .flat_map(|t| &t.posts)
        .filter(|p| p.image_embedding.is_some())
        .count();
    Ok(CorpusStats {
        users: n,
        posts,
        posts_per_user_min: counts[0],
        posts_per_user_max: counts[n - 1],
        posts_per_user_mean: posts as f64 / n as f64,
        posts_per_user_median: median,
        mean_gap_hours,
        image_fraction: if posts == 0 { 0.0 } else { images as f64 / posts as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower_hours: f64,
    pub upper_hours: f64,
    pub users: usize,
}

/// Histogram of per-user mean gaps with `bins` equal-width bins up to the
/// largest observed mean gap.
pub fn gap_histogram(timelines: &[UserTimeline], bins: usize) -> Vec<HistogramBin> {
    let gaps: Vec<f64> = timelines.iter().filter_map(user_mean_gap_hours).collect();
    if gaps.is_empty() || bins == 0 {
        return Vec::new();
    }
    let max = gaps.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let width = max / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lower_hours: i as f64 * width,
            upper_hours: (i + 1) as f64 * width,
            users: 0,
        })
        .collect();
    for g in gaps {
        let idx = ((g / width) as usize).min(bins - 1);
        out[idx].users += 1;
    }
    out
}
