//! Per-post positional vectors: time2vec over relative posting time, learned
//! index embeddings, or none at all.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::sampling::{PostWindow, SamplingMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    Time2Vec,
    Learned,
    Zero,
}

impl PositionalMode {
    pub const ALL: [PositionalMode; 3] = [Self::Time2Vec, Self::Learned, Self::Zero];

    /// Ordered encodings read consecutive posts; the set encoding reads a
    /// random sample.
    pub fn sampling(self) -> SamplingMode {
        match self {
            Self::Time2Vec | Self::Learned => SamplingMode::Subsequence,
            Self::Zero => SamplingMode::RandomSet,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Time2Vec => "time2vec",
            Self::Learned => "learned",
            Self::Zero => "zero",
        }
    }
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time2vec" => Ok(Self::Time2Vec),
            "learned" => Ok(Self::Learned),
            "zero" => Ok(Self::Zero),
            other => Err(Error::InvalidArgument(format!("unknown positional mode {other}"))),
        }
    }
}

/// Transform applied to τ before time2vec.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeTransform {
    /// g(τ) = 1 / (τ + ε)
    #[default]
    Reciprocal,
    /// g(τ) = τ
    Identity,
}

impl TimeTransform {
    pub fn apply(self, tau: f64, epsilon: f64) -> f64 {
        match self {
            Self::Reciprocal => 1.0 / (tau + epsilon),
            Self::Identity => tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Time2VecParams {
    /// Frequencies, length `d_model`; element 0 is the linear term.
    pub omega: Vec<f64>,
    /// Phases, same length as `omega`.
    pub phi: Vec<f64>,
    pub epsilon: f64,
    pub transform: TimeTransform,
}

impl Time2VecParams {
    /// ω ~ U[-1, 1], φ ~ U[-π, π].
    pub fn init<R: Rng + ?Sized>(dim: usize, epsilon: f64, transform: TimeTransform, rng: &mut R) -> Self {
        Self {
            omega: (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            phi: (0..dim).map(|_| rng.gen_range(-PI..=PI)).collect(),
            epsilon,
            transform,
        }
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    fn validate(&self) -> Result<()> {
        if self.omega.len() != self.phi.len() || self.omega.is_empty() {
            return Err(Error::shape(
                "time2vec",
                format!("omega {} vs phi {}", self.omega.len(), self.phi.len()),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be finite and >= 0, got {tau}")));
    }
    Ok(())
}

/// Element 0 is `ω0·g(τ) + φ0`; elements `i >= 1` are `sin(ωi·g(τ) + φi)`.
pub fn time2vec(tau: f64, params: &Time2VecParams) -> Result<Vec<f64>> {
    check_tau(tau)?;
    params.validate()?;
    let g = params.transform.apply(tau, params.epsilon);
    Ok(params
        .omega
        .iter()
        .zip(&params.phi)
        .enumerate()
        .map(|(i, (w, p))| {
            let x = w * g + p;
            if i == 0 {
                x
            } else {
                x.sin()
            }
        })
        .collect())
}

/// `[k_max, d_model]` table indexed by slot position.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPositionalTable {
    pub table: Tensor,
}

impl LearnedPositionalTable {
    pub fn k_max(&self) -> usize {
        self.table.shape()[0]
    }
}

/// Positional parameters for one mode.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionalParams {
    Time2Vec(Time2VecParams),
    Learned(LearnedPositionalTable),
    Zero { dim: usize },
}

impl PositionalParams {
    pub fn mode(&self) -> PositionalMode {
        match self {
            Self::Time2Vec(_) => PositionalMode::Time2Vec,
            Self::Learned(_) => PositionalMode::Learned,
            Self::Zero { .. } => PositionalMode::Zero,
        }
    }
}

/// `[k, d_model]` positional matrix for a window. Padded slots get zero rows.
pub fn positional_vectors(window: &PostWindow, params: &PositionalParams) -> Result<Tensor> {
    let k = window.k;
    match params {
        PositionalParams::Zero { dim } => Ok(Tensor::zeros(&[k, *dim])),
        PositionalParams::Time2Vec(p) => {
            let d = p.dim();
            let mut out = vec![0.0; k * d];
            for slot in (0..k).filter(|s| window.pad_mask[*s]) {
                out[slot * d..(slot + 1) * d].copy_from_slice(&time2vec(window.tau[slot], p)?);
            }
            Tensor::new(vec![k, d], out)
        }
        PositionalParams::Learned(t) => {
            if k > t.k_max() {
                return Err(Error::InvalidArgument(format!(
                    "window size {k} exceeds learned table size {}",
                    t.k_max()
                )));
            }
            let d = t.table.shape()[1];
            let mut out = vec![0.0; k * d];
            for slot in (0..k).filter(|s| window.pad_mask[*s]) {
                let row = window.position[slot];
                out[slot * d..(slot + 1) * d].copy_from_slice(&t.table.data()[row * d..(row + 1) * d]);
            }
            Tensor::new(vec![k, d], out)
        }
    }
}

/// Differentiable time2vec rows for the real slots of a window.
///
/// `omega` is `[1, d]`, `phi` is `[d]`. `slot_factors` holds 1 on real slots
/// and 0 on padded ones.
pub(crate) fn time2vec_on_tape(
    tape: &mut Tape,
    omega: Var,
    phi: Var,
    tau: &[f64],
    slot_factors: &[f64],
    epsilon: f64,
    transform: TimeTransform,
) -> Result<Var> {
    let k = tau.len();
    let d = tape.shape(omega)[1];
    let clean: Vec<f64> = tau
        .iter()
        .zip(slot_factors)
        .map(|(t, f)| if *f == 0.0 { 0.0 } else { *t })
        .collect();
    for t in &clean {
        check_tau(*t)?;
    }
    let tau_col = tape.constant(Tensor::new(vec![k, 1], clean)?);
    let g = match transform {
        TimeTransform::Reciprocal => {
            let shifted = tape.add_scalar(tau_col, epsilon)?;
            tape.reciprocal(shifted)?
        }
        TimeTransform::Identity => tau_col,
    };
    let pre = tape.matmul(g, omega)?;
    let pre = tape.add_bias(pre, phi)?;
    let rows = if d > 1 {
        let linear = tape.slice(pre, 1, 0, 1)?;
        let periodic = tape.slice(pre, 1, 1, d - 1)?;
        let periodic = tape.sin(periodic)?;
        tape.concat(&[linear, periodic], 1)?
    } else {
        pre
    };
    tape.scale_rows(rows, slot_factors)
}

/// Differentiable learned-table rows, zero on padded slots.
pub(crate) fn learned_on_tape(
    tape: &mut Tape,
    table: Var,
    positions: &[usize],
    slot_factors: &[f64],
) -> Result<Var> {
    let k_max = tape.shape(table)[0];
    if positions.len() > k_max {
        return Err(Error::InvalidArgument(format!(
            "window size {} exceeds learned table size {k_max}",
            positions.len()
        )));
    }
    let rows = tape.embedding_lookup(table, positions)?;
    tape.scale_rows(rows, slot_factors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{window_from_indices, TauOrigin};
    use crate::store::{Label, PostRecord, UserTimeline};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(dim: usize, omega: f64, phi: f64) -> Time2VecParams {
        Time2VecParams {
            omega: vec![omega; dim],
            phi: vec![phi; dim],
            epsilon: 1.0,
            transform: TimeTransform::Reciprocal,
        }
    }

    fn timeline(gaps_h: &[f64]) -> UserTimeline {
        let mut t = 0.0;
        let mut posts = vec![];
        for (i, g) in std::iter::once(&0.0).chain(gaps_h).enumerate() {
            t += g * 3600.0;
            posts.push(PostRecord {
                timestamp: t,
                text_embedding: vec![i as f32],
                image_embedding: None,
            });
        }
        UserTimeline {
            user_id: "u".into(),
            label: Label::Control,
            posts,
        }
    }

    #[test]
    fn tau_zero_with_unit_frequencies() {
        let v = time2vec(0.0, &params(6, 1.0, 0.0)).unwrap();
        assert_eq!(v[0], 1.0);
        for x in &v[1..] {
            assert!((x - 0.841_471).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_frequency_and_phase_give_zero_periodic_terms() {
        let mut p = params(5, 0.0, 0.0);
        p.omega[0] = 3.0;
        for tau in [0.0, 1.5, 1e4] {
            let v = time2vec(tau, &p).unwrap();
            assert!(v[1..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn huge_tau_tends_to_sin_of_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = Time2VecParams::init(16, 1.0, TimeTransform::Reciprocal, &mut rng);
        let v = time2vec(1e9, &p).unwrap();
        assert!((v[0] - p.phi[0]).abs() < 1e-6);
        for i in 1..16 {
            assert!((v[i] - p.phi[i].sin()).abs() < 1e-6);
        }
    }

    #[test]
    fn negative_or_nonfinite_tau_is_rejected() {
        let p = params(3, 1.0, 0.0);
        assert!(time2vec(-1.0, &p).is_err());
        assert!(time2vec(f64::NAN, &p).is_err());
        assert!(time2vec(f64::INFINITY, &p).is_err());
        let mut bad = p.clone();
        bad.epsilon = 0.0;
        assert!(time2vec(1.0, &bad).is_err());
    }

    #[test]
    fn zero_mode_is_all_zero_and_learned_depends_only_on_index() {
        let a = window_from_indices(&timeline(&[1.0, 2.0, 3.0]), &[0, 1, 2], 4, TauOrigin::FirstPost).unwrap();
        let b = window_from_indices(&timeline(&[50.0, 0.1, 9.0]), &[0, 1, 2], 4, TauOrigin::FirstPost).unwrap();
        let z = positional_vectors(&a, &PositionalParams::Zero { dim: 3 }).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert_eq!(z.shape(), &[4, 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = Tensor::new(vec![8, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lp = PositionalParams::Learned(LearnedPositionalTable { table });
        let pa = positional_vectors(&a, &lp).unwrap();
        assert_eq!(pa, positional_vectors(&b, &lp).unwrap());
        assert!(pa.data()[9..].iter().all(|v| *v == 0.0));

        let wide = window_from_indices(&timeline(&[1.0]), &[0], 9, TauOrigin::FirstPost).unwrap();
        assert!(positional_vectors(&wide, &lp).is_err());
    }

    #[test]
    fn time2vec_rows_follow_their_posts_under_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PositionalParams::Time2Vec(Time2VecParams::init(5, 1.0, TimeTransform::Reciprocal, &mut rng));
        let w = window_from_indices(&timeline(&[0.5, 3.0, 10.0, 0.2]), &[0, 1, 2, 3, 4], 6, TauOrigin::FirstPost)
            .unwrap();
        let perm = [3, 0, 4, 1, 2, 5];
        let base = positional_vectors(&w, &p).unwrap();
        let moved = positional_vectors(&w.permuted(&perm), &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&moved.data()[dst * 5..(dst + 1) * 5], &base.data()[src * 5..(src + 1) * 5]);
        }
    }

    #[test]
    fn tape_time2vec_matches_pure_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Time2VecParams::init(4, 1.0, TimeTransform::Reciprocal, &mut rng);
        let tau = [0.0, 2.5, 40.0, 7.0];
        let factors = [1.0, 1.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let omega = tape.param(Tensor::new(vec![1, 4], p.omega.clone()).unwrap());
        let phi = tape.param(Tensor::new(vec![4], p.phi.clone()).unwrap());
        let rows = time2vec_on_tape(&mut tape, omega, phi, &tau, &factors, 1.0, TimeTransform::Reciprocal).unwrap();
        let v = tape.value(rows).data();
        for slot in 0..3 {
            let want = time2vec(tau[slot], &p).unwrap();
            for i in 0..4 {
                assert!((v[slot * 4 + i] - want[i]).abs() < 1e-15);
            }
        }
        assert!(v[12..].iter().all(|x| *x == 0.0));
    }
}
