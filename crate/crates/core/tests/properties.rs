mod common;

use std::collections::HashSet;

use common::{random_corpus, random_timeline};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use temt::sampling::{sample_random_set, sample_subsequence, TauOrigin};
use temt::store::{decode_corpus, encode_corpus, read_corpus, write_corpus};
use temt::temporal::{time2vec, Time2VecParams, TimeTransform};

fn params(omega: Vec<f64>, phi: Vec<f64>, transform: TimeTransform) -> Time2VecParams {
    Time2VecParams {
        omega,
        phi,
        epsilon: 1.0,
        transform,
    }
}

fn omega_phi(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-10.0f64..10.0, d),
        prop::collection::vec(-std::f64::consts::PI..std::f64::consts::PI, d),
    )
}

proptest! {
    #[test]
    fn periodic_elements_are_bounded(
        (omega, phi) in (1usize..33).prop_flat_map(omega_phi),
        tau in 0.0f64..1e7,
        identity in any::<bool>(),
    ) {
        let t = if identity { TimeTransform::Identity } else { TimeTransform::Reciprocal };
        let v = time2vec(tau, &params(omega, phi, t)).unwrap();
        prop_assert!(v.iter().all(|x| x.is_finite()));
        prop_assert!(v[1..].iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn power_of_two_time_scale_is_absorbed_exactly(
        (omega, phi) in (1usize..17).prop_flat_map(omega_phi),
        tau in 0.0f64..1e4,
        e in -20i32..20,
    ) {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = omega.iter().map(|w| w * c).collect();
        let a = time2vec(c * tau, &params(omega, phi.clone(), TimeTransform::Identity)).unwrap();
        let b = time2vec(tau, &params(scaled, phi, TimeTransform::Identity)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn any_time_scale_is_absorbed_to_rounding(
        (omega, phi) in (1usize..17).prop_flat_map(omega_phi),
        tau in 0.0f64..1e4,
        c in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = omega.iter().map(|w| w * c).collect();
        let a = time2vec(c * tau, &params(omega.clone(), phi.clone(), TimeTransform::Identity)).unwrap();
        let b = time2vec(tau, &params(scaled, phi.clone(), TimeTransform::Identity)).unwrap();
        for i in 0..a.len() {
            let arg = (omega[i] * c * tau).abs() + phi[i].abs();
            prop_assert!((a[i] - b[i]).abs() <= 4.0 * f64::EPSILON * arg.max(1.0));
        }
    }

    #[test]
    fn subsequence_windows_are_consecutive_and_anchored(
        seed in any::<u64>(), n in 1usize..60, k in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tl = random_timeline(&mut rng, "u", n, 3, 2, 0.5);
        let w = sample_subsequence(&tl, k, TauOrigin::FirstPost, &mut rng).unwrap();
        let src: Vec<usize> = w.source.iter().flatten().copied().collect();
        prop_assert_eq!(src.len(), n.min(k));
        prop_assert!(src.windows(2).all(|p| p[1] == p[0] + 1));
        prop_assert_eq!(w.tau[0], 0.0);
        prop_assert!(w.tau[..src.len()].windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(w.pad_mask.iter().skip(src.len()).all(|m| !m));
    }

    #[test]
    fn random_sets_are_distinct_posts(
        seed in any::<u64>(), n in 1usize..60, k in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tl = random_timeline(&mut rng, "u", n, 3, 2, 0.5);
        let w = sample_random_set(&tl, k, TauOrigin::FirstPost, &mut rng).unwrap();
        let src: Vec<usize> = w.source.iter().flatten().copied().collect();
        prop_assert_eq!(src.len(), n.min(k));
        prop_assert_eq!(src.iter().collect::<HashSet<_>>().len(), src.len());
        prop_assert!(w.tau.iter().all(|t| *t >= 0.0));
        prop_assert!(w.tau[..src.len()].iter().any(|t| *t == 0.0));
    }
}

#[test]
fn random_corpora_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let (tl, man) = random_corpus(seed);
        let bytes = encode_corpus(&tl, &man).unwrap();
        assert_eq!(decode_corpus(&bytes, &man).unwrap(), tl);
        let path = dir.path().join(format!("c{seed}"));
        write_corpus(&tl, &man, &path).unwrap();
        let (back, man2) = read_corpus(&path).unwrap();
        assert_eq!(man2, man);
        assert_eq!(encode_corpus(&back, &man2).unwrap(), bytes);
    }
}
