//! Central finite-difference utilities for checking reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Central difference of `f` at `x` for every coordinate.
pub fn central_difference<F>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest coordinate-wise relative error between two gradients.
///
/// The denominator is floored at `floor` so that coordinates whose true
/// gradient is zero are judged on absolute error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function of several input tensors
/// against central differences. `build` records the function on a fresh tape
/// from leaf variables and returns the scalar output.
///
/// Returns the worst relative error over all inputs.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = central_difference(input.data(), h, |probe| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == which {
                        tape.constant(Tensor::new(t.shape().to_vec(), probe.to_vec()).expect("same shape"))
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let out = build(&mut tape, &vars)?;
            Ok(tape.value(out).data()[0])
        })?;
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
    }
    Ok(worst)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("valid shape")
}

/// Worst relative error of every tape primitive on randomly shaped inputs
/// drawn from `seed`. Each output is reduced to a scalar through fixed random
/// weights so every coordinate gets a distinct upstream gradient.
pub fn primitive_suite(seed: u64, h: f64, floor: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(2..6);
    let c = rng.gen_range(2..6);
    let n = rng.gen_range(1..5);
    let a = random(&[r, c], &mut rng);
    let b = random(&[c, n], &mut rng);
    let a2 = random(&[r, c], &mut rng);
    let bias = random(&[c], &mut rng);
    let bias2 = random(&[c], &mut rng);
    // Enough weights for the widest output (three-way column concat).
    let weights = random(&[5 * 3 * 5, 1], &mut rng).into_data();
    let soft_mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.gen_bool(0.3) { f64::NEG_INFINITY } else { rng.gen_range(-1.0..1.0) })
        .collect();
    let mut row_keep: Vec<bool> = (0..r).map(|_| rng.gen_bool(0.6)).collect();
    row_keep[0] = true;
    let mut col_keep: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.6)).collect();
    col_keep[c - 1] = true;
    let factors: Vec<f64> = (0..r).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let ids: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..r)).collect();
    let away: Vec<f64> = a.data().iter().map(|v| v.signum() * (0.1 + v.abs())).collect();
    let away = Tensor::new(vec![r, c], away)?;
    let logits = random(&[r], &mut rng);
    let targets: Vec<f64> = (0..r).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let drop_seed = rng.gen::<u64>();

    let check = |inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        check_gradients(inputs, h, floor, |t, v| {
            let y = f(t, v)?;
            let len: usize = t.shape(y).iter().product();
            let w = t.constant(Tensor::new(t.shape(y).to_vec(), weights[..len].to_vec())?);
            let p = t.mul(y, w)?;
            t.sum(p)
        })
    };
    let zero_c = Tensor::zeros(&[c]);
    Ok(vec![
        ("matmul", check(&[a.clone(), b.clone()], &|t, v| t.matmul(v[0], v[1]))?),
        ("add", check(&[a.clone(), a2.clone()], &|t, v| t.add(v[0], v[1]))?),
        ("add_bias", check(&[a.clone(), bias.clone()], &|t, v| t.add_bias(v[0], v[1]))?),
        ("add_scalar", check(&[a.clone()], &|t, v| t.add_scalar(v[0], 0.7))?),
        ("mul", check(&[a.clone(), a2.clone()], &|t, v| t.mul(v[0], v[1]))?),
        ("scale", check(&[a.clone()], &|t, v| t.scale(v[0], -1.3))?),
        ("scale_rows", check(&[a.clone()], &|t, v| t.scale_rows(v[0], &factors))?),
        ("concat0", check(&[a.clone(), a2.clone()], &|t, v| t.concat(&[v[0], v[1]], 0))?),
        ("concat1", check(&[a.clone(), a2.clone()], &|t, v| t.concat(&[v[0], v[1], v[0]], 1))?),
        ("slice", check(&[a.clone()], &|t, v| t.slice(v[0], 1, 1, c - 1))?),
        ("transpose", check(&[a.clone()], &|t, v| t.transpose(v[0]))?),
        ("softmax", check(&[a.clone()], &|t, v| t.softmax(v[0], None))?),
        ("softmax_masked", check(&[a.clone()], &|t, v| t.softmax(v[0], Some(&soft_mask)))?),
        ("layer_norm", check(&[a.clone(), bias.clone(), bias2.clone()], &|t, v| {
            t.layer_norm(v[0], v[1], v[2], super::LAYER_NORM_EPS)
        })?),
        ("layer_norm_gain", check(&[a.clone(), bias.clone(), a2.clone()], &|t, v| {
            let z = t.constant(zero_c.clone());
            let y = t.layer_norm(v[0], v[1], z, super::LAYER_NORM_EPS)?;
            t.mul(y, v[2])
        })?),
        ("relu", check(&[away.clone()], &|t, v| t.relu(v[0]))?),
        ("gelu", check(&[a.clone()], &|t, v| t.gelu(v[0]))?),
        ("sigmoid", check(&[a.clone()], &|t, v| t.sigmoid(v[0]))?),
        ("sin", check(&[a.clone()], &|t, v| t.sin(v[0]))?),
        ("reciprocal", check(&[a.clone()], &|t, v| {
            let y = t.mul(v[0], v[0])?;
            let y = t.add_scalar(y, 0.5)?;
            t.reciprocal(y)
        })?),
        ("masked_mean0", check(&[a.clone()], &|t, v| t.masked_mean(v[0], 0, &row_keep))?),
        ("masked_mean1", check(&[a.clone()], &|t, v| t.masked_mean(v[0], 1, &col_keep))?),
        ("dropout", check(&[a.clone()], &|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
            t.dropout(v[0], 0.3, &mut rng, true)
        })?),
        ("embedding", check(&[a.clone()], &|t, v| t.embedding_lookup(v[0], &ids))?),
        ("sum", check(&[a.clone()], &|t, v| t.sum(v[0]))?),
        ("bce", check(&[logits.clone()], &|t, v| t.bce_with_logits(v[0], &targets))?),
    ])
}
