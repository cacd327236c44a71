use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BottError, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients against central differences in 64-bit.
///
/// `f` builds a graph from leaves holding `inputs` and returns any output
/// variable. The output is reduced to a scalar with fixed pseudo-random
/// weights so every output element contributes. Relative error uses a
/// denominator floor of `floor` so gradients that are zero up to rounding
/// do not inflate the ratio.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    let eval = |vals: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let value = match weights {
            Some(w) => tape.value(out).data.iter().zip(w).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        Ok((value, tape, leaves, out))
    };

    let (_, probe, _, out) = eval(inputs, None)?;
    let n_out = probe.value(out).len();
    let out_shape = probe.value(out).shape.clone();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, mut tape, leaves, out) = eval(inputs, Some(&weights))?;
    let seed = Tensor::from_vec(&out_shape, weights.clone())?;
    let grads = tape.backward_seeded(&[(out, seed)])?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut vals = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = vals[i].data[j];
            vals[i].data[j] = orig + h;
            let plus = eval(&vals, Some(&weights))?.0;
            vals[i].data[j] = orig - h;
            let minus = eval(&vals, Some(&weights))?.0;
            vals[i].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() || !analytic[j].is_finite() {
                return Err(BottError::NonFinite("gradient check"));
            }
            let denom = analytic[j].abs().max(numeric.abs()).max(floor);
            let rel = (analytic[j] - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
