//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates probed per input; all of them when the input is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl CheckOptions {
    pub fn new(step: f64, seed: u64) -> Self {
        CheckOptions {
            step,
            max_coords: 48,
            seed,
        }
    }
}

/// Worst-case relative error per differentiable input (`None` for constants).
#[derive(Clone, Debug)]
pub struct GradReport {
    pub per_input: Vec<Option<f64>>,
    /// Coordinates passed over because the ±step probes changed a kink
    /// branch.
    pub skipped: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().flatten().fold(0.0, |m, &e| m.max(e))
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Candidate coordinates in random order: all of them for small tensors,
/// otherwise a random subset large enough to survive kink rejections.
pub fn sample_coords(n: usize, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let want = (max * 8).min(n);
    sample(rng, n, want).into_vec()
}

/// A scalar evaluation together with its branch signature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub branches: u64,
}

/// Central difference from the `+step` and `−step` probes, or `None` when
/// either probe left the smooth piece `base` lies on.
pub fn central_difference(base: u64, plus: Probe, minus: Probe, width: f64) -> Option<f64> {
    (plus.branches == base && minus.branches == base).then(|| (plus.value - minus.value) / width)
}

/// Probes coordinates of one tensor until `max` smooth ones are found.
/// When every candidate straddles a kink the probes are repeated once at a
/// tenth of the step. Returns the probed coordinates, their numeric
/// partials and the number of probes skipped.
pub fn probe_tensor<E: Element>(
    value: &Tensor<E>,
    base: u64,
    opts: &CheckOptions,
    rng: &mut impl Rng,
    mut eval_at: impl FnMut(usize, E) -> Result<Probe>,
) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let candidates = sample_coords(value.numel(), opts.max_coords, rng);
    let (mut coords, mut n, mut skipped) = (Vec::new(), Vec::new(), 0);
    for step in [opts.step, opts.step / 10.0] {
        for &j in &candidates {
            if coords.len() == opts.max_coords {
                break;
            }
            let x = value.data()[j];
            let (plus, minus) = (x + E::lit(step), x - E::lit(step));
            let fp = eval_at(j, plus)?;
            let fm = eval_at(j, minus)?;
            match central_difference(base, fp, fm, (plus - minus).as_f64()) {
                Some(d) => {
                    coords.push(j);
                    n.push(d);
                }
                None => skipped += 1,
            }
        }
        if !coords.is_empty() {
            break;
        }
    }
    Ok((coords, n, skipped))
}

/// Checks the backward rules used by `build` against central differences.
///
/// The output of `build` is contracted with fixed random weights to a scalar
/// so every output element participates. Coordinates whose probes cross a
/// kink are replaced by others.
pub fn check_op<E, F>(inputs: &[Tensor<E>], differentiable: &[bool], build: F, opts: CheckOptions) -> Result<GradReport>
where
    E: Element,
    F: Fn(&mut Tape<E>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let run = |tape: &mut Tape<E>, values: &[Tensor<E>]| -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = values
            .iter()
            .zip(differentiable)
            .map(|(t, &d)| if d { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Ok((build(tape, &vars)?, vars))
    };

    let mut tape = Tape::new();
    let (out, vars) = run(&mut tape, inputs)?;
    let probe_weights = if tape.value(out).is_scalar() {
        Tensor::full(tape.shape(out), E::one())
    } else {
        Tensor::random_uniform(tape.shape(out), -1.0, 1.0, &mut rng)
    };
    let base = tape.branch_signature();
    let loss = tape.dot_const(out, probe_weights.clone())?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<E>]| -> Result<Probe> {
        let mut t = Tape::new();
        let (o, _) = run(&mut t, values)?;
        let value = t.value(o).data().iter().zip(probe_weights.data()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
        Ok(Probe { value, branches: t.branch_signature() })
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut skipped = 0;
    for (i, (&d, v)) in differentiable.iter().zip(&vars).enumerate() {
        if !d {
            per_input.push(None);
            continue;
        }
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic_t = grads.wrt(*v).unwrap_or(&zeros);
        let mut probe = inputs.to_vec();
        let (coords, n, s) = probe_tensor(&inputs[i], base, &opts, &mut rng, |j, x| {
            probe[i].data_mut()[j] = x;
            let r = eval(&probe);
            probe[i].data_mut()[j] = inputs[i].data()[j];
            r
        })?;
        let a: Vec<f64> = coords.iter().map(|&j| analytic_t.data()[j].as_f64()).collect();
        skipped += s;
        per_input.push(Some(if a.is_empty() { f64::INFINITY } else { relative_error(&a, &n) }));
    }
    Ok(GradReport { per_input, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_and_negsq_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random_uniform(&[5, 3, 3], -2.0, 2.0, &mut rng);
        let report = check_op(
            &[x],
            &[true],
            |t, v| {
                let n = t.negative_square(v[0]);
                t.channel_softmax(n)
            },
            CheckOptions::new(1e-3, 7),
        )
        .unwrap();
        assert!(report.worst() < 1e-6, "{report:?}");
    }

    #[test]
    fn detects_faulty_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random_uniform(&[2, 3, 3], 0.1, 2.0, &mut rng);
        let report = check_op(
            &[x],
            &[true],
            |t, v| {
                t.inject_fault("negative_square");
                Ok(t.negative_square(v[0]))
            },
            CheckOptions::new(1e-3, 7),
        )
        .unwrap();
        assert!(report.worst() > 0.1);
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // Inputs within one step of the kink would give a secant slope
        // between the two branches; they must be replaced, not scored.
        let x = Tensor::<f64>::new(vec![1, 2, 4], vec![0.5, -0.5, 1e-4, -1e-4, 2.0, -2.0, 5e-4, 0.3]).unwrap();
        let report = check_op(&[x], &[true], |t, v| Ok(t.leaky_relu(v[0], 0.1)), CheckOptions::new(1e-3, 3)).unwrap();
        assert_eq!(report.skipped, 3);
        assert!(report.worst() < 1e-9, "{report:?}");
    }
}
