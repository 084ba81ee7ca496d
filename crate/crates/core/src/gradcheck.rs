//! Central finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over the sampled coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
}

/// Compare analytic gradients against central finite differences
/// `(f(x + eps) - f(x - eps)) / (2 eps)` on a random subsample of at least
/// `min_samples` coordinates (all coordinates when there are fewer).
///
/// The per-coordinate relative error is `|a - n| / max(|a|, |n|, floor)`:
/// the floor is an absolute-tolerance guard for coordinates whose true
/// gradient sits at the finite-difference noise level. `1e-8` suits small
/// closed-form objectives; full model losses accumulate enough rounding
/// that `1e-3` (an absolute guard of `1e-7` at the `1e-4` threshold) is the
/// meaningful choice.
///
/// `f` must be a pure function of `params`; `analytic` is aligned with
/// `params`, with `None` meaning the loss does not touch that tensor (its
/// sampled coordinates are checked against an analytic zero).
pub fn grad_check(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    analytic: &[Option<Tensor>],
    eps: f64,
    min_samples: usize,
    floor: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    assert_eq!(params.len(), analytic.len(), "grad_check: misaligned gradients");
    assert!(eps > 0.0, "grad_check: eps must be positive");
    let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let samples = min_samples.min(total);

    // Sample flat coordinates without replacement when feasible.
    let coords: Vec<usize> = if total <= 4 * samples {
        let mut all: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut all);
        all.truncate(samples);
        all
    } else {
        let mut seen = alloc::collections::BTreeSet::new();
        while seen.len() < samples {
            seen.insert(rng.next_below(total));
        }
        seen.into_iter().collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
    };
    for flat in coords {
        let (pi, ci) = locate(&sizes, flat);
        let base = params[pi].data()[ci];

        work[pi].data_mut()[ci] = base + eps;
        let plus = f(&work)?;
        work[pi].data_mut()[ci] = base - eps;
        let minus = f(&work)?;
        work[pi].data_mut()[ci] = base;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: "grad_check objective" });
        }

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi].as_ref().map_or(0.0, |g| g.data()[ci]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (pi, ci);
            report.worst_pair = (a, numeric);
        }
    }
    Ok(report)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (pi, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (pi, flat);
        }
        flat -= n;
    }
    unreachable!("flat coordinate out of range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use alloc::vec;

    #[test]
    fn quadratic_is_exact() {
        // f(theta) = sum theta^2, grad = 2 theta.
        let theta = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let analytic = theta.scale(2.0);
        let mut rng = Rng::new(0);
        let report = grad_check(
            &mut |p| Ok(p[0].data().iter().map(|v| v * v).sum()),
            &[theta],
            &[Some(analytic)],
            1e-5,
            200,
            1e-8,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let theta = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        let wrong = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut rng = Rng::new(0);
        let report = grad_check(
            &mut |p| Ok(p[0].data().iter().map(|v| v * v).sum()),
            &[theta],
            &[Some(wrong)],
            1e-5,
            10,
            1e-8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn tape_route_agrees_on_a_composite() {
        let x = Tensor::new(&[4], vec![0.3, -0.2, 0.7, 0.1]).unwrap();
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.softmax_last(&v, None);
        let loss = tape.sum_all(&tape.mul(&y, &y));
        let grads = tape.backward(&loss);
        let analytic = grads.wrt(&v).unwrap().clone();
        let mut rng = Rng::new(9);
        let report = grad_check(
            &mut |p| {
                let tape = Tape::new();
                let v = tape.constant(p[0].clone());
                let y = tape.softmax_last(&v, None);
                Ok(tape.sum_all(&tape.mul(&y, &y)).value().item())
            },
            &[x],
            &[Some(analytic)],
            1e-6,
            200,
            1e-8,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
    }
}
