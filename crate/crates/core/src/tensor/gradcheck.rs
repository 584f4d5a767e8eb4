use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of
    /// `|analytic - numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose `±eps` probes cross a kink (a max-pool argmax or a
    /// relu sign flips), where the derivative is one-sided.
    pub skipped: usize,
}

fn evaluate<F>(f: &mut F, inputs: &[Tensor]) -> Result<(f64, Vec<usize>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new().with_kink_recording(true);
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    Ok((v, g.kink_pattern().to_vec()))
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// coordinate of every input.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-6, 1e-4]"),
        });
    }

    let mut g = Graph::new().with_kink_recording(true);
    let vars: Vec<Var> = inputs.iter().cloned().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            msg: format!("f must return a scalar, got shape {:?}", g.shape(out)),
        });
    }
    let base_pattern = g.kink_pattern().to_vec();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let x0 = t.data()[k];
            probe[ti].data_mut()[k] = x0 + eps;
            let (fp, pp) = evaluate(&mut f, &probe)?;
            probe[ti].data_mut()[k] = x0 - eps;
            let (fm, pm) = evaluate(&mut f, &probe)?;
            probe[ti].data_mut()[k] = x0;

            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][k];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0, 6.0]);

        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn rejects_non_scalar_output_and_bad_eps() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|g, v| g.tanh(v[0]), &[x.clone()], 1e-5).is_err());
        assert!(grad_check(|g, v| g.sum(v[0]), &[x], 1e-2).is_err());
    }

    #[test]
    fn maxpool_tie_coordinates_are_skipped() {
        // Cells 0 and 1 of the window sit within eps of each other; probing
        // either flips the argmax, so neither is checked.
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0 + 1e-7, 0.0, -1.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let p = g.maxpool2d(v[0])?;
                let s = g.mul(p, p)?;
                g.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, 2);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }
}
