use super::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the function has a kink within `step`.
    pub excluded: Vec<(usize, usize)>,
    /// First coordinate at which a non-finite value appeared.
    pub non_finite: Option<(usize, usize)>,
}

/// Magnitude below which errors are measured absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-3;

/// Checks the gradient of the scalar built by `f` at `points`.
///
/// Each point becomes a [`LeafKind::Variable`](super::LeafKind::Variable)
/// leaf. The error for a coordinate is `|a - n| / max(|a|, |n|, 1e-3)` with
/// `a` the tape gradient and `n` the central difference. A coordinate whose
/// forward and backward one-sided differences disagree by more than
/// `max(1e-2, 1e-2·|n|)` sits on a nondifferentiable point and is excluded.
pub fn gradient_check<F>(
    f: F,
    points: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-6..=1e-2).contains(&step) {
        return Err(TensorError::invalid(
            "gradient_check",
            format!("step {step} outside [1e-6, 1e-2]"),
        ));
    }
    let eval = |pts: &[Tensor]| -> Result<(f64, Tape, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.variable(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        let y = v.data()[0];
        Ok((y, tape, vars, out))
    };

    let (y0, tape, vars, out) = eval(points)?;
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        non_finite: None,
    };
    if !y0.is_finite() {
        report.passed = false;
        report.non_finite = Some((0, 0));
        return Ok(report);
    }
    let grads = tape.backward(out)?;

    let mut pts = points.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, points[i].shape());
        for j in 0..points[i].len() {
            let orig = pts[i].data()[j];
            pts[i].data_mut()[j] = orig + step;
            let (plus, ..) = eval(&pts)?;
            pts[i].data_mut()[j] = orig - step;
            let (minus, ..) = eval(&pts)?;
            pts[i].data_mut()[j] = orig;

            let a = analytic.data()[j];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                report.passed = false;
                report.non_finite.get_or_insert((i, j));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let forward = (plus - y0) / step;
            let backward = (y0 - minus) / step;
            if (forward - backward).abs() > 1e-2 * numeric.abs().max(1.0) {
                report.excluded.push((i, j));
                continue;
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed &= report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_matmul_is_exact_to_1e6() {
        let a = t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]);
        let b = t(&[3, 2], &[1.0, 0.4, -0.6, 0.9, 0.2, -1.1]);
        let r = gradient_check(
            |tp, v| {
                let m = tp.matmul(v[0], v[1])?;
                Ok(tp.sum(m))
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn sigmoid_chain_within_1e5() {
        let x = t(&[1, 4], &[0.5, -0.3, 1.7, -2.2]);
        let w = t(&[4, 3], &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, -1.0, 0.3, 0.2]);
        let r = gradient_check(
            |tp, v| {
                let h = tp.matmul(v[0], v[1])?;
                let s = tp.sigmoid(h);
                let s2 = tp.sigmoid(s);
                Ok(tp.mean(s2))
            },
            &[x, w],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = t(&[3], &[0.0, 1.0, -1.0]);
        let r = gradient_check(
            |tp, v| {
                let y = tp.relu(v[0]);
                Ok(tp.sum(y))
            },
            &[x],
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.excluded, vec![(0, 0)]);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = t(&[1], &[1.0]);
        for step in [1e-7, 0.1] {
            let r = gradient_check(|tp, v| Ok(tp.sum(v[0])), std::slice::from_ref(&x), step, 1e-6);
            assert!(matches!(r, Err(TensorError::InvalidArgument { .. })));
        }
    }

    #[test]
    fn abs_pow_gradient_away_from_zero() {
        let x = t(&[2], &[0.8, -0.4]);
        let r = gradient_check(
            |tp, v| {
                let y = tp.abs_pow(v[0], 3.0)?;
                Ok(tp.sum(y))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
