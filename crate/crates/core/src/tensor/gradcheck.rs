//! Central finite-difference verification of tape gradients.

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error. Gradients smaller than this
    /// are compared in absolute terms.
    pub floor: f64,
    /// Corrupt one backward rule on the analytic tape (sensitivity checks).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-6,
            floor: 1e-3,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: usize,
    pub max_rel_err: f64,
    /// Flat index of the element with the largest error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradcheck function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of scalar `f` with respect to every element of
/// every leaf against `(f(x+h) − f(x−h)) / 2h`.
///
/// `f` must be deterministic: it is evaluated twice at the base point and a
/// bitwise difference is reported as [`Error::Check`].
pub fn gradcheck<F>(f: F, leaves: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let base = evaluate(&f, leaves)?;
    let again = evaluate(&f, leaves)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Check(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut tape = Tape::new();
    if let Some(kind) = opts.fault {
        tape.inject_backward_fault(kind);
    }
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut report = GradcheckReport {
        leaves: Vec::with_capacity(leaves.len()),
        max_rel_err: 0.0,
        tol: opts.tol,
    };
    for (li, leaf) in leaves.iter().enumerate() {
        let mut check = LeafCheck {
            leaf: li,
            max_rel_err: 0.0,
            worst: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..leaf.numel() {
            let x0 = leaf.data()[e];
            work[li].data_mut()[e] = x0 + opts.step;
            let fp = evaluate(&f, &work)?;
            work[li].data_mut()[e] = x0 - opts.step;
            let fm = evaluate(&f, &work)?;
            work[li].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[li][e];
            let err = relative_error(a, numeric, opts.floor);
            if err > check.max_rel_err || e == 0 {
                check.max_rel_err = err;
                check.worst = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.leaves.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_sum_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
        let opts = GradcheckOptions {
            tol: 1e-7,
            ..Default::default()
        };
        let rep = gradcheck(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                t.sum(m)
            },
            &leaves,
            &opts,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn softmax_sum_degenerates_gracefully() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = [random(&mut rng, &[10, 10])];
        let rep = gradcheck(
            |t, v| {
                let s = t.softmax_rows(v[0])?;
                t.sum(s)
            },
            &leaves,
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let leaves = [Tensor::vector(vec![1.0])];
        let err = gradcheck(
            |t, v| {
                counter.set(counter.get() + 1.0);
                let s = t.scale(v[0], counter.get())?;
                t.sum(s)
            },
            &leaves,
            &GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Check(_)));
    }

    #[test]
    fn fault_is_detected() {
        let leaves = [Tensor::vector(vec![0.3, -0.2])];
        let opts = GradcheckOptions {
            fault: Some(OpKind::Sigmoid),
            ..Default::default()
        };
        let rep = gradcheck(
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.sum(s)
            },
            &leaves,
            &opts,
        )
        .unwrap();
        assert!(!rep.passed());
    }
}
