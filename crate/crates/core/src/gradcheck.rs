//! Central-difference verification of tape gradients.
//!
//! The relative error per coordinate is `|a − n| / max(|a|, |n|, REL_FLOOR)`,
//! where `a` is the analytic and `n` the numeric derivative. The floor keeps
//! coordinates whose true derivative is (near) zero from dividing roundoff by
//! roundoff.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const REL_FLOOR: f64 = 1e-4;

/// A scalar function recorded on a tape, evaluable at any precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError>;
}

impl<F> Objective for F
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    /// Closures are 64-bit only; other precisions must implement the trait.
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var, TensorError> {
        let tape64 = (tape as &mut dyn std::any::Any)
            .downcast_mut::<Tape<f64>>()
            .ok_or(TensorError::Domain {
                op: "grad_check",
                detail: "closure objectives run in 64-bit only".into(),
            })?;
        self(tape64, inputs)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords: usize,
}

fn eval_value<O: Objective>(f: &O, points: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

fn analytic<T: Scalar, O: Objective>(f: &O, points: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, TensorError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.cast())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).cast()).collect())
}

fn compare<O: Objective>(f: &O, points: &[Tensor<f64>], h: f64, grads: &[Tensor<f64>]) -> Result<GradCheckReport, TensorError> {
    if h.is_nan() || h <= 0.0 {
        return Err(TensorError::Domain {
            op: "grad_check",
            detail: format!("step must be positive, got {h}"),
        });
    }
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords: 0,
    };
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let x = points[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let fp = eval_value(f, &work)?;
            work[i].data_mut()[j] = x - h;
            let fm = eval_value(f, &work)?;
            work[i].data_mut()[j] = x;
            let num = (fp - fm) / (2.0 * h);
            let a = g.data()[j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// 64-bit analytic gradient against 64-bit central differences.
pub fn grad_check<O: Objective>(f: &O, points: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, TensorError> {
    let grads = analytic::<f64, O>(f, points)?;
    compare(f, points, h, &grads)
}

/// 32-bit analytic gradient against the same 64-bit central differences.
pub fn grad_check_f32<O: Objective>(f: &O, points: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, TensorError> {
    let grads = analytic::<f32, O>(f, points)?;
    compare(f, points, h, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let f = |tape: &mut Tape<f64>, x: &[Var]| {
            let s = tape.square(x[0])?;
            tape.sum(s)
        };
        let p = [Tensor::scalar(3.0)];
        let r = grad_check(&f, &p, 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let f = |tape: &mut Tape<f64>, x: &[Var]| tape.square(x[0]);
        let p = [Tensor::vector(vec![1.0, 2.0])];
        assert!(matches!(grad_check(&f, &p, 1e-5), Err(TensorError::NotScalar(_))));
    }
}
