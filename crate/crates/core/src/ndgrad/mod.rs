//! Dense arrays with tape-based reverse-mode differentiation.
//!
//! Every differentiable quantity in the crate (embeddings, latents, images,
//! metric values) flows through [`Tape`] and [`Var`]. [`finite_diff_gradient`]
//! is the independent check used by the tests.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Evaluates a scalar function on a fresh tape and returns its value and
/// gradient with respect to `x`.
pub fn value_and_grad<F>(x: &Tensor, f: F) -> Result<(f64, Tensor)>
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let input = tape.input(x.clone());
    let out = f(&tape, input)?;
    let grads = tape.backward(out)?;
    Ok((out.item(), grads.wrt(input)))
}

/// Evaluates a scalar function without recording gradients.
pub fn value<F>(x: &Tensor, f: F) -> Result<f64>
where
    F: for<'t> FnOnce(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::untraced();
    let input = tape.constant(x.clone());
    let out = f(&tape, input)?;
    if !out.value().is_scalar() {
        return Err(Error::NotScalar(out.shape()));
    }
    Ok(out.item())
}

/// Central-difference gradient estimate, one coordinate at a time.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h", format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖b‖, floor)`: the norm-wise relative error used by the
/// gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / b.norm().max(floor)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let tape = Tape::new();
        assert_eq!(tape.scalar(0.0).tanh().item(), 0.0);
        let c = tape.constant(Tensor::filled(vec![3, 4], 2.5));
        assert_eq!(c.variance().item(), 0.0);
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        assert_eq!(a.dot(b).unwrap().item(), 32.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = a.add(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn backward_examples() {
        let (_, g) = value_and_grad(&t(&[2], &[1.0, 2.0]), |_, x| Ok(x.sum_squares())).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
        let (_, g) = value_and_grad(&t(&[1], &[0.0]), |_, x| Ok(x.sigmoid())).unwrap();
        assert_eq!(g.data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x.tanh()), Err(Error::NotScalar(_))));
    }

    #[test]
    fn detached_input_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let y = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let out = x.sum_squares();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn untraced_tape_yields_no_gradients() {
        let tape = Tape::untraced();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let grads = tape.backward(x.sum_squares()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(
            |x| Ok(x.data().iter().map(|v| v * v).sum()),
            &t(&[1], &[3.0]),
            1e-4,
        )
        .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
        let g = finite_diff_gradient(|_| Ok(4.2), &t(&[3], &[1.0, -2.0, 0.5]), 1e-4).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_gradient(|_| Ok(0.0), &t(&[1], &[0.0]), 0.0).is_err());
    }

    #[test]
    fn premul_and_matmul_agree() {
        let w = Arc::new(t(&[2, 3], &[1.0, -1.0, 2.0, 0.5, 0.0, 3.0]));
        let tape = Tape::new();
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let a = x.premul(&w).unwrap();
        let wv = tape.constant((*w).clone());
        let b = wv.matmul(x.reshape(vec![3, 1]).unwrap()).unwrap();
        assert_eq!(a.value().data(), b.value().data());
    }

    #[test]
    fn slice_and_concat_shapes() {
        let tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::filled(vec![1, 3], 1.0));
        let c = Var::concat(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![3, 3]);
        let s = c.slice(1, 2).unwrap();
        assert_eq!(s.shape(), vec![2, 3]);
        assert_eq!(&s.value().data()[3..], &[1.0, 1.0, 1.0]);
        assert!(c.slice(2, 2).is_err());
        let d = tape.input(Tensor::zeros(vec![1, 2]));
        assert!(Var::concat(&[a, d]).is_err());
    }
}
