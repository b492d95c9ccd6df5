//! Reverse-mode automatic differentiation over a dynamic graph of batched
//! matrices.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{log_sigmoid, sigmoid};

/// Central-difference check of the gradient of `f` at `x` along `dir`:
/// returns `(autodiff directional derivative, finite-difference estimate)`.
///
/// `f` builds a scalar on a fresh tape from a leaf holding its argument.
pub fn directional_check(
    x: &Matrix,
    dir: &Matrix,
    h: f64,
    f: impl Fn(&mut Tape, Var) -> crate::Result<Var>,
) -> crate::Result<(f64, f64)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let grads = tape.backward(root)?;
    let analytic = grads.wrt(leaf).dot(dir);

    let eval = |t: f64| -> crate::Result<f64> {
        let mut shifted = x.clone();
        for (a, d) in shifted.as_mut_slice().iter_mut().zip(dir.as_slice()) {
            *a += t * d;
        }
        let mut tape = Tape::new();
        let leaf = tape.constant(shifted);
        let root = f(&mut tape, leaf)?;
        tape.value(root).item()
    };
    let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
    Ok((analytic, numeric))
}
