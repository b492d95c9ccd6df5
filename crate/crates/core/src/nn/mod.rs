//! Coordinate networks: positional encoding, multilayer perceptrons and their
//! initializers.
//!
//! Input derivatives are carried forward as [`Dual`] tangents recorded on the
//! tape, so `|grad f|` or the bending Jacobian stay differentiable with
//! respect to the parameters with a single reverse sweep.

mod encoding;
mod mlp;
mod optim;

pub use encoding::{encode_point, positional_encode};
pub use optim::Adam;
pub use mlp::{
    geometric_init, Activation, InputSpec, Layer, Mlp, MlpShape, MlpVars, OutputActivation,
};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// A batch of values (`N x C`) together with `k` forward tangents stacked
/// block-wise as a `(k * N) x C'` matrix, block `j` holding the derivative
/// along direction `j`. `C' <= C`: missing trailing columns are zero.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub value: Var,
    pub tangent: Option<Var>,
    pub directions: usize,
}

impl Dual {
    pub fn constant(value: Var) -> Self {
        Self {
            value,
            tangent: None,
            directions: 0,
        }
    }

    pub fn with_tangent(value: Var, tangent: Var, directions: usize) -> Self {
        Self {
            value,
            tangent: Some(tangent),
            directions,
        }
    }

    /// Seed tangents along the coordinate axes: one direction per column.
    pub fn seed_axes(tape: &mut Tape, value: Var) -> Self {
        let (n, c) = tape.shape(value);
        let seeds = Matrix::from_fn(c * n, c, |r, col| if r / n == col { 1.0 } else { 0.0 });
        let t = tape.constant(seeds);
        Self::with_tangent(value, t, c)
    }

    /// Seed a single tangent direction per row.
    pub fn seed_direction(tape: &mut Tape, value: Var, direction: Var) -> Result<Self> {
        if tape.shape(direction) != tape.shape(value) {
            return Err(Error::Shape("tangent seed must match value shape".into()));
        }
        Ok(Self::with_tangent(value, direction, 1))
    }

    /// Tangent block for direction `j` (`N x C'`).
    pub fn tangent_block(&self, tape: &mut Tape, j: usize) -> Result<Var> {
        let t = self
            .tangent
            .ok_or_else(|| Error::InvalidArgument("value carries no tangent".into()))?;
        let n = tape.shape(self.value).0;
        tape.slice_rows(t, j * n, n)
    }
}

/// Column-wise concatenation of duals. Parts without tangents contribute zero
/// columns; trailing ones are left implicit.
pub fn concat_duals(tape: &mut Tape, parts: &[Dual]) -> Result<Dual> {
    let values: Vec<Var> = parts.iter().map(|p| p.value).collect();
    let value = tape.concat_cols(&values)?;
    let last = match parts.iter().rposition(|p| p.tangent.is_some()) {
        Some(i) => i,
        None => return Ok(Dual::constant(value)),
    };
    let k = parts[last].directions;
    let n = tape.shape(value).0;
    let mut tangents = Vec::new();
    for (i, p) in parts[..=last].iter().enumerate() {
        let width = tape.shape(p.value).1;
        match p.tangent {
            Some(t) => {
                if p.directions != k {
                    return Err(Error::Shape("tangent direction counts differ".into()));
                }
                let tw = tape.shape(t).1;
                if tw < width && i < last {
                    let pad = tape.constant(Matrix::zeros(k * n, width - tw));
                    tangents.push(t);
                    tangents.push(pad);
                } else {
                    tangents.push(t);
                }
            }
            None => tangents.push(tape.constant(Matrix::zeros(k * n, width))),
        }
    }
    let tangent = if tangents.len() == 1 {
        tangents[0]
    } else {
        tape.concat_cols(&tangents)?
    };
    Ok(Dual::with_tangent(value, tangent, k))
}
