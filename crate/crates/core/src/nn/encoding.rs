use std::f64::consts::PI;

use super::Dual;
use crate::autodiff::Tape;
use crate::error::{Error, Result};

/// Frequency-encoded coordinates: `[x, sin(2^0 pi x), cos(2^0 pi x), ...,
/// sin(2^(n-1) pi x), cos(2^(n-1) pi x)]`, each block componentwise.
pub fn encode_point(x: &[f64], n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * n_freq));
    out.extend_from_slice(x);
    for k in 0..n_freq {
        let a = (1u64 << k) as f64 * PI;
        out.extend(x.iter().map(|v| (a * v).sin()));
        out.extend(x.iter().map(|v| (a * v).cos()));
    }
    out
}

/// Tape version of [`encode_point`] for a batch, propagating tangents.
pub fn positional_encode(tape: &mut Tape, x: Dual, n_freq: usize) -> Result<Dual> {
    if n_freq == 0 {
        return Ok(x);
    }
    let (_, width) = tape.shape(x.value);
    if let Some(t) = x.tangent {
        if tape.shape(t).1 != width {
            return Err(Error::Shape(
                "positional encoding needs full-width tangents".into(),
            ));
        }
    }
    let mut values = vec![x.value];
    let mut tangents = x.tangent.map(|t| vec![t]);
    for k in 0..n_freq {
        let a = (1u64 << k) as f64 * PI;
        let ax = tape.scale(x.value, a);
        let s = tape.sin(ax);
        let c = tape.cos(ax);
        values.push(s);
        values.push(c);
        if let (Some(ts), Some(t)) = (tangents.as_mut(), x.tangent) {
            // d sin(ax) = a cos(ax) dx, d cos(ax) = -a sin(ax) dx
            let dc = tape.scale(c, a);
            let ds = tape.scale(s, -a);
            let dc = tape.tile_rows(dc, x.directions);
            let ds = tape.tile_rows(ds, x.directions);
            ts.push(tape.mul(dc, t)?);
            ts.push(tape.mul(ds, t)?);
        }
    }
    let value = tape.concat_cols(&values)?;
    Ok(match tangents {
        Some(ts) => Dual::with_tangent(value, tape.concat_cols(&ts)?, x.directions),
        None => Dual::constant(value),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Matrix;

    #[test]
    fn zero_input_single_frequency() {
        assert_eq!(encode_point(&[0.0], 1), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_frequencies_is_identity() {
        assert_eq!(encode_point(&[0.3, -2.0, 5.0], 0), vec![0.3, -2.0, 5.0]);
    }

    #[test]
    fn encoded_length() {
        for d in 1..5 {
            for n in 0..7 {
                assert_eq!(encode_point(&vec![0.1; d], n).len(), d * (1 + 2 * n));
            }
        }
    }

    #[test]
    fn tape_encoding_matches_plain_and_tangents_match_fd() {
        let pts = [[0.1, -0.4, 0.7], [0.9, 0.2, -0.3]];
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&pts));
        let dual = Dual::seed_axes(&mut tape, x);
        let enc = positional_encode(&mut tape, dual, 3).unwrap();
        let v = tape.value(enc.value).clone();
        let t = tape.value(enc.tangent.unwrap()).clone();
        let h = 1e-6;
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(v.row(r), encode_point(p, 3).as_slice());
            for axis in 0..3 {
                let mut a = *p;
                let mut b = *p;
                a[axis] += h;
                b[axis] -= h;
                let (ea, eb) = (encode_point(&a, 3), encode_point(&b, 3));
                for c in 0..ea.len() {
                    let fd = (ea[c] - eb[c]) / (2.0 * h);
                    assert!((t.get(axis * 2 + r, c) - fd).abs() < 1e-6);
                }
            }
        }
    }
}
