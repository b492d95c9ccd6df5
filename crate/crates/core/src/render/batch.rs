//! Differentiable rendering of a ray batch on the tape.

use crate::autodiff::{Matrix, Tape, Var};
use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::nn::Dual;
use crate::scene::{FieldSet, FieldVars};

/// Tape handles for one rendered batch of `R` rays with `S` samples each.
/// Sample rows are ray-major: row `r * S + z`.
#[derive(Clone, Debug)]
pub struct BatchRender {
    pub rays: usize,
    pub samples: usize,
    /// Straight-ray sample positions (constant), `R S x 3`.
    pub straight: Var,
    /// Bending offsets; with `jacobian` the tangent holds the three
    /// Jacobian columns stacked as `3 R S x 3`.
    pub offsets: Dual,
    /// Canonical positions `straight + offsets`.
    pub bent: Var,
    /// SDF at the canonical positions; with `sdf_gradient` the tangent holds
    /// the three partial derivatives stacked as `3 R S x 1`.
    pub sdf: Dual,
    /// `R x (S - 1)` rendering weights.
    pub weights: Var,
    /// `R x 3`.
    pub color: Var,
    /// `R x 1`, the weight sum.
    pub mask: Var,
}

/// Which derivative fields to carry through the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BatchOptions {
    pub jacobian: bool,
    pub sdf_gradient: bool,
}

/// Render rays of one frame at the given (constant) depths.
pub fn render_batch(
    fs: &FieldSet,
    tape: &mut Tape,
    vars: &FieldVars,
    frame: usize,
    rays: &[Ray],
    depths: &[Vec<f64>],
    opts: BatchOptions,
) -> Result<BatchRender> {
    let r = rays.len();
    if r == 0 || depths.len() != r {
        return Err(Error::Shape(format!("{} rays with {} depth lists", r, depths.len())));
    }
    let s = depths[0].len();
    if s < 2 || depths.iter().any(|d| d.len() != s) {
        return Err(Error::Shape("every ray needs the same number (>= 2) of samples".into()));
    }
    let n = r * s;
    let straight_m = Matrix::from_fn(n, 3, |row, c| {
        let ray = &rays[row / s];
        ray.origin[c] + depths[row / s][row % s] * ray.dir[c]
    });
    let straight = tape.constant(straight_m);
    let latent = fs.latent_rows(tape, vars, frame, n)?;
    let x = if opts.jacobian {
        Dual::seed_axes(tape, straight)
    } else {
        Dual::constant(straight)
    };
    let offsets = fs.bend_tape(tape, vars, x, latent)?;
    let bent = tape.add(straight, offsets.value)?;
    let bent_in = if opts.sdf_gradient {
        Dual::seed_axes(tape, bent)
    } else {
        Dual::constant(bent)
    };
    let sdf = fs.sdf_tape(tape, vars, bent_in)?;

    // alpha = relu(1 - exp(log Phi(f_{z+1}) - log Phi(f_z)))
    let inv_s = tape.exp(vars.log_s);
    let sf = tape.mul(sdf.value, inv_s)?;
    let lphi = tape.log_sigmoid(sf);
    let lphi = tape.reshape(lphi, r, s)?;
    let head = tape.slice_cols(lphi, 0, s - 1)?;
    let tail = tape.slice_cols(lphi, 1, s - 1)?;
    let diff = tape.sub(tail, head)?;
    let ratio = tape.exp(diff);
    let one_minus_ratio = tape.neg(ratio);
    let one_minus_ratio = tape.offset(one_minus_ratio, 1.0);
    let alpha = tape.relu(one_minus_ratio);
    let keep = tape.neg(alpha);
    let keep = tape.offset(keep, 1.0);
    let trans = tape.cumprod_exclusive(keep);
    let weights = tape.mul(trans, alpha)?;

    // viewing directions per interval
    let cur: Vec<usize> = (0..r).flat_map(|i| (0..s - 1).map(move |z| i * s + z)).collect();
    let next: Vec<usize> = cur.iter().map(|i| i + 1).collect();
    let off_m = tape.value(offsets.value).clone();
    let bent_m = tape.value(bent).clone();
    let mut bent_dir = Matrix::zeros(cur.len(), 1);
    let mut straight_dirs = Matrix::zeros(cur.len(), 3);
    for (k, (&a, &b)) in cur.iter().zip(&next).enumerate() {
        let ray = &rays[a / s];
        straight_dirs.row_mut(k).copy_from_slice(ray.dir.as_slice());
        let same_offset = off_m.row(a) == off_m.row(b);
        let len2: f64 = (0..3)
            .map(|c| (bent_m.get(b, c) - bent_m.get(a, c)).powi(2))
            .sum();
        if !same_offset && len2 > 0.0 {
            bent_dir.set(k, 0, 1.0);
        }
    }
    let use_bent = tape.constant(bent_dir.clone());
    let use_straight = tape.constant(bent_dir.map(|m| 1.0 - m));
    let p0 = tape.gather_rows(bent, &cur)?;
    let p1 = tape.gather_rows(bent, &next)?;
    let delta = tape.sub(p1, p0)?;
    let sq = tape.square(delta);
    let len2 = tape.row_sums(sq);
    let len2 = tape.add(len2, use_straight)?;
    let len = tape.sqrt(len2);
    let unit = tape.div(delta, len)?;
    let unit = tape.mul(unit, use_bent)?;
    let d0 = tape.constant(straight_dirs);
    let d0 = tape.mul(d0, use_straight)?;
    let dirs = tape.add(unit, d0)?;

    let colors = fs.color_tape(tape, vars, p0, dirs)?;
    let color = tape.weighted_row_sum(weights, colors)?;
    let mask = tape.row_sums(weights);
    Ok(BatchRender {
        rays: r,
        samples: s,
        straight,
        offsets,
        bent,
        sdf,
        weights,
        color,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::render::{render_ray, sample_depths, SamplingConfig};
    use crate::scene::{FieldConfig, ImplicitScene};
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_fields(seed: u64, bend: bool) -> FieldSet {
        let cfg = FieldConfig {
            latent_dim: 3,
            sdf_hidden: 12,
            sdf_depth: 2,
            sdf_skips: vec![],
            sdf_freqs: 1,
            color_hidden: 8,
            color_depth: 1,
            color_dir_freqs: 1,
            bend_hidden: 8,
            bend_depth: 1,
            bend_freqs: 1,
            init_refine_steps: 0,
            init_s: 20.0,
            ..FieldConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fs = FieldSet::new(cfg, 2, &mut rng).unwrap();
        if bend {
            fs.bend = Mlp::new(fs.config.bend_shape(), &mut rng).unwrap();
            fs.latents = Matrix::from_fn(2, 3, |_, _| rng.random_range(-0.5..0.5));
        }
        fs
    }

    fn rays() -> Vec<Ray> {
        (0..3)
            .map(|k| Ray {
                origin: Vec3::new(-0.1 + 0.1 * k as f64, 0.05, -2.0),
                dir: Vec3::new(0.02 * k as f64, 0.0, 1.0).normalize(),
                pixel: (0.0, 0.0),
                near: 1.0,
                far: 3.0,
            })
            .collect()
    }

    #[test]
    fn batch_matches_plain_renderer() {
        for bend in [false, true] {
            let fs = small_fields(1, bend);
            let rays = rays();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let cfg = SamplingConfig {
                n_coarse: 16,
                n_fine: 8,
                bound_radius: None,
                ..Default::default()
            };
            let depths: Vec<Vec<f64>> = rays
                .iter()
                .map(|r| sample_depths(&fs, 1, r, &cfg, &mut rng).unwrap())
                .collect();
            let mut tape = Tape::new();
            let vars = fs.bind(&mut tape, false).unwrap();
            let out =
                render_batch(&fs, &mut tape, &vars, 1, &rays, &depths, BatchOptions::default())
                    .unwrap();
            for (i, ray) in rays.iter().enumerate() {
                let plain = render_ray(&fs, 1, ray, &depths[i]).unwrap();
                let m = tape.value(out.mask).get(i, 0);
                assert!((m - plain.mask).abs() < 1e-12);
                for c in 0..3 {
                    let v = tape.value(out.color).get(i, c);
                    assert!((v - plain.color[c]).abs() < 1e-12, "{v} vs {}", plain.color[c]);
                }
            }
        }
    }

    #[test]
    fn sdf_gradient_tangent_matches_plain_gradient() {
        let fs = small_fields(3, true);
        let rays = rays();
        let depths: Vec<Vec<f64>> = rays.iter().map(|_| vec![1.0, 1.7, 2.2, 2.9]).collect();
        let mut tape = Tape::new();
        let vars = fs.bind(&mut tape, false).unwrap();
        let opts = BatchOptions {
            jacobian: true,
            sdf_gradient: true,
        };
        let out = render_batch(&fs, &mut tape, &vars, 0, &rays, &depths, opts).unwrap();
        let bent: Vec<Vec3> = crate::scene::matrix_points(tape.value(out.bent));
        let g = fs.sdf_grad(&bent).unwrap();
        let t = tape.value(out.sdf.tangent.unwrap());
        let n = bent.len();
        for i in 0..n {
            for a in 0..3 {
                assert!((t.get(a * n + i, 0) - g[i][a]).abs() < 1e-12);
            }
        }
        let straight = crate::scene::matrix_points(tape.value(out.straight));
        let div = fs.divergence(0, &straight).unwrap();
        let jt = tape.value(out.offsets.tangent.unwrap());
        for i in 0..n {
            let tr: f64 = (0..3).map(|a| jt.get(a * n + i, a)).sum();
            assert!((tr - div[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_ragged_depths() {
        let fs = small_fields(4, false);
        let mut tape = Tape::new();
        let vars = fs.bind(&mut tape, false).unwrap();
        let rays = rays();
        let depths = vec![vec![1.0, 2.0], vec![1.0, 2.0, 2.5], vec![1.0, 2.0]];
        assert!(render_batch(&fs, &mut tape, &vars, 0, &rays, &depths, BatchOptions::default())
            .is_err());
    }
}
