//! Reconstruction and regularization losses, their weights and schedules.
//!
//! Every loss exists twice: a plain version over [`ImplicitScene`] used by
//! oracles and reports, and a tape version used for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Dual;
use crate::proxy::ProxySequence;
use crate::scene::{points_matrix, FieldSet, FieldVars, ImplicitScene};
use crate::Vec3;

/// Clamp inside the logarithms of the segmentation loss.
pub const SEG_EPS: f64 = 1e-6;
/// Smoothing inside `|grad f|` so its derivative stays finite at zero.
const NORM_EPS: f64 = 1e-20;

/// How a weight evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `target * factor^(p - 1)` with `p = clamp01(it / (fraction * total))`:
    /// starts at `target / factor` and reaches the target after `fraction`
    /// of the run.
    Ramp { factor: f64, fraction: f64 },
}

impl Schedule {
    pub const DEFAULT_RAMP: Schedule = Schedule::Ramp {
        factor: 100.0,
        fraction: 0.75,
    };

    pub fn apply(&self, target: f64, iteration: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => target,
            Schedule::Ramp { factor, fraction } => {
                let end = fraction * total as f64;
                let p = if end > 0.0 {
                    (iteration as f64 / end).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                target * factor.powf(p - 1.0)
            }
        }
    }
}

/// A target weight and its schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub target: f64,
    pub schedule: Schedule,
}

impl Weight {
    pub const fn constant(target: f64) -> Self {
        Self {
            target,
            schedule: Schedule::Constant,
        }
    }

    pub const fn ramp(target: f64) -> Self {
        Self {
            target,
            schedule: Schedule::DEFAULT_RAMP,
        }
    }
}

/// Weights of the auxiliary terms relative to the color term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: Weight,
    pub eik: Weight,
    pub nbr: Weight,
    pub div: Weight,
    pub flo: Weight,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::cactus()
    }
}

impl LossWeights {
    /// The Cactus preset: SEG 1, EIK 0.5, NBR 20000 and DIV 200 (ramped),
    /// FLO 10.
    pub fn cactus() -> Self {
        Self {
            seg: Weight::constant(1.0),
            eik: Weight::constant(0.5),
            nbr: Weight::ramp(20000.0),
            div: Weight::ramp(200.0),
            flo: Weight::constant(10.0),
        }
    }

    pub fn zero() -> Self {
        Self {
            seg: Weight::constant(0.0),
            eik: Weight::constant(0.0),
            nbr: Weight::constant(0.0),
            div: Weight::constant(0.0),
            flo: Weight::constant(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.target >= 0.0 && w.target.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight {name} must be non-negative, got {}",
                    w.target
                )));
            }
            if let Schedule::Ramp { factor, fraction } = w.schedule {
                if !(factor > 0.0 && fraction >= 0.0) {
                    return Err(Error::InvalidArgument(format!("bad ramp for {name}")));
                }
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, Weight); 5] {
        [
            ("seg", self.seg),
            ("eik", self.eik),
            ("nbr", self.nbr),
            ("div", self.div),
            ("flo", self.flo),
        ]
    }

    /// Scheduled weights `[seg, eik, nbr, div, flo]` at `iteration`.
    pub fn effective(&self, iteration: usize, total: usize) -> Result<[f64; 5]> {
        self.validate()?;
        Ok(self.named().map(|(_, w)| w.schedule.apply(w.target, iteration, total)))
    }
}

/// Unweighted loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub col: f64,
    pub seg: f64,
    pub eik: f64,
    pub nbr: f64,
    pub div: f64,
    pub flo: f64,
}

impl LossTerms {
    fn aux(&self) -> [f64; 5] {
        [self.seg, self.eik, self.nbr, self.div, self.flo]
    }
}

/// Loss values, the effective weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// `[seg, eik, nbr, div, flo]`.
    pub weights: [f64; 5],
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "iteration,col,seg,eik,nbr,div,flo,total,w_seg,w_eik,w_nbr,w_div,w_flo,s";

    pub fn csv_row(&self, iteration: usize, s: f64) -> String {
        let t = &self.terms;
        let w = &self.weights;
        format!(
            "{iteration},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.col, t.seg, t.eik, t.nbr, t.div, t.flo, self.total, w[0], w[1], w[2], w[3], w[4], s
        )
    }
}

/// `L_COL + sum_k w_k L_k`, accumulated left to right in the order
/// seg, eik, nbr, div, flo.
pub fn weighted_total(terms: &LossTerms, weights: &[f64; 5]) -> f64 {
    terms
        .aux()
        .iter()
        .zip(weights)
        .fold(terms.col, |acc, (l, w)| acc + l * w)
}

/// Apply the schedules at `iteration` of `total` and sum.
pub fn total_loss(
    terms: LossTerms,
    weights: &LossWeights,
    iteration: usize,
    total: usize,
) -> Result<LossBreakdown> {
    let w = weights.effective(iteration, total)?;
    Ok(LossBreakdown {
        terms,
        weights: w,
        total: weighted_total(&terms, &w),
    })
}

// ---- plain versions ----

/// Mean over pixels of the channel-summed absolute difference.
pub fn loss_color(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted and {} true colors",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs().sum()).sum();
    Ok(sum / pred.len() as f64)
}

/// Mean binary cross entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn loss_seg(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predicted and {} true mask values",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| {
            let p = p.clamp(SEG_EPS, 1.0 - SEG_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean of `(|grad f| - 1)^2` at canonical points.
pub fn loss_eikonal(scene: &dyn ImplicitScene, pts: &[Vec3]) -> Result<f64> {
    if pts.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let g = scene.sdf_grad(pts)?;
    Ok(g.iter().map(|g| (g.norm() - 1.0).powi(2)).sum::<f64>() / pts.len() as f64)
}

/// Visibility weights padded with zeros up to `n` samples.
fn padded(weights: &[f64], n: usize) -> Result<Vec<f64>> {
    if weights.len() != n && weights.len() + 1 != n {
        return Err(Error::Shape(format!("{} weights for {n} samples", weights.len())));
    }
    let mut w = weights.to_vec();
    w.resize(n, 0.0);
    Ok(w)
}

/// Temporal neighbors of `frame`, clipped at the ends of the sequence.
pub fn neighbors(frame: usize, frames: usize) -> Vec<usize> {
    let mut n = Vec::with_capacity(2);
    if frame > 0 {
        n.push(frame - 1);
    }
    if frame + 1 < frames {
        n.push(frame + 1);
    }
    n
}

/// `(1/N_s) sum_z sum_{j in N(i)} w_z |b_i(x_z) - b_j(x_z)|^2` for the
/// samples of one ray. `weights` may have one entry fewer than `pts`.
pub fn loss_neighbor(
    scene: &dyn ImplicitScene,
    frame: usize,
    pts: &[Vec3],
    weights: &[f64],
) -> Result<f64> {
    let w = padded(weights, pts.len())?;
    let bi = scene.bend(frame, pts)?;
    let mut sum = 0.0;
    for j in neighbors(frame, scene.frame_count()) {
        let bj = scene.bend(j, pts)?;
        sum += (0..pts.len())
            .map(|z| w[z] * (bi[z] - bj[z]).norm_squared())
            .sum::<f64>();
    }
    Ok(sum / pts.len() as f64)
}

/// Divergence of `b_frame` from three Jacobian-vector products.
pub fn divergence(scene: &dyn ImplicitScene, frame: usize, pts: &[Vec3]) -> Result<Vec<f64>> {
    let mut div = vec![0.0; pts.len()];
    for a in 0..3 {
        let e = Vec3::from_fn(|k, _| if k == a { 1.0 } else { 0.0 });
        let jv = scene.bend_jvp(frame, pts, &vec![e; pts.len()])?;
        for (d, v) in div.iter_mut().zip(&jv) {
            *d += v[a];
        }
    }
    Ok(div)
}

/// `(1/N_s) sum_z w_z (div b_i(x_z))^2` for the samples of one ray.
pub fn loss_divergence(
    scene: &dyn ImplicitScene,
    frame: usize,
    pts: &[Vec3],
    weights: &[f64],
) -> Result<f64> {
    let w = padded(weights, pts.len())?;
    let div = divergence(scene, frame, pts)?;
    Ok(div.iter().zip(&w).map(|(d, w)| w * d * d).sum::<f64>() / pts.len() as f64)
}

/// Mean of `|m(x) + b_j(x + m(x)) - b_i(x)|^2` with `m = m_{i->j}`.
pub fn loss_flow(
    scene: &dyn ImplicitScene,
    i: usize,
    j: usize,
    pts: &[Vec3],
    proxies: &ProxySequence,
) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidArgument("flow loss needs two distinct frames".into()));
    }
    if pts.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let m = proxies.flow_batch(i, j, pts)?;
    let moved: Vec<Vec3> = pts.iter().zip(&m).map(|(x, m)| x + m).collect();
    let bi = scene.bend(i, pts)?;
    let bj = scene.bend(j, &moved)?;
    let sum: f64 = (0..pts.len())
        .map(|k| (m[k] + bj[k] - bi[k]).norm_squared())
        .sum();
    Ok(sum / pts.len() as f64)
}

// ---- tape versions ----

/// [`loss_color`] for `R x 3` predictions.
pub fn color_tape(tape: &mut Tape, pred: Var, truth: &Matrix) -> Result<Var> {
    if tape.shape(pred) != truth.shape() {
        return Err(Error::Shape("color prediction and target differ in shape".into()));
    }
    let t = tape.constant(truth.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    let per_pixel = tape.row_sums(a);
    Ok(tape.mean(per_pixel))
}

/// [`loss_seg`] for `R x 1` predictions.
pub fn seg_tape(tape: &mut Tape, pred: Var, truth: &Matrix) -> Result<Var> {
    if tape.shape(pred) != truth.shape() {
        return Err(Error::Shape("mask prediction and target differ in shape".into()));
    }
    let p = tape.clamp(pred, SEG_EPS, 1.0 - SEG_EPS);
    let lp = tape.ln(p);
    let q = tape.neg(p);
    let q = tape.offset(q, 1.0);
    let lq = tape.ln(q);
    let y = tape.constant(truth.clone());
    let ny = tape.constant(truth.map(|v| 1.0 - v));
    let a = tape.mul(lp, y)?;
    let b = tape.mul(lq, ny)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// [`loss_eikonal`] from an SDF dual carrying the three axis tangents.
pub fn eikonal_tape(tape: &mut Tape, sdf: &Dual) -> Result<Var> {
    if sdf.directions != 3 {
        return Err(Error::InvalidArgument("eikonal needs the three axis tangents".into()));
    }
    let mut sq = None;
    for a in 0..3 {
        let g = sdf.tangent_block(tape, a)?;
        let g2 = tape.square(g);
        sq = Some(match sq {
            None => g2,
            Some(s) => tape.add(s, g2)?,
        });
    }
    let sq = tape.offset(sq.expect("three blocks"), NORM_EPS);
    let norm = tape.sqrt(sq);
    let d = tape.offset(norm, -1.0);
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// `R x (S - 1)` weights as a detached `R S x 1` column with a zero for the
/// last sample of every ray.
pub fn padded_weights_tape(tape: &mut Tape, weights: Var) -> Result<Var> {
    let (r, k) = tape.shape(weights);
    let w = tape.detach(weights);
    let z = tape.constant(Matrix::zeros(r, 1));
    let p = tape.concat_cols(&[w, z])?;
    tape.reshape(p, r * (k + 1), 1)
}

/// [`loss_neighbor`] for a batch of `R` rays of `S` samples:
/// `offsets` are `b_frame` at `straight`, `weights` the padded detached
/// `R S x 1` column. Normalized by `S R`.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_tape(
    fs: &FieldSet,
    tape: &mut Tape,
    vars: &FieldVars,
    frame: usize,
    straight: Var,
    offsets: Var,
    weights: Var,
) -> Result<Var> {
    let n = tape.shape(straight).0;
    let mut total: Option<Var> = None;
    for j in neighbors(frame, fs.frame_count()) {
        let lat = fs.latent_rows(tape, vars, j, n)?;
        let bj = fs.bend_tape(tape, vars, Dual::constant(straight), lat)?.value;
        let d = tape.sub(offsets, bj)?;
        let sq = tape.square(d);
        let sq = tape.row_sums(sq);
        let wsq = tape.mul(sq, weights)?;
        let s = tape.sum(wsq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.scalar_const(0.0),
    };
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Divergence column from bending offsets carrying the three axis tangents.
pub fn divergence_column(tape: &mut Tape, offsets: &Dual) -> Result<Var> {
    if offsets.directions != 3 {
        return Err(Error::InvalidArgument("divergence needs the three axis tangents".into()));
    }
    let mut div: Option<Var> = None;
    for a in 0..3 {
        let block = offsets.tangent_block(tape, a)?;
        let da = tape.slice_cols(block, a, 1)?;
        div = Some(match div {
            None => da,
            Some(d) => tape.add(d, da)?,
        });
    }
    Ok(div.expect("three blocks"))
}

/// Single-probe Hutchinson estimate `v^T J v` of the divergence of
/// `b_frame` at `straight`, with Rademacher probes `v` (`N x 3`).
pub fn hutchinson_column(
    fs: &FieldSet,
    tape: &mut Tape,
    vars: &FieldVars,
    frame: usize,
    straight: Var,
    probes: &Matrix,
) -> Result<Var> {
    let n = tape.shape(straight).0;
    let v = tape.constant(probes.clone());
    let x = Dual::seed_direction(tape, straight, v)?;
    let lat = fs.latent_rows(tape, vars, frame, n)?;
    let out = fs.bend_tape(tape, vars, x, lat)?;
    let jv = out
        .tangent
        .ok_or_else(|| Error::InvalidArgument("bending output carries no tangent".into()))?;
    let vjv = tape.mul(jv, v)?;
    Ok(tape.row_sums(vjv))
}

/// Weighted mean of squared divergence values given as a column.
pub fn weighted_square_tape(tape: &mut Tape, div: Var, weights: Var) -> Result<Var> {
    let n = tape.shape(div).0;
    let d2 = tape.square(div);
    let w = tape.mul(d2, weights)?;
    let s = tape.sum(w);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// [`loss_divergence`] for a batch, normalized by `S R`.
pub fn divergence_tape(tape: &mut Tape, offsets: &Dual, weights: Var) -> Result<Var> {
    let div = divergence_column(tape, offsets)?;
    weighted_square_tape(tape, div, weights)
}

/// [`loss_flow`] on the tape.
pub fn flow_tape(
    fs: &FieldSet,
    tape: &mut Tape,
    vars: &FieldVars,
    i: usize,
    j: usize,
    pts: &[Vec3],
    proxies: &ProxySequence,
) -> Result<Var> {
    if i == j {
        return Err(Error::InvalidArgument("flow loss needs two distinct frames".into()));
    }
    if pts.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let m = proxies.flow_batch(i, j, pts)?;
    let moved: Vec<Vec3> = pts.iter().zip(&m).map(|(x, m)| x + m).collect();
    let n = pts.len();
    let x = tape.constant(points_matrix(pts));
    let xm = tape.constant(points_matrix(&moved));
    let mv = tape.constant(points_matrix(&m));
    let li = fs.latent_rows(tape, vars, i, n)?;
    let lj = fs.latent_rows(tape, vars, j, n)?;
    let bi = fs.bend_tape(tape, vars, Dual::constant(x), li)?.value;
    let bj = fs.bend_tape(tape, vars, Dual::constant(xm), lj)?.value;
    let r = tape.add(mv, bj)?;
    let r = tape.sub(r, bi)?;
    let sq = tape.square(r);
    let sq = tape.row_sums(sq);
    Ok(tape.mean(sq))
}

/// `L_COL + sum_k w_k L_k` on the tape; `None` terms are skipped.
pub fn total_tape(tape: &mut Tape, col: Var, aux: [Option<Var>; 5], weights: &[f64; 5]) -> Result<Var> {
    let mut total = col;
    for (l, &w) in aux.iter().zip(weights) {
        if let Some(l) = l {
            let wl = tape.scale(*l, w);
            total = tape.add(total, wl)?;
        }
    }
    Ok(total)
}

/// Check the parameter gradient of a scalar built from a [`FieldSet`]
/// against central differences along `n_dirs` random unit directions in
/// parameter space. Returns `(analytic, numeric)` pairs.
pub fn check_field_gradient(
    fs: &FieldSet,
    n_dirs: usize,
    h: f64,
    rng: &mut impl Rng,
    loss: &dyn Fn(&FieldSet, &mut Tape, &FieldVars) -> Result<Var>,
) -> Result<Vec<(f64, f64)>> {
    let mut tape = Tape::new();
    let vars = fs.bind(&mut tape, true)?;
    let root = loss(fs, &mut tape, &vars)?;
    let mut grads = tape.backward(root)?;
    let g: Vec<Matrix> = vars.leaves.iter().map(|&l| grads.take(l)).collect();

    let eval = |shifted: &FieldSet| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = shifted.bind(&mut tape, false)?;
        let root = loss(shifted, &mut tape, &vars)?;
        tape.value(root).item()
    };
    let mut out = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let dirs: Vec<Matrix> = fs
            .params()
            .iter()
            .map(|p| Matrix::from_fn(p.rows(), p.cols(), |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let norm = dirs.iter().map(|d| d.dot(d)).sum::<f64>().sqrt();
        let analytic = g.iter().zip(&dirs).map(|(g, d)| g.dot(d)).sum::<f64>() / norm;
        let shift = |sign: f64| {
            let mut f = fs.clone();
            for (p, d) in f.params_mut().into_iter().zip(&dirs) {
                for (a, b) in p.as_mut_slice().iter_mut().zip(d.as_slice()) {
                    *a += sign * h * b / norm;
                }
            }
            f
        };
        let numeric = (eval(&shift(1.0))? - eval(&shift(-1.0))?) / (2.0 * h);
        out.push((analytic, numeric));
    }
    Ok(out)
}

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Ray;
    use crate::nn::Mlp;
    use crate::render::{render_batch, BatchOptions};
    use crate::scene::{AnalyticBending, AnalyticField, AnalyticSdf, FieldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn color_examples() {
        let a = vec![Vec3::new(0.2, 0.4, 0.6), Vec3::new(1.0, 1.0, 1.0)];
        assert_eq!(loss_color(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_color(&[Vec3::repeat(1.0)], &[Vec3::zeros()]).unwrap(), 3.0);
        let b = vec![Vec3::new(0.0, 0.4, 0.6), Vec3::new(1.0, 0.5, 1.0)];
        let (ar, br): (Vec<Vec3>, Vec<Vec3>) = (a.iter().rev().copied().collect(), b.iter().rev().copied().collect());
        assert_eq!(loss_color(&a, &b).unwrap(), loss_color(&ar, &br).unwrap());
        assert!(loss_color(&a, &b[..1]).is_err());
    }

    #[test]
    fn seg_examples() {
        let l = loss_seg(&[SEG_EPS, 1.0 - SEG_EPS], &[0.0, 1.0]).unwrap();
        assert!(l < 2e-6);
        let l = loss_seg(&[0.5; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = loss_seg(&[0.0], &[1.0]).unwrap();
        assert!((l + SEG_EPS.ln()).abs() < 1e-12);
    }

    #[test]
    fn eikonal_examples() {
        let sphere = AnalyticField::new(
            AnalyticSdf::Sphere {
                center: Vec3::zeros(),
                radius: 0.5,
            },
            AnalyticBending::Identity,
            10.0,
        );
        let pts = vec![Vec3::new(0.3, 0.1, 0.0), Vec3::new(-0.2, 0.5, 0.7)];
        assert!(loss_eikonal(&sphere, &pts).unwrap() < 1e-20);
        // a plane with normal of length 2 is "f scaled by 2"
        let doubled = AnalyticField::new(
            AnalyticSdf::Plane {
                point: Vec3::zeros(),
                normal: Vec3::new(0.0, 2.0, 0.0),
            },
            AnalyticBending::Identity,
            10.0,
        );
        assert_eq!(loss_eikonal(&doubled, &pts).unwrap(), 1.0);
    }

    #[test]
    fn schedule_examples() {
        let w = LossWeights::cactus();
        let e0 = w.effective(0, 1000).unwrap();
        assert_eq!(e0, [1.0, 0.5, 200.0, 2.0, 10.0]);
        let end = w.effective(750, 1000).unwrap();
        assert_eq!(end, [1.0, 0.5, 20000.0, 200.0, 10.0]);
        let mid = w.effective(375, 1000).unwrap();
        assert!((mid[2] - 2000.0).abs() < 1e-9);
        let mut bad = w;
        bad.div.target = -1.0;
        assert!(bad.effective(0, 10).is_err());
    }

    #[test]
    fn total_is_color_when_aux_weights_vanish() {
        let terms = LossTerms {
            col: 0.7,
            seg: 3.0,
            eik: 1.0,
            nbr: 2.0,
            div: 5.0,
            flo: 0.1,
        };
        let b = total_loss(terms, &LossWeights::zero(), 3, 10).unwrap();
        assert_eq!(b.total, 0.7);
        let c = total_loss(terms, &LossWeights::cactus(), 10, 10).unwrap();
        let want = 0.7 + 3.0 + 0.5 + 2.0 * 20000.0 + 5.0 * 200.0 + 0.1 * 10.0;
        assert!((c.total - want).abs() < 1e-9);
    }

    fn translating(frames: usize, step: Vec3) -> AnalyticField {
        AnalyticField::new(
            AnalyticSdf::Sphere {
                center: Vec3::zeros(),
                radius: 0.3,
            },
            AnalyticBending::Translation((0..frames).map(|i| step * i as f64).collect()),
            10.0,
        )
    }

    #[test]
    fn neighbor_examples() {
        let pts: Vec<Vec3> = (0..5).map(|k| Vec3::new(0.1 * k as f64, 0.0, 0.0)).collect();
        let w = vec![0.1, 0.3, 0.2, 0.4];
        let same = translating(3, Vec3::zeros());
        assert_eq!(loss_neighbor(&same, 1, &pts, &w).unwrap(), 0.0);
        let moving = translating(3, Vec3::new(0.0, 0.1, 0.0));
        assert_eq!(loss_neighbor(&moving, 1, &pts, &[0.0; 4]).unwrap(), 0.0);
        // first frame: only frame 1 contributes
        let first = loss_neighbor(&moving, 0, &pts, &w).unwrap();
        assert!((first - 0.01 * 1.0 / 5.0).abs() < 1e-15);
        let middle = loss_neighbor(&moving, 1, &pts, &w).unwrap();
        assert!((middle - 2.0 * first).abs() < 1e-15);
    }

    #[test]
    fn divergence_examples() {
        let pts: Vec<Vec3> = (0..4).map(|k| Vec3::new(0.1 * k as f64, 0.2, -0.1)).collect();
        let w = vec![0.5, 0.2, 0.3];
        let shift = translating(1, Vec3::new(0.3, 0.0, 0.0));
        assert_eq!(loss_divergence(&shift, 0, &pts, &w).unwrap(), 0.0);
        let rot = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let rotation = AnalyticField::new(shift.sdf.clone(), AnalyticBending::Linear(vec![rot]), 1.0);
        assert_eq!(loss_divergence(&rotation, 0, &pts, &w).unwrap(), 0.0);
        let lambda = 0.3;
        let scale = AnalyticField::new(
            shift.sdf.clone(),
            AnalyticBending::Linear(vec![nalgebra::Matrix3::identity() * lambda]),
            1.0,
        );
        let want = 1.0 / 4.0 * (0.5 + 0.2 + 0.3) * (3.0 * lambda).powi(2);
        assert!((loss_divergence(&scale, 0, &pts, &w).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn flow_examples() {
        let pts: Vec<Vec3> = (0..6).map(|k| Vec3::new(0.05 * k as f64, -0.1, 0.1)).collect();
        let verts: Vec<Vec3> = (0..4).map(|k| Vec3::new(0.1 * k as f64, 0.0, 0.0)).collect();
        let still = ProxySequence::new(vec![verts.clone(), verts.clone()], 700.0, 75.0).unwrap();
        let same = translating(2, Vec3::zeros());
        assert_eq!(loss_flow(&same, 0, 1, &pts, &still).unwrap(), 0.0);
        // rigid translation: frame points x and x + delta map to one canonical point
        let delta = Vec3::new(0.05, 0.02, 0.0);
        let moved: Vec<Vec3> = verts.iter().map(|v| v + delta).collect();
        let proxies = ProxySequence::new(vec![verts.clone(), moved], 700.0, 75.0).unwrap();
        let m = proxies.flow_batch(0, 1, &pts).unwrap();
        let att: Vec<f64> = m.iter().map(|m| m.norm() / delta.norm()).collect();
        // b_j(x) = b_i(x - m) only holds where the flow is the full delta;
        // with attenuation the exact-field scene uses per-point offsets, so
        // check at the vertices where attenuation is 1
        let at_vertices = proxies.flow_batch(0, 1, &verts).unwrap();
        assert!(at_vertices.iter().all(|m| (m - delta).norm() < 1e-12));
        let scene = translating(2, -delta);
        assert!(loss_flow(&scene, 0, 1, &verts, &proxies).unwrap() < 1e-24);
        assert!(att.iter().all(|a| *a <= 1.0 + 1e-12));
        // perturbing b_j by a constant adds exactly |delta'|^2
        let eps = Vec3::new(0.0, 0.0, 0.01);
        let perturbed = translating(2, -delta - eps);
        let l = loss_flow(&perturbed, 0, 1, &verts, &proxies).unwrap();
        assert!((l - eps.norm_squared()).abs() < 1e-15);
        assert!(loss_flow(&scene, 1, 1, &verts, &proxies).is_err());
    }

    fn mini_fields(rng: &mut ChaCha8Rng) -> FieldSet {
        let cfg = FieldConfig {
            latent_dim: 2,
            sdf_hidden: 4,
            sdf_depth: 2,
            sdf_skips: vec![],
            sdf_freqs: 1,
            color_hidden: 4,
            color_depth: 2,
            color_dir_freqs: 1,
            bend_hidden: 4,
            bend_depth: 2,
            bend_freqs: 1,
            init_refine_steps: 0,
            init_s: 8.0,
            ..FieldConfig::default()
        };
        let mut fs = FieldSet::new(cfg, 3, rng).unwrap();
        fs.bend = Mlp::new(fs.config.bend_shape(), rng).unwrap();
        fs.latents = Matrix::from_fn(3, 2, |_, _| rng.random_range(-0.5..0.5));
        fs
    }

    #[test]
    fn tape_losses_match_plain_versions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs = mini_fields(&mut rng);
        let rays: Vec<Ray> = (0..2)
            .map(|k| Ray {
                origin: Vec3::new(0.1 * k as f64, 0.0, -1.5),
                dir: Vec3::z(),
                pixel: (0.0, 0.0),
                near: 0.8,
                far: 2.2,
            })
            .collect();
        let depths = vec![vec![0.9, 1.2, 1.5, 1.8, 2.1]; 2];
        let mut tape = Tape::new();
        let vars = fs.bind(&mut tape, false).unwrap();
        let opts = BatchOptions {
            jacobian: true,
            sdf_gradient: true,
        };
        let out = render_batch(&fs, &mut tape, &vars, 1, &rays, &depths, opts).unwrap();
        let w = padded_weights_tape(&mut tape, out.weights).unwrap();
        let nbr = neighbor_tape(&fs, &mut tape, &vars, 1, out.straight, out.offsets.value, w).unwrap();
        let div = divergence_tape(&mut tape, &out.offsets, w).unwrap();
        let eik = eikonal_tape(&mut tape, &out.sdf).unwrap();
        let wm = tape.value(out.weights).clone();
        let straight = crate::scene::matrix_points(tape.value(out.straight));
        let bent = crate::scene::matrix_points(tape.value(out.bent));
        let (mut pn, mut pd) = (0.0, 0.0);
        for r in 0..2 {
            let p = &straight[r * 5..(r + 1) * 5];
            pn += loss_neighbor(&fs, 1, p, wm.row(r)).unwrap();
            pd += loss_divergence(&fs, 1, p, wm.row(r)).unwrap();
        }
        assert!((tape.value(nbr).item().unwrap() - pn / 2.0).abs() < 1e-14);
        assert!((tape.value(div).item().unwrap() - pd / 2.0).abs() < 1e-12);
        let pe = loss_eikonal(&fs, &bent).unwrap();
        let te = tape.value(eik).item().unwrap();
        assert!((te - pe).abs() < 1e-10, "{te} vs {pe}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fs = mini_fields(&mut rng);
        let ray = Ray {
            origin: Vec3::new(0.05, -0.1, -1.5),
            dir: Vec3::new(0.05, 0.02, 1.0).normalize(),
            pixel: (0.0, 0.0),
            near: 0.8,
            far: 2.2,
        };
        let depths = vec![vec![0.9, 1.15, 1.4, 1.65, 1.9, 2.15]];
        let opts = BatchOptions {
            jacobian: true,
            sdf_gradient: true,
        };
        // fixed visibility weights, as they are detached in training
        let w_fixed = {
            let mut tape = Tape::new();
            let vars = fs.bind(&mut tape, false).unwrap();
            let out = render_batch(&fs, &mut tape, &vars, 1, &[ray], &depths, opts).unwrap();
            let w = padded_weights_tape(&mut tape, out.weights).unwrap();
            tape.value(w).clone()
        };
        let truth = Matrix::from_rows(&[[0.3, 0.6, 0.2]]);
        let mask = Matrix::from_rows(&[[1.0]]);
        let verts: Vec<Vec3> = (0..4).map(|k| Vec3::new(0.1 * k as f64, 0.1, 0.0)).collect();
        let moved: Vec<Vec3> = verts.iter().map(|v| v + Vec3::new(0.03, 0.0, 0.02)).collect();
        let proxies =
            ProxySequence::new(vec![verts.clone(), moved, verts.clone()], 700.0, 75.0).unwrap();
        let flow_pts: Vec<Vec3> = (0..5).map(|k| Vec3::new(0.07 * k as f64, 0.05, 0.01)).collect();

        type LossFn = Box<dyn Fn(&FieldSet, &mut Tape, &FieldVars) -> Result<Var>>;
        let render = std::rc::Rc::new(move |fs: &FieldSet, t: &mut Tape, v: &FieldVars| {
            render_batch(fs, t, v, 1, &[ray], &depths, opts)
        });
        let terms: Vec<(&str, LossFn)> = vec![
            ("col", Box::new({
                let render = render.clone();
                move |fs, t, v| {
                    let o = render(fs, t, v)?;
                    color_tape(t, o.color, &truth)
                }
            })),
            ("seg", Box::new({
                let render = render.clone();
                move |fs, t, v| {
                    let o = render(fs, t, v)?;
                    seg_tape(t, o.mask, &mask)
                }
            })),
            ("eik", Box::new({
                let render = render.clone();
                move |fs, t, v| {
                    let o = render(fs, t, v)?;
                    eikonal_tape(t, &o.sdf)
                }
            })),
            ("nbr", Box::new({
                let render = render.clone();
                let w = w_fixed.clone();
                move |fs, t, v| {
                    let o = render(fs, t, v)?;
                    let w = t.constant(w.clone());
                    neighbor_tape(fs, t, v, 1, o.straight, o.offsets.value, w)
                }
            })),
            ("div", Box::new({
                let render = render.clone();
                let w = w_fixed.clone();
                move |fs, t, v| {
                    let o = render(fs, t, v)?;
                    let w = t.constant(w.clone());
                    divergence_tape(t, &o.offsets, w)
                }
            })),
            ("flo", Box::new(move |fs, t, v| flow_tape(fs, t, v, 1, 0, &flow_pts, &proxies))),
        ];
        for (name, f) in &terms {
            let checks = check_field_gradient(&fs, 8, 1e-4, &mut rng, f.as_ref()).unwrap();
            for (a, n) in checks {
                assert!(gradient_error(a, n) < 1e-3, "{name}: {a} vs {n}");
            }
        }
    }
}
