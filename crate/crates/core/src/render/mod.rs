//! Volume rendering along bent rays with unbiased opacity weights.
//!
//! A straight ray `r(t)` is mapped into canonical space as
//! `r~(t) = r(t) + b_i(r(t))`. The discrete opacity of the interval between
//! samples `z` and `z + 1` is
//! `alpha = max((Phi_s(f_z) - Phi_s(f_{z+1})) / Phi_s(f_z), 0)`, computed as
//! `max(1 - exp(log Phi_s(f_{z+1}) - log Phi_s(f_z)), 0)` for stability.

mod batch;
mod verify;

pub use batch::{render_batch, BatchOptions, BatchRender};
pub use verify::{
    find_entering_crossing, integrate_density, naive_weights, verify_alpha_integral,
    verify_unbiasedness, UnbiasednessReport,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sigmoid;
use crate::camera::{CameraModel, Ray};
use crate::error::{Error, Result};
use crate::scene::{logistic_cdf, ImplicitScene};
use crate::Vec3;

/// Sample counts and depth-interval policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Jitter samples inside their strata; off gives stratum midpoints.
    pub perturb: bool,
    /// Clip rays to a bounding sphere of this radius; `None` keeps the
    /// camera near/far.
    pub bound_radius: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 64,
            perturb: true,
            bound_radius: Some(1.0),
        }
    }
}

impl SamplingConfig {
    pub fn total(&self) -> usize {
        self.n_coarse + self.n_fine
    }

    /// Apply the configured depth interval to a camera ray.
    pub fn bound(&self, ray: Ray) -> Ray {
        match self.bound_radius {
            Some(r) => ray.with_sphere_bounds(r),
            None => ray,
        }
    }
}

/// Per-interval opacity, transmittance and weight along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaWeights {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AlphaWeights {
    fn from_alpha(alpha: Vec<f64>) -> Self {
        let mut transmittance = Vec::with_capacity(alpha.len());
        let mut t = 1.0;
        for a in &alpha {
            transmittance.push(t);
            t *= 1.0 - a;
        }
        let weights = alpha.iter().zip(&transmittance).map(|(a, t)| a * t).collect();
        Self {
            alpha,
            transmittance,
            weights,
        }
    }

    pub fn mask(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the largest weight (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, w) in self.weights.iter().enumerate() {
            if best.is_none_or(|b| *w > self.weights[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Unbiased opacity weights for SDF values at consecutive samples.
pub fn alpha_weights(s: f64, sdf: &[f64]) -> Result<AlphaWeights> {
    if sdf.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let alpha = sdf
        .windows(2)
        .map(|w| (1.0 - (log_sigmoid(s * w[1]) - log_sigmoid(s * w[0])).exp()).max(0.0))
        .collect();
    Ok(AlphaWeights::from_alpha(alpha))
}

/// `n` stratified depths in `[near, far]`: one per equal stratum, jittered
/// when `rng` is given and at the stratum midpoint otherwise.
pub fn stratified_depths<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    let step = (far - near) / n as f64;
    match rng {
        Some(rng) => (0..n)
            .map(|k| near + (k as f64 + rng.random::<f64>()) * step)
            .collect(),
        None => (0..n).map(|k| near + (k as f64 + 0.5) * step).collect(),
    }
}

/// Inverse-CDF sampling of a piecewise-constant density over the intervals
/// between consecutive `depths`, interval `k` having mass `weights[k]`.
/// Falls back to uniform over the whole range when the mass vanishes.
pub fn importance_depths<R: Rng>(
    depths: &[f64],
    weights: &[f64],
    n: usize,
    rng: Option<&mut R>,
) -> Vec<f64> {
    debug_assert_eq!(weights.len() + 1, depths.len());
    let (lo, hi) = (depths[0], depths[depths.len() - 1]);
    let total: f64 = weights.iter().sum();
    let us: Vec<f64> = stratified_depths(0.0, 1.0, n, rng);
    if !(total > 1e-10) || !total.is_finite() {
        return us.iter().map(|u| lo + u * (hi - lo)).collect();
    }
    let mut cdf = Vec::with_capacity(weights.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    us.iter()
        .map(|&u| {
            let k = cdf.partition_point(|&c| c <= u).clamp(1, weights.len()) - 1;
            let mass = cdf[k + 1] - cdf[k];
            let frac = if mass > 0.0 {
                ((u - cdf[k]) / mass).clamp(0.0, 1.0)
            } else {
                0.5
            };
            depths[k] + frac * (depths[k + 1] - depths[k])
        })
        .collect()
}

/// Sort and make strictly increasing.
fn merge_depths(mut t: Vec<f64>) -> Vec<f64> {
    t.sort_by(f64::total_cmp);
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1].next_up();
        }
    }
    t
}

/// Canonical positions of straight-ray samples and their offsets.
pub fn bend_samples(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    depths: &[f64],
) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
    let straight: Vec<Vec3> = depths.iter().map(|&t| ray.at(t)).collect();
    let offsets = scene.bend(frame, &straight)?;
    let bent = straight.iter().zip(&offsets).map(|(x, b)| x + b).collect();
    Ok((bent, offsets))
}

/// Coarse stratified depths followed by importance samples drawn from the
/// coarse weights; merged and sorted.
pub fn sample_depths<R: Rng>(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(sample_depths_batch(scene, frame, std::slice::from_ref(ray), cfg, rng)?.remove(0))
}

/// [`sample_depths`] for many rays with one scene evaluation.
pub fn sample_depths_batch<R: Rng>(
    scene: &dyn ImplicitScene,
    frame: usize,
    rays: &[Ray],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if cfg.n_coarse < 2 {
        return Err(Error::InvalidArgument("need at least two coarse samples".into()));
    }
    let mut coarse = Vec::with_capacity(rays.len());
    for ray in rays {
        if !(ray.far > ray.near) {
            return Err(Error::Degenerate(format!(
                "empty depth interval [{}, {}]",
                ray.near, ray.far
            )));
        }
        let t = if cfg.perturb {
            stratified_depths(ray.near, ray.far, cfg.n_coarse, Some(&mut *rng))
        } else {
            stratified_depths::<R>(ray.near, ray.far, cfg.n_coarse, None)
        };
        coarse.push(t);
    }
    if cfg.n_fine == 0 {
        return Ok(coarse);
    }
    let pts: Vec<Vec3> = rays
        .iter()
        .zip(&coarse)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.at(t)))
        .collect();
    let off = scene.bend(frame, &pts)?;
    let bent: Vec<Vec3> = pts.iter().zip(&off).map(|(x, b)| x + b).collect();
    let sdf = scene.sdf(&bent)?;
    let s = scene.sharpness();
    let mut out = Vec::with_capacity(rays.len());
    for (k, ts) in coarse.into_iter().enumerate() {
        let f = &sdf[k * cfg.n_coarse..(k + 1) * cfg.n_coarse];
        let w = alpha_weights(s, f)?;
        let fine = if cfg.perturb {
            importance_depths(&ts, &w.weights, cfg.n_fine, Some(&mut *rng))
        } else {
            importance_depths::<R>(&ts, &w.weights, cfg.n_fine, None)
        };
        let mut all = ts;
        all.extend(fine);
        out.push(merge_depths(all));
    }
    Ok(out)
}

/// Viewing directions for the `S - 1` intervals: the normalized forward
/// difference of bent samples. Where the offsets of both endpoints are
/// identical, or the difference vanishes, the straight direction is used.
pub fn interval_directions(ray: &Ray, bent: &[Vec3], offsets: &[Vec3]) -> Vec<Vec3> {
    (0..bent.len().saturating_sub(1))
        .map(|z| {
            if offsets[z + 1] == offsets[z] {
                return ray.dir;
            }
            let diff = bent[z + 1] - bent[z];
            let n = diff.norm();
            if n > 0.0 {
                diff / n
            } else {
                ray.dir
            }
        })
        .collect()
}

/// Everything computed along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayRender {
    pub depths: Vec<f64>,
    pub bent: Vec<Vec3>,
    pub sdf: Vec<f64>,
    pub weights: AlphaWeights,
    pub color: Vec3,
    pub mask: f64,
}

/// Render one ray at given depths: color is the weighted sum of the color
/// field over the first `S - 1` samples, mask is the sum of weights.
pub fn render_ray(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    depths: &[f64],
) -> Result<RayRender> {
    let (bent, offsets) = bend_samples(scene, frame, ray, depths)?;
    let sdf = scene.sdf(&bent)?;
    let weights = alpha_weights(scene.sharpness(), &sdf)?;
    let dirs = interval_directions(ray, &bent, &offsets);
    let colors = scene.color(&bent[..dirs.len()], &dirs)?;
    let color = weights
        .weights
        .iter()
        .zip(&colors)
        .fold(Vec3::zeros(), |acc, (w, c)| acc + c * *w);
    let mask = weights.mask();
    Ok(RayRender {
        depths: depths.to_vec(),
        bent,
        sdf,
        weights,
        color,
        mask,
    })
}

/// Sample and render the ray through pixel `(u, v)`.
pub fn render_pixel<R: Rng>(
    scene: &dyn ImplicitScene,
    frame: usize,
    cam: &CameraModel,
    (u, v): (f64, f64),
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<(Vec3, f64)> {
    let ray = cfg.bound(cam.ray_for_pixel(u, v)?);
    let depths = sample_depths(scene, frame, &ray, cfg, rng)?;
    let r = render_ray(scene, frame, &ray, &depths)?;
    Ok((r.color, r.mask))
}

/// Deterministic full-image render (no jitter); row-major colors and masks.
pub fn render_image(
    scene: &dyn ImplicitScene,
    frame: usize,
    cam: &CameraModel,
    cfg: &SamplingConfig,
) -> Result<(Vec<Vec3>, Vec<f64>)> {
    let cfg = SamplingConfig {
        perturb: false,
        ..cfg.clone()
    };
    let row = |v: usize| -> Result<Vec<(Vec3, f64)>> {
        // never drawn from: jitter is off
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let rays: Vec<Ray> = (0..cam.width)
            .map(|u| cam.ray_for_pixel(u as f64, v as f64).map(|r| cfg.bound(r)))
            .collect::<Result<_>>()?;
        let depths = sample_depths_batch(scene, frame, &rays, &cfg, &mut rng)?;
        rays.iter()
            .zip(&depths)
            .map(|(r, d)| render_ray(scene, frame, r, d).map(|o| (o.color, o.mask)))
            .collect()
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<(Vec3, f64)>> = {
        use rayon::prelude::*;
        (0..cam.height).into_par_iter().map(row).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<(Vec3, f64)>> = (0..cam.height).map(row).collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().unzip())
}

/// Opaque density at depth `t` of the bent ray:
/// `max(-s (1 - Phi_s(f)) df/dt, 0)` with
/// `df/dt = grad f(r~(t)) . (d + J_b(r(t)) d)`.
pub fn opaque_density(scene: &dyn ImplicitScene, frame: usize, ray: &Ray, t: f64) -> Result<f64> {
    Ok(density_with_s(scene, frame, ray, &[t], scene.sharpness())?[0])
}

pub(crate) fn density_with_s(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    ts: &[f64],
    s: f64,
) -> Result<Vec<f64>> {
    let x: Vec<Vec3> = ts.iter().map(|&t| ray.at(t)).collect();
    let off = scene.bend(frame, &x)?;
    let jd = scene.bend_jvp(frame, &x, &vec![ray.dir; x.len()])?;
    let bent: Vec<Vec3> = x.iter().zip(&off).map(|(a, b)| a + b).collect();
    let f = scene.sdf(&bent)?;
    let g = scene.sdf_grad(&bent)?;
    Ok((0..ts.len())
        .map(|i| {
            let dfdt = g[i].dot(&(ray.dir + jd[i]));
            (-s * (1.0 - logistic_cdf(s, f[i])) * dfdt).max(0.0)
        })
        .collect())
}
