//! Numerical checks of the discrete opacity against the continuous density
//! and of the bias of the weight maximum.

use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::scene::{logistic_cdf, ImplicitScene};

use super::{alpha_weights, bend_samples, density_with_s, AlphaWeights};

const SIMPSON_MAX_DEPTH: u32 = 40;

/// First depth where the SDF along the bent ray goes from positive to
/// non-positive, located by a dense scan of `n_scan` points and bisection.
pub fn find_entering_crossing(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    n_scan: usize,
) -> Result<Option<f64>> {
    let f_at = |ts: &[f64]| -> Result<Vec<f64>> {
        let (bent, _) = bend_samples(scene, frame, ray, ts)?;
        scene.sdf(&bent)
    };
    let n = n_scan.max(2);
    let ts: Vec<f64> = (0..n)
        .map(|k| ray.near + (ray.far - ray.near) * k as f64 / (n - 1) as f64)
        .collect();
    let f = f_at(&ts)?;
    let Some(k) = (0..n - 1).find(|&k| f[k] > 0.0 && f[k + 1] <= 0.0) else {
        return Ok(None);
    };
    let (mut lo, mut hi) = (ts[k], ts[k + 1]);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f_at(&[mid])?[0] > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// `int_{t0}^{t1} rho dt` by adaptive Simpson quadrature.
pub fn integrate_density(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    t0: f64,
    t1: f64,
    s: f64,
    tol: f64,
) -> Result<f64> {
    let rho = |t: f64| -> Result<f64> { Ok(density_with_s(scene, frame, ray, &[t], s)?[0]) };
    let (fa, fm, fb) = (rho(t0)?, rho(0.5 * (t0 + t1))?, rho(t1)?);
    let whole = (t1 - t0) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(&rho, t0, t1, fa, fm, fb, whole, tol, SIMPSON_MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson(
    f: &dyn Fn(f64) -> Result<f64>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm)?, f(rm)?);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
        + simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
}

/// `|alpha_discrete - (1 - exp(-int rho dt))|` over `[t0, t1]`.
pub fn verify_alpha_integral(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    t0: f64,
    t1: f64,
) -> Result<f64> {
    if !(ray.near <= t0 && t0 < t1 && t1 <= ray.far) {
        return Err(Error::InvalidArgument(format!(
            "interval [{t0}, {t1}] not inside [{}, {}]",
            ray.near, ray.far
        )));
    }
    let s = scene.sharpness();
    let (bent, _) = bend_samples(scene, frame, ray, &[t0, t1])?;
    let f = scene.sdf(&bent)?;
    let alpha = alpha_weights(s, &f)?.alpha[0];
    let integral = integrate_density(scene, frame, ray, t0, t1, s, 1e-13)?;
    Ok((alpha - (1.0 - (-integral).exp())).abs())
}

/// Weights of a density-based renderer that uses the logistic density
/// `sigma = s Phi_s(f) (1 - Phi_s(f))` directly and
/// `alpha = 1 - exp(-sigma delta)`. Along a straight ray through a plane its
/// maximum sits where `Phi_s(f) = 0.618`, in front of the surface.
pub fn naive_weights(s: f64, sdf: &[f64], depths: &[f64]) -> Result<AlphaWeights> {
    if sdf.len() < 2 || sdf.len() != depths.len() {
        return Err(Error::InvalidArgument("need matching depths and at least two samples".into()));
    }
    let alpha = (0..sdf.len() - 1)
        .map(|z| {
            let phi = logistic_cdf(s, sdf[z]);
            let sigma = s * phi * (1.0 - phi);
            1.0 - (-sigma * (depths[z + 1] - depths[z])).exp()
        })
        .collect();
    Ok(AlphaWeights::from_alpha(alpha))
}

/// Weight-argmax positions for a sweep of sharpness values.
#[derive(Clone, Debug, PartialEq)]
pub struct UnbiasednessReport {
    /// Crossing depth.
    pub t_star: f64,
    /// Sample spacing.
    pub spacing: f64,
    pub s: Vec<f64>,
    /// Midpoint of the heaviest interval for each `s`.
    pub argmax: Vec<f64>,
    pub errors: Vec<f64>,
    /// Same for the naive density weights.
    pub naive_errors: Vec<f64>,
}

/// Render `n_samples` evenly spaced depths at each `s` and report how far
/// the heaviest interval lies from the entering crossing.
pub fn verify_unbiasedness(
    scene: &dyn ImplicitScene,
    frame: usize,
    ray: &Ray,
    s_list: &[f64],
    n_samples: usize,
) -> Result<UnbiasednessReport> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let t_star = find_entering_crossing(scene, frame, ray, 4 * n_samples)?
        .ok_or_else(|| Error::Degenerate("ray has no entering crossing".into()))?;
    let spacing = (ray.far - ray.near) / (n_samples - 1) as f64;
    let depths: Vec<f64> = (0..n_samples)
        .map(|k| ray.near + spacing * k as f64)
        .collect();
    let (bent, _) = bend_samples(scene, frame, ray, &depths)?;
    let f = scene.sdf(&bent)?;
    let mid = |z: usize| 0.5 * (depths[z] + depths[z + 1]);
    let mut report = UnbiasednessReport {
        t_star,
        spacing,
        s: s_list.to_vec(),
        argmax: Vec::new(),
        errors: Vec::new(),
        naive_errors: Vec::new(),
    };
    for &s in s_list {
        let w = alpha_weights(s, &f)?;
        let z = w.argmax().expect("non-empty");
        report.argmax.push(mid(z));
        report.errors.push((mid(z) - t_star).abs());
        let nz = naive_weights(s, &f, &depths)?.argmax().expect("non-empty");
        report.naive_errors.push((mid(nz) - t_star).abs());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AnalyticBending, AnalyticField, AnalyticSdf};
    use crate::Vec3;

    fn ray() -> Ray {
        Ray {
            origin: Vec3::new(0.1, -0.05, -2.0),
            dir: Vec3::z(),
            pixel: (0.0, 0.0),
            near: 0.5,
            far: 3.5,
        }
    }

    fn sphere(bending: AnalyticBending, s: f64) -> AnalyticField {
        AnalyticField::new(
            AnalyticSdf::Sphere {
                center: Vec3::zeros(),
                radius: 0.5,
            },
            bending,
            s,
        )
    }

    fn waves() -> AnalyticBending {
        AnalyticBending::Waves {
            amplitude: 0.04,
            frequency: 2.5,
            phases: vec![Vec3::new(0.3, -0.2, 1.1)],
        }
    }

    fn entering_interval(scene: &AnalyticField) -> (f64, f64) {
        let t = find_entering_crossing(scene, 0, &ray(), 4000).unwrap().unwrap();
        (t - 0.02, t + 0.01)
    }

    #[test]
    fn alpha_matches_integral_without_bending() {
        let scene = sphere(AnalyticBending::Identity, 50.0);
        let (a, b) = entering_interval(&scene);
        assert!(verify_alpha_integral(&scene, 0, &ray(), a, b).unwrap() < 1e-6);
    }

    #[test]
    fn alpha_matches_integral_with_bending() {
        let scene = sphere(waves(), 50.0);
        let (a, b) = entering_interval(&scene);
        assert!(verify_alpha_integral(&scene, 0, &ray(), a, b).unwrap() < 1e-5);
    }

    #[test]
    fn outside_interval_is_zero_both_ways() {
        let scene = sphere(AnalyticBending::Identity, 50.0);
        // exiting half of the sphere: SDF increasing
        let d = verify_alpha_integral(&scene, 0, &ray(), 2.6, 3.0).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn crossing_matches_analytic_sphere() {
        let scene = sphere(AnalyticBending::Identity, 50.0);
        let t = find_entering_crossing(&scene, 0, &ray(), 1000).unwrap().unwrap();
        let r = ray();
        let b = r.origin.dot(&r.dir);
        let want = -b - (b * b - (r.origin.norm_squared() - 0.25)).sqrt();
        assert!((t - want).abs() < 1e-12);
    }

    #[test]
    fn argmax_converges_and_beats_naive() {
        let scene = sphere(AnalyticBending::Identity, 1.0);
        let rep = verify_unbiasedness(&scene, 0, &ray(), &[10.0, 100.0, 1000.0], 1024).unwrap();
        assert!(rep.errors.windows(2).all(|w| w[1] <= w[0]), "{:?}", rep.errors);
        assert!(rep.errors[2] < 2.0 * rep.spacing);
        assert!(rep.naive_errors[0] > rep.errors[0], "{rep:?}");
    }

    #[test]
    fn no_crossing_is_an_error() {
        let scene = AnalyticField::new(
            AnalyticSdf::Sphere {
                center: Vec3::new(3.0, 0.0, 0.0),
                radius: 0.5,
            },
            AnalyticBending::Identity,
            10.0,
        );
        assert!(verify_unbiasedness(&scene, 0, &ray(), &[10.0], 64).is_err());
    }
}
