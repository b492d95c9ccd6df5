//! Numerical self-checks against analytic and brute-force oracles. Each check
//! returns its worst observed value next to the bound it must stay under.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, Tape, Var};
use crate::camera::{CameraModel, Ray};
use crate::error::{Error, Result};
use crate::eval::{chamfer, hausdorff, icp_align, KdTree};
use crate::extract::{march_canonical, march_frame, Bounds, TriMesh};
use crate::losses::{
    check_field_gradient, color_tape, divergence_tape, eikonal_tape, flow_tape, gradient_error,
    loss_eikonal, neighbor_tape, padded_weights_tape, seg_tape,
};
use crate::nn::Mlp;
use crate::proxy::{ProxySequence, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::render::{find_entering_crossing, render_batch, verify_alpha_integral, verify_unbiasedness, BatchOptions};
use crate::scene::{AnalyticBending, AnalyticField, AnalyticSdf, FieldConfig, FieldSet, FieldVars};
use crate::Vec3;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed value; compared with `bound` unless `passed` says
    /// otherwise (some checks are structural).
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, bound: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            bound,
            passed: value < bound,
            detail,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<28} {:>12.4e} < {:<10.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.bound,
            self.detail
        )
    }
}

fn sdfs() -> [AnalyticSdf; 2] {
    [
        AnalyticSdf::Sphere {
            center: Vec3::new(0.02, -0.03, 0.0),
            radius: 0.5,
        },
        AnalyticSdf::Capsule {
            a: Vec3::new(-0.3, -0.2, 0.05),
            b: Vec3::new(0.3, 0.2, -0.05),
            radius: 0.25,
        },
    ]
}

fn bendings() -> [AnalyticBending; 2] {
    [
        AnalyticBending::Identity,
        AnalyticBending::Waves {
            amplitude: 0.04,
            frequency: 2.5,
            phases: vec![Vec3::new(0.3, -0.2, 1.1)],
        },
    ]
}

fn probe_rays(n: usize) -> Vec<Ray> {
    (0..n)
        .map(|k| {
            let a = k as f64 * 2.399;
            let r = 0.08 * (k as f64).sqrt();
            Ray {
                origin: Vec3::new(r * a.cos(), r * a.sin(), -2.0),
                dir: Vec3::new(0.02 * a.sin(), -0.015 * a.cos(), 1.0).normalize(),
                pixel: (0.0, 0.0),
                near: 0.5,
                far: 3.5,
            }
        })
        .collect()
}

/// Analytic scenes crossed by every probe ray: SDF family x bending x ray.
fn configurations(rays: usize, s: f64) -> Vec<(String, AnalyticField, Ray)> {
    let mut out = Vec::new();
    for (i, sdf) in sdfs().iter().enumerate() {
        for (j, bend) in bendings().iter().enumerate() {
            for (k, ray) in probe_rays(rays).into_iter().enumerate() {
                let name = format!(
                    "{}/{}/ray{k}",
                    ["sphere", "capsule"][i],
                    ["identity", "waves"][j]
                );
                out.push((name, AnalyticField::new(sdf.clone(), bend.clone(), s), ray));
            }
        }
    }
    out
}

/// Discrete opacity against the integrated density on 0.01-wide intervals
/// within 0.1 of the entering crossing of 20 configurations.
pub fn alpha_integral_check() -> Result<Check> {
    let mut worst: f64 = 0.0;
    let mut where_ = String::new();
    let configs = configurations(5, 50.0);
    let mut intervals = 0;
    for (name, scene, ray) in &configs {
        let t = find_entering_crossing(scene, 0, ray, 4000)?
            .ok_or_else(|| Error::Degenerate(format!("{name} has no crossing")))?;
        for k in 0..20 {
            let t0 = t - 0.1 + 0.01 * k as f64;
            let d = verify_alpha_integral(scene, 0, ray, t0, t0 + 0.01)?;
            intervals += 1;
            if d > worst {
                worst = d;
                where_ = name.clone();
            }
        }
    }
    Ok(Check::below(
        "alpha vs density integral",
        worst,
        1e-5,
        format!("{} configurations, {intervals} intervals, worst {where_}", configs.len()),
    ))
}

/// Weight maxima over `s` in {10, 100, 1000} on 12 configurations: errors
/// never grow, end within two sample spacings, and the naive density
/// weights are further off at `s = 10`.
pub fn unbiasedness_check() -> Result<Check> {
    let configs = configurations(3, 1.0);
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for (name, scene, ray) in &configs {
        let rep = verify_unbiasedness(scene, 0, ray, &[10.0, 100.0, 1000.0], 1024)?;
        let monotone = rep.errors.windows(2).all(|w| w[1] <= w[0]);
        let ratio = rep.errors[2] / rep.spacing;
        worst_ratio = worst_ratio.max(ratio);
        let beats_naive = rep.naive_errors[0] > rep.errors[0];
        if !(monotone && ratio < 2.0 && beats_naive) {
            failures.push(format!("{name} {:?} naive {:.3e}", rep.errors, rep.naive_errors[0]));
        }
    }
    Ok(Check {
        name: "unbiased weight maximum".into(),
        value: worst_ratio,
        bound: 2.0,
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} configurations, error in sample spacings at s=1000", configs.len())
        } else {
            failures.join("; ")
        },
    })
}

/// Miniature fields for gradient checks: two-layer, four-wide networks
/// with a random bending network and random latents.
pub fn miniature_fields(rng: &mut ChaCha8Rng) -> Result<FieldSet> {
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
    let mut fs = FieldSet::new(cfg, 3, rng)?;
    fs.bend = Mlp::new(fs.config.bend_shape(), rng)?;
    fs.latents = Matrix::from_fn(3, 2, |_, _| rng.random_range(-0.5..0.5));
    Ok(fs)
}

type LossFn = Box<dyn Fn(&FieldSet, &mut Tape, &FieldVars) -> Result<Var>>;

/// Parameter gradients of every loss term against central differences
/// with `h = 1e-4` along `n_dirs` random directions; one check per term.
pub fn gradient_checks(n_dirs: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = miniature_fields(&mut rng)?;
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
    // visibility weights enter the regularizers as constants
    let w_fixed = {
        let mut tape = Tape::new();
        let vars = fs.bind(&mut tape, false)?;
        let out = render_batch(&fs, &mut tape, &vars, 1, &[ray], &depths, opts)?;
        let w = padded_weights_tape(&mut tape, out.weights)?;
        tape.value(w).clone()
    };
    let truth = Matrix::from_rows(&[[0.3, 0.6, 0.2]]);
    let mask = Matrix::from_rows(&[[1.0]]);
    let verts: Vec<Vec3> = (0..4).map(|k| Vec3::new(0.1 * k as f64, 0.1, 0.0)).collect();
    let moved: Vec<Vec3> = verts.iter().map(|v| v + Vec3::new(0.03, 0.0, 0.02)).collect();
    let proxies = ProxySequence::new(vec![verts.clone(), moved, verts], DEFAULT_LAMBDA1, DEFAULT_LAMBDA2)?;
    let flow_pts: Vec<Vec3> = (0..5).map(|k| Vec3::new(0.07 * k as f64, 0.05, 0.01)).collect();

    let render = std::rc::Rc::new(move |fs: &FieldSet, t: &mut Tape, v: &FieldVars| {
        render_batch(fs, t, v, 1, &[ray], &depths, opts)
    });
    let with_render = |f: fn(&mut Tape, crate::render::BatchRender, &Matrix, &Matrix, &Matrix) -> Result<Var>| -> LossFn {
        let render = render.clone();
        let (truth, mask, w) = (truth.clone(), mask.clone(), w_fixed.clone());
        Box::new(move |fs, t, v| {
            let o = render(fs, t, v)?;
            f(t, o, &truth, &mask, &w)
        })
    };
    let nbr: LossFn = {
        let render = render.clone();
        let w = w_fixed.clone();
        Box::new(move |fs, t, v| {
            let o = render(fs, t, v)?;
            let w = t.constant(w.clone());
            neighbor_tape(fs, t, v, 1, o.straight, o.offsets.value, w)
        })
    };
    let terms: Vec<(&str, LossFn)> = vec![
        ("color", with_render(|t, o, truth, _, _| color_tape(t, o.color, truth))),
        ("segmentation", with_render(|t, o, _, mask, _| seg_tape(t, o.mask, mask))),
        ("eikonal", with_render(|t, o, _, _, _| eikonal_tape(t, &o.sdf))),
        ("neighbor", nbr),
        (
            "divergence",
            with_render(|t, o, _, _, w| {
                let w = t.constant(w.clone());
                divergence_tape(t, &o.offsets, w)
            }),
        ),
        ("flow", Box::new(move |fs, t, v| flow_tape(fs, t, v, 1, 0, &flow_pts, &proxies))),
    ];
    let mut out = Vec::new();
    for (name, f) in &terms {
        let pairs = check_field_gradient(&fs, n_dirs, 1e-4, &mut rng, f.as_ref())?;
        let worst = pairs
            .iter()
            .map(|&(a, n)| gradient_error(a, n))
            .fold(0.0, f64::max);
        out.push(Check::below(
            format!("gradient {name}"),
            worst,
            1e-3,
            format!("{n_dirs} directions"),
        ));
    }
    Ok(out)
}

fn ball_points(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    (0..n)
        .map(|_| loop {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if p.norm_squared() <= 1.0 {
                break p;
            }
        })
        .collect()
}

/// `(|grad f| - 1)^2` averaged over the unit ball for a freshly initialized
/// field and for the exact sphere.
pub fn eikonal_checks(config: &FieldConfig, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = FieldConfig {
        init_radius: 0.5,
        ..config.clone()
    };
    let fs = FieldSet::new(config, 1, &mut rng)?;
    let pts = ball_points(1000, &mut rng);
    let learned = loss_eikonal(&fs, &pts)?;
    let exact = AnalyticField::new(
        AnalyticSdf::Sphere {
            center: Vec3::zeros(),
            radius: 0.5,
        },
        AnalyticBending::Identity,
        50.0,
    );
    let analytic = loss_eikonal(&exact, &pts)?;
    Ok(vec![
        Check::below("eikonal after init", learned, 0.05, "1000 points in the unit ball".into()),
        Check::below("eikonal exact sphere", analytic, 1e-10, "1000 points in the unit ball".into()),
    ])
}

/// Flow of random proxies against the defining double sum, evaluated
/// without any stabilization, plus convexity and attenuation bounds.
pub fn flow_oracle_check(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut invariant_failures = 0;
    let mut queries = 0;
    for trial in 0..4 {
        let nv = [1, 7, 20, 50][trial];
        let base: Vec<Vec3> = (0..nv)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let moved: Vec<Vec3> = base
            .iter()
            .map(|v| v + Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)))
            .collect();
        let seq = ProxySequence::new(vec![base.clone(), moved.clone()], DEFAULT_LAMBDA1, DEFAULT_LAMBDA2)?;
        let disp: Vec<Vec3> = base.iter().zip(&moved).map(|(a, b)| b - a).collect();
        let max_disp = disp.iter().map(|d| d.norm()).fold(0.0, f64::max);
        for _ in 0..250 {
            // near the proxy so the plain sums stay representable
            let anchor = base[rng.random_range(0..nv)];
            let x = anchor + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let mut num = Vec3::zeros();
            let mut den = 0.0;
            let mut dmin = f64::INFINITY;
            for k in 0..nv {
                let d2 = (x - base[k]).norm_squared();
                let w = (-DEFAULT_LAMBDA1 * d2).exp();
                num += disp[k] * w;
                den += w;
                dmin = dmin.min(d2);
            }
            let raw = num / den;
            let att = raw * (-DEFAULT_LAMBDA2 * dmin).exp();
            let got_raw = seq.flow_raw(0, 1, &x)?;
            let got = seq.flow(0, 1, &x)?;
            worst = worst.max((got_raw - raw).amax()).max((got - att).amax());
            queries += 1;
            let lo = disp.iter().fold(Vec3::repeat(f64::INFINITY), |a, d| a.inf(d));
            let hi = disp.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, d| a.sup(d));
            let convex = (0..3).all(|c| got_raw[c] >= lo[c] - 1e-15 && got_raw[c] <= hi[c] + 1e-15);
            let bounded = got.norm() <= (-DEFAULT_LAMBDA2 * dmin).exp() * max_disp + 1e-15;
            if !(convex && bounded) {
                invariant_failures += 1;
            }
        }
    }
    let mut c = Check::below(
        "proxy flow oracle",
        worst,
        1e-12,
        format!("{queries} queries, {invariant_failures} invariant violations"),
    );
    c.passed &= invariant_failures == 0;
    Ok(c)
}

/// Two-sided distance between a mesh and the sphere of radius `r` at the
/// origin: dense surface samples and vertices against the sphere, and
/// sphere samples against the nearest mesh vertex (an upper bound).
pub fn hausdorff_to_sphere(mesh: &TriMesh, r: f64, rng: &mut impl Rng) -> Result<f64> {
    let mut pts = mesh.sample_surface(20_000, rng)?;
    pts.extend_from_slice(&mesh.vertices);
    let to_sphere = pts.iter().map(|p| (p.norm() - r).abs()).fold(0.0, f64::max);
    let tree = KdTree::new(&mesh.vertices);
    let mut to_mesh: f64 = 0.0;
    for p in ball_points(20_000, rng) {
        if p.norm() < 1e-6 {
            continue;
        }
        let q = p.normalize() * r;
        let (_, d2) = tree.nearest(&q).ok_or(Error::EmptyPointSet)?;
        to_mesh = to_mesh.max(d2.sqrt());
    }
    Ok(to_sphere.max(to_mesh))
}

/// Marching the analytic sphere at increasing resolutions.
pub fn extraction_checks(resolutions: &[usize], seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 0.5;
    let scene = AnalyticField::new(
        AnalyticSdf::Sphere {
            center: Vec3::zeros(),
            radius: r,
        },
        AnalyticBending::Identity,
        50.0,
    );
    let b = Bounds::default();
    let mut errs = Vec::new();
    let mut within = true;
    let mut detail = Vec::new();
    for &res in resolutions {
        let m = march_canonical(&scene, res, b)?;
        let h = hausdorff_to_sphere(&m, r, &mut rng)?;
        within &= h < b.cell_diagonal(res);
        detail.push(format!("res {res}: {h:.3e} (cell {:.3e})", b.cell_diagonal(res)));
        errs.push(h);
    }
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    let cam = CameraModel::look_at(Vec3::new(0.3, 0.4, -3.0), Vec3::zeros(), Vec3::y(), 0.7, 64, 64, 0.1, 10.0)?;
    let mut closed = Vec::new();
    for &res in resolutions {
        let m = march_frame(&scene, 0, Some(&cam), res, b)?;
        closed.push(!m.is_empty() && m.is_watertight());
    }
    let worst_ratio = errs
        .iter()
        .zip(resolutions)
        .map(|(e, &res)| e / b.cell_diagonal(res))
        .fold(0.0, f64::max);
    Ok(vec![
        Check {
            name: "extraction convergence".into(),
            value: worst_ratio,
            bound: 1.0,
            passed: monotone && within,
            detail: format!("error in cell diagonals; {}", detail.join(", ")),
        },
        Check {
            name: "in-frustum mesh watertight".into(),
            value: closed.iter().filter(|c| !**c).count() as f64,
            bound: 1.0,
            passed: closed.iter().all(|c| *c),
            detail: "open meshes among the resolutions".into(),
        },
    ])
}

fn brute(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Chamfer and Hausdorff against the quadratic definitions, and rigid
/// registration of a known 5 degree, 0.05 offset motion.
pub fn metric_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = ball_points(50, &mut rng);
        let b: Vec<Vec3> = ball_points(50, &mut rng).iter().map(|p| p * 0.8 + Vec3::x() * 0.1).collect();
        let (ab, ba) = (brute(&a, &b), brute(&b, &a));
        let cd = ab.iter().sum::<f64>() / 50.0 + ba.iter().sum::<f64>() / 50.0;
        let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
        worst = worst.max((chamfer(&a, &b)? - cd).abs()).max((hausdorff(&a, &b)? - hd).abs());
    }
    let target: Vec<Vec3> = ball_points(4000, &mut rng)
        .into_iter()
        .filter(|p| p.norm() > 1e-3)
        .map(|p| p.normalize() * 0.5)
        .collect();
    let axis = nalgebra::Unit::new_normalize(Vec3::new(0.3, 1.0, -0.2));
    let rot = nalgebra::Rotation3::from_axis_angle(&axis, 5f64.to_radians());
    let t = Vec3::new(0.05, 0.0, 0.0);
    let source: Vec<Vec3> = target.iter().map(|p| rot * p + t).collect();
    let icp = icp_align(&source, &target, 50)?;
    let want_r = rot.inverse().into_inner();
    let want_t = -(rot.inverse() * t);
    let icp_err = (icp.transform.rotation - want_r).amax().max((icp.transform.translation - want_t).amax());
    Ok(vec![
        Check::below("metric oracles", worst, 1e-12, "20 pairs of 50-point sets".into()),
        Check::below("icp recovery", icp_err, 1e-4, "5 degrees and 0.05 offset".into()),
    ])
}

/// Every check, with gradient checks along `grad_dirs` directions.
pub fn run_all(grad_dirs: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![alpha_integral_check()?, unbiasedness_check()?];
    out.extend(gradient_checks(grad_dirs, seed)?);
    out.extend(eikonal_checks(&FieldConfig::default(), seed)?);
    out.push(flow_oracle_check(seed)?);
    out.extend(extraction_checks(&[32, 64, 128], seed)?);
    out.extend(metric_checks(seed)?);
    Ok(out)
}
