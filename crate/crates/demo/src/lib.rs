//! WebAssembly bindings for the browser demo: rendering weights along a
//! ray, proxy-driven scene flow on a slice, and synthetic blob frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use ub4d::proxy::ProxySequence;
use ub4d::render::{alpha_weights, naive_weights};
use ub4d::synth::{AnalyticScene, SceneFamily};
use ub4d::Vec3;

const NEAR: f64 = 0.5;
const FAR: f64 = 3.5;
const EYE_Z: f64 = -2.0;

/// `[t*, mid_0, unbiased_0, naive_0, mid_1, ...]` for a ray along +z from
/// `z = -2` through a sphere of `radius` at the origin.
pub fn weight_profile_values(s: f64, samples: usize, radius: f64) -> ub4d::Result<Vec<f64>> {
    if !(radius > 0.0 && radius < -EYE_Z - NEAR) {
        return Err(ub4d::Error::InvalidArgument(format!("radius {radius} out of range")));
    }
    let n = samples.max(2);
    let depths: Vec<f64> = (0..n)
        .map(|k| NEAR + (FAR - NEAR) * k as f64 / (n - 1) as f64)
        .collect();
    let sdf: Vec<f64> = depths.iter().map(|t| (EYE_Z + t).abs() - radius).collect();
    let unbiased = alpha_weights(s, &sdf)?;
    let naive = naive_weights(s, &sdf, &depths)?;
    let mut out = vec![-EYE_Z - radius];
    for z in 0..n - 1 {
        out.extend([0.5 * (depths[z] + depths[z + 1]), unbiased.weights[z], naive.weights[z]]);
    }
    Ok(out)
}

/// Proxy of `vertices` points near a circle in the `z = 0` plane, rotated
/// by `angle` about z in the second frame. Returns `[V, (x0, y0, x1, y1)
/// per vertex, (x, y, mx, my) per grid point]` over `[-1, 1]^2`.
pub fn flow_slice_values(
    vertices: usize,
    angle: f64,
    lambda1: f64,
    lambda2: f64,
    grid: usize,
    seed: u64,
) -> ub4d::Result<Vec<f64>> {
    if vertices == 0 || grid < 2 {
        return Err(ub4d::Error::InvalidArgument("need vertices and a grid of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<Vec3> = (0..vertices)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / vertices as f64 + rng.random_range(-0.2..0.2);
            let r = 0.5 + rng.random_range(-0.08..0.08);
            Vec3::new(r * a.cos(), r * a.sin(), 0.0)
        })
        .collect();
    let (s, c) = angle.sin_cos();
    let moved: Vec<Vec3> = base.iter().map(|p| Vec3::new(c * p.x - s * p.y, s * p.x + c * p.y, 0.0)).collect();
    let seq = ProxySequence::new(vec![base.clone(), moved.clone()], lambda1, lambda2)?;
    let mut out = vec![vertices as f64];
    for (a, b) in base.iter().zip(&moved) {
        out.extend([a.x, a.y, b.x, b.y]);
    }
    let coord = |i: usize| -1.0 + 2.0 * i as f64 / (grid - 1) as f64;
    let pts: Vec<Vec3> = (0..grid * grid)
        .map(|k| Vec3::new(coord(k % grid), coord(k / grid), 0.0))
        .collect();
    for (p, m) in pts.iter().zip(seq.flow_batch(0, 1, &pts)?) {
        out.extend([p.x, p.y, m.x, m.y]);
    }
    Ok(out)
}

/// RGBA pixels of the bulging blob at time `tau` in `[0, 1]`, seen from
/// `azimuth` radians around the vertical axis.
pub fn render_blob_rgba(tau: f64, azimuth: f64, size: usize) -> ub4d::Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&tau) || size == 0 || size > 512 {
        return Err(ub4d::Error::InvalidArgument("tau in [0, 1] and size in 1..=512".into()));
    }
    const STEPS: usize = 1000;
    let mut scene = AnalyticScene::new(SceneFamily::blob(), STEPS + 1, size, size);
    scene.camera.start_angle = azimuth;
    scene.camera.arc = 0.0;
    let frame = scene.render_frame((tau * STEPS as f64).round() as usize)?;
    let mut out = Vec::with_capacity(4 * size * size);
    for (c, m) in frame.image.pixels.iter().zip(&frame.mask.pixels) {
        let bg = if *m > 0.5 { None } else { Some([24u8, 26, 32]) };
        match bg {
            Some(b) => out.extend([b[0], b[1], b[2], 255]),
            None => out.extend(c.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).chain([255])),
        }
    }
    Ok(out)
}

fn js(e: ub4d::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn weight_profile(s: f64, samples: usize, radius: f64) -> Result<Vec<f64>, JsError> {
    weight_profile_values(s, samples, radius).map_err(js)
}

#[wasm_bindgen]
pub fn flow_slice(
    vertices: usize,
    angle: f64,
    lambda1: f64,
    lambda2: f64,
    grid: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    flow_slice_values(vertices, angle, lambda1, lambda2, grid, seed).map_err(js)
}

#[wasm_bindgen]
pub fn render_blob(tau: f64, azimuth: f64, size: usize) -> Result<Vec<u8>, JsError> {
    render_blob_rgba(tau, azimuth, size).map_err(js)
}
