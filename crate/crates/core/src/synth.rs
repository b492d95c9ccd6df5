//! Synthetic deforming scenes built from analytic SDF primitives: sphere
//! traced Lambertian images, masks, cameras, ground-truth meshes and
//! corresponded proxies.

use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{save_cameras, CameraModel, Ray};
use crate::error::{Error, Result};
use crate::extract::{Bounds, Grid, TriMesh};
use crate::image::{GrayImage, RgbImage};
use crate::proxy::{ProxySequence, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::scene::AnalyticSdf;
use crate::train::{image_path, mask_path, Dataset, Frame};
use crate::Vec3;

const TRACE_EPS: f64 = 1e-7;
const TRACE_STEPS: usize = 1000;

/// Time-parameterized shape families. `tau` runs from 0 at the first frame
/// to 1 at the last. Unions take the minimum of exact primitive SDFs, which
/// keeps `|grad f| = 1` almost everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SceneFamily {
    TranslatingSphere {
        radius: f64,
        start: Vec3,
        end: Vec3,
    },
    /// Two capsules joined end to end; the upper one swings about the joint
    /// in the xy-plane.
    BendingCapsule {
        base: Vec3,
        segment: f64,
        radius: f64,
        max_angle: f64,
    },
    /// Upright body with one arm swaying up and down.
    Cactus {
        body_radius: f64,
        body_height: f64,
        arm_radius: f64,
        arm_length: f64,
        sway: f64,
    },
    /// Translating sphere with a second sphere growing out of it.
    BulgingBlob {
        radius: f64,
        start: Vec3,
        end: Vec3,
        bulge_offset: Vec3,
        bulge_min: f64,
        bulge_max: f64,
    },
}

impl SceneFamily {
    pub fn blob() -> Self {
        Self::BulgingBlob {
            radius: 0.35,
            start: Vec3::new(-0.15, -0.05, 0.0),
            end: Vec3::new(0.15, 0.05, 0.0),
            bulge_offset: Vec3::new(0.0, 0.3, 0.05),
            bulge_min: 0.1,
            bulge_max: 0.2,
        }
    }

    /// The blob moving across most of the bounding volume.
    pub fn blob_large_translation() -> Self {
        Self::BulgingBlob {
            radius: 0.3,
            start: Vec3::new(-0.45, 0.0, 0.0),
            end: Vec3::new(0.45, 0.0, 0.0),
            bulge_offset: Vec3::new(0.0, 0.26, 0.05),
            bulge_min: 0.08,
            bulge_max: 0.17,
        }
    }

    pub fn translating_sphere() -> Self {
        Self::TranslatingSphere {
            radius: 0.4,
            start: Vec3::new(-0.2, 0.0, 0.0),
            end: Vec3::new(0.2, 0.0, 0.0),
        }
    }

    pub fn bending_capsule() -> Self {
        Self::BendingCapsule {
            base: Vec3::new(0.0, -0.6, 0.0),
            segment: 0.55,
            radius: 0.15,
            max_angle: 0.8,
        }
    }

    pub fn cactus() -> Self {
        Self::Cactus {
            body_radius: 0.22,
            body_height: 1.1,
            arm_radius: 0.12,
            arm_length: 0.4,
            sway: 0.5,
        }
    }

    /// Primitives with their albedo at time `tau`.
    pub fn primitives(&self, tau: f64) -> Vec<(AnalyticSdf, Vec3)> {
        let warm = Vec3::new(0.85, 0.45, 0.3);
        let cool = Vec3::new(0.3, 0.55, 0.85);
        match *self {
            Self::TranslatingSphere { radius, start, end } => vec![(
                AnalyticSdf::Sphere {
                    center: start.lerp(&end, tau),
                    radius,
                },
                warm,
            )],
            Self::BendingCapsule {
                base,
                segment,
                radius,
                max_angle,
            } => {
                let joint = base + Vec3::y() * segment;
                let a = max_angle * tau;
                let tip = joint + Vec3::new(a.sin(), a.cos(), 0.0) * segment;
                vec![
                    (AnalyticSdf::Capsule { a: base, b: joint, radius }, warm),
                    (AnalyticSdf::Capsule { a: joint, b: tip, radius }, cool),
                ]
            }
            Self::Cactus {
                body_radius,
                body_height,
                arm_radius,
                arm_length,
                sway,
            } => {
                let (attach, phi) = Self::cactus_arm(body_radius, sway, tau);
                let green = Vec3::new(0.3, 0.7, 0.35);
                vec![
                    (
                        AnalyticSdf::Capsule {
                            a: Vec3::y() * (-0.5 * body_height),
                            b: Vec3::y() * (0.5 * body_height),
                            radius: body_radius,
                        },
                        green,
                    ),
                    (
                        AnalyticSdf::Capsule {
                            a: attach,
                            b: attach + Vec3::new(phi.cos(), phi.sin(), 0.0) * arm_length,
                            radius: arm_radius,
                        },
                        Vec3::new(0.75, 0.8, 0.3),
                    ),
                ]
            }
            Self::BulgingBlob {
                radius,
                start,
                end,
                bulge_offset,
                bulge_min,
                bulge_max,
            } => {
                let c = start.lerp(&end, tau);
                vec![
                    (AnalyticSdf::Sphere { center: c, radius }, warm),
                    (
                        AnalyticSdf::Sphere {
                            center: c + bulge_offset,
                            radius: bulge_min + (bulge_max - bulge_min) * tau,
                        },
                        cool,
                    ),
                ]
            }
        }
    }

    fn cactus_arm(body_radius: f64, sway: f64, tau: f64) -> (Vec3, f64) {
        let attach = Vec3::new(0.5 * body_radius, 0.05, 0.0);
        (attach, 0.35 + sway * (2.0 * std::f64::consts::PI * tau).sin())
    }

    /// Move a point of the surface at `tau0` along with its primitive to
    /// time `tau1`.
    pub fn transport(&self, p: &Vec3, tau0: f64, tau1: f64) -> Vec3 {
        let prims = self.primitives(tau0);
        let k = nearest_primitive(&prims, p);
        match *self {
            Self::TranslatingSphere { start, end, .. } => p + (end - start) * (tau1 - tau0),
            Self::BendingCapsule {
                base,
                segment,
                max_angle,
                ..
            } => {
                if k == 0 {
                    return *p;
                }
                let joint = base + Vec3::y() * segment;
                // swinging by +a moves the tip towards +x: rotation by -a about z
                rotate_z(p - joint, -max_angle * (tau1 - tau0)) + joint
            }
            Self::Cactus {
                body_radius, sway, ..
            } => {
                if k == 0 {
                    return *p;
                }
                let (attach, phi0) = Self::cactus_arm(body_radius, sway, tau0);
                let (_, phi1) = Self::cactus_arm(body_radius, sway, tau1);
                rotate_z(p - attach, phi1 - phi0) + attach
            }
            Self::BulgingBlob {
                start,
                end,
                bulge_offset,
                bulge_min,
                bulge_max,
                ..
            } => {
                let (c0, c1) = (start.lerp(&end, tau0), start.lerp(&end, tau1));
                if k == 0 {
                    return p - c0 + c1;
                }
                let r = |t: f64| bulge_min + (bulge_max - bulge_min) * t;
                c1 + bulge_offset + (p - c0 - bulge_offset) * (r(tau1) / r(tau0))
            }
        }
    }
}

fn rotate_z(v: Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

fn nearest_primitive(prims: &[(AnalyticSdf, Vec3)], p: &Vec3) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, (s, _)) in prims.iter().enumerate() {
        let v = s.value(p);
        if v < best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Orbit around the y-axis looking at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub radius: f64,
    pub height: f64,
    pub start_angle: f64,
    /// Total swept angle over the sequence.
    pub arc: f64,
    pub fov_x: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            radius: 2.5,
            height: 0.8,
            start_angle: 0.0,
            arc: 2.0 * std::f64::consts::PI,
            fov_x: 0.9,
            near: 0.1,
            far: 6.0,
        }
    }
}

/// A complete synthetic sequence description; written as `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub family: SceneFamily,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub camera: CameraPath,
    /// Direction towards the light.
    pub light: Vec3,
    pub ambient: f64,
    /// Proxy vertices to write; `None` writes no proxies.
    pub proxy_vertices: Option<usize>,
    pub gt_res: usize,
    /// Half-width of the cube holding the scene at every frame.
    pub bounds_half: f64,
    pub seed: u64,
}

impl AnalyticScene {
    pub fn new(family: SceneFamily, frames: usize, width: usize, height: usize) -> Self {
        Self {
            family,
            frames,
            width,
            height,
            camera: CameraPath::default(),
            light: Vec3::new(0.4, 0.8, -0.45).normalize(),
            ambient: 0.3,
            proxy_vertices: Some(20),
            gt_res: 256,
            bounds_half: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("frames and image size must be positive".into()));
        }
        if self.gt_res < crate::extract::MIN_RES {
            return Err(Error::InvalidArgument("ground-truth resolution too small".into()));
        }
        if !(0.0..=1.0).contains(&self.ambient) || !(self.bounds_half > 0.0) {
            return Err(Error::InvalidArgument("bad ambient term or bounds".into()));
        }
        Ok(())
    }

    pub fn tau(&self, frame: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::cube(self.bounds_half)
    }

    /// Frame-space SDF and the index of the closest primitive.
    pub fn sdf_with_primitive(&self, frame: usize, p: &Vec3) -> (f64, Vec3, Vec3) {
        let prims = self.family.primitives(self.tau(frame));
        let k = nearest_primitive(&prims, p);
        (prims[k].0.value(p), prims[k].0.gradient(p), prims[k].1)
    }

    pub fn sdf(&self, frame: usize, p: &Vec3) -> f64 {
        self.sdf_with_primitive(frame, p).0
    }

    pub fn camera(&self, frame: usize) -> Result<CameraModel> {
        let c = &self.camera;
        let a = c.start_angle + c.arc * self.tau(frame);
        let eye = Vec3::new(c.radius * a.sin(), c.height, -c.radius * a.cos());
        CameraModel::look_at(
            eye,
            Vec3::zeros(),
            Vec3::y(),
            c.fov_x,
            self.width,
            self.height,
            c.near,
            c.far,
        )
    }

    /// First hit of a ray by sphere tracing.
    pub fn trace(&self, frame: usize, ray: &Ray) -> Option<f64> {
        let mut t = ray.near;
        for _ in 0..TRACE_STEPS {
            if t > ray.far {
                return None;
            }
            let d = self.sdf(frame, &ray.at(t));
            if d < TRACE_EPS {
                return Some(t);
            }
            t += d;
        }
        None
    }

    /// Lambertian image and binary mask of one frame.
    pub fn render_frame(&self, frame: usize) -> Result<Frame> {
        let cam = self.camera(frame)?;
        let mut rgb = Vec::with_capacity(self.width * self.height);
        let mut mask = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                let ray = cam.ray_for_pixel(u as f64, v as f64)?;
                match self.trace(frame, &ray) {
                    Some(t) => {
                        let (_, n, albedo) = self.sdf_with_primitive(frame, &ray.at(t));
                        let shade = self.ambient + (1.0 - self.ambient) * n.dot(&self.light).max(0.0);
                        // quantized as stored on disk
                        rgb.push((albedo * shade).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0));
                        mask.push(1.0);
                    }
                    None => {
                        rgb.push(Vec3::zeros());
                        mask.push(0.0);
                    }
                }
            }
        }
        Frame::new(
            RgbImage::new(self.width, self.height, rgb)?,
            GrayImage::new(self.width, self.height, mask)?,
            cam,
        )
    }

    /// Marching-cubes mesh of the frame's exact SDF.
    pub fn gt_mesh(&self, frame: usize, res: usize) -> Result<TriMesh> {
        Grid::sample(res, self.bounds(), &|pts: &[Vec3]| {
            Ok(pts.iter().map(|p| self.sdf(frame, p)).collect())
        })?
        .march()
    }

    /// `n` vertices of the first frame's ground-truth mesh (marched at
    /// `res`), carried along with the motion to every frame.
    pub fn proxies(&self, n: usize, res: usize) -> Result<ProxySequence> {
        let mesh = self.gt_mesh(0, res)?;
        if n == 0 || n > mesh.vertices.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot pick {n} of {} proxy vertices",
                mesh.vertices.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = index::sample(&mut rng, mesh.vertices.len(), n).into_vec();
        picked.sort_unstable();
        let base: Vec<Vec3> = picked.iter().map(|&i| mesh.vertices[i]).collect();
        let frames = (0..self.frames)
            .map(|f| {
                base.iter()
                    .map(|p| self.family.transport(p, 0.0, self.tau(f)))
                    .collect()
            })
            .collect();
        ProxySequence::new(frames, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2)
    }
}

/// Path of the ground-truth mesh of `frame`.
pub fn gt_mesh_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("gt_meshes").join(format!("{frame:04}.ply"))
}

/// Resolution used to pick proxy vertices.
const PROXY_RES: usize = 64;

/// Write `images/`, `masks/`, `cameras.json`, `gt_meshes/`, `proxies.json`
/// (when requested) and `scene.json` under `out_dir`.
pub fn generate_scene(scene: &AnalyticScene, out_dir: &Path) -> Result<Dataset> {
    scene.validate()?;
    for sub in ["images", "masks", "gt_meshes"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let one = |f: usize| -> Result<Frame> {
        let frame = scene.render_frame(f)?;
        frame.image.save_png(&image_path(out_dir, f))?;
        frame.mask.save_pgm(&mask_path(out_dir, f))?;
        scene.gt_mesh(f, scene.gt_res)?.save_ply(&gt_mesh_path(out_dir, f))?;
        Ok(frame)
    };
    #[cfg(feature = "parallel")]
    let frames: Vec<Frame> = {
        use rayon::prelude::*;
        (0..scene.frames).into_par_iter().map(one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let frames: Vec<Frame> = (0..scene.frames).map(one).collect::<Result<_>>()?;
    let cams: Vec<CameraModel> = frames.iter().map(|f| f.camera.clone()).collect();
    save_cameras(&out_dir.join("cameras.json"), &cams)?;
    let proxies = match scene.proxy_vertices {
        Some(n) => {
            let p = scene.proxies(n, PROXY_RES)?;
            p.save(&out_dir.join("proxies.json"))?;
            Some(p)
        }
        None => None,
    };
    std::fs::write(out_dir.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
    Dataset::new(frames, proxies)
}

/// Read `gt_meshes/%04d.ply` for `frames` frames.
pub fn load_gt_meshes(dir: &Path, frames: usize) -> Result<Vec<TriMesh>> {
    (0..frames).map(|f| TriMesh::load_ply(&gt_mesh_path(dir, f))).collect()
}

pub fn load_scene(dir: &Path) -> Result<AnalyticScene> {
    Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_scene(start: Vec3, end: Vec3, frames: usize, size: usize) -> AnalyticScene {
        let mut s = AnalyticScene::new(
            SceneFamily::TranslatingSphere {
                radius: 0.4,
                start,
                end,
            },
            frames,
            size,
            size,
        );
        s.camera.arc = 0.0;
        s
    }

    #[test]
    fn static_sphere_mask_matches_projected_disk() {
        let s = sphere_scene(Vec3::zeros(), Vec3::zeros(), 1, 128);
        let f = s.render_frame(0).unwrap();
        let count: f64 = f.mask.pixels.iter().sum();
        let cam = &f.camera;
        let d = cam.center().norm();
        let r_px = cam.fx * 0.4 / (d * d - 0.16).sqrt();
        let area = std::f64::consts::PI * r_px * r_px;
        assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
    }

    #[test]
    fn mask_centroid_tracks_projected_center() {
        let s = sphere_scene(Vec3::new(-0.15, 0.05, 0.0), Vec3::new(0.15, -0.05, 0.0), 5, 128);
        for f in 0..5 {
            let frame = s.render_frame(f).unwrap();
            let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
            for v in 0..128 {
                for u in 0..128 {
                    let m = frame.mask.pixels[v * 128 + u];
                    su += m * u as f64;
                    sv += m * v as f64;
                    n += m;
                }
            }
            let c = Vec3::new(-0.15, 0.05, 0.0).lerp(&Vec3::new(0.15, -0.05, 0.0), s.tau(f));
            let (pu, pv) = frame.camera.project(&c).unwrap();
            assert!((su / n - pu).abs() < 1.0 && (sv / n - pv).abs() < 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = AnalyticScene::new(SceneFamily::blob(), 3, 24, 20);
        s.gt_res = 24;
        s.proxy_vertices = Some(7);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        generate_scene(&s, &a).unwrap();
        let data = generate_scene(&s, &b).unwrap();
        for rel in ["images/0002.png", "masks/0001.pgm", "cameras.json", "gt_meshes/0000.ply", "proxies.json", "scene.json"] {
            assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
        }
        let loaded = Dataset::load(&a, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).unwrap();
        assert_eq!(loaded.frames[2].image, data.frames[2].image);
        assert_eq!(loaded.proxies.unwrap().vertex_count(), 7);
        assert_eq!(load_scene(&a).unwrap(), s);
        assert_eq!(load_gt_meshes(&a, 3).unwrap().len(), 3);
    }

    #[test]
    fn families_have_unit_gradients_away_from_seams() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for fam in [
            SceneFamily::translating_sphere(),
            SceneFamily::bending_capsule(),
            SceneFamily::cactus(),
            SceneFamily::blob(),
            SceneFamily::blob_large_translation(),
        ] {
            let prims = fam.primitives(0.6);
            for _ in 0..200 {
                let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let mut v: Vec<f64> = prims.iter().map(|(s, _)| s.value(&p)).collect();
                v.sort_by(f64::total_cmp);
                if v.len() > 1 && v[1] - v[0] < 1e-3 {
                    continue;
                }
                let f = |q: Vec3| prims.iter().map(|(s, _)| s.value(&q)).fold(f64::INFINITY, f64::min);
                let h = 1e-6;
                let g = Vec3::from_fn(|k, _| {
                    let e = Vec3::from_fn(|j, _| if j == k { h } else { 0.0 });
                    (f(p + e) - f(p - e)) / (2.0 * h)
                });
                assert!((g.norm() - 1.0).abs() < 1e-5, "{fam:?} at {p:?}");
            }
        }
    }

    #[test]
    fn proxies_follow_the_motion() {
        let mut s = AnalyticScene::new(SceneFamily::translating_sphere(), 4, 16, 16);
        s.gt_res = 32;
        let p = s.proxies(10, 32).unwrap();
        let shift = Vec3::new(0.4, 0.0, 0.0) / 3.0;
        for f in 1..4 {
            for (a, b) in p.vertices(f - 1).unwrap().iter().zip(p.vertices(f).unwrap()) {
                assert!((b - a - shift).norm() < 1e-12);
            }
        }
        for fam in [SceneFamily::bending_capsule(), SceneFamily::cactus(), SceneFamily::blob()] {
            let s = AnalyticScene::new(fam, 5, 16, 16);
            let p = s.proxies(30, 48).unwrap();
            for f in 0..5 {
                let prims = s.family.primitives(s.tau(f));
                for v in p.vertices(f).unwrap() {
                    // on the surface of its own part, which may dip into another
                    let d = prims.iter().map(|(q, _)| q.value(v).abs()).fold(f64::INFINITY, f64::min);
                    assert!(d < 0.03, "{:?} frame {f}: {d}", s.family);
                }
            }
        }
    }

    #[test]
    fn gt_mesh_is_closed_and_on_the_surface() {
        let s = AnalyticScene::new(SceneFamily::blob(), 3, 16, 16);
        let m = s.gt_mesh(1, 64).unwrap();
        assert!(m.is_watertight());
        let cell = s.bounds().cell_diagonal(64);
        assert!(m.vertices.iter().all(|v| s.sdf(1, v).abs() < cell));
    }

    #[test]
    fn invalid_scenes_are_rejected() {
        let mut s = AnalyticScene::new(SceneFamily::blob(), 0, 16, 16);
        assert!(s.validate().is_err());
        s.frames = 2;
        s.gt_res = 4;
        assert!(s.validate().is_err());
    }
}
