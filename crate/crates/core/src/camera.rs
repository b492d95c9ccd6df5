//! Pinhole cameras. Camera space is right-handed, looks down +z, and has
//! image y pointing down. Pixel centers sit at integer coordinates, so pixel
//! `(u, v)` covers `[u - 0.5, u + 0.5] x [v - 0.5, v + 0.5]`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

const ORTHO_TOL: f64 = 1e-6;

/// A straight ray `r(t) = origin + t * dir` with its depth interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    /// Pixel coordinates the ray passes through.
    pub pixel: (f64, f64),
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }

    /// Replace the depth interval with the intersection against a sphere of
    /// `radius` at the origin. A ray that misses gets an interval of width
    /// `2 radius` centered at its closest approach. Depths stay positive.
    pub fn with_sphere_bounds(mut self, radius: f64) -> Self {
        let b = self.origin.dot(&self.dir);
        let c = self.origin.norm_squared() - radius * radius;
        let disc = b * b - c;
        let (lo, hi) = if disc > 0.0 {
            let h = disc.sqrt();
            (-b - h, -b + h)
        } else {
            (-b - radius, -b + radius)
        };
        let floor = 1e-4;
        self.near = lo.max(floor);
        self.far = hi.max(self.near + floor);
        self
    }
}

/// Serialized form: one record per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform.
    pub world_from_camera: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Pinhole camera with a rigid pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    world_from_camera: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        if r.world_from_camera.len() != 16 {
            return Err(Error::Format(format!(
                "world_from_camera needs 16 values, got {}",
                r.world_from_camera.len()
            )));
        }
        let m = Matrix4::from_row_slice(&r.world_from_camera);
        Self::new(r.fx, r.fy, r.cx, r.cy, m, r.width, r.height, r.near, r.far)
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let m = c.world_from_camera;
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_from_camera: (0..16).map(|i| m[(i / 4, i % 4)]).collect(),
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_from_camera: Matrix4<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got near {near}, far {far}"
            )));
        }
        let rot = world_from_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho = (rot.transpose() * rot - Matrix3::identity()).abs().max();
        let last_row = world_from_camera.fixed_view::<1, 4>(3, 0);
        if !world_from_camera.iter().all(|v| v.is_finite())
            || ortho > ORTHO_TOL
            || (rot.determinant() - 1.0).abs() > ORTHO_TOL
            || last_row != nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)
        {
            return Err(Error::InvalidArgument(
                "world_from_camera must be a rigid transform".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            world_from_camera,
            width,
            height,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` appearing upward in the
    /// image. The principal point is the image center and `fov_x` is the
    /// full horizontal field of view in radians.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_x: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Degenerate("eye equals target".into()))?;
        let x = z
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Degenerate("up is parallel to the view direction".into()))?;
        let y = z.cross(&x);
        let mut m = Matrix4::identity();
        for r in 0..3 {
            m[(r, 0)] = x[r];
            m[(r, 1)] = y[r];
            m[(r, 2)] = z[r];
            m[(r, 3)] = eye[r];
        }
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            m,
            width,
            height,
            near,
            far,
        )
    }

    pub fn world_from_camera(&self) -> &Matrix4<f64> {
        &self.world_from_camera
    }

    pub fn center(&self) -> Vec3 {
        self.world_from_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    fn rotation(&self) -> Matrix3<f64> {
        self.world_from_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    fn in_image(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u <= self.width as f64 - 0.5 && v >= -0.5 && v <= self.height as f64 - 0.5
    }

    /// Ray through pixel `(u, v)` with the camera's near/far interval.
    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Result<Ray> {
        if !self.in_image(u, v) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let local = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ok(Ray {
            origin: self.center(),
            dir: (self.rotation() * local).normalize(),
            pixel: (u, v),
            near: self.near,
            far: self.far,
        })
    }

    /// Point in camera coordinates.
    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation().transpose() * (x - self.center())
    }

    /// Pixel coordinates of `x`, or `None` when it is not in front of the
    /// camera.
    pub fn project(&self, x: &Vec3) -> Option<(f64, f64)> {
        let p = self.to_camera(x);
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// True when `x` projects into the image at a distance from the camera
    /// center strictly between near and far. Distance (rather than z) is
    /// used so that the test agrees with ray depths.
    pub fn in_frustum(&self, x: &Vec3) -> bool {
        let dist = (x - self.center()).norm();
        if !(dist > self.near && dist < self.far) {
            return false;
        }
        match self.project(x) {
            Some((u, v)) => self.in_image(u, v),
            None => false,
        }
    }
}

/// Read a JSON array of camera records.
pub fn load_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_cameras(path: &Path, cams: &[CameraModel]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cams)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn orbit_camera(angle: f64, elevation: f64) -> CameraModel {
        let eye = Vec3::new(
            3.0 * angle.cos() * elevation.cos(),
            3.0 * elevation.sin(),
            3.0 * angle.sin() * elevation.cos(),
        );
        CameraModel::look_at(eye, Vec3::zeros(), Vec3::y(), 0.8, 64, 48, 1.0, 5.0).unwrap()
    }

    #[test]
    fn identity_pose_unit_intrinsics_looks_down_z() {
        let cam = CameraModel::new(1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 1, 1, 0.1, 10.0).unwrap();
        let ray = cam.ray_for_pixel(0.0, 0.0).unwrap();
        assert_eq!(ray.dir, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(ray.origin, Vec3::zeros());
    }

    #[test]
    fn principal_point_gives_optical_axis() {
        let cam = orbit_camera(0.3, 0.2);
        let ray = cam.ray_for_pixel(cam.cx, cam.cy).unwrap();
        let axis = (Vec3::zeros() - cam.center()).normalize();
        assert!((ray.dir - axis).norm() < 1e-12);
    }

    #[test]
    fn look_at_keeps_up_upward_in_the_image() {
        let cam = CameraModel::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::zeros(),
            Vec3::y(),
            0.8,
            64,
            64,
            1.0,
            5.0,
        )
        .unwrap();
        let (_, v_top) = cam.project(&Vec3::new(0.0, 0.5, 0.0)).unwrap();
        // Facing +z with +y up, world -x is on the right.
        let (u_right, _) = cam.project(&Vec3::new(-0.5, 0.0, 0.0)).unwrap();
        assert!(v_top < cam.cy);
        assert!(u_right > cam.cx);
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let cam = orbit_camera(0.0, 0.0);
        assert!(matches!(
            cam.ray_for_pixel(64.0, 0.0),
            Err(Error::PixelOutOfBounds { .. })
        ));
        assert!(cam.ray_for_pixel(-0.6, 3.0).is_err());
        assert!(cam.ray_for_pixel(63.5, 47.5).is_ok());
    }

    #[test]
    fn rejects_bad_cameras() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, m, 4, 4, 0.1, 1.0).is_err());
        let mut mirror = Matrix4::identity();
        mirror[(0, 0)] = -1.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, mirror, 4, 4, 0.1, 1.0).is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 4, 4, 1.0, 1.0).is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, Matrix4::identity(), 4, 4, 0.0, 1.0).is_err());
    }

    #[test]
    fn frustum_trivial_cases() {
        let cam = orbit_camera(1.0, 0.3);
        let axis = (Vec3::zeros() - cam.center()).normalize();
        let mid = cam.center() + axis * (0.5 * (cam.near + cam.far));
        assert!(cam.in_frustum(&mid));
        assert!(!cam.in_frustum(&(cam.center() - axis)));
        assert!(!cam.in_frustum(&(cam.center() + axis * 0.5 * cam.near)));
    }

    #[test]
    fn json_roundtrip() {
        let cams = vec![orbit_camera(0.1, 0.2), orbit_camera(2.0, -0.1)];
        let text = serde_json::to_string(&cams).unwrap();
        let back: Vec<CameraModel> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cams);
        let bad = text.replacen("\"width\":64", "\"width\":0", 1);
        assert!(serde_json::from_str::<Vec<CameraModel>>(&bad).is_err());
    }

    #[test]
    fn sphere_bounds() {
        let cam = orbit_camera(0.0, 0.0);
        let hit = cam.ray_for_pixel(cam.cx, cam.cy).unwrap().with_sphere_bounds(1.0);
        assert!((hit.near - 2.0).abs() < 1e-9 && (hit.far - 4.0).abs() < 1e-9);
        let miss = cam.ray_for_pixel(0.0, 0.0).unwrap().with_sphere_bounds(0.1);
        assert!(miss.near > 0.0 && (miss.far - miss.near - 0.2).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn reprojection_roundtrip(
            angle in 0.0..std::f64::consts::TAU,
            elev in -1.0..1.0f64,
            u in -0.5..63.5f64,
            v in -0.5..47.5f64,
            s in 0.001..0.999f64,
        ) {
            let cam = orbit_camera(angle, elev);
            let ray = cam.ray_for_pixel(u, v).unwrap();
            let t = cam.near + s * (cam.far - cam.near);
            let (pu, pv) = cam.project(&ray.at(t)).unwrap();
            prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
            prop_assert!((ray.dir.norm() - 1.0).abs() < 1e-9);
            prop_assert!(cam.in_frustum(&ray.at(t)));
        }

        #[test]
        fn in_frustum_iff_reachable_by_a_ray(
            angle in 0.0..std::f64::consts::TAU,
            p in proptest::array::uniform3(-4.0..4.0f64),
        ) {
            let cam = orbit_camera(angle, 0.2);
            let x = Vec3::from(p);
            let reachable = cam.project(&x).and_then(|(u, v)| {
                let ray = cam.ray_for_pixel(u, v).ok()?;
                let t = (x - ray.origin).dot(&ray.dir);
                ((ray.at(t) - x).norm() < 1e-9 && t > cam.near && t < cam.far).then_some(())
            });
            prop_assert_eq!(cam.in_frustum(&x), reachable.is_some());
        }

        #[test]
        fn directions_vary_continuously(u in 0.0..62.0f64, v in 0.0..46.0f64) {
            let cam = orbit_camera(0.7, 0.1);
            let a = cam.ray_for_pixel(u, v).unwrap().dir;
            let b = cam.ray_for_pixel(u + 1e-3, v + 1e-3).unwrap().dir;
            prop_assert!((a - b).norm() < 1e-4);
        }
    }
}
