//! Per-frame explicit geometry by marching cubes over the bent SDF
//! `f(x + b_i(x))`, with camera-frustum culling.

mod mesh;
mod table;

pub use mesh::{MeshFormat, TriMesh};
pub use table::triangle_table;

use std::collections::HashMap;
use std::str::FromStr;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::scene::{FieldSet, ImplicitScene, WithLatent};
use crate::Vec3;

use table::{corner_offset, EDGES};

/// Smallest accepted grid resolution.
pub const MIN_RES: usize = 8;
/// Default samples per axis.
pub const DEFAULT_RES: usize = 128;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Bounds {
    /// The bounding cube of the unit sphere.
    fn default() -> Self {
        Self::cube(1.0)
    }
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|k| min[k] < max[k] && min[k].is_finite() && max[k].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "empty or non-finite bounds {min:?} .. {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    /// `[-half, half]^3`.
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn volume(&self) -> f64 {
        (self.max - self.min).product()
    }

    /// Bounding box of points, grown by `pad` on every side.
    pub fn around(points: &[Vec3], pad: f64) -> Result<Self> {
        let first = *points.first().ok_or(Error::EmptyPointSet)?;
        let (lo, hi) = points
            .iter()
            .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        Self::new(lo - Vec3::repeat(pad), hi + Vec3::repeat(pad))
    }

    /// Grid point `(i, j, k)` of a `res^3` lattice spanning the box.
    pub fn grid_point(&self, res: usize, i: usize, j: usize, k: usize) -> Vec3 {
        let step = (self.max - self.min) / (res - 1) as f64;
        self.min + Vec3::new(i as f64 * step.x, j as f64 * step.y, k as f64 * step.z)
    }

    /// Diagonal of one grid cell.
    pub fn cell_diagonal(&self, res: usize) -> f64 {
        self.diagonal() / (res - 1) as f64
    }
}

impl FromStr for Bounds {
    type Err = Error;

    /// `h` for `[-h, h]^3` or `x0,y0,z0,x1,y1,z1`.
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("bad bounds {s:?}")))?;
        match v.as_slice() {
            [h] if *h > 0.0 => Ok(Self::cube(*h)),
            [a, b, c, d, e, f] => Self::new(Vec3::new(*a, *b, *c), Vec3::new(*d, *e, *f)),
            _ => Err(Error::InvalidArgument(format!(
                "bounds must be one half-width or six numbers, got {s:?}"
            ))),
        }
    }
}

/// Grid values, `values[i + res * (j + res * k)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub res: usize,
    pub bounds: Bounds,
    pub values: Vec<f64>,
}

fn check_res(res: usize) -> Result<()> {
    if res < MIN_RES {
        return Err(Error::InvalidArgument(format!(
            "grid resolution {res} below the minimum {MIN_RES}"
        )));
    }
    Ok(())
}

impl Grid {
    /// Evaluate `f` on the lattice, one `z` slab per task.
    pub fn sample(
        res: usize,
        bounds: Bounds,
        f: &(dyn Fn(&[Vec3]) -> Result<Vec<f64>> + Sync),
    ) -> Result<Self> {
        check_res(res)?;
        let slab = |k: usize| -> Result<Vec<f64>> {
            let pts: Vec<Vec3> = (0..res * res)
                .map(|ij| bounds.grid_point(res, ij % res, ij / res, k))
                .collect();
            let v = f(&pts)?;
            if v.len() != pts.len() {
                return Err(Error::Shape("field returned the wrong number of values".into()));
            }
            Ok(v)
        };
        #[cfg(feature = "parallel")]
        let slabs: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..res).into_par_iter().map(slab).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let slabs: Vec<Vec<f64>> = (0..res).map(slab).collect::<Result<_>>()?;
        Ok(Self {
            res,
            bounds,
            values: slabs.concat(),
        })
    }

    /// Zero isosurface with linear edge interpolation. Negative values are
    /// inside; triangles wind counter-clockwise seen from outside.
    pub fn march(&self) -> Result<TriMesh> {
        let res = self.res;
        check_res(res)?;
        if self.values.len() != res * res * res {
            return Err(Error::Shape("grid value count does not match resolution".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values".into()));
        }
        let idx = |i: usize, j: usize, k: usize| i + res * (j + res * k);
        let table = triangle_table();
        let mut vertex_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mesh = TriMesh::default();
        for k in 0..res - 1 {
            for j in 0..res - 1 {
                for i in 0..res - 1 {
                    let corner = |c: usize| {
                        let o = corner_offset(c);
                        (i + o[0], j + o[1], k + o[2])
                    };
                    let mut case = 0;
                    for c in 0..8 {
                        let (a, b, d) = corner(c);
                        if self.values[idx(a, b, d)] < 0.0 {
                            case |= 1 << c;
                        }
                    }
                    for tri in &table[case] {
                        let mut t = [0; 3];
                        for (slot, &e) in t.iter_mut().zip(tri) {
                            let (ca, cb) = EDGES[e];
                            let (pa, pb) = (corner(ca), corner(cb));
                            let axis = (ca ^ cb).trailing_zeros() as usize;
                            let key = (idx(pa.0, pa.1, pa.2), axis);
                            *slot = *vertex_of.entry(key).or_insert_with(|| {
                                let fa = self.values[key.0];
                                let fb = self.values[idx(pb.0, pb.1, pb.2)];
                                let xa = self.bounds.grid_point(res, pa.0, pa.1, pa.2);
                                let xb = self.bounds.grid_point(res, pb.0, pb.1, pb.2);
                                mesh.vertices.push(xa + (xb - xa) * (fa / (fa - fb)));
                                mesh.vertices.len() - 1
                            });
                        }
                        mesh.triangles.push(t);
                    }
                }
            }
        }
        mesh.cleanup();
        Ok(mesh)
    }
}

/// Sentinel for culled grid points: ten bounds diagonals.
pub fn cull_value(bounds: &Bounds) -> f64 {
    10.0 * bounds.diagonal()
}

/// Grid of `f(x + b_frame(x))`; with a camera, points outside its frustum
/// get [`cull_value`].
pub fn frame_grid(
    scene: &dyn ImplicitScene,
    frame: usize,
    cam: Option<&CameraModel>,
    res: usize,
    bounds: Bounds,
) -> Result<Grid> {
    if frame >= scene.frame_count() {
        return Err(Error::FrameOutOfRange {
            frame,
            count: scene.frame_count(),
        });
    }
    let large = cull_value(&bounds);
    Grid::sample(res, bounds, &|pts: &[Vec3]| {
        let keep: Vec<usize> = match cam {
            Some(c) => (0..pts.len()).filter(|&i| c.in_frustum(&pts[i])).collect(),
            None => (0..pts.len()).collect(),
        };
        let mut out = vec![large; pts.len()];
        if keep.is_empty() {
            return Ok(out);
        }
        let sel: Vec<Vec3> = keep.iter().map(|&i| pts[i]).collect();
        let off = scene.bend(frame, &sel)?;
        let bent: Vec<Vec3> = sel.iter().zip(&off).map(|(x, b)| x + b).collect();
        for (&i, v) in keep.iter().zip(scene.sdf(&bent)?) {
            out[i] = v;
        }
        Ok(out)
    })
}

/// Mesh of frame `frame`, culled to `cam`'s frustum when given. An empty
/// surface is an empty mesh.
pub fn march_frame(
    scene: &dyn ImplicitScene,
    frame: usize,
    cam: Option<&CameraModel>,
    res: usize,
    bounds: Bounds,
) -> Result<TriMesh> {
    frame_grid(scene, frame, cam, res, bounds)?.march()
}

/// Meshes of every frame; with cameras (one per frame), each is culled to
/// its own frustum.
pub fn march_sequence(
    scene: &dyn ImplicitScene,
    cams: Option<&[CameraModel]>,
    res: usize,
    bounds: Bounds,
) -> Result<Vec<TriMesh>> {
    if let Some(c) = cams {
        if c.len() != scene.frame_count() {
            return Err(Error::Shape(format!(
                "{} cameras for {} frames",
                c.len(),
                scene.frame_count()
            )));
        }
    }
    (0..scene.frame_count())
        .map(|f| march_frame(scene, f, cams.map(|c| &c[f]), res, bounds))
        .collect()
}

/// Mesh of the canonical SDF without bending.
pub fn march_canonical(scene: &dyn ImplicitScene, res: usize, bounds: Bounds) -> Result<TriMesh> {
    Grid::sample(res, bounds, &|pts: &[Vec3]| scene.sdf(pts))?.march()
}

/// Mesh for an arbitrary latent code, e.g. an interpolation between frames.
pub fn march_latent(
    fields: &FieldSet,
    code: &[f64],
    cam: Option<&CameraModel>,
    res: usize,
    bounds: Bounds,
) -> Result<TriMesh> {
    let scene = WithLatent {
        fields,
        code: code.to_vec(),
    };
    march_frame(&scene, 0, cam, res, bounds)
}
