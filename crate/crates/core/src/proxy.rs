//! Scene flow between frames interpolated from corresponded proxy vertices
//! with Gaussian kernels and attenuation by the nearest-vertex distance.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Default kernel scale for the convex combination (1/length^2).
pub const DEFAULT_LAMBDA1: f64 = 700.0;
/// Default attenuation scale (1/length^2).
pub const DEFAULT_LAMBDA2: f64 = 75.0;

/// Per-frame vertex positions; vertex `k` corresponds across frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxySequence {
    frames: Vec<Vec<Vec3>>,
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Serialize, Deserialize)]
struct ProxyFile {
    frames: Vec<Vec<[f64; 3]>>,
}

impl ProxySequence {
    pub fn new(frames: Vec<Vec<Vec3>>, lambda1: f64, lambda2: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Format("proxy sequence has no frames".into()));
        }
        let nv = frames[0].len();
        if nv == 0 {
            return Err(Error::Format("proxy frames have no vertices".into()));
        }
        if let Some(i) = frames.iter().position(|f| f.len() != nv) {
            return Err(Error::Format(format!(
                "frame {i} has {} vertices, frame 0 has {nv}",
                frames[i].len()
            )));
        }
        if frames.iter().flatten().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("proxy vertex".into()));
        }
        if !(lambda1 > 0.0 && lambda2 > 0.0) {
            return Err(Error::InvalidArgument("kernel scales must be positive".into()));
        }
        Ok(Self {
            frames,
            lambda1,
            lambda2,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.frames[0].len()
    }

    pub fn vertices(&self, frame: usize) -> Result<&[Vec3]> {
        self.check(frame)?;
        Ok(&self.frames[frame])
    }

    fn check(&self, frame: usize) -> Result<()> {
        if frame >= self.frames.len() {
            return Err(Error::FrameOutOfRange {
                frame,
                count: self.frames.len(),
            });
        }
        Ok(())
    }

    /// Kernel-weighted mean of vertex displacements from frame `i` to `j`,
    /// plus the squared distance to the nearest vertex. Weights are taken
    /// relative to the nearest vertex so the denominator is at least 1.
    fn raw_and_nearest(&self, i: usize, j: usize, x: &Vec3) -> (Vec3, f64) {
        let (vi, vj) = (&self.frames[i], &self.frames[j]);
        let d2: Vec<f64> = vi.iter().map(|v| (x - v).norm_squared()).collect();
        let dmin = d2.iter().copied().fold(f64::INFINITY, f64::min);
        let mut num = Vec3::zeros();
        let mut den = 0.0;
        for k in 0..vi.len() {
            let w = (self.lambda1 * (dmin - d2[k])).exp();
            num += (vj[k] - vi[k]) * w;
            den += w;
        }
        (num / den, dmin)
    }

    /// Unattenuated flow `m'_{i->j}(x)`.
    pub fn flow_raw(&self, i: usize, j: usize, x: &Vec3) -> Result<Vec3> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.raw_and_nearest(i, j, x).0)
    }

    /// Attenuated flow `m_{i->j}(x) = exp(-lambda2 d_min^2) m'_{i->j}(x)`.
    pub fn flow(&self, i: usize, j: usize, x: &Vec3) -> Result<Vec3> {
        self.check(i)?;
        self.check(j)?;
        let (m, dmin) = self.raw_and_nearest(i, j, x);
        Ok(m * (-self.lambda2 * dmin).exp())
    }

    /// [`Self::flow`] over many points.
    pub fn flow_batch(&self, i: usize, j: usize, xs: &[Vec3]) -> Result<Vec<Vec3>> {
        self.check(i)?;
        self.check(j)?;
        Ok(xs
            .iter()
            .map(|x| {
                let (m, dmin) = self.raw_and_nearest(i, j, x);
                m * (-self.lambda2 * dmin).exp()
            })
            .collect())
    }

    /// Keep the vertices at `indices` (in that order) in every frame.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&k) = indices.iter().find(|&&k| k >= self.vertex_count()) {
            return Err(Error::InvalidArgument(format!(
                "vertex {k} out of range for {} vertices",
                self.vertex_count()
            )));
        }
        let frames = self
            .frames
            .iter()
            .map(|f| indices.iter().map(|&k| f[k]).collect())
            .collect();
        Self::new(frames, self.lambda1, self.lambda2)
    }

    /// Uniformly chosen subset of `n` vertices, correspondence preserved.
    pub fn decimate(&self, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || n > self.vertex_count() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} vertices",
                self.vertex_count()
            )));
        }
        let mut idx = sample(rng, self.vertex_count(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Parse the JSON form `{"frames": [[[x, y, z], ...], ...]}`.
    pub fn from_json(text: &str, lambda1: f64, lambda2: f64) -> Result<Self> {
        let file: ProxyFile = serde_json::from_str(text)?;
        let frames = file
            .frames
            .into_iter()
            .map(|f| f.into_iter().map(Vec3::from).collect())
            .collect();
        Self::new(frames, lambda1, lambda2)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ProxyFile {
            frames: self
                .frames
                .iter()
                .map(|f| f.iter().map(|v| [v.x, v.y, v.z]).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Load from a file; with `expected_frames` the frame count must match.
    pub fn load(
        path: &Path,
        lambda1: f64,
        lambda2: f64,
        expected_frames: Option<usize>,
    ) -> Result<Self> {
        let seq = Self::from_json(&std::fs::read_to_string(path)?, lambda1, lambda2)?;
        if let Some(n) = expected_frames {
            if seq.frame_count() != n {
                return Err(Error::Format(format!(
                    "proxies cover {} frames, dataset has {n}",
                    seq.frame_count()
                )));
            }
        }
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
