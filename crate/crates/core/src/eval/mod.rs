//! Reconstruction metrics: Chamfer and Hausdorff distances, rigid ICP
//! alignment, latent-code PCA and per-sequence reports.

mod kdtree;

pub use kdtree::KdTree;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::extract::{march_latent, Bounds, TriMesh};
use crate::scene::FieldSet;
use crate::Vec3;

/// Surface samples per mesh for mesh-to-mesh metrics.
pub const DEFAULT_SAMPLES: usize = 10_000;
/// ICP iterations used by [`evaluate_sequence`].
pub const DEFAULT_ICP_ITERS: usize = 50;

fn nonempty(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    Ok(())
}

/// Distance from every point of `a` to its nearest neighbor in `b`.
pub fn nearest_distances(a: &[Vec3], b: &[Vec3]) -> Result<Vec<f64>> {
    nonempty(a, b)?;
    let tree = KdTree::new(b);
    let one = |p: &Vec3| tree.nearest(p).expect("non-empty").1.sqrt();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok(a.par_iter().map(one).collect())
    }
    #[cfg(not(feature = "parallel"))]
    Ok(a.iter().map(one).collect())
}

/// Mean nearest-neighbor distance from `a` to `b`.
pub fn directed_mean(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let d = nearest_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Largest nearest-neighbor distance from `a` to `b`.
pub fn directed_max(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(nearest_distances(a, b)?.into_iter().fold(0.0, f64::max))
}

/// Sum of both directed mean distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(directed_mean(a, b)? + directed_mean(b, a)?)
}

/// Larger of both directed maxima.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(directed_max(a, b)?.max(directed_max(b, a)?))
}

/// `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }
}

impl RigidTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().sum::<Vec3>() / p.len() as f64
}

/// Rigid transform minimizing `sum |R a_i + t - b_i|^2` (Kabsch).
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Result<RigidTransform> {
    if a.len() != b.len() {
        return Err(Error::Shape("Kabsch needs paired points".into()));
    }
    check_spread(a)?;
    let (ca, cb) = (centroid(a), centroid(b));
    let h: Matrix3<f64> = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - ca) * (q - cb).transpose())
        .sum();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("computed"), svd.v_t.expect("computed"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: cb - rotation * ca,
    })
}

/// At least three points, not all on one line.
fn check_spread(p: &[Vec3]) -> Result<()> {
    if p.len() < 3 {
        return Err(Error::Degenerate("need at least three points".into()));
    }
    let c = centroid(p);
    let cov: Matrix3<f64> = p.iter().map(|x| (x - c) * (x - c).transpose()).sum();
    let ev = cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0 && ev[1] > 1e-12 * ev[0]) {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }
    Ok(())
}

/// Result of [`icp_align`].
#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Matched sum of squared distances before each update and after the last.
    pub ssd: Vec<f64>,
}

/// Point-to-point ICP mapping `source` onto `target` for a fixed number of
/// iterations.
pub fn icp_align(source: &[Vec3], target: &[Vec3], iters: usize) -> Result<IcpResult> {
    nonempty(source, target)?;
    check_spread(source)?;
    check_spread(target)?;
    let tree = KdTree::new(target);
    let mut total = RigidTransform::default();
    let mut ssd = Vec::with_capacity(iters + 1);
    let mut moved = source.to_vec();
    let matches = |moved: &[Vec3]| -> (Vec<Vec3>, f64) {
        let mut s = 0.0;
        let m = moved
            .iter()
            .map(|p| {
                let (i, d2) = tree.nearest(p).expect("non-empty");
                s += d2;
                target[i]
            })
            .collect();
        (m, s)
    };
    for _ in 0..iters {
        let (matched, s) = matches(&moved);
        ssd.push(s);
        let step = kabsch(&moved, &matched)?;
        total = step.compose(&total);
        moved = source.iter().map(|p| total.apply(p)).collect();
    }
    ssd.push(matches(&moved).1);
    Ok(IcpResult {
        transform: total,
        ssd,
    })
}

/// Principal-component projection of the latent table.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `N_f x k` coordinates.
    pub projections: Vec<Vec<f64>>,
    /// Fraction of the total variance per component, non-increasing.
    pub explained: Vec<f64>,
    /// `k` principal axes.
    pub components: Vec<Vec<f64>>,
}

/// Mean-centered PCA of the rows of `latents` via the covariance
/// eigendecomposition. `k` may not exceed `min(rows, cols)`.
pub fn latent_pca(latents: &Matrix, k: usize) -> Result<Pca> {
    let (n, d) = latents.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidArgument(format!(
            "{k} components requested from a {n}x{d} table (rank at most {})",
            n.min(d)
        )));
    }
    let x = DMatrix::from_row_slice(n, d, latents.as_slice());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
        .collect();
    let explained = order[..k]
        .iter()
        .map(|&j| {
            if total > 0.0 {
                eig.eigenvalues[j].max(0.0) / total
            } else {
                0.0
            }
        })
        .collect();
    let projections = (0..n)
        .map(|r| {
            components
                .iter()
                .map(|c| (0..d).map(|j| centered[(r, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        projections,
        explained,
        components,
    })
}

/// Mean distance between consecutive-frame projections and between all
/// distinct frame pairs.
pub fn trajectory_smoothness(projections: &[Vec<f64>]) -> Result<(f64, f64)> {
    let n = projections.len();
    if n < 3 {
        return Err(Error::InvalidArgument("need at least three frames".into()));
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };
    let consecutive =
        (0..n - 1).map(|i| dist(&projections[i], &projections[i + 1])).sum::<f64>() / (n - 1) as f64;
    let mut all = 0.0;
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            all += dist(&projections[i], &projections[j]);
            count += 1;
        }
    }
    Ok((consecutive, all / count as f64))
}

/// Geometry for an arbitrary latent code within the default bounds.
pub fn synth_novel_latent(
    fields: &FieldSet,
    code: &[f64],
    cam: Option<&CameraModel>,
    res: usize,
) -> Result<TriMesh> {
    march_latent(fields, code, cam, res, Bounds::default())
}

/// Per-frame distances for one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` where the reconstruction had no geometry.
    pub chamfer: Vec<Option<f64>>,
    pub hausdorff: Vec<Option<f64>>,
    /// ICP transform applied to each reconstruction, when aligned.
    pub transforms: Vec<Option<RigidTransform>>,
}

impl MetricReport {
    /// Frames without geometry.
    pub fn missing(&self) -> Vec<usize> {
        (0..self.chamfer.len()).filter(|&i| self.chamfer[i].is_none()).collect()
    }

    fn mean(v: &[Option<f64>]) -> f64 {
        if v.is_empty() || v.iter().any(Option::is_none) {
            return f64::INFINITY;
        }
        v.iter().flatten().sum::<f64>() / v.len() as f64
    }

    /// Sequence-mean Chamfer distance; infinite if any frame is missing.
    pub fn mean_chamfer(&self) -> f64 {
        Self::mean(&self.chamfer)
    }

    /// Sequence-mean Hausdorff distance; infinite if any frame is missing.
    pub fn mean_hausdorff(&self) -> f64 {
        Self::mean(&self.hausdorff)
    }
}

/// Options for [`evaluate_sequence`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    /// Rigidly align each reconstruction to its ground truth first.
    pub align: bool,
    pub icp_iters: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            align: true,
            icp_iters: DEFAULT_ICP_ITERS,
        }
    }
}

/// Compare reconstructed meshes to ground truth frame by frame on
/// uniform-area surface samples.
pub fn evaluate_sequence(
    predicted: &[TriMesh],
    truth: &[TriMesh],
    opts: &EvalOptions,
    rng: &mut impl Rng,
) -> Result<MetricReport> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions for {} ground-truth frames",
            predicted.len(),
            truth.len()
        )));
    }
    let mut report = MetricReport::default();
    for (p, t) in predicted.iter().zip(truth) {
        let gt = t.sample_surface(opts.samples, rng)?;
        if p.is_empty() || !(p.area() > 0.0) {
            report.chamfer.push(None);
            report.hausdorff.push(None);
            report.transforms.push(None);
            continue;
        }
        let mut pts = p.sample_surface(opts.samples, rng)?;
        let mut transform = None;
        if opts.align {
            if let Ok(icp) = icp_align(&pts, &gt, opts.icp_iters) {
                pts = pts.iter().map(|x| icp.transform.apply(x)).collect();
                transform = Some(icp.transform);
            }
        }
        report.chamfer.push(Some(chamfer(&pts, &gt)?));
        report.hausdorff.push(Some(hausdorff(&pts, &gt)?));
        report.transforms.push(transform);
    }
    Ok(report)
}
