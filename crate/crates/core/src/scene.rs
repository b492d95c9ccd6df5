//! The learned scene: canonical SDF, color field, per-frame bending field
//! with latent codes, and the logistic sharpness `s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    geometric_init, Activation, Dual, InputSpec, Mlp, MlpShape, MlpVars, OutputActivation,
};
use crate::Vec3;

/// Logistic CDF with scale `1/s`: `1 / (1 + exp(-s x))`.
pub fn logistic_cdf(s: f64, x: f64) -> f64 {
    sigmoid(s * x)
}

/// Shapes and initial values of the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub latent_dim: usize,
    pub sdf_hidden: usize,
    pub sdf_depth: usize,
    pub sdf_skips: Vec<usize>,
    pub sdf_freqs: usize,
    pub softplus_beta: f64,
    pub color_hidden: usize,
    pub color_depth: usize,
    pub color_dir_freqs: usize,
    pub bend_hidden: usize,
    pub bend_depth: usize,
    pub bend_freqs: usize,
    pub init_radius: f64,
    pub init_refine_steps: usize,
    pub init_s: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            sdf_hidden: 256,
            sdf_depth: 8,
            sdf_skips: vec![4],
            sdf_freqs: 6,
            softplus_beta: 100.0,
            color_hidden: 256,
            color_depth: 4,
            color_dir_freqs: 4,
            bend_hidden: 64,
            bend_depth: 5,
            bend_freqs: 6,
            init_radius: 0.5,
            init_refine_steps: 100,
            init_s: 30.0,
        }
    }
}

impl FieldConfig {
    /// Small networks for single-core runs.
    pub fn compact() -> Self {
        Self {
            sdf_hidden: 64,
            sdf_depth: 4,
            sdf_skips: vec![2],
            sdf_freqs: 4,
            color_hidden: 32,
            color_depth: 2,
            bend_hidden: 32,
            bend_depth: 3,
            bend_freqs: 4,
            init_refine_steps: 300,
            ..Self::default()
        }
    }

    pub fn sdf_shape(&self) -> MlpShape {
        MlpShape {
            inputs: vec![InputSpec {
                dim: 3,
                freqs: self.sdf_freqs,
            }],
            hidden: self.sdf_hidden,
            depth: self.sdf_depth,
            out_dim: 1,
            skips: self.sdf_skips.clone(),
            activation: Activation::Softplus {
                beta: self.softplus_beta,
            },
            output: OutputActivation::Identity,
            weight_norm: true,
        }
    }

    pub fn color_shape(&self) -> MlpShape {
        MlpShape {
            inputs: vec![
                InputSpec { dim: 3, freqs: 0 },
                InputSpec {
                    dim: 3,
                    freqs: self.color_dir_freqs,
                },
            ],
            hidden: self.color_hidden,
            depth: self.color_depth,
            out_dim: 3,
            skips: vec![],
            activation: Activation::Relu,
            output: OutputActivation::Sigmoid,
            weight_norm: true,
        }
    }

    pub fn bend_shape(&self) -> MlpShape {
        MlpShape {
            inputs: vec![
                InputSpec {
                    dim: 3,
                    freqs: self.bend_freqs,
                },
                InputSpec {
                    dim: self.latent_dim,
                    freqs: 0,
                },
            ],
            hidden: self.bend_hidden,
            depth: self.bend_depth,
            out_dim: 3,
            skips: vec![],
            activation: Activation::Relu,
            output: OutputActivation::Identity,
            weight_norm: false,
        }
    }
}

/// Everything that is optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSet {
    pub config: FieldConfig,
    pub sdf: Mlp,
    pub color: Mlp,
    pub bend: Mlp,
    /// `N_f x latent_dim`.
    pub latents: Matrix,
    /// `log s` as a 1x1 matrix so it can be optimized like any tensor.
    pub log_s: Matrix,
}

/// Tape handles for a bound [`FieldSet`].
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub sdf: MlpVars,
    pub color: MlpVars,
    pub bend: MlpVars,
    pub latents: Var,
    pub log_s: Var,
    /// All tensors in [`FieldSet::params`] order.
    pub leaves: Vec<Var>,
}

impl FieldSet {
    /// All-zero networks with the configured shapes; the layout used when
    /// loading a checkpoint.
    pub fn zeros(config: FieldConfig, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("need at least one frame".into()));
        }
        if config.init_s <= 0.0 {
            return Err(Error::InvalidArgument("initial s must be positive".into()));
        }
        Ok(Self {
            sdf: Mlp::zeros(config.sdf_shape())?,
            color: Mlp::zeros(config.color_shape())?,
            bend: Mlp::zeros(config.bend_shape())?,
            latents: Matrix::zeros(frames, config.latent_dim),
            log_s: Matrix::scalar(config.init_s.ln()),
            config,
        })
    }

    /// Training start state: sphere-initialized SDF, default-initialized color
    /// net, bending net whose output layer is zero (identity bending), zero
    /// latents.
    pub fn new(config: FieldConfig, frames: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut fs = Self::zeros(config, frames)?;
        fs.sdf = Mlp::new(fs.config.sdf_shape(), rng)?;
        geometric_init(
            &mut fs.sdf,
            fs.config.init_radius,
            fs.config.init_refine_steps,
            rng,
        )?;
        fs.color = Mlp::new(fs.config.color_shape(), rng)?;
        fs.bend = Mlp::new(fs.config.bend_shape(), rng)?;
        fs.bend.zero_output_layer();
        Ok(fs)
    }

    pub fn frame_count(&self) -> usize {
        self.latents.rows()
    }

    pub fn s(&self) -> f64 {
        self.log_s.get(0, 0).exp()
    }

    pub fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frame_count() {
            return Err(Error::FrameOutOfRange {
                frame,
                count: self.frame_count(),
            });
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.sdf.params();
        p.extend(self.color.params());
        p.extend(self.bend.params());
        p.push(&self.latents);
        p.push(&self.log_s);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.sdf.params_mut();
        p.extend(self.color.params_mut());
        p.extend(self.bend.params_mut());
        p.push(&mut self.latents);
        p.push(&mut self.log_s);
        p
    }

    pub fn renormalize(&mut self) {
        self.sdf.renormalize();
        self.color.renormalize();
        self.bend.renormalize();
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<FieldVars> {
        if trainable {
            return self.bind_with(tape, &mut |t, m| t.leaf(m.clone()));
        }
        let sdf = self.sdf.bind(tape, false)?;
        let color = self.color.bind(tape, false)?;
        let bend = self.bend.bind(tape, false)?;
        let latents = tape.constant(self.latents.clone());
        let log_s = tape.constant(self.log_s.clone());
        Ok(FieldVars {
            sdf,
            color,
            bend,
            latents,
            log_s,
            leaves: Vec::new(),
        })
    }

    /// Bind with caller-chosen handles for every tensor, in [`Self::params`]
    /// order.
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        make: &mut dyn FnMut(&mut Tape, &Matrix) -> Var,
    ) -> Result<FieldVars> {
        let sdf = self.sdf.bind_with(tape, make)?;
        let color = self.color.bind_with(tape, make)?;
        let bend = self.bend.bind_with(tape, make)?;
        let latents = make(tape, &self.latents);
        let log_s = make(tape, &self.log_s);
        let mut leaves = sdf.leaves.clone();
        leaves.extend(&color.leaves);
        leaves.extend(&bend.leaves);
        leaves.push(latents);
        leaves.push(log_s);
        Ok(FieldVars {
            sdf,
            color,
            bend,
            latents,
            log_s,
            leaves,
        })
    }

    /// The latent row of `frame`, repeated `n` times.
    pub fn latent_rows(&self, tape: &mut Tape, vars: &FieldVars, frame: usize, n: usize) -> Result<Var> {
        self.check_frame(frame)?;
        tape.gather_rows(vars.latents, &vec![frame; n])
    }

    /// Bending offsets `b(x; latent)` for a batch of frame-space points.
    /// Tangents seeded on `points` come out as Jacobian-vector products.
    pub fn bend_tape(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        points: Dual,
        latent: Var,
    ) -> Result<Dual> {
        let enc = self.bend.encode(tape, &[points, Dual::constant(latent)])?;
        self.bend.forward(tape, &vars.bend, enc)
    }

    /// Canonical SDF values (`N x 1`); tangents give directional derivatives.
    pub fn sdf_tape(&self, tape: &mut Tape, vars: &FieldVars, points: Dual) -> Result<Dual> {
        let enc = self.sdf.encode(tape, &[points])?;
        self.sdf.forward(tape, &vars.sdf, enc)
    }

    /// Colors (`N x 3`) at canonical points viewed along unit `dirs`.
    pub fn color_tape(&self, tape: &mut Tape, vars: &FieldVars, points: Var, dirs: Var) -> Result<Var> {
        let enc = self
            .color
            .encode(tape, &[Dual::constant(points), Dual::constant(dirs)])?;
        Ok(self.color.forward(tape, &vars.color, enc)?.value)
    }

    /// Offsets using an arbitrary latent code instead of a stored one.
    pub fn bend_with_latent(&self, code: &[f64], pts: &[Vec3]) -> Result<Vec<Vec3>> {
        if code.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent code of length {}, expected {}",
                code.len(),
                self.config.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let lat = tape.constant(Matrix::from_fn(pts.len(), code.len(), |_, c| code[c]));
        let out = self.bend_tape(&mut tape, &vars, Dual::constant(x), lat)?;
        Ok(matrix_points(tape.value(out.value)))
    }

    /// Exact divergence of the bending field, one seeded tangent per axis.
    pub fn divergence(&self, frame: usize, pts: &[Vec3]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let lat = self.latent_rows(&mut tape, &vars, frame, pts.len())?;
        let xd = Dual::seed_axes(&mut tape, x);
        let out = self.bend_tape(&mut tape, &vars, xd, lat)?;
        let t = tape.value(out.tangent.expect("seeded")).clone();
        let n = pts.len();
        Ok((0..n)
            .map(|i| (0..3).map(|a| t.get(a * n + i, a)).sum())
            .collect())
    }

    /// Stochastic divergence `mean_k v_k^T J v_k` with Rademacher probes.
    pub fn divergence_hutchinson(
        &self,
        frame: usize,
        pts: &[Vec3],
        probes: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        let n = pts.len();
        let mut acc = vec![0.0; n];
        for _ in 0..probes {
            let v = Matrix::from_fn(n, 3, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let jv = self.bend_jvp_matrix(frame, pts, &v)?;
            for (i, a) in acc.iter_mut().enumerate() {
                *a += (0..3).map(|c| v.get(i, c) * jv.get(i, c)).sum::<f64>();
            }
        }
        Ok(acc.into_iter().map(|a| a / probes as f64).collect())
    }

    fn bend_jvp_matrix(&self, frame: usize, pts: &[Vec3], dirs: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let lat = self.latent_rows(&mut tape, &vars, frame, pts.len())?;
        let v = tape.constant(dirs.clone());
        let xd = Dual::seed_direction(&mut tape, x, v)?;
        let out = self.bend_tape(&mut tape, &vars, xd, lat)?;
        Ok(tape.value(out.tangent.expect("seeded")).clone())
    }
}

/// Points as an `N x 3` matrix.
pub fn points_matrix(pts: &[Vec3]) -> Matrix {
    Matrix::from_fn(pts.len(), 3, |r, c| pts[r][c])
}

/// Rows of an `N x 3` matrix as points.
pub fn matrix_points(m: &Matrix) -> Vec<Vec3> {
    (0..m.rows())
        .map(|r| Vec3::new(m.get(r, 0), m.get(r, 1), m.get(r, 2)))
        .collect()
}

/// Plain (non-differentiable) access to a scene, shared by the learned model
/// and the analytic fixtures used as oracles.
pub trait ImplicitScene: Sync {
    fn frame_count(&self) -> usize;
    fn sharpness(&self) -> f64;
    /// Bending offsets `b_i(x)`.
    fn bend(&self, frame: usize, pts: &[Vec3]) -> Result<Vec<Vec3>>;
    /// Jacobian-vector products `J_b(x) v`.
    fn bend_jvp(&self, frame: usize, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>>;
    /// Canonical SDF values.
    fn sdf(&self, pts: &[Vec3]) -> Result<Vec<f64>>;
    fn sdf_grad(&self, pts: &[Vec3]) -> Result<Vec<Vec3>>;
    fn color(&self, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>>;
}

impl ImplicitScene for FieldSet {
    fn frame_count(&self) -> usize {
        FieldSet::frame_count(self)
    }

    fn sharpness(&self) -> f64 {
        self.s()
    }

    fn bend(&self, frame: usize, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        self.check_frame(frame)?;
        let code = self.latents.row(frame).to_vec();
        self.bend_with_latent(&code, pts)
    }

    fn bend_jvp(&self, frame: usize, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        if dirs.len() != pts.len() {
            return Err(Error::Shape("one direction per point".into()));
        }
        Ok(matrix_points(&self.bend_jvp_matrix(frame, pts, &points_matrix(dirs))?))
    }

    fn sdf(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let out = self.sdf_tape(&mut tape, &vars, Dual::constant(x))?;
        Ok(tape.value(out.value).as_slice().to_vec())
    }

    fn sdf_grad(&self, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let xd = Dual::seed_axes(&mut tape, x);
        let out = self.sdf_tape(&mut tape, &vars, xd)?;
        let t = tape.value(out.tangent.expect("seeded"));
        let n = pts.len();
        Ok((0..n)
            .map(|i| Vec3::new(t.get(i, 0), t.get(n + i, 0), t.get(2 * n + i, 0)))
            .collect())
    }

    fn color(&self, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        if dirs.len() != pts.len() {
            return Err(Error::Shape("one direction per point".into()));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(points_matrix(pts));
        let d = tape.constant(points_matrix(dirs));
        let c = self.color_tape(&mut tape, &vars, x, d)?;
        Ok(matrix_points(tape.value(c)))
    }
}

/// A [`FieldSet`] whose single frame uses an arbitrary latent code.
pub struct WithLatent<'a> {
    pub fields: &'a FieldSet,
    pub code: Vec<f64>,
}

impl ImplicitScene for WithLatent<'_> {
    fn frame_count(&self) -> usize {
        1
    }

    fn sharpness(&self) -> f64 {
        self.fields.s()
    }

    fn bend(&self, frame: usize, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        if frame != 0 {
            return Err(Error::FrameOutOfRange { frame, count: 1 });
        }
        self.fields.bend_with_latent(&self.code, pts)
    }

    fn bend_jvp(&self, frame: usize, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        if frame != 0 {
            return Err(Error::FrameOutOfRange { frame, count: 1 });
        }
        let h = 1e-6;
        let plus: Vec<Vec3> = pts.iter().zip(dirs).map(|(p, d)| p + d * h).collect();
        let minus: Vec<Vec3> = pts.iter().zip(dirs).map(|(p, d)| p - d * h).collect();
        let (a, b) = (self.bend(0, &plus)?, self.bend(0, &minus)?);
        Ok(a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    fn sdf(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        self.fields.sdf(pts)
    }

    fn sdf_grad(&self, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        self.fields.sdf_grad(pts)
    }

    fn color(&self, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        self.fields.color(pts, dirs)
    }
}

/// Closed-form canonical SDFs for oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnalyticSdf {
    Sphere { center: Vec3, radius: f64 },
    /// Segment `a`-`b` inflated by `radius`.
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    /// Half-space behind the plane through `point` (negative on the side
    /// opposite to the unit `normal`).
    Plane { point: Vec3, normal: Vec3 },
}

impl AnalyticSdf {
    pub fn value(&self, p: &Vec3) -> f64 {
        match self {
            Self::Sphere { center, radius } => (p - center).norm() - radius,
            Self::Capsule { a, b, radius } => (p - closest_on_segment(p, a, b)).norm() - radius,
            Self::Plane { point, normal } => (p - point).dot(normal),
        }
    }

    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let radial = |v: Vec3| {
            let n = v.norm();
            if n > 0.0 {
                v / n
            } else {
                Vec3::zeros()
            }
        };
        match self {
            Self::Sphere { center, .. } => radial(p - center),
            Self::Capsule { a, b, .. } => radial(p - closest_on_segment(p, a, b)),
            Self::Plane { normal, .. } => *normal,
        }
    }
}

fn closest_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Closed-form bending fields for oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnalyticBending {
    Identity,
    /// Constant offset per frame.
    Translation(Vec<Vec3>),
    /// `b_k(x) = A sin(w (x_k + x_{k+1}) + phase_k)`, one phase triple per frame.
    Waves {
        amplitude: f64,
        frequency: f64,
        phases: Vec<Vec3>,
    },
    /// `b(x) = M x`, one matrix per frame.
    Linear(Vec<nalgebra::Matrix3<f64>>),
}

impl AnalyticBending {
    fn frames(&self) -> Option<usize> {
        match self {
            Self::Identity => None,
            Self::Translation(v) => Some(v.len()),
            Self::Waves { phases, .. } => Some(phases.len()),
            Self::Linear(m) => Some(m.len()),
        }
    }

    pub fn offset(&self, frame: usize, p: &Vec3) -> Vec3 {
        match self {
            Self::Identity => Vec3::zeros(),
            Self::Translation(v) => v[frame],
            Self::Waves {
                amplitude,
                frequency,
                phases,
            } => Vec3::from_fn(|k, _| {
                amplitude * (frequency * (p[k] + p[(k + 1) % 3]) + phases[frame][k]).sin()
            }),
            Self::Linear(m) => m[frame] * p,
        }
    }

    pub fn jacobian(&self, frame: usize, p: &Vec3) -> nalgebra::Matrix3<f64> {
        match self {
            Self::Identity | Self::Translation(_) => nalgebra::Matrix3::zeros(),
            Self::Waves {
                amplitude,
                frequency,
                phases,
            } => {
                let mut j = nalgebra::Matrix3::zeros();
                for k in 0..3 {
                    let c = amplitude
                        * frequency
                        * (frequency * (p[k] + p[(k + 1) % 3]) + phases[frame][k]).cos();
                    j[(k, k)] += c;
                    j[(k, (k + 1) % 3)] += c;
                }
                j
            }
            Self::Linear(m) => m[frame],
        }
    }
}

/// Analytic scene: exact SDF, closed-form bending, constant albedo.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub sdf: AnalyticSdf,
    pub bending: AnalyticBending,
    pub s: f64,
    pub albedo: Vec3,
    pub frames: usize,
}

impl AnalyticField {
    pub fn new(sdf: AnalyticSdf, bending: AnalyticBending, s: f64) -> Self {
        let frames = bending.frames().unwrap_or(1);
        Self {
            sdf,
            bending,
            s,
            albedo: Vec3::new(0.8, 0.5, 0.3),
            frames,
        }
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.frames {
            return Err(Error::FrameOutOfRange {
                frame,
                count: self.frames,
            });
        }
        Ok(())
    }
}

impl ImplicitScene for AnalyticField {
    fn frame_count(&self) -> usize {
        self.frames
    }

    fn sharpness(&self) -> f64 {
        self.s
    }

    fn bend(&self, frame: usize, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        self.check_frame(frame)?;
        Ok(pts.iter().map(|p| self.bending.offset(frame, p)).collect())
    }

    fn bend_jvp(&self, frame: usize, pts: &[Vec3], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        self.check_frame(frame)?;
        if dirs.len() != pts.len() {
            return Err(Error::Shape("one direction per point".into()));
        }
        Ok(pts
            .iter()
            .zip(dirs)
            .map(|(p, d)| self.bending.jacobian(frame, p) * d)
            .collect())
    }

    fn sdf(&self, pts: &[Vec3]) -> Result<Vec<f64>> {
        Ok(pts.iter().map(|p| self.sdf.value(p)).collect())
    }

    fn sdf_grad(&self, pts: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(pts.iter().map(|p| self.sdf.gradient(p)).collect())
    }

    fn color(&self, pts: &[Vec3], _dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        Ok(vec![self.albedo; pts.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> FieldConfig {
        FieldConfig {
            latent_dim: 4,
            sdf_hidden: 16,
            sdf_depth: 3,
            sdf_skips: vec![2],
            sdf_freqs: 2,
            color_hidden: 8,
            color_depth: 2,
            color_dir_freqs: 2,
            bend_hidden: 8,
            bend_depth: 2,
            bend_freqs: 2,
            init_refine_steps: 0,
            ..FieldConfig::default()
        }
    }

    /// A field with a non-trivial bending net and distinct latents.
    fn random_fields(frames: usize, seed: u64) -> FieldSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fs = FieldSet::new(tiny_config(), frames, &mut rng).unwrap();
        fs.bend = Mlp::new(fs.config.bend_shape(), &mut rng).unwrap();
        fs.latents = Matrix::from_fn(frames, 4, |_, _| rng.random_range(-1.0..1.0));
        fs
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.8..0.8)))
            .collect()
    }

    #[test]
    fn logistic_cdf_values() {
        for s in [0.1, 1.0, 50.0] {
            assert_eq!(logistic_cdf(s, 0.0), 0.5);
        }
        assert!((logistic_cdf(10.0, 0.1) - 0.7310585786300049).abs() < 1e-15);
        assert_eq!(logistic_cdf(10.0, 1e3), 1.0);
        assert_eq!(logistic_cdf(10.0, -1e3), 0.0);
    }

    #[test]
    fn zero_output_layer_gives_identity_bending() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs = FieldSet::new(tiny_config(), 3, &mut rng).unwrap();
        let pts = random_points(10, &mut rng);
        for off in fs.bend(1, &pts).unwrap() {
            assert_eq!(off, Vec3::zeros());
        }
    }

    #[test]
    fn frame_out_of_range() {
        let fs = random_fields(2, 3);
        assert!(matches!(
            ImplicitScene::bend(&fs, 2, &[Vec3::zeros()]),
            Err(Error::FrameOutOfRange { frame: 2, count: 2 })
        ));
    }

    #[test]
    fn identical_latents_give_identical_offsets() {
        let mut fs = random_fields(3, 4);
        let row = fs.latents.row(0).to_vec();
        fs.latents.row_mut(2).copy_from_slice(&row);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(20, &mut rng);
        assert_eq!(fs.bend(0, &pts).unwrap(), fs.bend(2, &pts).unwrap());
        assert_ne!(fs.bend(0, &pts).unwrap(), fs.bend(1, &pts).unwrap());
    }

    #[test]
    fn latent_substitution_reproduces_other_frame() {
        let fs = random_fields(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(20, &mut rng);
        let code = fs.latents.row(3).to_vec();
        assert_eq!(fs.bend_with_latent(&code, &pts).unwrap(), fs.bend(3, &pts).unwrap());
    }

    #[test]
    fn bend_jacobian_matches_finite_differences() {
        let fs = random_fields(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(8, &mut rng);
        let h = 1e-6;
        for axis in 0..3 {
            let e = Vec3::from_fn(|k, _| if k == axis { 1.0 } else { 0.0 });
            let jv = fs.bend_jvp(1, &pts, &vec![e; pts.len()]).unwrap();
            let plus: Vec<Vec3> = pts.iter().map(|p| p + e * h).collect();
            let minus: Vec<Vec3> = pts.iter().map(|p| p - e * h).collect();
            let (a, b) = (fs.bend(1, &plus).unwrap(), fs.bend(1, &minus).unwrap());
            for i in 0..pts.len() {
                // d(x + b(x))/dx = I + J
                let fd = ((plus[i] + a[i]) - (minus[i] + b[i])) / (2.0 * h);
                let want = e + jv[i];
                assert!((fd - want).norm() < 1e-6, "{fd} vs {want}");
            }
        }
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        let fs = random_fields(1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(10, &mut rng);
        let g = fs.sdf_grad(&pts).unwrap();
        let h = 1e-6;
        for axis in 0..3 {
            let e = Vec3::from_fn(|k, _| if k == axis { h } else { 0.0 });
            let plus: Vec<Vec3> = pts.iter().map(|p| p + e).collect();
            let minus: Vec<Vec3> = pts.iter().map(|p| p - e).collect();
            let (a, b) = (fs.sdf(&plus).unwrap(), fs.sdf(&minus).unwrap());
            for i in 0..pts.len() {
                let fd = (a[i] - b[i]) / (2.0 * h);
                assert!((fd - g[i][axis]).abs() / g[i][axis].abs().max(1.0) < 1e-4);
            }
        }
    }

    #[test]
    fn divergence_matches_finite_differences_and_hutchinson() {
        let fs = random_fields(2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = random_points(6, &mut rng);
        let div = fs.divergence(0, &pts).unwrap();
        let h = 1e-5;
        for (i, p) in pts.iter().enumerate() {
            let mut fd = 0.0;
            for axis in 0..3 {
                let e = Vec3::from_fn(|k, _| if k == axis { h } else { 0.0 });
                let a = fs.bend(0, &[p + e]).unwrap()[0][axis];
                let b = fs.bend(0, &[p - e]).unwrap()[0][axis];
                fd += (a - b) / (2.0 * h);
            }
            assert!((fd - div[i]).abs() < 1e-3);
        }
        let est = fs.divergence_hutchinson(0, &pts, 4000, &mut rng).unwrap();
        for (e, d) in est.iter().zip(&div) {
            assert!((e - d).abs() < 0.1 * d.abs().max(1.0), "{e} vs {d}");
        }
    }

    /// Bending net that computes `b(x) = A x` exactly: one hidden ReLU layer
    /// holding `x` and `-x` shifted to stay positive, no encoding.
    fn linear_bending(a: nalgebra::Matrix3<f64>) -> FieldSet {
        let config = FieldConfig {
            bend_freqs: 0,
            bend_hidden: 6,
            bend_depth: 1,
            ..tiny_config()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fs = FieldSet::new(config, 1, &mut rng).unwrap();
        // h = relu([x; -x]) so x = h[0..3] - h[3..6].
        let w0 = Matrix::from_fn(6, 7, |r, c| {
            if c == r % 3 && c < 3 {
                if r < 3 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        });
        let w1 = Matrix::from_fn(3, 6, |r, c| {
            let s = if c < 3 { 1.0 } else { -1.0 };
            s * a[(r, c % 3)]
        });
        fs.bend.set_layer(0, w0, Matrix::zeros(1, 6)).unwrap();
        fs.bend.set_layer(1, w1, Matrix::zeros(1, 3)).unwrap();
        fs
    }

    #[test]
    fn divergence_of_linear_field_is_trace() {
        let a = nalgebra::Matrix3::new(0.5, 0.2, -0.1, 0.3, -1.5, 0.7, 0.0, 0.4, 2.25);
        let fs = linear_bending(a);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pts = random_points(10, &mut rng);
        for (p, off) in pts.iter().zip(fs.bend(0, &pts).unwrap()) {
            assert!((off - a * p).norm() < 1e-12);
        }
        for d in fs.divergence(0, &pts).unwrap() {
            assert!((d - a.trace()).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_is_linear_in_the_field() {
        let a = nalgebra::Matrix3::new(0.5, 0.2, -0.1, 0.3, -1.5, 0.7, 0.0, 0.4, 2.25);
        let b = nalgebra::Matrix3::new(-0.3, 0.0, 0.6, 1.0, 0.25, 0.0, 0.1, 0.9, -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts = random_points(5, &mut rng);
        let da = linear_bending(a).divergence(0, &pts).unwrap();
        let db = linear_bending(b).divergence(0, &pts).unwrap();
        let dab = linear_bending(a + b).divergence(0, &pts).unwrap();
        for i in 0..5 {
            assert!((dab[i] - da[i] - db[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_offset_has_zero_divergence() {
        let mut fs = random_fields(1, 16);
        let last = fs.bend.layers().len() - 1;
        let (o, i) = fs.bend.layers()[last].weight.shape();
        fs.bend
            .set_layer(last, Matrix::zeros(o, i), Matrix::from_rows(&[[0.3, -0.2, 0.1]]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts = random_points(5, &mut rng);
        assert!(fs.divergence(0, &pts).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn sharpness_stays_positive_under_any_update() {
        let mut fs = random_fields(1, 18);
        for delta in [-1e3, -50.0, 0.0, 20.0] {
            fs.log_s.set(0, 0, delta);
            assert!(fs.s() >= 0.0 && fs.s().is_finite() || delta > 700.0);
        }
        fs.log_s.set(0, 0, -10.0);
        assert!(fs.s() > 0.0);
    }

    #[test]
    fn analytic_sdf_gradients_are_unit_and_consistent() {
        let shapes = [
            AnalyticSdf::Sphere {
                center: Vec3::new(0.1, 0.0, -0.2),
                radius: 0.4,
            },
            AnalyticSdf::Capsule {
                a: Vec3::new(-0.3, 0.0, 0.0),
                b: Vec3::new(0.3, 0.1, 0.0),
                radius: 0.2,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for sdf in &shapes {
            for p in random_points(50, &mut rng) {
                let g = sdf.gradient(&p);
                assert!((g.norm() - 1.0).abs() < 1e-12);
                let h = 1e-6;
                let fd = Vec3::from_fn(|k, _| {
                    let e = Vec3::from_fn(|j, _| if j == k { h } else { 0.0 });
                    (sdf.value(&(p + e)) - sdf.value(&(p - e))) / (2.0 * h)
                });
                assert!((fd - g).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn analytic_wave_jacobian_matches_finite_differences() {
        let bending = AnalyticBending::Waves {
            amplitude: 0.05,
            frequency: 3.0,
            phases: vec![Vec3::new(0.1, 0.7, -0.4)],
        };
        let p = Vec3::new(0.2, -0.3, 0.5);
        let j = bending.jacobian(0, &p);
        let h = 1e-6;
        for k in 0..3 {
            let e = Vec3::from_fn(|i, _| if i == k { h } else { 0.0 });
            let col = (bending.offset(0, &(p + e)) - bending.offset(0, &(p - e))) / (2.0 * h);
            assert!((col - j.column(k)).norm() < 1e-8);
        }
    }
}
