use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{concat_duals, positional_encode, Adam, Dual};
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// One input group of a network: `dim` raw coordinates, frequency-encoded
/// with `freqs` octaves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub dim: usize,
    pub freqs: usize,
}

impl InputSpec {
    pub fn encoded_dim(&self) -> usize {
        self.dim * (1 + 2 * self.freqs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub inputs: Vec<InputSpec>,
    pub hidden: usize,
    /// Number of hidden (activated) layers; the net has `depth + 1` linear layers.
    pub depth: usize,
    pub out_dim: usize,
    /// Layers whose input is `[h, encoded input] / sqrt(2)`.
    pub skips: Vec<usize>,
    pub activation: Activation,
    pub output: OutputActivation,
    pub weight_norm: bool,
}

impl MlpShape {
    pub fn in_dim(&self) -> usize {
        self.inputs.iter().map(InputSpec::encoded_dim).sum()
    }

    /// `(fan_in, fan_out)` per linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..=self.depth)
            .map(|l| {
                let fan_in = if l == 0 {
                    self.in_dim()
                } else if self.skips.contains(&l) {
                    self.hidden + self.in_dim()
                } else {
                    self.hidden
                };
                let fan_out = if l == self.depth {
                    self.out_dim
                } else {
                    self.hidden
                };
                (fan_in, fan_out)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.out_dim == 0 {
            return Err(Error::InvalidArgument("network needs inputs and outputs".into()));
        }
        if self.depth > 0 && self.hidden == 0 {
            return Err(Error::InvalidArgument("zero hidden width".into()));
        }
        if self.skips.iter().any(|&s| s == 0 || s > self.depth) {
            return Err(Error::InvalidArgument(
                "skip layers must be hidden-to-hidden".into(),
            ));
        }
        Ok(())
    }
}

/// A linear layer. With weight normalization `weight` holds unit-norm row
/// directions and `gain` the per-row magnitudes; otherwise `gain` is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub gain: Option<Matrix>,
    pub bias: Matrix,
}

impl Layer {
    pub fn effective_weight(&self) -> Matrix {
        match &self.gain {
            None => self.weight.clone(),
            Some(g) => {
                let mut w = self.weight.clone();
                for r in 0..w.rows() {
                    let n = w.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let s = g.get(r, 0) / n;
                    w.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                w
            }
        }
    }

    /// Store `w` as given (plain) or split into unit directions and gains.
    fn set_weight(&mut self, w: Matrix) {
        match &mut self.gain {
            None => self.weight = w,
            Some(g) => {
                let mut dir = w;
                for r in 0..dir.rows() {
                    let n = dir.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    g.set(r, 0, n);
                    if n > 0.0 {
                        dir.row_mut(r).iter_mut().for_each(|x| *x /= n);
                    } else {
                        // zero row: any unit direction with zero gain
                        dir.row_mut(r)[0] = 1.0;
                    }
                }
                self.weight = dir;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    shape: MlpShape,
    layers: Vec<Layer>,
}

/// Tape handles for one network: effective weights and biases per layer plus
/// the leaves in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    pub leaves: Vec<Var>,
}

impl Mlp {
    /// PyTorch-default initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(shape)?;
        for layer in &mut mlp.layers {
            let (out, fan_in) = layer.weight.shape();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Matrix::from_fn(out, fan_in, |_, _| rng.random_range(-bound..bound));
            layer.bias = Matrix::from_fn(1, out, |_, _| rng.random_range(-bound..bound));
            layer.set_weight(w);
        }
        Ok(mlp)
    }

    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(fan_in, out)| {
                let mut layer = Layer {
                    weight: Matrix::zeros(out, fan_in),
                    gain: shape.weight_norm.then(|| Matrix::zeros(out, 1)),
                    bias: Matrix::zeros(1, out),
                };
                layer.set_weight(Matrix::zeros(out, fan_in));
                layer
            })
            .collect();
        Ok(Self { shape, layers })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Overwrite layer `l` with an effective weight (`out x in`) and bias.
    pub fn set_layer(&mut self, l: usize, weight: Matrix, bias: Matrix) -> Result<()> {
        let layer = self
            .layers
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {l}")))?;
        if weight.shape() != layer.weight.shape() || bias.shape() != layer.bias.shape() {
            return Err(Error::Shape(format!("layer {l} parameter shapes")));
        }
        layer.set_weight(weight);
        layer.bias = bias;
        Ok(())
    }

    /// Zero the output layer so the network starts as the zero map.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        let (o, i) = last.weight.shape();
        last.set_weight(Matrix::zeros(o, i));
        last.bias = Matrix::zeros(1, o);
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(g) = &l.gain {
                out.push(g);
            }
            out.push(&l.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(g) = &mut l.gain {
                out.push(g);
            }
            out.push(&mut l.bias);
        }
        out
    }

    /// Rescale weight-normalized directions back to unit length. Rows already
    /// at unit norm are left untouched, so repeated calls are no-ops.
    pub fn renormalize(&mut self) {
        for l in &mut self.layers {
            if l.gain.is_none() {
                continue;
            }
            for r in 0..l.weight.rows() {
                let n = l.weight.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 && (n - 1.0).abs() > 1e-12 {
                    l.weight.row_mut(r).iter_mut().for_each(|x| *x /= n);
                }
            }
        }
    }

    /// Put the parameters on the tape. Frozen networks are inserted as
    /// constants with their effective weights.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        if trainable {
            return self.bind_with(tape, &mut |t, m| t.leaf(m.clone()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = tape.constant(l.effective_weight());
            let b = tape.constant(l.bias.clone());
            layers.push((w, b));
        }
        Ok(MlpVars {
            layers,
            leaves: Vec::new(),
        })
    }

    /// Bind with caller-provided handles for each tensor in [`Mlp::params`]
    /// order; `make` decides whether a tensor is a leaf, a constant or a
    /// substitute.
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        make: &mut dyn FnMut(&mut Tape, &Matrix) -> Var,
    ) -> Result<MlpVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut leaves = Vec::new();
        for l in &self.layers {
            let v = make(tape, &l.weight);
            leaves.push(v);
            let w = match &l.gain {
                Some(g) => {
                    let g = make(tape, g);
                    leaves.push(g);
                    tape.weight_norm(v, g)?
                }
                None => v,
            };
            let b = make(tape, &l.bias);
            leaves.push(b);
            layers.push((w, b));
        }
        Ok(MlpVars { layers, leaves })
    }

    /// Encode and concatenate the input groups declared in the shape.
    pub fn encode(&self, tape: &mut Tape, parts: &[Dual]) -> Result<Dual> {
        if parts.len() != self.shape.inputs.len() {
            return Err(Error::Shape(format!(
                "network takes {} input groups, got {}",
                self.shape.inputs.len(),
                parts.len()
            )));
        }
        let mut encoded = Vec::with_capacity(parts.len());
        for (p, spec) in parts.iter().zip(&self.shape.inputs) {
            if tape.shape(p.value).1 != spec.dim {
                return Err(Error::Shape(format!(
                    "input group of width {} where {} expected",
                    tape.shape(p.value).1,
                    spec.dim
                )));
            }
            encoded.push(positional_encode(tape, *p, spec.freqs)?);
        }
        concat_duals(tape, &encoded)
    }

    /// Run the network on an already-encoded input.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, input: Dual) -> Result<Dual> {
        let width = tape.shape(input.value).1;
        if width != self.shape.in_dim() {
            return Err(Error::Shape(format!(
                "network input width {width}, expected {}",
                self.shape.in_dim()
            )));
        }
        let k = input.directions;
        let mut h = input;
        for (l, &(w, b)) in vars.layers.iter().enumerate() {
            let x = if self.shape.skips.contains(&l) {
                let cat = concat_duals(tape, &[h, input])?;
                let s = std::f64::consts::FRAC_1_SQRT_2;
                Dual {
                    value: tape.scale(cat.value, s),
                    tangent: cat.tangent.map(|t| tape.scale(t, s)),
                    directions: cat.directions,
                }
            } else {
                h
            };
            let z = tape.linear(x.value, w, Some(b))?;
            let zt = match x.tangent {
                Some(t) => {
                    let tw = tape.shape(t).1;
                    let wt = if tw < tape.shape(w).1 {
                        tape.slice_cols(w, 0, tw)?
                    } else {
                        w
                    };
                    Some(tape.linear(t, wt, None)?)
                }
                None => None,
            };
            h = if l < self.shape.depth {
                activate(tape, self.shape.activation, z, zt, k)?
            } else {
                match self.shape.output {
                    OutputActivation::Identity => Dual {
                        value: z,
                        tangent: zt,
                        directions: k,
                    },
                    OutputActivation::Sigmoid => {
                        let y = tape.sigmoid(z);
                        let tangent = match zt {
                            Some(t) => {
                                let one_minus = tape.neg(y);
                                let one_minus = tape.offset(one_minus, 1.0);
                                let d = tape.mul(y, one_minus)?;
                                let d = tape.tile_rows(d, k);
                                Some(tape.mul(d, t)?)
                            }
                            None => None,
                        };
                        Dual {
                            value: y,
                            tangent,
                            directions: k,
                        }
                    }
                }
            };
        }
        Ok(h)
    }

    /// Plain evaluation of a batch of already-encoded rows.
    pub fn eval(&self, input: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &vars, Dual::constant(x))?;
        Ok(tape.value(out.value).clone())
    }
}

fn activate(
    tape: &mut Tape,
    act: Activation,
    z: Var,
    zt: Option<Var>,
    k: usize,
) -> Result<Dual> {
    let (value, slope) = match act {
        Activation::Softplus { beta } => {
            let v = tape.softplus(z, beta);
            let slope = match zt {
                Some(_) => {
                    let bz = tape.scale(z, beta);
                    Some(tape.sigmoid(bz))
                }
                None => None,
            };
            (v, slope)
        }
        Activation::Relu => {
            let v = tape.relu(z);
            let slope = match zt {
                Some(_) => {
                    let mask = tape.value(z).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    Some(tape.constant(mask))
                }
                None => None,
            };
            (v, slope)
        }
    };
    let tangent = match (zt, slope) {
        (Some(t), Some(s)) => {
            let s = tape.tile_rows(s, k);
            Some(tape.mul(s, t)?)
        }
        _ => None,
    };
    Ok(Dual {
        value,
        tangent,
        directions: k,
    })
}

/// Initialize an SDF network so that it approximates the signed distance to a
/// sphere of `radius` centred at the origin (negative inside).
///
/// Requires a single 3-D input group (optionally frequency encoded), a scalar
/// output and softplus activations.
///
/// The random layer initialization leaves a direction-dependent error of a
/// few percent of the radius, and softplus units add a positive offset that
/// shrinks the zero level set. `refine_steps` Adam steps of a least-squares
/// fit to `|x| - radius` inside the unit ball remove both.
pub fn geometric_init(
    mlp: &mut Mlp,
    radius: f64,
    refine_steps: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    random_geometric_layers(mlp, radius, rng)?;
    if refine_steps > 0 {
        fit_sphere(mlp, radius, refine_steps, rng)?;
    }
    Ok(())
}

fn fit_sphere(mlp: &mut Mlp, radius: f64, steps: usize, rng: &mut impl Rng) -> Result<()> {
    const BATCH: usize = 128;
    let mut adam = Adam::default();
    for step in 0..steps {
        // Half the batch concentrates on the interior so the cone tip at the
        // origin is resolved as well as the shell.
        let pts: Vec<[f64; 3]> = (0..BATCH)
            .map(|i| sample_ball(rng, if i % 2 == 0 { 1.0 } else { radius }))
            .collect();
        let target = Matrix::from_fn(BATCH, 1, |r, _| norm3(&pts[r]) - radius);
        let normals = Matrix::from_fn(3 * BATCH, 1, |r, _| {
            let p = &pts[r % BATCH];
            p[r / BATCH] / norm3(p).max(1e-12)
        });
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, true)?;
        let x = tape.constant(Matrix::from_rows(&pts));
        let x = Dual::seed_axes(&mut tape, x);
        let enc = mlp.encode(&mut tape, &[x])?;
        let f = mlp.forward(&mut tape, &vars, enc)?;
        let t = tape.constant(target);
        let d = tape.sub(f.value, t)?;
        let d = tape.square(d);
        let value_loss = tape.mean(d);
        let n = tape.constant(normals);
        let g = tape.sub(f.tangent.expect("seeded"), n)?;
        let g = tape.square(g);
        let grad_loss = tape.mean(g);
        let grad_loss = tape.scale(grad_loss, 3.0 * GRAD_WEIGHT);
        let loss = tape.add(value_loss, grad_loss)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Matrix> = vars.leaves.iter().map(|&v| grads.take(v)).collect();
        // Cosine-decayed step size keeps the last iterates from jittering.
        let progress = step as f64 / steps as f64;
        let lr = 5e-5 + 0.5 * (5e-4 - 5e-5) * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.step(mlp.params_mut(), &g, lr)?;
        mlp.renormalize();
    }
    Ok(())
}

const GRAD_WEIGHT: f64 = 0.1;

fn norm3(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Uniform sample in the ball of radius `r` by rejection.
pub(crate) fn sample_ball(rng: &mut impl Rng, r: f64) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if norm3(&p) <= 1.0 {
            return p.map(|c| c * r);
        }
    }
}

fn random_geometric_layers(mlp: &mut Mlp, radius: f64, rng: &mut impl Rng) -> Result<()> {
    let shape = mlp.shape.clone();
    if shape.out_dim != 1
        || shape.inputs.len() != 1
        || shape.inputs[0].dim != 3
        || !matches!(shape.activation, Activation::Softplus { .. })
    {
        return Err(Error::InvalidArgument(
            "geometric init needs a softplus R^3 -> R network".into(),
        ));
    }
    let encoded = shape.inputs[0].freqs > 0;
    let dims = shape.layer_dims();
    for (l, &(fan_in, out)) in dims.iter().enumerate() {
        let (mut w, b) = if l == shape.depth {
            let mean = std::f64::consts::PI.sqrt() / (fan_in as f64).sqrt();
            let dist = Normal::new(mean, 1e-4).expect("valid normal");
            (
                Matrix::from_fn(out, fan_in, |_, _| dist.sample(rng)),
                Matrix::filled(1, out, -radius),
            )
        } else {
            let dist = Normal::new(0.0, 2f64.sqrt() / (out as f64).sqrt()).expect("valid normal");
            (
                Matrix::from_fn(out, fan_in, |_, _| dist.sample(rng)),
                Matrix::zeros(1, out),
            )
        };
        // Frequency features start switched off; only raw xyz feeds the net.
        let zero_from = if l == 0 && encoded {
            Some(3)
        } else if shape.skips.contains(&l) && encoded {
            Some(shape.hidden + 3)
        } else {
            None
        };
        if let Some(start) = zero_from {
            for r in 0..out {
                w.row_mut(r)[start..].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        mlp.set_layer(l, w, b)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::directional_check;
    use crate::nn::encode_point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(depth: usize, act: Activation, wn: bool, skips: Vec<usize>) -> MlpShape {
        MlpShape {
            inputs: vec![InputSpec { dim: 3, freqs: 2 }, InputSpec { dim: 2, freqs: 0 }],
            hidden: 6,
            depth,
            out_dim: 2,
            skips,
            activation: act,
            output: OutputActivation::Identity,
            weight_norm: wn,
        }
    }

    #[test]
    fn zero_net_gives_zero() {
        let mlp = Mlp::zeros(shape(2, Activation::Relu, false, vec![])).unwrap();
        let out = mlp.eval(&Matrix::filled(4, 17, 0.7)).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_linear_layer_is_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(shape(0, Activation::Relu, false, vec![]), &mut rng).unwrap();
        let x = Matrix::from_fn(3, 17, |r, c| (r as f64 - c as f64) * 0.1);
        let out = mlp.eval(&x).unwrap();
        let l = &mlp.layers()[0];
        let want = x.matmul(&l.weight.transpose()).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert!((out.get(r, c) - want.get(r, c) - l.bias.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mlp = Mlp::zeros(shape(1, Activation::Relu, false, vec![])).unwrap();
        assert!(mlp.eval(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn input_width_matches_encoding() {
        let s = shape(3, Activation::Relu, false, vec![]);
        assert_eq!(s.in_dim(), 3 * 5 + 2);
    }

    #[test]
    fn weight_norm_directions_are_unit_and_renormalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::new(
            shape(2, Activation::Softplus { beta: 100.0 }, true, vec![1]),
            &mut rng,
        )
        .unwrap();
        for l in mlp.layers() {
            for r in 0..l.weight.rows() {
                let n: f64 = l.weight.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
        mlp.layers[0].weight.scale_assign(3.0);
        mlp.renormalize();
        let once = mlp.clone();
        mlp.renormalize();
        assert_eq!(once, mlp);
    }

    fn param_gradient_check(act: Activation, wn: bool, skips: Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = Mlp::new(shape(3, act, wn, skips), &mut rng).unwrap();
        let x = Matrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let lat = Matrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let n_params = mlp.params().len();
        for p in 0..n_params {
            let base = mlp.params()[p].clone();
            for _ in 0..4 {
                let dir = Matrix::from_fn(base.rows(), base.cols(), |_, _| {
                    rng.random_range(-1.0..1.0)
                });
                let f = |tape: &mut Tape, leaf: Var| -> Result<Var> {
                    let mut i = 0;
                    let vars = mlp.bind_with(tape, &mut |t, m| {
                        i += 1;
                        if i - 1 == p {
                            leaf
                        } else {
                            t.constant(m.clone())
                        }
                    })?;
                    let xv = tape.constant(x.clone());
                    let lv = tape.constant(lat.clone());
                    let xd = Dual::seed_axes(tape, xv);
                    let enc = mlp.encode(tape, &[xd, Dual::constant(lv)])?;
                    let out = mlp.forward(tape, &vars, enc)?;
                    // Use both value and input tangents.
                    let a = tape.square(out.value);
                    let b = tape.square(out.tangent.unwrap());
                    let (sa, sb) = (tape.sum(a), tape.sum(b));
                    tape.add(sa, sb)
                };
                let (a, n) = directional_check(&base, &dir, 1e-5, f).unwrap();
                assert!(
                    (a - n).abs() / a.abs().max(1.0) < 1e-5,
                    "param {p}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn parameter_gradients_relu() {
        param_gradient_check(Activation::Relu, false, vec![]);
    }

    #[test]
    fn parameter_gradients_softplus_weight_norm_skip() {
        param_gradient_check(Activation::Softplus { beta: 100.0 }, true, vec![2]);
    }

    #[test]
    fn input_tangents_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = shape(3, Activation::Softplus { beta: 100.0 }, true, vec![2]);
        s.output = OutputActivation::Sigmoid;
        let mlp = Mlp::new(s, &mut rng).unwrap();
        let p = [0.3, -0.2, 0.5];
        let lat = [0.1, -0.7];
        let run = |x: [f64; 3]| -> Vec<f64> {
            let mut row = encode_point(&x, 2);
            row.extend_from_slice(&lat);
            mlp.eval(&Matrix::from_vec(1, 17, row).unwrap())
                .unwrap()
                .into_vec()
        };
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false).unwrap();
        let xv = tape.constant(Matrix::from_rows(&[p]));
        let lv = tape.constant(Matrix::from_rows(&[lat]));
        let xd = Dual::seed_axes(&mut tape, xv);
        let enc = mlp.encode(&mut tape, &[xd, Dual::constant(lv)]).unwrap();
        let out = mlp.forward(&mut tape, &vars, enc).unwrap();
        let t = tape.value(out.tangent.unwrap()).clone();
        let h = 1e-6;
        for axis in 0..3 {
            let (mut a, mut b) = (p, p);
            a[axis] += h;
            b[axis] -= h;
            let (fa, fb) = (run(a), run(b));
            for c in 0..2 {
                let fd = (fa[c] - fb[c]) / (2.0 * h);
                assert!((t.get(axis, c) - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn geometric_init_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::zeros(shape(2, Activation::Relu, false, vec![])).unwrap();
        assert!(geometric_init(&mut mlp, 0.5, 0, &mut rng).is_err());
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = MlpShape {
            inputs: vec![InputSpec { dim: 3, freqs: 6 }],
            hidden: 256,
            depth: 8,
            out_dim: 1,
            skips: vec![4],
            activation: Activation::Softplus { beta: 100.0 },
            output: OutputActivation::Identity,
            weight_norm: true,
        };
        let r = 0.5;
        let mut mlp = Mlp::zeros(shape).unwrap();
        geometric_init(&mut mlp, r, 100, &mut rng).unwrap();
        let shell: Vec<[f64; 3]> = (0..100)
            .map(|_| {
                let v = sample_ball(&mut rng, 1.0);
                v.map(|c| r * c / norm3(&v))
            })
            .collect();
        let mut rows = vec![encode_point(&[0.0; 3], 6)];
        rows.extend(shell.iter().map(|p| encode_point(p, 6)));
        let f = mlp.eval(&Matrix::from_vec(101, 39, rows.concat()).unwrap()).unwrap();
        assert!((f.get(0, 0) + r).abs() < 0.15 * r, "f(0) = {}", f.get(0, 0));
        for i in 1..101 {
            assert!(f.get(i, 0).abs() < 0.1 * r, "shell value {}", f.get(i, 0));
        }

        let inner: Vec<[f64; 3]> = (0..100).map(|_| sample_ball(&mut rng, 1.0)).collect();
        let mut tape = Tape::new();
        let vars = mlp.bind(&mut tape, false).unwrap();
        let xv = tape.constant(Matrix::from_rows(&inner));
        let xd = Dual::seed_axes(&mut tape, xv);
        let enc = mlp.encode(&mut tape, &[xd]).unwrap();
        let out = mlp.forward(&mut tape, &vars, enc).unwrap();
        let g = tape.value(out.tangent.unwrap());
        for (i, p) in inner.iter().enumerate() {
            let grad: [f64; 3] = std::array::from_fn(|a| g.get(a * 100 + i, 0));
            let n = norm3(&grad);
            assert!((n - 1.0).abs() < 0.3, "gradient norm {n}");
            if norm3(p) > 0.2 {
                let cos = (0..3).map(|a| grad[a] * p[a]).sum::<f64>() / (n * norm3(p));
                assert!(cos.acos() < 0.1, "normal deviates by {}", cos.acos());
            }
        }
    }
}
