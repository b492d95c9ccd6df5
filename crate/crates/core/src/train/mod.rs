//! Optimization loop: pixel sampling, batch assembly, Adam updates of every
//! network, the latent table and `s`, training logs and checkpoints.

mod checkpoint;

pub use checkpoint::{load_fields, save_fields, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::camera::{load_cameras, CameraModel, Ray};
use crate::error::{Error, Result};
use crate::image::{GrayImage, RgbImage};
use crate::losses::{
    color_tape, divergence_tape, eikonal_tape, flow_tape, hutchinson_column, neighbor_tape,
    padded_weights_tape, seg_tape, total_tape, weighted_square_tape, LossBreakdown, LossTerms,
    LossWeights,
};
use crate::nn::{Adam, Dual};
use crate::proxy::{ProxySequence, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use crate::render::{render_batch, sample_depths_batch, BatchOptions, SamplingConfig};
use crate::scene::{matrix_points, FieldConfig, FieldSet};
use crate::Vec3;

/// Minimum padded weight for a sample to enter the flow point set.
pub const FLOW_WEIGHT_THRESHOLD: f64 = 1e-4;

/// How the divergence penalty evaluates `tr J`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// Three seeded tangents per sample.
    #[default]
    Exact,
    /// One Rademacher probe per sample.
    Hutchinson,
}

/// Training hyperparameters. Mirrors the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Rays (pixels) per batch.
    pub rays: usize,
    pub sampling: SamplingConfig,
    pub learning_rate: f64,
    /// Floor of the cosine decay.
    pub final_learning_rate: f64,
    /// Fraction of the run with linear learning-rate warm-up.
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 only at the end.
    pub checkpoint_interval: usize,
    /// Log progress every this many iterations; 0 disables.
    pub log_interval: usize,
    pub weights: LossWeights,
    pub field: FieldConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Evaluate the eikonal term on this many random samples of the batch;
    /// `None` uses every sample.
    pub eikonal_points: Option<usize>,
    /// Cap on the flow point set; `None` keeps every qualifying point.
    pub flow_points: Option<usize>,
    pub divergence: DivergenceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300_000,
            rays: 512,
            sampling: SamplingConfig::default(),
            learning_rate: 5e-4,
            final_learning_rate: 2.5e-5,
            warmup_fraction: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            log_interval: 1000,
            weights: LossWeights::cactus(),
            field: FieldConfig::default(),
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
            eikonal_points: None,
            flow_points: None,
            divergence: DivergenceMode::Exact,
        }
    }
}

impl TrainConfig {
    /// Small networks and batches for single-machine CPU runs.
    pub fn compact() -> Self {
        Self {
            iterations: 15_000,
            rays: 48,
            sampling: SamplingConfig {
                n_coarse: 32,
                n_fine: 16,
                ..SamplingConfig::default()
            },
            learning_rate: 2e-3,
            final_learning_rate: 1e-4,
            field: FieldConfig::compact(),
            eikonal_points: Some(256),
            flow_points: Some(256),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.rays == 0 {
            return bad("rays per batch must be positive");
        }
        if self.sampling.n_coarse < 2 {
            return bad("need at least two coarse samples");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.final_learning_rate >= 0.0 && self.final_learning_rate.is_finite()) {
            return bad("final learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warm-up fraction must lie in [0, 1)");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.eikonal_points == Some(0) || self.flow_points == Some(0) {
            return bad("point subsets must be non-empty");
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("flow kernel parameters must be positive");
        }
        self.weights.validate()
    }

    /// Warm-up followed by cosine decay to the final rate.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let total = self.iterations.max(1) as f64;
        let warm = self.warmup_fraction * total;
        let it = iteration as f64;
        if it < warm {
            return self.learning_rate * (it + 1.0) / warm.ceil();
        }
        let p = ((it - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
        let (hi, lo) = (self.learning_rate, self.final_learning_rate.min(self.learning_rate));
        lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One observation: image, mask and camera. The latent index is the frame's
/// position in the dataset.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub camera: CameraModel,
}

impl Frame {
    pub fn new(image: RgbImage, mask: GrayImage, camera: CameraModel) -> Result<Self> {
        let dims = (camera.width, camera.height);
        if (image.width, image.height) != dims || (mask.width, mask.height) != dims {
            return Err(Error::Shape(format!(
                "image {}x{}, mask {}x{}, camera {}x{}",
                image.width, image.height, mask.width, mask.height, dims.0, dims.1
            )));
        }
        Ok(Self {
            image,
            mask,
            camera,
        })
    }
}

/// A multi-view sequence with optional proxies.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub proxies: Option<ProxySequence>,
}

pub fn image_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("images").join(format!("{frame:04}.png"))
}

pub fn mask_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("masks").join(format!("{frame:04}.pgm"))
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, proxies: Option<ProxySequence>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("dataset has no frames".into()));
        }
        if let Some(p) = &proxies {
            if p.frame_count() != frames.len() {
                return Err(Error::Format(format!(
                    "proxies cover {} frames, dataset has {}",
                    p.frame_count(),
                    frames.len()
                )));
            }
        }
        Ok(Self { frames, proxies })
    }

    /// Read `images/%04d.png`, `masks/%04d.pgm`, `cameras.json` and, when
    /// present, `proxies.json`.
    pub fn load(dir: &Path, lambda1: f64, lambda2: f64) -> Result<Self> {
        let cams = load_cameras(&dir.join("cameras.json"))?;
        let frames = cams
            .into_iter()
            .enumerate()
            .map(|(i, cam)| {
                let image = RgbImage::load_png(&image_path(dir, i))?;
                let mask = GrayImage::load_pgm(&mask_path(dir, i))?;
                Frame::new(image, mask, cam)
            })
            .collect::<Result<Vec<_>>>()?;
        let proxy_path = dir.join("proxies.json");
        let proxies = if proxy_path.exists() {
            Some(ProxySequence::load(&proxy_path, lambda1, lambda2, Some(frames.len()))?)
        } else {
            None
        };
        Self::new(frames, proxies)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// `n` distinct pixels `(u, v)` drawn uniformly from a `width x height` image.
pub fn sample_pixels(
    width: usize,
    height: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    let total = width * height;
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} distinct pixels from a {width}x{height} image"
        )));
    }
    Ok(index::sample(rng, total, n)
        .into_iter()
        .map(|p| (p % width, p / width))
        .collect())
}

/// Optimizer state plus the fields it updates.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub fields: FieldSet,
    pub optimizer: Adam,
    /// Steps completed so far.
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh fields for `frames` frames, initialized from the config seed.
    pub fn new(config: TrainConfig, frames: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fields = FieldSet::new(config.field.clone(), frames, &mut rng)?;
        Ok(Self::from_parts(config, fields, rng))
    }

    /// Continue from given fields with a fresh optimizer.
    pub fn from_parts(config: TrainConfig, fields: FieldSet, rng: ChaCha8Rng) -> Self {
        let optimizer = Adam::new(config.beta1, config.beta2, config.epsilon);
        Self {
            config,
            fields,
            optimizer,
            iteration: 0,
            rng,
        }
    }

    /// One optimization step on a uniformly chosen frame.
    pub fn step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        if data.frame_count() != self.fields.frame_count() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} frames, fields have {}",
                data.frame_count(),
                self.fields.frame_count()
            )));
        }
        let frame = self.rng.random_range(0..data.frame_count());
        self.step_frame(data, frame)
    }

    /// One optimization step on the given frame.
    pub fn step_frame(&mut self, data: &Dataset, frame: usize) -> Result<LossBreakdown> {
        let it = self.iteration;
        let cfg = &self.config;
        let fs = &self.fields;
        let fr = data
            .frames
            .get(frame)
            .ok_or(Error::FrameOutOfRange {
                frame,
                count: data.frame_count(),
            })?;
        let weights = cfg.weights.effective(it, cfg.iterations)?;
        let [w_seg, w_eik, w_nbr, w_div, w_flo] = weights;
        let rng = &mut self.rng;

        let (w, h) = (fr.camera.width, fr.camera.height);
        let pixels = sample_pixels(w, h, cfg.rays.min(w * h), rng)?;
        let rays: Vec<Ray> = pixels
            .iter()
            .map(|&(u, v)| Ok(cfg.sampling.bound(fr.camera.ray_for_pixel(u as f64, v as f64)?)))
            .collect::<Result<_>>()?;
        let depths = sample_depths_batch(fs, frame, &rays, &cfg.sampling, rng)?;
        let truth_rgb = Matrix::from_fn(pixels.len(), 3, |r, c| {
            let (u, v) = pixels[r];
            fr.image.get(u, v)[c]
        });
        let truth_mask = Matrix::from_fn(pixels.len(), 1, |r, _| {
            let (u, v) = pixels[r];
            fr.mask.pixels[v * w + u]
        });

        let mut tape = Tape::new();
        let vars = fs.bind(&mut tape, true)?;
        let want_eik = w_eik > 0.0;
        let opts = BatchOptions {
            jacobian: w_div > 0.0 && cfg.divergence == DivergenceMode::Exact,
            sdf_gradient: want_eik && cfg.eikonal_points.is_none(),
        };
        let out = render_batch(fs, &mut tape, &vars, frame, &rays, &depths, opts)?;
        let n = out.rays * out.samples;

        let col = color_tape(&mut tape, out.color, &truth_rgb)?;
        let seg = if w_seg > 0.0 {
            Some(seg_tape(&mut tape, out.mask, &truth_mask)?)
        } else {
            None
        };
        let eik = if !want_eik {
            None
        } else if let Some(k) = cfg.eikonal_points {
            let rows = index::sample(rng, n, k.min(n)).into_vec();
            let pts = tape.gather_rows(out.bent, &rows)?;
            let seeded = Dual::seed_axes(&mut tape, pts);
            let f = fs.sdf_tape(&mut tape, &vars, seeded)?;
            Some(eikonal_tape(&mut tape, &f)?)
        } else {
            Some(eikonal_tape(&mut tape, &out.sdf)?)
        };
        let padded = if w_nbr > 0.0 || w_div > 0.0 || w_flo > 0.0 {
            Some(padded_weights_tape(&mut tape, out.weights)?)
        } else {
            None
        };
        let nbr = match padded {
            Some(p) if w_nbr > 0.0 => Some(neighbor_tape(
                fs,
                &mut tape,
                &vars,
                frame,
                out.straight,
                out.offsets.value,
                p,
            )?),
            _ => None,
        };
        let div = match (padded, cfg.divergence) {
            (Some(p), DivergenceMode::Exact) if w_div > 0.0 => {
                Some(divergence_tape(&mut tape, &out.offsets, p)?)
            }
            (Some(p), DivergenceMode::Hutchinson) if w_div > 0.0 => {
                let probes =
                    Matrix::from_fn(n, 3, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
                let d = hutchinson_column(fs, &mut tape, &vars, frame, out.straight, &probes)?;
                Some(weighted_square_tape(&mut tape, d, p)?)
            }
            _ => None,
        };
        let flo = match (&data.proxies, padded) {
            (Some(proxies), Some(p)) if w_flo > 0.0 && data.frame_count() > 1 => {
                let mut j = rng.random_range(0..data.frame_count() - 1);
                if j >= frame {
                    j += 1;
                }
                let pw = tape.value(p);
                let straight = matrix_points(tape.value(out.straight));
                let mut pts: Vec<Vec3> = straight
                    .into_iter()
                    .enumerate()
                    .filter(|&(r, _)| pw.get(r, 0) > FLOW_WEIGHT_THRESHOLD)
                    .map(|(_, x)| x)
                    .collect();
                pts.extend_from_slice(proxies.vertices(frame)?);
                if let Some(k) = cfg.flow_points.filter(|&k| k < pts.len()) {
                    let keep = index::sample(rng, pts.len(), k);
                    pts = keep.into_iter().map(|r| pts[r]).collect();
                }
                Some(flow_tape(fs, &mut tape, &vars, frame, j, &pts, proxies)?)
            }
            _ => None,
        };

        let aux = [seg, eik, nbr, div, flo];
        let total = total_tape(&mut tape, col, aux, &weights)?;
        let value = |v: Option<Var>| v.map_or(Ok(0.0), |v| tape.value(v).item());
        let terms = LossTerms {
            col: tape.value(col).item()?,
            seg: value(seg)?,
            eik: value(eik)?,
            nbr: value(nbr)?,
            div: value(div)?,
            flo: value(flo)?,
        };
        let breakdown = LossBreakdown {
            terms,
            weights,
            total: tape.value(total).item()?,
        };
        check_finite_terms(&breakdown, it, frame)?;

        let grads = tape.backward(total)?;
        let grads: Vec<Matrix> = vars.leaves.iter().map(|&l| grads.wrt(l)).collect();
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            let msg = format!("gradient of parameter tensor {k} at iteration {it} (frame {frame})");
            log::error!("{msg}; losses {:?}", breakdown.terms);
            return Err(Error::NonFinite(msg));
        }
        let lr = cfg.learning_rate_at(it);
        self.optimizer.step(self.fields.params_mut(), &grads, lr)?;
        self.fields.renormalize();
        if self.fields.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameters after the update at iteration {it}"
            )));
        }
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Train until `config.iterations`. With `out_dir`, appends to
    /// `train_log.csv`, writes `checkpoints/%06d.ckpt` every
    /// `checkpoint_interval` steps and `checkpoint.ckpt` at the end.
    pub fn train(&mut self, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<LossBreakdown>> {
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = self.iteration == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(path)?;
                if fresh {
                    writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
                }
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.iteration < self.config.iterations {
            let it = self.iteration;
            let b = self.step(data)?;
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", b.csv_row(it, self.fields.s()))?;
            }
            let interval = self.config.log_interval;
            if interval > 0 && (it + 1) % interval == 0 {
                log::info!(
                    "iteration {} total {:.5} col {:.5} s {:.2}",
                    it + 1,
                    b.total,
                    b.terms.col,
                    self.fields.s()
                );
            }
            let every = self.config.checkpoint_interval;
            if let (Some(dir), true) = (out_dir, every > 0 && (it + 1) % every == 0) {
                let ckpt = dir.join("checkpoints");
                std::fs::create_dir_all(&ckpt)?;
                self.save(&ckpt.join(format!("{:06}.ckpt", it + 1)))?;
            }
            history.push(b);
        }
        if let Some(dir) = out_dir {
            if let Some(f) = log.as_mut() {
                f.flush()?;
            }
            self.save(&dir.join("checkpoint.ckpt"))?;
        }
        Ok(history)
    }
}

fn check_finite_terms(b: &LossBreakdown, it: usize, frame: usize) -> Result<()> {
    let t = &b.terms;
    let named = [
        ("col", t.col),
        ("seg", t.seg),
        ("eik", t.eik),
        ("nbr", t.nbr),
        ("div", t.div),
        ("flo", t.flo),
        ("total", b.total),
    ];
    if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite()) {
        let msg = format!("loss term {name} = {v} at iteration {it} (frame {frame})");
        log::error!("{msg}; all terms {t:?}, weights {:?}", b.weights);
        return Err(Error::NonFinite(msg));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
