//! Verb implementations.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use ub4d::camera::{load_cameras, CameraModel};
use ub4d::diagnostics::run_all;
use ub4d::eval::{evaluate_sequence, latent_pca, trajectory_smoothness, EvalOptions};
use ub4d::extract::{march_canonical, march_frame, Bounds, TriMesh};
use ub4d::image::{GrayImage, RgbImage};
use ub4d::proxy::{ProxySequence, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2};
use ub4d::render::{render_image, SamplingConfig};
use ub4d::scene::FieldSet;
use ub4d::synth::{generate_scene, load_gt_meshes, AnalyticScene, SceneFamily};
use ub4d::train::{load_fields, Dataset, TrainConfig, Trainer};

use crate::{
    Cli, CliError, CliResult, DecimateArgs, EvaluateArgs, ExtractArgs, Family, GenerateArgs, PcaArgs,
    Preset, RenderArgs, TrainArgs, Verb, VerifyArgs,
};

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {n} threads: {e}")))?;
    }
    let seed = cli.seed;
    match cli.verb {
        Verb::Generate(a) => generate(a, seed),
        Verb::Train(a) => train(a, seed),
        Verb::Render(a) => render(a),
        Verb::Extract(a) => extract(a),
        Verb::Evaluate(a) => evaluate(a, seed),
        Verb::Verify(a) => verify(a, seed),
        Verb::Pca(a) => pca(a),
        Verb::ProxyDecimate(a) => decimate(a, seed),
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(ub4d::Error::from)?;
    std::fs::write(path, text).map_err(ub4d::Error::from)?;
    Ok(())
}

/// Path of the reconstruction of `frame` in a mesh directory.
pub fn mesh_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join(format!("{frame:04}.ply"))
}

fn generate(a: GenerateArgs, seed: Option<u64>) -> CliResult<()> {
    let mut scene = match &a.config {
        Some(p) => {
            require_file(p, "scene config")?;
            let text = std::fs::read_to_string(p).map_err(usage)?;
            serde_json::from_str::<AnalyticScene>(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => AnalyticScene::new(SceneFamily::blob(), 20, 96, 96),
    };
    if let Some(f) = a.family {
        scene.family = match f {
            Family::Blob => SceneFamily::blob(),
            Family::BlobLarge => SceneFamily::blob_large_translation(),
            Family::Sphere => SceneFamily::translating_sphere(),
            Family::Capsule => SceneFamily::bending_capsule(),
            Family::Cactus => SceneFamily::cactus(),
        };
    }
    scene.frames = a.frames.unwrap_or(scene.frames);
    scene.width = a.width.unwrap_or(scene.width);
    scene.height = a.height.unwrap_or(scene.height);
    scene.gt_res = a.res.unwrap_or(scene.gt_res);
    if let Some(n) = a.proxy_vertices {
        scene.proxy_vertices = (n > 0).then_some(n);
    }
    scene.seed = seed.unwrap_or(scene.seed);
    scene.validate().map_err(usage)?;
    let data = generate_scene(&scene, &a.out)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        data.frame_count(),
        scene.width,
        scene.height,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> CliResult<()> {
    require_dir(&a.data, "dataset")?;
    let mut trainer = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Trainer::load(p).map_err(usage)?
        }
        None => {
            let config = match &a.config {
                Some(p) => {
                    require_file(p, "config")?;
                    TrainConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?
                }
                None => match a.preset {
                    Preset::Full => TrainConfig::default(),
                    Preset::Compact => TrainConfig::compact(),
                },
            };
            let config = TrainConfig {
                seed: seed.unwrap_or(config.seed),
                ..config
            };
            config.validate().map_err(usage)?;
            let data_frames = load_cameras(&a.data.join("cameras.json")).map_err(usage)?.len();
            Trainer::new(config, data_frames)?
        }
    };
    if let Some(n) = a.iterations {
        trainer.config.iterations = n;
    }
    if let Some(n) = a.checkpoint_interval {
        trainer.config.checkpoint_interval = n;
    }
    trainer.config.validate().map_err(usage)?;
    let data = Dataset::load(&a.data, trainer.config.lambda1, trainer.config.lambda2).map_err(usage)?;
    if data.frame_count() != trainer.fields.frame_count() {
        return Err(CliError::Usage(format!(
            "dataset has {} frames, checkpoint {}",
            data.frame_count(),
            trainer.fields.frame_count()
        )));
    }
    std::fs::create_dir_all(&a.out).map_err(ub4d::Error::from)?;
    trainer.config.save(&a.out.join("config.json"))?;
    let start = trainer.iteration;
    let history = trainer.train(&data, Some(&a.out))?;
    match history.last() {
        Some(b) => println!(
            "trained iterations {start}..{}: final loss {:.5} (color {:.5})",
            trainer.iteration, b.total, b.terms.col
        ),
        None => println!("no iterations run; checkpoint at iteration {}", trainer.iteration),
    }
    println!("checkpoint {}", a.out.join("checkpoint.ckpt").display());
    Ok(())
}

/// Fields plus the sampling settings they were trained with, when stored.
fn load_model(path: &Path) -> CliResult<(FieldSet, SamplingConfig)> {
    require_file(path, "checkpoint")?;
    match Trainer::load(path) {
        Ok(t) => Ok((t.fields, t.config.sampling)),
        Err(_) => Ok((load_fields(path).map_err(usage)?, SamplingConfig::default())),
    }
}

fn dataset_cameras(dir: &Path) -> CliResult<Vec<CameraModel>> {
    require_dir(dir, "dataset")?;
    load_cameras(&dir.join("cameras.json")).map_err(usage)
}

fn check_frame(frame: usize, count: usize) -> CliResult<()> {
    if frame >= count {
        return Err(CliError::Usage(format!("frame {frame} out of range (0..{count})")));
    }
    Ok(())
}

fn render(a: RenderArgs) -> CliResult<()> {
    let (fields, sampling) = load_model(&a.checkpoint)?;
    let cams = dataset_cameras(&a.data)?;
    check_frame(a.frame, cams.len().min(fields.frame_count()))?;
    let cam = &cams[a.frame];
    let (rgb, mask) = render_image(&fields, a.frame, cam, &sampling)?;
    let rgb = rgb.into_iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect();
    RgbImage::new(cam.width, cam.height, rgb)?.save_png(&a.out)?;
    let mask_path = a.out.with_extension("pgm");
    GrayImage::new(cam.width, cam.height, mask)?.save_pgm(&mask_path)?;
    println!("wrote {} and {}", a.out.display(), mask_path.display());
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult<()> {
    let (fields, _) = load_model(&a.checkpoint)?;
    let bounds: Bounds = a.bounds.parse().map_err(usage)?;
    if a.res < ub4d::extract::MIN_RES {
        return Err(CliError::Usage(format!("--res must be at least {}", ub4d::extract::MIN_RES)));
    }
    if a.canonical {
        let m = march_canonical(&fields, a.res, bounds)?;
        m.save(&a.out)?;
        println!("canonical mesh: {} vertices -> {}", m.vertices.len(), a.out.display());
        return Ok(());
    }
    let cams = match (&a.data, a.no_cull) {
        (Some(d), false) => Some(dataset_cameras(d)?),
        (Some(d), true) => {
            require_dir(d, "dataset")?;
            None
        }
        (None, false) => {
            return Err(CliError::Usage(
                "frustum culling needs --data with cameras; pass --no-cull to skip it".into(),
            ))
        }
        (None, true) => None,
    };
    if let Some(c) = &cams {
        if c.len() != fields.frame_count() {
            return Err(CliError::Usage(format!(
                "{} cameras for {} frames",
                c.len(),
                fields.frame_count()
            )));
        }
    }
    let cam = |f: usize| cams.as_ref().map(|c| &c[f]);
    match a.frame {
        Some(f) => {
            check_frame(f, fields.frame_count())?;
            let m = march_frame(&fields, f, cam(f), a.res, bounds)?;
            m.save(&a.out)?;
            println!("frame {f}: {} vertices -> {}", m.vertices.len(), a.out.display());
        }
        None => {
            std::fs::create_dir_all(&a.out).map_err(ub4d::Error::from)?;
            for f in 0..fields.frame_count() {
                let m = march_frame(&fields, f, cam(f), a.res, bounds)?;
                m.save_ply(&mesh_path(&a.out, f))?;
                println!("frame {f}: {} vertices", m.vertices.len());
            }
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, seed: Option<u64>) -> CliResult<()> {
    require_dir(&a.pred, "reconstruction directory")?;
    let frames = dataset_cameras(&a.data)?.len();
    let truth = load_gt_meshes(&a.data, frames).map_err(usage)?;
    let pred = (0..frames)
        .map(|f| {
            let p = mesh_path(&a.pred, f);
            if p.exists() {
                TriMesh::load(&p)
            } else {
                Ok(TriMesh::default())
            }
        })
        .collect::<ub4d::Result<Vec<_>>>()?;
    let opts = EvalOptions {
        samples: a.samples,
        align: !a.no_align,
        ..EvalOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let report = evaluate_sequence(&pred, &truth, &opts, &mut rng)?;
    println!("frame  chamfer      hausdorff");
    let fmt = |v: Option<f64>| v.map_or("missing".to_string(), |v| format!("{v:.6}"));
    for f in 0..frames {
        println!("{f:>5}  {:<11}  {}", fmt(report.chamfer[f]), fmt(report.hausdorff[f]));
    }
    println!("mean   {:.6}     {:.6}", report.mean_chamfer(), report.mean_hausdorff());
    if let Some(out) = &a.out {
        let finite = |v: f64| if v.is_finite() { json!(v) } else { json!(null) };
        write_json(
            out,
            &json!({
                "chamfer": report.chamfer,
                "hausdorff": report.hausdorff,
                "mean_chamfer": finite(report.mean_chamfer()),
                "mean_hausdorff": finite(report.mean_hausdorff()),
                "missing": report.missing(),
                "samples": opts.samples,
                "aligned": opts.align,
            }),
        )?;
    }
    Ok(())
}

fn verify(a: VerifyArgs, seed: Option<u64>) -> CliResult<()> {
    if a.directions == 0 {
        return Err(CliError::Usage("--directions must be positive".into()));
    }
    let checks = run_all(a.directions, seed.unwrap_or(0))?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} checks failed")));
    }
    Ok(())
}

fn pca(a: PcaArgs) -> CliResult<()> {
    let (fields, _) = load_model(&a.checkpoint)?;
    let p = latent_pca(&fields.latents, a.components).map_err(usage)?;
    let (consecutive, all_pairs) = trajectory_smoothness(&p.projections)?;
    println!("explained variance: {:?}", p.explained);
    for (f, row) in p.projections.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:+.5}")).collect();
        println!("{f:>5}  {}", cells.join("  "));
    }
    println!("mean step between consecutive frames {consecutive:.5}, between all pairs {all_pairs:.5}");
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({
                "projections": p.projections,
                "explained": p.explained,
                "components": p.components,
                "consecutive_mean": consecutive,
                "all_pairs_mean": all_pairs,
            }),
        )?;
    }
    Ok(())
}

fn decimate(a: DecimateArgs, seed: Option<u64>) -> CliResult<()> {
    require_file(&a.input, "proxy file")?;
    let seq = ProxySequence::load(&a.input, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2, None).map_err(usage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let out = seq.decimate(a.vertices, &mut rng).map_err(usage)?;
    out.save(&a.out)?;
    println!(
        "kept {} of {} vertices over {} frames",
        out.vertex_count(),
        seq.vertex_count(),
        seq.frame_count()
    );
    Ok(())
}
