use super::*;
use crate::losses::Weight;
use crate::scene::{AnalyticBending, AnalyticField, AnalyticSdf};

fn tiny_field() -> FieldConfig {
    FieldConfig {
        latent_dim: 4,
        sdf_hidden: 16,
        sdf_depth: 2,
        sdf_skips: vec![],
        sdf_freqs: 2,
        color_hidden: 8,
        color_depth: 1,
        color_dir_freqs: 1,
        bend_hidden: 8,
        bend_depth: 2,
        bend_freqs: 1,
        init_refine_steps: 20,
        ..FieldConfig::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 20,
        rays: 12,
        sampling: SamplingConfig {
            n_coarse: 8,
            n_fine: 4,
            ..SamplingConfig::default()
        },
        field: tiny_field(),
        eikonal_points: Some(16),
        flow_points: Some(16),
        log_interval: 0,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn camera(frame: usize, size: usize) -> CameraModel {
    let a = 0.4 * frame as f64;
    let eye = Vec3::new(2.5 * a.sin(), 0.3, -2.5 * a.cos());
    CameraModel::look_at(eye, Vec3::zeros(), Vec3::y(), 0.8, size, size, 0.1, 6.0).unwrap()
}

fn dataset(frames: usize, size: usize, proxies: bool) -> Dataset {
    let shift: Vec<Vec3> = (0..frames).map(|i| Vec3::new(0.05 * i as f64, 0.0, 0.0)).collect();
    let scene = AnalyticField::new(
        AnalyticSdf::Sphere {
            center: Vec3::zeros(),
            radius: 0.4,
        },
        AnalyticBending::Translation(shift.iter().map(|t| -t).collect()),
        60.0,
    );
    let cfg = SamplingConfig {
        n_coarse: 32,
        n_fine: 16,
        ..SamplingConfig::default()
    };
    let list = (0..frames)
        .map(|i| {
            let cam = camera(i, size);
            let (rgb, mask) = crate::render::render_image(&scene, i, &cam, &cfg).unwrap();
            let mask = mask.into_iter().map(|m| if m > 0.5 { 1.0 } else { 0.0 }).collect();
            Frame::new(
                RgbImage::new(size, size, rgb).unwrap(),
                GrayImage::new(size, size, mask).unwrap(),
                cam,
            )
            .unwrap()
        })
        .collect();
    let proxies = proxies.then(|| {
        let base = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z()];
        let seq = shift
            .iter()
            .map(|t| base.iter().map(|b| b * 0.4 + t).collect())
            .collect();
        ProxySequence::new(seq, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).unwrap()
    });
    Dataset::new(list, proxies).unwrap()
}

#[test]
fn full_draw_covers_every_pixel_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut px = sample_pixels(5, 3, 15, &mut rng).unwrap();
    px.sort();
    let mut all: Vec<(usize, usize)> = (0..5).flat_map(|u| (0..3).map(move |v| (u, v))).collect();
    all.sort();
    assert_eq!(px, all);
}

#[test]
fn pixel_draws_are_reproducible_and_bounded() {
    let a = sample_pixels(9, 7, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_pixels(9, 7, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    assert!(sample_pixels(2, 2, 5, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}

#[test]
fn pixel_quadrants_pass_chi_square() {
    let (w, h) = (16, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0.0f64; 4];
    let draws = 10_000;
    for _ in 0..draws {
        for (u, v) in sample_pixels(w, h, 3, &mut rng).unwrap() {
            counts[(u >= w / 2) as usize + 2 * (v >= h / 2) as usize] += 1.0;
        }
    }
    let expected = 3.0 * draws as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 99th percentile of chi-square with 3 degrees of freedom
    assert!(chi2 < 11.345, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn learning_rate_warms_up_then_decays() {
    let cfg = TrainConfig {
        iterations: 1000,
        ..TrainConfig::default()
    };
    let lr: Vec<f64> = (0..1000).map(|i| cfg.learning_rate_at(i)).collect();
    assert!(lr[0] > 0.0 && lr[0] < cfg.learning_rate);
    assert!((lr[19] - cfg.learning_rate).abs() < 1e-15);
    assert!(lr[..20].windows(2).all(|w| w[1] > w[0]));
    assert!(lr[20..].windows(2).all(|w| w[1] <= w[0]));
    assert!((cfg.learning_rate_at(1000) - cfg.final_learning_rate).abs() < 1e-15);
}

#[test]
fn config_validation_and_json_roundtrip() {
    let cfg = tiny_config();
    cfg.validate().unwrap();
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
    let partial: TrainConfig = serde_json::from_str(r#"{"rays": 64}"#).unwrap();
    assert_eq!(partial.rays, 64);
    assert_eq!(partial.learning_rate, 5e-4);
    for bad in [
        TrainConfig { rays: 0, ..cfg.clone() },
        TrainConfig { learning_rate: f64::NAN, ..cfg.clone() },
        TrainConfig { eikonal_points: Some(0), ..cfg.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = dataset(3, 6, true);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        final_learning_rate: 0.0,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, 3).unwrap();
    let before = t.fields.clone();
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    assert_eq!(t.fields, before);
}

#[test]
fn single_pixel_overfits() {
    let cam = CameraModel::look_at(
        Vec3::new(0.0, 0.0, -2.5),
        Vec3::zeros(),
        Vec3::y(),
        0.5,
        1,
        1,
        0.1,
        6.0,
    )
    .unwrap();
    let target = Vec3::new(0.2, 0.7, 0.4);
    let frame = Frame::new(
        RgbImage::new(1, 1, vec![target]).unwrap(),
        GrayImage::new(1, 1, vec![1.0]).unwrap(),
        cam,
    )
    .unwrap();
    let data = Dataset::new(vec![frame], None).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        rays: 1,
        learning_rate: 1e-2,
        final_learning_rate: 1e-2,
        warmup_fraction: 0.0,
        ..tiny_config()
    };
    let mut t = Trainer::new(cfg, 1).unwrap();
    let history = t.train(&data, None).unwrap();
    assert_eq!(history.len(), 200);
    let last = history.last().unwrap().terms.col;
    assert!(last < 0.01, "L_COL after 200 steps: {last}");
}

#[test]
fn missing_proxies_give_zero_flow_term() {
    let data = dataset(3, 6, false);
    let mut t = Trainer::new(tiny_config(), 3).unwrap();
    let b = t.step(&data).unwrap();
    assert_eq!(b.terms.flo, 0.0);
    assert_eq!(b.weights[4], 10.0);
    let expect = b.terms.col
        + b.weights[0] * b.terms.seg
        + b.weights[1] * b.terms.eik
        + b.weights[2] * b.terms.nbr
        + b.weights[3] * b.terms.div;
    assert!((b.total - expect).abs() < 1e-12 * expect.abs().max(1.0));
}

#[test]
fn flow_term_is_active_with_proxies() {
    let data = dataset(3, 6, true);
    let mut t = Trainer::new(tiny_config(), 3).unwrap();
    let b = t.step(&data).unwrap();
    assert!(b.terms.flo > 0.0 && b.terms.div >= 0.0 && b.terms.eik > 0.0);
}

fn changed_latent_rows(t: &Trainer) -> Vec<usize> {
    (0..t.fields.frame_count())
        .filter(|&i| t.fields.latents.row(i).iter().any(|&x| x != 0.0))
        .collect()
}

#[test]
fn only_involved_latents_receive_gradient() {
    let data = dataset(5, 6, true);
    let mut weights = LossWeights::zero();
    let mut t = Trainer::new(
        TrainConfig {
            weights,
            ..tiny_config()
        },
        5,
    )
    .unwrap();
    // the bending output layer starts at zero, so latents move from step two
    for _ in 0..3 {
        t.step_frame(&data, 2).unwrap();
    }
    assert_eq!(changed_latent_rows(&t), vec![2]);

    weights.nbr = Weight::constant(1.0);
    let mut t = Trainer::new(
        TrainConfig {
            weights,
            ..tiny_config()
        },
        5,
    )
    .unwrap();
    for _ in 0..3 {
        t.step_frame(&data, 2).unwrap();
    }
    assert_eq!(changed_latent_rows(&t), vec![1, 2, 3]);
}

#[test]
fn non_finite_state_aborts_with_diagnostic() {
    let data = dataset(2, 6, false);
    let mut t = Trainer::new(tiny_config(), 2).unwrap();
    t.fields.log_s.set(0, 0, f64::NAN);
    match t.step(&data) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("iteration 0"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn hutchinson_divergence_mode_trains() {
    let data = dataset(2, 6, false);
    let mut t = Trainer::new(
        TrainConfig {
            divergence: DivergenceMode::Hutchinson,
            ..tiny_config()
        },
        2,
    )
    .unwrap();
    for _ in 0..3 {
        assert!(t.step(&data).unwrap().total.is_finite());
    }
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let data = dataset(2, 6, true);
    let mut t = Trainer::new(tiny_config(), 2).unwrap();
    for _ in 0..3 {
        t.step(&data).unwrap();
    }
    let bytes = t.to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Trainer::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.fields, t.fields);
    assert_eq!(back.optimizer, t.optimizer);
    assert_eq!(back.iteration, 3);
}

#[test]
fn corrupted_or_foreign_checkpoints_are_rejected() {
    let t = Trainer::new(tiny_config(), 2).unwrap();
    let bytes = t.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Trainer::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(Trainer::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(Trainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Trainer::from_bytes(&long).is_err());
}

#[test]
fn field_checkpoints_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    let t = Trainer::new(tiny_config(), 3).unwrap();
    save_fields(&t.fields, &path).unwrap();
    assert_eq!(load_fields(&path).unwrap(), t.fields);
    assert!(Trainer::load(&path).is_err());
    t.save(&path).unwrap();
    assert_eq!(load_fields(&path).unwrap(), t.fields);
}

#[test]
fn resumed_training_matches_uninterrupted_bitwise() {
    let data = dataset(3, 6, true);
    let mut straight = Trainer::new(tiny_config(), 3).unwrap();
    let full: Vec<LossBreakdown> = (0..10).map(|_| straight.step(&data).unwrap()).collect();

    let mut first = Trainer::new(tiny_config(), 3).unwrap();
    let mut resumed_losses: Vec<LossBreakdown> = (0..5).map(|_| first.step(&data).unwrap()).collect();
    let mut second = Trainer::from_bytes(&first.to_bytes().unwrap()).unwrap();
    resumed_losses.extend((0..5).map(|_| second.step(&data).unwrap()));

    assert_eq!(resumed_losses, full);
    assert_eq!(second.fields, straight.fields);
    assert_eq!(second.to_bytes().unwrap(), straight.to_bytes().unwrap());
}

#[test]
fn dataset_roundtrips_through_disk_and_train_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(2, 6, true);
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    for (i, f) in data.frames.iter().enumerate() {
        f.image.save_png(&image_path(dir.path(), i)).unwrap();
        f.mask.save_pgm(&mask_path(dir.path(), i)).unwrap();
    }
    let cams: Vec<CameraModel> = data.frames.iter().map(|f| f.camera.clone()).collect();
    crate::camera::save_cameras(&dir.path().join("cameras.json"), &cams).unwrap();
    data.proxies
        .as_ref()
        .unwrap()
        .save(&dir.path().join("proxies.json"))
        .unwrap();
    let loaded = Dataset::load(dir.path(), DEFAULT_LAMBDA1, DEFAULT_LAMBDA2).unwrap();
    assert_eq!(loaded.frame_count(), 2);
    assert_eq!(loaded.frames[1].mask, data.frames[1].mask);
    assert!(loaded.proxies.is_some());

    let out = dir.path().join("run");
    let mut t = Trainer::new(
        TrainConfig {
            iterations: 4,
            checkpoint_interval: 2,
            ..tiny_config()
        },
        2,
    )
    .unwrap();
    t.train(&loaded, Some(&out)).unwrap();
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with(LossBreakdown::CSV_HEADER));
    assert!(out.join("checkpoints/000002.ckpt").exists());
    let resumed = Trainer::load(&out.join("checkpoint.ckpt")).unwrap();
    assert_eq!(resumed.iteration, 4);
}

#[test]
fn frame_count_mismatch_is_an_error() {
    let data = dataset(2, 6, false);
    let mut t = Trainer::new(tiny_config(), 3).unwrap();
    assert!(t.step(&data).is_err());
    assert!(Dataset::new(data.frames.clone(), Some(dataset(3, 6, true).proxies.unwrap())).is_err());
}
