use super::*;
use crate::camera::{make_canonical_rig, CameraIntrinsics};
use crate::datagen::{gen_subject, Fidelity, SubjectSpec};
use crate::loss::LossWeights;
use crate::splat::{MAX_SCALE, MIN_SCALE};

fn subject(size: usize, m: usize, seed: u64) -> TrainSubject {
    let k = CameraIntrinsics::from_fov(size, size, 40.0).unwrap();
    let rig = make_canonical_rig(m, 2.6, 0.0, k).unwrap();
    let gt = gen_subject(&SubjectSpec::new(seed, Fidelity::High, 200)).unwrap();
    TrainSubject {
        id: format!("t{seed}"),
        canonical: CanonicalSet::from_scene(gt.clone(), &rig),
        gt,
    }
}

fn config(size: usize, views: usize) -> LrmConfig {
    LrmConfig {
        image_size: size,
        patch: 8,
        dim: 16,
        layers: 1,
        heads: 2,
        views,
        ..LrmConfig::default()
    }
}

#[test]
fn token_and_gaussian_counts() {
    let s = subject(64, 4, 1);
    let model = LrmModel::new(LrmConfig {
        views: 4,
        dim: 32,
        layers: 1,
        ..LrmConfig::default()
    })
    .unwrap();
    let input = s.input(None).unwrap();
    let tokens = model.tokenize(&input).unwrap();
    assert_eq!((tokens.nrows(), tokens.ncols()), (256, 32));
    assert_eq!(model.predict(&input).unwrap().len(), 16_384);
}

#[test]
fn config_validation() {
    assert!(LrmConfig {
        patch: 7,
        ..LrmConfig::default()
    }
    .validate()
    .is_err());
    assert!(LrmConfig {
        heads: 3,
        ..LrmConfig::default()
    }
    .validate()
    .is_err());
    assert!(LrmConfig {
        far: 1.0,
        ..LrmConfig::default()
    }
    .validate()
    .is_err());
    let c = config(16, 2);
    assert_eq!(
        c.num_params(),
        LrmModel::new(c.clone()).unwrap().params.len()
    );
}

#[test]
fn view_permutation_permutes_token_blocks() {
    let s = subject(16, 4, 2);
    let model = LrmModel::new(config(16, 3)).unwrap();
    let a = model.tokenize(&s.input(Some(&[0, 1, 2])).unwrap()).unwrap();
    let b = model.tokenize(&s.input(Some(&[2, 0, 1])).unwrap()).unwrap();
    let per = model.config.tokens_per_view();
    for (blk_b, blk_a) in [(0, 2), (1, 0), (2, 1)] {
        assert_eq!(b.rows(blk_b * per, per), a.rows(blk_a * per, per));
    }
}

#[test]
fn zero_image_tokens_come_from_rays() {
    let s = subject(16, 1, 3);
    let model = LrmModel::new(config(16, 1)).unwrap();
    let mut input = s.input(None).unwrap();
    input.views[0].data.iter_mut().for_each(|v| *v = 0.0);
    let patches: DMatrix<f64> = model.cast::<f64>().patchify(&input).unwrap();
    for col in 0..patches.ncols() {
        let zero = patches.column(col).iter().all(|v| *v == 0.0);
        if col % INPUT_CHANNELS < 3 {
            assert!(zero, "column {col}");
        }
    }
    assert!(patches.iter().any(|v| *v != 0.0));
    let tokens = model.tokenize(&input).unwrap();
    assert!(tokens.iter().any(|v| *v != 0.0));
    let mut other = input.clone();
    other.views[0] = ImageBuf::new(16, 16, 3);
    assert_eq!(model.tokenize(&other).unwrap(), tokens);
}

#[test]
fn shape_mismatches_are_reported() {
    let s = subject(16, 2, 4);
    let model = LrmModel::new(config(16, 1)).unwrap();
    assert!(matches!(
        model.tokenize(&s.input(None).unwrap()),
        Err(Error::ShapeMismatch(_))
    ));
    let big = LrmModel::new(config(32, 2)).unwrap();
    assert!(matches!(
        big.predict(&s.input(None).unwrap()),
        Err(Error::ShapeMismatch(_))
    ));
}

/// Random weights with the head scaled up so decoded values hit every clamp.
fn wild_model(c: LrmConfig, gain: f32) -> LrmModel<f32> {
    let mut m = LrmModel::new(c).unwrap();
    let layout = Layout::new(&m.config);
    for v in &mut m.params[layout.head_w.range()] {
        *v *= gain;
    }
    m
}

#[test]
fn decoded_gaussians_sit_on_rays_and_in_range() {
    let s = subject(16, 2, 5);
    for gain in [1.0, 300.0] {
        let m = wild_model(config(16, 2), gain);
        let input = s.input(None).unwrap();
        let scene = m.predict(&input).unwrap();
        assert_eq!(scene.len(), 2 * 16 * 16);
        for (v, cam) in input.cameras.iter().enumerate() {
            let rays = pixel_ray_map(cam);
            for (i, ray) in rays.rays.iter().enumerate() {
                let g = &scene.gaussians[v * 256 + i];
                let rel = g.position.cast::<f64>() - ray.origin;
                let off = rel - ray.direction * rel.dot(&ray.direction);
                // f32 positions a few units from the origin
                assert!(off.norm() < 1e-5 * 3.0, "distance to ray {}", off.norm());
                assert!(rel.dot(&ray.direction) >= m.config.near - 1e-5);
                let a = g.opacity();
                assert!(a > 0.0 && a < 1.0);
                for s in g.log_scale.iter() {
                    assert!((MIN_SCALE.ln() as f32..=MAX_SCALE.ln() as f32).contains(s));
                }
                assert!((g.rotation.norm() - 1.0).abs() < 1e-6);
                assert!(g.color.iter().all(|c| (0.0..=1.0).contains(c)));
            }
        }
    }
}

#[test]
fn initial_prediction_is_pixel_sized_at_mid_depth() {
    let s = subject(16, 1, 6);
    let cfg = config(16, 1);
    let mid = 0.5 * (cfg.near + cfg.far);
    let m = LrmModel::new(cfg).unwrap();
    let input = s.input(None).unwrap();
    let scene = m.predict(&input).unwrap();
    let cam = &input.cameras[0];
    let footprint = mid / cam.intrinsics.fx;
    let mean_depth = scene
        .gaussians
        .iter()
        .map(|g| (g.position.cast::<f64>() - cam.center()).norm())
        .sum::<f64>()
        / 256.0;
    let mean_scale = scene
        .gaussians
        .iter()
        .map(|g| g.scales().mean() as f64)
        .sum::<f64>()
        / 256.0;
    assert!((mean_depth - mid).abs() < 0.3, "{mean_depth} vs {mid}");
    assert!(
        mean_scale / footprint > 0.5 && mean_scale / footprint < 2.0,
        "{mean_scale} vs {footprint}"
    );
}

#[test]
fn forward_is_bit_stable() {
    let s = subject(16, 2, 7);
    let m = LrmModel::new(config(16, 2)).unwrap();
    let input = s.input(None).unwrap();
    assert_eq!(m.predict(&input).unwrap(), m.predict(&input).unwrap());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let s = subject(16, 2, 8);
    let model = LrmModel::new(config(16, 2)).unwrap().cast::<f64>();
    let input = s.input(None).unwrap();
    let cams = vec![
        s.canonical.rig.cameras[0],
        crate::camera::orbit_camera(s.canonical.rig.cameras[0].intrinsics, 2.6, 60.0, 15.0),
    ];
    let weights = LossWeights {
        lambda_perc: 0.0,
        ..LossWeights::default()
    };
    let (_, grads) = loss_and_gradient(&model, &input, &s.gt, &cams, &weights).unwrap();
    let layout = Layout::new(&model.config);
    let l = &layout.layers[0];
    let h = 1e-6;
    for i in [
        l.wq.offset + 17,
        l.w1.offset + 40,
        layout.embed_w.offset + 100,
        layout.head_w.offset + 3,
    ] {
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params[i] += delta;
            loss_and_gradient(&m, &input, &s.gt, &cams, &weights)
                .unwrap()
                .0
                .total
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-8);
        assert!(rel < 1e-2, "param {i}: fd {fd} analytic {}", grads[i]);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = vec![subject(32, 2, 9)];
    let mut m = LrmModel::new(LrmConfig {
        image_size: 32,
        ..config(32, 2)
    })
    .unwrap();
    let before = m.params.clone();
    let cfg = TrainConfig {
        steps: 3,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let r = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
    assert_eq!(r.losses.len(), 3);
    assert!(before
        .iter()
        .zip(&m.params)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn training_is_deterministic() {
    let data = vec![subject(32, 2, 10), subject(32, 2, 11)];
    let cfg = TrainConfig {
        steps: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = LrmModel::new(config(32, 2)).unwrap();
        let r = train(&mut m, &data, &cfg, |_, _| {}).unwrap();
        (m, r.losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert!(matches!(
        train(&mut a.clone(), &[], &cfg, |_, _| {}),
        Err(Error::InvalidConfig(_))
    ));
}
