use splatlift::ablation::{run_ablation, AblationConfig, InputMode, PAPER_PSNR};
use splatlift::camera::{make_canonical_rig, CameraIntrinsics};
use splatlift::datagen::{gen_subject, subject_entries, Fidelity};
use splatlift::fit::CanonicalSet;
use splatlift::lrm::{evaluate, LrmConfig, LrmModel, TrainConfig, TrainSubject};
use splatlift::metrics::{psnr, psnr_foreground, PSNR_CAP};
use splatlift::raster::render;

fn tiny_lrm() -> LrmConfig {
    LrmConfig {
        image_size: 16,
        patch: 8,
        dim: 16,
        layers: 1,
        heads: 2,
        views: 8,
        ..LrmConfig::default()
    }
}

fn test_subjects(n: usize) -> Vec<TrainSubject> {
    let k = CameraIntrinsics::from_fov(16, 16, 40.0).unwrap();
    let rig = make_canonical_rig(8, 2.6, 0.0, k).unwrap();
    subject_entries(n, Fidelity::High, 400, 31)
        .into_iter()
        .map(|e| {
            let gt = gen_subject(&e.spec).unwrap();
            TrainSubject {
                id: e.id,
                canonical: CanonicalSet::from_scene(gt.clone(), &rig),
                gt,
            }
        })
        .collect()
}

#[test]
fn identical_images_hit_the_cap() {
    let s = &test_subjects(1)[0];
    let out = render(&s.gt, &s.canonical.rig.cameras[0]);
    assert_eq!(psnr(&out.rgb, &out.rgb).unwrap(), PSNR_CAP);
    assert_eq!(
        psnr_foreground(&out.rgb, &out.rgb, &out.alpha).unwrap(),
        PSNR_CAP
    );
    assert_eq!(PSNR_CAP, 99.0);
}

#[test]
fn mean_is_the_average_of_subject_averages() {
    let model = LrmModel::new(tiny_lrm()).unwrap();
    let report = evaluate(&model, &test_subjects(3), None, None).unwrap();
    assert_eq!(report.subjects.len(), 3);
    let mut by_hand = 0.0;
    for s in &report.subjects {
        let avg = s.per_camera.iter().sum::<f64>() / s.per_camera.len() as f64;
        assert!((avg - s.psnr).abs() < 1e-9);
        by_hand += s.psnr;
    }
    assert!((by_hand / 3.0 - report.mean_psnr).abs() < 1e-9);
}

#[test]
fn evaluation_is_deterministic() {
    let model = LrmModel::new(tiny_lrm()).unwrap();
    let subjects = test_subjects(2);
    assert_eq!(
        evaluate(&model, &subjects, None, None).unwrap(),
        evaluate(&model, &subjects, None, None).unwrap()
    );
}

#[test]
fn ablation_report_mirrors_the_four_table_rows() {
    let cfg = AblationConfig {
        // the perceptual term needs 32 px
        lrm: LrmConfig {
            image_size: 32,
            ..tiny_lrm()
        },
        train: TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        },
        train_subjects: 2,
        test_subjects: 1,
        subject_gaussians: 400,
        ..AblationConfig::default()
    };
    let mut steps = 0;
    let report = run_ablation(&cfg, |_, _, _, _| steps += 1).unwrap();
    assert_eq!(steps, 4 * 3);
    let arms: Vec<_> = report.rows.iter().map(|r| (r.data, r.input)).collect();
    assert_eq!(
        arms,
        vec![
            (Fidelity::Low, InputMode::Single),
            (Fidelity::Low, InputMode::Multi),
            (Fidelity::High, InputMode::Single),
            (Fidelity::High, InputMode::Multi),
        ]
    );
    let paper: Vec<f64> = report.rows.iter().map(|r| r.paper_psnr).collect();
    assert_eq!(paper, vec![25.3, 27.5, 27.2, 33.5]);
    assert_eq!(paper, PAPER_PSNR.to_vec());
    let table = report.to_markdown();
    assert_eq!(table.lines().count(), 2 + 4);
    for v in ["25.3", "27.5", "27.2", "33.5", "Single", "Multi-view"] {
        assert!(table.contains(v), "{v} missing from\n{table}");
    }
    let (a, b) = report.margins();
    let best = report.psnr(Fidelity::High, InputMode::Multi);
    assert_eq!(a, best - report.psnr(Fidelity::High, InputMode::Single));
    assert_eq!(b, best - report.psnr(Fidelity::Low, InputMode::Multi));
    assert_eq!(report.test_ids.len(), 1);
}
