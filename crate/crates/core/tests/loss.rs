use nalgebra::Vector3;
use proptest::prelude::*;
use splatlift::imageio::ImageBuf;
use splatlift::loss::{l1_loss, total_loss, LossWeights};
use splatlift::raster::RenderOutput;
use splatlift::splat::{Gaussian3D, SplatScene};

fn image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuf<f64> {
    // cheap deterministic texture, no ties with the other images
    let data = (0..w * h * c)
        .map(|i| {
            let x = (i as f64 * 0.618_033_988_7 + seed as f64 * 0.414_213_562).fract();
            0.05 + 0.9 * x
        })
        .collect();
    ImageBuf::from_vec(w, h, c, data).unwrap()
}

fn output(rgb: ImageBuf<f64>, alpha: ImageBuf<f64>) -> RenderOutput<f64> {
    let transmittance = ImageBuf::from_vec(
        alpha.width,
        alpha.height,
        1,
        alpha.data.iter().map(|a| 1.0 - a).collect(),
    )
    .unwrap();
    RenderOutput {
        rgb,
        alpha,
        transmittance,
    }
}

fn unit_scene(n: usize) -> SplatScene<f64> {
    let g = Gaussian3D::<f64>::isotropic(Vector3::zeros(), 1.0, Vector3::new(0.5, 0.5, 0.5), 0.5);
    SplatScene::new(vec![g; n], Vector3::zeros())
}

#[test]
fn l1_examples() {
    let gt = image(8, 8, 3, 1);
    assert_eq!(l1_loss(&gt, &gt).unwrap().0, 0.0);
    let mut shifted = gt.clone();
    shifted.data.iter_mut().for_each(|v| *v += 0.5);
    let (v, _) = l1_loss(&shifted, &gt).unwrap();
    assert!((v - 0.5).abs() < 1e-12);
}

#[test]
fn l1_gradient_matches_finite_differences() {
    let pred = image(8, 8, 3, 2);
    let gt = image(8, 8, 3, 3);
    let (_, grad) = l1_loss(&pred, &gt).unwrap();
    let h = 1e-7;
    for i in (0..pred.data.len()).step_by(7) {
        let mut p = pred.clone();
        p.data[i] += h;
        let up = l1_loss(&p, &gt).unwrap().0;
        p.data[i] -= 2.0 * h;
        let down = l1_loss(&p, &gt).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        assert!(
            (numeric - grad.data[i]).abs() < 1e-4 * grad.data[i].abs(),
            "pixel {i}"
        );
    }
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let r = vec![output(image(32, 32, 3, 4), image(32, 32, 1, 5))];
    let gts = vec![image(32, 32, 3, 6)];
    let masks = vec![image(32, 32, 1, 7)];
    let (report, grads) =
        total_loss(&r, &gts, &masks, &unit_scene(3), &LossWeights::zero()).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(grads.views[0].d_rgb.data.iter().all(|v| *v == 0.0));
    assert!(grads.views[0].d_alpha.data.iter().all(|v| *v == 0.0));
    assert!(grads.log_scale.iter().all(|g| g.iter().all(|v| *v == 0.0)));
}

#[test]
fn l1_weight_alone_reduces_to_l1() {
    let r = vec![output(image(32, 32, 3, 8), image(32, 32, 1, 9))];
    let gts = vec![image(32, 32, 3, 10)];
    let masks = vec![image(32, 32, 1, 11)];
    let weights = LossWeights {
        lambda_l1: 1.0,
        ..LossWeights::zero()
    };
    let (report, _) = total_loss(&r, &gts, &masks, &unit_scene(2), &weights).unwrap();
    assert_eq!(report.total, report.l1);
    assert_eq!(report.l1, l1_loss(&r[0].rgb, &gts[0]).unwrap().0);
}

#[test]
fn hand_computed_fixture() {
    // pred 0.7 vs gt 0.2 everywhere, alpha 0.8 vs mask 1, unit isotropic scales
    let r = vec![output(
        ImageBuf::filled(32, 32, 3, 0.7),
        ImageBuf::filled(32, 32, 1, 0.8),
    )];
    let gts = vec![ImageBuf::filled(32, 32, 3, 0.2)];
    let masks = vec![ImageBuf::filled(32, 32, 1, 1.0)];
    let weights = LossWeights {
        lambda_l1: 1.0,
        lambda_perc: 0.5,
        lambda_alpha: 1.0,
        lambda_scale: 0.01,
        ..LossWeights::default()
    };
    let (report, _) = total_loss(&r, &gts, &masks, &unit_scene(4), &weights).unwrap();
    assert!((report.l1 - 0.5).abs() < 1e-12);
    assert!((report.alpha - 0.04).abs() < 1e-12);
    assert!((report.scale - 3.0).abs() < 1e-12);
    let expected = 0.5 + 0.5 * report.perceptual + 0.04 + 0.01 * 3.0;
    assert!((report.total - expected).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_linear_in_the_weights(
        w in proptest::array::uniform4(0.0f64..3.0),
        seed in 0u64..1000,
    ) {
        let r = vec![
            output(image(32, 32, 3, seed), image(32, 32, 1, seed + 1)),
            output(image(32, 32, 3, seed + 2), image(32, 32, 1, seed + 3)),
        ];
        let gts = vec![image(32, 32, 3, seed + 4), image(32, 32, 3, seed + 5)];
        let masks = vec![image(32, 32, 1, seed + 6), image(32, 32, 1, seed + 7)];
        let weights = LossWeights {
            lambda_l1: w[0],
            lambda_perc: w[1],
            lambda_alpha: w[2],
            lambda_scale: w[3],
            ..LossWeights::default()
        };
        let (rep, _) = total_loss(&r, &gts, &masks, &unit_scene(3), &weights).unwrap();
        let sum = w[0] * rep.l1 + w[1] * rep.perceptual + w[2] * rep.alpha + w[3] * rep.scale;
        prop_assert!((rep.total - sum).abs() <= 1e-9);
    }
}
