use serde::{Deserialize, Serialize};

use super::{LrmModel, TrainSubject};
use crate::camera::{orbit_camera, Camera, CanonicalRig};
use crate::imageio::{hstack, vstack, ImageBuf};
use crate::metrics::psnr_foreground;
use crate::raster::render;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub id: String,
    /// Foreground-crop PSNR per evaluation camera.
    pub per_camera: Vec<f64>,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subjects: Vec<SubjectScore>,
    pub mean_psnr: f64,
}

/// Every rig camera plus four off-rig views between the rig azimuths and
/// 15° above the rig elevation.
pub fn eval_cameras(rig: &CanonicalRig) -> Vec<Camera> {
    let k = rig.cameras[0].intrinsics;
    let mut cams = rig.cameras.clone();
    cams.extend((0..4).map(|i| {
        orbit_camera(
            k,
            rig.radius,
            22.5 + 90.0 * i as f64,
            rig.elevation_deg + 15.0,
        )
    }));
    cams
}

/// PSNR on the ground-truth foreground crop, averaged over cameras and then
/// over subjects. `cameras` defaults to [`eval_cameras`] of each subject's rig.
pub fn evaluate(
    model: &LrmModel<f32>,
    test: &[TrainSubject],
    input_views: Option<&[usize]>,
    cameras: Option<&[Camera]>,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidConfig("test set is empty".into()));
    }
    let mut subjects = Vec::with_capacity(test.len());
    for s in test {
        let scene = model.predict(&s.input(input_views)?)?;
        let cams = match cameras {
            Some(c) => c.to_vec(),
            None => eval_cameras(&s.canonical.rig),
        };
        let per_camera = cams
            .iter()
            .map(|c| {
                let gt = render(&s.gt, c);
                psnr_foreground(&render(&scene, c).rgb, &gt.rgb, &gt.alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        let psnr = per_camera.iter().sum::<f64>() / per_camera.len() as f64;
        subjects.push(SubjectScore {
            id: s.id.clone(),
            per_camera,
            psnr,
        });
    }
    let mean_psnr = subjects.iter().map(|s| s.psnr).sum::<f64>() / subjects.len() as f64;
    Ok(EvalReport {
        subjects,
        mean_psnr,
    })
}

/// Ground truth (top row) over prediction (bottom row) for each camera.
pub fn comparison_grid(
    model: &LrmModel<f32>,
    subject: &TrainSubject,
    input_views: Option<&[usize]>,
    cameras: &[Camera],
) -> Result<ImageBuf<f32>> {
    let scene = model.predict(&subject.input(input_views)?)?;
    let gt: Vec<_> = cameras.iter().map(|c| render(&subject.gt, c).rgb).collect();
    let pred: Vec<_> = cameras.iter().map(|c| render(&scene, c).rgb).collect();
    let top = hstack(&gt.iter().collect::<Vec<_>>())?;
    let bottom = hstack(&pred.iter().collect::<Vec<_>>())?;
    vstack(&[&top, &bottom])
}
