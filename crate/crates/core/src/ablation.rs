//! The training-data × input-view ablation grid.
//!
//! Four reconstruction models share every seed and differ only in the
//! fidelity of their training subjects (low or high) and in how many
//! canonical views they see (the front view alone, or the whole rig). All
//! four are scored on the same held-out high-fidelity subjects.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::camera::{make_canonical_rig, CameraIntrinsics};
use crate::datagen::{gen_subject, subject_entries, Fidelity};
use crate::fit::CanonicalSet;
use crate::loss::LossReport;
use crate::lrm::{evaluate, train, LrmConfig, LrmModel, TrainConfig, TrainSubject};
use crate::{Error, Result};

/// Reference PSNRs (dB) reported for the full-scale system, in
/// [`AblationReport::rows`] order.
pub const PAPER_PSNR: [f64; 4] = [25.3, 27.5, 27.2, 33.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Model shape; `views` is overridden per arm.
    pub lrm: LrmConfig,
    /// Training schedule; `input_views` is overridden per arm.
    pub train: TrainConfig,
    pub rig_views: usize,
    pub rig_radius: f64,
    pub rig_elevation: f64,
    pub fov_deg: f64,
    pub train_subjects: usize,
    pub test_subjects: usize,
    /// High-fidelity Gaussian count per subject; low fidelity uses a quarter.
    pub subject_gaussians: usize,
    /// Rig index of the single-view arms' input.
    pub single_view: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lrm: LrmConfig {
                image_size: 32,
                patch: 8,
                dim: 64,
                layers: 2,
                heads: 4,
                ..LrmConfig::default()
            },
            train: TrainConfig {
                steps: 2000,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            rig_views: 8,
            rig_radius: 2.6,
            rig_elevation: 0.0,
            fov_deg: 40.0,
            train_subjects: 24,
            test_subjects: 6,
            subject_gaussians: 2000,
            single_view: 0,
            seed: 0,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.lrm.validate()?;
        self.train.validate()?;
        if self.train_subjects == 0 || self.test_subjects == 0 {
            return Err(Error::InvalidConfig(
                "train and test sets must be non-empty".into(),
            ));
        }
        if self.single_view >= self.rig_views {
            return Err(Error::InvalidConfig(format!(
                "single_view {} outside a {}-view rig",
                self.single_view, self.rig_views
            )));
        }
        Ok(())
    }

    fn arm(&self, input: InputMode) -> (LrmConfig, TrainConfig) {
        let views: Vec<usize> = match input {
            InputMode::Single => vec![self.single_view],
            InputMode::Multi => (0..self.rig_views).collect(),
        };
        let lrm = LrmConfig {
            views: views.len(),
            ..self.lrm.clone()
        };
        let train = TrainConfig {
            input_views: Some(views),
            ..self.train.clone()
        };
        (lrm, train)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub data: Fidelity,
    pub input: InputMode,
    pub psnr: f64,
    pub paper_psnr: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// (low, single), (low, multi), (high, single), (high, multi).
    pub rows: Vec<AblationRow>,
    pub test_ids: Vec<String>,
}

impl AblationReport {
    pub fn psnr(&self, data: Fidelity, input: InputMode) -> f64 {
        self.rows
            .iter()
            .find(|r| r.data == data && r.input == input)
            .map(|r| r.psnr)
            .expect("all four arms present")
    }

    /// `(hi multi − hi single, hi multi − lo multi)` in dB.
    pub fn margins(&self) -> (f64, f64) {
        let best = self.psnr(Fidelity::High, InputMode::Multi);
        (
            best - self.psnr(Fidelity::High, InputMode::Single),
            best - self.psnr(Fidelity::Low, InputMode::Multi),
        )
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Training data | Input views | PSNR (dB) | Reference PSNR (dB) |\n|---|---|---|---|\n");
        for r in &self.rows {
            let data = match r.data {
                Fidelity::Low => "low-fidelity subjects (RenderPeople)",
                Fidelity::High => "high-fidelity subjects (Human Avatar Dataset)",
            };
            let input = match r.input {
                InputMode::Single => "Single",
                InputMode::Multi => "Multi-view",
            };
            let _ = writeln!(
                s,
                "| {data} | {input} | {:.2} | {:.1} |",
                r.psnr, r.paper_psnr
            );
        }
        s
    }
}

fn subjects(
    cfg: &AblationConfig,
    n: usize,
    fidelity: Fidelity,
    seed: u64,
    prefix: &str,
) -> Result<Vec<TrainSubject>> {
    let k = CameraIntrinsics::from_fov(cfg.lrm.image_size, cfg.lrm.image_size, cfg.fov_deg)?;
    let rig = make_canonical_rig(cfg.rig_views, cfg.rig_radius, cfg.rig_elevation, k)?;
    subject_entries(n, fidelity, cfg.subject_gaussians, seed)
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let gt = gen_subject(&e.spec)?;
            Ok(TrainSubject {
                id: format!("{prefix}{i:04}"),
                canonical: CanonicalSet::from_scene(gt.clone(), &rig),
                gt,
            })
        })
        .collect()
}

/// Trains and scores all four arms. `on_step` receives the arm, step and loss.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut on_step: impl FnMut(Fidelity, InputMode, usize, &LossReport),
) -> Result<AblationReport> {
    cfg.validate()?;
    let test = subjects(
        cfg,
        cfg.test_subjects,
        Fidelity::High,
        cfg.seed ^ 0x7e57_7e57_7e57_7e57,
        "t",
    )?;
    let mut rows = Vec::with_capacity(4);
    let arms = [
        (Fidelity::Low, InputMode::Single),
        (Fidelity::Low, InputMode::Multi),
        (Fidelity::High, InputMode::Single),
        (Fidelity::High, InputMode::Multi),
    ];
    let mut data = None;
    for (i, (fidelity, input)) in arms.into_iter().enumerate() {
        if data.as_ref().is_none_or(|(f, _)| *f != fidelity) {
            data = Some((
                fidelity,
                subjects(cfg, cfg.train_subjects, fidelity, cfg.seed, "s")?,
            ));
        }
        let train_set = &data.as_ref().expect("just built").1;
        let (lrm_cfg, train_cfg) = cfg.arm(input);
        let mut model = LrmModel::new(lrm_cfg)?;
        let report = train(&mut model, train_set, &train_cfg, |step, r| {
            on_step(fidelity, input, step, r)
        })?;
        let eval = evaluate(&model, &test, train_cfg.input_views.as_deref(), None)?;
        rows.push(AblationRow {
            data: fidelity,
            input,
            psnr: eval.mean_psnr,
            paper_psnr: PAPER_PSNR[i],
            final_loss: report.last.total,
        });
    }
    Ok(AblationReport {
        rows,
        test_ids: test.iter().map(|s| s.id.clone()).collect(),
    })
}
