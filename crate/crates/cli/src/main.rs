mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use splatlift::ablation::run_ablation;
use splatlift::camera::{Camera, CameraJson};
use splatlift::datagen::{
    load_canonical_set, load_capture_set, render_corpus, subject_entries, validate_manifest,
    DatasetManifest,
};
use splatlift::fit::{canonicalize_with_report, fit_scene, CanonicalSet};
use splatlift::imageio::save_png;
use splatlift::lrm::{
    comparison_grid, eval_cameras, evaluate, load_checkpoint, save_checkpoint, train, LrmModel,
    TrainSubject,
};
use splatlift::metrics::psnr;
use splatlift::raster::render;
use splatlift::splat::{ply_read, ply_write};
use splatlift::Error;

use config::RunConfig;

const THREADS_ENV: &str = "SPLATLIFT_THREADS";
const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Parser)]
#[command(name = "splatlift", version, about = "Capture, canonicalize and splat")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (`render`: output PNG).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the global seed and every module seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to SPLATLIFT_THREADS, then the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural subject corpus.
    GenData,
    /// Fit a splat scene to one subject's captures.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Fit captures and re-render them at the canonical rig (one subject, or all).
    Canonicalize {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
    },
    /// Train the reconstruction model on the corpus minus the held-out subjects.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out subjects.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a PLY scene from one camera to a PNG.
    Render {
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long)]
        camera: Option<PathBuf>,
    },
    /// Train and score the data-fidelity × input-view grid.
    Ablate,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Fit { .. } => "fit",
            Command::Canonicalize { .. } => "canonicalize",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Render { .. } => "render",
            Command::Ablate => "ablate",
        }
    }
}

struct Failure {
    stage: &'static str,
    subject: Option<String>,
    error: Error,
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

trait Context<T> {
    fn at(self, stage: &'static str, subject: Option<&str>) -> Outcome<T>;
}

impl<T, E: Into<Error>> Context<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str, subject: Option<&str>) -> Outcome<T> {
        self.map_err(|e| Failure {
            stage,
            subject: subject.map(str::to_string),
            error: e.into(),
        })
    }
}

fn invalid(stage: &'static str, msg: impl Into<String>) -> Failure {
    Failure {
        stage,
        subject: None,
        error: Error::InvalidConfig(msg.into()),
    }
}

fn log(value: serde_json::Value) {
    eprintln!("{value}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log(json!({
                "level": "error",
                "stage": f.stage,
                "subject": f.subject,
                "error": f.error.to_string(),
                "command": stage,
            }));
            match f.error {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn resolve(cli: &mut Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).at("config", None)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let env_threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| invalid("config", format!("{THREADS_ENV}={v:?} is not a count")))?,
        ),
        Err(_) => None,
    };
    cfg.threads = cli.threads.or(env_threads).or(cfg.threads);
    let inputs = &mut cfg.inputs;
    match &mut cli.command {
        Command::Fit { data, subject } | Command::Canonicalize { data, subject } => {
            override_with(&mut inputs.data, data.take());
            override_with(&mut inputs.subject, subject.take());
        }
        Command::Train { data } => override_with(&mut inputs.data, data.take()),
        Command::Eval { data, checkpoint } => {
            override_with(&mut inputs.data, data.take());
            override_with(&mut inputs.checkpoint, checkpoint.take());
        }
        Command::Render { ply, camera } => {
            override_with(&mut inputs.ply, ply.take());
            override_with(&mut inputs.camera, camera.take());
        }
        Command::GenData | Command::Ablate => {}
    }
    Ok(cfg)
}

fn override_with<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(mut cli: Cli) -> Outcome {
    let cfg = resolve(&mut cli)?;
    let stage = cli.command.stage();
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(invalid("config", "threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| invalid("config", e.to_string()))?;
    }
    let out = cli
        .out
        .clone()
        .ok_or_else(|| invalid(stage, "--out is required"))?;
    match cli.command {
        Command::Render { .. } => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).at(stage, None)?;
            }
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".config.json");
            std::fs::write(out.with_file_name(name), cfg.to_json().at(stage, None)?)
                .at(stage, None)?;
        }
        _ => {
            std::fs::create_dir_all(&out).at(stage, None)?;
            std::fs::write(out.join(RESOLVED_CONFIG), cfg.to_json().at(stage, None)?)
                .at(stage, None)?;
        }
    }
    log(json!({ "level": "info", "stage": stage, "event": "start", "out": out }));
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Fit { .. } => fit(&cfg, &out),
        Command::Canonicalize { .. } => canonicalize(&cfg, &out),
        Command::Train { .. } => train_model(&cfg, &out),
        Command::Eval { .. } => eval(&cfg, &out),
        Command::Render { .. } => render_png(&cfg, &out),
        Command::Ablate => ablate(&cfg, &out),
    }?;
    log(json!({ "level": "info", "stage": stage, "event": "done" }));
    Ok(())
}

fn required<'a, T>(v: &'a Option<T>, stage: &'static str, flag: &str) -> Outcome<&'a T> {
    v.as_ref()
        .ok_or_else(|| invalid(stage, format!("--{flag} is required")))
}

fn write_json(path: &Path, value: &impl serde::Serialize, stage: &'static str) -> Outcome {
    let mut bytes = serde_json::to_vec_pretty(value).at(stage, None)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).at(stage, None)
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "gen-data";
    let d = &cfg.data;
    let rig = d.rig().at(STAGE, None)?;
    let entries = subject_entries(d.subjects, d.fidelity, d.gaussians, cfg.seed);
    let manifest = render_corpus(&entries, &rig, &d.perturbation, cfg.seed, out).at(STAGE, None)?;
    validate_manifest(out).at(STAGE, None)?;
    let captures: usize = manifest
        .subjects
        .iter()
        .map(|s| {
            s.files
                .keys()
                .filter(|k| k.contains("/capture/capture_"))
                .count()
        })
        .sum();
    log(json!({
        "level": "info",
        "stage": STAGE,
        "event": "corpus",
        "subjects": manifest.subjects.len(),
        "renders": manifest.subjects.len() * rig.len() + captures,
    }));
    Ok(())
}

fn load_manifest(cfg: &RunConfig, stage: &'static str) -> Outcome<(PathBuf, DatasetManifest)> {
    let root = required(&cfg.inputs.data, stage, "data")?.clone();
    let manifest = validate_manifest(&root).map_err(|error| {
        let subject = match &error {
            Error::ManifestInvalid { path, .. } => subject_of(path),
            _ => None,
        };
        Failure {
            stage,
            subject,
            error,
        }
    })?;
    Ok((root, manifest))
}

/// The `{id}` in a `…/subjects/{id}/…` corpus path.
fn subject_of(path: &Path) -> Option<String> {
    let mut parts = path.components().map(|c| c.as_os_str().to_string_lossy());
    parts.find(|p| p == "subjects")?;
    parts.next().map(|p| p.into_owned())
}

/// Subjects named by `--subject`, or the whole corpus.
fn selected(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    stage: &'static str,
) -> Outcome<Vec<String>> {
    match &cfg.inputs.subject {
        Some(id) if manifest.subjects.iter().any(|s| &s.id == id) => Ok(vec![id.clone()]),
        Some(id) => Err(Failure {
            stage,
            subject: Some(id.clone()),
            error: Error::InvalidConfig(format!("subject {id} is not in the corpus")),
        }),
        None => Ok(manifest.subjects.iter().map(|s| s.id.clone()).collect()),
    }
}

fn mean_psnr(set: &CanonicalSet, reference: &CanonicalSet) -> splatlift::Result<f64> {
    let mut sum = 0.0;
    for (a, b) in set.views.iter().zip(&reference.views) {
        sum += psnr(a, b)?;
    }
    Ok(sum / set.views.len() as f64)
}

fn fit(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "fit";
    let (root, manifest) = load_manifest(cfg, STAGE)?;
    let id = required(&cfg.inputs.subject, STAGE, "subject")?;
    selected(cfg, &manifest, STAGE)?;
    let at = Some(id.as_str());
    let captures = load_capture_set(&root, id).at(STAGE, at)?;
    let result = fit_scene(&captures, &cfg.fit).at(STAGE, at)?;
    ply_write(&result.scene, out.join("fitted.ply")).at(STAGE, at)?;
    let summary = result.summary();
    write_json(&out.join("report.json"), &summary, STAGE)?;
    log(json!({
        "level": "info",
        "stage": STAGE,
        "subject": id,
        "loss": summary.final_loss.total,
        "smoothed_loss": summary.smoothed_loss,
    }));
    Ok(())
}

fn canonicalize(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "canonicalize";
    let (root, manifest) = load_manifest(cfg, STAGE)?;
    for id in selected(cfg, &manifest, STAGE)? {
        let at = Some(id.as_str());
        let captures = load_capture_set(&root, &id).at(STAGE, at)?;
        let reference = load_canonical_set(&root, &id).at(STAGE, at)?;
        let (set, result) =
            canonicalize_with_report(&captures, &manifest.rig, &cfg.fit).at(STAGE, at)?;
        let dir = out.join("subjects").join(&id);
        set.save(&dir, Some(&result.summary())).at(STAGE, at)?;
        log(json!({
            "level": "info",
            "stage": STAGE,
            "subject": id,
            "loss": result.report.total,
            "psnr_vs_reference": mean_psnr(&set, &reference).at(STAGE, at)?,
        }));
    }
    Ok(())
}

/// Training and held-out subjects: the last `eval.test_subjects` are held out.
fn split(
    cfg: &RunConfig,
    root: &Path,
    manifest: &DatasetManifest,
    stage: &'static str,
) -> Outcome<(Vec<TrainSubject>, Vec<TrainSubject>)> {
    let n = manifest.subjects.len();
    let held = cfg.eval.test_subjects.min(n);
    let mut all = Vec::with_capacity(n);
    for s in &manifest.subjects {
        let canonical = load_canonical_set(root, &s.id).at(stage, Some(&s.id))?;
        if canonical.views[0].width != cfg.lrm.image_size {
            return Err(Failure {
                stage,
                subject: Some(s.id.clone()),
                error: Error::InvalidConfig(format!(
                    "corpus images are {} px but lrm.image_size is {}",
                    canonical.views[0].width, cfg.lrm.image_size
                )),
            });
        }
        all.push(TrainSubject {
            id: s.id.clone(),
            gt: canonical.scene.clone(),
            canonical,
        });
    }
    let test = all.split_off(n - held);
    Ok((all, test))
}

fn train_model(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "train";
    let (root, manifest) = load_manifest(cfg, STAGE)?;
    let (train_set, _) = split(cfg, &root, &manifest, STAGE)?;
    let mut model = LrmModel::new(cfg.lrm.clone()).at(STAGE, None)?;
    log(json!({
        "level": "info",
        "stage": STAGE,
        "subjects": train_set.len(),
        "params": model.params.len(),
    }));
    let report = train(&mut model, &train_set, &cfg.train, |step, r| {
        if step % 10 == 0 || step + 1 == cfg.train.steps {
            log(json!({ "level": "info", "stage": STAGE, "step": step, "loss": r }));
        }
    })
    .at(STAGE, None)?;
    save_checkpoint(&model, cfg.train.steps as u64, out.join("model.ckpt")).at(STAGE, None)?;
    write_json(&out.join("train_report.json"), &report, STAGE)
}

fn eval(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "eval";
    let (root, manifest) = load_manifest(cfg, STAGE)?;
    let ckpt = required(&cfg.inputs.checkpoint, STAGE, "checkpoint")?;
    let (model, _) = load_checkpoint(ckpt).at(STAGE, None)?;
    let (_, test) = split(cfg, &root, &manifest, STAGE)?;
    if test.is_empty() {
        return Err(invalid(STAGE, "eval.test_subjects must be >= 1"));
    }
    let views = cfg.train.input_views.as_deref();
    let report = evaluate(&model, &test, views, None).at(STAGE, None)?;
    write_json(&out.join("eval_report.json"), &report, STAGE)?;
    let first = &test[0];
    let grid = comparison_grid(&model, first, views, &eval_cameras(&first.canonical.rig))
        .at(STAGE, Some(&first.id))?;
    save_png(&grid, out.join("eval_grid.png")).at(STAGE, Some(&first.id))?;
    log(json!({ "level": "info", "stage": STAGE, "mean_psnr": report.mean_psnr }));
    Ok(())
}

fn render_png(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "render";
    let ply = required(&cfg.inputs.ply, STAGE, "ply")?;
    let cam_path = required(&cfg.inputs.camera, STAGE, "camera")?;
    let scene = ply_read(ply).at(STAGE, None)?;
    let bytes = std::fs::read(cam_path).at(STAGE, None)?;
    let cam: CameraJson = serde_json::from_slice(&bytes).at(STAGE, None)?;
    let cam = Camera::from_json(&cam).at(STAGE, None)?;
    save_png(&render(&scene, &cam).rgb, out).at(STAGE, None)
}

fn ablate(cfg: &RunConfig, out: &Path) -> Outcome {
    const STAGE: &str = "ablate";
    let report = run_ablation(&cfg.ablation, |data, input, step, r| {
        if step % 50 == 0 {
            log(json!({
                "level": "info",
                "stage": STAGE,
                "data": data,
                "input": input,
                "step": step,
                "loss": r.total,
            }));
        }
    })
    .at(STAGE, None)?;
    std::fs::write(out.join("ablation.md"), report.to_markdown()).at(STAGE, None)?;
    write_json(&out.join("ablation.json"), &report, STAGE)?;
    let (multi_gain, data_gain) = report.margins();
    log(json!({
        "level": "info",
        "stage": STAGE,
        "multi_minus_single": multi_gain,
        "high_minus_low": data_gain,
    }));
    Ok(())
}
