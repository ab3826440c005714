use std::path::Path;

use splatlift::camera::{make_canonical_rig, CameraIntrinsics, CanonicalRig, PerturbationSpec};
use splatlift::datagen::{
    gen_subject, load_capture_set, render_corpus, render_views, subject_entries, validate_manifest,
    Fidelity, SubjectSpec, GENERATOR_VERSION, MANIFEST_FILE,
};
use splatlift::metrics::laplacian_variance;
use splatlift::Error;

fn rig(size: usize) -> CanonicalRig {
    let k = CameraIntrinsics::from_fov(size, size, 40.0).unwrap();
    make_canonical_rig(8, 2.6, 0.0, k).unwrap()
}

fn count_files(dir: &Path, prefix: &str, suffix: &str) -> usize {
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            n += count_files(&p, prefix, suffix);
        } else if name.starts_with(prefix) && name.ends_with(suffix) {
            n += 1;
        }
    }
    n
}

#[test]
fn high_fidelity_has_more_high_frequency_energy() {
    let rig = rig(64);
    for seed in 0..4 {
        let spec = SubjectSpec::new(seed, Fidelity::High, 2000);
        let hi = gen_subject(&spec).unwrap();
        let lo = gen_subject(&spec.with_fidelity(Fidelity::Low)).unwrap();
        let (h, _) = render_views(&hi, &rig.cameras[..1]);
        let (l, _) = render_views(&lo, &rig.cameras[..1]);
        assert_ne!(h[0], l[0]);
        let (eh, el) = (laplacian_variance(&h[0]), laplacian_variance(&l[0]));
        assert!(eh > el, "seed {seed}: {eh} vs {el}");
    }
}

#[test]
fn corpus_of_200_subjects_has_2400_renders() {
    let dir = tempfile::tempdir().unwrap();
    let rig = rig(32);
    let entries = subject_entries(200, Fidelity::High, 200, 5);
    let manifest = render_corpus(
        &entries,
        &rig,
        &PerturbationSpec::handheld(2.6, 5),
        5,
        dir.path(),
    )
    .unwrap();
    assert_eq!(manifest.subjects.len(), 200);
    assert_eq!(manifest.version, GENERATOR_VERSION);
    // one RGB render per canonical view and per capture, each with a mask
    let pngs = count_files(dir.path(), "", ".png");
    let masks = count_files(dir.path(), "mask_", ".png");
    assert_eq!(pngs - masks, 200 * (8 + 4));
    assert_eq!(masks, 200 * (8 + 4));
    validate_manifest(dir.path()).unwrap();
}

#[test]
fn zero_perturbation_captures_equal_canonical_views() {
    let dir = tempfile::tempdir().unwrap();
    let entries = subject_entries(2, Fidelity::High, 400, 6);
    render_corpus(&entries, &rig(32), &PerturbationSpec::zero(), 6, dir.path()).unwrap();
    for e in &entries {
        let base = dir.path().join("subjects").join(&e.id);
        for i in 0..4 {
            // captures are front, right, back, left: every second rig view
            let cap = std::fs::read(base.join(format!("capture/capture_{i:02}.png"))).unwrap();
            let canon = std::fs::read(base.join(format!("canon/canon_{:02}.png", 2 * i))).unwrap();
            assert_eq!(cap, canon, "{} capture {i}", e.id);
            let cap = std::fs::read(base.join(format!("capture/mask_{i:02}.png"))).unwrap();
            let canon = std::fs::read(base.join(format!("canon/mask_{:02}.png", 2 * i))).unwrap();
            assert_eq!(cap, canon, "{} mask {i}", e.id);
        }
        assert_eq!(load_capture_set(dir.path(), &e.id).unwrap().len(), 4);
    }
}

#[test]
fn deleted_file_is_named_by_validation() {
    let dir = tempfile::tempdir().unwrap();
    let entries = subject_entries(3, Fidelity::Low, 400, 7);
    render_corpus(
        &entries,
        &rig(32),
        &PerturbationSpec::handheld(2.6, 7),
        7,
        dir.path(),
    )
    .unwrap();
    let victim = dir
        .path()
        .join("subjects")
        .join(&entries[1].id)
        .join("canon/canon_03.png");
    std::fs::remove_file(&victim).unwrap();
    match validate_manifest(dir.path()) {
        Err(Error::ManifestInvalid { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected ManifestInvalid, got {other:?}"),
    }
}

#[test]
fn altered_file_fails_its_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let entries = subject_entries(1, Fidelity::High, 400, 8);
    render_corpus(&entries, &rig(32), &PerturbationSpec::zero(), 8, dir.path()).unwrap();
    let victim = dir
        .path()
        .join("subjects")
        .join(&entries[0].id)
        .join("gt.ply");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(
        validate_manifest(dir.path()),
        Err(Error::ManifestInvalid { path, .. }) if path == victim
    ));
}

#[test]
fn other_generator_versions_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join(MANIFEST_FILE),
        br#"{"version": "splatlift-corpus/0"}"#,
    )
    .unwrap();
    let entries = subject_entries(1, Fidelity::High, 400, 9);
    let err =
        render_corpus(&entries, &rig(32), &PerturbationSpec::zero(), 9, dir.path()).unwrap_err();
    assert!(matches!(err, Error::ManifestConflict(_)));
}
