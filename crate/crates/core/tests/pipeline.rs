use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use tryon::ingest::{load_tensor, save_tensor, LatentTensor};
use tryon::pipeline::config::TOY_LATENT;
use tryon::pipeline::run::{read_selections, StageReport, REPORT_FILE};
use tryon::pipeline::{run_tryon, write_fixture, GuidanceKind, JobConfig, RunOptions, STAGES};
use tryon::Error;

fn fixture() -> (TempDir, PathBuf, JobConfig) {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(&dir.path().join("job")).unwrap();
    let cfg = JobConfig::load(&path).unwrap();
    (dir, path, cfg)
}

fn with_out(cfg: &JobConfig, out: &Path) -> JobConfig {
    let mut c = cfg.clone();
    c.out = out.to_path_buf();
    c
}

fn tryon(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tryon")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn same_config_same_hashes_in_stage_order() {
    let (dir, _, cfg) = fixture();
    let a = run_tryon(&with_out(&cfg, &dir.path().join("a")), RunOptions::default()).unwrap();
    let b = run_tryon(&with_out(&cfg, &dir.path().join("b")), RunOptions::default()).unwrap();
    assert_eq!(a.artifact_hashes(), b.artifact_hashes());
    let order: Vec<&str> = a.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(order, STAGES);
    for stage in &a.stages {
        for artifact in &stage.artifacts {
            assert!(dir.path().join("a").join(&artifact.file).is_file(), "{}", artifact.name);
        }
    }
    let names: Vec<String> = a.artifact_hashes().into_iter().map(|(n, _)| n).collect();
    for expected in ["I_w", "M_w", "I_p'", "I_proxy", "z_0", "result"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from report");
    }
}

#[test]
fn seed_changes_the_sample() {
    let (dir, _, mut cfg) = fixture();
    let a = run_tryon(&with_out(&cfg, &dir.path().join("a")), RunOptions::default()).unwrap();
    cfg.sampling.seed = 1;
    let b = run_tryon(&with_out(&cfg, &dir.path().join("b")), RunOptions::default()).unwrap();
    let z0 = |r: &StageReport| r.stage("sample").unwrap().artifacts[0].sha256.clone();
    assert_ne!(z0(&a), z0(&b));
    // stages before sampling do not depend on the seed
    let artifacts = |r: &StageReport| r.stage("proxy").unwrap().artifacts.clone();
    assert_eq!(artifacts(&a), artifacts(&b));
}

#[test]
fn single_point_distribution_is_reached() {
    let (dir, _, mut cfg) = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = LatentTensor::from_fn(TOY_LATENT, |_, _, _| rng.random_range(0.0..1.0));
    let mode = dir.path().join("point.tryw");
    save_tensor(&point, &mode).unwrap();
    cfg.toy.modes = vec![mode];
    cfg.toy.variance = 0.0;
    cfg.sampling.eta = 0.0;
    let out = dir.path().join("out");
    run_tryon(&with_out(&cfg, &out), RunOptions::default()).unwrap();
    let z0 = load_tensor(out.join("z0.tryw")).unwrap();
    assert!(z0.max_abs_diff(&point) < 1e-4);
}

#[test]
fn every_guidance_mode_runs() {
    let (dir, _, mut cfg) = fixture();
    cfg.sampling.steps = 10;
    for (i, g) in [
        GuidanceKind::Principal,
        GuidanceKind::Full,
        GuidanceKind::Lowfreq,
        GuidanceKind::None,
    ]
    .into_iter()
    .enumerate()
    {
        cfg.sampling.guidance = g;
        let out = dir.path().join(format!("g{i}"));
        run_tryon(&with_out(&cfg, &out), RunOptions::default()).unwrap();
        let sel = read_selections(&out).unwrap();
        assert_eq!(sel.len(), 10);
        assert_eq!(sel.iter().all(Option::is_none), g == GuidanceKind::None);
    }
}

#[test]
fn missing_keypoint_file_is_a_validation_error() {
    let (dir, path, cfg) = fixture();
    fs::remove_file(&cfg.inputs.person_keypoints).unwrap();
    let err = run_tryon(&with_out(&cfg, &dir.path().join("out")), RunOptions::default()).unwrap_err();
    match err {
        Error::Validation(msg) => assert!(msg.contains("person_keypoints.json"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
    let out = tryon(&["run", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("person_keypoints.json"));
}

#[test]
fn corrupt_input_fails_its_stage() {
    let (dir, path, cfg) = fixture();
    fs::write(&cfg.inputs.garment_keypoints, "{ not json").unwrap();
    let err = run_tryon(&with_out(&cfg, &dir.path().join("out")), RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "ingest", .. }), "{err}");
    assert_eq!(tryon(&["run", "--config", s(&path)]).status.code(), Some(3));
}

#[test]
fn failing_stage_still_writes_the_report() {
    let (dir, _, mut cfg) = fixture();
    let wrong = dir.path().join("wrong.tryw");
    save_tensor(
        &LatentTensor::zeros(tryon::ingest::LatentGeometry::new(3, 8, 8)),
        &wrong,
    )
    .unwrap();
    cfg.toy.modes = vec![wrong];
    let out = dir.path().join("out");
    let err = run_tryon(&with_out(&cfg, &out), RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "sample", .. }), "{err}");
    let report = StageReport::load(out.join(REPORT_FILE)).unwrap();
    let order: Vec<&str> = report.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(order, &STAGES[..5]);
}

#[test]
fn resume_skips_intact_stages() {
    let (dir, _, cfg) = fixture();
    let cfg = with_out(&cfg, &dir.path().join("out"));
    let fresh = run_tryon(&cfg, RunOptions::default()).unwrap();
    let resume = RunOptions {
        resume: true,
        ..Default::default()
    };

    let again = run_tryon(&cfg, resume).unwrap();
    assert!(again.stages.iter().skip(1).all(|s| s.skipped));
    assert_eq!(again.artifact_hashes(), fresh.artifact_hashes());

    fs::remove_file(cfg.out.join("proxy.png")).unwrap();
    let repaired = run_tryon(&cfg, resume).unwrap();
    let skipped: Vec<bool> = repaired.stages.iter().map(|s| s.skipped).collect();
    assert_eq!(skipped, [false, true, true, false, false, false, false]);
    assert_eq!(repaired.artifact_hashes(), fresh.artifact_hashes());

    fs::write(cfg.out.join("z0.tryw"), b"tampered").unwrap();
    let repaired = run_tryon(&cfg, resume).unwrap();
    let rerun: Vec<&str> = repaired
        .stages
        .iter()
        .filter(|s| !s.skipped)
        .map(|s| s.stage.as_str())
        .collect();
    assert_eq!(rerun, ["ingest", "sample", "decode"]);
    assert_eq!(repaired.artifact_hashes(), fresh.artifact_hashes());
}

#[test]
fn resume_reruns_everything_after_input_change() {
    let (dir, _, mut cfg) = fixture();
    cfg.out = dir.path().join("out");
    run_tryon(&cfg, RunOptions::default()).unwrap();
    cfg.sampling.seed = 5;
    let report = run_tryon(
        &cfg,
        RunOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.stages.iter().all(|s| !s.skipped));
}

#[test]
fn morph_and_proxy_commands_stop_early() {
    let (dir, path, _) = fixture();
    let out = dir.path().join("morph");
    assert!(tryon(&["morph", "--config", s(&path), "--out", s(&out)])
        .status
        .success());
    assert!(out.join("warped.png").is_file() && !out.join("infused.png").exists());
    let report = StageReport::load(out.join(REPORT_FILE)).unwrap();
    assert_eq!(report.stages.len(), 2);

    let out = dir.path().join("proxy");
    assert!(tryon(&["proxy", "--config", s(&path), "--out", s(&out)])
        .status
        .success());
    assert!(out.join("proxy.png").is_file() && !out.join("z_proxy.tryw").exists());
}

#[test]
fn cli_overrides_and_concurrent_jobs() {
    let (dir, path, _) = fixture();
    let out = dir.path().join("many");
    let run = tryon(&[
        "run",
        "--config",
        s(&path),
        "--config",
        s(&path),
        "--steps",
        "7",
        "--guidance",
        "full",
        "--out",
        s(&out),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let a = StageReport::load(out.join("job0").join(REPORT_FILE)).unwrap();
    let b = StageReport::load(out.join("job1").join(REPORT_FILE)).unwrap();
    assert_eq!(a.artifact_hashes(), b.artifact_hashes());
    assert_eq!(read_selections(&out.join("job0")).unwrap().len(), 7);

    assert_eq!(
        tryon(&["run", "--config", s(&path), "--mode", "bogus"]).status.code(),
        Some(2)
    );
    let resumed = tryon(&[
        "run",
        "--config",
        s(&path),
        "--out",
        s(&out.join("job0")),
        "--steps",
        "7",
        "--guidance",
        "full",
        "--stage",
        "resume",
    ]);
    assert!(resumed.status.success());
    let again = StageReport::load(out.join("job0").join(REPORT_FILE)).unwrap();
    assert!(again.stages.iter().skip(1).all(|s| s.skipped));
}

#[test]
fn bridge_mode_without_command_is_rejected() {
    let (dir, path, _) = fixture();
    let out = Command::new(env!("CARGO_BIN_EXE_tryon"))
        .args([
            "run",
            "--mode",
            "bridge-unet",
            "--config",
            s(&path),
            "--out",
            s(&dir.path().join("o")),
        ])
        .env_remove("TRYW_BRIDGE_CMD")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("TRYW_BRIDGE_CMD"));
}

#[test]
fn two_garments_are_concatenated() {
    let (dir, _, mut cfg) = fixture();
    let garment = cfg.inputs.garment.take().unwrap();
    let mask = cfg.inputs.garment_mask.take().unwrap();
    cfg.inputs.garments = vec![garment.clone(), garment];
    cfg.inputs.garment_masks = vec![mask.clone(), mask];
    cfg.sampling.steps = 5;
    let report = run_tryon(&with_out(&cfg, &dir.path().join("out")), RunOptions::default()).unwrap();
    let ingest = report.stage("ingest").unwrap();
    assert!(ingest.warnings.iter().any(|w| w.contains("2 garments")));
}
