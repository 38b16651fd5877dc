use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::process::{Command, Stdio};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tryon::bridge::{read_message, write_message, BridgeProcess, Fusion, Header, BRIDGE_CMD_ENV, PROTOCOL_VERSION};
use tryon::ingest::{load_tensor, ImagePlane, LatentGeometry, LatentTensor, MaskPlane};
use tryon::pipeline::run::{StageReport, REPORT_FILE};
use tryon::pipeline::write_fixture;
use tryon::ppg::denoiser::{Conditioning, Denoiser, StepInfo, ToyDenoiser};
use tryon::resample::{image_to_latent, latent_to_image};

const BIN: &str = env!("CARGO_BIN_EXE_tryon");
const GEOMETRY: LatentGeometry = LatentGeometry {
    channels: 3,
    height: 4,
    width: 4,
};

fn toy_command(variance: f64) -> String {
    format!("{BIN} bridge-toy --variance {variance}")
}

fn condition(id: &str, rng: &mut ChaCha8Rng) -> Conditioning {
    let data = (0..8 * 8 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Conditioning {
        id: id.into(),
        infused: ImagePlane::new(8, 8, 3, data).unwrap(),
        agnostic_mask: MaskPlane::from_fn(8, 8, |x, _| x < 4),
        prompt: "a shirt".into(),
        garment: None,
        cloth_mask: None,
    }
}

fn random_latent(rng: &mut ChaCha8Rng) -> LatentTensor {
    LatentTensor::from_fn(GEOMETRY, |_, _, _| rng.random_range(-2.0..2.0))
}

#[test]
fn predictions_match_the_in_process_toy() {
    let variance = 0.01;
    let mut bridge = BridgeProcess::spawn(&toy_command(variance), GEOMETRY, Fusion::Cbs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conds = [condition("a", &mut rng), condition("b", &mut rng)];
    for i in 0..100 {
        let cond = &conds[i / 7 % 2];
        let mut local = ToyDenoiser::new(vec![(image_to_latent(&cond.infused, GEOMETRY), 1.0)], variance).unwrap();
        let z = random_latent(&mut rng);
        let step = StepInfo {
            index: 1 + i % 50,
            train_step: rng.random_range(0..1000),
            alpha_bar: rng.random_range(0.001..0.999),
        };
        let remote = bridge.predict_noise(&z, &step, cond).unwrap();
        assert_eq!(remote.geometry(), GEOMETRY);
        assert!(remote.data().iter().all(|v| v.is_finite()));
        let expected = local.predict_noise(&z, &step, cond).unwrap();
        assert_eq!(remote.data(), expected.data(), "request {i}");
    }
    bridge.shutdown().unwrap();
}

#[test]
fn encode_decode_round_trip() {
    let mut bridge = BridgeProcess::spawn(&toy_command(0.05), GEOMETRY, Fusion::None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = condition("x", &mut rng).infused;
    let z = bridge.encode(&img).unwrap();
    assert_eq!(z.geometry(), GEOMETRY);
    assert_eq!(z.data(), image_to_latent(&img, GEOMETRY).data());
    let back = bridge.decode(&z).unwrap();
    assert_eq!(back, latent_to_image(&z));
}

#[test]
fn unusable_bridges_are_reported() {
    let Err(err) = BridgeProcess::spawn("/nonexistent/bridge", GEOMETRY, Fusion::Cbs) else {
        panic!("spawned a missing program");
    };
    assert!(matches!(err, tryon::Error::Transport(_)), "{err}");
    let four = LatentGeometry::new(4, 4, 4);
    assert!(BridgeProcess::spawn(&toy_command(0.05), four, Fusion::Cbs).is_err());
}

#[test]
fn raw_protocol_over_stdio() {
    let mut child = Command::new(BIN)
        .args(["bridge-toy"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut w = BufWriter::new(child.stdin.take().unwrap());
    let mut r = BufReader::new(child.stdout.take().unwrap());
    let mut send = |h: Header, p: &[f32]| {
        write_message(&mut w, h, p).unwrap();
        read_message(&mut r).unwrap().unwrap()
    };

    let mut early = Header::new("predict_noise");
    early.dims = Some(vec![3, 4, 4]);
    let reply = send(early, &[0.0; 48]);
    assert_eq!(reply.header.op, "error");
    assert_eq!(reply.header.code.as_deref(), Some("no_handshake"));

    let mut hello = Header::new("hello");
    hello.version = Some(PROTOCOL_VERSION.into());
    hello.latent_geometry = Some([3, 4, 4]);
    hello.fusion = Some(Fusion::CbsDit);
    let ack = send(hello, &[]);
    assert_eq!(ack.header.op, "hello-ack", "{:?}", ack.header);
    assert!(ack.header.backbone_id.is_some());

    let reply = send(Header::new("frobnicate"), &[]);
    assert_eq!(reply.header.code.as_deref(), Some("bad_op"));

    let bye = send(Header::new("shutdown"), &[]);
    assert_eq!(bye.header.op, "bye");
    drop(w);
    assert!(child.wait().unwrap().success());
}

fn bridge_config(dir: &Path) -> std::path::PathBuf {
    let path = write_fixture(dir).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let text = text.replace("[sampling]\n", "[sampling]\nlatent = [3, 64, 48]\n");
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, mode: &str) -> std::process::Output {
    Command::new(BIN)
        .args([
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .args(["--mode", mode, "--steps", "20"])
        .env(BRIDGE_CMD_ENV, toy_command(0.002))
        .output()
        .unwrap()
}

#[test]
fn pipeline_runs_through_the_bridge() {
    let dir = tempfile::tempdir().unwrap();
    let config = bridge_config(&dir.path().join("job"));
    let toy = dir.path().join("toy");
    let out = run(&config, &toy, "toy");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let reference = load_tensor(toy.join("z0.tryw")).unwrap();

    for mode in ["bridge-unet", "bridge-dit"] {
        let dest = dir.path().join(mode);
        let out = run(&config, &dest, mode);
        assert!(out.status.success(), "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(dest.join("result.png").is_file());
        let report = StageReport::load(dest.join(REPORT_FILE)).unwrap();
        assert_eq!(report.stages.len(), 7);
        let z0 = load_tensor(dest.join("z0.tryw")).unwrap();
        assert_eq!(z0.geometry(), reference.geometry());
        let diff = z0.max_abs_diff(&reference);
        assert!(diff < 1e-5, "{mode}: z0 differs from toy run by {diff}");
    }
}
