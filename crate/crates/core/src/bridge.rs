//! Stdio protocol for driving an external denoiser process.
//!
//! Every message is one JSON header line followed by `byte_length` bytes of
//! little-endian `f32` payload laid out channel-major like a tensor file body.
//! Requests are answered strictly in order, one response each.
//!
//! | request         | payload                          | response     |
//! |-----------------|----------------------------------|--------------|
//! | `hello`         | none                             | `hello-ack`  |
//! | `set_condition` | `8 x H x W` condition planes     | `ack`        |
//! | `predict_noise` | latent `z_t`                     | `noise`      |
//! | `encode`        | `3 x H x W` image                | `latent`     |
//! | `decode`        | latent                           | `image`      |
//! | `shutdown`      | none                             | `bye`        |
//!
//! Condition planes are the infused person image (3), the agnostic mask (1),
//! the garment image (3) and the cloth mask (1), all at the person size.
//! Failures are reported as `{"op":"error","code":..,"message":..}` and the
//! server keeps reading; an unreadable header line is skipped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{floats_to_le_bytes, le_bytes_to_floats, ImagePlane, LatentGeometry, LatentTensor, MaskPlane};
use crate::ppg::{Conditioning, Denoiser, StepInfo, ToyDenoiser};
use crate::resample::{area_coverage, image_to_latent, latent_to_image, resize_bilinear};

pub const PROTOCOL_VERSION: &str = "1";
pub const BRIDGE_CMD_ENV: &str = "TRYW_BRIDGE_CMD";
pub const CONDITION_CHANNELS: usize = 8;

/// Attention fusion rule the backbone should install.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    None,
    Cbs,
    CbsDit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_geometry: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Fusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default)]
    pub byte_length: usize,
}

impl Header {
    pub fn new(op: &str) -> Self {
        Header {
            op: op.to_string(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Header,
    pub payload: Vec<f32>,
}

fn transport(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

/// Writes one message, filling in `byte_length`.
pub fn write_message(w: &mut impl Write, mut header: Header, payload: &[f32]) -> Result<()> {
    header.byte_length = 4 * payload.len();
    let line = serde_json::to_string(&header).map_err(transport)?;
    w.write_all(line.as_bytes()).map_err(transport)?;
    w.write_all(b"\n").map_err(transport)?;
    w.write_all(&floats_to_le_bytes(payload)).map_err(transport)?;
    w.flush().map_err(transport)
}

/// Reads one message; `None` at end of stream.
pub fn read_message(r: &mut impl BufRead) -> Result<Option<Message>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(transport)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    let header: Header = serde_json::from_str(line.trim()).map_err(|e| transport(format!("bad header: {e}")))?;
    let payload = read_payload(r, header.byte_length)?;
    Ok(Some(Message { header, payload }))
}

fn read_payload(r: &mut impl Read, byte_length: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; byte_length];
    r.read_exact(&mut bytes).map_err(transport)?;
    if !byte_length.is_multiple_of(4) {
        return Err(transport(format!("byte_length {byte_length} is not a multiple of 4")));
    }
    Ok(le_bytes_to_floats(&bytes))
}

pub fn geometry_dims(g: LatentGeometry) -> Vec<usize> {
    vec![g.channels, g.height, g.width]
}

fn dims_geometry(dims: &[usize]) -> Option<LatentGeometry> {
    match dims {
        [c, h, w] => Some(LatentGeometry::new(*c, *h, *w)),
        _ => None,
    }
}

/// Channel-major planes of an RGB image.
pub fn image_planes(img: &ImagePlane) -> Vec<f32> {
    let rgb = img.to_rgb();
    let (w, h) = rgb.dims();
    let mut out = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out.push(rgb.get(x, y, c));
            }
        }
    }
    out
}

fn planes_image(planes: &[f32], width: usize, height: usize) -> ImagePlane {
    let n = width * height;
    ImagePlane::from_fn(width, height, 3, |x, y, c| planes[c * n + y * width + x])
}

fn mask_plane(mask: &MaskPlane, width: usize, height: usize) -> Vec<f32> {
    if mask.dims() == (width, height) {
        mask.data().iter().map(|&b| f32::from(b)).collect()
    } else {
        area_coverage(mask, width, height)
            .iter()
            .map(|&v| f32::from(v >= 0.5))
            .collect()
    }
}

/// Condition payload at the infused image's size.
pub fn condition_payload(cond: &Conditioning) -> Vec<f32> {
    let (w, h) = cond.infused.dims();
    let mut out = image_planes(&cond.infused);
    out.extend(mask_plane(&cond.agnostic_mask, w, h));
    match &cond.garment {
        Some(g) => out.extend(image_planes(&resize_bilinear(g, w, h))),
        None => out.extend(std::iter::repeat_n(0.0, 3 * w * h)),
    }
    match &cond.cloth_mask {
        Some(m) => out.extend(mask_plane(m, w, h)),
        None => out.extend(std::iter::repeat_n(0.0, w * h)),
    }
    out
}

fn condition_from_payload(id: &str, prompt: &str, payload: &[f32], width: usize, height: usize) -> Conditioning {
    let n = width * height;
    let mask = |k: usize| MaskPlane::from_fn(width, height, |x, y| payload[k * n + y * width + x] >= 0.5);
    Conditioning {
        id: id.to_string(),
        infused: planes_image(&payload[..3 * n], width, height),
        agnostic_mask: mask(3),
        prompt: prompt.to_string(),
        garment: Some(planes_image(&payload[4 * n..7 * n], width, height)),
        cloth_mask: Some(mask(7)),
    }
}

/// Model side of the protocol.
pub trait BridgeBackend {
    /// Prepares for the given latent geometry and returns a backbone id.
    fn hello(&mut self, geometry: LatentGeometry, fusion: Fusion) -> Result<String>;
    fn set_condition(&mut self, cond: Conditioning) -> Result<()>;
    fn predict_noise(&mut self, z: &LatentTensor, step: &StepInfo, cond_ref: &str) -> Result<LatentTensor>;
    fn encode(&mut self, img: &ImagePlane) -> Result<LatentTensor>;
    fn decode(&mut self, z: &LatentTensor) -> Result<ImagePlane>;
}

struct Refusal {
    code: &'static str,
    message: String,
}

fn refuse(code: &'static str, message: impl Into<String>) -> Refusal {
    Refusal {
        code,
        message: message.into(),
    }
}

enum Reply {
    Send(Header, Vec<f32>),
    Bye,
}

fn payload_geometry(header: &Header, payload: &[f32]) -> std::result::Result<LatentGeometry, Refusal> {
    let dims = header
        .dims
        .as_deref()
        .ok_or_else(|| refuse("bad_payload", "missing dims"))?;
    let g = dims_geometry(dims).ok_or_else(|| refuse("bad_payload", format!("dims {dims:?} must have rank 3")))?;
    if g.len() != payload.len() {
        return Err(refuse(
            "bad_payload",
            format!("dims {dims:?} need {} bytes, got {}", 4 * g.len(), 4 * payload.len()),
        ));
    }
    Ok(g)
}

fn handle(
    header: &Header,
    payload: &[f32],
    backend: &mut dyn BridgeBackend,
    session: &mut Option<LatentGeometry>,
) -> std::result::Result<Reply, Refusal> {
    let backend_err = |e: Error| refuse("backend_error", e.to_string());
    let needs_hello = |s: &Option<LatentGeometry>| s.ok_or_else(|| refuse("no_handshake", "hello must come first"));
    match header.op.as_str() {
        "hello" => {
            if header.version.as_deref() != Some(PROTOCOL_VERSION) {
                return Err(refuse(
                    "bad_version",
                    format!(
                        "protocol version {:?} unsupported, expected {PROTOCOL_VERSION}",
                        header.version
                    ),
                ));
            }
            let [c, h, w] = header
                .latent_geometry
                .ok_or_else(|| refuse("bad_payload", "hello needs latent_geometry"))?;
            let g = LatentGeometry::new(c, h, w);
            let fusion = header.fusion.unwrap_or_default();
            let id = backend
                .hello(g, fusion)
                .map_err(|e| refuse("capability", e.to_string()))?;
            *session = Some(g);
            let mut ack = Header::new("hello-ack");
            ack.version = Some(PROTOCOL_VERSION.into());
            ack.latent_geometry = Some([c, h, w]);
            ack.backbone_id = Some(id);
            ack.fusion = Some(fusion);
            Ok(Reply::Send(ack, Vec::new()))
        }
        "set_condition" => {
            needs_hello(session)?;
            let g = payload_geometry(header, payload)?;
            if g.channels != CONDITION_CHANNELS {
                return Err(refuse(
                    "bad_payload",
                    format!("condition needs {CONDITION_CHANNELS} planes, got {}", g.channels),
                ));
            }
            let id = header
                .cond_ref
                .as_deref()
                .ok_or_else(|| refuse("bad_payload", "missing cond_ref"))?;
            let cond = condition_from_payload(id, header.prompt.as_deref().unwrap_or(""), payload, g.width, g.height);
            backend.set_condition(cond).map_err(backend_err)?;
            let mut ack = Header::new("ack");
            ack.cond_ref = Some(id.to_string());
            Ok(Reply::Send(ack, Vec::new()))
        }
        "predict_noise" => {
            let session_g = needs_hello(session)?;
            let g = payload_geometry(header, payload)?;
            if g != session_g {
                return Err(refuse(
                    "bad_payload",
                    format!("latent {g:?} differs from session {session_g:?}"),
                ));
            }
            let (Some(t), Some(alpha_bar)) = (header.t, header.alpha_bar) else {
                return Err(refuse("bad_payload", "predict_noise needs t and alpha_bar"));
            };
            let cond_ref = header
                .cond_ref
                .as_deref()
                .ok_or_else(|| refuse("bad_payload", "missing cond_ref"))?;
            let z = LatentTensor::new(g, payload.to_vec()).map_err(|e| refuse("bad_payload", e.to_string()))?;
            let step = StepInfo {
                index: t,
                train_step: header.train_step.unwrap_or(t),
                alpha_bar,
            };
            let eps = backend.predict_noise(&z, &step, cond_ref).map_err(backend_err)?;
            if eps.geometry() != g {
                return Err(refuse("backend_error", "backend returned wrong dims"));
            }
            let mut out = Header::new("noise");
            out.t = Some(t);
            out.dims = Some(geometry_dims(g));
            out.cond_ref = Some(cond_ref.to_string());
            Ok(Reply::Send(out, eps.into_data()))
        }
        "encode" => {
            needs_hello(session)?;
            let g = payload_geometry(header, payload)?;
            if g.channels != 3 {
                return Err(refuse("bad_payload", "encode takes a 3-plane image"));
            }
            let img = planes_image(payload, g.width, g.height);
            let z = backend.encode(&img).map_err(backend_err)?;
            let mut out = Header::new("latent");
            out.dims = Some(geometry_dims(z.geometry()));
            Ok(Reply::Send(out, z.into_data()))
        }
        "decode" => {
            needs_hello(session)?;
            let g = payload_geometry(header, payload)?;
            let z = LatentTensor::new(g, payload.to_vec()).map_err(|e| refuse("bad_payload", e.to_string()))?;
            let img = backend.decode(&z).map_err(backend_err)?;
            let (w, h) = img.dims();
            let mut out = Header::new("image");
            out.dims = Some(vec![3, h, w]);
            Ok(Reply::Send(out, image_planes(&img)))
        }
        "shutdown" => Ok(Reply::Bye),
        other => Err(refuse("bad_op", format!("unknown op {other:?}"))),
    }
}

fn write_refusal(w: &mut impl Write, r: Refusal) -> Result<()> {
    log::warn!("bridge request refused: {} {}", r.code, r.message);
    let mut h = Header::new("error");
    h.code = Some(r.code.to_string());
    h.message = Some(r.message);
    write_message(w, h, &[])
}

/// Serves requests until `shutdown` or end of input.
pub fn serve<R: BufRead, W: Write>(mut reader: R, mut writer: W, backend: &mut dyn BridgeBackend) -> Result<()> {
    let mut session = None;
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(transport)? == 0 {
            return Ok(());
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let header: Header = match serde_json::from_str(text) {
            Ok(h) => h,
            Err(e) => {
                write_refusal(&mut writer, refuse("bad_payload", format!("unreadable header: {e}")))?;
                continue;
            }
        };
        let mut bytes = vec![0u8; header.byte_length];
        reader.read_exact(&mut bytes).map_err(transport)?;
        if !header.byte_length.is_multiple_of(4) {
            write_refusal(
                &mut writer,
                refuse("bad_payload", "byte_length must be a multiple of 4"),
            )?;
            continue;
        }
        let payload = le_bytes_to_floats(&bytes);
        match handle(&header, &payload, backend, &mut session) {
            Ok(Reply::Send(h, data)) => write_message(&mut writer, h, &data)?,
            Ok(Reply::Bye) => {
                write_message(&mut writer, Header::new("bye"), &[])?;
                return Ok(());
            }
            Err(r) => write_refusal(&mut writer, r)?,
        }
    }
}

/// Reference backend: encoding resamples the image onto the latent grid,
/// decoding is the identity at latent resolution, and the noise prediction is
/// the exact one for a data distribution centred on the encoded infused image.
#[derive(Debug, Clone)]
pub struct ToyBridge {
    geometry: Option<LatentGeometry>,
    variance: f64,
    conditions: HashMap<String, (Conditioning, ToyDenoiser)>,
}

pub const TOY_BRIDGE_ID: &str = "toy-gaussian";

impl ToyBridge {
    pub fn new(variance: f64) -> Self {
        Self {
            geometry: None,
            variance,
            conditions: HashMap::new(),
        }
    }

    fn geometry(&self) -> Result<LatentGeometry> {
        self.geometry.ok_or_else(|| Error::Transport("no session".into()))
    }
}

impl BridgeBackend for ToyBridge {
    fn hello(&mut self, geometry: LatentGeometry, _fusion: Fusion) -> Result<String> {
        if geometry.channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "toy backbone encodes RGB into 3 channels, asked for {}",
                geometry.channels
            )));
        }
        self.geometry = Some(geometry);
        self.conditions.clear();
        Ok(TOY_BRIDGE_ID.into())
    }

    fn set_condition(&mut self, cond: Conditioning) -> Result<()> {
        let mode = image_to_latent(&cond.infused, self.geometry()?);
        let toy = ToyDenoiser::new(vec![(mode, 1.0)], self.variance)?;
        self.conditions.insert(cond.id.clone(), (cond, toy));
        Ok(())
    }

    fn predict_noise(&mut self, z: &LatentTensor, step: &StepInfo, cond_ref: &str) -> Result<LatentTensor> {
        let (cond, toy) = self
            .conditions
            .get_mut(cond_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition {cond_ref:?}")))?;
        toy.predict_noise(z, step, cond)
    }

    fn encode(&mut self, img: &ImagePlane) -> Result<LatentTensor> {
        Ok(image_to_latent(img, self.geometry()?))
    }

    fn decode(&mut self, z: &LatentTensor) -> Result<ImagePlane> {
        if z.channels() != 3 {
            return Err(Error::Dimension(format!(
                "toy decode needs 3 channels, got {}",
                z.channels()
            )));
        }
        Ok(latent_to_image(z))
    }
}

/// Client end of the protocol. Owns the child process when spawned.
pub struct BridgeClient<R: BufRead, W: Write> {
    reader: R,
    writer: W,
    geometry: LatentGeometry,
    backbone_id: String,
    current_condition: Option<String>,
    child: Option<Child>,
}

pub type BridgeProcess = BridgeClient<BufReader<ChildStdout>, BufWriter<ChildStdin>>;

impl<R: BufRead, W: Write> BridgeClient<R, W> {
    /// Performs the handshake over an established transport.
    pub fn connect(reader: R, writer: W, geometry: LatentGeometry, fusion: Fusion) -> Result<Self> {
        let mut client = Self {
            reader,
            writer,
            geometry,
            backbone_id: String::new(),
            current_condition: None,
            child: None,
        };
        let mut hello = Header::new("hello");
        hello.version = Some(PROTOCOL_VERSION.into());
        hello.latent_geometry = Some([geometry.channels, geometry.height, geometry.width]);
        hello.fusion = Some(fusion);
        let ack = client.request(hello, &[], "hello-ack")?;
        if ack.header.version.as_deref() != Some(PROTOCOL_VERSION) {
            return Err(Error::Transport(format!(
                "bridge speaks protocol {:?}, expected {PROTOCOL_VERSION}",
                ack.header.version
            )));
        }
        let want = [geometry.channels, geometry.height, geometry.width];
        if ack.header.latent_geometry != Some(want) {
            return Err(Error::Transport(format!(
                "bridge acknowledged geometry {:?}, requested {want:?}",
                ack.header.latent_geometry
            )));
        }
        client.backbone_id = ack.header.backbone_id.unwrap_or_default();
        Ok(client)
    }

    pub fn backbone_id(&self) -> &str {
        &self.backbone_id
    }

    /// Sends one request and returns the response, which must carry
    /// `expect_op`.
    pub fn request(&mut self, header: Header, payload: &[f32], expect_op: &str) -> Result<Message> {
        let op = header.op.clone();
        write_message(&mut self.writer, header, payload)?;
        let reply = read_message(&mut self.reader)?
            .ok_or_else(|| Error::Transport(format!("bridge closed the stream during {op}")))?;
        if reply.header.op == "error" {
            return Err(Error::Transport(format!(
                "bridge refused {op}: {} {}",
                reply.header.code.as_deref().unwrap_or("?"),
                reply.header.message.as_deref().unwrap_or("")
            )));
        }
        if reply.header.op != expect_op {
            return Err(Error::Transport(format!(
                "expected {expect_op} in reply to {op}, got {}",
                reply.header.op
            )));
        }
        Ok(reply)
    }

    pub fn set_condition(&mut self, cond: &Conditioning) -> Result<()> {
        let (w, h) = cond.infused.dims();
        let mut header = Header::new("set_condition");
        header.dims = Some(vec![CONDITION_CHANNELS, h, w]);
        header.cond_ref = Some(cond.id.clone());
        header.prompt = Some(cond.prompt.clone());
        self.request(header, &condition_payload(cond), "ack")?;
        self.current_condition = Some(cond.id.clone());
        Ok(())
    }

    pub fn encode(&mut self, img: &ImagePlane) -> Result<LatentTensor> {
        let (w, h) = img.dims();
        let mut header = Header::new("encode");
        header.dims = Some(vec![3, h, w]);
        let reply = self.request(header, &image_planes(img), "latent")?;
        reply_tensor(reply)
    }

    pub fn decode(&mut self, z: &LatentTensor) -> Result<ImagePlane> {
        let mut header = Header::new("decode");
        header.dims = Some(geometry_dims(z.geometry()));
        let reply = self.request(header, z.data(), "image")?;
        match reply.header.dims.as_deref() {
            Some(&[3, h, w]) if reply.payload.len() == 3 * h * w => Ok(planes_image(&reply.payload, w, h)),
            other => Err(Error::Transport(format!("decoded image has dims {other:?}"))),
        }
    }

    pub fn shutdown(&mut self) -> Result<()> {
        self.request(Header::new("shutdown"), &[], "bye")?;
        if let Some(mut child) = self.child.take() {
            child.wait().map_err(transport)?;
        }
        Ok(())
    }
}

fn reply_tensor(reply: Message) -> Result<LatentTensor> {
    let g = reply
        .header
        .dims
        .as_deref()
        .and_then(dims_geometry)
        .ok_or_else(|| Error::Transport("reply without rank-3 dims".into()))?;
    if g.len() != reply.payload.len() {
        return Err(Error::Transport(format!(
            "reply dims {g:?} disagree with {} payload values",
            reply.payload.len()
        )));
    }
    LatentTensor::new(g, reply.payload).map_err(transport)
}

impl BridgeProcess {
    /// Spawns `command` (split on whitespace) and performs the handshake.
    pub fn spawn(command: &str, geometry: LatentGeometry, fusion: Fusion) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Validation("empty bridge command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start bridge {program:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::connect(BufReader::new(stdout), BufWriter::new(stdin), geometry, fusion) {
            Ok(mut client) => {
                client.child = Some(child);
                Ok(client)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    /// Spawns the command named by `TRYW_BRIDGE_CMD`.
    pub fn from_env(geometry: LatentGeometry, fusion: Fusion) -> Result<Self> {
        let cmd =
            std::env::var(BRIDGE_CMD_ENV).map_err(|_| Error::Validation(format!("{BRIDGE_CMD_ENV} is not set")))?;
        Self::spawn(&cmd, geometry, fusion)
    }
}

impl<R: BufRead, W: Write> Denoiser for BridgeClient<R, W> {
    fn geometry(&self) -> LatentGeometry {
        self.geometry
    }

    fn predict_noise(&mut self, z: &LatentTensor, step: &StepInfo, cond: &Conditioning) -> Result<LatentTensor> {
        if self.current_condition.as_deref() != Some(cond.id.as_str()) {
            self.set_condition(cond)?;
        }
        let mut header = Header::new("predict_noise");
        header.t = Some(step.index);
        header.train_step = Some(step.train_step);
        header.alpha_bar = Some(step.alpha_bar);
        header.dims = Some(geometry_dims(z.geometry()));
        header.cond_ref = Some(cond.id.clone());
        let reply = self.request(header, z.data(), "noise")?;
        let eps = reply_tensor(reply)?;
        if eps.geometry() != z.geometry() {
            return Err(Error::Transport(format!(
                "noise dims {:?} do not echo request {:?}",
                eps.geometry(),
                z.geometry()
            )));
        }
        Ok(eps)
    }
}

impl<R: BufRead, W: Write> Drop for BridgeClient<R, W> {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = write_message(&mut self.writer, Header::new("shutdown"), &[]);
            let _ = child.wait();
        }
    }
}
