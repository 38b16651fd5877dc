use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::compose::{concat_garments, concat_masks, infuse_garment};
use super::config::{BackboneMode, JobConfig};
use crate::bridge::{BridgeProcess, Fusion, BRIDGE_CMD_ENV};
use crate::error::{Error, Result};
use crate::geometry::{
    group_keypoints_to_parts, morph_garment, transfer_mask_via_iuv, GarmentCategory, GarmentSource, MorphResult,
    PersonTarget,
};
use crate::ingest::{
    load_image, load_iuv, load_keypoints, load_mask, load_parsing, load_tensor, save_image, save_mask, save_tensor,
    ImagePlane, IuvPlane, KeypointSet, LatentGeometry, LatentTensor, MaskPlane, ParsingPlane,
};
use crate::ppg::{
    sample, stream_noise, Conditioning, Denoiser, NoiseSchedule, NoiseStream, SamplerContext, ToyDenoiser,
};
use crate::proxy::{build_proxy, derive_agnostic_mask, estimate_garment_color, estimate_skin_color, ProxyRecipe};
use crate::resample::{image_to_latent, latent_to_image};

pub const REPORT_FILE: &str = "report.json";

/// Stage names in execution order.
pub const STAGES: [&str; 7] = ["ingest", "morph", "infuse", "proxy", "encode", "sample", "decode"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    /// File name inside the output directory.
    pub file: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub skipped: bool,
    pub seconds: f64,
    pub warnings: Vec<String>,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub input_fingerprint: String,
    pub mode: BackboneMode,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl StageReport {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == name)
    }

    /// `(artifact name, sha256)` in emission order.
    pub fn artifact_hashes(&self) -> Vec<(String, String)> {
        self.stages
            .iter()
            .flat_map(|s| s.artifacts.iter().map(|a| (a.name.clone(), a.sha256.clone())))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Reuse stages whose artifacts from a previous run with the same inputs
    /// are still present and unchanged.
    pub resume: bool,
    /// Last stage to run; `None` runs the whole job.
    pub stop_after: Option<&'static str>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn input_fingerprint(cfg: &JobConfig) -> Result<String> {
    let mut h = Sha256::new();
    let mut settings = cfg.clone();
    settings.out = PathBuf::new();
    h.update(serde_json::to_vec(&settings).expect("config serializes"));
    for file in cfg.input_files() {
        h.update(file.to_string_lossy().as_bytes());
        h.update(fs::read(file).map_err(|e| Error::io(file, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

struct Runner<'a> {
    out: &'a Path,
    previous: Option<StageReport>,
    report: StageReport,
}

impl Runner<'_> {
    fn reusable(&self, name: &str) -> bool {
        let Some(prev) = self.previous.as_ref().and_then(|p| p.stage(name)) else {
            return false;
        };
        !prev.artifacts.is_empty()
            && prev
                .artifacts
                .iter()
                .all(|a| sha256_file(&self.out.join(&a.file)).is_ok_and(|h| h == a.sha256))
    }

    /// Runs `compute` (which writes `files` into the output directory) unless
    /// a previous run left matching artifacts, then reads the artifacts back
    /// with `load`.
    fn stage<T>(
        &mut self,
        name: &'static str,
        files: &[(&str, &str)],
        compute: impl FnOnce(&Path) -> Result<Vec<String>>,
        load: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let skipped = self.reusable(name);
        let warnings = if skipped {
            log::info!("stage {name}: artifacts unchanged, skipped");
            self.previous
                .as_ref()
                .and_then(|p| p.stage(name))
                .map(|s| s.warnings.clone())
                .unwrap_or_default()
        } else {
            // later stages depend on this one's outputs
            self.previous = None;
            log::info!("stage {name}");
            compute(self.out).map_err(|e| e.in_stage(name))?
        };
        let mut artifacts = Vec::new();
        for (artifact, file) in files {
            artifacts.push(Artifact {
                name: artifact.to_string(),
                file: PathBuf::from(file),
                sha256: sha256_file(&self.out.join(file)).map_err(|e| e.in_stage(name))?,
            });
        }
        let value = load(self.out).map_err(|e| e.in_stage(name))?;
        self.report.stages.push(StageRecord {
            stage: name.to_string(),
            skipped,
            seconds: start.elapsed().as_secs_f64(),
            warnings,
            artifacts,
        });
        Ok(value)
    }
}

struct Loaded {
    person: ImagePlane,
    person_keypoints: KeypointSet,
    person_parsing: ParsingPlane,
    source_garment: MaskPlane,
    dense_body: MaskPlane,
    agnostic: Option<MaskPlane>,
    person_iuv: Option<IuvPlane>,
    garment: ImagePlane,
    garment_keypoints: KeypointSet,
    garment_parsing: ParsingPlane,
    garment_mask: MaskPlane,
    garment_iuv: Option<IuvPlane>,
}

fn load_inputs(cfg: &JobConfig) -> Result<(Loaded, Vec<String>)> {
    let i = &cfg.inputs;
    let threshold = cfg.geometry.mask_threshold;
    let vocab = &cfg.labels.vocabulary;
    let mut warnings = Vec::new();
    let person = load_image(&i.person)?.to_rgb();
    let (w, h) = person.dims();
    let person_parsing = load_parsing(&i.person_parsing, vocab)?;
    let person_iuv = i.person_iuv.as_ref().map(|f| load_iuv(&f.paths())).transpose()?;
    let dense_body = match (&i.dense_body_mask, &person_iuv) {
        (Some(p), _) => load_mask(p, threshold)?,
        (None, Some(iuv)) => iuv.foreground(),
        (None, None) => {
            let labels: Vec<u8> = vocab.iter().copied().filter(|&l| l != 0).collect();
            person_parsing.mask_of(&labels)
        }
    };
    let garments = cfg.garment_files().iter().map(load_image).collect::<Result<Vec<_>>>()?;
    let masks = cfg
        .garment_mask_files()
        .iter()
        .map(|p| load_mask(p, threshold))
        .collect::<Result<Vec<_>>>()?;
    let (garment, garment_mask) = if garments.len() == 1 {
        (garments[0].to_rgb(), masks[0].clone())
    } else {
        warnings.push(format!("{} garments concatenated at {w}x{h}", garments.len()));
        (concat_garments(&garments, w, h)?, concat_masks(&masks, w, h)?)
    };
    let mut person_keypoints = load_keypoints(&i.person_keypoints)?;
    person_keypoints.restrict_to_bounds(w, h);
    let mut garment_keypoints = load_keypoints(&i.garment_keypoints)?;
    garment_keypoints.restrict_to_bounds(garment.width(), garment.height());
    let loaded = Loaded {
        person_keypoints,
        person_parsing,
        source_garment: load_mask(&i.source_garment_mask, threshold)?,
        dense_body,
        agnostic: i.agnostic_mask.as_ref().map(|p| load_mask(p, threshold)).transpose()?,
        person_iuv,
        garment_keypoints,
        garment_parsing: load_parsing(&i.garment_parsing, vocab)?,
        garment_iuv: i.garment_iuv.as_ref().map(|f| load_iuv(&f.paths())).transpose()?,
        person,
        garment,
        garment_mask,
    };
    for (name, dims) in [
        ("person parsing", loaded.person_parsing.dims()),
        ("source garment mask", loaded.source_garment.dims()),
        ("dense body mask", loaded.dense_body.dims()),
    ] {
        if dims != (w, h) {
            return Err(Error::Dimension(format!(
                "{name} is {dims:?}, person image is {:?}",
                (w, h)
            )));
        }
    }
    Ok((loaded, warnings))
}

enum Backend {
    Toy,
    Bridge(Box<BridgeProcess>),
}

impl Backend {
    fn connect(cfg: &JobConfig, geometry: LatentGeometry) -> Result<Self> {
        let fusion = match cfg.sampling.mode {
            BackboneMode::Toy => return Ok(Backend::Toy),
            BackboneMode::BridgeUnet => Fusion::Cbs,
            BackboneMode::BridgeDit => Fusion::CbsDit,
        };
        Ok(Backend::Bridge(Box::new(BridgeProcess::from_env(geometry, fusion)?)))
    }

    fn encode(&mut self, img: &ImagePlane, geometry: LatentGeometry) -> Result<LatentTensor> {
        match self {
            Backend::Toy => Ok(image_to_latent(img, geometry)),
            Backend::Bridge(b) => b.encode(img),
        }
    }

    fn decode(&mut self, z: &LatentTensor) -> Result<ImagePlane> {
        match self {
            Backend::Toy => Ok(latent_to_image(z)),
            Backend::Bridge(b) => b.decode(z),
        }
    }
}

/// Lazily started backend, so fully resumed runs never spawn a bridge.
struct LazyBackend<'a> {
    cfg: &'a JobConfig,
    geometry: LatentGeometry,
    backend: Option<Backend>,
}

impl LazyBackend<'_> {
    fn get(&mut self) -> Result<&mut Backend> {
        if self.backend.is_none() {
            self.backend = Some(Backend::connect(self.cfg, self.geometry)?);
        }
        Ok(self.backend.as_mut().expect("just connected"))
    }
}

fn toy_denoiser(cfg: &JobConfig, infused: &ImagePlane, geometry: LatentGeometry) -> Result<ToyDenoiser> {
    let modes = if cfg.toy.modes.is_empty() {
        vec![(image_to_latent(infused, geometry), 1.0)]
    } else {
        cfg.toy
            .modes
            .iter()
            .enumerate()
            .map(|(k, p)| Ok((load_tensor(p)?, cfg.toy.weights.get(k).copied().unwrap_or(1.0))))
            .collect::<Result<Vec<_>>>()?
    };
    if modes.iter().any(|(m, _)| m.geometry() != geometry) {
        return Err(Error::Dimension(format!(
            "toy modes must have latent geometry {geometry:?}"
        )));
    }
    ToyDenoiser::new(modes, cfg.toy.variance)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Runs the job end to end and writes `report.json` into the output
/// directory. Stage failures come back as [`Error::Stage`].
pub fn run_tryon(cfg: &JobConfig, opts: RunOptions) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.sampling.mode != BackboneMode::Toy && std::env::var_os(BRIDGE_CMD_ENV).is_none() {
        return Err(Error::Validation(format!(
            "mode {:?} needs {BRIDGE_CMD_ENV} to name the bridge command",
            cfg.sampling.mode
        )));
    }
    let fingerprint = input_fingerprint(cfg)?;
    let out = cfg.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report_path = out.join(REPORT_FILE);
    let previous = if opts.resume && report_path.is_file() {
        StageReport::load(&report_path)
            .ok()
            .filter(|r| r.input_fingerprint == fingerprint)
    } else {
        None
    };
    let mut runner = Runner {
        out,
        previous,
        report: StageReport {
            input_fingerprint: fingerprint,
            mode: cfg.sampling.mode,
            seed: cfg.sampling.seed,
            stages: Vec::new(),
        },
    };
    let result = run_stages(cfg, opts, &mut runner);
    runner.report.save(&report_path)?;
    result.map(|()| runner.report)
}

fn run_stages(cfg: &JobConfig, opts: RunOptions, runner: &mut Runner<'_>) -> Result<()> {
    let stop = |name: &str| opts.stop_after == Some(name);
    let start = Instant::now();
    let (inputs, ingest_warnings) = load_inputs(cfg).map_err(|e| e.in_stage("ingest"))?;
    runner.report.stages.push(StageRecord {
        stage: "ingest".into(),
        skipped: false,
        seconds: start.elapsed().as_secs_f64(),
        warnings: ingest_warnings,
        artifacts: Vec::new(),
    });
    if stop("ingest") {
        return Ok(());
    }
    let (w, h) = inputs.person.dims();
    let category = GarmentCategory::new(cfg.category);
    let table = &cfg.labels;
    let geometry = cfg.latent_geometry(w, h);
    let mut backend = LazyBackend {
        cfg,
        geometry,
        backend: None,
    };

    let morph = runner.stage(
        "morph",
        &[("I_w", "warped.png"), ("M_w", "warped_mask.png")],
        |dir| {
            let m = morph_garment(
                &GarmentSource {
                    image: &inputs.garment,
                    keypoints: &inputs.garment_keypoints,
                    parsing: &inputs.garment_parsing,
                    garment_mask: &inputs.garment_mask,
                },
                &PersonTarget {
                    keypoints: &inputs.person_keypoints,
                    parsing: &inputs.person_parsing,
                },
                &category,
                cfg.geometry.box_margin,
                table,
            )?;
            save_image(&m.morph.warped, dir.join("warped.png"))?;
            save_mask(&m.morph.warped_mask, dir.join("warped_mask.png"))?;
            Ok(m.morph.warnings)
        },
        |dir| {
            Ok(MorphResult {
                warped: load_image(dir.join("warped.png"))?,
                warped_mask: load_mask(dir.join("warped_mask.png"), 0.5)?,
                layers: Vec::new(),
                warnings: Vec::new(),
            })
        },
    )?;

    if stop("morph") {
        return Ok(());
    }

    let infused = runner.stage(
        "infuse",
        &[("I_p'", "infused.png")],
        |dir| {
            save_image(&infuse_garment(&inputs.person, &morph)?, dir.join("infused.png"))?;
            Ok(Vec::new())
        },
        |dir| load_image(dir.join("infused.png")),
    )?;

    if stop("infuse") {
        return Ok(());
    }

    let (proxy, agnostic) = runner.stage(
        "proxy",
        &[
            ("I_proxy", "proxy.png"),
            ("M_p", "agnostic_mask.png"),
            ("M_o'", "projected_mask.png"),
        ],
        |dir| {
            let mut warnings = Vec::new();
            let projected = match (&inputs.garment_iuv, &inputs.person_iuv) {
                (Some(src), Some(dst)) if src.dims() == inputs.garment_mask.dims() => {
                    transfer_mask_via_iuv(src, &inputs.garment_mask, dst, cfg.geometry.uv_tolerance)?
                }
                _ => {
                    warnings.push("no usable IUV pair; projected garment mask is the warped mask".into());
                    morph.warped_mask.clone()
                }
            };
            let agnostic = match &inputs.agnostic {
                Some(m) => m.clone(),
                None => {
                    let boxes = group_keypoints_to_parts(&inputs.person_keypoints, &category, cfg.geometry.box_margin);
                    derive_agnostic_mask(&inputs.source_garment, &boxes)
                }
            };
            let skin = estimate_skin_color(&inputs.person, &inputs.person_parsing, &inputs.source_garment, table)?;
            if skin.fallback {
                warnings.push("no exposed skin; fallback skin color used".into());
            }
            let cloth = estimate_garment_color(&inputs.garment, &inputs.garment_mask)?;
            if cloth.fallback {
                warnings.push("empty garment mask; fallback garment color used".into());
            }
            let recipe = ProxyRecipe {
                source_garment: inputs.source_garment.clone(),
                dense_body: inputs.dense_body.clone(),
                agnostic,
                projected_garment: projected,
                morph: morph.warped_mask.clone(),
                skin_color: skin.rgb,
                garment_color: cloth.rgb,
                inpaint_iterations: cfg.geometry.inpaint_iterations,
            };
            let proxy = build_proxy(&inputs.person, &recipe)?;
            warnings.extend(proxy.warnings);
            save_image(&proxy.image, dir.join("proxy.png"))?;
            save_mask(&recipe.agnostic, dir.join("agnostic_mask.png"))?;
            save_mask(&recipe.projected_garment, dir.join("projected_mask.png"))?;
            Ok(warnings)
        },
        |dir| {
            Ok((
                load_image(dir.join("proxy.png"))?,
                load_mask(dir.join("agnostic_mask.png"), 0.5)?,
            ))
        },
    )?;

    if stop("proxy") {
        return Ok(());
    }

    let z_proxy = runner.stage(
        "encode",
        &[("z_proxy", "z_proxy.tryw")],
        |dir| {
            let z = backend.get()?.encode(&proxy, geometry)?;
            if z.geometry() != geometry {
                return Err(Error::Dimension(format!(
                    "encoder returned {:?}, expected {geometry:?}",
                    z.geometry()
                )));
            }
            save_tensor(&z, dir.join("z_proxy.tryw"))?;
            Ok(Vec::new())
        },
        |dir| load_tensor(dir.join("z_proxy.tryw")),
    )?;

    if stop("encode") {
        return Ok(());
    }

    let z0 = runner.stage(
        "sample",
        &[("z_0", "z0.tryw"), ("selections", "selections.json")],
        |dir| {
            let cond = Conditioning {
                id: "job".into(),
                infused: infused.clone(),
                agnostic_mask: agnostic.clone(),
                prompt: cfg.prompt.clone(),
                garment: Some(inputs.garment.clone()),
                cloth_mask: Some(inputs.garment_mask.clone()),
            };
            let schedule = NoiseSchedule::from_config(&cfg.sampling.schedule())?;
            let z_t = stream_noise(cfg.sampling.seed, NoiseStream::InitNoise, 0, geometry);
            let mut toy;
            let denoiser: &mut dyn Denoiser = match backend.get()? {
                Backend::Toy => {
                    toy = toy_denoiser(cfg, &infused, geometry)?;
                    &mut toy
                }
                Backend::Bridge(b) => b.as_mut(),
            };
            let mut ctx = SamplerContext {
                denoiser,
                cond: &cond,
                schedule: &schedule,
                z_proxy: &z_proxy,
                mode: cfg.sampling.guidance_mode(),
                seed: cfg.sampling.seed,
                codebook_size: cfg.sampling.codebook_size,
            };
            let out = sample(&z_t, &mut ctx)?;
            save_tensor(&out.z0, dir.join("z0.tryw"))?;
            write_json(&out.selections, &dir.join("selections.json"))?;
            Ok(Vec::new())
        },
        |dir| {
            let _: Vec<Option<usize>> = read_json(&dir.join("selections.json"))?;
            load_tensor(dir.join("z0.tryw"))
        },
    )?;

    if stop("sample") {
        return Ok(());
    }

    runner.stage(
        "decode",
        &[("result", "result.png")],
        |dir| {
            let img = backend.get()?.decode(&z0)?;
            save_image(&img, dir.join("result.png"))?;
            Ok(Vec::new())
        },
        |_| Ok(()),
    )?;

    if let Some(Backend::Bridge(mut b)) = backend.backend.take() {
        b.shutdown().map_err(|e| e.in_stage("decode"))?;
    }
    Ok(())
}

/// Selected codebook indices recorded by the sample stage.
pub fn read_selections(out: &Path) -> Result<Vec<Option<usize>>> {
    read_json(&out.join("selections.json"))
}
