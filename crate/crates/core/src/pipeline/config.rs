use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GarmentKind, LabelTable, DEFAULT_BOX_MARGIN, DEFAULT_UV_TOLERANCE};
use crate::ingest::{IuvPaths, LatentGeometry, DEFAULT_MASK_THRESHOLD};
use crate::ppg::{GuidanceMode, PcaOrientation, ScheduleConfig, DEFAULT_CODEBOOK_SIZE};
use crate::proxy::DEFAULT_INPAINT_ITERATIONS;

pub const TOY_LATENT: LatentGeometry = LatentGeometry {
    channels: 3,
    height: 64,
    width: 48,
};
pub const DEFAULT_TOY_VARIANCE: f64 = 0.05;
pub const DEFAULT_COMPONENTS: usize = 3;
pub const DEFAULT_LOW_FREQUENCY_CUTOFF: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneMode {
    #[default]
    Toy,
    BridgeUnet,
    BridgeDit,
}

impl FromStr for BackboneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "bridge-unet" => Ok(Self::BridgeUnet),
            "bridge-dit" => Ok(Self::BridgeDit),
            _ => Err(Error::Validation(format!(
                "unknown mode {s:?}; expected toy, bridge-unet or bridge-dit"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    #[default]
    Principal,
    Full,
    Lowfreq,
    None,
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "principal" => Ok(Self::Principal),
            "full" => Ok(Self::Full),
            "lowfreq" => Ok(Self::Lowfreq),
            "none" => Ok(Self::None),
            _ => Err(Error::Validation(format!(
                "unknown guidance {s:?}; expected principal, full, lowfreq or none"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IuvFiles {
    pub index: PathBuf,
    pub u: PathBuf,
    pub v: PathBuf,
}

impl IuvFiles {
    pub fn paths(&self) -> IuvPaths {
        IuvPaths {
            index: self.index.clone(),
            u: self.u.clone(),
            v: self.v.clone(),
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub person: PathBuf,
    pub person_keypoints: PathBuf,
    pub person_parsing: PathBuf,
    /// Garment currently worn by the person.
    pub source_garment_mask: PathBuf,
    #[serde(default)]
    pub dense_body_mask: Option<PathBuf>,
    #[serde(default)]
    pub agnostic_mask: Option<PathBuf>,
    #[serde(default)]
    pub person_iuv: Option<IuvFiles>,

    /// Image carrying the target garment. With several files in
    /// `garments`, they are concatenated side by side at the person size and
    /// the garment keypoints and parsing must describe that composite.
    #[serde(default)]
    pub garment: Option<PathBuf>,
    #[serde(default)]
    pub garments: Vec<PathBuf>,
    pub garment_keypoints: PathBuf,
    pub garment_parsing: PathBuf,
    pub garment_mask: Option<PathBuf>,
    #[serde(default)]
    pub garment_masks: Vec<PathBuf>,
    #[serde(default)]
    pub garment_iuv: Option<IuvFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub mode: BackboneMode,
    pub guidance: GuidanceKind,
    pub components: usize,
    pub orientation: PcaOrientation,
    pub cutoff: f64,
    pub steps: usize,
    pub codebook_size: usize,
    pub seed: u64,
    pub eta: f64,
    /// Latent `[channels, height, width]` for bridge modes; toy mode always
    /// uses 3 x 64 x 48.
    pub latent: Option<[usize; 3]>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Toy,
            guidance: GuidanceKind::Principal,
            components: DEFAULT_COMPONENTS,
            orientation: PcaOrientation::ChannelFeatures,
            cutoff: DEFAULT_LOW_FREQUENCY_CUTOFF,
            steps: ScheduleConfig::default().steps,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            seed: 0,
            eta: ScheduleConfig::default().eta,
            latent: None,
        }
    }
}

impl Sampling {
    pub fn guidance_mode(&self) -> GuidanceMode {
        match self.guidance {
            GuidanceKind::Principal => GuidanceMode::Principal {
                components: self.components,
                orientation: self.orientation,
            },
            GuidanceKind::Full => GuidanceMode::FullLatent,
            GuidanceKind::Lowfreq => GuidanceMode::LowFrequency { cutoff: self.cutoff },
            GuidanceKind::None => GuidanceMode::None,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps,
            eta: self.eta,
            ..Default::default()
        }
    }
}

/// Data distribution of the toy denoiser. Without `modes` it is centred on
/// the encoded garment-infused person image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub modes: Vec<PathBuf>,
    pub weights: Vec<f64>,
    pub variance: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            modes: Vec::new(),
            weights: Vec::new(),
            variance: DEFAULT_TOY_VARIANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySettings {
    pub box_margin: f64,
    pub uv_tolerance: f32,
    pub mask_threshold: f32,
    pub inpaint_iterations: usize,
}

impl Default for GeometrySettings {
    fn default() -> Self {
        Self {
            box_margin: DEFAULT_BOX_MARGIN,
            uv_tolerance: DEFAULT_UV_TOLERANCE,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            inpaint_iterations: DEFAULT_INPAINT_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub category: GarmentKind,
    #[serde(default)]
    pub prompt: String,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub inputs: Inputs,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub toy: ToySettings,
    #[serde(default)]
    pub geometry: GeometrySettings,
    #[serde(default)]
    pub labels: LabelTable,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl JobConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_iuv = |f: &mut Option<IuvFiles>| {
            if let Some(f) = f {
                for p in [&mut f.index, &mut f.u, &mut f.v] {
                    if p.is_relative() {
                        *p = base.join(&*p);
                    }
                }
            }
        };
        let i = &mut self.inputs;
        for p in [
            &mut i.person,
            &mut i.person_keypoints,
            &mut i.person_parsing,
            &mut i.source_garment_mask,
            &mut i.garment_keypoints,
            &mut i.garment_parsing,
        ] {
            fix(p);
        }
        for p in [
            &mut i.dense_body_mask,
            &mut i.agnostic_mask,
            &mut i.garment,
            &mut i.garment_mask,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        i.garments.iter_mut().for_each(fix);
        i.garment_masks.iter_mut().for_each(fix);
        fix_iuv(&mut i.person_iuv);
        fix_iuv(&mut i.garment_iuv);
        self.toy.modes.iter_mut().for_each(fix);
        fix(&mut self.out);
    }

    /// Garment image files in concatenation order.
    pub fn garment_files(&self) -> Vec<&Path> {
        let i = &self.inputs;
        i.garment.iter().chain(&i.garments).map(PathBuf::as_path).collect()
    }

    pub fn garment_mask_files(&self) -> Vec<&Path> {
        let i = &self.inputs;
        i.garment_mask
            .iter()
            .chain(&i.garment_masks)
            .map(PathBuf::as_path)
            .collect()
    }

    /// Every input file the job reads.
    pub fn input_files(&self) -> Vec<&Path> {
        let i = &self.inputs;
        let mut files: Vec<&Path> = vec![
            &i.person,
            &i.person_keypoints,
            &i.person_parsing,
            &i.source_garment_mask,
            &i.garment_keypoints,
            &i.garment_parsing,
        ]
        .into_iter()
        .map(PathBuf::as_path)
        .collect();
        files.extend(i.dense_body_mask.as_deref());
        files.extend(i.agnostic_mask.as_deref());
        files.extend(self.garment_files());
        files.extend(self.garment_mask_files());
        for iuv in [&i.person_iuv, &i.garment_iuv].into_iter().flatten() {
            files.extend([iuv.index.as_path(), iuv.u.as_path(), iuv.v.as_path()]);
        }
        files.extend(self.toy.modes.iter().map(PathBuf::as_path));
        files
    }

    pub fn latent_geometry(&self, person_width: usize, person_height: usize) -> LatentGeometry {
        match (self.sampling.mode, self.sampling.latent) {
            (BackboneMode::Toy, _) => TOY_LATENT,
            (_, Some([c, h, w])) => LatentGeometry::new(c, h, w),
            (_, None) => LatentGeometry::new(4, (person_height / 8).max(1), (person_width / 8).max(1)),
        }
    }

    /// Checks ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let s = &self.sampling;
        if s.steps == 0 {
            return Err(Error::Validation("sampling.steps must be at least 1".into()));
        }
        if s.codebook_size == 0 {
            return Err(Error::Validation("sampling.codebook_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&s.eta) {
            return Err(Error::Validation(format!(
                "sampling.eta must be in [0, 1], got {}",
                s.eta
            )));
        }
        let channels = match s.mode {
            BackboneMode::Toy => TOY_LATENT.channels,
            _ => s.latent.map_or(4, |l| l[0]),
        };
        s.guidance_mode()
            .validate(channels)
            .map_err(|e| Error::Validation(e.to_string()))?;
        if self.garment_files().is_empty() {
            return Err(Error::Validation(
                "inputs.garment or inputs.garments is required".into(),
            ));
        }
        if self.garment_mask_files().len() != self.garment_files().len() {
            return Err(Error::Validation(format!(
                "{} garment images but {} garment masks",
                self.garment_files().len(),
                self.garment_mask_files().len()
            )));
        }
        if !self.toy.weights.is_empty() && self.toy.weights.len() != self.toy.modes.len() {
            return Err(Error::Validation("toy.weights must match toy.modes".into()));
        }
        if self.inputs.person_iuv.is_some() != self.inputs.garment_iuv.is_some() {
            log::warn!("only one IUV map given; garment mask projection will use the warped mask");
        }
        for file in self.input_files() {
            if !file.is_file() {
                return Err(Error::Validation(format!("missing input file {}", file.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
category = "upper"

[inputs]
person = "p.png"
person_keypoints = "p.json"
person_parsing = "p_parse.png"
source_garment_mask = "ms.png"
garment = "g.png"
garment_keypoints = "g.json"
garment_parsing = "g_parse.png"
garment_mask = "mo.png"
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = JobConfig::from_toml(MINIMAL, Path::new("job.toml")).unwrap();
        assert_eq!(cfg.sampling.steps, 50);
        assert_eq!(cfg.sampling.codebook_size, 64);
        assert_eq!(cfg.sampling.components, 3);
        assert_eq!(cfg.sampling.mode, BackboneMode::Toy);
        assert_eq!(cfg.labels, LabelTable::default());
        assert_eq!(cfg.latent_geometry(480, 640), TOY_LATENT);
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut cfg = JobConfig::from_toml(MINIMAL, Path::new("job.toml")).unwrap();
        cfg.resolve_paths(Path::new("/data/job"));
        assert_eq!(cfg.inputs.person, Path::new("/data/job/p.png"));
        assert_eq!(cfg.out, Path::new("/data/job/out"));
    }

    #[test]
    fn missing_file_is_named() {
        let mut cfg = JobConfig::from_toml(MINIMAL, Path::new("job.toml")).unwrap();
        cfg.resolve_paths(Path::new("/nonexistent"));
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("/nonexistent/p.png")));
    }

    #[test]
    fn out_of_range_settings_are_rejected() {
        let mut cfg = JobConfig::from_toml(MINIMAL, Path::new("job.toml")).unwrap();
        cfg.sampling.components = 4;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
        cfg.sampling.components = 3;
        cfg.sampling.steps = 0;
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn unknown_keys_are_format_errors() {
        let text = format!("{MINIMAL}\n[sampling]\nstepz = 3\n");
        assert!(matches!(
            JobConfig::from_toml(&text, Path::new("job.toml")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn bridge_latent_defaults_to_eighth_resolution() {
        let mut cfg = JobConfig::from_toml(MINIMAL, Path::new("job.toml")).unwrap();
        cfg.sampling.mode = BackboneMode::BridgeUnet;
        assert_eq!(cfg.latent_geometry(384, 512), LatentGeometry::new(4, 64, 48));
    }
}
