use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ingest::{
    save_image, save_iuv, save_keypoints, save_mask, save_parsing, ImagePlane, IuvPaths, IuvPlane, Joint, KeypointSet,
    MaskPlane, ParsingPlane,
};

pub const FIXTURE_WIDTH: usize = 48;
pub const FIXTURE_HEIGHT: usize = 64;
pub const FIXTURE_CONFIG: &str = "config.toml";

const SKIN: [f32; 3] = [0.8, 0.6, 0.5];
const SHIRT: [f32; 3] = [0.2, 0.3, 0.7];
const SHORTS: [f32; 3] = [0.3, 0.3, 0.3];
const BACKDROP: [f32; 3] = [0.9, 0.9, 0.9];

type Seg = ((f64, f64), (f64, f64), u8);

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn paint(
    width: usize,
    height: usize,
    limbs: &[Seg],
    torso: (usize, usize, usize, usize),
    head: Option<((f64, f64), f64)>,
) -> ParsingPlane {
    ParsingPlane::from_fn(width, height, |x, y| {
        let p = (x as f64, y as f64);
        if let Some((c, r)) = head {
            if (p.0 - c.0).hypot(p.1 - c.1) <= r {
                return 1;
            }
        }
        let (x0, y0, x1, y1) = torso;
        if (x0..=x1).contains(&x) && (y0..=y1).contains(&y) {
            return 3;
        }
        limbs
            .iter()
            .find(|(a, b, _)| segment_distance(p, *a, *b) <= 2.5)
            .map_or(0, |s| s.2)
    })
}

/// Part index from the parsing labels, u and v normalized within each part's
/// bounding box.
fn iuv_from_parsing(parsing: &ParsingPlane) -> Result<IuvPlane> {
    let (w, h) = parsing.dims();
    let mut bounds = [(usize::MAX, usize::MAX, 0usize, 0usize); 256];
    for y in 0..h {
        for x in 0..w {
            let b = &mut bounds[parsing.get(x, y) as usize];
            *b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
    }
    let mut index = vec![0u8; w * h];
    let mut u = vec![0.0f32; w * h];
    let mut v = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let l = parsing.get(x, y);
            let (x0, y0, x1, y1) = bounds[l as usize];
            let i = y * w + x;
            index[i] = l;
            u[i] = (x - x0) as f32 / (x1 - x0).max(1) as f32;
            v[i] = (y - y0) as f32 / (y1 - y0).max(1) as f32;
        }
    }
    IuvPlane::new(w, h, index, u, v)
}

fn keypoints(points: &[(Joint, f64, f64)]) -> KeypointSet {
    let mut kp = KeypointSet::default();
    for &(j, x, y) in points {
        kp.set(j, x, y, 0.9);
    }
    kp
}

fn person() -> (ImagePlane, ParsingPlane, KeypointSet) {
    use Joint::*;
    let kp = keypoints(&[
        (Nose, 24.0, 8.0),
        (Neck, 24.0, 14.0),
        (RightShoulder, 17.0, 15.0),
        (RightElbow, 13.0, 25.0),
        (RightWrist, 11.0, 34.0),
        (LeftShoulder, 31.0, 15.0),
        (LeftElbow, 35.0, 25.0),
        (LeftWrist, 37.0, 34.0),
        (RightHip, 20.0, 36.0),
        (RightKnee, 20.0, 48.0),
        (RightAnkle, 20.0, 60.0),
        (LeftHip, 28.0, 36.0),
        (LeftKnee, 28.0, 48.0),
        (LeftAnkle, 28.0, 60.0),
        (RightEye, 22.0, 7.0),
        (LeftEye, 26.0, 7.0),
        (RightEar, 20.0, 8.0),
        (LeftEar, 28.0, 8.0),
    ]);
    let limbs = [
        ((31.0, 15.0), (35.0, 25.0), 4),
        ((17.0, 15.0), (13.0, 25.0), 5),
        ((35.0, 25.0), (37.0, 34.0), 6),
        ((13.0, 25.0), (11.0, 34.0), 7),
        ((28.0, 37.0), (28.0, 48.0), 9),
        ((20.0, 37.0), (20.0, 48.0), 10),
        ((28.0, 48.0), (28.0, 60.0), 11),
        ((20.0, 48.0), (20.0, 60.0), 12),
    ];
    let parsing = paint(
        FIXTURE_WIDTH,
        FIXTURE_HEIGHT,
        &limbs,
        (17, 14, 31, 36),
        Some(((24.0, 8.0), 5.0)),
    );
    let image = ImagePlane::from_fn(FIXTURE_WIDTH, FIXTURE_HEIGHT, 3, |x, y, c| {
        let rgb = match parsing.get(x, y) {
            0 => BACKDROP,
            3..=5 => SHIRT,
            9 | 10 if y < 44 => SHORTS,
            _ => SKIN,
        };
        rgb[c]
    });
    (image, parsing, kp)
}

fn garment() -> (ImagePlane, ParsingPlane, KeypointSet) {
    use Joint::*;
    let kp = keypoints(&[
        (Neck, 24.0, 10.0),
        (RightShoulder, 15.0, 11.0),
        (RightElbow, 10.0, 22.0),
        (RightWrist, 8.0, 31.0),
        (LeftShoulder, 33.0, 11.0),
        (LeftElbow, 38.0, 22.0),
        (LeftWrist, 40.0, 31.0),
        (RightHip, 18.0, 40.0),
        (LeftHip, 30.0, 40.0),
    ]);
    let limbs = [((33.0, 11.0), (38.0, 22.0), 4), ((15.0, 11.0), (10.0, 22.0), 5)];
    let parsing = paint(FIXTURE_WIDTH, FIXTURE_HEIGHT, &limbs, (15, 10, 33, 40), None);
    let image = ImagePlane::from_fn(FIXTURE_WIDTH, FIXTURE_HEIGHT, 3, |x, y, c| {
        if parsing.get(x, y) == 0 {
            return 1.0;
        }
        let stripe = if (y / 4) % 2 == 0 { 0.2 } else { 0.5 };
        [0.8, stripe, 0.2][c]
    });
    (image, parsing, kp)
}

fn iuv_paths(dir: &Path, prefix: &str) -> IuvPaths {
    IuvPaths {
        index: dir.join(format!("{prefix}_iuv_i.png")),
        u: dir.join(format!("{prefix}_iuv_u.png")),
        v: dir.join(format!("{prefix}_iuv_v.png")),
    }
}

const CONFIG: &str = r#"category = "upper"
prompt = "a red striped short-sleeved shirt"
out = "out"

[inputs]
person = "person.png"
person_keypoints = "person_keypoints.json"
person_parsing = "person_parsing.png"
source_garment_mask = "person_garment_mask.png"
person_iuv = { index = "person_iuv_i.png", u = "person_iuv_u.png", v = "person_iuv_v.png" }
garment = "garment.png"
garment_keypoints = "garment_keypoints.json"
garment_parsing = "garment_parsing.png"
garment_mask = "garment_mask.png"
garment_iuv = { index = "garment_iuv_i.png", u = "garment_iuv_u.png", v = "garment_iuv_v.png" }

[sampling]
mode = "toy"
guidance = "principal"
components = 3
seed = 0

[toy]
variance = 0.002

[geometry]
uv_tolerance = 0.05
"#;

/// Writes a small synthetic try-on job into `dir` and returns the path of
/// its config file.
pub fn write_fixture(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (img, parsing, kp) = person();
    save_image(&img, dir.join("person.png"))?;
    save_parsing(&parsing, dir.join("person_parsing.png"))?;
    save_keypoints(&kp, dir.join("person_keypoints.json"))?;
    save_mask(&parsing.mask_of(&[3, 4, 5]), dir.join("person_garment_mask.png"))?;
    save_iuv(&iuv_from_parsing(&parsing)?, &iuv_paths(dir, "person"))?;

    let (img, parsing, kp) = garment();
    save_image(&img, dir.join("garment.png"))?;
    save_parsing(&parsing, dir.join("garment_parsing.png"))?;
    save_keypoints(&kp, dir.join("garment_keypoints.json"))?;
    let mask: MaskPlane = parsing.mask_of(&[3, 4, 5]);
    save_mask(&mask, dir.join("garment_mask.png"))?;
    save_iuv(&iuv_from_parsing(&parsing)?, &iuv_paths(dir, "garment"))?;

    let config = dir.join(FIXTURE_CONFIG);
    fs::write(&config, CONFIG).map_err(|e| Error::io(&config, e))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::JobConfig;

    #[test]
    fn fixture_config_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path()).unwrap();
        let cfg = JobConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.out, dir.path().join("out"));
    }

    #[test]
    fn iuv_coordinates_span_each_part() {
        let (_, parsing, _) = person();
        let iuv = iuv_from_parsing(&parsing).unwrap();
        let torso: Vec<(usize, usize)> = (0..FIXTURE_HEIGHT)
            .flat_map(|y| (0..FIXTURE_WIDTH).map(move |x| (x, y)))
            .filter(|&(x, y)| parsing.get(x, y) == 3)
            .collect();
        let us: Vec<f32> = torso.iter().map(|&(x, y)| iuv.uv(x, y).0).collect();
        assert_eq!(us.iter().copied().fold(f32::MAX, f32::min), 0.0);
        assert_eq!(us.iter().copied().fold(f32::MIN, f32::max), 1.0);
    }
}
