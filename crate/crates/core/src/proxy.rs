//! Proxy image construction: an ordered, region-wise composition that keeps
//! the person's pose while removing the appearance of the clothing being
//! replaced.
//!
//! The four steps overwrite each other in order:
//!
//! 1. background inpainting over the source garment mask `M_s`,
//! 2. constant skin color over the body region `M_b = M_d ∩ M_s`,
//! 3. constant garment color over `M_t = (M_p ∩ M_o') ∪ M_w`,
//! 4. original person pixels over `M_other = 1 - (M_s ∪ M_b ∪ M_t)`.

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_in_quad, LabelTable, PartBoxes};
use crate::ingest::{ImagePlane, MaskPlane, ParsingPlane};

pub const DEFAULT_INPAINT_ITERATIONS: usize = 500;
pub const INPAINT_TOLERANCE: f32 = 1e-4;
pub const FALLBACK_SKIN_COLOR: [f32; 3] = [0.78, 0.65, 0.57];
pub const FALLBACK_GARMENT_COLOR: [f32; 3] = [0.5, 0.5, 0.5];
/// Dilation radius of the derived cloth-agnostic mask, as a fraction of the
/// image height.
pub const AGNOSTIC_DILATION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Inpainted {
    pub image: ImagePlane,
    pub sweeps: usize,
    pub warning: Option<String>,
}

/// Harmonic fill of `hole`: hole pixels start from a distance-weighted blend
/// of the nearest known pixels along their row and column, then are relaxed
/// by Gauss-Seidel 4-neighbour averaging until the largest update drops below
/// [`INPAINT_TOLERANCE`] or `iterations` sweeps have run. Pixels outside the
/// hole are never modified, and hole pixels of the input are never read.
pub fn inpaint_background(img: &ImagePlane, hole: &MaskPlane, iterations: usize) -> Result<Inpainted> {
    let (w, h) = img.dims();
    if hole.dims() != (w, h) {
        return Err(Error::Dimension(format!(
            "hole {:?} vs image {:?}",
            hole.dims(),
            (w, h)
        )));
    }
    let ch = img.channels();
    let mut out = img.clone();
    if hole.is_empty() {
        return Ok(Inpainted {
            image: out,
            sweeps: 0,
            warning: None,
        });
    }
    if hole.count() == w * h {
        let n = (w * h) as f64;
        let mean: Vec<f32> = (0..ch)
            .map(|c| {
                (img.data()
                    .iter()
                    .skip(c)
                    .step_by(ch)
                    .map(|&v| f64::from(v))
                    .sum::<f64>()
                    / n) as f32
            })
            .collect();
        let msg = "inpainting hole covers the whole image; filled with the global mean".to_string();
        log::warn!("{msg}");
        return Ok(Inpainted {
            image: ImagePlane::filled(w, h, &mean),
            sweeps: 0,
            warning: Some(msg),
        });
    }

    seed_hole(img, hole, &mut out);

    let mut sweeps = 0;
    let mut acc = vec![0.0f32; ch];
    while sweeps < iterations {
        sweeps += 1;
        let mut max_change = 0.0f32;
        for y in 0..h {
            for x in 0..w {
                if !hole.get(x, y) {
                    continue;
                }
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut n = 0.0f32;
                let neighbours = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                for (nx, ny) in neighbours {
                    if nx < w && ny < h {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += out.get(nx, ny, c);
                        }
                        n += 1.0;
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    let v = a / n;
                    max_change = max_change.max((v - out.get(x, y, c)).abs());
                    out.set(x, y, c, v);
                }
            }
        }
        if max_change < INPAINT_TOLERANCE {
            break;
        }
    }
    Ok(Inpainted {
        image: out,
        sweeps,
        warning: None,
    })
}

/// Initial hole values from the nearest known pixels left/right/up/down,
/// weighted by inverse distance.
fn seed_hole(img: &ImagePlane, hole: &MaskPlane, out: &mut ImagePlane) {
    let (w, h) = img.dims();
    let ch = img.channels();
    let mut sum = vec![0.0f64; w * h * ch];
    let mut weight = vec![0.0f64; w * h];

    let mut visit = |len: usize, at: &dyn Fn(usize) -> (usize, usize)| {
        let mut i = 0;
        while i < len {
            let (x, y) = at(i);
            if !hole.get(x, y) {
                i += 1;
                continue;
            }
            let start = i;
            while i < len && hole.get(at(i).0, at(i).1) {
                i += 1;
            }
            let before = start.checked_sub(1).map(|j| (j, at(j)));
            let after = (i < len).then(|| (i, at(i)));
            for k in start..i {
                let (x, y) = at(k);
                let p = y * w + x;
                for (j, (kx, ky)) in before.into_iter().chain(after) {
                    let d = (j as f64 - k as f64).abs();
                    let wgt = 1.0 / d;
                    weight[p] += wgt;
                    for c in 0..ch {
                        sum[p * ch + c] += wgt * f64::from(img.get(kx, ky, c));
                    }
                }
            }
        }
    };
    for y in 0..h {
        visit(w, &|i| (i, y));
    }
    for x in 0..w {
        visit(h, &|i| (x, i));
    }

    // Pixels whose row and column are both fully hole get the mean of all
    // seeded values.
    let mut fallback = vec![0.0f64; ch];
    let mut known = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !hole.get(x, y) {
                for (c, f) in fallback.iter_mut().enumerate() {
                    *f += f64::from(img.get(x, y, c));
                }
                known += 1.0;
            }
        }
    }
    fallback.iter_mut().for_each(|f| *f /= known);

    for y in 0..h {
        for x in 0..w {
            if !hole.get(x, y) {
                continue;
            }
            let p = y * w + x;
            for c in 0..ch {
                let v = if weight[p] > 0.0 {
                    sum[p * ch + c] / weight[p]
                } else {
                    fallback[c]
                };
                out.set(x, y, c, v as f32);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorEstimate {
    pub rgb: [f32; 3],
    /// Set when no pixel qualified and the documented fallback was used.
    pub fallback: bool,
}

fn mean_color(img: &ImagePlane, select: impl Fn(usize, usize) -> bool) -> Option<[f32; 3]> {
    let rgb = img.to_rgb();
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for y in 0..rgb.height() {
        for x in 0..rgb.width() {
            if select(x, y) {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += f64::from(rgb.get(x, y, c));
                }
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc.map(|a| (a / n as f64) as f32))
}

/// Mean color of exposed skin: parsing label in the table's skin set and
/// not covered by the garment mask.
pub fn estimate_skin_color(
    img: &ImagePlane,
    parsing: &ParsingPlane,
    garment: &MaskPlane,
    table: &LabelTable,
) -> Result<ColorEstimate> {
    if img.dims() != parsing.dims() || img.dims() != garment.dims() {
        return Err(Error::Dimension("skin color inputs must be aligned".into()));
    }
    match mean_color(img, |x, y| {
        !garment.get(x, y) && table.skin.contains(&parsing.get(x, y))
    }) {
        Some(rgb) => Ok(ColorEstimate { rgb, fallback: false }),
        None => {
            log::warn!("no exposed skin found; using fallback skin color");
            Ok(ColorEstimate {
                rgb: FALLBACK_SKIN_COLOR,
                fallback: true,
            })
        }
    }
}

/// Mean color of the garment region of the garment image.
pub fn estimate_garment_color(img: &ImagePlane, garment_mask: &MaskPlane) -> Result<ColorEstimate> {
    if img.dims() != garment_mask.dims() {
        return Err(Error::Dimension("garment color inputs must be aligned".into()));
    }
    match mean_color(img, |x, y| garment_mask.get(x, y)) {
        Some(rgb) => Ok(ColorEstimate { rgb, fallback: false }),
        None => {
            log::warn!("garment mask is empty; using fallback garment color");
            Ok(ColorEstimate {
                rgb: FALLBACK_GARMENT_COLOR,
                fallback: true,
            })
        }
    }
}

/// `M_b = M_d ∩ M_s`
pub fn body_mask(dense: &MaskPlane, source_garment: &MaskPlane) -> Result<MaskPlane> {
    dense.and(source_garment)
}

/// `M_t = (M_p ∩ M_o') ∪ M_w`
pub fn target_mask(agnostic: &MaskPlane, projected: &MaskPlane, morph: &MaskPlane) -> Result<MaskPlane> {
    agnostic.and(projected)?.or(morph)
}

/// `M_other = 1 - (M_s ∪ M_b ∪ M_t)`
pub fn preserved_mask(source_garment: &MaskPlane, body: &MaskPlane, target: &MaskPlane) -> Result<MaskPlane> {
    Ok(source_garment.or(body)?.or(target)?.not())
}

/// Cloth-agnostic mask for inputs that do not ship one: the source garment
/// mask united with the person's part boxes, dilated by a disk whose radius
/// is [`AGNOSTIC_DILATION`] of the image height.
pub fn derive_agnostic_mask(source_garment: &MaskPlane, boxes: &PartBoxes) -> MaskPlane {
    let (w, h) = source_garment.dims();
    let quads: Vec<_> = boxes.present().map(|(_, q)| *q).collect();
    let base = MaskPlane::from_fn(w, h, |x, y| {
        source_garment.get(x, y) || quads.iter().any(|q| point_in_quad(q, Point2::new(x as f64, y as f64)))
    });
    base.dilate((AGNOSTIC_DILATION * h as f64).round() as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRecipe {
    /// `M_s`: garment currently worn in the person image.
    pub source_garment: MaskPlane,
    /// `M_d`: foreground human mask.
    pub dense_body: MaskPlane,
    /// `M_p`: cloth-agnostic mask.
    pub agnostic: MaskPlane,
    /// `M_o'`: target-garment mask projected onto the person.
    pub projected_garment: MaskPlane,
    /// `M_w`: mask of the morphed garment.
    pub morph: MaskPlane,
    pub skin_color: [f32; 3],
    pub garment_color: [f32; 3],
    pub inpaint_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Background,
    Body,
    GarmentCue,
    Preserved,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyImage {
    pub image: ImagePlane,
    /// The last composition step that wrote each pixel, row-major.
    pub provenance: Vec<Provenance>,
    pub warnings: Vec<String>,
}

impl ProxyImage {
    pub fn provenance_at(&self, x: usize, y: usize) -> Provenance {
        self.provenance[y * self.image.width() + x]
    }
}

/// Composes the proxy image from the person image and a recipe.
pub fn build_proxy(person: &ImagePlane, recipe: &ProxyRecipe) -> Result<ProxyImage> {
    let dims = person.dims();
    let masks = [
        ("M_s", &recipe.source_garment),
        ("M_d", &recipe.dense_body),
        ("M_p", &recipe.agnostic),
        ("M_o'", &recipe.projected_garment),
        ("M_w", &recipe.morph),
    ];
    for (name, m) in masks {
        if m.dims() != dims {
            return Err(Error::Dimension(format!(
                "{name} is {:?}, person image is {:?}",
                m.dims(),
                dims
            )));
        }
    }
    let person = person.to_rgb();
    let (w, h) = dims;
    let body = body_mask(&recipe.dense_body, &recipe.source_garment)?;
    let target = target_mask(&recipe.agnostic, &recipe.projected_garment, &recipe.morph)?;
    let other = preserved_mask(&recipe.source_garment, &body, &target)?;

    let mut warnings = Vec::new();
    let mut provenance = vec![Provenance::Preserved; w * h];

    // (i) background recovery
    let inpainted = inpaint_background(&person, &recipe.source_garment, recipe.inpaint_iterations)?;
    warnings.extend(inpainted.warning);
    let mut image = inpainted.image;
    for y in 0..h {
        for x in 0..w {
            if recipe.source_garment.get(x, y) {
                provenance[y * w + x] = Provenance::Background;
            }
        }
    }
    // (ii) body completion, (iii) target-garment cue
    for (mask, color, label) in [
        (&body, recipe.skin_color, Provenance::Body),
        (&target, recipe.garment_color, Provenance::GarmentCue),
    ] {
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    image.set_pixel(x, y, &color);
                    provenance[y * w + x] = label;
                }
            }
        }
    }
    // (iv) preserved region
    for y in 0..h {
        for x in 0..w {
            if other.get(x, y) {
                image.set_pixel(x, y, person.pixel(x, y));
                provenance[y * w + x] = Provenance::Preserved;
            }
        }
    }
    Ok(ProxyImage {
        image,
        provenance,
        warnings,
    })
}
