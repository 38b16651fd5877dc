use nalgebra::Point2;

use super::homography::Homography;
use super::parts::{point_in_quad, LabelTable, PartId, Quad};
use crate::error::{Error, Result};
use crate::ingest::{ImagePlane, MaskPlane, ParsingPlane};

/// Pixels of `part` in the source image: parsing label belongs to the part,
/// the garment mask is set, and the pixel lies inside the part box.
pub fn part_support_mask(
    parsing: &ParsingPlane,
    garment: &MaskPlane,
    quad: &Quad,
    part: PartId,
    table: &LabelTable,
) -> Result<MaskPlane> {
    if parsing.dims() != garment.dims() {
        return Err(Error::Dimension(format!(
            "parsing {:?} vs garment mask {:?}",
            parsing.dims(),
            garment.dims()
        )));
    }
    let labels = table.labels(part);
    let (w, h) = parsing.dims();
    Ok(MaskPlane::from_fn(w, h, |x, y| {
        garment.get(x, y) && labels.contains(&parsing.get(x, y)) && point_in_quad(quad, Point2::new(x as f64, y as f64))
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartSupport {
    pub part: PartId,
    pub mask: MaskPlane,
}

/// One warped part before composition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartLayer {
    pub part: PartId,
    pub image: ImagePlane,
    pub mask: MaskPlane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphResult {
    pub warped: ImagePlane,
    pub warped_mask: MaskPlane,
    /// Per-part contributions in composition order.
    pub layers: Vec<PartLayer>,
    pub warnings: Vec<String>,
}

impl MorphResult {
    /// Composites `layers` in order, later parts overwriting earlier ones.
    pub fn compose(
        layers: Vec<PartLayer>,
        width: usize,
        height: usize,
        channels: usize,
        warnings: Vec<String>,
    ) -> Self {
        let zero = vec![0.0; channels];
        let mut warped = ImagePlane::filled(width, height, &zero);
        let mut warped_mask = MaskPlane::zeros(width, height);
        for layer in &layers {
            for y in 0..height {
                for x in 0..width {
                    if layer.mask.get(x, y) {
                        warped.set_pixel(x, y, layer.image.pixel(x, y));
                        warped_mask.set(x, y, true);
                    }
                }
            }
        }
        Self {
            warped,
            warped_mask,
            layers,
            warnings,
        }
    }

    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        Self::compose(Vec::new(), width, height, channels, Vec::new())
    }
}

/// Bilinear sample of `img` at `(sx, sy)` restricted to pixels in `support`.
/// Weights of neighbours outside the support are dropped and the rest
/// renormalized.
fn sample_supported(img: &ImagePlane, support: &MaskPlane, sx: f64, sy: f64, out: &mut [f32]) -> bool {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let mut acc = [0.0f64; 3];
    let mut total = 0.0;
    for (x, y, wgt) in taps {
        if wgt <= 0.0 || x < 0 || y < 0 || x >= w || y >= h {
            continue;
        }
        let (xu, yu) = (x as usize, y as usize);
        if !support.get(xu, yu) {
            continue;
        }
        for (c, a) in acc.iter_mut().enumerate().take(img.channels()) {
            *a += wgt * f64::from(img.get(xu, yu, c));
        }
        total += wgt;
    }
    if total <= 0.0 {
        return false;
    }
    for (c, o) in out.iter_mut().enumerate() {
        *o = (acc[c] / total) as f32;
    }
    true
}

/// Warps one part by inverse mapping: an output pixel takes a value when the
/// source location's nearest pixel belongs to the part support.
pub fn warp_part(
    src: &ImagePlane,
    support: &MaskPlane,
    inverse: &Homography,
    out_width: usize,
    out_height: usize,
) -> (ImagePlane, MaskPlane) {
    let channels = src.channels();
    let zero = vec![0.0; channels];
    let mut image = ImagePlane::filled(out_width, out_height, &zero);
    let mut mask = MaskPlane::zeros(out_width, out_height);
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    let mut px = vec![0.0f32; channels];
    for y in 0..out_height {
        for x in 0..out_width {
            let Some(s) = inverse.apply(Point2::new(x as f64, y as f64)) else {
                continue;
            };
            let (nx, ny) = ((s.x + 0.5).floor(), (s.y + 0.5).floor());
            if nx < 0.0 || ny < 0.0 || nx >= sw || ny >= sh {
                continue;
            }
            if !support.get(nx as usize, ny as usize) {
                continue;
            }
            if sample_supported(src, support, s.x, s.y, &mut px) {
                image.set_pixel(x, y, &px);
                mask.set(x, y, true);
            }
        }
    }
    (image, mask)
}

/// Piecewise perspective morph of `src` into an `out_width x out_height`
/// canvas. `supports` fixes the composition order; parts without a
/// homography are skipped, as are parts whose homography cannot be inverted
/// (with a warning).
pub fn warp_piecewise(
    src: &ImagePlane,
    supports: &[PartSupport],
    homs: &[(PartId, Homography)],
    out_width: usize,
    out_height: usize,
) -> Result<MorphResult> {
    let mut layers = Vec::new();
    let mut warnings = Vec::new();
    for support in supports {
        if support.mask.dims() != src.dims() {
            return Err(Error::Dimension(format!(
                "support of {} is {:?}, source image is {:?}",
                support.part,
                support.mask.dims(),
                src.dims()
            )));
        }
        let Some((_, h)) = homs.iter().find(|(p, _)| *p == support.part) else {
            continue;
        };
        let Some(inverse) = h.inverse() else {
            let msg = format!("homography of part {} is not invertible; part skipped", support.part);
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        };
        let (image, mask) = warp_part(src, &support.mask, &inverse, out_width, out_height);
        layers.push(PartLayer {
            part: support.part,
            image,
            mask,
        });
    }
    Ok(MorphResult::compose(
        layers,
        out_width,
        out_height,
        src.channels(),
        warnings,
    ))
}

/// Keeps each part's contribution only where the person parsing agrees with
/// the part's labels. Pixels still claimed by several parts go to the latest
/// part in composition order, so contributions end up pairwise disjoint.
pub fn occlusion_gate(morph: &MorphResult, person_parsing: &ParsingPlane, table: &LabelTable) -> Result<MorphResult> {
    let (w, h) = morph.warped_mask.dims();
    if person_parsing.dims() != (w, h) {
        return Err(Error::Dimension(format!(
            "person parsing {:?} vs morph {:?}",
            person_parsing.dims(),
            (w, h)
        )));
    }
    let mut claimed = MaskPlane::zeros(w, h);
    let mut layers: Vec<PartLayer> = Vec::with_capacity(morph.layers.len());
    for layer in morph.layers.iter().rev() {
        let labels = table.labels(layer.part);
        let mask = MaskPlane::from_fn(w, h, |x, y| {
            layer.mask.get(x, y) && !claimed.get(x, y) && labels.contains(&person_parsing.get(x, y))
        });
        claimed = claimed.or(&mask)?;
        let zero = vec![0.0; layer.image.channels()];
        let mut image = ImagePlane::filled(w, h, &zero);
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    image.set_pixel(x, y, layer.image.pixel(x, y));
                }
            }
        }
        layers.push(PartLayer {
            part: layer.part,
            image,
            mask,
        });
    }
    layers.reverse();
    Ok(MorphResult::compose(
        layers,
        w,
        h,
        morph.warped.channels(),
        morph.warnings.clone(),
    ))
}
