//! Structured garment morphing: part boxes from keypoints, one homography
//! per part, piecewise perspective warping and occlusion gating against the
//! person's parsing map.

pub mod homography;
pub mod iuv;
pub mod parts;
pub mod warp;

pub use homography::{estimate_homography, max_transfer_error, normalized_dlt, Homography, HomographyFit};
pub use iuv::{transfer_mask_via_iuv, DEFAULT_UV_TOLERANCE};
pub use parts::{
    group_keypoints_to_parts, point_in_quad, GarmentCategory, GarmentKind, LabelTable, PartBox, PartBoxes, PartId,
    Quad, DEFAULT_BOX_MARGIN,
};
pub use warp::{occlusion_gate, part_support_mask, warp_piecewise, MorphResult, PartLayer, PartSupport};

use crate::error::{Error, Result};
use crate::ingest::{ImagePlane, KeypointSet, MaskPlane, ParsingPlane};

/// The garment-wearing side of the correspondence.
pub struct GarmentSource<'a> {
    pub image: &'a ImagePlane,
    pub keypoints: &'a KeypointSet,
    pub parsing: &'a ParsingPlane,
    pub garment_mask: &'a MaskPlane,
}

/// The person side: only pose and parsing are needed.
pub struct PersonTarget<'a> {
    pub keypoints: &'a KeypointSet,
    pub parsing: &'a ParsingPlane,
}

#[derive(Debug, Clone)]
pub struct MorphOutput {
    pub morph: MorphResult,
    pub source_boxes: PartBoxes,
    pub target_boxes: PartBoxes,
    pub homographies: Vec<(PartId, HomographyFit)>,
}

/// Runs the full morph: boxes on both images, box-corner homographies,
/// supports, piecewise warp and occlusion gating. Parts missing on either
/// side, or whose homography cannot be fitted, are skipped with a warning.
pub fn morph_garment(
    source: &GarmentSource<'_>,
    target: &PersonTarget<'_>,
    category: &GarmentCategory,
    margin: f64,
    table: &LabelTable,
) -> Result<MorphOutput> {
    let (ow, oh) = target.parsing.dims();
    if source.image.dims() != source.parsing.dims() || source.image.dims() != source.garment_mask.dims() {
        return Err(Error::Dimension(
            "garment image, parsing and garment mask must be aligned".into(),
        ));
    }
    let source_boxes = group_keypoints_to_parts(source.keypoints, category, margin);
    let target_boxes = group_keypoints_to_parts(target.keypoints, category, margin);

    let mut warnings = Vec::new();
    let mut supports = Vec::new();
    let mut homs = Vec::new();
    let mut fits = Vec::new();
    for &part in category.parts() {
        let (Some(src_quad), Some(dst_quad)) = (
            source_boxes.get(part).and_then(|b| b.corners),
            target_boxes.get(part).and_then(|b| b.corners),
        ) else {
            warnings.push(format!("part {part} is missing on one side; skipped"));
            continue;
        };
        let fit = match estimate_homography(&src_quad, &dst_quad) {
            Ok(fit) => fit,
            Err(e) => {
                warnings.push(format!("part {part}: {e}; skipped"));
                continue;
            }
        };
        if !fit.converged {
            warnings.push(format!("part {part}: homography fit did not converge"));
        }
        supports.push(PartSupport {
            part,
            mask: part_support_mask(source.parsing, source.garment_mask, &src_quad, part, table)?,
        });
        homs.push((part, fit.homography));
        fits.push((part, fit));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let image = source.image.to_rgb();
    let mut raw = warp_piecewise(&image, &supports, &homs, ow, oh)?;
    raw.warnings.splice(0..0, warnings);
    let morph = occlusion_gate(&raw, target.parsing, table)?;
    Ok(MorphOutput {
        morph,
        source_boxes,
        target_boxes,
        homographies: fits,
    })
}
