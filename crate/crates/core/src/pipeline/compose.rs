use crate::error::{Error, Result};
use crate::geometry::MorphResult;
use crate::ingest::{ImagePlane, MaskPlane};
use crate::resample::resize_bilinear;

/// Person image with the morphed garment pasted where the warped mask is set.
pub fn infuse_garment(person: &ImagePlane, morph: &MorphResult) -> Result<ImagePlane> {
    if person.dims() != morph.warped.dims() || person.dims() != morph.warped_mask.dims() {
        return Err(Error::Dimension(format!(
            "person {:?} vs morph {:?}",
            person.dims(),
            morph.warped.dims()
        )));
    }
    let mut out = person.to_rgb();
    let warped = morph.warped.to_rgb();
    let (w, h) = out.dims();
    for y in 0..h {
        for x in 0..w {
            if morph.warped_mask.get(x, y) {
                out.set_pixel(x, y, warped.pixel(x, y));
            }
        }
    }
    Ok(out)
}

/// Places the garments side by side at a common height (the tallest input),
/// each bilinearly rescaled to keep its aspect ratio, then resizes the strip
/// to `width x height`.
pub fn concat_garments(garments: &[ImagePlane], width: usize, height: usize) -> Result<ImagePlane> {
    if garments.is_empty() {
        return Err(Error::InvalidArgument("no garments to concatenate".into()));
    }
    let common = garments.iter().map(|g| g.height()).max().unwrap_or(0);
    let scaled: Vec<ImagePlane> = garments
        .iter()
        .map(|g| {
            let rgb = g.to_rgb();
            let w = ((rgb.width() * common) as f64 / rgb.height() as f64).round().max(1.0) as usize;
            resize_bilinear(&rgb, w, common)
        })
        .collect();
    let total: usize = scaled.iter().map(|g| g.width()).sum();
    let mut strip = ImagePlane::filled(total, common, &[0.0, 0.0, 0.0]);
    let mut x0 = 0;
    for g in &scaled {
        for y in 0..common {
            for x in 0..g.width() {
                strip.set_pixel(x0 + x, y, g.pixel(x, y));
            }
        }
        x0 += g.width();
    }
    Ok(resize_bilinear(&strip, width, height))
}

/// Same layout as [`concat_garments`] for masks, re-binarized at 0.5.
pub fn concat_masks(masks: &[MaskPlane], width: usize, height: usize) -> Result<MaskPlane> {
    let images: Vec<ImagePlane> = masks.iter().map(MaskPlane::to_image).collect();
    let strip = concat_garments(&images, width, height)?;
    Ok(MaskPlane::from_fn(width, height, |x, y| strip.get(x, y, 0) >= 0.5))
}
