//! Raster resampling shared by the pipeline stages.
//!
//! Bilinear resizing uses pixel-center alignment: output pixel `x` samples
//! source coordinate `(x + 0.5) * src / dst - 0.5`, clamped to the edge.

use crate::ingest::{ImagePlane, LatentGeometry, LatentTensor, MaskPlane};

fn axis_taps(dst: usize, src: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

pub fn resize_bilinear(img: &ImagePlane, width: usize, height: usize) -> ImagePlane {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let xs = axis_taps(width, img.width());
    let ys = axis_taps(height, img.height());
    ImagePlane::from_fn(width, height, img.channels(), |x, y, c| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
        let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Overlap of each destination cell with the source pixels along one axis,
/// as `(source index, weight)` lists whose weights sum to 1.
fn area_weights(dst: usize, src: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Fraction of each destination cell covered by the mask (exact box filter).
pub fn area_coverage(mask: &MaskPlane, width: usize, height: usize) -> Vec<f64> {
    let wx = area_weights(width, mask.width());
    let wy = area_weights(height, mask.height());
    let mut out = Vec::with_capacity(width * height);
    for ty in &wy {
        for tx in &wx {
            let mut acc = 0.0;
            for &(sy, wyv) in ty {
                for &(sx, wxv) in tx {
                    if mask.get(sx, sy) {
                        acc += wxv * wyv;
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

/// Area-pools a mask onto a coarser grid and re-binarizes at 0.5.
pub fn downsample_mask(mask: &MaskPlane, width: usize, height: usize) -> MaskPlane {
    let cov = area_coverage(mask, width, height);
    MaskPlane::from_fn(width, height, |x, y| cov[y * width + x] >= 0.5)
}

/// Image values resampled onto a latent grid, one latent channel per image
/// channel.
pub fn image_to_latent(img: &ImagePlane, geometry: LatentGeometry) -> LatentTensor {
    let rgb = if geometry.channels == 3 {
        img.to_rgb()
    } else {
        img.clone()
    };
    assert_eq!(
        rgb.channels(),
        geometry.channels,
        "latent channels must match image channels"
    );
    let small = resize_bilinear(&rgb, geometry.width, geometry.height);
    LatentTensor::from_fn(geometry, |c, y, x| small.get(x, y, c))
}

/// Inverse of [`image_to_latent`] at latent resolution; values are clamped
/// to `[0, 1]`.
pub fn latent_to_image(z: &LatentTensor) -> ImagePlane {
    let g = z.geometry();
    assert!(
        g.channels == 1 || g.channels == 3,
        "decodable latents have 1 or 3 channels"
    );
    ImagePlane::from_fn(g.width, g.height, g.channels, |x, y, c| z.get(c, y, x))
}
