use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ingest::{IuvPlane, MaskPlane};

/// Default UV matching tolerance: a little over one 8-bit quantization step.
pub const DEFAULT_UV_TOLERANCE: f32 = 0.02;

struct UvGrid {
    cell: f32,
    cells: HashMap<(i32, i32), Vec<(f32, f32, usize, bool)>>,
}

impl UvGrid {
    fn key(&self, u: f32, v: f32) -> (i32, i32) {
        ((u / self.cell).floor() as i32, (v / self.cell).floor() as i32)
    }
}

/// Projects `src_mask` onto the destination body through surface
/// coordinates. A destination pixel of part `p` is set iff the source pixel
/// of part `p` nearest in `(u, v)` lies within `tolerance` and is inside
/// `src_mask`. Ties on distance go to the lowest row-major source index.
pub fn transfer_mask_via_iuv(
    src_iuv: &IuvPlane,
    src_mask: &MaskPlane,
    dst_iuv: &IuvPlane,
    tolerance: f32,
) -> Result<MaskPlane> {
    if src_iuv.dims() != src_mask.dims() {
        return Err(Error::Dimension(format!(
            "source IUV {:?} vs source mask {:?}",
            src_iuv.dims(),
            src_mask.dims()
        )));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::InvalidArgument("UV tolerance must be non-negative".into()));
    }
    let cell = tolerance.max(1.0 / 256.0);
    let reach = (tolerance / cell).ceil() as i32;

    let mut grids: HashMap<u8, UvGrid> = HashMap::new();
    let (sw, sh) = src_iuv.dims();
    for y in 0..sh {
        for x in 0..sw {
            let part = src_iuv.part(x, y);
            if part == 0 {
                continue;
            }
            let (u, v) = src_iuv.uv(x, y);
            let grid = grids.entry(part).or_insert_with(|| UvGrid {
                cell,
                cells: HashMap::new(),
            });
            let key = grid.key(u, v);
            grid.cells
                .entry(key)
                .or_default()
                .push((u, v, y * sw + x, src_mask.get(x, y)));
        }
    }

    let (dw, dh) = dst_iuv.dims();
    let tol2 = tolerance * tolerance;
    Ok(MaskPlane::from_fn(dw, dh, |x, y| {
        let part = dst_iuv.part(x, y);
        if part == 0 {
            return false;
        }
        let Some(grid) = grids.get(&part) else {
            return false;
        };
        let (u, v) = dst_iuv.uv(x, y);
        let (ku, kv) = grid.key(u, v);
        let mut best: Option<(f32, usize, bool)> = None;
        for du in -reach..=reach {
            for dv in -reach..=reach {
                let Some(bucket) = grid.cells.get(&(ku + du, kv + dv)) else {
                    continue;
                };
                for &(su, sv, idx, on) in bucket {
                    let d2 = (su - u) * (su - u) + (sv - v) * (sv - v);
                    let better = match best {
                        None => true,
                        Some((bd, bi, _)) => d2 < bd || (d2 == bd && idx < bi),
                    };
                    if better {
                        best = Some((d2, idx, on));
                    }
                }
            }
        }
        // candidates outside the searched cells are farther than `tolerance`
        matches!(best, Some((d2, _, on)) if d2 <= tol2 && on)
    }))
}
