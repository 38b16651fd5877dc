//! Projective maps between part boxes: normalized DLT initialization refined
//! with Levenberg-Marquardt on the transfer error.

use nalgebra::{DMatrix, DVector, Matrix3, Point2, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

/// LM stops once the parameter step norm falls below this.
pub const LM_STEP_TOLERANCE: f64 = 1e-10;
pub const LM_MAX_ITERATIONS: usize = 100;

/// A 3x3 projective map with `H[(2, 2)] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    /// Normalizes `m` so its bottom-right entry is 1 and validates it.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("homography has non-finite entries".into()));
        }
        let scale = m[(2, 2)];
        if scale.abs() < 1e-12 * m.abs().max() {
            return Err(Error::Degenerate(
                "homography cannot be normalized (H[2,2] is zero)".into(),
            ));
        }
        let h = m / scale;
        let det2 = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        if det2.abs() < 1e-12 {
            return Err(Error::Degenerate("homography has a singular linear block".into()));
        }
        Ok(Self(h))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, p: Point2<f64>) -> Option<Point2<f64>> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < 1e-12 {
            return None;
        }
        Some(Point2::new(v.x / v.z, v.y / v.z))
    }

    pub fn inverse(&self) -> Option<Homography> {
        let inv = self.0.try_inverse()?;
        Homography::from_matrix(inv).ok()
    }

    pub fn compose(&self, then: &Homography) -> Option<Homography> {
        Homography::from_matrix(then.0 * self.0).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyFit {
    pub homography: Homography,
    /// False when LM hit the iteration cap; the best iterate is returned.
    pub converged: bool,
    pub iterations: usize,
    /// Root-mean-square transfer error in destination pixels.
    pub rms_error: f64,
}

/// Largest Euclidean distance between `H(src[i])` and `dst[i]`.
pub fn max_transfer_error(h: &Homography, src: &[Point2<f64>], dst: &[Point2<f64>]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| h.apply(*s).map_or(f64::INFINITY, |p| (p - d).norm()))
        .fold(0.0, f64::max)
}

/// Similarity transform taking `pts` to zero mean and mean distance sqrt(2).
fn hartley(pts: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 || !mean_dist.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, pts: &[Point2<f64>]) -> Vec<Point2<f64>> {
    pts.iter()
        .map(|p| {
            let v = t * Vector3::new(p.x, p.y, 1.0);
            Point2::new(v.x / v.z, v.y / v.z)
        })
        .collect()
}

fn has_collinear_triple(pts: &[Point2<f64>]) -> bool {
    let n = pts.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let (a, b) = (pts[j] - pts[i], pts[k] - pts[i]);
                if (a.x * b.y - a.y * b.x).abs() < 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

/// Direct linear transform on already-normalized points. The null vector of
/// the design matrix is the right singular vector of the smallest singular
/// value; the system is zero-padded to square so that vector always exists.
fn dlt_core(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Matrix3<f64> {
    let n = src.len();
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = 2 * i;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        let r1 = r0 + 1;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nine singular values");
    let h = v_t.row(min_idx);
    Matrix3::from_row_slice(&h.iter().copied().collect::<Vec<_>>())
}

fn check_inputs(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 correspondences, got {}",
            src.len()
        )));
    }
    if src.iter().chain(dst).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidArgument("non-finite correspondence".into()));
    }
    let t_src = hartley(src).ok_or_else(|| Error::Degenerate("source points coincide".into()))?;
    let t_dst = hartley(dst).ok_or_else(|| Error::Degenerate("destination points coincide".into()))?;
    if has_collinear_triple(&transform(&t_src, src)) {
        return Err(Error::Degenerate("three source points are collinear".into()));
    }
    if has_collinear_triple(&transform(&t_dst, dst)) {
        return Err(Error::Degenerate("three destination points are collinear".into()));
    }
    Ok((t_src, t_dst))
}

/// Normalized DLT estimate of the homography mapping `src` onto `dst`.
pub fn normalized_dlt(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<Homography> {
    let (t_src, t_dst) = check_inputs(src, dst)?;
    let hn = dlt_core(&transform(&t_src, src), &transform(&t_dst, dst));
    let t_dst_inv = t_dst.try_inverse().expect("similarity is invertible");
    Homography::from_matrix(t_dst_inv * hn * t_src)
}

type Params = SVector<f64, 8>;

fn params_to_matrix(p: &Params) -> Matrix3<f64> {
    Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0)
}

/// Residuals and Jacobian of the transfer error for `H(p)`.
fn residuals(p: &Params, src: &[Point2<f64>], dst: &[Point2<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = src.len();
    let h = params_to_matrix(p);
    let mut r = DVector::zeros(2 * n);
    let mut j = DMatrix::zeros(2 * n, 8);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let v = h * Vector3::new(s.x, s.y, 1.0);
        let w = v.z;
        let (u, vv) = (v.x / w, v.y / w);
        r[2 * i] = u - d.x;
        r[2 * i + 1] = vv - d.y;
        let (x, y) = (s.x, s.y);
        j[(2 * i, 0)] = x / w;
        j[(2 * i, 1)] = y / w;
        j[(2 * i, 2)] = 1.0 / w;
        j[(2 * i, 6)] = -u * x / w;
        j[(2 * i, 7)] = -u * y / w;
        j[(2 * i + 1, 3)] = x / w;
        j[(2 * i + 1, 4)] = y / w;
        j[(2 * i + 1, 5)] = 1.0 / w;
        j[(2 * i + 1, 6)] = -vv * x / w;
        j[(2 * i + 1, 7)] = -vv * y / w;
    }
    (r, j)
}

/// Fits the homography mapping `src` onto `dst` by minimizing the summed
/// squared transfer error with Levenberg-Marquardt, starting from the
/// normalized DLT estimate. Optimization runs in Hartley-normalized
/// coordinates; the destination normalization is a similarity, so the
/// minimizer is unchanged.
pub fn estimate_homography(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Result<HomographyFit> {
    let (t_src, t_dst) = check_inputs(src, dst)?;
    let src_n = transform(&t_src, src);
    let dst_n = transform(&t_dst, dst);
    let init = dlt_core(&src_n, &dst_n);
    if init[(2, 2)].abs() < 1e-10 * init.abs().max() {
        return Err(Error::Degenerate("normalized homography has vanishing H[2,2]".into()));
    }
    let init = init / init[(2, 2)];
    // row-major h11..h32; h33 stays fixed at 1
    let mut p = Params::zeros();
    for k in 0..8 {
        p[k] = init[(k / 3, k % 3)];
    }

    let (mut r, mut jac) = residuals(&p, &src_n, &dst_n);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < LM_MAX_ITERATIONS {
        iterations += 1;
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        for row in 0..8 {
            for col in 0..8 {
                a[(row, col)] = jtj[(row, col)];
            }
            a[(row, row)] += lambda * jtj[(row, row)].max(1e-12);
        }
        let rhs = -Params::from_iterator(g.iter().copied());
        let Some(step) = a.cholesky().map(|c| c.solve(&rhs)) else {
            lambda *= 10.0;
            continue;
        };
        let step_norm = step.norm();
        let candidate = p + step;
        let (r_new, j_new) = residuals(&candidate, &src_n, &dst_n);
        let cost_new = r_new.norm_squared();
        if cost_new.is_finite() && cost_new <= cost {
            p = candidate;
            r = r_new;
            jac = j_new;
            cost = cost_new;
            lambda = (lambda / 10.0).max(1e-12);
        } else {
            lambda *= 10.0;
        }
        if step_norm < LM_STEP_TOLERANCE || cost == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("homography LM did not converge in {LM_MAX_ITERATIONS} iterations; returning best iterate");
    }

    let t_dst_inv = t_dst.try_inverse().expect("similarity is invertible");
    let homography = Homography::from_matrix(t_dst_inv * params_to_matrix(&p) * t_src)?;
    let rms_error = (src
        .iter()
        .zip(dst)
        .map(|(s, d)| homography.apply(*s).map_or(f64::INFINITY, |q| (q - d).norm_squared()))
        .sum::<f64>()
        / src.len() as f64)
        .sqrt();
    Ok(HomographyFit {
        homography,
        converged,
        iterations,
        rms_error,
    })
}
