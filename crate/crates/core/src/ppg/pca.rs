//! Principal-component restriction of a latent tensor.
//!
//! With [`PcaOrientation::ChannelFeatures`] every spatial location is a sample
//! and the channels are its features; the top `m` eigenvectors of the
//! `C x C` sample covariance span the kept subspace. With
//! [`PcaOrientation::SpatialFeatures`] the roles swap: each channel is a
//! sample over `H * W` features, solved through the `C x C` Gram matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaOrientation {
    #[default]
    ChannelFeatures,
    SpatialFeatures,
}

/// Eigenvalues at or below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Eigen-decomposition of a dense symmetric `n x n` matrix (row-major) by
/// cyclic Jacobi rotations. Eigenpairs are sorted by descending eigenvalue;
/// each eigenvector's largest-magnitude coordinate is made positive.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| {
            let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + j]).collect();
            let lead = vec
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            (a[j * n + j], vec)
        })
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalProjection {
    pub tensor: LatentTensor,
    /// Number of components actually used (less than requested when the
    /// covariance is rank deficient).
    pub rank_used: usize,
    pub warning: Option<String>,
}

/// Reconstructs `z` from its mean plus its projection on the top
/// `components` principal directions.
pub fn principal_project(
    z: &LatentTensor,
    components: usize,
    orientation: PcaOrientation,
) -> Result<PrincipalProjection> {
    let c = z.channels();
    if components == 0 || components > c {
        return Err(Error::InvalidArgument(format!(
            "principal components must be in 1..={c}, got {components}"
        )));
    }
    match orientation {
        PcaOrientation::ChannelFeatures => project_channel_features(z, components),
        PcaOrientation::SpatialFeatures => project_spatial_features(z, components),
    }
}

fn usable_rank(eigenvalues: &[f64], wanted: usize) -> usize {
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigenvalues
        .iter()
        .filter(|&&l| l > RANK_TOLERANCE * top && l > 0.0)
        .count();
    rank.min(wanted)
}

fn rank_warning(rank: usize, wanted: usize) -> Option<String> {
    (rank < wanted).then(|| {
        format!("covariance has rank {rank} < {wanted} requested components; reconstructed with available rank")
    })
}

fn project_channel_features(z: &LatentTensor, m: usize) -> Result<PrincipalProjection> {
    let c = z.channels();
    let n = z.height() * z.width();
    let cols: Vec<Vec<f64>> = (0..c)
        .map(|ch| z.channel(ch).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mean: Vec<f64> = cols.iter().map(|col| col.iter().sum::<f64>() / n as f64).collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = (0..n).map(|p| (cols[i][p] - mean[i]) * (cols[j][p] - mean[j])).sum();
            cov[i * c + j] = s / denom;
            cov[j * c + i] = s / denom;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, c);
    let rank = usable_rank(&values, m);
    let mut out = vec![0.0f32; z.data().len()];
    let mut centered = vec![0.0; c];
    for p in 0..n {
        for i in 0..c {
            centered[i] = cols[i][p] - mean[i];
        }
        let mut recon = mean.clone();
        for e in vectors.iter().take(rank) {
            let coeff: f64 = e.iter().zip(&centered).map(|(a, b)| a * b).sum();
            for i in 0..c {
                recon[i] += coeff * e[i];
            }
        }
        for i in 0..c {
            out[i * n + p] = recon[i] as f32;
        }
    }
    Ok(PrincipalProjection {
        tensor: LatentTensor::new(z.geometry(), out)?,
        rank_used: rank,
        warning: rank_warning(rank, m),
    })
}

fn project_spatial_features(z: &LatentTensor, m: usize) -> Result<PrincipalProjection> {
    let c = z.channels();
    let n = z.height() * z.width();
    let rows: Vec<Vec<f64>> = (0..c)
        .map(|ch| z.channel(ch).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mean: Vec<f64> = (0..n)
        .map(|p| rows.iter().map(|r| r[p]).sum::<f64>() / c as f64)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let denom = (c.max(2) - 1) as f64;
    let mut gram = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let s: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            gram[i * c + j] = s / denom;
            gram[j * c + i] = s / denom;
        }
    }
    let (values, vectors) = symmetric_eigen(&gram, c);
    let rank = usable_rank(&values, m);
    // principal directions in feature space: normalized Y^T a_j
    let directions: Vec<Vec<f64>> = vectors
        .iter()
        .take(rank)
        .map(|a| {
            let mut u = vec![0.0; n];
            for (i, row) in centered.iter().enumerate() {
                for (dst, v) in u.iter_mut().zip(row) {
                    *dst += a[i] * v;
                }
            }
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            u
        })
        .collect();
    let mut out = Vec::with_capacity(c * n);
    for row in &centered {
        let mut recon = mean.clone();
        for u in &directions {
            let coeff: f64 = u.iter().zip(row).map(|(a, b)| a * b).sum();
            for (dst, uv) in recon.iter_mut().zip(u) {
                *dst += coeff * uv;
            }
        }
        out.extend(recon.iter().map(|&v| v as f32));
    }
    Ok(PrincipalProjection {
        tensor: LatentTensor::new(z.geometry(), out)?,
        rank_used: rank,
        warning: rank_warning(rank, m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::LatentGeometry;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tensor(seed: u64, g: LatentGeometry) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::from_fn(g, |_, _, _| StandardNormal.sample(&mut rng))
    }

    /// Reconstruction through nalgebra's symmetric eigensolver on the
    /// explicit covariance matrix.
    fn oracle_channel(z: &LatentTensor, m: usize) -> Vec<f64> {
        let c = z.channels();
        let n = z.height() * z.width();
        let x = DMatrix::from_fn(n, c, |p, ch| f64::from(z.channel(ch)[p]));
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, c, |p, ch| x[(p, ch)] - mean[ch]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = DMatrix::from_fn(c, m, |i, j| eig.eigenvectors[(i, order[j])]);
        let recon = &centered * &basis * basis.transpose();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for p in 0..n {
                out[ch * n + p] = recon[(p, ch)] + mean[ch];
            }
        }
        out
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let a = [2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&a, 2);
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[0][0] - s).abs() < 1e-12 && (vecs[0][1] - s).abs() < 1e-12);
    }

    #[test]
    fn full_basis_is_identity() {
        let g = LatentGeometry::new(4, 8, 8);
        let z = random_tensor(1, g);
        for orientation in [PcaOrientation::ChannelFeatures, PcaOrientation::SpatialFeatures] {
            let p = principal_project(&z, 4, orientation).unwrap();
            assert!(p.tensor.max_abs_diff(&z) < 1e-6, "{orientation:?}");
        }
    }

    #[test]
    fn rank_one_data_is_exact_with_one_component() {
        let g = LatentGeometry::new(4, 6, 6);
        let base = random_tensor(2, LatentGeometry::new(1, 6, 6));
        let scales = [1.0f32, -2.0, 0.5, 3.0];
        let z = LatentTensor::from_fn(g, |c, y, x| scales[c] * base.get(0, y, x));
        let p = principal_project(&z, 1, PcaOrientation::ChannelFeatures).unwrap();
        assert!(p.tensor.max_abs_diff(&z) < 1e-6);
        assert!(p.warning.is_none());

        let p = principal_project(&z, 3, PcaOrientation::ChannelFeatures).unwrap();
        assert_eq!(p.rank_used, 1);
        assert!(p.warning.is_some());
    }

    #[test]
    fn matches_dense_eigensolver_oracle() {
        let g = LatentGeometry::new(4, 8, 8);
        for seed in 0..10 {
            let z = random_tensor(100 + seed, g);
            let p = principal_project(&z, 3, PcaOrientation::ChannelFeatures).unwrap();
            let want = oracle_channel(&z, 3);
            for (a, b) in p.tensor.data().iter().zip(&want) {
                assert!((f64::from(*a) - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn reconstruction_error_is_non_increasing_in_components() {
        let g = LatentGeometry::new(4, 8, 8);
        let z = random_tensor(7, g);
        for orientation in [PcaOrientation::ChannelFeatures, PcaOrientation::SpatialFeatures] {
            let errs: Vec<f64> = (1..=4)
                .map(|m| principal_project(&z, m, orientation).unwrap().tensor.sub(&z).norm())
                .collect();
            for w in errs.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "{orientation:?}: {errs:?}");
            }
        }
    }

    #[test]
    fn projection_is_idempotent() {
        let g = LatentGeometry::new(4, 8, 8);
        let z = random_tensor(3, g);
        for orientation in [PcaOrientation::ChannelFeatures, PcaOrientation::SpatialFeatures] {
            let once = principal_project(&z, 2, orientation).unwrap().tensor;
            let twice = principal_project(&once, 2, orientation).unwrap().tensor;
            assert!(twice.max_abs_diff(&once) < 1e-6, "{orientation:?}");
        }
    }

    #[test]
    fn component_count_is_validated() {
        let z = random_tensor(4, LatentGeometry::new(3, 2, 2));
        assert!(principal_project(&z, 0, PcaOrientation::ChannelFeatures).is_err());
        assert!(principal_project(&z, 4, PcaOrientation::ChannelFeatures).is_err());
    }
}
