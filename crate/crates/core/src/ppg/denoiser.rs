use crate::error::{Error, Result};
use crate::ingest::{ImagePlane, LatentGeometry, LatentTensor, MaskPlane};
use crate::resample::downsample_mask;

/// Where in the schedule a noise prediction is requested.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Inference step, `1..=T`.
    pub index: usize,
    /// Corresponding training timestep, forwarded to real backbones.
    pub train_step: usize,
    pub alpha_bar: f64,
}

/// Inputs the denoiser is conditioned on: the garment-infused person image,
/// the cloth-agnostic mask and the prompt. The garment image and cloth mask
/// feed the garment stream of the dual-stream attention when a backbone
/// applies it.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Identifies this conditioning on the bridge wire.
    pub id: String,
    pub infused: ImagePlane,
    pub agnostic_mask: MaskPlane,
    pub prompt: String,
    pub garment: Option<ImagePlane>,
    pub cloth_mask: Option<MaskPlane>,
}

impl Conditioning {
    /// Agnostic mask pooled onto the latent grid.
    pub fn latent_mask(&self, geometry: LatentGeometry) -> MaskPlane {
        downsample_mask(&self.agnostic_mask, geometry.width, geometry.height)
    }
}

/// An epsilon-predicting network.
///
/// `predict_noise` takes `&mut self`: a denoiser instance serves one sampling
/// run at a time. Stateless implementations can be cloned per run.
pub trait Denoiser {
    fn geometry(&self) -> LatentGeometry;

    fn predict_noise(&mut self, z: &LatentTensor, step: &StepInfo, cond: &Conditioning) -> Result<LatentTensor>;

    /// Clean-latent estimate for models that produce one directly, at higher
    /// precision than inverting the stored noise prediction allows.
    fn predict_clean(
        &mut self,
        _z: &LatentTensor,
        _step: &StepInfo,
        _cond: &Conditioning,
    ) -> Result<Option<LatentTensor>> {
        Ok(None)
    }
}

/// Exact epsilon prediction for a Gaussian mixture data distribution
/// `x0 ~ sum_i w_i N(mu_i, v I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    geometry: LatentGeometry,
    means: Vec<LatentTensor>,
    log_weights: Vec<f64>,
    variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPosterior {
    pub mean: Vec<f64>,
    pub responsibilities: Vec<f64>,
}

impl ToyDenoiser {
    pub fn new(modes: Vec<(LatentTensor, f64)>, variance: f64) -> Result<Self> {
        let Some(first) = modes.first() else {
            return Err(Error::InvalidArgument("toy denoiser needs at least one mode".into()));
        };
        let geometry = first.0.geometry();
        if modes.iter().any(|(m, _)| m.geometry() != geometry) {
            return Err(Error::Dimension("toy denoiser modes must share one geometry".into()));
        }
        if modes.iter().any(|(_, w)| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("mode weights must be positive".into()));
        }
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument("mode variance must be non-negative".into()));
        }
        let total: f64 = modes.iter().map(|(_, w)| w).sum();
        let log_weights = modes.iter().map(|(_, w)| (w / total).ln()).collect();
        let means = modes.into_iter().map(|(m, _)| m).collect();
        Ok(Self {
            geometry,
            means,
            log_weights,
            variance,
        })
    }

    /// Data distribution concentrated on one point.
    pub fn single_point(point: LatentTensor) -> Self {
        Self::new(vec![(point, 1.0)], 0.0).expect("one valid mode")
    }

    pub fn means(&self) -> &[LatentTensor] {
        &self.means
    }

    /// Posterior mean of `x0` given `z_t` and mixture responsibilities.
    ///
    /// Under component `i`, `z_t ~ N(sqrt(a) mu_i, (1 - a + a v) I)`, and
    /// `E[x0 | z_t, i] = mu_i + sqrt(a) v / (1 - a + a v) (z_t - sqrt(a) mu_i)`.
    pub fn posterior(&self, z: &LatentTensor, alpha_bar: f64) -> ToyPosterior {
        let sa = alpha_bar.sqrt();
        let s2 = 1.0 - alpha_bar + alpha_bar * self.variance;
        let zd: Vec<f64> = z.data().iter().map(|&v| f64::from(v)).collect();
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.log_weights)
            .map(|(mu, lw)| {
                let d2: f64 = zd
                    .iter()
                    .zip(mu.data())
                    .map(|(zv, &m)| (zv - sa * f64::from(m)).powi(2))
                    .sum();
                if s2 > 0.0 {
                    lw - d2 / (2.0 * s2)
                } else {
                    *lw
                }
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let responsibilities: Vec<f64> = exps.iter().map(|e| e / norm).collect();

        let gain = if s2 > 0.0 { sa * self.variance / s2 } else { 0.0 };
        let mut mean = vec![0.0; zd.len()];
        for (mu, r) in self.means.iter().zip(&responsibilities) {
            for ((acc, &m), zv) in mean.iter_mut().zip(mu.data()).zip(&zd) {
                let m = f64::from(m);
                *acc += r * (m + gain * (zv - sa * m));
            }
        }
        ToyPosterior { mean, responsibilities }
    }
}

impl Denoiser for ToyDenoiser {
    fn geometry(&self) -> LatentGeometry {
        self.geometry
    }

    fn predict_noise(&mut self, z: &LatentTensor, step: &StepInfo, _cond: &Conditioning) -> Result<LatentTensor> {
        if z.geometry() != self.geometry {
            return Err(Error::Dimension(format!(
                "latent {:?} does not match denoiser geometry {:?}",
                z.geometry(),
                self.geometry
            )));
        }
        let a = step.alpha_bar;
        let noise_scale = (1.0 - a).sqrt();
        if noise_scale < 1e-12 {
            return Ok(LatentTensor::zeros(self.geometry));
        }
        let post = self.posterior(z, a);
        let sa = a.sqrt();
        let eps = z
            .data()
            .iter()
            .zip(&post.mean)
            .map(|(&zv, x0)| ((f64::from(zv) - sa * x0) / noise_scale) as f32)
            .collect();
        LatentTensor::new(self.geometry, eps).map_err(|e| Error::Sampling(e.to_string()))
    }

    fn predict_clean(
        &mut self,
        z: &LatentTensor,
        step: &StepInfo,
        _cond: &Conditioning,
    ) -> Result<Option<LatentTensor>> {
        if z.geometry() != self.geometry {
            return Ok(None);
        }
        let post = self.posterior(z, step.alpha_bar);
        let data = post.mean.iter().map(|&v| v as f32).collect();
        Ok(Some(
            LatentTensor::new(self.geometry, data).map_err(|e| Error::Sampling(e.to_string()))?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry() -> LatentGeometry {
        LatentGeometry::new(2, 3, 3)
    }

    #[test]
    fn single_point_posterior_is_the_point() {
        let mu = LatentTensor::from_fn(geometry(), |c, y, x| (c + 2 * y + 3 * x) as f32 * 0.1);
        let toy = ToyDenoiser::single_point(mu.clone());
        let z = LatentTensor::filled(geometry(), 0.7);
        for a in [0.01, 0.3, 0.9, 0.999] {
            let post = toy.posterior(&z, a);
            for (p, m) in post.mean.iter().zip(mu.data()) {
                assert_eq!(*p, f64::from(*m));
            }
        }
    }

    #[test]
    fn symmetric_modes_at_origin_average() {
        let a = LatentTensor::filled(geometry(), 1.0);
        let b = LatentTensor::filled(geometry(), -1.0);
        let toy = ToyDenoiser::new(vec![(a, 1.0), (b, 3.0)], 0.0).unwrap();
        let post = toy.posterior(&LatentTensor::zeros(geometry()), 0.5);
        assert!((post.responsibilities[0] - 0.25).abs() < 1e-12);
        for v in &post.mean {
            assert!((v - (-0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let modes = (0..4)
                .map(|_| {
                    let m = LatentTensor::from_fn(geometry(), |_, _, _| rng.random_range(-3.0..3.0));
                    (m, rng.random_range(0.1..2.0))
                })
                .collect();
            let toy = ToyDenoiser::new(modes, rng.random_range(0.0..0.5)).unwrap();
            let z = LatentTensor::from_fn(geometry(), |_, _, _| rng.random_range(-5.0..5.0));
            let post = toy.posterior(&z, rng.random_range(0.01..0.99));
            let s: f64 = post.responsibilities.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_modes() {
        assert!(ToyDenoiser::new(Vec::new(), 0.0).is_err());
        let a = LatentTensor::zeros(geometry());
        let b = LatentTensor::zeros(LatentGeometry::new(1, 1, 1));
        assert!(ToyDenoiser::new(vec![(a.clone(), 1.0), (b, 1.0)], 0.0).is_err());
        assert!(ToyDenoiser::new(vec![(a, -1.0)], 0.0).is_err());
    }
}
