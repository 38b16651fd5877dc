use serde::{Deserialize, Serialize};

use super::codebook::{make_codebook, stream_noise, NoiseCodebook, NoiseStream};
use super::denoiser::{Conditioning, Denoiser, StepInfo};
use super::pca::{principal_project, PcaOrientation};
use super::schedule::NoiseSchedule;
use super::spectral::low_frequency_project;
use crate::error::{Error, Result};
use crate::ingest::LatentTensor;

const VARIANCE_IDENTITY_TOLERANCE: f64 = 1e-12;

/// What part of the intermediate prediction the codebook selection is
/// steered against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceMode {
    Principal {
        components: usize,
        #[serde(default)]
        orientation: PcaOrientation,
    },
    FullLatent,
    LowFrequency {
        cutoff: f64,
    },
    None,
}

impl GuidanceMode {
    pub fn principal(components: usize) -> Self {
        GuidanceMode::Principal {
            components,
            orientation: PcaOrientation::ChannelFeatures,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        match *self {
            GuidanceMode::Principal { components, .. } if components == 0 || components > channels => {
                Err(Error::InvalidArgument(format!(
                    "principal components must be in 1..={channels}, got {components}"
                )))
            }
            GuidanceMode::LowFrequency { cutoff } if !(cutoff > 0.0 && cutoff <= 1.0) => Err(Error::InvalidArgument(
                format!("low-frequency cutoff must be in (0, 1], got {cutoff}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_guided(&self) -> bool {
        !matches!(self, GuidanceMode::None)
    }
}

/// Intermediate clean-latent estimate and the noise prediction it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct X0Prediction {
    pub x0: LatentTensor,
    pub eps: LatentTensor,
}

fn step_info(sched: &NoiseSchedule, t: usize) -> StepInfo {
    StepInfo {
        index: t,
        train_step: sched.train_step(t),
        alpha_bar: sched.alpha_bar(t),
    }
}

/// `x0 = (z_t - sqrt(1 - a_t) eps) / sqrt(a_t)` with `eps` from the denoiser,
/// unless the denoiser supplies its own clean estimate.
pub fn predict_x0(
    z_t: &LatentTensor,
    t: usize,
    den: &mut dyn Denoiser,
    cond: &Conditioning,
    sched: &NoiseSchedule,
) -> Result<X0Prediction> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Schedule(format!("step {t} outside 1..={}", sched.steps())));
    }
    let info = step_info(sched, t);
    let a = info.alpha_bar;
    if !(a > 0.0) {
        return Err(Error::Schedule(format!("alpha_bar[{t}] must be positive")));
    }
    let eps = den.predict_noise(z_t, &info, cond)?;
    if eps.geometry() != z_t.geometry() {
        return Err(Error::Sampling(format!(
            "denoiser returned {:?} for input {:?}",
            eps.geometry(),
            z_t.geometry()
        )));
    }
    if !eps.is_finite() {
        return Err(Error::Sampling(format!("non-finite noise prediction at step {t}")));
    }
    if let Some(x0) = den.predict_clean(z_t, &info, cond)? {
        if x0.geometry() != z_t.geometry() || !x0.is_finite() {
            return Err(Error::Sampling(format!("invalid clean-latent estimate at step {t}")));
        }
        return Ok(X0Prediction { x0, eps });
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).max(0.0).sqrt());
    let data: Vec<f32> = z_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| ((f64::from(z) - sn * f64::from(e)) / sa) as f32)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampling(format!("non-finite clean-latent estimate at step {t}")));
    }
    Ok(X0Prediction {
        x0: LatentTensor::new(z_t.geometry(), data)?,
        eps,
    })
}

/// `z_proxy - P(z_bar)` for the guidance projection `P`.
pub fn guidance_residual(z_proxy: &LatentTensor, z_bar: &LatentTensor, mode: GuidanceMode) -> Result<LatentTensor> {
    if z_proxy.geometry() != z_bar.geometry() {
        return Err(Error::Dimension(format!(
            "proxy latent {:?} vs prediction {:?}",
            z_proxy.geometry(),
            z_bar.geometry()
        )));
    }
    let projected = match mode {
        GuidanceMode::Principal {
            components,
            orientation,
        } => principal_project(z_bar, components, orientation)?.tensor,
        GuidanceMode::FullLatent => z_bar.clone(),
        GuidanceMode::LowFrequency { cutoff } => low_frequency_project(z_bar, cutoff)?,
        GuidanceMode::None => {
            return Err(Error::InvalidArgument("guidance mode none has no residual".into()));
        }
    };
    Ok(z_proxy.sub(&projected))
}

/// Smallest index attaining the largest inner product with `residual`.
pub fn argmax_alignment(cb: &NoiseCodebook, residual: &LatentTensor) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, entry) in cb.entries.iter().enumerate() {
        if entry.geometry() != residual.geometry() {
            return Err(Error::Dimension(format!(
                "codebook entry {k} is {:?}, residual is {:?}",
                entry.geometry(),
                residual.geometry()
            )));
        }
        let score = entry.dot(residual);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((k, score));
        }
    }
    best.map(|(k, _)| k)
        .ok_or_else(|| Error::InvalidArgument("empty codebook".into()))
}

pub fn select_noise(
    cb: &NoiseCodebook,
    z_proxy: &LatentTensor,
    z_bar: &LatentTensor,
    mode: GuidanceMode,
) -> Result<usize> {
    let residual = guidance_residual(z_proxy, z_bar, mode)?;
    argmax_alignment(cb, &residual)
}

/// Everything the sampler needs besides the running latent.
pub struct SamplerContext<'a> {
    pub denoiser: &'a mut dyn Denoiser,
    pub cond: &'a Conditioning,
    pub schedule: &'a NoiseSchedule,
    pub z_proxy: &'a LatentTensor,
    pub mode: GuidanceMode,
    pub seed: u64,
    pub codebook_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub z_prev: LatentTensor,
    pub x0: LatentTensor,
    /// Codebook index used for the injected noise; `None` when no codebook
    /// noise was injected.
    pub selected: Option<usize>,
}

pub fn ppg_step(z_t: &LatentTensor, t: usize, ctx: &mut SamplerContext<'_>) -> Result<StepOutcome> {
    let coeffs = ctx.schedule.coefficients(t)?;
    let identity = coeffs.alpha_bar_prev
        + (1.0 - coeffs.alpha_bar_prev - coeffs.noise * coeffs.noise)
        + coeffs.noise * coeffs.noise;
    if (identity - 1.0).abs() > VARIANCE_IDENTITY_TOLERANCE {
        return Err(Error::Schedule(format!(
            "variance identity off by {} at step {t}",
            identity - 1.0
        )));
    }
    let pred = predict_x0(z_t, t, ctx.denoiser, ctx.cond, ctx.schedule)?;
    let geometry = z_t.geometry();

    let (noise, selected) = if coeffs.noise == 0.0 {
        (None, None)
    } else if ctx.mode.is_guided() {
        let cb = make_codebook(t, ctx.codebook_size, ctx.seed, geometry)?;
        let k = select_noise(&cb, ctx.z_proxy, &pred.x0, ctx.mode)?;
        (
            Some(cb.entries.into_iter().nth(k).expect("index within codebook")),
            Some(k),
        )
    } else {
        (Some(stream_noise(ctx.seed, NoiseStream::Ancestral, t, geometry)), None)
    };

    let mut out = Vec::with_capacity(geometry.len());
    for i in 0..geometry.len() {
        let mut v = coeffs.signal * f64::from(pred.x0.data()[i]) + coeffs.direction * f64::from(pred.eps.data()[i]);
        if let Some(n) = &noise {
            v += coeffs.noise * f64::from(n.data()[i]);
        }
        out.push(v as f32);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampling(format!("non-finite latent after step {t}")));
    }
    Ok(StepOutcome {
        z_prev: LatentTensor::new(geometry, out)?,
        x0: pred.x0,
        selected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub z0: LatentTensor,
    /// Selected codebook index per step, ordered from `t = T` down to 1.
    pub selections: Vec<Option<usize>>,
}

pub fn sample(z_t: &LatentTensor, ctx: &mut SamplerContext<'_>) -> Result<SampleOutput> {
    ctx.mode.validate(z_t.channels())?;
    if ctx.denoiser.geometry() != z_t.geometry() {
        return Err(Error::Dimension(format!(
            "initial latent {:?} vs denoiser geometry {:?}",
            z_t.geometry(),
            ctx.denoiser.geometry()
        )));
    }
    if ctx.z_proxy.geometry() != z_t.geometry() {
        return Err(Error::Dimension(format!(
            "proxy latent {:?} vs initial latent {:?}",
            ctx.z_proxy.geometry(),
            z_t.geometry()
        )));
    }
    let mut z = z_t.clone();
    let mut selections = Vec::with_capacity(ctx.schedule.steps());
    for t in (1..=ctx.schedule.steps()).rev() {
        let step = ppg_step(&z, t, ctx)?;
        log::debug!("step {t}: selected {:?}", step.selected);
        selections.push(step.selected);
        z = step.z_prev;
    }
    Ok(SampleOutput { z0: z, selections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ImagePlane, LatentGeometry, MaskPlane};
    use crate::ppg::codebook::standard_normal;
    use crate::ppg::denoiser::ToyDenoiser;
    use crate::ppg::schedule::ScheduleConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cond() -> Conditioning {
        Conditioning {
            id: "test".into(),
            infused: ImagePlane::filled(4, 4, &[0.0, 0.0, 0.0]),
            agnostic_mask: MaskPlane::zeros(4, 4),
            prompt: String::new(),
            garment: None,
            cloth_mask: None,
        }
    }

    /// Returns a fixed noise prediction regardless of input.
    struct Fixed(LatentTensor);

    impl Denoiser for Fixed {
        fn geometry(&self) -> LatentGeometry {
            self.0.geometry()
        }
        fn predict_noise(&mut self, _z: &LatentTensor, _s: &StepInfo, _c: &Conditioning) -> Result<LatentTensor> {
            Ok(self.0.clone())
        }
    }

    /// Hides a denoiser's clean estimate so only the inversion path runs.
    struct NoiseOnly<D>(D);

    impl<D: Denoiser> Denoiser for NoiseOnly<D> {
        fn geometry(&self) -> LatentGeometry {
            self.0.geometry()
        }
        fn predict_noise(&mut self, z: &LatentTensor, s: &StepInfo, c: &Conditioning) -> Result<LatentTensor> {
            self.0.predict_noise(z, s, c)
        }
    }

    #[test]
    fn zero_noise_at_unit_alpha_returns_input() {
        let g = LatentGeometry::new(1, 2, 2);
        let sched = NoiseSchedule::from_parts(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let z = LatentTensor::from_fn(g, |_, y, x| (y * 2 + x) as f32);
        let mut den = Fixed(LatentTensor::zeros(g));
        let p = predict_x0(&z, 1, &mut den, &cond(), &sched).unwrap();
        assert_eq!(p.x0, z);
    }

    #[test]
    fn inversion_recovers_clean_latent() {
        let g = LatentGeometry::new(4, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = standard_normal(g, &mut rng);
        let eps = standard_normal(g, &mut rng);
        let a: f64 = 0.37;
        let zt = LatentTensor::from_fn(g, |c, y, xx| {
            (a.sqrt() * f64::from(x.get(c, y, xx)) + (1.0 - a).sqrt() * f64::from(eps.get(c, y, xx))) as f32
        });
        let sched = NoiseSchedule::from_parts(vec![1.0, a], vec![0.0, 0.0]).unwrap();
        let mut den = Fixed(eps);
        let p = predict_x0(&zt, 1, &mut den, &cond(), &sched).unwrap();
        assert!(p.x0.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn toy_inversion_matches_gaussian_posterior() {
        // one Gaussian N(mu, v I): E[x0 | z] = mu + sqrt(a) v / (a v + 1 - a) (z - sqrt(a) mu)
        let g = LatentGeometry::new(2, 3, 3);
        let mu = LatentTensor::from_fn(g, |c, y, x| c as f32 - 0.3 * y as f32 + 0.1 * x as f32);
        let v = 0.4;
        let mut toy = ToyDenoiser::new(vec![(mu.clone(), 1.0)], v).unwrap();
        let z = LatentTensor::from_fn(g, |c, y, x| 0.5 - 0.2 * (c + y) as f32 + 0.05 * x as f32);
        let mut inverted = NoiseOnly(toy.clone());
        for a in [0.05, 0.5, 0.95] {
            let sched = NoiseSchedule::from_parts(vec![1.0, a], vec![0.0, 0.0]).unwrap();
            let p = predict_x0(&z, 1, &mut toy, &cond(), &sched).unwrap();
            let q = predict_x0(&z, 1, &mut inverted, &cond(), &sched).unwrap();
            assert!(p.x0.max_abs_diff(&q.x0) < 1e-5);
            let gain = a.sqrt() * v / (a * v + 1.0 - a);
            let expect = LatentTensor::from_fn(g, |c, y, x| {
                let m = f64::from(mu.get(c, y, x));
                (m + gain * (f64::from(z.get(c, y, x)) - a.sqrt() * m)) as f32
            });
            assert!(p.x0.max_abs_diff(&expect) < 1e-5);
        }
    }

    #[test]
    fn non_finite_prediction_is_a_sampling_error() {
        let g = LatentGeometry::new(1, 1, 2);
        let sched = NoiseSchedule::from_parts(vec![1.0, 0.5], vec![0.0, 0.0]).unwrap();
        let mut den = Fixed(LatentTensor::filled(g, f32::MAX));
        let z = LatentTensor::filled(g, -f32::MAX);
        assert!(matches!(
            predict_x0(&z, 1, &mut den, &cond(), &sched),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn planted_entry_is_selected() {
        let g = LatentGeometry::new(2, 2, 2);
        let r = LatentTensor::from_fn(g, |c, y, _| if c == 0 && y == 0 { 1.0 } else { 0.0 });
        let mut entries: Vec<LatentTensor> = (0..10)
            .map(|k| LatentTensor::from_fn(g, |c, y, x| if c == 1 && (y * 2 + x) == k % 4 { 1.0 } else { 0.0 }))
            .collect();
        entries[7] = LatentTensor::from_fn(g, |c, y, _| if c == 0 && y == 0 { 0.5f32.sqrt() } else { 0.0 });
        let cb = NoiseCodebook { t: 1, entries };
        assert_eq!(argmax_alignment(&cb, &r).unwrap(), 7);
        let zero = LatentTensor::zeros(g);
        assert_eq!(select_noise(&cb, &zero, &zero, GuidanceMode::FullLatent).unwrap(), 0);
    }

    #[test]
    fn selection_matches_exhaustive_loop() {
        let g = LatentGeometry::new(4, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..20u64 {
            let cb = make_codebook(1 + case as usize, 64, case, g).unwrap();
            let proxy = standard_normal(g, &mut rng);
            let bar = standard_normal(g, &mut rng);
            let r = proxy.sub(&bar);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for k in 0..cb.len() {
                let mut s = 0.0;
                for i in 0..g.len() {
                    s += f64::from(cb.entry(k).data()[i]) * f64::from(r.data()[i]);
                }
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            assert_eq!(select_noise(&cb, &proxy, &bar, GuidanceMode::FullLatent).unwrap(), best);
        }
    }

    #[test]
    fn full_rank_principal_equals_full_latent() {
        let g = LatentGeometry::new(3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..30 {
            let cb = make_codebook(3, 64, seed, g).unwrap();
            let proxy = standard_normal(g, &mut rng);
            let bar = standard_normal(g, &mut rng);
            assert_eq!(
                select_noise(&cb, &proxy, &bar, GuidanceMode::principal(3)).unwrap(),
                select_noise(&cb, &proxy, &bar, GuidanceMode::FullLatent).unwrap()
            );
        }
    }

    #[test]
    fn none_mode_has_no_residual() {
        let g = LatentGeometry::new(1, 2, 2);
        let cb = make_codebook(1, 2, 0, g).unwrap();
        let z = LatentTensor::zeros(g);
        assert!(matches!(
            select_noise(&cb, &z, &z, GuidanceMode::None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn deterministic_step_matches_hand_computation() {
        let g = LatentGeometry::new(1, 2, 2);
        let (a_t, a_prev) = (0.25, 0.64);
        let sched = NoiseSchedule::from_parts(vec![1.0, a_prev, a_t], vec![0.0, 0.0, 0.0]).unwrap();
        let z = LatentTensor::new(g, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = LatentTensor::new(g, vec![0.2, 0.4, -0.6, 0.0]).unwrap();
        let mut den = Fixed(eps);
        let c = cond();
        let proxy = LatentTensor::zeros(g);
        let mut ctx = SamplerContext {
            denoiser: &mut den,
            cond: &c,
            schedule: &sched,
            z_proxy: &proxy,
            mode: GuidanceMode::FullLatent,
            seed: 0,
            codebook_size: 4,
        };
        let out = ppg_step(&z, 2, &mut ctx).unwrap();
        // x0 = (z - 0.866025 eps) / 0.5; z_prev = 0.8 x0 + 0.6 eps
        let expect = [1.4428719, -3.5142563, 1.2713844, 4.8];
        for (o, e) in out.z_prev.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }
        assert_eq!(out.selected, None);
    }

    #[test]
    fn unit_previous_alpha_lands_on_prediction() {
        let g = LatentGeometry::new(1, 2, 2);
        let sched = NoiseSchedule::from_parts(vec![1.0, 0.5], vec![0.0, 0.0]).unwrap();
        let z = LatentTensor::new(g, vec![0.3, -0.1, 0.7, 1.1]).unwrap();
        let mut den = Fixed(LatentTensor::new(g, vec![0.5, 0.1, -0.2, 0.0]).unwrap());
        let c = cond();
        let proxy = LatentTensor::zeros(g);
        let mut ctx = SamplerContext {
            denoiser: &mut den,
            cond: &c,
            schedule: &sched,
            z_proxy: &proxy,
            mode: GuidanceMode::principal(1),
            seed: 0,
            codebook_size: 4,
        };
        let out = ppg_step(&z, 1, &mut ctx).unwrap();
        assert_eq!(out.z_prev, out.x0);
    }

    fn run(toy: &mut ToyDenoiser, proxy: &LatentTensor, mode: GuidanceMode, seed: u64, eta: f64) -> SampleOutput {
        let g = toy.geometry();
        let sched = NoiseSchedule::from_config(&ScheduleConfig {
            eta,
            ..Default::default()
        })
        .unwrap();
        let z_t = stream_noise(seed, NoiseStream::InitNoise, 0, g);
        let c = cond();
        let mut ctx = SamplerContext {
            denoiser: toy,
            cond: &c,
            schedule: &sched,
            z_proxy: proxy,
            mode,
            seed,
            codebook_size: 64,
        };
        sample(&z_t, &mut ctx).unwrap()
    }

    #[test]
    fn fifty_step_run_is_bit_reproducible() {
        let g = LatentGeometry::new(4, 8, 6);
        let mut toy = ToyDenoiser::new(
            vec![
                (LatentTensor::filled(g, 1.0), 1.0),
                (LatentTensor::filled(g, -1.0), 1.0),
            ],
            0.05,
        )
        .unwrap();
        let proxy = LatentTensor::filled(g, 0.8);
        let a = run(&mut toy, &proxy, GuidanceMode::principal(3), 5, 1.0);
        let b = run(&mut toy, &proxy, GuidanceMode::principal(3), 5, 1.0);
        assert_eq!(a.selections, b.selections);
        assert!(a
            .z0
            .data()
            .iter()
            .zip(b.z0.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_point_run_converges() {
        let g = LatentGeometry::new(4, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let target = LatentTensor::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
        let mut toy = ToyDenoiser::single_point(target.clone());
        let out = run(&mut toy, &LatentTensor::zeros(g), GuidanceMode::None, 3, 0.0);
        assert!(out.z0.max_abs_diff(&target) < 1e-4);
    }

    #[test]
    fn single_point_residual_is_constant() {
        let g = LatentGeometry::new(3, 4, 4);
        let target = LatentTensor::from_fn(g, |c, y, x| (c as f32 - 1.0) * 0.5 + 0.1 * (y + x) as f32);
        let mut toy = ToyDenoiser::single_point(target.clone());
        let sched = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let c = cond();
        let mut z = stream_noise(1, NoiseStream::InitNoise, 0, g);
        let proxy = LatentTensor::filled(g, 0.25);
        let first = proxy.sub(&target);
        let mut ctx = SamplerContext {
            denoiser: &mut toy,
            cond: &c,
            schedule: &sched,
            z_proxy: &proxy,
            mode: GuidanceMode::FullLatent,
            seed: 1,
            codebook_size: 8,
        };
        for t in (1..=sched.steps()).rev() {
            let step = ppg_step(&z, t, &mut ctx).unwrap();
            assert!(proxy.sub(&step.x0).max_abs_diff(&first) < 1e-6);
            z = step.z_prev;
        }
    }

    #[test]
    fn guidance_pulls_toward_proxy_mode() {
        let g = LatentGeometry::new(3, 4, 4);
        let a = LatentTensor::filled(g, 1.0);
        let b = LatentTensor::filled(g, -1.0);
        let mut toy = ToyDenoiser::new(vec![(a.clone(), 1.0), (b.clone(), 1.0)], 0.05).unwrap();
        let proxy = LatentTensor::filled(g, 0.9);
        let closer = |z: &LatentTensor| z.sub(&a).norm() < z.sub(&b).norm();
        let mut guided = 0;
        let mut plain = 0;
        for seed in 0..100 {
            guided += usize::from(closer(&run(&mut toy, &proxy, GuidanceMode::principal(3), seed, 1.0).z0));
            plain += usize::from(closer(&run(&mut toy, &proxy, GuidanceMode::None, seed, 1.0).z0));
        }
        assert!(guided >= 95);
        assert!(guided >= plain);
    }
}
