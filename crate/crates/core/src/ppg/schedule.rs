use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta training schedule strided down to the inference step count,
/// with DDIM stochasticity `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            steps: 50,
            eta: 1.0,
        }
    }
}

/// Per-step cumulative signal levels `alpha_bar[t]` and noise scales
/// `sigma[t]` for `t = 0..=T`, with `alpha_bar[0] = 1` and `sigma[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    train_steps: Vec<usize>,
}

/// Coefficients of one sampling update
/// `z_{t-1} = signal * x0 + direction * eps + noise * e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha_bar_prev: f64,
    pub signal: f64,
    pub direction: f64,
    pub noise: f64,
}

impl StepCoefficients {
    /// `alpha_bar_prev + (1 - alpha_bar_prev - sigma^2) + sigma^2`; equals 1
    /// for any admissible step.
    pub fn variance_sum(&self) -> f64 {
        self.signal * self.signal + self.direction * self.direction + self.noise * self.noise
    }
}

/// DDIM noise scale between two signal levels.
pub fn ddim_sigma(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if alpha_bar >= 1.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).max(0.0);
    let jump = (1.0 - alpha_bar / alpha_bar_prev).max(0.0);
    eta * (ratio * jump).sqrt()
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 || cfg.steps > cfg.train_steps {
            return Err(Error::Schedule(format!(
                "inference steps must be in 1..={}, got {}",
                cfg.train_steps, cfg.steps
            )));
        }
        if !(0.0..1.0).contains(&cfg.beta_start) || !(0.0..1.0).contains(&cfg.beta_end) {
            return Err(Error::Schedule("betas must lie in [0, 1)".into()));
        }
        if !(cfg.eta >= 0.0 && cfg.eta <= 1.0) {
            return Err(Error::Schedule(format!("eta must be in [0, 1], got {}", cfg.eta)));
        }
        let n = cfg.train_steps;
        let mut train_alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for i in 0..n {
            let beta = if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            };
            acc *= 1.0 - beta;
            train_alpha_bar.push(acc);
        }
        let t_count = cfg.steps;
        let mut train_steps = vec![0];
        let mut alpha_bars = vec![1.0];
        for t in 1..=t_count {
            let tau = ((t * n) as f64 / t_count as f64).round() as usize - 1;
            train_steps.push(tau);
            alpha_bars.push(train_alpha_bar[tau]);
        }
        let mut sigmas = vec![0.0];
        for t in 1..=t_count {
            sigmas.push(ddim_sigma(alpha_bars[t], alpha_bars[t - 1], cfg.eta));
        }
        Self::with_train_steps(alpha_bars, sigmas, train_steps)
    }

    /// Builds a schedule from explicit `alpha_bar[0..=T]` and `sigma[0..=T]`.
    pub fn from_parts(alpha_bars: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        let train_steps = (0..alpha_bars.len()).collect();
        Self::with_train_steps(alpha_bars, sigmas, train_steps)
    }

    fn with_train_steps(alpha_bars: Vec<f64>, sigmas: Vec<f64>, train_steps: Vec<usize>) -> Result<Self> {
        if alpha_bars.len() < 2 || sigmas.len() != alpha_bars.len() {
            return Err(Error::Schedule(
                "need alpha_bar and sigma for t = 0..=T with T >= 1".into(),
            ));
        }
        if alpha_bars[0] != 1.0 {
            return Err(Error::Schedule("alpha_bar[0] must be 1".into()));
        }
        for t in 1..alpha_bars.len() {
            let (a, prev) = (alpha_bars[t], alpha_bars[t - 1]);
            if !(a > 0.0 && a <= prev) {
                return Err(Error::Schedule(format!(
                    "alpha_bar must be positive and non-increasing (t = {t})"
                )));
            }
            let s = sigmas[t];
            if !(s >= 0.0) || s * s > 1.0 - prev + 1e-15 {
                return Err(Error::Schedule(format!(
                    "sigma[{t}]^2 = {} exceeds 1 - alpha_bar[{}] = {}",
                    s * s,
                    t - 1,
                    1.0 - prev
                )));
            }
        }
        Ok(Self {
            alpha_bars,
            sigmas,
            train_steps,
        })
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bars.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    /// Training-time timestep that inference step `t` corresponds to.
    pub fn train_step(&self, t: usize) -> usize {
        self.train_steps[t]
    }

    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule(format!("step {t} outside 1..={}", self.steps())));
        }
        let prev = self.alpha_bars[t - 1];
        let sigma = self.sigmas[t];
        let residual = 1.0 - prev - sigma * sigma;
        if residual < -1e-15 {
            return Err(Error::Schedule(format!(
                "sigma[{t}]^2 exceeds 1 - alpha_bar[{}]",
                t - 1
            )));
        }
        Ok(StepCoefficients {
            alpha_bar_prev: prev,
            signal: prev.sqrt(),
            direction: residual.max(0.0).sqrt(),
            noise: sigma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.train_step(50), 999);
        assert_eq!(s.train_step(1), 19);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t).powi(2) <= 1.0 - s.alpha_bar(t - 1) + 1e-15);
        }
        // first step lands on alpha_bar = 1, so no noise there
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigma(50) > 0.0);
    }

    #[test]
    fn variance_identity_holds_every_step() {
        for eta in [0.0, 0.5, 1.0] {
            let cfg = ScheduleConfig {
                eta,
                ..Default::default()
            };
            let s = NoiseSchedule::from_config(&cfg).unwrap();
            for t in 1..=s.steps() {
                let c = s.coefficients(t).unwrap();
                let sum = c.alpha_bar_prev + (1.0 - c.alpha_bar_prev - c.noise * c.noise) + c.noise * c.noise;
                assert!((sum - 1.0).abs() <= 1e-12);
                assert!((c.variance_sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn oversized_sigma_is_a_schedule_error() {
        let r = NoiseSchedule::from_parts(vec![1.0, 0.5, 0.2], vec![0.0, 0.0, 0.9]);
        assert!(matches!(r, Err(Error::Schedule(_))));
        assert!(NoiseSchedule::from_parts(vec![0.9, 0.5], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn eta_zero_is_deterministic_ddim() {
        let s = NoiseSchedule::from_config(&ScheduleConfig {
            eta: 0.0,
            ..Default::default()
        })
        .unwrap();
        assert!((1..=s.steps()).all(|t| s.sigma(t) == 0.0));
    }
}
