use crate::error::{Result, StoicError};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SDE_BETA_MIN: f64 = 0.1;
pub const DEFAULT_SDE_BETA_MAX: f64 = 20.0;
/// Smallest continuous time the reverse SDE is integrated down to.
pub const SDE_EPS: f64 = 1e-3;

/// Discrete variance-preserving schedule over `t = 1..=T` plus the continuous `β(t)`
/// line used by the SDE sampler. Arrays are indexed by `t − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    /// Per-step retention `1 − βₜ`.
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sde_beta_min: f64,
    pub sde_beta_max: f64,
}

/// Linear βₜ from `beta_start` to `beta_end` inclusive, ᾱ by cumulative product.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(StoicError::invalid("make_schedule", "T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(StoicError::invalid(
            "make_schedule",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
        ));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sde_beta_min: DEFAULT_SDE_BETA_MIN,
        sde_beta_max: DEFAULT_SDE_BETA_MAX,
    })
}

impl NoiseSchedule {
    /// Linear schedule whose endpoints scale as `1000/T` so that the total noise `Σβ`
    /// matches the T=1000, 1e-4 → 0.02 default (and the continuous 0.1 → 20 line) for any T.
    pub fn scaled(steps: usize) -> Result<NoiseSchedule> {
        let k = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        make_schedule(steps, DEFAULT_BETA_START * k, DEFAULT_BETA_END * k)
    }

    pub fn with_sde(mut self, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
        if !(beta_min >= 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(StoicError::invalid(
                "schedule",
                format!("need 0 <= sde_beta_min <= sde_beta_max, got {beta_min}, {beta_max}"),
            ));
        }
        self.sde_beta_min = beta_min;
        self.sde_beta_max = beta_max;
        Ok(self)
    }

    pub fn check_t(&self, op: &'static str, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(StoicError::invalid(
                op,
                format!("timestep {t} outside 1..={}", self.steps),
            ));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱₜ with the convention ᾱ₀ = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Signal scale √ᾱₜ.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar_at(t).sqrt()
    }

    /// Noise variance σₜ² = 1 − ᾱₜ; `alpha_bar_at(t) + sigma_sq(t) == 1.0` holds exactly.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar_at(t)
    }

    /// Noise scale σₜ = √(1 − ᾱₜ).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma_sq(t).sqrt()
    }

    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar_at(t);
        ab / (1.0 - ab)
    }

    /// Posterior variance β̃ₜ = βₜ(1 − ᾱₜ₋₁)/(1 − ᾱₜ).
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta_at(t) * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))
    }

    /// Continuous β(t) = β_min + t(β_max − β_min).
    pub fn sde_beta(&self, t: f64) -> f64 {
        self.sde_beta_min + t * (self.sde_beta_max - self.sde_beta_min)
    }

    /// Continuous ᾱ(t) = exp(−½t²(β_max − β_min) − tβ_min).
    pub fn sde_alpha_bar(&self, t: f64) -> f64 {
        (-0.5 * t * t * (self.sde_beta_max - self.sde_beta_min) - t * self.sde_beta_min).exp()
    }

    pub fn sde_sigma(&self, t: f64) -> f64 {
        (1.0 - self.sde_alpha_bar(t)).sqrt()
    }

    /// Nearest discrete timestep for a continuous time in (0, 1].
    pub fn discrete_index(&self, t: f64) -> usize {
        ((t * self.steps as f64).round() as usize).clamp(1, self.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints_and_single_step() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar_at(1), 0.9999);
        assert_eq!(s.beta_at(1000), 0.02);
        let one = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar_at(1), 0.5);
        assert_eq!(NoiseSchedule::scaled(1000).unwrap(), s);
    }

    #[test]
    fn variance_is_preserved_exactly() {
        for steps in [1000, 200, 50] {
            let s = NoiseSchedule::scaled(steps).unwrap();
            assert!((0..=steps)
                .all(|t| (s.alpha_bar_at(t) + s.sigma_sq(t) - 1.0).abs() <= f64::EPSILON));
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn scaled_schedules_keep_total_noise() {
        let s = NoiseSchedule::scaled(200).unwrap();
        assert!((s.beta_at(1) - 5e-4).abs() < 1e-15 && (s.beta_at(200) - 0.1).abs() < 1e-15);
        assert!(s.alpha_bar_at(200) < 1e-4);
    }

    #[test]
    fn continuous_line_and_index_map() {
        let s = NoiseSchedule::scaled(1000).unwrap();
        assert_eq!(s.sde_beta(0.0), 0.1);
        assert_eq!(s.sde_beta(1.0), 20.0);
        assert_eq!(s.discrete_index(1.0), 1000);
        assert_eq!(s.discrete_index(1e-4), 1);
        let zero = s.clone().with_sde(0.0, 0.0).unwrap();
        assert_eq!(zero.sde_beta(0.7), 0.0);
    }
}
