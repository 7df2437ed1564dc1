//! Predictive distributions: location-scale Student-t in transformed space and
//! the zero hurdle for intermittent channels.
//!
//! A hurdle variable is zero with probability `π`; otherwise `log1p(x)` follows
//! the Student-t. Densities of the positive branch are taken with respect to
//! `log1p(x)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::tape::t_log_norm;

/// Original-unit magnitude below which a hurdle observation counts as zero.
pub const ZERO_THRESHOLD: f64 = 1e-9;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `-log` density of `μ + σ·T_ν` at `x`. `ν = ∞` gives the Gaussian.
pub fn student_t_nll(x: f64, mu: f64, sigma: f64, nu: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("scale must be positive and finite, got {sigma}")));
    }
    if !(nu > 0.0) {
        return Err(Error::Domain(format!("degrees of freedom must be positive, got {nu}")));
    }
    let z = (x - mu) / sigma;
    if nu.is_infinite() {
        return Ok(HALF_LN_2PI + sigma.ln() + 0.5 * z * z);
    }
    Ok(t_log_norm(nu) + sigma.ln() + 0.5 * (nu + 1.0) * (z * z / nu).ln_1p())
}

pub fn gaussian_nll(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    student_t_nll(x, mu, sigma, f64::INFINITY)
}

/// Hurdle negative log-likelihood of an original-unit observation `x ≥ 0`.
pub fn hurdle_nll(x: f64, pi: f64, mu: f64, sigma: f64, nu: f64) -> Result<f64> {
    if x < 0.0 {
        return Err(Error::Domain(format!("hurdle observation must be ≥ 0, got {x}")));
    }
    if !(0.0..=1.0).contains(&pi) {
        return Err(Error::Domain(format!("zero probability must lie in [0, 1], got {pi}")));
    }
    if x < ZERO_THRESHOLD {
        Ok(-pi.ln())
    } else {
        Ok(-(-pi).ln_1p() + student_t_nll(x.ln_1p(), mu, sigma, nu)?)
    }
}

/// Marginal law of one variable at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarDistribution {
    /// Location and scale in transformed (`log1p` for states) space.
    pub mu: f64,
    pub sigma: f64,
    /// Degrees of freedom; `∞` encodes a Gaussian.
    pub nu: f64,
    /// Zero probability for hurdle variables.
    pub pi: Option<f64>,
    pub log_space: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub vars: Vec<VarDistribution>,
}

impl VarDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && self.sigma > 0.0
            && self.sigma.is_finite()
            && self.nu > 0.0
            && self.pi.is_none_or(|p| (0.0..=1.0).contains(&p));
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid distribution {self:?}")))
        }
    }

    fn to_original(&self, y: f64) -> f64 {
        if self.log_space {
            y.exp_m1()
        } else {
            y
        }
    }

    /// Standard draw of the continuous part (location 0, scale 1).
    fn standard_draw(&self, rng: &mut impl Rng) -> f64 {
        if self.nu.is_infinite() || self.nu > 1e7 {
            rng.sample(StandardNormal)
        } else {
            StudentT::new(self.nu).expect("positive dof").sample(rng)
        }
    }

    /// One draw in original units.
    pub fn draw(&self, rng: &mut impl Rng) -> f64 {
        match self.pi {
            Some(pi) => {
                // always consume two variates so streams stay aligned across π
                let u: f64 = rng.random();
                let t = self.standard_draw(rng);
                if u < pi {
                    0.0
                } else {
                    self.to_original(self.mu + self.sigma * t).max(0.0)
                }
            }
            None => self.to_original(self.mu + self.sigma * self.standard_draw(rng)),
        }
    }

    fn standard_quantile(&self, p: f64) -> f64 {
        if self.nu.is_infinite() || self.nu > 1e7 {
            Normal::standard().inverse_cdf(p)
        } else {
            StudentsT::new(0.0, 1.0, self.nu)
                .expect("positive dof")
                .inverse_cdf(p)
        }
    }

    /// Quantile in original units with the zero mass folded in.
    pub fn quantile(&self, q: f64) -> f64 {
        match self.pi {
            Some(pi) => {
                if q <= pi {
                    0.0
                } else {
                    let p = ((q - pi) / (1.0 - pi)).clamp(0.0, 1.0);
                    self.to_original(self.mu + self.sigma * self.standard_quantile(p))
                        .max(0.0)
                }
            }
            None => self.to_original(self.mu + self.sigma * self.standard_quantile(q)),
        }
    }

    /// `-log` likelihood of an original-unit observation.
    pub fn nll(&self, x: f64) -> Result<f64> {
        match self.pi {
            Some(pi) => hurdle_nll(x, pi, self.mu, self.sigma, self.nu),
            None => {
                let y = if self.log_space { x.ln_1p() } else { x };
                student_t_nll(y, self.mu, self.sigma, self.nu)
            }
        }
    }
}

/// `n` draws per variable in original units, deterministic per seed.
pub fn sample(dist: &StepDistribution, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dist.vars
        .iter()
        .map(|v| {
            v.validate()?;
            Ok((0..n).map(|_| v.draw(&mut rng)).collect())
        })
        .collect()
}

/// Equal-tailed interval per variable in original units.
pub fn predictive_interval(dist: &StepDistribution, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("interval level must lie in (0, 1), got {level}")));
    }
    let tail = 0.5 * (1.0 - level);
    dist.vars
        .iter()
        .map(|v| {
            v.validate()?;
            Ok((v.quantile(tail), v.quantile(1.0 - tail)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cauchy_point() {
        let nll = student_t_nll(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!((nll - std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    #[test]
    fn hurdle_zero_and_reduction() {
        assert!((hurdle_nll(0.0, 0.35, 0.0, 1.0, 5.0).unwrap() - 1.0498221244986778).abs() < 1e-12);
        let x: f64 = 3.0;
        let a = hurdle_nll(x, 0.0, 0.4, 0.7, 5.0).unwrap();
        let b = student_t_nll(x.ln_1p(), 0.4, 0.7, 5.0).unwrap();
        assert_eq!(a, b);
        assert!(hurdle_nll(-1.0, 0.3, 0.0, 1.0, 5.0).is_err());
    }

    #[test]
    fn interval_lower_bound_zero_with_large_mass() {
        let d = StepDistribution {
            vars: vec![VarDistribution {
                mu: 1.0,
                sigma: 0.5,
                nu: 5.0,
                pi: Some(0.5),
                log_space: true,
            }],
        };
        let iv = predictive_interval(&d, 0.95).unwrap();
        assert_eq!(iv[0].0, 0.0);
        assert!(iv[0].1 > 0.0);
    }

    #[test]
    fn all_zero_when_mass_is_one() {
        let d = StepDistribution {
            vars: vec![VarDistribution {
                mu: 1.0,
                sigma: 0.5,
                nu: 5.0,
                pi: Some(1.0),
                log_space: true,
            }],
        };
        assert!(sample(&d, 100, 3).unwrap()[0].iter().all(|&x| x == 0.0));
    }
}
