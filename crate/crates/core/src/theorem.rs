//! Advantage sign separation for a two-component reward mixture.
//!
//! A trajectory is correct (event C) with probability `p`; its reward is then
//! drawn from `dist_c`, otherwise from `dist_i`. When `E[R|C] > E[R|C^c]` the
//! large-group advantage `(R − m)/σ` has positive conditional mean on C and
//! negative conditional mean on C^c. The Monte Carlo path computes the finite
//! group z-scores that GRPO actually uses, so at small G it carries an O(1/G)
//! bias relative to the closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::group::{normalize_advantages, OptimConfig};

/// A bounded reward law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardLaw {
    PointMass {
        value: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Normal(mean, sd) conditioned on [low, high].
    TruncatedNormal {
        mean: f64,
        sd: f64,
        low: f64,
        high: f64,
    },
}

fn std_normal() -> Normal {
    Normal::standard()
}

impl RewardLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RewardLaw::PointMass { value } => value.is_finite(),
            RewardLaw::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            RewardLaw::TruncatedNormal {
                mean,
                sd,
                low,
                high,
            } => {
                [mean, sd, low, high].iter().all(|v| v.is_finite())
                    && sd > 0.0
                    && low < high
                    && self.mass() > 1e-12
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Assumption(format!(
                "reward law {self:?} is not a bounded distribution"
            )))
        }
    }

    fn standardized(&self) -> (f64, f64) {
        match *self {
            RewardLaw::TruncatedNormal {
                mean,
                sd,
                low,
                high,
            } => ((low - mean) / sd, (high - mean) / sd),
            _ => (0.0, 0.0),
        }
    }

    fn mass(&self) -> f64 {
        let (a, b) = self.standardized();
        std_normal().cdf(b) - std_normal().cdf(a)
    }

    pub fn mean(&self) -> f64 {
        match *self {
            RewardLaw::PointMass { value } => value,
            RewardLaw::Uniform { low, high } => 0.5 * (low + high),
            RewardLaw::TruncatedNormal { mean, sd, .. } => {
                let (a, b) = self.standardized();
                let n = std_normal();
                mean + sd * (n.pdf(a) - n.pdf(b)) / self.mass()
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            RewardLaw::PointMass { .. } => 0.0,
            RewardLaw::Uniform { low, high } => (high - low).powi(2) / 12.0,
            RewardLaw::TruncatedNormal { sd, .. } => {
                let (a, b) = self.standardized();
                let n = std_normal();
                let z = self.mass();
                let r = (n.pdf(a) - n.pdf(b)) / z;
                sd * sd * (1.0 + (a * n.pdf(a) - b * n.pdf(b)) / z - r * r)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardLaw::PointMass { value } => value,
            RewardLaw::Uniform { low, high } => rng.random_range(low..high),
            RewardLaw::TruncatedNormal {
                mean,
                sd,
                low,
                high,
            } => {
                let (a, b) = self.standardized();
                let n = std_normal();
                let (ua, ub) = (n.cdf(a), n.cdf(b));
                let u = ua + (ub - ua) * rng.random::<f64>();
                (mean + sd * n.inverse_cdf(u)).clamp(low, high)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardLawSpec {
    /// Probability of the correctness event C.
    pub p: f64,
    pub dist_c: RewardLaw,
    pub dist_i: RewardLaw,
}

impl RewardLawSpec {
    pub fn new(p: f64, dist_c: RewardLaw, dist_i: RewardLaw) -> Result<Self> {
        let spec = RewardLawSpec { p, dist_c, dist_i };
        spec.validate()?;
        Ok(spec)
    }

    /// Point masses at `mu_c` and `mu_i`.
    pub fn bernoulli(p: f64, mu_c: f64, mu_i: f64) -> Result<Self> {
        Self::new(
            p,
            RewardLaw::PointMass { value: mu_c },
            RewardLaw::PointMass { value: mu_i },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Assumption(format!(
                "p must lie in (0, 1), got {}",
                self.p
            )));
        }
        self.dist_c.validate()?;
        self.dist_i.validate()?;
        if self.mu_c() <= self.mu_i() {
            return Err(Error::Assumption(format!(
                "correct trajectories need a strictly larger expected reward: mu_c={} mu_i={}",
                self.mu_c(),
                self.mu_i()
            )));
        }
        Ok(())
    }

    pub fn mu_c(&self) -> f64 {
        self.dist_c.mean()
    }

    pub fn mu_i(&self) -> f64 {
        self.dist_i.mean()
    }

    /// Mixture mean `m`.
    pub fn mixture_mean(&self) -> f64 {
        self.p * self.mu_c() + (1.0 - self.p) * self.mu_i()
    }

    /// Mixture standard deviation `σ` (law of total variance).
    pub fn mixture_std(&self) -> f64 {
        let (p, mc, mi) = (self.p, self.mu_c(), self.mu_i());
        let second =
            p * (self.dist_c.variance() + mc * mc) + (1.0 - p) * (self.dist_i.variance() + mi * mi);
        let m = self.mixture_mean();
        (second - m * m).max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub analytic_pos: f64,
    pub analytic_neg: f64,
    pub empirical_pos: f64,
    pub empirical_neg: f64,
    pub trials: usize,
    pub g: usize,
    /// Larger of the two normal-approximation 95% half-widths.
    pub ci_halfwidth: f64,
    pub ci_halfwidth_pos: f64,
    pub ci_halfwidth_neg: f64,
    pub samples_pos: usize,
    pub samples_neg: usize,
    /// Trials whose group had zero reward variance; excluded from the means.
    pub zero_variance_trials: usize,
    /// Per-token scale applied to the advantages (1 unless scaled).
    pub scale: f64,
}

impl SeparationResult {
    pub fn signs_separate(&self) -> bool {
        self.empirical_pos > 0.0 && self.empirical_neg < 0.0
    }

    /// Largest absolute gap between empirical and analytic values.
    pub fn deviation(&self) -> f64 {
        (self.empirical_pos - self.analytic_pos)
            .abs()
            .max((self.empirical_neg - self.analytic_neg).abs())
    }
}

/// Closed-form limits `(E[A|C], E[A|C^c])` with `A = (R − m)/σ`.
pub fn analytic_gap(spec: &RewardLawSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let delta = spec.mu_c() - spec.mu_i();
    let sigma = spec.mixture_std();
    Ok(((1.0 - spec.p) * delta / sigma, -spec.p * delta / sigma))
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn halfwidth(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let var = ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0);
        1.96 * (var / n).sqrt()
    }
}

/// Samples `trials` groups of `g` rewards, z-scores each group and pools the
/// advantages by correctness. The half-width treats pooled advantages as
/// independent draws.
pub fn simulate_separation(
    spec: &RewardLawSpec,
    g: usize,
    trials: usize,
    seed: u64,
) -> Result<SeparationResult> {
    let (analytic_pos, analytic_neg) = analytic_gap(spec)?;
    if g < 2 {
        return Err(Error::GroupSize(g));
    }
    if trials == 0 {
        return Err(Error::Input("trials must be at least 1".into()));
    }
    let config = OptimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rewards = vec![0.0; g];
    let mut correct = vec![false; g];
    let (mut pos, mut neg) = (Moments::default(), Moments::default());
    let mut zero_variance_trials = 0;
    for _ in 0..trials {
        for (r, c) in rewards.iter_mut().zip(correct.iter_mut()) {
            *c = rng.random_bool(spec.p);
            *r = if *c {
                spec.dist_c.sample(&mut rng)
            } else {
                spec.dist_i.sample(&mut rng)
            };
        }
        let adv = normalize_advantages(&rewards, &config)?;
        if adv.is_degenerate() {
            zero_variance_trials += 1;
            continue;
        }
        for (a, c) in adv.values.iter().zip(&correct) {
            if *c {
                pos.push(*a);
            } else {
                neg.push(*a);
            }
        }
    }
    if pos.n == 0 || neg.n == 0 {
        return Err(Error::Input(format!(
            "no usable {} trajectories in {trials} trials",
            if pos.n == 0 { "correct" } else { "incorrect" }
        )));
    }
    let (hp, hn) = (pos.halfwidth(), neg.halfwidth());
    Ok(SeparationResult {
        analytic_pos,
        analytic_neg,
        empirical_pos: pos.mean(),
        empirical_neg: neg.mean(),
        trials,
        g,
        ci_halfwidth: hp.max(hn),
        ci_halfwidth_pos: hp,
        ci_halfwidth_neg: hn,
        samples_pos: pos.n,
        samples_neg: neg.n,
        zero_variance_trials,
        scale: 1.0,
    })
}

/// Same simulation with every token advantage scaled by `c`.
pub fn dapo_scaling_check(
    spec: &RewardLawSpec,
    c: f64,
    g: usize,
    trials: usize,
    seed: u64,
) -> Result<SeparationResult> {
    if !c.is_finite() || c < 0.0 {
        return Err(Error::Contract(format!(
            "token weight must be finite and nonnegative, got {c}"
        )));
    }
    let mut r = simulate_separation(spec, g, trials, seed)?;
    if c != 1.0 {
        r.analytic_pos *= c;
        r.analytic_neg *= c;
        r.empirical_pos *= c;
        r.empirical_neg *= c;
        r.ci_halfwidth *= c;
        r.ci_halfwidth_pos *= c;
        r.ci_halfwidth_neg *= c;
        r.scale = c;
    }
    Ok(r)
}
