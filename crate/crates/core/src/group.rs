//! Group-relative advantages and the clipped surrogate objectives of GRPO and
//! DAPO, plus DAPO's dynamic-sampling filter and a linear overlong penalty.
//!
//! The kernels work on supplied rewards and per-token probability ratios
//! only. Besides the objective value they return its partial derivatives with
//! respect to every ratio and every KL input, so a caller that knows how its
//! ratios depend on parameters can chain the gradient through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Grpo,
    Dapo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ZeroVariancePolicy {
    /// A group whose rewards are all equal gets all-zero advantages.
    #[default]
    AllZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlongShaping {
    pub soft_limit: usize,
    pub hard_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub algo: Algo,
    /// Symmetric clip radius used by GRPO. `f64::INFINITY` disables clipping.
    pub eps: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub zero_variance_policy: ZeroVariancePolicy,
    /// Off unless set.
    pub overlong: Option<OverlongShaping>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algo: Algo::Grpo,
            eps: 0.2,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.0,
            zero_variance_policy: ZeroVariancePolicy::AllZero,
            overlong: None,
        }
    }
}

impl OptimConfig {
    pub fn grpo() -> Self {
        OptimConfig::default()
    }

    pub fn dapo() -> Self {
        OptimConfig {
            algo: Algo::Dapo,
            ..OptimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps", self.eps),
            ("eps_low", self.eps_low),
            ("eps_high", self.eps_high),
            ("beta", self.beta),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        if let Some(o) = self.overlong {
            overlong_penalty(0, o.soft_limit, o.hard_limit)?;
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        match self.algo {
            Algo::Grpo => (1.0 - self.eps, 1.0 + self.eps),
            Algo::Dapo => (1.0 - self.eps_low, 1.0 + self.eps_high),
        }
    }
}

/// One prompt's G sampled trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub rewards: Vec<f64>,
    /// `token_ratios[i][t]` is p_{i,t}; `|y_i|` is the inner length.
    pub token_ratios: Vec<Vec<f64>>,
    #[serde(default)]
    pub token_kl: Option<Vec<Vec<f64>>>,
    pub correctness: Vec<bool>,
    /// DAPO per-token advantage scales c_{i,t}: nonnegative, mean 1 over all
    /// tokens of the group. Absent means uniform.
    #[serde(default)]
    pub token_weights: Option<Vec<Vec<f64>>>,
}

impl GroupBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.token_ratios.iter().map(Vec::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.rewards.len();
        if g < 2 {
            return Err(Error::GroupSize(g));
        }
        if self.token_ratios.len() != g || self.correctness.len() != g {
            return Err(Error::Input(format!(
                "group of {g} rewards has {} ratio rows and {} correctness flags",
                self.token_ratios.len(),
                self.correctness.len()
            )));
        }
        for (i, row) in self.token_ratios.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Input(format!("trajectory {i} has no tokens")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::NonFinite(format!(
                    "trajectory {i} has an invalid probability ratio"
                )));
            }
        }
        let check_shape = |what: &str, rows: &[Vec<f64>]| -> Result<()> {
            if rows.len() != g
                || rows
                    .iter()
                    .zip(&self.token_ratios)
                    .any(|(a, b)| a.len() != b.len())
            {
                return Err(Error::Input(format!(
                    "{what} must have the same shape as token_ratios"
                )));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{what} contains a non-finite value"
                )));
            }
            Ok(())
        };
        if let Some(kl) = &self.token_kl {
            check_shape("token_kl", kl)?;
        }
        if let Some(c) = &self.token_weights {
            check_shape("token_weights", c)?;
            let flat: Vec<f64> = c.iter().flatten().copied().collect();
            if flat.iter().any(|w| *w < 0.0) {
                return Err(Error::Input("token_weights must be nonnegative".into()));
            }
            let mean = flat.iter().sum::<f64>() / flat.len() as f64;
            if (mean - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!(
                    "token_weights must have mean 1, got {mean}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub group_mean: f64,
    /// Population standard deviation of the rewards.
    pub group_std: f64,
}

impl AdvantageVector {
    pub fn is_degenerate(&self) -> bool {
        self.group_std == 0.0
    }
}

/// Z-scores rewards with the population mean and variance of the group.
pub fn normalize_advantages(rewards: &[f64], config: &OptimConfig) -> Result<AdvantageVector> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupSize(g));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {bad}")));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if all_equal || std == 0.0 {
        let ZeroVariancePolicy::AllZero = config.zero_variance_policy;
        return Ok(AdvantageVector {
            values: vec![0.0; g],
            group_mean: rewards[0],
            group_std: 0.0,
        });
    }
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        group_mean: mean,
        group_std: std,
    })
}

/// Keeps a group iff it holds both a correct and an incorrect trajectory.
pub fn dapo_filter(correctness: &[bool]) -> bool {
    let correct = correctness.iter().filter(|c| **c).count();
    correct > 0 && correct < correctness.len()
}

/// `min(p·A, clip(p, lo, hi)·A)` and its derivative in `p`.
pub fn clipped_term(p: f64, a: f64, lo: f64, hi: f64) -> (f64, f64) {
    let unclipped = p * a;
    let clipped = p.clamp(lo, hi) * a;
    if unclipped <= clipped {
        (unclipped, a)
    } else {
        (clipped, 0.0)
    }
}

/// Per-token pieces of a surrogate objective for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTerms {
    pub token_terms: Vec<Vec<f64>>,
    /// ∂objective/∂p_{i,t}.
    pub ratio_grads: Vec<Vec<f64>>,
    /// ∂objective/∂kl_{i,t}; zero when no KL term enters.
    pub kl_grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    /// Value to maximize.
    pub objective: f64,
    /// Token-averaged KL penalty that was subtracted (before scaling by β).
    pub kl: f64,
    pub groups: Vec<GroupTerms>,
}

fn check_advantages(batch: &GroupBatch, adv: &AdvantageVector) -> Result<()> {
    if adv.values.len() != batch.len() {
        return Err(Error::Input(format!(
            "{} advantages for a group of {}",
            adv.values.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// GRPO objective: token terms averaged over each trajectory, then over the
/// group, minus β times the KL inputs averaged the same way.
pub fn grpo_loss(
    batch: &GroupBatch,
    adv: &AdvantageVector,
    config: &OptimConfig,
) -> Result<Surrogate> {
    if config.algo != Algo::Grpo {
        return Err(Error::Contract(
            "grpo_loss called with a non-GRPO config".into(),
        ));
    }
    config.validate()?;
    batch.validate()?;
    check_advantages(batch, adv)?;
    if config.beta > 0.0 && batch.token_kl.is_none() {
        return Err(Error::Input("beta > 0 requires token_kl".into()));
    }
    let (lo, hi) = config.bounds();
    let g = batch.len() as f64;
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut terms = GroupTerms {
        token_terms: vec![],
        ratio_grads: vec![],
        kl_grads: vec![],
    };
    for (i, row) in batch.token_ratios.iter().enumerate() {
        let scale = 1.0 / (g * row.len() as f64);
        let (vals, grads): (Vec<f64>, Vec<f64>) = row
            .iter()
            .map(|&p| clipped_term(p, adv.values[i], lo, hi))
            .unzip();
        objective += scale * vals.iter().sum::<f64>();
        if let Some(kl) = &batch.token_kl {
            kl_total += scale * kl[i].iter().sum::<f64>();
        }
        terms
            .ratio_grads
            .push(grads.iter().map(|d| d * scale).collect());
        terms.kl_grads.push(vec![-config.beta * scale; row.len()]);
        terms.token_terms.push(vals);
    }
    Ok(Surrogate {
        objective: objective - config.beta * kl_total,
        kl: kl_total,
        groups: vec![terms],
    })
}

/// DAPO objective over the kept groups: token terms with asymmetric clipping,
/// scaled by `token_weights` when present, summed and divided by the total
/// token count of all groups. No KL term.
pub fn dapo_loss(
    batches: &[GroupBatch],
    advs: &[AdvantageVector],
    config: &OptimConfig,
) -> Result<Surrogate> {
    if config.algo != Algo::Dapo {
        return Err(Error::Contract(
            "dapo_loss called with a non-DAPO config".into(),
        ));
    }
    config.validate()?;
    if batches.len() != advs.len() {
        return Err(Error::Input(format!(
            "{} groups but {} advantage vectors",
            batches.len(),
            advs.len()
        )));
    }
    for (k, (b, a)) in batches.iter().zip(advs).enumerate() {
        b.validate()?;
        check_advantages(b, a)?;
        if !dapo_filter(&b.correctness) {
            return Err(Error::Contract(format!(
                "group {k} does not pass the dynamic-sampling filter"
            )));
        }
    }
    let total_tokens: usize = batches.iter().flat_map(|b| b.lengths()).sum();
    if total_tokens == 0 {
        return Ok(Surrogate {
            objective: 0.0,
            kl: 0.0,
            groups: vec![],
        });
    }
    let norm = 1.0 / total_tokens as f64;
    let (lo, hi) = config.bounds();
    let mut objective = 0.0;
    let mut groups = Vec::with_capacity(batches.len());
    for (b, a) in batches.iter().zip(advs) {
        let mut terms = GroupTerms {
            token_terms: vec![],
            ratio_grads: vec![],
            kl_grads: vec![],
        };
        for (i, row) in b.token_ratios.iter().enumerate() {
            let mut vals = Vec::with_capacity(row.len());
            let mut grads = Vec::with_capacity(row.len());
            for (t, &p) in row.iter().enumerate() {
                let c = b.token_weights.as_ref().map_or(1.0, |w| w[i][t]);
                let (v, d) = clipped_term(p, a.values[i], lo, hi);
                vals.push(c * v);
                grads.push(c * d * norm);
            }
            objective += norm * vals.iter().sum::<f64>();
            terms.kl_grads.push(vec![0.0; row.len()]);
            terms.ratio_grads.push(grads);
            terms.token_terms.push(vals);
        }
        groups.push(terms);
    }
    Ok(Surrogate {
        objective,
        kl: 0.0,
        groups,
    })
}

/// Linear length penalty: 0 up to `soft_limit`, falling to −1 at
/// `hard_limit`, −1 beyond.
pub fn overlong_penalty(length: usize, soft_limit: usize, hard_limit: usize) -> Result<f64> {
    if soft_limit == 0 || soft_limit > hard_limit {
        return Err(Error::Config(format!(
            "invalid overlong limits soft={soft_limit} hard={hard_limit}"
        )));
    }
    Ok(if length <= soft_limit {
        0.0
    } else if length >= hard_limit {
        -1.0
    } else {
        -((length - soft_limit) as f64) / ((hard_limit - soft_limit) as f64)
    })
}

/// Adds the overlong penalty to each reward when shaping is configured.
pub fn shape_rewards(rewards: &[f64], lengths: &[usize], config: &OptimConfig) -> Result<Vec<f64>> {
    if rewards.len() != lengths.len() {
        return Err(Error::Input("rewards and lengths differ in size".into()));
    }
    match config.overlong {
        None => Ok(rewards.to_vec()),
        Some(o) => rewards
            .iter()
            .zip(lengths)
            .map(|(r, &l)| Ok(r + overlong_penalty(l, o.soft_limit, o.hard_limit)?))
            .collect(),
    }
}
