//! Verifiable process reward: step-name and step-label verification, the
//! terminal outcome reward, and the format reward, composed under one of the
//! ablation modes.
//!
//! Predicted step `t` is compared with gold step `t`. A missing predicted step
//! scores zero; predicted steps beyond the gold length are counted in
//! `extra_steps` and otherwise ignored.

use serde::{Deserialize, Serialize};

use crate::dataset::InstanceRecord;
use crate::error::{Error, Result};
use crate::schema::{normalize_identifier, RiskLabel};
use crate::trace::{format_reward, ParseReport, ReasoningTrace};

/// Per-step weight pair overriding the shared `w_name` / `w_label`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepWeight {
    pub name: f64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub w_name: f64,
    pub w_label: f64,
    pub w_outcome: f64,
    pub w_format: f64,
    /// Divide the process sum by its maximum attainable value so that it
    /// lies in [0, 1]. Under the default weights the maximum is `T_gold`.
    pub normalize_process: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_step: Option<Vec<StepWeight>>,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_name: 0.5,
            w_label: 0.5,
            w_outcome: 1.0,
            w_format: 1.0,
            normalize_process: true,
            per_step: None,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.w_name, self.w_label, self.w_outcome, self.w_format];
        if let Some(ps) = &self.per_step {
            all.extend(ps.iter().flat_map(|w| [w.name, w.label]));
        }
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "reward weights must be finite and nonnegative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(
                "at least one reward weight must be positive".into(),
            ));
        }
        Ok(())
    }

    fn at(&self, t: usize) -> Result<StepWeight> {
        match &self.per_step {
            None => Ok(StepWeight {
                name: self.w_name,
                label: self.w_label,
            }),
            Some(ps) => ps.get(t).copied().ok_or_else(|| {
                Error::Config(format!(
                    "per_step weights have {} entries, step {} requested",
                    ps.len(),
                    t + 1
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Step names and labels are both verified.
    #[default]
    Full,
    /// Only step names are verified; label weight is forced to zero.
    StepsOnly,
    /// No per-step reward at all: the outcome reward alone.
    OutcomeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardMode {
    pub variant: RewardVariant,
    pub include_outcome: bool,
}

impl Default for RewardMode {
    fn default() -> Self {
        RewardMode {
            variant: RewardVariant::Full,
            include_outcome: true,
        }
    }
}

impl RewardMode {
    pub fn new(variant: RewardVariant, include_outcome: bool) -> Result<Self> {
        let mode = RewardMode {
            variant,
            include_outcome,
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == RewardVariant::OutcomeOnly && !self.include_outcome {
            return Err(Error::Config(
                "outcome_only mode requires include_outcome".into(),
            ));
        }
        Ok(())
    }
}

/// Weights and mode together; this is the reward configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(flatten)]
    pub weights: RewardWeights,
    #[serde(flatten)]
    pub mode: RewardMode,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.mode.validate()
    }

    pub fn from_json(document: &str) -> Result<Self> {
        let config: RewardConfig = serde_json::from_str(document)
            .map_err(|e| Error::Config(format!("reward config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_mode(mut self, variant: RewardVariant, include_outcome: bool) -> Self {
        self.mode = RewardMode {
            variant,
            include_outcome,
        };
        self
    }

    /// Applies per-request overrides and revalidates.
    pub fn patched(&self, patch: &RewardConfigPatch) -> Result<Self> {
        let mut c = self.clone();
        macro_rules! apply {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = patch.$field.clone() { $target = v; })*
            };
        }
        apply! {
            w_name => c.weights.w_name,
            w_label => c.weights.w_label,
            w_outcome => c.weights.w_outcome,
            w_format => c.weights.w_format,
            normalize_process => c.weights.normalize_process,
            variant => c.mode.variant,
            include_outcome => c.mode.include_outcome,
        }
        if patch.per_step.is_some() {
            c.weights.per_step = patch.per_step.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Partial reward configuration; absent fields keep their current value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfigPatch {
    pub w_name: Option<f64>,
    pub w_label: Option<f64>,
    pub w_outcome: Option<f64>,
    pub w_format: Option<f64>,
    pub normalize_process: Option<bool>,
    pub per_step: Option<Vec<StepWeight>>,
    pub variant: Option<RewardVariant>,
    pub include_outcome: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub name_score: f64,
    pub label_score: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub per_step: Vec<StepScore>,
    pub outcome: u8,
    pub format: u8,
    pub process_total: f64,
    pub total: f64,
    pub mode: RewardMode,
    /// Predicted steps past the gold length; they earn nothing.
    pub extra_steps: usize,
}

/// Binary exact match of two identifiers after normalization.
pub fn match_score(predicted: &str, gold: &str) -> f64 {
    if normalize_identifier(predicted) == normalize_identifier(gold) {
        1.0
    } else {
        0.0
    }
}

/// 1 iff the predicted risk equals the gold risk.
pub fn outcome_reward(predicted: RiskLabel, gold: RiskLabel) -> u8 {
    u8::from(predicted == gold)
}

fn effective_weight(weights: &RewardWeights, mode: RewardMode, t: usize) -> Result<StepWeight> {
    let w = weights.at(t)?;
    Ok(match mode.variant {
        RewardVariant::Full => w,
        RewardVariant::StepsOnly => StepWeight {
            name: w.name,
            label: 0.0,
        },
        RewardVariant::OutcomeOnly => StepWeight {
            name: 0.0,
            label: 0.0,
        },
    })
}

fn score_step(
    t: usize,
    trace: Option<&ReasoningTrace>,
    gold: &InstanceRecord,
    weights: &RewardWeights,
    mode: RewardMode,
) -> Result<StepScore> {
    let w = effective_weight(weights, mode, t)?;
    let g = &gold.gold_steps[t];
    let (name_score, label_score) = match trace.and_then(|tr| tr.steps.get(t)) {
        Some(p) => (
            match_score(&p.name, &g.name),
            match_score(&p.label, &g.label),
        ),
        None => (0.0, 0.0),
    };
    Ok(StepScore {
        name_score,
        label_score,
        reward: w.name * name_score + w.label * label_score,
    })
}

/// Step-level reward `r_t` for the 1-based step index `t`.
pub fn step_reward(
    t: usize,
    trace: &ReasoningTrace,
    gold: &InstanceRecord,
    weights: &RewardWeights,
    mode: RewardMode,
) -> Result<f64> {
    let len = gold.gold_steps.len();
    if t == 0 || t > len {
        return Err(Error::StepIndex { index: t, len });
    }
    Ok(score_step(t - 1, Some(trace), gold, weights, mode)?.reward)
}

fn compose(
    trace: Option<&ReasoningTrace>,
    gold: &InstanceRecord,
    config: &RewardConfig,
    format_bit: u8,
) -> Result<RewardBreakdown> {
    let RewardConfig { weights, mode } = config;
    let mode = *mode;
    let t_gold = gold.gold_steps.len();
    let per_step = (0..t_gold)
        .map(|t| score_step(t, trace, gold, weights, mode))
        .collect::<Result<Vec<_>>>()?;
    let sum: f64 = per_step.iter().map(|s| s.reward).sum();
    let process_total = if weights.normalize_process {
        let max: f64 = (0..t_gold)
            .map(|t| effective_weight(weights, mode, t).map(|w| w.name + w.label))
            .sum::<Result<f64>>()?;
        if max > 0.0 {
            sum / max
        } else {
            0.0
        }
    } else {
        sum
    };
    let outcome = trace.map_or(0, |tr| outcome_reward(tr.risk, gold.gold_risk));
    let format = u8::from(format_bit != 0);
    let mut total = process_total;
    if mode.include_outcome {
        total += weights.w_outcome * f64::from(outcome);
    }
    total += weights.w_format * f64::from(format);
    let extra_steps = trace.map_or(0, |tr| tr.steps.len().saturating_sub(t_gold));
    Ok(RewardBreakdown {
        per_step,
        outcome,
        format,
        process_total,
        total,
        mode,
        extra_steps,
    })
}

/// Full reward `R(Y; x)` of a parsed trace against its gold record.
pub fn total_reward(
    trace: &ReasoningTrace,
    gold: &InstanceRecord,
    config: &RewardConfig,
    format_bit: u8,
) -> Result<RewardBreakdown> {
    if trace.domain != gold.domain {
        return Err(Error::DomainMismatch {
            trace: trace.domain.to_string(),
            gold: gold.domain.to_string(),
        });
    }
    config.validate()?;
    compose(Some(trace), gold, config, format_bit)
}

/// Reward for a parse report. Unparsable output scores zero on every
/// component.
pub fn score_report(
    report: &ParseReport,
    gold: &InstanceRecord,
    config: &RewardConfig,
) -> Result<RewardBreakdown> {
    match &report.trace {
        Some(trace) => total_reward(trace, gold, config, format_reward(report)),
        None => {
            config.validate()?;
            compose(None, gold, config, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::hawkey_2015;
    use crate::schema::BiasDomain;
    use crate::trace::TraceStep;
    use proptest::prelude::*;

    fn trace_from(gold: &InstanceRecord, labels: &[&str], risk: RiskLabel) -> ReasoningTrace {
        ReasoningTrace {
            domain: gold.domain,
            steps: gold
                .gold_steps
                .iter()
                .zip(labels)
                .map(|(g, l)| TraceStep::new(&g.name, l, ""))
                .collect(),
            risk,
        }
    }

    fn perfect(gold: &InstanceRecord) -> ReasoningTrace {
        let labels: Vec<&str> = gold.gold_steps.iter().map(|g| g.label.as_str()).collect();
        trace_from(gold, &labels, gold.gold_risk)
    }

    #[test]
    fn match_scores() {
        assert_eq!(match_score("reported", "reported"), 1.0);
        assert_eq!(match_score("reported", "not_reported"), 0.0);
        assert_eq!(match_score("Reported ", "reported"), 1.0);
    }

    #[test]
    fn outcome_scores() {
        assert_eq!(outcome_reward(RiskLabel::Low, RiskLabel::Low), 1);
        assert_eq!(outcome_reward(RiskLabel::Moderate, RiskLabel::High), 0);
        let gold = hawkey_2015();
        assert_eq!(outcome_reward(RiskLabel::Low, gold.gold_risk), 1);
    }

    #[test]
    fn step_rewards() {
        let gold = hawkey_2015();
        let w = RewardWeights::default();
        let mode = RewardMode::default();
        let tr = trace_from(
            &gold,
            &["reported", "non_random", "unpredictable"],
            RiskLabel::Low,
        );
        assert_eq!(step_reward(1, &tr, &gold, &w, mode).unwrap(), 1.0);
        assert_eq!(step_reward(2, &tr, &gold, &w, mode).unwrap(), 0.5);
        assert_eq!(step_reward(4, &tr, &gold, &w, mode).unwrap(), 0.0);
        assert!(matches!(
            step_reward(0, &tr, &gold, &w, mode),
            Err(Error::StepIndex { .. })
        ));
        assert!(matches!(
            step_reward(5, &tr, &gold, &w, mode),
            Err(Error::StepIndex { index: 5, len: 4 })
        ));
    }

    #[test]
    fn perfect_trace_default_config() {
        let gold = hawkey_2015();
        let b = total_reward(&perfect(&gold), &gold, &RewardConfig::default(), 1).unwrap();
        assert_eq!(b.process_total, 1.0);
        assert_eq!(b.outcome, 1);
        assert_eq!(b.total, 3.0);
    }

    #[test]
    fn outcome_only_wrong_risk() {
        let gold = hawkey_2015();
        let config = RewardConfig::default().with_mode(RewardVariant::OutcomeOnly, true);
        let mut tr = perfect(&gold);
        tr.risk = RiskLabel::High;
        let b = total_reward(&tr, &gold, &config, 1).unwrap();
        assert_eq!(b.process_total, 0.0);
        assert_eq!(b.total, config.weights.w_format);
        assert!(b.per_step.iter().all(|s| s.reward == 0.0));
    }

    #[test]
    fn steps_only_without_outcome_ignores_labels() {
        let gold = hawkey_2015();
        let config = RewardConfig::default().with_mode(RewardVariant::StepsOnly, false);
        let tr = trace_from(
            &gold,
            &["not_reported", "non_random", "predictable", "likely"],
            RiskLabel::Low,
        );
        let b = total_reward(&tr, &gold, &config, 0).unwrap();
        assert_eq!(b.process_total, 1.0);
        assert_eq!(b.total, 1.0);
    }

    #[test]
    fn domain_mismatch() {
        let gold = hawkey_2015();
        let mut tr = perfect(&gold);
        tr.domain = BiasDomain::B;
        assert!(matches!(
            total_reward(&tr, &gold, &RewardConfig::default(), 1),
            Err(Error::DomainMismatch { .. })
        ));
    }

    #[test]
    fn extra_steps_are_counted_not_scored() {
        let gold = hawkey_2015();
        let mut tr = perfect(&gold);
        tr.steps.push(TraceStep::new("bonus_step", "yes", ""));
        let b = total_reward(&tr, &gold, &RewardConfig::default(), 1).unwrap();
        assert_eq!(b.extra_steps, 1);
        assert_eq!(b.total, 3.0);
    }

    #[test]
    fn unparsable_report_scores_zero() {
        let gold = hawkey_2015();
        let report = crate::trace::parse_trace("garbage", BiasDomain::A);
        let b = score_report(&report, &gold, &RewardConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(b.per_step.len(), 4);
    }

    #[test]
    fn config_validation() {
        assert!(RewardMode::new(RewardVariant::OutcomeOnly, false).is_err());
        let mut c = RewardConfig::default();
        c.weights.w_name = -1.0;
        assert!(c.validate().is_err());
        let zero = RewardConfig {
            weights: RewardWeights {
                w_name: 0.0,
                w_label: 0.0,
                w_outcome: 0.0,
                w_format: 0.0,
                ..Default::default()
            },
            mode: RewardMode::default(),
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn config_document_and_patch() {
        let doc = r#"{"w_name":0.25,"w_label":0.75,"w_outcome":2,"w_format":0,"normalize_process":false,"variant":"steps_only","include_outcome":false}"#;
        let c = RewardConfig::from_json(doc).unwrap();
        assert_eq!(c.weights.w_label, 0.75);
        assert_eq!(
            c.mode,
            RewardMode {
                variant: RewardVariant::StepsOnly,
                include_outcome: false
            }
        );
        let partial = RewardConfig::from_json(r#"{"variant":"outcome_only"}"#).unwrap();
        assert_eq!(partial.weights, RewardWeights::default());

        let patched = RewardConfig::default()
            .patched(&RewardConfigPatch {
                w_format: Some(0.0),
                ..Default::default()
            })
            .unwrap();
        assert_eq!(patched.weights.w_format, 0.0);
        assert!(RewardConfig::default()
            .patched(&RewardConfigPatch {
                variant: Some(RewardVariant::OutcomeOnly),
                include_outcome: Some(false),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn per_step_weights() {
        let gold = hawkey_2015();
        let mut c = RewardConfig::default();
        c.weights.normalize_process = false;
        c.weights.per_step = Some(vec![
            StepWeight {
                name: 0.0,
                label: 2.0
            };
            4
        ]);
        let tr = trace_from(
            &gold,
            &["reported", "non_random", "unpredictable", "none"],
            RiskLabel::Low,
        );
        let b = total_reward(&tr, &gold, &c, 1).unwrap();
        assert_eq!(b.process_total, 6.0);
        c.weights.per_step = Some(vec![
            StepWeight {
                name: 1.0,
                label: 1.0
            };
            2
        ]);
        assert!(matches!(
            total_reward(&tr, &gold, &c, 1),
            Err(Error::Config(_))
        ));
    }

    fn labels_strategy() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(any::<bool>(), 4)
    }

    fn weights_strategy() -> impl Strategy<Value = RewardConfig> {
        (
            0.0..2.0f64,
            0.0..2.0f64,
            0.0..2.0f64,
            0.0..2.0f64,
            any::<bool>(),
            0..3usize,
            any::<bool>(),
        )
            .prop_map(|(wn, wl, wo, wf, norm, v, inc)| {
                let variant = [
                    RewardVariant::Full,
                    RewardVariant::StepsOnly,
                    RewardVariant::OutcomeOnly,
                ][v];
                RewardConfig {
                    weights: RewardWeights {
                        w_name: wn,
                        w_label: wl,
                        w_outcome: wo,
                        w_format: wf + 0.01,
                        normalize_process: norm,
                        per_step: None,
                    },
                    mode: RewardMode {
                        variant,
                        include_outcome: inc || variant == RewardVariant::OutcomeOnly,
                    },
                }
            })
    }

    /// Trace whose step `t` label is gold when `correct[t]`, else the other
    /// label of the step.
    fn trace_with(gold: &InstanceRecord, correct: &[bool], risk: RiskLabel) -> ReasoningTrace {
        let schema = crate::schema::step_schema(gold.domain);
        let labels: Vec<String> = gold
            .gold_steps
            .iter()
            .zip(schema)
            .zip(correct)
            .map(|((g, spec), &ok)| {
                if ok {
                    g.label.clone()
                } else {
                    spec.labels.iter().find(|l| **l != g.label).unwrap().clone()
                }
            })
            .collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        trace_from(gold, &refs, risk)
    }

    proptest! {
        #[test]
        fn bounded(correct in labels_strategy(), config in weights_strategy(), risk in 0..3usize) {
            let gold = hawkey_2015();
            let tr = trace_with(&gold, &correct, RiskLabel::ALL[risk]);
            let b = total_reward(&tr, &gold, &config, 1).unwrap();
            for s in &b.per_step {
                prop_assert!((0.0..=1.0).contains(&s.name_score) && (0.0..=1.0).contains(&s.label_score));
                prop_assert!(s.reward >= 0.0 && s.reward <= config.weights.w_name + config.weights.w_label + 1e-12);
            }
            if config.weights.normalize_process {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b.process_total));
            }
            let again = total_reward(&tr, &gold, &config, 1).unwrap();
            prop_assert_eq!(b, again);
        }

        #[test]
        fn fixing_a_label_never_lowers_total(correct in labels_strategy(), config in weights_strategy(), t in 0..4usize) {
            let gold = hawkey_2015();
            let mut fixed = correct.clone();
            fixed[t] = true;
            let before = total_reward(&trace_with(&gold, &correct, RiskLabel::Low), &gold, &config, 1).unwrap();
            let after = total_reward(&trace_with(&gold, &fixed, RiskLabel::Low), &gold, &config, 1).unwrap();
            prop_assert!(after.total >= before.total);
        }

        #[test]
        fn steps_only_ignores_labels(a in labels_strategy(), b in labels_strategy(), config in weights_strategy()) {
            let mut config = config;
            config.mode.variant = RewardVariant::StepsOnly;
            let gold = hawkey_2015();
            let ra = total_reward(&trace_with(&gold, &a, RiskLabel::Low), &gold, &config, 1).unwrap();
            let rb = total_reward(&trace_with(&gold, &b, RiskLabel::Low), &gold, &config, 1).unwrap();
            prop_assert_eq!(ra.total, rb.total);
        }

        #[test]
        fn outcome_only_equals_outcome_reward(correct in labels_strategy(), risk in 0..3usize, norm in any::<bool>()) {
            let gold = hawkey_2015();
            let config = RewardConfig {
                weights: RewardWeights { w_format: 0.0, normalize_process: norm, ..Default::default() },
                mode: RewardMode { variant: RewardVariant::OutcomeOnly, include_outcome: true },
            };
            let tr = trace_with(&gold, &correct, RiskLabel::ALL[risk]);
            let b = total_reward(&tr, &gold, &config, 1).unwrap();
            prop_assert_eq!(b.total, f64::from(outcome_reward(tr.risk, gold.gold_risk)));
        }
    }
}
