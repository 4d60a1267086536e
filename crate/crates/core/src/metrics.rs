//! Accuracy, macro-F1, coherence and coherent accuracy over scored records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{Assignment, RuleTableSet};
use crate::schema::{BiasDomain, RiskLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub domain: BiasDomain,
    /// `None` when the model output could not be parsed.
    pub predicted_risk: Option<RiskLabel>,
    pub gold_risk: RiskLabel,
    /// The model's own step labels, keyed by step name.
    pub step_labels: Option<Assignment>,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.predicted_risk == Some(self.gold_risk)
    }
}

/// How records whose coherence cannot be evaluated are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoherenceMode {
    /// Excluded from the coherence mean and counted separately.
    Strict,
    /// Scored as incoherent.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummary {
    /// `Some(C_i)` for evaluated records, `None` for excluded ones.
    pub per_record: Vec<Option<bool>>,
    pub mean: f64,
    pub excluded: usize,
}

/// `C_i` for one record: the decision table applied to the record's own
/// labels agrees with its predicted risk. `None` if labels or risk are
/// missing or do not form a complete valid assignment.
pub fn record_coherence(record: &EvalRecord, rules: &RuleTableSet) -> Option<bool> {
    let predicted = record.predicted_risk?;
    let labels = record.step_labels.as_ref()?;
    let table = rules.table(record.domain);
    table.evaluate_macro(labels).ok().map(|r| r == predicted)
}

pub fn coherence(
    records: &[EvalRecord],
    rules: &RuleTableSet,
    mode: CoherenceMode,
) -> Result<CoherenceSummary> {
    let mut per_record = Vec::with_capacity(records.len());
    let mut excluded = 0;
    for r in records {
        let c = record_coherence(r, rules);
        per_record.push(match (c, mode) {
            (Some(c), _) => Some(c),
            (None, CoherenceMode::Lenient) => Some(false),
            (None, CoherenceMode::Strict) => {
                excluded += 1;
                None
            }
        });
    }
    let included = per_record.iter().flatten().count();
    let coherent = per_record.iter().flatten().filter(|c| **c).count();
    let mean = if included == 0 {
        0.0
    } else {
        coherent as f64 / included as f64
    };
    Ok(CoherenceSummary {
        per_record,
        mean,
        excluded,
    })
}

/// Coherent-and-correct count over the total record count.
pub fn coherent_accuracy(records: &[EvalRecord], rules: &RuleTableSet) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let hits = records
        .iter()
        .filter(|r| r.correct() && record_coherence(r, rules) == Some(true))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: RiskLabel,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of gold records with this label.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy counts unparsable predictions as wrong. Macro-F1 averages over
/// the classes that occur among the gold labels.
pub fn classification_metrics(records: &[EvalRecord]) -> Result<Classification> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    let per_class: Vec<ClassMetrics> = RiskLabel::ALL
        .iter()
        .map(|&label| {
            let tp = records
                .iter()
                .filter(|r| r.gold_risk == label && r.predicted_risk == Some(label))
                .count();
            let predicted = records
                .iter()
                .filter(|r| r.predicted_risk == Some(label))
                .count();
            let support = records.iter().filter(|r| r.gold_risk == label).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let present: Vec<f64> = per_class
        .iter()
        .filter(|c| c.support > 0)
        .map(|c| c.f1)
        .collect();
    Ok(Classification {
        accuracy: ratio(correct, records.len()),
        macro_f1: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub coherence: f64,
    pub coherent_accuracy: f64,
    /// Coherent-and-correct over the coherent count; `None` without any
    /// coherent record.
    pub ca_conditional: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub unparsable_count: usize,
    pub coherence_mode: CoherenceMode,
    pub coherence_excluded: usize,
}

impl MetricsReport {
    pub fn compute(
        records: &[EvalRecord],
        rules: &RuleTableSet,
        mode: CoherenceMode,
    ) -> Result<Self> {
        let cls = classification_metrics(records)?;
        let coh = coherence(records, rules, mode)?;
        let coherent: Vec<&EvalRecord> = records
            .iter()
            .zip(&coh.per_record)
            .filter(|(_, c)| **c == Some(true))
            .map(|(r, _)| r)
            .collect();
        let hits = coherent.iter().filter(|r| r.correct()).count();
        Ok(MetricsReport {
            n: records.len(),
            accuracy: cls.accuracy,
            macro_f1: cls.macro_f1,
            coherence: coh.mean,
            coherent_accuracy: ratio(hits, records.len()),
            ca_conditional: (!coherent.is_empty()).then(|| ratio(hits, coherent.len())),
            per_class: cls.per_class,
            unparsable_count: records
                .iter()
                .filter(|r| r.predicted_risk.is_none())
                .count(),
            coherence_mode: mode,
            coherence_excluded: coh.excluded,
        })
    }

    /// Fixed-width text rendering for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("records            {}\n", self.n));
        out.push_str(&format!("unparsable         {}\n", self.unparsable_count));
        out.push_str(&format!("accuracy           {:.4}\n", self.accuracy));
        out.push_str(&format!("macro_f1           {:.4}\n", self.macro_f1));
        out.push_str(&format!("coherence          {:.4}\n", self.coherence));
        out.push_str(&format!(
            "coherent_accuracy  {:.4}\n",
            self.coherent_accuracy
        ));
        if let Some(c) = self.ca_conditional {
            out.push_str(&format!("ca_conditional     {c:.4}\n"));
        }
        out.push_str("\nclass     precision  recall  f1      support\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<9} {:<10.4} {:<7.4} {:<7.4} {}\n",
                c.label.as_str(),
                c.precision,
                c.recall,
                c.f1,
                c.support
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(values: [&str; 4]) -> Assignment {
        [
            "identify_randomization_report",
            "classify_randomization_method",
            "assess_sequence_predictability",
            "baseline_imbalance",
        ]
        .into_iter()
        .zip(values)
        .collect()
    }

    fn rec(pred: Option<RiskLabel>, gold: RiskLabel, steps: Option<Assignment>) -> EvalRecord {
        EvalRecord {
            instance_id: "x".into(),
            domain: BiasDomain::A,
            predicted_risk: pred,
            gold_risk: gold,
            step_labels: steps,
        }
    }

    const CLEAN: [&str; 4] = ["reported", "random", "unpredictable", "none"];

    #[test]
    fn coherence_examples() {
        let rules = RuleTableSet::builtin();
        let good = rec(Some(RiskLabel::Low), RiskLabel::Low, Some(labels(CLEAN)));
        let bad = rec(Some(RiskLabel::High), RiskLabel::Low, Some(labels(CLEAN)));
        assert_eq!(record_coherence(&good, rules), Some(true));
        assert_eq!(record_coherence(&bad, rules), Some(false));
        let s = coherence(&[good, bad], rules, CoherenceMode::Lenient).unwrap();
        assert_eq!(s.mean, 0.5);
    }

    #[test]
    fn strict_and_lenient_modes() {
        let rules = RuleTableSet::builtin();
        let good = rec(Some(RiskLabel::Low), RiskLabel::Low, Some(labels(CLEAN)));
        let unparsable = rec(None, RiskLabel::Low, None);
        let strict = coherence(
            &[good.clone(), unparsable.clone()],
            rules,
            CoherenceMode::Strict,
        )
        .unwrap();
        assert_eq!((strict.mean, strict.excluded), (1.0, 1));
        let lenient = coherence(&[good, unparsable], rules, CoherenceMode::Lenient).unwrap();
        assert_eq!((lenient.mean, lenient.excluded), (0.5, 0));
    }

    #[test]
    fn four_cell_ca() {
        let rules = RuleTableSet::builtin();
        let records = [
            rec(Some(RiskLabel::Low), RiskLabel::Low, Some(labels(CLEAN))),
            rec(Some(RiskLabel::Low), RiskLabel::High, Some(labels(CLEAN))),
            rec(Some(RiskLabel::High), RiskLabel::High, Some(labels(CLEAN))),
            rec(Some(RiskLabel::High), RiskLabel::Low, Some(labels(CLEAN))),
        ];
        assert_eq!(coherent_accuracy(&records, rules).unwrap(), 0.25);
        let report = MetricsReport::compute(&records, rules, CoherenceMode::Lenient).unwrap();
        assert_eq!(report.coherent_accuracy, 0.25);
        assert_eq!(report.ca_conditional, Some(0.5));
    }

    #[test]
    fn macro_f1_example() {
        let records = [
            rec(Some(RiskLabel::Low), RiskLabel::Low, None),
            rec(Some(RiskLabel::High), RiskLabel::Low, None),
            rec(Some(RiskLabel::High), RiskLabel::High, None),
        ];
        let c = classification_metrics(&records).unwrap();
        assert!((c.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.per_class[1].support, 0);
    }

    #[test]
    fn unparsable_and_empty() {
        let records = vec![rec(None, RiskLabel::Low, None); 3];
        let c = classification_metrics(&records).unwrap();
        assert_eq!(c.accuracy, 0.0);
        assert!(classification_metrics(&[]).is_err());
        let report =
            MetricsReport::compute(&records, RuleTableSet::builtin(), CoherenceMode::Lenient)
                .unwrap();
        assert_eq!(report.unparsable_count, 3);
        assert_eq!(report.ca_conditional, None);
        assert!(report.to_table().contains("macro_f1"));
    }

    #[test]
    fn incomplete_labels_are_unevaluable() {
        let mut partial = labels(CLEAN);
        partial = partial.iter().take(3).collect();
        let r = rec(Some(RiskLabel::Low), RiskLabel::Low, Some(partial));
        assert_eq!(record_coherence(&r, RuleTableSet::builtin()), None);
    }
}
