//! Paper-risk pair records and JSONL dataset ingestion.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::Assignment;
use crate::schema::{normalize_identifier, BiasDomain, RiskLabel, Schema};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldStep {
    pub name: String,
    pub label: String,
}

/// One study/domain pair with its gold step labels and gold risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub domain: BiasDomain,
    #[serde(default)]
    pub comparison: String,
    #[serde(default)]
    pub outcome: String,
    pub gold_risk: RiskLabel,
    pub gold_steps: Vec<GoldStep>,
    /// Source text of the study. Never read by the scorer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl InstanceRecord {
    /// Normalizes identifiers in place and checks the gold steps against the
    /// domain schema: same names, same order, labels in vocabulary.
    pub fn validate(&mut self, schema: &Schema) -> Result<()> {
        let steps = schema.step_schema(self.domain);
        if self.id.trim().is_empty() {
            return Err(Error::Input("record id is empty".into()));
        }
        if self.gold_steps.len() != steps.len() {
            return Err(Error::Input(format!(
                "record `{}`: domain {} has {} steps, gold_steps has {}",
                self.id,
                self.domain,
                steps.len(),
                self.gold_steps.len()
            )));
        }
        for (gold, spec) in self.gold_steps.iter_mut().zip(steps) {
            gold.name = normalize_identifier(&gold.name);
            gold.label = normalize_identifier(&gold.label);
            if gold.name != spec.name {
                return Err(Error::Input(format!(
                    "record `{}`: step {} should be `{}`, found `{}`",
                    self.id, spec.position, spec.name, gold.name
                )));
            }
            if spec.label_index(&gold.label).is_none() {
                return Err(Error::Input(format!(
                    "record `{}`: label `{}` is not valid for step `{}`",
                    self.id, gold.label, spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn gold_assignment(&self) -> Assignment {
        self.gold_steps
            .iter()
            .map(|g| (g.name.as_str(), g.label.as_str()))
            .collect()
    }
}

/// A rejected dataset line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub records: Vec<InstanceRecord>,
    pub errors: Vec<LineError>,
    pub warnings: Vec<String>,
}

/// Parses JSONL text, one record per non-blank line. In strict mode the first
/// bad line aborts the load.
pub fn parse_dataset(text: &str, schema: &Schema, strict: bool) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<InstanceRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|mut r| r.validate(schema).map(|_| r).map_err(|e| e.to_string()))
            .and_then(|r| {
                if seen.insert(r.id.clone()) {
                    Ok(r)
                } else {
                    Err(format!("duplicate record id `{}`", r.id))
                }
            });
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) if strict => {
                return Err(Error::Dataset {
                    line: line_no,
                    message,
                })
            }
            Err(message) => out.errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    if out.records.is_empty() && out.errors.is_empty() {
        out.warnings.push("dataset is empty".into());
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, schema: &Schema, strict: bool) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, schema, strict)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The randomisation-domain record used throughout the tests.
    pub fn hawkey_2015() -> InstanceRecord {
        InstanceRecord {
            id: "hawkey-2015-A".into(),
            domain: BiasDomain::A,
            comparison: "Stem Cell vs Placebo or control".into(),
            outcome: "Clinical Remission".into(),
            gold_risk: RiskLabel::Low,
            gold_steps: [
                ("identify_randomization_report", "reported"),
                ("classify_randomization_method", "random"),
                ("assess_sequence_predictability", "unpredictable"),
                ("baseline_imbalance", "none"),
            ]
            .into_iter()
            .map(|(n, l)| GoldStep {
                name: n.into(),
                label: l.into(),
            })
            .collect(),
            context: None,
            provenance: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAWKEY_LINE: &str = r#"{"id":"hawkey-2015-A","domain":"A","comparison":"Stem Cell vs Placebo or control","outcome":"Clinical Remission","gold_risk":"+","gold_steps":[{"name":"Identify_randomization_report","label":"reported"},{"name":"Classify_randomization_method","label":"random"},{"name":"Assess_sequence_predictability","label":"unpredictable"},{"name":"Baseline_Imbalance","label":"none"}]}"#;

    #[test]
    fn hawkey_record_validates() {
        let loaded = parse_dataset(HAWKEY_LINE, Schema::builtin(), true).unwrap();
        assert_eq!(loaded.records.len(), 1);
        let r = &loaded.records[0];
        assert_eq!(r.gold_risk, RiskLabel::Low);
        assert_eq!(r.gold_steps[3].name, "baseline_imbalance");
        assert_eq!(r, &fixtures::hawkey_2015());
    }

    #[test]
    fn vocabulary_violation_names_the_step() {
        let bad = HAWKEY_LINE.replace(r#""label":"none""#, r#""label":"sometimes""#);
        let err = parse_dataset(&bad, Schema::builtin(), true).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("baseline_imbalance")
                && msg.contains("sometimes")
                && msg.contains("line 1"),
            "{msg}"
        );
    }

    #[test]
    fn lenient_mode_reports_line_numbers() {
        let text = format!(
            "{HAWKEY_LINE}\n\nnot json\n{}",
            HAWKEY_LINE.replace("\"A\"", "\"Q\"")
        );
        let loaded = parse_dataset(&text, Schema::builtin(), false).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(
            loaded.errors.iter().map(|e| e.line).collect::<Vec<_>>(),
            [3, 4]
        );
        assert!(loaded.errors[1].message.contains("unknown domain"));
    }

    #[test]
    fn empty_file_warns() {
        let loaded = parse_dataset("", Schema::builtin(), true).unwrap();
        assert!(loaded.records.is_empty());
        assert_eq!(loaded.warnings, ["dataset is empty"]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!("{HAWKEY_LINE}\n{HAWKEY_LINE}");
        let loaded = parse_dataset(&text, Schema::builtin(), false).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert!(loaded.errors[0].message.contains("duplicate"));
    }

    #[test]
    fn wrong_step_order_is_rejected() {
        let mut r = fixtures::hawkey_2015();
        r.gold_steps.swap(0, 1);
        assert!(r.validate(Schema::builtin()).is_err());
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, format!("{HAWKEY_LINE}\n")).unwrap();
        let loaded = load_dataset(&path, Schema::builtin(), true).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), Schema::builtin(), true),
            Err(Error::Io(_))
        ));
    }
}
