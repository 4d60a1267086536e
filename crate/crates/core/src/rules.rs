//! Decision macros: ordered guard lists mapping a complete step-label
//! assignment to a risk label.
//!
//! A table is evaluated first-match-wins: the first guard whose step carries
//! the guarded label decides the risk, otherwise the table default applies.
//! Domain A ships the randomisation macro exactly; the tables for B through I
//! are engine-designed defaults in the same early-exit style and can be
//! replaced wholesale through the rule-table document.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{normalize_identifier, BiasDomain, RiskLabel, Schema, StepSpec};

/// The shipped rule-table document.
pub const DEFAULT_RULES_JSON: &str = include_str!("../config/rules.json");

/// Largest truth table [`RuleTable::enumerate_truth_table`] builds by default.
pub const DEFAULT_TRUTH_TABLE_BOUND: u128 = 1_000_000;

static BUILTIN: LazyLock<RuleTableSet> = LazyLock::new(|| {
    RuleTableSet::from_json(DEFAULT_RULES_JSON, Schema::builtin())
        .expect("shipped rule tables are valid")
});

/// Step name → label mapping, stored in canonical form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(BTreeMap<String, String>);

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: &str, label: &str) {
        self.0
            .insert(normalize_identifier(step), normalize_identifier(label));
    }

    pub fn get(&self, step: &str) -> Option<&str> {
        self.0.get(&normalize_identifier(step)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl<S: AsRef<str>, L: AsRef<str>> FromIterator<(S, L)> for Assignment {
    fn from_iter<I: IntoIterator<Item = (S, L)>>(iter: I) -> Self {
        let mut a = Assignment::new();
        for (s, l) in iter {
            a.insert(s.as_ref(), l.as_ref());
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guard {
    pub step: String,
    pub label: String,
    pub risk: RiskLabel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    domain: BiasDomain,
    steps: Vec<StepSpec>,
    guards: Vec<Guard>,
    // (step index, label index) per guard, parallel to `guards`.
    compiled: Vec<(usize, usize)>,
    default: RiskLabel,
}

/// One row of an exhaustive truth table, labels in schema step order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TruthRow {
    pub labels: Vec<String>,
    pub risk: RiskLabel,
}

impl TruthRow {
    pub fn assignment(&self, steps: &[StepSpec]) -> Assignment {
        steps
            .iter()
            .zip(&self.labels)
            .map(|(s, l)| (s.name.as_str(), l.as_str()))
            .collect()
    }
}

impl RuleTable {
    /// Validates `guards` against the domain's steps.
    pub fn new(
        domain: BiasDomain,
        steps: &[StepSpec],
        guards: Vec<Guard>,
        default: RiskLabel,
    ) -> Result<Self> {
        let mut compiled = Vec::with_capacity(guards.len());
        let mut normalized = Vec::with_capacity(guards.len());
        for (i, g) in guards.into_iter().enumerate() {
            let step_name = normalize_identifier(&g.step);
            let label = normalize_identifier(&g.label);
            let Some(step_idx) = steps.iter().position(|s| s.name == step_name) else {
                return Err(Error::RuleValidation(format!(
                    "domain {domain} guard #{} (step `{}`, label `{}`): unknown step",
                    i + 1,
                    g.step,
                    g.label
                )));
            };
            let Some(label_idx) = steps[step_idx].label_index(&label) else {
                return Err(Error::RuleValidation(format!(
                    "domain {domain} guard #{} (step `{}`, label `{}`): label not in the step's vocabulary",
                    i + 1,
                    g.step,
                    g.label
                )));
            };
            compiled.push((step_idx, label_idx));
            normalized.push(Guard {
                step: step_name,
                label,
                risk: g.risk,
            });
        }
        Ok(RuleTable {
            domain,
            steps: steps.to_vec(),
            guards: normalized,
            compiled,
            default,
        })
    }

    pub fn domain(&self) -> BiasDomain {
        self.domain
    }

    pub fn steps(&self) -> &[StepSpec] {
        &self.steps
    }

    pub fn guards(&self) -> &[Guard] {
        &self.guards
    }

    pub fn default_risk(&self) -> RiskLabel {
        self.default
    }

    /// Evaluates the macro on label indices given in schema step order.
    pub fn evaluate_indices(&self, labels: &[usize]) -> Result<RiskLabel> {
        if labels.len() != self.steps.len() {
            return Err(Error::Input(format!(
                "domain {} expects {} labels, got {}",
                self.domain,
                self.steps.len(),
                labels.len()
            )));
        }
        for (step, &l) in self.steps.iter().zip(labels) {
            if l >= step.labels.len() {
                return Err(Error::Schema(format!(
                    "label index {l} out of range for step `{}`",
                    step.name
                )));
            }
        }
        Ok(self.evaluate_unchecked(labels))
    }

    fn evaluate_unchecked(&self, labels: &[usize]) -> RiskLabel {
        self.compiled
            .iter()
            .zip(&self.guards)
            .find(|((step, label), _)| labels[*step] == *label)
            .map_or(self.default, |(_, g)| g.risk)
    }

    /// Label indices for `assignment`, in schema order.
    pub fn resolve(&self, assignment: &Assignment) -> Result<Vec<usize>> {
        for (name, _) in assignment.iter() {
            if !self.steps.iter().any(|s| s.name == name) {
                return Err(Error::Schema(format!(
                    "step `{name}` is not part of domain {}",
                    self.domain
                )));
            }
        }
        self.steps
            .iter()
            .map(|step| {
                let label =
                    assignment
                        .get(&step.name)
                        .ok_or_else(|| Error::IncompleteAssignment {
                            step: step.name.clone(),
                        })?;
                step.label_index(label).ok_or_else(|| {
                    Error::Schema(format!(
                        "label `{label}` is not valid for step `{}`",
                        step.name
                    ))
                })
            })
            .collect()
    }

    /// First matching guard's risk, else the default.
    pub fn evaluate_macro(&self, assignment: &Assignment) -> Result<RiskLabel> {
        let labels = self.resolve(assignment)?;
        Ok(self.evaluate_unchecked(&labels))
    }

    /// Number of rows in the full label product.
    pub fn product_size(&self) -> u128 {
        self.steps.iter().map(|s| s.labels.len() as u128).product()
    }

    /// Every assignment with its risk, in lexicographic schema order (the
    /// first step varies slowest).
    pub fn enumerate_truth_table(&self, bound: u128) -> Result<Vec<TruthRow>> {
        let size = self.product_size();
        if size > bound {
            return Err(Error::TruthTableTooLarge { size, bound });
        }
        let mut rows = Vec::with_capacity(size as usize);
        let mut idx = vec![0usize; self.steps.len()];
        loop {
            rows.push(TruthRow {
                labels: self
                    .steps
                    .iter()
                    .zip(&idx)
                    .map(|(s, &i)| s.labels[i].clone())
                    .collect(),
                risk: self.evaluate_unchecked(&idx),
            });
            // Odometer increment, last step fastest.
            let mut pos = self.steps.len();
            loop {
                if pos == 0 {
                    return Ok(rows);
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < self.steps[pos].labels.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

#[derive(Deserialize, Serialize)]
struct RawTable {
    guards: Vec<Guard>,
    default: RiskLabel,
}

#[derive(Deserialize, Serialize)]
struct RawTableSet {
    version: String,
    domains: BTreeMap<String, RawTable>,
}

/// One rule table per domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTableSet {
    version: String,
    tables: BTreeMap<BiasDomain, RuleTable>,
}

impl RuleTableSet {
    /// Tables from the shipped document, validated against the shipped schema.
    pub fn builtin() -> &'static RuleTableSet {
        &BUILTIN
    }

    /// Loads and validates a rule-table document against `schema`.
    pub fn from_json(document: &str, schema: &Schema) -> Result<Self> {
        let raw: RawTableSet = serde_json::from_str(document)
            .map_err(|e| Error::RuleValidation(format!("malformed rule-table document: {e}")))?;
        let mut tables = BTreeMap::new();
        for (id, table) in raw.domains {
            let domain: BiasDomain = id
                .parse()
                .map_err(|_| Error::RuleValidation(format!("unknown domain id `{id}`")))?;
            let t = RuleTable::new(
                domain,
                schema.step_schema(domain),
                table.guards,
                table.default,
            )?;
            tables.insert(domain, t);
        }
        if let Some(missing) = BiasDomain::ALL.iter().find(|d| !tables.contains_key(d)) {
            return Err(Error::RuleValidation(format!(
                "no rule table for domain {missing}"
            )));
        }
        Ok(RuleTableSet {
            version: raw.version,
            tables,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn table(&self, domain: BiasDomain) -> &RuleTable {
        &self.tables[&domain]
    }

    pub fn to_json(&self) -> String {
        let raw = RawTableSet {
            version: self.version.clone(),
            domains: self
                .tables
                .iter()
                .map(|(d, t)| {
                    (
                        d.id().to_string(),
                        RawTable {
                            guards: t.guards.clone(),
                            default: t.default,
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("rule tables serialize")
    }
}
