//! Vocabularies for bias domains, reasoning steps, step labels and risk labels.
//!
//! The step vocabulary is data, not code: it is read from a versioned JSON
//! document (`config/schema.json` ships as the default) so that deployments
//! can extend or correct it. Every identifier is stored in canonical form,
//! see [`normalize_identifier`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The shipped schema document.
pub const DEFAULT_SCHEMA_JSON: &str = include_str!("../config/schema.json");

static BUILTIN: LazyLock<Schema> = LazyLock::new(|| {
    Schema::from_json(DEFAULT_SCHEMA_JSON).expect("shipped schema document is valid")
});

/// Canonical form of a step name or label: trimmed, lowercased, with runs of
/// whitespace collapsed into a single underscore.
pub fn normalize_identifier(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// One of the nine risk-of-bias domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BiasDomain {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl BiasDomain {
    pub const ALL: [BiasDomain; 9] = [
        BiasDomain::A,
        BiasDomain::B,
        BiasDomain::C,
        BiasDomain::D,
        BiasDomain::E,
        BiasDomain::F,
        BiasDomain::G,
        BiasDomain::H,
        BiasDomain::I,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BiasDomain::A => "A",
            BiasDomain::B => "B",
            BiasDomain::C => "C",
            BiasDomain::D => "D",
            BiasDomain::E => "E",
            BiasDomain::F => "F",
            BiasDomain::G => "G",
            BiasDomain::H => "H",
            BiasDomain::I => "I",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            BiasDomain::A => "Random sequence generation",
            BiasDomain::B => "Allocation concealment",
            BiasDomain::C => "Blinding of participants and personnel",
            BiasDomain::D => "Blinding of outcome assessment",
            BiasDomain::E => "Incomplete outcome data",
            BiasDomain::F => "Selective reporting",
            BiasDomain::G => "Baseline outcomes similar",
            BiasDomain::H => "Baseline characteristics similar",
            BiasDomain::I => "Contamination",
        }
    }
}

impl fmt::Display for BiasDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for BiasDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = s.trim().to_ascii_uppercase();
        BiasDomain::ALL
            .into_iter()
            .find(|d| d.id() == id)
            .ok_or_else(|| Error::UnknownDomain(s.trim().to_string()))
    }
}

impl Serialize for BiasDomain {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for BiasDomain {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Final risk-of-bias judgement for one domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RiskLabel {
    Low,
    Moderate,
    High,
}

impl RiskLabel {
    pub const ALL: [RiskLabel; 3] = [RiskLabel::Low, RiskLabel::Moderate, RiskLabel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLabel::Low => "low",
            RiskLabel::Moderate => "moderate",
            RiskLabel::High => "high",
        }
    }

    /// Position in [`RiskLabel::ALL`].
    pub fn index(self) -> usize {
        match self {
            RiskLabel::Low => 0,
            RiskLabel::Moderate => 1,
            RiskLabel::High => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        symbol_from_risk(self)
    }
}

/// Maps a risk-of-bias map glyph to its label: `+` low, `?` moderate, `−` high.
///
/// The ASCII hyphen-minus is accepted as an alias of U+2212 since tables in the
/// wild use either.
pub fn risk_from_symbol(symbol: &str) -> Result<RiskLabel> {
    match symbol.trim() {
        "+" => Ok(RiskLabel::Low),
        "?" => Ok(RiskLabel::Moderate),
        "\u{2212}" | "-" => Ok(RiskLabel::High),
        other => Err(Error::Schema(format!("unrecognized risk symbol `{other}`"))),
    }
}

pub fn symbol_from_risk(risk: RiskLabel) -> &'static str {
    match risk {
        RiskLabel::Low => "+",
        RiskLabel::Moderate => "?",
        RiskLabel::High => "\u{2212}",
    }
}

impl fmt::Display for RiskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskLabel {
    type Err = Error;

    /// Accepts a label word (any case) or one of the three glyphs.
    fn from_str(s: &str) -> Result<Self> {
        match normalize_identifier(s).as_str() {
            "low" => Ok(RiskLabel::Low),
            "moderate" => Ok(RiskLabel::Moderate),
            "high" => Ok(RiskLabel::High),
            _ => risk_from_symbol(s),
        }
    }
}

impl Serialize for RiskLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RiskLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One reasoning step of a domain and its label vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// 1-based position within the domain.
    pub position: usize,
}

impl StepSpec {
    /// Index of `label` in the vocabulary, comparing canonical forms.
    pub fn label_index(&self, label: &str) -> Option<usize> {
        let label = normalize_identifier(label);
        self.labels.iter().position(|l| *l == label)
    }
}

#[derive(Deserialize)]
struct RawStep {
    name: String,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawSchema {
    version: String,
    domains: BTreeMap<String, Vec<RawStep>>,
}

/// Validated step vocabulary for all nine domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    version: String,
    domains: BTreeMap<BiasDomain, Vec<StepSpec>>,
}

impl Schema {
    /// The schema shipped with the engine.
    pub fn builtin() -> &'static Schema {
        &BUILTIN
    }

    pub fn from_json(document: &str) -> Result<Schema> {
        let raw: RawSchema = serde_json::from_str(document)
            .map_err(|e| Error::Schema(format!("malformed schema document: {e}")))?;
        let mut domains = BTreeMap::new();
        for (id, steps) in raw.domains {
            let domain: BiasDomain = id
                .parse()
                .map_err(|_| Error::Schema(format!("unknown domain id `{id}`")))?;
            if steps.is_empty() {
                return Err(Error::Schema(format!("domain {domain} has no steps")));
            }
            let mut seen = HashSet::new();
            let mut specs = Vec::with_capacity(steps.len());
            for (i, step) in steps.into_iter().enumerate() {
                let name = normalize_identifier(&step.name);
                if name.is_empty() {
                    return Err(Error::Schema(format!("domain {domain}: empty step name")));
                }
                if !seen.insert(name.clone()) {
                    return Err(Error::Schema(format!(
                        "domain {domain}: duplicate step `{name}`"
                    )));
                }
                let labels: Vec<String> = step
                    .labels
                    .iter()
                    .map(|l| normalize_identifier(l))
                    .collect();
                if labels.len() < 2 {
                    return Err(Error::Schema(format!(
                        "domain {domain}: step `{name}` needs at least two labels"
                    )));
                }
                let distinct: HashSet<&String> = labels.iter().collect();
                if distinct.len() != labels.len() || labels.iter().any(String::is_empty) {
                    return Err(Error::Schema(format!(
                        "domain {domain}: step `{name}` has empty or duplicate labels"
                    )));
                }
                specs.push(StepSpec {
                    name,
                    labels,
                    position: i + 1,
                });
            }
            if domains.insert(domain, specs).is_some() {
                return Err(Error::Schema(format!("domain {domain} listed twice")));
            }
        }
        if let Some(missing) = BiasDomain::ALL.iter().find(|d| !domains.contains_key(d)) {
            return Err(Error::Schema(format!(
                "domain {missing} missing from schema"
            )));
        }
        Ok(Schema {
            version: raw.version,
            domains,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Ordered step list for `domain`.
    pub fn step_schema(&self, domain: BiasDomain) -> &[StepSpec] {
        // Construction guarantees all nine domains are present.
        &self.domains[&domain]
    }

    /// Like [`Schema::step_schema`] but keyed by a textual domain id.
    pub fn step_schema_by_id(&self, id: &str) -> Result<&[StepSpec]> {
        let domain: BiasDomain = id
            .parse()
            .map_err(|_| Error::Schema(format!("unknown domain id `{id}`")))?;
        Ok(self.step_schema(domain))
    }

    pub fn step(&self, domain: BiasDomain, name: &str) -> Option<&StepSpec> {
        let name = normalize_identifier(name);
        self.step_schema(domain).iter().find(|s| s.name == name)
    }

    /// Canonical JSON rendering, stable across loads of equivalent documents.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            version: &'a str,
            domains: BTreeMap<&'static str, Vec<OutStep<'a>>>,
        }
        #[derive(Serialize)]
        struct OutStep<'a> {
            name: &'a str,
            labels: &'a [String],
        }
        let out = Out {
            version: &self.version,
            domains: self
                .domains
                .iter()
                .map(|(d, steps)| {
                    let steps = steps
                        .iter()
                        .map(|s| OutStep {
                            name: &s.name,
                            labels: &s.labels,
                        })
                        .collect();
                    (d.id(), steps)
                })
                .collect(),
        };
        serde_json::to_string(&out).expect("schema serializes")
    }
}

/// Step list for `domain` in the shipped schema.
pub fn step_schema(domain: BiasDomain) -> &'static [StepSpec] {
    Schema::builtin().step_schema(domain)
}
