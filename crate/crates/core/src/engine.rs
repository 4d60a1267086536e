//! Request-level scoring shared by the command line and the HTTP service.
//!
//! An [`Engine`] is built once from an [`EngineConfig`] and is immutable
//! afterwards; every method takes `&self`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_dataset, InstanceRecord};
use crate::error::{Error, Result};
use crate::group::{dapo_filter, normalize_advantages, AdvantageVector, OptimConfig};
use crate::metrics::{record_coherence, CoherenceMode, EvalRecord, MetricsReport};
use crate::reward::{score_report, RewardBreakdown, RewardConfig, RewardConfigPatch};
use crate::rules::{Assignment, RuleTableSet};
use crate::schema::{BiasDomain, RiskLabel, Schema, StepSpec};
use crate::trace::{parse_trace, Diagnostic};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

fn default_threshold() -> f64 {
    1.0
}

/// Deployment configuration, read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub coherence_mode: CoherenceMode,
    /// Reward at or above which a trajectory counts as correct when an
    /// advantage request carries no correctness flags.
    #[serde(default = "default_threshold")]
    pub correct_threshold: f64,
    /// Schema document; the built-in one when absent.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Rule-table document; the built-in one when absent.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    /// Gold records addressable by id.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_bind")]
    pub bind: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

impl EngineConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: EngineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.schema, &mut config.rules, &mut config.dataset]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.optim.validate()?;
        if !self.correct_threshold.is_finite() {
            return Err(Error::Config("correct_threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    /// Id of a record in the loaded dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    /// Inline gold record, used instead of `record_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<InstanceRecord>,
    pub trace_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RewardConfigPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub ok: bool,
    pub format_ok: bool,
    pub steps: usize,
    pub predicted_risk: Option<RiskLabel>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub record_id: String,
    pub domain: BiasDomain,
    pub reward: RewardBreakdown,
    pub parse: ParseSummary,
    /// Whether the predicted risk follows from the trace's own step labels;
    /// `None` when that cannot be evaluated.
    pub coherent: Option<bool>,
    pub engine_version: String,
}

/// A scored request together with its metrics record.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub response: ScoreResponse,
    pub eval: EvalRecord,
}

/// Trace input for batch scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceInput {
    pub id: String,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchLine {
    Scored(Box<ScoreResponse>),
    Failed { id: String, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub summary: Option<MetricsReport>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOutput {
    pub lines: Vec<BatchLine>,
    pub summary: BatchSummary,
}

impl BatchOutput {
    /// One JSON object per line; the summary comes last.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("batch line serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary).expect("summary serializes"));
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageGroup {
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub correctness: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageRequest {
    pub groups: Vec<AdvantageGroup>,
    #[serde(default)]
    pub dapo_filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageResult {
    pub kept: bool,
    pub correct: usize,
    /// Absent for dropped groups.
    pub advantages: Option<AdvantageVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageResponse {
    pub groups: Vec<AdvantageResult>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    schema: Schema,
    rules: RuleTableSet,
    records: BTreeMap<String, InstanceRecord>,
    config_hash: String,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let schema = match &config.schema {
            Some(p) => Schema::from_json(&std::fs::read_to_string(p)?)?,
            None => Schema::builtin().clone(),
        };
        let rules = match &config.rules {
            Some(p) => RuleTableSet::from_json(&std::fs::read_to_string(p)?, &schema)?,
            None => RuleTableSet::from_json(crate::rules::DEFAULT_RULES_JSON, &schema)?,
        };
        let records = match &config.dataset {
            Some(p) => load_dataset(p, &schema, true)?
                .records
                .into_iter()
                .map(|r| (r.id.clone(), r))
                .collect(),
            None => BTreeMap::new(),
        };
        let config_hash = Self::hash(&config, &schema, &rules);
        Ok(Engine {
            config,
            schema,
            rules,
            records,
            config_hash,
        })
    }

    /// Engine over the built-in schema and rules with an explicit record set.
    pub fn with_records(config: EngineConfig, records: Vec<InstanceRecord>) -> Result<Self> {
        let mut engine = Engine::new(config)?;
        for mut r in records {
            r.validate(&engine.schema)?;
            engine.records.insert(r.id.clone(), r);
        }
        Ok(engine)
    }

    fn hash(config: &EngineConfig, schema: &Schema, rules: &RuleTableSet) -> String {
        let doc = serde_json::json!({
            "schema": schema.to_json(),
            "rules": rules.to_json(),
            "reward": config.reward,
            "optim": config.optim,
            "coherence_mode": config.coherence_mode,
            "correct_threshold": config.correct_threshold,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rules(&self) -> &RuleTableSet {
        &self.rules
    }

    pub fn record(&self, id: &str) -> Option<&InstanceRecord> {
        self.records.get(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.records.values()
    }

    pub fn step_schema(&self, domain: &str) -> Result<(BiasDomain, &[StepSpec])> {
        let d: BiasDomain = domain.parse()?;
        Ok((d, self.schema.step_schema(d)))
    }

    pub fn score(&self, request: &ScoreRequest) -> Result<Scored> {
        let gold = match (&request.record_id, &request.gold) {
            (Some(id), None) => self
                .records
                .get(id)
                .cloned()
                .ok_or_else(|| Error::UnknownRecord(id.clone()))?,
            (None, Some(g)) => {
                let mut g = g.clone();
                g.validate(&self.schema)?;
                g
            }
            _ => {
                return Err(Error::Input(
                    "exactly one of record_id and gold is required".into(),
                ))
            }
        };
        let reward = match &request.config {
            Some(patch) => self.config.reward.patched(patch)?,
            None => self.config.reward.clone(),
        };
        self.score_against(&gold, &request.trace_text, &reward)
    }

    fn score_against(
        &self,
        gold: &InstanceRecord,
        text: &str,
        reward: &RewardConfig,
    ) -> Result<Scored> {
        let report = parse_trace(text, gold.domain);
        let breakdown = score_report(&report, gold, reward)?;
        let step_labels: Option<Assignment> = report.trace.as_ref().map(|t| {
            t.steps
                .iter()
                .map(|s| (s.name.as_str(), s.label.as_str()))
                .collect()
        });
        let eval = EvalRecord {
            instance_id: gold.id.clone(),
            domain: gold.domain,
            predicted_risk: report.trace.as_ref().map(|t| t.risk),
            gold_risk: gold.gold_risk,
            step_labels,
        };
        let coherent = record_coherence(&eval, &self.rules);
        let response = ScoreResponse {
            record_id: gold.id.clone(),
            domain: gold.domain,
            reward: breakdown,
            parse: ParseSummary {
                ok: report.ok,
                format_ok: report.format_ok,
                steps: report.trace.as_ref().map_or(0, |t| t.steps.len()),
                predicted_risk: eval.predicted_risk,
                diagnostics: report.diagnostics,
            },
            coherent,
            engine_version: ENGINE_VERSION.to_string(),
        };
        Ok(Scored { response, eval })
    }

    pub fn score_all(&self, requests: &[ScoreRequest]) -> Result<Vec<ScoreResponse>> {
        requests
            .iter()
            .map(|r| self.score(r).map(|s| s.response))
            .collect()
    }

    /// Scores traces against loaded records, ordered by record id. Traces for
    /// unknown ids become error lines.
    pub fn score_batch(&self, traces: &[TraceInput]) -> Result<BatchOutput> {
        let mut ordered: Vec<&TraceInput> = traces.iter().collect();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let mut lines = Vec::with_capacity(ordered.len());
        let mut evals = Vec::new();
        for t in ordered {
            match self.records.get(&t.id) {
                None => lines.push(BatchLine::Failed {
                    id: t.id.clone(),
                    error: Error::UnknownRecord(t.id.clone()).to_string(),
                }),
                Some(gold) => {
                    let s = self.score_against(gold, &t.trace, &self.config.reward)?;
                    evals.push(s.eval);
                    lines.push(BatchLine::Scored(Box::new(s.response)));
                }
            }
        }
        let summary = if evals.is_empty() {
            None
        } else {
            Some(MetricsReport::compute(
                &evals,
                &self.rules,
                self.config.coherence_mode,
            )?)
        };
        let failed = lines.len() - evals.len();
        Ok(BatchOutput {
            lines,
            summary: BatchSummary { summary, failed },
        })
    }

    pub fn advantages(&self, request: &AdvantageRequest) -> Result<AdvantageResponse> {
        let groups = request
            .groups
            .iter()
            .map(|g| {
                let correctness = match &g.correctness {
                    Some(c) if c.len() != g.rewards.len() => {
                        return Err(Error::Input(
                            "correctness and rewards differ in length".into(),
                        ))
                    }
                    Some(c) => c.clone(),
                    None => g
                        .rewards
                        .iter()
                        .map(|r| *r >= self.config.correct_threshold)
                        .collect(),
                };
                let correct = correctness.iter().filter(|c| **c).count();
                let adv = normalize_advantages(&g.rewards, &self.config.optim)?;
                let kept = !request.dapo_filter || dapo_filter(&correctness);
                Ok(AdvantageResult {
                    kept,
                    correct,
                    advantages: kept.then_some(adv),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdvantageResponse { groups })
    }
}

/// Parses JSONL lines of `{"id": ..., "trace": ...}`.
pub fn parse_trace_inputs(text: &str) -> Result<Vec<TraceInput>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixtures::hawkey_2015;

    const PERFECT: &str = "<think>\nStep 1: identify_randomization_report\nAnswer: reported\n\nStep 2: classify_randomization_method\nAnswer: random\n\nStep 3: assess_sequence_predictability\nAnswer: unpredictable\n\nStep 4: baseline_imbalance\nAnswer: none\n</think>\n<answer>\nrisk: low\n</answer>\n";

    fn engine() -> Engine {
        Engine::with_records(EngineConfig::default(), vec![hawkey_2015()]).unwrap()
    }

    #[test]
    fn perfect_trace_scores_three() {
        let e = engine();
        let req = ScoreRequest {
            record_id: Some("hawkey-2015-A".into()),
            gold: None,
            trace_text: PERFECT.into(),
            config: None,
        };
        let s = e.score(&req).unwrap();
        assert_eq!(s.response.reward.total, 3.0);
        assert_eq!(s.response.coherent, Some(true));
        let inline = ScoreRequest {
            record_id: None,
            gold: Some(hawkey_2015()),
            ..req.clone()
        };
        assert_eq!(e.score(&inline).unwrap(), s);
    }

    #[test]
    fn request_errors() {
        let e = engine();
        let unknown = ScoreRequest {
            record_id: Some("nope".into()),
            gold: None,
            trace_text: PERFECT.into(),
            config: None,
        };
        assert!(matches!(e.score(&unknown), Err(Error::UnknownRecord(_))));
        let neither = ScoreRequest {
            record_id: None,
            ..unknown
        };
        assert!(matches!(e.score(&neither), Err(Error::Input(_))));
    }

    #[test]
    fn batch_is_sorted_and_deterministic() {
        let e = engine();
        let traces = vec![
            TraceInput {
                id: "zzz".into(),
                trace: PERFECT.into(),
            },
            TraceInput {
                id: "hawkey-2015-A".into(),
                trace: "nonsense".into(),
            },
        ];
        let a = e.score_batch(&traces).unwrap();
        assert!(matches!(&a.lines[0], BatchLine::Scored(r) if r.reward.total == 0.0));
        assert!(matches!(&a.lines[1], BatchLine::Failed { id, .. } if id == "zzz"));
        assert_eq!(a.summary.summary.as_ref().unwrap().accuracy, 0.0);
        assert_eq!(a.summary.failed, 1);
        assert_eq!(a.to_jsonl(), e.score_batch(&traces).unwrap().to_jsonl());
    }

    #[test]
    fn advantages_and_filter() {
        let e = engine();
        let req = AdvantageRequest {
            groups: vec![
                AdvantageGroup {
                    rewards: vec![1.0; 4],
                    correctness: None,
                },
                AdvantageGroup {
                    rewards: vec![0.0; 4],
                    correctness: None,
                },
                AdvantageGroup {
                    rewards: vec![2.0, 1.0, 0.0, 1.0],
                    correctness: None,
                },
            ],
            dapo_filter: true,
        };
        let r = e.advantages(&req).unwrap();
        assert_eq!(
            r.groups.iter().map(|g| g.kept).collect::<Vec<_>>(),
            [false, false, true]
        );
        assert!(r.groups[0].advantages.is_none());
        assert_eq!(r.groups[2].correct, 3);
    }

    #[test]
    fn hash_is_stable_and_config_sensitive() {
        let a = Engine::new(EngineConfig::default()).unwrap();
        let b = Engine::new(EngineConfig::default()).unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = EngineConfig::default();
        c.reward.weights.w_format = 0.5;
        assert_ne!(Engine::new(c).unwrap().config_hash(), a.config_hash());
    }

    #[test]
    fn config_file_paths_are_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("rules.json"),
            crate::rules::DEFAULT_RULES_JSON,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("c.json"),
            r#"{"rules":"rules.json","reward":{"w_format":0.5}}"#,
        )
        .unwrap();
        let c = EngineConfig::load(&dir.path().join("c.json")).unwrap();
        assert_eq!(
            c.rules.as_deref(),
            Some(dir.path().join("rules.json").as_path())
        );
        assert!(Engine::new(c).is_ok());
        std::fs::write(dir.path().join("bad.json"), r#"{"colour":"red"}"#).unwrap();
        assert!(matches!(
            EngineConfig::load(&dir.path().join("bad.json")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trace_inputs() {
        let v = parse_trace_inputs(
            "{\"id\":\"a\",\"trace\":\"x\"}\n\n{\"id\":\"b\",\"trace\":\"y\"}\n",
        )
        .unwrap();
        assert_eq!(v.len(), 2);
        assert!(matches!(
            parse_trace_inputs("{}\n"),
            Err(Error::Dataset { line: 1, .. })
        ));
    }
}
