//! Parsing and rendering of step-structured reasoning traces.
//!
//! The canonical template is
//!
//! ```text
//! <think>
//! Step 1: identify_randomization_report
//! ...free-text rationale...
//! Answer: reported
//!
//! Step 2: classify_randomization_method
//! ...
//! Answer: random
//! </think>
//! <answer>
//! risk: low
//! </answer>
//! ```
//!
//! Parsing runs in two tiers. Lenient extraction recovers whatever step/answer
//! pairs and risk token it can find; `format_ok` is set only when the text
//! matches the template exactly. Tags and the `Step`, `Answer:` and `risk:`
//! keywords match case-insensitively.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{normalize_identifier, BiasDomain, RiskLabel};

static STEP_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^step\s+(\d+)\s*:\s*(.*)$").expect("valid regex"));
static ANSWER_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^answer\s*:\s*(.*)$").expect("valid regex"));
static RISK_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^risk\s*:\s*(.*)$").expect("valid regex"));

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub name: String,
    pub label: String,
    #[serde(default)]
    pub rationale: String,
}

impl TraceStep {
    /// Builds a step with canonical identifiers and a trimmed rationale.
    pub fn new(name: &str, label: &str, rationale: &str) -> Self {
        TraceStep {
            name: normalize_identifier(name),
            label: normalize_identifier(label),
            rationale: rationale.trim().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub domain: BiasDomain,
    pub steps: Vec<TraceStep>,
    pub risk: RiskLabel,
}

impl ReasoningTrace {
    /// Checks that the trace can be rendered and parsed back unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Input("trace has no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let k = i + 1;
            for (what, ident) in [("name", &step.name), ("label", &step.label)] {
                if ident.is_empty()
                    || *ident != normalize_identifier(ident)
                    || ident.contains(['<', '>'])
                {
                    return Err(Error::Input(format!(
                        "step {k}: {what} `{ident}` is not a canonical identifier"
                    )));
                }
            }
            if step.rationale != step.rationale.trim() || step.rationale.contains('\r') {
                return Err(Error::Input(format!("step {k}: rationale is not trimmed")));
            }
            if contains_tag(&step.rationale) {
                return Err(Error::Input(format!(
                    "step {k}: rationale contains a block tag"
                )));
            }
            if step.rationale.lines().any(|l| {
                let l = l.trim();
                STEP_LINE.is_match(l) || ANSWER_LINE.is_match(l)
            }) {
                return Err(Error::Input(format!(
                    "step {k}: rationale contains a template keyword line"
                )));
            }
        }
        Ok(())
    }
}

fn contains_tag(text: &str) -> bool {
    let lower = text.to_ascii_lowercase();
    [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        .iter()
        .any(|t| lower.contains(t))
}

/// A parse problem at a 1-based line of the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub ok: bool,
    pub trace: Option<ReasoningTrace>,
    pub format_ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

/// Renders `trace` in the canonical template.
pub fn render_trace(trace: &ReasoningTrace) -> String {
    let mut out = String::from("<think>\n");
    for (i, step) in trace.steps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("Step {}: {}\n", i + 1, step.name));
        if !step.rationale.is_empty() {
            out.push_str(&step.rationale);
            out.push('\n');
        }
        out.push_str(&format!("Answer: {}\n", step.label));
    }
    out.push_str("</think>\n<answer>\nrisk: ");
    out.push_str(trace.risk.as_str());
    out.push_str("\n</answer>\n");
    out
}

/// 1 when the report's text matched the template exactly, else 0.
pub fn format_reward(report: &ParseReport) -> u8 {
    u8::from(report.format_ok)
}

struct Parser<'a> {
    text: &'a str,
    diagnostics: Vec<Diagnostic>,
    strict: bool,
}

struct OpenStep {
    number: usize,
    line: usize,
    name: String,
}

impl<'a> Parser<'a> {
    fn violation(&mut self, line: usize, message: impl Into<String>) {
        self.strict = false;
        self.diagnostics.push(Diagnostic {
            line,
            message: message.into(),
        });
    }

    fn line_of(&self, offset: usize) -> usize {
        self.text[..offset].bytes().filter(|&b| b == b'\n').count() + 1
    }

    fn not_blank(&self, range: std::ops::Range<usize>) -> bool {
        !self.text[range].trim().is_empty()
    }
}

fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    haystack.match_indices(needle).map(|(i, _)| i).collect()
}

/// Parses raw model output for `domain`.
pub fn parse_trace(text: &str, domain: BiasDomain) -> ParseReport {
    let mut p = Parser {
        text,
        diagnostics: Vec::new(),
        strict: true,
    };
    // ASCII lowercasing keeps byte offsets aligned with `text`.
    let lower = text.to_ascii_lowercase();
    let think_opens = find_all(&lower, THINK_OPEN);
    let think_closes = find_all(&lower, THINK_CLOSE);
    let answer_opens = find_all(&lower, ANSWER_OPEN);
    let answer_closes = find_all(&lower, ANSWER_CLOSE);

    if think_opens.len() != 1 || think_closes.len() != 1 {
        let line = think_opens.get(1).map_or(1, |&o| p.line_of(o));
        p.violation(
            line,
            format!(
                "expected exactly one think block, found {} open and {} close tags",
                think_opens.len(),
                think_closes.len()
            ),
        );
    }
    if answer_opens.len() > 1 {
        let line = p.line_of(answer_opens[1]);
        p.violation(line, "duplicate answer blocks");
    } else if answer_opens.len() != 1 || answer_closes.len() != 1 {
        p.violation(
            text.lines().count().max(1),
            "expected exactly one closed answer block",
        );
    }

    // The first answer block delimits the reasoning region.
    let answer_open = answer_opens.first().copied();
    let think_start = think_opens.first().map(|&o| o + THINK_OPEN.len());
    let think_range = match think_start {
        Some(start) => {
            let end = think_closes
                .iter()
                .copied()
                .find(|&c| c >= start)
                .or(answer_open.filter(|&a| a >= start))
                .unwrap_or(text.len());
            start..end
        }
        None => 0..answer_open.unwrap_or(text.len()),
    };
    let answer_range = answer_open.map(|open| {
        let start = open + ANSWER_OPEN.len();
        let end = answer_closes
            .iter()
            .copied()
            .find(|&c| c >= start)
            .unwrap_or(text.len());
        start..end
    });

    // Nothing but whitespace may surround the two blocks.
    if p.strict {
        let think_open = think_opens[0];
        let think_close = think_closes[0];
        let (a_open, a_close) = (answer_opens[0], answer_closes[0]);
        if !(think_open < think_close && think_close < a_open && a_open < a_close) {
            p.violation(
                1,
                "blocks must appear as <think>...</think> then <answer>...</answer>",
            );
        } else {
            let outside = [
                (0..think_open, "text before <think>"),
                (
                    think_close + THINK_CLOSE.len()..a_open,
                    "text between </think> and <answer>",
                ),
                (
                    a_close + ANSWER_CLOSE.len()..text.len(),
                    "text after </answer>",
                ),
            ];
            for (range, what) in outside {
                if p.not_blank(range.clone()) {
                    let line = p.line_of(range.start);
                    p.violation(line, what);
                }
            }
        }
    }

    let steps = parse_steps(&mut p, think_range);
    let risk = match answer_range {
        Some(range) => parse_answer_block(&mut p, range),
        None => find_risk_anywhere(&mut p),
    };

    let ok = risk.is_some() && !steps.is_empty();
    if steps.is_empty() {
        p.violation(1, "no step/answer pairs found");
    }
    let trace = match (ok, risk) {
        (true, Some(risk)) => Some(ReasoningTrace {
            domain,
            steps,
            risk,
        }),
        _ => None,
    };
    ParseReport {
        ok,
        format_ok: ok && p.strict,
        trace,
        diagnostics: p.diagnostics,
    }
}

fn parse_steps(p: &mut Parser<'_>, range: std::ops::Range<usize>) -> Vec<TraceStep> {
    let first_line = p.line_of(range.start);
    let body = &p.text[range];
    let mut steps = Vec::new();
    let mut current: Option<(OpenStep, Vec<&str>, Option<String>)> = None;

    let finish = |p: &mut Parser<'_>,
                  open: Option<(OpenStep, Vec<&str>, Option<String>)>,
                  steps: &mut Vec<TraceStep>| {
        if let Some((step, rationale, answer)) = open {
            match answer {
                Some(label) if !step.name.is_empty() => {
                    let rationale = rationale.join("\n");
                    steps.push(TraceStep {
                        name: step.name,
                        label,
                        rationale: rationale.trim().to_string(),
                    });
                }
                Some(_) => {
                    p.violation(step.line, format!("step {} has an empty name", step.number))
                }
                None => p.violation(
                    step.line,
                    format!("step {} has no Answer line", step.number),
                ),
            }
        }
    };

    for (i, raw) in body.split('\n').enumerate() {
        let line_no = first_line + i;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let line = raw.trim();
        if let Some(caps) = STEP_LINE.captures(line) {
            finish(p, current.take(), &mut steps);
            let number: usize = caps[1].parse().unwrap_or(0);
            let expected = steps.len() + 1;
            if number != expected {
                p.violation(
                    line_no,
                    format!("step numbered {number}, expected {expected}"),
                );
            }
            let name = normalize_identifier(&caps[2]);
            let open = OpenStep {
                number,
                line: line_no,
                name,
            };
            current = Some((open, Vec::new(), None));
        } else if let Some(caps) = ANSWER_LINE.captures(line) {
            let label = normalize_identifier(&caps[1]);
            match current.as_mut() {
                None => p.violation(line_no, "Answer line outside of a step"),
                Some((step, _, answer)) => {
                    if answer.is_some() {
                        let n = step.number;
                        p.violation(
                            line_no,
                            format!("step {n} has more than one Answer line; keeping the first"),
                        );
                    } else if label.is_empty() {
                        let n = step.number;
                        p.violation(line_no, format!("step {n} has an empty Answer"));
                    } else {
                        *answer = Some(label);
                    }
                }
            }
        } else if let Some((step, rationale, answer)) = current.as_mut() {
            if answer.is_some() {
                if !line.is_empty() {
                    let n = step.number;
                    p.violation(
                        line_no,
                        format!("text after the Answer line of step {n} is ignored"),
                    );
                }
            } else {
                rationale.push(raw);
            }
        } else if !line.is_empty() {
            p.violation(line_no, "text before the first step");
        }
    }
    finish(p, current.take(), &mut steps);
    steps
}

fn risk_token(p: &mut Parser<'_>, token: &str, line: usize) -> Option<RiskLabel> {
    match normalize_identifier(token).as_str() {
        "low" => Some(RiskLabel::Low),
        "moderate" => Some(RiskLabel::Moderate),
        "high" => Some(RiskLabel::High),
        _ => {
            p.violation(line, format!("unrecognized risk token `{}`", token.trim()));
            None
        }
    }
}

fn parse_answer_block(p: &mut Parser<'_>, range: std::ops::Range<usize>) -> Option<RiskLabel> {
    let first_line = p.line_of(range.start);
    let body = &p.text[range];
    let mut risk: Option<Option<RiskLabel>> = None;
    for (i, raw) in body.split('\n').enumerate() {
        let line_no = first_line + i;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match RISK_LINE.captures(line) {
            Some(caps) if risk.is_none() => {
                let token = caps[1].to_string();
                risk = Some(risk_token(p, &token, line_no));
            }
            Some(_) => p.violation(line_no, "more than one risk line; keeping the first"),
            None => p.violation(line_no, "unexpected text in answer block"),
        }
    }
    match risk {
        Some(r) => r,
        None => {
            p.violation(first_line, "answer block has no `risk:` line");
            None
        }
    }
}

fn find_risk_anywhere(p: &mut Parser<'_>) -> Option<RiskLabel> {
    let found = p
        .text
        .split('\n')
        .enumerate()
        .filter_map(|(i, l)| {
            RISK_LINE
                .captures(l.trim())
                .map(|c| (i + 1, c[1].to_string()))
        })
        .last();
    match found {
        Some((line, token)) => risk_token(p, &token, line),
        None => {
            p.violation(1, "no `risk:` line found");
            None
        }
    }
}
