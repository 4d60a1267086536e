//! Tabular softmax policy trained with GRPO or DAPO against the process
//! reward.
//!
//! Each training instance owns an independent policy with one categorical
//! head per step and one risk head; heads do not condition on earlier
//! choices. A trajectory is one choice per head, so it has `T + 1` tokens.
//! Sampled trajectories are rendered as canonical traces, parsed back and
//! scored by the reward module.
//!
//! The logged reward and coherence series are exact expectations under the
//! current policies; sample means are kept alongside for reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{GoldStep, InstanceRecord};
use crate::error::{Error, Result};
use crate::group::{
    dapo_filter, dapo_loss, grpo_loss, normalize_advantages, shape_rewards, AdvantageVector, Algo,
    GroupBatch, GroupTerms, OptimConfig,
};
use crate::reward::{score_report, total_reward, RewardConfig};
use crate::rules::{RuleTable, RuleTableSet, DEFAULT_TRUTH_TABLE_BOUND};
use crate::schema::{step_schema, BiasDomain, RiskLabel, StepSpec};
use crate::trace::{parse_trace, render_trace, ReasoningTrace, TraceStep};

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Uniform,
    /// Logits drawn from a seeded standard normal.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub domain: BiasDomain,
    /// One logit vector per step, then the risk head (low, moderate, high).
    pub logits: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl TabularPolicy {
    pub fn num_heads(&self) -> usize {
        self.logits.len()
    }

    pub fn risk_head(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn probs(&self, head: usize) -> Vec<f64> {
        softmax(&self.logits[head], self.temperature)
    }

    pub fn all_probs(&self) -> Vec<Vec<f64>> {
        (0..self.num_heads()).map(|h| self.probs(h)).collect()
    }

    fn same_shape(&self, other: &TabularPolicy) -> bool {
        self.domain == other.domain
            && self.logits.len() == other.logits.len()
            && self
                .logits
                .iter()
                .zip(&other.logits)
                .all(|(a, b)| a.len() == b.len())
    }

    fn check_shape(&self, other: &TabularPolicy) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Input(
                "policies differ in domain or head sizes".into(),
            ))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits.iter().flatten().all(|z| z.is_finite())
    }
}

pub fn init_policy(domain: BiasDomain, seed: u64, init: InitMode) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = step_schema(domain)
        .iter()
        .map(|s| s.labels.len())
        .chain([RiskLabel::ALL.len()]);
    let logits = sizes
        .map(|n| match init {
            InitMode::Uniform => vec![0.0; n],
            InitMode::Random => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    TabularPolicy {
        domain,
        logits,
        temperature: 1.0,
    }
}

/// Exact sum of per-head `KL(policy || reference)`.
pub fn policy_kl(policy: &TabularPolicy, reference: &TabularPolicy) -> Result<f64> {
    policy.check_shape(reference)?;
    Ok((0..policy.num_heads())
        .map(|h| categorical_kl(&policy.probs(h), &reference.probs(h)))
        .sum())
}

/// A synthetic instance whose gold risk is what the decision table gives for
/// its gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimInstance {
    pub id: String,
    pub domain: BiasDomain,
    /// Gold label index per step, in schema order.
    pub gold_labels: Vec<usize>,
    pub gold_risk: RiskLabel,
}

impl SimInstance {
    pub fn new(
        id: impl Into<String>,
        domain: BiasDomain,
        gold_labels: Vec<usize>,
        rules: &RuleTableSet,
    ) -> Result<Self> {
        let gold_risk = rules.table(domain).evaluate_indices(&gold_labels)?;
        Ok(SimInstance {
            id: id.into(),
            domain,
            gold_labels,
            gold_risk,
        })
    }

    pub fn validate(&self, rules: &RuleTableSet) -> Result<()> {
        let expected = rules
            .table(self.domain)
            .evaluate_indices(&self.gold_labels)?;
        if expected != self.gold_risk {
            return Err(Error::Input(format!(
                "instance `{}` is not self-consistent: labels give {expected}, gold risk is {}",
                self.id, self.gold_risk
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> InstanceRecord {
        InstanceRecord {
            id: self.id.clone(),
            domain: self.domain,
            comparison: String::new(),
            outcome: String::new(),
            gold_risk: self.gold_risk,
            gold_steps: step_schema(self.domain)
                .iter()
                .zip(&self.gold_labels)
                .map(|(s, &l)| GoldStep {
                    name: s.name.clone(),
                    label: s.labels[l].clone(),
                })
                .collect(),
            context: None,
            provenance: None,
        }
    }
}

/// `n` instances with uniformly drawn gold labels.
pub fn generate_instances(
    domain: BiasDomain,
    n: usize,
    seed: u64,
    rules: &RuleTableSet,
) -> Result<Vec<SimInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let labels = step_schema(domain)
                .iter()
                .map(|s| rng.random_range(0..s.labels.len()))
                .collect();
            SimInstance::new(format!("sim-{}-{k}", domain.id()), domain, labels, rules)
        })
        .collect()
}

fn build_trace(domain: BiasDomain, steps: &[StepSpec], actions: &[usize]) -> ReasoningTrace {
    let risk = RiskLabel::ALL[actions[steps.len()]];
    ReasoningTrace {
        domain,
        steps: steps
            .iter()
            .zip(actions)
            .map(|(s, &a)| TraceStep::new(&s.name, &s.labels[a], ""))
            .collect(),
        risk,
    }
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTrace {
    /// One choice per head; the last is the risk index.
    pub actions: Vec<usize>,
    pub text: String,
    pub process: f64,
    pub outcome: u8,
    pub format: u8,
    pub total: f64,
    pub coherent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledGroup {
    pub batch: GroupBatch,
    pub traces: Vec<SampledTrace>,
}

impl SampledGroup {
    pub fn actions(&self) -> Vec<Vec<usize>> {
        self.traces.iter().map(|t| t.actions.clone()).collect()
    }
}

/// Draws `g` trajectories. Ratios are against the sampling policy itself, so
/// they are all 1.
pub fn sample_group(
    policy: &TabularPolicy,
    instance: &SimInstance,
    g: usize,
    seed: u64,
    reward: &RewardConfig,
    rules: &RuleTableSet,
) -> Result<SampledGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(
        policy,
        instance,
        &instance.to_record(),
        g,
        &mut rng,
        reward,
        rules.table(instance.domain),
    )
}

fn sample_with<R: Rng>(
    policy: &TabularPolicy,
    instance: &SimInstance,
    record: &InstanceRecord,
    g: usize,
    rng: &mut R,
    reward: &RewardConfig,
    table: &RuleTable,
) -> Result<SampledGroup> {
    if g < 2 {
        return Err(Error::GroupSize(g));
    }
    if policy.domain != instance.domain {
        return Err(Error::DomainMismatch {
            trace: policy.domain.to_string(),
            gold: instance.domain.to_string(),
        });
    }
    let steps = step_schema(instance.domain);
    let probs = policy.all_probs();
    let mut traces = Vec::with_capacity(g);
    for _ in 0..g {
        let actions: Vec<usize> = probs.iter().map(|p| sample_categorical(p, rng)).collect();
        let text = render_trace(&build_trace(instance.domain, steps, &actions));
        let report = parse_trace(&text, instance.domain);
        let b = score_report(&report, record, reward)?;
        let predicted = RiskLabel::ALL[actions[steps.len()]];
        let coherent = table.evaluate_indices(&actions[..steps.len()])? == predicted;
        traces.push(SampledTrace {
            actions,
            text,
            process: b.process_total,
            outcome: b.outcome,
            format: b.format,
            total: b.total,
            coherent,
        });
    }
    let heads = policy.num_heads();
    Ok(SampledGroup {
        batch: GroupBatch {
            rewards: traces.iter().map(|t| t.total).collect(),
            token_ratios: vec![vec![1.0; heads]; g],
            token_kl: None,
            correctness: traces.iter().map(|t| t.outcome == 1).collect(),
            token_weights: None,
        },
        traces,
    })
}

/// Group with ratios of `policy` against `old` for the given actions, and
/// exact per-head KL to `reference` as the token KL when supplied.
pub fn ratio_batch(
    policy: &TabularPolicy,
    old: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    actions: &[Vec<usize>],
    rewards: &[f64],
    correctness: &[bool],
) -> Result<GroupBatch> {
    policy.check_shape(old)?;
    let cur = policy.all_probs();
    let prev = old.all_probs();
    let kl = match reference {
        Some(r) => {
            policy.check_shape(r)?;
            let per_head: Vec<f64> = (0..policy.num_heads())
                .map(|h| categorical_kl(&cur[h], &r.probs(h)))
                .collect();
            Some(vec![per_head; actions.len()])
        }
        None => None,
    };
    Ok(GroupBatch {
        rewards: rewards.to_vec(),
        token_ratios: actions
            .iter()
            .map(|a| {
                a.iter()
                    .enumerate()
                    .map(|(h, &k)| cur[h][k] / prev[h][k])
                    .collect()
            })
            .collect(),
        token_kl: kl,
        correctness: correctness.to_vec(),
        token_weights: None,
    })
}

/// Adds the logit gradient implied by one group's ratio and KL derivatives.
fn chain_gradient(
    policy: &TabularPolicy,
    old: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    actions: &[Vec<usize>],
    terms: &GroupTerms,
    grad: &mut [Vec<f64>],
) {
    let tau = policy.temperature;
    let cur = policy.all_probs();
    let prev = old.all_probs();
    let ref_probs = reference.map(|r| r.all_probs());
    for (i, a) in actions.iter().enumerate() {
        for (h, &k) in a.iter().enumerate() {
            let d = terms.ratio_grads[i][h];
            if d != 0.0 {
                let ratio = cur[h][k] / prev[h][k];
                for (j, gz) in grad[h].iter_mut().enumerate() {
                    let ind = if j == k { 1.0 } else { 0.0 };
                    *gz += d * ratio * (ind - cur[h][j]) / tau;
                }
            }
            let dk = terms.kl_grads[i][h];
            if let (Some(rp), true) = (&ref_probs, dk != 0.0) {
                let kl = categorical_kl(&cur[h], &rp[h]);
                for (j, gz) in grad[h].iter_mut().enumerate() {
                    let pj = cur[h][j];
                    if pj > 0.0 {
                        *gz += dk * pj * (pj.ln() - rp[h][j].ln() - kl) / tau;
                    }
                }
            }
        }
    }
}

/// Fixed trajectories and their rewards, reusable across policy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionGroup {
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub correctness: Vec<bool>,
}

impl From<&SampledGroup> for ActionGroup {
    fn from(g: &SampledGroup) -> Self {
        ActionGroup {
            actions: g.actions(),
            rewards: g.batch.rewards.clone(),
            correctness: g.batch.correctness.clone(),
        }
    }
}

/// Surrogate objective of `policy` on groups sampled from `old`, with its
/// gradient in the logits. GRPO sums the per-group objectives; DAPO
/// normalizes over all tokens of all groups.
pub fn surrogate_with_gradient(
    policy: &TabularPolicy,
    old: &TabularPolicy,
    reference: Option<&TabularPolicy>,
    groups: &[ActionGroup],
    advs: &[AdvantageVector],
    config: &OptimConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if groups.len() != advs.len() {
        return Err(Error::Input(
            "one advantage vector per group is required".into(),
        ));
    }
    let mut grad: Vec<Vec<f64>> = policy.logits.iter().map(|l| vec![0.0; l.len()]).collect();
    let batches = groups
        .iter()
        .map(|g| {
            ratio_batch(
                policy,
                old,
                reference,
                &g.actions,
                &g.rewards,
                &g.correctness,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let objective = match config.algo {
        Algo::Grpo => {
            let mut total = 0.0;
            for ((b, a), g) in batches.iter().zip(advs).zip(groups) {
                let s = grpo_loss(b, a, config)?;
                chain_gradient(policy, old, reference, &g.actions, &s.groups[0], &mut grad);
                total += s.objective;
            }
            total
        }
        Algo::Dapo => {
            let s = dapo_loss(&batches, advs, config)?;
            for (terms, g) in s.groups.iter().zip(groups) {
                chain_gradient(policy, old, None, &g.actions, terms, &mut grad);
            }
            s.objective
        }
    };
    Ok((objective, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub reward: RewardConfig,
    pub group_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Gradient steps per sampled batch.
    pub inner_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::default(),
            reward: RewardConfig::default(),
            group_size: 16,
            iterations: 500,
            learning_rate: DEFAULT_LEARNING_RATE,
            inner_epochs: 1,
            seed: 7,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.5;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.reward.validate()?;
        if self.group_size < 2 {
            return Err(Error::GroupSize(self.group_size));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Config("inner_epochs must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(
                "learning_rate must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Sample means over every trajectory drawn in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SampleStats {
    pub process_reward: f64,
    pub outcome_reward: f64,
    pub coherence: f64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub process_reward: f64,
    pub outcome_reward: f64,
    pub format_reward: f64,
    pub coherence: f64,
    pub objective: f64,
    /// Exact KL to the initial policy, averaged over instances.
    pub kl: f64,
    pub kept_groups: usize,
    pub zero_variance_groups: usize,
    pub sampled: SampleStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub iterations: usize,
    pub window: usize,
    pub process_reward: f64,
    pub outcome_reward: f64,
    pub format_reward: f64,
    pub coherence: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub iterations: Vec<IterationLog>,
}

pub const FINAL_WINDOW: usize = 10;

impl TrainingLog {
    /// Means over the last `FINAL_WINDOW` iterations.
    pub fn summary(&self) -> TrainingSummary {
        let n = self.iterations.len();
        let tail = &self.iterations[n.saturating_sub(FINAL_WINDOW)..];
        let mean = |f: fn(&IterationLog) -> f64| {
            if tail.is_empty() {
                0.0
            } else {
                tail.iter().map(f).sum::<f64>() / tail.len() as f64
            }
        };
        TrainingSummary {
            iterations: n,
            window: tail.len(),
            process_reward: mean(|l| l.process_reward),
            outcome_reward: mean(|l| l.outcome_reward),
            format_reward: mean(|l| l.format_reward),
            coherence: mean(|l| l.coherence),
            kl: mean(|l| l.kl),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.iterations
            .iter()
            .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub log: TrainingLog,
    pub policies: Vec<TabularPolicy>,
}

/// Exact expectations for one instance under its policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub process_reward: f64,
    pub outcome_reward: f64,
    pub coherence: f64,
}

/// Per-instance tables for exact expectations.
struct Evaluator {
    record: InstanceRecord,
    /// Process reward of the all-gold trace, and its loss when step `t` takes
    /// label `l` instead.
    base: f64,
    delta: Vec<Vec<f64>>,
    truth: Vec<(Vec<usize>, usize)>,
}

impl Evaluator {
    fn new(instance: &SimInstance, reward: &RewardConfig, table: &RuleTable) -> Result<Self> {
        let record = instance.to_record();
        let steps = step_schema(instance.domain);
        let mut gold_actions = instance.gold_labels.clone();
        gold_actions.push(instance.gold_risk.index());
        let process = |actions: &[usize]| -> Result<f64> {
            Ok(total_reward(
                &build_trace(instance.domain, steps, actions),
                &record,
                reward,
                1,
            )?
            .process_total)
        };
        let base = process(&gold_actions)?;
        let mut delta = Vec::with_capacity(steps.len());
        for (t, s) in steps.iter().enumerate() {
            let mut row = Vec::with_capacity(s.labels.len());
            for l in 0..s.labels.len() {
                let mut a = gold_actions.clone();
                a[t] = l;
                row.push(base - process(&a)?);
            }
            delta.push(row);
        }
        let truth = table
            .enumerate_truth_table(DEFAULT_TRUTH_TABLE_BOUND)?
            .into_iter()
            .map(|r| {
                let idx = r
                    .labels
                    .iter()
                    .zip(steps)
                    .map(|(l, s)| s.label_index(l).expect("row label in schema"))
                    .collect();
                (idx, r.risk.index())
            })
            .collect();
        Ok(Evaluator {
            record,
            base,
            delta,
            truth,
        })
    }

    fn expected(&self, policy: &TabularPolicy, gold_risk: RiskLabel) -> Expected {
        let probs = policy.all_probs();
        let risk = &probs[policy.risk_head()];
        let loss: f64 = self
            .delta
            .iter()
            .zip(&probs)
            .map(|(d, p)| d.iter().zip(p).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        let coherence = self
            .truth
            .iter()
            .map(|(labels, r)| {
                labels
                    .iter()
                    .enumerate()
                    .map(|(t, &l)| probs[t][l])
                    .product::<f64>()
                    * risk[*r]
            })
            .sum();
        Expected {
            process_reward: self.base - loss,
            outcome_reward: risk[gold_risk.index()],
            coherence,
        }
    }
}

/// Exact expected process reward, outcome reward and coherence.
pub fn expected_metrics(
    policy: &TabularPolicy,
    instance: &SimInstance,
    reward: &RewardConfig,
    rules: &RuleTableSet,
) -> Result<Expected> {
    let ev = Evaluator::new(instance, reward, rules.table(instance.domain))?;
    Ok(ev.expected(policy, instance.gold_risk))
}

fn iteration_rng(seed: u64, iteration: usize, instance: usize, instances: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((iteration * instances + instance) as u64);
    rng
}

/// Trains one copy of `init` per instance. The initial policy is the frozen
/// KL reference.
pub fn train(
    init: &TabularPolicy,
    dataset: &[SimInstance],
    config: &TrainConfig,
    rules: &RuleTableSet,
) -> Result<TrainingRun> {
    config.validate()?;
    if !(init.temperature > 0.0 && init.temperature.is_finite()) || !init.is_finite() {
        return Err(Error::Input(
            "initial policy needs finite logits and a positive temperature".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for inst in dataset {
        inst.validate(rules)?;
        if inst.domain != init.domain {
            return Err(Error::DomainMismatch {
                trace: init.domain.to_string(),
                gold: inst.domain.to_string(),
            });
        }
    }
    let n = dataset.len();
    let table = rules.table(init.domain);
    let evaluators = dataset
        .iter()
        .map(|inst| Evaluator::new(inst, &config.reward, table))
        .collect::<Result<Vec<_>>>()?;
    let reference = init.clone();
    let kl_ref = (config.optim.beta > 0.0).then_some(&reference);
    let mut policies = vec![init.clone(); n];
    let mut log = TrainingLog::default();

    for it in 0..config.iterations {
        let mut sampled = SampleStats::default();
        let mut groups = Vec::with_capacity(n);
        for (k, (inst, ev)) in dataset.iter().zip(&evaluators).enumerate() {
            let mut rng = iteration_rng(config.seed, it, k, n);
            let g = sample_with(
                &policies[k],
                inst,
                &ev.record,
                config.group_size,
                &mut rng,
                &config.reward,
                table,
            )?;
            for t in &g.traces {
                sampled.process_reward += t.process;
                sampled.outcome_reward += f64::from(t.outcome);
                sampled.coherence += f64::from(u8::from(t.coherent));
                sampled.total_reward += t.total;
            }
            groups.push(g);
        }
        let draws = (n * config.group_size) as f64;
        sampled.process_reward /= draws;
        sampled.outcome_reward /= draws;
        sampled.coherence /= draws;
        sampled.total_reward /= draws;
        let format_reward = groups
            .iter()
            .flat_map(|g| &g.traces)
            .map(|t| f64::from(t.format))
            .sum::<f64>()
            / draws;

        let mut zero_variance_groups = 0;
        let mut active = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            if config.optim.algo == Algo::Dapo && !dapo_filter(&g.batch.correctness) {
                continue;
            }
            let lengths = g.batch.lengths();
            let rewards = shape_rewards(&g.batch.rewards, &lengths, &config.optim)?;
            let adv = normalize_advantages(&rewards, &config.optim)?;
            if adv.is_degenerate() {
                zero_variance_groups += 1;
            }
            let ag = ActionGroup {
                actions: g.actions(),
                rewards,
                correctness: g.batch.correctness.clone(),
            };
            active.push((k, ag, adv));
        }

        let old: Vec<TabularPolicy> = policies.clone();
        let mut objective = 0.0;
        for epoch in 0..config.inner_epochs {
            let (obj, grads) = match config.optim.algo {
                Algo::Grpo => {
                    let mut obj = 0.0;
                    let mut grads = Vec::with_capacity(active.len());
                    for (k, ag, adv) in &active {
                        let (o, gr) = surrogate_with_gradient(
                            &policies[*k],
                            &old[*k],
                            kl_ref,
                            std::slice::from_ref(ag),
                            std::slice::from_ref(adv),
                            &config.optim,
                        )?;
                        obj += o;
                        grads.push((*k, gr));
                    }
                    (obj / n as f64, grads)
                }
                Algo::Dapo => dapo_step(&policies, &old, &active, &config.optim)?,
            };
            if epoch == 0 {
                objective = obj;
            }
            for (k, gr) in grads {
                for (zs, gs) in policies[k].logits.iter_mut().zip(&gr) {
                    for (z, g) in zs.iter_mut().zip(gs) {
                        *z += config.learning_rate * g;
                    }
                }
                if !policies[k].is_finite() {
                    return Err(Error::Divergence {
                        iteration: it,
                        message: format!("non-finite logits for instance {k}"),
                    });
                }
            }
        }

        let mut exp = Expected {
            process_reward: 0.0,
            outcome_reward: 0.0,
            coherence: 0.0,
        };
        let mut kl = 0.0;
        for ((p, ev), inst) in policies.iter().zip(&evaluators).zip(dataset) {
            let e = ev.expected(p, inst.gold_risk);
            exp.process_reward += e.process_reward / n as f64;
            exp.outcome_reward += e.outcome_reward / n as f64;
            exp.coherence += e.coherence / n as f64;
            kl += policy_kl(p, &reference)? / n as f64;
        }
        log.iterations.push(IterationLog {
            iteration: it,
            process_reward: exp.process_reward,
            outcome_reward: exp.outcome_reward,
            format_reward,
            coherence: exp.coherence,
            objective,
            kl,
            kept_groups: active.len(),
            zero_variance_groups,
            sampled,
        });
    }
    Ok(TrainingRun { log, policies })
}

type Gradients = Vec<(usize, Vec<Vec<f64>>)>;

/// One DAPO gradient evaluation across all kept groups; each group's slice of
/// the gradient goes to its own policy.
fn dapo_step(
    policies: &[TabularPolicy],
    old: &[TabularPolicy],
    active: &[(usize, ActionGroup, AdvantageVector)],
    config: &OptimConfig,
) -> Result<(f64, Gradients)> {
    if active.is_empty() {
        return Ok((0.0, vec![]));
    }
    let batches = active
        .iter()
        .map(|(k, ag, _)| {
            ratio_batch(
                &policies[*k],
                &old[*k],
                None,
                &ag.actions,
                &ag.rewards,
                &ag.correctness,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let advs: Vec<AdvantageVector> = active.iter().map(|(_, _, a)| a.clone()).collect();
    let s = dapo_loss(&batches, &advs, config)?;
    let grads = active
        .iter()
        .zip(&s.groups)
        .map(|((k, ag, _), terms)| {
            let mut gr: Vec<Vec<f64>> = policies[*k]
                .logits
                .iter()
                .map(|l| vec![0.0; l.len()])
                .collect();
            chain_gradient(&policies[*k], &old[*k], None, &ag.actions, terms, &mut gr);
            (*k, gr)
        })
        .collect();
    Ok((s.objective, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardVariant;

    fn rules() -> &'static RuleTableSet {
        RuleTableSet::builtin()
    }

    #[test]
    fn uniform_init() {
        let p = init_policy(BiasDomain::A, 1, InitMode::Uniform);
        assert_eq!(p.num_heads(), 5);
        assert_eq!(p.probs(0), [0.5, 0.5]);
        for q in p.probs(4) {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(
            init_policy(BiasDomain::A, 4, InitMode::Random),
            init_policy(BiasDomain::A, 4, InitMode::Random)
        );
        assert_ne!(
            init_policy(BiasDomain::A, 4, InitMode::Random),
            init_policy(BiasDomain::A, 5, InitMode::Random)
        );
    }

    #[test]
    fn uniform_expected_coherence_is_one_third() {
        let p = init_policy(BiasDomain::A, 0, InitMode::Uniform);
        let inst = generate_instances(BiasDomain::A, 1, 3, rules())
            .unwrap()
            .remove(0);
        let e = expected_metrics(&p, &inst, &RewardConfig::default(), rules()).unwrap();
        assert!((e.coherence - 1.0 / 3.0).abs() < 1e-12);
        assert!((e.outcome_reward - 1.0 / 3.0).abs() < 1e-12);
        assert!((e.process_reward - 0.75).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let mut p = init_policy(BiasDomain::B, 0, InitMode::Uniform);
        let r = p.clone();
        assert_eq!(policy_kl(&p, &r).unwrap(), 0.0);
        p.logits[0] = vec![9f64.ln(), 0.0];
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((policy_kl(&p, &r).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3681).abs() < 1e-4);
        assert!(policy_kl(&p, &init_policy(BiasDomain::A, 0, InitMode::Uniform)).is_err());
    }

    #[test]
    fn deterministic_policy_gives_zero_advantages() {
        let mut p = init_policy(BiasDomain::A, 0, InitMode::Uniform);
        for head in &mut p.logits {
            head[0] = 1e6;
        }
        let inst = generate_instances(BiasDomain::A, 1, 1, rules())
            .unwrap()
            .remove(0);
        let g = sample_group(&p, &inst, 16, 3, &RewardConfig::default(), rules()).unwrap();
        assert!(g.traces.iter().all(|t| t.actions == g.traces[0].actions));
        let adv = normalize_advantages(&g.batch.rewards, &OptimConfig::default()).unwrap();
        assert!(adv.values.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn sampling_is_deterministic_and_canonical() {
        let p = init_policy(BiasDomain::E, 2, InitMode::Random);
        let inst = generate_instances(BiasDomain::E, 1, 5, rules())
            .unwrap()
            .remove(0);
        let a = sample_group(&p, &inst, 16, 11, &RewardConfig::default(), rules()).unwrap();
        let b = sample_group(&p, &inst, 16, 11, &RewardConfig::default(), rules()).unwrap();
        assert_eq!(a, b);
        assert!(a.traces.iter().all(|t| t.format == 1));
        assert_eq!(a.batch.lengths(), vec![5; 16]);
        let mixed = a.batch.correctness.contains(&true) && a.batch.correctness.contains(&false);
        assert_eq!(dapo_filter(&a.batch.correctness), mixed);
    }

    #[test]
    fn inconsistent_instance_is_rejected() {
        let mut inst = generate_instances(BiasDomain::A, 1, 1, rules())
            .unwrap()
            .remove(0);
        inst.gold_risk = RiskLabel::ALL[(inst.gold_risk.index() + 1) % 3];
        let p = init_policy(BiasDomain::A, 0, InitMode::Uniform);
        let config = TrainConfig {
            iterations: 1,
            ..Default::default()
        };
        assert!(train(&p, &[inst], &config, rules()).is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_series() {
        let p = init_policy(BiasDomain::A, 0, InitMode::Random);
        let data = generate_instances(BiasDomain::A, 3, 2, rules()).unwrap();
        let config = TrainConfig {
            iterations: 5,
            learning_rate: 0.0,
            ..Default::default()
        };
        let run = train(&p, &data, &config, rules()).unwrap();
        let first = &run.log.iterations[0];
        for l in &run.log.iterations {
            assert_eq!(
                (
                    l.process_reward,
                    l.outcome_reward,
                    l.format_reward,
                    l.coherence,
                    l.kl
                ),
                (
                    first.process_reward,
                    first.outcome_reward,
                    first.format_reward,
                    first.coherence,
                    first.kl
                )
            );
            assert!(l.objective.abs() < 1e-12);
        }
        assert!(run.policies.iter().all(|q| *q == p));
    }

    #[test]
    fn steps_only_without_outcome_has_no_signal() {
        let p = init_policy(BiasDomain::A, 0, InitMode::Uniform);
        let data = generate_instances(BiasDomain::A, 2, 2, rules()).unwrap();
        let config = TrainConfig {
            iterations: 3,
            reward: RewardConfig::default().with_mode(RewardVariant::StepsOnly, false),
            ..Default::default()
        };
        let run = train(&p, &data, &config, rules()).unwrap();
        assert!(run
            .log
            .iterations
            .iter()
            .all(|l| l.zero_variance_groups == 2));
        assert!(run.policies.iter().all(|q| *q == p));
    }

    #[test]
    fn dapo_training_runs() {
        let p = init_policy(BiasDomain::C, 0, InitMode::Uniform);
        let data = generate_instances(BiasDomain::C, 3, 2, rules()).unwrap();
        let config = TrainConfig {
            iterations: 20,
            optim: OptimConfig::dapo(),
            ..Default::default()
        };
        let run = train(&p, &data, &config, rules()).unwrap();
        assert!(run
            .log
            .iterations
            .iter()
            .all(|l| l.zero_variance_groups == 0 && l.kept_groups <= 3));
        assert!(run.log.summary().outcome_reward > run.log.iterations[0].outcome_reward);
    }

    #[test]
    fn divergence_is_reported() {
        let p = init_policy(BiasDomain::A, 0, InitMode::Uniform);
        let data = generate_instances(BiasDomain::A, 1, 2, rules()).unwrap();
        let mut p = p;
        p.temperature = 1e-300;
        let config = TrainConfig {
            iterations: 5,
            learning_rate: 1e10,
            ..Default::default()
        };
        assert!(matches!(
            train(&p, &data, &config, rules()),
            Err(Error::Divergence { .. })
        ));
    }
}
