//! The training loop: schedule a task, train one batch, record its
//! gradient, and at every window boundary turn the ledger into rewards for
//! the sampler. Also home to the optimizers, budget accounting, baseline
//! schedules, and greedy evaluation against the exact solvers.

use serde::{Deserialize, Serialize};

use crate::bandit::{BanditAlg, Sampler};
use crate::envs;
use crate::error::{Error, Result};
use crate::influence::{AvgInfluence, GradientLedger, InfluenceMatrix, StepKind};
use crate::model::{
    init_params, policy_gradient_loss, rollout, DecodeMode, ModelSpec, ParamStore,
};
use crate::rng;
use crate::task::{Sense, Task, TaskId, TaskRegistry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    Bandit { algorithm: BanditAlg },
    RoundRobin,
    UniformRandom,
    Stl { task: Task },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> OptimizerKind {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn build(self, param_len: usize) -> Optimizer {
        match self {
            OptimizerKind::Gd => Optimizer::Gd,
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam(AdamState {
                beta1,
                beta2,
                eps,
                m: vec![0.0; param_len],
                v: vec![0.0; param_len],
                t: 0,
            }),
        }
    }
}

/// One first/second-moment pair over the full parameter vector; segments a
/// step does not touch still decay, since the state is shared across tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Gd,
    Adam(AdamState),
}

impl Optimizer {
    /// Applies one descent step and reports how it can be attributed.
    pub fn apply(&mut self, values: &mut [f64], grad: &[f64], lr: f64) -> StepKind {
        match self {
            Optimizer::Gd => {
                step_gd(values, grad, lr);
                StepKind::Gd
            }
            Optimizer::Adam(state) => step_adam(values, grad, state, lr),
        }
    }
}

pub fn step_gd(values: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in values.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

/// Bias-corrected adaptive step. Returns the attribution record carrying
/// the realized denominators, which later lets the window's parameter
/// change be split exactly across the steps that fed the momentum.
pub fn step_adam(
    values: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    alpha: f64,
) -> StepKind {
    state.t += 1;
    let bias1 = 1.0 - state.beta1.powi(state.t as i32);
    let bias2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut denom = vec![0.0; values.len()];
    for i in 0..values.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        denom[i] = v_hat.sqrt() + state.eps;
        values[i] -= alpha * m_hat / denom[i];
    }
    StepKind::Adam { beta1: state.beta1, bias1, denom }
}

/// Abstract cost of one training step per task, so budgets compare
/// schedules fairly when scales differ in step cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetModel {
    weights: Vec<f64>,
}

impl BudgetModel {
    pub fn uniform(n_tasks: usize) -> BudgetModel {
        BudgetModel { weights: vec![1.0; n_tasks] }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<BudgetModel> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config("budget weights must be positive".into()));
        }
        Ok(BudgetModel { weights })
    }

    /// Default weights from measured per-epoch training cost of reference
    /// scales (small/median/large), interpolated by each task's rank among
    /// its family's scales.
    pub fn reference(registry: &TaskRegistry) -> BudgetModel {
        let anchors = |task: Task| -> [f64; 3] {
            match task.cop {
                crate::task::CopKind::Tsp => [0.19, 0.39, 0.75],
                crate::task::CopKind::Cvrp => [0.27, 0.50, 0.90],
                crate::task::CopKind::Op => [0.20, 0.41, 0.60],
                crate::task::CopKind::Kp => [0.34, 0.61, 1.10],
            }
        };
        let weights = registry
            .tasks()
            .iter()
            .map(|task| {
                let mut scales = registry.scales_of(task.cop);
                scales.sort_unstable();
                let k = scales.len();
                let [lo, mid, hi] = anchors(*task);
                if k == 1 {
                    return mid;
                }
                let rank = scales.iter().position(|s| *s == task.scale).unwrap();
                let p = rank as f64 / (k - 1) as f64;
                if p <= 0.5 {
                    lo + 2.0 * p * (mid - lo)
                } else {
                    mid + (2.0 * p - 1.0) * (hi - mid)
                }
            })
            .collect();
        BudgetModel { weights }
    }

    pub fn weight(&self, task: TaskId) -> f64 {
        self.weights[task.0]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub registry: TaskRegistry,
    pub schedule: ScheduleKind,
    /// Steps per update window; `None` means one per task.
    pub freq: Option<usize>,
    pub model: ModelSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Fraction of the budget after which the learning rate is scaled once.
    pub decay_at: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub n_rollouts: usize,
    /// Weighted steps; training stops once consumption reaches it.
    pub budget: f64,
    pub budget_model: BudgetModel,
    /// Bandit schedules visit every task once before sampling, so each arm
    /// has gradient information from the start.
    pub forced_first_pass: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(registry: TaskRegistry, budget: f64) -> TrainConfig {
        let budget_model = BudgetModel::reference(&registry);
        TrainConfig {
            registry,
            schedule: ScheduleKind::RoundRobin,
            freq: None,
            model: ModelSpec::default(),
            optimizer: OptimizerKind::adam_default(),
            lr: 3e-3,
            decay_at: 0.9,
            decay_factor: 0.1,
            batch_size: 32,
            n_rollouts: 4,
            budget,
            budget_model,
            forced_first_pass: true,
            seed: 0,
        }
    }

    pub fn freq_or_default(&self) -> usize {
        self.freq.unwrap_or_else(|| self.registry.len())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.freq == Some(0) {
            return Err(Error::Config("update frequency must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.n_rollouts < 2 {
            return Err(Error::Config("need at least two rollouts per instance".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0 < self.decay_at && self.decay_at <= 1.0) || !(self.decay_factor > 0.0) {
            return Err(Error::Config("invalid learning-rate decay settings".into()));
        }
        if self.budget_model.weights().len() != self.registry.len() {
            return Err(Error::Config(format!(
                "budget model covers {} tasks, registry has {}",
                self.budget_model.weights().len(),
                self.registry.len()
            )));
        }
        if let ScheduleKind::Stl { task } = self.schedule {
            if self.registry.find(task.cop, task.scale).is_none() {
                return Err(Error::Config(format!(
                    "single-task schedule names {} which is not in the registry",
                    task.name()
                )));
            }
        }
        Ok(())
    }
}

/// One metrics record per completed update window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: usize,
    pub selected_counts: Vec<usize>,
    pub raw_rewards: Vec<f64>,
    pub normalized_rewards: Vec<f64>,
    pub per_task_loss_ema: Vec<f64>,
    pub budget_used: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub sampler: Option<Sampler>,
    pub avg: AvgInfluence,
    pub matrices: Vec<InfluenceMatrix>,
    pub metrics: Vec<WindowMetrics>,
    pub steps: usize,
    pub steps_per_task: Vec<usize>,
    pub budget_used: f64,
}

/// Deterministic per-task instance seeds; evaluation uses a different label
/// so its instances never appear in training.
fn train_instance_seed(seed: u64, task_name: &str, counter: u64) -> u64 {
    rng::mix(seed, &format!("train/{task_name}"), counter)
}

fn eval_instance_seed(seed: u64, task_name: &str, index: u64) -> u64 {
    rng::mix(seed, &format!("eval/{task_name}"), index)
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let registry = &config.registry;
    let n = registry.len();
    let freq = config.freq_or_default();

    let mut params = init_params(&config.model, registry, config.seed)?;
    let layout = params.layout().clone();
    let mut optimizer = config.optimizer.build(layout.total());
    let mut ledger = GradientLedger::new(layout.total(), layout.shared(), registry.cop_indices())?;
    let mut avg = AvgInfluence::new(n, freq);

    let est_windows = (config.budget / config.budget_model.mean_weight() / freq as f64)
        .ceil()
        .max(1.0) as usize;
    let mut sampler = match config.schedule {
        ScheduleKind::Bandit { algorithm } => Some(Sampler::new(algorithm, n, est_windows)),
        ScheduleKind::RoundRobin => Some(Sampler::round_robin(n)),
        ScheduleKind::UniformRandom => Some(Sampler::uniform(n)),
        ScheduleKind::Stl { .. } => None,
    };
    let stl_task = match config.schedule {
        ScheduleKind::Stl { task } => registry.find(task.cop, task.scale),
        _ => None,
    };
    let mut forced: std::collections::VecDeque<TaskId> =
        if matches!(config.schedule, ScheduleKind::Bandit { .. }) && config.forced_first_pass {
            registry.ids().collect()
        } else {
            Default::default()
        };

    let mut bandit_rng = rng::stream(config.seed, "bandit");
    let mut rollout_rng = rng::stream(config.seed, "rollouts");
    let task_names = registry.task_names();

    let mut metrics = Vec::new();
    let mut matrices = Vec::new();
    let mut steps_per_task = vec![0usize; n];
    let mut instance_counters = vec![0u64; n];
    let mut loss_ema = vec![0.0f64; n];
    let mut loss_seen = vec![false; n];
    let mut window_counts = vec![0usize; n];
    let mut budget_used = 0.0;
    let mut step = 0usize;
    let mut window = 0usize;

    while budget_used < config.budget {
        step += 1;
        let task_id = if let Some(t) = stl_task {
            t
        } else if let Some(t) = forced.pop_front() {
            t
        } else {
            sampler.as_mut().unwrap().select(&mut bandit_rng)
        };
        let task = registry.task(task_id);

        let batch: Vec<envs::Instance> = (0..config.batch_size)
            .map(|_| {
                let c = instance_counters[task_id.0];
                instance_counters[task_id.0] += 1;
                envs::gen_instance(task, train_instance_seed(config.seed, &task_names[task_id.0], c))
            })
            .collect::<Result<_>>()?;

        let (loss, grad) =
            policy_gradient_loss(&params, &batch, config.n_rollouts, &mut rollout_rng)?;
        let lr = if budget_used / config.budget >= config.decay_at {
            config.lr * config.decay_factor
        } else {
            config.lr
        };
        optimizer.apply(&mut params.values, &grad.values, lr);
        ledger.record(step, task_id, &grad)?;

        if loss_seen[task_id.0] {
            loss_ema[task_id.0] = 0.9 * loss_ema[task_id.0] + 0.1 * loss;
        } else {
            loss_ema[task_id.0] = loss;
            loss_seen[task_id.0] = true;
        }
        steps_per_task[task_id.0] += 1;
        window_counts[task_id.0] += 1;
        budget_used += config.budget_model.weight(task_id);

        if step % freq == 0 {
            window += 1;
            let m = ledger.build_matrix();
            let reward = m.reward();
            if matches!(config.schedule, ScheduleKind::Bandit { .. }) {
                // Only arms with gradient information get a reward; the
                // rest keep their weights.
                let informed: Vec<(TaskId, f64)> = registry
                    .ids()
                    .filter(|t| ledger.informed(*t))
                    .map(|t| (t, reward.normalized[t.0]))
                    .collect();
                sampler.as_mut().unwrap().update(&informed)?;
            }
            avg.update(&m)?;
            metrics.push(WindowMetrics {
                window,
                selected_counts: window_counts.clone(),
                raw_rewards: reward.raw,
                normalized_rewards: reward.normalized,
                per_task_loss_ema: loss_ema.clone(),
                budget_used,
            });
            matrices.push(m);
            ledger.close_window();
            window_counts.iter_mut().for_each(|c| *c = 0);
        }
    }
    // A trailing partial window trains but triggers no reward update.

    Ok(TrainOutput {
        params,
        optimizer,
        sampler,
        avg,
        matrices,
        metrics,
        steps: step,
        steps_per_task,
        budget_used,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StlAllocation {
    /// Equal budget per family, then equal per scale.
    Avg,
    /// Equal budget per family, split 1:2:3 from the smallest scale up.
    Bal,
}

impl StlAllocation {
    pub fn parse(s: &str) -> Result<StlAllocation> {
        match s {
            "avg" => Ok(StlAllocation::Avg),
            "bal" => Ok(StlAllocation::Bal),
            other => Err(Error::Config(format!("unknown allocation {other:?}"))),
        }
    }
}

/// Splits a total budget into per-task training budgets for the
/// one-model-per-task baselines.
pub fn make_stl_schedule(
    registry: &TaskRegistry,
    budget: f64,
    alloc: StlAllocation,
) -> Result<Vec<f64>> {
    if !(budget > 0.0) {
        return Err(Error::Config("budget must be positive".into()));
    }
    let per_cop = budget / registry.cops().len() as f64;
    let mut out = vec![0.0; registry.len()];
    for &cop in registry.cops() {
        let mut scales = registry.scales_of(cop);
        scales.sort_unstable();
        let k = scales.len();
        match alloc {
            StlAllocation::Avg => {
                for id in registry.ids() {
                    if registry.task(id).cop == cop {
                        out[id.0] = per_cop / k as f64;
                    }
                }
            }
            StlAllocation::Bal => {
                if k != 3 {
                    return Err(Error::Config(format!(
                        "1:2:3 allocation needs exactly 3 scales per family, {cop} has {k}"
                    )));
                }
                for id in registry.ids() {
                    let task = registry.task(id);
                    if task.cop == cop {
                        let rank = scales.iter().position(|s| *s == task.scale).unwrap();
                        out[id.0] = per_cop * (rank + 1) as f64 / 6.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub baseline_total: f64,
    pub per_task: Vec<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<String>,
    /// Mean optimality gap (percent) per task, greedy decoding.
    pub gap: Vec<f64>,
    pub total_gap: f64,
    /// Instances skipped because the reference objective is zero.
    pub skipped: Vec<usize>,
    pub steps: Vec<usize>,
    pub budget_used: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub gain: Option<GainReport>,
}

impl EvalReport {
    /// Gap differences vs. a baseline over the same task set.
    pub fn apply_baseline(&mut self, baseline: &EvalReport) -> Result<()> {
        if self.tasks != baseline.tasks {
            return Err(Error::Config(
                "baseline report covers a different task set".into(),
            ));
        }
        let per_task = self
            .gap
            .iter()
            .zip(&baseline.gap)
            .map(|(a, b)| a - b)
            .collect();
        self.gain = Some(GainReport {
            baseline_total: baseline.total_gap,
            per_task,
            total: self.total_gap - baseline.total_gap,
        });
        Ok(())
    }
}

/// Greedy-rollout objectives vs. the exact solvers over a held-out
/// instance set.
pub fn evaluate_suite(
    params: &ParamStore,
    registry: &TaskRegistry,
    n_instances: usize,
    eval_seed: u64,
) -> Result<EvalReport> {
    if n_instances == 0 {
        return Err(Error::Config("evaluation needs at least one instance".into()));
    }
    let mut gap = Vec::with_capacity(registry.len());
    let mut skipped = Vec::with_capacity(registry.len());
    let mut greedy_rng = rng::stream(eval_seed, "eval-greedy");
    for id in registry.ids() {
        let task = registry.task(id);
        let name = task.name();
        let mut total = 0.0;
        let mut used = 0usize;
        let mut skip = 0usize;
        for i in 0..n_instances {
            let inst = envs::gen_instance(task, eval_instance_seed(eval_seed, &name, i as u64))?;
            let oracle = envs::oracle_solve(&inst)?;
            let (solution, _) = rollout(params, &inst, DecodeMode::Greedy, &mut greedy_rng)?;
            let obj = envs::evaluate(&inst, &solution)?;
            debug_assert!(match task.cop.sense() {
                Sense::Min => obj >= oracle.value - 1e-9,
                Sense::Max => obj <= oracle.value + oracle.error_bound + 1e-9,
            });
            match envs::optimality_gap(obj, oracle.value, task.cop.sense()) {
                Ok(g) => {
                    total += g;
                    used += 1;
                }
                Err(Error::UndefinedGap) => skip += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Err(Error::Protocol(format!(
                "every {name} instance has a zero reference objective"
            )));
        }
        gap.push(total / used as f64);
        skipped.push(skip);
    }
    let total_gap = gap.iter().sum();
    Ok(EvalReport {
        tasks: registry.task_names(),
        gap,
        total_gap,
        skipped,
        steps: vec![0; registry.len()],
        budget_used: 0.0,
        gain: None,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub registry: TaskRegistry,
    pub model: ModelSpec,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub sampler: Option<Sampler>,
    pub avg: AvgInfluence,
    pub steps: usize,
    pub steps_per_task: Vec<usize>,
    pub budget_used: f64,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn from_output(config: &TrainConfig, output: &TrainOutput) -> Checkpoint {
        Checkpoint {
            version: Self::VERSION,
            registry: config.registry.clone(),
            model: config.model,
            params: output.params.clone(),
            optimizer: output.optimizer.clone(),
            sampler: output.sampler.clone(),
            avg: output.avg.clone(),
            steps: output.steps,
            steps_per_task: output.steps_per_task.clone(),
            budget_used: output.budget_used,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != Self::VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {})",
                ck.version,
                Self::VERSION
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GradientVector, Scope};
    use crate::task::CopKind;

    fn tiny_registry() -> TaskRegistry {
        TaskRegistry::new(&[(CopKind::Tsp, vec![4]), (CopKind::Kp, vec![5])]).unwrap()
    }

    fn tiny_config(registry: TaskRegistry, budget: f64) -> TrainConfig {
        let n = registry.len();
        let mut cfg = TrainConfig::new(registry, budget);
        cfg.model = ModelSpec { hidden: 4, depth: 1, init_scale: 1.0 };
        cfg.batch_size = 2;
        cfg.n_rollouts = 2;
        cfg.budget_model = BudgetModel::uniform(n);
        cfg
    }

    #[test]
    fn plain_descent_steps_match_hand_arithmetic() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4])]).unwrap();
        let mut p = init_params(&ModelSpec { hidden: 2, depth: 1, init_scale: 0.5 }, &reg, 1).unwrap();
        let before = p.values.clone();
        let zero = GradientVector::zeros(p.values.len(), Scope::FullForCop(0));
        step_gd(&mut p.values, &zero.values, 0.1);
        assert_eq!(p.values, before);

        let mut g = zero.clone();
        g.values[0] = 2.0;
        step_gd(&mut p.values, &g.values, 0.1);
        assert!((p.values[0] - (before[0] - 0.2)).abs() < 1e-15);

        // Two fixed-gradient steps equal one step at the summed rate.
        let mut a = p.clone();
        step_gd(&mut a.values, &g.values, 0.05);
        step_gd(&mut a.values, &g.values, 0.05);
        let mut b = p.clone();
        step_gd(&mut b.values, &g.values, 0.1);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn first_adaptive_step_is_sign_scaled() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4])]).unwrap();
        let mut p = init_params(&ModelSpec { hidden: 2, depth: 1, init_scale: 0.5 }, &reg, 2).unwrap();
        let before = p.values.clone();
        let mut state = AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; p.values.len()],
            v: vec![0.0; p.values.len()],
            t: 0,
        };
        let mut g = GradientVector::zeros(p.values.len(), Scope::FullForCop(0));
        g.values[0] = 3.0;
        g.values[1] = -0.25;
        let kind = step_adam(&mut p.values, &g.values, &mut state, 0.01);
        for i in 0..2 {
            let expect = before[i] - 0.01 * g.values[i] / (g.values[i].abs() + 1e-8);
            assert!((p.values[i] - expect).abs() < 1e-12);
        }
        let StepKind::Adam { bias1, denom, .. } = kind else { panic!() };
        assert!((bias1 - 0.1).abs() < 1e-15);
        assert!((denom[0] - (3.0 + 1e-8)).abs() < 1e-9);

        // From a fresh state, zero gradients never move the parameters;
        // built-up moments merely decay toward zero.
        let frozen = p.values.clone();
        let mut fresh = AdamState { m: vec![0.0; p.values.len()], t: 0, ..state.clone() };
        let zero = GradientVector::zeros(p.values.len(), Scope::FullForCop(0));
        fresh.v.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..50 {
            step_adam(&mut p.values, &zero.values, &mut fresh, 0.01);
        }
        assert_eq!(p.values, frozen);
        for _ in 0..50 {
            step_adam(&mut p.values, &zero.values, &mut state, 0.01);
        }
        assert!(state.m[0].abs() < 3.0 * 0.9f64.powi(50) + 1e-12);
    }

    #[test]
    fn adaptive_steps_match_an_independent_reference_loop() {
        // Quadratic L(x, y) = ½(x−3)² + ½(y+1)², reference Adam written
        // out directly with scalars.
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4])]).unwrap();
        let mut p = init_params(&ModelSpec { hidden: 2, depth: 1, init_scale: 0.5 }, &reg, 3).unwrap();
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let len = p.values.len();
        let mut state = OptimizerKind::adam_default().build(len);
        let (alpha, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);

        let mut rx = (0.0f64, 0.0f64, 0.0f64); // m, v, θ for x
        let mut ry = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let mut g = GradientVector::zeros(len, Scope::FullForCop(0));
            g.values[0] = p.values[0] - 3.0;
            g.values[1] = p.values[1] + 1.0;
            state.apply(&mut p.values, &g.values, alpha);

            for (slot, target) in [(&mut rx, 3.0), (&mut ry, -1.0)] {
                let grad = slot.2 - target;
                slot.0 = b1 * slot.0 + (1.0 - b1) * grad;
                slot.1 = b2 * slot.1 + (1.0 - b2) * grad * grad;
                let mh = slot.0 / (1.0 - b1.powi(t));
                let vh = slot.1 / (1.0 - b2.powi(t));
                slot.2 -= alpha * mh / (vh.sqrt() + eps);
            }
        }
        assert!((p.values[0] - rx.2).abs() < 1e-10);
        assert!((p.values[1] - ry.2).abs() < 1e-10);
    }

    #[test]
    fn reference_budget_weights_interpolate_by_scale_rank() {
        let reg = TaskRegistry::new(&[
            (CopKind::Tsp, vec![5, 8, 10]),
            (CopKind::Kp, vec![10]),
        ])
        .unwrap();
        let model = BudgetModel::reference(&reg);
        assert_eq!(model.weights(), &[0.19, 0.39, 0.75, 0.61]);

        let two = TaskRegistry::new(&[(CopKind::Op, vec![4, 9])]).unwrap();
        let w = BudgetModel::reference(&two).weights().to_vec();
        assert_eq!(w, vec![0.20, 0.60]);
    }

    #[test]
    fn stl_budgets_split_evenly_or_by_scale_ratio() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4, 5, 6])]).unwrap();
        assert_eq!(
            make_stl_schedule(&reg, 12.0, StlAllocation::Avg).unwrap(),
            vec![4.0, 4.0, 4.0]
        );
        assert_eq!(
            make_stl_schedule(&reg, 12.0, StlAllocation::Bal).unwrap(),
            vec![2.0, 4.0, 6.0]
        );

        let two = TaskRegistry::new(&[
            (CopKind::Tsp, vec![4, 5, 6]),
            (CopKind::Kp, vec![5, 6, 7]),
        ])
        .unwrap();
        assert_eq!(
            make_stl_schedule(&two, 24.0, StlAllocation::Avg).unwrap(),
            vec![4.0; 6]
        );
        let unbalanced = TaskRegistry::new(&[(CopKind::Tsp, vec![4, 5])]).unwrap();
        assert!(make_stl_schedule(&unbalanced, 12.0, StlAllocation::Bal).is_err());
    }

    #[test]
    fn single_task_schedule_trains_only_its_task() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(reg, 8.0);
        cfg.schedule = ScheduleKind::Stl { task: Task { cop: CopKind::Kp, scale: 5 } };
        cfg.freq = Some(2);
        let out = train(&cfg).unwrap();
        assert_eq!(out.steps_per_task, vec![0, 8]);
        for m in &out.matrices {
            // Only the trained task's column may be non-zero.
            for row in &m.values {
                assert_eq!(row[0], 0.0);
            }
        }
        assert_eq!(out.sampler, None);
    }

    #[test]
    fn round_robin_balances_counts_and_pins_the_diagonal() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(reg, 8.0);
        cfg.schedule = ScheduleKind::RoundRobin;
        cfg.freq = Some(2);
        let out = train(&cfg).unwrap();
        assert_eq!(out.steps_per_task, vec![4, 4]);
        assert_eq!(out.avg.windows(), 4);
        for metrics in &out.metrics {
            assert_eq!(metrics.selected_counts, vec![1, 1]);
        }
        for m in &out.matrices {
            for t in 0..2 {
                assert_eq!(m.values[t][t], 1.0);
            }
        }
    }

    #[test]
    fn bandit_schedule_visits_every_arm_first_and_stays_deterministic() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(reg, 10.0);
        cfg.schedule = ScheduleKind::Bandit { algorithm: BanditAlg::Exp3 };
        cfg.freq = Some(2);
        let out = train(&cfg).unwrap();
        assert_eq!(out.metrics[0].selected_counts, vec![1, 1]);
        assert!(out.sampler.is_some());

        let again = train(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&out.metrics).unwrap(),
            serde_json::to_string(&again.metrics).unwrap()
        );
        assert_eq!(out.params.values, again.params.values);

        let mut other_seed = cfg.clone();
        other_seed.seed = 99;
        let different = train(&other_seed).unwrap();
        assert_ne!(out.params.values, different.params.values);
    }

    #[test]
    fn budget_accounting_and_window_counts_line_up() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(reg.clone(), 5.0);
        cfg.budget_model = BudgetModel::from_weights(vec![0.4, 0.7]).unwrap();
        cfg.freq = Some(3);
        let out = train(&cfg).unwrap();
        let recomputed: f64 = out
            .steps_per_task
            .iter()
            .zip(cfg.budget_model.weights())
            .map(|(s, w)| *s as f64 * w)
            .sum();
        assert!((recomputed - out.budget_used).abs() < 1e-12);
        assert!(out.budget_used >= cfg.budget);
        assert!(out.budget_used < cfg.budget + 0.7);
        assert_eq!(out.avg.windows(), out.steps / 3);
        assert_eq!(out.metrics.len(), out.steps / 3);
    }

    #[test]
    fn training_config_validation_catches_bad_fields() {
        let reg = tiny_registry();
        assert!(train(&tiny_config(reg.clone(), 0.0)).is_err());
        let mut cfg = tiny_config(reg.clone(), 4.0);
        cfg.freq = Some(0);
        assert!(train(&cfg).is_err());
        let mut cfg = tiny_config(reg.clone(), 4.0);
        cfg.n_rollouts = 1;
        assert!(train(&cfg).is_err());
        let mut cfg = tiny_config(reg.clone(), 4.0);
        cfg.schedule = ScheduleKind::Stl { task: Task { cop: CopKind::Op, scale: 5 } };
        assert!(train(&cfg).is_err());
        let mut cfg = tiny_config(reg, 4.0);
        cfg.budget_model = BudgetModel::uniform(5);
        assert!(train(&cfg).is_err());
    }

    #[test]
    fn evaluation_reports_nonnegative_gaps_that_sum() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![5]), (CopKind::Kp, vec![6])]).unwrap();
        let params = init_params(&ModelSpec { hidden: 4, depth: 1, init_scale: 1.0 }, &reg, 7).unwrap();
        let report = evaluate_suite(&params, &reg, 40, 123).unwrap();
        assert_eq!(report.tasks, vec!["tsp-5", "kp-6"]);
        assert!(report.gap.iter().all(|g| g.is_finite() && *g >= 0.0));
        assert!((report.total_gap - report.gap.iter().sum::<f64>()).abs() < 1e-9);

        let same = evaluate_suite(&params, &reg, 40, 123).unwrap();
        assert_eq!(report, same);
    }

    #[test]
    fn gain_is_the_difference_of_totals() {
        let mk = |gaps: Vec<f64>| EvalReport {
            tasks: vec!["a".into(), "b".into()],
            total_gap: gaps.iter().sum(),
            gap: gaps,
            skipped: vec![0, 0],
            steps: vec![0, 0],
            budget_used: 0.0,
            gain: None,
        };
        let mut ours = mk(vec![3.0, 5.515]);
        let baseline = mk(vec![10.0, 8.897]);
        ours.apply_baseline(&baseline).unwrap();
        let gain = ours.gain.unwrap();
        assert!((gain.total - (8.515 - 18.897)).abs() < 1e-12);
        assert!((gain.total - -10.382).abs() < 1e-12);

        let mut self_cmp = mk(vec![1.0, 2.0]);
        let same = self_cmp.clone();
        self_cmp.apply_baseline(&same).unwrap();
        assert!(self_cmp.gain.unwrap().per_task.iter().all(|g| *g == 0.0));

        let mut mismatched = mk(vec![1.0, 2.0]);
        let other = EvalReport { tasks: vec!["a".into(), "c".into()], ..same };
        assert!(mismatched.apply_baseline(&other).is_err());
    }

    #[test]
    fn checkpoints_round_trip_through_json() {
        let reg = tiny_registry();
        let mut cfg = tiny_config(reg, 4.0);
        cfg.schedule = ScheduleKind::Bandit { algorithm: BanditAlg::Ts };
        let out = train(&cfg).unwrap();
        let ck = Checkpoint::from_output(&cfg, &out);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.params.values, ck.params.values);
        assert_eq!(back.registry, ck.registry);
        assert_eq!(back.sampler, ck.sampler);
        assert_eq!(back.steps, ck.steps);

        let mut bad = serde_json::from_str::<serde_json::Value>(&text).unwrap();
        bad["version"] = serde_json::json!(99);
        assert!(Checkpoint::from_json(&bad.to_string()).is_err());
    }
}
