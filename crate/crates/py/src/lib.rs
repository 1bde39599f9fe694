use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mtcop_core::bandit::{self, BanditAlg, Sampler, SimEnv};
use mtcop_core::envs;
use mtcop_core::model::{
    init_params, rollout, sample_episodes, surrogate_loss_grad, DecodeMode, ModelSpec, ParamStore,
};
use mtcop_core::task::{CopKind, Task, TaskRegistry};
use mtcop_core::trainer::{self, evaluate_suite, step_gd, OptimizerKind, ScheduleKind, TrainConfig};
use mtcop_core::{rng, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("json: {e}"))
}

/// One combinatorial problem instance, independent of any policy.
#[pyclass]
struct Instance {
    inner: envs::Instance,
}

#[pymethods]
impl Instance {
    /// Problem family, e.g. "tsp" or "kp".
    #[getter]
    fn family(&self) -> &'static str {
        self.inner.cop().name()
    }

    /// Number of nodes or items.
    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.action_space()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!("Instance({}-{})", self.inner.cop().name(), self.inner.scale())
    }
}

/// Rebuilds an instance serialized with `Instance.to_json`.
#[pyfunction]
fn instance_from_json(text: &str) -> PyResult<Instance> {
    let inner = serde_json::from_str(text).map_err(json_err)?;
    Ok(Instance { inner })
}

fn parse_schedule(s: &str) -> PyResult<ScheduleKind> {
    if let Some(name) = s.strip_prefix("stl:") {
        let task = Task::parse(name).map_err(to_py)?;
        return Ok(ScheduleKind::Stl { task });
    }
    match s {
        "round-robin" => Ok(ScheduleKind::RoundRobin),
        "uniform" => Ok(ScheduleKind::UniformRandom),
        other => {
            let algorithm = BanditAlg::parse(other).map_err(|_| {
                PyValueError::new_err(format!(
                    "unknown schedule {other:?}; expected a bandit name, \
                     round-robin, uniform, or stl:<task>"
                ))
            })?;
            Ok(ScheduleKind::Bandit { algorithm })
        }
    }
}

/// A set of tasks plus one shared-parameter policy over them.
///
/// Typical use:
///
///     suite = mtcop.Suite(["tsp-5", "kp-10"], seed=3)
///     inst = suite.instance("tsp-5", seed=0)
///     obj, tour = suite.greedy(inst)
///     print(suite.gap(inst), suite.evaluate(n_instances=32))
#[pyclass]
struct Suite {
    registry: TaskRegistry,
    spec: ModelSpec,
    params: ParamStore,
    seed: u64,
    counter: u64,
}

impl Suite {
    fn member(&self, name: &str) -> PyResult<Task> {
        let task = Task::parse(name).map_err(to_py)?;
        if self.registry.find(task.cop, task.scale).is_none() {
            return Err(PyValueError::new_err(format!(
                "task {name:?} is not in this suite"
            )));
        }
        Ok(task)
    }
}

#[pymethods]
impl Suite {
    #[new]
    #[pyo3(signature = (tasks, hidden = 16, depth = 2, init_scale = 1.0, seed = 0))]
    fn new(
        tasks: Vec<String>,
        hidden: usize,
        depth: usize,
        init_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut groups: Vec<(CopKind, Vec<usize>)> = Vec::new();
        for name in &tasks {
            let t = Task::parse(name).map_err(to_py)?;
            match groups.iter_mut().find(|(cop, _)| *cop == t.cop) {
                Some((_, scales)) => scales.push(t.scale),
                None => groups.push((t.cop, vec![t.scale])),
            }
        }
        let registry = TaskRegistry::new(&groups).map_err(to_py)?;
        let spec = ModelSpec { hidden, depth, init_scale };
        let params = init_params(&spec, &registry, seed).map_err(to_py)?;
        Ok(Suite { registry, spec, params, seed, counter: 0 })
    }

    fn tasks(&self) -> Vec<String> {
        self.registry.tasks().iter().map(|t| t.name()).collect()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.params.values.len()
    }

    /// Generates a named task's instance from a seed. Instances are
    /// deterministic in (task, seed).
    fn instance(&self, task: &str, seed: u64) -> PyResult<Instance> {
        let t = self.member(task)?;
        let inner = envs::gen_instance(t, seed).map_err(to_py)?;
        Ok(Instance { inner })
    }

    /// Deterministic greedy construction; returns (objective, solution json).
    fn greedy(&self, inst: &Instance) -> PyResult<(f64, String)> {
        let mut r = rng::stream(0, "py-greedy");
        let (sol, _) = rollout(&self.params, &inst.inner, DecodeMode::Greedy, &mut r)
            .map_err(to_py)?;
        let obj = envs::evaluate(&inst.inner, &sol).map_err(to_py)?;
        Ok((obj, serde_json::to_string(&sol).map_err(json_err)?))
    }

    /// Samples one construction from the policy's step distributions.
    fn sample(&self, inst: &Instance, seed: u64) -> PyResult<(f64, String)> {
        let mut r = rng::stream(seed, "py-sample");
        let (sol, _) = rollout(&self.params, &inst.inner, DecodeMode::Sample, &mut r)
            .map_err(to_py)?;
        let obj = envs::evaluate(&inst.inner, &sol).map_err(to_py)?;
        Ok((obj, serde_json::to_string(&sol).map_err(json_err)?))
    }

    /// Exact reference objective for the instance.
    fn oracle(&self, inst: &Instance) -> PyResult<f64> {
        Ok(envs::oracle_solve(&inst.inner).map_err(to_py)?.value)
    }

    /// Greedy optimality gap in percent, non-negative up to the knapsack
    /// oracle's rounding bound.
    fn gap(&self, inst: &Instance) -> PyResult<f64> {
        let (obj, _) = self.greedy(inst)?;
        let gt = envs::oracle_solve(&inst.inner).map_err(to_py)?.value;
        envs::optimality_gap(obj, gt, inst.inner.cop().sense()).map_err(to_py)
    }

    /// One plain-gradient policy update on a fresh batch; returns the
    /// surrogate loss before the step.
    #[pyo3(signature = (task, batch_size = 8, n_rollouts = 4, lr = 1e-2))]
    fn train_step(
        &mut self,
        task: &str,
        batch_size: usize,
        n_rollouts: usize,
        lr: f64,
    ) -> PyResult<f64> {
        let t = self.member(task)?;
        if batch_size == 0 {
            return Err(PyValueError::new_err("batch_size must be at least 1"));
        }
        let label = format!("py-train/{}", t.name());
        let mark = self.counter;
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let inst =
                envs::gen_instance(t, rng::mix(self.seed, &label, self.counter)).map_err(to_py)?;
            batch.push(inst);
            self.counter += 1;
        }
        let mut roll = rng::stream(rng::mix(self.seed, "py-roll", mark), "py-roll");
        let episodes = sample_episodes(&self.params, &batch, n_rollouts, &mut roll).map_err(to_py)?;
        let norm = (batch.len() * n_rollouts) as f64;
        let (loss, grad) = surrogate_loss_grad(&self.params, &episodes, norm).map_err(to_py)?;
        step_gd(&mut self.params.values, &grad.values, lr);
        Ok(loss)
    }

    /// Mean greedy gap per task over held-out instances, as a dict with an
    /// extra "total" entry.
    #[pyo3(signature = (n_instances = 64, seed = 1))]
    fn evaluate(&self, py: Python<'_>, n_instances: usize, seed: u64) -> PyResult<Py<PyDict>> {
        let report = evaluate_suite(&self.params, &self.registry, n_instances, seed).map_err(to_py)?;
        let d = PyDict::new(py);
        for (name, gap) in report.tasks.iter().zip(&report.gap) {
            d.set_item(name, gap)?;
        }
        d.set_item("total", report.total_gap)?;
        Ok(d.into())
    }

    /// Runs the full scheduler loop from a fresh initialization and adopts
    /// the trained parameters. `budget` is in weighted steps; `schedule` is
    /// a bandit name ("exp3", "exp3r", "ts", "dts"), "round-robin",
    /// "uniform", or "stl:<task>". Returns a summary dict including the
    /// running-mean influence matrix.
    #[pyo3(signature = (budget, schedule = "exp3", freq = None, batch_size = 8,
                        n_rollouts = 4, lr = 3e-3, optimizer = "adam", seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        budget: f64,
        schedule: &str,
        freq: Option<usize>,
        batch_size: usize,
        n_rollouts: usize,
        lr: f64,
        optimizer: &str,
        seed: Option<u64>,
    ) -> PyResult<Py<PyDict>> {
        let mut cfg = TrainConfig::new(self.registry.clone(), budget);
        cfg.schedule = parse_schedule(schedule)?;
        cfg.freq = freq;
        cfg.model = self.spec;
        cfg.batch_size = batch_size;
        cfg.n_rollouts = n_rollouts;
        cfg.lr = lr;
        cfg.optimizer = match optimizer {
            "gd" => OptimizerKind::Gd,
            "adam" => OptimizerKind::adam_default(),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown optimizer {other:?}; expected \"gd\" or \"adam\""
                )))
            }
        };
        cfg.seed = seed.unwrap_or(self.seed);
        let out = trainer::train(&cfg).map_err(to_py)?;
        self.params = out.params;

        let d = PyDict::new(py);
        d.set_item("steps", out.steps)?;
        d.set_item("windows", out.metrics.len())?;
        d.set_item("budget_used", out.budget_used)?;
        let per_task = PyDict::new(py);
        for (task, count) in self.registry.tasks().iter().zip(&out.steps_per_task) {
            per_task.set_item(task.name(), count)?;
        }
        d.set_item("steps_per_task", per_task)?;
        d.set_item("influence", out.avg.mean())?;
        d.set_item("tasks", self.tasks())?;
        Ok(d.into())
    }

    fn __repr__(&self) -> String {
        format!("Suite({})", self.tasks().join(", "))
    }
}

/// Plays a scheduler against a synthetic reward process and reports the
/// trace. `alg` accepts the same names as `Suite.train`'s schedule. Means
/// must lie in [0, 1]; a `drift_period` makes them rotate one position
/// every that many steps.
#[pyfunction]
#[pyo3(signature = (alg, means, horizon = 10_000, seed = 0, drift_period = None))]
fn simulate_bandit(
    py: Python<'_>,
    alg: &str,
    means: Vec<f64>,
    horizon: usize,
    seed: u64,
    drift_period: Option<usize>,
) -> PyResult<Py<PyDict>> {
    if means.is_empty() {
        return Err(PyValueError::new_err("need at least one arm"));
    }
    if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(PyValueError::new_err("arm means must lie in [0, 1]"));
    }
    if horizon == 0 {
        return Err(PyValueError::new_err("horizon must be at least 1"));
    }
    let env = match drift_period {
        Some(0) => return Err(PyValueError::new_err("drift_period must be at least 1")),
        Some(period) => SimEnv::Drift { means, period },
        None => SimEnv::Bernoulli { means },
    };
    let n = env.n_arms();
    let mut sampler = match alg {
        "round-robin" => Sampler::round_robin(n),
        "uniform" => Sampler::uniform(n),
        other => Sampler::new(BanditAlg::parse(other).map_err(to_py)?, n, horizon),
    };
    let mut r = rng::stream(seed, "py-bandit");
    let trace = bandit::simulate(&mut sampler, &env, horizon, &mut r).map_err(to_py)?;

    let tail = horizon.min(1000);
    let start = horizon - tail;
    let hits = trace.arms[start..]
        .iter()
        .enumerate()
        .filter(|(i, arm)| **arm == env.best_arm(start + i))
        .count();
    let d = PyDict::new(py);
    d.set_item("final_regret", trace.regret.last().copied().unwrap_or(0.0))?;
    d.set_item(
        "mean_reward",
        trace.rewards.iter().sum::<f64>() / horizon as f64,
    )?;
    d.set_item("best_arm_rate", hits as f64 / tail as f64)?;
    d.set_item("arms", trace.arms)?;
    d.set_item("rewards", trace.rewards)?;
    d.set_item("regret", trace.regret)?;
    Ok(d.into())
}

/// Native bindings for the multi-task scheduling engine.
#[pymodule]
fn mtcop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_class::<Suite>()?;
    m.add_function(wrap_pyfunction!(instance_from_json, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_bandit, m)?)?;
    Ok(())
}
