//! Experiment configuration files: plain `[section]` / `key = value` text.
//! Unknown sections and keys are rejected with their line number so a typo
//! never silently falls back to a default.

use crate::bandit::BanditAlg;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::task::{CopKind, Task, TaskRegistry};
use crate::trainer::{BudgetModel, OptimizerKind, ScheduleKind, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DEFAULT_EVAL_INSTANCES: usize = 1000;

/// Everything a full experiment needs beyond `TrainConfig`: evaluation
/// sizing and where files land. `out_dir` stays `None` when the file does
/// not pin one, letting the command line or environment supply it.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval_instances: usize,
    /// `None` inherits the training seed, so a `--seed` override moves
    /// both unless the file pins evaluation separately.
    pub eval_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or(self.train.seed)
    }
}

const SECTIONS: &[&str] = &[
    "tasks",
    "schedule",
    "model",
    "optimizer",
    "budget",
    "eval",
    "output",
];

struct RawConfig {
    /// (section, key) -> (value, line). BTreeMap keeps leftover-key
    /// reporting in a stable order.
    entries: BTreeMap<(String, String), (String, usize)>,
    seen_sections: Vec<String>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<RawConfig> {
        let mut entries = BTreeMap::new();
        let mut seen_sections = Vec::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::Parse { line, msg: "unterminated section header".into() });
                };
                let name = name.trim().to_string();
                if !SECTIONS.contains(&name.as_str()) {
                    return Err(Error::Parse { line, msg: format!("unknown section [{name}]") });
                }
                if !seen_sections.contains(&name) {
                    seen_sections.push(name.clone());
                }
                section = Some(name);
                continue;
            }
            let Some(eq) = trimmed.find('=') else {
                return Err(Error::Parse { line, msg: "expected key = value".into() });
            };
            let key = trimmed[..eq].trim().to_string();
            let value = trimmed[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse { line, msg: "empty key".into() });
            }
            let Some(ref sec) = section else {
                return Err(Error::Parse {
                    line,
                    msg: format!("key `{key}` appears before any [section]"),
                });
            };
            if entries.insert((sec.clone(), key.clone()), (value, line)).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key `{key}` in [{sec}]"),
                });
            }
        }
        Ok(RawConfig { entries, seen_sections })
    }

    fn has_section(&self, name: &str) -> bool {
        self.seen_sections.iter().any(|s| s == name)
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn finish(self) -> Result<()> {
        if let Some(((section, key), (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key `{key}` in [{section}]"),
            });
        }
        Ok(())
    }
}

fn parse_typed<T: std::str::FromStr>(value: &str, line: usize, what: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("expected {what}, got `{value}`"),
    })
}

fn parse_bool(value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse { line, msg: format!("expected true/false, got `{value}`") }),
    }
}

fn split_list(value: &str) -> Vec<&str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

struct Section<'a> {
    raw: &'a mut RawConfig,
    name: &'static str,
}

impl<'a> Section<'a> {
    fn str_opt(&mut self, key: &str) -> Option<(String, usize)> {
        self.raw.take(self.name, key)
    }

    fn str_req(&mut self, key: &str) -> Result<(String, usize)> {
        self.str_opt(key).ok_or_else(|| {
            Error::Config(format!("missing key `{key}` in [{}]", self.name))
        })
    }

    fn set<T: std::str::FromStr>(&mut self, key: &str, what: &str, slot: &mut T) -> Result<()> {
        if let Some((v, line)) = self.str_opt(key) {
            *slot = parse_typed(&v, line, what)?;
        }
        Ok(())
    }

    fn set_bool(&mut self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some((v, line)) = self.str_opt(key) {
            *slot = parse_bool(&v, line)?;
        }
        Ok(())
    }
}

fn build_registry(raw: &mut RawConfig) -> Result<TaskRegistry> {
    if !raw.has_section("tasks") {
        return Err(Error::Config("missing [tasks] section".into()));
    }
    let mut sec = Section { raw, name: "tasks" };
    let (cops_value, cops_line) = sec.str_req("cops")?;
    let mut families = Vec::new();
    for name in split_list(&cops_value) {
        let cop = CopKind::parse(name).map_err(|e| Error::Parse {
            line: cops_line,
            msg: e.to_string(),
        })?;
        let (scales_value, scales_line) = sec.str_req(&format!("{name}.scales"))?;
        let mut scales = Vec::new();
        for s in split_list(&scales_value) {
            scales.push(parse_typed::<usize>(s, scales_line, "a scale")?);
        }
        families.push((cop, scales));
    }
    TaskRegistry::new(&families)
}

fn build_schedule(raw: &mut RawConfig, registry: &TaskRegistry) -> Result<(ScheduleKind, Option<usize>, bool, u64)> {
    if !raw.has_section("schedule") {
        return Err(Error::Config("missing [schedule] section".into()));
    }
    let mut sec = Section { raw, name: "schedule" };
    let (kind_value, kind_line) = sec.str_req("kind")?;
    let kind = match kind_value.as_str() {
        "bandit" => {
            let (alg, alg_line) = sec.str_req("algorithm")?;
            let algorithm = BanditAlg::parse(&alg).map_err(|e| Error::Parse {
                line: alg_line,
                msg: e.to_string(),
            })?;
            ScheduleKind::Bandit { algorithm }
        }
        "round-robin" => ScheduleKind::RoundRobin,
        "uniform" => ScheduleKind::UniformRandom,
        "stl" => {
            let (name, line) = sec.str_req("stl.task")?;
            let task = Task::parse(&name)
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if registry.find(task.cop, task.scale).is_none() {
                return Err(Error::Parse {
                    line,
                    msg: format!("task `{name}` is not in [tasks]"),
                });
            }
            ScheduleKind::Stl { task }
        }
        other => {
            return Err(Error::Parse {
                line: kind_line,
                msg: format!("unknown schedule kind `{other}`"),
            })
        }
    };
    let mut freq = None;
    if let Some((v, line)) = sec.str_opt("freq") {
        freq = Some(parse_typed::<usize>(&v, line, "an integer")?);
    }
    let mut forced_first_pass = true;
    sec.set_bool("forced_first_pass", &mut forced_first_pass)?;
    let mut seed = 0u64;
    sec.set("seed", "an integer seed", &mut seed)?;
    Ok((kind, freq, forced_first_pass, seed))
}

fn build_model(raw: &mut RawConfig) -> Result<ModelSpec> {
    let mut spec = ModelSpec::default();
    let mut sec = Section { raw, name: "model" };
    sec.set("hidden", "an integer", &mut spec.hidden)?;
    sec.set("depth", "an integer", &mut spec.depth)?;
    sec.set("init_scale", "a number", &mut spec.init_scale)?;
    Ok(spec)
}

struct OptimizerSettings {
    kind: OptimizerKind,
    lr: f64,
    decay_at: f64,
    decay_factor: f64,
    batch_size: usize,
    n_rollouts: usize,
}

fn build_optimizer(raw: &mut RawConfig, defaults: &TrainConfig) -> Result<OptimizerSettings> {
    let mut sec = Section { raw, name: "optimizer" };
    let mut kind = defaults.optimizer;
    if let Some((v, line)) = sec.str_opt("kind") {
        kind = match v.as_str() {
            "gd" => OptimizerKind::Gd,
            "adam" => OptimizerKind::adam_default(),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown optimizer kind `{other}`"),
                })
            }
        };
    }
    if let OptimizerKind::Adam { ref mut beta1, ref mut beta2, ref mut eps } = kind {
        sec.set("beta1", "a number", beta1)?;
        sec.set("beta2", "a number", beta2)?;
        sec.set("eps", "a number", eps)?;
    } else {
        for key in ["beta1", "beta2", "eps"] {
            if let Some((_, line)) = sec.str_opt(key) {
                return Err(Error::Parse {
                    line,
                    msg: format!("`{key}` only applies to the adam optimizer"),
                });
            }
        }
    }
    let mut out = OptimizerSettings {
        kind,
        lr: defaults.lr,
        decay_at: defaults.decay_at,
        decay_factor: defaults.decay_factor,
        batch_size: defaults.batch_size,
        n_rollouts: defaults.n_rollouts,
    };
    sec.set("lr", "a number", &mut out.lr)?;
    sec.set("decay_at", "a number", &mut out.decay_at)?;
    sec.set("decay_factor", "a number", &mut out.decay_factor)?;
    sec.set("batch_size", "an integer", &mut out.batch_size)?;
    sec.set("rollouts", "an integer", &mut out.n_rollouts)?;
    Ok(out)
}

fn build_budget(raw: &mut RawConfig, registry: &TaskRegistry) -> Result<(f64, BudgetModel)> {
    if !raw.has_section("budget") {
        return Err(Error::Config("missing [budget] section".into()));
    }
    let mut sec = Section { raw, name: "budget" };
    let (steps_value, steps_line) = sec.str_req("steps")?;
    let steps = parse_typed::<f64>(&steps_value, steps_line, "a number")?;
    let model = match sec.str_opt("weights") {
        None => BudgetModel::reference(registry),
        Some((v, line)) => match v.as_str() {
            "auto" => BudgetModel::reference(registry),
            "uniform" => BudgetModel::uniform(registry.len()),
            list => {
                let mut weights = Vec::new();
                for w in split_list(list) {
                    weights.push(parse_typed::<f64>(w, line, "a weight")?);
                }
                if weights.len() != registry.len() {
                    return Err(Error::Parse {
                        line,
                        msg: format!(
                            "expected {} weights, got {}",
                            registry.len(),
                            weights.len()
                        ),
                    });
                }
                BudgetModel::from_weights(weights)?
            }
        },
    };
    Ok((steps, model))
}

/// Parses a full experiment file. Missing optional sections fall back to
/// the training defaults; `[tasks]`, `[schedule]`, and `[budget]` must be
/// present.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;
    let registry = build_registry(&mut raw)?;
    let (schedule, freq, forced_first_pass, seed) = build_schedule(&mut raw, &registry)?;
    let model = build_model(&mut raw)?;
    let (budget, budget_model) = build_budget(&mut raw, &registry)?;

    let mut train = TrainConfig::new(registry, budget);
    let optimizer = build_optimizer(&mut raw, &train)?;
    train.schedule = schedule;
    train.freq = freq;
    train.forced_first_pass = forced_first_pass;
    train.seed = seed;
    train.model = model;
    train.budget_model = budget_model;
    train.optimizer = optimizer.kind;
    train.lr = optimizer.lr;
    train.decay_at = optimizer.decay_at;
    train.decay_factor = optimizer.decay_factor;
    train.batch_size = optimizer.batch_size;
    train.n_rollouts = optimizer.n_rollouts;

    let mut eval_instances = DEFAULT_EVAL_INSTANCES;
    let mut eval_seed = None;
    {
        let mut sec = Section { raw: &mut raw, name: "eval" };
        sec.set("instances", "an integer", &mut eval_instances)?;
        if let Some((v, line)) = sec.str_opt("seed") {
            eval_seed = Some(parse_typed(&v, line, "an integer seed")?);
        }
    }

    let mut out_dir = None;
    if let Some((v, _)) = raw.take("output", "dir") {
        out_dir = Some(PathBuf::from(v));
    }

    raw.finish()?;
    train.validate()?;
    if eval_instances == 0 {
        return Err(Error::Config("eval instances must be positive".into()));
    }
    Ok(ExperimentConfig { train, eval_instances, eval_seed, out_dir })
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_experiment(&text)
}
