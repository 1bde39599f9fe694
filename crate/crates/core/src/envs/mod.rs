//! Problem environments: instance generation, feasibility, objectives, and
//! exact solvers for TSP, CVRP, OP, and KP at desk scales.
//!
//! Action indexing convention: node/item actions are `0..scale`; routing and
//! selection families with an explicit stop append one extra action at index
//! `scale` (CVRP: return to depot, OP/KP: terminate). TSP has no stop action.

mod oracle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::task::{CopKind, Sense, Task};

pub const CVRP_CAPACITY: u32 = 30;
pub const OP_BUDGET: f64 = 2.0;
/// Weight grid for the KP dynamic program.
pub const KP_RESOLUTION: f64 = 1e-4;
/// Validator slack for accumulated floating-point length/weight sums.
pub const FEAS_TOL: f64 = 1e-9;

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cop", rename_all = "lowercase")]
pub enum Instance {
    Tsp {
        coords: Vec<[f64; 2]>,
    },
    Cvrp {
        depot: [f64; 2],
        coords: Vec<[f64; 2]>,
        demands: Vec<u32>,
        capacity: u32,
    },
    Op {
        depot: [f64; 2],
        coords: Vec<[f64; 2]>,
        prizes: Vec<f64>,
        max_len: f64,
    },
    Kp {
        weights: Vec<f64>,
        values: Vec<f64>,
        capacity: f64,
    },
}

impl Instance {
    pub fn cop(&self) -> CopKind {
        match self {
            Instance::Tsp { .. } => CopKind::Tsp,
            Instance::Cvrp { .. } => CopKind::Cvrp,
            Instance::Op { .. } => CopKind::Op,
            Instance::Kp { .. } => CopKind::Kp,
        }
    }

    /// Node / customer / item count (excludes the depot).
    pub fn scale(&self) -> usize {
        match self {
            Instance::Tsp { coords } => coords.len(),
            Instance::Cvrp { coords, .. } => coords.len(),
            Instance::Op { coords, .. } => coords.len(),
            Instance::Kp { weights, .. } => weights.len(),
        }
    }

    /// Number of actions a policy scores for this instance.
    pub fn action_space(&self) -> usize {
        match self.cop() {
            CopKind::Tsp => self.scale(),
            _ => self.scale() + 1,
        }
    }
}

/// One line of an instance file: the instance fields beside a "cop" tag and
/// the generating seed. Serialized by hand because serde's `flatten` parses
/// floats through an intermediate that drops the last ulp, which would break
/// byte-identical reruns.
#[derive(Clone, Debug)]
pub struct InstanceRecord {
    pub seed: u64,
    pub instance: Instance,
}

impl Serialize for InstanceRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(&self.instance).map_err(serde::ser::Error::custom)?;
        let map = v.as_object_mut().expect("instances serialize as maps");
        map.insert("seed".into(), serde_json::Value::from(self.seed));
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for InstanceRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let mut v = serde_json::Value::deserialize(d)?;
        let seed = v
            .as_object_mut()
            .and_then(|m| m.remove("seed"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| serde::de::Error::custom("record lacks a numeric 'seed'"))?;
        let instance = serde_json::from_value(v).map_err(serde::de::Error::custom)?;
        Ok(InstanceRecord { seed, instance })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Solution {
    /// TSP: closed tour, a permutation of all nodes.
    Tour { order: Vec<usize> },
    /// CVRP: customer indices per route; depot visits are implicit.
    Routes { routes: Vec<Vec<usize>> },
    /// OP: visited customers in order; depot start/end implicit.
    Path { order: Vec<usize> },
    /// KP: chosen item indices.
    Subset { items: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    HeldKarp,
    Dp,
    Enumeration,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub solution: Solution,
    pub method: OracleMethod,
    /// Non-zero only for KP, where weights are solved on a grid: the true
    /// optimum lies within `value + error_bound`.
    pub error_bound: f64,
}

pub fn gen_instance(task: Task, seed: u64) -> Result<Instance> {
    if task.scale < 2 || task.scale > task.cop.oracle_cap() {
        return Err(Error::Config(format!(
            "{} scale {} outside supported range 2..={}",
            task.cop,
            task.scale,
            task.cop.oracle_cap()
        )));
    }
    let mut rng = rng::stream(seed, &format!("gen/{}", task.name()));
    let n = task.scale;
    let point = |rng: &mut rand_chacha::ChaCha8Rng| [rng.random::<f64>(), rng.random::<f64>()];
    Ok(match task.cop {
        CopKind::Tsp => Instance::Tsp {
            coords: (0..n).map(|_| point(&mut rng)).collect(),
        },
        CopKind::Cvrp => {
            let depot = point(&mut rng);
            let coords: Vec<_> = (0..n).map(|_| point(&mut rng)).collect();
            let demands = (0..n).map(|_| rng.random_range(1..=9)).collect();
            Instance::Cvrp { depot, coords, demands, capacity: CVRP_CAPACITY }
        }
        CopKind::Op => {
            let depot = point(&mut rng);
            let coords: Vec<_> = (0..n).map(|_| point(&mut rng)).collect();
            let d: Vec<f64> = coords.iter().map(|c| dist(depot, *c)).collect();
            let dmax = d.iter().cloned().fold(0.0, f64::max).max(1e-12);
            let prizes = d
                .iter()
                .map(|di| (1.0 + (99.0 * di / dmax).floor()) / 100.0)
                .collect();
            Instance::Op { depot, coords, prizes, max_len: OP_BUDGET }
        }
        CopKind::Kp => {
            let weights: Vec<f64> = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
            let values = (0..n).map(|_| 1.0 - rng.random::<f64>()).collect();
            let wmax = weights.iter().cloned().fold(0.0, f64::max);
            let capacity = (n as f64 / 8.0).max(wmax);
            Instance::Kp { weights, values, capacity }
        }
    })
}

fn check_index(kind: &str, idx: usize, n: usize) -> Result<()> {
    if idx >= n {
        return Err(Error::Infeasible(format!(
            "{kind}: index {idx} out of range for {n} entries"
        )));
    }
    Ok(())
}

fn check_distinct(kind: &str, seen: &mut [bool], idx: usize) -> Result<()> {
    if seen[idx] {
        return Err(Error::Infeasible(format!("{kind}: index {idx} visited twice")));
    }
    seen[idx] = true;
    Ok(())
}

/// Checks every constraint of the solution against its instance; the error
/// message names the violated constraint.
pub fn validate(instance: &Instance, solution: &Solution) -> Result<()> {
    match (instance, solution) {
        (Instance::Tsp { coords }, Solution::Tour { order }) => {
            let n = coords.len();
            if order.len() != n {
                return Err(Error::Infeasible(
                    "tsp: tour must visit every node exactly once".into(),
                ));
            }
            let mut seen = vec![false; n];
            for &v in order {
                check_index("tsp", v, n)?;
                check_distinct("tsp", &mut seen, v)?;
            }
            Ok(())
        }
        (Instance::Cvrp { coords, demands, capacity, .. }, Solution::Routes { routes }) => {
            let n = coords.len();
            let mut seen = vec![false; n];
            for route in routes {
                if route.is_empty() {
                    return Err(Error::Infeasible("cvrp: empty route".into()));
                }
                let mut load = 0u32;
                for &c in route {
                    check_index("cvrp", c, n)?;
                    check_distinct("cvrp", &mut seen, c)?;
                    load += demands[c];
                }
                if load > *capacity {
                    return Err(Error::Infeasible(format!(
                        "cvrp: route demand {load} exceeds capacity {capacity}"
                    )));
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Infeasible("cvrp: customer not visited".into()));
            }
            Ok(())
        }
        (Instance::Op { depot, coords, max_len, .. }, Solution::Path { order }) => {
            let n = coords.len();
            let mut seen = vec![false; n];
            for &v in order {
                check_index("op", v, n)?;
                check_distinct("op", &mut seen, v)?;
            }
            let len = path_length(*depot, coords, order);
            if len > *max_len + FEAS_TOL {
                return Err(Error::Infeasible(format!(
                    "op: tour length {len:.6} exceeds budget {max_len:.6}"
                )));
            }
            Ok(())
        }
        (Instance::Kp { weights, capacity, .. }, Solution::Subset { items }) => {
            let n = weights.len();
            let mut seen = vec![false; n];
            let mut total = 0.0;
            for &i in items {
                check_index("kp", i, n)?;
                check_distinct("kp", &mut seen, i)?;
                total += weights[i];
            }
            if total > *capacity + FEAS_TOL {
                return Err(Error::Infeasible(format!(
                    "kp: weight {total:.6} exceeds capacity {capacity:.6}"
                )));
            }
            Ok(())
        }
        _ => Err(Error::Infeasible(
            "solution kind does not match instance family".into(),
        )),
    }
}

fn path_length(depot: [f64; 2], coords: &[[f64; 2]], order: &[usize]) -> f64 {
    if order.is_empty() {
        return 0.0;
    }
    let mut len = dist(depot, coords[order[0]]);
    for w in order.windows(2) {
        len += dist(coords[w[0]], coords[w[1]]);
    }
    len + dist(coords[*order.last().unwrap()], depot)
}

fn tour_length(coords: &[[f64; 2]], order: &[usize]) -> f64 {
    let n = order.len();
    (0..n)
        .map(|i| dist(coords[order[i]], coords[order[(i + 1) % n]]))
        .sum()
}

/// Objective of a feasible solution. TSP/CVRP: total length (lower is
/// better); OP: total prize; KP: total value (higher is better).
pub fn evaluate(instance: &Instance, solution: &Solution) -> Result<f64> {
    validate(instance, solution)?;
    Ok(match (instance, solution) {
        (Instance::Tsp { coords }, Solution::Tour { order }) => tour_length(coords, order),
        (Instance::Cvrp { depot, coords, .. }, Solution::Routes { routes }) => routes
            .iter()
            .map(|r| path_length(*depot, coords, r))
            .sum(),
        (Instance::Op { prizes, .. }, Solution::Path { order }) => {
            order.iter().map(|&v| prizes[v]).sum()
        }
        (Instance::Kp { values, .. }, Solution::Subset { items }) => {
            items.iter().map(|&i| values[i]).sum()
        }
        _ => unreachable!("validate checked the pairing"),
    })
}

/// Construction state recovered by replaying an action prefix.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub visited: Vec<bool>,
    /// Routing families: node we currently stand on; `None` means depot
    /// (CVRP/OP) or unstarted (TSP). Unused for KP.
    pub current: Option<usize>,
    /// CVRP: load on the open route. OP: length walked. KP: weight packed.
    pub used: f64,
    /// OP/KP: terminate action taken.
    pub done: bool,
    pub steps: usize,
}

pub(crate) fn initial_state(instance: &Instance) -> EnvState {
    EnvState {
        visited: vec![false; instance.scale()],
        current: None,
        used: 0.0,
        done: false,
        steps: 0,
    }
}

/// Replays an action prefix, checking each action against the mask.
pub fn replay(instance: &Instance, actions: &[usize]) -> Result<EnvState> {
    let mut state = initial_state(instance);
    for &a in actions {
        let mask = mask_of(instance, &state);
        if a >= mask.len() || !mask[a] {
            return Err(Error::Infeasible(format!(
                "action {a} infeasible at step {}",
                state.steps
            )));
        }
        apply_action(instance, &mut state, a);
    }
    Ok(state)
}

pub(crate) fn apply_action(instance: &Instance, state: &mut EnvState, action: usize) {
    let n = instance.scale();
    state.steps += 1;
    match instance {
        Instance::Tsp { .. } => {
            state.visited[action] = true;
            state.current = Some(action);
        }
        Instance::Cvrp { demands, .. } => {
            if action == n {
                state.current = None;
                state.used = 0.0;
            } else {
                state.visited[action] = true;
                state.current = Some(action);
                state.used += f64::from(demands[action]);
            }
        }
        Instance::Op { depot, coords, .. } => {
            if action == n {
                state.done = true;
            } else {
                let from = match state.current {
                    Some(c) => coords[c],
                    None => *depot,
                };
                state.used += dist(from, coords[action]);
                state.visited[action] = true;
                state.current = Some(action);
            }
        }
        Instance::Kp { weights, .. } => {
            if action == n {
                state.done = true;
            } else {
                state.visited[action] = true;
                state.used += weights[action];
            }
        }
    }
}

pub(crate) fn mask_of(instance: &Instance, state: &EnvState) -> Vec<bool> {
    let n = instance.scale();
    match instance {
        Instance::Tsp { .. } => (0..n).map(|i| !state.visited[i]).collect(),
        Instance::Cvrp { demands, capacity, .. } => {
            let mut mask = vec![false; n + 1];
            if state.visited.iter().all(|v| *v) {
                return mask;
            }
            let remaining = f64::from(*capacity) - state.used;
            for i in 0..n {
                mask[i] = !state.visited[i] && f64::from(demands[i]) <= remaining;
            }
            // Returning to the depot is a move, not a stop; it only makes
            // sense away from the depot.
            mask[n] = state.current.is_some();
            mask
        }
        Instance::Op { depot, coords, max_len, .. } => {
            let mut mask = vec![false; n + 1];
            if state.done {
                return mask;
            }
            let here = match state.current {
                Some(c) => coords[c],
                None => *depot,
            };
            for i in 0..n {
                if state.visited[i] {
                    continue;
                }
                let len = state.used + dist(here, coords[i]) + dist(coords[i], *depot);
                mask[i] = len <= *max_len;
            }
            mask[n] = true;
            mask
        }
        Instance::Kp { weights, capacity, .. } => {
            let mut mask = vec![false; n + 1];
            if state.done {
                return mask;
            }
            for i in 0..n {
                mask[i] = !state.visited[i] && state.used + weights[i] <= *capacity;
            }
            mask[n] = true;
            mask
        }
    }
}

/// Feasible-action mask after an action prefix. All-false signals a
/// terminal state.
pub fn feasible_actions(instance: &Instance, partial: &[usize]) -> Result<Vec<bool>> {
    let state = replay(instance, partial)?;
    Ok(mask_of(instance, &state))
}

/// Converts a complete action trace into the family's solution form.
pub fn solution_from_actions(instance: &Instance, actions: &[usize]) -> Solution {
    let n = instance.scale();
    match instance {
        Instance::Tsp { .. } => Solution::Tour { order: actions.to_vec() },
        Instance::Cvrp { .. } => {
            let mut routes = Vec::new();
            let mut route = Vec::new();
            for &a in actions {
                if a == n {
                    if !route.is_empty() {
                        routes.push(std::mem::take(&mut route));
                    }
                } else {
                    route.push(a);
                }
            }
            if !route.is_empty() {
                routes.push(route);
            }
            Solution::Routes { routes }
        }
        Instance::Op { .. } => Solution::Path {
            order: actions.iter().copied().filter(|&a| a != n).collect(),
        },
        Instance::Kp { .. } => Solution::Subset {
            items: actions.iter().copied().filter(|&a| a != n).collect(),
        },
    }
}

/// Per-action feature rows consumed by the model header. Row count equals
/// `instance.action_space()`; the extra CVRP/OP row carries the depot, the
/// extra KP row is zero.
pub fn node_rows(instance: &Instance) -> Vec<Vec<f64>> {
    match instance {
        Instance::Tsp { coords } => coords.iter().map(|c| vec![c[0], c[1]]).collect(),
        Instance::Cvrp { depot, coords, demands, capacity } => {
            let cap = f64::from(*capacity);
            let mut rows: Vec<Vec<f64>> = coords
                .iter()
                .zip(demands)
                .map(|(c, d)| vec![c[0], c[1], f64::from(*d) / cap])
                .collect();
            rows.push(vec![depot[0], depot[1], 0.0]);
            rows
        }
        Instance::Op { depot, coords, prizes, .. } => {
            let mut rows: Vec<Vec<f64>> = coords
                .iter()
                .zip(prizes)
                .map(|(c, p)| vec![c[0], c[1], *p])
                .collect();
            rows.push(vec![depot[0], depot[1], 0.0]);
            rows
        }
        Instance::Kp { weights, values, .. } => {
            let mut rows: Vec<Vec<f64>> = weights
                .iter()
                .zip(values)
                .map(|(w, v)| vec![*w, *v])
                .collect();
            rows.push(vec![0.0, 0.0]);
            rows
        }
    }
}

/// Index of the row the construction currently stands on, if any.
pub fn current_row(instance: &Instance, state: &EnvState) -> Option<usize> {
    let n = instance.scale();
    match instance {
        Instance::Tsp { .. } => state.current,
        // At the depot the depot row is the position.
        Instance::Cvrp { .. } | Instance::Op { .. } => Some(state.current.unwrap_or(n)),
        Instance::Kp { .. } => None,
    }
}

/// Fixed-length state scalars fed to the decoder context.
pub fn state_scalars(instance: &Instance, state: &EnvState) -> [f64; 4] {
    let n = instance.scale() as f64;
    let frac = state.visited.iter().filter(|v| **v).count() as f64 / n;
    let (used, room) = match instance {
        Instance::Tsp { .. } => (0.0, 0.0),
        Instance::Cvrp { capacity, .. } => {
            let cap = f64::from(*capacity);
            (state.used / cap, 1.0 - state.used / cap)
        }
        Instance::Op { max_len, .. } => (state.used / max_len, 1.0 - state.used / max_len),
        Instance::Kp { capacity, .. } => (state.used / capacity, 1.0 - state.used / capacity),
    };
    let placed = if state.current.is_some() { 1.0 } else { 0.0 };
    [frac, used, room, placed]
}

pub fn oracle_solve(instance: &Instance) -> Result<OracleResult> {
    let cap = instance.cop().oracle_cap();
    if instance.scale() > cap {
        return Err(Error::Unsupported(format!(
            "{} scale {} exceeds exact-solver cap {cap}",
            instance.cop(),
            instance.scale()
        )));
    }
    let result = match instance {
        Instance::Tsp { coords } => oracle::tsp(coords),
        Instance::Cvrp { depot, coords, demands, capacity } => {
            oracle::cvrp(*depot, coords, demands, *capacity)
        }
        Instance::Op { depot, coords, prizes, max_len } => {
            oracle::op(*depot, coords, prizes, *max_len)
        }
        Instance::Kp { weights, values, capacity } => {
            oracle::kp(weights, values, *capacity)
        }
    };
    debug_assert!({
        let back = evaluate(instance, &result.solution).unwrap();
        (back - result.value).abs() <= 1e-9
    });
    Ok(result)
}

/// `|obj/gt - 1| * 100`. With an exact reference this is non-negative for
/// both senses; `sense` is carried for report labeling.
pub fn optimality_gap(obj: f64, gt: f64, sense: Sense) -> Result<f64> {
    let _ = sense;
    if gt.abs() < 1e-12 {
        return Err(Error::UndefinedGap);
    }
    Ok((obj / gt - 1.0).abs() * 100.0)
}

pub fn write_instances<W: std::io::Write>(mut w: W, records: &[InstanceRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances<R: std::io::BufRead>(r: R) -> Result<Vec<InstanceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
