//! Gradient bookkeeping across update windows and the statistics derived
//! from it: pairwise influence entries, the per-window influence matrix,
//! column-sum rewards, a running average matrix, and the per-window loss
//! decomposition.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientVector, Scope};
use crate::task::TaskId;

/// Operands shorter than this are treated as "no information".
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectionLog {
    /// (step, selected task), one record per step, strictly increasing.
    pub records: Vec<(usize, TaskId)>,
}

/// A task's gradient sum carried over from the last window that trained it.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct StaleEntry {
    values: Vec<f64>,
    /// Last step that contributed, kept for diagnostics.
    step: usize,
}

/// Accumulates one gradient per training step inside an update window.
///
/// Per window and task it keeps the gradient sum and selection count. On
/// window close, sums of tasks that trained move into a stale cache; the
/// cache stands in for the target-side reference of tasks skipped in later
/// windows. Source-side operands never fall back to the cache: a task that
/// did not train this window contributes a zero column.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientLedger {
    param_len: usize,
    shared: Range<usize>,
    /// Family index per task; entries crossing families are projected to
    /// `shared` first.
    cop_of: Vec<usize>,
    sums: Vec<Vec<f64>>,
    counts: Vec<usize>,
    stale: Vec<Option<StaleEntry>>,
    log: SelectionLog,
    window_start: usize,
}

impl GradientLedger {
    pub fn new(param_len: usize, shared: Range<usize>, cop_of: Vec<usize>) -> Result<GradientLedger> {
        if shared.end > param_len || shared.is_empty() {
            return Err(Error::Config(format!(
                "shared segment {shared:?} does not fit {param_len} parameters"
            )));
        }
        if cop_of.is_empty() {
            return Err(Error::Config("ledger needs at least one task".into()));
        }
        let n = cop_of.len();
        Ok(GradientLedger {
            param_len,
            shared,
            cop_of,
            sums: vec![vec![0.0; param_len]; n],
            counts: vec![0; n],
            stale: vec![None; n],
            log: SelectionLog::default(),
            window_start: 0,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.cop_of.len()
    }

    pub fn shared(&self) -> Range<usize> {
        self.shared.clone()
    }

    pub fn selection_log(&self) -> &SelectionLog {
        &self.log
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Window bounds (start step, one past the last recorded step).
    pub fn window(&self) -> (usize, usize) {
        let end = match self.log.records.last() {
            Some((step, _)) => step + 1,
            None => self.window_start,
        };
        (self.window_start, end)
    }

    /// True when the task can serve as an influence target: it trained this
    /// window or a previous one.
    pub fn informed(&self, task: TaskId) -> bool {
        self.counts[task.0] > 0 || self.stale[task.0].is_some()
    }

    pub fn record(&mut self, step: usize, task: TaskId, grad: &GradientVector) -> Result<()> {
        if task.0 >= self.cop_of.len() {
            return Err(Error::Protocol(format!("unknown task id {}", task.0)));
        }
        if grad.len() != self.param_len {
            return Err(Error::Protocol(format!(
                "gradient length {} does not match {} parameters",
                grad.len(),
                self.param_len
            )));
        }
        match grad.scope {
            Scope::FullForCop(c) if c == self.cop_of[task.0] => {}
            _ => {
                return Err(Error::Protocol(format!(
                    "gradient scope {:?} does not match task {}",
                    grad.scope, task.0
                )))
            }
        }
        if let Some(&(last, _)) = self.log.records.last() {
            if step <= last {
                return Err(Error::Protocol(format!(
                    "step {step} already recorded (one gradient per step)"
                )));
            }
        } else if step < self.window_start {
            return Err(Error::Protocol(format!(
                "step {step} precedes window start {}",
                self.window_start
            )));
        }
        for (s, g) in self.sums[task.0].iter_mut().zip(&grad.values) {
            *s += g;
        }
        self.counts[task.0] += 1;
        self.log.records.push((step, task));
        Ok(())
    }

    /// Target-side operand: window mean when the task trained this window,
    /// otherwise the cached sum from its last active window, otherwise zero.
    pub fn target_reference(&self, target: TaskId) -> Vec<f64> {
        let t = target.0;
        if self.counts[t] > 0 {
            let inv = 1.0 / self.counts[t] as f64;
            return self.sums[t].iter().map(|v| v * inv).collect();
        }
        match &self.stale[t] {
            Some(entry) => entry.values.clone(),
            None => vec![0.0; self.param_len],
        }
    }

    /// Cosine between the target's reference gradient and the source's
    /// window sum. Cross-family pairs compare shared coordinates only.
    pub fn influence_entry(&self, target: TaskId, source: TaskId) -> f64 {
        if self.counts[source.0] == 0 {
            return 0.0;
        }
        if target == source {
            // Reference is sum/count: a positive multiple of the source
            // operand, so the cosine is 1 by definition. Returning it
            // directly keeps the diagonal exact.
            let norm = norm_of(&self.sums[source.0], None);
            return if norm < NORM_FLOOR { 0.0 } else { 1.0 };
        }
        let reference = self.target_reference(target);
        let window = if self.cop_of[target.0] == self.cop_of[source.0] {
            None
        } else {
            Some(self.shared.clone())
        };
        cosine_floored(&reference, &self.sums[source.0], window)
    }

    pub fn build_matrix(&self) -> InfluenceMatrix {
        let n = self.n_tasks();
        let values = (0..n)
            .map(|t| {
                (0..n)
                    .map(|s| self.influence_entry(TaskId(t), TaskId(s)))
                    .collect()
            })
            .collect();
        let (t1, t2) = self.window();
        InfluenceMatrix { values, t1, t2 }
    }

    /// Ends the window: sums of tasks that trained replace their stale
    /// cache entries, accumulators and log reset, next window starts after
    /// the last recorded step.
    pub fn close_window(&mut self) {
        let (_, end) = self.window();
        for t in 0..self.n_tasks() {
            if self.counts[t] > 0 {
                self.stale[t] = Some(StaleEntry {
                    values: std::mem::replace(&mut self.sums[t], vec![0.0; self.param_len]),
                    step: end - 1,
                });
            } else {
                self.sums[t].iter_mut().for_each(|v| *v = 0.0);
            }
            self.counts[t] = 0;
        }
        self.log.records.clear();
        self.window_start = end;
    }
}

fn norm_of(v: &[f64], window: Option<Range<usize>>) -> f64 {
    let slice = match &window {
        Some(r) => &v[r.clone()],
        None => v,
    };
    slice.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_floored(a: &[f64], b: &[f64], window: Option<Range<usize>>) -> f64 {
    let na = norm_of(a, window.clone());
    let nb = norm_of(b, window.clone());
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    let (sa, sb) = match &window {
        Some(r) => (&a[r.clone()], &b[r.clone()]),
        None => (a, b),
    };
    let dot: f64 = sa.iter().zip(sb).map(|(x, y)| x * y).sum();
    // Rounding guard: keep entries inside the mathematical range.
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Row = influence target, column = source of the window's training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub values: Vec<Vec<f64>>,
    pub t1: usize,
    pub t2: usize,
}

impl InfluenceMatrix {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn reward(&self) -> RewardVector {
        let n = self.n();
        let mut raw = vec![0.0; n];
        for row in &self.values {
            for (r, v) in raw.iter_mut().zip(row) {
                *r += v;
            }
        }
        let normalized = raw
            .iter()
            .map(|r| ((r + n as f64) / (2.0 * n as f64)).clamp(0.0, 1.0))
            .collect();
        RewardVector { raw, normalized }
    }
}

/// Column sums of an influence matrix, plus the bounded form fed to the
/// samplers: (raw + N) / 2N clamped to [0, 1], so "no information" maps to
/// the neutral 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Running element-wise mean of per-window influence matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AvgInfluence {
    sum: Vec<Vec<f64>>,
    windows: usize,
    /// Window length the mean is built from.
    pub freq: usize,
}

impl AvgInfluence {
    pub fn new(n_tasks: usize, freq: usize) -> AvgInfluence {
        AvgInfluence { sum: vec![vec![0.0; n_tasks]; n_tasks], windows: 0, freq }
    }

    pub fn update(&mut self, m: &InfluenceMatrix) -> Result<()> {
        if m.n() != self.sum.len() || m.values.iter().any(|r| r.len() != self.sum.len()) {
            return Err(Error::Protocol(format!(
                "matrix is not {0}x{0}",
                self.sum.len()
            )));
        }
        for (acc, row) in self.sum.iter_mut().zip(&m.values) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        self.windows += 1;
        Ok(())
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn mean(&self) -> Vec<Vec<f64>> {
        if self.windows == 0 {
            return self.sum.clone();
        }
        let inv = 1.0 / self.windows as f64;
        self.sum
            .iter()
            .map(|row| row.iter().map(|v| v * inv).collect())
            .collect()
    }
}

/// Writes a square matrix with task names as both header row and row
/// labels, entries at 6 decimals.
pub fn matrix_to_csv(values: &[Vec<f64>], names: &[String]) -> String {
    let mut out = String::new();
    out.push_str("task");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, row) in names.iter().zip(values) {
        out.push_str(name);
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty matrix file".into() })?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_owned).collect();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let mut cells = line.split(',');
        let label = cells.next().unwrap_or_default();
        if label != names[values.len()] {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("row label {label:?} out of order"),
            });
        }
        let row = cells
            .map(|c| {
                c.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    msg: format!("bad entry {c:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != names.len() {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {} entries, found {}", names.len(), row.len()),
            });
        }
        values.push(row);
    }
    if values.len() != names.len() {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: format!("expected {} rows, found {}", names.len(), values.len()),
        });
    }
    Ok((names, values))
}

/// Per-step attribution inside one window.
#[derive(Clone, Debug)]
pub enum StepKind {
    Gd,
    Adam {
        beta1: f64,
        /// 1 − β1^t for the step's own iteration count.
        bias1: f64,
        /// Realized per-parameter denominator √v̂ + ε at this step.
        denom: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TrajStep {
    pub step: usize,
    pub task: TaskId,
    pub grad: Vec<f64>,
    pub lr: f64,
    pub kind: StepKind,
}

/// Splits the window's cumulative parameter change into the portions driven
/// by the target task itself (`a`), by same-family siblings (`b`), and by
/// other families through the shared segment (`c`), each projected onto
/// `reference`. The loss change over the window is ≈ −(a + b + c).
///
/// Plain gradient steps attribute `lr·g` to the step's task. Adaptive steps
/// spread each applied update over the steps that fed its momentum, using
/// the realized denominators, so the attributions still sum to the exact
/// parameter change.
pub fn decomposition_effects(
    trajectory: &[TrajStep],
    target: TaskId,
    reference: &[f64],
    shared: Range<usize>,
    cop_of: &[usize],
) -> Result<(f64, f64, f64)> {
    let Some(first) = trajectory.first() else {
        return Ok((0.0, 0.0, 0.0));
    };
    let param_len = reference.len();
    let adam = matches!(first.kind, StepKind::Adam { .. });
    for (i, s) in trajectory.iter().enumerate() {
        if s.step != first.step + i {
            return Err(Error::Protocol(format!(
                "trajectory steps not contiguous at {}",
                s.step
            )));
        }
        if matches!(s.kind, StepKind::Adam { .. }) != adam {
            return Err(Error::Config(
                "optimizer kinds mixed within one window".into(),
            ));
        }
        if s.grad.len() != param_len {
            return Err(Error::Protocol("gradient length mismatch".into()));
        }
        if s.task.0 >= cop_of.len() {
            return Err(Error::Protocol(format!("unknown task id {}", s.task.0)));
        }
    }

    // Accumulated update per attribution group, in applied (descent) units.
    let mut own = vec![0.0; param_len];
    let mut sibling = vec![0.0; param_len];
    let mut foreign = vec![0.0; param_len];
    let target_cop = cop_of[target.0];
    for (k, src) in trajectory.iter().enumerate() {
        let bucket: &mut Vec<f64> = if src.task == target {
            &mut own
        } else if cop_of[src.task.0] == target_cop {
            &mut sibling
        } else {
            &mut foreign
        };
        if adam {
            for (t, applied) in trajectory.iter().enumerate().skip(k) {
                let StepKind::Adam { beta1, bias1, denom } = &applied.kind else {
                    unreachable!()
                };
                let coef = applied.lr * (1.0 - beta1) * beta1.powi((t - k) as i32) / bias1;
                for i in 0..param_len {
                    bucket[i] += coef * src.grad[i] / denom[i];
                }
            }
        } else {
            for i in 0..param_len {
                bucket[i] += src.lr * src.grad[i];
            }
        }
    }

    let dot = |u: &[f64]| reference.iter().zip(u).map(|(r, v)| r * v).sum::<f64>();
    let a = dot(&own);
    let b = dot(&sibling);
    let c = reference[shared.clone()]
        .iter()
        .zip(&foreign[shared])
        .map(|(r, v)| r * v)
        .sum::<f64>();
    Ok((a, b, c))
}
