//! Tabular emissions: gap tables, multi-run comparisons, and influence
//! exports. Floats are written at six decimals and every format has a
//! parser, so files survive a round trip unchanged.

use crate::error::{Error, Result};
use crate::task::TaskRegistry;
use crate::trainer::{EvalReport, ScheduleKind, WindowMetrics};
use serde::{Deserialize, Serialize};

/// Self-contained record a run directory leaves behind for later
/// aggregation: which method produced it, over which tasks, and how the
/// final parameters evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub registry: TaskRegistry,
    pub seed: u64,
    pub eval: EvalReport,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Stable method name for file columns and run directories.
pub fn schedule_label(schedule: &ScheduleKind) -> String {
    match schedule {
        ScheduleKind::Bandit { algorithm } => format!("bandit-{algorithm}"),
        ScheduleKind::RoundRobin => "round-robin".into(),
        ScheduleKind::UniformRandom => "uniform".into(),
        ScheduleKind::Stl { task } => format!("stl-{}", task.name()),
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Per-task mean gaps with a trailing `total` row; a `gain_vs_baseline`
/// column appears when the report carries baseline differences.
pub fn gap_table_csv(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("task,gap_pct");
    if report.gain.is_some() {
        out.push_str(",gain_vs_baseline");
    }
    out.push('\n');
    for (i, name) in report.tasks.iter().enumerate() {
        out.push_str(name);
        out.push(',');
        out.push_str(&fmt(report.gap[i]));
        if let Some(ref gain) = report.gain {
            out.push(',');
            out.push_str(&fmt(gain.per_task[i]));
        }
        out.push('\n');
    }
    out.push_str("total,");
    out.push_str(&fmt(report.total_gap));
    if let Some(ref gain) = report.gain {
        out.push(',');
        out.push_str(&fmt(gain.total));
    }
    out.push('\n');
    out
}

/// Generic reader for the rectangular tables emitted here: a header, one
/// label column, float cells. Returns (column names, row labels, rows).
pub fn parse_table(text: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() {
        return Err(Error::Parse { line: 1, msg: "empty header".into() });
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} cells, got {}", header.len(), record.len()),
            });
        }
        labels.push(record[0].to_string());
        let mut row = Vec::with_capacity(record.len() - 1);
        for cell in record.iter().skip(1) {
            row.push(cell.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("expected a number, got `{cell}`"),
            })?);
        }
        rows.push(row);
    }
    Ok((header, labels, rows))
}

/// Tasks × methods table with a `total` row and a `gain` row relative to
/// the chosen baseline column.
pub fn comparison_csv(
    tasks: &[String],
    labels: &[String],
    gaps: &[Vec<f64>],
    baseline: usize,
) -> Result<String> {
    if labels.len() != gaps.len() || labels.is_empty() {
        return Err(Error::Config("one gap column per label required".into()));
    }
    if baseline >= labels.len() {
        return Err(Error::Config("baseline column out of range".into()));
    }
    for (label, column) in labels.iter().zip(gaps) {
        if column.len() != tasks.len() {
            return Err(Error::Config(format!(
                "column `{label}` has {} entries for {} tasks",
                column.len(),
                tasks.len()
            )));
        }
    }
    let totals: Vec<f64> = gaps.iter().map(|c| c.iter().sum()).collect();
    let mut out = String::new();
    out.push_str("task");
    for label in labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, task) in tasks.iter().enumerate() {
        out.push_str(task);
        for column in gaps {
            out.push(',');
            out.push_str(&fmt(column[i]));
        }
        out.push('\n');
    }
    out.push_str("total");
    for t in &totals {
        out.push(',');
        out.push_str(&fmt(*t));
    }
    out.push('\n');
    out.push_str("gain");
    for t in &totals {
        out.push(',');
        out.push_str(&fmt(t - totals[baseline]));
    }
    out.push('\n');
    Ok(out)
}

/// One row per matrix entry per window, for distribution plots.
pub fn long_influence_csv(names: &[String], matrices: &[(usize, Vec<Vec<f64>>)]) -> String {
    let mut out = String::from("window,target,source,value\n");
    for (window, values) in matrices {
        for (t, row) in values.iter().enumerate() {
            for (s, v) in row.iter().enumerate() {
                out.push_str(&format!("{window},{},{},{}\n", names[t], names[s], fmt(*v)));
            }
        }
    }
    out
}

pub fn parse_long_influence(text: &str) -> Result<Vec<(usize, String, String, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.len() != 4 {
            return Err(Error::Parse { line, msg: "expected 4 cells".into() });
        }
        let window = record[0]
            .parse::<usize>()
            .map_err(|_| Error::Parse { line, msg: "bad window index".into() })?;
        let value = record[3]
            .parse::<f64>()
            .map_err(|_| Error::Parse { line, msg: "bad value".into() })?;
        rows.push((window, record[1].to_string(), record[2].to_string(), value));
    }
    Ok(rows)
}

/// Mean |entry| over same-family pairs vs. different-family pairs,
/// diagonal excluded so constant self-influence cannot carry the
/// comparison. Needs at least one pair of each kind.
pub fn block_contrast(values: &[Vec<f64>], registry: &TaskRegistry) -> Result<(f64, f64)> {
    let n = registry.len();
    if values.len() != n || values.iter().any(|r| r.len() != n) {
        return Err(Error::Config("matrix does not match the task set".into()));
    }
    let cops = registry.cop_indices();
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let slot = if cops[i] == cops[j] { &mut intra } else { &mut inter };
            slot.0 += values[i][j].abs();
            slot.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Config(
            "contrast needs both same-family and cross-family task pairs".into(),
        ));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}

pub fn contrast_summary_line(intra: f64, inter: f64) -> String {
    format!(
        "mean |W| same-family {} vs cross-family {} ({})",
        fmt(intra),
        fmt(inter),
        if intra > inter { "block structure holds" } else { "no block structure" }
    )
}

pub fn metrics_to_jsonl(metrics: &[WindowMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn metrics_from_jsonl(text: &str) -> Result<Vec<WindowMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::CopKind;

    fn sample_eval() -> EvalReport {
        EvalReport {
            tasks: vec!["tsp-5".into(), "kp-10".into()],
            gap: vec![2.25, 0.5],
            total_gap: 2.75,
            skipped: vec![0, 1],
            steps: vec![10, 12],
            budget_used: 22.0,
            gain: None,
        }
    }

    #[test]
    fn gap_table_totals_equal_column_sums_and_round_trip() {
        let mut report = sample_eval();
        let text = gap_table_csv(&report);
        let (header, labels, rows) = parse_table(&text).unwrap();
        assert_eq!(header, vec!["task", "gap_pct"]);
        assert_eq!(labels, vec!["tsp-5", "kp-10", "total"]);
        let sum: f64 = rows[..2].iter().map(|r| r[0]).sum();
        assert!((rows[2][0] - sum).abs() < 1e-9);

        // Self-comparison: every gain is zero.
        let baseline = report.clone();
        report.apply_baseline(&baseline).unwrap();
        let text = gap_table_csv(&report);
        let (header, _, rows) = parse_table(&text).unwrap();
        assert_eq!(header[2], "gain_vs_baseline");
        assert!(rows.iter().all(|r| r[1] == 0.0));

        // Re-emitting the parsed numbers reproduces the bytes.
        let rebuilt = gap_table_csv(&report);
        assert_eq!(text, rebuilt);
    }

    #[test]
    fn comparison_gain_row_reproduces_published_arithmetic() {
        let tasks = vec!["all".to_string()];
        let labels = vec!["stl-avg".to_string(), "ours".to_string()];
        let gaps = vec![vec![18.897], vec![8.515]];
        let text = comparison_csv(&tasks, &labels, &gaps, 0).unwrap();
        let (_, row_labels, rows) = parse_table(&text).unwrap();
        assert_eq!(row_labels, vec!["all", "total", "gain"]);
        assert!((rows[2][0] - 0.0).abs() < 1e-9);
        assert!((rows[2][1] - (-10.382)).abs() < 1e-9);
    }

    #[test]
    fn comparison_validates_shapes() {
        let tasks = vec!["a".to_string(), "b".to_string()];
        let labels = vec!["x".to_string()];
        assert!(comparison_csv(&tasks, &labels, &[vec![1.0]], 0).is_err());
        assert!(comparison_csv(&tasks, &labels, &[vec![1.0, 2.0]], 3).is_err());
        assert!(comparison_csv(&tasks, &[], &[], 0).is_err());
    }

    #[test]
    fn long_influence_round_trips() {
        let names = vec!["tsp-5".to_string(), "kp-10".to_string()];
        let matrices = vec![
            (1, vec![vec![1.0, -0.25], vec![0.125, 1.0]]),
            (2, vec![vec![1.0, 0.0], vec![-0.5, 1.0]]),
        ];
        let text = long_influence_csv(&names, &matrices);
        let rows = parse_long_influence(&text).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[1], (1, "tsp-5".to_string(), "kp-10".to_string(), -0.25));
        assert_eq!(rows[6].0, 2);

        let rebuilt: Vec<(usize, Vec<Vec<f64>>)> = vec![
            (1, vec![vec![rows[0].3, rows[1].3], vec![rows[2].3, rows[3].3]]),
            (2, vec![vec![rows[4].3, rows[5].3], vec![rows[6].3, rows[7].3]]),
        ];
        assert_eq!(long_influence_csv(&names, &rebuilt), text);
    }

    #[test]
    fn contrast_ignores_the_diagonal() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4, 5]), (CopKind::Kp, vec![5, 6])])
            .unwrap();
        // Same-family off-diagonals 0.8, cross-family 0.1, diagonal 1.
        let mut w = vec![vec![0.1; 4]; 4];
        for i in 0..4 {
            w[i][i] = 1.0;
        }
        w[0][1] = 0.8;
        w[1][0] = -0.8;
        w[2][3] = 0.8;
        w[3][2] = 0.8;
        let (intra, inter) = block_contrast(&w, &reg).unwrap();
        assert!((intra - 0.8).abs() < 1e-12);
        assert!((inter - 0.1).abs() < 1e-12);
        assert!(contrast_summary_line(intra, inter).contains("holds"));

        let single = TaskRegistry::new(&[(CopKind::Tsp, vec![4, 5])]).unwrap();
        let w2 = vec![vec![1.0, 0.5], vec![0.5, 1.0]];
        assert!(block_contrast(&w2, &single).is_err());
    }

    #[test]
    fn metrics_jsonl_round_trips() {
        let metrics = vec![WindowMetrics {
            window: 1,
            selected_counts: vec![2, 0],
            raw_rewards: vec![1.5, 0.0],
            normalized_rewards: vec![0.875, 0.5],
            per_task_loss_ema: vec![0.25, 0.0],
            budget_used: 4.0,
        }];
        let text = metrics_to_jsonl(&metrics).unwrap();
        let back = metrics_from_jsonl(&text).unwrap();
        assert_eq!(metrics, back);
    }

    #[test]
    fn run_reports_round_trip_and_label_methods() {
        let reg = TaskRegistry::new(&[(CopKind::Tsp, vec![4])]).unwrap();
        let report = RunReport {
            label: schedule_label(&ScheduleKind::Bandit { algorithm: crate::bandit::BanditAlg::Exp3 }),
            registry: reg,
            seed: 3,
            eval: sample_eval(),
        };
        assert_eq!(report.label, "bandit-exp3");
        let text = report.to_json().unwrap();
        let back = RunReport::from_json(&text).unwrap();
        assert_eq!(back.label, report.label);
        assert_eq!(back.eval, report.eval);

        let stl = ScheduleKind::Stl { task: crate::task::Task { cop: CopKind::Kp, scale: 10 } };
        assert_eq!(schedule_label(&stl), "stl-kp-10");
    }
}
