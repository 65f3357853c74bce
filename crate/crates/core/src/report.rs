//! Aggregation of finished runs: average-accuracy curves, mean and standard
//! deviation across seeds of the same configuration, and a plain SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::trainer::{metrics, read_r_csv, EvalMatrix, MetricsReport, Result, TrainError};

/// One finished (or partially finished) run loaded from disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub r: EvalMatrix,
}

impl RunRecord {
    pub fn label(&self) -> String {
        let c = &self.report.config;
        let mut s = c.method.to_string();
        if c.method.uses_curvature() {
            s.push_str(&format!("({})", c.pairs));
            if c.strategy != crate::regularizer::Strategy::None {
                s.push_str(&format!("-{}", c.strategy));
            }
        }
        if c.method != crate::regularizer::Method::FineTune {
            s.push_str(&format!(" lambda={}", c.lambda));
        }
        s
    }
}

/// Loads every directory under `root` (recursively) holding both `R.csv` and
/// `metrics.json`. Results are sorted by path.
pub fn load_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    visit(root, &mut out)?;
    out.sort_by(|a, b| a.dir.cmp(&b.dir));
    Ok(out)
}

fn visit(dir: &Path, out: &mut Vec<RunRecord>) -> Result<()> {
    let io = |source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let metrics_path = dir.join("metrics.json");
    let r_path = dir.join("R.csv");
    if metrics_path.is_file() && r_path.is_file() {
        let text = std::fs::read_to_string(&metrics_path).map_err(io)?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| TrainError::Format(format!("{}: {e}", metrics_path.display())))?;
        out.push(RunRecord {
            dir: dir.to_path_buf(),
            report,
            r: read_r_csv(&r_path)?,
        });
    }
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            visit(&path, out)?;
        }
    }
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs sharing a configuration hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub config_hash: String,
    pub label: String,
    pub seeds: Vec<u64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    /// Mean average-accuracy after each task.
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<f64>,
    pub memory_vectors: Vec<usize>,
    pub complete: bool,
}

/// Groups runs by configuration hash. Metrics come from the stored `R` files.
pub fn summarize(runs: &[RunRecord]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for run in runs {
        groups.entry(run.report.config_hash.clone()).or_default().push(run);
    }
    let mut out: Vec<GroupSummary> = groups
        .into_iter()
        .map(|(hash, members)| {
            let ms: Vec<_> = members.iter().map(|m| metrics(&m.r)).collect();
            let (acc_mean, acc_std) = mean_std(&ms.iter().map(|m| m.acc).collect::<Vec<_>>());
            let bwts: Option<Vec<f64>> = ms.iter().map(|m| m.bwt).collect();
            let (bwt_mean, bwt_std) = match bwts {
                Some(b) if !b.is_empty() => {
                    let (m, s) = mean_std(&b);
                    (Some(m), Some(s))
                }
                _ => (None, None),
            };
            let curves: Vec<Vec<f64>> = members.iter().map(|m| m.r.average_accuracy_curve()).collect();
            let len = curves.iter().map(Vec::len).min().unwrap_or(0);
            let (curve_mean, curve_std) = (0..len)
                .map(|i| mean_std(&curves.iter().map(|c| c[i]).collect::<Vec<_>>()))
                .unzip();
            GroupSummary {
                config_hash: hash,
                label: members[0].label(),
                seeds: members.iter().map(|m| m.report.config.seed).collect(),
                acc_mean,
                acc_std,
                bwt_mean,
                bwt_std,
                curve_mean,
                curve_std,
                memory_vectors: members[0].report.memory_vectors.clone(),
                complete: members.iter().all(|m| m.r.completed() == m.r.tasks),
            }
        })
        .collect();
    out.sort_by(|a, b| a.label.cmp(&b.label));
    out
}

/// Plain-text table of the summaries.
pub fn summary_table(groups: &[GroupSummary]) -> String {
    let mut s = String::from("method                          seeds  ACC (%)          BWT (%)          memory\n");
    for g in groups {
        let bwt = match (g.bwt_mean, g.bwt_std) {
            (Some(m), Some(sd)) => format!("{:7.2} ± {:5.2}", 100.0 * m, 100.0 * sd),
            _ => "      -        ".to_string(),
        };
        let _ = writeln!(
            s,
            "{:<31} {:>5}  {:6.2} ± {:5.2}   {}  {}{}",
            g.label,
            g.seeds.len(),
            100.0 * g.acc_mean,
            100.0 * g.acc_std,
            bwt,
            g.memory_vectors.last().copied().unwrap_or(0),
            if g.complete { "" } else { "  (incomplete)" }
        );
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot of average accuracy after each task, one line per group with a
/// shaded ±1 std band.
pub fn render_svg(groups: &[GroupSummary]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 220.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let tasks = groups.iter().map(|g| g.curve_mean.len()).max().unwrap_or(1).max(2);
    let lo = groups
        .iter()
        .flat_map(|g| g.curve_mean.iter().zip(&g.curve_std).map(|(m, s)| m - s))
        .fold(1.0f64, f64::min)
        .clamp(0.0, 1.0);
    let y_min = (lo * 10.0).floor() / 10.0;
    let y_min = if y_min >= 1.0 { 0.9 } else { y_min };
    let x = |i: usize| left + pw * i as f64 / (tasks - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v.clamp(y_min, 1.0) - y_min) / (1.0 - y_min));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let steps = ((1.0 - y_min) * 10.0).round() as usize;
    for k in 0..=steps {
        let v = y_min + k as f64 * (1.0 - y_min) / steps.max(1) as f64;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}</text>"##,
            left + pw,
            left - 6.0,
            yy + 4.0,
            v * 100.0
        );
    }
    for i in 0..tasks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x(i),
            top + ph + 18.0,
            i + 1
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">tasks trained</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">average accuracy (%)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (gi, g) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        if g.curve_mean.is_empty() {
            continue;
        }
        if g.curve_std.iter().any(|&v| v > 0.0) {
            let upper = g.curve_mean.iter().zip(&g.curve_std).enumerate().map(|(i, (m, sd))| (x(i), y(m + sd)));
            let lower = g.curve_mean.iter().zip(&g.curve_std).enumerate().rev().map(|(i, (m, sd))| (x(i), y(m - sd)));
            let pts: Vec<String> = upper.chain(lower).map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = g
            .curve_mean
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{:.1},{:.1}", x(i), y(*m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for (i, m) in g.curve_mean.iter().enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(i), y(*m));
        }
        let ly = top + 10.0 + 18.0 * gi as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&g.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::Method;
    use crate::trainer::{ExperimentConfig, MetricsReport};

    fn record(seed: u64, lambda: f64, rows: Vec<Vec<f64>>) -> RunRecord {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::synthetic(Method::Ewc, lambda)
        };
        let r = EvalMatrix::from_rows(rows).unwrap();
        let m = metrics(&r);
        RunRecord {
            dir: PathBuf::from(format!("run{seed}")),
            report: MetricsReport {
                config_hash: cfg.hash(),
                config: cfg,
                acc: m.acc,
                bwt: m.bwt,
                per_task_time_s: vec![],
                memory_vectors: vec![1, 1],
                valid_acc: 0.0,
                valid_final: vec![],
                tasks_completed: r.completed(),
                tasks: vec![],
            },
            r,
        }
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn groups_by_config_hash() {
        let runs = vec![
            record(0, 1.0, vec![vec![0.9, 0.1], vec![0.8, 0.9]]),
            record(1, 1.0, vec![vec![0.9, 0.1], vec![0.6, 0.9]]),
            record(0, 2.0, vec![vec![1.0, 0.0], vec![1.0, 1.0]]),
        ];
        let g = summarize(&runs);
        assert_eq!(g.len(), 2);
        let two = g.iter().find(|g| g.seeds.len() == 2).unwrap();
        assert!((two.acc_mean - 0.8).abs() < 1e-12);
        assert!((two.bwt_mean.unwrap() + 0.2).abs() < 1e-12);
        assert_eq!(two.curve_mean.len(), 2);
        assert!((two.curve_mean[1] - 0.8).abs() < 1e-12);
        assert!(two.complete);
        let svg = render_svg(&g);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(summary_table(&g).contains("ewc"));
    }

    #[test]
    fn loads_runs_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let run = record(3, 1.0, vec![vec![0.5, 0.5]]);
        let sub = dir.path().join("a/b");
        std::fs::create_dir_all(&sub).unwrap();
        crate::trainer::write_r_csv(&sub.join("R.csv"), &run.r).unwrap();
        std::fs::write(sub.join("metrics.json"), serde_json::to_string(&run.report).unwrap()).unwrap();
        let loaded = load_runs(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].r, run.r);
        assert!(!summarize(&loaded)[0].complete);
    }
}
