//! Evaluation reports, tool-usage analytics, and toolkit ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::history::VideoCatalog;
use crate::policy::PolicyProvider;
use crate::rollout::{batch_records, run_batch, write_jsonl, RolloutConfig, RolloutError, Trajectory};
use crate::synthworld::Task;
use crate::toolkit::{ToolName, Toolkit};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub n_tasks: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub n_tool_calls: usize,
    pub mean_tool_calls: f64,
    pub per_tool_count: BTreeMap<String, usize>,
    /// Share of all tool calls; sums to 1 when any tool was called.
    pub per_tool_fraction: BTreeMap<String, f64>,
    pub stop_reasons: BTreeMap<String, usize>,
    pub per_template: BTreeMap<String, TemplateStats>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    /// Aggregates trajectories. Every field is a function of the
    /// trajectory records alone.
    pub fn from_trajectories<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut r = Self::default();
        for t in trajectories {
            r.n_tasks += 1;
            let correct = t.is_correct();
            r.n_correct += correct as usize;
            r.n_tool_calls += t.stats.n_tool_calls;
            for (tool, n) in &t.stats.per_tool {
                *r.per_tool_count.entry(tool.clone()).or_default() += n;
            }
            *r.stop_reasons.entry(t.stop_reason.as_str().to_string()).or_default() += 1;
            let key = t.template.map_or("none", |k| k.as_str()).to_string();
            let ts = r.per_template.entry(key).or_default();
            ts.n_tasks += 1;
            ts.n_correct += correct as usize;
        }
        r.accuracy = ratio(r.n_correct, r.n_tasks);
        r.mean_tool_calls = ratio(r.n_tool_calls, r.n_tasks);
        r.per_tool_fraction = r
            .per_tool_count
            .iter()
            .map(|(k, &v)| (k.clone(), ratio(v, r.n_tool_calls)))
            .collect();
        for ts in r.per_template.values_mut() {
            ts.accuracy = ratio(ts.n_correct, ts.n_tasks);
        }
        r
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "n_tasks,{}", self.n_tasks);
        let _ = writeln!(out, "n_correct,{}", self.n_correct);
        let _ = writeln!(out, "accuracy,{}", self.accuracy);
        let _ = writeln!(out, "n_tool_calls,{}", self.n_tool_calls);
        let _ = writeln!(out, "mean_tool_calls,{}", self.mean_tool_calls);
        for (k, v) in &self.per_tool_fraction {
            let _ = writeln!(out, "tool_fraction.{k},{v}");
        }
        for (k, v) in &self.stop_reasons {
            let _ = writeln!(out, "stop_reason.{k},{v}");
        }
        for (k, v) in &self.per_template {
            let _ = writeln!(out, "template_accuracy.{k},{}", v.accuracy);
        }
        out
    }
}

/// One episode per task. Trajectories are written to `out` when given.
pub fn run_benchmark(
    tasks: &[Task],
    catalog: &dyn VideoCatalog,
    provider: &dyn PolicyProvider,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    parallelism: usize,
    out: Option<&Path>,
) -> Result<(EvalReport, Vec<Trajectory>), RolloutError> {
    if tasks.is_empty() {
        return Err(RolloutError::Config("task set is empty".into()));
    }
    let results = run_batch(tasks, catalog, provider, toolkit, config, parallelism)?;
    let trajectories = batch_records(tasks, results, config);
    if let Some(path) = out {
        write_jsonl(&trajectories, path)?;
    }
    Ok((EvalReport::from_trajectories(&trajectories), trajectories))
}

/// A named set of enabled tools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSubset {
    pub label: String,
    pub tools: Vec<ToolName>,
}

impl ToolSubset {
    pub fn new(label: impl Into<String>, tools: impl IntoIterator<Item = ToolName>) -> Self {
        let mut tools: Vec<ToolName> = tools.into_iter().collect();
        tools.sort();
        tools.dedup();
        Self {
            label: label.into(),
            tools,
        }
    }

    /// Parses `all`, `none`, or a comma list of names or abbreviations.
    pub fn parse(text: &str) -> Result<Self, String> {
        let text = text.trim();
        match text {
            "all" => return Ok(Self::new("all", ToolName::ALL)),
            "none" | "" => return Ok(Self::new("none", [])),
            _ => {}
        }
        let tools = text
            .split(',')
            .map(|t| t.trim().parse::<ToolName>())
            .collect::<Result<Vec<_>, _>>()?;
        let label = tools.iter().map(|t| t.abbrev()).collect::<Vec<_>>().join("+");
        Ok(Self::new(label, tools))
    }
}

/// Rows that add one tool at a time: none, TG, TG+FS, ..., all six.
pub fn cumulative_subsets() -> Vec<ToolSubset> {
    (0..=ToolName::ALL.len())
        .map(|n| {
            let tools = &ToolName::ALL[..n];
            let label = if n == 0 {
                "none".to_string()
            } else {
                tools.iter().map(|t| t.abbrev()).collect::<Vec<_>>().join("+")
            };
            ToolSubset::new(label, tools.iter().copied())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: ToolSubset,
    pub report: EvalReport,
}

/// Re-runs the benchmark once per subset; disabled tools answer
/// `invalid_args`.
pub fn run_ablation(
    tasks: &[Task],
    catalog: &dyn VideoCatalog,
    provider: &dyn PolicyProvider,
    toolkit: &Toolkit,
    config: &RolloutConfig,
    parallelism: usize,
    subsets: &[ToolSubset],
) -> Result<Vec<AblationRow>, RolloutError> {
    subsets
        .iter()
        .map(|subset| {
            let restricted = toolkit.with_enabled(subset.tools.iter().copied());
            let (report, _) = run_benchmark(tasks, catalog, provider, &restricted, config, parallelism, None)?;
            Ok(AblationRow {
                subset: subset.clone(),
                report,
            })
        })
        .collect()
}

/// One row per subset: tool marks, overall numbers, per-template accuracy.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut templates: Vec<String> = rows
        .iter()
        .flat_map(|r| r.report.per_template.keys().cloned())
        .collect();
    templates.sort();
    templates.dedup();
    let mut out = String::from("subset");
    for t in ToolName::ALL {
        let _ = write!(out, ",{}", t.abbrev());
    }
    out.push_str(",n_tasks,accuracy,mean_tool_calls");
    for t in &templates {
        let _ = write!(out, ",acc.{t}");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&row.subset.label);
        for t in ToolName::ALL {
            let _ = write!(out, ",{}", row.subset.tools.contains(&t) as u8);
        }
        let r = &row.report;
        let _ = write!(out, ",{},{},{}", r.n_tasks, r.accuracy, r.mean_tool_calls);
        for t in &templates {
            match r.per_template.get(t) {
                Some(ts) => {
                    let _ = write!(out, ",{}", ts.accuracy);
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
