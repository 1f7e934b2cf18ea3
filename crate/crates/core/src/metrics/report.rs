use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::model::{AgentId, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Per-query cost averages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSummary {
    pub queries: usize,
    /// End-to-end seconds per query, backend calls plus engine overhead.
    pub latency_s_per_query: f64,
    /// Seconds per query spent inside backend calls.
    pub call_time_s_per_query: f64,
    /// Estimated as `2·params·tokens`.
    pub tflops_per_query: f64,
    pub tokens_per_query: f64,
    pub calls_per_query: f64,
}

/// Averages cost over trajectories; `params` maps agents to parameter counts.
pub fn cost_summary(trajectories: &[Trajectory], params: &BTreeMap<AgentId, u64>) -> CostSummary {
    let n = trajectories.len();
    if n == 0 {
        return CostSummary::default();
    }
    let mut s = CostSummary {
        queries: n,
        ..CostSummary::default()
    };
    for t in trajectories {
        s.latency_s_per_query += t.wall_time;
        s.call_time_s_per_query += t.call_time;
        s.tokens_per_query += t.total_tokens() as f64;
        s.calls_per_query += t.total_calls() as f64;
        let per_agent: Vec<(u64, u64)> = t
            .token_usage
            .iter()
            .map(|(a, u)| (params.get(a).copied().unwrap_or(0), u.total()))
            .collect();
        s.tflops_per_query += super::flops_per_query(&per_agent);
    }
    let n = n as f64;
    s.latency_s_per_query /= n;
    s.call_time_s_per_query /= n;
    s.tflops_per_query /= n;
    s.tokens_per_query /= n;
    s.calls_per_query /= n;
    s
}

/// Metrics of one method.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    /// benchmark → metric name → value.
    pub per_benchmark: BTreeMap<String, BTreeMap<String, f64>>,
    /// Spread of clean accuracy across benchmarks.
    pub gap: f64,
    pub roc: Vec<RocPoint>,
    /// attribute → counterfactual divergence rate.
    pub cdr: BTreeMap<String, f64>,
    /// regime → standard deviation of per-run accuracy.
    pub consistency: BTreeMap<String, f64>,
    pub cost: CostSummary,
    /// Cells that failed, with their errors.
    #[serde(default)]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub benchmark: String,
    pub metric: String,
    pub value: f64,
}

impl MetricReport {
    /// Flat rows, one per benchmark × metric; method-wide values use benchmark `all`.
    pub fn rows(&self) -> Vec<CsvRow> {
        let row = |benchmark: &str, metric: String, value: f64| CsvRow {
            method: self.method.clone(),
            benchmark: benchmark.to_string(),
            metric,
            value,
        };
        let mut out = Vec::new();
        for (b, metrics) in &self.per_benchmark {
            for (m, &v) in metrics {
                out.push(row(b, m.clone(), v));
            }
        }
        out.push(row("all", "gap".into(), self.gap));
        for (attr, &v) in &self.cdr {
            out.push(row("all", format!("cdr_{attr}"), v));
        }
        for (regime, &v) in &self.consistency {
            out.push(row("all", format!("run_std_{regime}"), v));
        }
        let c = &self.cost;
        out.push(row("all", "latency_s_per_query".into(), c.latency_s_per_query));
        out.push(row("all", "call_time_s_per_query".into(), c.call_time_s_per_query));
        out.push(row("all", "tflops_per_query_estimate".into(), c.tflops_per_query));
        out.push(row("all", "tokens_per_query".into(), c.tokens_per_query));
        out.push(row("all", "calls_per_query".into(), c.calls_per_query));
        out
    }

    pub fn write_csv(reports: &[MetricReport], out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            for row in r.rows() {
                w.serialize(row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_roc_csv(points: &[RocPoint], out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}
