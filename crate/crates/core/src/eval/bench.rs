//! Batch execution over a task suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fsm::EngineConfig;
use crate::grounding::{count_tokens, project};
use crate::util::write_atomic;

use super::{MetricsReport, ScriptMode, TaskEnv, TaskSpec, DEFAULT_LOOP_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub engine: EngineConfig,
    pub mode: ScriptMode,
    pub loop_threshold: usize,
    /// Record wall time per task. Off by default so reports are reproducible.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            mode: ScriptMode::Rectifying,
            loop_threshold: DEFAULT_LOOP_THRESHOLD,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub id: String,
    pub subset: String,
    pub outcome: String,
    pub steps: usize,
    pub executed_ops: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub s_sem: f64,
    pub rouge_l: f64,
    pub c_s: f64,
    pub c_p: f64,
    pub s_code: f64,
    pub acc_seq: f64,
    pub acc_param: f64,
    pub success_pct: f64,
    pub loop_rate_pct: f64,
    pub tokens_in: f64,
    pub tokens_out: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub symbols: usize,
    pub raw_payload_tokens: usize,
    pub digest_tokens: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub tasks: Vec<TaskReport>,
    /// Per subset, plus `all`.
    pub aggregates: BTreeMap<String, Aggregate>,
    pub compression: CompressionStats,
}

impl BenchmarkReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn all_succeeded(&self) -> bool {
        self.tasks.iter().all(|t| t.metrics.success)
    }
}

/// Unweighted means over `reports`; rates in percent.
pub fn aggregate(reports: &[&TaskReport]) -> Aggregate {
    let n = reports.len();
    if n == 0 {
        return Aggregate::default();
    }
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| f(&r.metrics)).sum::<f64>() / n as f64;
    Aggregate {
        n,
        s_sem: mean(&|m| m.s_sem),
        rouge_l: mean(&|m| m.rouge_l),
        c_s: mean(&|m| m.c_s),
        c_p: mean(&|m| m.c_p),
        s_code: mean(&|m| m.s_code),
        acc_seq: mean(&|m| m.acc_seq),
        acc_param: mean(&|m| m.acc_param),
        success_pct: 100.0 * mean(&|m| f64::from(u8::from(m.success))),
        loop_rate_pct: 100.0 * mean(&|m| f64::from(u8::from(m.loop_rate_flag))),
        tokens_in: mean(&|m| m.tokens_in as f64),
        tokens_out: mean(&|m| m.tokens_out as f64),
        wall_time_s: mean(&|m| m.wall_time_s),
    }
}

fn run_task(task: &TaskSpec, env: &TaskEnv, config: &BenchConfig) -> TaskReport {
    let started = Instant::now();
    let failed = |error: String| TaskReport {
        id: task.id.clone(),
        subset: task.subset.as_str().to_string(),
        outcome: "error".to_string(),
        steps: 0,
        executed_ops: 0,
        error: Some(error),
        metrics: MetricsReport::default(),
    };
    let planner = match task.planner(config.mode) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let engine_config = EngineConfig { run_id: task.id.clone(), ..config.engine.clone() };
    let engine = match task.engine(env, Box::new(planner), engine_config) {
        Ok(e) => e,
        Err(e) => return failed(e.to_string()),
    };
    let result = engine.run();
    let mut metrics = task.score(env, &result, config.loop_threshold);
    if config.timing {
        metrics.wall_time_s = started.elapsed().as_secs_f64();
    }
    TaskReport {
        id: task.id.clone(),
        subset: task.subset.as_str().to_string(),
        outcome: result.outcome.label().to_string(),
        steps: result.trace.len(),
        executed_ops: result.world.event_log().len(),
        error: None,
        metrics,
    }
}

pub fn compression_stats(env: &TaskEnv) -> CompressionStats {
    let raw = env.devices.payload_tokens();
    let digest = count_tokens(&project(&env.devices).render());
    CompressionStats {
        symbols: env.devices.len(),
        raw_payload_tokens: raw,
        digest_tokens: digest,
        ratio: if digest == 0 { 0.0 } else { raw as f64 / digest as f64 },
    }
}

/// Runs every task in isolation, in parallel; the report keeps input order.
pub fn run_benchmark(tasks: &[TaskSpec], env: &TaskEnv, config: &BenchConfig) -> BenchmarkReport {
    let reports: Vec<TaskReport> = tasks.par_iter().map(|t| run_task(t, env, config)).collect();
    let mut aggregates = BTreeMap::new();
    let mut subsets: Vec<&str> = reports.iter().map(|r| r.subset.as_str()).collect();
    subsets.sort_unstable();
    subsets.dedup();
    for s in subsets {
        let group: Vec<&TaskReport> = reports.iter().filter(|r| r.subset == s).collect();
        aggregates.insert(s.to_string(), aggregate(&group));
    }
    if !reports.is_empty() {
        aggregates.insert("all".to_string(), aggregate(&reports.iter().collect::<Vec<_>>()));
    }
    BenchmarkReport { tasks: reports, aggregates, compression: compression_stats(env) }
}

pub fn write_report(path: &Path, report: &BenchmarkReport) -> std::io::Result<()> {
    write_atomic(path, report.to_json_pretty().as_bytes())
}

pub fn render_table(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<26} {:>5} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>5} {:>5} {:>7}",
        "task", "set", "S_sem", "ROUGE", "C_s", "C_p", "S_code", "AccSeq", "AccPar", "Succ", "Loop", "TokIn"
    );
    for t in &report.tasks {
        let m = &t.metrics;
        let _ = writeln!(
            out,
            "{:<26} {:>5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>5} {:>5} {:>7}",
            t.id,
            t.subset,
            m.s_sem,
            m.rouge_l,
            m.c_s,
            m.c_p,
            m.s_code,
            m.acc_seq,
            m.acc_param,
            if m.success { "yes" } else { "no" },
            if m.loop_rate_flag { "LOOP" } else { "-" },
            m.tokens_in
        );
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<8} {:>3} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7}",
        "subset", "n", "S_sem", "ROUGE", "C_s", "C_p", "S_code", "AccSeq", "AccPar", "Succ%", "Loop%"
    );
    for (name, a) in &report.aggregates {
        let _ = writeln!(
            out,
            "{:<8} {:>3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>7.1} {:>7.1}",
            name, a.n, a.s_sem, a.rouge_l, a.c_s, a.c_p, a.s_code, a.acc_seq, a.acc_param, a.success_pct, a.loop_rate_pct
        );
    }
    let c = &report.compression;
    let _ = writeln!(
        out,
        "\ncontext compression: {} symbols, raw payloads {} tokens, digest {} tokens, ratio {:.2}x",
        c.symbols, c.raw_payload_tokens, c.digest_tokens, c.ratio
    );
    out
}
