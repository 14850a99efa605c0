//! Benchmark protocol: sampled converter fleets, step-reference cases,
//! policy-versus-baseline evaluation, and report files.
//!
//! Configurations draw (L, C, R) log-uniformly from their ranges with a
//! fixed input voltage; every configuration gets a generated netlist that
//! round-trips through the parser, so evaluation exercises the same graph
//! path as external inputs. Each case steps the voltage reference from an
//! equilibrium start, and the policy's closed-loop tracking cost is
//! compared with the open-loop shooting baseline on the identical plant,
//! horizon, and time step. The headline statistic is the median of
//! `(policy - oc) / oc` over all clean cases.

use crate::dpc::{rollout, splitmix64, Scenario, ScenarioSampler};
use crate::netlist::{parse_netlist, validate_buck, ConverterGraph};
use crate::ocp::{solve, OcpConfig, OcpError};
use crate::plant::{Conventions, PlantParameters, PlantState, TaskContext};
use crate::policy::PolicyParameters;
use crate::real;
use crate::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Benchmark sampling plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_configs: usize,
    pub cases_per_config: usize,
    /// Inductance sampling range in henries.
    pub l_range: (f64, f64),
    /// Capacitance sampling range in farads.
    pub c_range: (f64, f64),
    /// Load resistance sampling range in ohms.
    pub r_range: (f64, f64),
    pub v_in: f64,
    /// Evaluation horizon in steps; kept equal to the training horizon.
    pub horizon: usize,
    /// Minimum |d1 - d0| between pre- and post-step conversion ratios.
    /// Zero disables the separation (degenerate no-step cases).
    pub min_step: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_configs: 100,
            cases_per_config: 10,
            l_range: crate::plant::ranges::INDUCTANCE,
            c_range: crate::plant::ranges::CAPACITANCE,
            r_range: crate::plant::ranges::LOAD_RESISTANCE,
            v_in: 48.0,
            horizon: 200,
            min_step: 0.1,
            seed: 42,
        }
    }
}

impl BenchConfig {
    /// Reduced smoke protocol: fewer samples over narrowed ranges.
    pub fn smoke() -> Self {
        BenchConfig {
            n_configs: 20,
            cases_per_config: 5,
            l_range: (1e-5, 1e-3),
            c_range: (1e-6, 1e-4),
            r_range: (1.0, 100.0),
            ..BenchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_configs == 0 || self.cases_per_config == 0 || self.horizon == 0 {
            return Err("n_configs, cases_per_config and horizon must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("l_range", self.l_range),
            ("c_range", self.c_range),
            ("r_range", self.r_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(format!("{name} must satisfy 0 < min <= max, got ({lo}, {hi})"));
            }
        }
        if !(self.v_in.is_finite() && self.v_in > 0.0) {
            return Err(format!("v_in must be positive, got {}", self.v_in));
        }
        if !(0.0..0.8).contains(&self.min_step) {
            return Err(format!("min_step must lie in [0, 0.8), got {}", self.min_step));
        }
        Ok(())
    }
}

/// One sampled converter with its generated netlist.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledConfig<T> {
    pub id: usize,
    pub plant: PlantParameters<T>,
    pub netlist: String,
}

/// Reference buck netlist for a parameter triple.
pub fn netlist_text<T: Scalar>(plant: &PlantParameters<T>, id: usize) -> String {
    let fmt = |v: T| format!("{:e}", v.to_f64().unwrap_or(f64::NAN));
    format!(
        "# generated benchmark configuration {id}\n\
         V1 vin 0 {}\n\
         S1 vin sw\n\
         D1 sw 0\n\
         L1 sw out {}\n\
         C1 out 0 {}\n\
         R1 out 0 {}\n",
        fmt(plant.v_in),
        fmt(plant.inductance),
        fmt(plant.capacitance),
        fmt(plant.r_load),
    )
}

fn log_uniform<T: Scalar>(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> T {
    if lo == hi {
        return real(lo);
    }
    real(rng.random_range(lo.ln()..hi.ln()).exp())
}

/// Draws the converter fleet. Deterministic: configuration `i` depends
/// only on (seed, i).
pub fn sample_configs<T: Scalar>(config: &BenchConfig) -> Vec<SampledConfig<T>> {
    (0..config.n_configs)
        .map(|id| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(id as u64)));
            let plant = PlantParameters {
                v_in: real(config.v_in),
                inductance: log_uniform(&mut rng, config.l_range),
                capacitance: log_uniform(&mut rng, config.c_range),
                r_load: log_uniform(&mut rng, config.r_range),
            };
            let netlist = netlist_text(&plant, id);
            SampledConfig { id, plant, netlist }
        })
        .collect()
}

/// One step-reference tracking case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Case<T> {
    pub id: usize,
    /// Pre-step conversion ratio; the initial state is its equilibrium.
    pub duty0: T,
    pub initial_state: PlantState<T>,
    pub task: TaskContext<T>,
}

/// Draws `n` step cases for one plant: d0, d1 ~ U[0.1, 0.9] with
/// |d1 - d0| >= min_step (rejection), y0 = equilibrium(d0), v_ref = d1*v_in.
pub fn sample_cases<T: Scalar>(
    plant: &PlantParameters<T>,
    n: usize,
    seed: u64,
    min_step: f64,
    conventions: &Conventions,
) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let duty0: f64 = rng.random_range(0.1..0.9);
            let duty1 = loop {
                let d: f64 = rng.random_range(0.1..0.9);
                if (d - duty0).abs() >= min_step {
                    break d;
                }
            };
            let duty0 = real::<T>(duty0);
            Case {
                id,
                duty0,
                initial_state: plant.equilibrium(duty0),
                task: TaskContext::with_default_limit(
                    real::<T>(duty1) * plant.v_in,
                    plant,
                    conventions,
                ),
            }
        })
        .collect()
}

/// Draws training scenarios from the benchmark distribution: a fresh
/// log-uniform plant plus one step-reference case per call, with the graph
/// taken through the generated-netlist parse path.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSampler {
    pub bench: BenchConfig,
    pub conventions: Conventions,
}

impl TrainingSampler {
    pub fn new(bench: BenchConfig, conventions: Conventions) -> Self {
        TrainingSampler { bench, conventions }
    }
}

impl<T: Scalar> ScenarioSampler<T> for TrainingSampler {
    fn sample(&self, rng: &mut ChaCha8Rng, horizon: usize) -> Scenario<T> {
        // Reject draws the fixed-step integrator cannot simulate (strongly
        // overdamped plants with a fast mode outside the RK4 stability
        // region): their rollouts overflow for any duty sequence, so they
        // carry no training signal and a single one aborts the run. About
        // a quarter of the widest parameter box is affected. Evaluation
        // keeps such plants and flags the failures instead.
        let mut drawn = None;
        let mut most_stable = (T::infinity(), None);
        for _ in 0..256 {
            let candidate = PlantParameters::<T> {
                v_in: real(self.bench.v_in),
                inductance: log_uniform(rng, self.bench.l_range),
                capacitance: log_uniform(rng, self.bench.c_range),
                r_load: log_uniform(rng, self.bench.r_range),
            };
            let growth = candidate.rk4_growth(candidate.time_step(&self.conventions));
            if growth <= T::one() {
                drawn = Some(candidate);
                break;
            }
            if growth < most_stable.0 {
                most_stable = (growth, Some(candidate));
            }
        }
        // All-stiff ranges: fall back to the least unstable draw and let
        // training report the divergence rather than spinning forever.
        let drawn = drawn
            .or(most_stable.1)
            .expect("bounded rejection always keeps a candidate");
        // Round-trip through the netlist text so training sees exactly the
        // graphs evaluation will see (values survive thanks to shortest
        // round-trip float formatting).
        let graph = parse_netlist::<T>(&netlist_text(&drawn, 0))
            .expect("generated netlist always parses");
        let plant = validate_buck(&graph).expect("generated netlist is a buck converter");
        let duty0: f64 = rng.random_range(0.1..0.9);
        let duty1 = loop {
            let d: f64 = rng.random_range(0.1..0.9);
            if (d - duty0).abs() >= self.bench.min_step {
                break d;
            }
        };
        let duty0 = real::<T>(duty0);
        let task = TaskContext::with_default_limit(
            real::<T>(duty1) * plant.v_in,
            &plant,
            &self.conventions,
        );
        Scenario::from_graph(
            graph,
            task,
            plant.equilibrium(duty0),
            horizon,
            &self.conventions,
        )
        .expect("generated scenario is valid")
    }
}

/// Why a case is excluded from the gap statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFlag {
    /// Baseline cost below the degeneracy threshold; gap undefined.
    Degenerate,
    /// Gap below -2%: the policy "beat" the optimum, meaning the baseline
    /// solver failed on this case.
    BaselineFailure,
    /// Policy rollout left the finite range.
    PolicyFailure,
    /// Every shooting start diverged.
    OcFailure,
}

impl std::fmt::Display for CaseFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseFlag::Degenerate => "degenerate",
            CaseFlag::BaselineFailure => "baseline_failure",
            CaseFlag::PolicyFailure => "policy_failure",
            CaseFlag::OcFailure => "oc_failure",
        };
        f.write_str(s)
    }
}

/// One evaluated (configuration, case) pair. Costs are mean-squared
/// tracking costs; NaN marks a failed side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub config_id: usize,
    pub case_id: usize,
    pub inductance: f64,
    pub capacitance: f64,
    pub r_load: f64,
    pub v_ref: f64,
    pub policy_cost: f64,
    pub oc_cost: f64,
    pub relative_gap: Option<f64>,
    pub flags: Vec<CaseFlag>,
}

/// Five-number summary of the clean relative gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub cases: usize,
    /// Rows entering the gap statistics.
    pub included: usize,
    pub degenerate: usize,
    pub baseline_failures: usize,
    pub policy_failures: usize,
    pub oc_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<CaseRow>,
    /// Absent when no case produced a clean gap.
    pub stats: Option<GapStats>,
    pub counts: Counts,
    pub seed: u64,
    /// SHA-256 of the evaluated checkpoint file, set by the caller.
    pub checkpoint_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("generated netlist for configuration {id} failed to parse: {message}")]
    Netlist { id: usize, message: String },
    #[error(transparent)]
    Scenario(#[from] crate::dpc::DpcError),
    #[error(transparent)]
    Solver(#[from] OcpError),
}

/// Degeneracy threshold on the baseline tracking cost.
pub const DEGENERATE_COST: f64 = 1e-12;
/// Gaps below this mark a baseline solver failure.
pub const BASELINE_FAILURE_GAP: f64 = -0.02;

/// (policy cost, baseline cost, failure flags) of one case.
type CaseOutcome = Result<(f64, f64, Vec<CaseFlag>), BenchError>;

fn evaluate_case<T: Scalar>(
    graph: &ConverterGraph<T>,
    case: &Case<T>,
    horizon: usize,
    conventions: &Conventions,
    params: &PolicyParameters<T>,
    ocp_config: &OcpConfig,
) -> CaseOutcome {
    let scenario = Scenario::from_graph(
        graph.clone(),
        case.task,
        case.initial_state,
        horizon,
        conventions,
    )?;
    let mut flags = Vec::new();

    let policy_cost = match rollout(&scenario, params) {
        Ok(t) => t.tracking_cost().to_f64().unwrap_or(f64::NAN),
        Err(crate::dpc::DpcError::Unstable { .. }) => {
            flags.push(CaseFlag::PolicyFailure);
            f64::NAN
        }
        Err(e) => return Err(e.into()),
    };
    let oc_cost = match solve(&scenario, ocp_config) {
        Ok(sol) => sol.tracking_cost.to_f64().unwrap_or(f64::NAN),
        Err(OcpError::AllStartsDiverged { .. }) => {
            flags.push(CaseFlag::OcFailure);
            f64::NAN
        }
        Err(e) => return Err(e.into()),
    };
    Ok((policy_cost, oc_cost, flags))
}

/// Runs the full protocol: every sampled configuration times every case.
/// Pairs evaluate independently (in parallel under rayon) and assemble in
/// a fixed order, so the report does not depend on thread count.
pub fn evaluate<T: Scalar>(
    params: &PolicyParameters<T>,
    config: &BenchConfig,
    ocp_config: &OcpConfig,
    conventions: &Conventions,
) -> Result<EvalReport, BenchError> {
    config.validate().map_err(BenchError::Config)?;
    ocp_config.validate().map_err(BenchError::Config)?;
    let fleet = sample_configs::<T>(config);

    struct Job<T> {
        config_id: usize,
        plant: PlantParameters<T>,
        graph: ConverterGraph<T>,
        case: Case<T>,
    }
    let mut jobs = Vec::with_capacity(config.n_configs * config.cases_per_config);
    for sampled in &fleet {
        let graph = parse_netlist::<T>(&sampled.netlist).map_err(|e| BenchError::Netlist {
            id: sampled.id,
            message: e.to_string(),
        })?;
        let plant = validate_buck(&graph).map_err(|e| BenchError::Netlist {
            id: sampled.id,
            message: e.to_string(),
        })?;
        let case_seed = splitmix64(config.seed ^ splitmix64(0x636173 ^ sampled.id as u64));
        for case in sample_cases(
            &plant,
            config.cases_per_config,
            case_seed,
            config.min_step,
            conventions,
        ) {
            jobs.push(Job {
                config_id: sampled.id,
                plant,
                graph: graph.clone(),
                case,
            });
        }
    }

    let results: Vec<CaseOutcome> = {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|job| {
                evaluate_case(
                    &job.graph,
                    &job.case,
                    config.horizon,
                    conventions,
                    params,
                    ocp_config,
                )
            })
            .collect()
    };

    let mut rows = Vec::with_capacity(jobs.len());
    for (job, result) in jobs.iter().zip(results) {
        let (policy_cost, oc_cost, mut flags) = result?;
        let mut relative_gap = None;
        if flags.is_empty() {
            if oc_cost <= DEGENERATE_COST {
                flags.push(CaseFlag::Degenerate);
            } else {
                let gap = (policy_cost - oc_cost) / oc_cost;
                if gap < BASELINE_FAILURE_GAP {
                    flags.push(CaseFlag::BaselineFailure);
                }
                relative_gap = Some(gap);
            }
        }
        rows.push(CaseRow {
            config_id: job.config_id,
            case_id: job.case.id,
            inductance: job.plant.inductance.to_f64().unwrap_or(f64::NAN),
            capacitance: job.plant.capacitance.to_f64().unwrap_or(f64::NAN),
            r_load: job.plant.r_load.to_f64().unwrap_or(f64::NAN),
            v_ref: job.case.task.v_ref.to_f64().unwrap_or(f64::NAN),
            policy_cost,
            oc_cost,
            relative_gap,
            flags,
        });
    }

    let clean: Vec<f64> = rows
        .iter()
        .filter(|r| r.flags.is_empty())
        .filter_map(|r| r.relative_gap)
        .collect();
    let counts = Counts {
        cases: rows.len(),
        included: clean.len(),
        degenerate: count_flag(&rows, CaseFlag::Degenerate),
        baseline_failures: count_flag(&rows, CaseFlag::BaselineFailure),
        policy_failures: count_flag(&rows, CaseFlag::PolicyFailure),
        oc_failures: count_flag(&rows, CaseFlag::OcFailure),
    };
    Ok(EvalReport {
        rows,
        stats: gap_stats(&clean),
        counts,
        seed: config.seed,
        checkpoint_hash: None,
    })
}

fn count_flag(rows: &[CaseRow], flag: CaseFlag) -> usize {
    rows.iter().filter(|r| r.flags.contains(&flag)).count()
}

/// Linear-interpolation percentile of pre-sorted values, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Five-number summary; `None` for an empty set.
pub fn gap_stats(gaps: &[f64]) -> Option<GapStats> {
    if gaps.is_empty() {
        return None;
    }
    let mut sorted = gaps.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("gaps are finite"));
    Some(GapStats {
        median: percentile(&sorted, 0.5),
        q1: percentile(&sorted, 0.25),
        q3: percentile(&sorted, 0.75),
        min: sorted[0],
        max: *sorted.last().expect("non-empty"),
    })
}

/// Writes the per-case table.
pub fn write_report_csv<W: std::io::Write>(mut w: W, report: &EvalReport) -> std::io::Result<()> {
    writeln!(
        w,
        "config_id,case_id,L,C,R,v_ref,policy_cost,oc_cost,relative_gap,flags"
    )?;
    for r in &report.rows {
        let gap = r
            .relative_gap
            .map(|g| format!("{g:e}"))
            .unwrap_or_default();
        let flags = r
            .flags
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            w,
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{gap},{flags}",
            r.config_id,
            r.case_id,
            r.inductance,
            r.capacitance,
            r.r_load,
            r.v_ref,
            r.policy_cost,
            r.oc_cost,
        )?;
    }
    Ok(())
}

/// Writes the aggregate summary. `median_relative_gap` is the headline.
pub fn write_summary_json<W: std::io::Write>(w: W, report: &EvalReport) -> std::io::Result<()> {
    let summary = serde_json::json!({
        "median_relative_gap": report.stats.map(|s| s.median),
        "q1_relative_gap": report.stats.map(|s| s.q1),
        "q3_relative_gap": report.stats.map(|s| s.q3),
        "min_relative_gap": report.stats.map(|s| s.min),
        "max_relative_gap": report.stats.map(|s| s.max),
        "counts": report.counts,
        "seed": report.seed,
        "checkpoint_hash": report.checkpoint_hash,
    });
    serde_json::to_writer_pretty(w, &summary).map_err(std::io::Error::other)
}
