//! Seeded, paired-trial benchmark harness.
//!
//! A scenario file describes the world (gazetteer, population, routine, drift
//! schedule) and the default learning parameters. An experiment spec lists the
//! variants to compare, the number of trials and the metrics. Trial `t` runs
//! every variant on seed `scenario.seed + t`: the same world, the same event
//! stream and the same reward uniforms.
//!
//! Output directory layout:
//!
//! ```text
//! metrics.csv            variant,seed,metric,value,from,to
//! branches.csv           variant,seed,branch,count
//! manifest.toml          what `verify` needs to recompute the metrics
//! plot.py                matplotlib script over traces/
//! traces/<v>-<seed>.csv  one trace per (variant, seed)
//! store/<v>-<seed>/      users, devices, histories and preferences
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{parse_trace, write_trace, Agent, AgentConfig, AgentError, Keep, StepRecord, Variant};
use crate::casebase::{CaseBase, CaseBaseConfig};
use crate::collab::{CfScope, TransactionStore, DEFAULT_NEIGHBORS};
use crate::context::{ContextError, ContextModel, Gazetteer, DEFAULT_DEPTH};
use crate::ids::UserId;
use crate::qlearning::{AlphaSchedule, Branch, LearningParams};
use crate::sim::{world_after_drift, PopulationConfig, SimEnv, SimError, WorldModel};
use crate::store::{Capability, Database, DeviceRecord, PreferenceRecord, StoreError, UserRecord};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("drift step {drift_step} outside a trace of {len} steps")]
    Range { drift_step: u64, len: usize },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err(e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}

// ---------------------------------------------------------------------------
// scenario

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDefaults {
    pub alpha: f64,
    pub gamma: f64,
    pub p: f64,
    #[serde(default = "default_episode_length")]
    pub episode_length: usize,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default)]
    pub cf_scope: CfScope,
}

fn default_episode_length() -> usize {
    50
}

fn default_neighbors() -> usize {
    DEFAULT_NEIGHBORS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Relative paths resolve against the scenario file's directory.
    pub gazetteer: PathBuf,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// The user whose runs are measured; everybody else is background.
    pub focal_user: u32,
    /// Steps per measured run.
    pub steps: usize,
    /// Steps each background user takes before the measured run starts.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Steps of the prior run that fills a pre-seeded case base.
    #[serde(default)]
    pub prior_steps: usize,
    pub agent: AgentDefaults,
    #[serde(default)]
    pub case_base: CaseBaseConfig,
    pub population: PopulationConfig,
    #[serde(default)]
    pub drift: Vec<crate::sim::DriftOp>,
}

fn default_depth() -> usize {
    DEFAULT_DEPTH
}

/// A parsed scenario with its gazetteer loaded.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub context: Arc<ContextModel>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LoadedScenario, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let scenario = Self::parse(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        scenario.with_context(base)
    }

    pub fn with_context(self, base: &Path) -> Result<LoadedScenario, ExperimentError> {
        let gaz_path = base.join(&self.gazetteer);
        let gaz = Gazetteer::load(&gaz_path)
            .map_err(|e: ContextError| config_err(format!("{}: {e}", gaz_path.display())))?;
        let context = Arc::new(ContextModel::new(gaz, self.depth).map_err(config_err)?);
        let loaded = LoadedScenario {
            scenario: self,
            context,
        };
        loaded.validate()?;
        Ok(loaded)
    }
}

impl LoadedScenario {
    fn validate(&self) -> Result<(), ExperimentError> {
        let s = &self.scenario;
        s.population.validate(&self.context).map_err(config_err)?;
        if s.focal_user as usize >= s.population.n_users {
            return Err(config_err(format!(
                "focal_user {} outside a population of {}",
                s.focal_user, s.population.n_users
            )));
        }
        if s.steps == 0 {
            return Err(config_err("steps must be at least 1"));
        }
        self.params(None, None).map_err(config_err)?;
        CaseBase::new(s.case_base).map_err(config_err)?;
        self.world(s.seed).map_err(config_err)?;
        Ok(())
    }

    fn params(&self, p: Option<f64>, alpha: Option<f64>) -> Result<LearningParams, crate::qlearning::QError> {
        let a = &self.scenario.agent;
        let params = LearningParams {
            alpha: AlphaSchedule::Constant(alpha.unwrap_or(a.alpha)),
            gamma: a.gamma,
            p: p.unwrap_or(a.p),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn world(&self, seed: u64) -> Result<WorldModel, SimError> {
        WorldModel::generate(
            &self.scenario.population,
            self.context.clone(),
            self.scenario.drift.clone(),
            seed,
        )
    }

    pub fn focal(&self) -> UserId {
        UserId(self.scenario.focal_user)
    }

    fn agent_config(&self, variant: &VariantSpec, seed: u64) -> Result<AgentConfig, ExperimentError> {
        let a = &self.scenario.agent;
        Ok(AgentConfig {
            params: self.params(variant.p, variant.alpha).map_err(config_err)?,
            episode_length: a.episode_length,
            variant: variant.variant,
            seed,
            case_base: self.scenario.case_base,
            neighbors: a.neighbors,
            cf_scope: a.cf_scope,
        })
    }

    fn agent(
        &self,
        world: &WorldModel,
        user: UserId,
        config: AgentConfig,
    ) -> Result<Agent, ExperimentError> {
        let profile = world.profile(user)?;
        Ok(Agent::new(
            config,
            user,
            profile.context(),
            self.context.clone(),
            world.catalog().clone(),
        )?)
    }
}

// ---------------------------------------------------------------------------
// experiment spec

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    CumulativeReward,
    StepsToThreshold,
    DriftRecoverySteps,
    BranchHistogram,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::CumulativeReward,
        Metric::StepsToThreshold,
        Metric::DriftRecoverySteps,
        Metric::BranchHistogram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::CumulativeReward => "CumulativeReward",
            Metric::StepsToThreshold => "StepsToThreshold",
            Metric::DriftRecoverySteps => "DriftRecoverySteps",
            Metric::BranchHistogram => "BranchHistogram",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// One arm of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    /// Label used in outputs; must be unique and free of `,` `/` and spaces.
    pub name: String,
    pub variant: Variant,
    /// Start from the transactions the background users logged during warm-up.
    #[serde(default)]
    pub group_cf: bool,
    /// Start with the case base of a prior run in the same world.
    #[serde(default)]
    pub preseed_cases: bool,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Relative paths resolve against the experiment file's directory.
    pub scenario: PathBuf,
    pub variants: Vec<VariantSpec>,
    pub trials: usize,
    pub metrics: Vec<Metric>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the scenario's step count.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Fraction of the optimal expected reward for StepsToThreshold.
    #[serde(default = "default_threshold_fraction")]
    pub threshold_fraction: f64,
    /// Fraction of the post-drift optimum for DriftRecoverySteps.
    #[serde(default = "default_drift_fraction")]
    pub drift_fraction: f64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_window() -> usize {
    50
}

fn default_threshold_fraction() -> f64 {
    0.8
}

fn default_drift_fraction() -> f64 {
    0.9
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(config_err)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Loads a spec and makes its scenario and output paths absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut spec = Self::parse(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        spec.scenario = base.join(&spec.scenario);
        spec.output_dir = base.join(&spec.output_dir);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.variants.is_empty() {
            return Err(config_err("no variants"));
        }
        if self.metrics.is_empty() {
            return Err(config_err("no metrics"));
        }
        if self.window == 0 {
            return Err(config_err("window must be at least 1"));
        }
        for f in [self.threshold_fraction, self.drift_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err(format!("fraction {f} outside (0, 1]")));
            }
        }
        let mut names: Vec<&str> = Vec::new();
        for v in &self.variants {
            if v.name.is_empty() || v.name.contains([',', '/', ' ', '\t', '\n', '\\']) {
                return Err(config_err(format!("bad variant name {:?}", v.name)));
            }
            if names.contains(&v.name.as_str()) {
                return Err(config_err(format!("duplicate variant name {:?}", v.name)));
            }
            names.push(&v.name);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// metrics

/// Σ rewards.
pub fn metric_cumulative_reward(trace: &[StepRecord]) -> f64 {
    trace.iter().map(|r| r.reward).sum()
}

fn first_window_at_least(
    rewards: &[f64],
    start: usize,
    window: usize,
    threshold: f64,
) -> Option<usize> {
    if window == 0 || rewards.len() < start + window {
        return None;
    }
    // integer-valued rewards keep this sum exact; it is recomputed per
    // window anyway so drift in the running sum cannot matter
    (start + window..=rewards.len()).find(|&t| {
        let sum: f64 = rewards[t - window..t].iter().sum();
        sum / window as f64 >= threshold
    })
}

/// First `t >= window` such that the mean reward of steps `t-window..t` is at
/// least `threshold`.
pub fn metric_steps_to_threshold(trace: &[StepRecord], window: usize, threshold: f64) -> Option<u64> {
    let rewards: Vec<f64> = trace.iter().map(|r| r.reward).collect();
    first_window_at_least(&rewards, 0, window, threshold).map(|t| t as u64)
}

/// Steps after `drift_step` until the trailing window, lying entirely after
/// the drift, reaches `fraction * post_optimal`.
pub fn metric_drift_recovery(
    trace: &[StepRecord],
    drift_step: u64,
    window: usize,
    fraction: f64,
    post_optimal: f64,
) -> Result<Option<u64>, ExperimentError> {
    if drift_step as usize > trace.len() {
        return Err(ExperimentError::Range {
            drift_step,
            len: trace.len(),
        });
    }
    let rewards: Vec<f64> = trace.iter().map(|r| r.reward).collect();
    Ok(
        first_window_at_least(&rewards, drift_step as usize, window, fraction * post_optimal)
            .map(|t| t as u64 - drift_step),
    )
}

/// Step counts per branch, plus `CaseBootstrapped` for bootstrapped steps.
pub fn branch_histogram(trace: &[StepRecord]) -> BTreeMap<String, u64> {
    let mut h: BTreeMap<String, u64> = Branch::ALL.iter().map(|b| (b.to_string(), 0)).collect();
    h.insert("CaseBootstrapped".into(), 0);
    for r in trace {
        *h.get_mut(r.branch.name()).expect("all branches present") += 1;
        if r.case_bootstrapped {
            *h.get_mut("CaseBootstrapped").expect("present") += 1;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub seed: u64,
    pub metric: Metric,
    /// `None` when the metric never fired (written as an empty field).
    pub value: Option<f64>,
    pub from: u64,
    pub to: u64,
}

pub const CSV_HEADER: &str = "variant,seed,metric,value,from,to";

fn sort_rows(rows: &mut [MetricRow]) {
    rows.sort_by(|a, b| {
        (&a.variant, a.seed, a.metric, a.from).cmp(&(&b.variant, b.seed, b.metric, b.from))
    });
}

pub fn format_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Canonical CSV text: rows sorted by (variant, seed, metric).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.metric,
            format_value(r.value),
            r.from,
            r.to
        ));
    }
    out
}

pub fn emit_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(config_err("no metric rows to emit"));
    }
    fs::write(path, metrics_csv(rows)).map_err(io_err(path))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err("line 1: missing header".into()),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let err = |m: String| format!("line {}: {m}", i + 1);
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            Ok(MetricRow {
                variant: f[0].to_string(),
                seed: f[1].parse().map_err(|e| err(format!("seed: {e}")))?,
                metric: f[2].parse().map_err(err)?,
                value: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|e| err(format!("value: {e}")))?)
                },
                from: f[4].parse().map_err(|e| err(format!("from: {e}")))?,
                to: f[5].parse().map_err(|e| err(format!("to: {e}")))?,
            })
        })
        .collect()
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Moving-average reward per step, averaged over seeds, one line per variant.

Usage: python3 plot.py [window]   (run from anywhere; reads traces/ next to this file)
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent
WINDOW = int(sys.argv[1]) if len(sys.argv) > 1 else __WINDOW__
VARIANTS = __VARIANTS__


def moving_average(xs, w):
    out, acc = [], 0.0
    for i, x in enumerate(xs):
        acc += x
        if i >= w:
            acc -= xs[i - w]
        out.append(acc / min(i + 1, w))
    return out


curves = defaultdict(list)
for variant in VARIANTS:
    for path in sorted((HERE / "traces").glob(variant + "-*.csv")):
        with path.open() as f:
            rewards = [float(row["reward"]) for row in csv.DictReader(f)]
        curves[variant].append(moving_average(rewards, WINDOW))

fig, ax = plt.subplots(figsize=(8, 4.5))
for variant in VARIANTS:
    runs = curves[variant]
    if not runs:
        continue
    n = min(len(r) for r in runs)
    mean = [sum(r[i] for r in runs) / len(runs) for i in range(n)]
    ax.plot(range(1, n + 1), mean, label=f"{variant} ({len(runs)} seeds)")
__DRIFT__
ax.set_xlabel("step")
ax.set_ylabel(f"reward, {WINDOW}-step moving average")
ax.set_ylim(0, 1)
ax.legend()
fig.tight_layout()
fig.savefig(HERE / "reward.png", dpi=150)
print("wrote", HERE / "reward.png")
"#;

/// Writes a standalone matplotlib script plotting reward-vs-step curves for
/// the variants in `rows` from the `traces/` directory next to `path`.
pub fn emit_plot_script(
    rows: &[MetricRow],
    window: usize,
    drift_steps: &[u64],
    path: impl AsRef<Path>,
) -> Result<(), ExperimentError> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(config_err("no metric rows to plot"));
    }
    let mut variants: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    variants.sort();
    variants.dedup();
    let list = variants
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    let drift: String = drift_steps
        .iter()
        .map(|s| format!("ax.axvline({s}, color=\"grey\", linestyle=\":\")\n"))
        .collect();
    let script = PLOT_SCRIPT
        .replace("__WINDOW__", &window.to_string())
        .replace("__VARIANTS__", &format!("[{list}]"))
        .replace("__DRIFT__\n", &drift);
    fs::write(path, script).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// trials

/// Seed for an auxiliary stream of a trial.
fn derive_seed(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const WARMUP_SALT: u64 = 1;
const PRIOR_SALT: u64 = 2;
const AGENT_SALT: u64 = 3;
const BACKGROUND_SALT: u64 = 4;

/// Everything a trial shares across variants.
pub struct SeedContext {
    pub seed: u64,
    pub world: WorldModel,
    /// Background users' transactions after warm-up.
    pub population_cf: Option<TransactionStore>,
    /// Case base of the focal user's prior run.
    pub prior_cases: Option<CaseBase>,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub variant: String,
    pub seed: u64,
    pub trace: Vec<StepRecord>,
    pub database: Database,
    pub optimal: f64,
    /// (drift step, optimum right after it) for the first scheduled drift.
    pub drift: Option<(u64, f64)>,
}

fn without_drift(world: &WorldModel) -> Result<WorldModel, SimError> {
    let mut w = world.clone();
    w.set_drift_schedule(Vec::new())?;
    Ok(w)
}

/// Background users run HyQL on a shared transaction store, one episode at a
/// time in user order, in a drift-free copy of the world.
pub fn warm_up(
    scn: &LoadedScenario,
    world: &WorldModel,
    seed: u64,
) -> Result<TransactionStore, ExperimentError> {
    let s = &scn.scenario;
    let mut env = SimEnv::new(without_drift(world)?, derive_seed(seed, WARMUP_SALT));
    let spec = VariantSpec {
        name: "background".into(),
        variant: Variant::HyQL,
        group_cf: true,
        preseed_cases: false,
        p: None,
        alpha: None,
    };
    let mut agents = Vec::new();
    for p in world.users() {
        if p.user == scn.focal() {
            continue;
        }
        let config = scn.agent_config(&spec, derive_seed(seed, BACKGROUND_SALT + p.user.0 as u64))?;
        agents.push(scn.agent(world, p.user, config)?);
    }
    let Some(first) = agents.first() else {
        return Err(config_err("warm-up needs at least one background user"));
    };
    let mut store = first.new_cf_store();
    let mut done = 0;
    while done < s.warmup_steps {
        let len = s.agent.episode_length.min(s.warmup_steps - done);
        for agent in agents.iter_mut() {
            agent.set_cf_store(store);
            let r = agent.run_episode_observed(&mut env, len, &mut |_, _| {});
            store = agent.take_cf_store();
            r?;
        }
        done += len;
    }
    Ok(store)
}

/// The focal user's HyQL run in a drift-free copy of the world on its own
/// streams; returns the case base it leaves behind.
pub fn prior_case_base(
    scn: &LoadedScenario,
    world: &WorldModel,
    seed: u64,
    population_cf: Option<&TransactionStore>,
) -> Result<CaseBase, ExperimentError> {
    let spec = VariantSpec {
        name: "prior".into(),
        variant: Variant::HyQL,
        group_cf: population_cf.is_some(),
        preseed_cases: false,
        p: None,
        alpha: None,
    };
    let config = scn.agent_config(&spec, derive_seed(seed, PRIOR_SALT))?;
    let mut agent = scn.agent(world, scn.focal(), config)?;
    if let Some(store) = population_cf {
        agent.set_cf_store(store.clone());
    }
    let mut env = SimEnv::new(without_drift(world)?, derive_seed(seed, PRIOR_SALT));
    agent.run_observed(&mut env, scn.scenario.prior_steps, &mut |_, _| {})?;
    agent.reset(Keep::CASEBASE);
    Ok(agent.case_base().clone())
}

impl SeedContext {
    pub fn build(
        scn: &LoadedScenario,
        seed: u64,
        variants: &[VariantSpec],
    ) -> Result<Self, ExperimentError> {
        let world = scn.world(seed)?;
        let population_cf = if variants.iter().any(|v| v.group_cf) {
            Some(warm_up(scn, &world, seed)?)
        } else {
            None
        };
        let prior_cases = if variants.iter().any(|v| v.preseed_cases) {
            Some(prior_case_base(scn, &world, seed, population_cf.as_ref())?)
        } else {
            None
        };
        Ok(Self {
            seed,
            world,
            population_cf,
            prior_cases,
        })
    }
}

fn populate_directory(db: &mut Database, world: &WorldModel) -> Result<(), StoreError> {
    for p in world.users() {
        db.add_user(UserRecord {
            user: p.user,
            login: format!("user{:02}", p.user.0),
            group: p.group,
        })?;
        db.add_device(DeviceRecord {
            device_id: format!("phone-{:02}", p.user.0),
            user: p.user,
            capabilities: [
                Capability::Display,
                Capability::Gps,
                Capability::Calendar,
                Capability::Call,
            ]
            .into(),
        })?;
    }
    Ok(())
}

/// Runs one variant on one seed.
pub fn run_trial(
    scn: &LoadedScenario,
    ctx: &SeedContext,
    variant: &VariantSpec,
) -> Result<TrialResult, ExperimentError> {
    let focal = scn.focal();
    let config = scn.agent_config(variant, derive_seed(ctx.seed, AGENT_SALT))?;
    let mut agent = scn.agent(&ctx.world, focal, config)?;
    if variant.group_cf {
        let store = ctx
            .population_cf
            .as_ref()
            .ok_or_else(|| config_err("group_cf requested without warm-up"))?;
        agent.set_cf_store(store.clone());
    }
    if variant.preseed_cases {
        let cases = ctx
            .prior_cases
            .as_ref()
            .ok_or_else(|| config_err("preseed_cases requested without a prior run"))?;
        *agent.case_base_mut() = cases.clone();
    }

    let mut db = Database::new();
    populate_directory(&mut db, &ctx.world)?;
    let mut env = SimEnv::new(ctx.world.clone(), ctx.seed);
    let mut trace = Vec::with_capacity(scn.scenario.steps);
    let mut store_err = None;
    agent.run_observed(&mut env, scn.scenario.steps, &mut |record, event| {
        if store_err.is_some() {
            return;
        }
        let res = db
            .append_event_history(record.step, event.clone())
            .and_then(|_| db.append_action_history(focal, record.clone()))
            .and_then(|_| {
                db.upsert_preferences(PreferenceRecord {
                    user: focal,
                    situation: record.situation.clone(),
                    action: record.action,
                    reward: record.reward,
                    step: record.step,
                })
            });
        if let Err(e) = res {
            store_err = Some(e);
        }
        trace.push(record.clone());
    })?;
    if let Some(e) = store_err {
        return Err(e.into());
    }

    let optimal = ctx.world.optimal_expected_reward(focal)?;
    let drift = match ctx.world.drift_schedule().first() {
        Some(op) => {
            let after = world_after_drift(&ctx.world, ctx.seed, op.step);
            Some((op.step, after.optimal_expected_reward(focal)?))
        }
        None => None,
    };
    Ok(TrialResult {
        variant: variant.name.clone(),
        seed: ctx.seed,
        trace,
        database: db,
        optimal,
        drift,
    })
}

/// What `verify` needs per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialManifest {
    pub variant: String,
    pub seed: u64,
    pub optimal: f64,
    #[serde(default)]
    pub drift_step: Option<u64>,
    #[serde(default)]
    pub post_drift_optimal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub window: usize,
    pub threshold_fraction: f64,
    pub drift_fraction: f64,
    pub metrics: Vec<Metric>,
    pub trials: Vec<TrialManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BRANCHES_FILE: &str = "branches.csv";
pub const PLOT_FILE: &str = "plot.py";

pub fn trace_path(dir: &Path, variant: &str, seed: u64) -> PathBuf {
    dir.join("traces").join(format!("{variant}-{seed}.csv"))
}

/// Metric rows for one trial.
pub fn trial_metrics(
    trace: &[StepRecord],
    t: &TrialManifest,
    m: &Manifest,
) -> Result<Vec<MetricRow>, ExperimentError> {
    let len = trace.len() as u64;
    let mut rows = Vec::new();
    for metric in &m.metrics {
        let (value, from) = match metric {
            Metric::CumulativeReward => (Some(metric_cumulative_reward(trace)), 0),
            Metric::StepsToThreshold => (
                metric_steps_to_threshold(trace, m.window, m.threshold_fraction * t.optimal)
                    .map(|v| v as f64),
                0,
            ),
            Metric::DriftRecoverySteps => {
                let (Some(step), Some(post)) = (t.drift_step, t.post_drift_optimal) else {
                    return Err(config_err("DriftRecoverySteps needs a drift schedule"));
                };
                (
                    metric_drift_recovery(trace, step, m.window, m.drift_fraction, post)?
                        .map(|v| v as f64),
                    step,
                )
            }
            // the per-branch counts go to branches.csv; the row holds the
            // number of steps they cover
            Metric::BranchHistogram => {
                let h = branch_histogram(trace);
                let steps: u64 = Branch::ALL.iter().map(|b| h[b.name()]).sum();
                (Some(steps as f64), 0)
            }
        };
        rows.push(MetricRow {
            variant: t.variant.clone(),
            seed: t.seed,
            metric: *metric,
            value,
            from,
            to: len,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricRow>,
    pub trials: Vec<TrialResult>,
}

/// Runs every (variant, seed) pair, computes metrics and returns them with
/// the trials, without touching the file system.
pub fn run_trials(
    scn: &LoadedScenario,
    spec: &ExperimentSpec,
    parallel: usize,
) -> Result<ExperimentOutput, ExperimentError> {
    spec.validate()?;
    if spec.metrics.contains(&Metric::DriftRecoverySteps) && scn.scenario.drift.is_empty() {
        return Err(config_err("DriftRecoverySteps requested but the scenario has no drift"));
    }
    for v in &spec.variants {
        scn.agent_config(v, 0)?;
    }
    let owned;
    let scn = match spec.steps {
        Some(0) => return Err(config_err("steps must be at least 1")),
        Some(steps) => {
            let mut s = scn.clone();
            s.scenario.steps = steps;
            owned = s;
            &owned
        }
        None => scn,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(config_err)?;
    let seeds: Vec<u64> = (0..spec.trials as u64)
        .map(|t| scn.scenario.seed.wrapping_add(t))
        .collect();
    let per_seed: Vec<Result<Vec<TrialResult>, ExperimentError>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let ctx = SeedContext::build(scn, seed, &spec.variants)?;
                spec.variants
                    .iter()
                    .map(|v| run_trial(scn, &ctx, v))
                    .collect()
            })
            .collect()
    });
    let mut trials = Vec::new();
    for r in per_seed {
        trials.extend(r?);
    }
    let manifest = manifest_for(spec, &trials);
    let mut rows = Vec::new();
    for (trial, t) in trials.iter().zip(&manifest.trials) {
        rows.extend(trial_metrics(&trial.trace, t, &manifest)?);
    }
    sort_rows(&mut rows);
    Ok(ExperimentOutput { rows, trials })
}

fn manifest_for(spec: &ExperimentSpec, trials: &[TrialResult]) -> Manifest {
    Manifest {
        window: spec.window,
        threshold_fraction: spec.threshold_fraction,
        drift_fraction: spec.drift_fraction,
        metrics: spec.metrics.clone(),
        trials: trials
            .iter()
            .map(|t| TrialManifest {
                variant: t.variant.clone(),
                seed: t.seed,
                optimal: t.optimal,
                drift_step: t.drift.map(|d| d.0),
                post_drift_optimal: t.drift.map(|d| d.1),
            })
            .collect(),
    }
}

fn branches_csv(trials: &[TrialResult]) -> String {
    let mut lines: Vec<(String, u64, String, u64)> = Vec::new();
    for t in trials {
        for (b, n) in branch_histogram(&t.trace) {
            lines.push((t.variant.clone(), t.seed, b, n));
        }
    }
    lines.sort();
    let mut out = String::from("variant,seed,branch,count\n");
    for (v, s, b, n) in lines {
        out.push_str(&format!("{v},{s},{b},{n}\n"));
    }
    out
}

/// Runs the experiment and writes every artifact under the output directory.
pub fn run_experiment(
    spec: &ExperimentSpec,
    parallel: usize,
) -> Result<Vec<MetricRow>, ExperimentError> {
    spec.validate()?;
    let scn = Scenario::load(&spec.scenario)?;
    let out = run_trials(&scn, spec, parallel)?;
    write_outputs(spec, &out)?;
    Ok(out.rows)
}

pub fn write_outputs(spec: &ExperimentSpec, out: &ExperimentOutput) -> Result<(), ExperimentError> {
    let dir = &spec.output_dir;
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(io_err(&traces))?;
    for t in &out.trials {
        let path = trace_path(dir, &t.variant, t.seed);
        fs::write(&path, write_trace(&t.trace)).map_err(io_err(&path))?;
        t.database
            .snapshot(dir.join("store").join(format!("{}-{}", t.variant, t.seed)))?;
    }
    emit_csv(&out.rows, dir.join(METRICS_FILE))?;
    let path = dir.join(BRANCHES_FILE);
    fs::write(&path, branches_csv(&out.trials)).map_err(io_err(&path))?;
    let manifest = manifest_for(spec, &out.trials);
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(config_err)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    let mut drift_steps: Vec<u64> = manifest.trials.iter().filter_map(|t| t.drift_step).collect();
    drift_steps.sort();
    drift_steps.dedup();
    emit_plot_script(&out.rows, spec.window, &drift_steps, dir.join(PLOT_FILE))
}

// ---------------------------------------------------------------------------
// verify and report

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub variant: String,
    pub seed: u64,
    pub metric: String,
    pub recorded: String,
    pub recomputed: String,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {} {}: recorded {:?}, recomputed {:?}",
            self.variant, self.seed, self.metric, self.recorded, self.recomputed
        )
    }
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Recomputes every metric from the persisted traces and compares it with
/// `metrics.csv`, field by field.
pub fn verify(dir: impl AsRef<Path>) -> Result<Vec<Mismatch>, ExperimentError> {
    let dir = dir.as_ref();
    let manifest: Manifest = toml::from_str(&read(&dir.join(MANIFEST_FILE))?).map_err(|e| {
        ExperimentError::Parse {
            path: dir.join(MANIFEST_FILE),
            line: 0,
            message: e.to_string(),
        }
    })?;
    let csv_path = dir.join(METRICS_FILE);
    let recorded = parse_csv(&read(&csv_path)?).map_err(|message| ExperimentError::Parse {
        path: csv_path.clone(),
        line: 0,
        message,
    })?;
    let mut recomputed = Vec::new();
    for t in &manifest.trials {
        let path = trace_path(dir, &t.variant, t.seed);
        let trace = parse_trace(&read(&path)?).map_err(|message| ExperimentError::Parse {
            path: path.clone(),
            line: 0,
            message,
        })?;
        recomputed.extend(trial_metrics(&trace, t, &manifest)?);
    }
    sort_rows(&mut recomputed);
    let mut by_key: HashMap<(String, u64, Metric), &MetricRow> = HashMap::new();
    for r in &recorded {
        by_key.insert((r.variant.clone(), r.seed, r.metric), r);
    }
    let mut mismatches = Vec::new();
    let show = |r: &MetricRow| format!("{},{},{}", format_value(r.value), r.from, r.to);
    for r in &recomputed {
        let key = (r.variant.clone(), r.seed, r.metric);
        let got = by_key.remove(&key).map(show).unwrap_or_else(|| "<missing>".into());
        if got != show(r) {
            mismatches.push(Mismatch {
                variant: r.variant.clone(),
                seed: r.seed,
                metric: r.metric.to_string(),
                recorded: got,
                recomputed: show(r),
            });
        }
    }
    let mut extra: Vec<_> = by_key.into_iter().collect();
    extra.sort_by(|a, b| a.0.cmp(&b.0));
    for ((variant, seed, metric), r) in extra {
        mismatches.push(Mismatch {
            variant,
            seed,
            metric: metric.to_string(),
            recorded: show(r),
            recomputed: "<missing>".into(),
        });
    }
    Ok(mismatches)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub metric: Metric,
    pub n: usize,
    pub missing: usize,
    pub mean: f64,
    pub median: f64,
    /// Half-width of the normal-approximation 95% interval of the mean.
    pub ci95: f64,
}

pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, Metric), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let g = groups.entry((r.variant.clone(), r.metric)).or_default();
        match r.value {
            Some(v) => g.0.push(v),
            None => g.1 += 1,
        }
    }
    groups
        .into_iter()
        .map(|((variant, metric), (mut xs, missing))| {
            xs.sort_by(f64::total_cmp);
            let n = xs.len();
            let mean = if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 };
            let median = match n {
                0 => f64::NAN,
                _ if n % 2 == 1 => xs[n / 2],
                _ => (xs[n / 2 - 1] + xs[n / 2]) / 2.0,
            };
            let ci95 = if n < 2 {
                f64::NAN
            } else {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            };
            Summary {
                variant,
                metric,
                n,
                missing,
                mean,
                median,
                ci95,
            }
        })
        .collect()
}

/// Plain-text summary of `metrics.csv` in `dir`.
pub fn report(dir: impl AsRef<Path>) -> Result<String, ExperimentError> {
    let path = dir.as_ref().join(METRICS_FILE);
    let rows = parse_csv(&read(&path)?).map_err(|message| ExperimentError::Parse {
        path: path.clone(),
        line: 0,
        message,
    })?;
    let mut out = format!(
        "{:<20} {:<20} {:>5} {:>5} {:>12} {:>12} {:>10}\n",
        "variant", "metric", "n", "none", "mean", "median", "ci95"
    );
    for s in summarize(&rows) {
        out.push_str(&format!(
            "{:<20} {:<20} {:>5} {:>5} {:>12.3} {:>12.3} {:>10.3}\n",
            s.variant,
            s.metric.name(),
            s.n,
            s.missing,
            s.mean,
            s.median,
            s.ci95
        ));
    }
    Ok(out)
}

/// Paired comparison helper: per seed, the value of `metric` for `a` and `b`.
pub fn paired(rows: &[MetricRow], metric: Metric, a: &str, b: &str) -> Vec<(u64, Option<f64>, Option<f64>)> {
    let mut by_seed: BTreeMap<u64, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        let e = by_seed.entry(r.seed).or_default();
        if r.variant == a {
            e.0 = r.value;
        } else if r.variant == b {
            e.1 = r.value;
        }
    }
    by_seed.into_iter().map(|(s, (x, y))| (s, x, y)).collect()
}
