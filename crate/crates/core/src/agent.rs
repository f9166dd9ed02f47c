//! The hybrid agent and its ablations behind one contract.
//!
//! Each step aggregates the incoming event into a situation, bootstraps an
//! unseen Q-row from the case base (case-based variants), selects an action,
//! lets the environment execute it, applies the Q update and records the
//! implicit rating in the collaborative-filtering store. Episodes end after a
//! fixed number of steps, at which point well-visited situations are retained
//! as cases.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebase::{
    adapt, CaseBase, CaseBaseConfig, CaseError, CaseProblem, EpisodeStats, Provenance,
    RetainOutcome,
};
use crate::collab::{CfError, CfScope, TransactionStore, DEFAULT_NEIGHBORS};
use crate::context::{ContextError, ContextModel, RawEvent, SituationKey, UserContext};
use crate::ids::{ActionId, UserId};
use crate::qlearning::{
    epsilon_greedy_action, greedy_action, q_update, random_action, ActionCatalog, Branch,
    LearningParams, QError, QTable,
};

/// Rewards at or above this value count as an implicit rating of 1.
pub const POSITIVE_REWARD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    GreedyQ,
    EpsilonGreedyQ,
    CFOnly,
    CBRQ,
    HyQL,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::GreedyQ,
        Variant::EpsilonGreedyQ,
        Variant::CFOnly,
        Variant::CBRQ,
        Variant::HyQL,
    ];

    pub fn learns_q(self) -> bool {
        self != Variant::CFOnly
    }

    pub fn uses_cases(self) -> bool {
        matches!(self, Variant::CBRQ | Variant::HyQL)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::GreedyQ => "GreedyQ",
            Variant::EpsilonGreedyQ => "EpsilonGreedyQ",
            Variant::CFOnly => "CFOnly",
            Variant::CBRQ => "CBRQ",
            Variant::HyQL => "HyQL",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub params: LearningParams,
    pub episode_length: usize,
    pub variant: Variant,
    pub seed: u64,
    #[serde(default)]
    pub case_base: CaseBaseConfig,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default)]
    pub cf_scope: CfScope,
}

fn default_neighbors() -> usize {
    DEFAULT_NEIGHBORS
}

impl AgentConfig {
    pub fn new(variant: Variant, params: LearningParams, seed: u64) -> Self {
        Self {
            params,
            episode_length: 50,
            variant,
            seed,
            case_base: CaseBaseConfig::default(),
            neighbors: DEFAULT_NEIGHBORS,
            cf_scope: CfScope::Group,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        self.params.validate()?;
        if self.episode_length == 0 {
            return Err(AgentError::Config("episode_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// One executed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub situation: SituationKey,
    pub action: ActionId,
    pub branch: Branch,
    /// The row was seeded from a retrieved case during this step.
    pub case_bootstrapped: bool,
    pub reward: f64,
    pub next_situation: SituationKey,
}

/// Trace column value for the branch: `Exploit`, or `CaseBootstrapped+Exploit`
/// when the row was seeded from a case first.
pub fn branch_label(branch: Branch, case_bootstrapped: bool) -> String {
    if case_bootstrapped {
        format!("CaseBootstrapped+{branch}")
    } else {
        branch.to_string()
    }
}

pub fn parse_branch_label(label: &str) -> Result<(Branch, bool), String> {
    match label.strip_prefix("CaseBootstrapped+") {
        Some(rest) => Ok((rest.parse()?, true)),
        None => Ok((label.parse()?, false)),
    }
}

pub const TRACE_HEADER: &str = "step,situation_key,action,branch,reward,next_situation_key";

impl StepRecord {
    pub fn to_trace_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.situation,
            self.action,
            branch_label(self.branch, self.case_bootstrapped),
            self.reward,
            self.next_situation
        )
    }

    pub fn parse_trace_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, found {}", f.len()));
        }
        let (branch, case_bootstrapped) = parse_branch_label(f[3])?;
        Ok(StepRecord {
            step: f[0].parse().map_err(|e| format!("step: {e}"))?,
            situation: f[1].parse().map_err(|e| format!("{e}"))?,
            action: ActionId(f[2].parse().map_err(|e| format!("action: {e}"))?),
            branch,
            case_bootstrapped,
            reward: f[4].parse().map_err(|e| format!("reward: {e}"))?,
            next_situation: f[5].parse().map_err(|e| format!("{e}"))?,
        })
    }
}

/// Parses a whole trace file (header line optional).
pub fn parse_trace(text: &str) -> Result<Vec<StepRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && *l != TRACE_HEADER)
        .map(|(i, l)| StepRecord::parse_trace_line(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn write_trace(records: &[StepRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 96 + TRACE_HEADER.len() + 1);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_trace_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment refused the step: {0}")]
    Refused(String),
    #[error("situation not covered by the environment: {0}")]
    Coverage(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub reward: f64,
    pub next_event: RawEvent,
}

/// What an agent interacts with.
pub trait Environment {
    /// The user's current event, without advancing anything.
    fn observe(&mut self, user: UserId) -> Result<RawEvent, EnvError>;

    /// Executes `action` for `user` in their current situation.
    fn execute(&mut self, user: UserId, action: ActionId) -> Result<Outcome, EnvError>;
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Q(#[from] QError),
    #[error(transparent)]
    Cf(#[from] CfError),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("step {step}: {source}")]
    Environment { step: u64, source: EnvError },
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

/// Components that survive [`Agent::reset`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Keep {
    pub qtable: bool,
    pub casebase: bool,
    pub cf: bool,
}

impl Keep {
    pub const NOTHING: Keep = Keep {
        qtable: false,
        casebase: false,
        cf: false,
    };
    pub const CASEBASE: Keep = Keep {
        qtable: false,
        casebase: true,
        cf: false,
    };
    pub const CF: Keep = Keep {
        qtable: false,
        casebase: false,
        cf: true,
    };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub bootstraps: u64,
    /// Retrievals that found a case but could not adapt it.
    pub adapt_noops: u64,
    pub aborted_steps: u64,
    pub retained: u64,
}

/// Hybrid selection: exploit when `q <= p`, otherwise take the
/// collaborative-filtering advice, falling back to a uniform random action.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_policy<R: Rng + ?Sized>(
    table: &QTable<SituationKey>,
    s: &SituationKey,
    catalog: &ActionCatalog,
    p: f64,
    cf: &TransactionStore,
    user: UserId,
    rng: &mut R,
) -> (ActionId, Branch) {
    let q: f64 = rng.gen();
    if q <= p {
        return (greedy_action(table, s, catalog), Branch::Exploit);
    }
    match cf.advise_action(user, s) {
        Some(advice) if catalog.contains(advice.item) => (advice.item, Branch::Advise),
        _ => (random_action(catalog, rng), Branch::RandomFallback),
    }
}

pub struct Agent {
    config: AgentConfig,
    user: UserId,
    user_context: UserContext,
    context: Arc<ContextModel>,
    catalog: Arc<ActionCatalog>,
    qtable: QTable<SituationKey>,
    cases: CaseBase,
    cf: TransactionStore,
    rng: ChaCha8Rng,
    step: u64,
    /// Per situation: visits and summed reward, for retention.
    situation_stats: HashMap<SituationKey, (u64, f64)>,
    stats: AgentStats,
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        user: UserId,
        user_context: UserContext,
        context: Arc<ContextModel>,
        catalog: Arc<ActionCatalog>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        let cases = CaseBase::new(config.case_base)?;
        let cf = Self::empty_store(&config, &context, &catalog);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            user,
            user_context,
            context,
            catalog,
            qtable: QTable::new(0.0),
            cases,
            cf,
            step: 0,
            situation_stats: HashMap::new(),
            stats: AgentStats::default(),
        })
    }

    fn empty_store(
        config: &AgentConfig,
        context: &Arc<ContextModel>,
        catalog: &ActionCatalog,
    ) -> TransactionStore {
        TransactionStore::situated(catalog.len(), context.clone(), config.cf_scope)
            .with_neighbors(config.neighbors)
    }

    /// A store compatible with this agent's catalog, context and CF settings.
    pub fn new_cf_store(&self) -> TransactionStore {
        Self::empty_store(&self.config, &self.context, &self.catalog)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn qtable(&self) -> &QTable<SituationKey> {
        &self.qtable
    }

    pub fn qtable_mut(&mut self) -> &mut QTable<SituationKey> {
        &mut self.qtable
    }

    pub fn case_base(&self) -> &CaseBase {
        &self.cases
    }

    pub fn case_base_mut(&mut self) -> &mut CaseBase {
        &mut self.cases
    }

    pub fn cf_store(&self) -> &TransactionStore {
        &self.cf
    }

    pub fn set_cf_store(&mut self, store: TransactionStore) {
        self.cf = store;
    }

    pub fn take_cf_store(&mut self) -> TransactionStore {
        let empty = self.new_cf_store();
        std::mem::replace(&mut self.cf, empty)
    }

    pub fn stats(&self) -> AgentStats {
        self.stats
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn situation(&self, event: &RawEvent) -> Result<SituationKey, AgentError> {
        Ok(self.context.aggregate(event, &self.user_context, 0)?)
    }

    fn select(&mut self, s: &SituationKey) -> (ActionId, Branch) {
        let cat = &self.catalog;
        match self.config.variant {
            Variant::GreedyQ => (greedy_action(&self.qtable, s, cat), Branch::Exploit),
            Variant::EpsilonGreedyQ | Variant::CBRQ => {
                epsilon_greedy_action(&self.qtable, s, cat, self.config.params.p, &mut self.rng)
            }
            Variant::HyQL => hybrid_policy(
                &self.qtable,
                s,
                cat,
                self.config.params.p,
                &self.cf,
                self.user,
                &mut self.rng,
            ),
            Variant::CFOnly => match self.cf.advise_action(self.user, s) {
                Some(advice) => (advice.item, Branch::Advise),
                None => (random_action(cat, &mut self.rng), Branch::RandomFallback),
            },
        }
    }

    /// Seeds an unvisited row from the most similar stored case.
    fn reuse_case(&mut self, s: &SituationKey) -> Result<bool, AgentError> {
        if !self.config.variant.uses_cases() || self.qtable.is_row_visited(s) || self.cases.is_empty()
        {
            return Ok(false);
        }
        let problem = CaseProblem::from_key(&self.context, s);
        let Some(result) = self.cases.retrieve(&problem)? else {
            return Ok(false);
        };
        if adapt(&result, s, &mut self.qtable, &self.catalog) {
            Ok(true)
        } else {
            self.stats.adapt_noops += 1;
            Ok(false)
        }
    }

    /// Runs one step on `event`. Returns the record and the next event. If
    /// the environment refuses the action the agent is left unchanged.
    pub fn step(
        &mut self,
        event: &RawEvent,
        env: &mut dyn Environment,
    ) -> Result<(StepRecord, RawEvent), AgentError> {
        let s = self.situation(event)?;
        let rng_before = self.rng.clone();
        let row_before = self.qtable.row_entries(&s);

        let bootstrapped = self.reuse_case(&s)?;
        let (action, branch) = self.select(&s);

        let outcome = match env.execute(self.user, action) {
            Ok(o) => o,
            Err(source) => {
                self.rng = rng_before;
                self.qtable.restore_row(&s, &row_before);
                self.stats.aborted_steps += 1;
                return Err(AgentError::Environment {
                    step: self.step,
                    source,
                });
            }
        };
        let s_next = self.situation(&outcome.next_event)?;
        if self.config.variant.learns_q() {
            q_update(
                &mut self.qtable,
                &s,
                action,
                outcome.reward,
                &s_next,
                &self.catalog,
                &self.config.params,
            )?;
        }
        self.cf.record_situated(
            self.user,
            action,
            outcome.reward >= POSITIVE_REWARD,
            &s,
            self.step,
        )?;
        let entry = self.situation_stats.entry(s.clone()).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += outcome.reward;
        if bootstrapped {
            self.stats.bootstraps += 1;
        }

        let record = StepRecord {
            step: self.step,
            situation: s,
            action,
            branch,
            case_bootstrapped: bootstrapped,
            reward: outcome.reward,
            next_situation: s_next,
        };
        self.step += 1;
        Ok((record, outcome.next_event))
    }

    /// Runs `episode_length` steps starting from the environment's current
    /// event, then retains a case for every situation visited at least
    /// `retain_min_visits` times.
    pub fn run_episode(
        &mut self,
        env: &mut dyn Environment,
        episode_length: usize,
    ) -> Result<Vec<StepRecord>, AgentError> {
        let mut trace = Vec::with_capacity(episode_length);
        self.run_episode_observed(env, episode_length, &mut |r, _| trace.push(r.clone()))?;
        Ok(trace)
    }

    /// As [`Agent::run_episode`], handing each record and the event it was
    /// taken on to `observe` instead of collecting them.
    pub fn run_episode_observed(
        &mut self,
        env: &mut dyn Environment,
        episode_length: usize,
        observe: &mut dyn FnMut(&StepRecord, &RawEvent),
    ) -> Result<(), AgentError> {
        let mut event = env.observe(self.user).map_err(|source| AgentError::Environment {
            step: self.step,
            source,
        })?;
        for _ in 0..episode_length {
            let (record, next) = self.step(&event, env)?;
            observe(&record, &event);
            event = next;
        }
        self.retain_cases()
    }

    /// Runs whole episodes until `steps` steps have been executed; the last
    /// episode is shortened if needed.
    pub fn run(
        &mut self,
        env: &mut dyn Environment,
        steps: usize,
    ) -> Result<Vec<StepRecord>, AgentError> {
        let mut trace = Vec::with_capacity(steps);
        self.run_observed(env, steps, &mut |r, _| trace.push(r.clone()))?;
        Ok(trace)
    }

    pub fn run_observed(
        &mut self,
        env: &mut dyn Environment,
        steps: usize,
        observe: &mut dyn FnMut(&StepRecord, &RawEvent),
    ) -> Result<(), AgentError> {
        let mut done = 0;
        while done < steps {
            let len = self.config.episode_length.min(steps - done);
            self.run_episode_observed(env, len, observe)?;
            done += len;
        }
        Ok(())
    }

    fn retain_cases(&mut self) -> Result<(), AgentError> {
        if !self.config.variant.uses_cases() {
            return Ok(());
        }
        let ready: BTreeMap<SituationKey, (u64, f64)> = self
            .situation_stats
            .iter()
            .filter(|(_, (n, _))| *n >= self.config.case_base.retain_min_visits)
            .map(|(s, v)| (s.clone(), *v))
            .collect();
        for (s, (visits, total)) in ready {
            let outcome = self.cases.retain(
                CaseProblem::from_key(&self.context, &s),
                self.qtable.row(&s, &self.catalog),
                EpisodeStats {
                    visits,
                    mean_reward: (total / visits as f64).clamp(0.0, 1.0),
                },
                Provenance {
                    user: self.user,
                    step: self.step,
                },
            )?;
            if outcome != RetainOutcome::Skipped {
                self.stats.retained += 1;
            }
        }
        Ok(())
    }

    /// Wipes every component not listed in `keep` and reseeds the rng.
    pub fn reset(&mut self, keep: Keep) {
        if !keep.qtable {
            self.qtable = QTable::new(0.0);
            self.situation_stats.clear();
        }
        if !keep.casebase {
            self.cases.clear();
        }
        if !keep.cf {
            self.cf = self.new_cf_store();
        }
        self.rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        self.step = 0;
        self.stats = AgentStats::default();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casebase::CaseProblem;
    use crate::context::tests_support::model;
    use crate::context::{CognitiveAction, CognitiveClass, Geo};
    use crate::ids::GroupId;

    const MONDAY: u64 = 1_704_067_200;

    /// Deterministic environment: one place, fixed reward per action.
    struct FixedEnv {
        rewards: Vec<f64>,
        refuse: bool,
        t: u64,
    }

    impl FixedEnv {
        fn event(&self) -> RawEvent {
            RawEvent {
                user: UserId(0),
                timestamp: MONDAY + 8 * 3600 + self.t,
                geo: Some(Geo::new(48.82, 2.27)),
                cognitive: Some(CognitiveAction::Navigate(ActionId(0))),
                calendar: None,
            }
        }
    }

    impl Environment for FixedEnv {
        fn observe(&mut self, _user: UserId) -> Result<RawEvent, EnvError> {
            Ok(self.event())
        }

        fn execute(&mut self, _user: UserId, action: ActionId) -> Result<Outcome, EnvError> {
            if self.refuse {
                return Err(EnvError::Refused("closed".into()));
            }
            self.t += 1;
            Ok(Outcome {
                reward: self.rewards[action.index()],
                next_event: self.event(),
            })
        }
    }

    fn agent(variant: Variant, p: f64) -> Agent {
        let params = LearningParams::constant(0.5, 0.0, p).unwrap();
        Agent::new(
            AgentConfig::new(variant, params, 7),
            UserId(0),
            UserContext {
                group: GroupId(0),
                prior_cognitive: CognitiveClass::Unknown,
            },
            Arc::new(model()),
            Arc::new(ActionCatalog::with_size(4).unwrap()),
        )
        .unwrap()
    }

    fn env(rewards: &[f64]) -> FixedEnv {
        FixedEnv {
            rewards: rewards.to_vec(),
            refuse: false,
            t: 0,
        }
    }

    #[test]
    fn greedy_on_zero_table_picks_first_action() {
        let mut a = agent(Variant::GreedyQ, 1.0);
        let trace = a.run_episode(&mut env(&[0.0; 4]), 5).unwrap();
        assert!(trace.iter().all(|r| r.action == ActionId(0)));
        let mut a = agent(Variant::GreedyQ, 1.0);
        let trace = a.run_episode(&mut env(&[0.0, 1.0, 0.0, 0.0]), 5).unwrap();
        assert!(trace.iter().all(|r| r.action == ActionId(0)));
    }

    #[test]
    fn case_bootstrap_then_exploit() {
        let mut a = agent(Variant::HyQL, 1.0);
        let e = env(&[0.0; 4]).event();
        let s = a.situation(&e).unwrap();
        let problem = CaseProblem::from_key(&model(), &s);
        a.case_base_mut()
            .retain(
                problem,
                vec![0.1, 0.2, 0.0, 0.9],
                EpisodeStats {
                    visits: 9,
                    mean_reward: 0.8,
                },
                Provenance {
                    user: UserId(3),
                    step: 1,
                },
            )
            .unwrap();
        let (rec, _) = a.step(&e, &mut env(&[0.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(rec.case_bootstrapped);
        assert_eq!(rec.branch, Branch::Exploit);
        assert_eq!(rec.action, ActionId(3));
        // row is visited now: no second bootstrap
        let (rec, _) = a.step(&e, &mut env(&[0.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(!rec.case_bootstrapped);
    }

    #[test]
    fn single_step_episode() {
        let mut a = agent(Variant::EpsilonGreedyQ, 0.5);
        assert_eq!(a.run_episode(&mut env(&[1.0; 4]), 1).unwrap().len(), 1);
    }

    #[test]
    fn retention_after_enough_visits() {
        let mut a = agent(Variant::HyQL, 0.5);
        let mut e = env(&[1.0, 0.0, 0.0, 0.0]);
        a.run_episode(&mut e, 3).unwrap();
        assert!(a.case_base().is_empty());
        a.run_episode(&mut e, 3).unwrap();
        assert_eq!(a.case_base().len(), 1);
        assert_eq!(a.case_base().cases()[0].visits, 6);
    }

    #[test]
    fn cf_only_leaves_q_untouched() {
        let mut a = agent(Variant::CFOnly, 0.5);
        let trace = a.run_episode(&mut env(&[1.0; 4]), 20).unwrap();
        assert!(a.qtable().is_empty());
        assert!(trace
            .iter()
            .all(|r| matches!(r.branch, Branch::Advise | Branch::RandomFallback)));
        // its own acceptances feed no advice: no other users exist
        assert!(trace.iter().all(|r| r.branch == Branch::RandomFallback));
        assert_eq!(a.cf_store().transactions().len(), 20);
    }

    #[test]
    fn refused_step_leaves_agent_unchanged() {
        let mut a = agent(Variant::HyQL, 0.5);
        let mut ok = env(&[1.0; 4]);
        a.run_episode(&mut ok, 4).unwrap();
        let q = a.qtable().clone();
        let tx = a.cf_store().transactions().len();
        let mut refusing = env(&[1.0; 4]);
        refusing.refuse = true;
        let e = ok.event();
        let err = a.step(&e, &mut refusing).unwrap_err();
        assert!(matches!(err, AgentError::Environment { step: 4, .. }));
        assert_eq!(a.qtable(), &q);
        assert_eq!(a.cf_store().transactions().len(), tx);
        assert_eq!(a.steps_taken(), 4);
        // the rng was restored: the next step matches a clone that never failed
        let mut twin = agent(Variant::HyQL, 0.5);
        twin.run_episode(&mut env(&[1.0; 4]), 4).unwrap();
        let (x, _) = a.step(&e, &mut env(&[1.0; 4])).unwrap();
        let (y, _) = twin.step(&e, &mut env(&[1.0; 4])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn reset_keeps_requested_parts() {
        let mut a = agent(Variant::HyQL, 0.5);
        a.run(&mut env(&[1.0; 4]), 20).unwrap();
        assert!(!a.case_base().is_empty());
        a.reset(Keep::CASEBASE);
        assert!(a.qtable().is_empty());
        assert!(a.cf_store().is_empty());
        assert!(!a.case_base().is_empty());
        a.reset(Keep::NOTHING);
        assert!(a.case_base().is_empty());
    }

    #[test]
    fn trace_lines_round_trip() {
        let mut a = agent(Variant::HyQL, 0.5);
        let trace = a.run(&mut env(&[1.0, 0.0, 0.25, 0.0]), 30).unwrap();
        let text = write_trace(&trace);
        assert_eq!(parse_trace(&text).unwrap(), trace);
        assert_eq!(
            parse_branch_label("CaseBootstrapped+Advise").unwrap(),
            (Branch::Advise, true)
        );
    }
}
