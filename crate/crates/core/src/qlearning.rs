//! Tabular Q-learning: the Q-table, the temporal-difference update, greedy
//! and p-greedy selection, and a value-iteration solver used as a test oracle.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::SituationKey;
use crate::ids::ActionId;

#[derive(Debug, Error)]
pub enum QError {
    #[error("non-finite value in Q update: {0}")]
    NonFinite(f64),
    #[error("invalid learning parameter: {0}")]
    Parameter(String),
    #[error("action catalog: {0}")]
    Catalog(String),
    #[error("q-table snapshot line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The recommendable items. Indices are contiguous from zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCatalog {
    names: Vec<String>,
}

impl ActionCatalog {
    pub fn new(names: Vec<String>) -> Result<Self, QError> {
        if names.is_empty() {
            return Err(QError::Catalog("catalog is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(['\t', '\n', ',', '|']) {
                return Err(QError::Catalog(format!("invalid action name {n:?}")));
            }
            if !seen.insert(n.as_str()) {
                return Err(QError::Catalog(format!("duplicate action {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Catalog of `n` documents named `doc00`, `doc01`, ...
    pub fn with_size(n: usize) -> Result<Self, QError> {
        Self::new((0..n).map(|i| format!("doc{i:02}")).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, a: ActionId) -> bool {
        a.index() < self.names.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = ActionId> + '_ {
        (0..self.names.len() as u32).map(ActionId)
    }

    pub fn name(&self, a: ActionId) -> &str {
        &self.names[a.index()]
    }

    pub fn id_of(&self, name: &str) -> Option<ActionId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ActionId(i as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum AlphaSchedule {
    Constant(f64),
    /// `1 / (1 + visits(s, a))`, counting updates before the current one.
    InverseVisits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    pub alpha: AlphaSchedule,
    pub gamma: f64,
    /// Probability of exploiting the greedy action.
    pub p: f64,
}

impl LearningParams {
    pub fn constant(alpha: f64, gamma: f64, p: f64) -> Result<Self, QError> {
        let params = Self {
            alpha: AlphaSchedule::Constant(alpha),
            gamma,
            p,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), QError> {
        if let AlphaSchedule::Constant(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(QError::Parameter(format!("alpha must be in (0, 1], got {a}")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(QError::Parameter(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(QError::Parameter(format!("p must be in [0, 1], got {}", self.p)));
        }
        Ok(())
    }
}

/// How an action was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Exploit,
    Explore,
    Advise,
    RandomFallback,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Exploit,
        Branch::Explore,
        Branch::Advise,
        Branch::RandomFallback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Exploit => "Exploit",
            Branch::Explore => "Explore",
            Branch::Advise => "Advise",
            Branch::RandomFallback => "RandomFallback",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Branch::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown branch {s:?}"))
    }
}

/// Action values keyed by `(state, action)`; absent pairs read as
/// `default_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable<S: Eq + Hash = SituationKey> {
    rows: HashMap<S, Row>,
    default_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Row {
    values: BTreeMap<ActionId, f64>,
    visits: BTreeMap<ActionId, u64>,
    updates: u64,
}

impl<S: Eq + Hash + Clone> Default for QTable<S> {
    fn default() -> Self {
        Self::new(0.0)
    }
}

impl<S: Eq + Hash + Clone> QTable<S> {
    pub fn new(default_value: f64) -> Self {
        Self {
            rows: HashMap::new(),
            default_value,
        }
    }

    pub fn default_value(&self) -> f64 {
        self.default_value
    }

    pub fn get(&self, s: &S, a: ActionId) -> f64 {
        self.rows
            .get(s)
            .and_then(|r| r.values.get(&a))
            .copied()
            .unwrap_or(self.default_value)
    }

    /// Writes a value directly without counting a visit.
    pub fn set(&mut self, s: S, a: ActionId, value: f64) -> Result<(), QError> {
        if !value.is_finite() {
            return Err(QError::NonFinite(value));
        }
        self.rows.entry(s).or_default().values.insert(a, value);
        Ok(())
    }

    pub fn row(&self, s: &S, catalog: &ActionCatalog) -> Vec<f64> {
        let mut row = vec![self.default_value; catalog.len()];
        if let Some(r) = self.rows.get(s) {
            for (a, v) in &r.values {
                if a.index() < row.len() {
                    row[a.index()] = *v;
                }
            }
        }
        row
    }

    /// Stored entries of row `s`; used to restore a row after an aborted step.
    pub fn row_entries(&self, s: &S) -> Vec<(ActionId, f64)> {
        self.rows
            .get(s)
            .map(|r| r.values.iter().map(|(a, v)| (*a, *v)).collect())
            .unwrap_or_default()
    }

    pub fn restore_row(&mut self, s: &S, entries: &[(ActionId, f64)]) {
        match self.rows.get_mut(s) {
            Some(r) => r.values = entries.iter().copied().collect(),
            None if !entries.is_empty() => {
                self.rows.insert(
                    s.clone(),
                    Row {
                        values: entries.iter().copied().collect(),
                        ..Row::default()
                    },
                );
            }
            None => {}
        }
        if let Some(r) = self.rows.get(s) {
            if r.values.is_empty() && r.updates == 0 {
                self.rows.remove(s);
            }
        }
    }

    pub fn max_value(&self, s: &S, catalog: &ActionCatalog) -> f64 {
        self.row(s, catalog)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Number of updates applied to `(s, a)`.
    pub fn visits(&self, s: &S, a: ActionId) -> u64 {
        self.rows
            .get(s)
            .and_then(|r| r.visits.get(&a))
            .copied()
            .unwrap_or(0)
    }

    /// Number of updates applied to any action of row `s`.
    pub fn row_visits(&self, s: &S) -> u64 {
        self.rows.get(s).map_or(0, |r| r.updates)
    }

    pub fn is_row_visited(&self, s: &S) -> bool {
        self.row_visits(s) > 0
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        self.rows.values().map(|r| r.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = (&S, ActionId, f64)> {
        self.rows
            .iter()
            .flat_map(|(s, r)| r.values.iter().map(move |(a, v)| (s, *a, *v)))
    }

    pub fn visited_rows(&self) -> impl Iterator<Item = (&S, u64)> {
        self.rows
            .iter()
            .filter(|(_, r)| r.updates > 0)
            .map(|(s, r)| (s, r.updates))
    }
}

/// Applies `Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`
/// and returns the new value. The maximum runs over the whole catalog.
pub fn q_update<S: Eq + Hash + Clone>(
    table: &mut QTable<S>,
    s: &S,
    a: ActionId,
    reward: f64,
    s_next: &S,
    catalog: &ActionCatalog,
    params: &LearningParams,
) -> Result<f64, QError> {
    if !reward.is_finite() {
        return Err(QError::NonFinite(reward));
    }
    let old = table.get(s, a);
    let visits = table.visits(s, a);
    let alpha = match params.alpha {
        AlphaSchedule::Constant(a) => a,
        AlphaSchedule::InverseVisits => 1.0 / (1.0 + visits as f64),
    };
    let target = reward + params.gamma * table.max_value(s_next, catalog);
    let new = old + alpha * (target - old);
    if !new.is_finite() {
        return Err(QError::NonFinite(new));
    }
    let row = match table.rows.get_mut(s) {
        Some(r) => r,
        None => table.rows.entry(s.clone()).or_default(),
    };
    row.values.insert(a, new);
    row.visits.insert(a, visits + 1);
    row.updates += 1;
    Ok(new)
}

/// Argmax over the catalog, lowest index on ties.
pub fn greedy_action<S: Eq + Hash + Clone>(
    table: &QTable<S>,
    s: &S,
    catalog: &ActionCatalog,
) -> ActionId {
    let row = table.row(s, catalog);
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    ActionId(best as u32)
}

/// Draws `q ~ U[0,1)`; exploits when `q <= p`, otherwise picks a uniformly
/// random action.
pub fn epsilon_greedy_action<S: Eq + Hash + Clone, R: Rng + ?Sized>(
    table: &QTable<S>,
    s: &S,
    catalog: &ActionCatalog,
    p: f64,
    rng: &mut R,
) -> (ActionId, Branch) {
    let q: f64 = rng.gen();
    if q <= p {
        (greedy_action(table, s, catalog), Branch::Exploit)
    } else {
        (random_action(catalog, rng), Branch::Explore)
    }
}

pub fn random_action<R: Rng + ?Sized>(catalog: &ActionCatalog, rng: &mut R) -> ActionId {
    ActionId(rng.gen_range(0..catalog.len() as u32))
}

/// Writes `situation_key<TAB>action<TAB>value` lines sorted by key then
/// action index, values with 17 significant digits.
pub fn write_snapshot<W: Write>(
    table: &QTable<SituationKey>,
    catalog: &ActionCatalog,
    mut out: W,
) -> Result<(), QError> {
    let mut rows: Vec<(String, ActionId, f64)> = table
        .entries()
        .map(|(s, a, v)| (s.to_string(), a, v))
        .collect();
    rows.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    for (s, a, v) in rows {
        writeln!(out, "{s}\t{}\t{v:.16e}", catalog.name(a))?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(
    input: R,
    catalog: &ActionCatalog,
    default_value: f64,
) -> Result<QTable<SituationKey>, QError> {
    let mut table = QTable::new(default_value);
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let err = |message: String| QError::Parse {
            line: i + 1,
            message,
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let s: SituationKey = fields[0].parse().map_err(|e| err(format!("{e}")))?;
        let a = catalog
            .id_of(fields[1])
            .ok_or_else(|| err(format!("unknown action {:?}", fields[1])))?;
        let v: f64 = fields[2].parse().map_err(|e| err(format!("{e}")))?;
        table.set(s, a, v).map_err(|e| err(e.to_string()))?;
    }
    Ok(table)
}

/// A finite MDP with explicit tables: `transitions[s][a][s']` and expected
/// rewards `rewards[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>) -> Result<Self, QError> {
        let n_s = transitions.len();
        if n_s == 0 || rewards.len() != n_s {
            return Err(QError::Parameter("state tables are empty or mismatched".into()));
        }
        let n_a = transitions[0].len();
        if n_a == 0 {
            return Err(QError::Parameter("no actions".into()));
        }
        for (s, row) in transitions.iter().enumerate() {
            if row.len() != n_a || rewards[s].len() != n_a {
                return Err(QError::Parameter(format!("state {s}: ragged action table")));
            }
            for (a, dist) in row.iter().enumerate() {
                let total: f64 = dist.iter().sum();
                if dist.len() != n_s || dist.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(QError::Parameter(format!(
                        "transition ({s}, {a}) is not a distribution"
                    )));
                }
            }
        }
        Ok(Self {
            transitions,
            rewards,
        })
    }

    /// Dense random MDP: rewards uniform in [0,1], transition rows normalized
    /// uniform draws (every transition has positive probability).
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let transitions = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
                        let total: f64 = raw.iter().sum();
                        raw.into_iter().map(|x| x / total).collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen::<f64>()).collect())
            .collect();
        Self {
            transitions,
            rewards,
        }
    }

    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions[0].len()
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let dist = &self.transitions[s][a];
        for (next, p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return next;
            }
        }
        dist.len() - 1
    }
}

/// Bellman optimality backups until the max-norm change drops below
/// `tolerance`. Returns `Q*[s][a]`.
pub fn value_iteration_oracle(
    mdp: &TabularMdp,
    gamma: f64,
    tolerance: f64,
) -> Result<Vec<Vec<f64>>, QError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(QError::Parameter(format!("gamma must be in [0, 1), got {gamma}")));
    }
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(QError::Parameter("tolerance must be positive".into()));
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut q = vec![vec![0.0; n_a]; n_s];
    loop {
        let v: Vec<f64> = q
            .iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let mut delta: f64 = 0.0;
        let mut next = vec![vec![0.0; n_a]; n_s];
        for s in 0..n_s {
            for a in 0..n_a {
                let expected: f64 = mdp.transitions[s][a]
                    .iter()
                    .zip(&v)
                    .map(|(p, vn)| p * vn)
                    .sum();
                next[s][a] = mdp.rewards[s][a] + gamma * expected;
                delta = delta.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        if delta < tolerance {
            return Ok(q);
        }
    }
}

/// Runs Q-learning on `mdp` for `steps` transitions from state 0 with
/// p-greedy selection. Rewards are the expected rewards of the MDP.
pub fn train_on_mdp<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    params: &LearningParams,
    steps: usize,
    rng: &mut R,
) -> Result<QTable<usize>, QError> {
    params.validate()?;
    let catalog = ActionCatalog::with_size(mdp.n_actions())?;
    let mut table = QTable::new(0.0);
    let mut s = 0usize;
    for _ in 0..steps {
        let (a, _) = epsilon_greedy_action(&table, &s, &catalog, params.p, rng);
        let next = mdp.sample_next(s, a.index(), rng);
        q_update(&mut table, &s, a, mdp.rewards[s][a.index()], &next, &catalog, params)?;
        s = next;
    }
    Ok(table)
}
