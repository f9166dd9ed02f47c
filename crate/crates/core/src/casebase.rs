//! Case-based reasoning store. A case pairs a situation description with the
//! Q-row learned there; reuse copies a similarity-scaled row into an unseen
//! state of the Q-table.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{CognitiveClass, ContextModel, SituationKey, TimeBucket, TIME_LEVELS};
use crate::ids::{ActionId, GroupId, UserId};
use crate::qlearning::{ActionCatalog, QTable};

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("feature schema mismatch: {0}")]
    Schema(String),
    #[error("similarity {0} outside [0, 1]")]
    Range(f64),
    #[error("invalid case base configuration: {0}")]
    Config(String),
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("case-base file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Feature vector describing a situation: the time bucket, the place path
/// from the leaf up to (not including) the root, group and cognitive class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaseProblem {
    pub time: TimeBucket,
    pub place_path: Vec<String>,
    pub group: GroupId,
    pub cognitive: CognitiveClass,
}

impl CaseProblem {
    pub fn from_key(context: &ContextModel, key: &SituationKey) -> Self {
        CaseProblem {
            time: key.time,
            place_path: context.place_path(&key.place),
            group: key.group,
            cognitive: key.cognitive,
        }
    }
}

impl fmt::Display for CaseProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}",
            self.time,
            self.place_path.join(">"),
            self.group,
            self.cognitive
        )
    }
}

impl FromStr for CaseProblem {
    type Err = CaseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| CaseError::InvalidCase(format!("problem {s:?}: {m}"));
        let f: Vec<&str> = s.split('|').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields".into()));
        }
        Ok(CaseProblem {
            time: f[0].parse().map_err(|e| bad(format!("{e}")))?,
            place_path: f[1].split('>').map(str::to_string).collect(),
            group: f[2].parse().map_err(bad)?,
            cognitive: f[3].parse().map_err(|e| bad(format!("{e}")))?,
        })
    }
}

/// Per-dimension weights of the similarity measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub time: f64,
    pub place: f64,
    pub group: f64,
    pub cognitive: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        Self {
            time: 0.25,
            place: 0.25,
            group: 0.25,
            cognitive: 0.25,
        }
    }
}

impl FeatureWeights {
    pub fn validate(&self) -> Result<(), CaseError> {
        let w = [self.time, self.place, self.group, self.cognitive];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(CaseError::Config(format!("weights must be non-negative: {w:?}")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CaseError::Config(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

fn time_match(a: &TimeBucket, b: &TimeBucket) -> f64 {
    if a == b {
        return 1.0;
    }
    let hits = (0..TIME_LEVELS).filter(|&l| a.coincides_at(b, l)).count();
    hits as f64 / TIME_LEVELS as f64
}

fn place_match(a: &[String], b: &[String]) -> f64 {
    if a.first() == b.first() {
        return 1.0;
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / a.len() as f64
}

/// Weighted sum of per-dimension matches. Time and place score the fraction
/// of generalization levels at which they coincide; group and cognitive
/// class are exact matches.
pub fn case_similarity(
    a: &CaseProblem,
    b: &CaseProblem,
    weights: &FeatureWeights,
) -> Result<f64, CaseError> {
    if a.place_path.len() != b.place_path.len() || a.place_path.is_empty() {
        return Err(CaseError::Schema(format!(
            "place paths of length {} and {}",
            a.place_path.len(),
            b.place_path.len()
        )));
    }
    let exact = |eq: bool| if eq { 1.0 } else { 0.0 };
    let matched = weights.time * time_match(&a.time, &b.time)
        + weights.place * place_match(&a.place_path, &b.place_path)
        + weights.group * exact(a.group == b.group)
        + weights.cognitive * exact(a.cognitive == b.cognitive);
    // normalizing by the summed weights keeps a perfect match at exactly 1
    let total = weights.time + weights.place + weights.group + weights.cognitive;
    Ok((matched / total).clamp(0.0, 1.0))
}

/// Adaptation distance of a retrieved case.
pub fn compute_cost(similarity: f64) -> Result<f64, CaseError> {
    if !(0.0..=1.0).contains(&similarity) {
        return Err(CaseError::Range(similarity));
    }
    Ok(1.0 - similarity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub user: UserId,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub problem: CaseProblem,
    /// Q-row indexed by action.
    pub solution: Vec<f64>,
    pub visits: u64,
    pub mean_reward: f64,
    pub provenance: Provenance,
}

impl Case {
    fn validate(&self) -> Result<(), CaseError> {
        if self.solution.iter().any(|v| !v.is_finite()) {
            return Err(CaseError::InvalidCase("non-finite solution value".into()));
        }
        if self.visits == 0 {
            return Err(CaseError::InvalidCase("visits must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mean_reward) {
            return Err(CaseError::InvalidCase(format!(
                "mean reward {} outside [0, 1]",
                self.mean_reward
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub case: Case,
    pub similarity: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseBaseConfig {
    pub weights: FeatureWeights,
    pub retrieval_threshold: f64,
    pub max_size: usize,
    pub retain_min_visits: u64,
}

impl Default for CaseBaseConfig {
    fn default() -> Self {
        Self {
            weights: FeatureWeights::default(),
            retrieval_threshold: 0.8,
            max_size: 1000,
            retain_min_visits: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub visits: u64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetainOutcome {
    Inserted,
    /// An existing case with identical problem was revised.
    Replaced,
    Evicted(Box<Case>),
    /// Below `retain_min_visits`.
    Skipped,
}

#[derive(Debug, Clone)]
pub struct CaseBase {
    cases: Vec<Case>,
    /// Insertion sequence per case, breaks age ties.
    seq: Vec<u64>,
    next_seq: u64,
    config: CaseBaseConfig,
}

impl CaseBase {
    pub fn new(config: CaseBaseConfig) -> Result<Self, CaseError> {
        config.weights.validate()?;
        if !(0.0..=1.0).contains(&config.retrieval_threshold) {
            return Err(CaseError::Config(format!(
                "retrieval threshold {} outside [0, 1]",
                config.retrieval_threshold
            )));
        }
        if config.max_size == 0 {
            return Err(CaseError::Config("max_size must be positive".into()));
        }
        Ok(Self {
            cases: Vec::new(),
            seq: Vec::new(),
            next_seq: 0,
            config,
        })
    }

    pub fn config(&self) -> &CaseBaseConfig {
        &self.config
    }

    pub fn cases(&self) -> &[Case] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn clear(&mut self) {
        self.cases.clear();
        self.seq.clear();
    }

    /// Most similar case at or above the retrieval threshold. Ties prefer more
    /// visits, then the earlier provenance step.
    pub fn retrieve(&self, problem: &CaseProblem) -> Result<Option<RetrievalResult>, CaseError> {
        let mut best: Option<(f64, usize)> = None;
        for (i, case) in self.cases.iter().enumerate() {
            let sim = case_similarity(problem, &case.problem, &self.config.weights)?;
            let better = match best {
                None => true,
                Some((bs, bi)) => {
                    let b = &self.cases[bi];
                    sim > bs
                        || (sim == bs
                            && (case.visits > b.visits
                                || (case.visits == b.visits
                                    && case.provenance.step < b.provenance.step)))
                }
            };
            if better {
                best = Some((sim, i));
            }
        }
        match best {
            Some((sim, i)) if sim >= self.config.retrieval_threshold => Ok(Some(RetrievalResult {
                case: self.cases[i].clone(),
                similarity: sim,
                cost: compute_cost(sim)?,
            })),
            _ => Ok(None),
        }
    }

    /// Stores the Q-row learned in situation `problem`. A case whose problem
    /// is fully similar is revised in place; past `max_size` the case with
    /// the lowest mean reward (oldest on ties) is evicted.
    pub fn retain(
        &mut self,
        problem: CaseProblem,
        solution: Vec<f64>,
        stats: EpisodeStats,
        provenance: Provenance,
    ) -> Result<RetainOutcome, CaseError> {
        if stats.visits < self.config.retain_min_visits {
            return Ok(RetainOutcome::Skipped);
        }
        let case = Case {
            problem,
            solution,
            visits: stats.visits,
            mean_reward: stats.mean_reward,
            provenance,
        };
        case.validate()?;
        for i in 0..self.cases.len() {
            if case_similarity(&case.problem, &self.cases[i].problem, &self.config.weights)? == 1.0 {
                self.cases[i] = case;
                self.seq[i] = self.next_seq;
                self.next_seq += 1;
                return Ok(RetainOutcome::Replaced);
            }
        }
        self.cases.push(case);
        self.seq.push(self.next_seq);
        self.next_seq += 1;
        if self.cases.len() > self.config.max_size {
            let victim = self.eviction_victim();
            self.seq.remove(victim);
            return Ok(RetainOutcome::Evicted(Box::new(self.cases.remove(victim))));
        }
        Ok(RetainOutcome::Inserted)
    }

    fn eviction_victim(&self) -> usize {
        let key = |i: usize| (self.cases[i].mean_reward, self.cases[i].provenance.step, self.seq[i]);
        (0..self.cases.len())
            .min_by(|&a, &b| {
                let (ra, sa, qa) = key(a);
                let (rb, sb, qb) = key(b);
                ra.total_cmp(&rb).then(sa.cmp(&sb)).then(qa.cmp(&qb))
            })
            .expect("eviction only runs on a non-empty base")
    }

    /// Writes `problem<TAB>solution<TAB>visits<TAB>mean_reward<TAB>user<TAB>step`
    /// per case, the solution as `index:value` pairs joined by `;`.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CaseError> {
        for c in &self.cases {
            let solution: Vec<String> = c
                .solution
                .iter()
                .enumerate()
                .map(|(i, v)| format!("{i}:{v}"))
                .collect();
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.problem,
                solution.join(";"),
                c.visits,
                c.mean_reward,
                c.provenance.user,
                c.provenance.step
            )?;
        }
        Ok(())
    }

    /// Loads cases from the tab-separated format. All lines must parse
    /// before any case is added.
    pub fn read_from<R: BufRead>(&mut self, input: R) -> Result<(), CaseError> {
        let mut parsed = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let err = |message: String| CaseError::Parse {
                line: i + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            let problem: CaseProblem = f[0].parse().map_err(|e: CaseError| err(e.to_string()))?;
            let mut solution = Vec::new();
            for (expect, pair) in f[1].split(';').enumerate() {
                let (idx, val) = pair
                    .split_once(':')
                    .ok_or_else(|| err(format!("bad solution pair {pair:?}")))?;
                if idx.parse::<usize>().ok() != Some(expect) {
                    return Err(err(format!("solution index {idx:?} out of order")));
                }
                solution.push(val.parse::<f64>().map_err(|e| err(e.to_string()))?);
            }
            let case = Case {
                problem,
                solution,
                visits: f[2].parse().map_err(|e| err(format!("visits: {e}")))?,
                mean_reward: f[3].parse().map_err(|e| err(format!("mean_reward: {e}")))?,
                provenance: Provenance {
                    user: f[4].parse().map_err(|e| err(format!("user: {e}")))?,
                    step: f[5].parse().map_err(|e| err(format!("step: {e}")))?,
                },
            };
            case.validate().map_err(|e| err(e.to_string()))?;
            parsed.push(case);
        }
        for case in parsed {
            let stats = EpisodeStats {
                visits: case.visits,
                mean_reward: case.mean_reward,
            };
            // loading bypasses the min-visits gate
            let min = std::mem::replace(&mut self.config.retain_min_visits, 0);
            let out = self.retain(case.problem, case.solution, stats, case.provenance);
            self.config.retain_min_visits = min;
            out?;
        }
        Ok(())
    }
}

/// Bootstraps the unvisited row `target` with the similarity-scaled case
/// solution. Returns `false` (and leaves the table alone) when the row has
/// already been visited.
pub fn adapt(
    result: &RetrievalResult,
    target: &SituationKey,
    table: &mut QTable<SituationKey>,
    catalog: &ActionCatalog,
) -> bool {
    if table.is_row_visited(target) {
        return false;
    }
    for (i, v) in result.case.solution.iter().enumerate().take(catalog.len()) {
        // finite by case validation, scaled by a value in [0, 1]
        let _ = table.set(target.clone(), ActionId(i as u32), result.similarity * v);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qlearning::{q_update, LearningParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(time: &str, place: &[&str], group: u32, cog: CognitiveClass) -> CaseProblem {
        CaseProblem {
            time: time.parse().unwrap(),
            place_path: place.iter().map(|s| s.to_string()).collect(),
            group: GroupId(group),
            cognitive: cog,
        }
    }

    fn home() -> CaseProblem {
        problem("Morning-Weekday-Free", &["Home", "Paris"], 0, CognitiveClass::Navigate)
    }

    fn stats(visits: u64, mean_reward: f64) -> EpisodeStats {
        EpisodeStats {
            visits,
            mean_reward,
        }
    }

    fn prov(step: u64) -> Provenance {
        Provenance {
            user: UserId(0),
            step,
        }
    }

    #[test]
    fn similarity_examples() {
        let w = FeatureWeights::default();
        assert_eq!(case_similarity(&home(), &home(), &w).unwrap(), 1.0);
        let other_group = CaseProblem {
            group: GroupId(1),
            ..home()
        };
        assert_eq!(case_similarity(&home(), &other_group, &w).unwrap(), 0.75);
        let far = problem("Evening-Weekend-InMeeting", &["ClientSite", "Lyon"], 3, CognitiveClass::Call);
        assert_eq!(case_similarity(&home(), &far, &w).unwrap(), 0.0);
        // sibling place, same city
        let cafe = problem("Morning-Weekday-Free", &["Cafe", "Paris"], 0, CognitiveClass::Navigate);
        assert_eq!(case_similarity(&home(), &cafe, &w).unwrap(), 0.875);
        let shallow = problem("Morning-Weekday-Free", &["Home"], 0, CognitiveClass::Navigate);
        assert!(matches!(
            case_similarity(&home(), &shallow, &w),
            Err(CaseError::Schema(_))
        ));
    }

    #[test]
    fn cost_is_one_minus_similarity() {
        assert_eq!(compute_cost(1.0).unwrap(), 0.0);
        assert_eq!(compute_cost(0.0).unwrap(), 1.0);
        assert_eq!(compute_cost(0.75).unwrap(), 0.25);
        assert!(matches!(compute_cost(1.5), Err(CaseError::Range(_))));
    }

    #[test]
    fn retrieve_edges() {
        let mut base = CaseBase::new(CaseBaseConfig::default()).unwrap();
        assert!(base.retrieve(&home()).unwrap().is_none());
        base.retain(home(), vec![2.0, 0.0], stats(5, 0.5), prov(1)).unwrap();
        let r = base.retrieve(&home()).unwrap().unwrap();
        assert_eq!(r.similarity, 1.0);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.case.solution, vec![2.0, 0.0]);
        let far = problem("Evening-Weekend-Free", &["Office", "Paris"], 0, CognitiveClass::Call);
        assert!(base.retrieve(&far).unwrap().is_none());
    }

    #[test]
    fn retain_gates_and_revises() {
        let mut base = CaseBase::new(CaseBaseConfig::default()).unwrap();
        assert_eq!(
            base.retain(home(), vec![1.0], stats(4, 0.5), prov(1)).unwrap(),
            RetainOutcome::Skipped
        );
        base.retain(home(), vec![1.0], stats(5, 0.5), prov(1)).unwrap();
        assert_eq!(
            base.retain(home(), vec![3.0], stats(9, 0.7), prov(2)).unwrap(),
            RetainOutcome::Replaced
        );
        assert_eq!(base.len(), 1);
        assert_eq!(base.cases()[0].solution, vec![3.0]);
        assert!(base.retain(home(), vec![f64::NAN], stats(9, 0.7), prov(3)).is_err());
    }

    #[test]
    fn adapt_scales_and_never_overwrites() {
        let cat = ActionCatalog::with_size(2).unwrap();
        let key: SituationKey = "Morning-Weekday-Free|Home|g0|Navigate|0".parse().unwrap();
        let case = Case {
            problem: home(),
            solution: vec![2.0, 0.0],
            visits: 5,
            mean_reward: 0.5,
            provenance: prov(0),
        };
        let mut table = QTable::new(0.0);
        let full = RetrievalResult {
            case: case.clone(),
            similarity: 1.0,
            cost: 0.0,
        };
        assert!(adapt(&full, &key, &mut table, &cat));
        assert_eq!(table.row(&key, &cat), vec![2.0, 0.0]);

        let mut table = QTable::new(0.0);
        let half = RetrievalResult {
            case,
            similarity: 0.5,
            cost: 0.5,
        };
        assert!(adapt(&half, &key, &mut table, &cat));
        assert_eq!(table.get(&key, ActionId(0)), 1.0);

        let params = LearningParams::constant(0.5, 0.0, 1.0).unwrap();
        q_update(&mut table, &key, ActionId(1), 1.0, &key, &cat, &params).unwrap();
        let before = table.clone();
        assert!(!adapt(&full, &key, &mut table, &cat));
        assert_eq!(table, before);
    }

    fn random_problem(rng: &mut ChaCha8Rng) -> CaseProblem {
        const TIMES: [&str; 4] = [
            "Morning-Weekday-Free",
            "Morning-Weekday-InMeeting",
            "Afternoon-Weekend-Free",
            "Morning-Weekend-Free",
        ];
        const PLACES: [[&str; 2]; 4] = [
            ["Home", "Paris"],
            ["Office", "Paris"],
            ["Cafe", "Paris"],
            ["ClientSite", "Lyon"],
        ];
        const COGS: [CognitiveClass; 3] = [
            CognitiveClass::Navigate,
            CognitiveClass::Call,
            CognitiveClass::SendEmail,
        ];
        problem(
            TIMES[rng.gen_range(0..4)],
            &PLACES[rng.gen_range(0..4)],
            rng.gen_range(0..2),
            COGS[rng.gen_range(0..3)],
        )
    }

    #[test]
    fn eviction_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = CaseBaseConfig {
            max_size: 8,
            retain_min_visits: 1,
            ..CaseBaseConfig::default()
        };
        let mut base = CaseBase::new(config).unwrap();
        for step in 0..200u64 {
            let p = random_problem(&mut rng);
            let mean = (rng.gen_range(0..4) as f64) / 4.0;
            let before: Vec<Case> = base.cases().to_vec();
            let out = base
                .retain(p.clone(), vec![mean], stats(1, mean), prov(step))
                .unwrap();
            assert!(base.len() <= 8);
            if let RetainOutcome::Evicted(victim) = out {
                // candidates: old cases plus the new one; lowest reward, then oldest
                let mut all = before.clone();
                all.push(Case {
                    problem: p,
                    solution: vec![mean],
                    visits: 1,
                    mean_reward: mean,
                    provenance: prov(step),
                });
                let expected = all
                    .iter()
                    .min_by(|a, b| {
                        a.mean_reward
                            .total_cmp(&b.mean_reward)
                            .then(a.provenance.step.cmp(&b.provenance.step))
                    })
                    .unwrap();
                assert_eq!(*victim, *expected);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let mut base = CaseBase::new(CaseBaseConfig::default()).unwrap();
        base.retain(home(), vec![0.1 + 0.2, 1.0 / 3.0], stats(6, 0.25), prov(4)).unwrap();
        let mut buf = Vec::new();
        base.write_to(&mut buf).unwrap();
        let mut back = CaseBase::new(CaseBaseConfig::default()).unwrap();
        back.read_from(buf.as_slice()).unwrap();
        assert_eq!(back.cases(), base.cases());
        let mut bad = CaseBase::new(CaseBaseConfig::default()).unwrap();
        assert!(matches!(
            bad.read_from("x\t1\n".as_bytes()),
            Err(CaseError::Parse { line: 1, .. })
        ));
    }

    fn arb_problem() -> impl Strategy<Value = CaseProblem> {
        (0u64..u64::MAX).prop_map(|s| random_problem(&mut ChaCha8Rng::seed_from_u64(s)))
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric_reflexive_bounded(a in arb_problem(), b in arb_problem()) {
            let w = FeatureWeights { time: 0.4, place: 0.3, group: 0.2, cognitive: 0.1 };
            let ab = case_similarity(&a, &b, &w).unwrap();
            prop_assert_eq!(ab, case_similarity(&b, &a, &w).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(case_similarity(&a, &a, &w).unwrap(), 1.0);
            prop_assert_eq!(compute_cost(ab).unwrap() + ab, 1.0);
        }
    }
}
