//! Synthetic ubiquitous environment.
//!
//! Users belong to social groups and follow a weighted routine of
//! (time bucket, place, cognitive class) triples. Each (user, situation) has a
//! ground-truth relevance row mixing a group prototype with a personal draw;
//! executing an item yields a Bernoulli reward with that probability.
//!
//! All randomness comes from separate ChaCha streams derived from one seed:
//! one event stream and one reward stream per user, plus one for drift. Two
//! agents facing the same seed therefore see the same events and, for the
//! same action, the same reward.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{EnvError, Environment, Outcome};
use crate::context::{
    CalendarEntry, CalendarState, CognitiveAction, CognitiveClass, ContextError, ContextModel,
    DayClass, Geo, RawEvent, SituationKey, TimeBucket, UserContext,
};
use crate::ids::{ActionId, GroupId, UserId};
use crate::qlearning::ActionCatalog;

/// 2024-01-01 00:00:00, a Monday. Simulated day 0.
pub const EPOCH_MONDAY: u64 = 1_704_067_200;
const DAY: u64 = 86_400;

// relevance row generator
const BASE_MAX: f64 = 0.1;
const BEST_LOW: f64 = 0.75;
const SECOND_LOW: f64 = 0.45;
const PEAK_SPREAD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    Parameter(String),
    #[error("no relevance for user {user} in situation {situation}")]
    Coverage { user: UserId, situation: String },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error(transparent)]
    Context(#[from] ContextError),
}

impl From<SimError> for EnvError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Coverage { .. } => EnvError::Coverage(e.to_string()),
            other => EnvError::Refused(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutineEntry {
    pub time: TimeBucket,
    pub place: String,
    pub cognitive: CognitiveClass,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user: UserId,
    pub group: GroupId,
    pub affinity: f64,
    /// Weights sum to 1.
    pub routine: Vec<RoutineEntry>,
}

impl UserProfile {
    pub fn context(&self) -> UserContext {
        UserContext {
            group: self.group,
            prior_cognitive: CognitiveClass::Unknown,
        }
    }

    pub fn situation(&self, entry: &RoutineEntry) -> SituationKey {
        SituationKey {
            time: entry.time,
            place: entry.place.clone(),
            group: self.group,
            cognitive: entry.cognitive,
            granularity: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftTarget {
    User(UserId),
    Group(GroupId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftKind {
    SwapTopItems,
    ResampleRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftOp {
    pub step: u64,
    pub target: DriftTarget,
    pub kind: DriftKind,
    /// Only this level-0 situation; all of the target's rows when absent.
    #[serde(default)]
    pub situation: Option<SituationKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub n_groups: usize,
    pub n_items: usize,
    pub affinity: f64,
    pub routine: Vec<RoutineEntry>,
    #[serde(default = "default_day_length")]
    pub day_length: u64,
}

fn default_day_length() -> u64 {
    50
}

impl PopulationConfig {
    pub fn validate(&self, context: &ContextModel) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Parameter(m));
        if self.n_users == 0 || self.n_items == 0 || self.n_groups == 0 {
            return bad("n_users, n_groups and n_items must all be at least 1".into());
        }
        if self.n_groups > self.n_users {
            return bad(format!(
                "{} groups cannot all be populated by {} users",
                self.n_groups, self.n_users
            ));
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return bad(format!("affinity {} outside [0, 1]", self.affinity));
        }
        if self.day_length == 0 {
            return bad("day_length must be at least 1".into());
        }
        if self.routine.is_empty() {
            return bad("routine is empty".into());
        }
        let total: f64 = self.routine.iter().map(|r| r.weight).sum();
        if self.routine.iter().any(|r| r.weight.is_nan() || r.weight <= 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("routine weights must be positive and sum to 1, got {total}"));
        }
        for r in &self.routine {
            let gaz = context.gazetteer();
            let node = gaz
                .node(&r.place)
                .ok_or_else(|| SimError::Parameter(format!("unknown place {:?}", r.place)))?;
            if gaz.leaves().all(|l| l.name != node.name) {
                return bad(format!("routine place {:?} is not a leaf", r.place));
            }
            // every corner of the sampling box must resolve back to the place
            let inner = inner_box(node.region);
            for (lat, lon) in [
                (inner.0, inner.2),
                (inner.0, inner.3),
                (inner.1, inner.2),
                (inner.1, inner.3),
            ] {
                if context.abstract_location(Geo::new(lat, lon))?.name != r.place {
                    return bad(format!("region of {:?} overlaps another place", r.place));
                }
            }
        }
        Ok(())
    }
}

/// Middle half of a region: (lat_min, lat_max, lon_min, lon_max).
fn inner_box(r: crate::context::Region) -> (f64, f64, f64, f64) {
    let dl = r.lat_max - r.lat_min;
    let dn = r.lon_max - r.lon_min;
    (
        r.lat_min + 0.25 * dl,
        r.lat_min + 0.75 * dl,
        r.lon_min + 0.25 * dn,
        r.lon_min + 0.75 * dn,
    )
}

#[derive(Debug, Clone)]
pub struct WorldModel {
    users: Vec<UserProfile>,
    catalog: Arc<ActionCatalog>,
    context: Arc<ContextModel>,
    relevance: HashMap<(UserId, SituationKey), Vec<f64>>,
    drift_schedule: Vec<DriftOp>,
    day_length: u64,
    seed: u64,
}

/// Low base values everywhere, one strong item and one moderate item.
fn draw_row<R: Rng + ?Sized>(n_items: usize, rng: &mut R) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n_items)
        .map(|_| {
            let u: f64 = rng.gen();
            BASE_MAX * u * u
        })
        .collect();
    let best = rng.gen_range(0..n_items);
    row[best] = BEST_LOW + PEAK_SPREAD * rng.gen::<f64>();
    if n_items > 1 {
        let mut second = rng.gen_range(0..n_items - 1);
        if second >= best {
            second += 1;
        }
        row[second] = SECOND_LOW + PEAK_SPREAD * rng.gen::<f64>();
    }
    row
}

fn mix(affinity: f64, proto: &[f64], personal: &[f64]) -> Vec<f64> {
    proto
        .iter()
        .zip(personal)
        .map(|(p, q)| (affinity * p + (1.0 - affinity) * q).clamp(0.0, 1.0))
        .collect()
}

/// Builds the population. Users are assigned to groups round-robin
/// (`user % n_groups`); a prototype row is drawn per (group, routine entry),
/// then a personal row per (user, routine entry).
pub fn build_population<R: Rng + ?Sized>(
    config: &PopulationConfig,
    context: Arc<ContextModel>,
    rng: &mut R,
) -> Result<WorldModel, SimError> {
    config.validate(&context)?;
    let catalog = ActionCatalog::with_size(config.n_items)
        .map_err(|e| SimError::Parameter(e.to_string()))?;
    let mut protos = Vec::with_capacity(config.n_groups);
    for _ in 0..config.n_groups {
        let rows: Vec<Vec<f64>> = config
            .routine
            .iter()
            .map(|_| draw_row(config.n_items, rng))
            .collect();
        protos.push(rows);
    }
    let mut users = Vec::with_capacity(config.n_users);
    let mut relevance = HashMap::new();
    for i in 0..config.n_users {
        let g = i % config.n_groups;
        let profile = UserProfile {
            user: UserId(i as u32),
            group: GroupId(g as u32),
            affinity: config.affinity,
            routine: config.routine.clone(),
        };
        for (r, entry) in config.routine.iter().enumerate() {
            let personal = draw_row(config.n_items, rng);
            relevance.insert(
                (profile.user, profile.situation(entry)),
                mix(config.affinity, &protos[g][r], &personal),
            );
        }
        users.push(profile);
    }
    Ok(WorldModel {
        users,
        catalog: Arc::new(catalog),
        context,
        relevance,
        drift_schedule: Vec::new(),
        day_length: config.day_length,
        seed: 0,
    })
}

impl WorldModel {
    /// Builds the world for `seed` from its dedicated stream.
    pub fn generate(
        config: &PopulationConfig,
        context: Arc<ContextModel>,
        drift_schedule: Vec<DriftOp>,
        seed: u64,
    ) -> Result<Self, SimError> {
        let mut rng = stream(seed, StreamKind::World, 0);
        let mut world = build_population(config, context, &mut rng)?;
        world.seed = seed;
        world.set_drift_schedule(drift_schedule)?;
        Ok(world)
    }

    pub fn set_drift_schedule(&mut self, mut ops: Vec<DriftOp>) -> Result<(), SimError> {
        for op in &ops {
            match op.target {
                DriftTarget::User(u) => {
                    self.profile(u)?;
                }
                DriftTarget::Group(g) => {
                    if !self.users.iter().any(|p| p.group == g) {
                        return Err(SimError::Parameter(format!("drift targets empty group {g}")));
                    }
                }
            }
        }
        ops.sort_by_key(|op| op.step);
        self.drift_schedule = ops;
        Ok(())
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn profile(&self, user: UserId) -> Result<&UserProfile, SimError> {
        self.users
            .get(user.0 as usize)
            .filter(|p| p.user == user)
            .ok_or(SimError::UnknownUser(user))
    }

    pub fn catalog(&self) -> &Arc<ActionCatalog> {
        &self.catalog
    }

    pub fn context(&self) -> &Arc<ContextModel> {
        &self.context
    }

    pub fn drift_schedule(&self) -> &[DriftOp] {
        &self.drift_schedule
    }

    pub fn day_length(&self) -> u64 {
        self.day_length
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn relevance(&self, user: UserId, s: &SituationKey) -> Result<&[f64], SimError> {
        self.relevance
            .get(&(user, level0(s)))
            .map(|v| v.as_slice())
            .ok_or_else(|| SimError::Coverage {
                user,
                situation: s.to_string(),
            })
    }

    /// Overwrites a relevance row; values must lie in [0, 1].
    pub fn set_relevance(
        &mut self,
        user: UserId,
        s: &SituationKey,
        row: Vec<f64>,
    ) -> Result<(), SimError> {
        if row.len() != self.catalog.len() || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SimError::Parameter(format!(
                "relevance row must hold {} values in [0, 1]",
                self.catalog.len()
            )));
        }
        let key = (user, level0(s));
        match self.relevance.get_mut(&key) {
            Some(slot) => {
                *slot = row;
                Ok(())
            }
            None => Err(SimError::Coverage {
                user,
                situation: s.to_string(),
            }),
        }
    }

    /// Expected per-step reward of the policy that always picks the best item:
    /// routine-weighted mean of the row maxima.
    pub fn optimal_expected_reward(&self, user: UserId) -> Result<f64, SimError> {
        let p = self.profile(user)?;
        let mut total = 0.0;
        for entry in &p.routine {
            let row = self.relevance(user, &p.situation(entry))?;
            total += entry.weight * row.iter().cloned().fold(0.0, f64::max);
        }
        Ok(total)
    }

    fn targeted_rows(&self, op: &DriftOp) -> Vec<(UserId, SituationKey)> {
        let mut keys: Vec<(UserId, SituationKey)> = self
            .relevance
            .keys()
            .filter(|(u, s)| {
                let hit = match op.target {
                    DriftTarget::User(t) => *u == t,
                    DriftTarget::Group(g) => s.group == g,
                };
                hit && op.situation.as_ref().is_none_or(|scope| scope.same_content(s))
            })
            .cloned()
            .collect();
        keys.sort();
        keys
    }
}

fn level0(s: &SituationKey) -> SituationKey {
    if s.granularity == 0 {
        s.clone()
    } else {
        SituationKey {
            granularity: 0,
            ..s.clone()
        }
    }
}

/// Exchanges the best and worst entries (ties by lowest index).
pub fn swap_top_items(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
        if *v < row[worst] {
            worst = i;
        }
    }
    row.swap(best, worst);
}

/// Executes every op scheduled exactly at `step`. Returns the ops applied.
pub fn apply_drift<R: Rng + ?Sized>(
    world: &mut WorldModel,
    step: u64,
    rng: &mut R,
) -> Vec<DriftOp> {
    let due: Vec<DriftOp> = world
        .drift_schedule
        .iter()
        .filter(|op| op.step == step)
        .cloned()
        .collect();
    for op in &due {
        for key in world.targeted_rows(op) {
            let n = world.catalog.len();
            let row = world.relevance.get_mut(&key).expect("targeted row exists");
            match op.kind {
                DriftKind::SwapTopItems => swap_top_items(row),
                DriftKind::ResampleRow => *row = draw_row(n, rng),
            }
        }
    }
    due
}

/// The world right after every drift op scheduled at or before `step`, as a
/// [`SimEnv`] seeded with `env_seed` would have applied them.
pub fn world_after_drift(world: &WorldModel, env_seed: u64, step: u64) -> WorldModel {
    let mut w = world.clone();
    let mut rng = stream(env_seed, StreamKind::Drift, 0);
    let mut due: Vec<u64> = w
        .drift_schedule
        .iter()
        .map(|op| op.step)
        .filter(|s| *s <= step)
        .collect();
    due.dedup();
    for s in due {
        apply_drift(&mut w, s, &mut rng);
    }
    w
}

/// Samples the next event for `user` at their `step`. Returns the event and
/// the level-0 situation it was generated from.
pub fn gen_event<R: Rng + ?Sized>(
    world: &WorldModel,
    user: UserId,
    step: u64,
    rng: &mut R,
) -> Result<(RawEvent, SituationKey), SimError> {
    let profile = world.profile(user)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut entry = profile.routine.last().expect("validated non-empty routine");
    for e in &profile.routine {
        acc += e.weight;
        if u < acc {
            entry = e;
            break;
        }
    }

    let day = step / world.day_length;
    let in_day = step % world.day_length;
    let mut date = EPOCH_MONDAY / DAY + day;
    let dow = day % 7;
    match entry.time.day_class {
        DayClass::Weekday if dow >= 5 => date -= dow - 4,
        DayClass::Weekend if dow < 5 => date += 5 - dow,
        _ => {}
    }
    let hours = entry.time.part_of_day.hours();
    let hour = hours[(in_day as usize * hours.len()) / world.day_length as usize];
    let minute: u64 = rng.gen_range(0..60);
    let timestamp = date * DAY + hour * 3600 + minute * 60;
    let calendar = match entry.time.calendar_state {
        CalendarState::InMeeting => {
            let start = timestamp - timestamp % 3600;
            Some(CalendarEntry {
                label: "meeting".into(),
                start,
                end: start + 3600,
            })
        }
        CalendarState::Free => None,
    };

    let node = world
        .context
        .gazetteer()
        .node(&entry.place)
        .expect("validated routine place");
    let (lat0, lat1, lon0, lon1) = inner_box(node.region);
    let geo = Geo::new(
        lat0 + (lat1 - lat0) * rng.gen::<f64>(),
        lon0 + (lon1 - lon0) * rng.gen::<f64>(),
    );
    let cognitive = match entry.cognitive {
        CognitiveClass::Navigate => Some(CognitiveAction::Navigate(ActionId(
            rng.gen_range(0..world.catalog.len() as u32),
        ))),
        CognitiveClass::SendEmail => Some(CognitiveAction::SendEmail),
        CognitiveClass::Call => Some(CognitiveAction::Call),
        CognitiveClass::OpenFolder => Some(CognitiveAction::OpenFolder),
        CognitiveClass::Unknown => None,
    };
    let event = RawEvent {
        user,
        timestamp,
        geo: Some(geo),
        cognitive,
        calendar,
    };
    Ok((event, profile.situation(entry)))
}

/// Bernoulli reward with success probability `relevance[user, s][a]`.
pub fn reward<R: Rng + ?Sized>(
    world: &WorldModel,
    user: UserId,
    s: &SituationKey,
    a: ActionId,
    rng: &mut R,
) -> Result<f64, SimError> {
    let row = world.relevance(user, s)?;
    let p = *row
        .get(a.index())
        .ok_or_else(|| SimError::Parameter(format!("action {a} outside the catalog")))?;
    let u: f64 = rng.gen();
    Ok(if u < p { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy)]
enum StreamKind {
    World = 0,
    Drift = 1,
    Events = 2,
    Rewards = 3,
}

fn stream(seed: u64, kind: StreamKind, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind as u64) << 32) | index as u64);
    rng
}

#[derive(Debug, Clone)]
struct UserState {
    events: ChaCha8Rng,
    rewards: ChaCha8Rng,
    step: u64,
    current: (RawEvent, SituationKey),
}

/// Stateful environment over a [`WorldModel`]. The drift clock counts every
/// executed step across all users.
#[derive(Debug, Clone)]
pub struct SimEnv {
    world: WorldModel,
    seed: u64,
    users: BTreeMap<UserId, UserState>,
    drift_rng: ChaCha8Rng,
    clock: u64,
    drift_log: Vec<(u64, DriftOp)>,
}

impl SimEnv {
    /// Streams are seeded from `seed`, which need not equal the world seed.
    pub fn new(world: WorldModel, seed: u64) -> Self {
        Self {
            world,
            seed,
            users: BTreeMap::new(),
            drift_rng: stream(seed, StreamKind::Drift, 0),
            clock: 0,
            drift_log: Vec::new(),
        }
    }

    pub fn world(&self) -> &WorldModel {
        &self.world
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn drift_log(&self) -> &[(u64, DriftOp)] {
        &self.drift_log
    }

    fn state(&mut self, user: UserId) -> Result<&mut UserState, SimError> {
        if !self.users.contains_key(&user) {
            self.world.profile(user)?;
            let mut events = stream(self.seed, StreamKind::Events, user.0);
            let current = gen_event(&self.world, user, 0, &mut events)?;
            self.users.insert(
                user,
                UserState {
                    events,
                    rewards: stream(self.seed, StreamKind::Rewards, user.0),
                    step: 0,
                    current,
                },
            );
        }
        Ok(self.users.get_mut(&user).expect("inserted above"))
    }

    /// The user's current level-0 situation.
    pub fn current_situation(&mut self, user: UserId) -> Result<SituationKey, SimError> {
        Ok(self.state(user)?.current.1.clone())
    }

    /// Applies drift due at the current clock, rewards `action` in the user's
    /// current situation and advances the user to their next event.
    pub fn env_step(&mut self, user: UserId, action: ActionId) -> Result<(f64, RawEvent), SimError> {
        if !self.world.catalog.contains(action) {
            return Err(SimError::Parameter(format!("action {action} outside the catalog")));
        }
        self.state(user)?;
        let clock = self.clock;
        for op in apply_drift(&mut self.world, clock, &mut self.drift_rng) {
            self.drift_log.push((clock, op));
        }
        let world = &self.world;
        let st = self.users.get_mut(&user).expect("state created above");
        let r = reward(world, user, &st.current.1, action, &mut st.rewards)?;
        let next = gen_event(world, user, st.step + 1, &mut st.events)?;
        st.step += 1;
        st.current = next;
        self.clock += 1;
        Ok((r, st.current.0.clone()))
    }
}

impl Environment for SimEnv {
    fn observe(&mut self, user: UserId) -> Result<RawEvent, EnvError> {
        Ok(self.state(user)?.current.0.clone())
    }

    fn execute(&mut self, user: UserId, action: ActionId) -> Result<Outcome, EnvError> {
        let (reward, next_event) = self.env_step(user, action)?;
        Ok(Outcome { reward, next_event })
    }
}
