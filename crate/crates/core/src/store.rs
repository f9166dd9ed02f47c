//! Four-part database: users, devices, history (actions and events) and
//! preferences, persisted as tab-separated text files.
//!
//! Histories and the raw preference stream are append-only. Preference
//! aggregates are derived from the raw stream and never persisted separately.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::agent::{branch_label, parse_branch_label, StepRecord};
use crate::context::{CalendarEntry, CognitiveAction, Geo, RawEvent, SituationKey};
use crate::ids::{ActionId, GroupId, UserId};

pub const SCHEMA_VERSION: u32 = 1;

pub const USERS_FILE: &str = "users.tsv";
pub const DEVICES_FILE: &str = "devices.tsv";
pub const ACTIONS_FILE: &str = "history_actions.tsv";
pub const EVENTS_FILE: &str = "history_events.tsv";
pub const PREFERENCES_FILE: &str = "preferences.tsv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("duplicate {what} {id}")]
    Duplicate { what: &'static str, id: String },
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("{stream} history of user {user}: step {got} after step {last}")]
    Ordering {
        stream: &'static str,
        user: UserId,
        last: u64,
        got: u64,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{file} line {line}: {message}")]
    Parse {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user: UserId,
    pub login: String,
    pub group: GroupId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Capability {
    Display,
    Gps,
    Calendar,
    Call,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Display => "Display",
            Capability::Gps => "GPS",
            Capability::Calendar => "Calendar",
            Capability::Call => "Call",
        })
    }
}

impl FromStr for Capability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Display" => Capability::Display,
            "GPS" => Capability::Gps,
            "Calendar" => Capability::Calendar,
            "Call" => Capability::Call,
            _ => return Err(format!("unknown capability {s:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRecord {
    pub device_id: String,
    pub user: UserId,
    pub capabilities: BTreeSet<Capability>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HistoryEntry {
    Action { user: UserId, record: StepRecord },
    Event { step: u64, event: RawEvent },
}

impl HistoryEntry {
    pub fn step(&self) -> u64 {
        match self {
            HistoryEntry::Action { record, .. } => record.step,
            HistoryEntry::Event { step, .. } => *step,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub user: UserId,
    pub situation: SituationKey,
    pub action: ActionId,
    pub reward: f64,
    pub step: u64,
}

/// Running aggregate per (user, situation, action).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PreferenceAggregate {
    pub count: u64,
    pub sum: f64,
}

impl PreferenceAggregate {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

pub type PreferenceKey = (UserId, SituationKey, ActionId);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Database {
    users: BTreeMap<UserId, UserRecord>,
    devices: BTreeMap<String, DeviceRecord>,
    actions: Vec<(UserId, StepRecord)>,
    events: Vec<(u64, RawEvent)>,
    preferences: Vec<PreferenceRecord>,
    aggregates: BTreeMap<PreferenceKey, PreferenceAggregate>,
    last_action_step: HashMap<UserId, u64>,
    last_event_step: HashMap<UserId, u64>,
}

fn check_text(field: &str, value: &str) -> Result<(), StoreError> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(StoreError::InvalidRecord(format!(
            "{field} must be non-empty and free of tabs and newlines: {value:?}"
        )));
    }
    Ok(())
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_user(&mut self, record: UserRecord) -> Result<(), StoreError> {
        check_text("login", &record.login)?;
        if self.users.contains_key(&record.user) {
            return Err(StoreError::Duplicate {
                what: "user",
                id: record.user.to_string(),
            });
        }
        self.users.insert(record.user, record);
        Ok(())
    }

    pub fn add_device(&mut self, record: DeviceRecord) -> Result<(), StoreError> {
        check_text("device id", &record.device_id)?;
        if !self.users.contains_key(&record.user) {
            return Err(StoreError::UnknownUser(record.user));
        }
        if self.devices.contains_key(&record.device_id) {
            return Err(StoreError::Duplicate {
                what: "device",
                id: record.device_id,
            });
        }
        self.devices.insert(record.device_id.clone(), record);
        Ok(())
    }

    /// Steps must be non-decreasing per user.
    pub fn append_action_history(
        &mut self,
        user: UserId,
        record: StepRecord,
    ) -> Result<(), StoreError> {
        if !record.reward.is_finite() {
            return Err(StoreError::InvalidRecord(format!(
                "reward {} is not finite",
                record.reward
            )));
        }
        check_order(&mut self.last_action_step, "action", user, record.step)?;
        self.actions.push((user, record));
        Ok(())
    }

    /// Steps must be non-decreasing per user.
    pub fn append_event_history(&mut self, step: u64, event: RawEvent) -> Result<(), StoreError> {
        event
            .validate()
            .map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        if let Some(c) = &event.calendar {
            check_text("calendar label", &c.label)?;
            if c.label.contains(';') {
                return Err(StoreError::InvalidRecord(format!(
                    "calendar label {:?} contains ';'",
                    c.label
                )));
            }
        }
        check_order(&mut self.last_event_step, "event", event.user, step)?;
        self.events.push((step, event));
        Ok(())
    }

    /// Appends the raw record and folds it into the running aggregate.
    pub fn upsert_preferences(&mut self, record: PreferenceRecord) -> Result<(), StoreError> {
        if !(0.0..=1.0).contains(&record.reward) {
            return Err(StoreError::InvalidRecord(format!(
                "reward {} outside [0, 1]",
                record.reward
            )));
        }
        let agg = self
            .aggregates
            .entry((record.user, record.situation.clone(), record.action))
            .or_default();
        agg.count += 1;
        agg.sum += record.reward;
        self.preferences.push(record);
        Ok(())
    }

    pub fn users(&self) -> impl Iterator<Item = &UserRecord> {
        self.users.values()
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    pub fn action_history(&self) -> &[(UserId, StepRecord)] {
        &self.actions
    }

    pub fn event_history(&self) -> &[(u64, RawEvent)] {
        &self.events
    }

    /// Both histories merged by step; actions before events at equal steps.
    pub fn history(&self) -> Vec<HistoryEntry> {
        let mut out: Vec<HistoryEntry> = self
            .actions
            .iter()
            .map(|(user, record)| HistoryEntry::Action {
                user: *user,
                record: record.clone(),
            })
            .chain(self.events.iter().map(|(step, event)| HistoryEntry::Event {
                step: *step,
                event: event.clone(),
            }))
            .collect();
        out.sort_by_key(|e| (e.step(), matches!(e, HistoryEntry::Event { .. })));
        out
    }

    pub fn preferences(&self) -> &[PreferenceRecord] {
        &self.preferences
    }

    pub fn aggregate(
        &self,
        user: UserId,
        situation: &SituationKey,
        action: ActionId,
    ) -> Option<PreferenceAggregate> {
        self.aggregates
            .get(&(user, situation.clone(), action))
            .copied()
    }

    pub fn aggregates(&self) -> &BTreeMap<PreferenceKey, PreferenceAggregate> {
        &self.aggregates
    }

    /// Writes the five files into `dir`, creating it if needed.
    pub fn snapshot(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_file(dir, USERS_FILE, "user_id\tlogin\tgroup", self.users.values(), |u| {
            format!("{}\t{}\t{}", u.user, u.login, u.group)
        })?;
        write_file(
            dir,
            DEVICES_FILE,
            "device_id\tuser_id\tcapabilities",
            self.devices.values(),
            |d| {
                let caps: Vec<String> = d.capabilities.iter().map(|c| c.to_string()).collect();
                let caps = if caps.is_empty() {
                    "-".to_string()
                } else {
                    caps.join(",")
                };
                format!("{}\t{}\t{}", d.device_id, d.user, caps)
            },
        )?;
        write_file(
            dir,
            ACTIONS_FILE,
            "user_id\tstep\tsituation_key\taction\tbranch\treward\tnext_situation_key",
            self.actions.iter(),
            |(user, r)| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    user,
                    r.step,
                    r.situation,
                    r.action,
                    branch_label(r.branch, r.case_bootstrapped),
                    r.reward,
                    r.next_situation
                )
            },
        )?;
        write_file(
            dir,
            EVENTS_FILE,
            "step\tuser_id\ttimestamp\tgeo\tcognitive\tcalendar",
            self.events.iter(),
            |(step, e)| format_event(*step, e),
        )?;
        write_file(
            dir,
            PREFERENCES_FILE,
            "user_id\tsituation_key\taction\treward\tstep",
            self.preferences.iter(),
            |p| {
                format!(
                    "{}\t{}\t{}\t{}\t{}",
                    p.user, p.situation, p.action, p.reward, p.step
                )
            },
        )?;
        Ok(())
    }

    /// Loads a snapshot. Any malformed line fails the whole load.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let mut db = Database::new();
        for (line, f) in read_file(dir, USERS_FILE, "user_id\tlogin\tgroup", 3)? {
            let record = UserRecord {
                user: parse_field(USERS_FILE, line, &f[0])?,
                login: f[1].to_string(),
                group: parse_field(USERS_FILE, line, &f[2])?,
            };
            db.add_user(record).map_err(|e| at(USERS_FILE, line, e))?;
        }
        for (line, f) in read_file(dir, DEVICES_FILE, "device_id\tuser_id\tcapabilities", 3)? {
            let capabilities = if f[2] == "-" {
                BTreeSet::new()
            } else {
                f[2].split(',')
                    .map(|c| parse_field(DEVICES_FILE, line, c))
                    .collect::<Result<_, _>>()?
            };
            let record = DeviceRecord {
                device_id: f[0].to_string(),
                user: parse_field(DEVICES_FILE, line, &f[1])?,
                capabilities,
            };
            db.add_device(record).map_err(|e| at(DEVICES_FILE, line, e))?;
        }
        for (line, f) in read_file(
            dir,
            ACTIONS_FILE,
            "user_id\tstep\tsituation_key\taction\tbranch\treward\tnext_situation_key",
            7,
        )? {
            let (branch, case_bootstrapped) =
                parse_branch_label(&f[4]).map_err(|m| parse_error(ACTIONS_FILE, line, m))?;
            let record = StepRecord {
                step: parse_field(ACTIONS_FILE, line, &f[1])?,
                situation: parse_field(ACTIONS_FILE, line, &f[2])?,
                action: ActionId(parse_field(ACTIONS_FILE, line, &f[3])?),
                branch,
                case_bootstrapped,
                reward: parse_field(ACTIONS_FILE, line, &f[5])?,
                next_situation: parse_field(ACTIONS_FILE, line, &f[6])?,
            };
            let user = parse_field(ACTIONS_FILE, line, &f[0])?;
            db.append_action_history(user, record)
                .map_err(|e| at(ACTIONS_FILE, line, e))?;
        }
        for (line, f) in read_file(
            dir,
            EVENTS_FILE,
            "step\tuser_id\ttimestamp\tgeo\tcognitive\tcalendar",
            6,
        )? {
            let (step, event) = parse_event(&f).map_err(|m| parse_error(EVENTS_FILE, line, m))?;
            db.append_event_history(step, event)
                .map_err(|e| at(EVENTS_FILE, line, e))?;
        }
        for (line, f) in read_file(
            dir,
            PREFERENCES_FILE,
            "user_id\tsituation_key\taction\treward\tstep",
            5,
        )? {
            let record = PreferenceRecord {
                user: parse_field(PREFERENCES_FILE, line, &f[0])?,
                situation: parse_field(PREFERENCES_FILE, line, &f[1])?,
                action: ActionId(parse_field(PREFERENCES_FILE, line, &f[2])?),
                reward: parse_field(PREFERENCES_FILE, line, &f[3])?,
                step: parse_field(PREFERENCES_FILE, line, &f[4])?,
            };
            db.upsert_preferences(record)
                .map_err(|e| at(PREFERENCES_FILE, line, e))?;
        }
        Ok(db)
    }
}

fn check_order(
    last: &mut HashMap<UserId, u64>,
    stream: &'static str,
    user: UserId,
    step: u64,
) -> Result<(), StoreError> {
    if let Some(&prev) = last.get(&user) {
        if step < prev {
            return Err(StoreError::Ordering {
                stream,
                user,
                last: prev,
                got: step,
            });
        }
    }
    last.insert(user, step);
    Ok(())
}

fn header(file: &str, columns: &str) -> String {
    format!("# hyql-store v{SCHEMA_VERSION} {file}: {}", columns.replace('\t', " "))
}

fn write_file<T>(
    dir: &Path,
    file: &'static str,
    columns: &str,
    rows: impl Iterator<Item = T>,
    fmt_row: impl Fn(T) -> String,
) -> Result<(), StoreError> {
    let mut out = header(file, columns);
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    let tmp = dir.join(format!(".{file}.tmp"));
    fs::write(&tmp, out)?;
    fs::rename(tmp, dir.join(file))?;
    Ok(())
}

fn read_file(
    dir: &Path,
    file: &'static str,
    columns: &str,
    n_fields: usize,
) -> Result<Vec<(usize, Vec<String>)>, StoreError> {
    let text = fs::read_to_string(dir.join(file))?;
    let mut lines = text.split('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h == header(file, columns) => {}
        _ => return Err(parse_error(file, 1, "missing or unsupported schema header")),
    }
    if !text.ends_with('\n') {
        return Err(parse_error(file, text.lines().count(), "truncated line"));
    }
    let mut rows = Vec::new();
    for (i, l) in lines {
        if l.is_empty() {
            continue;
        }
        let fields: Vec<String> = l.split('\t').map(str::to_string).collect();
        if fields.len() != n_fields {
            return Err(parse_error(
                file,
                i + 1,
                format!("expected {n_fields} fields, found {}", fields.len()),
            ));
        }
        rows.push((i + 1, fields));
    }
    Ok(rows)
}

fn parse_error(file: &'static str, line: usize, message: impl Into<String>) -> StoreError {
    StoreError::Parse {
        file,
        line,
        message: message.into(),
    }
}

fn at(file: &'static str, line: usize, e: StoreError) -> StoreError {
    parse_error(file, line, e.to_string())
}

fn parse_field<T: FromStr>(file: &'static str, line: usize, s: &str) -> Result<T, StoreError>
where
    T::Err: fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| parse_error(file, line, format!("{s:?}: {e}")))
}

fn format_event(step: u64, e: &RawEvent) -> String {
    let geo = e
        .geo
        .map(|g| format!("{},{}", g.lat, g.lon))
        .unwrap_or_else(|| "-".into());
    let cognitive = match e.cognitive {
        Some(CognitiveAction::Navigate(a)) => format!("Navigate:{a}"),
        Some(c) => c.class().to_string(),
        None => "-".into(),
    };
    let calendar = e
        .calendar
        .as_ref()
        .map(|c| format!("{};{};{}", c.label, c.start, c.end))
        .unwrap_or_else(|| "-".into());
    format!(
        "{step}\t{}\t{}\t{geo}\t{cognitive}\t{calendar}",
        e.user, e.timestamp
    )
}

fn parse_event(f: &[String]) -> Result<(u64, RawEvent), String> {
    let num = |s: &str| s.parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
    let float = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let geo = match f[3].as_str() {
        "-" => None,
        g => {
            let (lat, lon) = g.split_once(',').ok_or("geo must be lat,lon")?;
            Some(Geo::new(float(lat)?, float(lon)?))
        }
    };
    let cognitive = match f[4].as_str() {
        "-" => None,
        "SendEmail" => Some(CognitiveAction::SendEmail),
        "Call" => Some(CognitiveAction::Call),
        "OpenFolder" => Some(CognitiveAction::OpenFolder),
        c => match c.strip_prefix("Navigate:") {
            Some(a) => Some(CognitiveAction::Navigate(ActionId(
                a.parse().map_err(|e| format!("{a:?}: {e}"))?,
            ))),
            None => return Err(format!("unknown cognitive action {c:?}")),
        },
    };
    let calendar = match f[5].as_str() {
        "-" => None,
        c => {
            let parts: Vec<&str> = c.split(';').collect();
            if parts.len() != 3 {
                return Err(format!("calendar entry {c:?} must be label;start;end"));
            }
            Some(CalendarEntry {
                label: parts[0].to_string(),
                start: num(parts[1])?,
                end: num(parts[2])?,
            })
        }
    };
    Ok((
        num(&f[0])?,
        RawEvent {
            user: UserId(num(&f[1])? as u32),
            timestamp: num(&f[2])?,
            geo,
            cognitive,
            calendar,
        },
    ))
}
