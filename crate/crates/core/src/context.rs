//! Context dimensions, raw sensor events and the abstraction/aggregation
//! pipeline that turns an event into a discrete [`SituationKey`].
//!
//! Time is abstracted with fixed hour boundaries, location with a static
//! gazetteer (reverse geocoding by region containment, nearest centroid as
//! fallback). Aggregation lifts the place through the gazetteer hierarchy,
//! which yields one key per granularity level.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ActionId, GroupId, UserId};

/// Place name used when an event carries no geographic reading.
pub const UNKNOWN_PLACE: &str = "Unknown";

const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("gazetteer is empty")]
    EmptyGazetteer,
    #[error("invalid coordinates ({lat}, {lon})")]
    InvalidCoordinates { lat: f64, lon: f64 },
    #[error("granularity level {level} exceeds hierarchy depth {depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("gazetteer line {line}: {message}")]
    GazetteerParse { line: usize, message: String },
    #[error("invalid place hierarchy: {0}")]
    Hierarchy(String),
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("cannot parse {what} from {input:?}")]
    Parse { what: &'static str, input: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn parse_err(what: &'static str, input: &str) -> ContextError {
    ContextError::Parse {
        what,
        input: input.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartOfDay {
    Morning,
    Afternoon,
    Evening,
    Night,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DayClass {
    Weekday,
    Weekend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CalendarState {
    InMeeting,
    Free,
}

impl PartOfDay {
    pub fn from_hour(hour: u64) -> Self {
        match hour {
            6..=11 => PartOfDay::Morning,
            12..=17 => PartOfDay::Afternoon,
            18..=22 => PartOfDay::Evening,
            _ => PartOfDay::Night,
        }
    }

    /// Local hours covered by the bucket, in clock order starting at the
    /// bucket's first hour.
    pub fn hours(self) -> Vec<u64> {
        match self {
            PartOfDay::Morning => (6..12).collect(),
            PartOfDay::Afternoon => (12..18).collect(),
            PartOfDay::Evening => (18..23).collect(),
            PartOfDay::Night => std::iter::once(23).chain(0..6).collect(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PartOfDay::Morning => "Morning",
            PartOfDay::Afternoon => "Afternoon",
            PartOfDay::Evening => "Evening",
            PartOfDay::Night => "Night",
        }
    }
}

/// Temporal abstraction of a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeBucket {
    pub part_of_day: PartOfDay,
    pub day_class: DayClass,
    pub calendar_state: CalendarState,
}

/// Number of generalization levels of a [`TimeBucket`]: the full bucket,
/// bucket without calendar state, part of day only.
pub const TIME_LEVELS: usize = 3;

impl TimeBucket {
    pub fn new(part_of_day: PartOfDay, day_class: DayClass, calendar_state: CalendarState) -> Self {
        Self {
            part_of_day,
            day_class,
            calendar_state,
        }
    }

    /// Whether two buckets coincide once generalized `level` times.
    pub fn coincides_at(&self, other: &TimeBucket, level: usize) -> bool {
        match level {
            0 => self == other,
            1 => self.part_of_day == other.part_of_day && self.day_class == other.day_class,
            _ => self.part_of_day == other.part_of_day,
        }
    }
}

impl fmt::Display for TimeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let day = match self.day_class {
            DayClass::Weekday => "Weekday",
            DayClass::Weekend => "Weekend",
        };
        let cal = match self.calendar_state {
            CalendarState::InMeeting => "InMeeting",
            CalendarState::Free => "Free",
        };
        write!(f, "{}-{}-{}", self.part_of_day.name(), day, cal)
    }
}

impl FromStr for TimeBucket {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('-');
        let (Some(p), Some(d), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("time bucket", s));
        };
        let part_of_day = match p {
            "Morning" => PartOfDay::Morning,
            "Afternoon" => PartOfDay::Afternoon,
            "Evening" => PartOfDay::Evening,
            "Night" => PartOfDay::Night,
            _ => return Err(parse_err("time bucket", s)),
        };
        let day_class = match d {
            "Weekday" => DayClass::Weekday,
            "Weekend" => DayClass::Weekend,
            _ => return Err(parse_err("time bucket", s)),
        };
        let calendar_state = match c {
            "InMeeting" => CalendarState::InMeeting,
            "Free" => CalendarState::Free,
            _ => return Err(parse_err("time bucket", s)),
        };
        Ok(TimeBucket::new(part_of_day, day_class, calendar_state))
    }
}

impl Serialize for TimeBucket {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeBucket {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A calendar entry covering the half-open interval `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalendarEntry {
    pub label: String,
    pub start: u64,
    pub end: u64,
}

impl CalendarEntry {
    pub fn covers(&self, timestamp: u64) -> bool {
        self.start <= timestamp && timestamp < self.end
    }
}

/// Maps a timestamp (seconds since epoch, simulated local clock) to its bucket.
pub fn abstract_time(timestamp: u64, calendar: &[CalendarEntry]) -> TimeBucket {
    let days = timestamp / SECONDS_PER_DAY;
    let hour = (timestamp % SECONDS_PER_DAY) / 3600;
    // 1970-01-01 was a Thursday; Monday = 0.
    let weekday = (days + 3) % 7;
    let day_class = if weekday >= 5 {
        DayClass::Weekend
    } else {
        DayClass::Weekday
    };
    let calendar_state = if calendar.iter().any(|e| e.covers(timestamp)) {
        CalendarState::InMeeting
    } else {
        CalendarState::Free
    };
    TimeBucket::new(PartOfDay::from_hour(hour), day_class, calendar_state)
}

/// Day of week of a timestamp, Monday = 0.
pub fn weekday_of(timestamp: u64) -> u64 {
    (timestamp / SECONDS_PER_DAY + 3) % 7
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geo {
    pub lat: f64,
    pub lon: f64,
}

impl Geo {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CognitiveAction {
    Navigate(ActionId),
    SendEmail,
    Call,
    OpenFolder,
}

impl CognitiveAction {
    pub fn class(&self) -> CognitiveClass {
        match self {
            CognitiveAction::Navigate(_) => CognitiveClass::Navigate,
            CognitiveAction::SendEmail => CognitiveClass::SendEmail,
            CognitiveAction::Call => CognitiveClass::Call,
            CognitiveAction::OpenFolder => CognitiveClass::OpenFolder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CognitiveClass {
    Navigate,
    SendEmail,
    Call,
    OpenFolder,
    Unknown,
}

impl fmt::Display for CognitiveClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CognitiveClass::Navigate => "Navigate",
            CognitiveClass::SendEmail => "SendEmail",
            CognitiveClass::Call => "Call",
            CognitiveClass::OpenFolder => "OpenFolder",
            CognitiveClass::Unknown => "Unknown",
        };
        f.write_str(s)
    }
}

impl FromStr for CognitiveClass {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Navigate" => CognitiveClass::Navigate,
            "SendEmail" => CognitiveClass::SendEmail,
            "Call" => CognitiveClass::Call,
            "OpenFolder" => CognitiveClass::OpenFolder,
            "Unknown" => CognitiveClass::Unknown,
            _ => return Err(parse_err("cognitive class", s)),
        })
    }
}

/// One reading from the sensor module.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEvent {
    pub user: UserId,
    pub timestamp: u64,
    pub geo: Option<Geo>,
    pub cognitive: Option<CognitiveAction>,
    pub calendar: Option<CalendarEntry>,
}

impl RawEvent {
    pub fn validate(&self) -> Result<(), ContextError> {
        if self.geo.is_none() && self.cognitive.is_none() && self.calendar.is_none() {
            return Err(ContextError::InvalidEvent(
                "event carries no sensor reading".into(),
            ));
        }
        if let Some(g) = self.geo {
            if !g.is_valid() {
                return Err(ContextError::InvalidCoordinates {
                    lat: g.lat,
                    lon: g.lon,
                });
            }
        }
        if let Some(c) = &self.calendar {
            if c.end < c.start {
                return Err(ContextError::InvalidEvent(format!(
                    "calendar entry {:?} ends before it starts",
                    c.label
                )));
            }
        }
        Ok(())
    }

    pub fn calendar_entries(&self) -> &[CalendarEntry] {
        self.calendar.as_slice()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaceType {
    Home,
    Office,
    ClientSite,
    Transit,
    Other,
}

impl FromStr for PlaceType {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Home" => PlaceType::Home,
            "Office" => PlaceType::Office,
            "ClientSite" => PlaceType::ClientSite,
            "Transit" => PlaceType::Transit,
            "Other" => PlaceType::Other,
            _ => return Err(parse_err("place type", s)),
        })
    }
}

/// Axis-aligned bounding region, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    pub fn contains(&self, geo: Geo) -> bool {
        self.lat_min <= geo.lat
            && geo.lat <= self.lat_max
            && self.lon_min <= geo.lon
            && geo.lon <= self.lon_max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceNode {
    pub name: String,
    pub place_type: PlaceType,
    pub parent: Option<String>,
    pub region: Region,
    pub centroid: Geo,
}

impl PlaceNode {
    fn unknown() -> Self {
        PlaceNode {
            name: UNKNOWN_PLACE.to_string(),
            place_type: PlaceType::Other,
            parent: None,
            region: Region {
                lat_min: 0.0,
                lat_max: 0.0,
                lon_min: 0.0,
                lon_max: 0.0,
            },
            centroid: Geo::new(0.0, 0.0),
        }
    }
}

/// Static reverse-geocoding table organized as a single-rooted tree.
#[derive(Debug, Clone)]
pub struct Gazetteer {
    nodes: Vec<PlaceNode>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    node_depth: Vec<usize>,
    /// Leaf indices sorted by name.
    leaves: Vec<usize>,
    root: usize,
}

fn valid_place_name(name: &str) -> bool {
    !name.is_empty()
        && name != UNKNOWN_PLACE
        && !name
            .chars()
            .any(|c| matches!(c, '|' | ',' | '>' | '\t' | '\n' | '\r' | ';'))
}

impl Gazetteer {
    pub fn new(nodes: Vec<PlaceNode>) -> Result<Self, ContextError> {
        if nodes.is_empty() {
            return Err(ContextError::EmptyGazetteer);
        }
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if !valid_place_name(&n.name) {
                return Err(ContextError::Hierarchy(format!(
                    "invalid place name {:?}",
                    n.name
                )));
            }
            if index.insert(n.name.clone(), i).is_some() {
                return Err(ContextError::Hierarchy(format!(
                    "duplicate place {:?}",
                    n.name
                )));
            }
        }
        let mut parent = Vec::with_capacity(nodes.len());
        for n in &nodes {
            match &n.parent {
                None => parent.push(None),
                Some(p) => {
                    let pi = *index.get(p).ok_or_else(|| {
                        ContextError::Hierarchy(format!("{:?} has unknown parent {p:?}", n.name))
                    })?;
                    parent.push(Some(pi));
                }
            }
        }
        let roots: Vec<usize> = (0..nodes.len()).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(ContextError::Hierarchy(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let mut node_depth = vec![0; nodes.len()];
        for (i, depth) in node_depth.iter_mut().enumerate() {
            let mut cur = i;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > nodes.len() {
                    return Err(ContextError::Hierarchy(format!(
                        "cycle through {:?}",
                        nodes[i].name
                    )));
                }
            }
            *depth = steps;
        }
        let has_child: HashSet<usize> = parent.iter().flatten().copied().collect();
        let mut leaves: Vec<usize> = (0..nodes.len()).filter(|i| !has_child.contains(i)).collect();
        leaves.sort_by(|&a, &b| nodes[a].name.cmp(&nodes[b].name));
        Ok(Gazetteer {
            nodes,
            index,
            parent,
            node_depth,
            leaves,
            root,
        })
    }

    /// Parses the line-delimited gazetteer format
    /// `name,type,parent,lat_min,lat_max,lon_min,lon_max,centroid_lat,centroid_lon`.
    /// An empty parent field marks the root; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ContextError> {
        let mut nodes = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 9 {
                return Err(ContextError::GazetteerParse {
                    line: line_no,
                    message: format!("expected 9 fields, found {}", fields.len()),
                });
            }
            let num = |idx: usize| -> Result<f64, ContextError> {
                fields[idx]
                    .parse::<f64>()
                    .map_err(|e| ContextError::GazetteerParse {
                        line: line_no,
                        message: format!("field {}: {e}", idx + 1),
                    })
            };
            let place_type = fields[1]
                .parse::<PlaceType>()
                .map_err(|e| ContextError::GazetteerParse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let region = Region {
                lat_min: num(3)?,
                lat_max: num(4)?,
                lon_min: num(5)?,
                lon_max: num(6)?,
            };
            let centroid = Geo::new(num(7)?, num(8)?);
            if !centroid.is_valid()
                || !Geo::new(region.lat_min, region.lon_min).is_valid()
                || !Geo::new(region.lat_max, region.lon_max).is_valid()
            {
                return Err(ContextError::GazetteerParse {
                    line: line_no,
                    message: "coordinates out of range".into(),
                });
            }
            nodes.push(PlaceNode {
                name: fields[0].to_string(),
                place_type,
                parent: (!fields[2].is_empty()).then(|| fields[2].to_string()),
                region,
                centroid,
            });
        }
        Gazetteer::new(nodes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContextError> {
        Gazetteer::parse(&std::fs::read_to_string(path)?)
    }

    pub fn node(&self, name: &str) -> Option<&PlaceNode> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    pub fn root(&self) -> &PlaceNode {
        &self.nodes[self.root]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &PlaceNode> {
        self.leaves.iter().map(|&i| &self.nodes[i])
    }

    /// Distance (in edges) from the root of the deepest leaf.
    pub fn max_leaf_depth(&self) -> usize {
        self.leaves
            .iter()
            .map(|&i| self.node_depth[i])
            .max()
            .unwrap_or(0)
    }

    /// Reverse geocoding: the leaf whose region contains the point, else the
    /// leaf with the nearest centroid. Ties go to the smaller name.
    pub fn abstract_location(&self, geo: Geo) -> Result<&PlaceNode, ContextError> {
        if !geo.is_valid() {
            return Err(ContextError::InvalidCoordinates {
                lat: geo.lat,
                lon: geo.lon,
            });
        }
        // leaves are sorted by name, so the first hit wins ties
        if let Some(&i) = self
            .leaves
            .iter()
            .find(|&&i| self.nodes[i].region.contains(geo))
        {
            return Ok(&self.nodes[i]);
        }
        let mut best: Option<(f64, usize)> = None;
        for &i in &self.leaves {
            let c = self.nodes[i].centroid;
            let d = (c.lat - geo.lat).powi(2) + (c.lon - geo.lon).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| &self.nodes[i])
            .ok_or(ContextError::EmptyGazetteer)
    }

    /// The ancestor `levels` steps above `name`, clamped at the root.
    /// Unknown names (including the sentinel) are returned unchanged.
    pub fn ancestor<'a>(&'a self, name: &'a str, levels: usize) -> &'a str {
        let Some(&start) = self.index.get(name) else {
            return name;
        };
        let mut cur = start;
        for _ in 0..levels {
            match self.parent[cur] {
                Some(p) => cur = p,
                None => break,
            }
        }
        &self.nodes[cur].name
    }
}

/// What the agent knows about a user independent of any event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserContext {
    pub group: GroupId,
    /// Used when an event has no cognitive reading.
    pub prior_cognitive: CognitiveClass,
}

/// The discretized state: time, place, social group and cognitive activity at
/// a granularity level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SituationKey {
    pub time: TimeBucket,
    pub place: String,
    pub group: GroupId,
    pub cognitive: CognitiveClass,
    pub granularity: u8,
}

impl SituationKey {
    /// Same situation content, ignoring the granularity tag.
    pub fn same_content(&self, other: &SituationKey) -> bool {
        self.time == other.time
            && self.place == other.place
            && self.group == other.group
            && self.cognitive == other.cognitive
    }

    pub fn with_group(&self, group: GroupId) -> SituationKey {
        SituationKey {
            group,
            ..self.clone()
        }
    }
}

impl fmt::Display for SituationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|{}|{}",
            self.time, self.place, self.group, self.cognitive, self.granularity
        )
    }
}

impl FromStr for SituationKey {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split('|').collect();
        if fields.len() != 5 || fields[1].is_empty() {
            return Err(parse_err("situation key", s));
        }
        Ok(SituationKey {
            time: fields[0].parse()?,
            place: fields[1].to_string(),
            group: fields[2].parse().map_err(|_| parse_err("situation key", s))?,
            cognitive: fields[3].parse()?,
            granularity: fields[4].parse().map_err(|_| parse_err("situation key", s))?,
        })
    }
}

impl Serialize for SituationKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SituationKey {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Gazetteer plus the configured hierarchy depth; performs aggregation.
#[derive(Debug, Clone)]
pub struct ContextModel {
    gazetteer: Gazetteer,
    depth: usize,
}

pub const DEFAULT_DEPTH: usize = 2;

impl ContextModel {
    pub fn new(gazetteer: Gazetteer, depth: usize) -> Result<Self, ContextError> {
        if depth == 0 {
            return Err(ContextError::Hierarchy("depth must be at least 1".into()));
        }
        if gazetteer.max_leaf_depth() > depth {
            return Err(ContextError::Hierarchy(format!(
                "leaves sit {} levels below the root, deeper than configured depth {depth}",
                gazetteer.max_leaf_depth()
            )));
        }
        Ok(Self { gazetteer, depth })
    }

    pub fn gazetteer(&self) -> &Gazetteer {
        &self.gazetteer
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn abstract_time(&self, timestamp: u64, calendar: &[CalendarEntry]) -> TimeBucket {
        abstract_time(timestamp, calendar)
    }

    pub fn abstract_location(&self, geo: Geo) -> Result<&PlaceNode, ContextError> {
        self.gazetteer.abstract_location(geo)
    }

    /// Composes time, place (lifted `level` steps up the hierarchy), social
    /// group and cognitive class into one key.
    pub fn aggregate(
        &self,
        event: &RawEvent,
        user: &UserContext,
        level: usize,
    ) -> Result<SituationKey, ContextError> {
        if level > self.depth {
            return Err(ContextError::LevelOutOfRange {
                level,
                depth: self.depth,
            });
        }
        event.validate()?;
        let time = abstract_time(event.timestamp, event.calendar_entries());
        let place = match event.geo {
            Some(g) => {
                let leaf = self.gazetteer.abstract_location(g)?;
                self.gazetteer.ancestor(&leaf.name, level).to_string()
            }
            None => UNKNOWN_PLACE.to_string(),
        };
        let cognitive = event
            .cognitive
            .map(|c| c.class())
            .unwrap_or(user.prior_cognitive);
        Ok(SituationKey {
            time,
            place,
            group: user.group,
            cognitive,
            granularity: level as u8,
        })
    }

    /// Lifts a key to a coarser level.
    pub fn lift(&self, key: &SituationKey, level: usize) -> Result<SituationKey, ContextError> {
        let from = key.granularity as usize;
        if level > self.depth || level < from {
            return Err(ContextError::LevelOutOfRange {
                level,
                depth: self.depth,
            });
        }
        Ok(SituationKey {
            place: self.gazetteer.ancestor(&key.place, level - from).to_string(),
            granularity: level as u8,
            ..key.clone()
        })
    }

    /// All generalizations of `key` from its own level to the root, most
    /// specific first, keeping only the first key of each distinct content.
    pub fn generalize(&self, key: &SituationKey) -> Vec<SituationKey> {
        let mut out: Vec<SituationKey> = Vec::with_capacity(self.depth + 1);
        for level in (key.granularity as usize)..=self.depth {
            let lifted = SituationKey {
                place: self
                    .gazetteer
                    .ancestor(&key.place, level - key.granularity as usize)
                    .to_string(),
                granularity: level as u8,
                ..key.clone()
            };
            if !out.iter().any(|k| k.same_content(&lifted)) {
                out.push(lifted);
            }
        }
        out
    }

    pub fn enumerate_granularities(
        &self,
        event: &RawEvent,
        user: &UserContext,
    ) -> Result<Vec<SituationKey>, ContextError> {
        Ok(self.generalize(&self.aggregate(event, user, 0)?))
    }

    /// Place names at levels `0..depth` above `place` (the root excluded).
    pub fn place_path(&self, place: &str) -> Vec<String> {
        (0..self.depth)
            .map(|l| self.gazetteer.ancestor(place, l).to_string())
            .collect()
    }

    pub fn unknown_place() -> PlaceNode {
        PlaceNode::unknown()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) const GAZ: &str = "\
# name,type,parent,lat_min,lat_max,lon_min,lon_max,centroid_lat,centroid_lon
Anywhere,Other,,-90,90,-180,180,0,0
Paris,Other,Anywhere,48.80,48.92,2.25,2.42,48.86,2.34
Lyon,Other,Anywhere,45.70,45.80,4.79,4.90,45.76,4.84
Home,Home,Paris,48.80,48.84,2.25,2.30,48.82,2.275
Office,Office,Paris,48.86,48.90,2.30,2.36,48.88,2.33
Cafe,Other,Paris,48.84,48.86,2.30,2.33,48.85,2.315
ClientSite,ClientSite,Lyon,45.70,45.75,4.79,4.85,45.725,4.82
";

    pub(crate) fn model() -> ContextModel {
        ContextModel::new(Gazetteer::parse(GAZ).unwrap(), 2).unwrap()
    }

}
