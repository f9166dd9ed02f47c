//! Identifier newtypes shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A registered user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for UserId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(UserId)
    }
}

/// A social group. `GroupId::ANY` is the wildcard used when collaborative
/// filtering runs over the whole population instead of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u32);

impl GroupId {
    pub const ANY: GroupId = GroupId(u32::MAX);
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == GroupId::ANY {
            f.write_str("g*")
        } else {
            write!(f, "g{}", self.0)
        }
    }
}

impl FromStr for GroupId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rest = s
            .strip_prefix('g')
            .ok_or_else(|| format!("group id must start with 'g': {s:?}"))?;
        if rest == "*" {
            return Ok(GroupId::ANY);
        }
        rest.parse()
            .map(GroupId)
            .map_err(|e| format!("bad group id {s:?}: {e}"))
    }
}

/// Index of a recommendable item in the [`ActionCatalog`](crate::qlearning::ActionCatalog).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionId(pub u32);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_id_round_trips() {
        for g in [GroupId(0), GroupId(17), GroupId::ANY] {
            assert_eq!(g.to_string().parse::<GroupId>().unwrap(), g);
        }
        assert!("7".parse::<GroupId>().is_err());
    }
}
