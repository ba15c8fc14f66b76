use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::OarsegError;

/// The six annotated organs at risk. Codes 1..=6 are fixed; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganId {
    RightLung,
    LeftLung,
    Heart,
    Trachea,
    SpinalCord,
    Esophagus,
}

impl OrganId {
    pub const ALL: [OrganId; 6] = [
        OrganId::RightLung,
        OrganId::LeftLung,
        OrganId::Heart,
        OrganId::Trachea,
        OrganId::SpinalCord,
        OrganId::Esophagus,
    ];

    /// Label code in annotation volumes (1..=6).
    pub fn code(self) -> u8 {
        match self {
            OrganId::RightLung => 1,
            OrganId::LeftLung => 2,
            OrganId::Heart => 3,
            OrganId::Trachea => 4,
            OrganId::SpinalCord => 5,
            OrganId::Esophagus => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<OrganId> {
        OrganId::ALL.get(code.checked_sub(1)? as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OrganId::RightLung => "right_lung",
            OrganId::LeftLung => "left_lung",
            OrganId::Heart => "heart",
            OrganId::Trachea => "trachea",
            OrganId::SpinalCord => "spinal_cord",
            OrganId::Esophagus => "esophagus",
        }
    }
}

impl fmt::Display for OrganId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrganId {
    type Err = OarsegError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OrganId::ALL
            .iter()
            .copied()
            .find(|o| o.name() == s)
            .ok_or_else(|| OarsegError::UnknownOrgan(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn code_name_bijection() {
        assert_eq!(OrganId::ALL.len(), 6);
        for (i, organ) in OrganId::ALL.iter().enumerate() {
            assert_eq!(organ.code() as usize, i + 1);
            assert_eq!(OrganId::from_code(organ.code()), Some(*organ));
            assert_eq!(organ.name().parse::<OrganId>().unwrap(), *organ);
        }
        assert_eq!(OrganId::from_code(0), None);
        assert_eq!(OrganId::from_code(7), None);
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!("pancreas".parse::<OrganId>().is_err());
    }
}
