use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::MdrError;

/// A three-way preference between response A and response B.
///
/// Serialized as the integers `1` (A preferred), `0` (tie) and `-1`
/// (B preferred).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Verdict {
    PreferB = -1,
    Tie = 0,
    PreferA = 1,
}

impl Verdict {
    pub fn sign(self) -> f64 {
        self as i64 as f64
    }

    pub fn is_tie(self) -> bool {
        self == Verdict::Tie
    }

    /// The same judgement with the roles of A and B exchanged.
    pub fn flipped(self) -> Self {
        match self {
            Verdict::PreferA => Verdict::PreferB,
            Verdict::Tie => Verdict::Tie,
            Verdict::PreferB => Verdict::PreferA,
        }
    }

    /// Sign of `gap` with a dead band: `|gap| < band` is a tie.
    pub fn from_gap(gap: f64, band: f64) -> Self {
        if gap.abs() < band {
            Verdict::Tie
        } else if gap > 0.0 {
            Verdict::PreferA
        } else {
            Verdict::PreferB
        }
    }
}

impl TryFrom<i64> for Verdict {
    type Error = MdrError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(Verdict::PreferA),
            0 => Ok(Verdict::Tie),
            -1 => Ok(Verdict::PreferB),
            other => Err(MdrError::InvalidVerdict(other)),
        }
    }
}

impl From<Verdict> for i64 {
    fn from(v: Verdict) -> Self {
        v as i64
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as i64)
    }
}
