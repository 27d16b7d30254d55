use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    OneToOne,
    OneToMany,
    ManyToOne,
    ManyToMany,
}

/// Which steps consume real inputs and which emit loss-bearing outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    /// One-to-many only: feed the one-hot argmax of the previous prediction
    /// as the next input instead of a zero vector.
    #[serde(default)]
    pub feed_previous: bool,
}

impl Topology {
    pub const fn new(kind: TopologyKind) -> Self {
        Self {
            kind,
            feed_previous: false,
        }
    }

    pub const fn one_to_one() -> Self {
        Self::new(TopologyKind::OneToOne)
    }

    pub const fn one_to_many() -> Self {
        Self::new(TopologyKind::OneToMany)
    }

    pub const fn many_to_one() -> Self {
        Self::new(TopologyKind::ManyToOne)
    }

    pub const fn many_to_many() -> Self {
        Self::new(TopologyKind::ManyToMany)
    }

    /// Output mask for a sequence of `len` steps.
    pub fn mask(&self, len: usize) -> Result<Vec<bool>> {
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(match self.kind {
            TopologyKind::OneToOne => {
                if len != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "one-to-one topology needs exactly one step, got {len}"
                    )));
                }
                vec![true]
            }
            TopologyKind::ManyToOne => (0..len).map(|t| t == len - 1).collect(),
            TopologyKind::OneToMany | TopologyKind::ManyToMany => vec![true; len],
        })
    }

    /// Whether step `t` reads the sample's own input.
    pub fn reads_input(&self, t: usize) -> bool {
        !matches!(self.kind, TopologyKind::OneToMany) || t == 0
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyKind::OneToOne => "one-to-one",
            TopologyKind::OneToMany => "one-to-many",
            TopologyKind::ManyToOne => "many-to-one",
            TopologyKind::ManyToMany => "many-to-many",
        })
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "one-to-one" => Ok(TopologyKind::OneToOne),
            "one-to-many" => Ok(TopologyKind::OneToMany),
            "many-to-one" => Ok(TopologyKind::ManyToOne),
            "many-to-many" => Ok(TopologyKind::ManyToMany),
            other => Err(Error::InvalidArgument(format!("unknown topology {other:?}"))),
        }
    }
}
