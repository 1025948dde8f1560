use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary label. Class 1 is the sensitive class that receives certificates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Class {
    Sensitive,
    Other,
}

impl Class {
    pub fn as_u8(self) -> u8 {
        match self {
            Class::Sensitive => 1,
            Class::Other => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Class::Sensitive),
            2 => Ok(Class::Other),
            _ => Err(Error::Format(format!("class label must be 1 or 2, got {v}"))),
        }
    }

    /// Thresholding rule: class 1 iff `shifted_logit > 0`.
    pub fn from_shifted_logit(shifted_logit: f32) -> Self {
        if shifted_logit > 0.0 {
            Class::Sensitive
        } else {
            Class::Other
        }
    }
}

impl From<Class> for u8 {
    fn from(c: Class) -> u8 {
        c.as_u8()
    }
}

impl TryFrom<u8> for Class {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Class::from_u8(v)
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// Errors unless both classes occur in `labels`.
pub fn require_both_classes(labels: &[Class], context: &str) -> Result<()> {
    let ones = labels.iter().filter(|&&c| c == Class::Sensitive).count();
    if ones == 0 || ones == labels.len() {
        return Err(Error::Config(format!(
            "{context}: both classes must be present ({} of {} samples are class 1)",
            ones,
            labels.len()
        )));
    }
    Ok(())
}
