use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The ℓp norms supported end to end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

impl Norm {
    pub const ALL: [Norm; 3] = [Norm::L1, Norm::L2, Norm::Linf];

    /// Hölder conjugate: (1, ∞), (2, 2), (∞, 1).
    pub fn dual(self) -> Norm {
        match self {
            Norm::L1 => Norm::Linf,
            Norm::L2 => Norm::L2,
            Norm::Linf => Norm::L1,
        }
    }

    pub fn of(self, v: impl IntoIterator<Item = f64>) -> f64 {
        let it = v.into_iter();
        match self {
            Norm::L1 => it.map(f64::abs).sum(),
            Norm::L2 => it.map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => it.map(f64::abs).fold(0.0, f64::max),
        }
    }

    pub fn of_f32(self, v: &[f32]) -> f64 {
        self.of(v.iter().map(|&x| x as f64))
    }

    /// `‖v‖_{p,*} = sup { vᵀu : ‖u‖_p ≤ 1 }`.
    pub fn dual_norm(self, v: &[f32]) -> f64 {
        self.dual().of_f32(v)
    }

    /// Short label used in CSV headers: `l1`, `l2`, `linf`.
    pub fn label(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::Linf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" | "infinity" | "∞" => Ok(Norm::Linf),
            other => Err(Error::UnsupportedNorm(other.to_string())),
        }
    }
}

/// Dual norm of `v` for the norm named by `p` (`"1"`, `"2"`, `"inf"`).
pub fn dual_norm(p: &str, v: &[f32]) -> Result<f64> {
    Ok(p.parse::<Norm>()?.dual_norm(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_norm_examples() {
        let v = [3.0, -4.0];
        assert_eq!(Norm::L1.dual_norm(&v), 4.0);
        assert_eq!(Norm::L2.dual_norm(&v), 5.0);
        assert_eq!(Norm::Linf.dual_norm(&v), 7.0);
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!("inf".parse::<Norm>().unwrap(), Norm::Linf);
        assert_eq!("L2".parse::<Norm>().unwrap(), Norm::L2);
        assert!(matches!("3".parse::<Norm>(), Err(Error::UnsupportedNorm(_))));
        assert!(dual_norm("0.5", &[1.0]).is_err());
    }

    #[test]
    fn dual_pairs() {
        for p in Norm::ALL {
            assert_eq!(p.dual().dual(), p);
        }
    }
}
