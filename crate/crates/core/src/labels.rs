//! Grade algebra: Crowe and Kellgren-Lawrence (KL) grades and the seven-class
//! ordinal label that combines them.
//!
//! The combined scale follows disease progression: joint-space narrowing first
//! (KL 1 to 4 at Crowe 1), then dislocation (Crowe 2 to 4 at KL 4). Pairs
//! outside that path, such as Crowe 2 with KL 1, have no combined class.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Number of combined ordinal classes.
pub const NUM_CLASSES: usize = 7;
/// Number of levels per separated grade (Crowe or KL).
pub const NUM_GRADES: usize = 4;

/// (crowe, kl) for combined classes 1..=7.
const PROGRESSION: [(u8, u8); NUM_CLASSES] =
    [(1, 1), (1, 2), (1, 3), (1, 4), (2, 4), (3, 4), (4, 4)];

/// A combined ordinal class in `1..=7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CombinedClass(u8);

impl CombinedClass {
    pub fn new(class: u8) -> Result<Self> {
        if (1..=NUM_CLASSES as u8).contains(&class) {
            Ok(CombinedClass(class))
        } else {
            Err(Error::Input(format!("combined class {class} outside 1..=7")))
        }
    }

    /// Zero-based index, for indexing probability vectors.
    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(index as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = CombinedClass> {
        (1..=NUM_CLASSES as u8).map(CombinedClass)
    }
}

impl TryFrom<u8> for CombinedClass {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        CombinedClass::new(v)
    }
}

impl From<CombinedClass> for u8 {
    fn from(c: CombinedClass) -> u8 {
        c.0
    }
}

impl fmt::Display for CombinedClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn check_grade(name: &str, grade: u8) -> Result<()> {
    if (1..=NUM_GRADES as u8).contains(&grade) {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} grade {grade} outside 1..=4")))
    }
}

/// Map a (Crowe, KL) pair to its combined class. `Ok(None)` marks a pair that
/// is in range but not on the progression path.
pub fn separated_to_combined(crowe: u8, kl: u8) -> Result<Option<CombinedClass>> {
    check_grade("Crowe", crowe)?;
    check_grade("KL", kl)?;
    Ok(PROGRESSION
        .iter()
        .position(|&pair| pair == (crowe, kl))
        .map(|i| CombinedClass(i as u8 + 1)))
}

/// Inverse of [`separated_to_combined`] on valid pairs.
pub fn combined_to_separated(class: u8) -> Result<(u8, u8)> {
    let class = CombinedClass::new(class)?;
    Ok(PROGRESSION[class.index()])
}

/// A graded hip: separated grades plus the combined class, which is `None`
/// for pairs that have no place on the ordinal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GradeLabel {
    pub crowe: u8,
    pub kl: u8,
    pub combined: Option<CombinedClass>,
}

impl GradeLabel {
    pub fn from_combined(class: CombinedClass) -> Self {
        let (crowe, kl) = PROGRESSION[class.index()];
        GradeLabel {
            crowe,
            kl,
            combined: Some(class),
        }
    }

    pub fn from_separated(crowe: u8, kl: u8) -> Result<Self> {
        let combined = separated_to_combined(crowe, kl)?;
        Ok(GradeLabel { crowe, kl, combined })
    }

    /// Build a label from all three manifest columns, rejecting inconsistent rows.
    pub fn from_parts(crowe: u8, kl: u8, combined: u8) -> Result<Self> {
        let label = Self::from_separated(crowe, kl)?;
        match label.combined {
            Some(c) if c.get() == combined => Ok(label),
            Some(c) => Err(Error::Input(format!(
                "(Crowe {crowe}, KL {kl}) is class {c}, row says {combined}"
            ))),
            None => Err(Error::Input(format!(
                "(Crowe {crowe}, KL {kl}) has no combined class"
            ))),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.combined.is_some()
    }
}

impl fmt::Display for GradeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.combined {
            Some(c) => write!(f, "{c} (Crowe {}, KL {})", self.crowe, self.kl),
            None => write!(f, "invalid (Crowe {}, KL {})", self.crowe, self.kl),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_pairs() {
        assert_eq!(separated_to_combined(1, 3).unwrap().unwrap().get(), 3);
        assert_eq!(separated_to_combined(2, 4).unwrap().unwrap().get(), 5);
        assert_eq!(separated_to_combined(2, 1).unwrap(), None);
        assert_eq!(combined_to_separated(1).unwrap(), (1, 1));
        assert_eq!(combined_to_separated(7).unwrap(), (4, 4));
    }

    #[test]
    fn round_trip_and_count() {
        for c in 1..=7 {
            let (cr, kl) = combined_to_separated(c).unwrap();
            assert_eq!(separated_to_combined(cr, kl).unwrap().unwrap().get(), c);
        }
        let valid = (1..=4)
            .flat_map(|cr| (1..=4).map(move |kl| (cr, kl)))
            .filter(|&(cr, kl)| separated_to_combined(cr, kl).unwrap().is_some())
            .count();
        assert_eq!(valid, 7);
    }

    #[test]
    fn progression_is_monotone() {
        let mut prev = (0, 0);
        for c in 1..=7 {
            let pair = combined_to_separated(c).unwrap();
            assert!(pair.0 >= prev.0 && pair.1 >= prev.1 && pair != prev);
            prev = pair;
        }
    }

    #[test]
    fn out_of_range() {
        assert!(separated_to_combined(0, 1).is_err());
        assert!(separated_to_combined(1, 5).is_err());
        assert!(combined_to_separated(0).is_err());
        assert!(combined_to_separated(8).is_err());
        assert!(GradeLabel::from_parts(1, 2, 3).is_err());
        assert!(GradeLabel::from_parts(2, 1, 5).is_err());
        assert_eq!(GradeLabel::from_parts(3, 4, 6).unwrap().combined.unwrap().get(), 6);
    }
}
