use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The nine surface conditions a panel image is classified into.
/// Integer codes are stable and follow declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DefectClass {
    PhysicalDamage = 0,
    BirdDropping = 1,
    Clean = 2,
    ElectricalFault = 3,
    SnowCover = 4,
    Soiling = 5,
    CellDamage = 6,
    Breakage = 7,
    Dust = 8,
}

impl DefectClass {
    pub const COUNT: usize = 9;

    pub const ALL: [DefectClass; 9] = [
        DefectClass::PhysicalDamage,
        DefectClass::BirdDropping,
        DefectClass::Clean,
        DefectClass::ElectricalFault,
        DefectClass::SnowCover,
        DefectClass::Soiling,
        DefectClass::CellDamage,
        DefectClass::Breakage,
        DefectClass::Dust,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL
            .get(code)
            .copied()
            .ok_or_else(|| Error::Argument(format!("class code {code} outside 0..9")))
    }

    /// Snake-case identifier, also the expected dataset directory name.
    pub fn slug(self) -> &'static str {
        match self {
            DefectClass::PhysicalDamage => "physical_damage",
            DefectClass::BirdDropping => "bird_dropping",
            DefectClass::Clean => "clean",
            DefectClass::ElectricalFault => "electrical_fault",
            DefectClass::SnowCover => "snow_cover",
            DefectClass::Soiling => "soiling",
            DefectClass::CellDamage => "cell_damage",
            DefectClass::Breakage => "breakage",
            DefectClass::Dust => "dust",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    /// Accepts the slug in any case, with `-` or spaces in place of `_`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .map(|c| match c {
                '-' | ' ' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        let key = match key.as_str() {
            "snow_covered" => "snow_cover",
            other => other,
        };
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.slug() == key)
            .ok_or_else(|| Error::Argument(format!("unknown defect class `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_a_bijection() {
        for (i, c) in DefectClass::ALL.iter().enumerate() {
            assert_eq!(c.code(), i);
            assert_eq!(DefectClass::from_code(i).unwrap(), *c);
            assert_eq!(c.slug().parse::<DefectClass>().unwrap(), *c);
        }
        assert!(DefectClass::from_code(9).is_err());
    }

    #[test]
    fn parses_loose_spellings() {
        assert_eq!("Snow-Covered".parse::<DefectClass>().unwrap(), DefectClass::SnowCover);
        assert_eq!(
            "Bird Dropping".parse::<DefectClass>().unwrap(),
            DefectClass::BirdDropping
        );
        assert!("rust".parse::<DefectClass>().is_err());
    }
}
