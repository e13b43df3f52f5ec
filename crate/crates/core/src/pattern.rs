//! Corruption taxonomy: where erroneous values sit in a tensor (spatial
//! patterns) and how each one deviates from its golden value (value domains).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Loc, MapShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpatialVariant {
    SinglePoint,
    SameRow,
    #[serde(rename = "RandomSFM")]
    RandomSfm,
    BulletWake,
    ShatteredGlass,
    #[serde(rename = "RandomMFM")]
    RandomMfm,
}

impl SpatialVariant {
    /// Table order: single-map variants first, then multi-map ones.
    pub const ALL: [SpatialVariant; 6] = [
        SpatialVariant::SinglePoint,
        SpatialVariant::SameRow,
        SpatialVariant::RandomSfm,
        SpatialVariant::BulletWake,
        SpatialVariant::ShatteredGlass,
        SpatialVariant::RandomMfm,
    ];

    pub const STRUCTURED: [SpatialVariant; 4] = [
        SpatialVariant::SinglePoint,
        SpatialVariant::SameRow,
        SpatialVariant::BulletWake,
        SpatialVariant::ShatteredGlass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SpatialVariant::SinglePoint => "SinglePoint",
            SpatialVariant::SameRow => "SameRow",
            SpatialVariant::RandomSfm => "RandomSFM",
            SpatialVariant::BulletWake => "BulletWake",
            SpatialVariant::ShatteredGlass => "ShatteredGlass",
            SpatialVariant::RandomMfm => "RandomMFM",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, SpatialVariant::RandomSfm | SpatialVariant::RandomMfm)
    }

    pub fn is_multi_map(self) -> bool {
        matches!(
            self,
            SpatialVariant::BulletWake | SpatialVariant::ShatteredGlass | SpatialVariant::RandomMfm
        )
    }

    /// Whether the generator can produce this variant on `shape`.
    pub fn admits(self, shape: MapShape) -> bool {
        match self {
            SpatialVariant::SinglePoint => true,
            SpatialVariant::SameRow => shape.w >= 2,
            SpatialVariant::BulletWake => shape.c >= 2,
            SpatialVariant::ShatteredGlass => shape.c >= 2 && shape.w >= 2,
            SpatialVariant::RandomSfm | SpatialVariant::RandomMfm => false,
        }
    }
}

impl fmt::Display for SpatialVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SpatialVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::malformed("spatial variant", s))
    }
}

/// A spatial pattern with its parameters bound.
///
/// Skip lists name the coordinates inside `[start, end]` that are left
/// unaltered; range endpoints are never skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum SpatialPattern {
    SinglePoint {
        c: usize,
        y: usize,
        x: usize,
    },
    SameRow {
        c: usize,
        y: usize,
        x_start: usize,
        x_end: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        skipped: Vec<usize>,
    },
    BulletWake {
        y: usize,
        x: usize,
        c_first: usize,
        c_last: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        skipped_maps: Vec<usize>,
    },
    ShatteredGlass {
        y: usize,
        x: usize,
        c_first: usize,
        c_last: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        skipped_maps: Vec<usize>,
        shattered_map: usize,
        x_start: usize,
        x_end: usize,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        skipped: Vec<usize>,
    },
    #[serde(rename = "RandomSFM")]
    RandomSfm { c: usize },
    #[serde(rename = "RandomMFM")]
    RandomMfm,
}

impl SpatialPattern {
    pub fn variant(&self) -> SpatialVariant {
        match self {
            SpatialPattern::SinglePoint { .. } => SpatialVariant::SinglePoint,
            SpatialPattern::SameRow { .. } => SpatialVariant::SameRow,
            SpatialPattern::BulletWake { .. } => SpatialVariant::BulletWake,
            SpatialPattern::ShatteredGlass { .. } => SpatialVariant::ShatteredGlass,
            SpatialPattern::RandomSfm { .. } => SpatialVariant::RandomSfm,
            SpatialPattern::RandomMfm => SpatialVariant::RandomMfm,
        }
    }

    /// Corrupted locations in flat (row-major) order. Random variants carry
    /// no locations.
    pub fn targets(&self) -> Vec<Loc> {
        match self {
            SpatialPattern::SinglePoint { c, y, x } => vec![Loc::new(*c, *y, *x)],
            SpatialPattern::SameRow {
                c,
                y,
                x_start,
                x_end,
                skipped,
            } => row(*c, *y, *x_start, *x_end, skipped),
            SpatialPattern::BulletWake {
                y,
                x,
                c_first,
                c_last,
                skipped_maps,
            } => (*c_first..=*c_last)
                .filter(|c| !skipped_maps.contains(c))
                .map(|c| Loc::new(c, *y, *x))
                .collect(),
            SpatialPattern::ShatteredGlass {
                y,
                x,
                c_first,
                c_last,
                skipped_maps,
                shattered_map,
                x_start,
                x_end,
                skipped,
            } => {
                let mut out = Vec::new();
                for c in (*c_first..=*c_last).filter(|c| !skipped_maps.contains(c)) {
                    if c == *shattered_map {
                        out.extend(row(c, *y, *x_start, *x_end, skipped));
                    } else {
                        out.push(Loc::new(c, *y, *x));
                    }
                }
                out
            }
            SpatialPattern::RandomSfm { .. } | SpatialPattern::RandomMfm => Vec::new(),
        }
    }

    /// Checks the structural invariants of a generated pattern on `shape`.
    pub fn check(&self, shape: MapShape) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::ImpossiblePattern {
                variant: format!("{} ({msg})", self.variant()),
                shape: vec![shape.c, shape.h, shape.w],
            })
        };
        let interior = |list: &[usize], lo: usize, hi: usize| list.iter().all(|&v| v > lo && v < hi);
        match self {
            SpatialPattern::SinglePoint { c, y, x } => {
                if !shape.contains(Loc::new(*c, *y, *x)) {
                    return bad("out of bounds");
                }
            }
            SpatialPattern::SameRow {
                c,
                y,
                x_start,
                x_end,
                skipped,
            } => {
                if *c >= shape.c || *y >= shape.h || *x_end >= shape.w {
                    return bad("out of bounds");
                }
                if x_start >= x_end || !interior(skipped, *x_start, *x_end) {
                    return bad("bad row extent");
                }
            }
            SpatialPattern::BulletWake {
                y,
                x,
                c_first,
                c_last,
                skipped_maps,
            } => {
                if *y >= shape.h || *x >= shape.w || *c_last >= shape.c {
                    return bad("out of bounds");
                }
                if c_first >= c_last || !interior(skipped_maps, *c_first, *c_last) {
                    return bad("bad map range");
                }
            }
            SpatialPattern::ShatteredGlass {
                y,
                x,
                c_first,
                c_last,
                skipped_maps,
                shattered_map,
                x_start,
                x_end,
                skipped,
            } => {
                if *y >= shape.h || *x_end >= shape.w || *c_last >= shape.c {
                    return bad("out of bounds");
                }
                if c_first >= c_last || !interior(skipped_maps, *c_first, *c_last) {
                    return bad("bad map range");
                }
                if shattered_map < c_first
                    || shattered_map > c_last
                    || skipped_maps.contains(shattered_map)
                {
                    return bad("shattered map not corrupted");
                }
                if x_start >= x_end
                    || x < x_start
                    || x > x_end
                    || !interior(skipped, *x_start, *x_end)
                    || skipped.contains(x)
                {
                    return bad("bad shattered row");
                }
            }
            SpatialPattern::RandomSfm { .. } | SpatialPattern::RandomMfm => {
                return bad("not generatable")
            }
        }
        Ok(())
    }
}

fn row(c: usize, y: usize, x_start: usize, x_end: usize, skipped: &[usize]) -> Vec<Loc> {
    (x_start..=x_end)
        .filter(|x| !skipped.contains(x))
        .map(|x| Loc::new(c, y, x))
        .collect()
}

/// Value-domain classes, in classification precedence order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DomainClass {
    NaN,
    Zero,
    BitFlip,
    InUnitBall,
    Random,
}

impl DomainClass {
    pub const ALL: [DomainClass; 5] = [
        DomainClass::NaN,
        DomainClass::Zero,
        DomainClass::BitFlip,
        DomainClass::InUnitBall,
        DomainClass::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainClass::NaN => "NaN",
            DomainClass::Zero => "Zero",
            DomainClass::BitFlip => "BitFlip",
            DomainClass::InUnitBall => "InUnitBall",
            DomainClass::Random => "Random",
        }
    }
}

impl fmt::Display for DomainClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DomainClass::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::malformed("value domain", s))
    }
}

/// A value domain with its generation parameter bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain")]
pub enum ValueDomain {
    NaN,
    Zero,
    BitFlip { bit: u8 },
    /// Offset added to the golden value, `|delta| <= 1`.
    InUnitBall { delta: f32 },
    /// Replacement values are drawn from `[-scale, scale]`.
    Random { scale: f32 },
}

impl ValueDomain {
    pub fn class(&self) -> DomainClass {
        match self {
            ValueDomain::NaN => DomainClass::NaN,
            ValueDomain::Zero => DomainClass::Zero,
            ValueDomain::BitFlip { .. } => DomainClass::BitFlip,
            ValueDomain::InUnitBall { .. } => DomainClass::InUnitBall,
            ValueDomain::Random { .. } => DomainClass::Random,
        }
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            ValueDomain::BitFlip { bit } if bit > 31 => {
                Err(Error::malformed("value domain", format!("bit index {bit} > 31")))
            }
            ValueDomain::InUnitBall { delta } if !(delta.abs() <= 1.0) => {
                Err(Error::malformed("value domain", format!("|delta| = {} > 1", delta.abs())))
            }
            ValueDomain::Random { scale } if !(scale.is_finite() && scale > 0.0) => {
                Err(Error::malformed("value domain", format!("bad random scale {scale}")))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bullet_wake_targets_skip_maps() {
        let p = SpatialPattern::BulletWake {
            y: 2,
            x: 3,
            c_first: 1,
            c_last: 6,
            skipped_maps: vec![3],
        };
        let t = p.targets();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|l| l.y == 2 && l.x == 3));
        p.check(MapShape::new(8, 4, 4)).unwrap();
        assert!(p.check(MapShape::new(6, 4, 4)).is_err());
    }

    #[test]
    fn same_row_targets() {
        let p = SpatialPattern::SameRow {
            c: 0,
            y: 0,
            x_start: 2,
            x_end: 8,
            skipped: vec![],
        };
        let t = p.targets();
        assert_eq!(t.len(), 7);
        assert!(t.iter().all(|l| l.c == 0 && l.y == 0));
    }

    #[test]
    fn shattered_glass_requires_entry_in_row() {
        let p = SpatialPattern::ShatteredGlass {
            y: 4,
            x: 4,
            c_first: 0,
            c_last: 7,
            skipped_maps: vec![1, 2, 4, 5, 6],
            shattered_map: 3,
            x_start: 2,
            x_end: 6,
            skipped: vec![3, 5],
        };
        let shape = MapShape::new(8, 8, 8);
        p.check(shape).unwrap();
        let locs: Vec<(usize, usize, usize)> = p.targets().iter().map(|l| (l.c, l.y, l.x)).collect();
        assert_eq!(locs, vec![(0, 4, 4), (3, 4, 2), (3, 4, 4), (3, 4, 6), (7, 4, 4)]);
        let mut q = p.clone();
        if let SpatialPattern::ShatteredGlass { ref mut skipped, .. } = q {
            skipped.push(4);
        }
        assert!(q.check(shape).is_err());
    }

    #[test]
    fn degenerate_shapes() {
        let line = MapShape::new(1, 1, 8);
        assert!(SpatialVariant::SameRow.admits(line));
        assert!(!SpatialVariant::BulletWake.admits(line));
        assert!(!SpatialVariant::ShatteredGlass.admits(line));
        let dot = MapShape::new(1, 1, 1);
        let ok: Vec<_> = SpatialVariant::ALL.into_iter().filter(|v| v.admits(dot)).collect();
        assert_eq!(ok, vec![SpatialVariant::SinglePoint]);
    }

    #[test]
    fn pattern_json_is_tagged() {
        let p = SpatialPattern::SinglePoint { c: 1, y: 2, x: 3 };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"variant":"SinglePoint","c":1,"y":2,"x":3}"#);
        let d: ValueDomain = serde_json::from_str(r#"{"domain":"BitFlip","bit":31}"#).unwrap();
        assert_eq!(d, ValueDomain::BitFlip { bit: 31 });
    }
}
