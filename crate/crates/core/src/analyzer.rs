//! Golden/corrupted tensor comparison and classification.
//!
//! Comparison is bitwise throughout: two values differ when their binary32
//! encodings differ, so NaN payloads and signed zeros count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{DomainClass, SpatialPattern};
use crate::tensor::{Loc, MapShape, Tensor};

/// Elements that differ between a golden tensor and a corrupted one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffRecord {
    /// Flat indices, strictly increasing.
    pub indices: Vec<usize>,
    pub golden: Vec<f32>,
    pub corrupted: Vec<f32>,
}

impl DiffRecord {
    pub fn cardinality(&self) -> usize {
        self.indices.len()
    }

    pub fn locations(&self, shape: MapShape) -> Vec<Loc> {
        self.indices.iter().map(|&i| shape.loc(i)).collect()
    }
}

/// `None` when the tensors are bit-identical (a masked experiment).
pub fn diff_tensors(golden: &Tensor, corrupted: &Tensor) -> Result<Option<DiffRecord>> {
    if golden.shape() != corrupted.shape() {
        return Err(Error::ShapeMismatch {
            node: "diff".into(),
            expected: golden.shape().to_vec(),
            actual: corrupted.shape().to_vec(),
        });
    }
    let mut rec = DiffRecord {
        indices: Vec::new(),
        golden: Vec::new(),
        corrupted: Vec::new(),
    };
    for (i, (g, c)) in golden.data().iter().zip(corrupted.data()).enumerate() {
        if g.to_bits() != c.to_bits() {
            rec.indices.push(i);
            rec.golden.push(*g);
            rec.corrupted.push(*c);
        }
    }
    Ok((!rec.indices.is_empty()).then_some(rec))
}

/// First matching class in the order NaN, Zero, BitFlip, InUnitBall, Random.
pub fn classify_value_domain(golden: f32, corrupted: f32) -> DomainClass {
    if corrupted.is_nan() {
        DomainClass::NaN
    } else if corrupted == 0.0 {
        DomainClass::Zero
    } else if (golden.to_bits() ^ corrupted.to_bits()).count_ones() == 1 {
        DomainClass::BitFlip
    } else if (corrupted as f64 - golden as f64).abs() <= 1.0 {
        DomainClass::InUnitBall
    } else {
        DomainClass::Random
    }
}

fn gaps(sorted: &[usize]) -> Vec<usize> {
    sorted
        .windows(2)
        .flat_map(|w| w[0] + 1..w[1])
        .collect()
}

/// Structural classification of a non-empty set of corrupted locations.
///
/// One location is a single point. Within one map, locations sharing a row
/// form a (possibly gapped) same-row pattern. Across maps, one location per
/// map at a shared `(y, x)` is a bullet wake; the same with one or more maps
/// spreading along row `y` through that point is shattered glass. Anything
/// else is random, split by whether it stays inside one map.
pub fn classify_spatial(diff: &DiffRecord, shape: MapShape) -> SpatialPattern {
    classify_locations(&diff.locations(shape))
}

pub fn classify_locations(locs: &[Loc]) -> SpatialPattern {
    assert!(!locs.is_empty(), "classification needs at least one location");
    let first = locs[0];
    if locs.len() == 1 {
        return SpatialPattern::SinglePoint {
            c: first.c,
            y: first.y,
            x: first.x,
        };
    }

    // Group by map; `locs` is in flat order so maps and x values come sorted.
    let mut maps: Vec<(usize, Vec<usize>)> = Vec::new();
    for l in locs {
        match maps.last_mut() {
            Some((c, xs)) if *c == l.c => xs.push(l.x),
            _ => maps.push((l.c, vec![l.x])),
        }
    }
    let same_y = locs.iter().all(|l| l.y == first.y);

    if maps.len() == 1 {
        if same_y {
            let xs = &maps[0].1;
            return SpatialPattern::SameRow {
                c: first.c,
                y: first.y,
                x_start: xs[0],
                x_end: xs[xs.len() - 1],
                skipped: gaps(xs),
            };
        }
        return SpatialPattern::RandomSfm { c: first.c };
    }

    if !same_y {
        return SpatialPattern::RandomMfm;
    }
    let cs: Vec<usize> = maps.iter().map(|(c, _)| *c).collect();
    let (c_first, c_last) = (cs[0], cs[cs.len() - 1]);
    let skipped_maps = gaps(&cs);

    if maps.iter().all(|(_, xs)| xs.len() == 1) {
        let x = maps[0].1[0];
        if maps.iter().all(|(_, xs)| xs[0] == x) {
            return SpatialPattern::BulletWake {
                y: first.y,
                x,
                c_first,
                c_last,
                skipped_maps,
            };
        }
        return SpatialPattern::RandomMfm;
    }

    // Entry point: an x present in every map. Prefer the one a single-point
    // map pins down.
    let entry = match maps.iter().find(|(_, xs)| xs.len() == 1) {
        Some((_, xs)) => Some(xs[0]).filter(|x| maps.iter().all(|(_, m)| m.contains(x))),
        None => maps[0]
            .1
            .iter()
            .copied()
            .find(|x| maps.iter().all(|(_, m)| m.contains(x))),
    };
    let Some(x) = entry else {
        return SpatialPattern::RandomMfm;
    };
    let (shattered_map, row) = maps
        .iter()
        .find(|(_, xs)| xs.len() > 1)
        .expect("some map has more than one location");
    SpatialPattern::ShatteredGlass {
        y: first.y,
        x,
        c_first,
        c_last,
        skipped_maps,
        shattered_map: *shattered_map,
        x_start: row[0],
        x_end: row[row.len() - 1],
        skipped: gaps(row),
    }
}

/// Classification of one corrupted tensor on all three axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairClassification {
    pub pattern: SpatialPattern,
    /// One class per corrupted location, in flat order.
    pub domains: Vec<DomainClass>,
    pub cardinality: usize,
    pub single_map: bool,
}

/// `None` for a masked pair. Rank-1 and rank-2 tensors are analyzed as a
/// single row; see [`analyze_pair_as`] to force a layout.
pub fn analyze_pair(golden: &Tensor, corrupted: &Tensor) -> Result<Option<PairClassification>> {
    let shape = MapShape::of(golden.shape())?;
    analyze_pair_as(golden, corrupted, shape)
}

pub fn analyze_pair_as(
    golden: &Tensor,
    corrupted: &Tensor,
    shape: MapShape,
) -> Result<Option<PairClassification>> {
    if shape.len() != golden.len() {
        return Err(Error::InvalidTensor(format!(
            "layout {shape:?} does not cover tensor {:?}",
            golden.shape()
        )));
    }
    let Some(diff) = diff_tensors(golden, corrupted)? else {
        return Ok(None);
    };
    let pattern = classify_spatial(&diff, shape);
    let domains = diff
        .golden
        .iter()
        .zip(&diff.corrupted)
        .map(|(g, c)| classify_value_domain(*g, *c))
        .collect();
    let first_c = shape.loc(diff.indices[0]).c;
    let single_map = diff.indices.iter().all(|&i| shape.loc(i).c == first_c);
    Ok(Some(PairClassification {
        pattern,
        domains,
        cardinality: diff.cardinality(),
        single_map,
    }))
}
