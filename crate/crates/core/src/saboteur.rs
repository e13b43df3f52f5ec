//! Saboteurs: pattern generation and value corruption.
//!
//! Range parameters are drawn uniformly inside the tensor bounds. Interior
//! points of a row and interior maps of a map range are left unaltered with
//! a configurable probability; range endpoints are always corrupted, so a
//! generated row has at least two points and a generated wake at least two
//! maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{SpatialPattern, SpatialVariant, ValueDomain};
use crate::tensor::{Loc, MapShape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Probability that an interior point of a corrupted row is left intact.
    pub row_skip_p: f64,
    /// Probability that an interior map of a corrupted range is left intact.
    pub map_skip_p: f64,
    /// Half-width of the uniform range for `Random` replacement values.
    pub random_scale: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            row_skip_p: 0.25,
            map_skip_p: 0.25,
            random_scale: 1e3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("row_skip_p", self.row_skip_p), ("map_skip_p", self.map_skip_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} not in [0, 1)")));
            }
        }
        // Small scales would make the rejection loop in `corrupt_values` crawl.
        if !(self.random_scale.is_finite() && self.random_scale >= 4.0) {
            return Err(Error::Config(format!(
                "random_scale = {} must be finite and >= 4",
                self.random_scale
            )));
        }
        Ok(())
    }
}

/// One sampled error: where it lands and what it writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEvent {
    pub site: String,
    /// Shape of the site's output tensor.
    pub shape: Vec<usize>,
    pub pattern: SpatialPattern,
    pub targets: Vec<Loc>,
    /// One entry per target.
    pub domains: Vec<ValueDomain>,
    /// Seed of the stream that produced this event, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Two distinct values in `0..n`, ordered.
fn range_pair(n: usize, rng: &mut impl Rng) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a.min(b), a.max(b))
}

fn skip_interior(lo: usize, hi: usize, p: f64, keep: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    (lo + 1..hi)
        .filter(|&i| {
            let skip = p > 0.0 && rng.random_bool(p);
            skip && Some(i) != keep
        })
        .collect()
}

/// Draws a pattern of `variant` with parameters uniform inside `shape`.
pub fn draw_pattern(
    variant: SpatialVariant,
    shape: MapShape,
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
) -> Result<SpatialPattern> {
    if !variant.admits(shape) {
        return Err(Error::ImpossiblePattern {
            variant: variant.name().into(),
            shape: vec![shape.c, shape.h, shape.w],
        });
    }
    let pattern = match variant {
        SpatialVariant::SinglePoint => SpatialPattern::SinglePoint {
            c: rng.random_range(0..shape.c),
            y: rng.random_range(0..shape.h),
            x: rng.random_range(0..shape.w),
        },
        SpatialVariant::SameRow => {
            let c = rng.random_range(0..shape.c);
            let y = rng.random_range(0..shape.h);
            let (x_start, x_end) = range_pair(shape.w, rng);
            SpatialPattern::SameRow {
                c,
                y,
                x_start,
                x_end,
                skipped: skip_interior(x_start, x_end, cfg.row_skip_p, None, rng),
            }
        }
        SpatialVariant::BulletWake => {
            let y = rng.random_range(0..shape.h);
            let x = rng.random_range(0..shape.w);
            let (c_first, c_last) = range_pair(shape.c, rng);
            SpatialPattern::BulletWake {
                y,
                x,
                c_first,
                c_last,
                skipped_maps: skip_interior(c_first, c_last, cfg.map_skip_p, None, rng),
            }
        }
        SpatialVariant::ShatteredGlass => {
            let y = rng.random_range(0..shape.h);
            let x = rng.random_range(0..shape.w);
            let (c_first, c_last) = range_pair(shape.c, rng);
            let skipped_maps = skip_interior(c_first, c_last, cfg.map_skip_p, None, rng);
            let corrupted: Vec<usize> = (c_first..=c_last)
                .filter(|c| !skipped_maps.contains(c))
                .collect();
            let shattered_map = corrupted[rng.random_range(0..corrupted.len())];
            // The row runs through the wake's entry point.
            let (x_start, x_end) = loop {
                let s = rng.random_range(0..=x);
                let e = rng.random_range(x..shape.w);
                if s < e {
                    break (s, e);
                }
            };
            let skipped = skip_interior(x_start, x_end, cfg.row_skip_p, Some(x), rng);
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
            }
        }
        SpatialVariant::RandomSfm | SpatialVariant::RandomMfm => unreachable!("not admitted"),
    };
    debug_assert!(pattern.check(shape).is_ok());
    Ok(pattern)
}

/// Draws a pattern and returns just its locations.
pub fn generate_targets(
    variant: SpatialVariant,
    shape: MapShape,
    rng: &mut impl Rng,
    cfg: &GeneratorConfig,
) -> Result<Vec<Loc>> {
    Ok(draw_pattern(variant, shape, rng, cfg)?.targets())
}

const QUIET_NAN: u32 = 0x7FC0_0000;
const IN_BALL_RETRIES: usize = 64;

fn single_bit_apart(a: f32, b: f32) -> bool {
    (a.to_bits() ^ b.to_bits()).count_ones() == 1
}

/// The value written over `golden` for one target.
///
/// Every domain changes the bits of the value, except `Zero` on a location
/// that already holds `+0.0`. `InUnitBall` redraws the offset when the sum
/// rounds back to `golden` and, when no offset in `[-1, 1]` can move the
/// value (magnitudes beyond 2^24), flips the lowest mantissa bit instead.
pub fn corrupt_value(golden: f32, domain: &ValueDomain, rng: &mut impl Rng) -> f32 {
    let g = golden.to_bits();
    match *domain {
        ValueDomain::NaN => {
            let nan = if g == QUIET_NAN { QUIET_NAN | 1 } else { QUIET_NAN };
            f32::from_bits(nan)
        }
        ValueDomain::Zero => 0.0,
        ValueDomain::BitFlip { bit } => f32::from_bits(g ^ (1u32 << (bit & 31))),
        ValueDomain::InUnitBall { delta } => {
            let mut d = delta;
            for _ in 0..IN_BALL_RETRIES {
                let v = golden + d;
                if v.to_bits() != g {
                    return v;
                }
                d = rng.random_range(-1.0f32..=1.0);
            }
            f32::from_bits(g ^ 1)
        }
        ValueDomain::Random { scale } => loop {
            let v = rng.random_range(-scale..=scale);
            let far = !((v as f64 - golden as f64).abs() <= 1.0);
            if far && v != 0.0 && !single_bit_apart(v, golden) {
                return v;
            }
        },
    }
}

/// Copy of `golden` with every target rewritten according to its domain.
pub fn corrupt_values(
    golden: &Tensor,
    targets: &[Loc],
    domains: &[ValueDomain],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if targets.len() != domains.len() {
        return Err(Error::InvalidTensor(format!(
            "{} targets but {} domains",
            targets.len(),
            domains.len()
        )));
    }
    let shape = MapShape::of(golden.shape())?;
    let mut out = golden.clone();
    let data = out.data_mut();
    for (loc, domain) in targets.iter().zip(domains) {
        if !shape.contains(*loc) {
            return Err(Error::InvalidTensor(format!(
                "target {loc:?} outside {:?}",
                golden.shape()
            )));
        }
        let i = shape.index(*loc);
        data[i] = corrupt_value(data[i], domain, rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_point_has_one_location() {
        let t = generate_targets(
            SpatialVariant::SinglePoint,
            MapShape::new(256, 13, 13),
            &mut rng::stream(1),
            &GeneratorConfig::default(),
        )
        .unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn impossible_variant_errors() {
        let err = generate_targets(
            SpatialVariant::BulletWake,
            MapShape::new(1, 4, 4),
            &mut rng::stream(1),
            &GeneratorConfig::default(),
        );
        assert!(matches!(err, Err(Error::ImpossiblePattern { .. })));
    }

    #[test]
    fn zero_on_ones() {
        let g = Tensor::full(&[1, 3, 3], 1.0);
        let out = corrupt_values(&g, &[Loc::new(0, 1, 1)], &[ValueDomain::Zero], &mut rng::stream(0)).unwrap();
        let changed: Vec<usize> = (0..9).filter(|&i| out.data()[i] != 1.0).collect();
        assert_eq!(changed, vec![4]);
        assert_eq!(out.data()[4], 0.0);
    }

    #[test]
    fn sign_bit_flip() {
        let v = corrupt_value(1.0, &ValueDomain::BitFlip { bit: 31 }, &mut rng::stream(0));
        assert_eq!(v, -1.0);
    }

    #[test]
    fn nan_always_changes_bits() {
        let q = f32::from_bits(QUIET_NAN);
        let v = corrupt_value(q, &ValueDomain::NaN, &mut rng::stream(0));
        assert!(v.is_nan());
        assert_ne!(v.to_bits(), q.to_bits());
    }

    #[test]
    fn in_ball_on_huge_values_still_changes() {
        let g = 1.0e9f32;
        let v = corrupt_value(g, &ValueDomain::InUnitBall { delta: 0.5 }, &mut rng::stream(3));
        assert_ne!(v.to_bits(), g.to_bits());
    }

    #[test]
    fn random_defeats_other_classes() {
        let r = &mut rng::stream(9);
        for g in [0.0f32, 1.0, -3.5, 999.5, f32::NAN] {
            for _ in 0..200 {
                let v = corrupt_value(g, &ValueDomain::Random { scale: 1e3 }, r);
                assert!(!v.is_nan() && v != 0.0);
                assert!(!((v as f64 - g as f64).abs() <= 1.0));
                assert!(!single_bit_apart(v, g));
            }
        }
    }

    #[test]
    fn config_bounds() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig { row_skip_p: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig { random_scale: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
