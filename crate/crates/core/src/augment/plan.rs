use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AugmentConfig;
use crate::error::{Error, Result};

/// Rotation and translation counts for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub source_count: usize,
    /// Rotations per cell (`N_r`).
    pub rotations: usize,
    /// Translated views per rotation (`N_t`).
    pub translations: usize,
    /// Angle step in degrees, `360 / N_r`.
    pub angle_step: f64,
    /// Single top-up samples spread over the class when the uniform
    /// multiplier misses the target by more than 5%.
    pub extra: usize,
}

impl ClassPlan {
    pub fn multiplier(&self) -> usize {
        self.rotations * self.translations
    }

    pub fn expected(&self) -> usize {
        self.source_count * self.multiplier() + self.extra
    }

    pub fn angle(&self, rotation_index: usize) -> f64 {
        rotation_index as f64 * self.angle_step
    }

    /// Whether the cell at `position` (0-based within the class) receives
    /// one of the `extra` samples. Exactly `extra` positions qualify.
    pub fn has_extra(&self, position: usize) -> bool {
        let n = self.source_count;
        (position + 1) * self.extra / n != position * self.extra / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub target_per_class: usize,
    pub classes: BTreeMap<u8, ClassPlan>,
}

impl AugmentPlan {
    pub fn get(&self, class: u8) -> Result<&ClassPlan> {
        self.classes
            .get(&class)
            .ok_or_else(|| Error::Config(format!("augmentation plan has no entry for class {class}")))
    }

    pub fn expected_total(&self) -> usize {
        self.classes.values().map(ClassPlan::expected).sum()
    }
}

/// Splits `q` into `(n_r, n_t)` with `n_r * n_t = q`, `n_r >= n_t`, and the
/// pair as close to square as possible.
pub fn near_square(q: usize) -> (usize, usize) {
    let mut t = (q as f64).sqrt() as usize;
    while t * t > q {
        t -= 1;
    }
    while (t + 1) * (t + 1) <= q {
        t += 1;
    }
    let t = (1..=t.max(1)).rev().find(|d| q.is_multiple_of(*d)).unwrap_or(1);
    (q / t, t)
}

fn within_tolerance(expected: usize, target: usize) -> bool {
    20 * expected.abs_diff(target) <= target
}

/// Chooses per-class multipliers so every class lands near
/// `cfg.target_per_class` samples; smaller classes get larger multipliers.
pub fn plan_augmentation(counts: &BTreeMap<u8, usize>, cfg: &AugmentConfig) -> Result<AugmentPlan> {
    cfg.validate()?;
    let target = cfg.target_per_class;
    let mut classes = BTreeMap::new();
    for (&class, &count) in counts {
        if count == 0 {
            return Err(Error::Config(format!("class {class} has no cells to augment")));
        }
        let plan = if count >= target {
            if count > target {
                log::warn!("class {class} has {count} cells, more than the target {target}; no augmentation");
            }
            ClassPlan {
                source_count: count,
                rotations: 1,
                translations: 1,
                angle_step: 360.0,
                extra: 0,
            }
        } else {
            let q = (2 * target + count) / (2 * count);
            let (q, extra) = if within_tolerance(count * q, target) {
                (q, 0)
            } else {
                let base = target / count;
                (base, target - count * base)
            };
            let (rotations, translations) = near_square(q);
            ClassPlan {
                source_count: count,
                rotations,
                translations,
                angle_step: 360.0 / rotations as f64,
                extra,
            }
        };
        classes.insert(class, plan);
    }
    Ok(AugmentPlan {
        target_per_class: target,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(target: usize) -> AugmentConfig {
        AugmentConfig {
            target_per_class: target,
            ..Default::default()
        }
    }

    fn reference_counts() -> BTreeMap<u8, usize> {
        [74, 70, 98, 182, 146, 197, 150]
            .iter()
            .enumerate()
            .map(|(i, &n)| (i as u8 + 1, n))
            .collect()
    }

    #[test]
    fn full_dataset_multipliers() {
        let plan = plan_augmentation(&reference_counts(), &cfg(12000)).unwrap();
        assert_eq!(plan.classes[&2].multiplier(), 171);
        assert_eq!(plan.classes[&6].multiplier(), 61);
        assert_eq!((plan.classes[&2].rotations, plan.classes[&2].translations), (19, 9));
        for p in plan.classes.values() {
            assert!(p.rotations >= p.translations);
            assert!(within_tolerance(p.expected(), 12000), "{p:?}");
        }
    }

    #[test]
    fn count_equal_to_target_is_identity() {
        let plan = plan_augmentation(&BTreeMap::from([(1, 500)]), &cfg(500)).unwrap();
        let p = plan.classes[&1];
        assert_eq!((p.rotations, p.translations, p.extra), (1, 1, 0));
    }

    #[test]
    fn symmetric_counts_give_identical_plans() {
        let plan = plan_augmentation(&BTreeMap::from([(1, 100), (2, 100)]), &cfg(200)).unwrap();
        assert_eq!(plan.classes[&1], plan.classes[&2]);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(plan_augmentation(&BTreeMap::from([(1, 0)]), &cfg(200)).is_err());
    }

    #[test]
    fn top_up_hits_target_exactly() {
        let plan = plan_augmentation(&reference_counts(), &cfg(600)).unwrap();
        let p = plan.classes[&4];
        assert_eq!(p.multiplier(), 3);
        assert_eq!(p.expected(), 600);
        assert_eq!((0..p.source_count).filter(|&i| p.has_extra(i)).count(), p.extra);
    }

    #[test]
    fn near_square_factors() {
        assert_eq!(near_square(1), (1, 1));
        assert_eq!(near_square(12), (4, 3));
        assert_eq!(near_square(13), (13, 1));
        assert_eq!(near_square(16), (4, 4));
        for q in 1..500 {
            let (r, t) = near_square(q);
            assert_eq!(r * t, q);
            assert!(r >= t);
        }
    }
}
