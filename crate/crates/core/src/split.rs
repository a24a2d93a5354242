//! Patient-level grouped, class-stratified k-fold cross-validation.
//!
//! Patients are shuffled with the seed, stably sorted by descending cell
//! count and placed greedily. Fold capacities are `ceil(n / k)` for the first
//! `n % k` folds and `floor(n / k)` for the rest; among folds with room, a
//! patient goes where it least increases the squared deviation of per-class
//! counts from their proportional targets (lowest index on ties).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::Provenance;
use crate::data::{DatasetManifest, N_CLASSES};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// The two fields of a cell the splitter looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey<'a> {
    pub patient: &'a str,
    pub class_label: u8,
}

fn manifest_keys(manifest: &DatasetManifest) -> Vec<CellKey<'_>> {
    manifest
        .entries
        .iter()
        .map(|e| CellKey {
            patient: &e.patient_id,
            class_label: e.class_label,
        })
        .collect()
}

pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan> {
    make_folds_for(&manifest_keys(manifest), k, seed)
}

pub fn make_folds_for(cells: &[CellKey<'_>], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut patients: BTreeMap<&str, [usize; N_CLASSES]> = BTreeMap::new();
    for c in cells {
        if !(1..=N_CLASSES as u8).contains(&c.class_label) {
            return Err(Error::InvalidClass {
                line: 0,
                value: c.class_label.to_string(),
            });
        }
        patients.entry(c.patient).or_insert([0; N_CLASSES])[c.class_label as usize - 1] += 1;
    }
    if patients.len() < k {
        return Err(Error::TooFewPatients {
            patients: patients.len(),
            k,
        });
    }

    let mut order: Vec<(&str, [usize; N_CLASSES])> = patients.into_iter().collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_FOLDS]));
    order.sort_by_key(|(_, v)| std::cmp::Reverse(v.iter().sum::<usize>()));

    let n = cells.len();
    let mut class_total = [0usize; N_CLASSES];
    for (_, v) in &order {
        for (t, x) in class_total.iter_mut().zip(v) {
            *t += x;
        }
    }
    let caps: Vec<usize> = (0..k).map(|f| n / k + usize::from(f < n % k)).collect();
    let targets: Vec<[f64; N_CLASSES]> = caps
        .iter()
        .map(|&cap| class_total.map(|t| t as f64 * cap as f64 / n as f64))
        .collect();

    let mut sizes = vec![0usize; k];
    let mut counts = vec![[0usize; N_CLASSES]; k];
    let mut members = vec![0usize; k];
    let mut assignment = BTreeMap::new();
    for (i, (patient, v)) in order.iter().enumerate() {
        let m: usize = v.iter().sum();
        let remaining = order.len() - i;
        let empty = members.iter().filter(|&&x| x == 0).count();
        let candidates: Vec<usize> = if remaining <= empty {
            (0..k).filter(|&f| members[f] == 0).collect()
        } else {
            let fits: Vec<usize> = (0..k).filter(|&f| sizes[f] + m <= caps[f]).collect();
            if fits.is_empty() {
                let least = (0..k).map(|f| sizes[f] + m - caps[f]).min().unwrap_or(0);
                (0..k).filter(|&f| sizes[f] + m - caps[f] == least).collect()
            } else {
                fits
            }
        };
        let delta = |f: usize| -> f64 {
            (0..N_CLASSES)
                .map(|c| {
                    let now = counts[f][c] as f64 - targets[f][c];
                    let next = now + v[c] as f64;
                    next * next - now * now
                })
                .sum()
        };
        let mut best = candidates[0];
        let mut best_delta = delta(best);
        for &f in &candidates[1..] {
            let d = delta(f);
            if d < best_delta {
                best = f;
                best_delta = d;
            }
        }
        sizes[best] += m;
        members[best] += 1;
        for c in 0..N_CLASSES {
            counts[best][c] += v[c];
        }
        assignment.insert(patient.to_string(), best);
    }
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Result<usize> {
        self.assignment
            .get(patient)
            .copied()
            .ok_or_else(|| Error::Config(format!("patient `{patient}` is not in the fold plan")))
    }

    /// Cell indices of each fold, for cells given by patient id.
    pub fn fold_cells<'a>(&self, patients: impl IntoIterator<Item = &'a str>) -> Result<Vec<Vec<usize>>> {
        let mut folds = vec![Vec::new(); self.k];
        for (i, p) in patients.into_iter().enumerate() {
            folds[self.fold_of(p)?].push(i);
        }
        Ok(folds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: FoldPlan = serde_json::from_str(text).map_err(|e| Error::json("<fold plan>", e))?;
        plan.validate()?;
        Ok(plan)
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("fold plan has k = {}", self.k)));
        }
        if let Some((p, &f)) = self.assignment.iter().find(|(_, &f)| f >= self.k) {
            return Err(Error::Config(format!(
                "patient `{p}` assigned to fold {f} but k = {}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: FoldPlan = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// `(train, validation)` cell indices for one fold.
pub fn fold_split(plan: &FoldPlan, manifest: &DatasetManifest, fold_index: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    fold_split_for(plan, manifest.entries.iter().map(|e| e.patient_id.as_str()), fold_index)
}

pub fn fold_split_for<'a>(
    plan: &FoldPlan,
    patients: impl IntoIterator<Item = &'a str>,
    fold_index: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold_index >= plan.k {
        return Err(Error::FoldOutOfRange {
            index: fold_index,
            k: plan.k,
        });
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, p) in patients.into_iter().enumerate() {
        if plan.fold_of(p)? == fold_index {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, val))
}

/// Result of a leakage audit; every list is sorted and empty on a pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    /// Patients with samples on both sides.
    pub shared_patients: Vec<String>,
    /// Source cells with samples on both sides.
    pub shared_cells: Vec<usize>,
    /// Patients missing from the fold plan.
    pub unknown_patients: Vec<String>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.shared_patients.is_empty() && self.shared_cells.is_empty() && self.unknown_patients.is_empty()
    }
}

/// Checks that no patient or source cell feeds both the training and the
/// validation stream. A sample with an empty patient id has no usable
/// provenance and is an error.
pub fn audit_leakage(plan: &FoldPlan, train: &[Provenance], val: &[Provenance]) -> Result<LeakageReport> {
    let collect = |side: &[Provenance], offset: usize| -> Result<(BTreeSet<String>, BTreeSet<usize>)> {
        let mut patients = BTreeSet::new();
        let mut cells = BTreeSet::new();
        for (i, p) in side.iter().enumerate() {
            if p.patient_id.is_empty() {
                return Err(Error::MissingProvenance(offset + i));
            }
            patients.insert(p.patient_id.clone());
            cells.insert(p.cell);
        }
        Ok((patients, cells))
    };
    let (tp, tc) = collect(train, 0)?;
    let (vp, vc) = collect(val, train.len())?;
    Ok(LeakageReport {
        shared_patients: tp.intersection(&vp).cloned().collect(),
        shared_cells: tc.intersection(&vc).copied().collect(),
        unknown_patients: tp
            .union(&vp)
            .filter(|p| !plan.assignment.contains_key(*p))
            .cloned()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keys<'a>(patients: &'a [String], classes: &[u8]) -> Vec<CellKey<'a>> {
        patients
            .iter()
            .zip(classes)
            .map(|(p, &c)| CellKey {
                patient: p,
                class_label: c,
            })
            .collect()
    }

    fn reference_counts() -> (Vec<String>, Vec<u8>) {
        let counts = [74usize, 70, 98, 182, 146, 197, 150];
        let mut classes = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            classes.extend(std::iter::repeat_n(i as u8 + 1, n));
        }
        let patients = (0..classes.len()).map(|i| format!("cell-{i:05}")).collect();
        (patients, classes)
    }

    fn prov(cell: usize, patient: &str) -> Provenance {
        Provenance {
            cell,
            patient_id: patient.into(),
            rotation_deg: 0.0,
            translation: (0, 0),
        }
    }

    #[test]
    fn singleton_patients_split_evenly() {
        let patients: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let classes = vec![1u8; 10];
        let plan = make_folds_for(&keys(&patients, &classes), 5, 3).unwrap();
        let folds = plan.fold_cells(patients.iter().map(String::as_str)).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn reference_fold_sizes() {
        let (patients, classes) = reference_counts();
        let plan = make_folds_for(&keys(&patients, &classes), 5, 11).unwrap();
        let folds = plan.fold_cells(patients.iter().map(String::as_str)).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![184, 184, 183, 183, 183]);
    }

    #[test]
    fn too_few_patients() {
        let patients: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let err = make_folds_for(&keys(&patients, &[1, 2, 3]), 5, 0).unwrap_err();
        assert!(matches!(err, Error::TooFewPatients { patients: 3, k: 5 }));
        assert!(make_folds_for(&keys(&patients, &[1, 2, 3]), 1, 0).is_err());
    }

    #[test]
    fn out_of_range_fold() {
        let patients: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let plan = make_folds_for(&keys(&patients, &[1, 2, 3, 4]), 2, 0).unwrap();
        let err = fold_split_for(&plan, patients.iter().map(String::as_str), 2).unwrap_err();
        assert!(matches!(err, Error::FoldOutOfRange { index: 2, k: 2 }));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (patients, classes) = reference_counts();
        let plan = make_folds_for(&keys(&patients, &classes), 5, 2).unwrap();
        let text = plan.to_json();
        let back = FoldPlan::from_json(&text).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.to_json(), text);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("folds.json");
        plan.save(&path).unwrap();
        assert_eq!(FoldPlan::load(&path).unwrap(), plan);
    }

    #[test]
    fn leakage_audit_passes_and_fails() {
        let patients: Vec<String> = ["a", "a", "b", "c", "d", "d"].iter().map(|s| s.to_string()).collect();
        let plan = make_folds_for(&keys(&patients, &[1, 1, 2, 4, 5, 5]), 2, 0).unwrap();
        let (train, val) = fold_split_for(&plan, patients.iter().map(String::as_str), 0).unwrap();
        let side = |cells: &[usize]| cells.iter().map(|&i| prov(i, &patients[i])).collect::<Vec<_>>();
        let report = audit_leakage(&plan, &side(&train), &side(&val)).unwrap();
        assert!(report.is_clean(), "{report:?}");

        let mut bad_val = side(&val);
        bad_val.push(prov(train[0], &patients[train[0]]));
        bad_val.push(prov(99, "zz"));
        let report = audit_leakage(&plan, &side(&train), &bad_val).unwrap();
        assert_eq!(report.shared_patients, vec![patients[train[0]].clone()]);
        assert_eq!(report.shared_cells, vec![train[0]]);
        assert_eq!(report.unknown_patients, vec!["zz".to_string()]);
        assert_eq!(audit_leakage(&plan, &side(&train), &bad_val).unwrap(), report);

        let err = audit_leakage(&plan, &[prov(0, "")], &[]).unwrap_err();
        assert!(matches!(err, Error::MissingProvenance(0)));
    }

    fn grouped_cells() -> impl Strategy<Value = (Vec<String>, Vec<u8>)> {
        prop::collection::vec((0usize..40, 1u8..=7), 20..300).prop_map(|v| {
            let patients = v.iter().map(|(p, _)| format!("p{p}")).collect();
            let classes = v.iter().map(|&(_, c)| c).collect();
            (patients, classes)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn folds_are_disjoint_and_cover_everything((patients, classes) in grouped_cells(), k in 2usize..6, seed: u64) {
            let ks = keys(&patients, &classes);
            let distinct: BTreeSet<&String> = patients.iter().collect();
            prop_assume!(distinct.len() >= k);
            let plan = make_folds_for(&ks, k, seed).unwrap();
            prop_assert_eq!(plan.assignment.len(), distinct.len());
            let mut validated = vec![0usize; patients.len()];
            for f in 0..k {
                let (train, val) = fold_split_for(&plan, patients.iter().map(String::as_str), f).unwrap();
                prop_assert_eq!(train.len() + val.len(), patients.len());
                prop_assert!(!val.is_empty());
                let tp: BTreeSet<&str> = train.iter().map(|&i| patients[i].as_str()).collect();
                let vp: BTreeSet<&str> = val.iter().map(|&i| patients[i].as_str()).collect();
                prop_assert!(tp.is_disjoint(&vp));
                for i in val {
                    validated[i] += 1;
                }
            }
            prop_assert!(validated.iter().all(|&v| v == 1));
            prop_assert_eq!(make_folds_for(&ks, k, seed).unwrap(), plan);
        }

        #[test]
        fn singleton_folds_are_stratified(classes in prop::collection::vec(1u8..=7, 200..1000), k in 2usize..6, seed: u64) {
            let patients: Vec<String> = (0..classes.len()).map(|i| format!("c{i}")).collect();
            let plan = make_folds_for(&keys(&patients, &classes), k, seed).unwrap();
            let folds = plan.fold_cells(patients.iter().map(String::as_str)).unwrap();
            let n = classes.len() as f64;
            for c in 1..=7u8 {
                let global = classes.iter().filter(|&&x| x == c).count() as f64 / n;
                for f in &folds {
                    let local = f.iter().filter(|&&i| classes[i] == c).count() as f64 / f.len() as f64;
                    prop_assert!((local - global).abs() <= 0.10, "class {c}: {local} vs {global}");
                }
            }
        }
    }
}
