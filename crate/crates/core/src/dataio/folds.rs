use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::seed;

/// Subject-disjoint assignment of subjects to folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignment.get(subject).copied()
    }

    /// Sample indices `(train, test)` for fold `k`.
    pub fn split(&self, manifest: &DatasetManifest, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.split_subjects(manifest.samples.iter().map(|s| s.subject_id.as_str()), k)
    }

    /// Same as [`split`](Self::split) for a bare list of per-sample subject ids.
    pub fn split_subjects<'a>(
        &self,
        subjects: impl IntoIterator<Item = &'a str>,
        k: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in subjects.into_iter().enumerate() {
            let f = self
                .fold_of(s)
                .ok_or_else(|| Error::validation(format!("subject '{s}' is not in the fold plan")))?;
            if f == k {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles the subjects with `seed` and deals them round-robin into folds.
pub fn make_folds(manifest: &DatasetManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let subjects: Vec<&str> = manifest.samples.iter().map(|s| s.subject_id.as_str()).collect();
    FoldPlan::from_subjects(&subjects, n_folds, seed)
}

impl FoldPlan {
    /// Builds a plan from per-sample subject ids (duplicates allowed).
    pub fn from_subjects(subjects: &[&str], n_folds: usize, seed: u64) -> Result<Self> {
        let unique: BTreeSet<&str> = subjects.iter().copied().collect();
        let mut subjects: Vec<String> = unique.into_iter().map(str::to_owned).collect();
        if n_folds < 2 {
            return Err(Error::validation(format!("need at least 2 folds, got {n_folds}")));
        }
        if n_folds > subjects.len() {
            return Err(Error::validation(format!(
                "{n_folds} folds requested but only {} subjects",
                subjects.len()
            )));
        }
        let mut rng = seed::sub_rng(seed, "folds", 0);
        subjects.shuffle(&mut rng);
        let assignment = subjects
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i % n_folds))
            .collect();
        Ok(FoldPlan {
            n_folds,
            seed,
            assignment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{default_region_names, RegionSample};
    use nalgebra::DMatrix;

    fn manifest(n_subjects: usize) -> DatasetManifest {
        let names = default_region_names(2);
        let samples = (0..n_subjects)
            .flat_map(|s| {
                let names = names.clone();
                (1..=2).map(move |task| {
                    RegionSample::new(
                        format!("sub{s:03}"),
                        task,
                        DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 0.0, 1.0, 0.5]),
                        names.clone(),
                    )
                    .unwrap()
                })
            })
            .collect();
        DatasetManifest::new(samples, names).unwrap()
    }

    #[test]
    fn one_subject_per_fold() {
        let plan = make_folds(&manifest(10), 10, 1).unwrap();
        assert_eq!(plan.fold_sizes(), vec![1; 10]);
    }

    #[test]
    fn ninety_seven_subjects_ten_folds() {
        let plan = make_folds(&manifest(97), 10, 5).unwrap();
        let sizes = plan.fold_sizes();
        assert!(sizes.iter().all(|&s| s == 9 || s == 10), "{sizes:?}");
        assert_eq!(sizes.iter().sum::<usize>(), 97);
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(make_folds(&manifest(3), 4, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn splits_never_share_subjects() {
        let m = manifest(13);
        let plan = make_folds(&m, 5, 9).unwrap();
        let mut covered = 0;
        for k in 0..5 {
            let (train, test) = plan.split(&m, k).unwrap();
            covered += test.len();
            for &i in &test {
                for &j in &train {
                    assert_ne!(m.samples[i].subject_id, m.samples[j].subject_id);
                }
            }
        }
        assert_eq!(covered, m.samples.len());
    }

    #[test]
    fn seed_controls_assignment() {
        let m = manifest(20);
        assert_eq!(make_folds(&m, 4, 3).unwrap(), make_folds(&m, 4, 3).unwrap());
        assert_ne!(make_folds(&m, 4, 3).unwrap(), make_folds(&m, 4, 4).unwrap());
    }
}
