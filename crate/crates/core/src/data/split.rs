use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all
            .iter()
            .any(|r| r.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
            || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9
        {
            return Err(Error::RatioError((self.train, self.val, self.test)));
        }
        Ok(())
    }
}

/// Stratified, seed-deterministic train/val/test partition.
///
/// Records of `holdout_classes` go to the test split only. Within every other class the
/// records are shuffled and cut at `round(train·n)` and `round(val·n)`. Each partition
/// keeps manifest order.
pub fn split(
    index: &DatasetIndex,
    ratios: SplitRatios,
    seed: u64,
    holdout_classes: &[String],
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    ratios.validate()?;
    let mut holdout = vec![false; index.classes.len()];
    for name in holdout_classes {
        let c = index
            .class_by_name(name)
            .ok_or_else(|| Error::UnknownClass(name.clone()))?;
        holdout[c.id] = true;
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); index.classes.len()];
    for (i, r) in index.records.iter().enumerate() {
        by_class[r.label.id].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if holdout[class] {
            test.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((ratios.train * n as f64).round() as usize).min(n);
        let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
        test.extend_from_slice(&members[n_train + n_val..]);
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        train.extend_from_slice(&members[..n_train]);
    }

    let take = |mut ids: Vec<usize>| {
        ids.sort_unstable();
        index.with_records(ids.into_iter().map(|i| index.records[i].clone()).collect())
    };
    Ok((take(train), take(val), take(test)))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::path::PathBuf;

    use proptest::prelude::*;

    use super::*;
    use crate::types::{MaterialClass, SampleRecord, WavelengthAxis};

    fn index(per_class: &[usize]) -> DatasetIndex {
        let names: Vec<String> = (0..per_class.len()).map(|i| format!("c{i}")).collect();
        let classes = MaterialClass::from_names(&names);
        let mut records = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                let row = records.len();
                records.push(SampleRecord {
                    row,
                    image_path: PathBuf::from(format!("{row}.png")),
                    spectrum_path: PathBuf::from(format!("{row}.csv")),
                    label: classes[c].clone(),
                    condition: String::new(),
                    property_value: None,
                });
            }
        }
        DatasetIndex {
            records,
            classes,
            axis: WavelengthAxis::default(),
            norm_constant: 1.0,
        }
    }

    fn rows(idx: &DatasetIndex) -> Vec<usize> {
        idx.records.iter().map(|r| r.row).collect()
    }

    #[test]
    fn default_ratios_on_600_records() {
        let idx = index(&[100; 6]);
        let (tr, va, te) = split(&idx, SplitRatios::default(), 1, &[]).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (480, 60, 60));
        for c in 0..6 {
            assert_eq!(tr.class_census()[c], 80);
            assert_eq!(va.class_census()[c], 10);
        }
    }

    #[test]
    fn holdout_class_only_in_test() {
        let idx = index(&[20, 20, 20]);
        let (tr, va, te) = split(&idx, SplitRatios::default(), 1, &["c2".to_string()]).unwrap();
        assert_eq!(tr.class_census()[2], 0);
        assert_eq!(va.class_census()[2], 0);
        assert_eq!(te.class_census()[2], 20);
        assert!(matches!(
            split(&idx, SplitRatios::default(), 1, &["turf".to_string()]),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn ratio_validation() {
        let idx = index(&[10]);
        for r in [(0.8, 0.1, 0.2), (1.0, 0.0, 0.0), (0.9, 0.2, -0.1)] {
            let ratios = SplitRatios {
                train: r.0,
                val: r.1,
                test: r.2,
            };
            assert!(matches!(split(&idx, ratios, 0, &[]), Err(Error::RatioError(_))));
        }
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_exhaustive_and_seeded(
            counts in prop::collection::vec(1usize..40, 1..6),
            train in 0.05f64..0.9,
            val_frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let val = (1.0 - train) * val_frac;
            let ratios = SplitRatios { train, val, test: 1.0 - train - val };
            let idx = index(&counts);
            let (a, b, c) = split(&idx, ratios, seed, &[]).unwrap();
            let all: Vec<usize> = rows(&a).into_iter().chain(rows(&b)).chain(rows(&c)).collect();
            let set: HashSet<usize> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), idx.len());
            prop_assert_eq!(set.len(), idx.len());
            let (a2, b2, c2) = split(&idx, ratios, seed, &[]).unwrap();
            prop_assert_eq!(rows(&a), rows(&a2));
            prop_assert_eq!(rows(&b), rows(&b2));
            prop_assert_eq!(rows(&c), rows(&c2));
        }
    }
}
