use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

const FOLD_STREAM: u64 = 0x666f_6c64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub train_ids: Vec<u32>,
    pub val_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

/// Seeded k-fold split. The shuffled ids are cut into `k` near-equal
/// blocks; fold `f` tests on block `f`, validates on block `f + 1` and
/// trains on the rest. With `k < 3` there is no validation block.
pub fn make_folds(subject_ids: &[u32], k: usize, seed: u64) -> Result<Vec<FoldPlan>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if subject_ids.len() < k {
        return Err(Error::invalid(format!(
            "{} subjects cannot fill {k} folds",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != subject_ids.len() {
        return Err(Error::invalid("duplicate subject ids"));
    }
    ids.shuffle(&mut seeded(seed, &[FOLD_STREAM]));

    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut blocks = Vec::with_capacity(k);
    let mut at = 0;
    for b in 0..k {
        let len = base + usize::from(b < extra);
        blocks.push(ids[at..at + len].to_vec());
        at += len;
    }

    let sorted = |mut v: Vec<u32>| {
        v.sort_unstable();
        v
    };
    Ok((0..k)
        .map(|f| {
            let val_block = (k >= 3).then_some((f + 1) % k);
            let train = (0..k)
                .filter(|&b| b != f && Some(b) != val_block)
                .flat_map(|b| blocks[b].iter().copied())
                .collect();
            FoldPlan {
                fold_id: f,
                train_ids: sorted(train),
                val_ids: sorted(val_block.map(|b| blocks[b].clone()).unwrap_or_default()),
                test_ids: sorted(blocks[f].clone()),
            }
        })
        .collect())
}

/// `fold,role,subject_id` rows.
pub fn folds_csv(plans: &[FoldPlan]) -> String {
    let mut s = String::from("fold,role,subject_id\n");
    for p in plans {
        for (role, ids) in [("train", &p.train_ids), ("val", &p.val_ids), ("test", &p.test_ids)] {
            for id in ids {
                s.push_str(&format!("{},{role},{id}\n", p.fold_id));
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn twenty_subjects_split_12_4_4() {
        let ids: Vec<u32> = (0..20).collect();
        let plans = make_folds(&ids, 5, 7).unwrap();
        let mut tests = BTreeSet::new();
        for p in &plans {
            assert_eq!((p.train_ids.len(), p.val_ids.len(), p.test_ids.len()), (12, 4, 4));
            let all: BTreeSet<u32> = p.train_ids.iter().chain(&p.val_ids).chain(&p.test_ids).copied().collect();
            assert_eq!(all.len(), 20);
            for t in &p.test_ids {
                assert!(tests.insert(*t));
            }
        }
        assert_eq!(tests.len(), 20);
        assert_eq!(plans, make_folds(&ids, 5, 7).unwrap());
        assert_ne!(plans, make_folds(&ids, 5, 8).unwrap());
    }

    #[test]
    fn small_cohorts() {
        assert!(make_folds(&[1, 2, 3], 5, 0).is_err());
        let plans = make_folds(&[4, 9], 2, 0).unwrap();
        for p in &plans {
            assert_eq!((p.train_ids.len(), p.val_ids.len(), p.test_ids.len()), (1, 0, 1));
        }
    }
}
