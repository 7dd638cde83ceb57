use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const N_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ids: Vec<i64>,
    pub test_ids: Vec<i64>,
    pub folds: Vec<Vec<i64>>,
}

impl SplitPlan {
    pub fn fold_of(&self, id: i64) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&id))
    }
}

/// `round(n / 5)` without floating point.
pub fn test_size(n: usize) -> usize {
    (n + 2) / 5
}

/// Shuffle `ids` with the `split` substream of `seed`; the first 80% train,
/// the rest test; folds are assigned round-robin over the shuffled train
/// list.
pub fn make_split_and_folds(ids: &[i64], seed: u64) -> Result<SplitPlan> {
    if ids.len() < N_FOLDS {
        return Err(Error::Invalid(format!("{} stays cannot form {N_FOLDS} folds", ids.len())));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Invalid("split ids are not distinct".into()));
    }
    let mut shuffled = ids.to_vec();
    seed::shuffle(&mut shuffled, &mut seed::substream(seed, "split"));
    let n_train = ids.len() - test_size(ids.len());
    let test_ids = shuffled.split_off(n_train);
    let folds = round_robin(&shuffled);
    Ok(SplitPlan {
        seed,
        train_ids: shuffled,
        test_ids,
        folds,
    })
}

/// Class-stratified variant: each class is shuffled and split separately and
/// the two train lists are interleaved in shuffled order before fold
/// assignment.
pub fn make_stratified_split(ids: &[i64], labels: &[bool], seed: u64) -> Result<SplitPlan> {
    if ids.len() != labels.len() {
        return Err(Error::Invalid("ids and labels differ in length".into()));
    }
    let base = make_split_and_folds(ids, seed)?;
    let label_of: std::collections::HashMap<i64, bool> = ids.iter().copied().zip(labels.iter().copied()).collect();
    let order: Vec<i64> = base.train_ids.iter().chain(&base.test_ids).copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [true, false] {
        let members: Vec<i64> = order.iter().copied().filter(|id| label_of[id] == class).collect();
        let n_train = members.len() - test_size(members.len());
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    let rank: std::collections::HashMap<i64, usize> = order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    train.sort_by_key(|id| rank[id]);
    test.sort_by_key(|id| rank[id]);
    let folds = round_robin(&train);
    Ok(SplitPlan {
        seed,
        train_ids: train,
        test_ids: test,
        folds,
    })
}

fn round_robin(train: &[i64]) -> Vec<Vec<i64>> {
    let mut folds = vec![Vec::new(); N_FOLDS];
    for (i, &id) in train.iter().enumerate() {
        folds[i % N_FOLDS].push(id);
    }
    folds
}
