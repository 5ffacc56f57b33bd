use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Corpus;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8.0,
            val: 1.0,
            test: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Dialogue-level train/validation/test partition.
///
/// Dialogues are shuffled with a seeded RNG; validation and test sizes are
/// rounded to nearest (at least one each) and train takes the remainder.
/// Within each subset dialogues keep their corpus order.
pub fn split_dialogues(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Split> {
    let n = corpus.dialogues().len();
    if n == 0 {
        return Err(Error::usage("cannot split an empty corpus"));
    }
    if n < 3 {
        return Err(Error::usage(format!(
            "need at least 3 dialogues to split, got {n}"
        )));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if !(ratios.train > 0.0 && ratios.val >= 0.0 && ratios.test >= 0.0 && total.is_finite()) {
        return Err(Error::usage(format!("invalid split ratios {ratios:?}")));
    }
    let share = |r: f64| -> usize {
        if r == 0.0 {
            0
        } else {
            ((n as f64 * r / total).round() as usize).max(1)
        }
    };
    let n_val = share(ratios.val);
    let n_test = share(ratios.test);
    if n_val + n_test >= n {
        return Err(Error::usage(format!(
            "split of {n} dialogues leaves no training data"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut test: Vec<usize> = order[n_val..n_val + n_test].to_vec();
    let mut train: Vec<usize> = order[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();

    Ok(Split {
        train: corpus.subset(&train),
        val: corpus.subset(&val),
        test: corpus.subset(&test),
    })
}
