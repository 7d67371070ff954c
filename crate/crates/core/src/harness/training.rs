use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};
use crate::error::Error;
use crate::losses::LossBreakdown;

/// One CSV row of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub vqa: f64,
    pub infl: f64,
    pub crit: f64,
    pub joint: f64,
}

impl LossLogRow {
    pub fn new(stage: &str, epoch: usize, step: usize, b: &LossBreakdown) -> Self {
        LossLogRow {
            stage: stage.to_string(),
            epoch,
            step,
            vqa: b.vqa,
            infl: b.infl,
            crit: b.crit,
            joint: b.joint,
        }
    }
}

/// Seeded shuffles of `0..n`, one per epoch, cut into batches.
pub struct Batcher {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_size: usize,
}

impl Batcher {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Batcher {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            batch_size: batch_size.max(1),
        }
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Re-labels numerical failures during training with stage/step context.
pub fn divergence(stage: &str, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Divergence {
            stage: stage.to_string(),
            step,
            msg: err.to_string(),
        },
        other => other,
    }
}

/// Adds `src` into `acc` entrywise.
pub fn accumulate(acc: &mut [Array], src: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(src) {
        for (x, y) in a.data_mut().iter_mut().zip(g.value().data()) {
            *x += y;
        }
    }
}

/// Derives an independent seed for a named sub-stream.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
