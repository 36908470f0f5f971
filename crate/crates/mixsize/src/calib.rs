//! Forward-only batch-norm recalibration at a target evaluation size.
//!
//! Instead of fine-tuning, every BN layer's running statistics are replaced
//! by the exact per-channel mean and variance of its input activations over a
//! stream of training-augmented batches resized to the target size. No
//! gradients, no parameter updates.

use crate::data::{make_batch, shuffled_indices, substream, AugmentConfig, Dataset, STREAM_CALIB};
use crate::elem::Elem;
use crate::model::{ResNet, MIN_INPUT_SIZE};
use crate::tensor::{StatsAccum, Tape, Tensor};
use crate::{Error, Result};

pub const DEFAULT_CALIB_BATCHES: usize = 200;

/// Deterministic batch `batch_idx` of the calibration stream: indices and
/// augmentation draws both come from a substream keyed by the batch index,
/// so any consumer can regenerate the exact same batches.
pub fn calibration_batch<T: Elem>(
    ds: &Dataset,
    s: usize,
    batch_size: usize,
    seed: u64,
    cfg: &AugmentConfig,
    batch_idx: u64,
) -> Result<Tensor<T>> {
    let mut rng = substream(seed, STREAM_CALIB, batch_idx);
    let indices: Vec<usize> =
        (0..batch_size).map(|_| rand::Rng::gen_range(&mut rng, 0..ds.len())).collect();
    let (batch, _) = make_batch::<T>(ds, &indices, s, 1, cfg, &mut rng)?;
    Ok(batch)
}

/// Re-estimate every BN layer's statistics at size `s` over `num_batches`
/// batches of `batch_size` training samples. Only BN statistics change; all
/// parameters stay bit-identical.
pub fn calibrate<T: Elem>(
    model: &mut ResNet<T>,
    ds: &Dataset,
    s: usize,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<()> {
    if num_batches == 0 {
        return Err(Error::Config("calibration needs at least one batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("calibration batch size must be ≥ 1".into()));
    }
    if s < MIN_INPUT_SIZE {
        return Err(Error::Config(format!(
            "calibration size {s} below the model minimum {MIN_INPUT_SIZE}"
        )));
    }
    if ds.is_empty() {
        return Err(Error::Data("calibration dataset is empty".into()));
    }
    let mut accums: Vec<StatsAccum> =
        model.bn_channels().into_iter().map(StatsAccum::new).collect();
    let tape = Tape::inactive();
    for b in 0..num_batches {
        let batch = calibration_batch::<T>(ds, s, batch_size, seed, cfg, b as u64)?;
        model.forward_capture(&tape, &batch, &mut accums)?;
    }
    let mut idx = 0;
    model.for_each_bn(|_, bn| {
        let (mean, var) = accums[idx]
            .mean_var()
            .expect("capture ran at least one batch");
        bn.stats.set(mean, var);
        idx += 1;
    });
    Ok(())
}

/// Clear every BN layer back to uninitialized; eval then fails with
/// calibration-required until stats are re-estimated (by training or
/// [`calibrate`]).
pub fn reset_bn<T: Elem>(model: &mut ResNet<T>) {
    model.for_each_bn(|_, bn| {
        let channels = bn.stats.channels();
        bn.stats = crate::tensor::BnStats::new(channels);
    });
}

/// Evaluate top-1 accuracy on plainly resized images (no augmentation, no
/// crop protocol) — the quick loop used by calibration self-tests.
pub fn quick_accuracy<T: Elem>(
    model: &mut ResNet<T>,
    ds: &Dataset,
    s: usize,
    batch_size: usize,
) -> Result<f64> {
    let tape = Tape::inactive();
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = crate::data::plain_batch::<T>(ds, chunk, s)?;
        let logits = model.forward(&tape, &batch, crate::model::Mode::Eval)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Rows of `logits` whose argmax equals the label.
pub fn count_correct<T: Elem>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let data = logits.data();
    data.chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Sequential eval batches over the whole set (deterministic order).
pub fn eval_index_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<usize>>().chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Seeded epoch order helper shared by training and calibration oracles.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = substream(seed, crate::data::STREAM_SHUFFLE, epoch);
    shuffled_indices(n, &mut rng)
}
