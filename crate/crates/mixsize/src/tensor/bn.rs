//! Batch normalization over `[N,C,H,W]` with per-channel affine parameters.

use crate::elem::Elem;
use crate::tensor::{dims4, finite_guard, Tape, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a batch-norm layer treats statistics for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the stored running statistics; requires them to exist.
    Eval,
    /// Normalize with batch statistics but leave the running estimates alone.
    /// Forward-only: no gradients are recorded in this mode.
    Capture,
}

/// Running per-channel statistics, kept in f64 regardless of the compute type.
///
/// `initialized` stays false until the first train-mode update, which copies
/// the batch statistics outright; later updates blend with momentum 0.1.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Replace the estimates wholesale, e.g. from a calibration pass.
    pub fn set(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.mean.len());
        assert_eq!(var.len(), self.var.len());
        self.mean = mean;
        self.var = var;
        self.initialized = true;
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        if self.initialized {
            for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in self.var.iter_mut().zip(batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        } else {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
            self.initialized = true;
        }
    }
}

/// Exact aggregation of per-channel moments across many batches.
///
/// Keeps element count, sum and sum of squares so the final mean/variance
/// equal those of all batches concatenated, independent of batch sizes.
#[derive(Debug, Clone)]
pub struct StatsAccum {
    count: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl StatsAccum {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; channels],
            sumsq: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.sum.len()
    }

    /// Elements per channel accumulated so far.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add<T: Elem>(&mut self, x: &Tensor<T>) -> Result<()> {
        let (n, c, h, w) = dims4(x, "StatsAccum::add")?;
        if c != self.channels() {
            return Err(crate::shape_err!(
                "StatsAccum::add: {c} channels, accumulator has {}",
                self.channels()
            ));
        }
        let xd = x.data();
        let spatial = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let plane = &xd[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
                let mut s = 0.0;
                let mut sq = 0.0;
                for &v in plane {
                    let v = v.to_f64();
                    s += v;
                    sq += v * v;
                }
                self.sum[ci] += s;
                self.sumsq[ci] += sq;
            }
        }
        self.count += (n * spatial) as u64;
        Ok(())
    }

    /// Aggregate mean and population variance; `None` until data was added.
    pub fn mean_var(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        if self.count == 0 {
            return None;
        }
        let inv = 1.0 / self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|&s| s * inv).collect();
        let var: Vec<f64> = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| (sq * inv - m * m).max(0.0))
            .collect();
        Some((mean, var))
    }
}

/// Per-channel mean and population variance of a `[N,C,H,W]` tensor, in f64.
pub fn batch_channel_stats<T: Elem>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = dims4(x, "batch_channel_stats")?;
    let m = n * h * w;
    if m == 0 {
        return Err(crate::domain_err!("batch_channel_stats: empty batch"));
    }
    let xd = x.data();
    let spatial = h * w;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        let mut sq = 0.0;
        for ni in 0..n {
            let plane = &xd[(ni * c + ci) * spatial..(ni * c + ci + 1) * spatial];
            for &v in plane {
                let v = v.to_f64();
                s += v;
                sq += v * v;
            }
        }
        let mu = s / m as f64;
        mean[ci] = mu;
        var[ci] = (sq / m as f64 - mu * mu).max(0.0);
    }
    Ok((mean, var))
}

/// Batch normalization: `y = γ·(x−μ)/√(σ²+ε) + β`.
///
/// In [`BnMode::Train`] the batch moments feed both the normalization and the
/// running-stat update, and the backward pass differentiates through them.
/// [`BnMode::Eval`] uses the stored running stats and fails with
/// [`Error::CalibrationRequired`] if none exist yet. [`BnMode::Capture`]
/// normalizes with batch moments, touches nothing, and records no gradients;
/// pass `accum` to also fold this batch into an exact aggregate.
pub fn batchnorm2d<T: Elem>(
    tape: &Tape,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats,
    mode: BnMode,
    accum: Option<&mut StatsAccum>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(crate::shape_err!(
            "batchnorm2d: gamma {:?} / beta {:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    if stats.channels() != c {
        return Err(crate::shape_err!(
            "batchnorm2d: running stats have {} channels, input {c}",
            stats.channels()
        ));
    }

    let (mean, var) = match mode {
        BnMode::Train | BnMode::Capture => batch_channel_stats(x)?,
        BnMode::Eval => {
            if !stats.initialized {
                return Err(Error::CalibrationRequired(
                    "batch-norm running statistics were never set; train or calibrate first"
                        .into(),
                ));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };
    if mode == BnMode::Train {
        stats.update(&mean, &var);
    }
    if let Some(acc) = accum {
        acc.add(x)?;
    }

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();

    let spatial = h * w;
    let mut out = vec![T::zero(); n * c * spatial];
    {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * spatial;
                let (mu, istd, g, b) = (mean_t[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in 0..spatial {
                    out[base + i] = (xd[base + i] - mu) * istd * g + b;
                }
            }
        }
    }

    let track = mode != BnMode::Capture
        && tape.is_recording()
        && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    let y = Tensor::from_op(vec![n, c, h, w], out, track);
    finite_guard("batchnorm2d", &y)?;
    if track {
        let x = x.clone();
        let gamma = gamma.clone();
        let beta = beta.clone();
        let y_h = y.clone();
        let through_batch = mode == BnMode::Train;
        tape.push(Box::new(move || {
            let Some(dy) = y_h.grad() else { return };
            let xd = x.data();
            let gd = gamma.data();
            let m = (n * spatial) as f64;
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = if x.requires_grad() {
                Some(vec![T::zero(); xd.len()])
            } else {
                None
            };
            for ci in 0..c {
                let (mu, istd) = (mean_t[ci], inv_std[ci]);
                // channel-wide reductions: Σdy and Σdy·x̂
                let mut sum_dy = T::zero();
                let mut sum_dy_xh = T::zero();
                for ni in 0..n {
                    let base = (ni * c + ci) * spatial;
                    for i in 0..spatial {
                        let g = dy[base + i];
                        sum_dy += g;
                        sum_dy_xh += g * (xd[base + i] - mu) * istd;
                    }
                }
                dgamma[ci] = sum_dy_xh;
                dbeta[ci] = sum_dy;
                if let Some(dx) = dx.as_deref_mut() {
                    let scale = gd[ci] * istd;
                    if through_batch {
                        let inv_m = T::from_f64(1.0 / m);
                        let mean_dy = sum_dy * inv_m;
                        let mean_dy_xh = sum_dy_xh * inv_m;
                        for ni in 0..n {
                            let base = (ni * c + ci) * spatial;
                            for i in 0..spatial {
                                let xh = (xd[base + i] - mu) * istd;
                                dx[base + i] =
                                    scale * (dy[base + i] - mean_dy - xh * mean_dy_xh);
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * c + ci) * spatial;
                            for i in 0..spatial {
                                dx[base + i] = scale * dy[base + i];
                            }
                        }
                    }
                }
            }
            drop(xd);
            drop(gd);
            if gamma.requires_grad() {
                gamma.accumulate_grad(&dgamma);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(&dbeta);
            }
            if let Some(dx) = dx {
                x.accumulate_grad(&dx);
            }
        }));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * c * h * w).map(|_| rng.gen_range(-2.0..3.0)).collect();
        Tensor::new(&[n, c, h, w], data).unwrap()
    }

    #[test]
    fn train_output_is_standardized() {
        let tape = Tape::inactive();
        let x = random_input(4, 3, 5, 5, 1);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut stats = BnStats::new(3);
        let y = batchnorm2d(&tape, &x, &gamma, &beta, &mut stats, BnMode::Train, None).unwrap();
        let (mean, var) = batch_channel_stats(&y).unwrap();
        for ci in 0..3 {
            assert!(mean[ci].abs() < 1e-12);
            assert!((var[ci] - 1.0).abs() < 1e-4, "var {} off 1", var[ci]);
        }
        assert!(stats.initialized);
    }

    #[test]
    fn first_update_copies_then_blends() {
        let tape = Tape::inactive();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut stats = BnStats::new(2);

        let x1 = random_input(3, 2, 4, 4, 2);
        let (m1, v1) = batch_channel_stats(&x1).unwrap();
        batchnorm2d(&tape, &x1, &gamma, &beta, &mut stats, BnMode::Train, None).unwrap();
        assert_eq!(stats.mean, m1);
        assert_eq!(stats.var, v1);

        let x2 = random_input(3, 2, 4, 4, 3);
        let (m2, v2) = batch_channel_stats(&x2).unwrap();
        batchnorm2d(&tape, &x2, &gamma, &beta, &mut stats, BnMode::Train, None).unwrap();
        for ci in 0..2 {
            let expect_m = 0.9 * m1[ci] + 0.1 * m2[ci];
            let expect_v = 0.9 * v1[ci] + 0.1 * v2[ci];
            assert!((stats.mean[ci] - expect_m).abs() < 1e-12);
            assert!((stats.var[ci] - expect_v).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_without_stats_needs_calibration() {
        let tape = Tape::inactive();
        let x = random_input(2, 2, 3, 3, 4);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut stats = BnStats::new(2);
        let err = batchnorm2d(&tape, &x, &gamma, &beta, &mut stats, BnMode::Eval, None)
            .unwrap_err();
        assert!(matches!(err, Error::CalibrationRequired(_)));
    }

    #[test]
    fn capture_leaves_running_stats_untouched() {
        let tape = Tape::inactive();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut stats = BnStats::new(2);
        stats.set(vec![0.3, -0.1], vec![2.0, 0.5]);
        let before = stats.clone();
        let x = random_input(2, 2, 3, 3, 5);
        let mut acc = StatsAccum::new(2);
        batchnorm2d(&tape, &x, &gamma, &beta, &mut stats, BnMode::Capture, Some(&mut acc))
            .unwrap();
        assert_eq!(stats, before);
        assert_eq!(acc.count(), 2 * 9);
    }

    #[test]
    fn accum_matches_concatenated_batches() {
        let a = random_input(2, 3, 4, 4, 6);
        let b = random_input(5, 3, 4, 4, 7);
        let mut acc = StatsAccum::new(3);
        acc.add(&a).unwrap();
        acc.add(&b).unwrap();
        let (m, v) = acc.mean_var().unwrap();

        let mut joined = a.to_vec();
        joined.extend(b.to_vec());
        let cat = Tensor::new(&[7, 3, 4, 4], joined).unwrap();
        let (me, ve) = batch_channel_stats(&cat).unwrap();
        for ci in 0..3 {
            assert!((m[ci] - me[ci]).abs() < 1e-12);
            assert!((v[ci] - ve[ci]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_uses_stored_stats() {
        let tape = Tape::inactive();
        let gamma = Tensor::new(&[1], vec![2.0]).unwrap();
        let beta = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut stats = BnStats::new(1);
        stats.set(vec![3.0], vec![4.0]);
        let x = Tensor::new(&[1, 1, 1, 2], vec![3.0, 5.0]).unwrap();
        let y = batchnorm2d(&tape, &x, &gamma, &beta, &mut stats, BnMode::Eval, None).unwrap();
        let istd = 1.0 / (4.0f64 + BN_EPS).sqrt();
        let expect = [1.0, 2.0 * 2.0 * istd + 1.0];
        for (got, want) in y.to_vec().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}
