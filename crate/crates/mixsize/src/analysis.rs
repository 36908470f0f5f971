//! Measurement suite: gradient correlation and variance across image sizes,
//! the scaled-center-crop evaluation protocol, and evaluation-size sweeps
//! with flop reporting.

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate, count_correct};
use crate::data::{plain_resized, substream, AugmentConfig, Dataset, STREAM_ANALYSIS};
use crate::elem::Elem;
use crate::model::{Mode, ResNet, MIN_INPUT_SIZE};
use crate::tensor::{crop2d, resize_plane, softmax_cross_entropy, Tape, Tensor};
use crate::{Error, Result};

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // positions i..=j share the average rank (1-based)
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Domain(
            "correlation undefined for a constant vector".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::shape_err!(
            "spearman: lengths {} vs {}",
            a.len(),
            b.len()
        ));
    }
    if a.len() < 2 {
        return Err(Error::Domain("spearman needs at least 2 observations".into()));
    }
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spearman: non-finite input".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointTag {
    Initial,
    Partial,
    Final,
}

impl std::fmt::Display for CheckpointTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointTag::Initial => "initial",
            CheckpointTag::Partial => "partial",
            CheckpointTag::Final => "final",
        };
        f.write_str(s)
    }
}

/// Gradient-correlation measurements for one checkpoint and size pair.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub sizes: (usize, usize),
    /// Mean ρ between the same image's gradients at the two sizes.
    pub rho_same_image_cross_size: f64,
    /// Mean ρ between different images' gradients at the first size.
    pub rho_diff_image_same_size: f64,
    /// Mean elementwise variance of gradient vectors across images, per size.
    pub var_per_size: Vec<(usize, f64)>,
    pub n_pairs: usize,
    pub checkpoint_tag: CheckpointTag,
    /// Per-pair values backing the means, for CSV emission.
    pub rho_same_pairs: Vec<f64>,
    pub rho_diff_pairs: Vec<f64>,
}

/// Whole-network gradient of the single-sample loss, flattened to f64 in
/// parameter-registry order.
pub fn sample_gradient<T: Elem>(
    model: &mut ResNet<T>,
    ds: &Dataset,
    index: usize,
    s: usize,
) -> Result<Vec<f64>> {
    model.zero_grads();
    let tape = Tape::new();
    let x = Tensor::new(&[1, 3, s, s], plain_resized::<T>(ds, index, s))?;
    let logits = model.forward(&tape, &x, Mode::Train)?;
    let loss = softmax_cross_entropy(&tape, &logits, &[ds.label(index)])?;
    tape.backward(&loss)?;
    let mut flat = Vec::with_capacity(model.param_count());
    for p in model.named_params() {
        match p.tensor.grad() {
            Some(g) => flat.extend(g.iter().map(|&v| v.to_f64())),
            None => flat.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
        }
    }
    model.zero_grads();
    Ok(flat)
}

/// Mean over coordinates of the across-vectors variance (population).
fn mean_elementwise_variance(vectors: &[Vec<f64>]) -> f64 {
    let n = vectors.len();
    let dim = vectors[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean: f64 = vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64;
        let var: f64 =
            vectors.iter().map(|v| (v[j] - mean) * (v[j] - mean)).sum::<f64>() / n as f64;
        total += var;
    }
    total / dim as f64
}

/// For `n_pairs` random image pairs (x, y): correlate x's gradients across
/// the two sizes and x-vs-y gradients at the first size. Per-sample gradients
/// (batch of 1) in train mode; the experiment runs on a model clone, so the
/// caller's running statistics survive.
pub fn grad_correlation_experiment<T: Elem>(
    model: &ResNet<T>,
    ds: &Dataset,
    sizes: (usize, usize),
    n_pairs: usize,
    seed: u64,
    checkpoint_tag: CheckpointTag,
) -> Result<CorrelationReport> {
    if n_pairs < 2 {
        return Err(Error::Config(format!("need n_pairs ≥ 2, got {n_pairs}")));
    }
    if ds.len() < 2 {
        return Err(Error::Data("need at least 2 images".into()));
    }
    let (s1, s2) = sizes;
    if s1 < MIN_INPUT_SIZE || s2 < MIN_INPUT_SIZE {
        return Err(Error::Config(format!(
            "sizes {s1},{s2} below the model minimum {MIN_INPUT_SIZE}"
        )));
    }
    let mut work = model.deep_clone();
    let mut rng = substream(seed, STREAM_ANALYSIS, 0);

    let mut rho_same_pairs = Vec::with_capacity(n_pairs);
    let mut rho_diff_pairs = Vec::with_capacity(n_pairs);
    let mut grads_s1: Vec<Vec<f64>> = Vec::with_capacity(n_pairs);
    let mut grads_s2: Vec<Vec<f64>> = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = rand::Rng::gen_range(&mut rng, 0..ds.len());
        let y = loop {
            let y = rand::Rng::gen_range(&mut rng, 0..ds.len());
            if y != x {
                break y;
            }
        };
        let gx1 = sample_gradient(&mut work, ds, x, s1)?;
        let gx2 = sample_gradient(&mut work, ds, x, s2)?;
        let gy1 = sample_gradient(&mut work, ds, y, s1)?;
        rho_same_pairs.push(spearman(&gx1, &gx2)?);
        rho_diff_pairs.push(spearman(&gx1, &gy1)?);
        grads_s1.push(gx1);
        grads_s2.push(gx2);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut var_per_size = vec![(s1, mean_elementwise_variance(&grads_s1))];
    if s2 != s1 {
        var_per_size.push((s2, mean_elementwise_variance(&grads_s2)));
    }
    var_per_size.sort_by_key(|&(s, _)| s);
    Ok(CorrelationReport {
        sizes,
        rho_same_image_cross_size: mean(&rho_same_pairs),
        rho_diff_image_same_size: mean(&rho_diff_pairs),
        var_per_size,
        n_pairs,
        checkpoint_tag,
        rho_same_pairs,
        rho_diff_pairs,
    })
}

/// Scaled center crop: resize so the smallest dimension is ⌊8S/7⌋ (aspect
/// preserved, other dimension rounded to nearest), then crop the center S×S.
pub fn eval_preprocess<T: Elem>(image: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(crate::shape_err!(
            "eval_preprocess: expected [C,H,W], got {:?}",
            image.shape()
        ));
    };
    if s == 0 || h == 0 || w == 0 {
        return Err(Error::Domain("eval_preprocess: empty dimensions".into()));
    }
    let target_min = 8 * s / 7;
    let (rh, rw) = if h <= w {
        let scaled = (w as f64 * target_min as f64 / h as f64).round() as usize;
        (target_min, scaled.max(target_min))
    } else {
        let scaled = (h as f64 * target_min as f64 / w as f64).round() as usize;
        (scaled.max(target_min), target_min)
    };
    let mut resized = vec![T::zero(); c * rh * rw];
    {
        let data = image.data();
        for ci in 0..c {
            resize_plane(
                &data[ci * h * w..(ci + 1) * h * w],
                h, w, rh, rw,
                &mut resized[ci * rh * rw..(ci + 1) * rh * rw],
            );
        }
    }
    let tape = Tape::inactive();
    let t = Tensor::new(&[1, c, rh, rw], resized)?;
    let cropped = crop2d(&tape, &t, (rh - s) / 2, (rw - s) / 2, s, s)?;
    Tensor::new(&[c, s, s], cropped.to_vec())
}

/// Assemble an evaluation batch with the scaled-center-crop protocol.
pub fn eval_batch<T: Elem>(
    ds: &Dataset,
    indices: &[usize],
    s: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let img_len = 3 * s * s;
    let mut data = vec![T::zero(); indices.len() * img_len];
    let mut labels = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let full = Tensor::new(
            &[3, crate::data::IMAGE_SIDE, crate::data::IMAGE_SIDE],
            ds.normalized_image::<T>(idx),
        )?;
        let img = eval_preprocess(&full, s)?;
        data[slot * img_len..(slot + 1) * img_len].copy_from_slice(&img.data());
        labels.push(ds.label(idx));
    }
    Ok((Tensor::new(&[indices.len(), 3, s, s], data)?, labels))
}

/// Top-1 accuracy at size `s` using the scaled-center-crop protocol.
pub fn evaluate<T: Elem>(
    model: &mut ResNet<T>,
    ds: &Dataset,
    s: usize,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation dataset is empty".into()));
    }
    let tape = Tape::inactive();
    let mut correct = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (batch, labels) = eval_batch::<T>(ds, chunk, s)?;
        let logits = model.forward(&tape, &batch, Mode::Eval)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub top1: f64,
    pub flops: u64,
    pub calibrated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub calibrate_each: bool,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            calibrate_each: false,
            calib_batches: crate::calib::DEFAULT_CALIB_BATCHES,
            calib_batch_size: 64,
            eval_batch_size: 256,
            seed: 0,
        }
    }
}

/// Accuracy and flops at each size. Calibration (when enabled) happens on a
/// clone per size, so the input model never changes.
pub fn eval_size_sweep<T: Elem>(
    model: &ResNet<T>,
    train: &Dataset,
    test: &Dataset,
    sizes: &[usize],
    cfg: &SweepConfig,
    augment_cfg: &AugmentConfig,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one size".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let mut work = model.deep_clone();
        if cfg.calibrate_each {
            calibrate(
                &mut work, train, s,
                cfg.calib_batches, cfg.calib_batch_size, cfg.seed, augment_cfg,
            )?;
        }
        let top1 = evaluate(&mut work, test, s, cfg.eval_batch_size)?;
        rows.push(SweepRow {
            size: s,
            top1,
            flops: model.flops(s)?,
            calibrated: cfg.calibrate_each,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::ResNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spearman_basic_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-12);
        // direct rank-then-Pearson by hand: ranks are the values themselves,
        // cov 8, variances 10 and 10
        let b = [2.0, 1.0, 4.0, 3.0, 5.0];
        assert!((spearman(&a, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_tie_handling() {
        // a = (1,1,2) → ranks (1.5, 1.5, 3); b = (3,5,4) → ranks (1,3,2)
        let rho = spearman(&[1.0, 1.0, 2.0], &[3.0, 5.0, 4.0]).unwrap();
        // Pearson((1.5,1.5,3),(1,3,2)) = 0.5/ (sqrt(1.5)·sqrt(2))
        let expect = 0.5 / (1.5f64.sqrt() * 2.0f64.sqrt());
        assert!((rho - expect).abs() < 1e-12);
    }

    #[test]
    fn spearman_rejects_degenerate_input() {
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(spearman(&[1.0], &[2.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn spearman_is_symmetric_and_monotone_invariant() {
        let a = [0.3, -1.0, 2.5, 0.1, 0.9, -0.4];
        let b = [1.0, 0.2, 0.4, 2.0, -0.3, 0.6];
        let ab = spearman(&a, &b).unwrap();
        let ba = spearman(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // rank correlation only sees order: applying exp() changes nothing
        let a_exp: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        assert!((spearman(&a_exp, &b).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn eval_preprocess_sizes() {
        // S=224 from a 384×512 image: smallest dim → 256
        let img = Tensor::<f32>::full(&[3, 384, 512], 0.5);
        let out = eval_preprocess(&img, 224).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
        // S=160 → ⌊1280/7⌋ = 182
        assert_eq!(8 * 160 / 7, 182);
        let out = eval_preprocess(&img, 160).unwrap();
        assert_eq!(out.shape(), &[3, 160, 160]);
        // constant image stays constant through resize+crop
        for v in out.to_vec() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_preprocess_centers_the_crop() {
        // 36×36 input at S=32: target min is also 36, so resize is identity
        // and the crop starts at (2,2)
        let mut data = vec![0.0f64; 36 * 36];
        for y in 0..36 {
            for x in 0..36 {
                data[y * 36 + x] = (y * 100 + x) as f64;
            }
        }
        let img = Tensor::new(&[1, 36, 36], data.clone()).unwrap();
        let out = eval_preprocess(&img, 32).unwrap();
        assert_eq!(out.shape(), &[1, 32, 32]);
        let got = out.to_vec();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(got[y * 32 + x], data[(y + 2) * 36 + (x + 2)]);
            }
        }
    }

    #[test]
    fn same_image_same_size_correlates_perfectly() {
        let cfg = ResNetConfig::new(8, 4, 8).unwrap();
        let mut model =
            ResNet::<f64>::build(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ds = synth_dataset(16, 8, 3).unwrap();
        let g1 = sample_gradient(&mut model, &ds, 5, 16).unwrap();
        let g2 = sample_gradient(&mut model, &ds, 5, 16).unwrap();
        assert!((spearman(&g1, &g2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_report_bounds_and_model_isolation() {
        let cfg = ResNetConfig::new(8, 4, 8).unwrap();
        let model = ResNet::<f64>::build(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let ds = synth_dataset(24, 8, 5).unwrap();
        let report =
            grad_correlation_experiment(&model, &ds, (24, 16), 3, 11, CheckpointTag::Initial)
                .unwrap();
        assert!(report.rho_same_image_cross_size.abs() <= 1.0);
        assert!(report.rho_diff_image_same_size.abs() <= 1.0);
        assert_eq!(report.rho_same_pairs.len(), 3);
        assert_eq!(report.var_per_size.len(), 2);
        for &(_, v) in &report.var_per_size {
            assert!(v >= 0.0);
        }
        // the caller's model must keep its untouched BN stats
        let mut m = model;
        m.for_each_bn(|name, bn| {
            assert!(!bn.stats.initialized, "{name} stats were touched");
        });
        assert!(grad_correlation_experiment(&m, &ds, (24, 16), 1, 1, CheckpointTag::Initial)
            .is_err());
    }

    #[test]
    fn sweep_reduces_to_plain_evaluation() {
        let cfg = ResNetConfig::new(8, 4, 6).unwrap();
        let model = ResNet::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let ds = synth_dataset(48, 6, 7).unwrap();
        let sweep_cfg = SweepConfig {
            calibrate_each: true,
            calib_batches: 2,
            calib_batch_size: 8,
            eval_batch_size: 16,
            seed: 3,
        };
        let rows = eval_size_sweep(
            &model, &ds, &ds, &[16], &sweep_cfg, &AugmentConfig::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        let mut manual = model.deep_clone();
        calibrate(&mut manual, &ds, 16, 2, 8, 3, &AugmentConfig::default()).unwrap();
        let direct = evaluate(&mut manual, &ds, 16, 16).unwrap();
        assert_eq!(rows[0].top1, direct);
        assert!(rows[0].calibrated);
        // flop column ratio S vs 2S is ≈ 4
        let rows2 = eval_size_sweep(
            &model, &ds, &ds, &[16, 32], &sweep_cfg, &AugmentConfig::default(),
        )
        .unwrap();
        let ratio = rows2[1].flops as f64 / rows2[0].flops as f64;
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn empty_sweep_rejected() {
        let cfg = ResNetConfig::new(8, 4, 6).unwrap();
        let model = ResNet::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let ds = synth_dataset(12, 6, 7).unwrap();
        assert!(eval_size_sweep(
            &model, &ds, &ds, &[],
            &SweepConfig::default(), &AugmentConfig::default()
        )
        .is_err());
    }
}
